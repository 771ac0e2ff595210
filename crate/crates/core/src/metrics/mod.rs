//! Run logs and the metrics computed from them.

mod capacity;
mod export;
mod smooth;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::{InstanceId, RequestId, Seconds};

pub use capacity::{capacity_search, capacity_search_by, format_gain, CapacityError, CapacityResult, Slo};
pub use export::{probes_csv, requests_csv, series_csv, summary_text, write_report, PROBE_HEADER, REQUEST_HEADER, SERIES_HEADER};
pub use smooth::smooth;

/// Lifecycle events recorded by a run, in emission order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum LogEvent {
    Arrived { t: Seconds, id: RequestId },
    /// The request reached its instance's waiting queue.
    Dispatched { t: Seconds, id: RequestId, instance: InstanceId },
    FirstToken { t: Seconds, id: RequestId },
    Preempted { t: Seconds, id: RequestId, instance: InstanceId },
    Finished { t: Seconds, id: RequestId },
    Fallback { t: Seconds, id: RequestId },
    ProvisionRequested { t: Seconds, instance: InstanceId },
    InstanceAdded { t: Seconds, instance: InstanceId },
}

/// Cross-instance free-block statistics taken at one dispatch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MemorySample {
    pub t: Seconds,
    pub free_mean: f64,
    pub free_variance: f64,
    pub cumulative_preemptions: u64,
}

impl MemorySample {
    pub fn from_free_blocks(t: Seconds, free: &[u64], cumulative_preemptions: u64) -> Self {
        let n = free.len().max(1) as f64;
        let mean = free.iter().map(|&f| f as f64).sum::<f64>() / n;
        let var = free.iter().map(|&f| (f as f64 - mean).powi(2)).sum::<f64>() / n;
        Self {
            t,
            free_mean: mean,
            free_variance: var,
            cumulative_preemptions,
        }
    }
}

/// One probed request: predictions on every instance at dispatch time,
/// joined with realized outcomes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeRow {
    pub request_id: RequestId,
    pub selected: InstanceId,
    pub predicted: BTreeMap<InstanceId, Seconds>,
    pub realized: Option<Seconds>,
    /// Realized latency had the request gone to each instance instead.
    pub counterfactual: Option<BTreeMap<InstanceId, Seconds>>,
}

fn rank_of(values: &BTreeMap<InstanceId, Seconds>, id: InstanceId) -> Option<usize> {
    let v = *values.get(&id)?;
    Some(1 + values.values().filter(|&&x| x < v).count())
}

impl ProbeRow {
    /// 1-based rank of the selected instance among predicted latencies.
    pub fn predicted_rank(&self) -> Option<usize> {
        rank_of(&self.predicted, self.selected)
    }

    /// 1-based rank of the selected instance among counterfactual realized
    /// latencies.
    pub fn realized_rank(&self) -> Option<usize> {
        rank_of(self.counterfactual.as_ref()?, self.selected)
    }

    /// Relative error of the selected instance's prediction.
    pub fn relative_error(&self) -> Option<f64> {
        let p = *self.predicted.get(&self.selected)?;
        let r = self.realized?;
        (r > 0.0).then(|| (p - r).abs() / r)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub events: Vec<LogEvent>,
    pub memory: Vec<MemorySample>,
    pub probes: Vec<ProbeRow>,
}

impl RunLog {
    pub fn push(&mut self, e: LogEvent) {
        self.events.push(e);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestRow {
    pub id: RequestId,
    pub instance: Option<InstanceId>,
    pub arrival: Seconds,
    pub dispatch: Option<Seconds>,
    pub first_token: Option<Seconds>,
    pub finish: Option<Seconds>,
    pub preemptions: u32,
}

impl RequestRow {
    pub fn ttft(&self) -> Option<Seconds> {
        Some(self.first_token? - self.dispatch?)
    }

    pub fn e2e(&self) -> Option<Seconds> {
        Some(self.finish? - self.arrival)
    }

    pub fn overhead(&self) -> Option<Seconds> {
        Some(self.dispatch? - self.arrival)
    }

    pub fn censored(&self) -> bool {
        self.finish.is_none()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub requests: usize,
    pub finished: usize,
    pub censored: usize,
    pub mean_ttft: f64,
    pub p50_ttft: f64,
    pub p99_ttft: f64,
    pub mean_e2e: f64,
    pub p50_e2e: f64,
    pub p99_e2e: f64,
    pub mean_overhead: f64,
    pub throughput: f64,
    pub total_preemptions: u64,
    pub fallbacks: u64,
    pub instances_added: usize,
    pub mean_free_blocks: f64,
    pub mean_free_variance: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub rows: Vec<RequestRow>,
    pub summary: Summary,
    pub series: Vec<MemorySample>,
    pub probes: Vec<ProbeRow>,
    /// `(time, instance)` of each instance that joined mid-run.
    pub added: Vec<(Seconds, InstanceId)>,
    /// `(time, instance)` of each provisioning decision.
    pub provision_requests: Vec<(Seconds, InstanceId)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("{0} requests unfinished at end of log")]
pub struct IncompleteRun(pub usize);

impl RunReport {
    /// Reports censored rows as an error without discarding the report.
    pub fn check_complete(&self) -> Result<(), IncompleteRun> {
        match self.summary.censored {
            0 => Ok(()),
            n => Err(IncompleteRun(n)),
        }
    }
}

/// Nearest-rank percentile of an ascending slice; `p` in `(0, 100]`.
pub fn nearest_rank(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let n = sorted.len();
    let rank = ((p / 100.0) * n as f64).ceil() as usize;
    sorted[rank.clamp(1, n) - 1]
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        f64::NAN
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

fn sorted(mut xs: Vec<f64>) -> Vec<f64> {
    xs.sort_by(f64::total_cmp);
    xs
}

pub fn aggregate(log: &RunLog) -> RunReport {
    let mut rows: BTreeMap<RequestId, RequestRow> = BTreeMap::new();
    let mut fallbacks = 0;
    let mut added = Vec::new();
    let mut provision_requests = Vec::new();
    for e in &log.events {
        match *e {
            LogEvent::Arrived { t, id } => {
                rows.insert(
                    id,
                    RequestRow {
                        id,
                        instance: None,
                        arrival: t,
                        dispatch: None,
                        first_token: None,
                        finish: None,
                        preemptions: 0,
                    },
                );
            }
            LogEvent::Dispatched { t, id, instance } => {
                if let Some(r) = rows.get_mut(&id) {
                    r.dispatch = Some(t);
                    r.instance = Some(instance);
                }
            }
            LogEvent::FirstToken { t, id } => {
                if let Some(r) = rows.get_mut(&id) {
                    r.first_token.get_or_insert(t);
                }
            }
            LogEvent::Preempted { id, .. } => {
                if let Some(r) = rows.get_mut(&id) {
                    r.preemptions += 1;
                }
            }
            LogEvent::Finished { t, id } => {
                if let Some(r) = rows.get_mut(&id) {
                    r.finish = Some(t);
                }
            }
            LogEvent::Fallback { .. } => fallbacks += 1,
            LogEvent::ProvisionRequested { t, instance } => provision_requests.push((t, instance)),
            LogEvent::InstanceAdded { t, instance } => added.push((t, instance)),
        }
    }
    let rows: Vec<RequestRow> = rows.into_values().collect();
    let done: Vec<&RequestRow> = rows.iter().filter(|r| !r.censored()).collect();
    let ttft = sorted(done.iter().filter_map(|r| r.ttft()).collect());
    let e2e = sorted(done.iter().filter_map(|r| r.e2e()).collect());
    let overhead: Vec<f64> = rows.iter().filter_map(|r| r.overhead()).collect();
    let first_arrival = rows.iter().map(|r| r.arrival).fold(f64::INFINITY, f64::min);
    let last_finish = done
        .iter()
        .filter_map(|r| r.finish)
        .fold(f64::NEG_INFINITY, f64::max);
    let span = last_finish - first_arrival;
    let throughput = if done.is_empty() || !(span > 0.0) {
        0.0
    } else {
        done.len() as f64 / span
    };
    let free_means: Vec<f64> = log.memory.iter().map(|m| m.free_mean).collect();
    let free_vars: Vec<f64> = log.memory.iter().map(|m| m.free_variance).collect();
    let summary = Summary {
        requests: rows.len(),
        finished: done.len(),
        censored: rows.len() - done.len(),
        mean_ttft: mean(&ttft),
        p50_ttft: nearest_rank(&ttft, 50.0),
        p99_ttft: nearest_rank(&ttft, 99.0),
        mean_e2e: mean(&e2e),
        p50_e2e: nearest_rank(&e2e, 50.0),
        p99_e2e: nearest_rank(&e2e, 99.0),
        mean_overhead: mean(&overhead),
        throughput,
        total_preemptions: rows.iter().map(|r| r.preemptions as u64).sum(),
        fallbacks,
        instances_added: added.len(),
        mean_free_blocks: mean(&free_means),
        mean_free_variance: mean(&free_vars),
    };
    RunReport {
        rows,
        summary,
        series: log.memory.clone(),
        probes: log.probes.clone(),
        added,
        provision_requests,
    }
}

fn unit_uniform(seed: u64, id: u64) -> f64 {
    let mut z = seed ^ id.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ 0xD1B5_4A32_D192_ED03;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    (z >> 11) as f64 / (1u64 << 53) as f64
}

/// Seeded Bernoulli membership test; a pure function of `(seed, id)` so the
/// same requests are probed under every policy.
pub fn is_probed(id: RequestId, probability: f64, seed: u64) -> bool {
    probability > 0.0 && unit_uniform(seed, id.0) < probability
}

pub fn probe_sample(
    ids: impl IntoIterator<Item = RequestId>,
    probability: f64,
    seed: u64,
) -> Vec<RequestId> {
    ids.into_iter()
        .filter(|&id| is_probed(id, probability, seed))
        .collect()
}
