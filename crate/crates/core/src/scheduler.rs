//! Global dispatch policies.
//!
//! Selection is a pure function of the snapshots (and predictions) for every
//! policy except `Random` and `RoundRobin`, whose stream and cursor live in the
//! replica-local [`Dispatcher`]. Every argmin breaks ties by lowest instance id.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::predictor::{Candidate, PredictError, PredictService, PredictionResult};
use crate::types::{blocks_needed, InstanceId, InstanceSnapshot, QpmWindow, Seconds};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PolicyKind {
    Random,
    RoundRobin,
    MinQpm,
    InfaasPlusPlus,
    LlumnixMinus,
    BlockPredictive,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 6] = [
        PolicyKind::Random,
        PolicyKind::RoundRobin,
        PolicyKind::MinQpm,
        PolicyKind::InfaasPlusPlus,
        PolicyKind::LlumnixMinus,
        PolicyKind::BlockPredictive,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::Random => "Random",
            PolicyKind::RoundRobin => "RoundRobin",
            PolicyKind::MinQpm => "MinQpm",
            PolicyKind::InfaasPlusPlus => "InfaasPlusPlus",
            PolicyKind::LlumnixMinus => "LlumnixMinus",
            PolicyKind::BlockPredictive => "BlockPredictive",
        }
    }

    pub fn needs_predictions(self) -> bool {
        self == PolicyKind::BlockPredictive
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown scheduler policy {0:?}")]
pub struct UnknownPolicy(pub String);

impl FromStr for PolicyKind {
    type Err = UnknownPolicy;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        PolicyKind::ALL
            .into_iter()
            .find(|p| p.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| UnknownPolicy(s.to_string()))
    }
}

/// Which predicted metric the predictive policy minimises.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetMetric {
    #[default]
    E2e,
    Ttft,
}

impl TargetMetric {
    pub fn of(self, p: &PredictionResult) -> Seconds {
        match self {
            TargetMetric::E2e => p.e2e(),
            TargetMetric::Ttft => p.ttft(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DispatchError {
    #[error("no instances to dispatch to")]
    NoInstances,
    #[error("predictor unavailable: {0}")]
    PredictorUnavailable(String),
}

/// `usedMemory / batchSize`, with an empty batch counted as one.
pub fn load_infaas(snapshot: &InstanceSnapshot) -> f64 {
    snapshot.used_blocks() as f64 / snapshot.batch_size.max(1) as f64
}

/// Blocks needed to prefill the remaining prompt of every waiting request.
pub fn prefill_memory(snapshot: &InstanceSnapshot, block_size: u64) -> u64 {
    snapshot
        .waiting
        .iter()
        .map(|e| blocks_needed(e.prompt_tokens - e.prefill_progress, block_size))
        .sum()
}

/// `(usedMemory + prefillMemory) / batchSize`, with an empty batch counted as
/// one.
pub fn load_llumnix(snapshot: &InstanceSnapshot, block_size: u64) -> f64 {
    (snapshot.used_blocks() + prefill_memory(snapshot, block_size)) as f64
        / snapshot.batch_size.max(1) as f64
}

/// Lowest score wins; ties go to the lowest id.
pub fn argmin_by<'a, T: 'a>(
    items: impl IntoIterator<Item = &'a T>,
    id: impl Fn(&T) -> InstanceId,
    score: impl Fn(&T) -> f64,
) -> Option<InstanceId> {
    items
        .into_iter()
        .map(|t| (score(t), id(t)))
        .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
        .map(|(_, id)| id)
}

pub fn select_min_qpm(snapshots: &[InstanceSnapshot]) -> Option<InstanceId> {
    argmin_by(snapshots, |s| s.instance_id, |s| s.qpm as f64)
}

pub fn select_infaas(snapshots: &[InstanceSnapshot]) -> Option<InstanceId> {
    argmin_by(snapshots, |s| s.instance_id, load_infaas)
}

pub fn select_llumnix(snapshots: &[InstanceSnapshot], block_size: u64) -> Option<InstanceId> {
    argmin_by(snapshots, |s| s.instance_id, |s| load_llumnix(s, block_size))
}

pub fn select_predicted(
    predictions: &BTreeMap<InstanceId, PredictionResult>,
    metric: TargetMetric,
) -> Option<InstanceId> {
    predictions
        .iter()
        .map(|(&id, p)| (metric.of(p), id))
        .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
        .map(|(_, id)| id)
}

/// Replica-local dispatch counts per instance over the trailing minute.
#[derive(Debug, Clone, Default)]
pub struct QpmTracker {
    windows: BTreeMap<InstanceId, QpmWindow>,
}

impl QpmTracker {
    pub fn qpm(&self, instance: InstanceId, now: Seconds) -> u64 {
        self.windows.get(&instance).map_or(0, |w| w.count(now))
    }
}

pub fn record_dispatch(tracker: &mut QpmTracker, instance: InstanceId, now: Seconds) {
    tracker.windows.entry(instance).or_default().record(now);
    for w in tracker.windows.values_mut() {
        w.prune(now);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DispatcherConfig {
    pub policy: PolicyKind,
    /// Seed of the `Random` policy's stream.
    pub seed: u64,
    pub metric: TargetMetric,
    /// Block size used by the `LlumnixMinus` load and its fallback role.
    pub block_size: u64,
}

impl Default for DispatcherConfig {
    fn default() -> Self {
        Self {
            policy: PolicyKind::BlockPredictive,
            seed: 0,
            metric: TargetMetric::E2e,
            block_size: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decision {
    pub instance_id: InstanceId,
    /// Present when the predictive policy ran successfully.
    pub predictions: Option<BTreeMap<InstanceId, PredictionResult>>,
    pub fell_back: bool,
}

/// Outcome of asking a predictor, handed to [`Dispatcher::select`].
pub type PredictionInput = Option<Result<BTreeMap<InstanceId, PredictionResult>, PredictError>>;

/// One scheduler replica.
#[derive(Debug, Clone)]
pub struct Dispatcher {
    config: DispatcherConfig,
    rng: ChaCha8Rng,
    cursor: usize,
    fallbacks: u64,
}

impl Dispatcher {
    pub fn new(config: DispatcherConfig) -> Self {
        Self {
            config,
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            cursor: 0,
            fallbacks: 0,
        }
    }

    pub fn config(&self) -> &DispatcherConfig {
        &self.config
    }

    pub fn policy(&self) -> PolicyKind {
        self.config.policy
    }

    pub fn fallbacks(&self) -> u64 {
        self.fallbacks
    }

    /// Chooses an instance. `predictions` is consulted only by the predictive
    /// policy; a missing or failed prediction falls back to `LlumnixMinus`.
    pub fn select(
        &mut self,
        snapshots: &[InstanceSnapshot],
        predictions: PredictionInput,
    ) -> Result<Decision, DispatchError> {
        if snapshots.is_empty() {
            return Err(DispatchError::NoInstances);
        }
        let plain = |id| Decision {
            instance_id: id,
            predictions: None,
            fell_back: false,
        };
        let decision = match self.config.policy {
            PolicyKind::Random => {
                let mut ids: Vec<_> = snapshots.iter().map(|s| s.instance_id).collect();
                ids.sort();
                plain(ids[self.rng.gen_range(0..ids.len())])
            }
            PolicyKind::RoundRobin => {
                let mut ids: Vec<_> = snapshots.iter().map(|s| s.instance_id).collect();
                ids.sort();
                let id = ids[self.cursor % ids.len()];
                self.cursor = self.cursor.wrapping_add(1);
                plain(id)
            }
            PolicyKind::MinQpm => plain(select_min_qpm(snapshots).expect("non-empty")),
            PolicyKind::InfaasPlusPlus => plain(select_infaas(snapshots).expect("non-empty")),
            PolicyKind::LlumnixMinus => {
                plain(select_llumnix(snapshots, self.config.block_size).expect("non-empty"))
            }
            PolicyKind::BlockPredictive => {
                let chosen = match predictions {
                    Some(Ok(p)) => select_predicted(&p, self.config.metric)
                        .filter(|id| snapshots.iter().any(|s| s.instance_id == *id))
                        .map(|id| (id, p)),
                    _ => None,
                };
                match chosen {
                    Some((id, p)) => Decision {
                        instance_id: id,
                        predictions: Some(p),
                        fell_back: false,
                    },
                    None => {
                        self.fallbacks += 1;
                        let id = select_llumnix(snapshots, self.config.block_size)
                            .expect("non-empty");
                        Decision {
                            instance_id: id,
                            predictions: None,
                            fell_back: true,
                        }
                    }
                }
            }
        };
        Ok(decision)
    }

    /// Selects an instance, querying `predictor` only if the policy needs it.
    pub fn dispatch(
        &mut self,
        candidate: Candidate,
        snapshots: &[InstanceSnapshot],
        predictor: Option<&dyn PredictService>,
    ) -> Result<Decision, DispatchError> {
        let predictions = if self.config.policy.needs_predictions() {
            Some(match predictor {
                Some(p) => p.predict_across(snapshots, candidate),
                None => Err(PredictError::Unavailable("no predictor configured".into())),
            })
        } else {
            None
        };
        self.select(snapshots, predictions)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::predictor::{Predictor, METRIC_E2E, METRIC_TTFT};
    use crate::types::{RequestId, SnapshotEntry};

    fn snap(id: u32, used: u64, batch: usize, qpm: u64) -> InstanceSnapshot {
        InstanceSnapshot {
            instance_id: InstanceId(id),
            snapshot_time: 0.0,
            free_blocks: 1056 - used,
            total_blocks: 1056,
            batch_size: batch,
            qpm,
            busy_until: None,
            running: vec![],
            waiting: vec![],
        }
    }

    fn waiting(prompt: u64) -> SnapshotEntry {
        SnapshotEntry {
            id: RequestId(prompt),
            prompt_tokens: prompt,
            estimated_output_tokens: 1,
            prefill_progress: 0,
            decoded_tokens: 0,
        }
    }

    #[test]
    fn infaas_examples() {
        assert_eq!(load_infaas(&snap(0, 500, 10, 0)), 50.0);
        assert_eq!(load_infaas(&snap(0, 0, 0, 0)), 0.0);
        assert_eq!(load_infaas(&snap(0, 500, 0, 0)), 500.0);
    }

    #[test]
    fn llumnix_examples() {
        let mut s = snap(0, 100, 10, 0);
        assert_eq!(load_llumnix(&s, 16), load_infaas(&s));
        s.waiting = vec![waiting(100), waiting(50)];
        assert!((load_llumnix(&s, 16) - 11.1).abs() < 1e-12);
        let before = load_llumnix(&s, 16);
        s.waiting.push(waiting(1));
        assert!(load_llumnix(&s, 16) >= before);
    }

    #[test]
    fn degenerate_batch_ranks_behind_idle() {
        let snaps = vec![snap(0, 500, 0, 0), snap(1, 0, 0, 0), snap(2, 200, 4, 0)];
        assert_eq!(select_infaas(&snaps), Some(InstanceId(1)));
    }

    #[test]
    fn min_qpm_examples() {
        let idle = vec![snap(2, 0, 0, 0), snap(0, 0, 0, 0), snap(1, 0, 0, 0)];
        assert_eq!(select_min_qpm(&idle), Some(InstanceId(0)));
        let busy = vec![snap(0, 0, 0, 7), snap(1, 0, 0, 3), snap(2, 0, 0, 9)];
        assert_eq!(select_min_qpm(&busy), Some(InstanceId(1)));
    }

    #[test]
    fn round_robin_is_cyclic_and_fair() {
        let snaps: Vec<_> = (0..4).map(|i| snap(i, 0, 0, 0)).collect();
        let mut d = Dispatcher::new(DispatcherConfig {
            policy: PolicyKind::RoundRobin,
            ..Default::default()
        });
        let mut counts = BTreeMap::new();
        let mut seq = Vec::new();
        for _ in 0..12 {
            let id = d.select(&snaps, None).unwrap().instance_id;
            seq.push(id.0);
            *counts.entry(id).or_insert(0) += 1;
        }
        assert_eq!(&seq[..5], &[0, 1, 2, 3, 0]);
        assert!(counts.values().all(|&c| c == 3));
    }

    #[test]
    fn random_is_seeded() {
        let snaps: Vec<_> = (0..5).map(|i| snap(i, 0, 0, 0)).collect();
        let run = |seed| {
            let mut d = Dispatcher::new(DispatcherConfig {
                policy: PolicyKind::Random,
                seed,
                ..Default::default()
            });
            (0..50)
                .map(|_| d.select(&snaps, None).unwrap().instance_id)
                .collect::<Vec<_>>()
        };
        assert_eq!(run(3), run(3));
        assert_ne!(run(3), run(4));
    }

    #[test]
    fn empty_snapshot_list_is_an_error() {
        let mut d = Dispatcher::new(DispatcherConfig::default());
        assert_eq!(d.select(&[], None), Err(DispatchError::NoInstances));
    }

    #[test]
    fn predictor_failure_falls_back_to_llumnix() {
        let mut a = snap(0, 300, 1, 0);
        a.waiting = vec![waiting(900)];
        let b = snap(1, 300, 1, 0);
        let mut d = Dispatcher::new(DispatcherConfig::default());
        let dec = d
            .select(&[a, b], Some(Err(PredictError::Unavailable("down".into()))))
            .unwrap();
        assert!(dec.fell_back);
        assert_eq!(dec.instance_id, InstanceId(1));
        assert_eq!(d.fallbacks(), 1);
    }

    #[test]
    fn missing_predictor_falls_back() {
        let snaps = vec![snap(0, 0, 0, 0)];
        let mut d = Dispatcher::new(DispatcherConfig::default());
        let c = Candidate { prompt_tokens: 4, estimated_output_tokens: 4 };
        assert!(d.dispatch(c, &snaps, None).unwrap().fell_back);
    }

    fn pred(e2e: f64, ttft: f64) -> PredictionResult {
        PredictionResult {
            metrics: BTreeMap::from([
                (METRIC_E2E.to_string(), e2e),
                (METRIC_TTFT.to_string(), ttft),
            ]),
            simulated_steps: 1,
        }
    }

    #[test]
    fn predicted_argmin_uses_configured_metric() {
        let p = BTreeMap::from([
            (InstanceId(0), pred(5.0, 0.1)),
            (InstanceId(1), pred(4.0, 0.9)),
            (InstanceId(2), pred(4.0, 0.5)),
        ]);
        assert_eq!(select_predicted(&p, TargetMetric::E2e), Some(InstanceId(1)));
        assert_eq!(select_predicted(&p, TargetMetric::Ttft), Some(InstanceId(0)));
        let shifted: BTreeMap<_, _> = p
            .iter()
            .map(|(&k, v)| (k, pred(v.e2e() + 12.5, v.ttft() + 12.5)))
            .collect();
        assert_eq!(select_predicted(&shifted, TargetMetric::E2e), Some(InstanceId(1)));
    }

    #[test]
    fn qpm_tracker_window() {
        let mut t = QpmTracker::default();
        for s in 0..60 {
            record_dispatch(&mut t, InstanceId(0), s as f64);
        }
        assert_eq!(t.qpm(InstanceId(0), 60.0), 59);
        assert_eq!(t.qpm(InstanceId(1), 60.0), 0);
    }

    #[test]
    fn policy_names_round_trip() {
        for p in PolicyKind::ALL {
            assert_eq!(p.name().parse::<PolicyKind>().unwrap(), p);
        }
        assert!("LeastLoaded".parse::<PolicyKind>().is_err());
    }

    #[test]
    fn predictive_dispatch_uses_predictor() {
        use crate::backend::{Instance, Sequence};
        use crate::types::InstanceConfig;
        let configs: Vec<_> = (0..3)
            .map(|i| InstanceConfig::default().with_id(InstanceId(i)))
            .collect();
        let mut loaded = Instance::new(configs[0].clone()).unwrap();
        loaded.admit(Sequence::new(RequestId(1), 100, 2000, 2000), 0.0).unwrap();
        loaded.start_step(0.0).unwrap();
        let snaps = vec![
            loaded.snapshot(0.01),
            Instance::new(configs[1].clone()).unwrap().snapshot(0.01),
            Instance::new(configs[2].clone()).unwrap().snapshot(0.01),
        ];
        let predictor = Predictor::new(configs, Default::default());
        let mut d = Dispatcher::new(DispatcherConfig::default());
        let c = Candidate { prompt_tokens: 50, estimated_output_tokens: 50 };
        let dec = d.dispatch(c, &snaps, Some(&predictor)).unwrap();
        assert_eq!(dec.instance_id, InstanceId(1));
        assert!(!dec.fell_back);
    }
}
