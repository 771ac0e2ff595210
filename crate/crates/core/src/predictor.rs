//! Simulation-based latency prediction.
//!
//! A prediction replays the instance's own batching code on a copy of its
//! snapshot, with the candidate appended to the waiting queue and estimated
//! lengths standing in for true ones. Nothing arrives after the candidate.
//! Predictors hold no state between calls apart from the shared latency
//! cache, so any number of replicas answer identically.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use parking_lot::RwLock;
use rustc_hash::FxHashMap;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{latency_for, BackendError, BatchPlan, InstanceState, Sequence};
use crate::types::{
    CostModelParams, InstanceConfig, InstanceId, InstanceSnapshot, RequestId, Seconds,
};

/// Tokens granted past the observed decode length once a request overruns
/// its estimate.
pub const OVERRUN_EXTENSION: u64 = 10;

/// Bucket width for the optional lossy cache mode.
pub const CONTEXT_BUCKET: u64 = 256;

/// Id given to the candidate inside the forward simulation.
pub const CANDIDATE_ID: RequestId = RequestId(u64::MAX);

pub const METRIC_E2E: &str = "predicted_e2e_latency";
pub const METRIC_TTFT: &str = "predicted_ttft";
pub const METRIC_QUEUEING: &str = "predicted_queueing_delay";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Candidate {
    pub prompt_tokens: u64,
    pub estimated_output_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRequest {
    pub snapshot: InstanceSnapshot,
    pub candidate: Candidate,
    pub instance_config: InstanceConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionResult {
    pub metrics: BTreeMap<String, Seconds>,
    pub simulated_steps: u64,
}

impl PredictionResult {
    pub fn e2e(&self) -> Seconds {
        self.metrics[METRIC_E2E]
    }

    pub fn ttft(&self) -> Seconds {
        self.metrics[METRIC_TTFT]
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PredictError {
    #[error("snapshot is for instance {snapshot} but config is for {config}")]
    InstanceMismatch {
        snapshot: InstanceId,
        config: InstanceId,
    },
    #[error("candidate can never fit on instance {0}")]
    CandidateTooLarge(InstanceId),
    #[error("prediction failed on instance {instance}: {source}")]
    PredictionFailure {
        instance: InstanceId,
        #[source]
        source: BackendError,
    },
    #[error("no configuration known for instance {0}")]
    UnknownInstance(InstanceId),
    #[error("no snapshots")]
    NoSnapshots,
    #[error("predictor unavailable: {0}")]
    Unavailable(String),
    #[error("predictor timed out")]
    Timeout,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum CacheMode {
    /// Keyed on the exact `(decodes, prefill tokens, context tokens)` triple.
    #[default]
    Exact,
    /// Context tokens rounded to the nearest [`CONTEXT_BUCKET`]; each hit is
    /// off by at most `c_context * CONTEXT_BUCKET / 2` seconds.
    Bucketed,
    Disabled,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
struct CacheKey {
    decodes: u64,
    prefill_tokens: u64,
    context_tokens: u64,
    params: [u64; 4],
}

/// Memoized step latencies, shared by concurrent predictions.
#[derive(Debug, Default)]
pub struct LatencyCache {
    mode: CacheMode,
    entries: RwLock<FxHashMap<CacheKey, f64>>,
    hits: AtomicU64,
    misses: AtomicU64,
}

impl LatencyCache {
    pub fn new(mode: CacheMode) -> Self {
        Self {
            mode,
            ..Self::default()
        }
    }

    pub fn mode(&self) -> CacheMode {
        self.mode
    }

    pub fn representative_context(&self, context_tokens: u64) -> u64 {
        match self.mode {
            CacheMode::Bucketed => {
                (context_tokens + CONTEXT_BUCKET / 2) / CONTEXT_BUCKET * CONTEXT_BUCKET
            }
            _ => context_tokens,
        }
    }

    pub fn latency(&self, plan: &BatchPlan, params: &CostModelParams) -> f64 {
        self.latency_of(
            plan.decode_ids.len() as u64,
            plan.total_prefill_tokens,
            plan.context_tokens,
            params,
        )
    }

    pub fn latency_of(
        &self,
        decodes: u64,
        prefill_tokens: u64,
        context_tokens: u64,
        params: &CostModelParams,
    ) -> f64 {
        let context = self.representative_context(context_tokens);
        if self.mode == CacheMode::Disabled {
            return latency_for(decodes, prefill_tokens, context, params);
        }
        let key = CacheKey {
            decodes,
            prefill_tokens,
            context_tokens: context,
            params: [
                params.c0.to_bits(),
                params.c_prefill.to_bits(),
                params.c_decode.to_bits(),
                params.c_context.to_bits(),
            ],
        };
        if let Some(&v) = self.entries.read().get(&key) {
            self.hits.fetch_add(1, Ordering::Relaxed);
            return v;
        }
        self.misses.fetch_add(1, Ordering::Relaxed);
        let v = latency_for(decodes, prefill_tokens, context, params);
        self.entries.write().insert(key, v);
        v
    }

    pub fn hits(&self) -> u64 {
        self.hits.load(Ordering::Relaxed)
    }

    pub fn misses(&self) -> u64 {
        self.misses.load(Ordering::Relaxed)
    }

    pub fn len(&self) -> usize {
        self.entries.read().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Replaces the estimate of every request that has decoded at least as many
/// tokens as estimated with the observed count plus [`OVERRUN_EXTENSION`].
pub fn correct_lengths(snapshot: &InstanceSnapshot) -> InstanceSnapshot {
    let mut out = snapshot.clone();
    for e in out.running.iter_mut().chain(out.waiting.iter_mut()) {
        if e.decoded_tokens >= e.estimated_output_tokens {
            e.estimated_output_tokens = e.decoded_tokens + OVERRUN_EXTENSION;
        }
    }
    out
}

pub fn predict(req: &PredictionRequest, cache: &LatencyCache) -> Result<PredictionResult, PredictError> {
    let snapshot = &req.snapshot;
    let config = &req.instance_config;
    if snapshot.instance_id != config.instance_id {
        return Err(PredictError::InstanceMismatch {
            snapshot: snapshot.instance_id,
            config: config.instance_id,
        });
    }
    let failure = |source| PredictError::PredictionFailure {
        instance: snapshot.instance_id,
        source,
    };
    let corrected = correct_lengths(snapshot);
    let mut state = InstanceState::from_entries(
        config.clone(),
        corrected.free_blocks,
        &corrected.running,
        &corrected.waiting,
    )
    .map_err(failure)?;

    let c = req.candidate;
    let candidate = Sequence::new(
        CANDIDATE_ID,
        c.prompt_tokens.max(1),
        c.estimated_output_tokens.max(1),
        c.estimated_output_tokens.max(1),
    );
    if !state.fits(candidate.prompt_tokens, candidate.output_tokens) {
        return Err(PredictError::CandidateTooLarge(snapshot.instance_id));
    }
    state.admit(candidate).map_err(failure)?;

    let params = config.cost_model;
    let start = snapshot.snapshot_time;
    let mut clock = snapshot
        .busy_until
        .filter(|&t| t > start)
        .unwrap_or(start);
    let mut started_at = None;
    let mut first_token_at = None;
    let mut steps = 0u64;
    loop {
        let plan = state.form_batch().map_err(failure)?;
        let stretch = state.decode_stretch(&plan);
        if stretch > 1 {
            let n = plan.decode_ids.len() as u64;
            let mut context = plan.context_tokens;
            for _ in 0..stretch {
                clock += cache.latency_of(n, 0, context, &params);
                context += n;
            }
            steps += stretch;
            state.advance_decodes(stretch);
            continue;
        }
        let step_start = clock;
        let out = state
            .execute_step_with(&plan, |p| cache.latency(p, &params))
            .map_err(failure)?;
        steps += 1;
        clock += out.duration;
        if started_at.is_none() && out.started.contains(&CANDIDATE_ID) {
            started_at = Some(step_start);
        }
        if first_token_at.is_none() && out.first_tokens.contains(&CANDIDATE_ID) {
            first_token_at = Some(clock);
        }
        if out.completions.contains(&CANDIDATE_ID) {
            break;
        }
    }
    let first = first_token_at.expect("finished implies first token");
    let metrics = BTreeMap::from([
        (METRIC_E2E.to_string(), clock - start),
        (METRIC_TTFT.to_string(), first - start),
        (
            METRIC_QUEUEING.to_string(),
            started_at.expect("finished implies started") - start,
        ),
    ]);
    Ok(PredictionResult {
        metrics,
        simulated_steps: steps,
    })
}

/// Predicts the candidate on every snapshot independently.
pub fn predict_across(
    snapshots: &[InstanceSnapshot],
    configs: &BTreeMap<InstanceId, InstanceConfig>,
    candidate: Candidate,
    cache: &LatencyCache,
) -> Result<BTreeMap<InstanceId, PredictionResult>, PredictError> {
    if snapshots.is_empty() {
        return Err(PredictError::NoSnapshots);
    }
    snapshots
        .par_iter()
        .map(|snap| {
            let config = configs
                .get(&snap.instance_id)
                .ok_or(PredictError::UnknownInstance(snap.instance_id))?;
            let req = PredictionRequest {
                snapshot: snap.clone(),
                candidate,
                instance_config: config.clone(),
            };
            predict(&req, cache).map(|r| (snap.instance_id, r))
        })
        .collect()
}

/// Anything that can predict a candidate's metrics across instances. The
/// in-process [`Predictor`] and the HTTP client both implement it.
pub trait PredictService {
    fn predict_across(
        &self,
        snapshots: &[InstanceSnapshot],
        candidate: Candidate,
    ) -> Result<BTreeMap<InstanceId, PredictionResult>, PredictError>;
}

/// In-process predictor for a known set of instance configurations. Clones
/// share one latency cache.
#[derive(Debug, Clone, Default)]
pub struct Predictor {
    configs: BTreeMap<InstanceId, InstanceConfig>,
    cache: Arc<LatencyCache>,
}

impl Predictor {
    pub fn new(configs: impl IntoIterator<Item = InstanceConfig>, mode: CacheMode) -> Self {
        Self {
            configs: configs.into_iter().map(|c| (c.instance_id, c)).collect(),
            cache: Arc::new(LatencyCache::new(mode)),
        }
    }

    pub fn register(&mut self, config: InstanceConfig) {
        self.configs.insert(config.instance_id, config);
    }

    pub fn configs(&self) -> &BTreeMap<InstanceId, InstanceConfig> {
        &self.configs
    }

    pub fn cache(&self) -> &LatencyCache {
        &self.cache
    }

    pub fn predict_one(
        &self,
        snapshot: &InstanceSnapshot,
        candidate: Candidate,
    ) -> Result<PredictionResult, PredictError> {
        let config = self
            .configs
            .get(&snapshot.instance_id)
            .ok_or(PredictError::UnknownInstance(snapshot.instance_id))?;
        predict(
            &PredictionRequest {
                snapshot: snapshot.clone(),
                candidate,
                instance_config: config.clone(),
            },
            &self.cache,
        )
    }
}

impl PredictService for Predictor {
    fn predict_across(
        &self,
        snapshots: &[InstanceSnapshot],
        candidate: Candidate,
    ) -> Result<BTreeMap<InstanceId, PredictionResult>, PredictError> {
        predict_across(snapshots, &self.configs, candidate, &self.cache)
    }
}
