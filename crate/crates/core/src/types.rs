//! Domain types shared by every layer of the simulator.
//!
//! Token content never appears anywhere: requests are described purely by
//! token counts, and instances by counts of fixed-size KV-cache blocks.

use std::collections::VecDeque;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Simulated time in seconds.
pub type Seconds = f64;

/// Length of the sliding window used for queries-per-minute accounting.
pub const QPM_WINDOW_S: Seconds = 60.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RequestId(pub u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct InstanceId(pub u32);

impl fmt::Display for RequestId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl fmt::Display for InstanceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Number of blocks of `block_size` tokens needed to hold `tokens` tokens.
pub fn blocks_needed(tokens: u64, block_size: u64) -> u64 {
    debug_assert!(block_size >= 1);
    tokens.div_ceil(block_size)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RequestState {
    Created,
    Dispatched,
    Waiting,
    Running,
    Preempted,
    Finished,
}

/// One inference query as seen by the cluster.
///
/// `decoded_tokens` and `prefill_progress` mirror the owning instance's
/// sequence state after each completed step. Recompute preemption resets both
/// to zero; `first_token_time` keeps the first emission.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Request {
    pub id: RequestId,
    pub prompt_tokens: u64,
    pub true_output_tokens: u64,
    pub estimated_output_tokens: u64,
    pub arrival_time: Seconds,
    pub dispatch_time: Option<Seconds>,
    pub first_token_time: Option<Seconds>,
    pub finish_time: Option<Seconds>,
    pub state: RequestState,
    pub prefill_progress: u64,
    pub decoded_tokens: u64,
    pub instance: Option<InstanceId>,
    pub preemptions: u32,
}

impl Request {
    pub fn new(
        id: RequestId,
        prompt_tokens: u64,
        true_output_tokens: u64,
        estimated_output_tokens: u64,
        arrival_time: Seconds,
    ) -> Self {
        Self {
            id,
            prompt_tokens,
            true_output_tokens,
            estimated_output_tokens,
            arrival_time,
            dispatch_time: None,
            first_token_time: None,
            finish_time: None,
            state: RequestState::Created,
            prefill_progress: 0,
            decoded_tokens: 0,
            instance: None,
            preemptions: 0,
        }
    }

    pub fn ttft(&self) -> Option<Seconds> {
        Some(self.first_token_time? - self.dispatch_time?)
    }

    pub fn e2e(&self) -> Option<Seconds> {
        Some(self.finish_time? - self.arrival_time)
    }

    /// Checks the lifecycle invariants; returns a description of the first
    /// violation found.
    pub fn audit(&self) -> Result<(), String> {
        if self.decoded_tokens > self.true_output_tokens {
            return Err(format!("request {}: decoded beyond output length", self.id));
        }
        if self.prefill_progress > self.prompt_tokens {
            return Err(format!("request {}: prefill beyond prompt", self.id));
        }
        let finished = self.state == RequestState::Finished;
        let complete = self.decoded_tokens == self.true_output_tokens;
        if finished != complete || finished != self.finish_time.is_some() {
            return Err(format!(
                "request {}: finished state, decode count and finish time disagree",
                self.id
            ));
        }
        if self.decoded_tokens >= 1 && self.first_token_time.is_none() {
            return Err(format!("request {}: decoding without first token time", self.id));
        }
        let mut last = self.arrival_time;
        for t in [self.dispatch_time, self.first_token_time, self.finish_time]
            .into_iter()
            .flatten()
        {
            if t < last {
                return Err(format!("request {}: timestamps out of order", self.id));
            }
            last = t;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LocalPolicy {
    ChunkedPrefill,
    PrefillPriority,
}

/// Linear batch execution-time model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostModelParams {
    /// Fixed per-step overhead.
    pub c0: f64,
    /// Seconds per prefill token.
    pub c_prefill: f64,
    /// Seconds per decoding sequence.
    pub c_decode: f64,
    /// Seconds per cached context token attended by decoders.
    pub c_context: f64,
}

impl Default for CostModelParams {
    fn default() -> Self {
        Self {
            c0: 0.01,
            c_prefill: 1e-4,
            c_decode: 1e-3,
            c_context: 1e-7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceConfig {
    pub instance_id: InstanceId,
    pub total_blocks: u64,
    pub block_size: u64,
    pub max_batch_size: usize,
    pub chunk_budget: u64,
    pub local_policy: LocalPolicy,
    pub cost_model: CostModelParams,
}

impl Default for InstanceConfig {
    fn default() -> Self {
        Self {
            instance_id: InstanceId(0),
            total_blocks: 1056,
            block_size: 16,
            max_batch_size: 48,
            chunk_budget: 512,
            local_policy: LocalPolicy::ChunkedPrefill,
            cost_model: CostModelParams::default(),
        }
    }
}

impl InstanceConfig {
    pub fn with_id(&self, id: InstanceId) -> Self {
        Self {
            instance_id: id,
            ..self.clone()
        }
    }

    /// Token capacity of the KV cache.
    pub fn token_capacity(&self) -> u64 {
        self.total_blocks * self.block_size
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConfigError {
    #[error("invalid config: {field} {reason}")]
    InvalidConfig { field: &'static str, reason: String },
}

fn invalid(field: &'static str, reason: impl Into<String>) -> ConfigError {
    ConfigError::InvalidConfig {
        field,
        reason: reason.into(),
    }
}

pub fn validate_instance_config(cfg: &InstanceConfig) -> Result<(), ConfigError> {
    if cfg.total_blocks < 1 {
        return Err(invalid("total_blocks", "must be at least 1"));
    }
    if cfg.block_size < 1 {
        return Err(invalid("block_size", "must be at least 1"));
    }
    if cfg.max_batch_size < 1 {
        return Err(invalid("max_batch_size", "must be at least 1"));
    }
    if cfg.chunk_budget < cfg.block_size {
        return Err(invalid(
            "chunk_budget",
            format!("{} is below block_size {}", cfg.chunk_budget, cfg.block_size),
        ));
    }
    let cm = &cfg.cost_model;
    for (name, v) in [
        ("cost_model.c_prefill", cm.c_prefill),
        ("cost_model.c_decode", cm.c_decode),
        ("cost_model.c_context", cm.c_context),
    ] {
        if !(v >= 0.0 && v.is_finite()) {
            return Err(invalid(name, "must be a finite non-negative number"));
        }
    }
    if !(cm.c0 > 0.0 && cm.c0.is_finite()) {
        return Err(invalid("cost_model.c0", "must be positive"));
    }
    Ok(())
}

/// Per-request progress as exported by the status API.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SnapshotEntry {
    pub id: RequestId,
    pub prompt_tokens: u64,
    pub estimated_output_tokens: u64,
    pub prefill_progress: u64,
    pub decoded_tokens: u64,
}

impl SnapshotEntry {
    pub fn context_tokens(&self) -> u64 {
        self.prefill_progress + self.decoded_tokens
    }
}

/// Immutable view of one instance, the payload of the status API.
///
/// `running` is ordered by batch admission (oldest first), `waiting` by queue
/// position. The state is the one the instance will be in once its in-flight
/// step, if any, completes at `busy_until`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceSnapshot {
    pub instance_id: InstanceId,
    pub snapshot_time: Seconds,
    pub free_blocks: u64,
    pub total_blocks: u64,
    pub batch_size: usize,
    pub qpm: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub busy_until: Option<Seconds>,
    pub running: Vec<SnapshotEntry>,
    pub waiting: Vec<SnapshotEntry>,
}

impl InstanceSnapshot {
    pub fn used_blocks(&self) -> u64 {
        self.total_blocks - self.free_blocks
    }
}

/// Sliding window of dispatch timestamps; an entry expires once it is
/// `QPM_WINDOW_S` old.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct QpmWindow {
    stamps: VecDeque<Seconds>,
}

impl QpmWindow {
    pub fn record(&mut self, now: Seconds) {
        self.prune(now);
        self.stamps.push_back(now);
    }

    pub fn prune(&mut self, now: Seconds) {
        while let Some(&t) = self.stamps.front() {
            if now - t >= QPM_WINDOW_S {
                self.stamps.pop_front();
            } else {
                break;
            }
        }
    }

    pub fn count(&self, now: Seconds) -> u64 {
        self.stamps
            .iter()
            .filter(|&&t| now - t < QPM_WINDOW_S && t <= now)
            .count() as u64
    }
}
