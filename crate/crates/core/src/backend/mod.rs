//! Simulated inference instance.
//!
//! An [`Instance`] applies a step's state changes when the step starts and
//! reports its effects (first tokens, completions) when it ends. Snapshots
//! therefore show the state the instance will be in at `busy_until`.

mod batch;
mod memory;

use std::collections::BTreeMap;

use thiserror::Error;

pub use batch::{
    batch_latency, BatchPlan, InstanceState, PrefillSegment, Sequence, StepOutcome,
};
pub(crate) use batch::latency_for;
pub use memory::MemoryManager;

use crate::types::{
    validate_instance_config, ConfigError, InstanceConfig, InstanceId, InstanceSnapshot,
    QpmWindow, RequestId, Seconds,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BackendError {
    #[error("request {id} needs {blocks} blocks but the instance has {total_blocks}")]
    RequestTooLarge {
        id: RequestId,
        blocks: u64,
        total_blocks: u64,
    },
    #[error("nothing runnable")]
    EmptyPlan,
    #[error("request {id} cannot proceed even with all memory free")]
    Deadlock { id: RequestId },
    #[error("inconsistent snapshot: {0}")]
    InconsistentSnapshot(String),
    #[error("instance is mid-step")]
    Busy,
    #[error(transparent)]
    Config(#[from] ConfigError),
}

/// One executed step, reported when it ends.
#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub instance_id: InstanceId,
    pub start: Seconds,
    pub end: Seconds,
    pub outcome: StepOutcome,
}

#[derive(Debug, Clone)]
pub struct Instance {
    state: InstanceState,
    in_flight: Option<StepReport>,
    dispatches: QpmWindow,
    steps: u64,
}

impl Instance {
    pub fn new(config: InstanceConfig) -> Result<Self, BackendError> {
        validate_instance_config(&config)?;
        Ok(Self {
            state: InstanceState::new(config),
            in_flight: None,
            dispatches: QpmWindow::default(),
            steps: 0,
        })
    }

    pub fn id(&self) -> InstanceId {
        self.state.config.instance_id
    }

    pub fn config(&self) -> &InstanceConfig {
        &self.state.config
    }

    pub fn state(&self) -> &InstanceState {
        &self.state
    }

    pub fn free_blocks(&self) -> u64 {
        self.state.memory.free_blocks()
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn is_busy(&self) -> bool {
        self.in_flight.is_some()
    }

    pub fn busy_until(&self) -> Option<Seconds> {
        self.in_flight.as_ref().map(|r| r.end)
    }

    pub fn is_drained(&self) -> bool {
        self.in_flight.is_none() && self.state.is_idle()
    }

    pub fn fits(&self, prompt_tokens: u64, output_tokens: u64) -> bool {
        self.state.fits(prompt_tokens, output_tokens)
    }

    /// Enqueues a request at the waiting-queue tail and counts it towards the
    /// instance's QPM.
    pub fn admit(&mut self, seq: Sequence, now: Seconds) -> Result<(), BackendError> {
        self.state.admit(seq)?;
        self.dispatches.record(now);
        Ok(())
    }

    /// Forms and applies the next step if the instance is free. Returns the
    /// step's end time, or `None` when there is nothing to run.
    pub fn start_step(&mut self, now: Seconds) -> Result<Option<Seconds>, BackendError> {
        if self.in_flight.is_some() {
            return Err(BackendError::Busy);
        }
        let plan = match self.state.form_batch() {
            Ok(plan) => plan,
            Err(BackendError::EmptyPlan) => return Ok(None),
            Err(e) => return Err(e),
        };
        let outcome = self.state.execute_step(&plan)?;
        let end = now + outcome.duration;
        self.steps += 1;
        self.in_flight = Some(StepReport {
            instance_id: self.id(),
            start: now,
            end,
            outcome,
        });
        Ok(Some(end))
    }

    /// Ends the in-flight step.
    pub fn finish_step(&mut self) -> Option<StepReport> {
        self.in_flight.take()
    }

    /// Runs steps back to back until the next step would end after `t`.
    /// Drives the instance from a wall clock instead of an event queue.
    pub fn advance_to(&mut self, t: Seconds) -> Result<Vec<StepReport>, BackendError> {
        let mut done = Vec::new();
        loop {
            match self.busy_until() {
                Some(end) if end <= t => {
                    let report = self.finish_step().expect("in flight");
                    done.push(report);
                    if self.start_step(end)?.is_none() {
                        break;
                    }
                }
                Some(_) => break,
                None => {
                    self.start_step(t)?;
                    break;
                }
            }
        }
        Ok(done)
    }

    pub fn snapshot(&self, now: Seconds) -> InstanceSnapshot {
        InstanceSnapshot {
            instance_id: self.id(),
            snapshot_time: now,
            free_blocks: self.state.memory.free_blocks(),
            total_blocks: self.state.config.total_blocks,
            batch_size: self.state.running.len(),
            qpm: self.dispatches.count(now),
            busy_until: self.busy_until().filter(|&end| end > now),
            running: self.state.running.iter().map(Sequence::entry).collect(),
            waiting: self.state.waiting.iter().map(Sequence::entry).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("instance {0} already exists")]
pub struct DuplicateInstance(pub InstanceId);

/// The set of live instances, iterated in id order.
#[derive(Debug, Clone, Default)]
pub struct Cluster {
    instances: BTreeMap<InstanceId, Instance>,
}

impl Cluster {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, instance: Instance) -> Result<(), DuplicateInstance> {
        let id = instance.id();
        if self.instances.contains_key(&id) {
            return Err(DuplicateInstance(id));
        }
        self.instances.insert(id, instance);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn contains(&self, id: InstanceId) -> bool {
        self.instances.contains_key(&id)
    }

    pub fn get(&self, id: InstanceId) -> Option<&Instance> {
        self.instances.get(&id)
    }

    pub fn get_mut(&mut self, id: InstanceId) -> Option<&mut Instance> {
        self.instances.get_mut(&id)
    }

    pub fn ids(&self) -> impl Iterator<Item = InstanceId> + '_ {
        self.instances.keys().copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Instance> {
        self.instances.values()
    }

    pub fn snapshots(&self, now: Seconds) -> Vec<InstanceSnapshot> {
        self.instances.values().map(|i| i.snapshot(now)).collect()
    }

    pub fn next_id(&self) -> InstanceId {
        self.instances
            .keys()
            .next_back()
            .map(|id| InstanceId(id.0 + 1))
            .unwrap_or(InstanceId(0))
    }
}
