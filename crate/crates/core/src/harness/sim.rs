//! In-process cluster simulation: N instances, one scheduler, a predictor
//! and an autoscaler driven by the event queue.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autoscaler::{
    complete_provision, Autoscaler, LatencySignal, ProvisionDecision, ProvisionError, ProvisionKind,
    ProvisionPolicy,
};
use crate::backend::{BackendError, Cluster, Instance, Sequence};
use crate::engine::{EngineError, Event, EventHandler, EventKind, EventQueue};
use crate::metrics::{aggregate, is_probed, LogEvent, MemorySample, ProbeRow, RunLog, RunReport};
use crate::predictor::{CacheMode, Candidate, PredictService, Predictor};
use crate::scheduler::{DispatchError, Dispatcher, DispatcherConfig};
use crate::types::{InstanceConfig, InstanceId, Request, RequestId, RequestState, Seconds};
use crate::workload::{estimate_length, LengthEstimator, TraceRecord};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub probability: f64,
    pub seed: u64,
    /// Fork the simulation per instance to observe counterfactual latencies.
    pub counterfactual: bool,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            probability: 0.0,
            seed: 0,
            counterfactual: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimParams {
    pub instances: usize,
    pub template: InstanceConfig,
    pub dispatcher: DispatcherConfig,
    pub estimator: LengthEstimator,
    pub provision: ProvisionPolicy,
    pub probe: ProbeConfig,
    pub overhead_s: Seconds,
    pub cache: CacheMode,
}

impl Default for SimParams {
    fn default() -> Self {
        Self {
            instances: 1,
            template: InstanceConfig::default(),
            dispatcher: DispatcherConfig::default(),
            estimator: LengthEstimator::Oracle,
            provision: ProvisionPolicy::default(),
            probe: ProbeConfig::default(),
            overhead_s: 0.0,
            cache: CacheMode::Exact,
        }
    }
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("instance {instance}: {source}")]
    Backend {
        instance: InstanceId,
        #[source]
        source: BackendError,
    },
    #[error(transparent)]
    Dispatch(#[from] DispatchError),
    #[error(transparent)]
    Provision(#[from] ProvisionError),
    #[error("unknown request {0}")]
    UnknownRequest(RequestId),
    #[error("unknown instance {0}")]
    UnknownInstance(InstanceId),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

#[derive(Debug, Clone)]
pub struct ClusterSim {
    params: SimParams,
    cluster: Cluster,
    predictor: Predictor,
    dispatcher: Dispatcher,
    autoscaler: Autoscaler,
    next_instance: u32,
    requests: BTreeMap<RequestId, Request>,
    log: RunLog,
    preemptions: u64,
    open_probes: BTreeMap<RequestId, usize>,
    /// Forks route this request to a fixed instance.
    forced: Option<(RequestId, InstanceId)>,
    probing: bool,
}

fn backend(instance: InstanceId) -> impl FnOnce(BackendError) -> SimError {
    move |source| SimError::Backend { instance, source }
}

impl ClusterSim {
    pub fn new(params: SimParams) -> Result<Self, SimError> {
        let mut cluster = Cluster::new();
        let mut configs = Vec::new();
        for i in 0..params.instances as u32 {
            let cfg = params.template.with_id(InstanceId(i));
            cluster
                .add(Instance::new(cfg.clone()).map_err(backend(InstanceId(i)))?)
                .expect("fresh ids");
            configs.push(cfg);
        }
        Ok(Self {
            predictor: Predictor::new(configs, params.cache),
            dispatcher: Dispatcher::new(params.dispatcher),
            autoscaler: Autoscaler::new(params.provision)?,
            next_instance: params.instances as u32,
            cluster,
            requests: BTreeMap::new(),
            log: RunLog::default(),
            preemptions: 0,
            open_probes: BTreeMap::new(),
            forced: None,
            probing: params.probe.probability > 0.0,
            params,
        })
    }

    pub fn params(&self) -> &SimParams {
        &self.params
    }

    pub fn cluster(&self) -> &Cluster {
        &self.cluster
    }

    pub fn cluster_mut(&mut self) -> &mut Cluster {
        &mut self.cluster
    }

    pub fn predictor(&self) -> &Predictor {
        &self.predictor
    }

    pub fn requests(&self) -> &BTreeMap<RequestId, Request> {
        &self.requests
    }

    pub fn log(&self) -> &RunLog {
        &self.log
    }

    pub fn report(&self) -> RunReport {
        aggregate(&self.log)
    }

    /// Registers each record and schedules its arrival.
    pub fn load(
        &mut self,
        queue: &mut EventQueue,
        arrivals: &[(Seconds, TraceRecord)],
    ) -> Result<(), SimError> {
        for (t, rec) in arrivals {
            let id = rec.request_id();
            let est = estimate_length(&self.params.estimator, rec);
            self.requests
                .insert(id, Request::new(id, rec.prompt_tokens, rec.output_tokens, est, *t));
            queue.push(*t, EventKind::Arrival(id))?;
        }
        Ok(())
    }

    /// Admits a request directly onto an instance, bypassing the scheduler.
    /// Used to pre-load instances before a measured arrival.
    pub fn place(
        &mut self,
        queue: &mut EventQueue,
        record: &TraceRecord,
        instance: InstanceId,
    ) -> Result<(), SimError> {
        let id = record.request_id();
        let now = queue.now();
        let est = estimate_length(&self.params.estimator, record);
        self.requests
            .insert(id, Request::new(id, record.prompt_tokens, record.output_tokens, est, now));
        self.log.push(LogEvent::Arrived { t: now, id });
        self.deliver(id, instance, now, queue)
    }

    fn request(&mut self, id: RequestId) -> Result<&mut Request, SimError> {
        self.requests.get_mut(&id).ok_or(SimError::UnknownRequest(id))
    }

    fn kick(&mut self, instance: InstanceId, now: Seconds, queue: &mut EventQueue) -> Result<(), SimError> {
        let inst = self
            .cluster
            .get_mut(instance)
            .ok_or(SimError::UnknownInstance(instance))?;
        if inst.is_busy() {
            return Ok(());
        }
        if let Some(end) = inst.start_step(now).map_err(backend(instance))? {
            queue.push(end, EventKind::BatchComplete(instance))?;
        }
        Ok(())
    }

    fn deliver(
        &mut self,
        id: RequestId,
        instance: InstanceId,
        now: Seconds,
        queue: &mut EventQueue,
    ) -> Result<(), SimError> {
        let req = self.request(id)?;
        req.dispatch_time = Some(now);
        req.state = RequestState::Waiting;
        req.instance = Some(instance);
        let seq = Sequence::new(id, req.prompt_tokens, req.true_output_tokens, req.estimated_output_tokens);
        self.log.push(LogEvent::Dispatched { t: now, id, instance });
        self.cluster
            .get_mut(instance)
            .ok_or(SimError::UnknownInstance(instance))?
            .admit(seq, now)
            .map_err(backend(instance))?;
        self.kick(instance, now, queue)
    }

    fn provision(&mut self, signal: LatencySignal, now: Seconds, queue: &mut EventQueue) -> Result<(), SimError> {
        if self.autoscaler.evaluate(signal, self.cluster.len(), now) == ProvisionDecision::AddInstance {
            let id = InstanceId(self.next_instance);
            self.next_instance += 1;
            let live = self.autoscaler.request(id, now);
            self.log.push(LogEvent::ProvisionRequested { t: now, instance: id });
            queue.push(live, EventKind::ProvisionComplete(id))?;
        }
        Ok(())
    }

    /// Realized latency of `id` had it been routed to each instance.
    fn counterfactuals(
        &self,
        event: &Event,
        queue: &EventQueue,
        id: RequestId,
        instances: &[InstanceId],
    ) -> Result<BTreeMap<InstanceId, Seconds>, SimError> {
        let mut base = self.clone();
        base.log = RunLog::default();
        base.open_probes.clear();
        base.probing = false;
        let mut out = BTreeMap::new();
        for &k in instances {
            let mut fork = base.clone();
            fork.forced = Some((id, k));
            let mut q = queue.clone();
            fork.handle(event, &mut q)?;
            while fork.requests[&id].finish_time.is_none() {
                let Some(ev) = q.pop() else { break };
                fork.handle(&ev, &mut q)?;
            }
            if let Some(e2e) = fork.requests[&id].e2e() {
                out.insert(k, e2e);
            }
        }
        Ok(out)
    }

    fn on_arrival(&mut self, event: &Event, id: RequestId, queue: &mut EventQueue) -> Result<(), SimError> {
        let now = queue.now();
        let snapshots = self.cluster.snapshots(now);
        let free: Vec<u64> = snapshots.iter().map(|s| s.free_blocks).collect();
        self.log.memory.push(MemorySample::from_free_blocks(now, &free, self.preemptions));
        self.log.push(LogEvent::Arrived { t: now, id });

        let req = self.requests.get(&id).ok_or(SimError::UnknownRequest(id))?;
        let candidate = Candidate {
            prompt_tokens: req.prompt_tokens,
            estimated_output_tokens: req.estimated_output_tokens,
        };
        let probed = self.probing && is_probed(id, self.params.probe.probability, self.params.probe.seed);
        let counterfactual = if probed && self.params.probe.counterfactual {
            let ids: Vec<_> = snapshots.iter().map(|s| s.instance_id).collect();
            Some(self.counterfactuals(event, queue, id, &ids)?)
        } else {
            None
        };

        let (chosen, predictions) = match self.forced {
            Some((rid, k)) if rid == id => (k, None),
            _ => {
                let preds = self
                    .dispatcher
                    .policy()
                    .needs_predictions()
                    .then(|| self.predictor.predict_across(&snapshots, candidate));
                let d = self.dispatcher.select(&snapshots, preds)?;
                if d.fell_back {
                    self.log.push(LogEvent::Fallback { t: now, id });
                }
                (d.instance_id, d.predictions)
            }
        };

        let need_all = probed;
        let need_one = self.params.provision.kind == ProvisionKind::Preempt;
        let predictions = match predictions {
            Some(p) => Some(p),
            None if need_all => self.predictor.predict_across(&snapshots, candidate).ok(),
            None => None,
        };
        if probed {
            if let Some(p) = &predictions {
                self.open_probes.insert(id, self.log.probes.len());
                self.log.probes.push(ProbeRow {
                    request_id: id,
                    selected: chosen,
                    predicted: p.iter().map(|(k, r)| (*k, r.e2e())).collect(),
                    realized: None,
                    counterfactual,
                });
            }
        }
        if need_one {
            let predicted = match predictions.as_ref().and_then(|p| p.get(&chosen)) {
                Some(r) => Some(r.e2e()),
                None => snapshots
                    .iter()
                    .find(|s| s.instance_id == chosen)
                    .and_then(|s| self.predictor.predict_one(s, candidate).ok())
                    .map(|r| r.e2e()),
            };
            if let Some(v) = predicted {
                self.provision(LatencySignal::Predicted(v), now, queue)?;
            }
        }

        let req = self.request(id)?;
        req.state = RequestState::Dispatched;
        req.instance = Some(chosen);
        if self.params.overhead_s > 0.0 {
            queue.push(now + self.params.overhead_s, EventKind::Deliver(id, chosen))?;
            Ok(())
        } else {
            self.deliver(id, chosen, now, queue)
        }
    }

    fn on_batch_complete(&mut self, instance: InstanceId, queue: &mut EventQueue) -> Result<(), SimError> {
        let now = queue.now();
        let inst = self
            .cluster
            .get_mut(instance)
            .ok_or(SimError::UnknownInstance(instance))?;
        let report = inst.finish_step().expect("batch in flight");
        let out = report.outcome;
        for &id in &out.preemptions {
            self.preemptions += 1;
            self.log.push(LogEvent::Preempted { t: now, id, instance });
            let r = self.request(id)?;
            r.preemptions += 1;
            r.prefill_progress = 0;
            r.decoded_tokens = 0;
            r.state = RequestState::Preempted;
        }
        for &id in &out.first_tokens {
            self.log.push(LogEvent::FirstToken { t: now, id });
            let r = self.request(id)?;
            r.first_token_time.get_or_insert(now);
        }
        let inst = self.cluster.get(instance).expect("present");
        for s in inst.state().running() {
            if let Some(r) = self.requests.get_mut(&s.id) {
                r.prefill_progress = s.prefill_progress;
                r.decoded_tokens = s.decoded_tokens;
                r.state = RequestState::Running;
            }
        }
        for s in inst.state().waiting() {
            if let Some(r) = self.requests.get_mut(&s.id) {
                r.prefill_progress = s.prefill_progress;
                r.decoded_tokens = s.decoded_tokens;
                r.state = RequestState::Waiting;
            }
        }
        for s in &out.finished {
            self.log.push(LogEvent::Finished { t: now, id: s.id });
            let r = self.request(s.id)?;
            r.finish_time = Some(now);
            r.prefill_progress = r.prompt_tokens;
            r.decoded_tokens = r.true_output_tokens;
            r.state = RequestState::Finished;
            let e2e = now - r.arrival_time;
            if let Some(idx) = self.open_probes.remove(&s.id) {
                self.log.probes[idx].realized = Some(e2e);
            }
            if self.params.provision.kind == ProvisionKind::Relief {
                self.provision(LatencySignal::Realized(e2e), now, queue)?;
            }
        }
        self.kick(instance, now, queue)
    }

    fn on_provision_complete(&mut self, instance: InstanceId, now: Seconds) -> Result<(), SimError> {
        complete_provision(&mut self.autoscaler, &mut self.cluster, &self.params.template, instance)?;
        self.predictor.register(self.params.template.with_id(instance));
        self.log.push(LogEvent::InstanceAdded { t: now, instance });
        Ok(())
    }
}

impl EventHandler for ClusterSim {
    type Error = SimError;

    fn handle(&mut self, event: &Event, queue: &mut EventQueue) -> Result<(), SimError> {
        let now = queue.now();
        match event.kind {
            EventKind::Arrival(id) => self.on_arrival(event, id, queue),
            EventKind::Deliver(id, instance) => self.deliver(id, instance, now, queue),
            EventKind::BatchComplete(instance) => self.on_batch_complete(instance, queue),
            EventKind::ProvisionComplete(instance) => self.on_provision_complete(instance, now),
        }
    }
}

/// Everything a finished simulation produced.
#[derive(Debug, Clone)]
pub struct SimOutput {
    pub report: RunReport,
    pub log: RunLog,
    pub requests: Vec<Request>,
    /// Tab-separated `time kind ids` lines, when requested.
    pub events: Option<Vec<String>>,
    pub final_instances: usize,
}

pub fn simulate(
    params: SimParams,
    arrivals: &[(Seconds, TraceRecord)],
    record_events: bool,
) -> Result<SimOutput, SimError> {
    let mut sim = ClusterSim::new(params)?;
    let mut queue = EventQueue::new();
    sim.load(&mut queue, arrivals)?;
    let mut lines = record_events.then(Vec::new);
    queue.run_with(None, &mut sim, |e| {
        if let Some(lines) = lines.as_mut() {
            lines.push(format!("{}\t{}", e.fire_time, e.kind));
        }
    })?;
    Ok(SimOutput {
        report: sim.report(),
        final_instances: sim.cluster.len(),
        requests: sim.requests.into_values().collect(),
        log: sim.log,
        events: lines,
    })
}
