//! Threshold-driven instance provisioning.
//!
//! `Preempt` reacts to the predicted latency of each dispatched request,
//! `Relief` to the realized latency of each completed one. Instances are only
//! ever added, and each addition goes live after a cold-start delay.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{Cluster, DuplicateInstance, Instance};
use crate::types::{InstanceConfig, InstanceId, Seconds};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProvisionKind {
    Static,
    Preempt,
    Relief,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProvisionPolicy {
    pub kind: ProvisionKind,
    pub threshold: Seconds,
    pub cold_start_delay: Seconds,
    pub max_instances: usize,
    pub min_instances: usize,
    pub cooldown: Seconds,
}

impl Default for ProvisionPolicy {
    fn default() -> Self {
        Self {
            kind: ProvisionKind::Static,
            threshold: 70.0,
            cold_start_delay: 30.0,
            max_instances: 16,
            min_instances: 1,
            cooldown: 15.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ProvisionError {
    #[error("invalid provision policy: {0}")]
    InvalidPolicy(&'static str),
    #[error(transparent)]
    Duplicate(#[from] DuplicateInstance),
    #[error("instance {0} was never requested")]
    Unrequested(InstanceId),
}

impl ProvisionPolicy {
    pub fn validate(&self) -> Result<(), ProvisionError> {
        if !(self.threshold > 0.0) {
            return Err(ProvisionError::InvalidPolicy("threshold must be positive"));
        }
        if self.min_instances > self.max_instances {
            return Err(ProvisionError::InvalidPolicy("min_instances exceeds max_instances"));
        }
        if !(self.cooldown >= 0.0) || !(self.cold_start_delay >= 0.0) {
            return Err(ProvisionError::InvalidPolicy("delays must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LatencySignal {
    /// Predicted latency of a request at dispatch.
    Predicted(Seconds),
    /// Realized latency of a request at completion.
    Realized(Seconds),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProvisionDecision {
    None,
    AddInstance,
}

#[derive(Debug, Clone)]
pub struct Autoscaler {
    policy: ProvisionPolicy,
    last_provision: Option<Seconds>,
    pending: Vec<(InstanceId, Seconds)>,
    provisioned: Vec<(Seconds, InstanceId)>,
}

impl Autoscaler {
    pub fn new(policy: ProvisionPolicy) -> Result<Self, ProvisionError> {
        policy.validate()?;
        Ok(Self {
            policy,
            last_provision: None,
            pending: Vec::new(),
            provisioned: Vec::new(),
        })
    }

    pub fn policy(&self) -> &ProvisionPolicy {
        &self.policy
    }

    pub fn pending(&self) -> usize {
        self.pending.len()
    }

    /// `(decision time, instance)` for every requested instance.
    pub fn provisioned(&self) -> &[(Seconds, InstanceId)] {
        &self.provisioned
    }

    pub fn evaluate(&self, signal: LatencySignal, active: usize, now: Seconds) -> ProvisionDecision {
        let value = match (self.policy.kind, signal) {
            (ProvisionKind::Preempt, LatencySignal::Predicted(v)) => v,
            (ProvisionKind::Relief, LatencySignal::Realized(v)) => v,
            _ => return ProvisionDecision::None,
        };
        if value < self.policy.threshold {
            return ProvisionDecision::None;
        }
        if self
            .last_provision
            .is_some_and(|t| now - t < self.policy.cooldown)
        {
            return ProvisionDecision::None;
        }
        if active + self.pending.len() >= self.policy.max_instances {
            return ProvisionDecision::None;
        }
        ProvisionDecision::AddInstance
    }

    /// Records an `AddInstance` decision for `id`; the instance goes live at
    /// the returned time.
    pub fn request(&mut self, id: InstanceId, now: Seconds) -> Seconds {
        self.last_provision = Some(now);
        self.pending.push((id, now));
        self.provisioned.push((now, id));
        now + self.policy.cold_start_delay
    }
}

/// Adds a fresh idle instance once its cold start has elapsed.
pub fn complete_provision(
    autoscaler: &mut Autoscaler,
    cluster: &mut Cluster,
    template: &InstanceConfig,
    instance_id: InstanceId,
) -> Result<(), ProvisionError> {
    if cluster.contains(instance_id) {
        return Err(DuplicateInstance(instance_id).into());
    }
    let pos = autoscaler
        .pending
        .iter()
        .position(|(id, _)| *id == instance_id)
        .ok_or(ProvisionError::Unrequested(instance_id))?;
    autoscaler.pending.remove(pos);
    let instance = Instance::new(template.with_id(instance_id))
        .expect("template validated with the cluster");
    cluster.add(instance)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scaler(kind: ProvisionKind, cooldown: f64, max: usize) -> Autoscaler {
        Autoscaler::new(ProvisionPolicy {
            kind,
            threshold: 70.0,
            cold_start_delay: 30.0,
            max_instances: max,
            min_instances: 1,
            cooldown,
        })
        .unwrap()
    }

    #[test]
    fn preempt_fires_on_predicted_latency() {
        let a = scaler(ProvisionKind::Preempt, 15.0, 10);
        assert_eq!(
            a.evaluate(LatencySignal::Predicted(71.0), 6, 0.0),
            ProvisionDecision::AddInstance
        );
        assert_eq!(a.evaluate(LatencySignal::Predicted(69.9), 6, 0.0), ProvisionDecision::None);
    }

    #[test]
    fn relief_ignores_predictions() {
        let a = scaler(ProvisionKind::Relief, 15.0, 10);
        assert_eq!(a.evaluate(LatencySignal::Predicted(71.0), 6, 0.0), ProvisionDecision::None);
        assert_eq!(a.evaluate(LatencySignal::Realized(40.0), 6, 0.0), ProvisionDecision::None);
        assert_eq!(
            a.evaluate(LatencySignal::Realized(70.0), 6, 0.0),
            ProvisionDecision::AddInstance
        );
    }

    #[test]
    fn static_never_fires() {
        let a = scaler(ProvisionKind::Static, 0.0, 10);
        assert_eq!(a.evaluate(LatencySignal::Predicted(1e9), 1, 0.0), ProvisionDecision::None);
        assert_eq!(a.evaluate(LatencySignal::Realized(1e9), 1, 0.0), ProvisionDecision::None);
    }

    #[test]
    fn cooldown_gates_repeat_provisioning() {
        let mut a = scaler(ProvisionKind::Preempt, 30.0, 10);
        a.request(InstanceId(6), 99.0);
        assert_eq!(a.evaluate(LatencySignal::Predicted(71.0), 6, 100.0), ProvisionDecision::None);
        assert_eq!(
            a.evaluate(LatencySignal::Predicted(71.0), 6, 129.0),
            ProvisionDecision::AddInstance
        );
    }

    #[test]
    fn max_instances_counts_pending() {
        let mut a = scaler(ProvisionKind::Preempt, 0.0, 7);
        assert_eq!(
            a.evaluate(LatencySignal::Predicted(71.0), 6, 0.0),
            ProvisionDecision::AddInstance
        );
        a.request(InstanceId(6), 0.0);
        assert_eq!(a.evaluate(LatencySignal::Predicted(71.0), 6, 1.0), ProvisionDecision::None);
    }

    #[test]
    fn cold_start_and_completion() {
        let mut a = scaler(ProvisionKind::Preempt, 0.0, 10);
        let mut cluster = Cluster::new();
        let template = InstanceConfig::default();
        cluster.add(Instance::new(template.clone()).unwrap()).unwrap();
        assert_eq!(a.request(InstanceId(1), 100.0), 130.0);
        assert_eq!(a.request(InstanceId(2), 101.0), 131.0);
        complete_provision(&mut a, &mut cluster, &template, InstanceId(1)).unwrap();
        complete_provision(&mut a, &mut cluster, &template, InstanceId(2)).unwrap();
        assert_eq!(cluster.len(), 3);
        assert_eq!(a.pending(), 0);
        assert!(matches!(
            complete_provision(&mut a, &mut cluster, &template, InstanceId(2)),
            Err(ProvisionError::Duplicate(_))
        ));
    }

    #[test]
    fn invalid_policies_rejected() {
        let mut p = ProvisionPolicy::default();
        p.threshold = 0.0;
        assert!(p.validate().is_err());
        let p = ProvisionPolicy {
            min_instances: 5,
            max_instances: 4,
            ..Default::default()
        };
        assert!(p.validate().is_err());
    }
}
