//! Experiment configuration, read from a single TOML file.
//!
//! ```toml
//! overhead_s = 0.0
//!
//! [cluster]
//! instances = 8
//! total_blocks = 1056
//! block_size = 16
//! max_batch_size = 48
//! chunk_budget = 512
//! local_policy = "ChunkedPrefill"
//!
//! [scheduler]
//! policy = "BlockPredictive"
//! metric = "e2e"
//! seed = 0
//!
//! [estimator]
//! kind = "noisy"
//! mean_abs_rel_error = 0.244
//! seed = 5
//!
//! [workload]
//! qps = 20.0
//! seed = 1
//! max_requests = 2000
//!
//! [provision]
//! kind = "Preempt"
//! threshold_s = 70.0
//!
//! [probe]
//! probability = 0.01
//!
//! [output]
//! dir = "out"
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autoscaler::{ProvisionKind, ProvisionPolicy};
use crate::metrics::Slo;
use crate::predictor::CacheMode;
use crate::scheduler::{DispatcherConfig, PolicyKind, TargetMetric};
use crate::types::{
    validate_instance_config, CostModelParams, InstanceConfig, InstanceId, LocalPolicy,
};
use crate::workload::{load_trace_file, synthetic_trace, LengthEstimator, SyntheticSpec, TraceRecord};

use super::sim::{ProbeConfig, SimParams};
use super::HarnessError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterConfig {
    pub instances: usize,
    pub total_blocks: u64,
    pub block_size: u64,
    pub max_batch_size: usize,
    pub chunk_budget: u64,
    pub local_policy: LocalPolicy,
    pub cost_model: CostModelParams,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        let t = InstanceConfig::default();
        Self {
            instances: 8,
            total_blocks: t.total_blocks,
            block_size: t.block_size,
            max_batch_size: t.max_batch_size,
            chunk_budget: t.chunk_budget,
            local_policy: t.local_policy,
            cost_model: t.cost_model,
        }
    }
}

impl ClusterConfig {
    pub fn template(&self) -> InstanceConfig {
        InstanceConfig {
            instance_id: InstanceId(0),
            total_blocks: self.total_blocks,
            block_size: self.block_size,
            max_batch_size: self.max_batch_size,
            chunk_budget: self.chunk_budget,
            local_policy: self.local_policy,
            cost_model: self.cost_model,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SchedulerConfig {
    pub policy: String,
    pub metric: TargetMetric,
    pub seed: u64,
    pub cache: CacheMode,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        Self {
            policy: PolicyKind::BlockPredictive.name().to_string(),
            metric: TargetMetric::E2e,
            seed: 0,
            cache: CacheMode::Exact,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorkloadConfig {
    /// Line-delimited trace; a synthetic trace is generated when absent.
    pub trace: Option<PathBuf>,
    pub synthetic: SyntheticSpec,
    pub qps: f64,
    pub seed: u64,
    pub max_requests: Option<usize>,
    /// Drops arrivals after this many simulated seconds.
    pub duration_s: Option<f64>,
}

impl Default for WorkloadConfig {
    fn default() -> Self {
        Self {
            trace: None,
            synthetic: SyntheticSpec::default(),
            qps: 10.0,
            seed: 0,
            max_requests: None,
            duration_s: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub policies: Vec<String>,
    pub qps: Vec<f64>,
    pub seeds: Vec<u64>,
    /// Inclusive integer qps range for capacity mode.
    pub capacity_range: Option<(u32, u32)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProvisionConfig {
    pub kind: ProvisionKind,
    pub threshold_s: f64,
    pub cold_start_s: f64,
    pub cooldown_s: f64,
    pub min_instances: usize,
    pub max_instances: usize,
}

impl Default for ProvisionConfig {
    fn default() -> Self {
        let p = ProvisionPolicy::default();
        Self {
            kind: p.kind,
            threshold_s: p.threshold,
            cold_start_s: p.cold_start_delay,
            cooldown_s: p.cooldown,
            min_instances: p.min_instances,
            max_instances: p.max_instances,
        }
    }
}

impl ProvisionConfig {
    pub fn policy(&self) -> ProvisionPolicy {
        ProvisionPolicy {
            kind: self.kind,
            threshold: self.threshold_s,
            cold_start_delay: self.cold_start_s,
            max_instances: self.max_instances,
            min_instances: self.min_instances,
            cooldown: self.cooldown_s,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
    pub event_log: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("out"),
            event_log: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendEndpoint {
    pub id: u32,
    pub url: String,
}

/// Settings for `serve`. `time_scale` is simulated seconds per wall second.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub bind: String,
    pub instance_id: u32,
    pub time_scale: f64,
    /// Shared clock origin so several backends agree on simulated time.
    pub epoch_unix_ms: Option<u64>,
    pub predictor: Option<String>,
    pub predict_timeout_ms: u64,
    pub fallback_on_timeout: bool,
    pub backends: Vec<BackendEndpoint>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            bind: "127.0.0.1:8700".into(),
            instance_id: 0,
            time_scale: 1.0,
            epoch_unix_ms: None,
            predictor: None,
            predict_timeout_ms: 2000,
            fallback_on_timeout: true,
            backends: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub overhead_s: f64,
    pub cluster: ClusterConfig,
    pub scheduler: SchedulerConfig,
    pub estimator: LengthEstimator,
    pub workload: WorkloadConfig,
    pub sweep: SweepConfig,
    pub provision: ProvisionConfig,
    pub probe: ProbeConfig,
    pub slo: Slo,
    pub output: OutputConfig,
    pub service: ServiceConfig,
}

fn config_err(msg: impl Into<String>) -> HarnessError {
    HarnessError::Config(msg.into())
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        let cfg: Self = toml::from_str(text).map_err(|e| config_err(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, HarnessError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        // trace paths are relative to the config file
        if let (Some(trace), Some(dir)) = (&cfg.workload.trace, path.parent()) {
            if trace.is_relative() {
                cfg.workload.trace = Some(dir.join(trace));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn policy(&self) -> Result<PolicyKind, HarnessError> {
        self.scheduler
            .policy
            .parse()
            .map_err(|e: crate::scheduler::UnknownPolicy| config_err(e.to_string()))
    }

    pub fn sweep_policies(&self) -> Result<Vec<PolicyKind>, HarnessError> {
        if self.sweep.policies.is_empty() {
            return Ok(vec![self.policy()?]);
        }
        self.sweep
            .policies
            .iter()
            .map(|p| p.parse().map_err(|e: crate::scheduler::UnknownPolicy| config_err(e.to_string())))
            .collect()
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        self.policy()?;
        self.sweep_policies()?;
        if self.cluster.instances == 0 {
            return Err(config_err("cluster.instances must be at least 1"));
        }
        validate_instance_config(&self.cluster.template()).map_err(|e| config_err(e.to_string()))?;
        if !(self.workload.qps > 0.0) {
            return Err(config_err("workload.qps must be positive"));
        }
        if self.sweep.qps.iter().any(|q| !(*q > 0.0)) {
            return Err(config_err("sweep.qps entries must be positive"));
        }
        if let Some((lo, hi)) = self.sweep.capacity_range {
            if lo == 0 || lo > hi {
                return Err(config_err("sweep.capacity_range must be a non-empty range starting at 1 or above"));
            }
        }
        if let Some(trace) = &self.workload.trace {
            if !trace.exists() {
                return Err(config_err(format!("workload.trace {} does not exist", trace.display())));
            }
        }
        if !(self.service.time_scale > 0.0) {
            return Err(config_err("service.time_scale must be positive"));
        }
        if !(self.overhead_s >= 0.0) {
            return Err(config_err("overhead_s must be non-negative"));
        }
        if !(self.probe.probability >= 0.0 && self.probe.probability <= 1.0) {
            return Err(config_err("probe.probability must lie in [0, 1]"));
        }
        if let LengthEstimator::Noisy { mean_abs_rel_error, .. } = self.estimator {
            if !(mean_abs_rel_error >= 0.0) {
                return Err(config_err("estimator.mean_abs_rel_error must be non-negative"));
            }
        }
        let p = self.provision.policy();
        p.validate().map_err(|e| config_err(e.to_string()))?;
        if p.kind != ProvisionKind::Static && self.cluster.instances > p.max_instances {
            return Err(config_err("cluster.instances exceeds provision.max_instances"));
        }
        Ok(())
    }

    /// Trace records, truncated to `workload.max_requests`.
    pub fn records(&self) -> Result<Vec<TraceRecord>, HarnessError> {
        let mut records = match &self.workload.trace {
            Some(path) => load_trace_file(path)?,
            None => synthetic_trace(&self.workload.synthetic),
        };
        if let Some(n) = self.workload.max_requests {
            records.truncate(n);
        }
        Ok(records)
    }

    pub fn sim_params(&self) -> Result<SimParams, HarnessError> {
        let template = self.cluster.template();
        Ok(SimParams {
            instances: self.cluster.instances,
            dispatcher: DispatcherConfig {
                policy: self.policy()?,
                seed: self.scheduler.seed,
                metric: self.scheduler.metric,
                block_size: template.block_size,
            },
            template,
            estimator: self.estimator,
            provision: self.provision.policy(),
            probe: self.probe,
            overhead_s: self.overhead_s,
            cache: self.scheduler.cache,
        })
    }

    pub fn with_policy(&self, policy: PolicyKind) -> Self {
        let mut c = self.clone();
        c.scheduler.policy = policy.name().to_string();
        c
    }

    pub fn with_qps(&self, qps: f64) -> Self {
        let mut c = self.clone();
        c.workload.qps = qps;
        c
    }

    /// Sets the arrival seed and the synthetic trace seed; scheduler,
    /// estimator and probe seeds are left alone.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.workload.seed = seed;
        c.workload.synthetic.seed = seed;
        c
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn doc_example_parses() {
        let text = r#"
overhead_s = 0.0
[cluster]
instances = 8
local_policy = "ChunkedPrefill"
[scheduler]
policy = "blockpredictive"
metric = "ttft"
[estimator]
kind = "noisy"
mean_abs_rel_error = 0.244
seed = 5
[workload]
qps = 20.0
max_requests = 100
[workload.synthetic]
output_median = 150.0
[provision]
kind = "Preempt"
threshold_s = 70.0
max_instances = 12
[probe]
probability = 0.01
[output]
dir = "out"
"#;
        let cfg = ExperimentConfig::from_toml(text).unwrap();
        assert_eq!(cfg.policy().unwrap(), PolicyKind::BlockPredictive);
        assert_eq!(cfg.scheduler.metric, TargetMetric::Ttft);
        assert_eq!(cfg.workload.synthetic.output_median, 150.0);
        assert_eq!(cfg.records().unwrap().len(), 100);
        let back = ExperimentConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn invalid_policy_rejected() {
        let err = ExperimentConfig::from_toml("[scheduler]\npolicy = \"Fastest\"\n").unwrap_err();
        assert!(matches!(err, HarnessError::Config(_)));
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(ExperimentConfig::from_toml("[cluster]\nnodes = 3\n").is_err());
    }

    #[test]
    fn missing_trace_rejected() {
        let err = ExperimentConfig::from_toml("[workload]\ntrace = \"/nonexistent/t.jsonl\"\n").unwrap_err();
        assert!(matches!(err, HarnessError::Config(_)));
    }
}
