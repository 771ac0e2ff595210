//! Discrete-event simulator for multi-instance LLM serving with
//! simulation-based latency prediction driving dispatch and provisioning.

pub mod autoscaler;
pub mod backend;
pub mod engine;
pub mod predictor;
pub mod scheduler;
pub mod types;
pub mod workload;
pub mod metrics;
pub mod harness;
