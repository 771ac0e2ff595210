//! Experiment runner: single runs, sweeps, capacity searches, trace
//! conversion and the networked service mode.

pub mod config;
pub mod service;
pub mod sim;

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;

use rayon::prelude::*;
use thiserror::Error;

use crate::metrics::{capacity_search_by, format_gain, write_report, CapacityError, CapacityResult, RunReport, Summary};
use crate::scheduler::PolicyKind;
use crate::types::Seconds;
use crate::workload::{convert_burstgpt, convert_sharegpt, schedule_arrivals, write_trace, TraceRecord, WorkloadError};

pub use config::ExperimentConfig;
pub use sim::{simulate, ClusterSim, ProbeConfig, SimError, SimOutput, SimParams};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Workload(#[from] WorkloadError),
    #[error("simulation failed: {0}")]
    Sim(#[from] SimError),
    #[error(transparent)]
    Capacity(#[from] CapacityError),
    #[error("service error: {0}")]
    Service(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl HarnessError {
    /// Process exit status: 2 for configuration problems, 3 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) | HarnessError::Workload(_) => 2,
            _ => 3,
        }
    }
}

/// Arrival schedule for one config, cut at `workload.duration_s`.
pub fn arrivals(config: &ExperimentConfig) -> Result<Vec<(Seconds, TraceRecord)>, HarnessError> {
    let records = config.records()?;
    let mut arr = schedule_arrivals(&records, config.workload.qps, config.workload.seed)?;
    if let Some(d) = config.workload.duration_s {
        arr.retain(|(t, _)| *t <= d);
    }
    Ok(arr)
}

/// Runs one simulation without writing anything.
pub fn simulate_config(config: &ExperimentConfig, record_events: bool) -> Result<SimOutput, HarnessError> {
    config.validate()?;
    let arr = arrivals(config)?;
    Ok(simulate(config.sim_params()?, &arr, record_events)?)
}

/// Runs one simulation and writes its report files, the event log and the
/// resolved config into `out`.
pub fn run(config: &ExperimentConfig, out: &Path) -> Result<RunReport, HarnessError> {
    let output = simulate_config(config, config.output.event_log)?;
    write_report(&output.report, out)?;
    if let Some(lines) = &output.events {
        let mut text = String::with_capacity(lines.len() * 32);
        for l in lines {
            text.push_str(l);
            text.push('\n');
        }
        fs::write(out.join("events.tsv"), text)?;
    }
    fs::write(out.join("config.toml"), config.to_toml())?;
    Ok(output.report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepCell {
    pub policy: PolicyKind,
    pub qps: f64,
    pub seed: u64,
    pub result: Result<Summary, String>,
}

fn sweep_axes(config: &ExperimentConfig) -> Result<(Vec<PolicyKind>, Vec<f64>, Vec<u64>), HarnessError> {
    let policies = config.sweep_policies()?;
    let qps = if config.sweep.qps.is_empty() {
        vec![config.workload.qps]
    } else {
        config.sweep.qps.clone()
    };
    let seeds = if config.sweep.seeds.is_empty() {
        vec![config.workload.seed]
    } else {
        config.sweep.seeds.clone()
    };
    Ok((policies, qps, seeds))
}

/// One cell per `(policy, qps, seed)`; a failing cell is recorded and the
/// rest proceed.
pub fn sweep(config: &ExperimentConfig) -> Result<Vec<SweepCell>, HarnessError> {
    config.validate()?;
    let (policies, qps, seeds) = sweep_axes(config)?;
    let mut cells = Vec::new();
    for &p in &policies {
        for &q in &qps {
            for &s in &seeds {
                cells.push((p, q, s));
            }
        }
    }
    Ok(cells
        .into_par_iter()
        .map(|(policy, qps, seed)| {
            let cfg = config.with_policy(policy).with_qps(qps).with_seed(seed);
            let result = simulate_config(&cfg, false)
                .map(|o| o.report.summary)
                .map_err(|e| e.to_string());
            SweepCell { policy, qps, seed, result }
        })
        .collect())
}

pub const SWEEP_HEADER: &str =
    "policy,qps,seed,status,mean_ttft_s,p50_ttft_s,p99_ttft_s,mean_e2e_s,p99_e2e_s,throughput_rps,total_preemptions,mean_free_blocks_variance";

pub fn sweep_csv(cells: &[SweepCell]) -> String {
    let mut out = format!("{SWEEP_HEADER}\n");
    for c in cells {
        match &c.result {
            Ok(s) => {
                let _ = writeln!(
                    out,
                    "{},{},{},ok,{},{},{},{},{},{},{},{}",
                    c.policy, c.qps, c.seed, s.mean_ttft, s.p50_ttft, s.p99_ttft, s.mean_e2e,
                    s.p99_e2e, s.throughput, s.total_preemptions, s.mean_free_variance
                );
            }
            Err(e) => {
                let _ = writeln!(out, "{},{},{},{:?},,,,,,,,", c.policy, c.qps, c.seed, e);
            }
        }
    }
    out
}

/// Capacity of one config: the arrival rate at which every configured seed
/// still meets the objective.
pub fn capacity_of(config: &ExperimentConfig) -> Result<CapacityResult, HarnessError> {
    config.validate()?;
    let (lo, hi) = config
        .sweep
        .capacity_range
        .ok_or_else(|| HarnessError::Config("sweep.capacity_range is required for capacity mode".into()))?;
    let (_, _, seeds) = sweep_axes(config)?;
    let slo = config.slo;
    let mut failure = None;
    let result = capacity_search_by(lo, hi, |q| {
        seeds.iter().all(|&s| match simulate_config(&config.with_qps(q).with_seed(s), false) {
            Ok(o) => slo.satisfied_by(&o.report),
            Err(e) => {
                failure.get_or_insert(e);
                false
            }
        })
    });
    if let Some(e) = failure {
        return Err(e);
    }
    Ok(result?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CapacityRow {
    pub policy: PolicyKind,
    pub result: Result<CapacityResult, String>,
}

/// Capacity per policy, searched concurrently.
pub fn capacity(config: &ExperimentConfig) -> Result<Vec<CapacityRow>, HarnessError> {
    config.validate()?;
    let policies = config.sweep_policies()?;
    Ok(policies
        .into_par_iter()
        .map(|policy| CapacityRow {
            policy,
            result: capacity_of(&config.with_policy(policy)).map_err(|e| e.to_string()),
        })
        .collect())
}

pub const CAPACITY_HEADER: &str = "policy,capacity_qps,bracket_pass,bracket_fail,non_monotone,gain";

/// Capacity table. `gain` is the predictive policy's gain over each other
/// policy, when the predictive policy is part of the table.
pub fn capacity_csv(rows: &[CapacityRow]) -> String {
    let reference = rows
        .iter()
        .find(|r| r.policy == PolicyKind::BlockPredictive)
        .and_then(|r| r.result.as_ref().ok())
        .map(|r| r.capacity);
    let mut out = format!("{CAPACITY_HEADER}\n");
    for r in rows {
        match &r.result {
            Ok(c) => {
                let gain = match reference {
                    Some(ours) if r.policy != PolicyKind::BlockPredictive => format_gain(ours, c.capacity),
                    _ => String::new(),
                };
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},{}",
                    r.policy,
                    c.capacity,
                    c.bracket.0,
                    c.bracket.1.map(|b| b.to_string()).unwrap_or_default(),
                    c.non_monotone,
                    gain
                );
            }
            Err(e) => {
                let _ = writeln!(out, "{},,,,,{:?}", r.policy, e);
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceFormat {
    ShareGpt,
    BurstGpt,
}

pub fn convert_trace(format: TraceFormat, input: &Path, output: &Path) -> Result<usize, HarnessError> {
    let file = fs::File::open(input)?;
    let records = match format {
        TraceFormat::ShareGpt => convert_sharegpt(io::BufReader::new(file))?,
        TraceFormat::BurstGpt => convert_burstgpt(io::BufReader::new(file))?,
    };
    let out = fs::File::create(output)?;
    write_trace(&records, io::BufWriter::new(out))?;
    Ok(records.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ExperimentConfig {
        let mut c = ExperimentConfig::default();
        c.cluster.instances = 2;
        c.workload.max_requests = Some(60);
        c.workload.qps = 4.0;
        c
    }

    #[test]
    fn sweep_cells_cover_the_grid() {
        let mut c = small();
        c.sweep.policies = vec!["RoundRobin".into(), "BlockPredictive".into()];
        c.sweep.qps = vec![3.0, 4.0];
        let cells = sweep(&c).unwrap();
        assert_eq!(cells.len(), 4);
        assert!(cells.iter().all(|c| c.result.is_ok()));
        let csv = sweep_csv(&cells);
        assert_eq!(csv.lines().count(), 5);
    }

    #[test]
    fn seeds_are_not_aggregated() {
        let mut c = small();
        c.sweep.seeds = vec![1, 2, 3];
        assert_eq!(sweep(&c).unwrap().len(), 3);
    }

    #[test]
    fn run_writes_files_deterministically() {
        let c = small();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        run(&c, a.path()).unwrap();
        run(&c, b.path()).unwrap();
        for f in ["summary.txt", "requests.csv", "memory.csv", "probes.csv", "events.tsv", "config.toml"] {
            let x = fs::read(a.path().join(f)).unwrap();
            let y = fs::read(b.path().join(f)).unwrap();
            assert_eq!(x, y, "{f}");
        }
    }

    #[test]
    fn capacity_table_formats_gain() {
        let rows = vec![
            CapacityRow {
                policy: PolicyKind::LlumnixMinus,
                result: Ok(CapacityResult {
                    capacity: 30.0,
                    bracket: (30, Some(31)),
                    non_monotone: false,
                    evaluations: vec![],
                }),
            },
            CapacityRow {
                policy: PolicyKind::BlockPredictive,
                result: Ok(CapacityResult {
                    capacity: 35.0,
                    bracket: (35, Some(36)),
                    non_monotone: false,
                    evaluations: vec![],
                }),
            },
        ];
        let csv = capacity_csv(&rows);
        assert!(csv.contains("LlumnixMinus,30,30,31,false,16.7%"));
    }

    #[test]
    fn exit_codes() {
        assert_eq!(HarnessError::Config("x".into()).exit_code(), 2);
        assert_eq!(HarnessError::Service("x".into()).exit_code(), 3);
    }
}
