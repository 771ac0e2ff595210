use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::RunReport;

/// Latency objective: P99 TTFT strictly below the bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Slo {
    pub p99_ttft_s: f64,
}

impl Default for Slo {
    fn default() -> Self {
        Self { p99_ttft_s: 3.0 }
    }
}

impl Slo {
    pub fn satisfied_by(&self, report: &RunReport) -> bool {
        report.summary.censored == 0 && report.summary.p99_ttft < self.p99_ttft_s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CapacityResult {
    pub capacity: f64,
    /// Integer bracket `(last pass, first fail)`; `None` when the whole range
    /// passed.
    pub bracket: (u32, Option<u32>),
    /// Set when a fine step passed after a lower one failed.
    pub non_monotone: bool,
    /// Every `(qps, passed)` evaluation in order.
    pub evaluations: Vec<(f64, bool)>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CapacityError {
    #[error("lowest qps {0} already violates the objective")]
    NoCapacity(f64),
    #[error("empty qps range {0}..={1}")]
    EmptyRange(u32, u32),
}

/// Integer sweep upward to the first failure, then a 0.1-step sweep inside
/// the bracket. Returns the last passing fine step before the first failing
/// one.
pub fn capacity_search_by(
    lo: u32,
    hi: u32,
    mut passes: impl FnMut(f64) -> bool,
) -> Result<CapacityResult, CapacityError> {
    if lo > hi || lo == 0 {
        return Err(CapacityError::EmptyRange(lo, hi));
    }
    let mut evaluations = Vec::new();
    let mut last_pass = None;
    let mut first_fail = None;
    for q in lo..=hi {
        let ok = passes(q as f64);
        evaluations.push((q as f64, ok));
        if ok {
            last_pass = Some(q);
        } else {
            first_fail = Some(q);
            break;
        }
    }
    let Some(q_pass) = last_pass else {
        return Err(CapacityError::NoCapacity(lo as f64));
    };
    let mut capacity = q_pass as f64;
    let mut non_monotone = false;
    if first_fail.is_some() {
        let mut failed = false;
        for k in 1..10 {
            let q = (q_pass * 10 + k) as f64 / 10.0;
            let ok = passes(q);
            evaluations.push((q, ok));
            match (ok, failed) {
                (true, false) => capacity = q,
                (true, true) => non_monotone = true,
                (false, _) => failed = true,
            }
        }
    }
    Ok(CapacityResult {
        capacity,
        bracket: (q_pass, first_fail),
        non_monotone,
        evaluations,
    })
}

pub fn capacity_search(
    lo: u32,
    hi: u32,
    slo: Slo,
    mut runner: impl FnMut(f64) -> RunReport,
) -> Result<CapacityResult, CapacityError> {
    capacity_search_by(lo, hi, |q| slo.satisfied_by(&runner(q)))
}

/// Relative capacity gain, formatted with one decimal and a percent sign.
pub fn format_gain(ours: f64, baseline: f64) -> String {
    format!("{:.1}%", (ours / baseline - 1.0) * 100.0)
}
