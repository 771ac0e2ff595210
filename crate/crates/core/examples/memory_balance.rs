//! Cross-instance free-block variance over time, smoothed, for three
//! policies.

use blocksim::harness::{simulate_config, ExperimentConfig};
use blocksim::metrics::smooth;
use blocksim::scheduler::PolicyKind;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut cfg = ExperimentConfig::load(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/reference.toml"))?;
    cfg.workload.max_requests = Some(1000);
    let buckets = 12;
    for policy in [PolicyKind::BlockPredictive, PolicyKind::RoundRobin, PolicyKind::Random] {
        let report = simulate_config(&cfg.with_policy(policy), false)?.report;
        let var: Vec<f64> = report.series.iter().map(|s| s.free_variance).collect();
        let smoothed = smooth(&var, 25.0);
        let step = (smoothed.len() / buckets).max(1);
        let line: Vec<String> = smoothed.iter().step_by(step).map(|v| format!("{:>6.0}", v)).collect();
        println!(
            "{:<16} preemptions {:>5}  variance {}",
            policy.name(),
            report.summary.total_preemptions,
            line.join("")
        );
    }
    Ok(())
}
