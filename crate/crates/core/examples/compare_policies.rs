//! Runs every dispatch policy on the same workload.
//!
//! cargo run --release --example compare_policies [config.toml]

use blocksim::harness::{simulate_config, ExperimentConfig};
use blocksim::scheduler::PolicyKind;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = match std::env::args().nth(1) {
        Some(path) => ExperimentConfig::load(path)?,
        None => {
            let mut c = ExperimentConfig::load(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/reference.toml"))?;
            c.workload.max_requests = Some(800);
            c
        }
    };
    println!(
        "{:<16} {:>9} {:>9} {:>9} {:>9} {:>8} {:>12}",
        "policy", "mean_ttft", "p99_ttft", "mean_e2e", "p99_e2e", "preempt", "free_var"
    );
    for policy in PolicyKind::ALL {
        let s = simulate_config(&cfg.with_policy(policy), false)?.report.summary;
        println!(
            "{:<16} {:>9.3} {:>9.3} {:>9.2} {:>9.2} {:>8} {:>12.0}",
            policy.name(),
            s.mean_ttft,
            s.p99_ttft,
            s.mean_e2e,
            s.p99_e2e,
            s.total_preemptions,
            s.mean_free_variance
        );
    }
    Ok(())
}
