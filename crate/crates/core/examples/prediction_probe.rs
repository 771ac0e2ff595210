//! Samples dispatch decisions, records every instance's prediction and,
//! with counterfactual forks, what would have happened on each. Predictions
//! ignore later arrivals, so the realized latency can only be worse.

use blocksim::harness::{simulate_config, ExperimentConfig, ProbeConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut cfg = ExperimentConfig::load(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/reference.toml"))?;
    cfg.workload.max_requests = Some(400);
    cfg.probe = ProbeConfig {
        probability: 0.05,
        seed: 1,
        counterfactual: true,
    };
    let report = simulate_config(&cfg, false)?.report;
    let mut worst: f64 = 0.0;
    for row in &report.probes {
        let cf = row.counterfactual.as_ref().expect("forks enabled");
        let err = row
            .predicted
            .iter()
            .map(|(k, p)| (p - cf[k]).abs())
            .fold(0.0, f64::max);
        worst = worst.max(err);
        println!(
            "request {:>4} -> {}  predicted {:.3}s realized {:.3}s  max |pred - cf| {:.2e}",
            row.request_id,
            row.selected,
            row.predicted[&row.selected],
            row.realized.unwrap_or(f64::NAN),
            err
        );
    }
    println!("{} probes, worst counterfactual error {worst:.2e}s", report.probes.len());
    Ok(())
}
