//! Provisioning on predicted preemption against a relief-time trigger and a
//! static cluster.

use blocksim::autoscaler::ProvisionKind;
use blocksim::harness::{simulate_config, ExperimentConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = ExperimentConfig::load(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/autoscale.toml"))?;
    for kind in [ProvisionKind::Static, ProvisionKind::Preempt, ProvisionKind::Relief] {
        let mut c = cfg.clone();
        c.provision.kind = kind;
        let report = simulate_config(&c, false)?.report;
        let s = &report.summary;
        let when: Vec<String> = report.added.iter().map(|(t, id)| format!("{id}@{t:.0}s")).collect();
        println!(
            "{:<8} added={:<2} p99_e2e={:>7.2}s mean_e2e={:>6.2}s  {}",
            format!("{kind:?}"),
            s.instances_added,
            s.p99_e2e,
            s.mean_e2e,
            when.join(" ")
        );
    }
    Ok(())
}
