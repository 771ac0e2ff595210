//! Highest arrival rate meeting the P99 TTFT objective, predictive policy
//! against the memory-load baseline.

use blocksim::harness::{capacity_of, ExperimentConfig};
use blocksim::metrics::format_gain;
use blocksim::scheduler::PolicyKind;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut cfg = ExperimentConfig::load(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/reference.toml"))?;
    cfg.sweep.seeds = vec![0];
    cfg.workload.max_requests = Some(1000);
    cfg.workload.synthetic.count = 1000;

    let mut found = Vec::new();
    for policy in [PolicyKind::BlockPredictive, PolicyKind::LlumnixMinus] {
        let r = capacity_of(&cfg.with_policy(policy))?;
        let tried: Vec<String> = r
            .evaluations
            .iter()
            .map(|(q, ok)| format!("{q}{}", if *ok { "+" } else { "-" }))
            .collect();
        println!("{:<16} capacity {:>5.1} qps  [{}]", policy.name(), r.capacity, tried.join(" "));
        found.push(r.capacity);
    }
    println!("gain {}", format_gain(found[0], found[1]));
    Ok(())
}
