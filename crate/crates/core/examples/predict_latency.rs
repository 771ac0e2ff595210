//! Predicts a newcomer's latency on a busy instance, then runs the instance
//! forward and compares.

use blocksim::backend::{Instance, Sequence};
use blocksim::predictor::{CacheMode, Candidate, Predictor};
use blocksim::types::{InstanceConfig, RequestId};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let config = InstanceConfig::default();
    let mut inst = Instance::new(config.clone())?;
    for (i, (p, o)) in [(900, 200), (1200, 80), (300, 400), (2000, 20)].into_iter().enumerate() {
        inst.admit(Sequence::new(RequestId(i as u64), p, o, o), 0.0)?;
    }
    inst.advance_to(0.0)?;
    let arrival = 0.8;
    inst.advance_to(arrival)?;

    let snapshot = inst.snapshot(arrival);
    let candidate = Candidate {
        prompt_tokens: 640,
        estimated_output_tokens: 150,
    };
    let predictor = Predictor::new([config], CacheMode::Exact);
    let p = predictor.predict_one(&snapshot, candidate)?;
    println!(
        "snapshot: {} running, {} waiting, {} free blocks",
        snapshot.running.len(),
        snapshot.waiting.len(),
        snapshot.free_blocks
    );
    println!("predicted ttft={:.4}s e2e={:.4}s over {} steps", p.ttft(), p.e2e(), p.simulated_steps);

    let id = RequestId(99);
    inst.admit(Sequence::new(id, 640, 150, 150), arrival)?;
    let (mut first, mut done) = (None, None);
    let mut t = arrival;
    while done.is_none() {
        t += 0.05;
        for r in inst.advance_to(t)? {
            if r.outcome.first_tokens.contains(&id) {
                first.get_or_insert(r.end);
            }
            if r.outcome.completions.contains(&id) {
                done = Some(r.end);
            }
        }
    }
    let (first, done) = (first.unwrap() - arrival, done.unwrap() - arrival);
    println!("realized  ttft={first:.4}s e2e={done:.4}s");
    println!("cache: {} hits, {} misses", predictor.cache().hits(), predictor.cache().misses());
    Ok(())
}
