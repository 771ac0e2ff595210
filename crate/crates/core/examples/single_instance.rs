//! Steps one instance by hand and prints what each batch did.

use blocksim::backend::{Instance, Sequence};
use blocksim::types::{InstanceConfig, RequestId};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let config = InstanceConfig {
        total_blocks: 64,
        max_batch_size: 4,
        chunk_budget: 256,
        ..InstanceConfig::default()
    };
    let mut inst = Instance::new(config)?;
    for (i, (p, o)) in [(300, 40), (700, 12), (64, 90), (500, 60), (128, 30)].into_iter().enumerate() {
        inst.admit(Sequence::new(RequestId(i as u64), p, o, o), 0.0)?;
    }

    let mut now = 0.0;
    println!("{:>4} {:>9} {:>7} {:>7} {:>5}  events", "step", "end_s", "prefill", "decodes", "free");
    while let Some(end) = inst.start_step(now)? {
        let r = inst.finish_step().expect("step in flight");
        now = end;
        let plan = &r.outcome.plan;
        let mut events = Vec::new();
        events.extend(r.outcome.first_tokens.iter().map(|id| format!("first:{id}")));
        events.extend(r.outcome.completions.iter().map(|id| format!("done:{id}")));
        events.extend(r.outcome.preemptions.iter().map(|id| format!("preempt:{id}")));
        if plan.total_prefill_tokens > 0 || !events.is_empty() {
            println!(
                "{:>4} {:>9.4} {:>7} {:>7} {:>5}  {}",
                inst.steps(),
                end,
                plan.total_prefill_tokens,
                plan.decode_ids.len(),
                inst.free_blocks(),
                events.join(" ")
            );
        }
    }
    println!("drained at t={now:.3}s after {} steps", inst.steps());
    Ok(())
}
