//! Replays a length trace with its own arrival offsets.
//!
//! cargo run --release --example trace_replay [trace.jsonl]

use blocksim::harness::{simulate, ExperimentConfig};
use blocksim::workload::{load_trace_file, schedule_arrivals, synthetic_trace, write_trace, SyntheticSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let records = match std::env::args().nth(1) {
        Some(path) => load_trace_file(path)?,
        None => {
            let mut recs = synthetic_trace(&SyntheticSpec {
                count: 300,
                ..SyntheticSpec::default()
            });
            // a burst every ten seconds
            for (i, r) in recs.iter_mut().enumerate() {
                r.arrival_offset_s = Some((i / 30) as f64 * 10.0 + (i % 30) as f64 * 0.05);
            }
            let mut buf = Vec::new();
            write_trace(&recs[..2], &mut buf)?;
            print!("trace format:\n{}", String::from_utf8_lossy(&buf));
            recs
        }
    };
    let mut cfg = ExperimentConfig::default();
    cfg.cluster.instances = 4;
    let arrivals = schedule_arrivals(&records, cfg.workload.qps, cfg.workload.seed)?;
    let s = simulate(cfg.sim_params()?, &arrivals, false)?.report.summary;
    println!(
        "{} requests over {:.0}s: mean ttft {:.3}s, p99 ttft {:.3}s, p99 e2e {:.2}s, throughput {:.1} req/s",
        s.finished,
        arrivals.last().map_or(0.0, |a| a.0),
        s.mean_ttft,
        s.p99_ttft,
        s.p99_e2e,
        s.throughput
    );
    Ok(())
}
