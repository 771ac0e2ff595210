use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;

use super::RunReport;

pub const REQUEST_HEADER: &str =
    "id,instance,arrival_s,dispatch_s,first_token_s,finish_s,ttft_s,e2e_s,overhead_s,preempt_count,censored";
pub const SERIES_HEADER: &str = "time_s,free_blocks_mean,free_blocks_variance,cumulative_preemptions";
pub const PROBE_HEADER: &str =
    "request_id,instance,selected,predicted_s,realized_s,counterfactual_s,predicted_rank,realized_rank";

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn summary_text(report: &RunReport) -> String {
    let s = &report.summary;
    let mut out = String::new();
    let rows: [(&str, String); 16] = [
        ("requests", s.requests.to_string()),
        ("finished", s.finished.to_string()),
        ("censored", s.censored.to_string()),
        ("mean_ttft_s", s.mean_ttft.to_string()),
        ("p50_ttft_s", s.p50_ttft.to_string()),
        ("p99_ttft_s", s.p99_ttft.to_string()),
        ("mean_e2e_s", s.mean_e2e.to_string()),
        ("p50_e2e_s", s.p50_e2e.to_string()),
        ("p99_e2e_s", s.p99_e2e.to_string()),
        ("mean_overhead_s", s.mean_overhead.to_string()),
        ("throughput_rps", s.throughput.to_string()),
        ("total_preemptions", s.total_preemptions.to_string()),
        ("fallbacks", s.fallbacks.to_string()),
        ("instances_added", s.instances_added.to_string()),
        ("mean_free_blocks", s.mean_free_blocks.to_string()),
        ("mean_free_blocks_variance", s.mean_free_variance.to_string()),
    ];
    for (k, v) in rows {
        let _ = writeln!(out, "{k}={v}");
    }
    out
}

pub fn requests_csv(report: &RunReport) -> String {
    let mut out = format!("{REQUEST_HEADER}\n");
    for r in &report.rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.id,
            opt(r.instance),
            r.arrival,
            opt(r.dispatch),
            opt(r.first_token),
            opt(r.finish),
            opt(r.ttft()),
            opt(r.e2e()),
            opt(r.overhead()),
            r.preemptions,
            r.censored()
        );
    }
    out
}

pub fn series_csv(report: &RunReport) -> String {
    let mut out = format!("{SERIES_HEADER}\n");
    for m in &report.series {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            m.t, m.free_mean, m.free_variance, m.cumulative_preemptions
        );
    }
    out
}

pub fn probes_csv(report: &RunReport) -> String {
    let mut out = format!("{PROBE_HEADER}\n");
    for p in &report.probes {
        let realized_rank = p.realized_rank();
        for (inst, pred) in &p.predicted {
            let selected = *inst == p.selected;
            let realized = if selected { p.realized } else { None };
            let cf = p.counterfactual.as_ref().and_then(|c| c.get(inst).copied());
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                p.request_id,
                inst,
                selected,
                pred,
                opt(realized),
                opt(cf),
                if selected { opt(p.predicted_rank()) } else { String::new() },
                if selected { opt(realized_rank) } else { String::new() },
            );
        }
    }
    out
}

/// Writes `summary.txt`, `requests.csv`, `memory.csv` and `probes.csv`.
pub fn write_report(report: &RunReport, dir: &Path) -> io::Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("summary.txt"), summary_text(report))?;
    fs::write(dir.join("requests.csv"), requests_csv(report))?;
    fs::write(dir.join("memory.csv"), series_csv(report))?;
    fs::write(dir.join("probes.csv"), probes_csv(report))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{aggregate, LogEvent, RunLog};
    use crate::types::{InstanceId, RequestId};

    #[test]
    fn tables_have_headers_and_rows() {
        let mut log = RunLog::default();
        let id = RequestId(4);
        log.push(LogEvent::Arrived { t: 1.0, id });
        log.push(LogEvent::Dispatched { t: 1.0, id, instance: InstanceId(2) });
        log.push(LogEvent::FirstToken { t: 1.5, id });
        log.push(LogEvent::Finished { t: 3.0, id });
        let report = aggregate(&log);
        let csv = requests_csv(&report);
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some(REQUEST_HEADER));
        assert_eq!(lines.next(), Some("4,2,1,1,1.5,3,0.5,2,0,0,false"));
        assert!(summary_text(&report).contains("p99_ttft_s=0.5\n"));
        let dir = tempfile::tempdir().unwrap();
        write_report(&report, dir.path()).unwrap();
        for f in ["summary.txt", "requests.csv", "memory.csv", "probes.csv"] {
            assert!(dir.path().join(f).exists());
        }
    }
}
