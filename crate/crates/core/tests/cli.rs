use std::path::Path;
use std::process::Command;

fn blocksim() -> Command {
    Command::new(env!("CARGO_BIN_EXE_blocksim"))
}

fn write_config(dir: &Path, trace: Option<&Path>) -> std::path::PathBuf {
    let trace_line = trace.map(|t| format!("trace = {:?}\n", t.display().to_string())).unwrap_or_default();
    let text = format!(
        "[cluster]\ninstances = 2\n\n[workload]\n{trace_line}qps = 4.0\nmax_requests = 60\n\n[sweep]\npolicies = [\"RoundRobin\", \"BlockPredictive\"]\nseeds = [0, 1]\nqps = [3.0, 5.0]\ncapacity_range = [1, 3]\n"
    );
    let path = dir.join("small.toml");
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn run_writes_reports() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), None);
    let out = dir.path().join("out");
    let status = blocksim()
        .args(["run", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out)
        .args(["--policy", "RoundRobin", "--seed", "3"])
        .output()
        .unwrap();
    assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
    assert!(String::from_utf8_lossy(&status.stdout).contains("finished=60"));
    for f in ["summary.txt", "requests.csv", "memory.csv", "probes.csv", "config.toml"] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    let rows = std::fs::read_to_string(out.join("requests.csv")).unwrap();
    assert_eq!(rows.lines().count(), 61);
}

#[test]
fn sweep_and_capacity_emit_csv() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), None);
    let out = dir.path().join("out");
    let s = blocksim().arg("sweep").arg("--config").arg(&cfg).arg("--out").arg(&out).output().unwrap();
    assert!(s.status.success(), "{}", String::from_utf8_lossy(&s.stderr));
    let csv = std::fs::read_to_string(out.join("sweep.csv")).unwrap();
    // 2 policies x 2 rates x 2 seeds, plus header
    assert_eq!(csv.lines().count(), 9);

    let c = blocksim().arg("capacity").arg("--config").arg(&cfg).arg("--out").arg(&out).output().unwrap();
    assert!(c.status.success(), "{}", String::from_utf8_lossy(&c.stderr));
    let csv = std::fs::read_to_string(out.join("capacity.csv")).unwrap();
    assert!(csv.starts_with("policy,capacity_qps"));
    assert_eq!(csv.lines().count(), 3);
}

#[test]
fn convert_then_replay() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("burst.csv");
    let mut text = String::from("Timestamp,Model,Request tokens,Response tokens,Total tokens,Log Type\n");
    for i in 0..40 {
        let response = if i == 7 { 0 } else { 20 + i };
        text.push_str(&format!("{},m,{},{},0,x\n", 100.0 + i as f64 * 0.3, 50 + 10 * i, response));
    }
    std::fs::write(&csv, text).unwrap();
    let trace = dir.path().join("trace.jsonl");
    let c = blocksim()
        .args(["convert-trace", "--format", "burstgpt", "--input"])
        .arg(&csv)
        .arg("--output")
        .arg(&trace)
        .output()
        .unwrap();
    assert!(c.status.success(), "{}", String::from_utf8_lossy(&c.stderr));
    assert!(String::from_utf8_lossy(&c.stdout).contains("wrote 39 records"));

    let cfg = write_config(dir.path(), Some(&trace));
    let out = dir.path().join("out");
    let r = blocksim().arg("run").arg("--config").arg(&cfg).arg("--out").arg(&out).output().unwrap();
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    assert!(String::from_utf8_lossy(&r.stdout).contains("finished=39"));
}

#[test]
fn bad_config_exits_with_code_2() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    std::fs::write(&path, "[cluster]\ninstances = 0\n").unwrap();
    let r = blocksim().arg("run").arg("--config").arg(&path).output().unwrap();
    assert_eq!(r.status.code(), Some(2));
    std::fs::write(&path, "[cluster]\nbogus = 1\n").unwrap();
    let r = blocksim().arg("run").arg("--config").arg(&path).output().unwrap();
    assert_eq!(r.status.code(), Some(2));
}
