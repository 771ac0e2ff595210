//! Traces, arrival processes and response-length estimation.

use std::collections::BTreeSet;
use std::io::{BufRead, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, LogNormal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::{RequestId, Seconds};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub id: u64,
    pub prompt_tokens: u64,
    pub output_tokens: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub estimated_output_tokens: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub arrival_offset_s: Option<Seconds>,
}

impl TraceRecord {
    pub fn new(id: u64, prompt_tokens: u64, output_tokens: u64) -> Self {
        Self {
            id,
            prompt_tokens,
            output_tokens,
            estimated_output_tokens: None,
            arrival_offset_s: None,
        }
    }

    pub fn request_id(&self) -> RequestId {
        RequestId(self.id)
    }
}

#[derive(Debug, Error)]
pub enum WorkloadError {
    #[error("line {line}: {message}")]
    ParseError { line: usize, message: String },
    #[error("line {line}: invalid {field}")]
    InvalidRecord { line: usize, field: &'static str },
    #[error("arrival rate must be positive, got {0}")]
    InvalidRate(f64),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Reads a line-delimited JSON trace. Blank lines are skipped; line numbers
/// in errors are 1-based.
pub fn load_trace(source: impl BufRead) -> Result<Vec<TraceRecord>, WorkloadError> {
    let mut out = Vec::new();
    let mut seen = BTreeSet::new();
    for (idx, line) in source.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: TraceRecord = serde_json::from_str(&line).map_err(|e| WorkloadError::ParseError {
            line: line_no,
            message: e.to_string(),
        })?;
        let invalid = |field| WorkloadError::InvalidRecord { line: line_no, field };
        if rec.prompt_tokens == 0 {
            return Err(invalid("prompt_tokens"));
        }
        if rec.output_tokens == 0 {
            return Err(invalid("output_tokens"));
        }
        if rec.estimated_output_tokens == Some(0) {
            return Err(invalid("estimated_output_tokens"));
        }
        if rec.arrival_offset_s.is_some_and(|t| !(t >= 0.0) || !t.is_finite()) {
            return Err(invalid("arrival_offset_s"));
        }
        if !seen.insert(rec.id) {
            return Err(invalid("id"));
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn load_trace_file(path: impl AsRef<Path>) -> Result<Vec<TraceRecord>, WorkloadError> {
    let file = std::fs::File::open(path)?;
    load_trace(std::io::BufReader::new(file))
}

pub fn write_trace(records: &[TraceRecord], mut out: impl Write) -> std::io::Result<()> {
    for rec in records {
        serde_json::to_writer(&mut out, rec)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Poisson arrivals: independent Exp(qps) gaps, records kept in trace order.
pub fn generate_arrivals(
    records: &[TraceRecord],
    qps: f64,
    seed: u64,
) -> Result<Vec<(Seconds, TraceRecord)>, WorkloadError> {
    if !(qps > 0.0) || !qps.is_finite() {
        return Err(WorkloadError::InvalidRate(qps));
    }
    let gap = Exp::new(qps).expect("positive rate");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = 0.0;
    Ok(records
        .iter()
        .map(|r| {
            t += gap.sample(&mut rng);
            (t, r.clone())
        })
        .collect())
}

/// Uses the trace's own offsets when every record carries one, otherwise
/// falls back to Poisson arrivals at `qps`.
pub fn schedule_arrivals(
    records: &[TraceRecord],
    qps: f64,
    seed: u64,
) -> Result<Vec<(Seconds, TraceRecord)>, WorkloadError> {
    if !records.is_empty() && records.iter().all(|r| r.arrival_offset_s.is_some()) {
        let mut out: Vec<_> = records
            .iter()
            .map(|r| (r.arrival_offset_s.unwrap(), r.clone()))
            .collect();
        // stable: equal offsets keep file order
        out.sort_by(|a, b| a.0.total_cmp(&b.0));
        return Ok(out);
    }
    generate_arrivals(records, qps, seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LengthEstimator {
    #[default]
    Oracle,
    Fixed { value: u64 },
    Noisy { mean_abs_rel_error: f64, seed: u64 },
    /// The trace's `estimated_output_tokens`, or the true length if absent.
    Tagged,
}

// E|z| for standard normal z
const HALF_NORMAL_MEAN: f64 = 0.797_884_560_802_865_4;

fn mix(seed: u64, id: u64) -> u64 {
    // splitmix64 finalizer over the pair
    let mut z = seed ^ id.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Signed relative error drawn for one record; a pure function of
/// `(seed, id)`.
pub fn noisy_error(mean_abs_rel_error: f64, seed: u64, id: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, id));
    let z: f64 = rng.sample(StandardNormal);
    let sign = if rng.gen::<bool>() { 1.0 } else { -1.0 };
    sign * z.abs() * (mean_abs_rel_error / HALF_NORMAL_MEAN)
}

pub fn estimate_length(estimator: &LengthEstimator, record: &TraceRecord) -> u64 {
    match *estimator {
        LengthEstimator::Oracle => record.output_tokens,
        LengthEstimator::Fixed { value } => value.max(1),
        LengthEstimator::Noisy { mean_abs_rel_error, seed } => {
            let e = noisy_error(mean_abs_rel_error, seed, record.id);
            let v = (record.output_tokens as f64 * (1.0 + e)).round();
            if v < 1.0 {
                1
            } else {
                v as u64
            }
        }
        LengthEstimator::Tagged => record.estimated_output_tokens.unwrap_or(record.output_tokens),
    }
}

/// Synthetic trace with lognormal prompt and output lengths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub count: usize,
    pub prompt_median: f64,
    pub prompt_sigma: f64,
    pub prompt_max: u64,
    pub output_median: f64,
    pub output_sigma: f64,
    pub output_max: u64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            count: 2000,
            prompt_median: 200.0,
            prompt_sigma: 0.9,
            prompt_max: 2048,
            output_median: 180.0,
            output_sigma: 1.0,
            output_max: 2048,
            seed: 0,
        }
    }
}

pub fn synthetic_trace(spec: &SyntheticSpec) -> Vec<TraceRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let prompt = LogNormal::new(spec.prompt_median.ln(), spec.prompt_sigma).expect("valid lognormal");
    let output = LogNormal::new(spec.output_median.ln(), spec.output_sigma).expect("valid lognormal");
    (0..spec.count as u64)
        .map(|id| {
            let p = (prompt.sample(&mut rng).round() as u64).clamp(1, spec.prompt_max);
            let o = (output.sample(&mut rng).round() as u64).clamp(1, spec.output_max);
            TraceRecord::new(id, p, o)
        })
        .collect()
}

/// Token count approximated from text length; no tokenizer is bundled.
pub fn approx_tokens(text: &str) -> u64 {
    (text.chars().count() as u64).div_ceil(4).max(1)
}

#[derive(Debug, Deserialize)]
struct ShareGptConversation {
    #[serde(default)]
    conversations: Vec<ShareGptTurn>,
}

#[derive(Debug, Deserialize)]
struct ShareGptTurn {
    from: String,
    value: String,
}

/// ShareGPT-style dump: a JSON array of conversations. Each human turn
/// followed by a model turn becomes one record.
pub fn convert_sharegpt(source: impl Read) -> Result<Vec<TraceRecord>, WorkloadError> {
    let convs: Vec<ShareGptConversation> =
        serde_json::from_reader(source).map_err(|e| WorkloadError::ParseError {
            line: e.line(),
            message: e.to_string(),
        })?;
    let mut out = Vec::new();
    for conv in &convs {
        for pair in conv.conversations.windows(2) {
            let human = matches!(pair[0].from.as_str(), "human" | "user");
            let model = matches!(pair[1].from.as_str(), "gpt" | "assistant" | "chatgpt");
            if human && model {
                out.push(TraceRecord::new(
                    out.len() as u64,
                    approx_tokens(&pair[0].value),
                    approx_tokens(&pair[1].value),
                ));
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Deserialize)]
struct BurstRow {
    #[serde(rename = "Timestamp")]
    timestamp: f64,
    #[serde(rename = "Request tokens")]
    request_tokens: u64,
    #[serde(rename = "Response tokens")]
    response_tokens: u64,
}

/// BurstGPT-style CSV. Offsets are relative to the first row; rows with an
/// empty prompt or response are dropped.
pub fn convert_burstgpt(source: impl Read) -> Result<Vec<TraceRecord>, WorkloadError> {
    let mut reader = csv::Reader::from_reader(source);
    let mut out = Vec::new();
    let mut first = None;
    for (idx, row) in reader.deserialize::<BurstRow>().enumerate() {
        let row = row.map_err(|e| WorkloadError::ParseError {
            line: idx + 2,
            message: e.to_string(),
        })?;
        let t0 = *first.get_or_insert(row.timestamp);
        if row.request_tokens == 0 || row.response_tokens == 0 {
            continue;
        }
        let mut rec = TraceRecord::new(out.len() as u64, row.request_tokens, row.response_tokens);
        rec.arrival_offset_s = Some((row.timestamp - t0).max(0.0));
        out.push(rec);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loads_valid_lines_in_order() {
        let src = "{\"id\":3,\"prompt_tokens\":10,\"output_tokens\":5}\n\
                   {\"id\":1,\"prompt_tokens\":4,\"output_tokens\":2,\"estimated_output_tokens\":3}\n\
                   \n\
                   {\"id\":2,\"prompt_tokens\":7,\"output_tokens\":9,\"arrival_offset_s\":1.5}\n";
        let recs = load_trace(src.as_bytes()).unwrap();
        assert_eq!(recs.iter().map(|r| r.id).collect::<Vec<_>>(), vec![3, 1, 2]);
        assert_eq!(recs[1].estimated_output_tokens, Some(3));
        assert_eq!(recs[2].arrival_offset_s, Some(1.5));
    }

    #[test]
    fn rejects_zero_output() {
        let src = "{\"id\":1,\"prompt_tokens\":4,\"output_tokens\":0}\n";
        assert!(matches!(
            load_trace(src.as_bytes()),
            Err(WorkloadError::InvalidRecord { line: 1, field: "output_tokens" })
        ));
    }

    #[test]
    fn rejects_duplicate_id() {
        let src = "{\"id\":1,\"prompt_tokens\":4,\"output_tokens\":2}\n\
                   {\"id\":1,\"prompt_tokens\":4,\"output_tokens\":2}\n";
        assert!(matches!(
            load_trace(src.as_bytes()),
            Err(WorkloadError::InvalidRecord { line: 2, field: "id" })
        ));
    }

    #[test]
    fn parse_error_carries_line() {
        let src = "{\"id\":1,\"prompt_tokens\":4,\"output_tokens\":2}\nnot json\n";
        assert!(matches!(
            load_trace(src.as_bytes()),
            Err(WorkloadError::ParseError { line: 2, .. })
        ));
    }

    #[test]
    fn roundtrip_through_writer() {
        let recs = synthetic_trace(&SyntheticSpec { count: 20, ..Default::default() });
        let mut buf = Vec::new();
        write_trace(&recs, &mut buf).unwrap();
        assert_eq!(load_trace(buf.as_slice()).unwrap(), recs);
    }

    #[test]
    fn poisson_mean_gap() {
        let recs: Vec<_> = (0..10_000).map(|i| TraceRecord::new(i, 1, 1)).collect();
        let arr = generate_arrivals(&recs, 2.0, 11).unwrap();
        let n = arr.len() as f64;
        let mean = arr.last().unwrap().0 / n;
        // exponential: sd = mean = 1/qps
        let se = 0.5 / n.sqrt();
        assert!((mean - 0.5).abs() < 3.0 * se, "mean gap {mean}");
        let ids: Vec<_> = arr.iter().map(|(_, r)| r.id).collect();
        assert!(ids.windows(2).all(|w| w[0] < w[1]));
        assert!(arr.windows(2).all(|w| w[0].0 <= w[1].0));
    }

    #[test]
    fn arrivals_deterministic_per_seed() {
        let recs: Vec<_> = (0..100).map(|i| TraceRecord::new(i, 1, 1)).collect();
        let a: Vec<_> = generate_arrivals(&recs, 3.0, 5).unwrap().into_iter().map(|x| x.0).collect();
        let b: Vec<_> = generate_arrivals(&recs, 3.0, 5).unwrap().into_iter().map(|x| x.0).collect();
        assert_eq!(a, b);
        let one = generate_arrivals(&recs[..1], 3.0, 5).unwrap();
        assert!(one[0].0 > 0.0);
        assert!(generate_arrivals(&recs, 0.0, 5).is_err());
    }

    #[test]
    fn offsets_override_poisson() {
        let mut recs: Vec<_> = (0..3).map(|i| TraceRecord::new(i, 1, 1)).collect();
        for (r, t) in recs.iter_mut().zip([0.0, 2.5, 1.0]) {
            r.arrival_offset_s = Some(t);
        }
        let arr = schedule_arrivals(&recs, 1.0, 0).unwrap();
        let got: Vec<_> = arr.iter().map(|(t, r)| (*t, r.id)).collect();
        assert_eq!(got, vec![(0.0, 0), (1.0, 2), (2.5, 1)]);
        recs[1].arrival_offset_s = None;
        let arr = schedule_arrivals(&recs, 1.0, 0).unwrap();
        assert!(arr[0].0 > 0.0);
    }

    #[test]
    fn estimator_examples() {
        let r = TraceRecord::new(0, 10, 300);
        assert_eq!(estimate_length(&LengthEstimator::Oracle, &r), 300);
        assert_eq!(estimate_length(&LengthEstimator::Fixed { value: 256 }, &r), 256);
        assert_eq!(estimate_length(&LengthEstimator::Tagged, &r), 300);
        let r2 = TraceRecord { estimated_output_tokens: Some(17), ..r };
        assert_eq!(estimate_length(&LengthEstimator::Tagged, &r2), 17);
    }

    #[test]
    fn noisy_estimator_hits_target_error() {
        let recs = synthetic_trace(&SyntheticSpec { count: 10_000, seed: 3, ..Default::default() });
        let est = LengthEstimator::Noisy { mean_abs_rel_error: 0.244, seed: 9 };
        let mean: f64 = recs
            .iter()
            .map(|r| {
                let e = estimate_length(&est, r) as f64;
                (e - r.output_tokens as f64).abs() / r.output_tokens as f64
            })
            .sum::<f64>()
            / recs.len() as f64;
        assert!((mean - 0.244).abs() <= 0.02, "mean abs rel error {mean}");
        assert!(recs.iter().all(|r| estimate_length(&est, r) >= 1));
        // pure function of (seed, id)
        assert_eq!(estimate_length(&est, &recs[7]), estimate_length(&est, &recs[7]));
    }

    #[test]
    fn noisy_error_is_symmetric() {
        let errs: Vec<f64> = (0..20_000).map(|i| noisy_error(0.3, 1, i)).collect();
        let pos = errs.iter().filter(|e| **e > 0.0).count() as f64 / errs.len() as f64;
        assert!((pos - 0.5).abs() < 0.02);
        let mean_abs = errs.iter().map(|e| e.abs()).sum::<f64>() / errs.len() as f64;
        assert!((mean_abs - 0.3).abs() < 0.01);
    }

    #[test]
    fn synthetic_is_heavy_tailed_and_clamped() {
        let recs = synthetic_trace(&SyntheticSpec { count: 5000, ..Default::default() });
        let mut outs: Vec<u64> = recs.iter().map(|r| r.output_tokens).collect();
        outs.sort_unstable();
        let median = outs[outs.len() / 2] as f64;
        let mean = outs.iter().sum::<u64>() as f64 / outs.len() as f64;
        assert!(mean > median);
        assert!(*outs.last().unwrap() <= 2048 && outs[0] >= 1);
    }

    #[test]
    fn sharegpt_pairs_become_records() {
        let src = r#"[{"id":"a","conversations":[
            {"from":"human","value":"hello there"},
            {"from":"gpt","value":"general kenobi, you are a bold one"},
            {"from":"human","value":"x"}]},
            {"id":"b","conversations":[{"from":"gpt","value":"orphan"}]}]"#;
        let recs = convert_sharegpt(src.as_bytes()).unwrap();
        assert_eq!(recs.len(), 1);
        assert_eq!((recs[0].prompt_tokens, recs[0].output_tokens), (3, 9));
    }

    #[test]
    fn burstgpt_rows_become_offsets() {
        let src = "Timestamp,Model,Request tokens,Response tokens,Total tokens,Log Type\n\
                   5,ChatGPT,100,20,120,Conversation log\n\
                   6.5,ChatGPT,50,0,50,Conversation log\n\
                   8,GPT-4,30,40,70,API log\n";
        let recs = convert_burstgpt(src.as_bytes()).unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[0].arrival_offset_s, Some(0.0));
        assert_eq!(recs[1].arrival_offset_s, Some(3.0));
        assert_eq!((recs[1].prompt_tokens, recs[1].output_tokens), (30, 40));
    }
}
