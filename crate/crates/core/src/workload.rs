//! Request traces: synthetic Poisson generation, JSON-lines I/O and summaries.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Exp, LogNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, splitmix64, stream};

pub type RequestId = u64;

/// Simulated time in integer microseconds.
pub type Micros = u64;

pub fn ms_to_us(ms: f64) -> Micros {
    if ms <= 0.0 {
        0
    } else {
        (ms * 1000.0).round() as Micros
    }
}

pub fn us_to_ms(us: Micros) -> f64 {
    us as f64 / 1000.0
}

/// One inference request. `output_len` is ground truth and only the oracle
/// policy and the executor may look at it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Request {
    pub id: RequestId,
    pub arrival_us: Micros,
    pub input_len: u32,
    pub output_len: u32,
    pub prompt_tokens: Option<Vec<u32>>,
}

impl Request {
    pub fn arrival_ms(&self) -> f64 {
        us_to_ms(self.arrival_us)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TraceMeta {
    /// Requests per second, when generated.
    pub rate: Option<f64>,
    pub seed: Option<u64>,
    /// Preset or distribution family the lengths were drawn from.
    pub distribution: String,
    pub duration_s: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trace {
    pub requests: Vec<Request>,
    pub meta: TraceMeta,
}

impl Trace {
    /// Builds a trace, sorting by `(arrival, id)` and rejecting duplicate ids.
    pub fn new(mut requests: Vec<Request>, meta: TraceMeta) -> Result<Self> {
        let mut seen = HashSet::with_capacity(requests.len());
        for r in &requests {
            if !seen.insert(r.id) {
                return Err(Error::DuplicateId(r.id));
            }
        }
        requests.sort_by_key(|r| (r.arrival_us, r.id));
        Ok(Trace { requests, meta })
    }

    pub fn len(&self) -> usize {
        self.requests.len()
    }

    pub fn is_empty(&self) -> bool {
        self.requests.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum LengthFamily {
    Lognormal {
        input_mu: f64,
        input_sigma: f64,
        output_mu: f64,
        output_sigma: f64,
    },
    /// `(input_len, output_len)` pairs sampled with replacement.
    Empirical { pairs: Vec<(u32, u32)> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LengthDistribution {
    pub name: String,
    #[serde(flatten)]
    pub family: LengthFamily,
    pub max_len: u32,
}

impl LengthDistribution {
    /// Short instruction-style prompts and answers.
    pub fn alpaca() -> Self {
        LengthDistribution {
            name: "alpaca".into(),
            family: LengthFamily::Lognormal {
                input_mu: 3.0,
                input_sigma: 0.8,
                output_mu: 3.6,
                output_sigma: 0.8,
            },
            max_len: 2048,
        }
    }

    /// Longer conversational turns with a heavier tail.
    pub fn sharegpt() -> Self {
        LengthDistribution {
            name: "sharegpt".into(),
            family: LengthFamily::Lognormal {
                input_mu: 4.6,
                input_sigma: 1.1,
                output_mu: 5.0,
                output_sigma: 1.2,
            },
            max_len: 2048,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "alpaca" => Ok(Self::alpaca()),
            "sharegpt" => Ok(Self::sharegpt()),
            other => Err(Error::InvalidParameter(format!("unknown preset '{other}'"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_len == 0 {
            return Err(Error::InvalidParameter("max_len must be >= 1".into()));
        }
        match &self.family {
            LengthFamily::Lognormal {
                input_mu,
                input_sigma,
                output_mu,
                output_sigma,
            } => {
                if !(*input_sigma > 0.0 && *output_sigma > 0.0) {
                    return Err(Error::InvalidParameter("lognormal sigma must be > 0".into()));
                }
                if !(input_mu.is_finite() && output_mu.is_finite()) {
                    return Err(Error::InvalidParameter("lognormal mu must be finite".into()));
                }
            }
            LengthFamily::Empirical { pairs } => {
                if pairs.is_empty() {
                    return Err(Error::InvalidParameter("empirical distribution is empty".into()));
                }
            }
        }
        Ok(())
    }

    fn sampler(&self) -> Result<LengthSampler<'_>> {
        self.validate()?;
        Ok(match &self.family {
            LengthFamily::Lognormal {
                input_mu,
                input_sigma,
                output_mu,
                output_sigma,
            } => LengthSampler::Lognormal {
                input: LogNormal::new(*input_mu, *input_sigma)
                    .map_err(|e| Error::InvalidParameter(e.to_string()))?,
                output: LogNormal::new(*output_mu, *output_sigma)
                    .map_err(|e| Error::InvalidParameter(e.to_string()))?,
                max_len: self.max_len,
            },
            LengthFamily::Empirical { pairs } => LengthSampler::Empirical {
                pairs,
                max_len: self.max_len,
            },
        })
    }
}

enum LengthSampler<'a> {
    Lognormal {
        input: LogNormal<f64>,
        output: LogNormal<f64>,
        max_len: u32,
    },
    Empirical {
        pairs: &'a [(u32, u32)],
        max_len: u32,
    },
}

impl LengthSampler<'_> {
    fn sample<R: Rng>(&self, rng: &mut R) -> (u32, u32) {
        match self {
            LengthSampler::Lognormal {
                input,
                output,
                max_len,
            } => {
                let s = clamp_len(input.sample(rng).round(), *max_len);
                let n = clamp_len(output.sample(rng).round(), *max_len);
                (s, n)
            }
            LengthSampler::Empirical { pairs, max_len } => {
                let (s, n) = pairs[rng.random_range(0..pairs.len())];
                (s.clamp(1, *max_len), n.clamp(1, *max_len))
            }
        }
    }
}

fn clamp_len(x: f64, max_len: u32) -> u32 {
    if !x.is_finite() || x >= max_len as f64 {
        max_len
    } else if x < 1.0 {
        1
    } else {
        x as u32
    }
}

const VOCAB: u64 = 32_000;
const TEMPLATE_TOKENS: u64 = 24;
const NOISE_TOKENS: u64 = 2;

/// Output-length family used to build synthetic prompts: quarter-steps of
/// `ln(n)`, so members of one family differ by at most ~13% in length.
pub fn length_bucket(output_len: u32) -> u32 {
    (4.0 * (output_len.max(1) as f64).ln()).round() as u32
}

/// Pseudo-token prompt for a synthetic request. A shared template selected by
/// the output-length bucket is followed by a few request-specific tokens, so
/// prompts of one family embed close together while staying distinct.
pub fn synthetic_prompt(seed: u64, id: RequestId, output_len: u32) -> Vec<u32> {
    let bucket = length_bucket(output_len) as u64;
    let mut tokens = Vec::with_capacity((TEMPLATE_TOKENS + NOISE_TOKENS) as usize);
    for j in 0..TEMPLATE_TOKENS {
        tokens.push((splitmix64(bucket.wrapping_mul(1_000_003).wrapping_add(j)) % VOCAB) as u32);
    }
    let noise_base = rng::derive_seed(seed, stream::PROMPTS) ^ splitmix64(id);
    for j in 0..NOISE_TOKENS {
        tokens.push((splitmix64(noise_base.wrapping_add(j)) % VOCAB) as u32);
    }
    tokens
}

/// Generates a Poisson-arrival trace over `[0, duration_s)`.
pub fn generate_trace(
    rate: f64,
    duration_s: f64,
    dist: &LengthDistribution,
    seed: u64,
) -> Result<Trace> {
    if !(rate >= 0.0 && rate.is_finite()) {
        return Err(Error::InvalidParameter(format!("rate must be >= 0, got {rate}")));
    }
    if !(duration_s > 0.0 && duration_s.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "duration must be > 0, got {duration_s}"
        )));
    }
    let sampler = dist.sampler()?;
    let meta = TraceMeta {
        rate: Some(rate),
        seed: Some(seed),
        distribution: dist.name.clone(),
        duration_s: Some(duration_s),
    };
    if rate == 0.0 {
        return Ok(Trace {
            requests: Vec::new(),
            meta,
        });
    }

    let gaps = Exp::new(rate).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    let mut arrival_rng = rng::component_rng(seed, stream::ARRIVALS);
    let mut length_rng = rng::component_rng(seed, stream::LENGTHS);

    let mut requests = Vec::new();
    let mut t = 0.0f64;
    loop {
        t += gaps.sample(&mut arrival_rng);
        if t >= duration_s {
            break;
        }
        let id = requests.len() as RequestId;
        let (input_len, output_len) = sampler.sample(&mut length_rng);
        requests.push(Request {
            id,
            arrival_us: (t * 1e6).round() as Micros,
            input_len,
            output_len,
            prompt_tokens: Some(synthetic_prompt(seed, id, output_len)),
        });
    }
    Trace::new(requests, meta)
}

/// Draws `count` requests from `dist` with all arrivals at zero. Used for
/// predictor warm-up corpora where timing is irrelevant.
pub fn sample_corpus(count: usize, dist: &LengthDistribution, seed: u64) -> Result<Vec<Request>> {
    let sampler = dist.sampler()?;
    let mut length_rng = rng::component_rng(seed, stream::LENGTHS);
    Ok((0..count as RequestId)
        .map(|id| {
            let (input_len, output_len) = sampler.sample(&mut length_rng);
            Request {
                id,
                arrival_us: 0,
                input_len,
                output_len,
                prompt_tokens: Some(synthetic_prompt(seed, id, output_len)),
            }
        })
        .collect())
}

#[derive(Debug, Serialize, Deserialize)]
struct TraceRecord {
    id: u64,
    arrival_time_ms: f64,
    input_len: i64,
    output_len: i64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    prompt_tokens: Option<Vec<u32>>,
}

/// Writes one JSON object per line.
pub fn write_trace<W: Write>(trace: &Trace, mut out: W) -> Result<()> {
    for r in &trace.requests {
        let rec = TraceRecord {
            id: r.id,
            arrival_time_ms: r.arrival_ms(),
            input_len: r.input_len as i64,
            output_len: r.output_len as i64,
            prompt_tokens: r.prompt_tokens.clone(),
        };
        serde_json::to_writer(&mut out, &rec)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn save_trace(trace: &Trace, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_trace(trace, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn read_trace<R: BufRead>(input: R) -> Result<Trace> {
    let mut requests = Vec::new();
    for (idx, line) in input.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: TraceRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        let invalid = |message: String| Error::Validation {
            line: line_no,
            message,
        };
        if !(rec.arrival_time_ms.is_finite() && rec.arrival_time_ms >= 0.0) {
            return Err(invalid(format!(
                "arrival_time_ms must be >= 0, got {}",
                rec.arrival_time_ms
            )));
        }
        if rec.input_len < 1 || rec.input_len > u32::MAX as i64 {
            return Err(invalid(format!("input_len must be >= 1, got {}", rec.input_len)));
        }
        if rec.output_len < 1 || rec.output_len > u32::MAX as i64 {
            return Err(invalid(format!("output_len must be >= 1, got {}", rec.output_len)));
        }
        if matches!(&rec.prompt_tokens, Some(t) if t.is_empty()) {
            return Err(invalid("prompt_tokens must not be empty".into()));
        }
        requests.push(Request {
            id: rec.id,
            arrival_us: ms_to_us(rec.arrival_time_ms),
            input_len: rec.input_len as u32,
            output_len: rec.output_len as u32,
            prompt_tokens: rec.prompt_tokens,
        });
    }
    Trace::new(
        requests,
        TraceMeta {
            distribution: "file".into(),
            ..TraceMeta::default()
        },
    )
}

pub fn load_trace(path: &Path) -> Result<Trace> {
    let mut trace = read_trace(BufReader::new(File::open(path)?))?;
    trace.meta.distribution = format!("file:{}", path.display());
    Ok(trace)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LengthStats {
    pub mean: f64,
    pub median: f64,
    pub p95: f64,
    pub max: f64,
}

impl LengthStats {
    fn of(values: &mut [u32]) -> Self {
        if values.is_empty() {
            return LengthStats::default();
        }
        values.sort_unstable();
        let n = values.len();
        let mean = values.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
        let median = if n % 2 == 1 {
            values[n / 2] as f64
        } else {
            (values[n / 2 - 1] as f64 + values[n / 2] as f64) / 2.0
        };
        // nearest-rank percentile
        let rank = ((0.95 * n as f64).ceil() as usize).clamp(1, n);
        LengthStats {
            mean,
            median,
            p95: values[rank - 1] as f64,
            max: values[n - 1] as f64,
        }
    }

    /// Tail heaviness as p95 over median; 0 for an empty set.
    pub fn tail_ratio(&self) -> f64 {
        if self.median > 0.0 {
            self.p95 / self.median
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TraceSummary {
    pub count: usize,
    pub input: LengthStats,
    pub output: LengthStats,
    pub meta: TraceMeta,
}

pub fn summarize_trace(trace: &Trace) -> TraceSummary {
    let mut inputs: Vec<u32> = trace.requests.iter().map(|r| r.input_len).collect();
    let mut outputs: Vec<u32> = trace.requests.iter().map(|r| r.output_len).collect();
    TraceSummary {
        count: trace.len(),
        input: LengthStats::of(&mut inputs),
        output: LengthStats::of(&mut outputs),
        meta: trace.meta.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn req(id: u64, arrival_us: u64, s: u32, n: u32) -> Request {
        Request {
            id,
            arrival_us,
            input_len: s,
            output_len: n,
            prompt_tokens: None,
        }
    }

    #[test]
    fn zero_rate_gives_empty_trace() {
        let t = generate_trace(0.0, 60.0, &LengthDistribution::alpaca(), 1).unwrap();
        assert!(t.is_empty());
    }

    #[test]
    fn rejects_bad_parameters() {
        let d = LengthDistribution::alpaca();
        assert!(generate_trace(-1.0, 60.0, &d, 1).is_err());
        assert!(generate_trace(1.0, 0.0, &d, 1).is_err());
        let mut bad = d.clone();
        bad.family = LengthFamily::Lognormal {
            input_mu: 1.0,
            input_sigma: 0.0,
            output_mu: 1.0,
            output_sigma: 1.0,
        };
        assert!(matches!(
            generate_trace(1.0, 10.0, &bad, 1),
            Err(Error::InvalidParameter(_))
        ));
        let empty = LengthDistribution {
            name: "e".into(),
            family: LengthFamily::Empirical { pairs: vec![] },
            max_len: 10,
        };
        assert!(generate_trace(1.0, 10.0, &empty, 1).is_err());
    }

    #[test]
    fn empirical_lengths_are_clamped() {
        let d = LengthDistribution {
            name: "e".into(),
            family: LengthFamily::Empirical {
                pairs: vec![(5000, 3), (0, 9000)],
            },
            max_len: 100,
        };
        let t = generate_trace(50.0, 10.0, &d, 3).unwrap();
        assert!(!t.is_empty());
        for r in &t.requests {
            assert!((1..=100).contains(&r.input_len));
            assert!((1..=100).contains(&r.output_len));
        }
    }

    #[test]
    fn summary_arithmetic() {
        let t = Trace::new(
            vec![req(0, 0, 10, 1), req(1, 1, 20, 2), req(2, 2, 30, 3)],
            TraceMeta::default(),
        )
        .unwrap();
        let s = summarize_trace(&t);
        assert_eq!(s.count, 3);
        assert_eq!(s.input.mean, 20.0);
        assert_eq!(s.input.median, 20.0);
        assert_eq!(s.input.max, 30.0);
        assert_eq!(s.input.p95, 30.0);
    }

    #[test]
    fn empty_summary_is_zeroed() {
        let s = summarize_trace(&Trace::default());
        assert_eq!(s.count, 0);
        assert_eq!(s.input, LengthStats::default());
        assert_eq!(s.output, LengthStats::default());
    }

    #[test]
    fn duplicate_ids_rejected() {
        let r = Trace::new(vec![req(1, 0, 1, 1), req(1, 5, 1, 1)], TraceMeta::default());
        assert!(matches!(r, Err(Error::DuplicateId(1))));
    }

    #[test]
    fn equal_arrivals_ordered_by_id() {
        let t = Trace::new(
            vec![req(9, 10, 1, 1), req(3, 10, 1, 1), req(5, 0, 1, 1)],
            TraceMeta::default(),
        )
        .unwrap();
        let ids: Vec<u64> = t.requests.iter().map(|r| r.id).collect();
        assert_eq!(ids, vec![5, 3, 9]);
    }

    #[test]
    fn read_well_formed_and_sorts() {
        let text = r#"{"id":1,"arrival_time_ms":30.5,"input_len":4,"output_len":7}
{"id":2,"arrival_time_ms":10,"input_len":3,"output_len":2,"prompt_tokens":[1,2,3]}
{"id":3,"arrival_time_ms":20,"input_len":8,"output_len":1}
"#;
        let t = read_trace(text.as_bytes()).unwrap();
        let ids: Vec<u64> = t.requests.iter().map(|r| r.id).collect();
        assert_eq!(ids, vec![2, 3, 1]);
        assert_eq!(t.requests[2].arrival_us, 30_500);
        assert_eq!(t.requests[0].prompt_tokens.as_deref(), Some(&[1, 2, 3][..]));
    }

    #[test]
    fn missing_field_names_line() {
        let text = "{\"id\":1,\"arrival_time_ms\":0,\"input_len\":4,\"output_len\":7}\n{\"id\":2,\"arrival_time_ms\":1,\"input_len\":3}\n";
        match read_trace(text.as_bytes()) {
            Err(Error::Parse { line, message }) => {
                assert_eq!(line, 2);
                assert!(message.contains("output_len"), "{message}");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn nonpositive_lengths_rejected() {
        let text = "{\"id\":1,\"arrival_time_ms\":0,\"input_len\":0,\"output_len\":7}\n";
        assert!(matches!(
            read_trace(text.as_bytes()),
            Err(Error::Validation { line: 1, .. })
        ));
        let text = "{\"id\":1,\"arrival_time_ms\":0,\"input_len\":3,\"output_len\":-2}\n";
        assert!(matches!(
            read_trace(text.as_bytes()),
            Err(Error::Validation { line: 1, .. })
        ));
    }

    #[test]
    fn synthetic_prompts_share_family_template() {
        let a = synthetic_prompt(1, 10, 100);
        let b = synthetic_prompt(1, 11, 101);
        assert_eq!(length_bucket(100), length_bucket(101));
        assert_eq!(a[..24], b[..24]);
        assert_ne!(a, b);
        let c = synthetic_prompt(1, 10, 400);
        assert_ne!(a[..24], c[..24]);
    }
}
