//! Reward scoring r(x, y) behind a pluggable trait: a synthetic marker-count
//! oracle for desk-scale experiments, a newline-delimited-JSON client for
//! external detector processes, and the factual-incongruity measure
//! 1 - S_inter over cross-modal embeddings.

use std::io::{BufRead, BufReader, Write};
use std::path::PathBuf;
use std::process::{Child, Command, Stdio};
use std::sync::mpsc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::resolve_features;
use crate::nn::rng::fnv1a;
use crate::nn::tensor::cosine;

/// A reward in [0, 1] tagged with the scorer that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardScore {
    pub value: f64,
    pub scorer_id: String,
}

impl RewardScore {
    pub fn new(value: f64, scorer_id: &str) -> Result<Self> {
        if !value.is_finite() || !(0.0..=1.0).contains(&value) {
            return Err(Error::Scorer(format!(
                "reward {value} from {scorer_id} outside [0,1]"
            )));
        }
        Ok(RewardScore {
            value,
            scorer_id: scorer_id.to_string(),
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ScoreRequest<'a> {
    pub id: &'a str,
    pub text: &'a str,
    pub image_ref: Option<&'a str>,
}

pub trait Scorer: Send {
    fn id(&self) -> &str;

    fn score(&mut self, req: &ScoreRequest) -> Result<f64>;

    /// Batch form; must preserve per-item equality with single calls.
    fn score_batch(&mut self, reqs: &[ScoreRequest]) -> Result<Vec<f64>> {
        reqs.iter().map(|r| self.score(r)).collect()
    }

    fn score_reward(&mut self, req: &ScoreRequest) -> Result<RewardScore> {
        let value = self.score(req)?;
        RewardScore::new(value, self.id())
    }
}

/// Which scorer to instantiate, parsed from a `--scorer` spec string.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ScorerSpec {
    /// `synthetic` or `synthetic:<saturation>`
    Synthetic { saturation: usize },
    /// `cmd:<shell command>` speaking NDJSON on stdio
    Command { command: String },
    /// `tcp:<host:port>` speaking NDJSON over a socket
    Tcp { addr: String },
    /// `incongruity` or `incongruity:<features-dir>`
    Incongruity { features_dir: Option<PathBuf> },
}

impl ScorerSpec {
    pub fn parse(spec: &str) -> Result<ScorerSpec> {
        if spec == "synthetic" {
            return Ok(ScorerSpec::Synthetic {
                saturation: SyntheticOracle::DEFAULT_SATURATION,
            });
        }
        if let Some(rest) = spec.strip_prefix("synthetic:") {
            let saturation: usize = rest
                .parse()
                .map_err(|_| Error::Config(format!("bad synthetic saturation {rest:?}")))?;
            if saturation == 0 {
                return Err(Error::Config("synthetic saturation must be >= 1".into()));
            }
            return Ok(ScorerSpec::Synthetic { saturation });
        }
        if let Some(cmd) = spec.strip_prefix("cmd:") {
            if cmd.trim().is_empty() {
                return Err(Error::Config("empty scorer command".into()));
            }
            return Ok(ScorerSpec::Command {
                command: cmd.to_string(),
            });
        }
        if let Some(addr) = spec.strip_prefix("tcp:") {
            return Ok(ScorerSpec::Tcp {
                addr: addr.to_string(),
            });
        }
        if spec == "incongruity" {
            return Ok(ScorerSpec::Incongruity { features_dir: None });
        }
        if let Some(dir) = spec.strip_prefix("incongruity:") {
            return Ok(ScorerSpec::Incongruity {
                features_dir: Some(PathBuf::from(dir)),
            });
        }
        Err(Error::Config(format!(
            "unknown scorer spec {spec:?}; expected synthetic[:N], cmd:<command>, tcp:<addr>, or incongruity[:<dir>]"
        )))
    }

    pub fn build(&self) -> Result<Box<dyn Scorer>> {
        Ok(match self {
            ScorerSpec::Synthetic { saturation } => {
                Box::new(SyntheticOracle::with_saturation(*saturation))
            }
            ScorerSpec::Command { command } => Box::new(ExternalScorer::spawn(command)?),
            ScorerSpec::Tcp { addr } => Box::new(ExternalScorer::connect(addr)?),
            ScorerSpec::Incongruity { features_dir } => {
                Box::new(IncongruityScorer::new(features_dir.clone()))
            }
        })
    }
}

/// Marker words that read as sarcastic intensifiers in the toy task.
pub const INCONGRUITY_MARKERS: [&str; 10] = [
    "oh", "wow", "totally", "great", "lovely", "brilliant", "perfect", "classic", "genius",
    "fantastic",
];

/// Marker words that read as plain literal complaint.
pub const LITERAL_MARKERS: [&str; 6] = ["bad", "late", "broken", "boring", "slow", "annoying"];

/// Piecewise-linear oracle: score = clamp((#incongruity - #literal) / sat).
/// Monotone non-decreasing in the incongruity-marker count, which gives
/// training a learnable reward direction without any external detector.
#[derive(Debug, Clone)]
pub struct SyntheticOracle {
    saturation: usize,
}

impl SyntheticOracle {
    pub const DEFAULT_SATURATION: usize = 3;

    pub fn new() -> Self {
        Self::with_saturation(Self::DEFAULT_SATURATION)
    }

    pub fn with_saturation(saturation: usize) -> Self {
        SyntheticOracle {
            saturation: saturation.max(1),
        }
    }

    /// A text the oracle scores at exactly 1.0.
    pub fn maximal_example(&self) -> String {
        INCONGRUITY_MARKERS[..self.saturation.min(INCONGRUITY_MARKERS.len())].join(" ")
    }

    pub fn marker_counts(text: &str) -> (usize, usize) {
        let mut inc = 0;
        let mut lit = 0;
        for raw in text.split_whitespace() {
            let tok = raw
                .trim_matches(|c: char| c.is_ascii_punctuation())
                .to_lowercase();
            if INCONGRUITY_MARKERS.contains(&tok.as_str()) {
                inc += 1;
            } else if LITERAL_MARKERS.contains(&tok.as_str()) {
                lit += 1;
            }
        }
        (inc, lit)
    }

    pub fn score_text(&self, text: &str) -> f64 {
        let (inc, lit) = Self::marker_counts(text);
        let net = inc as f64 - lit as f64;
        (net / self.saturation as f64).clamp(0.0, 1.0)
    }
}

impl Default for SyntheticOracle {
    fn default() -> Self {
        Self::new()
    }
}

impl Scorer for SyntheticOracle {
    fn id(&self) -> &str {
        "synthetic-oracle"
    }

    fn score(&mut self, req: &ScoreRequest) -> Result<f64> {
        if req.text.is_empty() {
            return Err(Error::Scorer("cannot score empty text".into()));
        }
        Ok(self.score_text(req.text))
    }
}

/// Score one generated candidate, mapping degenerate empty text (a
/// specials-only decode) to reward 0 instead of a scorer error.
pub fn score_candidate_text(
    scorer: &mut dyn Scorer,
    id: &str,
    text: &str,
    image_ref: Option<&str>,
) -> Result<RewardScore> {
    if text.trim().is_empty() {
        return RewardScore::new(0.0, "degenerate-empty");
    }
    scorer.score_reward(&ScoreRequest {
        id,
        text,
        image_ref,
    })
}

/// Cosine similarity clamped to [0, 1], then inverted: higher means a
/// stronger image-text semantic clash.
pub fn factual_incongruity(image_embedding: &[f64], text_embedding: &[f64]) -> Result<f64> {
    if image_embedding.iter().chain(text_embedding).any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite embedding".into()));
    }
    let s_inter = cosine(image_embedding, text_embedding)?.clamp(0.0, 1.0);
    Ok(1.0 - s_inter)
}

/// Deterministic text embedding: character trigrams hashed into `dim`
/// buckets, L2-normalized. A stand-in for a cross-modal text encoder.
pub fn hashed_text_embedding(text: &str, dim: usize) -> Vec<f64> {
    let chars: Vec<char> = text.chars().collect();
    let mut v = vec![0.0; dim];
    if chars.len() >= 3 {
        for w in chars.windows(3) {
            let key: String = w.iter().collect();
            v[(fnv1a(&key) % dim as u64) as usize] += 1.0;
        }
    } else if !chars.is_empty() {
        let key: String = chars.iter().collect();
        v[(fnv1a(&key) % dim as u64) as usize] += 1.0;
    }
    let n = crate::nn::tensor::norm(&v);
    if n > 0.0 {
        for x in &mut v {
            *x /= n;
        }
    }
    v
}

/// Scores texts by factual incongruity against their image features.
pub struct IncongruityScorer {
    features_dir: Option<PathBuf>,
    patches: usize,
    dim: usize,
}

impl IncongruityScorer {
    pub fn new(features_dir: Option<PathBuf>) -> Self {
        IncongruityScorer {
            features_dir,
            patches: 16,
            dim: 64,
        }
    }
}

impl Scorer for IncongruityScorer {
    fn id(&self) -> &str {
        "incongruity"
    }

    fn score(&mut self, req: &ScoreRequest) -> Result<f64> {
        if req.text.is_empty() {
            return Err(Error::Scorer("cannot score empty text".into()));
        }
        let image_ref = req
            .image_ref
            .ok_or_else(|| Error::Scorer(format!("record {}: incongruity needs image_ref", req.id)))?;
        let features = resolve_features(
            image_ref,
            self.features_dir.as_deref(),
            self.patches,
            self.dim,
        )?;
        let image = features.pooled();
        let text = hashed_text_embedding(req.text, self.dim);
        factual_incongruity(&image, &text).map_err(|e| Error::Scorer(e.to_string()))
    }
}

#[derive(Serialize)]
struct WireRequest<'a> {
    id: &'a str,
    text: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    image_ref: Option<&'a str>,
}

#[derive(Deserialize)]
struct WireResponse {
    id: String,
    value: f64,
}

enum Transport {
    Child {
        child: Child,
        stdin: std::process::ChildStdin,
        lines: mpsc::Receiver<std::io::Result<String>>,
    },
    Tcp {
        write: std::net::TcpStream,
        lines: std::io::Lines<BufReader<std::net::TcpStream>>,
    },
}

/// One JSON request/response per line against an external scorer process
/// or socket; 30 s default timeout surfaces as a scorer error.
pub struct ExternalScorer {
    id: String,
    transport: Transport,
    pub timeout: Duration,
}

impl ExternalScorer {
    pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);

    /// Spawn `command` through `sh -c` and talk NDJSON on its stdio.
    pub fn spawn(command: &str) -> Result<Self> {
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(command)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| Error::Scorer(format!("cannot spawn scorer {command:?}: {e}")))?;
        let stdin = child
            .stdin
            .take()
            .ok_or_else(|| Error::Scorer("scorer child has no stdin".into()))?;
        let stdout = child
            .stdout
            .take()
            .ok_or_else(|| Error::Scorer("scorer child has no stdout".into()))?;
        let (tx, rx) = mpsc::channel();
        std::thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                if tx.send(line).is_err() {
                    break;
                }
            }
        });
        Ok(ExternalScorer {
            id: format!("cmd:{command}"),
            transport: Transport::Child {
                child,
                stdin,
                lines: rx,
            },
            timeout: Self::DEFAULT_TIMEOUT,
        })
    }

    pub fn connect(addr: &str) -> Result<Self> {
        let stream = std::net::TcpStream::connect(addr)
            .map_err(|e| Error::Scorer(format!("cannot connect to scorer {addr}: {e}")))?;
        stream
            .set_read_timeout(Some(Self::DEFAULT_TIMEOUT))
            .map_err(|e| Error::Scorer(e.to_string()))?;
        let read = stream
            .try_clone()
            .map_err(|e| Error::Scorer(e.to_string()))?;
        Ok(ExternalScorer {
            id: format!("tcp:{addr}"),
            transport: Transport::Tcp {
                write: stream,
                lines: BufReader::new(read).lines(),
            },
            timeout: Self::DEFAULT_TIMEOUT,
        })
    }

    fn roundtrip(&mut self, req: &ScoreRequest) -> Result<f64> {
        let wire = serde_json::to_string(&WireRequest {
            id: req.id,
            text: req.text,
            image_ref: req.image_ref,
        })?;
        let line = match &mut self.transport {
            Transport::Child { stdin, lines, .. } => {
                writeln!(stdin, "{wire}")
                    .map_err(|e| Error::Scorer(format!("scorer write failed: {e}")))?;
                stdin
                    .flush()
                    .map_err(|e| Error::Scorer(format!("scorer flush failed: {e}")))?;
                match lines.recv_timeout(self.timeout) {
                    Ok(Ok(line)) => line,
                    Ok(Err(e)) => return Err(Error::Scorer(format!("scorer read failed: {e}"))),
                    Err(_) => {
                        return Err(Error::Scorer(format!(
                            "scorer timed out after {:?}",
                            self.timeout
                        )))
                    }
                }
            }
            Transport::Tcp { write, lines } => {
                writeln!(write, "{wire}")
                    .map_err(|e| Error::Scorer(format!("scorer write failed: {e}")))?;
                match lines.next() {
                    Some(Ok(line)) => line,
                    Some(Err(e)) => return Err(Error::Scorer(format!("scorer read failed: {e}"))),
                    None => return Err(Error::Scorer("scorer closed the connection".into())),
                }
            }
        };
        let resp: WireResponse = serde_json::from_str(&line)
            .map_err(|e| Error::Scorer(format!("bad scorer response {line:?}: {e}")))?;
        if resp.id != req.id {
            return Err(Error::Scorer(format!(
                "scorer answered id {:?} for request {:?}",
                resp.id, req.id
            )));
        }
        if !resp.value.is_finite() || !(0.0..=1.0).contains(&resp.value) {
            return Err(Error::Scorer(format!(
                "scorer value {} outside [0,1]",
                resp.value
            )));
        }
        Ok(resp.value)
    }
}

impl Scorer for ExternalScorer {
    fn id(&self) -> &str {
        &self.id
    }

    fn score(&mut self, req: &ScoreRequest) -> Result<f64> {
        if req.text.is_empty() {
            return Err(Error::Scorer("cannot score empty text".into()));
        }
        self.roundtrip(req)
    }
}

impl Drop for ExternalScorer {
    fn drop(&mut self) {
        if let Transport::Child { child, .. } = &mut self.transport {
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn req<'a>(text: &'a str) -> ScoreRequest<'a> {
        ScoreRequest {
            id: "r1",
            text,
            image_ref: None,
        }
    }

    #[test]
    fn oracle_extremes() {
        let mut oracle = SyntheticOracle::new();
        let maximal = oracle.maximal_example();
        assert_eq!(oracle.score(&req(&maximal)).unwrap(), 1.0);
        assert_eq!(oracle.score(&req("the train was on time")).unwrap(), 0.0);
    }

    #[test]
    fn oracle_piecewise_linear() {
        let oracle = SyntheticOracle::new();
        assert!((oracle.score_text("oh no") - 1.0 / 3.0).abs() < 1e-12);
        assert!((oracle.score_text("oh wow trains") - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(oracle.score_text("oh wow totally great trains"), 1.0);
        assert_eq!(oracle.score_text("bad bad day"), 0.0);
        // literal markers subtract
        assert!((oracle.score_text("oh wow bad") - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn oracle_ignores_punctuation_and_case() {
        let oracle = SyntheticOracle::new();
        assert_eq!(oracle.score_text("Oh, WOW! totally."), 1.0);
    }

    #[test]
    fn oracle_monotone_in_markers() {
        let oracle = SyntheticOracle::new();
        let mut prev = 0.0;
        let mut text = String::from("trains");
        for marker in INCONGRUITY_MARKERS {
            text.push(' ');
            text.push_str(marker);
            let s = oracle.score_text(&text);
            assert!(s >= prev);
            prev = s;
        }
    }

    #[test]
    fn batch_matches_single() {
        let mut oracle = SyntheticOracle::new();
        let reqs = [req("oh dear"), req("wow great stuff")];
        let batch = oracle.score_batch(&reqs).unwrap();
        assert_eq!(batch[0], oracle.score(&reqs[0]).unwrap());
        assert_eq!(batch[1], oracle.score(&reqs[1]).unwrap());
    }

    #[test]
    fn incongruity_extremes() {
        let u = [1.0, 2.0, 3.0];
        assert_eq!(factual_incongruity(&u, &u).unwrap(), 0.0);
        assert_eq!(factual_incongruity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 1.0);
        // antiparallel clamps to cosine 0, so incongruity 1
        assert_eq!(factual_incongruity(&[1.0, 0.0], &[-1.0, 0.0]).unwrap(), 1.0);
        assert!(factual_incongruity(&[0.0, 0.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn incongruity_scale_invariant() {
        let u = [0.3, -0.2, 0.9];
        let v = [1.0, 0.4, -0.1];
        let base = factual_incongruity(&u, &v).unwrap();
        let u2: Vec<f64> = u.iter().map(|x| x * 7.5).collect();
        let v2: Vec<f64> = v.iter().map(|x| x * 0.01).collect();
        assert!((factual_incongruity(&u2, &v2).unwrap() - base).abs() < 1e-12);
    }

    #[test]
    fn spec_parsing() {
        assert_eq!(
            ScorerSpec::parse("synthetic").unwrap(),
            ScorerSpec::Synthetic { saturation: 3 }
        );
        assert_eq!(
            ScorerSpec::parse("synthetic:5").unwrap(),
            ScorerSpec::Synthetic { saturation: 5 }
        );
        assert!(matches!(
            ScorerSpec::parse("cmd:cat").unwrap(),
            ScorerSpec::Command { .. }
        ));
        assert!(matches!(
            ScorerSpec::parse("tcp:127.0.0.1:9000").unwrap(),
            ScorerSpec::Tcp { .. }
        ));
        assert!(ScorerSpec::parse("nope").is_err());
        assert!(ScorerSpec::parse("synthetic:0").is_err());
    }

    #[test]
    fn external_scorer_over_stdio() {
        // A tiny sh scorer that echoes back a fixed value for each id.
        let script = r#"while IFS= read -r line; do
            id=$(printf '%s' "$line" | sed -n 's/.*"id":"\([^"]*\)".*/\1/p')
            printf '{"id":"%s","value":0.75}\n' "$id"
        done"#;
        let mut scorer = ExternalScorer::spawn(script).unwrap();
        let value = scorer.score(&req("anything")).unwrap();
        assert_eq!(value, 0.75);
        let batch = scorer
            .score_batch(&[req("a"), req("b"), req("c")])
            .unwrap();
        assert_eq!(batch, vec![0.75, 0.75, 0.75]);
    }

    #[test]
    fn external_scorer_rejects_bad_value() {
        let script = r#"while IFS= read -r line; do
            id=$(printf '%s' "$line" | sed -n 's/.*"id":"\([^"]*\)".*/\1/p')
            printf '{"id":"%s","value":1.75}\n' "$id"
        done"#;
        let mut scorer = ExternalScorer::spawn(script).unwrap();
        assert!(scorer.score(&req("x")).is_err());
    }

    #[test]
    fn external_scorer_times_out() {
        let mut scorer = ExternalScorer::spawn("sleep 600").unwrap();
        scorer.timeout = Duration::from_millis(200);
        let err = scorer.score(&req("x")).unwrap_err();
        assert!(matches!(err, Error::Scorer(_)));
    }

    #[test]
    fn hashed_embedding_unit_norm() {
        let v = hashed_text_embedding("some sarcastic text", 32);
        let n = crate::nn::tensor::norm(&v);
        assert!((n - 1.0).abs() < 1e-12);
        assert_eq!(hashed_text_embedding("some sarcastic text", 32), v);
    }
}
