//! Corpus construction: ingest raw annotated records, apply the exclusion
//! rules (length, cleaning, sarcasm-score threshold), extract BIO-tagged
//! sarcasm targets, split deterministically, and report per-split statistics.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::rng::SeededRng;
use crate::reward::{ScoreRequest, Scorer};

/// BIO tag over one text token. `B` opens a sarcasm-target span, `I`
/// continues it, `O` is outside any span.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BioTag {
    #[serde(rename = "O")]
    Outside,
    #[serde(rename = "B-S")]
    Begin,
    #[serde(rename = "I-S")]
    Inside,
}

/// One raw annotated record as ingested from JSON lines.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RawRecord {
    pub id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bio_tokens: Option<Vec<(String, BioTag)>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<String>,
    pub image_ref: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ocr_text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub caption: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub objects: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sarcasm_score: Option<f64>,
}

/// One retained corpus sample. Invariants: text cleaned and at most 40
/// words, target non-empty, sarcasm_score in [0.5, 1].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub text: String,
    pub target: String,
    pub image_ref: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ocr_text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub caption: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub objects: Option<Vec<String>>,
    pub sarcasm_score: f64,
}

pub const MAX_TEXT_WORDS: usize = 40;
pub const MIN_SARCASM_SCORE: f64 = 0.5;

const QUOTE_CHARS: [char; 6] = ['"', '\'', '\u{201C}', '\u{201D}', '\u{2018}', '\u{2019}'];
const SPACE_SENSITIVE_PUNCT: [char; 6] = ['.', ',', '!', '?', ';', ':'];

/// Strip leading/trailing quotation-mark runs and delete every whitespace
/// run that immediately precedes `. , ! ? ; :`. Interior quotes survive.
/// Idempotent.
pub fn clean_text(raw: &str) -> String {
    let stripped = raw.trim_matches(|c| QUOTE_CHARS.contains(&c));
    let mut out = String::with_capacity(stripped.len());
    let mut pending_ws = String::new();
    for ch in stripped.chars() {
        if ch.is_whitespace() {
            pending_ws.push(ch);
            continue;
        }
        if !SPACE_SENSITIVE_PUNCT.contains(&ch) {
            out.push_str(&pending_ws);
        }
        pending_ws.clear();
        out.push(ch);
    }
    out.push_str(&pending_ws);
    out
}

/// Whitespace-delimited word count.
pub fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}

/// Keep iff the cleaned text has between 1 and 40 words. Empty or
/// whitespace-only text is discarded as degenerate.
pub fn length_filter(text: &str) -> bool {
    let words = word_count(text);
    words >= 1 && words <= MAX_TEXT_WORDS
}

/// Keep iff score >= 0.5 ("lower than 0.5" is strict). Scores outside
/// [0, 1] reject the record with a range error.
pub fn score_filter(score: f64) -> Result<bool> {
    if !(0.0..=1.0).contains(&score) || score.is_nan() {
        return Err(Error::Data(format!("sarcasm score {score} outside [0,1]")));
    }
    Ok(score >= MIN_SARCASM_SCORE)
}

/// Extract sarcasm-target spans from BIO tags. A span starts at `B-S` and
/// extends over consecutive `I-S` tokens; only spans that contain both a
/// `B-S` and at least one `I-S` qualify. An `I-S` without a preceding
/// `B-S`/`I-S` is a malformed tagging error. An empty result means the
/// record is rejected rather than errored.
pub fn extract_bio_targets(bio_tokens: &[(String, BioTag)]) -> Result<Vec<String>> {
    let mut targets = Vec::new();
    let mut current: Option<(Vec<&str>, bool)> = None; // (tokens, saw_inside)
    for (i, (token, tag)) in bio_tokens.iter().enumerate() {
        match tag {
            BioTag::Begin => {
                if let Some((toks, true)) = current.take() {
                    targets.push(toks.join(" "));
                }
                current = Some((vec![token.as_str()], false));
            }
            BioTag::Inside => match current.as_mut() {
                Some((toks, saw_inside)) => {
                    toks.push(token.as_str());
                    *saw_inside = true;
                }
                None => {
                    return Err(Error::Data(format!(
                        "malformed BIO tagging: I-S at position {i} without a preceding B-S"
                    )));
                }
            },
            BioTag::Outside => {
                if let Some((toks, true)) = current.take() {
                    targets.push(toks.join(" "));
                }
            }
        }
    }
    if let Some((toks, true)) = current {
        targets.push(toks.join(" "));
    }
    Ok(targets)
}

/// Split ratios plus the seed that fixes the shuffle.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitSpec {
    pub ratios: (f64, f64, f64),
    pub seed: u64,
}

impl SplitSpec {
    pub fn new(ratios: (f64, f64, f64), seed: u64) -> Result<Self> {
        let (a, b, c) = ratios;
        if a <= 0.0 || b <= 0.0 || c <= 0.0 {
            return Err(Error::Config("split ratios must be positive".into()));
        }
        Ok(SplitSpec { ratios, seed })
    }
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            ratios: (8.0, 1.0, 1.0),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

/// Shuffle deterministically, then carve out val and test as
/// floor(ratio * N) each with the remainder going to train. For 4,970
/// samples at 8:1:1 this yields (3976, 497, 497).
pub fn split_dataset(mut samples: Vec<Sample>, spec: &SplitSpec) -> Result<Splits> {
    if samples.len() < 3 {
        return Err(Error::Data(format!(
            "cannot split {} samples into three parts",
            samples.len()
        )));
    }
    let (rt, rv, rte) = spec.ratios;
    let total = rt + rv + rte;
    let n = samples.len();
    let n_val = (n as f64 * (rv / total)).floor() as usize;
    let n_test = (n as f64 * (rte / total)).floor() as usize;
    let n_train = n - n_val - n_test;

    let mut rng = SeededRng::new(spec.seed);
    rng.shuffle(&mut samples);

    let test = samples.split_off(n_train + n_val);
    let val = samples.split_off(n_train);
    Ok(Splits {
        train: samples,
        val,
        test,
    })
}

/// Per-split corpus statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitStats {
    pub count: usize,
    pub avg_text_len: f64,
    pub text_vocab: usize,
    pub avg_target_len: f64,
    pub target_vocab: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub schema_version: u32,
    pub train: SplitStats,
    pub val: SplitStats,
    pub test: SplitStats,
}

fn split_stats(samples: &[Sample]) -> SplitStats {
    let mut text_vocab: BTreeSet<String> = BTreeSet::new();
    let mut target_vocab: BTreeSet<String> = BTreeSet::new();
    let mut text_words = 0usize;
    let mut target_words = 0usize;
    for s in samples {
        for w in s.text.split_whitespace() {
            text_words += 1;
            text_vocab.insert(w.to_lowercase());
        }
        for w in s.target.split_whitespace() {
            target_words += 1;
            target_vocab.insert(w.to_lowercase());
        }
    }
    let n = samples.len();
    SplitStats {
        count: n,
        avg_text_len: if n == 0 { 0.0 } else { text_words as f64 / n as f64 },
        text_vocab: text_vocab.len(),
        avg_target_len: if n == 0 { 0.0 } else { target_words as f64 / n as f64 },
        target_vocab: target_vocab.len(),
    }
}

/// Word counts average over whitespace tokens; vocabularies count unique
/// lowercased whitespace tokens per split per field.
pub fn compute_stats(splits: &Splits) -> CorpusStats {
    CorpusStats {
        schema_version: 1,
        train: split_stats(&splits.train),
        val: split_stats(&splits.val),
        test: split_stats(&splits.test),
    }
}

/// Why a record was dropped; tallied in the pipeline report.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum DropReason {
    EmptyText,
    TooLong,
    LowScore,
    NoQualifyingTarget,
}

impl DropReason {
    fn key(&self) -> &'static str {
        match self {
            DropReason::EmptyText => "empty_text",
            DropReason::TooLong => "too_long",
            DropReason::LowScore => "low_score",
            DropReason::NoQualifyingTarget => "no_qualifying_target",
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct PipelineReport {
    pub ingested: usize,
    pub retained: usize,
    pub dropped: BTreeMap<String, usize>,
    pub externally_scored: usize,
}

/// Apply exclusion rules and target extraction to raw records. Records
/// missing a sarcasm score are routed through `scorer` when one is given;
/// otherwise a missing score is a data error.
pub fn build_samples(
    records: Vec<RawRecord>,
    scorer: Option<&mut dyn Scorer>,
) -> Result<(Vec<Sample>, PipelineReport)> {
    let mut seen = BTreeSet::new();
    for r in &records {
        if !seen.insert(r.id.clone()) {
            return Err(Error::Data(format!("duplicate record id {}", r.id)));
        }
    }

    let mut report = PipelineReport {
        ingested: records.len(),
        ..Default::default()
    };
    let drop = |report: &mut PipelineReport, reason: DropReason| {
        *report.dropped.entry(reason.key().to_string()).or_insert(0) += 1;
    };

    // Score missing records up front so the scorer sees one batch.
    let mut scores: BTreeMap<String, f64> = BTreeMap::new();
    let missing: Vec<&RawRecord> = records.iter().filter(|r| r.sarcasm_score.is_none()).collect();
    if !missing.is_empty() {
        let scorer = scorer.ok_or_else(|| {
            Error::Data(format!(
                "{} records lack sarcasm_score and no scorer endpoint is configured",
                missing.len()
            ))
        })?;
        let requests: Vec<ScoreRequest> = missing
            .iter()
            .map(|r| ScoreRequest {
                id: &r.id,
                text: &r.text,
                image_ref: Some(&r.image_ref),
            })
            .collect();
        let values = scorer.score_batch(&requests)?;
        for (r, v) in missing.iter().zip(values) {
            scores.insert(r.id.clone(), v);
        }
        report.externally_scored = scores.len();
    }

    let mut samples = Vec::new();
    for r in records {
        // Validate BIO tags whenever present, even if an explicit target
        // ends up being used.
        let bio_targets = match &r.bio_tokens {
            Some(tokens) => Some(extract_bio_targets(tokens)?),
            None => None,
        };

        let text = clean_text(&r.text);
        if word_count(&text) == 0 {
            drop(&mut report, DropReason::EmptyText);
            continue;
        }
        if !length_filter(&text) {
            drop(&mut report, DropReason::TooLong);
            continue;
        }

        let target = match r.target.as_deref().map(clean_text) {
            Some(t) if !t.trim().is_empty() => Some(t),
            _ => bio_targets
                .as_ref()
                .and_then(|ts| ts.first().cloned())
                .map(|t| clean_text(&t)),
        };
        let Some(target) = target.filter(|t| !t.trim().is_empty()) else {
            drop(&mut report, DropReason::NoQualifyingTarget);
            continue;
        };

        let score = match r.sarcasm_score {
            Some(s) => s,
            None => *scores
                .get(&r.id)
                .ok_or_else(|| Error::Data(format!("no score for record {}", r.id)))?,
        };
        if !score_filter(score)? {
            drop(&mut report, DropReason::LowScore);
            continue;
        }

        samples.push(Sample {
            id: r.id,
            text,
            target,
            image_ref: r.image_ref,
            ocr_text: r.ocr_text,
            caption: r.caption,
            objects: r.objects,
            sarcasm_score: score,
        });
    }
    report.retained = samples.len();
    Ok((samples, report))
}

pub fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::Data(format!("cannot open {}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| {
            Error::Data(format!("{} line {}: {e}", path.display(), lineno + 1))
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut file = std::fs::File::create(path)?;
    for item in items {
        serde_json::to_writer(&mut file, item)?;
        file.write_all(b"\n")?;
    }
    Ok(())
}
