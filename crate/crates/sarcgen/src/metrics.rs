//! Text-generation metric battery (BLEU-1..4, ROUGE-1/2/L, METEOR, CIDEr,
//! embedding similarity) plus score-distribution statistics.
//!
//! Tokenization for every metric: ASCII punctuation split into its own
//! tokens, lowercased, whitespace-delimited. BLEU and CIDEr are
//! corpus-level; ROUGE and METEOR average per pair.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::resolve_features;
use crate::reward::{factual_incongruity, hashed_text_embedding, ScoreRequest, Scorer};

pub fn metric_tokenize(text: &str) -> Vec<String> {
    let mut spaced = String::with_capacity(text.len() * 2);
    for ch in text.chars() {
        if ch.is_ascii_punctuation() {
            spaced.push(' ');
            spaced.push(ch);
            spaced.push(' ');
        } else {
            spaced.push(ch);
        }
    }
    spaced
        .to_lowercase()
        .split_whitespace()
        .map(|s| s.to_string())
        .collect()
}

fn ngram_counts(tokens: &[String], n: usize) -> BTreeMap<&[String], usize> {
    let mut counts: BTreeMap<&[String], usize> = BTreeMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

fn check_corpora(hyps: &[String], refs: &[String]) -> Result<()> {
    if hyps.is_empty() {
        return Err(Error::Data("empty corpus".into()));
    }
    if hyps.len() != refs.len() {
        return Err(Error::Data(format!(
            "misaligned corpora: {} hypotheses vs {} references",
            hyps.len(),
            refs.len()
        )));
    }
    Ok(())
}

/// Corpus-level BLEU-n: geometric mean of modified n-gram precisions up to
/// order n with a brevity penalty. A zero numerator at order >= 2 is
/// smoothed by adding 1 to numerator and denominator of that order.
pub fn bleu(hyps: &[String], refs: &[String], n: usize) -> Result<f64> {
    check_corpora(hyps, refs)?;
    if !(1..=4).contains(&n) {
        return Err(Error::Config(format!("BLEU order {n} not in 1..4")));
    }
    let hyp_tokens: Vec<Vec<String>> = hyps.iter().map(|h| metric_tokenize(h)).collect();
    let ref_tokens: Vec<Vec<String>> = refs.iter().map(|r| metric_tokenize(r)).collect();

    let hyp_len: usize = hyp_tokens.iter().map(|t| t.len()).sum();
    let ref_len: usize = ref_tokens.iter().map(|t| t.len()).sum();
    if hyp_len == 0 {
        return Ok(0.0);
    }

    let mut log_p_sum = 0.0;
    for order in 1..=n {
        let mut matched = 0usize;
        let mut total = 0usize;
        for (h, r) in hyp_tokens.iter().zip(&ref_tokens) {
            let hc = ngram_counts(h, order);
            let rc = ngram_counts(r, order);
            for (gram, &count) in &hc {
                total += count;
                matched += count.min(rc.get(gram).copied().unwrap_or(0));
            }
        }
        if total == 0 {
            // hypotheses too short to carry this order anywhere
            return Ok(0.0);
        }
        let p = if matched == 0 {
            if order == 1 {
                return Ok(0.0);
            }
            (matched + 1) as f64 / (total + 1) as f64
        } else {
            matched as f64 / total as f64
        };
        log_p_sum += p.ln();
    }
    let bp = if hyp_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    Ok(bp * (log_p_sum / n as f64).exp())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RougeVariant {
    Rouge1,
    Rouge2,
    RougeL,
}

fn f1(matched: f64, hyp_total: f64, ref_total: f64) -> f64 {
    if hyp_total == 0.0 && ref_total == 0.0 {
        return 1.0;
    }
    if hyp_total == 0.0 || ref_total == 0.0 || matched == 0.0 {
        return 0.0;
    }
    let p = matched / hyp_total;
    let r = matched / ref_total;
    2.0 * p * r / (p + r)
}

fn lcs_length(a: &[String], b: &[String]) -> usize {
    let mut dp = vec![0usize; b.len() + 1];
    for item in a {
        let mut prev = 0;
        for (j, other) in b.iter().enumerate() {
            let tmp = dp[j + 1];
            dp[j + 1] = if item == other {
                prev + 1
            } else {
                dp[j + 1].max(dp[j])
            };
            prev = tmp;
        }
    }
    dp[b.len()]
}

/// Pair-averaged ROUGE F1: n-gram overlap for variants 1 and 2, longest
/// common subsequence for L.
pub fn rouge(hyps: &[String], refs: &[String], variant: RougeVariant) -> Result<f64> {
    check_corpora(hyps, refs)?;
    let mut total = 0.0;
    for (h, r) in hyps.iter().zip(refs) {
        let ht = metric_tokenize(h);
        let rt = metric_tokenize(r);
        let score = match variant {
            RougeVariant::Rouge1 | RougeVariant::Rouge2 => {
                let n = if variant == RougeVariant::Rouge1 { 1 } else { 2 };
                let hc = ngram_counts(&ht, n);
                let rc = ngram_counts(&rt, n);
                let matched: usize = hc
                    .iter()
                    .map(|(gram, &c)| c.min(rc.get(gram).copied().unwrap_or(0)))
                    .sum();
                let hyp_total: usize = hc.values().sum();
                let ref_total: usize = rc.values().sum();
                f1(matched as f64, hyp_total as f64, ref_total as f64)
            }
            RougeVariant::RougeL => {
                let lcs = lcs_length(&ht, &rt);
                f1(lcs as f64, ht.len() as f64, rt.len() as f64)
            }
        };
        total += score;
    }
    Ok(total / hyps.len() as f64)
}

/// Chunk count of the leftmost-unused exact alignment: a chunk extends
/// while both hypothesis and reference positions advance by one.
fn alignment_chunks(hyp: &[String], reference: &[String]) -> (usize, usize) {
    let mut used = vec![false; reference.len()];
    let mut pairs: Vec<(usize, usize)> = Vec::new();
    for (i, tok) in hyp.iter().enumerate() {
        for (j, rtok) in reference.iter().enumerate() {
            if !used[j] && tok == rtok {
                used[j] = true;
                pairs.push((i, j));
                break;
            }
        }
    }
    let matches = pairs.len();
    let mut chunks = 0;
    let mut prev: Option<(usize, usize)> = None;
    for &(i, j) in &pairs {
        match prev {
            Some((pi, pj)) if i == pi + 1 && j == pj + 1 => {}
            _ => chunks += 1,
        }
        prev = Some((i, j));
    }
    (matches, chunks)
}

/// Simplified METEOR: exact-match unigram alignment, harmonic mean with
/// recall weighted 9:1, fragmentation penalty 0.5 * (chunks/matches)^3.
/// An exact token match scores 1.0 (no stemming or synonym tables).
pub fn meteor(hyps: &[String], refs: &[String]) -> Result<f64> {
    check_corpora(hyps, refs)?;
    let mut total = 0.0;
    for (h, r) in hyps.iter().zip(refs) {
        let ht = metric_tokenize(h);
        let rt = metric_tokenize(r);
        total += meteor_pair(&ht, &rt);
    }
    Ok(total / hyps.len() as f64)
}

fn meteor_pair(hyp: &[String], reference: &[String]) -> f64 {
    if hyp == reference {
        return 1.0;
    }
    if hyp.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let (matches, chunks) = alignment_chunks(hyp, reference);
    if matches == 0 {
        return 0.0;
    }
    let m = matches as f64;
    let p = m / hyp.len() as f64;
    let r = m / reference.len() as f64;
    let f_mean = 10.0 * p * r / (r + 9.0 * p);
    let penalty = 0.5 * (chunks as f64 / m).powi(3);
    f_mean * (1.0 - penalty)
}

const CIDER_SIGMA: f64 = 6.0;

/// Corpus CIDEr: mean over n = 1..4 of the cosine between tf-idf n-gram
/// vectors of each pair, idf from the reference corpus, Gaussian
/// length-difference damping with sigma = 6. Orders where both sides have
/// no n-grams count as full agreement; a single-item corpus is rejected
/// because idf degenerates.
pub fn cider(hyps: &[String], refs: &[String]) -> Result<f64> {
    check_corpora(hyps, refs)?;
    if hyps.len() < 2 {
        return Err(Error::Data(
            "CIDEr needs at least two items (idf is degenerate on one)".into(),
        ));
    }
    let hyp_tokens: Vec<Vec<String>> = hyps.iter().map(|h| metric_tokenize(h)).collect();
    let ref_tokens: Vec<Vec<String>> = refs.iter().map(|r| metric_tokenize(r)).collect();
    let m = refs.len() as f64;

    // document frequencies over the reference corpus, per n-gram order
    let mut dfs: Vec<BTreeMap<&[String], usize>> = Vec::with_capacity(4);
    for n in 1..=4 {
        let mut df: BTreeMap<&[String], usize> = BTreeMap::new();
        for rt in &ref_tokens {
            for gram in ngram_counts(rt, n).into_keys() {
                *df.entry(gram).or_insert(0) += 1;
            }
        }
        dfs.push(df);
    }

    let mut total = 0.0;
    for (h, r) in hyp_tokens.iter().zip(&ref_tokens) {
        let mut order_sum = 0.0;
        for n in 1..=4 {
            let df = &dfs[n - 1];
            let idf = |gram: &[String]| -> f64 {
                let d = df.get(gram).copied().unwrap_or(0).max(1);
                (m / d as f64).ln()
            };
            let hv: BTreeMap<&[String], f64> = ngram_counts(h, n)
                .into_iter()
                .map(|(g, c)| (g, c as f64 * idf(g)))
                .collect();
            let rv: BTreeMap<&[String], f64> = ngram_counts(r, n)
                .into_iter()
                .map(|(g, c)| (g, c as f64 * idf(g)))
                .collect();
            order_sum += tfidf_cosine(&hv, &rv, h == r);
        }
        let damping =
            (-((h.len() as f64 - r.len() as f64).powi(2)) / (2.0 * CIDER_SIGMA * CIDER_SIGMA))
                .exp();
        total += damping * order_sum / 4.0;
    }
    Ok(total / hyps.len() as f64)
}

fn tfidf_cosine(a: &BTreeMap<&[String], f64>, b: &BTreeMap<&[String], f64>, equal: bool) -> f64 {
    if a.is_empty() && b.is_empty() {
        // orders beyond both sentence lengths agree vacuously only for
        // identical token sequences
        return if equal { 1.0 } else { 0.0 };
    }
    if a.is_empty() || b.is_empty() {
        return 0.0;
    }
    let na: f64 = a.values().map(|v| v * v).sum::<f64>().sqrt();
    let nb: f64 = b.values().map(|v| v * v).sum::<f64>().sqrt();
    if na > 0.0 && nb > 0.0 {
        let dot: f64 = a
            .iter()
            .filter_map(|(g, va)| b.get(g).map(|vb| va * vb))
            .sum();
        return dot / (na * nb);
    }
    // every n-gram had idf zero (present in all references): fall back to
    // comparing raw n-gram multisets
    let ka: Vec<_> = a.keys().collect();
    let kb: Vec<_> = b.keys().collect();
    if ka == kb {
        1.0
    } else {
        0.0
    }
}

/// Text embedders for the similarity metric; the default is a sparse
/// character-trigram count embedding (deterministic, dependency-free).
pub trait TextEmbedder {
    fn id(&self) -> &str;
    fn embed(&self, text: &str) -> Result<BTreeMap<String, f64>>;
}

pub struct TrigramEmbedder;

impl TextEmbedder for TrigramEmbedder {
    fn id(&self) -> &str {
        "char-trigram"
    }

    fn embed(&self, text: &str) -> Result<BTreeMap<String, f64>> {
        let chars: Vec<char> = text.chars().collect();
        let mut map = BTreeMap::new();
        if chars.len() >= 3 {
            for w in chars.windows(3) {
                *map.entry(w.iter().collect::<String>()).or_insert(0.0) += 1.0;
            }
        } else if !chars.is_empty() {
            *map.entry(chars.iter().collect::<String>()).or_insert(0.0) += 1.0;
        }
        Ok(map)
    }
}

fn sparse_cosine(a: &BTreeMap<String, f64>, b: &BTreeMap<String, f64>, equal_texts: bool) -> f64 {
    if a.is_empty() && b.is_empty() {
        return if equal_texts { 1.0 } else { 0.0 };
    }
    if a.is_empty() || b.is_empty() {
        return 0.0;
    }
    let na: f64 = a.values().map(|v| v * v).sum::<f64>().sqrt();
    let nb: f64 = b.values().map(|v| v * v).sum::<f64>().sqrt();
    let dot: f64 = a
        .iter()
        .filter_map(|(k, va)| b.get(k).map(|vb| va * vb))
        .sum();
    dot / (na * nb)
}

/// Mean pairwise similarity mapped into [0, 1] via (1 + cos)/2.
pub fn embed_similarity(
    hyps: &[String],
    refs: &[String],
    embedder: &dyn TextEmbedder,
) -> Result<f64> {
    check_corpora(hyps, refs)?;
    let mut total = 0.0;
    for (h, r) in hyps.iter().zip(refs) {
        let he = embedder.embed(h)?;
        let re = embedder.embed(r)?;
        let cos = sparse_cosine(&he, &re, h == r);
        total += (1.0 + cos) / 2.0;
    }
    Ok(total / hyps.len() as f64)
}

// ---------------------------------------------------------------------------
// Distribution statistics
// ---------------------------------------------------------------------------

pub const HISTOGRAM_BINS: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionStats {
    pub mean: f64,
    pub std: f64,
    /// 20 equal bins over [0, 1], right-open except the last.
    pub histogram: Vec<usize>,
}

/// Population mean/std plus a fixed 20-bin histogram over [0, 1].
pub fn distribution_stats(scores: &[f64]) -> Result<DistributionStats> {
    if scores.is_empty() {
        return Err(Error::Data("no scores to analyze".into()));
    }
    for &s in scores {
        if !s.is_finite() || !(0.0..=1.0).contains(&s) {
            return Err(Error::Data(format!("score {s} outside [0,1]")));
        }
    }
    let n = scores.len() as f64;
    let mean = scores.iter().sum::<f64>() / n;
    let var = scores.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / n;
    let mut histogram = vec![0usize; HISTOGRAM_BINS];
    for &s in scores {
        let bin = ((s * HISTOGRAM_BINS as f64) as usize).min(HISTOGRAM_BINS - 1);
        histogram[bin] += 1;
    }
    Ok(DistributionStats {
        mean,
        std: var.sqrt(),
        histogram,
    })
}

// ---------------------------------------------------------------------------
// Full evaluation report
// ---------------------------------------------------------------------------

/// One line of a hypothesis or reference JSONL file. Extra fields (e.g.
/// candidate lists in generation output) are ignored.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalRecord {
    pub id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_ref: Option<String>,
}

/// All metric values in [0, 1], reported x100 in the emitted report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub bleu1: f64,
    pub bleu2: f64,
    pub bleu3: f64,
    pub bleu4: f64,
    pub rouge1: f64,
    pub rouge2: f64,
    pub rouge_l: f64,
    pub meteor: f64,
    pub cider: f64,
    pub embed_sim: f64,
}

impl MetricReport {
    pub fn compute(
        hyps: &[String],
        refs: &[String],
        embedder: &dyn TextEmbedder,
    ) -> Result<MetricReport> {
        Ok(MetricReport {
            bleu1: bleu(hyps, refs, 1)?,
            bleu2: bleu(hyps, refs, 2)?,
            bleu3: bleu(hyps, refs, 3)?,
            bleu4: bleu(hyps, refs, 4)?,
            rouge1: rouge(hyps, refs, RougeVariant::Rouge1)?,
            rouge2: rouge(hyps, refs, RougeVariant::Rouge2)?,
            rouge_l: rouge(hyps, refs, RougeVariant::RougeL)?,
            meteor: meteor(hyps, refs)?,
            cider: cider(hyps, refs)?,
            embed_sim: embed_similarity(hyps, refs, embedder)?,
        })
    }

    pub fn scaled_x100(&self) -> MetricReport {
        MetricReport {
            bleu1: self.bleu1 * 100.0,
            bleu2: self.bleu2 * 100.0,
            bleu3: self.bleu3 * 100.0,
            bleu4: self.bleu4 * 100.0,
            rouge1: self.rouge1 * 100.0,
            rouge2: self.rouge2 * 100.0,
            rouge_l: self.rouge_l * 100.0,
            meteor: self.meteor * 100.0,
            cider: self.cider * 100.0,
            embed_sim: self.embed_sim * 100.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub count: usize,
    /// Metric battery, x100.
    pub metrics: MetricReport,
    /// Sarcasm-score distribution of the hypotheses.
    pub sarcasm_scores: DistributionStats,
    /// Image-text incongruity distribution of the hypotheses; absent when
    /// records carry no image_ref.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub factual_incongruity: Option<DistributionStats>,
}

/// Default hypothesis incongruity: hashed-trigram text embedding against
/// the mean-pooled image feature grid (synthesized from image_ref when no
/// feature file exists).
pub fn default_incongruity(
    record: &EvalRecord,
    features_dir: Option<&std::path::Path>,
    dim: usize,
) -> Result<f64> {
    let image_ref = record
        .image_ref
        .as_deref()
        .ok_or_else(|| Error::Data(format!("record {} has no image_ref", record.id)))?;
    let features = resolve_features(image_ref, features_dir, 16, dim)?;
    let image = features.pooled();
    let text = hashed_text_embedding(&record.text, dim);
    factual_incongruity(&image, &text)
}

/// Full battery plus hypothesis score distributions. Corpora must be
/// aligned: same length, same ids in the same order.
pub fn evaluate_run(
    hyps: &[EvalRecord],
    refs: &[EvalRecord],
    scorer: &mut dyn Scorer,
    incongruity: Option<&dyn Fn(&EvalRecord) -> Result<f64>>,
) -> Result<EvalReport> {
    if hyps.len() != refs.len() {
        return Err(Error::Data(format!(
            "misaligned corpora: {} hypotheses vs {} references",
            hyps.len(),
            refs.len()
        )));
    }
    for (h, r) in hyps.iter().zip(refs) {
        if h.id != r.id {
            return Err(Error::Data(format!(
                "misaligned corpora: hypothesis {} vs reference {}",
                h.id, r.id
            )));
        }
    }
    let hyp_texts: Vec<String> = hyps.iter().map(|h| h.text.clone()).collect();
    let ref_texts: Vec<String> = refs.iter().map(|r| r.text.clone()).collect();
    let metrics = MetricReport::compute(&hyp_texts, &ref_texts, &TrigramEmbedder)?;

    let requests: Vec<ScoreRequest> = hyps
        .iter()
        .map(|h| ScoreRequest {
            id: &h.id,
            text: &h.text,
            image_ref: h.image_ref.as_deref(),
        })
        .collect();
    let scores = scorer.score_batch(&requests)?;
    let sarcasm_scores = distribution_stats(&scores)?;

    let factual = if hyps.iter().all(|h| h.image_ref.is_some()) {
        let f: Vec<f64> = match incongruity {
            Some(f) => hyps.iter().map(f).collect::<Result<_>>()?,
            None => hyps
                .iter()
                .map(|h| default_incongruity(h, None, 64))
                .collect::<Result<_>>()?,
        };
        Some(distribution_stats(&f)?)
    } else {
        None
    };

    Ok(EvalReport {
        schema_version: 1,
        count: hyps.len(),
        metrics: metrics.scaled_x100(),
        sarcasm_scores,
        factual_incongruity: factual,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(items: &[&str]) -> Vec<String> {
        items.iter().map(|x| x.to_string()).collect()
    }

    #[test]
    fn bleu1_partial_overlap() {
        let score = bleu(&s(&["a b c"]), &s(&["a b d"]), 1).unwrap();
        assert!((score - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn bleu_identity_and_empty() {
        for n in 1..=4 {
            let score = bleu(&s(&["the cat sat on the mat"]), &s(&["the cat sat on the mat"]), n)
                .unwrap();
            assert!((score - 1.0).abs() < 1e-12, "order {n}: {score}");
        }
        assert_eq!(bleu(&s(&[""]), &s(&["a b"]), 1).unwrap(), 0.0);
        assert!(bleu(&[], &[], 1).is_err());
    }

    #[test]
    fn bleu_brevity_penalty_applies() {
        // hypothesis shorter than reference with perfect precision
        let score = bleu(&s(&["a b"]), &s(&["a b c d"]), 1).unwrap();
        assert!((score - (1.0f64 - 2.0).exp()).abs() < 1e-12);
    }

    #[test]
    fn rouge_l_example() {
        let score = rouge(&s(&["a b c"]), &s(&["b c d"]), RougeVariant::RougeL).unwrap();
        assert!((score - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn rouge_identity_and_disjoint() {
        for v in [RougeVariant::Rouge1, RougeVariant::Rouge2, RougeVariant::RougeL] {
            assert!((rouge(&s(&["x y z"]), &s(&["x y z"]), v).unwrap() - 1.0).abs() < 1e-12);
        }
        assert_eq!(
            rouge(&s(&["a b"]), &s(&["c d"]), RougeVariant::Rouge1).unwrap(),
            0.0
        );
    }

    #[test]
    fn meteor_examples() {
        assert_eq!(meteor(&s(&["same words here"]), &s(&["same words here"])).unwrap(), 1.0);
        assert_eq!(meteor(&s(&["a b"]), &s(&["c d"])).unwrap(), 0.0);
        // swapped bigram: matches 2, chunks 2, P = R = 1
        let got = meteor(&s(&["a b"]), &s(&["b a"])).unwrap();
        let f_mean = 1.0;
        let penalty = 0.5 * (2.0f64 / 2.0).powi(3);
        assert!((got - f_mean * (1.0 - penalty)).abs() < 1e-12);
    }

    #[test]
    fn meteor_single_chunk_closed_form() {
        // "a b c x" vs "a b c y": m=3, ch=1, P=R=3/4
        let got = meteor(&s(&["a b c x"]), &s(&["a b c y"])).unwrap();
        let p: f64 = 0.75;
        let r: f64 = 0.75;
        let f_mean = 10.0 * p * r / (r + 9.0 * p);
        let penalty = 0.5 * (1.0f64 / 3.0).powi(3);
        assert!((got - f_mean * (1.0 - penalty)).abs() < 1e-12);
    }

    #[test]
    fn cider_identity_corpus() {
        let texts = s(&["red apples here", "blue boats sail", "green hills roll"]);
        let score = cider(&texts, &texts).unwrap();
        assert!((score - 1.0).abs() < 1e-9, "{score}");
    }

    #[test]
    fn cider_disjoint_pair_contributes_zero() {
        let hyps = s(&["qq ww", "blue boats sail", "green hills roll"]);
        let refs = s(&["red apples here", "blue boats sail", "green hills roll"]);
        let full = cider(&refs, &refs).unwrap();
        let with_disjoint = cider(&hyps, &refs).unwrap();
        assert!(with_disjoint < full);
        // the disjoint pair itself contributes 0: mean over 3 pairs
        assert!((with_disjoint - 2.0 / 3.0).abs() < 1e-9, "{with_disjoint}");
    }

    #[test]
    fn cider_rejects_single_item() {
        assert!(cider(&s(&["a"]), &s(&["a"])).is_err());
    }

    #[test]
    fn embed_sim_contract() {
        assert_eq!(
            embed_similarity(&s(&["identical text"]), &s(&["identical text"]), &TrigramEmbedder)
                .unwrap(),
            1.0
        );
        // no shared trigrams -> cosine 0 -> 0.5
        let score =
            embed_similarity(&s(&["aaaa"]), &s(&["bbbb"]), &TrigramEmbedder).unwrap();
        assert!((score - 0.5).abs() < 1e-12);
        // deterministic
        let a = embed_similarity(&s(&["some text"]), &s(&["other text"]), &TrigramEmbedder)
            .unwrap();
        let b = embed_similarity(&s(&["some text"]), &s(&["other text"]), &TrigramEmbedder)
            .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn distribution_examples() {
        let stats = distribution_stats(&[0.0, 1.0]).unwrap();
        assert!((stats.mean - 0.5).abs() < 1e-15);
        assert!((stats.std - 0.5).abs() < 1e-15);

        let stats = distribution_stats(&[0.3, 0.3, 0.3]).unwrap();
        assert_eq!(stats.std, 0.0);

        let stats = distribution_stats(&[0.2, 0.4, 0.6, 0.8]).unwrap();
        assert!((stats.mean - 0.5).abs() < 1e-12);
        assert!((stats.std - 0.05f64.sqrt()).abs() < 1e-12);
        assert_eq!(stats.histogram.iter().sum::<usize>(), 4);

        assert!(distribution_stats(&[]).is_err());
        assert!(distribution_stats(&[1.2]).is_err());
    }

    #[test]
    fn histogram_bins_right_open_except_last() {
        let stats = distribution_stats(&[0.0, 0.049, 0.05, 0.999, 1.0]).unwrap();
        assert_eq!(stats.histogram[0], 2);
        assert_eq!(stats.histogram[1], 1);
        assert_eq!(stats.histogram[19], 2);
    }

    #[test]
    fn tokenizer_separates_punctuation() {
        assert_eq!(metric_tokenize("Hello, world!"), s(&["hello", ",", "world", "!"]));
        assert_eq!(metric_tokenize(""), Vec::<String>::new());
    }

    #[test]
    fn evaluate_run_identity() {
        let recs: Vec<EvalRecord> = (0..3)
            .map(|i| EvalRecord {
                id: format!("r{i}"),
                text: format!("sample text number {i} words"),
                image_ref: Some(format!("img{i}")),
            })
            .collect();
        let mut scorer = crate::reward::SyntheticOracle::new();
        let report = evaluate_run(&recs, &recs, &mut scorer, None).unwrap();
        assert_eq!(report.count, 3);
        assert!((report.metrics.bleu1 - 100.0).abs() < 1e-9);
        assert!((report.metrics.rouge_l - 100.0).abs() < 1e-9);
        assert!((report.metrics.meteor - 100.0).abs() < 1e-9);
        assert!((report.metrics.embed_sim - 100.0).abs() < 1e-9);
        assert!(report.factual_incongruity.is_some());
        // determinism
        let report2 = evaluate_run(&recs, &recs, &mut scorer, None).unwrap();
        assert_eq!(
            serde_json::to_string(&report).unwrap(),
            serde_json::to_string(&report2).unwrap()
        );
    }

    #[test]
    fn evaluate_run_rejects_misaligned() {
        let a = vec![EvalRecord {
            id: "x".into(),
            text: "t".into(),
            image_ref: None,
        }];
        let b = vec![EvalRecord {
            id: "y".into(),
            text: "t".into(),
            image_ref: None,
        }];
        let mut scorer = crate::reward::SyntheticOracle::new();
        assert!(evaluate_run(&a, &b, &mut scorer, None).is_err());
        assert!(evaluate_run(&a, &[], &mut scorer, None).is_err());
    }
}
