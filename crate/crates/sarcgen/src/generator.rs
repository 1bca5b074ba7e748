//! Seq2seq decoding over the fused context: incremental decoder sessions,
//! beam-search top-k candidate generation (with a seeded sampling mode
//! behind a flag), teacher-forced sequence log-probabilities, candidate
//! embeddings, and best-of-k anchor selection.

use serde::{Deserialize, Serialize};

use crate::encoder::DecoderContext;
use crate::error::{Error, Result};
use crate::model::{
    self, attend, gelu_t, layer_norm_t, linear, log_softmax_row_vec, mask_matrix, Model,
};
use crate::nn::graph::{Graph, NodeId};
use crate::nn::rng::SeededRng;
use crate::nn::tensor::{norm, Tensor};
use crate::reward::RewardScore;
use crate::vocab::{TokenSequence, Vocabulary, BOS, EOS, PAD, UNK};

/// One generated hypothesis: tokens (ending in EOS unless the length cap
/// closed it), detokenized text, summed token log-probability, and the
/// normalized mean decoder-state embedding g.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Candidate {
    pub tokens: TokenSequence,
    pub text: String,
    pub logprob: f64,
    pub embedding: Vec<f64>,
    pub reward: Option<RewardScore>,
}

/// Top-k candidates ordered by descending log-probability. `exhausted`
/// flags decodes that could not produce k distinct hypotheses.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CandidateSet {
    pub candidates: Vec<Candidate>,
    pub anchor_index: Option<usize>,
    pub exhausted: bool,
}

impl CandidateSet {
    pub fn anchor(&self) -> Option<&Candidate> {
        self.anchor_index.and_then(|i| self.candidates.get(i))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecodeMode {
    /// Deterministic beam search with k beams.
    Beam,
    /// Seeded ancestral sampling of k distinct sequences.
    Sample { seed: u64 },
}

/// Per-layer parameter indices resolved once per session.
#[derive(Clone)]
struct LayerIdx {
    ln1: (usize, usize),
    self_attn: AttnIdx,
    ln2: (usize, usize),
    cross_attn: AttnIdx,
    ln3: (usize, usize),
    ffn_up: (usize, usize),
    ffn_down: (usize, usize),
}

#[derive(Clone)]
struct AttnIdx {
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
}

fn attn_idx(model: &Model, prefix: &str) -> Result<AttnIdx> {
    let p = &model.params;
    Ok(AttnIdx {
        wq: p.index_of(&format!("{prefix}.wq"))?,
        bq: p.index_of(&format!("{prefix}.bq"))?,
        wk: p.index_of(&format!("{prefix}.wk"))?,
        bk: p.index_of(&format!("{prefix}.bk"))?,
        wv: p.index_of(&format!("{prefix}.wv"))?,
        bv: p.index_of(&format!("{prefix}.bv"))?,
        wo: p.index_of(&format!("{prefix}.wo"))?,
        bo: p.index_of(&format!("{prefix}.bo"))?,
    })
}

fn ln_idx(model: &Model, prefix: &str) -> Result<(usize, usize)> {
    Ok((
        model.params.index_of(&format!("{prefix}.g"))?,
        model.params.index_of(&format!("{prefix}.b"))?,
    ))
}

/// Incremental decoder state: per-layer growing self-attention K/V caches
/// plus cross-attention K/V computed once from the context. Cloneable so
/// beams can fork cheaply (the model itself is borrowed, not copied).
#[derive(Clone)]
pub struct DecodeSession<'m> {
    model: &'m Model,
    layers: Vec<LayerIdx>,
    lnf: (usize, usize),
    out_w: usize,
    out_b: usize,
    ctx_k: Vec<Tensor>,
    ctx_v: Vec<Tensor>,
    ctx_mask: Vec<bool>,
    self_k: Vec<Tensor>,
    self_v: Vec<Tensor>,
    /// Final-layer hidden state at each step taken, aligned with the token
    /// predicted from that step.
    pub hiddens: Vec<Vec<f64>>,
    pos: usize,
}

impl<'m> DecodeSession<'m> {
    pub fn new(model: &'m Model, ctx: &DecoderContext) -> Result<Self> {
        if ctx.states.cols != model.cfg.d_model {
            return Err(Error::Shape(format!(
                "context dim {} vs model dim {}",
                ctx.states.cols, model.cfg.d_model
            )));
        }
        if ctx.states.rows != ctx.mask.len() {
            return Err(Error::Shape("context mask length mismatch".into()));
        }
        let mut layers = Vec::with_capacity(model.cfg.dec_layers);
        let mut ctx_k = Vec::with_capacity(model.cfg.dec_layers);
        let mut ctx_v = Vec::with_capacity(model.cfg.dec_layers);
        for i in 0..model.cfg.dec_layers {
            let idx = LayerIdx {
                ln1: ln_idx(model, &format!("dec.{i}.ln1"))?,
                self_attn: attn_idx(model, &format!("dec.{i}.self"))?,
                ln2: ln_idx(model, &format!("dec.{i}.ln2"))?,
                cross_attn: attn_idx(model, &format!("dec.{i}.cross"))?,
                ln3: ln_idx(model, &format!("dec.{i}.ln3"))?,
                ffn_up: (
                    model.params.index_of(&format!("dec.{i}.ffn.up.w"))?,
                    model.params.index_of(&format!("dec.{i}.ffn.up.b"))?,
                ),
                ffn_down: (
                    model.params.index_of(&format!("dec.{i}.ffn.down.w"))?,
                    model.params.index_of(&format!("dec.{i}.ffn.down.b"))?,
                ),
            };
            let p = &model.params;
            ctx_k.push(linear(
                &ctx.states,
                p.tensor(idx.cross_attn.wk),
                p.tensor(idx.cross_attn.bk),
            )?);
            ctx_v.push(linear(
                &ctx.states,
                p.tensor(idx.cross_attn.wv),
                p.tensor(idx.cross_attn.bv),
            )?);
            layers.push(idx);
        }
        let d = model.cfg.d_model;
        Ok(DecodeSession {
            model,
            layers,
            lnf: ln_idx(model, "dec.lnf")?,
            out_w: model.params.index_of("dec.out.w")?,
            out_b: model.params.index_of("dec.out.b")?,
            ctx_k,
            ctx_v,
            ctx_mask: ctx.mask.clone(),
            self_k: vec![Tensor::zeros(0, d); model.cfg.dec_layers],
            self_v: vec![Tensor::zeros(0, d); model.cfg.dec_layers],
            hiddens: Vec::new(),
            pos: 0,
        })
    }

    pub fn steps_taken(&self) -> usize {
        self.pos
    }

    /// Feed one input token; returns next-token logits (length vocab_size).
    pub fn step(&mut self, token: u32) -> Result<Vec<f64>> {
        let cfg = &self.model.cfg;
        let p = &self.model.params;
        if token as usize >= cfg.vocab_size {
            return Err(Error::Data(format!("token id {token} out of vocabulary")));
        }
        if self.pos >= cfg.max_gen {
            return Err(Error::Shape(format!(
                "decoder position {} exceeds max_gen {}",
                self.pos, cfg.max_gen
            )));
        }

        let tok_row = model::gather_rows_t(p.get("dec.tok")?, &[token as usize]);
        let pos_row = model::gather_rows_t(p.get("dec.pos")?, &[self.pos]);
        let mut x = tok_row;
        x.add_in_place(&pos_row)?;

        let ctx_mask = self.ctx_mask.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            // self-attention over the cache (past plus current position)
            let h = layer_norm_t(&x, p.tensor(layer.ln1.0), p.tensor(layer.ln1.1));
            let a = &layer.self_attn;
            let q = linear(&h, p.tensor(a.wq), p.tensor(a.bq))?;
            let k = linear(&h, p.tensor(a.wk), p.tensor(a.bk))?;
            let v = linear(&h, p.tensor(a.wv), p.tensor(a.bv))?;
            self.self_k[i].data.extend_from_slice(k.row(0));
            self.self_k[i].rows += 1;
            self.self_v[i].data.extend_from_slice(v.row(0));
            self.self_v[i].rows += 1;
            let att = attend(&q, &self.self_k[i], &self.self_v[i], cfg.n_heads, &|_, _| true)?;
            let proj = linear(&att, p.tensor(a.wo), p.tensor(a.bo))?;
            x.add_in_place(&proj)?;

            // cross-attention over the fused context
            let h = layer_norm_t(&x, p.tensor(layer.ln2.0), p.tensor(layer.ln2.1));
            let c = &layer.cross_attn;
            let q = linear(&h, p.tensor(c.wq), p.tensor(c.bq))?;
            let att = attend(&q, &self.ctx_k[i], &self.ctx_v[i], cfg.n_heads, &|_, kj| {
                ctx_mask[kj]
            })?;
            let proj = linear(&att, p.tensor(c.wo), p.tensor(c.bo))?;
            x.add_in_place(&proj)?;

            // feed-forward
            let h = layer_norm_t(&x, p.tensor(layer.ln3.0), p.tensor(layer.ln3.1));
            let up = linear(&h, p.tensor(layer.ffn_up.0), p.tensor(layer.ffn_up.1))?;
            let act = gelu_t(&up);
            let down = linear(&act, p.tensor(layer.ffn_down.0), p.tensor(layer.ffn_down.1))?;
            x.add_in_place(&down)?;
        }

        let h = layer_norm_t(&x, p.tensor(self.lnf.0), p.tensor(self.lnf.1));
        self.hiddens.push(h.row(0).to_vec());
        let logits = linear(&h, p.tensor(self.out_w), p.tensor(self.out_b))?;
        self.pos += 1;
        Ok(logits.data)
    }
}

/// Teacher-forced sum of token log-probabilities of `tokens` given the
/// context; no sampling.
pub fn sequence_logprob(model: &Model, ctx: &DecoderContext, tokens: &[u32]) -> Result<f64> {
    if tokens.is_empty() {
        return Err(Error::Data("cannot score an empty sequence".into()));
    }
    for &t in tokens {
        if t as usize >= model.cfg.vocab_size {
            return Err(Error::Data(format!("token id {t} out of vocabulary")));
        }
    }
    let mut session = DecodeSession::new(model, ctx)?;
    let mut logits = session.step(BOS)?;
    let mut lp = 0.0;
    for (t, &tok) in tokens.iter().enumerate() {
        let logp = log_softmax_row_vec(logits);
        lp += logp[tok as usize];
        if t + 1 < tokens.len() {
            logits = session.step(tok)?;
        } else {
            logits = Vec::new();
        }
    }
    Ok(lp)
}

/// Mean of decoder hidden states over non-PAD positions, L2-normalized.
pub fn candidate_embedding(decoder_states: &[Vec<f64>]) -> Result<Vec<f64>> {
    if decoder_states.is_empty() {
        return Err(Error::Data("no decoder states to embed".into()));
    }
    let d = decoder_states[0].len();
    let mut mean = vec![0.0; d];
    for state in decoder_states {
        for (m, v) in mean.iter_mut().zip(state) {
            *m += v;
        }
    }
    let inv = 1.0 / decoder_states.len() as f64;
    for m in &mut mean {
        *m *= inv;
    }
    let n = norm(&mean);
    if n == 0.0 {
        return Err(Error::Numeric("zero-norm candidate embedding".into()));
    }
    for m in &mut mean {
        *m /= n;
    }
    Ok(mean)
}

fn generatable_ids(vocab_size: usize) -> impl Iterator<Item = u32> {
    (0..vocab_size as u32).filter(|&id| id != PAD && id != BOS && id != UNK)
}

struct Beam<'m> {
    session: DecodeSession<'m>,
    tokens: Vec<u32>,
    logprob: f64,
    next_logits: Vec<f64>,
}

struct Finished {
    tokens: Vec<u32>,
    logprob: f64,
    hiddens: Vec<Vec<f64>>,
}

fn cmp_candidates(a: &(f64, Vec<u32>), b: &(f64, Vec<u32>)) -> std::cmp::Ordering {
    b.0.partial_cmp(&a.0)
        .unwrap_or(std::cmp::Ordering::Equal)
        .then_with(|| a.1.cmp(&b.1))
}

fn build_candidate(vocab: &Vocabulary, f: Finished) -> Result<Candidate> {
    debug_assert_eq!(f.hiddens.len(), f.tokens.len());
    let embedding = candidate_embedding(&f.hiddens)?;
    Ok(Candidate {
        text: vocab.decode(&f.tokens),
        tokens: TokenSequence::new(f.tokens),
        logprob: f.logprob,
        embedding,
        reward: None,
    })
}

/// Generate up to k distinct candidates. Beam mode runs k-wide beam search
/// and ranks every finished hypothesis (EOS-terminated or closed at
/// max_len) by summed log-probability, ties broken by token order; with
/// small vocabularies and short caps this matches exhaustive enumeration.
pub fn generate_topk(
    model: &Model,
    vocab: &Vocabulary,
    ctx: &DecoderContext,
    k: usize,
    max_len: usize,
    mode: DecodeMode,
) -> Result<CandidateSet> {
    if k < 1 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    if max_len < 1 {
        return Err(Error::Config("max_len must be at least 1".into()));
    }
    if vocab.len() != model.cfg.vocab_size {
        return Err(Error::Shape(format!(
            "vocabulary size {} vs model vocab {}",
            vocab.len(),
            model.cfg.vocab_size
        )));
    }
    let cap = max_len.min(model.cfg.max_gen.saturating_sub(1)).max(1);
    match mode {
        DecodeMode::Beam => beam_search(model, vocab, ctx, k, cap),
        DecodeMode::Sample { seed } => sample_topk(model, vocab, ctx, k, cap, seed),
    }
}

fn beam_search(
    model: &Model,
    vocab: &Vocabulary,
    ctx: &DecoderContext,
    k: usize,
    cap: usize,
) -> Result<CandidateSet> {
    let mut root = DecodeSession::new(model, ctx)?;
    let root_logits = root.step(BOS)?;
    let mut live = vec![Beam {
        session: root,
        tokens: Vec::new(),
        logprob: 0.0,
        next_logits: root_logits,
    }];
    let mut finished: Vec<Finished> = Vec::new();

    for new_len in 1..=cap {
        if live.is_empty() {
            break;
        }
        // candidate expansions: (new_logprob, new_tokens, parent, token)
        let mut expansions: Vec<(f64, Vec<u32>, usize, u32)> = Vec::new();
        for (bi, beam) in live.iter().enumerate() {
            let logp = log_softmax_row_vec(beam.next_logits.clone());
            for tok in generatable_ids(model.cfg.vocab_size) {
                let lp = beam.logprob + logp[tok as usize];
                let mut toks = beam.tokens.clone();
                toks.push(tok);
                if tok == EOS {
                    finished.push(Finished {
                        tokens: toks,
                        logprob: lp,
                        hiddens: beam.session.hiddens.clone(),
                    });
                } else {
                    expansions.push((lp, toks, bi, tok));
                }
            }
        }
        if new_len == cap {
            // close every surviving expansion at the length cap
            for (lp, toks, bi, _tok) in expansions {
                finished.push(Finished {
                    hiddens: live[bi].session.hiddens.clone(),
                    tokens: toks,
                    logprob: lp,
                });
            }
            live.clear();
            break;
        }
        expansions.sort_by(|a, b| cmp_candidates(&(a.0, a.1.clone()), &(b.0, b.1.clone())));
        expansions.truncate(k);
        let mut next_live = Vec::with_capacity(expansions.len());
        for (lp, toks, bi, tok) in expansions {
            let mut session = live[bi].session.clone();
            let next_logits = session.step(tok)?;
            next_live.push(Beam {
                session,
                tokens: toks,
                logprob: lp,
                next_logits,
            });
        }
        live = next_live;

        // sound early exit: every live continuation can only lose
        // log-probability, so once the k-th finished hypothesis strictly
        // beats the best live prefix nothing better can appear.
        if finished.len() >= k {
            let mut lps: Vec<f64> = finished.iter().map(|f| f.logprob).collect();
            lps.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
            let kth = lps[k - 1];
            let best_live = live
                .iter()
                .map(|b| b.logprob)
                .fold(f64::NEG_INFINITY, f64::max);
            if kth > best_live {
                break;
            }
        }
    }

    finished.sort_by(|a, b| cmp_candidates(&(a.logprob, a.tokens.clone()), &(b.logprob, b.tokens.clone())));
    finished.truncate(k);
    let exhausted = finished.len() < k;
    let candidates = finished
        .into_iter()
        .map(|f| build_candidate(vocab, f))
        .collect::<Result<Vec<_>>>()?;
    if candidates.is_empty() {
        return Err(Error::Numeric("beam search produced no candidates".into()));
    }
    Ok(CandidateSet {
        candidates,
        anchor_index: None,
        exhausted,
    })
}

fn sample_topk(
    model: &Model,
    vocab: &Vocabulary,
    ctx: &DecoderContext,
    k: usize,
    cap: usize,
    seed: u64,
) -> Result<CandidateSet> {
    let mut rng = SeededRng::new(seed);
    let mut seen: std::collections::BTreeSet<Vec<u32>> = std::collections::BTreeSet::new();
    let mut finished: Vec<Finished> = Vec::new();
    let attempts = 20 * k;
    for _ in 0..attempts {
        if finished.len() >= k {
            break;
        }
        let mut session = DecodeSession::new(model, ctx)?;
        let mut logits = session.step(BOS)?;
        let mut tokens = Vec::new();
        let mut lp = 0.0;
        loop {
            let logp = log_softmax_row_vec(logits);
            let ids: Vec<u32> = generatable_ids(model.cfg.vocab_size).collect();
            let weights: Vec<f64> = ids.iter().map(|&id| logp[id as usize].exp()).collect();
            let total: f64 = weights.iter().sum();
            let mut draw = rng.uniform() * total;
            let mut chosen = ids[ids.len() - 1];
            for (&id, &w) in ids.iter().zip(&weights) {
                if draw < w {
                    chosen = id;
                    break;
                }
                draw -= w;
            }
            lp += logp[chosen as usize];
            tokens.push(chosen);
            if chosen == EOS || tokens.len() == cap {
                break;
            }
            logits = session.step(chosen)?;
        }
        if seen.insert(tokens.clone()) {
            let take = tokens.len();
            finished.push(Finished {
                hiddens: session.hiddens[..take].to_vec(),
                tokens,
                logprob: lp,
            });
        }
    }
    finished.sort_by(|a, b| cmp_candidates(&(a.logprob, a.tokens.clone()), &(b.logprob, b.tokens.clone())));
    let exhausted = finished.len() < k;
    let candidates = finished
        .into_iter()
        .map(|f| build_candidate(vocab, f))
        .collect::<Result<Vec<_>>>()?;
    if candidates.is_empty() {
        return Err(Error::Numeric("sampling produced no candidates".into()));
    }
    Ok(CandidateSet {
        candidates,
        anchor_index: None,
        exhausted,
    })
}

/// Score any unscored candidates and pick the anchor: maximal reward, ties
/// broken by higher log-probability, then by lower index.
pub fn select_best<F>(set: &mut CandidateSet, mut reward_fn: F) -> Result<usize>
where
    F: FnMut(&Candidate) -> Result<RewardScore>,
{
    if set.candidates.is_empty() {
        return Err(Error::Data("cannot select from an empty candidate set".into()));
    }
    for cand in &mut set.candidates {
        if cand.reward.is_none() {
            let score = reward_fn(cand)?;
            cand.reward = Some(score);
        }
    }
    let mut best = 0usize;
    for i in 1..set.candidates.len() {
        let (bi, ci) = (&set.candidates[best], &set.candidates[i]);
        let (br, cr) = (
            bi.reward.as_ref().expect("scored").value,
            ci.reward.as_ref().expect("scored").value,
        );
        if cr > br || (cr == br && ci.logprob > bi.logprob) {
            best = i;
        }
    }
    set.anchor_index = Some(best);
    Ok(best)
}

/// Teacher-forced decoder forward on the tape; returns (logits rows,
/// final hidden rows), one row per input position.
pub fn decoder_forward_graph(
    g: &mut Graph,
    cfg: &model::ModelConfig,
    ctx: NodeId,
    ctx_mask: &[bool],
    input_ids: &[u32],
) -> Result<(NodeId, NodeId)> {
    let t = input_ids.len();
    if t == 0 {
        return Err(Error::Data("empty decoder input".into()));
    }
    if t > cfg.max_gen {
        return Err(Error::Shape(format!(
            "decoder length {t} exceeds max_gen {}",
            cfg.max_gen
        )));
    }
    for &id in input_ids {
        if id as usize >= cfg.vocab_size {
            return Err(Error::Data(format!("token id {id} out of vocabulary")));
        }
    }
    let ids: Vec<usize> = input_ids.iter().map(|&i| i as usize).collect();
    let tok_table = g.param("dec.tok")?;
    let toks = g.gather_rows(tok_table, &ids)?;
    let pos_table = g.param("dec.pos")?;
    let positions: Vec<usize> = (0..t).collect();
    let pos = g.gather_rows(pos_table, &positions)?;
    let mut x = g.add(toks, pos)?;

    let causal = mask_matrix(t, t, &|qi, kj| kj <= qi);
    let cross = mask_matrix(t, ctx_mask.len(), &|_qi, kj| ctx_mask[kj]);
    for i in 0..cfg.dec_layers {
        let h = model::graph_layer_norm(g, x, &format!("dec.{i}.ln1"))?;
        let attn = model::graph_attention(g, h, h, &format!("dec.{i}.self"), cfg.n_heads, &causal)?;
        x = g.add(x, attn)?;
        let h = model::graph_layer_norm(g, x, &format!("dec.{i}.ln2"))?;
        let attn = model::graph_attention(g, h, ctx, &format!("dec.{i}.cross"), cfg.n_heads, &cross)?;
        x = g.add(x, attn)?;
        let h = model::graph_layer_norm(g, x, &format!("dec.{i}.ln3"))?;
        let ffn = model::graph_ffn(g, h, &format!("dec.{i}.ffn"))?;
        x = g.add(x, ffn)?;
    }
    let hidden = model::graph_layer_norm(g, x, "dec.lnf")?;
    let logits = model::graph_linear(g, hidden, "dec.out")?;
    Ok((logits, hidden))
}

/// Graph node for the teacher-forced log-probability of `tokens` plus the
/// candidate-embedding node, sharing one decoder forward.
pub fn candidate_nodes_graph(
    g: &mut Graph,
    cfg: &model::ModelConfig,
    ctx: NodeId,
    ctx_mask: &[bool],
    tokens: &[u32],
) -> Result<(NodeId, NodeId)> {
    if tokens.is_empty() {
        return Err(Error::Data("empty candidate".into()));
    }
    let mut input = Vec::with_capacity(tokens.len());
    input.push(BOS);
    input.extend_from_slice(&tokens[..tokens.len() - 1]);
    let (logits, hidden) = decoder_forward_graph(g, cfg, ctx, ctx_mask, &input)?;
    let logp = g.log_softmax_rows(logits);
    let picks: Vec<(usize, usize)> = tokens
        .iter()
        .enumerate()
        .map(|(t, &tok)| (t, tok as usize))
        .collect();
    let picked = g.pick_scalars(logp, &picks)?;
    let lp = g.sum(picked);
    let mean = g.mean_rows(hidden);
    let emb = g.l2_normalize_rows(mean)?;
    Ok((lp, emb))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::assemble_decoder_context;
    use crate::features::synthetic_features;
    use crate::model::ModelConfig;

    fn setup() -> (Model, Vocabulary, DecoderContext) {
        let vocab = Vocabulary::build(["alpha beta gamma delta epsilon zeta"]);
        let cfg = ModelConfig {
            d_model: 8,
            n_heads: 2,
            enc_layers: 1,
            dec_layers: 2,
            ffn_mult: 2,
            vocab_size: vocab.len(),
            max_patches: 4,
            max_tokens: 10,
            max_gen: 8,
            ..Default::default()
        };
        let model = Model::new(cfg, 7).unwrap();
        let img = synthetic_features("gen", 3, 8);
        let prompt = vocab.encode("alpha beta", 10);
        let fused = model.encode(&img, &prompt).unwrap();
        let ctx = assemble_decoder_context(&fused, true);
        (model, vocab, ctx)
    }

    #[test]
    fn uniformish_logprob_scale() {
        // an untrained model is near-uniform: sequence logprob of T tokens
        // is around -T ln V
        let (model, vocab, ctx) = setup();
        let tokens = vec![vocab.id_of("alpha"), vocab.id_of("beta"), EOS];
        let lp = sequence_logprob(&model, &ctx, &tokens).unwrap();
        let uniform = -(tokens.len() as f64) * (vocab.len() as f64).ln();
        assert!((lp - uniform).abs() < 0.5, "lp {lp} vs uniform {uniform}");
    }

    #[test]
    fn logprob_matches_manual_accumulation() {
        let (model, _vocab, ctx) = setup();
        let tokens = vec![4, 5, EOS];
        let lp = sequence_logprob(&model, &ctx, &tokens).unwrap();
        // manual two-step accumulation through a fresh session
        let mut session = DecodeSession::new(&model, &ctx).unwrap();
        let mut manual = 0.0;
        let mut input = vec![BOS, 4, 5];
        let mut logits = Vec::new();
        for (i, tok) in input.drain(..).enumerate() {
            logits = session.step(tok).unwrap();
            let _ = i;
        }
        let mut session2 = DecodeSession::new(&model, &ctx).unwrap();
        let l0 = session2.step(BOS).unwrap();
        manual += log_softmax_row_vec(l0)[4];
        let l1 = session2.step(4).unwrap();
        manual += log_softmax_row_vec(l1)[5];
        let l2 = session2.step(5).unwrap();
        manual += log_softmax_row_vec(l2)[EOS as usize];
        assert!((lp - manual).abs() < 1e-12);
        let _ = logits;
    }

    #[test]
    fn graph_decoder_matches_session() {
        let (model, _vocab, ctx) = setup();
        let tokens = vec![4u32, 6, 5, EOS];
        let plain = sequence_logprob(&model, &ctx, &tokens).unwrap();
        let mut g = Graph::new(&model.params);
        let ctx_node = g.input(ctx.states.clone());
        let (lp_node, emb_node) =
            candidate_nodes_graph(&mut g, &model.cfg, ctx_node, &ctx.mask, &tokens).unwrap();
        let graph_lp = g.value(lp_node).at(0, 0);
        assert!(
            (plain - graph_lp).abs() < 1e-12,
            "plain {plain} vs graph {graph_lp}"
        );
        // embedding agreement with the session-side computation
        let mut session = DecodeSession::new(&model, &ctx).unwrap();
        session.step(BOS).unwrap();
        session.step(4).unwrap();
        session.step(6).unwrap();
        session.step(5).unwrap();
        let emb = candidate_embedding(&session.hiddens).unwrap();
        let gv = g.value(emb_node);
        for (a, b) in emb.iter().zip(gv.row(0)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn beam_one_equals_greedy() {
        let (model, vocab, ctx) = setup();
        let set = generate_topk(&model, &vocab, &ctx, 1, 5, DecodeMode::Beam).unwrap();
        assert_eq!(set.candidates.len(), 1);
        // greedy rollout
        let mut session = DecodeSession::new(&model, &ctx).unwrap();
        let mut logits = session.step(BOS).unwrap();
        let mut greedy = Vec::new();
        for _ in 0..5 {
            let logp = log_softmax_row_vec(logits);
            let tok = generatable_ids(model.cfg.vocab_size)
                .max_by(|&a, &b| {
                    logp[a as usize]
                        .partial_cmp(&logp[b as usize])
                        .unwrap()
                        .then(b.cmp(&a))
                })
                .unwrap();
            greedy.push(tok);
            if tok == EOS || greedy.len() == 5 {
                break;
            }
            logits = session.step(tok).unwrap();
        }
        assert_eq!(set.candidates[0].tokens.ids, greedy);
    }

    #[test]
    fn topk_ordering_and_distinctness() {
        let (model, vocab, ctx) = setup();
        let set = generate_topk(&model, &vocab, &ctx, 5, 4, DecodeMode::Beam).unwrap();
        assert_eq!(set.candidates.len(), 5);
        for w in set.candidates.windows(2) {
            assert!(w[0].logprob >= w[1].logprob);
            assert_ne!(w[0].tokens.ids, w[1].tokens.ids);
        }
        for c in &set.candidates {
            assert!(c.logprob <= 0.0);
            assert!(c.tokens.len() <= 4);
            let last = *c.tokens.ids.last().unwrap();
            assert!(last == EOS || c.tokens.len() == 4);
            assert!((norm(&c.embedding) - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn decode_is_deterministic() {
        let (model, vocab, ctx) = setup();
        let a = generate_topk(&model, &vocab, &ctx, 3, 4, DecodeMode::Beam).unwrap();
        let b = generate_topk(&model, &vocab, &ctx, 3, 4, DecodeMode::Beam).unwrap();
        for (x, y) in a.candidates.iter().zip(&b.candidates) {
            assert_eq!(x.tokens.ids, y.tokens.ids);
            assert_eq!(x.logprob, y.logprob);
        }
    }

    #[test]
    fn sampling_mode_is_seeded_and_distinct() {
        let (model, vocab, ctx) = setup();
        let a = generate_topk(&model, &vocab, &ctx, 4, 5, DecodeMode::Sample { seed: 9 }).unwrap();
        let b = generate_topk(&model, &vocab, &ctx, 4, 5, DecodeMode::Sample { seed: 9 }).unwrap();
        assert_eq!(a.candidates.len(), b.candidates.len());
        for (x, y) in a.candidates.iter().zip(&b.candidates) {
            assert_eq!(x.tokens.ids, y.tokens.ids);
        }
        let mut seen = std::collections::BTreeSet::new();
        for c in &a.candidates {
            assert!(seen.insert(c.tokens.ids.clone()));
        }
    }

    #[test]
    fn embedding_contract() {
        let one = vec![vec![3.0, 4.0]];
        let e = candidate_embedding(&one).unwrap();
        assert!((e[0] - 0.6).abs() < 1e-12 && (e[1] - 0.8).abs() < 1e-12);
        let two = vec![vec![3.0, 4.0], vec![3.0, 4.0]];
        assert_eq!(candidate_embedding(&two).unwrap(), e);
        assert!(candidate_embedding(&[]).is_err());
        assert!(candidate_embedding(&[vec![0.0, 0.0]]).is_err());
    }

    fn mk_candidate(lp: f64, reward: Option<f64>, id: u32) -> Candidate {
        Candidate {
            tokens: TokenSequence::new(vec![id, EOS]),
            text: format!("c{id}"),
            logprob: lp,
            embedding: vec![1.0, 0.0],
            reward: reward.map(|v| RewardScore::new(v, "test").unwrap()),
        }
    }

    #[test]
    fn select_best_argmax_and_tiebreaks() {
        let mut set = CandidateSet {
            candidates: vec![
                mk_candidate(-1.0, Some(0.2), 4),
                mk_candidate(-2.0, Some(0.9), 5),
                mk_candidate(-3.0, Some(0.5), 6),
            ],
            anchor_index: None,
            exhausted: false,
        };
        let best = select_best(&mut set, |_| unreachable!("all scored")).unwrap();
        assert_eq!(best, 1);

        // equal rewards: higher logprob wins
        let mut set = CandidateSet {
            candidates: vec![
                mk_candidate(-3.0, Some(0.5), 4),
                mk_candidate(-1.0, Some(0.5), 5),
                mk_candidate(-2.0, Some(0.5), 6),
            ],
            anchor_index: None,
            exhausted: false,
        };
        assert_eq!(select_best(&mut set, |_| unreachable!()).unwrap(), 1);

        // fully tied: lower index wins
        let mut set = CandidateSet {
            candidates: vec![
                mk_candidate(-1.0, Some(0.5), 4),
                mk_candidate(-1.0, Some(0.5), 5),
            ],
            anchor_index: None,
            exhausted: false,
        };
        assert_eq!(select_best(&mut set, |_| unreachable!()).unwrap(), 0);

        // k = 1
        let mut set = CandidateSet {
            candidates: vec![mk_candidate(-1.0, Some(0.1), 4)],
            anchor_index: None,
            exhausted: false,
        };
        assert_eq!(select_best(&mut set, |_| unreachable!()).unwrap(), 0);
    }

    #[test]
    fn select_best_scores_unscored() {
        let mut set = CandidateSet {
            candidates: vec![mk_candidate(-1.0, None, 4), mk_candidate(-2.0, None, 5)],
            anchor_index: None,
            exhausted: false,
        };
        let best = select_best(&mut set, |c| {
            RewardScore::new(if c.text == "c5" { 0.9 } else { 0.1 }, "fn")
        })
        .unwrap();
        assert_eq!(best, 1);
        assert!(set.candidates.iter().all(|c| c.reward.is_some()));
    }

    #[test]
    fn select_best_empty_errors() {
        let mut set = CandidateSet {
            candidates: vec![],
            anchor_index: None,
            exhausted: true,
        };
        assert!(select_best(&mut set, |_| RewardScore::new(0.5, "x")).is_err());
    }
}
