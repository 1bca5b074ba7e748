//! The joint fusion encoder / seq2seq decoder stack: configuration,
//! parameter construction, and the plain (no-grad) forward primitives shared
//! by encoding, teacher-forced scoring, and incremental decoding.
//!
//! Two forward paths exist on purpose: the tape-based path in the training
//! engine differentiates the losses, while the plain path here drives beam
//! search and reward evaluation. Both are built from the same formulas and
//! the unit tests pin them to bitwise-equal outputs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::ImageFeatures;
use crate::nn::graph::{gelu, log_softmax_in_place, softmax_in_place};
use crate::nn::params::{normal_init, ParamSet};
use crate::nn::rng::SeededRng;
use crate::nn::tensor::Tensor;
use crate::vocab::TokenSequence;

pub const LN_EPS: f64 = 1e-5;
pub const MASK_NEG: f64 = -1e30;
const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub ffn_mult: usize,
    pub vocab_size: usize,
    pub max_patches: usize,
    pub max_tokens: usize,
    pub max_gen: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 64,
            n_heads: 2,
            enc_layers: 2,
            dec_layers: 2,
            ffn_mult: 4,
            vocab_size: 0,
            max_patches: 16,
            max_tokens: 256,
            max_gen: 64,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.ffn_mult == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.enc_layers == 0 || self.dec_layers == 0 {
            return Err(Error::Config("need at least one layer per stack".into()));
        }
        if self.vocab_size < 5 {
            return Err(Error::Config(format!(
                "vocab size {} too small (4 specials + content)",
                self.vocab_size
            )));
        }
        if self.max_patches == 0 || self.max_tokens == 0 || self.max_gen == 0 {
            return Err(Error::Config("sequence limits must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamSet,
}

fn insert_linear(ps: &mut ParamSet, rng: &mut SeededRng, name: &str, rows: usize, cols: usize) {
    ps.insert(&format!("{name}.w"), normal_init(rng, rows, cols, INIT_STD))
        .expect("fresh name");
    ps.insert(&format!("{name}.b"), Tensor::zeros(1, cols))
        .expect("fresh name");
}

fn insert_ln(ps: &mut ParamSet, name: &str, dim: usize) {
    ps.insert(
        &format!("{name}.g"),
        Tensor {
            rows: 1,
            cols: dim,
            data: vec![1.0; dim],
        },
    )
    .expect("fresh name");
    ps.insert(&format!("{name}.b"), Tensor::zeros(1, dim))
        .expect("fresh name");
}

fn insert_attn(ps: &mut ParamSet, rng: &mut SeededRng, name: &str, d: usize) {
    for proj in ["wq", "wk", "wv", "wo"] {
        ps.insert(&format!("{name}.{proj}"), normal_init(rng, d, d, INIT_STD))
            .expect("fresh name");
    }
    for bias in ["bq", "bk", "bv", "bo"] {
        ps.insert(&format!("{name}.{bias}"), Tensor::zeros(1, d))
            .expect("fresh name");
    }
}

fn insert_ffn(ps: &mut ParamSet, rng: &mut SeededRng, name: &str, d: usize, mult: usize) {
    insert_linear(ps, rng, &format!("{name}.up"), d, d * mult);
    insert_linear(ps, rng, &format!("{name}.down"), d * mult, d);
}

impl Model {
    /// Fresh model with Gaussian(0, 0.02) weights, zero biases, unit LN
    /// gains. A learned [CLS] embedding sits at a reserved position.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Model> {
        cfg.validate()?;
        let mut rng = SeededRng::new(seed);
        let d = cfg.d_model;
        let mut ps = ParamSet::new();

        ps.insert("enc.cls", normal_init(&mut rng, 1, d, INIT_STD))?;
        insert_linear(&mut ps, &mut rng, "enc.patch", d, d);
        ps.insert("enc.tok", normal_init(&mut rng, cfg.vocab_size, d, INIT_STD))?;
        ps.insert(
            "enc.pos",
            normal_init(&mut rng, 1 + cfg.max_patches + cfg.max_tokens, d, INIT_STD),
        )?;
        for i in 0..cfg.enc_layers {
            insert_ln(&mut ps, &format!("enc.{i}.ln1"), d);
            insert_attn(&mut ps, &mut rng, &format!("enc.{i}.attn"), d);
            insert_ln(&mut ps, &format!("enc.{i}.ln2"), d);
            insert_ffn(&mut ps, &mut rng, &format!("enc.{i}.ffn"), d, cfg.ffn_mult);
        }
        insert_ln(&mut ps, "enc.lnf", d);

        ps.insert("dec.tok", normal_init(&mut rng, cfg.vocab_size, d, INIT_STD))?;
        ps.insert("dec.pos", normal_init(&mut rng, cfg.max_gen, d, INIT_STD))?;
        for i in 0..cfg.dec_layers {
            insert_ln(&mut ps, &format!("dec.{i}.ln1"), d);
            insert_attn(&mut ps, &mut rng, &format!("dec.{i}.self"), d);
            insert_ln(&mut ps, &format!("dec.{i}.ln2"), d);
            insert_attn(&mut ps, &mut rng, &format!("dec.{i}.cross"), d);
            insert_ln(&mut ps, &format!("dec.{i}.ln3"), d);
            insert_ffn(&mut ps, &mut rng, &format!("dec.{i}.ffn"), d, cfg.ffn_mult);
        }
        insert_ln(&mut ps, "dec.lnf", d);
        insert_linear(&mut ps, &mut rng, "dec.out", d, cfg.vocab_size);

        Ok(Model { cfg, params: ps })
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    /// Validate an (image, prompt) pair against this configuration.
    pub fn check_inputs(&self, image: &ImageFeatures, prompt: &TokenSequence) -> Result<()> {
        validate_inputs(&self.cfg, image, prompt)
    }
}

pub fn validate_inputs(
    cfg: &ModelConfig,
    image: &ImageFeatures,
    prompt: &TokenSequence,
) -> Result<()> {
    if image.dim() != cfg.d_model {
        return Err(Error::Shape(format!(
            "image grid dim {} vs model dim {}",
            image.dim(),
            cfg.d_model
        )));
    }
    if image.patches() > cfg.max_patches {
        return Err(Error::Shape(format!(
            "{} patches exceed max {}",
            image.patches(),
            cfg.max_patches
        )));
    }
    if !image.grid.is_finite() {
        return Err(Error::Numeric("non-finite image features".into()));
    }
    if prompt.is_empty() {
        return Err(Error::Shape("empty prompt".into()));
    }
    prompt.validate(cfg.vocab_size, cfg.max_tokens)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Plain forward primitives. These mirror the graph ops exactly; keep the
// arithmetic order in sync with `nn::graph` so the two paths stay
// bitwise-equal.
// ---------------------------------------------------------------------------

pub(crate) fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mut out = x.matmul(w)?;
    for i in 0..out.rows {
        for (o, bv) in out.row_mut(i).iter_mut().zip(b.row(0)) {
            *o += bv;
        }
    }
    Ok(out)
}

pub(crate) fn layer_norm_t(x: &Tensor, g: &Tensor, b: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(x.rows, x.cols);
    for i in 0..x.rows {
        let row = x.row(i);
        let (mean, var) = crate::nn::graph::mean_var(row);
        let inv = 1.0 / (var + LN_EPS).sqrt();
        for j in 0..x.cols {
            out.set(i, j, (row[j] - mean) * inv * g.at(0, j) + b.at(0, j));
        }
    }
    out
}

pub(crate) fn gelu_t(x: &Tensor) -> Tensor {
    let data = x.data.iter().map(|&v| gelu(v)).collect();
    Tensor {
        rows: x.rows,
        cols: x.cols,
        data,
    }
}

pub(crate) fn slice_cols_t(x: &Tensor, start: usize, end: usize) -> Tensor {
    let mut out = Tensor::zeros(x.rows, end - start);
    for i in 0..x.rows {
        out.row_mut(i).copy_from_slice(&x.row(i)[start..end]);
    }
    out
}

pub(crate) fn concat_cols_t(parts: &[Tensor]) -> Tensor {
    let rows = parts[0].rows;
    let cols: usize = parts.iter().map(|p| p.cols).sum();
    let mut out = Tensor::zeros(rows, cols);
    let mut off = 0;
    for p in parts {
        for i in 0..rows {
            out.row_mut(i)[off..off + p.cols].copy_from_slice(p.row(i));
        }
        off += p.cols;
    }
    out
}

pub(crate) fn gather_rows_t(x: &Tensor, idx: &[usize]) -> Tensor {
    let mut out = Tensor::zeros(idx.len(), x.cols);
    for (r, &i) in idx.iter().enumerate() {
        out.row_mut(r).copy_from_slice(x.row(i));
    }
    out
}

/// Multi-head attention over already-projected q/k/v (each seq x d).
/// `allowed(qi, kj)` gates key positions; blocked scores get `MASK_NEG`
/// added, which underflows to an exact zero weight after softmax.
pub(crate) fn attend(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    n_heads: usize,
    allowed: &dyn Fn(usize, usize) -> bool,
) -> Result<Tensor> {
    let dh = q.cols / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let qh = slice_cols_t(q, h * dh, (h + 1) * dh);
        let kh = slice_cols_t(k, h * dh, (h + 1) * dh);
        let vh = slice_cols_t(v, h * dh, (h + 1) * dh);
        let mut scores = qh.matmul(&kh.transpose())?;
        scores.scale_in_place(scale);
        for qi in 0..scores.rows {
            for kj in 0..scores.cols {
                if !allowed(qi, kj) {
                    let cur = scores.at(qi, kj);
                    scores.set(qi, kj, cur + MASK_NEG);
                }
            }
        }
        for qi in 0..scores.rows {
            softmax_in_place(scores.row_mut(qi));
        }
        heads.push(scores.matmul(&vh)?);
    }
    Ok(concat_cols_t(&heads))
}

pub(crate) struct AttnWeights {
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
}

pub(crate) fn attn_weights(ps: &ParamSet, name: &str) -> Result<AttnWeights> {
    Ok(AttnWeights {
        wq: ps.get(&format!("{name}.wq"))?.clone(),
        bq: ps.get(&format!("{name}.bq"))?.clone(),
        wk: ps.get(&format!("{name}.wk"))?.clone(),
        bk: ps.get(&format!("{name}.bk"))?.clone(),
        wv: ps.get(&format!("{name}.wv"))?.clone(),
        bv: ps.get(&format!("{name}.bv"))?.clone(),
        wo: ps.get(&format!("{name}.wo"))?.clone(),
        bo: ps.get(&format!("{name}.bo"))?.clone(),
    })
}

/// Self-attention block over a whole sequence: x + Wo(attend(q,k,v)).
pub(crate) fn self_attention_block(
    x: &Tensor,
    ln_g: &Tensor,
    ln_b: &Tensor,
    w: &AttnWeights,
    n_heads: usize,
    allowed: &dyn Fn(usize, usize) -> bool,
) -> Result<Tensor> {
    let h = layer_norm_t(x, ln_g, ln_b);
    let q = linear(&h, &w.wq, &w.bq)?;
    let k = linear(&h, &w.wk, &w.bk)?;
    let v = linear(&h, &w.wv, &w.bv)?;
    let att = attend(&q, &k, &v, n_heads, allowed)?;
    let proj = linear(&att, &w.wo, &w.bo)?;
    let mut out = x.clone();
    out.add_in_place(&proj)?;
    Ok(out)
}

/// Feed-forward block: x + W2(gelu(W1 ln(x))).
pub(crate) fn ffn_block(
    x: &Tensor,
    ln_g: &Tensor,
    ln_b: &Tensor,
    w1: &Tensor,
    b1: &Tensor,
    w2: &Tensor,
    b2: &Tensor,
) -> Result<Tensor> {
    let h = layer_norm_t(x, ln_g, ln_b);
    let up = linear(&h, w1, b1)?;
    let act = gelu_t(&up);
    let down = linear(&act, w2, b2)?;
    let mut out = x.clone();
    out.add_in_place(&down)?;
    Ok(out)
}

pub(crate) fn log_softmax_row_vec(mut row: Vec<f64>) -> Vec<f64> {
    log_softmax_in_place(&mut row);
    row
}

// ---------------------------------------------------------------------------
// Graph-side blocks (differentiable twins of the helpers above).
// ---------------------------------------------------------------------------

use crate::nn::graph::{Graph, NodeId};

/// Additive attention mask: 0 where the key is attendable, MASK_NEG where
/// blocked. `allowed(qi, kj)` must match the plain path's closure.
pub(crate) fn mask_matrix(
    q_len: usize,
    k_len: usize,
    allowed: &dyn Fn(usize, usize) -> bool,
) -> Tensor {
    let mut m = Tensor::zeros(q_len, k_len);
    for qi in 0..q_len {
        for kj in 0..k_len {
            if !allowed(qi, kj) {
                m.set(qi, kj, MASK_NEG);
            }
        }
    }
    m
}

pub(crate) fn graph_layer_norm(g: &mut Graph, x: NodeId, prefix: &str) -> Result<NodeId> {
    let gain = g.param(&format!("{prefix}.g"))?;
    let bias = g.param(&format!("{prefix}.b"))?;
    g.layer_norm(x, gain, bias, LN_EPS)
}

pub(crate) fn graph_linear(g: &mut Graph, x: NodeId, prefix: &str) -> Result<NodeId> {
    let w = g.param(&format!("{prefix}.w"))?;
    let b = g.param(&format!("{prefix}.b"))?;
    let h = g.matmul(x, w)?;
    g.add_row(h, b)
}

/// Attention with q projected from `x_ln` and k/v from `kv_src`, returning
/// the Wo-projected output (residual is the caller's).
pub(crate) fn graph_attention(
    g: &mut Graph,
    x_ln: NodeId,
    kv_src: NodeId,
    prefix: &str,
    n_heads: usize,
    mask: &Tensor,
) -> Result<NodeId> {
    let d = g.shape(x_ln).1;
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let wq = g.param(&format!("{prefix}.wq"))?;
    let bq = g.param(&format!("{prefix}.bq"))?;
    let wk = g.param(&format!("{prefix}.wk"))?;
    let bk = g.param(&format!("{prefix}.bk"))?;
    let wv = g.param(&format!("{prefix}.wv"))?;
    let bv = g.param(&format!("{prefix}.bv"))?;

    let q = g.matmul(x_ln, wq)?;
    let q = g.add_row(q, bq)?;
    let k = g.matmul(kv_src, wk)?;
    let k = g.add_row(k, bk)?;
    let v = g.matmul(kv_src, wv)?;
    let v = g.add_row(v, bv)?;

    let mask_node = g.input(mask.clone());
    let mut heads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let qh = g.slice_cols(q, h * dh, (h + 1) * dh)?;
        let kh = g.slice_cols(k, h * dh, (h + 1) * dh)?;
        let vh = g.slice_cols(v, h * dh, (h + 1) * dh)?;
        let kt = g.transpose(kh);
        let scores = g.matmul(qh, kt)?;
        let scores = g.scale(scores, scale);
        let scores = g.add(scores, mask_node)?;
        let attn = g.softmax_rows(scores);
        heads.push(g.matmul(attn, vh)?);
    }
    let cat = g.concat_cols(&heads)?;
    let wo = g.param(&format!("{prefix}.wo"))?;
    let bo = g.param(&format!("{prefix}.bo"))?;
    let out = g.matmul(cat, wo)?;
    g.add_row(out, bo)
}

pub(crate) fn graph_ffn(g: &mut Graph, x_ln: NodeId, prefix: &str) -> Result<NodeId> {
    let up = graph_linear(g, x_ln, &format!("{prefix}.up"))?;
    let act = g.gelu(up);
    graph_linear(g, act, &format!("{prefix}.down"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            d_model: 8,
            n_heads: 2,
            enc_layers: 1,
            dec_layers: 1,
            ffn_mult: 2,
            vocab_size: 10,
            max_patches: 4,
            max_tokens: 12,
            max_gen: 8,
        }
    }

    #[test]
    fn config_validation() {
        assert!(tiny_cfg().validate().is_ok());
        let mut bad = tiny_cfg();
        bad.n_heads = 3;
        assert!(bad.validate().is_err());
        let mut bad = tiny_cfg();
        bad.vocab_size = 4;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn init_is_seeded() {
        let a = Model::new(tiny_cfg(), 5).unwrap();
        let b = Model::new(tiny_cfg(), 5).unwrap();
        assert_eq!(a.params.get("enc.tok").unwrap(), b.params.get("enc.tok").unwrap());
        let c = Model::new(tiny_cfg(), 6).unwrap();
        assert_ne!(a.params.get("enc.tok").unwrap(), c.params.get("enc.tok").unwrap());
    }

    #[test]
    fn param_count_scales() {
        let m = Model::new(tiny_cfg(), 1).unwrap();
        assert!(m.num_params() > 0);
        let mut big = tiny_cfg();
        big.d_model = 16;
        let m2 = Model::new(big, 1).unwrap();
        assert!(m2.num_params() > m.num_params());
    }

    #[test]
    fn attend_masks_exactly() {
        // With the second key blocked for the first query, attention from
        // query 0 must be identical to attending over key 0 alone.
        let q = Tensor::from_vec(1, 4, vec![0.3, -0.1, 0.7, 0.2]).unwrap();
        let k = Tensor::from_vec(2, 4, vec![0.5, 0.1, -0.2, 0.4, 1.0, -1.0, 0.3, 0.9]).unwrap();
        let v = Tensor::from_vec(2, 4, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]).unwrap();
        let masked = attend(&q, &k, &v, 2, &|_, kj| kj == 0).unwrap();
        let k0 = gather_rows_t(&k, &[0]);
        let v0 = gather_rows_t(&v, &[0]);
        let only = attend(&q, &k0, &v0, 2, &|_, _| true).unwrap();
        assert_eq!(masked.data, only.data);
    }
}
