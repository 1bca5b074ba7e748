//! Fusion encoding: a small joint transformer over [CLS] + image patches +
//! prompt tokens. The [CLS] output is the global fused vector z; outputs at
//! the text positions are the token-level embeddings handed to the decoder.

use crate::error::{Error, Result};
use crate::features::ImageFeatures;
use crate::model::{
    self, ffn_block, gather_rows_t, layer_norm_t, linear, mask_matrix, self_attention_block,
    Model,
};
use crate::nn::graph::{Graph, NodeId};
use crate::nn::tensor::Tensor;
use crate::vocab::{TokenSequence, PAD};

/// The fused multimodal representation: a global [CLS] vector plus one
/// embedding per prompt token (PAD rows included, masked from attention).
#[derive(Debug, Clone)]
pub struct FusedRepresentation {
    pub cls: Tensor,
    pub token_embeddings: Tensor,
    /// true where the prompt token is real (not PAD).
    pub pad_mask: Vec<bool>,
}

/// Context the decoder cross-attends over: fused states plus a key mask.
#[derive(Debug, Clone)]
pub struct DecoderContext {
    pub states: Tensor,
    pub mask: Vec<bool>,
}

/// Joint position indices: [CLS] at 0, patch p at 1 + p, text token t at
/// 1 + max_patches + t.
fn joint_positions(cfg: &model::ModelConfig, patches: usize, text_len: usize) -> Vec<usize> {
    let mut pos = Vec::with_capacity(1 + patches + text_len);
    pos.push(0);
    pos.extend(1..=patches);
    pos.extend((0..text_len).map(|t| 1 + cfg.max_patches + t));
    pos
}

fn key_mask(patches: usize, prompt: &TokenSequence) -> Vec<bool> {
    let mut allowed = vec![true; 1 + patches];
    allowed.extend(prompt.ids.iter().map(|&id| id != PAD));
    allowed
}

impl Model {
    /// Plain fused encoding. Deterministic for fixed inputs and parameters.
    pub fn encode(
        &self,
        image: &ImageFeatures,
        prompt: &TokenSequence,
    ) -> Result<FusedRepresentation> {
        self.check_inputs(image, prompt)?;
        let cfg = &self.cfg;
        let p = image.patches();
        let l = prompt.len();
        let ids: Vec<usize> = prompt.ids.iter().map(|&id| id as usize).collect();

        let cls = self.params.get("enc.cls")?.clone();
        let patch_rows = linear(
            &image.grid,
            self.params.get("enc.patch.w")?,
            self.params.get("enc.patch.b")?,
        )?;
        let tok_rows = gather_rows_t(self.params.get("enc.tok")?, &ids);

        let mut data = Vec::with_capacity((1 + p + l) * cfg.d_model);
        data.extend_from_slice(&cls.data);
        data.extend_from_slice(&patch_rows.data);
        data.extend_from_slice(&tok_rows.data);
        let mut x = Tensor {
            rows: 1 + p + l,
            cols: cfg.d_model,
            data,
        };
        let pos_rows = gather_rows_t(self.params.get("enc.pos")?, &joint_positions(cfg, p, l));
        x.add_in_place(&pos_rows)?;

        let allowed_keys = key_mask(p, prompt);
        let allowed = |_qi: usize, kj: usize| allowed_keys[kj];
        for i in 0..cfg.enc_layers {
            let attn = model::attn_weights(&self.params, &format!("enc.{i}.attn"))?;
            x = self_attention_block(
                &x,
                self.params.get(&format!("enc.{i}.ln1.g"))?,
                self.params.get(&format!("enc.{i}.ln1.b"))?,
                &attn,
                cfg.n_heads,
                &allowed,
            )?;
            x = ffn_block(
                &x,
                self.params.get(&format!("enc.{i}.ln2.g"))?,
                self.params.get(&format!("enc.{i}.ln2.b"))?,
                self.params.get(&format!("enc.{i}.ffn.up.w"))?,
                self.params.get(&format!("enc.{i}.ffn.up.b"))?,
                self.params.get(&format!("enc.{i}.ffn.down.w"))?,
                self.params.get(&format!("enc.{i}.ffn.down.b"))?,
            )?;
        }
        let x = layer_norm_t(
            &x,
            self.params.get("enc.lnf.g")?,
            self.params.get("enc.lnf.b")?,
        );

        let cls_out = gather_rows_t(&x, &[0]);
        let toks: Vec<usize> = (1 + p..1 + p + l).collect();
        let tok_out = gather_rows_t(&x, &toks);
        if !cls_out.is_finite() || !tok_out.is_finite() {
            return Err(Error::Numeric("non-finite encoder output".into()));
        }
        Ok(FusedRepresentation {
            cls: cls_out,
            token_embeddings: tok_out,
            pad_mask: prompt.ids.iter().map(|&id| id != PAD).collect(),
        })
    }

    /// Tape twin of [`Model::encode`]; returns ([CLS] node, token rows node).
    /// Parameters are read from the graph's own set, so the same builder
    /// serves finite-difference checks over perturbed parameters.
    pub fn encode_graph(
        &self,
        g: &mut Graph,
        image: &ImageFeatures,
        prompt: &TokenSequence,
    ) -> Result<(NodeId, NodeId)> {
        encode_graph(g, &self.cfg, image, prompt)
    }
}

/// Graph-side fused encoding over whatever parameter set the graph borrows.
pub fn encode_graph(
    g: &mut Graph,
    cfg: &model::ModelConfig,
    image: &ImageFeatures,
    prompt: &TokenSequence,
) -> Result<(NodeId, NodeId)> {
    {
        model::validate_inputs(cfg, image, prompt)?;
        let p = image.patches();
        let l = prompt.len();
        let ids: Vec<usize> = prompt.ids.iter().map(|&id| id as usize).collect();

        let cls = g.param("enc.cls")?;
        let grid = g.input(image.grid.clone());
        let patch_w = g.param("enc.patch.w")?;
        let patch_b = g.param("enc.patch.b")?;
        let patches = g.matmul(grid, patch_w)?;
        let patches = g.add_row(patches, patch_b)?;
        let tok_table = g.param("enc.tok")?;
        let toks = g.gather_rows(tok_table, &ids)?;

        let joint = g.concat_rows(&[cls, patches, toks])?;
        let pos_table = g.param("enc.pos")?;
        let pos = g.gather_rows(pos_table, &joint_positions(cfg, p, l))?;
        let mut x = g.add(joint, pos)?;

        let allowed_keys = key_mask(p, prompt);
        let mask = mask_matrix(1 + p + l, 1 + p + l, &|_qi, kj| allowed_keys[kj]);
        for i in 0..cfg.enc_layers {
            let h = model::graph_layer_norm(g, x, &format!("enc.{i}.ln1"))?;
            let attn = model::graph_attention(g, h, h, &format!("enc.{i}.attn"), cfg.n_heads, &mask)?;
            x = g.add(x, attn)?;
            let h = model::graph_layer_norm(g, x, &format!("enc.{i}.ln2"))?;
            let ffn = model::graph_ffn(g, h, &format!("enc.{i}.ffn"))?;
            x = g.add(x, ffn)?;
        }
        let x = model::graph_layer_norm(g, x, "enc.lnf")?;

        let cls_out = g.gather_rows(x, &[0])?;
        let tok_idx: Vec<usize> = (1 + p..1 + p + l).collect();
        let tok_out = g.gather_rows(x, &tok_idx)?;
        Ok((cls_out, tok_out))
    }
}

/// Decoder context assembly: with `use_cls` the [CLS] vector is prepended to
/// the token embeddings (length L+1), otherwise the tokens stand alone.
pub fn assemble_decoder_context(fused: &FusedRepresentation, use_cls: bool) -> DecoderContext {
    if use_cls {
        let mut data =
            Vec::with_capacity(fused.cls.data.len() + fused.token_embeddings.data.len());
        data.extend_from_slice(&fused.cls.data);
        data.extend_from_slice(&fused.token_embeddings.data);
        let states = Tensor {
            rows: 1 + fused.token_embeddings.rows,
            cols: fused.token_embeddings.cols,
            data,
        };
        let mut mask = vec![true];
        mask.extend(&fused.pad_mask);
        DecoderContext { states, mask }
    } else {
        DecoderContext {
            states: fused.token_embeddings.clone(),
            mask: fused.pad_mask.clone(),
        }
    }
}

/// Tape twin of [`assemble_decoder_context`].
pub fn assemble_decoder_context_graph(
    g: &mut Graph,
    cls: NodeId,
    token_embeddings: NodeId,
    pad_mask: &[bool],
    use_cls: bool,
) -> Result<(NodeId, Vec<bool>)> {
    if use_cls {
        let states = g.concat_rows(&[cls, token_embeddings])?;
        let mut mask = vec![true];
        mask.extend_from_slice(pad_mask);
        Ok((states, mask))
    } else {
        Ok((token_embeddings, pad_mask.to_vec()))
    }
}
