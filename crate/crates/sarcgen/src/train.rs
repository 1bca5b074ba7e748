//! Training engine: teacher-forced cross-entropy, anchor/negative
//! contrastive loss, a reward-minus-KL policy term against an EMA reference
//! policy, the scheduled combination of the three, Adam with warmup, and
//! checkpointing.
//!
//! The combined objective is
//!
//! ```text
//! L = L_ce + lambda_ppo(step) * L_ppo + lambda_cl * L_cl
//! ```
//!
//! where `L_ppo` maximizes reward minus a beta-weighted KL to the reference
//! policy. The reward has no gradient path, so the optimized term is the
//! standard policy-gradient surrogate: the detached advantage
//! `(r - beta*kl)` multiplies the anchor's live log-likelihood, and the
//! beta-weighted differentiable KL is added on top. Each optimizer step
//! first freezes everything non-differentiable (candidates, rewards,
//! reference log-probabilities, the detached KL coefficient) into a
//! [`StepPlan`]; the tape is then built from the plan alone, which is what
//! makes the finite-difference acceptance check meaningful.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::Sample;
use crate::encoder::{
    assemble_decoder_context, assemble_decoder_context_graph, encode_graph,
};
use crate::error::{Error, Result};
use crate::features::{resolve_features, ImageFeatures};
use crate::generator::{
    candidate_nodes_graph, decoder_forward_graph, generate_topk, select_best, sequence_logprob,
    DecodeMode,
};
use crate::model::{Model, ModelConfig};
use crate::nn::graph::{Graph, NodeId};
use crate::nn::params::{Adam, ParamSet};
use crate::nn::rng::SeededRng;
use crate::nn::tensor::cosine;
use crate::prompt::{build_prompt, PromptConfig};
use crate::reward::{ScoreRequest, Scorer};
use crate::vocab::{TokenSequence, Vocabulary, BOS, EOS, PAD};

// ---------------------------------------------------------------------------
// Loss weights and schedules
// ---------------------------------------------------------------------------

/// Clamped linear ramp for the policy-loss weight. `end_step == 0` means
/// "resolve to the full run length" at training start.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PpoSchedule {
    pub start_value: f64,
    pub end_value: f64,
    pub start_step: usize,
    pub end_step: usize,
}

impl Default for PpoSchedule {
    fn default() -> Self {
        PpoSchedule {
            start_value: 0.0,
            end_value: 1.0,
            start_step: 0,
            end_step: 0,
        }
    }
}

impl PpoSchedule {
    pub fn constant(value: f64) -> Self {
        PpoSchedule {
            start_value: value,
            end_value: value,
            start_step: 0,
            end_step: 1,
        }
    }

    pub fn is_identically_zero(&self) -> bool {
        self.start_value == 0.0 && self.end_value == 0.0
    }

    /// Fill in `end_step == 0` with the run length.
    pub fn resolved(mut self, total_steps: usize) -> Self {
        if self.end_step == 0 {
            self.end_step = total_steps.max(self.start_step + 1);
        }
        self
    }
}

/// Weight at `step`: start value before the ramp, end value after, linear
/// interpolation in between.
pub fn lambda_ppo_at(step: usize, schedule: &PpoSchedule) -> f64 {
    if step <= schedule.start_step || schedule.end_step <= schedule.start_step {
        if schedule.end_step <= schedule.start_step && step >= schedule.end_step {
            return schedule.end_value;
        }
        return schedule.start_value;
    }
    if step >= schedule.end_step {
        return schedule.end_value;
    }
    let span = (schedule.end_step - schedule.start_step) as f64;
    let frac = (step - schedule.start_step) as f64 / span;
    schedule.start_value + frac * (schedule.end_value - schedule.start_value)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_cl: f64,
    pub beta: f64,
    pub tau: f64,
    pub lambda_ppo: PpoSchedule,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_cl: 0.5,
            beta: 0.1,
            tau: 0.07,
            lambda_ppo: PpoSchedule::default(),
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_cl < 0.0 || self.beta < 0.0 {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if self.tau <= 0.0 {
            return Err(Error::Config("tau must be positive".into()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Loss primitives (value forms)
// ---------------------------------------------------------------------------

/// Anchor-vs-negatives contrastive loss with the positive identical to the
/// anchor: -log[ exp(sim(g,g+)/tau) / sum_j exp(sim(g,g_j-)/tau) ]. Since
/// g+ = g the numerator is the constant exp(1/tau) and the value can go
/// negative; gradients act only through the negatives. Setting
/// `include_positive` adds the positive term to the denominator
/// (InfoNCE-style correction, off by default).
pub fn contrastive_loss(
    anchor: &[f64],
    negatives: &[Vec<f64>],
    tau: f64,
    include_positive: bool,
) -> Result<f64> {
    if negatives.is_empty() {
        return Err(Error::Numeric(
            "contrastive loss needs at least one negative (N >= 2)".into(),
        ));
    }
    if tau <= 0.0 {
        return Err(Error::Config("tau must be positive".into()));
    }
    let mut sims: Vec<f64> = negatives
        .iter()
        .map(|n| cosine(anchor, n))
        .collect::<Result<_>>()?;
    if include_positive {
        sims.push(1.0);
    }
    let scaled: Vec<f64> = sims.iter().map(|s| s / tau).collect();
    let max = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + scaled.iter().map(|s| (s - max).exp()).sum::<f64>().ln();
    Ok(lse - 1.0 / tau)
}

/// Tape twin of [`contrastive_loss`] over unit-normalized embedding nodes.
pub fn contrastive_loss_graph(
    g: &mut Graph,
    anchor: NodeId,
    negatives: &[NodeId],
    tau: f64,
    include_positive: bool,
) -> Result<NodeId> {
    if negatives.is_empty() {
        return Err(Error::Numeric(
            "contrastive loss needs at least one negative (N >= 2)".into(),
        ));
    }
    if tau <= 0.0 {
        return Err(Error::Config("tau must be positive".into()));
    }
    let mut sims = Vec::with_capacity(negatives.len() + 1);
    for &neg in negatives {
        let prod = g.mul(anchor, neg)?;
        sims.push(g.sum(prod));
    }
    if include_positive {
        sims.push(g.scalar_input(1.0));
    }
    let row = g.concat_cols(&sims)?;
    let scaled = g.scale(row, 1.0 / tau);
    let lse = g.logsumexp_row(scaled)?;
    Ok(g.add_scalar(lse, -1.0 / tau))
}

/// EMA update theta_ref = m * theta_ref + (1 - m) * theta_live, applied
/// once per optimizer step after the parameter update.
pub fn ema_update(reference: &mut ParamSet, live: &ParamSet, momentum: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&momentum) {
        return Err(Error::Config(format!("momentum {momentum} outside [0,1]")));
    }
    if !reference.congruent(live) {
        return Err(Error::Shape(
            "reference parameters not congruent with live parameters".into(),
        ));
    }
    for idx in 0..reference.len() {
        let live_t = live.tensor(idx);
        let ref_t = reference.tensor_mut(idx);
        for (r, l) in ref_t.data.iter_mut().zip(live_t.data.iter()) {
            *r = momentum * *r + (1.0 - momentum) * l;
        }
    }
    Ok(())
}

/// EMA shadow of the generator, never updated by gradients.
#[derive(Debug, Clone)]
pub struct ReferencePolicy {
    pub model: Model,
    pub momentum: f64,
}

impl ReferencePolicy {
    /// Initialized from the live policy's parameters.
    pub fn from_live(live: &Model, momentum: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&momentum) {
            return Err(Error::Config(format!("momentum {momentum} outside [0,1]")));
        }
        Ok(ReferencePolicy {
            model: Model {
                cfg: live.cfg.clone(),
                params: live.params.clone(),
            },
            momentum,
        })
    }

    pub fn update(&mut self, live: &ParamSet) -> Result<()> {
        ema_update(&mut self.model.params, live, self.momentum)
    }
}

/// Sequence log-probability under the live policy minus the reference
/// policy, teacher-forced on the same tokens. Each policy encodes the
/// sample with its own parameters.
pub fn kl_term(
    live: &Model,
    reference: &Model,
    image: &ImageFeatures,
    prompt: &TokenSequence,
    use_cls: bool,
    tokens: &[u32],
) -> Result<f64> {
    let ctx_live = assemble_decoder_context(&live.encode(image, prompt)?, use_cls);
    let ctx_ref = assemble_decoder_context(&reference.encode(image, prompt)?, use_cls);
    let lp_live = sequence_logprob(live, &ctx_live, tokens)?;
    let lp_ref = sequence_logprob(reference, &ctx_ref, tokens)?;
    Ok(lp_live - lp_ref)
}

/// The reward-minus-KL objective stated as a loss: -(reward - beta * kl).
pub fn ppo_loss(reward: f64, kl: f64, beta: f64) -> f64 {
    -(reward - beta * kl)
}

/// Differentiable surrogate: -(coef) * lp + beta * (lp - lp_ref), where
/// `coef = reward - beta * kl_detached` is precomputed and constant.
pub fn ppo_surrogate_graph(
    g: &mut Graph,
    lp: NodeId,
    lp_ref: f64,
    coef: f64,
    beta: f64,
) -> Result<NodeId> {
    let reward_part = g.scale(lp, -coef);
    let shifted = g.add_scalar(lp, -lp_ref);
    let kl_part = g.scale(shifted, beta);
    g.add(reward_part, kl_part)
}

/// Teacher-forced cross-entropy of the gold tokens given the fused context;
/// PAD positions are masked out of the sum.
pub fn ce_loss_graph(
    g: &mut Graph,
    cfg: &ModelConfig,
    ctx: NodeId,
    ctx_mask: &[bool],
    gold: &[u32],
) -> Result<NodeId> {
    let effective: Vec<u32> = gold.iter().copied().filter(|&t| t != PAD).collect();
    if effective.is_empty() {
        return Err(Error::Data("empty cross-entropy target".into()));
    }
    let mut input = Vec::with_capacity(gold.len());
    input.push(BOS);
    input.extend_from_slice(&gold[..gold.len() - 1]);
    let (logits, _hidden) = decoder_forward_graph(g, cfg, ctx, ctx_mask, &input)?;
    let logp = g.log_softmax_rows(logits);
    let picks: Vec<(usize, usize)> = gold
        .iter()
        .enumerate()
        .filter(|(_, &tok)| tok != PAD)
        .map(|(t, &tok)| (t, tok as usize))
        .collect();
    let picked = g.pick_scalars(logp, &picks)?;
    let total = g.sum(picked);
    Ok(g.scale(total, -1.0))
}

// ---------------------------------------------------------------------------
// Step plan: everything non-differentiable, frozen before the tape is built
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct PlannedPolicyTerm {
    pub candidate: usize,
    /// Detached advantage r - beta * kl.
    pub coef: f64,
    /// Reference log-probability of the candidate (constant).
    pub lp_ref: f64,
}

#[derive(Debug, Clone)]
pub struct PlannedSample {
    pub image: ImageFeatures,
    pub prompt: TokenSequence,
    pub gold: Vec<u32>,
    pub candidates: Vec<Vec<u32>>,
    pub anchor: usize,
    pub policy_terms: Vec<PlannedPolicyTerm>,
}

#[derive(Debug, Clone)]
pub struct StepPlan {
    pub samples: Vec<PlannedSample>,
    pub lambda_ppo: f64,
    pub lambda_cl: f64,
    pub beta: f64,
    pub tau: f64,
    pub use_cls: bool,
    pub include_positive: bool,
}

pub struct LossNodes {
    pub total: NodeId,
    pub ce: NodeId,
    pub cl: NodeId,
    pub ppo: NodeId,
}

fn mean_node(g: &mut Graph, terms: &[NodeId]) -> Result<NodeId> {
    if terms.is_empty() {
        return Ok(g.scalar_input(0.0));
    }
    let row = g.concat_cols(terms)?;
    let total = g.sum(row);
    Ok(g.scale(total, 1.0 / terms.len() as f64))
}

/// Build the full step loss from a frozen plan over whatever parameters the
/// graph borrows. Every float that the analytic gradient treats as constant
/// is already baked into the plan.
pub fn build_step_loss(g: &mut Graph, cfg: &ModelConfig, plan: &StepPlan) -> Result<LossNodes> {
    if plan.samples.is_empty() {
        return Err(Error::Data("empty training batch".into()));
    }
    let mut ce_terms = Vec::new();
    let mut cl_terms = Vec::new();
    let mut ppo_terms = Vec::new();
    for sample in &plan.samples {
        let (cls, toks) = encode_graph(g, cfg, &sample.image, &sample.prompt)?;
        let pad_mask: Vec<bool> = sample.prompt.ids.iter().map(|&id| id != PAD).collect();
        let (ctx, ctx_mask) =
            assemble_decoder_context_graph(g, cls, toks, &pad_mask, plan.use_cls)?;
        ce_terms.push(ce_loss_graph(g, cfg, ctx, &ctx_mask, &sample.gold)?);

        if sample.candidates.is_empty() {
            continue;
        }
        let mut lp_nodes = Vec::with_capacity(sample.candidates.len());
        let mut emb_nodes = Vec::with_capacity(sample.candidates.len());
        for tokens in &sample.candidates {
            let (lp, emb) = candidate_nodes_graph(g, cfg, ctx, &ctx_mask, tokens)?;
            lp_nodes.push(lp);
            emb_nodes.push(emb);
        }
        if plan.lambda_cl > 0.0 && sample.candidates.len() >= 2 {
            let negatives: Vec<NodeId> = emb_nodes
                .iter()
                .enumerate()
                .filter(|(i, _)| *i != sample.anchor)
                .map(|(_, &n)| n)
                .collect();
            cl_terms.push(contrastive_loss_graph(
                g,
                emb_nodes[sample.anchor],
                &negatives,
                plan.tau,
                plan.include_positive,
            )?);
        }
        for term in &sample.policy_terms {
            ppo_terms.push(ppo_surrogate_graph(
                g,
                lp_nodes[term.candidate],
                term.lp_ref,
                term.coef,
                plan.beta,
            )?);
        }
    }
    let ce = mean_node(g, &ce_terms)?;
    let cl = mean_node(g, &cl_terms)?;
    let ppo = mean_node(g, &ppo_terms)?;
    let ppo_scaled = g.scale(ppo, plan.lambda_ppo);
    let cl_scaled = g.scale(cl, plan.lambda_cl);
    let partial = g.add(ce, ppo_scaled)?;
    let total = g.add(partial, cl_scaled)?;
    Ok(LossNodes { total, ce, cl, ppo })
}

/// Loss value at a parameter point, for finite-difference verification.
pub fn step_loss_value(params: &ParamSet, cfg: &ModelConfig, plan: &StepPlan) -> Result<f64> {
    let mut g = Graph::new(params);
    let nodes = build_step_loss(&mut g, cfg, plan)?;
    Ok(g.value(nodes.total).at(0, 0))
}

// ---------------------------------------------------------------------------
// Training configuration and the trainer
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    pub k: usize,
    pub max_tokens: usize,
    /// Length cap for generated candidates and gold targets.
    pub gen_max_len: usize,
    pub seed: u64,
    /// EMA momentum m of the reference policy.
    pub momentum: f64,
    pub use_cls: bool,
    /// Apply the policy term to every candidate instead of the anchor only.
    pub ppo_on_all_candidates: bool,
    /// InfoNCE-style denominator (include the positive term).
    pub infonce_denominator: bool,
    pub weights: LossWeights,
    pub prompt: PromptConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 16,
            lr: 1e-4,
            warmup_steps: 100,
            k: 5,
            max_tokens: 256,
            gen_max_len: 32,
            seed: 0,
            momentum: 0.99,
            use_cls: true,
            ppo_on_all_candidates: false,
            infonce_denominator: false,
            weights: LossWeights::default(),
            prompt: PromptConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.k == 0 {
            return Err(Error::Config(
                "epochs, batch_size, and k must be positive".into(),
            ));
        }
        if self.lr <= 0.0 {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if self.max_tokens == 0 || self.gen_max_len == 0 {
            return Err(Error::Config("token limits must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum {} outside [0,1]",
                self.momentum
            )));
        }
        self.weights.validate()?;
        if self.weights.lambda_cl > 0.0 && self.k < 2 {
            return Err(Error::Config(
                "contrastive loss needs k >= 2 candidates".into(),
            ));
        }
        Ok(())
    }
}

/// One logged optimizer step. `total` equals
/// `ce + lambda_ppo * ppo + lambda_cl * cl` by construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRecord {
    pub step: usize,
    pub ce: f64,
    pub cl: f64,
    pub ppo: f64,
    pub total: f64,
    pub mean_reward: f64,
    pub mean_kl: f64,
    pub lambda_ppo: f64,
    pub lr: f64,
}

pub struct Trainer {
    pub cfg: TrainConfig,
    model: Model,
    vocab: Vocabulary,
    reference: ReferencePolicy,
    opt: Adam,
    rng: SeededRng,
    step: usize,
    schedule: PpoSchedule,
    features_dir: Option<std::path::PathBuf>,
    synthetic_patches: usize,
}

impl Trainer {
    pub fn new(model: Model, vocab: Vocabulary, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if vocab.len() != model.cfg.vocab_size {
            return Err(Error::Shape(format!(
                "vocab size {} vs model vocab {}",
                vocab.len(),
                model.cfg.vocab_size
            )));
        }
        let reference = ReferencePolicy::from_live(&model, cfg.momentum)?;
        let opt = Adam::new(&model.params, cfg.lr, cfg.warmup_steps);
        let rng = SeededRng::new(cfg.seed);
        let schedule = cfg.weights.lambda_ppo;
        Ok(Trainer {
            cfg,
            model,
            vocab,
            reference,
            opt,
            rng,
            step: 0,
            schedule,
            features_dir: None,
            synthetic_patches: 4,
        })
    }

    pub fn with_features_dir(mut self, dir: Option<std::path::PathBuf>) -> Self {
        self.features_dir = dir;
        self
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn reference(&self) -> &ReferencePolicy {
        &self.reference
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    pub fn total_steps(&self, n_samples: usize) -> usize {
        let per_epoch = n_samples.div_ceil(self.cfg.batch_size);
        per_epoch * self.cfg.epochs
    }

    /// Resolve an auto (end_step == 0) schedule against the run length.
    pub fn resolve_schedule(&mut self, total_steps: usize) {
        self.schedule = self.cfg.weights.lambda_ppo.resolved(total_steps);
    }

    pub fn schedule(&self) -> &PpoSchedule {
        &self.schedule
    }

    fn gen_cap(&self) -> usize {
        self.cfg
            .gen_max_len
            .min(self.model.cfg.max_gen.saturating_sub(1))
            .max(1)
    }

    fn prompt_cap(&self) -> usize {
        self.cfg.max_tokens.min(self.model.cfg.max_tokens)
    }

    fn sample_inputs(&self, sample: &Sample) -> Result<(ImageFeatures, TokenSequence)> {
        let prompt = build_prompt(sample, &self.cfg.prompt)?;
        let ids = self.vocab.encode(&prompt.text, self.prompt_cap());
        let image = resolve_features(
            &sample.image_ref,
            self.features_dir.as_deref(),
            self.synthetic_patches.min(self.model.cfg.max_patches),
            self.model.cfg.d_model,
        )?;
        Ok((image, ids))
    }

    fn gold_tokens(&self, sample: &Sample) -> Vec<u32> {
        let mut gold = self.vocab.encode(&sample.text, self.gen_cap()).ids;
        gold.push(EOS);
        gold
    }

    /// Freeze one batch into a plan: encode, decode top-k, score, pick
    /// anchors, and precompute every constant the surrogate needs.
    pub fn plan_step(
        &self,
        batch: &[Sample],
        scorer: &mut dyn Scorer,
    ) -> Result<(StepPlan, f64, f64)> {
        if batch.is_empty() {
            return Err(Error::Data("empty training batch".into()));
        }
        let lambda_ppo = lambda_ppo_at(self.step, &self.schedule);
        let lambda_cl = self.cfg.weights.lambda_cl;
        let beta = self.cfg.weights.beta;
        let needs_candidates = lambda_cl > 0.0 || !self.schedule.is_identically_zero();

        let mut planned: Vec<PlannedSample> = Vec::with_capacity(batch.len());
        let mut sets = Vec::with_capacity(batch.len());
        for sample in batch {
            let (image, prompt) = self.sample_inputs(sample)?;
            let gold = self.gold_tokens(sample);
            let set = if needs_candidates {
                let fused = self.model.encode(&image, &prompt)?;
                let ctx = assemble_decoder_context(&fused, self.cfg.use_cls);
                Some(generate_topk(
                    &self.model,
                    &self.vocab,
                    &ctx,
                    self.cfg.k,
                    self.gen_cap(),
                    DecodeMode::Beam,
                )?)
            } else {
                None
            };
            sets.push((sample, set));
            planned.push(PlannedSample {
                image,
                prompt,
                gold,
                candidates: Vec::new(),
                anchor: 0,
                policy_terms: Vec::new(),
            });
        }

        // one scorer batch over every candidate in the step; degenerate
        // empty-text candidates (specials only) get reward 0 directly
        let mut flat: Vec<(usize, usize, String, String)> = Vec::new();
        for (si, (sample, set)) in sets.iter_mut().enumerate() {
            if let Some(set) = set {
                for (ci, cand) in set.candidates.iter_mut().enumerate() {
                    if cand.text.trim().is_empty() {
                        cand.reward =
                            Some(crate::reward::RewardScore::new(0.0, "degenerate-empty")?);
                    } else {
                        flat.push((si, ci, format!("{}#{ci}", sample.id), cand.text.clone()));
                    }
                }
            }
        }
        if !flat.is_empty() {
            let requests: Vec<ScoreRequest> = flat
                .iter()
                .map(|(si, _, id, text)| ScoreRequest {
                    id,
                    text,
                    image_ref: Some(&sets[*si].0.image_ref),
                })
                .collect();
            let values = scorer.score_batch(&requests).map_err(|e| {
                eprintln!("step {}: scorer failure aborts the step: {e}", self.step);
                e
            })?;
            for ((si, ci, _, _), value) in flat.iter().zip(values) {
                let cand = &mut sets[*si].1.as_mut().expect("set exists").candidates[*ci];
                cand.reward = Some(crate::reward::RewardScore::new(value, scorer.id())?);
            }
        }

        let mut reward_sum = 0.0;
        let mut kl_sum = 0.0;
        let mut anchors = 0usize;
        for (si, (_sample, set)) in sets.into_iter().enumerate() {
            let Some(mut set) = set else { continue };
            let anchor = select_best(&mut set, |_| {
                Err(Error::Scorer("candidate left unscored".into()))
            })?;
            let plan = &mut planned[si];
            plan.anchor = anchor;
            plan.candidates = set.candidates.iter().map(|c| c.tokens.ids.clone()).collect();

            let participating: Vec<usize> = if self.cfg.ppo_on_all_candidates {
                (0..set.candidates.len()).collect()
            } else {
                vec![anchor]
            };
            if lambda_ppo != 0.0 || !self.schedule.is_identically_zero() {
                let ctx_live = assemble_decoder_context(
                    &self.model.encode(&plan.image, &plan.prompt)?,
                    self.cfg.use_cls,
                );
                let ctx_ref = assemble_decoder_context(
                    &self.reference.model.encode(&plan.image, &plan.prompt)?,
                    self.cfg.use_cls,
                );
                for ci in participating {
                    let tokens = &plan.candidates[ci];
                    let lp_live = sequence_logprob(&self.model, &ctx_live, tokens)?;
                    let lp_ref = sequence_logprob(&self.reference.model, &ctx_ref, tokens)?;
                    let kl = lp_live - lp_ref;
                    let reward = set.candidates[ci].reward.as_ref().expect("scored").value;
                    plan.policy_terms.push(PlannedPolicyTerm {
                        candidate: ci,
                        coef: reward - beta * kl,
                        lp_ref,
                    });
                    if ci == anchor {
                        kl_sum += kl;
                    }
                }
            }
            reward_sum += set.candidates[anchor].reward.as_ref().expect("scored").value;
            anchors += 1;
        }

        let plan = StepPlan {
            samples: planned,
            lambda_ppo,
            lambda_cl,
            beta,
            tau: self.cfg.weights.tau,
            use_cls: self.cfg.use_cls,
            include_positive: self.cfg.infonce_denominator,
        };
        let mean_reward = if anchors > 0 {
            reward_sum / anchors as f64
        } else {
            0.0
        };
        let mean_kl = if anchors > 0 { kl_sum / anchors as f64 } else { 0.0 };
        Ok((plan, mean_reward, mean_kl))
    }

    /// One optimizer step over a batch: plan, build the tape, backward,
    /// Adam, EMA. A non-finite loss aborts the run.
    pub fn train_step(
        &mut self,
        batch: &[Sample],
        scorer: &mut dyn Scorer,
    ) -> Result<TrainLogRecord> {
        let (plan, mean_reward, mean_kl) = self.plan_step(batch, scorer)?;
        let (ce, cl, ppo, total, grads) = {
            let g = &mut Graph::new(&self.model.params);
            let nodes = build_step_loss(g, &self.model.cfg, &plan)?;
            let ce = g.value(nodes.ce).at(0, 0);
            let cl = g.value(nodes.cl).at(0, 0);
            let ppo = g.value(nodes.ppo).at(0, 0);
            let total = g.value(nodes.total).at(0, 0);
            let grads = g.backward(nodes.total)?;
            (ce, cl, ppo, total, grads)
        };
        if !total.is_finite() || !ce.is_finite() || !cl.is_finite() || !ppo.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss at step {}: ce={ce} cl={cl} ppo={ppo} total={total}",
                self.step
            )));
        }
        let lr = self.opt.apply(&mut self.model.params, &grads)?;
        self.reference.update(&self.model.params)?;
        let record = TrainLogRecord {
            step: self.step,
            ce,
            cl,
            ppo,
            total,
            mean_reward,
            mean_kl,
            lambda_ppo: plan.lambda_ppo,
            lr,
        };
        self.step += 1;
        Ok(record)
    }

    /// Full run: seeded shuffles, sequential batches, a callback per step
    /// record and per epoch end (for checkpointing).
    pub fn run<R, E>(
        &mut self,
        samples: &[Sample],
        scorer: &mut dyn Scorer,
        mut on_record: R,
        mut on_epoch_end: E,
    ) -> Result<Vec<TrainLogRecord>>
    where
        R: FnMut(&TrainLogRecord) -> Result<()>,
        E: FnMut(usize, &Trainer) -> Result<()>,
    {
        if samples.is_empty() {
            return Err(Error::Data("no training samples".into()));
        }
        self.resolve_schedule(self.total_steps(samples.len()));
        let mut records = Vec::new();
        for epoch in 0..self.cfg.epochs {
            let mut order: Vec<usize> = (0..samples.len()).collect();
            self.rng.shuffle(&mut order);
            for chunk in order.chunks(self.cfg.batch_size) {
                let batch: Vec<Sample> = chunk.iter().map(|&i| samples[i].clone()).collect();
                let record = self.train_step(&batch, scorer)?;
                on_record(&record)?;
                records.push(record);
            }
            on_epoch_end(epoch, self)?;
        }
        Ok(records)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            step: self.step,
            model_config: self.model.cfg.clone(),
            train_config: self.cfg.clone(),
            vocab: self.vocab.clone(),
            params: self.model.params.clone(),
            reference_params: self.reference.model.params.clone(),
        }
    }
}

/// Vocabulary over sample texts plus their rendered prompts, so prompt
/// template words are in-vocabulary.
pub fn build_vocab(samples: &[Sample], prompt_cfg: &PromptConfig) -> Result<Vocabulary> {
    let mut texts = Vec::with_capacity(samples.len() * 2);
    for s in samples {
        texts.push(s.text.clone());
        texts.push(build_prompt(s, prompt_cfg)?.text);
    }
    Ok(Vocabulary::build(texts.iter().map(|s| s.as_str())))
}

/// Mean best-of-k reward of the anchor outputs over `samples`.
pub fn mean_best_of_k_reward(
    model: &Model,
    vocab: &Vocabulary,
    samples: &[Sample],
    scorer: &mut dyn Scorer,
    prompt_cfg: &PromptConfig,
    use_cls: bool,
    k: usize,
    max_len: usize,
    features_dir: Option<&Path>,
    synthetic_patches: usize,
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Data("no samples to evaluate".into()));
    }
    let mut total = 0.0;
    for sample in samples {
        let prompt = build_prompt(sample, prompt_cfg)?;
        let ids = vocab.encode(&prompt.text, model.cfg.max_tokens);
        let image = resolve_features(
            &sample.image_ref,
            features_dir,
            synthetic_patches.min(model.cfg.max_patches),
            model.cfg.d_model,
        )?;
        let fused = model.encode(&image, &ids)?;
        let ctx = assemble_decoder_context(&fused, use_cls);
        let mut set = generate_topk(model, vocab, &ctx, k, max_len, DecodeMode::Beam)?;
        let sid = &sample.id;
        let anchor = select_best(&mut set, |c| {
            crate::reward::score_candidate_text(scorer, sid, &c.text, Some(&sample.image_ref))
        })?;
        total += set.candidates[anchor].reward.as_ref().expect("scored").value;
    }
    Ok(total / samples.len() as f64)
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

pub const CHECKPOINT_FORMAT: &str = "sarcgen-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub step: usize,
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
    pub vocab: Vocabulary,
    pub params: ParamSet,
    pub reference_params: ParamSet,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let raw = std::fs::read_to_string(path)
            .map_err(|e| Error::Data(format!("cannot read checkpoint {}: {e}", path.display())))?;
        let mut ckpt: Checkpoint = serde_json::from_str(&raw)
            .map_err(|e| Error::Data(format!("bad checkpoint {}: {e}", path.display())))?;
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(Error::Data(format!("unknown checkpoint format {}", ckpt.format)));
        }
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Data(format!(
                "unsupported checkpoint version {}",
                ckpt.version
            )));
        }
        ckpt.params.reindex();
        ckpt.reference_params.reindex();
        ckpt.vocab.reindex();
        Ok(ckpt)
    }

    /// Rebuild the live model (and its vocabulary) from this checkpoint.
    pub fn into_model(self) -> Result<(Model, Vocabulary, TrainConfig)> {
        self.model_config.validate()?;
        Ok((
            Model {
                cfg: self.model_config,
                params: self.params,
            },
            self.vocab,
            self.train_config,
        ))
    }
}
