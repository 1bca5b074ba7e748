//! TOML run configuration with sections mirroring the module layout.
//! Unknown keys are rejected; an empty file yields the full default set.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::prompt::PromptConfig;
use crate::train::{LossWeights, PpoSchedule, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AppConfig {
    pub seed: u64,
    pub model: ModelSection,
    pub train: TrainSection,
    pub loss: LossSection,
    pub prompt: PromptSection,
    pub generate: GenerateSection,
    pub reward: RewardSection,
}

impl Default for AppConfig {
    fn default() -> Self {
        AppConfig {
            seed: 0,
            model: ModelSection::default(),
            train: TrainSection::default(),
            loss: LossSection::default(),
            prompt: PromptSection::default(),
            generate: GenerateSection::default(),
            reward: RewardSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub d_model: usize,
    pub n_heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub ffn_mult: usize,
    pub max_patches: usize,
    pub max_gen: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            d_model: 64,
            n_heads: 2,
            enc_layers: 2,
            dec_layers: 2,
            ffn_mult: 4,
            max_patches: 16,
            max_gen: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    pub k: usize,
    pub max_tokens: usize,
    pub gen_max_len: usize,
    pub momentum: f64,
    pub use_cls: bool,
    pub ppo_on_all_candidates: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            epochs: 20,
            batch_size: 16,
            lr: 1e-4,
            warmup_steps: 100,
            k: 5,
            max_tokens: 256,
            gen_max_len: 32,
            momentum: 0.99,
            use_cls: true,
            ppo_on_all_candidates: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossSection {
    pub lambda_cl: f64,
    pub beta: f64,
    pub tau: f64,
    pub lambda_ppo_start: f64,
    pub lambda_ppo_end: f64,
    pub lambda_ppo_start_step: usize,
    /// 0 means "ramp over the whole run".
    pub lambda_ppo_end_step: usize,
    pub infonce_denominator: bool,
}

impl Default for LossSection {
    fn default() -> Self {
        LossSection {
            lambda_cl: 0.5,
            beta: 0.1,
            tau: 0.07,
            lambda_ppo_start: 0.0,
            lambda_ppo_end: 1.0,
            lambda_ppo_start_step: 0,
            lambda_ppo_end_step: 0,
            infonce_denominator: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PromptSection {
    pub use_ocr: bool,
    pub use_objects: bool,
    pub use_caption: bool,
}

impl Default for PromptSection {
    fn default() -> Self {
        let p = PromptConfig::default();
        PromptSection {
            use_ocr: p.use_ocr,
            use_objects: p.use_objects,
            use_caption: p.use_caption,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerateSection {
    pub k: usize,
    pub max_len: usize,
}

impl Default for GenerateSection {
    fn default() -> Self {
        GenerateSection { k: 5, max_len: 32 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardSection {
    pub scorer: String,
}

impl Default for RewardSection {
    fn default() -> Self {
        RewardSection {
            scorer: "synthetic".to_string(),
        }
    }
}

impl AppConfig {
    pub fn parse(path: &Path) -> Result<AppConfig> {
        let raw = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse_str(&raw)
    }

    pub fn parse_str(raw: &str) -> Result<AppConfig> {
        let cfg: AppConfig =
            toml::from_str(raw).map_err(|e| Error::Config(format!("bad config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.to_train_config().validate()?;
        if self.generate.k == 0 {
            return Err(Error::Config("generate.k must be at least 1".into()));
        }
        if self.generate.max_len == 0 {
            return Err(Error::Config("generate.max_len must be at least 1".into()));
        }
        // model section validated against a placeholder vocabulary size
        let mut mc = self.to_model_config(5);
        mc.max_tokens = self.train.max_tokens;
        mc.validate()?;
        crate::reward::ScorerSpec::parse(&self.reward.scorer)?;
        Ok(())
    }

    pub fn prompt_config(&self) -> PromptConfig {
        PromptConfig {
            use_ocr: self.prompt.use_ocr,
            use_objects: self.prompt.use_objects,
            use_caption: self.prompt.use_caption,
        }
    }

    pub fn to_model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            d_model: self.model.d_model,
            n_heads: self.model.n_heads,
            enc_layers: self.model.enc_layers,
            dec_layers: self.model.dec_layers,
            ffn_mult: self.model.ffn_mult,
            vocab_size,
            max_patches: self.model.max_patches,
            max_tokens: self.train.max_tokens,
            max_gen: self.model.max_gen,
        }
    }

    pub fn to_train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            lr: self.train.lr,
            warmup_steps: self.train.warmup_steps,
            k: self.train.k,
            max_tokens: self.train.max_tokens,
            gen_max_len: self.train.gen_max_len,
            seed: self.seed,
            momentum: self.train.momentum,
            use_cls: self.train.use_cls,
            ppo_on_all_candidates: self.train.ppo_on_all_candidates,
            infonce_denominator: self.loss.infonce_denominator,
            weights: LossWeights {
                lambda_cl: self.loss.lambda_cl,
                beta: self.loss.beta,
                tau: self.loss.tau,
                lambda_ppo: PpoSchedule {
                    start_value: self.loss.lambda_ppo_start,
                    end_value: self.loss.lambda_ppo_end,
                    start_step: self.loss.lambda_ppo_start_step,
                    end_step: self.loss.lambda_ppo_end_step,
                },
            },
            prompt: self.prompt_config(),
        }
    }
}
