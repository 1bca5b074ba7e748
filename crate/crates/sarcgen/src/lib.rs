//! Reward-guided multimodal sarcastic text generation at desk scale.
//!
//! The crate covers the full loop: corpus construction from annotated raw
//! records, prompt assembly from sarcasm targets plus optional OCR/caption/
//! object strings, a small jointly-trained fusion encoder over image patch
//! features and prompt tokens, a seq2seq decoder with beam-search top-k
//! generation, pluggable reward scoring with best-of-k selection, a combined
//! cross-entropy + contrastive + reward-driven training objective with an
//! EMA reference policy, and a text-generation metric battery.
//!
//! See the `book/` guide for a narrative walkthrough and `README.md` for the
//! CLI pipeline.

pub mod cli;
pub mod config;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod features;
pub mod generator;
pub mod manifest;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod prompt;
pub mod reward;
pub mod synth;
pub mod train;
pub mod vocab;

pub use cli::run_cli;
pub use error::{Error, Result};
