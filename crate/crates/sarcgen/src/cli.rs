//! Command-line entry point: build-dataset, train, generate, evaluate, and
//! analyze, plus make-data (synthetic corpus) and score-serve (NDJSON
//! scorer service). Every run writes a manifest; failures map to distinct
//! exit codes (2 usage, 3 config, 4 data, 5 scorer, 6 numeric).

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::config::AppConfig;
use crate::corpus::{self, RawRecord, Sample, SplitSpec};
use crate::encoder::assemble_decoder_context;
use crate::error::{Error, Result};
use crate::features::resolve_features;
use crate::generator::{generate_topk, select_best, DecodeMode};
use crate::manifest::{manifest_path, RunManifest};
use crate::metrics::{distribution_stats, evaluate_run, EvalRecord};
use crate::model::Model;
use crate::prompt::{build_prompt, PromptConfig};
use crate::reward::{ScoreRequest, Scorer, ScorerSpec};
use crate::train::{build_vocab, Checkpoint, Trainer};
use crate::vocab::Vocabulary;

pub const SCORER_ENV_VAR: &str = "SARCGEN_SCORER";

#[derive(Parser)]
#[command(
    name = "sarcgen",
    version,
    about = "Reward-guided multimodal sarcastic text generation"
)]
struct Cli {
    /// Override the config seed everywhere.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build train/val/test splits from raw annotated records.
    BuildDataset {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Split ratios as `train,val,test`.
        #[arg(long, default_value = "8,1,1")]
        ratios: String,
        /// Scorer spec for records missing a sarcasm score.
        #[arg(long)]
        score_endpoint: Option<String>,
    },
    /// Train the generator on a built dataset.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data_dir: PathBuf,
        #[arg(long)]
        scorer: Option<String>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        features_dir: Option<PathBuf>,
        #[arg(long)]
        use_ocr: Option<bool>,
        #[arg(long)]
        use_objects: Option<bool>,
        #[arg(long)]
        use_caption: Option<bool>,
    },
    /// Decode top-k candidates per record and select the best by reward.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value_t = 5)]
        k: usize,
        #[arg(long, default_value_t = 64)]
        max_len: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        scorer: Option<String>,
        /// Switch from beam search to seeded sampling.
        #[arg(long)]
        sample_seed: Option<u64>,
        #[arg(long)]
        features_dir: Option<PathBuf>,
    },
    /// Score hypotheses against references with the full metric battery.
    Evaluate {
        #[arg(long)]
        hyp: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        scorer: Option<String>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        features_dir: Option<PathBuf>,
    },
    /// Distribution statistics over a score file.
    Analyze {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a synthetic raw corpus for demos and smoke tests.
    MakeData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 500)]
        count: usize,
    },
    /// Serve a scorer over NDJSON on stdin/stdout.
    ScoreServe {
        #[arg(long, default_value = "synthetic")]
        scorer: String,
    },
}

pub fn run_cli() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    let seed = cli.seed;
    match cli.command {
        Command::BuildDataset {
            input,
            out_dir,
            ratios,
            score_endpoint,
        } => with_manifest("build-dataset", seed, manifest_path(&out_dir, true), |m| {
            build_dataset(&input, &out_dir, seed.unwrap_or(0), &ratios, score_endpoint.as_deref(), m)
        }),
        Command::Train {
            config,
            data_dir,
            scorer,
            out,
            features_dir,
            use_ocr,
            use_objects,
            use_caption,
        } => with_manifest("train", seed, manifest_path(&out, true), |m| {
            train(
                config.as_deref(),
                &data_dir,
                scorer.as_deref(),
                &out,
                features_dir,
                seed,
                (use_ocr, use_objects, use_caption),
                m,
            )
        }),
        Command::Generate {
            checkpoint,
            input,
            k,
            max_len,
            out,
            scorer,
            sample_seed,
            features_dir,
        } => with_manifest("generate", seed, manifest_path(&out, false), |m| {
            generate(
                &checkpoint,
                &input,
                k,
                max_len,
                &out,
                scorer.as_deref(),
                sample_seed,
                features_dir.as_deref(),
                m,
            )
        }),
        Command::Evaluate {
            hyp,
            reference,
            scorer,
            out,
            features_dir,
        } => with_manifest("evaluate", seed, manifest_path(&out, false), |m| {
            evaluate(&hyp, &reference, scorer.as_deref(), &out, features_dir.as_deref(), m)
        }),
        Command::Analyze { scores, out } => {
            with_manifest("analyze", seed, manifest_path(&out, false), |m| {
                analyze(&scores, &out, m)
            })
        }
        Command::MakeData { out, count } => {
            with_manifest("make-data", seed, manifest_path(&out, false), |m| {
                make_data(&out, count, seed.unwrap_or(0), m)
            })
        }
        Command::ScoreServe { scorer } => score_serve(&scorer),
    }
}

fn with_manifest<F>(command: &str, seed: Option<u64>, manifest_out: PathBuf, f: F) -> Result<()>
where
    F: FnOnce(&mut RunManifest) -> Result<()>,
{
    let mut manifest = RunManifest::begin(command);
    manifest.seed = seed;
    let result = f(&mut manifest);
    let status = match &result {
        Ok(()) => "success".to_string(),
        Err(e) => format!("error: {e}"),
    };
    if let Err(write_err) = manifest.clone().finish(&manifest_out, &status) {
        eprintln!("warning: could not write manifest: {write_err}");
    }
    result
}

fn resolve_scorer(flag: Option<&str>, fallback: &str) -> Result<Box<dyn Scorer>> {
    let spec = match flag {
        Some(s) => s.to_string(),
        None => std::env::var(SCORER_ENV_VAR).unwrap_or_else(|_| fallback.to_string()),
    };
    ScorerSpec::parse(&spec)?.build()
}

fn parse_ratios(raw: &str) -> Result<(f64, f64, f64)> {
    let parts: Vec<&str> = raw.split(',').map(|p| p.trim()).collect();
    if parts.len() != 3 {
        return Err(Error::Config(format!(
            "ratios must be three comma-separated numbers, got {raw:?}"
        )));
    }
    let mut vals = [0.0; 3];
    for (v, p) in vals.iter_mut().zip(&parts) {
        *v = p
            .parse()
            .map_err(|_| Error::Config(format!("bad ratio component {p:?}")))?;
    }
    Ok((vals[0], vals[1], vals[2]))
}

fn build_dataset(
    input: &Path,
    out_dir: &Path,
    seed: u64,
    ratios: &str,
    score_endpoint: Option<&str>,
    manifest: &mut RunManifest,
) -> Result<()> {
    manifest.add_input(input);
    let records: Vec<RawRecord> = corpus::read_jsonl(input)?;
    let mut scorer = match score_endpoint {
        Some(spec) => Some(ScorerSpec::parse(spec)?.build()?),
        None => None,
    };
    let (samples, report) = corpus::build_samples(records, scorer.as_deref_mut().map(|s| s as _))?;
    let spec = SplitSpec::new(parse_ratios(ratios)?, seed)?;
    let splits = corpus::split_dataset(samples, &spec)?;
    let stats = corpus::compute_stats(&splits);

    std::fs::create_dir_all(out_dir)?;
    for (name, part) in [
        ("train.jsonl", &splits.train),
        ("val.jsonl", &splits.val),
        ("test.jsonl", &splits.test),
    ] {
        let path = out_dir.join(name);
        corpus::write_jsonl(&path, part)?;
        manifest.add_output(&path);
    }
    let stats_path = out_dir.join("stats.json");
    std::fs::write(&stats_path, serde_json::to_string_pretty(&stats)?)?;
    manifest.add_output(&stats_path);
    let report_path = out_dir.join("pipeline_report.json");
    std::fs::write(&report_path, serde_json::to_string_pretty(&report)?)?;
    manifest.add_output(&report_path);

    println!(
        "built dataset: {} train / {} val / {} test ({} ingested, {} retained)",
        splits.train.len(),
        splits.val.len(),
        splits.test.len(),
        report.ingested,
        report.retained
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn train(
    config_path: Option<&Path>,
    data_dir: &Path,
    scorer_flag: Option<&str>,
    out: &Path,
    features_dir: Option<PathBuf>,
    seed_override: Option<u64>,
    prompt_overrides: (Option<bool>, Option<bool>, Option<bool>),
    manifest: &mut RunManifest,
) -> Result<()> {
    let mut app_cfg = match config_path {
        Some(p) => {
            manifest.add_input(p);
            AppConfig::parse(p)?
        }
        None => AppConfig::default(),
    };
    if let Some(seed) = seed_override {
        app_cfg.seed = seed;
    }
    let (ocr, objects, caption) = prompt_overrides;
    if let Some(v) = ocr {
        app_cfg.prompt.use_ocr = v;
    }
    if let Some(v) = objects {
        app_cfg.prompt.use_objects = v;
    }
    if let Some(v) = caption {
        app_cfg.prompt.use_caption = v;
    }
    app_cfg.validate()?;
    manifest.config_snapshot = Some(serde_json::to_value(&app_cfg)?);
    manifest.seed = Some(app_cfg.seed);

    let train_path = data_dir.join("train.jsonl");
    manifest.add_input(&train_path);
    let samples: Vec<Sample> = corpus::read_jsonl(&train_path)?;
    if samples.is_empty() {
        return Err(Error::Data(format!("no samples in {}", train_path.display())));
    }

    let train_cfg = app_cfg.to_train_config();
    let vocab = build_vocab(&samples, &train_cfg.prompt)?;
    let model_cfg = app_cfg.to_model_config(vocab.len());
    let model = Model::new(model_cfg, app_cfg.seed)?;
    eprintln!(
        "training on {} samples, vocab {}, {} parameters",
        samples.len(),
        vocab.len(),
        model.num_params()
    );

    let mut scorer = resolve_scorer(scorer_flag, &app_cfg.reward.scorer)?;
    let mut trainer = Trainer::new(model, vocab, train_cfg)?.with_features_dir(features_dir);

    std::fs::create_dir_all(out)?;
    let vocab_path = out.join("vocab.json");
    trainer.vocab().save(&vocab_path)?;
    manifest.add_output(&vocab_path);

    let log_path = out.join("train_log.jsonl");
    let mut log_file = std::fs::File::create(&log_path)?;
    manifest.add_output(&log_path);

    let mut checkpoint_paths: Vec<PathBuf> = Vec::new();
    trainer.run(
        &samples,
        scorer.as_mut(),
        |record| {
            serde_json::to_writer(&mut log_file, record)?;
            log_file.write_all(b"\n")?;
            Ok(())
        },
        |epoch, t| {
            let path = out.join(format!("checkpoint-epoch-{epoch:03}.json"));
            t.checkpoint().save(&path)?;
            checkpoint_paths.push(path);
            eprintln!("epoch {epoch} done ({} steps)", t.steps_taken());
            Ok(())
        },
    )?;
    for p in &checkpoint_paths {
        manifest.add_output(p);
    }
    let final_path = out.join("checkpoint.json");
    trainer.checkpoint().save(&final_path)?;
    manifest.add_output(&final_path);
    println!(
        "trained {} steps; final checkpoint at {}",
        trainer.steps_taken(),
        final_path.display()
    );
    Ok(())
}

/// One generation output line: the selected anchor text plus every scored
/// candidate.
#[derive(Debug, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub id: String,
    pub image_ref: String,
    pub target: String,
    /// The anchor (best-of-k) text.
    pub text: String,
    pub anchor_index: usize,
    pub candidates: Vec<CandidateRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CandidateRecord {
    pub text: String,
    pub tokens: Vec<u32>,
    pub logprob: f64,
    pub reward: f64,
}

#[allow(clippy::too_many_arguments)]
fn generate(
    checkpoint: &Path,
    input: &Path,
    k: usize,
    max_len: usize,
    out: &Path,
    scorer_flag: Option<&str>,
    sample_seed: Option<u64>,
    features_dir: Option<&Path>,
    manifest: &mut RunManifest,
) -> Result<()> {
    manifest.add_input(checkpoint);
    manifest.add_input(input);
    let (model, vocab, train_cfg) = Checkpoint::load(checkpoint)?.into_model()?;
    let samples: Vec<Sample> = corpus::read_jsonl(input)?;
    let mut scorer = resolve_scorer(scorer_flag, "synthetic")?;
    let mode = match sample_seed {
        Some(seed) => DecodeMode::Sample { seed },
        None => DecodeMode::Beam,
    };

    let mut file = std::fs::File::create(out)?;
    for sample in &samples {
        let record = generate_record(
            &model,
            &vocab,
            sample,
            &train_cfg.prompt,
            train_cfg.use_cls,
            k,
            max_len,
            mode,
            scorer.as_mut(),
            features_dir,
        )?;
        serde_json::to_writer(&mut file, &record)?;
        file.write_all(b"\n")?;
    }
    manifest.add_output(out);
    println!("generated {} records to {}", samples.len(), out.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn generate_record(
    model: &Model,
    vocab: &Vocabulary,
    sample: &Sample,
    prompt_cfg: &PromptConfig,
    use_cls: bool,
    k: usize,
    max_len: usize,
    mode: DecodeMode,
    scorer: &mut dyn Scorer,
    features_dir: Option<&Path>,
) -> Result<GenerationRecord> {
    let prompt = build_prompt(sample, prompt_cfg)?;
    let ids = vocab.encode(&prompt.text, model.cfg.max_tokens);
    let image = resolve_features(
        &sample.image_ref,
        features_dir,
        4.min(model.cfg.max_patches),
        model.cfg.d_model,
    )?;
    let fused = model.encode(&image, &ids)?;
    let ctx = assemble_decoder_context(&fused, use_cls);
    let mut set = generate_topk(model, vocab, &ctx, k, max_len, mode)?;
    let anchor = select_best(&mut set, |c| {
        crate::reward::score_candidate_text(scorer, &sample.id, &c.text, Some(&sample.image_ref))
    })?;
    Ok(GenerationRecord {
        id: sample.id.clone(),
        image_ref: sample.image_ref.clone(),
        target: sample.target.clone(),
        text: set.candidates[anchor].text.clone(),
        anchor_index: anchor,
        candidates: set
            .candidates
            .iter()
            .map(|c| CandidateRecord {
                text: c.text.clone(),
                tokens: c.tokens.ids.clone(),
                logprob: c.logprob,
                reward: c.reward.as_ref().map(|r| r.value).unwrap_or(0.0),
            })
            .collect(),
    })
}

fn evaluate(
    hyp: &Path,
    reference: &Path,
    scorer_flag: Option<&str>,
    out: &Path,
    features_dir: Option<&Path>,
    manifest: &mut RunManifest,
) -> Result<()> {
    manifest.add_input(hyp);
    manifest.add_input(reference);
    let hyps: Vec<EvalRecord> = corpus::read_jsonl(hyp)?;
    let refs: Vec<EvalRecord> = corpus::read_jsonl(reference)?;
    let mut scorer = resolve_scorer(scorer_flag, "synthetic")?;
    let features_dir = features_dir.map(|p| p.to_path_buf());
    let incongruity = move |r: &EvalRecord| {
        crate::metrics::default_incongruity(r, features_dir.as_deref(), 64)
    };
    let report = evaluate_run(&hyps, &refs, scorer.as_mut(), Some(&incongruity))?;
    std::fs::write(out, serde_json::to_string_pretty(&report)?)?;
    manifest.add_output(out);
    println!(
        "evaluated {} pairs: BLEU-1 {:.2}, ROUGE-L {:.2}, METEOR {:.2}, CIDEr {:.2}",
        report.count,
        report.metrics.bleu1,
        report.metrics.rouge_l,
        report.metrics.meteor,
        report.metrics.cider
    );
    Ok(())
}

#[derive(Deserialize)]
struct ScoreLine {
    score: f64,
}

#[derive(Serialize)]
struct AnalyzeReport {
    schema_version: u32,
    count: usize,
    stats: crate::metrics::DistributionStats,
}

fn analyze(scores: &Path, out: &Path, manifest: &mut RunManifest) -> Result<()> {
    manifest.add_input(scores);
    let lines: Vec<ScoreLine> = corpus::read_jsonl(scores)?;
    let values: Vec<f64> = lines.iter().map(|l| l.score).collect();
    let stats = distribution_stats(&values)?;
    let report = AnalyzeReport {
        schema_version: 1,
        count: values.len(),
        stats,
    };
    std::fs::write(out, serde_json::to_string_pretty(&report)?)?;
    manifest.add_output(out);
    println!("analyzed {} scores", values.len());
    Ok(())
}

fn make_data(out: &Path, count: usize, seed: u64, manifest: &mut RunManifest) -> Result<()> {
    let records = crate::synth::synthetic_raw_records(count, seed);
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    corpus::write_jsonl(out, &records)?;
    manifest.add_output(out);
    println!("wrote {count} synthetic records to {}", out.display());
    Ok(())
}

#[derive(Deserialize)]
struct ServeRequest {
    id: String,
    text: String,
    #[serde(default)]
    image_ref: Option<String>,
}

#[derive(Serialize)]
struct ServeResponse {
    id: String,
    value: f64,
}

fn score_serve(scorer_spec: &str) -> Result<()> {
    let mut scorer = ScorerSpec::parse(scorer_spec)?.build()?;
    let stdin = std::io::stdin();
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    for line in std::io::BufRead::lines(stdin.lock()) {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let req: ServeRequest = serde_json::from_str(&line)
            .map_err(|e| Error::Scorer(format!("bad request {line:?}: {e}")))?;
        let value = scorer.score(&ScoreRequest {
            id: &req.id,
            text: &req.text,
            image_ref: req.image_ref.as_deref(),
        })?;
        serde_json::to_writer(&mut out, &ServeResponse { id: req.id, value })?;
        out.write_all(b"\n")?;
        out.flush()?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ratios_parse() {
        assert_eq!(parse_ratios("8,1,1").unwrap(), (8.0, 1.0, 1.0));
        assert_eq!(parse_ratios("7, 2, 1").unwrap(), (7.0, 2.0, 1.0));
        assert!(parse_ratios("8,1").is_err());
        assert!(parse_ratios("a,b,c").is_err());
    }

    #[test]
    fn cli_parses_spec_invocations() {
        Cli::try_parse_from([
            "sarcgen",
            "build-dataset",
            "--in",
            "raw.jsonl",
            "--out-dir",
            "data",
            "--seed",
            "7",
            "--ratios",
            "8,1,1",
        ])
        .unwrap();
        Cli::try_parse_from([
            "sarcgen",
            "generate",
            "--checkpoint",
            "ckpt.json",
            "--in",
            "test.jsonl",
            "--k",
            "5",
            "--max-len",
            "64",
            "--out",
            "gen.jsonl",
        ])
        .unwrap();
        Cli::try_parse_from([
            "sarcgen",
            "train",
            "--data-dir",
            "data",
            "--scorer",
            "synthetic",
            "--out",
            "run",
        ])
        .unwrap();
        assert!(Cli::try_parse_from(["sarcgen", "frobnicate"]).is_err());
    }
}
