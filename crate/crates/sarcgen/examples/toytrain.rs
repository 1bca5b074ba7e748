// Scratch experiment for tuning the toy task (removed before shipping).
use std::time::Instant;

use sarcgen::corpus::{build_samples, split_dataset, SplitSpec};
use sarcgen::model::{Model, ModelConfig};
use sarcgen::reward::SyntheticOracle;
use sarcgen::synth::synthetic_raw_records;
use sarcgen::train::{
    build_vocab, mean_best_of_k_reward, PpoSchedule, TrainConfig, Trainer,
};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let epochs: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(3);
    let lr: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(3e-3);
    let n: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(560);

    let records = synthetic_raw_records(n, 42);
    let (samples, _report) = build_samples(records, None).unwrap();
    let splits = split_dataset(samples, &SplitSpec { ratios: (8.0, 1.0, 1.0), seed: 7 }).unwrap();
    println!("train {} / val {} / test {}", splits.train.len(), splits.val.len(), splits.test.len());

    let oracle = SyntheticOracle::new();
    let corpus_mean: f64 = splits.train.iter().map(|s| oracle.score_text(&s.text)).sum::<f64>()
        / splits.train.len() as f64;
    println!("train corpus oracle mean: {corpus_mean:.4}");

    for seed in [1u64, 2, 3] {
        for full in [true, false] {
            let t0 = Instant::now();
            let prompt_cfg = sarcgen::prompt::PromptConfig::default();
            let vocab = build_vocab(&splits.train, &prompt_cfg).unwrap();
            let model_cfg = ModelConfig {
                d_model: 32,
                n_heads: 2,
                enc_layers: 1,
                dec_layers: 1,
                ffn_mult: 2,
                vocab_size: vocab.len(),
                max_patches: 4,
                max_tokens: 32,
                max_gen: 10,
            };
            let model = Model::new(model_cfg, seed).unwrap();
            let mut cfg = TrainConfig {
                epochs,
                batch_size: 16,
                lr,
                warmup_steps: 20,
                k: 5,
                max_tokens: 32,
                gen_max_len: 8,
                seed,
                momentum: 0.99,
                ..Default::default()
            };
            if full {
                cfg.weights.lambda_cl = 0.5;
                cfg.weights.lambda_ppo = PpoSchedule::default(); // 0 -> 1 over run
            } else {
                cfg.weights.lambda_cl = 0.0;
                cfg.weights.lambda_ppo = PpoSchedule::constant(0.0);
            }
            let mut trainer = Trainer::new(model, vocab, cfg).unwrap();
            let mut scorer = SyntheticOracle::new();
            let records = trainer
                .run(&splits.train, &mut scorer, |_r| Ok(()), |_e, _t| Ok(()))
                .unwrap();
            let last = records.last().unwrap();
            let mut scorer2 = SyntheticOracle::new();
            let heldout = mean_best_of_k_reward(
                trainer.model(),
                trainer.vocab(),
                &splits.test,
                &mut scorer2,
                &prompt_cfg,
                true,
                5,
                8,
                None,
                4,
            )
            .unwrap();
            println!(
                "seed {seed} {}: steps {} ce {:.3} train-reward {:.3} heldout-bo5 {:.4}  [{:.1}s]",
                if full { "FULL" } else { "CE  " },
                records.len(),
                last.ce,
                last.mean_reward,
                heldout,
                t0.elapsed().as_secs_f64()
            );
        }
    }
}
