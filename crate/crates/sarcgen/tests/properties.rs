//! Property tests for the pipeline, prompt, reward, metric, and EMA
//! invariants.

use proptest::prelude::*;

use sarcgen::corpus::{
    build_samples, clean_text, compute_stats, length_filter, score_filter, split_dataset,
    word_count, BioTag, RawRecord, SplitSpec,
};
use sarcgen::metrics::{
    bleu, distribution_stats, embed_similarity, meteor, rouge, RougeVariant, TrigramEmbedder,
};
use sarcgen::prompt::{build_prompt, PromptConfig};
use sarcgen::reward::{factual_incongruity, ScoreRequest, Scorer, SyntheticOracle};

fn text_strategy() -> impl Strategy<Value = String> {
    proptest::collection::vec(
        prop_oneof![
            Just("word".to_string()),
            Just("oh".to_string()),
            Just("great".to_string()),
            Just("bad".to_string()),
            Just("\"".to_string()),
            Just("'".to_string()),
            Just("\u{201C}".to_string()),
            Just("\u{2019}".to_string()),
            Just(",".to_string()),
            Just("!".to_string()),
            Just("?".to_string()),
            Just(" ".to_string()),
            Just("  ".to_string()),
            "[a-z]{1,6}",
        ],
        0..24,
    )
    .prop_map(|parts| parts.concat())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn clean_text_is_idempotent(raw in text_strategy()) {
        let once = clean_text(&raw);
        prop_assert_eq!(clean_text(&once), once.clone());
        // no space immediately before sentence punctuation
        let chars: Vec<char> = once.chars().collect();
        for w in chars.windows(2) {
            let bad = w[0].is_whitespace() && ['.', ',', '!', '?', ';', ':'].contains(&w[1]);
            prop_assert!(!bad, "space before punctuation in {:?}", once);
        }
        // no quote characters at the ends
        if let Some(first) = chars.first() {
            prop_assert!(!['"', '\'', '\u{201C}', '\u{201D}', '\u{2018}', '\u{2019}'].contains(first));
        }
        if let Some(last) = chars.last() {
            prop_assert!(!['"', '\'', '\u{201C}', '\u{201D}', '\u{2018}', '\u{2019}'].contains(last));
        }
    }

    #[test]
    fn filters_commute(words in 0usize..60, score in 0.0f64..=1.0) {
        let text = vec!["w"; words].join(" ");
        let keep_length_first = length_filter(&text) && score_filter(score).unwrap();
        let keep_score_first = score_filter(score).unwrap() && length_filter(&text);
        prop_assert_eq!(keep_length_first, keep_score_first);
    }

    #[test]
    fn splits_are_exhaustive_and_disjoint(n in 3usize..400, seed in 0u64..1000) {
        let samples: Vec<sarcgen::corpus::Sample> = (0..n)
            .map(|i| sarcgen::corpus::Sample {
                id: format!("s{i}"),
                text: "some words".into(),
                target: "t".into(),
                image_ref: format!("img{i}"),
                ocr_text: None,
                caption: None,
                objects: None,
                sarcasm_score: 0.8,
            })
            .collect();
        let splits = split_dataset(samples, &SplitSpec { ratios: (8.0, 1.0, 1.0), seed }).unwrap();
        let total = splits.train.len() + splits.val.len() + splits.test.len();
        prop_assert_eq!(total, n);
        let mut ids: Vec<&str> = splits.train.iter()
            .chain(&splits.val)
            .chain(&splits.test)
            .map(|s| s.id.as_str())
            .collect();
        ids.sort_unstable();
        ids.dedup();
        prop_assert_eq!(ids.len(), n);
        // ratios respected within one element of the floor targets
        let nf = n as f64;
        prop_assert!((splits.val.len() as f64 - nf * 0.1).abs() <= 1.0);
        prop_assert!((splits.test.len() as f64 - nf * 0.1).abs() <= 1.0);
        let stats = compute_stats(&splits);
        prop_assert_eq!(stats.train.count + stats.val.count + stats.test.count, n);
    }

    #[test]
    fn retained_samples_satisfy_invariants(
        seeds in proptest::collection::vec(any::<u8>(), 1..40),
    ) {
        // random raw corpus: ids unique, assorted dirt
        let records: Vec<RawRecord> = seeds
            .iter()
            .enumerate()
            .map(|(i, &b)| {
                let words = (b % 50) as usize;
                let text = if b % 7 == 0 {
                    format!("\"{} !\"", vec!["w"; words.max(1)].join(" "))
                } else {
                    vec!["w"; words].join(" ")
                };
                RawRecord {
                    id: format!("r{i}"),
                    text,
                    bio_tokens: if b % 5 == 0 {
                        Some(vec![
                            ("the".to_string(), BioTag::Begin),
                            ("thing".to_string(), BioTag::Inside),
                        ])
                    } else {
                        None
                    },
                    target: if b % 5 == 0 { None } else { Some("thing".into()) },
                    image_ref: format!("img{i}"),
                    ocr_text: None,
                    caption: None,
                    objects: None,
                    sarcasm_score: Some(f64::from(b) / 255.0),
                }
            })
            .collect();
        let (samples, report) = build_samples(records, None).unwrap();
        for s in &samples {
            prop_assert!(word_count(&s.text) >= 1 && word_count(&s.text) <= 40);
            prop_assert!(s.sarcasm_score >= 0.5 && s.sarcasm_score <= 1.0);
            prop_assert!(!s.target.trim().is_empty());
            prop_assert_eq!(clean_text(&s.text), s.text.clone());
        }
        prop_assert_eq!(report.retained, samples.len());
    }

    #[test]
    fn prompt_prefix_property(
        target in "[a-z]{1,8}( [a-z]{1,8}){0,2}",
        ocr in "[a-z0-9]{0,10}",
        caption in "[a-z ]{0,16}",
    ) {
        let sample = sarcgen::corpus::Sample {
            id: "p".into(),
            text: "t".into(),
            target,
            image_ref: "i".into(),
            ocr_text: Some(ocr),
            caption: Some(caption),
            objects: Some(vec!["a".into(), "b".into()]),
            sarcasm_score: 0.9,
        };
        let base = build_prompt(&sample, &PromptConfig { use_ocr: false, use_objects: false, use_caption: false }).unwrap();
        let with_ocr = build_prompt(&sample, &PromptConfig { use_ocr: true, use_objects: false, use_caption: false }).unwrap();
        let with_all = build_prompt(&sample, &PromptConfig { use_ocr: true, use_objects: true, use_caption: true }).unwrap();
        // adding segments never mutates previously emitted characters
        prop_assert!(with_ocr.text.starts_with(&base.text));
        prop_assert!(with_all.text.starts_with(&with_ocr.text));
        // spans tile the text with single-space joiners
        let joined = with_all
            .segment_spans
            .iter()
            .map(|(_, (a, b))| &with_all.text[*a..*b])
            .collect::<Vec<_>>()
            .join(" ");
        prop_assert_eq!(joined, with_all.text.clone());
    }

    #[test]
    fn oracle_scores_bounded(text in "[a-zA-Z !?.,]{1,80}") {
        let mut oracle = SyntheticOracle::new();
        let v = oracle
            .score(&ScoreRequest { id: "x", text: &text, image_ref: None })
            .unwrap();
        prop_assert!((0.0..=1.0).contains(&v));
    }

    #[test]
    fn incongruity_bounded_and_scale_invariant(
        u in proptest::collection::vec(-5.0f64..5.0, 4),
        v in proptest::collection::vec(-5.0f64..5.0, 4),
        a in 0.01f64..50.0,
        b in 0.01f64..50.0,
    ) {
        prop_assume!(u.iter().any(|x| x.abs() > 1e-6));
        prop_assume!(v.iter().any(|x| x.abs() > 1e-6));
        let base = factual_incongruity(&u, &v).unwrap();
        prop_assert!((0.0..=1.0).contains(&base));
        let us: Vec<f64> = u.iter().map(|x| x * a).collect();
        let vs: Vec<f64> = v.iter().map(|x| x * b).collect();
        let scaled = factual_incongruity(&us, &vs).unwrap();
        prop_assert!((base - scaled).abs() < 1e-9);
    }

    #[test]
    fn metrics_bounded_and_permutation_invariant(
        pairs in proptest::collection::vec(("[a-d ]{0,12}", "[a-d ]{0,12}"), 2..8),
        shuffle_seed in 0u64..100,
    ) {
        let hyps: Vec<String> = pairs.iter().map(|(h, _)| h.clone()).collect();
        let refs: Vec<String> = pairs.iter().map(|(_, r)| r.clone()).collect();
        for n in 1..=4 {
            let b = bleu(&hyps, &refs, n).unwrap();
            prop_assert!((0.0..=1.0 + 1e-12).contains(&b), "bleu{n} {b}");
        }
        let rl = rouge(&hyps, &refs, RougeVariant::RougeL).unwrap();
        let me = meteor(&hyps, &refs).unwrap();
        let es = embed_similarity(&hyps, &refs, &TrigramEmbedder).unwrap();
        prop_assert!((0.0..=1.0 + 1e-12).contains(&rl));
        prop_assert!((0.0..=1.0 + 1e-12).contains(&me));
        prop_assert!((0.0..=1.0 + 1e-12).contains(&es));

        // shuffle pairs together and re-score
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        let mut s = shuffle_seed;
        for i in (1..order.len()).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            order.swap(i, (s >> 33) as usize % (i + 1));
        }
        let hyps2: Vec<String> = order.iter().map(|&i| hyps[i].clone()).collect();
        let refs2: Vec<String> = order.iter().map(|&i| refs[i].clone()).collect();
        prop_assert!((bleu(&hyps, &refs, 2).unwrap() - bleu(&hyps2, &refs2, 2).unwrap()).abs() < 1e-12);
        prop_assert!((rl - rouge(&hyps2, &refs2, RougeVariant::RougeL).unwrap()).abs() < 1e-12);
        prop_assert!((me - meteor(&hyps2, &refs2).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn identical_corpora_score_one(
        texts in proptest::collection::vec("[a-f]{1,4}( [a-f]{1,4}){0,6}", 2..6),
    ) {
        for n in 1..=4 {
            prop_assert!((bleu(&texts, &texts, n).unwrap() - 1.0).abs() < 1e-12);
        }
        for v in [RougeVariant::Rouge1, RougeVariant::Rouge2, RougeVariant::RougeL] {
            prop_assert!((rouge(&texts, &texts, v).unwrap() - 1.0).abs() < 1e-12);
        }
        prop_assert!((meteor(&texts, &texts).unwrap() - 1.0).abs() < 1e-12);
        prop_assert!((embed_similarity(&texts, &texts, &TrigramEmbedder).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn distribution_stats_match_two_pass_reference(
        scores in proptest::collection::vec(0.0f64..=1.0, 1..60),
    ) {
        let stats = distribution_stats(&scores).unwrap();
        let n = scores.len() as f64;
        let mean: f64 = scores.iter().sum::<f64>() / n;
        let var: f64 = scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n;
        prop_assert!((stats.mean - mean).abs() < 1e-12);
        prop_assert!((stats.std - var.sqrt()).abs() < 1e-12);
        prop_assert_eq!(stats.histogram.iter().sum::<usize>(), scores.len());
    }

    #[test]
    fn ema_drift_is_bounded(
        deltas in proptest::collection::vec(-0.5f64..0.5, 1..80),
    ) {
        // reference tracks a drifting scalar: |ref - live| stays within
        // max |step| / (1 - m)
        let m = 0.99;
        let mut live = 1.0;
        let mut reference = live;
        let max_step = deltas.iter().fold(0.0f64, |acc, d| acc.max(d.abs()));
        for d in &deltas {
            live += d;
            reference = m * reference + (1.0 - m) * live;
            prop_assert!((reference - live).abs() <= max_step / (1.0 - m) + 1e-9);
        }
    }
}
