//! Deterministic synthetic raw corpus for desk-scale runs, demos, and
//! end-to-end tests. Texts are built from marker-bearing templates so the
//! synthetic reward oracle yields a graded, learnable signal, and a small
//! fraction of records exercises the cleaning/filter paths.

use crate::corpus::{BioTag, RawRecord};
use crate::nn::rng::SeededRng;

const TOPICS: [&str; 12] = [
    "monday", "traffic", "meeting", "weather", "coffee", "printer", "wifi", "deadline",
    "elevator", "forecast", "inbox", "commute",
];

// templates by net incongruity-marker count (reward 1/3, 2/3, 1.0)
const ONE_MARKER: [&str; 5] = [
    "oh another {t} day",
    "great {t} for everyone",
    "wow this {t} never ends",
    "lovely {t} we are having",
    "classic {t} moment again",
];

const TWO_MARKER: [&str; 5] = [
    "oh great another {t}",
    "wow the {t} is lovely today",
    "totally classic {t} again",
    "oh wow the {t} strikes",
    "brilliant {t} just brilliant",
];

const THREE_MARKER: [&str; 4] = [
    "oh great just perfect more {t}",
    "wow totally brilliant {t} everyone",
    "lovely perfect {t} genius move",
    "oh wow the {t} is perfect",
];

/// Generate `count` raw records with seeded content. Roughly 45% of texts
/// carry one marker, 40% two, 15% three; about half the records annotate
/// the target via BIO tags over a "the {topic}" span, the rest carry an
/// explicit target string. A few percent are dirty on purpose: quote
/// wrapping, spaces before punctuation, over-length texts, and sub-0.5
/// sarcasm scores.
pub fn synthetic_raw_records(count: usize, seed: u64) -> Vec<RawRecord> {
    let mut rng = SeededRng::new(seed);
    let mut records = Vec::with_capacity(count);
    for i in 0..count {
        let topic = TOPICS[rng.below(TOPICS.len())];
        let roll = rng.uniform();
        let template = if roll < 0.45 {
            ONE_MARKER[rng.below(ONE_MARKER.len())]
        } else if roll < 0.85 {
            TWO_MARKER[rng.below(TWO_MARKER.len())]
        } else {
            THREE_MARKER[rng.below(THREE_MARKER.len())]
        };
        let mut text = template.replace("{t}", topic);

        // BIO tagging is only possible when the text contains "the {topic}"
        let tokens: Vec<String> = text.split_whitespace().map(|s| s.to_string()).collect();
        let the_pos = tokens
            .windows(2)
            .position(|w| w[0] == "the" && w[1] == topic);
        let use_bio = the_pos.is_some() && rng.uniform() < 0.5;
        let (bio_tokens, target) = if let (true, Some(pos)) = (use_bio, the_pos) {
            let tags = tokens
                .iter()
                .enumerate()
                .map(|(j, tok)| {
                    let tag = if j == pos {
                        BioTag::Begin
                    } else if j == pos + 1 {
                        BioTag::Inside
                    } else {
                        BioTag::Outside
                    };
                    (tok.clone(), tag)
                })
                .collect();
            (Some(tags), None)
        } else {
            (None, Some(topic.to_string()))
        };

        // mostly clean, with a sprinkle of records that need cleaning or
        // get excluded
        let style = rng.uniform();
        let mut score = 0.55 + 0.45 * rng.uniform();
        if style < 0.05 {
            text = format!("\"{text} !\"");
        } else if style < 0.07 {
            let filler = vec!["and"; 45].join(" ");
            text = format!("{text} {filler}");
        } else if style < 0.10 {
            score = 0.1 + 0.3 * rng.uniform();
        }

        records.push(RawRecord {
            id: format!("synth-{i:05}"),
            text,
            bio_tokens,
            target,
            image_ref: format!("img-{i:05}"),
            ocr_text: Some(topic.to_string()),
            caption: Some(format!("a photo of the {topic}")),
            objects: Some(vec![topic.to_string(), "sign".to_string(), topic.to_string()]),
            sarcasm_score: Some((score * 1e6).round() / 1e6),
        });
    }
    records
}
