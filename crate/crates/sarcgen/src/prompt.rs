//! Prompt assembly. The textual input to the encoder concatenates a fixed
//! sarcasm-target template with optional OCR, caption, and object segments,
//! each rendered through its own template and joined by single spaces.

use serde::{Deserialize, Serialize};

use crate::corpus::Sample;
use crate::error::{Error, Result};

/// Which optional segments to emit; the target segment is always present.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptConfig {
    pub use_ocr: bool,
    pub use_objects: bool,
    pub use_caption: bool,
}

impl Default for PromptConfig {
    /// Target plus OCR text, the strongest input configuration.
    fn default() -> Self {
        PromptConfig {
            use_ocr: true,
            use_objects: false,
            use_caption: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Segment {
    Target,
    Ocr,
    Caption,
    Objects,
}

/// The assembled prompt plus the character span of each emitted segment.
/// Spans tile the text in emission order with single-space joiners between
/// them, so concatenating the span substrings with `" "` reconstructs it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptText {
    pub text: String,
    pub segment_spans: Vec<(Segment, (usize, usize))>,
}

impl PromptText {
    pub fn segment(&self, which: Segment) -> Option<&str> {
        self.segment_spans
            .iter()
            .find(|(s, _)| *s == which)
            .map(|(_, (a, b))| &self.text[*a..*b])
    }
}

/// Deduplicate object labels, first occurrence wins, case-sensitive exact
/// match.
pub fn dedupe_objects(objects: &[String]) -> Vec<String> {
    let mut seen = std::collections::BTreeSet::new();
    objects
        .iter()
        .filter(|o| seen.insert(o.as_str()))
        .cloned()
        .collect()
}

/// Assemble the prompt in fixed order: target sentence, then OCR, caption,
/// and object segments for enabled flags. An enabled flag whose field is
/// absent on the sample fails fast with a missing-field error.
pub fn build_prompt(sample: &Sample, config: &PromptConfig) -> Result<PromptText> {
    if sample.target.trim().is_empty() {
        return Err(Error::Data(format!("sample {} has empty target", sample.id)));
    }
    let mut segments: Vec<(Segment, String)> = vec![(
        Segment::Target,
        format!(
            "The target of sarcasm is {}. Write a sarcastic comment based on this.",
            sample.target
        ),
    )];
    if config.use_ocr {
        let ocr = sample.ocr_text.as_deref().ok_or_else(|| {
            Error::Data(format!("sample {}: use_ocr set but ocr_text missing", sample.id))
        })?;
        segments.push((Segment::Ocr, format!("OCR text: {ocr}")));
    }
    if config.use_caption {
        let caption = sample.caption.as_deref().ok_or_else(|| {
            Error::Data(format!("sample {}: use_caption set but caption missing", sample.id))
        })?;
        segments.push((Segment::Caption, format!("Image caption: {caption}")));
    }
    if config.use_objects {
        let objects = sample.objects.as_deref().ok_or_else(|| {
            Error::Data(format!("sample {}: use_objects set but objects missing", sample.id))
        })?;
        let list = dedupe_objects(objects).join(", ");
        segments.push((Segment::Objects, format!("Objects in image: {list}")));
    }

    let mut text = String::new();
    let mut spans = Vec::with_capacity(segments.len());
    for (seg, rendered) in segments {
        if !text.is_empty() {
            text.push(' ');
        }
        let start = text.len();
        text.push_str(&rendered);
        spans.push((seg, (start, text.len())));
    }
    Ok(PromptText {
        text,
        segment_spans: spans,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Sample {
        Sample {
            id: "s1".into(),
            text: "so punctual".into(),
            target: "7:22 7w not coming".into(),
            image_ref: "img".into(),
            ocr_text: Some("7w".into()),
            caption: Some("a train platform".into()),
            objects: Some(vec!["train".into(), "sign".into(), "train".into()]),
            sarcasm_score: 0.9,
        }
    }

    const OFF: PromptConfig = PromptConfig {
        use_ocr: false,
        use_objects: false,
        use_caption: false,
    };

    #[test]
    fn target_only_template() {
        let p = build_prompt(&sample(), &OFF).unwrap();
        assert_eq!(
            p.text,
            "The target of sarcasm is 7:22 7w not coming. Write a sarcastic comment based on this."
        );
        assert_eq!(p.segment_spans.len(), 1);
    }

    #[test]
    fn ocr_segment_appended() {
        let cfg = PromptConfig {
            use_ocr: true,
            ..OFF
        };
        let p = build_prompt(&sample(), &cfg).unwrap();
        assert!(p.text.ends_with(" OCR text: 7w"));
        assert_eq!(p.segment(Segment::Ocr), Some("OCR text: 7w"));
    }

    #[test]
    fn all_segments_in_order() {
        let cfg = PromptConfig {
            use_ocr: true,
            use_objects: true,
            use_caption: true,
        };
        let p = build_prompt(&sample(), &cfg).unwrap();
        let order: Vec<Segment> = p.segment_spans.iter().map(|(s, _)| *s).collect();
        assert_eq!(
            order,
            vec![Segment::Target, Segment::Ocr, Segment::Caption, Segment::Objects]
        );
        assert_eq!(
            p.segment(Segment::Objects),
            Some("Objects in image: train, sign")
        );
    }

    #[test]
    fn spans_reconstruct_text() {
        let cfg = PromptConfig {
            use_ocr: true,
            use_objects: true,
            use_caption: true,
        };
        let p = build_prompt(&sample(), &cfg).unwrap();
        let joined = p
            .segment_spans
            .iter()
            .map(|(_, (a, b))| &p.text[*a..*b])
            .collect::<Vec<_>>()
            .join(" ");
        assert_eq!(joined, p.text);
    }

    #[test]
    fn missing_enabled_field_fails_fast() {
        let mut s = sample();
        s.ocr_text = None;
        let cfg = PromptConfig {
            use_ocr: true,
            ..OFF
        };
        assert!(build_prompt(&s, &cfg).is_err());
    }

    #[test]
    fn present_but_empty_field_emits_empty_slot() {
        let mut s = sample();
        s.ocr_text = Some(String::new());
        let cfg = PromptConfig {
            use_ocr: true,
            ..OFF
        };
        let p = build_prompt(&s, &cfg).unwrap();
        assert!(p.text.ends_with(" OCR text: "));
    }

    #[test]
    fn dedupe_keeps_first_occurrence_case_sensitive() {
        let objs: Vec<String> = ["dog", "dog", "cat"].iter().map(|s| s.to_string()).collect();
        assert_eq!(dedupe_objects(&objs), vec!["dog", "cat"]);
        assert_eq!(dedupe_objects(&[]), Vec::<String>::new());
        let objs: Vec<String> = ["Cat", "cat", "Cat"].iter().map(|s| s.to_string()).collect();
        assert_eq!(dedupe_objects(&objs), vec!["Cat", "cat"]);
    }
}
