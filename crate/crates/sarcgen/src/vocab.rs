//! Whitespace word-level vocabulary with reserved special tokens, stored on
//! disk as a token-to-id JSON map.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;

const SPECIALS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Vocabulary {
    tokens: Vec<String>,
    #[serde(skip)]
    index: BTreeMap<String, u32>,
}

impl Vocabulary {
    /// Build from texts: tokens ranked by descending frequency, ties broken
    /// alphabetically, after the four reserved specials.
    pub fn build<'a, I: IntoIterator<Item = &'a str>>(texts: I) -> Vocabulary {
        let mut freq: BTreeMap<&str, usize> = BTreeMap::new();
        for text in texts {
            for tok in text.split_whitespace() {
                *freq.entry(tok).or_insert(0) += 1;
            }
        }
        let mut ranked: Vec<(&str, usize)> = freq.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        tokens.extend(ranked.into_iter().map(|(t, _)| t.to_string()));
        let mut v = Vocabulary {
            tokens,
            index: BTreeMap::new(),
        };
        v.reindex();
        v
    }

    pub(crate) fn reindex(&mut self) {
        self.index = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id_of(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(|s| s.as_str())
    }

    pub fn is_special(id: u32) -> bool {
        id < SPECIALS.len() as u32
    }

    /// Encode text into ids, truncated to `max_tokens`.
    pub fn encode(&self, text: &str, max_tokens: usize) -> TokenSequence {
        let ids = text
            .split_whitespace()
            .take(max_tokens)
            .map(|t| self.id_of(t))
            .collect();
        TokenSequence { ids }
    }

    /// Join non-special tokens with single spaces.
    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .filter(|&&id| !Self::is_special(id))
            .filter_map(|&id| self.token(id))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Serialize as a token-to-id map.
    pub fn save(&self, path: &Path) -> Result<()> {
        let map: BTreeMap<&str, u32> = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.as_str(), i as u32))
            .collect();
        let json = serde_json::to_string_pretty(&map)?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Vocabulary> {
        let raw = std::fs::read_to_string(path)?;
        let map: BTreeMap<String, u32> = serde_json::from_str(&raw)?;
        let mut tokens = vec![String::new(); map.len()];
        for (tok, id) in &map {
            let slot = tokens
                .get_mut(*id as usize)
                .ok_or_else(|| Error::Data(format!("vocab id {id} out of range")))?;
            if !slot.is_empty() {
                return Err(Error::Data(format!("vocab id {id} assigned twice")));
            }
            *slot = tok.clone();
        }
        for (i, s) in SPECIALS.iter().enumerate() {
            if tokens.get(i).map(|t| t.as_str()) != Some(*s) {
                return Err(Error::Data(format!("vocab missing special {s} at id {i}")));
            }
        }
        let mut v = Vocabulary {
            tokens,
            index: BTreeMap::new(),
        };
        v.reindex();
        Ok(v)
    }
}

/// A sequence of token ids, all within the owning vocabulary.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
}

impl TokenSequence {
    pub fn new(ids: Vec<u32>) -> Self {
        TokenSequence { ids }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Validate ids against a vocabulary size and a length cap.
    pub fn validate(&self, vocab_size: usize, max_tokens: usize) -> Result<()> {
        if self.ids.len() > max_tokens {
            return Err(Error::Shape(format!(
                "sequence length {} exceeds max {}",
                self.ids.len(),
                max_tokens
            )));
        }
        for &id in &self.ids {
            if id as usize >= vocab_size {
                return Err(Error::Data(format!(
                    "token id {id} out of vocabulary ({vocab_size})"
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn specials_come_first() {
        let v = Vocabulary::build(["b a a"]);
        assert_eq!(v.id_of("<pad>"), PAD);
        assert_eq!(v.id_of("<bos>"), BOS);
        assert_eq!(v.id_of("<eos>"), EOS);
        assert_eq!(v.id_of("<unk>"), UNK);
        // "a" has frequency 2, "b" 1
        assert_eq!(v.id_of("a"), 4);
        assert_eq!(v.id_of("b"), 5);
    }

    #[test]
    fn unknown_maps_to_unk() {
        let v = Vocabulary::build(["hello"]);
        assert_eq!(v.id_of("missing"), UNK);
    }

    #[test]
    fn encode_decode_roundtrip() {
        let v = Vocabulary::build(["one two three"]);
        let seq = v.encode("three one", 16);
        assert_eq!(v.decode(&seq.ids), "three one");
    }

    #[test]
    fn encode_truncates() {
        let v = Vocabulary::build(["a b c d"]);
        assert_eq!(v.encode("a b c d", 2).len(), 2);
    }

    #[test]
    fn save_load_roundtrip() {
        let v = Vocabulary::build(["x y z y"]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.json");
        v.save(&path).unwrap();
        let loaded = Vocabulary::load(&path).unwrap();
        assert_eq!(loaded.len(), v.len());
        assert_eq!(loaded.id_of("y"), v.id_of("y"));
    }

    #[test]
    fn validate_rejects_out_of_range() {
        let seq = TokenSequence::new(vec![0, 1, 99]);
        assert!(seq.validate(10, 16).is_err());
        assert!(seq.validate(100, 2).is_err());
        assert!(seq.validate(100, 16).is_ok());
    }
}
