//! Whitespace tokenizer with a vocabulary built from the training split.
//! Ids 0 and 1 are reserved for padding and unknown tokens.

use std::collections::BTreeSet;
use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocab {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Build from a corpus: lowercased whitespace tokens, sorted for
    /// determinism, ids starting after the reserved slots.
    pub fn build<'a>(sentences: impl IntoIterator<Item = &'a str>) -> Self {
        let mut words = BTreeSet::new();
        for s in sentences {
            for w in s.split_whitespace() {
                words.insert(w.to_lowercase());
            }
        }
        let mut tokens = vec!["<pad>".to_string(), "<unk>".to_string()];
        tokens.extend(words);
        Vocab::from_tokens(tokens)
    }

    pub fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocab { tokens, index }
    }

    /// Rebuild the lookup table after deserialization.
    pub fn rebuild_index(&mut self) {
        self.index = self.tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> usize {
        *self.index.get(token).unwrap_or(&UNK_ID)
    }
}

/// Token ids padded to a fixed length, with the true length kept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenizedCaption {
    pub ids: Vec<usize>,
    pub len: usize,
}

impl TokenizedCaption {
    pub fn valid_ids(&self) -> &[usize] {
        &self.ids[..self.len]
    }
}

/// Lowercase, split on whitespace, map to ids, truncate or pad to `max_len`.
pub fn tokenize(caption: &str, vocab: &Vocab, max_len: usize) -> Result<TokenizedCaption> {
    let words: Vec<String> = caption.split_whitespace().map(|w| w.to_lowercase()).collect();
    if words.is_empty() {
        return Err(Error::validation(None, "caption must contain at least one token"));
    }
    let len = words.len().min(max_len);
    let mut ids: Vec<usize> = words.iter().take(len).map(|w| vocab.id(w)).collect();
    ids.resize(max_len, PAD_ID);
    Ok(TokenizedCaption { ids, len })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pads_and_records_length() {
        let vocab = Vocab::build(["the red square"]);
        let t = tokenize("the red square", &vocab, 5).unwrap();
        assert_eq!(t.len, 3);
        assert_eq!(t.ids.len(), 5);
        assert_eq!(&t.ids[3..], &[PAD_ID, PAD_ID]);
        assert_eq!(t.ids[0], vocab.id("the"));
    }

    #[test]
    fn unknown_word_maps_to_unk() {
        let vocab = Vocab::build(["the red square"]);
        let t = tokenize("the blue square", &vocab, 4).unwrap();
        assert_eq!(t.ids[1], UNK_ID);
    }

    #[test]
    fn truncates_to_max_len() {
        let vocab = Vocab::build(["a b c d e"]);
        let t = tokenize("a b c d e", &vocab, 3).unwrap();
        assert_eq!(t.len, 3);
        assert_eq!(t.ids.len(), 3);
    }

    #[test]
    fn empty_caption_rejected() {
        let vocab = Vocab::build(["x"]);
        assert!(tokenize("   ", &vocab, 4).is_err());
    }

    #[test]
    fn build_is_deterministic_and_case_folding() {
        let a = Vocab::build(["The Red square", "blue circle"]);
        let b = Vocab::build(["blue circle", "the red SQUARE"]);
        assert_eq!(a.tokens(), b.tokens());
        assert_eq!(a.id("red"), b.id("red"));
    }
}
