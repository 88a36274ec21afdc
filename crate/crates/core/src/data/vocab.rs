//! Whitespace tokenizer over the template word list.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::catalog::{CATEGORIES, COLORS, LOCATIONS, MATERIALS, SIZES};
use crate::error::{LensError, Result};

pub const PAD: &str = "[PAD]";
pub const CLS: &str = "[CLS]";
pub const PAD_ID: u32 = 0;
pub const CLS_ID: u32 = 1;

const WORDS: [&str; 16] = [
    "is", "there", "a", "the", "?", "what", "color", "material", "size", "made", "of", "or", "on", "and", "are",
    "same",
];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    index: BTreeMap<String, u32>,
}

impl TryFrom<Vec<String>> for Vocab {
    type Error = LensError;
    fn try_from(tokens: Vec<String>) -> Result<Self> {
        Self::from_tokens(tokens)
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.tokens
    }
}

/// Token ids padded to a fixed length; `mask` is true on real tokens.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Tokenized {
    pub ids: Vec<u32>,
    pub mask: Vec<bool>,
}

impl Default for Vocab {
    fn default() -> Self {
        let mut tokens: Vec<String> = vec![PAD.into(), CLS.into()];
        for list in [&WORDS[..], &CATEGORIES[..], &COLORS[..], &MATERIALS[..], &SIZES[..], &LOCATIONS[..]] {
            for w in list {
                if !tokens.iter().any(|t| t == w) {
                    tokens.push(w.to_string());
                }
            }
        }
        Self::from_tokens(tokens).expect("built-in vocabulary")
    }
}

impl Vocab {
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.first().map(String::as_str) != Some(PAD) || tokens.get(1).map(String::as_str) != Some(CLS) {
            return Err(LensError::Config("vocabulary must start with [PAD], [CLS]".into()));
        }
        let mut index = BTreeMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(LensError::Config(format!("duplicate token `{t}`")));
            }
        }
        Ok(Self { tokens, index })
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

    pub fn id(&self, word: &str) -> Result<u32> {
        self.index.get(word).copied().ok_or_else(|| LensError::Vocabulary(word.to_string()))
    }

    /// CLS followed by the words of `text`, padded to `max_len`.
    pub fn tokenize(&self, text: &str, max_len: usize) -> Result<Tokenized> {
        let mut ids = vec![CLS_ID];
        for w in text.split_whitespace() {
            ids.push(self.id(w)?);
        }
        if ids.len() > max_len {
            return Err(LensError::Contract(format!("question of {} tokens exceeds {max_len}", ids.len())));
        }
        let mut mask = vec![true; ids.len()];
        ids.resize(max_len, PAD_ID);
        mask.resize(max_len, false);
        Ok(Tokenized { ids, mask })
    }

    pub fn detokenize(&self, ids: &[u32]) -> String {
        let words: Vec<&str> = ids
            .iter()
            .filter(|&&i| i != PAD_ID && i != CLS_ID)
            .map(|&i| self.tokens.get(i as usize).map_or("?", String::as_str))
            .collect();
        words.join(" ")
    }

    /// Token strings including CLS, without padding.
    pub fn words(&self, ids: &[u32]) -> Vec<String> {
        ids.iter().filter(|&&i| i != PAD_ID).map(|&i| self.tokens[i as usize].clone()).collect()
    }
}
