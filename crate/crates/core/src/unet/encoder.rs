use std::collections::HashMap;

use serde::{Deserialize, Serialize};

/// Reserved id for tokens missing from the vocabulary.
pub const UNK_ID: usize = 0;
/// Reserved id whose embedding is the unconditional (empty caption) input.
pub const NULL_ID: usize = 1;
const RESERVED: usize = 2;

/// Splits a tag caption such as `"<char>, red, square"` into trimmed,
/// non-empty tokens.
pub fn tokenize(caption: &str) -> Vec<&str> {
    caption.split(',').map(str::trim).filter(|t| !t.is_empty()).collect()
}

/// Token vocabulary of the toy condition encoder. Ids 0 and 1 are reserved
/// for UNK and NULL; vocabulary tokens start at 2.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct ConditionEncoder {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

impl From<Vec<String>> for ConditionEncoder {
    fn from(tokens: Vec<String>) -> Self {
        let mut unique = Vec::new();
        let mut ids = HashMap::new();
        for t in tokens {
            if !ids.contains_key(&t) {
                ids.insert(t.clone(), unique.len() + RESERVED);
                unique.push(t);
            }
        }
        ConditionEncoder { tokens: unique, ids }
    }
}

impl From<ConditionEncoder> for Vec<String> {
    fn from(enc: ConditionEncoder) -> Self {
        enc.tokens
    }
}

/// Token ids for a caption batch, row-major `[batch, max_tokens]`; `None`
/// marks padding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedCaptions {
    pub ids: Vec<Option<usize>>,
    pub unconditional: Vec<bool>,
    pub max_tokens: usize,
}

impl ConditionEncoder {
    pub fn new<S: Into<String>>(tokens: impl IntoIterator<Item = S>) -> Self {
        tokens.into_iter().map(Into::into).collect::<Vec<String>>().into()
    }

    /// Number of embedding rows, including the reserved ids.
    pub fn vocab_size(&self) -> usize {
        self.tokens.len() + RESERVED
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> usize {
        self.ids.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.ids.contains_key(token)
    }

    /// Tokenizes each caption, truncating to `max_tokens`. Empty captions
    /// become the NULL id at every position and are flagged unconditional.
    pub fn encode(&self, captions: &[&str], max_tokens: usize) -> EncodedCaptions {
        let mut ids = Vec::with_capacity(captions.len() * max_tokens);
        let mut unconditional = Vec::with_capacity(captions.len());
        for caption in captions {
            let tokens = tokenize(caption);
            if tokens.is_empty() {
                ids.extend(std::iter::repeat_n(Some(NULL_ID), max_tokens));
                unconditional.push(true);
                continue;
            }
            let row: Vec<Option<usize>> = tokens.iter().take(max_tokens).map(|t| Some(self.id(t))).collect();
            let pad = max_tokens - row.len();
            ids.extend(row);
            ids.extend(std::iter::repeat_n(None, pad));
            unconditional.push(false);
        }
        EncodedCaptions {
            ids,
            unconditional,
            max_tokens,
        }
    }
}
