//! Word-level vocabulary with four reserved ids.
//!
//! Ordering is the reproducibility contract: non-reserved ids are assigned
//! by descending corpus frequency with lexicographic tie-break, so the same
//! corpus always yields byte-identical vocabularies.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const BOS: u32 = 2;
pub const EOS: u32 = 3;
pub const RESERVED: usize = 4;

const RESERVED_TOKENS: [&str; RESERVED] = ["<pad>", "<unk>", "<bos>", "<eos>"];

/// Token table: index is the id. The first four entries are the reserved
/// markers; the tokenizer can never produce them from text (it strips
/// punctuation), so there are no collisions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "VocabRepr", into = "VocabRepr")]
pub struct Vocab {
    tokens: Vec<String>,
    map: HashMap<String, u32>,
}

#[derive(Serialize, Deserialize)]
struct VocabRepr {
    tokens: Vec<String>,
}

impl From<Vocab> for VocabRepr {
    fn from(v: Vocab) -> Self {
        VocabRepr { tokens: v.tokens }
    }
}

impl TryFrom<VocabRepr> for Vocab {
    type Error = Error;
    fn try_from(r: VocabRepr) -> Result<Self> {
        Vocab::from_tokens(r.tokens)
    }
}

/// Lowercased alphanumeric runs; everything else is a separator.
pub fn split_words(text: &str) -> Vec<String> {
    let mut words = Vec::new();
    let mut cur = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            for c in ch.to_lowercase() {
                cur.push(c);
            }
        } else if !cur.is_empty() {
            words.push(std::mem::take(&mut cur));
        }
    }
    if !cur.is_empty() {
        words.push(cur);
    }
    words
}

impl Vocab {
    /// Build from a corpus, keeping the `max_size − 4` most frequent tokens
    /// (frequency descending, then lexicographic). Total id count is
    /// `min(max_size, 4 + distinct tokens)`.
    pub fn build<S: AsRef<str>>(corpus: &[S], max_size: usize) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::Input("build_vocab: empty corpus".to_string()));
        }
        if max_size < RESERVED {
            return Err(Error::Input(format!(
                "build_vocab: max_size {max_size} below the {RESERVED} reserved ids"
            )));
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        for text in corpus {
            for w in split_words(text.as_ref()) {
                *counts.entry(w).or_insert(0) += 1;
            }
        }
        let mut entries: Vec<(String, usize)> = counts.into_iter().collect();
        entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        entries.truncate(max_size - RESERVED);
        let mut tokens: Vec<String> = RESERVED_TOKENS.iter().map(|s| s.to_string()).collect();
        tokens.extend(entries.into_iter().map(|(t, _)| t));
        Vocab::from_tokens(tokens)
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED
            || tokens[..RESERVED]
                .iter()
                .zip(RESERVED_TOKENS)
                .any(|(a, b)| a != b)
        {
            return Err(Error::Input(
                "vocab must start with the four reserved tokens".to_string(),
            ));
        }
        let mut map = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if map.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Input(format!("vocab: duplicate token {t:?}")));
            }
        }
        Ok(Vocab { tokens, map })
    }

    /// Total id count, reserved included.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false // four reserved ids always exist
    }

    pub fn n_non_reserved(&self) -> usize {
        self.tokens.len() - RESERVED
    }

    pub fn id(&self, token: &str) -> u32 {
        self.map.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Ids of length `max_len`: BOS + words (UNK when unknown) + EOS,
    /// truncated so EOS is always present, right-padded with PAD.
    /// Returns (ids, valid_len).
    pub fn encode_prompt(&self, prompt: &str, max_len: usize) -> (Vec<u32>, usize) {
        let words = split_words(prompt);
        let body = max_len.saturating_sub(2).min(words.len());
        let mut ids = Vec::with_capacity(max_len);
        ids.push(BOS);
        for w in &words[..body] {
            ids.push(self.id(w));
        }
        ids.push(EOS);
        let valid = ids.len();
        ids.resize(max_len, PAD);
        (ids, valid)
    }

    /// Render ids back to text (reserved ids skipped). Inverse of
    /// `encode_prompt` up to casing/punctuation.
    pub fn decode(&self, ids: &[u32]) -> String {
        let words: Vec<&str> = ids
            .iter()
            .filter(|&&i| i as usize >= RESERVED && (i as usize) < self.tokens.len())
            .map(|&i| self.token(i))
            .collect();
        words.join(" ")
    }
}
