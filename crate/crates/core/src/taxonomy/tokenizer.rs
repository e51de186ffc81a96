use std::ops::Range;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::SEPARATOR;
use crate::error::{Error, Result};

pub type TokenSpan = Range<usize>;

/// Identifier of the built-in tokenizer; part of every embedding cache key.
pub const TOKENIZER_ID: &str = "stub-wordpiece-v1";

pub const PAD_TOKEN: &str = "[PAD]";
pub const CLS_TOKEN: &str = "[CLS]";
pub const SEP_TOKEN: &str = "[SEP]";
const VOCAB_SIZE: u32 = 30522;
const MAX_PIECE_CHARS: usize = 5;

/// Deterministic word-piece style tokenizer.
///
/// Words are lowercased and cut into pieces of at most five characters;
/// continuation pieces carry a `##` prefix. Punctuation characters become
/// single tokens. Ids are a stable hash of the token string, so the mapping
/// never depends on process state.
#[derive(Debug, Clone, Copy, Default)]
pub struct StubTokenizer;

impl StubTokenizer {
    pub fn tokenize(&self, text: &str) -> Vec<String> {
        let mut out = Vec::new();
        for word in text.split_whitespace() {
            let mut current = String::new();
            for ch in word.chars() {
                if ch.is_ascii_punctuation() {
                    if !current.is_empty() {
                        out.extend(Self::pieces(&current));
                        current.clear();
                    }
                    out.push(ch.to_string());
                } else {
                    current.extend(ch.to_lowercase());
                }
            }
            if !current.is_empty() {
                out.extend(Self::pieces(&current));
            }
        }
        out
    }

    fn pieces(word: &str) -> Vec<String> {
        let chars: Vec<char> = word.chars().collect();
        chars
            .chunks(MAX_PIECE_CHARS)
            .enumerate()
            .map(|(i, chunk)| {
                let piece: String = chunk.iter().collect();
                if i == 0 {
                    piece
                } else {
                    format!("##{piece}")
                }
            })
            .collect()
    }

    pub fn token_id(&self, token: &str) -> u32 {
        match token {
            PAD_TOKEN => 0,
            CLS_TOKEN => 1,
            SEP_TOKEN => 2,
            t => 3 + (fnv1a(t.as_bytes()) % u64::from(VOCAB_SIZE - 3)) as u32,
        }
    }

    /// Joins word pieces back into text: `##` pieces attach to the previous piece.
    pub fn detokenize(&self, tokens: &[String]) -> String {
        let mut out = String::new();
        for tok in tokens {
            if let Some(rest) = tok.strip_prefix("##") {
                out.push_str(rest);
            } else {
                if !out.is_empty() {
                    out.push(' ');
                }
                out.push_str(tok);
            }
        }
        out
    }
}

pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// A tokenized detection prompt padded to `max_length`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionPrompt {
    pub text: String,
    /// Category names in prompt order, including truncated ones.
    pub category_names: Vec<String>,
    /// Token strings, padded with `[PAD]` to `max_length`.
    pub tokens: Vec<String>,
    pub token_ids: Vec<u32>,
    /// Number of non-pad tokens (`[CLS]` .. `[SEP]` inclusive).
    pub valid_len: usize,
    /// Token range of each category; `None` for truncated categories.
    pub span_map: Vec<Option<TokenSpan>>,
    pub max_length: usize,
    pub truncated_categories: Vec<usize>,
}

impl DetectionPrompt {
    pub fn token_count(&self) -> usize {
        self.token_ids.len()
    }

    pub fn category_count(&self) -> usize {
        self.span_map.len()
    }

    pub fn span(&self, category: usize) -> Option<&TokenSpan> {
        self.span_map.get(category).and_then(Option::as_ref)
    }

    pub fn valid_mask(&self) -> Vec<bool> {
        (0..self.token_count()).map(|i| i < self.valid_len).collect()
    }

    /// Reconstructs a category name from its token span.
    pub fn decode_span(&self, category: usize) -> Option<String> {
        self.span(category)
            .map(|s| StubTokenizer.detokenize(&self.tokens[s.clone()]))
    }

    /// Content hash over tokenizer id, ids and length. Used in cache keys.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(TOKENIZER_ID.as_bytes());
        h.update((self.max_length as u64).to_le_bytes());
        for id in &self.token_ids {
            h.update(id.to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

/// Tokenizes a `", "`-joined prompt into a fixed-length sequence.
///
/// Categories are never split: when the next category (plus its separator and
/// the closing `[SEP]`) would not fit, it and every later category are dropped
/// and reported in `truncated_categories`.
pub fn tokenize_prompt(text: &str, max_length: usize) -> Result<DetectionPrompt> {
    if max_length < 2 {
        return Err(Error::config(format!(
            "max_length must be at least 2, got {max_length}"
        )));
    }
    let tokenizer = StubTokenizer;
    let category_names: Vec<String> = if text.is_empty() {
        Vec::new()
    } else {
        text.split(SEPARATOR).map(String::from).collect()
    };

    let mut tokens = vec![CLS_TOKEN.to_string()];
    let mut span_map = Vec::with_capacity(category_names.len());
    let mut truncated = Vec::new();
    for (i, name) in category_names.iter().enumerate() {
        if !truncated.is_empty() {
            truncated.push(i);
            span_map.push(None);
            continue;
        }
        let pieces = tokenizer.tokenize(name);
        let sep = usize::from(i > 0);
        // +1 for the closing [SEP]
        if tokens.len() + sep + pieces.len() + 1 > max_length || pieces.is_empty() {
            truncated.push(i);
            span_map.push(None);
            continue;
        }
        if sep == 1 {
            tokens.push(",".to_string());
        }
        let start = tokens.len();
        tokens.extend(pieces);
        span_map.push(Some(start..tokens.len()));
    }
    tokens.push(SEP_TOKEN.to_string());
    let valid_len = tokens.len();
    tokens.resize(max_length, PAD_TOKEN.to_string());
    let token_ids = tokens.iter().map(|t| tokenizer.token_id(t)).collect();

    if !truncated.is_empty() {
        log::warn!(
            "prompt truncated at max_length {max_length}: {} of {} categories dropped",
            truncated.len(),
            category_names.len()
        );
    }

    Ok(DetectionPrompt {
        text: text.to_string(),
        category_names,
        tokens,
        token_ids,
        valid_len,
        span_map,
        max_length,
        truncated_categories: truncated,
    })
}
