//! Byte-level tokenization for the language model and word-level
//! tokenization for the retriever.

use std::fmt;

use thiserror::Error;

pub type TokenId = u32;

pub const BOS: TokenId = 256;
pub const EOS: TokenId = 257;
pub const PAD: TokenId = 258;
pub const SEP: TokenId = 259;

/// 256 byte values plus BOS, EOS, PAD and SEP.
pub const VOCAB_SIZE: usize = 260;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TextError {
    #[error("token id {0} is outside the byte range or is a special token")]
    InvalidId(TokenId),
}

pub fn is_special(id: TokenId) -> bool {
    (BOS..=SEP).contains(&id)
}

/// One id per UTF-8 byte; no specials are inserted.
pub fn encode_bytes(text: &str) -> Vec<TokenId> {
    text.bytes().map(TokenId::from).collect()
}

/// Inverse of [`encode_bytes`]. Invalid UTF-8 runs become U+FFFD.
pub fn decode_bytes(ids: &[TokenId]) -> Result<String, TextError> {
    let bytes = ids.iter().map(|&id| u8::try_from(id).map_err(|_| TextError::InvalidId(id))).collect::<Result<Vec<u8>, _>>()?;
    Ok(String::from_utf8_lossy(&bytes).into_owned())
}

/// Decodes the byte tokens of `ids`, silently dropping specials.
pub fn decode_lossy(ids: &[TokenId]) -> String {
    let bytes: Vec<u8> = ids.iter().filter_map(|&id| u8::try_from(id).ok()).collect();
    String::from_utf8_lossy(&bytes).into_owned()
}

/// A lowercase, punctuation-trimmed, whitespace-free retrieval term.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct WordToken(String);

impl WordToken {
    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for WordToken {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Lowercase, split on Unicode whitespace, strip leading/trailing
/// punctuation, drop empties.
pub fn tokenize_words(text: &str) -> Vec<WordToken> {
    text.split_whitespace()
        .filter_map(|w| {
            let trimmed = w.trim_matches(|c: char| c.is_ascii_punctuation() || is_unicode_punct(c));
            if trimmed.is_empty() {
                None
            } else {
                Some(WordToken(trimmed.to_lowercase()))
            }
        })
        .collect()
}

fn is_unicode_punct(c: char) -> bool {
    matches!(c, '\u{2018}'..='\u{201F}' | '\u{2026}' | '\u{00AB}' | '\u{00BB}' | '\u{00BF}' | '\u{00A1}')
}
