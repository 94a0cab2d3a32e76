//! The single prompt template shared by every mode.

use crate::text::{encode_bytes, TokenId, BOS};

/// Passage block followed by the question line, as text.
pub fn prompt_text<'a>(question: &str, passages: impl IntoIterator<Item = &'a str>) -> String {
    let mut out = String::new();
    for (i, p) in passages.into_iter().enumerate() {
        out.push_str(&passage_line(i + 1, p));
    }
    out.push_str(&question_line(question));
    out
}

pub fn passage_line(i: usize, text: &str) -> String {
    format!("Passage {i}: {}\n", text.trim())
}

pub fn question_line(question: &str) -> String {
    format!("Question: {}\nAnswer:", question.trim())
}

/// `[BOS]` plus the UTF-8 bytes of the prompt text.
pub fn prompt_ids<'a>(question: &str, passages: impl IntoIterator<Item = &'a str>) -> Vec<TokenId> {
    let mut ids = vec![BOS];
    ids.extend(encode_bytes(&prompt_text(question, passages)));
    ids
}

/// A complete worked example: prompt then ` answer`.
pub fn answered_text<'a>(question: &str, passages: impl IntoIterator<Item = &'a str>, answer: &str) -> String {
    format!("{} {}", prompt_text(question, passages), answer.trim())
}
