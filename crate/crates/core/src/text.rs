//! Whitespace tokenizer with punctuation detachment.
//!
//! Text is split on Unicode whitespace. Within each chunk, leading and
//! trailing ASCII punctuation characters are detached one character per
//! token; punctuation inside a chunk stays put, so `F-35` and `U.S` survive
//! intact while `F-35,` yields `F-35` and `,`.
//!
//! Offsets are counted in Unicode scalar values (not bytes), which is also
//! how the dataset files express entity spans.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Token {
    pub surface: String,
    pub char_start: usize,
    pub char_end: usize,
}

pub fn tokenize(text: &str) -> Result<Vec<Token>> {
    if text.trim().is_empty() {
        return Err(Error::EmptyInput("text is empty or whitespace-only".into()));
    }
    let chars: Vec<char> = text.chars().collect();
    let mut tokens = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        if chars[i].is_whitespace() {
            i += 1;
            continue;
        }
        let start = i;
        while i < chars.len() && !chars[i].is_whitespace() {
            i += 1;
        }
        split_chunk(&chars, start, i, &mut tokens);
    }
    Ok(tokens)
}

fn split_chunk(chars: &[char], start: usize, end: usize, out: &mut Vec<Token>) {
    let mut lo = start;
    let mut hi = end;
    while lo < hi && chars[lo].is_ascii_punctuation() {
        out.push(make_token(chars, lo, lo + 1));
        lo += 1;
    }
    let mut trailing = Vec::new();
    while hi > lo && chars[hi - 1].is_ascii_punctuation() {
        trailing.push(make_token(chars, hi - 1, hi));
        hi -= 1;
    }
    if lo < hi {
        out.push(make_token(chars, lo, hi));
    }
    out.extend(trailing.into_iter().rev());
}

fn make_token(chars: &[char], start: usize, end: usize) -> Token {
    Token {
        surface: chars[start..end].iter().collect(),
        char_start: start,
        char_end: end,
    }
}

/// Substring by scalar-value offsets. Out-of-range ends are truncated.
pub fn char_slice(text: &str, start: usize, end: usize) -> String {
    text.chars().skip(start).take(end.saturating_sub(start)).collect()
}

pub fn char_len(text: &str) -> usize {
    text.chars().count()
}
