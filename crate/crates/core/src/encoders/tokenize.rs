//! Word-level tokenizer shared by encoding, statistics and text cleaning.
//!
//! Text is casefolded and split at whitespace and punctuation boundaries:
//! maximal alphanumeric runs form one token each, every other
//! non-whitespace character is a token of its own.

use serde::{Deserialize, Serialize};

pub const START_TOKEN: &str = "<|startoftext|>";
pub const END_TOKEN: &str = "<|endoftext|>";

/// Tokens of one sentence, bracketed by the start and end sentinels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    tokens: Vec<String>,
}

impl TokenSequence {
    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Tokens between the sentinels.
    pub fn content(&self) -> &[String] {
        &self.tokens[1..self.tokens.len() - 1]
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    /// Always false: a sequence holds at least the two sentinels.
    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Byte ranges of the tokens of `text`, in order.
pub fn token_spans(text: &str) -> Vec<(usize, usize)> {
    let mut spans = Vec::new();
    let mut run_start: Option<usize> = None;
    for (i, ch) in text.char_indices() {
        if ch.is_alphanumeric() {
            run_start.get_or_insert(i);
            continue;
        }
        if let Some(s) = run_start.take() {
            spans.push((s, i));
        }
        if !ch.is_whitespace() {
            spans.push((i, i + ch.len_utf8()));
        }
    }
    if let Some(s) = run_start {
        spans.push((s, text.len()));
    }
    spans
}

/// Number of tokens in `text`, sentinels excluded.
pub fn count_tokens(text: &str) -> usize {
    token_spans(text).len()
}

pub fn tokenize(text: &str) -> TokenSequence {
    let spans = token_spans(text);
    let mut tokens = Vec::with_capacity(spans.len() + 2);
    tokens.push(START_TOKEN.to_string());
    tokens.extend(spans.into_iter().map(|(s, e)| text[s..e].to_lowercase()));
    tokens.push(END_TOKEN.to_string());
    TokenSequence { tokens }
}
