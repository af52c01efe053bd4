use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Turn;
use crate::text::normalize;

pub const DEFAULT_MAX_LEN: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SpecialToken {
    #[serde(rename = "[USER]")]
    User,
    #[serde(rename = "[DEVICE]")]
    Device,
    #[serde(rename = "[REWRITE]")]
    Rewrite,
    #[serde(rename = "[DOMAIN]")]
    Domain,
}

impl SpecialToken {
    pub fn as_str(self) -> &'static str {
        match self {
            SpecialToken::User => "[USER]",
            SpecialToken::Device => "[DEVICE]",
            SpecialToken::Rewrite => "[REWRITE]",
            SpecialToken::Domain => "[DOMAIN]",
        }
    }
}

impl fmt::Display for SpecialToken {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Token {
    Word(String),
    Special(SpecialToken),
}

impl Token {
    pub fn word(w: &str) -> Self {
        Token::Word(w.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TokenSequence {
    pub tokens: Vec<Token>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Words of `text` after normalization, no markers.
    pub fn from_text(text: &str) -> Self {
        TokenSequence {
            tokens: words(text).map(Token::Word).collect(),
        }
    }
}

impl fmt::Display for TokenSequence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, t) in self.tokens.iter().enumerate() {
            if i > 0 {
                f.write_str(" ")?;
            }
            match t {
                Token::Word(w) => f.write_str(w)?,
                Token::Special(s) => f.write_str(s.as_str())?,
            }
        }
        Ok(())
    }
}

fn words(text: &str) -> impl Iterator<Item = String> {
    normalize(text)
        .split_whitespace()
        .map(str::to_string)
        .collect::<Vec<_>>()
        .into_iter()
}

/// Flattens `[prompt] ([USER] q [DEVICE] r)* [USER] source` into one sequence.
///
/// When the result exceeds `max_len`, the oldest context tokens are dropped
/// one at a time. The prompt marker and the final `[USER] source` suffix
/// are always kept.
pub fn flatten_context(
    turns: &[Turn],
    source_query: &str,
    max_len: usize,
    prompt: Option<SpecialToken>,
) -> Result<TokenSequence> {
    let source: Vec<String> = words(source_query).collect();
    let needed = source.len() + 2;
    if max_len < needed {
        return Err(Error::SourceQueryTooLong { needed, max_len });
    }

    let mut context = Vec::new();
    for t in turns {
        context.push(Token::Special(SpecialToken::User));
        context.extend(words(&t.query).map(Token::Word));
        context.push(Token::Special(SpecialToken::Device));
        context.extend(words(&t.response).map(Token::Word));
    }

    let fixed = usize::from(prompt.is_some()) + 1 + source.len();
    let keep = (max_len - fixed).min(context.len());
    let drop = context.len() - keep;

    let mut tokens = Vec::with_capacity(fixed + keep);
    if let Some(p) = prompt {
        tokens.push(Token::Special(p));
    }
    tokens.extend(context.drain(drop..));
    tokens.push(Token::Special(SpecialToken::User));
    tokens.extend(source.into_iter().map(Token::Word));
    Ok(TokenSequence { tokens })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn w(s: &str) -> Token {
        Token::word(s)
    }
    const USER: Token = Token::Special(SpecialToken::User);
    const DEVICE: Token = Token::Special(SpecialToken::Device);

    #[test]
    fn empty_context() {
        let seq = flatten_context(&[], "play scars", 256, None).unwrap();
        assert_eq!(seq.tokens, vec![USER, w("play"), w("scars")]);
    }

    #[test]
    fn prompt_goes_first() {
        let seq = flatten_context(&[], "play scars", 256, Some(SpecialToken::Rewrite)).unwrap();
        assert_eq!(
            seq.tokens,
            vec![Token::Special(SpecialToken::Rewrite), USER, w("play"), w("scars")]
        );
    }

    #[test]
    fn motivating_session_prefix() {
        let turns = vec![
            Turn::new("play wallace", "i couldn't find wallace", 0),
            Turn::new("play wallace by the band", "sorry", 1),
        ];
        let seq = flatten_context(&turns, "play wallows songs", 256, None).unwrap();
        assert_eq!(&seq.tokens[..4], &[USER, w("play"), w("wallace"), DEVICE]);
        let n = seq.len();
        assert_eq!(&seq.tokens[n - 4..], &[USER, w("play"), w("wallows"), w("songs")]);
        assert_eq!(seq.to_string().matches("[USER]").count(), 3);
    }

    #[test]
    fn truncation_drops_oldest() {
        let turns = vec![Turn::new("one two", "three", 0), Turn::new("four", "five six", 1)];
        // full: [U] one two [D] three [U] four [D] five six [U] a b  (13 tokens)
        let seq = flatten_context(&turns, "a b", 6, None).unwrap();
        assert_eq!(
            seq.tokens,
            vec![DEVICE, w("five"), w("six"), USER, w("a"), w("b")]
        );
    }

    #[test]
    fn truncation_keeps_prompt() {
        let turns = vec![Turn::new("one two", "three", 0)];
        let seq = flatten_context(&turns, "a", 4, Some(SpecialToken::Domain)).unwrap();
        assert_eq!(
            seq.tokens,
            vec![Token::Special(SpecialToken::Domain), w("three"), USER, w("a")]
        );
    }

    #[test]
    fn source_too_long() {
        let err = flatten_context(&[], "a b c", 4, None).unwrap_err();
        assert!(matches!(err, Error::SourceQueryTooLong { needed: 5, max_len: 4 }));
    }
}
