//! Hashed bag-of-features: word unigrams, boundary-padded character
//! trigrams, and atomic special-token features.

use super::tokens::{Token, TokenSequence};

pub const DEFAULT_FEATURE_DIM: u32 = 1 << 18;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// 64-bit FNV-1a over raw bytes.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = FNV_OFFSET;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// Sparse count vector, entries sorted by index with no duplicates.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct FeatureVector {
    pub dim: u32,
    entries: Vec<(u32, u32)>,
}

impl FeatureVector {
    pub fn from_counts(dim: u32, mut raw: Vec<(u32, u32)>) -> Self {
        raw.retain(|&(_, c)| c > 0);
        raw.sort_unstable_by_key(|&(i, _)| i);
        let mut entries: Vec<(u32, u32)> = Vec::with_capacity(raw.len());
        for (i, c) in raw {
            debug_assert!(i < dim);
            match entries.last_mut() {
                Some((j, acc)) if *j == i => *acc += c,
                _ => entries.push((i, c)),
            }
        }
        FeatureVector { dim, entries }
    }

    pub fn entries(&self) -> &[(u32, u32)] {
        &self.entries
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn nnz(&self) -> usize {
        self.entries.len()
    }

    pub fn get(&self, index: u32) -> u32 {
        self.entries
            .binary_search_by_key(&index, |&(i, _)| i)
            .map(|p| self.entries[p].1)
            .unwrap_or(0)
    }

    /// Every count multiplied by `c`.
    pub fn scaled(&self, c: u32) -> Self {
        FeatureVector::from_counts(
            self.dim,
            self.entries.iter().map(|&(i, n)| (i, n * c)).collect(),
        )
    }
}

/// Feature strings for one token, namespaced so a word never collides with
/// an identical trigram.
pub fn token_features(token: &Token, out: &mut Vec<String>) {
    match token {
        Token::Special(s) => out.push(format!("s:{}", s.as_str())),
        Token::Word(w) => {
            out.push(format!("w:{w}"));
            let padded: Vec<char> = std::iter::once('^')
                .chain(w.chars())
                .chain(std::iter::once('$'))
                .collect();
            for win in padded.windows(3) {
                let mut f = String::with_capacity(2 + 12);
                f.push_str("t:");
                f.extend(win);
                out.push(f);
            }
        }
    }
}

pub fn feature_index(feature: &str, dim: u32) -> u32 {
    (fnv1a64(feature.as_bytes()) % u64::from(dim)) as u32
}

pub fn featurize(seq: &TokenSequence, dim: u32) -> FeatureVector {
    let mut names = Vec::with_capacity(seq.len() * 6);
    for t in &seq.tokens {
        token_features(t, &mut names);
    }
    let raw = names.iter().map(|f| (feature_index(f, dim), 1)).collect();
    FeatureVector::from_counts(dim, raw)
}

/// Features of a bare text (entity values are encoded this way).
pub fn featurize_text(text: &str, dim: u32) -> FeatureVector {
    featurize(&TokenSequence::from_text(text), dim)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::tokens::SpecialToken;
    use std::collections::BTreeMap;

    #[test]
    fn fnv_reference_vectors() {
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn empty_sequence() {
        assert!(featurize(&TokenSequence::default(), 1024).is_empty());
    }

    // Independent enumeration: slide over the padded string by byte index.
    fn enumerate_by_hand(words: &[&str]) -> BTreeMap<String, u32> {
        let mut m = BTreeMap::new();
        for w in words {
            *m.entry(format!("w:{w}")).or_default() += 1;
            let p = format!("^{w}$");
            let b = p.as_bytes();
            for i in 0..b.len() - 2 {
                *m.entry(format!("t:{}", std::str::from_utf8(&b[i..i + 3]).unwrap()))
                    .or_default() += 1;
            }
        }
        m
    }

    #[test]
    fn play_scars_feature_set() {
        let expected = enumerate_by_hand(&["play", "scars"]);
        let names: Vec<&str> = expected.keys().map(String::as_str).collect();
        assert_eq!(
            names,
            vec![
                "t:^pl", "t:^sc", "t:ars", "t:ay$", "t:car", "t:lay", "t:pla", "t:rs$",
                "t:sca", "w:play", "w:scars"
            ]
        );
        let dim = 1 << 18;
        let fv = featurize(&TokenSequence::from_text("play scars"), dim);
        let want = FeatureVector::from_counts(
            dim,
            expected.iter().map(|(k, &c)| (feature_index(k, dim), c)).collect(),
        );
        assert_eq!(fv, want);
        assert_eq!(fv.nnz(), 11);
        assert!(fv.entries().iter().all(|&(_, c)| c == 1));
    }

    #[test]
    fn repeated_word_doubles_counts() {
        let dim = 1 << 18;
        let one = featurize(&TokenSequence::from_text("play"), dim);
        let two = featurize(&TokenSequence::from_text("play play"), dim);
        assert_eq!(two, one.scaled(2));
    }

    #[test]
    fn specials_are_atomic() {
        let seq = TokenSequence {
            tokens: vec![Token::Special(SpecialToken::User)],
        };
        let fv = featurize(&seq, 1 << 18);
        assert_eq!(fv.nnz(), 1);
        assert_eq!(fv.get(feature_index("s:[USER]", 1 << 18)), 1);
    }

    #[test]
    fn single_char_word() {
        let mut out = Vec::new();
        token_features(&Token::word("a"), &mut out);
        assert_eq!(out, vec!["w:a", "t:^a$"]);
    }
}
