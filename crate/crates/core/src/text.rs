//! String utilities shared across the pipeline: normalization, whitespace
//! tokenization with character offsets, and Levenshtein distance.

use unicode_normalization::UnicodeNormalization;

/// NFC, lowercase, and collapse whitespace runs into single spaces.
pub fn normalize(s: &str) -> String {
    let lowered: String = s.nfc().collect::<String>().to_lowercase();
    let mut out = String::with_capacity(lowered.len());
    for word in lowered.split_whitespace() {
        if !out.is_empty() {
            out.push(' ');
        }
        out.push_str(word);
    }
    out
}

/// A whitespace-delimited word with its character offsets in the source string.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WordSpan<'a> {
    pub text: &'a str,
    pub start: usize,
    pub end: usize,
}

/// Splits on Unicode whitespace, reporting character (not byte) offsets.
pub fn words_with_offsets(s: &str) -> Vec<WordSpan<'_>> {
    let mut out = Vec::new();
    let mut word_start: Option<(usize, usize)> = None;
    let mut char_pos = 0;
    for (byte_pos, c) in s.char_indices() {
        if c.is_whitespace() {
            if let Some((b0, c0)) = word_start.take() {
                out.push(WordSpan {
                    text: &s[b0..byte_pos],
                    start: c0,
                    end: char_pos,
                });
            }
        } else if word_start.is_none() {
            word_start = Some((byte_pos, char_pos));
        }
        char_pos += 1;
    }
    if let Some((b0, c0)) = word_start {
        out.push(WordSpan {
            text: &s[b0..],
            start: c0,
            end: char_pos,
        });
    }
    out
}

/// Converts a character offset to a byte offset; `None` when out of range.
pub fn char_to_byte(s: &str, char_offset: usize) -> Option<usize> {
    if char_offset == 0 {
        return Some(0);
    }
    let mut count = 0;
    for (b, _) in s.char_indices() {
        if count == char_offset {
            return Some(b);
        }
        count += 1;
    }
    (count == char_offset).then_some(s.len())
}

/// Substring by character offsets `[start, end)`.
pub fn char_slice(s: &str, start: usize, end: usize) -> Option<&str> {
    if start > end {
        return None;
    }
    let b0 = char_to_byte(s, start)?;
    let b1 = char_to_byte(s, end)?;
    Some(&s[b0..b1])
}

/// Levenshtein distance over Unicode scalar values.
pub fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    if a.is_empty() {
        return b.len();
    }
    if b.is_empty() {
        return a.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Edit distance normalized by the longer string, kept as an exact ratio so
/// comparisons never suffer float ties.
#[derive(Debug, Clone, Copy)]
pub struct EditRatio {
    pub edits: usize,
    pub len: usize,
}

impl EditRatio {
    pub fn between(a: &str, b: &str) -> Self {
        let len = a.chars().count().max(b.chars().count());
        EditRatio {
            edits: levenshtein(a, b),
            len,
        }
    }

    pub fn value(self) -> f64 {
        if self.len == 0 {
            0.0
        } else {
            self.edits as f64 / self.len as f64
        }
    }

    /// `self <= num/den` without floating point.
    pub fn at_most(self, num: usize, den: usize) -> bool {
        self.edits * den <= num * self.len
    }

    pub fn cmp_ratio(self, other: EditRatio) -> std::cmp::Ordering {
        let l = self.edits * other.len.max(1);
        let r = other.edits * self.len.max(1);
        l.cmp(&r)
    }
}

pub fn normalized_edit_distance(a: &str, b: &str) -> f64 {
    EditRatio::between(a, b).value()
}
