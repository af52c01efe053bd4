//! Hard negatives: lexical (BM25 over the entity pool) and two-pass
//! (wrong top-1 predictions of an earlier checkpoint).

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::EncoderWeights;
use crate::error::Result;
use crate::index::PersonalIndex;
use crate::jsonl;
use crate::model::Session;
use crate::retrieval::{rank, InferenceMode};
use crate::text::normalize;

/// Example id → entity values to use as extra negatives for it.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct HardNegativeSet {
    map: BTreeMap<u64, Vec<String>>,
}

#[derive(Serialize, Deserialize)]
struct Line {
    example_id: u64,
    negatives: Vec<String>,
}

impl HardNegativeSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Records `value` unless it is the example's own target or already
    /// present.
    pub fn insert(&mut self, example_id: u64, value: &str, target: &str) -> bool {
        if value == target {
            return false;
        }
        let list = self.map.entry(example_id).or_default();
        if list.iter().any(|v| v == value) {
            return false;
        }
        list.push(value.to_string());
        true
    }

    pub fn get(&self, example_id: u64) -> Option<&[String]> {
        self.map.get(&example_id).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (u64, &[String])> {
        self.map.iter().map(|(k, v)| (*k, v.as_slice()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let lines: Vec<Line> = self
            .map
            .iter()
            .map(|(k, v)| Line {
                example_id: *k,
                negatives: v.clone(),
            })
            .collect();
        jsonl::write(path, &lines)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let lines: Vec<Line> = jsonl::read(path)?;
        let mut map = BTreeMap::new();
        for l in lines {
            map.insert(l.example_id, l.negatives);
        }
        Ok(HardNegativeSet { map })
    }
}

/// Okapi BM25 over whitespace-tokenized documents.
#[derive(Debug, Clone)]
pub struct Bm25 {
    docs: Vec<String>,
    lengths: Vec<usize>,
    postings: HashMap<String, Vec<(usize, u32)>>,
    avg_len: f64,
    pub k1: f64,
    pub b: f64,
}

impl Bm25 {
    pub fn new<S: AsRef<str>>(docs: &[S]) -> Self {
        let docs: Vec<String> = docs.iter().map(|d| normalize(d.as_ref())).collect();
        let mut postings: HashMap<String, Vec<(usize, u32)>> = HashMap::new();
        let mut lengths = Vec::with_capacity(docs.len());
        for (i, d) in docs.iter().enumerate() {
            let mut tf: BTreeMap<&str, u32> = BTreeMap::new();
            let mut len = 0;
            for t in d.split_whitespace() {
                *tf.entry(t).or_default() += 1;
                len += 1;
            }
            lengths.push(len);
            for (t, c) in tf {
                postings.entry(t.to_string()).or_default().push((i, c));
            }
        }
        let avg_len = if docs.is_empty() {
            0.0
        } else {
            lengths.iter().sum::<usize>() as f64 / docs.len() as f64
        };
        Bm25 {
            docs,
            lengths,
            postings,
            avg_len,
            k1: 1.2,
            b: 0.75,
        }
    }

    pub fn idf(&self, term: &str) -> f64 {
        let n = self.docs.len() as f64;
        let df = self.postings.get(term).map_or(0, Vec::len) as f64;
        ((n - df + 0.5) / (df + 0.5) + 1.0).ln()
    }

    /// Score of every document with at least one query term.
    pub fn scores(&self, query: &str) -> Vec<(usize, f64)> {
        let mut acc: BTreeMap<usize, f64> = BTreeMap::new();
        for term in normalize(query).split_whitespace() {
            let Some(post) = self.postings.get(term) else {
                continue;
            };
            let idf = self.idf(term);
            for &(doc, tf) in post {
                let tf = f64::from(tf);
                let norm = 1.0 - self.b + self.b * self.lengths[doc] as f64 / self.avg_len;
                *acc.entry(doc).or_default() += idf * tf * (self.k1 + 1.0) / (tf + self.k1 * norm);
            }
        }
        acc.into_iter().filter(|(_, s)| *s > 0.0).collect()
    }

    pub fn doc(&self, i: usize) -> &str {
        &self.docs[i]
    }
}

/// Top-`k` pool entities by BM25 against `query`, never the target.
/// Zero-scoring entities are not returned; ties go to the smaller value.
pub fn bm25_mine(pool: &Bm25, target: &str, query: &str, k: usize) -> Vec<String> {
    let target = normalize(target);
    let mut scored: Vec<(usize, f64)> = pool
        .scores(query)
        .into_iter()
        .filter(|(d, _)| pool.doc(*d) != target)
        .collect();
    scored.sort_by(|a, b| {
        b.1.total_cmp(&a.1)
            .then_with(|| pool.doc(a.0).cmp(pool.doc(b.0)))
    });
    let mut out: Vec<String> = Vec::new();
    for (d, _) in scored {
        if out.len() == k {
            break;
        }
        let v = pool.doc(d);
        if !out.iter().any(|o| o == v) {
            out.push(v.to_string());
        }
    }
    out
}

/// Retrieval with the first-pass checkpoint over each labeled session; a
/// top-1 that differs from the target becomes that example's hard negative.
/// Example ids are positions in `sessions`, as in `build_examples`.
pub fn mine_two_pass(
    w: &EncoderWeights,
    sessions: &[Session],
    index: &PersonalIndex,
    mode: &InferenceMode,
) -> Result<HardNegativeSet> {
    let mut set = HardNegativeSet::new();
    for (i, s) in sessions.iter().enumerate() {
        let (Some(target), Some(source)) = (&s.target_entity, s.source_turn()) else {
            continue;
        };
        let ranking = rank(&s.user, &source.query, s.context(), index, w, 1, mode)?;
        if let Some(top) = ranking.scored.first() {
            set.insert(i as u64, &top.record.value, &target.value);
        }
    }
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Straightforward re-evaluation of the BM25 formula, one document at a
    /// time, with no inverted index.
    fn reference_bm25(docs: &[&str], query: &str, k1: f64, b: f64) -> Vec<f64> {
        let toks: Vec<Vec<&str>> = docs.iter().map(|d| d.split(' ').collect()).collect();
        let n = docs.len() as f64;
        let avg = toks.iter().map(Vec::len).sum::<usize>() as f64 / n;
        toks.iter()
            .map(|doc| {
                let mut s = 0.0;
                for q in query.split(' ') {
                    let df = toks.iter().filter(|d| d.contains(&q)).count() as f64;
                    let tf = doc.iter().filter(|t| **t == q).count() as f64;
                    if tf == 0.0 {
                        continue;
                    }
                    let idf = (1.0 + (n - df + 0.5) / (df + 0.5)).ln();
                    s += idf * tf * (k1 + 1.0) / (tf + k1 * (1.0 - b + b * doc.len() as f64 / avg));
                }
                s
            })
            .collect()
    }

    #[test]
    fn target_only_pool_is_empty() {
        let pool = Bm25::new(&["scars"]);
        assert!(bm25_mine(&pool, "scars", "play scars", 5).is_empty());
    }

    #[test]
    fn single_overlap_ranks_first() {
        let pool = Bm25::new(&["benny's light", "scars", "wallows", "carrie"]);
        let got = bm25_mine(&pool, "callen", "play wallows now", 3);
        assert_eq!(got, vec!["wallows".to_string()]);
    }

    #[test]
    fn matches_reference_on_toy_pool() {
        let docs = [
            "the blue lamp", "blue lamp", "kitchen lamp", "lamp", "red sky", "sky high",
            "the scars", "scars to your beautiful", "carrie", "carrie underwood", "callen",
            "wallows", "are you bored yet", "bored", "the the the", "kitchen light",
            "benny's light", "light of mine", "blue sky", "high hopes",
        ];
        let pool = Bm25::new(&docs);
        for q in ["blue lamp", "the sky", "light kitchen", "carrie the bored", "zzz"] {
            let want = reference_bm25(&docs, q, 1.2, 0.75);
            let got: BTreeMap<usize, f64> = pool.scores(q).into_iter().collect();
            for (i, w) in want.iter().enumerate() {
                let g = got.get(&i).copied().unwrap_or(0.0);
                assert!((g - w).abs() < 1e-12, "{q:?} doc {i}: {g} vs {w}");
            }
        }
    }

    #[test]
    fn set_never_holds_target() {
        let mut s = HardNegativeSet::new();
        assert!(!s.insert(1, "callen", "callen"));
        assert!(s.insert(1, "carrie", "callen"));
        assert!(!s.insert(1, "carrie", "callen"));
        assert_eq!(s.get(1).unwrap(), ["carrie".to_string()]);
        assert!(s.get(2).is_none());
    }

    #[test]
    fn jsonl_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("neg.jsonl");
        let mut s = HardNegativeSet::new();
        s.insert(3, "carrie", "callen");
        s.insert(7, "scars", "stars");
        s.save(&p).unwrap();
        assert_eq!(HardNegativeSet::load(&p).unwrap(), s);
    }
}
