//! Query-side correction: rank the user's candidates by cosine, gate on the
//! top-2 scores, find the erroneous mention and splice in the winner.

use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::encoder::{featurize, flatten_context, Embedding, EncoderWeights, SpecialToken};
use crate::error::{Error, Result};
use crate::index::{EntityRecord, PersonalIndex};
use crate::model::{splice, Span, Turn, UserId};
use crate::text::{char_slice, normalize, words_with_offsets, EditRatio};

pub const DEFAULT_TAU1: f64 = 0.80;
pub const DEFAULT_TAU2: f64 = 0.60;
pub const DEFAULT_K: usize = 10;

#[derive(Debug, Clone, Copy)]
pub struct ScoredCandidate<'a> {
    pub record: &'a EntityRecord,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GateConfig {
    pub tau1: f64,
    pub tau2: f64,
    pub k: usize,
}

impl Default for GateConfig {
    fn default() -> Self {
        GateConfig {
            tau1: DEFAULT_TAU1,
            tau2: DEFAULT_TAU2,
            k: DEFAULT_K,
        }
    }
}

impl GateConfig {
    pub fn new(tau1: f64, tau2: f64, k: usize) -> Result<Self> {
        let cfg = GateConfig { tau1, tau2, k };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let in_range = |t: f64| (-1.0..=1.0).contains(&t);
        if !in_range(self.tau1) || !in_range(self.tau2) {
            return Err(Error::Config(format!(
                "thresholds must lie in [-1, 1], got tau1={} tau2={}",
                self.tau1, self.tau2
            )));
        }
        if self.k < 2 {
            return Err(Error::Config(format!("k must be at least 2, got {}", self.k)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Reason {
    Triggered,
    BelowTau1,
    AmbiguousTop2,
    NoCandidates,
    NoMention,
}

impl fmt::Display for Reason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Reason::Triggered => "Triggered",
            Reason::BelowTau1 => "BelowTau1",
            Reason::AmbiguousTop2 => "AmbiguousTop2",
            Reason::NoCandidates => "NoCandidates",
            Reason::NoMention => "NoMention",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MentionSpan {
    pub start: usize,
    pub end: usize,
    pub text: String,
}

impl MentionSpan {
    pub fn span(&self) -> Span {
        Span {
            start: self.start,
            end: self.end,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RewriteDecision {
    pub triggered: bool,
    pub rewrite: Option<String>,
    pub entity: Option<EntityRecord>,
    pub s1: Option<f64>,
    pub s2: Option<f64>,
    pub reason: Reason,
}

impl RewriteDecision {
    fn abstain(reason: Reason, s1: Option<f64>, s2: Option<f64>) -> Self {
        RewriteDecision {
            triggered: false,
            rewrite: None,
            entity: None,
            s1,
            s2,
            reason,
        }
    }
}

/// Whether inference sees the dialogue context and which task marker, if
/// any, is prefixed to the query.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InferenceMode {
    pub contextual: bool,
    pub prompt: Option<SpecialToken>,
    pub max_len: usize,
}

impl Default for InferenceMode {
    fn default() -> Self {
        InferenceMode {
            contextual: true,
            prompt: None,
            max_len: crate::encoder::DEFAULT_MAX_LEN,
        }
    }
}

fn by_score_then_id(a: &ScoredCandidate<'_>, b: &ScoredCandidate<'_>) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.record.entity_id.cmp(&b.record.entity_id))
}

/// Top-`k` candidates by cosine, descending; ties go to the smaller id.
pub fn semantic_search<'a>(
    q: &Embedding,
    candidates: &[&'a EntityRecord],
    k: usize,
    model_version: u32,
) -> Result<Vec<ScoredCandidate<'a>>> {
    let mut scored = Vec::with_capacity(candidates.len());
    for &rec in candidates {
        let emb = match (&rec.embedding, rec.model_version) {
            (Some(e), Some(v)) if v == model_version => e,
            _ => {
                return Err(Error::StaleEmbeddings {
                    index: rec.model_version,
                    weights: model_version,
                })
            }
        };
        if emb.dim() != q.dim() {
            return Err(Error::DimensionMismatch(format!(
                "query dim {} vs entity dim {}",
                q.dim(),
                emb.dim()
            )));
        }
        scored.push(ScoredCandidate {
            record: rec,
            score: q.cosine(emb),
        });
    }
    let k = k.min(scored.len());
    if k == 0 {
        return Ok(Vec::new());
    }
    if k < scored.len() {
        scored.select_nth_unstable_by(k - 1, by_score_then_id);
        scored.truncate(k);
    }
    scored.sort_unstable_by(by_score_then_id);
    Ok(scored)
}

/// `s1 > tau1` and, when a runner-up exists, `s2 < tau2`.
pub fn gate(scored: &[ScoredCandidate<'_>], cfg: &GateConfig) -> (bool, Reason) {
    gate_scores(
        scored.first().map(|c| c.score),
        scored.get(1).map(|c| c.score),
        cfg,
    )
}

pub fn gate_scores(s1: Option<f64>, s2: Option<f64>, cfg: &GateConfig) -> (bool, Reason) {
    match (s1, s2) {
        (None, _) => (false, Reason::NoCandidates),
        (Some(s1), _) if s1 <= cfg.tau1 => (false, Reason::BelowTau1),
        (Some(_), Some(s2)) if s2 >= cfg.tau2 => (false, Reason::AmbiguousTop2),
        _ => (true, Reason::Triggered),
    }
}

/// Locates the erroneous entity mention in a query.
pub trait MentionDetector: Send + Sync {
    fn detect(&self, query: &str, candidates: &[&str]) -> Option<MentionSpan>;
}

/// Gazetteer matcher: the contiguous word span closest in normalized edit
/// distance to any candidate value, accepted at or below `max_ratio`.
#[derive(Debug, Clone, Copy)]
pub struct GazetteerDetector {
    /// Threshold as an exact fraction (numerator, denominator).
    pub max_ratio: (usize, usize),
}

impl Default for GazetteerDetector {
    fn default() -> Self {
        GazetteerDetector { max_ratio: (1, 2) }
    }
}

impl MentionDetector for GazetteerDetector {
    fn detect(&self, query: &str, candidates: &[&str]) -> Option<MentionSpan> {
        let words = words_with_offsets(query);
        let mut best: Option<(EditRatio, MentionSpan)> = None;
        for i in 0..words.len() {
            for j in i..words.len() {
                let (start, end) = (words[i].start, words[j].end);
                let text = char_slice(query, start, end).expect("offsets from the query");
                for cand in candidates {
                    let r = EditRatio::between(text, cand);
                    if !r.at_most(self.max_ratio.0, self.max_ratio.1) {
                        continue;
                    }
                    let better = match &best {
                        None => true,
                        Some((br, bs)) => r
                            .cmp_ratio(*br)
                            .then((bs.end - bs.start).cmp(&(end - start)))
                            .then(start.cmp(&bs.start))
                            == Ordering::Less,
                    };
                    if better {
                        best = Some((
                            r,
                            MentionSpan {
                                start,
                                end,
                                text: text.to_string(),
                            },
                        ));
                    }
                }
            }
        }
        best.map(|(_, s)| s)
    }
}

pub fn detect_mention(query: &str, candidates: &[&EntityRecord]) -> Option<MentionSpan> {
    let values: Vec<&str> = candidates.iter().map(|r| r.value.as_str()).collect();
    GazetteerDetector::default().detect(query, &values)
}

/// Replaces the mention with `value`, leaving the rest of the query intact.
pub fn compose_rewrite(source_query: &str, span: &MentionSpan, value: &str) -> Result<String> {
    let invalid = || Error::InvalidSpan {
        start: span.start,
        end: span.end,
    };
    if span.start >= span.end {
        return Err(invalid());
    }
    match char_slice(source_query, span.start, span.end) {
        Some(t) if t == span.text => {}
        _ => return Err(invalid()),
    }
    splice(source_query, span.span(), value).ok_or_else(invalid)
}

/// Ranked candidates for one query, before gating.
#[derive(Debug, Clone)]
pub struct Ranking<'a> {
    pub source: String,
    pub scored: Vec<ScoredCandidate<'a>>,
}

/// Encodes the (contextual) query and ranks the user's candidates.
pub fn rank<'a>(
    user: &UserId,
    source_query: &str,
    context: &[Turn],
    index: &'a PersonalIndex,
    w: &EncoderWeights,
    k: usize,
    mode: &InferenceMode,
) -> Result<Ranking<'a>> {
    let source = normalize(source_query);
    if source.is_empty() {
        return Err(Error::EmptyQuery { index: context.len() });
    }
    let candidates = index.lookup_candidates(user);
    if candidates.is_empty() {
        return Ok(Ranking {
            source,
            scored: Vec::new(),
        });
    }
    let ctx = if mode.contextual { context } else { &[] };
    let seq = flatten_context(ctx, &source, mode.max_len, mode.prompt)?;
    let q = w.encode(&featurize(&seq, w.feature_dim()))?;
    let scored = semantic_search(&q, &candidates, k, w.version)?;
    Ok(Ranking { source, scored })
}

/// Applies the gate and, when it fires, the mention detector and `g`.
pub fn decide(
    ranking: &Ranking<'_>,
    cfg: &GateConfig,
    detector: &dyn MentionDetector,
) -> RewriteDecision {
    let s1 = ranking.scored.first().map(|c| c.score);
    let s2 = ranking.scored.get(1).map(|c| c.score);
    let (triggered, reason) = gate_scores(s1, s2, cfg);
    if !triggered {
        return RewriteDecision::abstain(reason, s1, s2);
    }
    let top = ranking.scored[0].record;
    let Some(span) = detector.detect(&ranking.source, &[top.value.as_str()]) else {
        return RewriteDecision::abstain(Reason::NoMention, s1, s2);
    };
    match compose_rewrite(&ranking.source, &span, &top.value) {
        Ok(rewrite) => RewriteDecision {
            triggered: true,
            rewrite: Some(rewrite),
            entity: Some(top.clone()),
            s1,
            s2,
            reason: Reason::Triggered,
        },
        Err(_) => RewriteDecision::abstain(Reason::NoMention, s1, s2),
    }
}

/// End-to-end correction for one request.
#[allow(clippy::too_many_arguments)]
pub fn correct(
    user: &UserId,
    source_query: &str,
    context: &[Turn],
    index: &PersonalIndex,
    w: &EncoderWeights,
    cfg: &GateConfig,
    mode: &InferenceMode,
) -> Result<RewriteDecision> {
    let ranking = rank(user, source_query, context, index, w, cfg.k, mode)?;
    Ok(decide(&ranking, cfg, &GazetteerDetector::default()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Entity;

    fn rec(id: u64, value: &str, emb: Vec<f32>) -> EntityRecord {
        EntityRecord {
            entity_id: id,
            value: value.into(),
            entity_type: "T".into(),
            domain: "D".into(),
            embedding: Some(Embedding(emb)),
            model_version: Some(1),
        }
    }

    fn fake_scored(scores: &[f64]) -> Vec<(EntityRecord, f64)> {
        scores
            .iter()
            .enumerate()
            .map(|(i, &s)| (rec(i as u64, "x", vec![1.0]), s))
            .collect()
    }

    fn gate_of(scores: &[f64], tau1: f64, tau2: f64) -> (bool, Reason) {
        let owned = fake_scored(scores);
        let scored: Vec<ScoredCandidate<'_>> = owned
            .iter()
            .map(|(r, s)| ScoredCandidate { record: r, score: *s })
            .collect();
        gate(&scored, &GateConfig::new(tau1, tau2, 10).unwrap())
    }

    #[test]
    fn gate_cases() {
        assert_eq!(gate_of(&[0.92, 0.40], 0.8, 0.6), (true, Reason::Triggered));
        assert_eq!(gate_of(&[0.92, 0.85], 0.8, 0.6), (false, Reason::AmbiguousTop2));
        assert_eq!(gate_of(&[], 0.8, 0.6), (false, Reason::NoCandidates));
        assert_eq!(gate_of(&[0.7, 0.1], 0.8, 0.6), (false, Reason::BelowTau1));
        assert_eq!(gate_of(&[0.81], 0.8, 0.6), (true, Reason::Triggered));
        assert_eq!(gate_of(&[0.8], 0.8, 0.6), (false, Reason::BelowTau1));
    }

    #[test]
    fn gate_config_validation() {
        assert!(GateConfig::new(1.5, 0.5, 10).is_err());
        assert!(GateConfig::new(0.5, 0.5, 1).is_err());
    }

    #[test]
    fn search_empty_and_self_match() {
        let q = Embedding(vec![0.6, 0.8]);
        assert!(semantic_search(&q, &[], 5, 1).unwrap().is_empty());
        let a = rec(3, "a", vec![0.6, 0.8]);
        let b = rec(1, "b", vec![1.0, 0.0]);
        let out = semantic_search(&q, &[&b, &a], 5, 1).unwrap();
        assert_eq!(out[0].record.entity_id, 3);
        assert!((out[0].score - 1.0).abs() < 1e-7);
        assert_eq!(out.len(), 2);
    }

    #[test]
    fn search_ties_break_by_id() {
        let q = Embedding(vec![1.0, 0.0]);
        let a = rec(9, "a", vec![0.0, 1.0]);
        let b = rec(2, "b", vec![0.0, 1.0]);
        let c = rec(5, "c", vec![0.0, 1.0]);
        let out = semantic_search(&q, &[&a, &b, &c], 2, 1).unwrap();
        let ids: Vec<u64> = out.iter().map(|c| c.record.entity_id).collect();
        assert_eq!(ids, vec![2, 5]);
    }

    #[test]
    fn search_rejects_stale() {
        let q = Embedding(vec![1.0]);
        let a = rec(0, "a", vec![1.0]);
        assert!(matches!(
            semantic_search(&q, &[&a], 5, 2),
            Err(Error::StaleEmbeddings { .. })
        ));
        let mut unset = rec(0, "a", vec![1.0]);
        unset.embedding = None;
        unset.model_version = None;
        assert!(semantic_search(&q, &[&unset], 5, 1).is_err());
    }

    fn detect(q: &str, cands: &[&str]) -> Option<MentionSpan> {
        GazetteerDetector::default().detect(q, cands)
    }

    #[test]
    fn mention_table3_left() {
        let m = detect("turn ben's light on pink", &["benny's light"]).unwrap();
        assert_eq!(m.text, "ben's light");
        assert_eq!((m.start, m.end), (5, 16));
    }

    #[test]
    fn mention_exact() {
        let m = detect("play scars", &["scars"]).unwrap();
        assert_eq!(m.text, "scars");
        assert_eq!(EditRatio::between(&m.text, "scars").edits, 0);
    }

    #[test]
    fn mention_none_when_far() {
        // Every span of the query vs both candidates, brute force.
        let q = "what time is it";
        let words = words_with_offsets(q);
        for i in 0..words.len() {
            for j in i..words.len() {
                let t = char_slice(q, words[i].start, words[j].end).unwrap();
                for c in ["callen", "carrie"] {
                    assert!(crate::text::normalized_edit_distance(t, c) > 0.5, "{t} {c}");
                }
            }
        }
        assert_eq!(detect(q, &["callen", "carrie"]), None);
    }

    #[test]
    fn mention_tie_prefers_longer_then_leftmost() {
        // "ab" and "ab" both exact: leftmost wins.
        let m = detect("ab x ab", &["ab"]).unwrap();
        assert_eq!((m.start, m.end), (0, 2));
    }

    #[test]
    fn compose_examples() {
        let q = "turn ben's light on pink";
        let m = detect(q, &["benny's light"]).unwrap();
        assert_eq!(
            compose_rewrite(q, &m, "benny's light").unwrap(),
            "turn benny's light on pink"
        );
        let q = "play playlist karen";
        let m = MentionSpan {
            start: 14,
            end: 19,
            text: "karen".into(),
        };
        assert_eq!(compose_rewrite(q, &m, "callen").unwrap(), "play playlist callen");
        assert_eq!(compose_rewrite(q, &m, "karen").unwrap(), q);
        let bad = MentionSpan {
            start: 14,
            end: 30,
            text: "karen".into(),
        };
        assert!(matches!(compose_rewrite(q, &bad, "x"), Err(Error::InvalidSpan { .. })));
        let mismatch = MentionSpan {
            start: 0,
            end: 4,
            text: "stop".into(),
        };
        assert!(compose_rewrite(q, &mismatch, "x").is_err());
    }

    #[test]
    fn unknown_user_gets_no_candidates() {
        let idx = PersonalIndex::default();
        let w = EncoderWeights::random(8, 1 << 10, 1);
        let d = correct(
            &UserId::new("nobody").unwrap(),
            "play scars",
            &[],
            &idx,
            &w,
            &GateConfig::default(),
            &InferenceMode::default(),
        )
        .unwrap();
        assert!(!d.triggered);
        assert_eq!(d.reason, Reason::NoCandidates);
        assert!(d.rewrite.is_none());
    }

    #[test]
    fn exact_entity_query_triggers() {
        let mut idx = PersonalIndex::default();
        let u = UserId::new("u").unwrap();
        let id = idx.add_entity(&Entity::new("SongName", "scars", "Music").unwrap());
        idx.add_to_user(&u, id, 3, 0);
        let w = EncoderWeights::random(32, 1 << 12, 5);
        let idx = crate::index::refresh_embeddings(&idx, &w).unwrap();
        let mode = InferenceMode {
            contextual: false,
            prompt: None,
            max_len: 256,
        };
        // Single candidate: the gate only checks s1.
        let cfg = GateConfig::new(-1.0, 0.6, 10).unwrap();
        let d = correct(&u, "play scars", &[], &idx, &w, &cfg, &mode).unwrap();
        assert!(d.triggered);
        assert_eq!(d.rewrite.as_deref(), Some("play scars"));
    }
}
