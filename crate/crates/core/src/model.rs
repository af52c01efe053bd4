//! Domain vocabulary: users, entities, NL hypotheses, turns and sessions.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text::{char_slice, char_to_byte, normalize};

/// Upper bound on entities carried by one hypothesis.
pub const MAX_ENTITIES: usize = 8;

/// De-identified user key.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct UserId(String);

impl UserId {
    pub fn new(id: impl Into<String>) -> Result<Self> {
        let id = id.into();
        if id.is_empty() {
            return Err(Error::InvalidEntity("empty user id".into()));
        }
        Ok(UserId(id))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for UserId {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        UserId::new(s)
    }
}

impl From<UserId> for String {
    fn from(u: UserId) -> String {
        u.0
    }
}

impl fmt::Display for UserId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// A typed entity value. The value is always stored normalized.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawEntity")]
pub struct Entity {
    pub entity_type: String,
    pub value: String,
    pub domain: String,
}

#[derive(Deserialize)]
struct RawEntity {
    entity_type: String,
    value: String,
    domain: String,
}

impl TryFrom<RawEntity> for Entity {
    type Error = Error;
    fn try_from(r: RawEntity) -> Result<Self> {
        Entity::new(r.entity_type, &r.value, r.domain)
    }
}

impl Entity {
    pub fn new(
        entity_type: impl Into<String>,
        value: &str,
        domain: impl Into<String>,
    ) -> Result<Self> {
        let value = normalize(value);
        if value.is_empty() {
            return Err(Error::InvalidEntity("empty entity value".into()));
        }
        Ok(Entity {
            entity_type: entity_type.into(),
            value,
            domain: domain.into(),
        })
    }
}

/// (domain, intent, entities) interpretation of a query.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NLHypothesis {
    pub domain: String,
    pub intent: String,
    #[serde(default)]
    pub entities: Vec<Entity>,
}

impl NLHypothesis {
    pub fn new(
        domain: impl Into<String>,
        intent: impl Into<String>,
        entities: Vec<Entity>,
    ) -> Result<Self> {
        if entities.len() > MAX_ENTITIES {
            return Err(Error::TooManyEntities(entities.len()));
        }
        Ok(NLHypothesis {
            domain: domain.into(),
            intent: intent.into(),
            entities,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub query: String,
    #[serde(default)]
    pub response: String,
    pub ts: i64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hypothesis: Option<NLHypothesis>,
}

impl Turn {
    /// Builds a turn with normalized query and response text.
    pub fn new(query: &str, response: &str, ts: i64) -> Self {
        Turn {
            query: normalize(query),
            response: normalize(response),
            ts,
            hypothesis: None,
        }
    }

    pub fn with_hypothesis(mut self, h: NLHypothesis) -> Self {
        self.hypothesis = Some(h);
        self
    }
}

/// Character offsets `[start, end)` into the source query.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "(usize, usize)", into = "(usize, usize)")]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl From<(usize, usize)> for Span {
    fn from((start, end): (usize, usize)) -> Self {
        Span { start, end }
    }
}

impl From<Span> for (usize, usize) {
    fn from(s: Span) -> Self {
        (s.start, s.end)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Session {
    pub user: UserId,
    pub turns: Vec<Turn>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_entity: Option<Entity>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub erroneous_span: Option<Span>,
}

impl Session {
    /// The turn holding the defective query, q_{T-1}.
    pub fn source_turn(&self) -> Option<&Turn> {
        self.turns.len().checked_sub(2).map(|i| &self.turns[i])
    }

    /// The rephrase turn q_T.
    pub fn target_turn(&self) -> Option<&Turn> {
        self.turns.last()
    }

    /// Turns preceding the source query (S_1..S_{T-2}).
    pub fn context(&self) -> &[Turn] {
        let n = self.turns.len().saturating_sub(2);
        &self.turns[..n]
    }

    pub fn is_labeled(&self) -> bool {
        self.target_entity.is_some() && self.erroneous_span.is_some()
    }
}

/// Replaces character range `span` of `query` with `value`.
pub(crate) fn splice(query: &str, span: Span, value: &str) -> Option<String> {
    let b0 = char_to_byte(query, span.start)?;
    let b1 = char_to_byte(query, span.end)?;
    if b0 > b1 {
        return None;
    }
    let mut out = String::with_capacity(query.len() + value.len());
    out.push_str(&query[..b0]);
    out.push_str(value);
    out.push_str(&query[b1..]);
    Some(out)
}

/// Returns the session unchanged when every invariant holds.
pub fn validate_session(s: Session) -> Result<Session> {
    if s.turns.len() < 2 {
        return Err(Error::TooFewTurns);
    }
    for (i, t) in s.turns.iter().enumerate() {
        if t.query.trim().is_empty() {
            return Err(Error::EmptyQuery { index: i });
        }
        if i > 0 && t.ts < s.turns[i - 1].ts {
            return Err(Error::NonChronological { index: i });
        }
        if let Some(h) = &t.hypothesis {
            if h.entities.len() > MAX_ENTITIES {
                return Err(Error::TooManyEntities(h.entities.len()));
            }
            if h.entities.iter().any(|e| e.value.is_empty()) {
                return Err(Error::InvalidEntity("empty entity value".into()));
            }
        }
    }

    match (&s.target_entity, s.erroneous_span) {
        (None, None) => {}
        (Some(target), Some(span)) => {
            let bad = |reason: &str| Error::BadLabelSpan {
                start: span.start,
                end: span.end,
                reason: reason.to_string(),
            };
            let source = &s.source_turn().expect("len checked").query;
            if span.start >= span.end {
                return Err(bad("empty span"));
            }
            if char_slice(source, span.start, span.end).is_none() {
                return Err(bad("out of range"));
            }
            let rewritten = splice(source, span, &target.value).ok_or_else(|| bad("out of range"))?;
            if rewritten != s.target_turn().expect("len checked").query {
                return Err(bad("replacement does not yield the rephrase"));
            }
        }
        _ => {
            let span = s.erroneous_span.unwrap_or(Span { start: 0, end: 0 });
            return Err(Error::BadLabelSpan {
                start: span.start,
                end: span.end,
                reason: "target entity and span must be given together".into(),
            });
        }
    }
    Ok(s)
}

pub fn extract_target_domain(s: &Session) -> Result<&str> {
    s.target_turn()
        .and_then(|t| t.hypothesis.as_ref())
        .map(|h| h.domain.as_str())
        .ok_or(Error::MissingHypothesis)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table3_left() -> Session {
        let user = UserId::new("u1").unwrap();
        let benny = Entity::new("DeviceName", "benny's light", "HomeAutomation").unwrap();
        let hyp = NLHypothesis::new("HomeAutomation", "SetColorIntent", vec![benny.clone()]).unwrap();
        Session {
            user,
            turns: vec![
                Turn::new("Turn on ben's light.", "I'm sorry I couldn't find the device.", 1_000),
                Turn::new("Turn on benny's light.", "Okay.", 5_000),
                Turn::new("Turn ben's light on pink", "", 9_000),
                Turn::new("Turn benny's light on pink", "", 14_000).with_hypothesis(hyp),
            ],
            target_entity: Some(benny),
            erroneous_span: Some(Span { start: 5, end: 16 }),
        }
    }

    #[test]
    fn two_turn_session_is_identity() {
        let s = Session {
            user: UserId::new("u").unwrap(),
            turns: vec![Turn::new("play scars", "", 1), Turn::new("play scars", "", 2)],
            target_entity: None,
            erroneous_span: None,
        };
        assert_eq!(validate_session(s.clone()).unwrap(), s);
    }

    #[test]
    fn non_chronological_rejected() {
        let s = Session {
            user: UserId::new("u").unwrap(),
            turns: vec![Turn::new("a", "", 10), Turn::new("b", "", 5)],
            target_entity: None,
            erroneous_span: None,
        };
        assert!(matches!(
            validate_session(s),
            Err(Error::NonChronological { index: 1 })
        ));
    }

    #[test]
    fn table3_label_span_is_valid() {
        let s = table3_left();
        assert_eq!(char_slice(&s.turns[2].query, 5, 16), Some("ben's light"));
        let v = validate_session(s.clone()).unwrap();
        assert_eq!(validate_session(v.clone()).unwrap(), v);
    }

    #[test]
    fn bad_spans_rejected() {
        let mut s = table3_left();
        s.erroneous_span = Some(Span { start: 5, end: 99 });
        assert!(matches!(validate_session(s), Err(Error::BadLabelSpan { .. })));

        let mut s = table3_left();
        s.erroneous_span = Some(Span { start: 3, end: 14 });
        assert!(matches!(validate_session(s), Err(Error::BadLabelSpan { .. })));

        let mut s = table3_left();
        s.erroneous_span = None;
        assert!(matches!(validate_session(s), Err(Error::BadLabelSpan { .. })));
    }

    #[test]
    fn empty_query_rejected() {
        let mut s = table3_left();
        s.turns[1].query = "   ".into();
        assert!(matches!(validate_session(s), Err(Error::EmptyQuery { index: 1 })));
    }

    #[test]
    fn target_domain() {
        let s = table3_left();
        assert_eq!(extract_target_domain(&s).unwrap(), "HomeAutomation");

        let mut s = table3_left();
        let music = Entity::new("SongName", "the real slim shady", "Music").unwrap();
        s.turns[3].hypothesis =
            Some(NLHypothesis::new("Music", "PlayMusicIntent", vec![music]).unwrap());
        assert_eq!(extract_target_domain(&s).unwrap(), "Music");

        s.turns[3].hypothesis = None;
        assert!(matches!(extract_target_domain(&s), Err(Error::MissingHypothesis)));
    }

    #[test]
    fn entity_value_is_normalized() {
        let e = Entity::new("SongName", "  The Real  Slim Shady ", "Music").unwrap();
        assert_eq!(e.value, "the real slim shady");
        assert!(Entity::new("SongName", "   ", "Music").is_err());
    }

    #[test]
    fn hypothesis_cap() {
        let e = Entity::new("T", "x", "D").unwrap();
        assert!(NLHypothesis::new("D", "I", vec![e.clone(); 8]).is_ok());
        assert!(matches!(
            NLHypothesis::new("D", "I", vec![e; 9]),
            Err(Error::TooManyEntities(9))
        ));
    }

    #[test]
    fn session_json_shape() {
        let s = table3_left();
        let line = serde_json::to_string(&s).unwrap();
        assert!(line.contains("\"erroneous_span\":[5,16]"));
        assert!(line.contains("\"ts\":1000"));
        let back: Session = serde_json::from_str(&line).unwrap();
        assert_eq!(back, s);
    }
}
