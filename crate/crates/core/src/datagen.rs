//! Seeded synthetic corpus: users with personal catalogs, multi-turn
//! sessions with one corrupted entity in the defective query and its
//! rephrase, a usage log for index building, and rephrase-pair filtering.
//!
//! Catalogs are built from confuser families: names a few edits apart that
//! live in different domains (a video "carrie" next to a playlist "callen").
//! The corrupted mention alone is then often closer to the wrong family
//! member, and only the dialogue context says which one was meant.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::index::{UsageEvent, DAY_MS};
use crate::model::{Entity, NLHypothesis, Session, Span, Turn, UserId};
use crate::retrieval::{GazetteerDetector, MentionDetector};
use crate::text::{levenshtein, normalize, normalized_edit_distance, EditRatio};

pub const DOMAINS: [&str; 4] = ["Music", "Video", "HomeAutomation", "Knowledge"];
/// Share of domain-cue turns that mention another same-domain entity.
pub const DISTRACTOR_RATE: f64 = 0.15;

pub const DEFAULT_MAX_EDIT_RATIO: f64 = 0.5;
pub const DEFAULT_MAX_TIME_GAP_MS: i64 = 120_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub n_users: usize,
    /// Labeled sessions across all users, spread as evenly as possible.
    pub n_sessions: usize,
    pub entities_per_user: (usize, usize),
    pub domains: Vec<String>,
    /// Total turns per labeled session, including the defective query and
    /// its rephrase.
    pub session_length: (usize, usize),
    pub corruption_strength: f64,
    /// Share of labeled sessions whose garble is pulled toward the nearest
    /// other catalog entity, so the defective query alone is ambiguous.
    pub confusion_rate: f64,
    /// Unlabeled look-alike sessions per labeled one, for filter testing.
    pub noise_rate: f64,
    /// Number of generated confuser families, on top of the fixed seeds.
    pub lexicon_families: usize,
    /// Share of context turns of each kind.
    pub context_mix: ContextMix,
    /// Wall clock of the newest session; everything else is older.
    pub now_ms: i64,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            n_users: 1000,
            n_sessions: 10_000,
            entities_per_user: (8, 16),
            domains: DOMAINS.iter().map(|d| d.to_string()).collect(),
            session_length: (3, 5),
            corruption_strength: 0.4,
            confusion_rate: 0.8,
            noise_rate: 0.1,
            lexicon_families: 600,
            context_mix: ContextMix::default(),
            now_ms: 1_700_000_000_000,
            seed: 42,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.n_users == 0 || self.n_sessions == 0 {
            return bad("n_users and n_sessions must be at least 1");
        }
        let (lo, hi) = self.entities_per_user;
        if lo == 0 || lo > hi {
            return bad("entities_per_user must be a non-empty range starting at 1 or more");
        }
        let (lo, hi) = self.session_length;
        if lo < 2 || lo > hi {
            return bad("session_length must be a range starting at 2 or more");
        }
        if !(self.corruption_strength > 0.0 && self.corruption_strength <= 0.5) {
            return bad("corruption_strength must be in (0, 0.5]");
        }
        if self.domains.is_empty() || self.domains.iter().any(|d| !DOMAINS.contains(&d.as_str())) {
            return bad("domains must be a non-empty subset of Music, Video, HomeAutomation, Knowledge");
        }
        if !(0.0..=1.0).contains(&self.noise_rate) || !(0.0..=1.0).contains(&self.confusion_rate) {
            return bad("noise_rate and confusion_rate must be in [0, 1]");
        }
        Ok(())
    }
}

/// Relative weights of the context turn kinds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContextMix {
    /// The target entity was used correctly earlier in the session.
    pub earlier_mention: f64,
    /// An earlier, differently garbled attempt at the same entity.
    pub failed_attempt: f64,
    /// A turn that reveals the domain (e.g. a response naming the app).
    pub domain_cue: f64,
    /// Unrelated chatter.
    pub filler: f64,
}

impl Default for ContextMix {
    fn default() -> Self {
        ContextMix {
            earlier_mention: 0.3,
            failed_attempt: 0.3,
            domain_cue: 0.25,
            filler: 0.15,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EditWeights {
    pub substitute: f64,
    pub delete: f64,
    pub insert: f64,
    pub transpose: f64,
    pub phonetic: f64,
}

impl Default for EditWeights {
    fn default() -> Self {
        EditWeights {
            substitute: 0.3,
            delete: 0.15,
            insert: 0.15,
            transpose: 0.1,
            phonetic: 0.3,
        }
    }
}

/// Recognition-error model: weighted character edits plus a table of
/// near-homophone rewrites applied in either direction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorruptionModel {
    pub weights: EditWeights,
    pub phonetic_pairs: Vec<(String, String)>,
    pub strength: f64,
}

const PHONETIC_PAIRS: &[(&str, &str)] = &[
    ("benny", "ben"),
    ("wallows", "wallace"),
    ("callen", "karen"),
    ("callen", "calen"),
    ("scars", "stars"),
    ("carrie", "kerry"),
    ("ph", "f"),
    ("ck", "k"),
    ("c", "k"),
    ("ie", "y"),
    ("ll", "l"),
    ("ee", "ea"),
    ("ou", "ow"),
    ("s", "z"),
    ("er", "a"),
    ("en", "an"),
    ("th", "t"),
    ("v", "b"),
];

impl CorruptionModel {
    pub fn new(strength: f64) -> Self {
        CorruptionModel {
            weights: EditWeights::default(),
            phonetic_pairs: PHONETIC_PAIRS
                .iter()
                .map(|(a, b)| (a.to_string(), b.to_string()))
                .collect(),
            strength,
        }
    }
}

const VOWELS: &[char] = &['a', 'e', 'i', 'o', 'u'];
const CONFUSABLE: &[&[char]] = &[
    &['a', 'e', 'i', 'o', 'u', 'y'],
    &['c', 'k', 'q', 's'],
    &['b', 'p'],
    &['d', 't'],
    &['g', 'j'],
    &['m', 'n'],
    &['l', 'r'],
    &['v', 'f', 'w'],
    &['s', 'z'],
];

fn similar_letter(c: char, rng: &mut ChaCha8Rng) -> char {
    let groups: Vec<&&[char]> = CONFUSABLE.iter().filter(|g| g.contains(&c)).collect();
    if let Some(g) = groups.choose(rng) {
        let others: Vec<char> = g.iter().copied().filter(|&x| x != c).collect();
        if let Some(&x) = others.choose(rng) {
            return x;
        }
    }
    (b'a' + rng.random_range(0..26u8)) as char
}

fn letter_positions(chars: &[char]) -> Vec<usize> {
    (0..chars.len())
        .filter(|&i| chars[i].is_alphabetic())
        .collect()
}

fn apply_edit(value: &str, model: &CorruptionModel, rng: &mut ChaCha8Rng) -> Option<String> {
    let w = model.weights;
    let total = w.substitute + w.delete + w.insert + w.transpose + w.phonetic;
    let mut pick = rng.random_range(0.0..total);
    let mut chars: Vec<char> = value.chars().collect();
    let letters = letter_positions(&chars);
    if letters.is_empty() {
        return None;
    }

    pick -= w.phonetic;
    if pick < 0.0 {
        let mut options = Vec::new();
        for (a, b) in &model.phonetic_pairs {
            for (from, to) in [(a, b), (b, a)] {
                for (at, _) in value.match_indices(from.as_str()) {
                    options.push((at, from.len(), to.as_str()));
                }
            }
        }
        let &(at, len, to) = options.choose(rng)?;
        return Some(format!("{}{}{}", &value[..at], to, &value[at + len..]));
    }
    pick -= w.substitute;
    if pick < 0.0 {
        let &i = letters.choose(rng)?;
        chars[i] = similar_letter(chars[i], rng);
        return Some(chars.into_iter().collect());
    }
    pick -= w.delete;
    if pick < 0.0 {
        if letters.len() < 3 {
            return None;
        }
        let &i = letters.choose(rng)?;
        chars.remove(i);
        return Some(chars.into_iter().collect());
    }
    pick -= w.insert;
    if pick < 0.0 {
        let &i = letters.choose(rng)?;
        let c = if rng.random_bool(0.5) {
            chars[i]
        } else {
            *VOWELS.choose(rng)?
        };
        chars.insert(i + usize::from(rng.random_bool(0.5)), c);
        return Some(chars.into_iter().collect());
    }
    let pairs: Vec<usize> = (0..chars.len().saturating_sub(1))
        .filter(|&i| chars[i].is_alphabetic() && chars[i + 1].is_alphabetic() && chars[i] != chars[i + 1])
        .collect();
    let &i = pairs.choose(rng)?;
    chars.swap(i, i + 1);
    Some(chars.into_iter().collect())
}

/// A garbled version of `value` within the model's edit-ratio bound.
pub fn corrupt_entity(value: &str, model: &CorruptionModel, rng: &mut ChaCha8Rng) -> Result<String> {
    let value = normalize(value);
    let n_letters = value.chars().filter(|c| c.is_alphabetic()).count();
    let len = value.chars().count();
    if n_letters < 2 || 1.0 / len as f64 > model.strength {
        return Err(Error::TooShort(value));
    }
    let within = |s: &str| {
        s != value && !s.is_empty() && levenshtein(s, &value) as f64 <= model.strength * len.max(s.chars().count()) as f64
    };
    for _ in 0..32 {
        let ops = if rng.random_bool(0.3) { 2 } else { 1 };
        let mut cur = value.clone();
        for _ in 0..ops {
            if let Some(next) = apply_edit(&cur, model, rng) {
                cur = normalize(&next);
            }
        }
        if within(&cur) {
            return Ok(cur);
        }
    }
    // one substitution always fits: 1/len <= strength was checked above
    let mut chars: Vec<char> = value.chars().collect();
    let letters = letter_positions(&chars);
    let i = letters[rng.random_range(0..letters.len())];
    let mut c = similar_letter(chars[i], rng);
    while c == chars[i] {
        c = (b'a' + rng.random_range(0..26u8)) as char;
    }
    chars[i] = c;
    Ok(chars.into_iter().collect())
}

/// Character alignment of a minimal edit script from `a` to `b`; each pair
/// is (char of a, char of b), with `None` for insertions and deletions.
fn edit_alignment(a: &str, b: &str) -> Vec<(Option<char>, Option<char>)> {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let (n, m) = (a.len(), b.len());
    let mut d = vec![vec![0usize; m + 1]; n + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=m {
        d[0][j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = d[i - 1][j - 1] + usize::from(a[i - 1] != b[j - 1]);
            d[i][j] = sub.min(d[i - 1][j] + 1).min(d[i][j - 1] + 1);
        }
    }
    let mut out = Vec::new();
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        if i > 0 && j > 0 && d[i][j] == d[i - 1][j - 1] + usize::from(a[i - 1] != b[j - 1]) {
            out.push((Some(a[i - 1]), Some(b[j - 1])));
            i -= 1;
            j -= 1;
        } else if i > 0 && d[i][j] == d[i - 1][j] + 1 {
            out.push((Some(a[i - 1]), None));
            i -= 1;
        } else {
            out.push((None, Some(b[j - 1])));
            j -= 1;
        }
    }
    out.reverse();
    out
}

/// A string part-way along the edit path from `from` to `toward`: roughly
/// half of the differing positions take `toward`'s side. `None` when the two
/// are too close to have a strict midpoint.
pub fn blend_toward(from: &str, toward: &str, rng: &mut ChaCha8Rng) -> Option<String> {
    let align = edit_alignment(from, toward);
    let diffs: Vec<usize> = (0..align.len()).filter(|&k| align[k].0 != align[k].1).collect();
    if diffs.len() < 2 {
        return None;
    }
    let half = diffs.len() / 2 + usize::from(diffs.len() % 2 == 1 && rng.random_bool(0.5));
    let mut chosen: Vec<usize> = diffs.clone();
    chosen.sort_by_key(|_| rng.random::<u32>());
    chosen.truncate(half.clamp(1, diffs.len() - 1));
    let out: String = align
        .iter()
        .enumerate()
        .filter_map(|(k, &(x, y))| if chosen.contains(&k) { y } else { x })
        .collect();
    let out = normalize(&out);
    (out != from && out != toward && !out.is_empty()).then_some(out)
}

/// Everything the generator emits.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    /// Labeled sessions followed by look-alikes, interleaved per user.
    pub raw: Vec<Session>,
    /// Labeled sessions only, in raw order.
    pub sessions: Vec<Session>,
    pub usage_log: Vec<UsageEvent>,
    pub lexicon: Vec<Entity>,
}

fn entity_type(domain: &str, rng: &mut ChaCha8Rng) -> &'static str {
    match domain {
        "Music" => ["ArtistName", "PlaylistName", "SongName"][rng.random_range(0..3)],
        "Video" => "VideoName",
        "HomeAutomation" => "DeviceName",
        _ => "PersonName",
    }
}

const ONSETS: &[&str] = &[
    "b", "c", "d", "f", "g", "h", "j", "k", "l", "m", "n", "p", "r", "s", "t", "v", "w", "z", "br",
    "ch", "cl", "dr", "gr", "kr", "sh", "st", "th", "tr",
];
const NUCLEI: &[&str] = &["a", "e", "i", "o", "u", "ai", "ea", "ee", "oo", "ay"];
const CODAS: &[&str] = &["", "", "", "n", "r", "l", "s", "m", "nd", "rt", "ck", "ll", "x"];

fn syllable_name(rng: &mut ChaCha8Rng) -> String {
    let n = if rng.random_bool(0.25) { 3 } else { 2 };
    let mut s = String::new();
    for k in 0..n {
        if k > 0 || rng.random_bool(0.85) {
            s.push_str(ONSETS.choose(rng).unwrap());
        }
        s.push_str(NUCLEI.choose(rng).unwrap());
        if k + 1 == n || rng.random_bool(0.3) {
            s.push_str(CODAS.choose(rng).unwrap());
        }
    }
    s
}

fn decorate(name: &str, domain: &str, rng: &mut ChaCha8Rng) -> String {
    match domain {
        "HomeAutomation" => {
            let suffix = ["'s light", "'s lamp", " plug", " fan", "'s heater"];
            format!("{name}{}", suffix.choose(rng).unwrap())
        }
        "Video" if rng.random_bool(0.3) => format!("the {name}"),
        "Knowledge" if rng.random_bool(0.5) => format!("{name} {}", syllable_name(rng)),
        _ => name.to_string(),
    }
}

/// Seed families, each a set of cross-domain confusers.
fn seed_families() -> Vec<Vec<Entity>> {
    let e = |t: &str, v: &str, d: &str| Entity::new(t, v, d).expect("static entity");
    vec![
        vec![
            e("VideoName", "carrie", "Video"),
            e("PlaylistName", "callen", "Music"),
        ],
        vec![
            e("DeviceName", "benny's light", "HomeAutomation"),
            e("PersonName", "britney", "Knowledge"),
        ],
        vec![e("SongName", "scars", "Music"), e("VideoName", "stars", "Video")],
        vec![
            e("ArtistName", "wallows", "Music"),
            e("PersonName", "wallace", "Knowledge"),
        ],
    ]
}

fn build_lexicon(cfg: &GenConfig, rng: &mut ChaCha8Rng) -> Vec<Vec<Entity>> {
    let allowed: Vec<&str> = cfg.domains.iter().map(String::as_str).collect();
    let mut families: Vec<Vec<Entity>> = seed_families()
        .into_iter()
        .map(|f| f.into_iter().filter(|e| allowed.contains(&e.domain.as_str())).collect::<Vec<_>>())
        .filter(|f| !f.is_empty())
        .collect();
    let mut seen: BTreeSet<String> = families.iter().flatten().map(|e| e.value.clone()).collect();
    let edit_model = CorruptionModel {
        weights: EditWeights {
            transpose: 0.0,
            ..EditWeights::default()
        },
        ..CorruptionModel::new(0.4)
    };
    let mut guard = 0;
    while families.len() < cfg.lexicon_families + 4 && guard < cfg.lexicon_families * 50 {
        guard += 1;
        let stem = syllable_name(rng);
        let size = if allowed.len() >= 3 && rng.random_bool(0.3) { 3 } else { 2 }.min(allowed.len());
        let mut domains: Vec<&str> = allowed.clone();
        domains.sort_by_key(|_| rng.random::<u32>());
        let mut fam = Vec::new();
        for (k, d) in domains.iter().take(size).enumerate() {
            let name = if k == 0 {
                stem.clone()
            } else {
                match corrupt_entity(&stem, &edit_model, rng) {
                    Ok(v) => v,
                    Err(_) => continue,
                }
            };
            let value = normalize(&decorate(&name, d, rng));
            if seen.contains(&value) || fam.iter().any(|e: &Entity| e.value == value) {
                continue;
            }
            fam.push(Entity::new(entity_type(d, rng), &value, *d).expect("generated values are non-empty"));
        }
        if fam.is_empty() {
            continue;
        }
        for e in &fam {
            seen.insert(e.value.clone());
        }
        families.push(fam);
    }
    families
}

struct Template {
    text: &'static str,
    intent: &'static str,
}

fn templates(domain: &str) -> &'static [Template] {
    const MUSIC: &[Template] = &[
        Template { text: "play {}", intent: "PlayMusicIntent" },
        Template { text: "play playlist {}", intent: "PlayMusicIntent" },
        Template { text: "play songs by {}", intent: "PlayMusicIntent" },
        Template { text: "shuffle {}", intent: "PlayMusicIntent" },
    ];
    const VIDEO: &[Template] = &[
        Template { text: "play {}", intent: "PlayVideoIntent" },
        Template { text: "watch {}", intent: "PlayVideoIntent" },
        Template { text: "play the movie {}", intent: "PlayVideoIntent" },
        Template { text: "put on {}", intent: "PlayVideoIntent" },
    ];
    const HOME: &[Template] = &[
        Template { text: "turn on {}", intent: "TurnOnIntent" },
        Template { text: "turn {} on pink", intent: "SetColorIntent" },
        Template { text: "turn off {}", intent: "TurnOffIntent" },
        Template { text: "dim {}", intent: "SetBrightnessIntent" },
    ];
    const KNOW: &[Template] = &[
        Template { text: "who is {}", intent: "QAIntent" },
        Template { text: "tell me about {}", intent: "QAIntent" },
        Template { text: "how old is {}", intent: "QAIntent" },
        Template { text: "where was {} born", intent: "QAIntent" },
    ];
    match domain {
        "Music" => MUSIC,
        "Video" => VIDEO,
        "HomeAutomation" => HOME,
        _ => KNOW,
    }
}

/// Fills `{}` and returns the query with the slot's character span.
fn fill(template: &str, value: &str) -> (String, Span) {
    let at = template.find("{}").expect("template has a slot");
    let start = template[..at].chars().count();
    let q = format!("{}{}{}", &template[..at], value, &template[at + 2..]);
    (q, Span { start, end: start + value.chars().count() })
}

fn success_response(domain: &str, value: &str, rng: &mut ChaCha8Rng) -> String {
    let options: &[&str] = match domain {
        "Music" => &["here's {} on amazon music", "playing {} on amazon music", "shuffling songs by {}"],
        "Video" => &["here's {} on prime video", "playing the movie {}", "starting {} on prime video"],
        "HomeAutomation" => &["okay", "turning on {}", "okay, {} is on"],
        _ => &["here's what i found about {} on wikipedia", "according to wikipedia, {} is well known"],
    };
    options.choose(rng).unwrap().replace("{}", value)
}

fn failure_response(domain: &str, garbled: &str, rng: &mut ChaCha8Rng) -> String {
    let options: &[&str] = match domain {
        "Music" => &["i could not find that on amazon music", "sorry, i can't find the song {}", "i couldn't find a playlist called {}"],
        "Video" => &["i couldn't find that on prime video", "sorry, there's no movie called {}"],
        "HomeAutomation" => &["i'm sorry i couldn't find the device", "sorry, {} doesn't support that"],
        _ => &["sorry, i don't know who that is", "i couldn't find information about {}"],
    };
    let generic = ["sorry, i didn't get that", "i'm not sure about that"];
    if rng.random_bool(0.25) {
        generic.choose(rng).unwrap().to_string()
    } else {
        options.choose(rng).unwrap().replace("{}", garbled)
    }
}

fn domain_request(domain: &str, rng: &mut ChaCha8Rng) -> (String, String) {
    let options: &[(&str, &str)] = match domain {
        "Music" => &[("play some music", "here's a station on amazon music"), ("open amazon music", "opening amazon music")],
        "Video" => &[("open prime video", "opening prime video"), ("show me movies", "here are movies on prime video")],
        "HomeAutomation" => &[("turn off all lights", "okay, smart home devices are off"), ("is the device on", "the device is on")],
        _ => &[("search wikipedia", "here's what i found on wikipedia"), ("ask a question", "sure, what would you like to know")],
    };
    let (q, r) = options.choose(rng).unwrap();
    (q.to_string(), r.to_string())
}

fn filler(rng: &mut ChaCha8Rng) -> (String, String) {
    let n = rng.random_range(2..12);
    let options = [
        ("what time is it".to_string(), format!("it's {n} pm")),
        ("what's the weather".to_string(), "it's sunny today".to_string()),
        (format!("set a timer for {n} minutes"), "timer set".to_string()),
        ("stop".to_string(), "okay".to_string()),
        ("volume up".to_string(), "okay".to_string()),
    ];
    options.choose(rng).unwrap().clone()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ContextKind {
    EarlierMention,
    FailedAttempt,
    DomainCue,
    Filler,
}

fn pick_kind(mix: &ContextMix, rng: &mut ChaCha8Rng) -> ContextKind {
    let total = mix.earlier_mention + mix.failed_attempt + mix.domain_cue + mix.filler;
    if total <= 0.0 {
        return ContextKind::Filler;
    }
    let mut x = rng.random_range(0.0..total);
    for (w, k) in [
        (mix.earlier_mention, ContextKind::EarlierMention),
        (mix.failed_attempt, ContextKind::FailedAttempt),
        (mix.domain_cue, ContextKind::DomainCue),
    ] {
        if x < w {
            return k;
        }
        x -= w;
    }
    ContextKind::Filler
}

fn hyp(domain: &str, intent: &str, entities: Vec<Entity>) -> NLHypothesis {
    NLHypothesis::new(domain, intent, entities).expect("at most two entities")
}

fn with_value(e: &Entity, value: &str) -> Entity {
    Entity {
        value: value.to_string(),
        ..e.clone()
    }
}

struct UserGen<'a> {
    cfg: &'a GenConfig,
    model: CorruptionModel,
    user: UserId,
    catalog: Vec<Entity>,
    rng: ChaCha8Rng,
}

impl UserGen<'_> {
    /// A garbled form of the target that is not another catalog value and
    /// that the mention detector maps back onto exactly the slot.
    fn garble(&mut self, target: &Entity, template: &str) -> Option<(String, String, Span)> {
        self.garble_with(target, template, None)
    }

    /// Like `garble`, but pulled toward `confuser` when one is given.
    fn garble_with(&mut self, target: &Entity, template: &str, confuser: Option<&str>) -> Option<(String, String, Span)> {
        for _ in 0..16 {
            let c = match confuser.and_then(|v| blend_toward(&target.value, v, &mut self.rng)) {
                Some(c) if levenshtein(&c, &target.value) as f64
                    <= self.model.strength * c.chars().count().max(target.value.chars().count()) as f64 =>
                {
                    c
                }
                _ => match corrupt_entity(&target.value, &self.model, &mut self.rng) {
                    Ok(c) => c,
                    Err(_) => return None,
                },
            };
            if self.catalog.iter().any(|e| e.value == c) {
                continue;
            }
            let (query, span) = fill(template, &c);
            let found = GazetteerDetector::default().detect(&query, &[target.value.as_str()]);
            if found.map(|m| (m.start, m.end)) == Some((span.start, span.end)) {
                return Some((c, query, span));
            }
        }
        None
    }

    fn context_turn(&mut self, kind: ContextKind, target: &Entity, ts: i64) -> Turn {
        let d = target.domain.clone();
        let ts_turn = |q: &str, r: &str| Turn::new(q, r, ts);
        match kind {
            ContextKind::EarlierMention => {
                let t = templates(&d).choose(&mut self.rng).unwrap();
                let (q, _) = fill(t.text, &target.value);
                let r = success_response(&d, &target.value, &mut self.rng);
                ts_turn(&q, &r).with_hypothesis(hyp(&d, t.intent, vec![target.clone()]))
            }
            ContextKind::FailedAttempt => {
                let t = templates(&d).choose(&mut self.rng).unwrap();
                match self.garble(target, t.text) {
                    Some((c, q, _)) => {
                        let r = failure_response(&d, &c, &mut self.rng);
                        ts_turn(&q, &r).with_hypothesis(hyp(&d, t.intent, vec![with_value(target, &c)]))
                    }
                    None => self.context_turn(ContextKind::DomainCue, target, ts),
                }
            }
            ContextKind::DomainCue => {
                let same: Vec<Entity> = self
                    .catalog
                    .iter()
                    .filter(|e| e.domain == d && e.value != target.value)
                    .cloned()
                    .collect();
                if !same.is_empty() && self.rng.random_bool(DISTRACTOR_RATE) {
                    let other = same.choose(&mut self.rng).unwrap().clone();
                    let t = templates(&d).choose(&mut self.rng).unwrap();
                    let (q, _) = fill(t.text, &other.value);
                    let r = success_response(&d, &other.value, &mut self.rng);
                    ts_turn(&q, &r).with_hypothesis(hyp(&d, t.intent, vec![other]))
                } else {
                    let (q, r) = domain_request(&d, &mut self.rng);
                    ts_turn(&q, &r).with_hypothesis(hyp(&d, "OpenIntent", vec![]))
                }
            }
            ContextKind::Filler => {
                let (q, r) = filler(&mut self.rng);
                ts_turn(&q, &r).with_hypothesis(hyp("Global", "UtilityIntent", vec![]))
            }
        }
    }

    fn labeled(&mut self, start_ts: i64) -> Option<Session> {
        let target = self.catalog.choose(&mut self.rng)?.clone();
        let t = templates(&target.domain).choose(&mut self.rng).unwrap();
        let confuser = if self.rng.random_bool(self.cfg.confusion_rate) {
            self.catalog
                .iter()
                .filter(|e| e.value != target.value)
                .min_by_key(|e| (levenshtein(&e.value, &target.value), e.value.clone()))
                .map(|e| e.value.clone())
        } else {
            None
        };
        let (garbled, source, span) = self.garble_with(&target, t.text, confuser.as_deref())?;
        let (rephrase, _) = fill(t.text, &target.value);

        let (lo, hi) = self.cfg.session_length;
        let n_ctx = self.rng.random_range(lo..=hi) - 2;
        let mut ts = start_ts;
        let mut turns = Vec::with_capacity(n_ctx + 2);
        for _ in 0..n_ctx {
            let kind = pick_kind(&self.cfg.context_mix, &mut self.rng);
            turns.push(self.context_turn(kind, &target, ts));
            ts += self.rng.random_range(5_000..60_000);
        }
        let fail = failure_response(&target.domain, &garbled, &mut self.rng);
        turns.push(
            Turn::new(&source, &fail, ts)
                .with_hypothesis(hyp(&target.domain, t.intent, vec![with_value(&target, &garbled)])),
        );
        ts += self.rng.random_range(3_000..60_000);
        let ok = success_response(&target.domain, &target.value, &mut self.rng);
        turns.push(
            Turn::new(&rephrase, &ok, ts)
                .with_hypothesis(hyp(&target.domain, t.intent, vec![target.clone()])),
        );
        Some(Session {
            user: self.user.clone(),
            turns,
            target_entity: Some(target),
            erroneous_span: Some(span),
        })
    }

    /// An unlabeled pair that the rephrase filter must reject.
    fn noise(&mut self, start_ts: i64) -> Option<Session> {
        let a = self.catalog.choose(&mut self.rng)?.clone();
        let t = templates(&a.domain).choose(&mut self.rng).unwrap();
        let (qa, _) = fill(t.text, &a.value);
        let h = |v: Vec<Entity>| hyp(&a.domain, t.intent, v);
        let (first, second, gap) = match self.rng.random_range(0..4) {
            // plain repeat
            0 => (
                Turn::new(&qa, "okay", start_ts).with_hypothesis(h(vec![a.clone()])),
                Turn::new(&qa, "okay", 0).with_hypothesis(h(vec![a.clone()])),
                10_000,
            ),
            // two entities changed at once
            1 => {
                let b = self.catalog.choose(&mut self.rng)?.clone();
                let (ca, cb) = (
                    corrupt_entity(&a.value, &self.model, &mut self.rng).ok()?,
                    corrupt_entity(&b.value, &self.model, &mut self.rng).ok()?,
                );
                let q1 = format!("{} and {}", fill(t.text, &ca).0, cb);
                let q2 = format!("{} and {}", qa, b.value);
                (
                    Turn::new(&q1, "sorry", start_ts)
                        .with_hypothesis(h(vec![with_value(&a, &ca), with_value(&b, &cb)])),
                    Turn::new(&q2, "okay", 0).with_hypothesis(h(vec![a.clone(), b.clone()])),
                    10_000,
                )
            }
            // a genuine-looking correction, but hours apart
            2 => {
                let (c, qc, _) = self.garble(&a, t.text)?;
                (
                    Turn::new(&qc, "sorry", start_ts).with_hypothesis(h(vec![with_value(&a, &c)])),
                    Turn::new(&qa, "okay", 0).with_hypothesis(h(vec![a.clone()])),
                    3 * 3_600_000,
                )
            }
            // unrelated follow-up
            _ => {
                let (q, r) = filler(&mut self.rng);
                (
                    Turn::new(&q, &r, start_ts).with_hypothesis(hyp("Global", "UtilityIntent", vec![])),
                    Turn::new(&qa, "okay", 0).with_hypothesis(h(vec![a.clone()])),
                    10_000,
                )
            }
        };
        let mut second = second;
        second.ts = start_ts + gap;
        Some(Session {
            user: self.user.clone(),
            turns: vec![first, second],
            target_entity: None,
            erroneous_span: None,
        })
    }
}

fn user_seed(seed: u64, u: usize) -> u64 {
    // splitmix64 finalizer keeps neighbouring users' streams unrelated
    let mut z = seed ^ (u as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn generate_corpus(cfg: &GenConfig) -> Result<Corpus> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let families = build_lexicon(cfg, &mut rng);
    let lexicon: Vec<Entity> = families.iter().flatten().cloned().collect();
    let model = CorruptionModel::new(cfg.corruption_strength);

    let mut raw = Vec::new();
    let mut usage_log = Vec::new();
    let width = cfg.n_users.to_string().len().max(4);
    for u in 0..cfg.n_users {
        let mut rng = ChaCha8Rng::seed_from_u64(user_seed(cfg.seed, u));
        let user = UserId::new(format!("user{u:0width$}"))?;

        // whole families, so confusers always share a catalog
        let (lo, hi) = cfg.entities_per_user;
        let want = rng.random_range(lo..=hi);
        let mut catalog: Vec<Entity> = Vec::new();
        let mut tries = 0;
        while catalog.len() < want && tries < 100 {
            tries += 1;
            let fam = families.choose(&mut rng).expect("lexicon non-empty");
            if fam.iter().any(|e| catalog.contains(e)) {
                continue;
            }
            for e in fam {
                if catalog.len() < want {
                    catalog.push(e.clone());
                }
            }
        }

        // in-window usage for every catalog entity
        for e in &catalog {
            let n = rng.random_range(2..=6);
            for _ in 0..n {
                let ts = cfg.now_ms - rng.random_range(DAY_MS..29 * DAY_MS);
                usage_log.push(UsageEvent::new(user.clone(), e, ts));
            }
        }
        // ineligible history: one-off uses and stale favourites
        for _ in 0..2 {
            let e = lexicon.choose(&mut rng).expect("lexicon non-empty");
            if catalog.iter().any(|c| c.value == e.value) {
                continue;
            }
            if rng.random_bool(0.5) {
                let ts = cfg.now_ms - rng.random_range(DAY_MS..29 * DAY_MS);
                usage_log.push(UsageEvent::new(user.clone(), e, ts));
            } else {
                for _ in 0..3 {
                    let ts = cfg.now_ms - rng.random_range(40 * DAY_MS..90 * DAY_MS);
                    usage_log.push(UsageEvent::new(user.clone(), e, ts));
                }
            }
        }

        let mut gen = UserGen {
            cfg,
            model: model.clone(),
            user,
            catalog,
            rng,
        };
        let count = cfg.n_sessions / cfg.n_users + usize::from(u < cfg.n_sessions % cfg.n_users);
        let mut made = 0;
        let mut attempts = 0;
        while made < count && attempts < count * 20 {
            attempts += 1;
            let start = cfg.now_ms - gen.rng.random_range(0..DAY_MS);
            if let Some(s) = gen.labeled(start) {
                raw.push(s);
                made += 1;
                if gen.rng.random_bool(cfg.noise_rate) {
                    let start = cfg.now_ms - gen.rng.random_range(0..DAY_MS);
                    if let Some(n) = gen.noise(start) {
                        raw.push(n);
                    }
                }
            }
        }
    }
    let sessions = raw.iter().filter(|s| s.is_labeled()).cloned().collect();
    Ok(Corpus {
        raw,
        sessions,
        usage_log,
        lexicon,
    })
}

fn hypotheses_differ_in_one(a: &NLHypothesis, b: &NLHypothesis) -> bool {
    a.entities.len() == b.entities.len()
        && a
            .entities
            .iter()
            .zip(&b.entities)
            .filter(|(x, y)| x.value != y.value)
            .count()
            == 1
}

/// Keeps sessions whose last two queries look like a single-entity
/// correction: edit ratio in (0, max], close in time, hypotheses differing
/// in exactly one entity value.
pub fn select_rephrase_pairs(raw: &[Session], max_edit_ratio: f64, max_time_gap_ms: i64) -> Vec<Session> {
    raw.iter()
        .filter(|s| {
            let (Some(a), Some(b)) = (s.source_turn(), s.target_turn()) else {
                return false;
            };
            let r = normalized_edit_distance(&a.query, &b.query);
            if !(r > 0.0 && r <= max_edit_ratio) {
                return false;
            }
            if b.ts - a.ts > max_time_gap_ms || b.ts < a.ts {
                return false;
            }
            match (&a.hypothesis, &b.hypothesis) {
                (Some(ha), Some(hb)) => hypotheses_differ_in_one(ha, hb),
                _ => false,
            }
        })
        .cloned()
        .collect()
}

/// Splits each user's sessions, holding out the last `test_fraction` of
/// them (at least one when the user has two or more).
pub fn split_by_user(sessions: &[Session], test_fraction: f64) -> (Vec<Session>, Vec<Session>) {
    let mut per_user: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, s) in sessions.iter().enumerate() {
        per_user.entry(s.user.as_str()).or_default().push(i);
    }
    let mut test_ids: BTreeSet<usize> = BTreeSet::new();
    for ids in per_user.values() {
        if ids.len() < 2 {
            continue;
        }
        let k = ((ids.len() as f64 * test_fraction).round() as usize).clamp(1, ids.len() - 1);
        test_ids.extend(ids[ids.len() - k..].iter().copied());
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (i, s) in sessions.iter().enumerate() {
        if test_ids.contains(&i) {
            test.push(s.clone());
        } else {
            train.push(s.clone());
        }
    }
    (train, test)
}

/// Normalized edit ratio between a garbled mention and its source value.
pub fn corruption_ratio(garbled: &str, value: &str) -> f64 {
    EditRatio::between(garbled, value).value()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::validate_session;

    fn small() -> GenConfig {
        GenConfig {
            n_users: 30,
            n_sessions: 200,
            lexicon_families: 60,
            ..Default::default()
        }
    }

    #[test]
    fn table_pairs_reproduce_known_errors() {
        let only = |a: &str, b: &str| CorruptionModel {
            weights: EditWeights {
                substitute: 0.0,
                delete: 0.0,
                insert: 0.0,
                transpose: 0.0,
                phonetic: 1.0,
            },
            phonetic_pairs: vec![(a.into(), b.into())],
            strength: 0.5,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        // a single op may still be followed by a second one; retry until the
        // single-step outcome shows up
        let mut hits: BTreeSet<String> = BTreeSet::new();
        for _ in 0..50 {
            hits.insert(corrupt_entity("benny's light", &only("benny", "ben"), &mut rng).unwrap());
            hits.insert(corrupt_entity("callen", &only("callen", "karen"), &mut rng).unwrap());
        }
        assert!(hits.contains("ben's light"));
        assert!(hits.contains("karen"));
    }

    #[test]
    fn distance_bound_holds() {
        let model = CorruptionModel::new(0.4);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let values = ["benny's light", "callen", "carrie", "scars", "wallows", "ab", "the shoo lamp"];
        for i in 0..10_000 {
            let v = values[i % values.len()];
            match corrupt_entity(v, &model, &mut rng) {
                Ok(c) => {
                    assert_ne!(c, v);
                    let r = levenshtein(&c, v) as f64 / c.chars().count().max(v.chars().count()) as f64;
                    assert!(r <= 0.4 + 1e-12, "{v} -> {c}: {r}");
                }
                Err(Error::TooShort(_)) => assert_eq!(v, "ab"),
                Err(e) => panic!("{e}"),
            }
        }
    }

    #[test]
    fn blend_sits_between() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let b = blend_toward("callen", "carrie", &mut rng).unwrap();
            let (dt, dc) = (levenshtein(&b, "callen"), levenshtein(&b, "carrie"));
            let total = levenshtein("callen", "carrie");
            assert!(dt >= 1 && dc >= 1, "{b}");
            assert_eq!(dt + dc, total, "{b} lies on the edit path");
        }
        assert!(blend_toward("scars", "stars", &mut rng).is_none());
    }

    #[test]
    fn too_short_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            corrupt_entity("a", &CorruptionModel::new(0.5), &mut rng),
            Err(Error::TooShort(_))
        ));
    }

    #[test]
    fn minimal_corpus() {
        let cfg = GenConfig {
            n_users: 1,
            n_sessions: 1,
            entities_per_user: (1, 1),
            noise_rate: 0.0,
            ..small()
        };
        let c = generate_corpus(&cfg).unwrap();
        assert_eq!(c.sessions.len(), 1);
        let target = c.sessions[0].target_entity.as_ref().unwrap();
        assert!(c.usage_log.iter().filter(|e| e.value == target.value).count() >= 2);
    }

    #[test]
    fn deterministic() {
        let a = generate_corpus(&small()).unwrap();
        let b = generate_corpus(&small()).unwrap();
        assert_eq!(a, b);
        let c = generate_corpus(&GenConfig { seed: 7, ..small() }).unwrap();
        assert_ne!(a.sessions, c.sessions);
    }

    #[test]
    fn sessions_validate_and_filter_agrees() {
        let c = generate_corpus(&small()).unwrap();
        assert_eq!(c.sessions.len(), 200);
        assert!(c.raw.len() > c.sessions.len(), "noise sessions present");
        for s in &c.sessions {
            validate_session(s.clone()).unwrap();
        }
        let kept = select_rephrase_pairs(&c.raw, DEFAULT_MAX_EDIT_RATIO, DEFAULT_MAX_TIME_GAP_MS);
        assert_eq!(kept, c.sessions);
    }

    #[test]
    fn filter_rejects_degenerate_pairs() {
        let e = |v: &str| Entity::new("T", v, "Music").unwrap();
        let mk = |q1: &str, e1: Vec<Entity>, q2: &str, e2: Vec<Entity>, gap: i64| Session {
            user: UserId::new("u").unwrap(),
            turns: vec![
                Turn::new(q1, "", 0).with_hypothesis(hyp("Music", "I", e1)),
                Turn::new(q2, "", gap).with_hypothesis(hyp("Music", "I", e2)),
            ],
            target_entity: None,
            erroneous_span: None,
        };
        let same = mk("play scars", vec![e("scars")], "play scars", vec![e("scars")], 1000);
        let two = mk(
            "play scar and walls",
            vec![e("scar"), e("walls")],
            "play scars and wallows",
            vec![e("scars"), e("wallows")],
            1000,
        );
        let good = mk("play stars", vec![e("stars")], "play scars", vec![e("scars")], 1000);
        let late = mk("play stars", vec![e("stars")], "play scars", vec![e("scars")], 200_000);
        let raw = vec![same, two, good.clone(), late];
        assert_eq!(select_rephrase_pairs(&raw, 0.5, 120_000), vec![good]);
    }

    #[test]
    fn split_keeps_users_on_both_sides() {
        let c = generate_corpus(&small()).unwrap();
        let (train, test) = split_by_user(&c.sessions, 0.2);
        assert_eq!(train.len() + test.len(), c.sessions.len());
        let test_users: BTreeSet<_> = test.iter().map(|s| s.user.as_str()).collect();
        let train_users: BTreeSet<_> = train.iter().map(|s| s.user.as_str()).collect();
        assert!(test_users.is_subset(&train_users));
    }
}
