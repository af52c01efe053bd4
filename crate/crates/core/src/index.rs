//! Two-stage personalized entity index.
//!
//! Stage one maps each user to the ids of their frequent entities; stage two
//! is a global table of distinct entities with cached embeddings, so an entity
//! shared by many users is stored and embedded once.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::{encode_text, Embedding, EncoderWeights};
use crate::error::{Error, Result};
use crate::model::{Entity, UserId};
use crate::text::normalize;

pub const DAY_MS: i64 = 86_400_000;
pub const DEFAULT_WINDOW_DAYS: u32 = 30;
pub const DEFAULT_MIN_FREQ: u64 = 2;

const MAGIC: &[u8; 4] = b"PIX1";
const FORMAT_VERSION: u32 = 1;

/// One line of the usage log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UsageEvent {
    pub user: UserId,
    pub value: String,
    pub entity_type: String,
    pub domain: String,
    pub ts: i64,
}

impl UsageEvent {
    pub fn new(user: UserId, entity: &Entity, ts: i64) -> Self {
        UsageEvent {
            user,
            value: entity.value.clone(),
            entity_type: entity.entity_type.clone(),
            domain: entity.domain.clone(),
            ts,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EntityRecord {
    pub entity_id: u64,
    pub value: String,
    pub entity_type: String,
    pub domain: String,
    pub embedding: Option<Embedding>,
    pub model_version: Option<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CatalogEntry {
    pub entity_id: u64,
    pub frequency: u64,
    pub last_seen: i64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UserCatalog {
    pub user: UserId,
    pub entries: Vec<CatalogEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PersonalIndex {
    pub entity_table: BTreeMap<u64, EntityRecord>,
    pub user_map: BTreeMap<UserId, UserCatalog>,
    pub window_days: u32,
    pub min_freq: u64,
    by_key: HashMap<(String, String), u64>,
}

impl Default for PersonalIndex {
    fn default() -> Self {
        PersonalIndex::new(DEFAULT_WINDOW_DAYS, DEFAULT_MIN_FREQ)
    }
}

impl PersonalIndex {
    pub fn new(window_days: u32, min_freq: u64) -> Self {
        PersonalIndex {
            entity_table: BTreeMap::new(),
            user_map: BTreeMap::new(),
            window_days,
            min_freq,
            by_key: HashMap::new(),
        }
    }

    pub fn entity_id(&self, value: &str, entity_type: &str) -> Option<u64> {
        self.by_key
            .get(&(normalize(value), entity_type.to_string()))
            .copied()
    }

    /// Inserts an entity into the global table, returning the existing id when
    /// the (value, type) pair is already present.
    pub fn add_entity(&mut self, entity: &Entity) -> u64 {
        let key = (entity.value.clone(), entity.entity_type.clone());
        if let Some(&id) = self.by_key.get(&key) {
            return id;
        }
        let id = self.entity_table.keys().next_back().map_or(0, |k| k + 1);
        self.entity_table.insert(
            id,
            EntityRecord {
                entity_id: id,
                value: entity.value.clone(),
                entity_type: entity.entity_type.clone(),
                domain: entity.domain.clone(),
                embedding: None,
                model_version: None,
            },
        );
        self.by_key.insert(key, id);
        id
    }

    /// Adds `frequency` uses of an existing entity to a user's catalog.
    pub fn add_to_user(&mut self, user: &UserId, entity_id: u64, frequency: u64, last_seen: i64) {
        assert!(self.entity_table.contains_key(&entity_id), "unknown entity id");
        let cat = self
            .user_map
            .entry(user.clone())
            .or_insert_with(|| UserCatalog {
                user: user.clone(),
                entries: Vec::new(),
            });
        match cat.entries.iter_mut().find(|e| e.entity_id == entity_id) {
            Some(e) => {
                e.frequency += frequency;
                e.last_seen = e.last_seen.max(last_seen);
            }
            None => cat.entries.push(CatalogEntry {
                entity_id,
                frequency,
                last_seen,
            }),
        }
    }

    /// Records referenced by the user's catalog; empty for unknown users.
    pub fn lookup_candidates(&self, user: &UserId) -> Vec<&EntityRecord> {
        self.user_map
            .get(user)
            .map(|cat| {
                cat.entries
                    .iter()
                    .filter_map(|e| self.entity_table.get(&e.entity_id))
                    .collect()
            })
            .unwrap_or_default()
    }

    /// The model version shared by every record, `None` if any differs or is
    /// unset. An empty index is fresh for any version.
    pub fn is_fresh_for(&self, version: u32) -> bool {
        self.entity_table
            .values()
            .all(|r| r.model_version == Some(version) && r.embedding.is_some())
    }

    /// Ids referenced from catalogs but missing from the entity table.
    pub fn dangling_ids(&self) -> Vec<u64> {
        self.user_map
            .values()
            .flat_map(|c| c.entries.iter().map(|e| e.entity_id))
            .filter(|id| !self.entity_table.contains_key(id))
            .collect()
    }

    fn rebuild_keys(&mut self) {
        self.by_key = self
            .entity_table
            .values()
            .map(|r| ((r.value.clone(), r.entity_type.clone()), r.entity_id))
            .collect();
    }
}

/// Aggregates the usage log into a personal index.
///
/// Only events with `ts` in `[now - window_days days, now]` count, and a
/// (user, entity) pair is kept when it occurs at least `min_freq` times in
/// that window. Embeddings stay empty until [`refresh_embeddings`].
pub fn build_index<'a>(
    usage_log: impl IntoIterator<Item = &'a UsageEvent>,
    now: i64,
    window_days: u32,
    min_freq: u64,
) -> PersonalIndex {
    let from = now - i64::from(window_days) * DAY_MS;

    struct Agg {
        count: u64,
        last_seen: i64,
    }
    // (value, type) -> first-seen domain
    let mut domains: HashMap<(String, String), String> = HashMap::new();
    let mut pairs: BTreeMap<(UserId, (String, String)), Agg> = BTreeMap::new();

    for ev in usage_log {
        if ev.ts < from || ev.ts > now {
            continue;
        }
        let value = normalize(&ev.value);
        if value.is_empty() {
            continue;
        }
        let key = (value, ev.entity_type.clone());
        domains
            .entry(key.clone())
            .or_insert_with(|| ev.domain.clone());
        let agg = pairs.entry((ev.user.clone(), key)).or_insert(Agg {
            count: 0,
            last_seen: ev.ts,
        });
        agg.count += 1;
        agg.last_seen = agg.last_seen.max(ev.ts);
    }

    pairs.retain(|_, a| a.count >= min_freq);

    let mut keys: Vec<&(String, String)> = pairs.keys().map(|(_, k)| k).collect();
    keys.sort();
    keys.dedup();

    let mut index = PersonalIndex::new(window_days, min_freq);
    for (id, key) in keys.into_iter().enumerate() {
        let id = id as u64;
        index.entity_table.insert(
            id,
            EntityRecord {
                entity_id: id,
                value: key.0.clone(),
                entity_type: key.1.clone(),
                domain: domains[key].clone(),
                embedding: None,
                model_version: None,
            },
        );
        index.by_key.insert(key.clone(), id);
    }
    for ((user, key), agg) in &pairs {
        let id = index.by_key[key];
        index.add_to_user(user, id, agg.count, agg.last_seen);
    }
    for cat in index.user_map.values_mut() {
        cat.entries.sort_by_key(|e| e.entity_id);
    }
    index
}

/// Recomputes every cached embedding with `w` and stamps `w.version`.
pub fn refresh_embeddings(index: &PersonalIndex, w: &EncoderWeights) -> Result<PersonalIndex> {
    let records: Vec<&EntityRecord> = index.entity_table.values().collect();
    let encoded: Vec<(u64, Result<Embedding>)> = records
        .par_iter()
        .map(|r| (r.entity_id, encode_text(w, &r.value)))
        .collect();

    let mut out = index.clone();
    let mut failures = Vec::new();
    for (id, res) in encoded {
        let rec = out.entity_table.get_mut(&id).expect("same keys");
        match res {
            Ok(e) => {
                rec.embedding = Some(e);
                rec.model_version = Some(w.version);
            }
            Err(e) => failures.push((id, e.to_string())),
        }
    }
    if failures.is_empty() {
        Ok(out)
    } else {
        Err(Error::RefreshFailed(failures))
    }
}

fn put_str(buf: &mut Vec<u8>, s: &str) {
    buf.extend_from_slice(&(s.len() as u32).to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
}

/// Serializes to the `PIX1` binary framing with a CRC32 trailer.
pub fn to_bytes(index: &PersonalIndex) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&index.window_days.to_le_bytes());
    buf.extend_from_slice(&index.min_freq.to_le_bytes());

    buf.extend_from_slice(&(index.entity_table.len() as u64).to_le_bytes());
    for r in index.entity_table.values() {
        buf.extend_from_slice(&r.entity_id.to_le_bytes());
        put_str(&mut buf, &r.value);
        put_str(&mut buf, &r.entity_type);
        put_str(&mut buf, &r.domain);
        match (&r.embedding, r.model_version) {
            (Some(e), Some(v)) => {
                buf.push(1);
                buf.extend_from_slice(&v.to_le_bytes());
                buf.extend_from_slice(&(e.dim() as u32).to_le_bytes());
                for x in e.as_slice() {
                    buf.extend_from_slice(&x.to_le_bytes());
                }
            }
            _ => buf.push(0),
        }
    }

    buf.extend_from_slice(&(index.user_map.len() as u64).to_le_bytes());
    for cat in index.user_map.values() {
        put_str(&mut buf, cat.user.as_str());
        buf.extend_from_slice(&(cat.entries.len() as u32).to_le_bytes());
        for e in &cat.entries {
            buf.extend_from_slice(&e.entity_id.to_le_bytes());
            buf.extend_from_slice(&e.frequency.to_le_bytes());
            buf.extend_from_slice(&e.last_seen.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    buf
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::CorruptSnapshot("unexpected end of data".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn i64(&mut self) -> Result<i64> {
        Ok(i64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::CorruptSnapshot("invalid utf-8".into()))
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<PersonalIndex> {
    if bytes.len() < MAGIC.len() + 4 {
        return Err(Error::CorruptSnapshot("file too short".into()));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(trailer.try_into().unwrap());
    if crc32fast::hash(body) != stored {
        return Err(Error::CorruptSnapshot("checksum mismatch".into()));
    }
    let mut c = Cursor { buf: body, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err(Error::CorruptSnapshot("bad index magic".into()));
    }
    let version = c.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::CorruptSnapshot(format!(
            "unsupported format version {version}"
        )));
    }
    let window_days = c.u32()?;
    let min_freq = c.u64()?;
    let mut index = PersonalIndex::new(window_days, min_freq);

    let n_entities = c.u64()?;
    for _ in 0..n_entities {
        let entity_id = c.u64()?;
        let value = c.string()?;
        let entity_type = c.string()?;
        let domain = c.string()?;
        let (embedding, model_version) = match c.u8()? {
            0 => (None, None),
            1 => {
                let v = c.u32()?;
                let dim = c.u32()? as usize;
                let raw = c.take(dim.checked_mul(4).ok_or_else(|| {
                    Error::CorruptSnapshot("embedding size overflow".into())
                })?)?;
                let e = raw
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                    .collect();
                (Some(Embedding(e)), Some(v))
            }
            t => return Err(Error::CorruptSnapshot(format!("bad embedding tag {t}"))),
        };
        index.entity_table.insert(
            entity_id,
            EntityRecord {
                entity_id,
                value,
                entity_type,
                domain,
                embedding,
                model_version,
            },
        );
    }

    let n_users = c.u64()?;
    for _ in 0..n_users {
        let user = UserId::new(c.string()?)
            .map_err(|_| Error::CorruptSnapshot("empty user id".into()))?;
        let n = c.u32()?;
        let mut entries = Vec::with_capacity(n as usize);
        for _ in 0..n {
            entries.push(CatalogEntry {
                entity_id: c.u64()?,
                frequency: c.u64()?,
                last_seen: c.i64()?,
            });
        }
        index
            .user_map
            .insert(user.clone(), UserCatalog { user, entries });
    }
    if c.pos != body.len() {
        return Err(Error::CorruptSnapshot("trailing bytes".into()));
    }
    if !index.dangling_ids().is_empty() {
        return Err(Error::CorruptSnapshot("dangling entity ids".into()));
    }
    index.rebuild_keys();
    Ok(index)
}

pub fn save_snapshot(index: &PersonalIndex, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, to_bytes(index)).map_err(|e| Error::io(path, e))
}

pub fn load_snapshot(path: impl AsRef<Path>) -> Result<PersonalIndex> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(user: &str, value: &str, ty: &str, ts: i64) -> UsageEvent {
        UsageEvent {
            user: UserId::new(user).unwrap(),
            value: value.into(),
            entity_type: ty.into(),
            domain: "Music".into(),
            ts,
        }
    }

    const NOW: i64 = 1_656_633_600_000;

    #[test]
    fn empty_log() {
        let idx = build_index(&[], NOW, 30, 2);
        assert!(idx.entity_table.is_empty());
        assert!(idx.user_map.is_empty());
    }

    #[test]
    fn shared_entity_is_deduplicated() {
        let mut log = Vec::new();
        for u in ["a", "b"] {
            for k in 0..5 {
                log.push(ev(u, "scars", "SongName", NOW - k * 1000));
            }
        }
        let idx = build_index(&log, NOW, 30, 1);
        assert_eq!(idx.entity_table.len(), 1);
        let a = idx.lookup_candidates(&UserId::new("a").unwrap());
        let b = idx.lookup_candidates(&UserId::new("b").unwrap());
        assert_eq!(a[0].entity_id, b[0].entity_id);
        assert_eq!(idx.user_map.values().next().unwrap().entries[0].frequency, 5);
    }

    #[test]
    fn window_excludes_stale_plays() {
        let mut log = Vec::new();
        for _ in 0..3 {
            log.push(ev("u", "callen", "PlaylistName", NOW - 40 * DAY_MS));
        }
        for _ in 0..2 {
            log.push(ev("u", "callen", "PlaylistName", NOW - 5 * DAY_MS));
        }
        // brute-force in-window count
        let in_window = log
            .iter()
            .filter(|e| e.ts >= NOW - 30 * DAY_MS && e.ts <= NOW)
            .count();
        assert_eq!(in_window, 2);
        let idx = build_index(&log, NOW, 30, 3);
        assert!(idx.entity_table.is_empty());
        let idx = build_index(&log, NOW, 30, 2);
        assert_eq!(idx.entity_table.len(), 1);
    }

    #[test]
    fn same_value_different_type_is_distinct() {
        let log = vec![
            ev("u", "scars", "SongName", NOW),
            ev("u", "scars", "VideoName", NOW),
        ];
        let idx = build_index(&log, NOW, 30, 1);
        assert_eq!(idx.entity_table.len(), 2);
    }

    #[test]
    fn cold_start_user() {
        let idx = build_index(&[ev("u", "x", "T", NOW)], NOW, 30, 1);
        assert!(idx
            .lookup_candidates(&UserId::new("stranger").unwrap())
            .is_empty());
    }

    #[test]
    fn refresh_sets_versions() {
        let log = vec![ev("u", "scars", "SongName", NOW), ev("u", "wallows", "ArtistName", NOW)];
        let idx = build_index(&log, NOW, 30, 1);
        let mut w = EncoderWeights::random(8, 1 << 10, 1);
        w.version = 2;
        let r1 = refresh_embeddings(&idx, &w).unwrap();
        let r2 = refresh_embeddings(&r1, &w).unwrap();
        assert_eq!(r1, r2);
        assert!(r1.is_fresh_for(2));
        assert!(!idx.is_fresh_for(2));
        assert!(r1
            .entity_table
            .values()
            .all(|r| r.model_version == Some(2)));
        let empty = PersonalIndex::default();
        assert_eq!(refresh_embeddings(&empty, &w).unwrap(), empty);
    }

    #[test]
    fn snapshot_round_trip_and_corruption() {
        let log = vec![ev("u", "scars", "SongName", NOW), ev("v", "scars", "SongName", NOW)];
        let idx = build_index(&log, NOW, 30, 1);
        let w = EncoderWeights::random(8, 1 << 10, 1);
        let idx = refresh_embeddings(&idx, &w).unwrap();
        let bytes = to_bytes(&idx);
        assert_eq!(&bytes[..4], b"PIX1");
        assert_eq!(from_bytes(&bytes).unwrap(), idx);

        let truncated = &bytes[..bytes.len() - 7];
        assert!(matches!(from_bytes(truncated), Err(Error::CorruptSnapshot(_))));
        let mut flipped = bytes.clone();
        flipped[10] ^= 0xff;
        assert!(matches!(from_bytes(&flipped), Err(Error::CorruptSnapshot(_))));

        let empty = PersonalIndex::default();
        assert_eq!(from_bytes(&to_bytes(&empty)).unwrap(), empty);
    }

    #[test]
    fn hand_built_index_dedups() {
        let mut idx = PersonalIndex::default();
        let carrie = Entity::new("VideoName", "carrie", "Video").unwrap();
        let a = idx.add_entity(&carrie);
        let b = idx.add_entity(&carrie);
        assert_eq!(a, b);
        let u = UserId::new("u").unwrap();
        idx.add_to_user(&u, a, 3, NOW);
        assert_eq!(idx.lookup_candidates(&u).len(), 1);
        assert_eq!(idx.entity_id("Carrie", "VideoName"), Some(a));
    }
}
