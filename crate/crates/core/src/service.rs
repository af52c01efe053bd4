//! HTTP rewrite service over an atomically swappable snapshot.
//!
//! Handlers clone an `Arc` to the current snapshot and never hold the lock
//! while computing, so a reload is visible to a request either completely or
//! not at all.

use std::collections::HashMap;
use std::future::Future;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tokio::net::TcpListener;

use crate::encoder::EncoderWeights;
use crate::error::{Error, Result};
use crate::index::{load_snapshot, PersonalIndex};
use crate::jsonl;
use crate::model::{Session, Turn, UserId};
use crate::retrieval::{correct, GateConfig, InferenceMode, Reason, RewriteDecision};
use crate::text::normalize;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextTurn {
    pub query: String,
    #[serde(default)]
    pub response: String,
    #[serde(default)]
    pub ts: i64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GateOverride {
    pub tau1: Option<f64>,
    pub tau2: Option<f64>,
    pub k: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewriteRequest {
    pub user: String,
    pub query: String,
    #[serde(default)]
    pub context: Vec<ContextTurn>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gate: Option<GateOverride>,
}

impl RewriteRequest {
    /// The request an orchestrator would send for a session's defective
    /// query, carrying the turns before it as context.
    pub fn from_session(s: &Session) -> Option<Self> {
        let source = s.source_turn()?;
        Some(RewriteRequest {
            user: s.user.as_str().to_string(),
            query: source.query.clone(),
            context: s
                .context()
                .iter()
                .map(|t| ContextTurn {
                    query: t.query.clone(),
                    response: t.response.clone(),
                    ts: t.ts,
                })
                .collect(),
            gate: None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewriteResponse {
    pub triggered: bool,
    pub rewrite: Option<String>,
    pub entity_value: Option<String>,
    pub entity_domain: Option<String>,
    pub s1: Option<f64>,
    pub s2: Option<f64>,
    pub reason: Reason,
    pub latency_us: u64,
    /// Weights version of the snapshot that answered.
    pub model_version: u32,
}

/// One precomputed (user, query) → rewrite row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableEntry {
    pub user: String,
    pub query: String,
    pub rewrite: String,
    pub entity_value: String,
    pub entity_domain: String,
}

#[derive(Debug, Clone, Default)]
pub struct RewriteTable {
    rows: HashMap<(String, String), TableEntry>,
}

impl RewriteTable {
    pub fn from_entries(entries: Vec<TableEntry>) -> Self {
        let rows = entries
            .into_iter()
            .map(|e| ((e.user.clone(), normalize(&e.query)), e))
            .collect();
        RewriteTable { rows }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(Self::from_entries(jsonl::read(path)?))
    }

    pub fn get(&self, user: &str, query: &str) -> Option<&TableEntry> {
        self.rows.get(&(user.to_string(), normalize(query)))
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// Everything a request reads, loaded and checked together.
#[derive(Debug)]
pub struct Snapshot {
    pub weights: EncoderWeights,
    pub index: PersonalIndex,
    pub table: Option<RewriteTable>,
}

impl Snapshot {
    pub fn new(weights: EncoderWeights, index: PersonalIndex, table: Option<RewriteTable>) -> Result<Self> {
        if !index.is_fresh_for(weights.version) {
            let found = index.entity_table.values().map(|r| r.model_version).find(|v| *v != Some(weights.version));
            return Err(Error::StaleEmbeddings {
                index: found.flatten(),
                weights: weights.version,
            });
        }
        Ok(Snapshot { weights, index, table })
    }

    pub fn load(index_path: &Path, weights_path: &Path, table_path: Option<&Path>) -> Result<Self> {
        let weights = EncoderWeights::load(weights_path)?;
        let index = load_snapshot(index_path)?;
        let table = table_path.map(RewriteTable::load).transpose()?;
        Self::new(weights, index, table)
    }
}

#[derive(Debug, Clone)]
pub struct SnapshotPaths {
    pub index: PathBuf,
    pub weights: PathBuf,
    pub table: Option<PathBuf>,
}

pub struct AppState {
    snapshot: RwLock<Arc<Snapshot>>,
    paths: RwLock<Option<SnapshotPaths>>,
    pub gate: GateConfig,
    pub mode: InferenceMode,
}

impl AppState {
    pub fn new(snapshot: Snapshot, paths: Option<SnapshotPaths>, gate: GateConfig, mode: InferenceMode) -> Self {
        AppState {
            snapshot: RwLock::new(Arc::new(snapshot)),
            paths: RwLock::new(paths),
            gate,
            mode,
        }
    }

    pub fn current(&self) -> Arc<Snapshot> {
        self.snapshot.read().expect("snapshot lock poisoned").clone()
    }

    pub fn swap(&self, next: Snapshot) {
        *self.snapshot.write().expect("snapshot lock poisoned") = Arc::new(next);
    }
}

/// Request checks that must fail with 400 rather than reach the model.
pub fn validate_request(req: &RewriteRequest) -> Result<()> {
    UserId::new(req.user.clone())?;
    if normalize(&req.query).is_empty() {
        return Err(Error::EmptyQuery { index: req.context.len() });
    }
    for (i, t) in req.context.iter().enumerate() {
        if normalize(&t.query).is_empty() {
            return Err(Error::EmptyQuery { index: i });
        }
        if i > 0 && t.ts < req.context[i - 1].ts {
            return Err(Error::NonChronological { index: i });
        }
    }
    if let Some(g) = req.gate {
        if let Some(k) = g.k {
            if k == 0 {
                return Err(Error::Config("k must be at least 1".into()));
            }
        }
    }
    Ok(())
}

fn effective_gate(base: &GateConfig, o: Option<GateOverride>) -> Result<GateConfig> {
    match o {
        None => Ok(*base),
        Some(o) => GateConfig::new(o.tau1.unwrap_or(base.tau1), o.tau2.unwrap_or(base.tau2), o.k.unwrap_or(base.k)),
    }
}

/// The service's answer for one request, minus timing. Pure in
/// (request, snapshot, gate, mode).
pub fn respond(snap: &Snapshot, req: &RewriteRequest, gate: &GateConfig, mode: &InferenceMode) -> Result<RewriteResponse> {
    validate_request(req)?;
    let gate = effective_gate(gate, req.gate)?;
    let version = snap.weights.version;
    if let Some(hit) = snap.table.as_ref().and_then(|t| t.get(&req.user, &req.query)) {
        return Ok(RewriteResponse {
            triggered: true,
            rewrite: Some(hit.rewrite.clone()),
            entity_value: Some(hit.entity_value.clone()),
            entity_domain: Some(hit.entity_domain.clone()),
            s1: None,
            s2: None,
            reason: Reason::Triggered,
            latency_us: 0,
            model_version: version,
        });
    }
    let user = UserId::new(req.user.clone())?;
    let context: Vec<Turn> = req.context.iter().map(|t| Turn::new(&t.query, &t.response, t.ts)).collect();
    let d: RewriteDecision = correct(&user, &req.query, &context, &snap.index, &snap.weights, &gate, mode)?;
    Ok(RewriteResponse {
        triggered: d.triggered,
        rewrite: d.rewrite,
        entity_value: d.entity.as_ref().map(|e| e.value.clone()),
        entity_domain: d.entity.as_ref().map(|e| e.domain.clone()),
        s1: d.s1,
        s2: d.s2,
        reason: d.reason,
        latency_us: 0,
        model_version: version,
    })
}

#[derive(Serialize)]
struct ErrorBody {
    error: &'static str,
    message: String,
}

fn error_response(status: StatusCode, kind: &'static str, message: String) -> Response {
    (status, Json(ErrorBody { error: kind, message })).into_response()
}

fn is_client_error(e: &Error) -> bool {
    matches!(
        e,
        Error::EmptyQuery { .. }
            | Error::NonChronological { .. }
            | Error::Config(_)
            | Error::SourceQueryTooLong { .. }
            | Error::InvalidEntity(_)
    )
}

async fn rewrite(State(state): State<Arc<AppState>>, body: Bytes) -> Response {
    let start = Instant::now();
    let req: RewriteRequest = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => return error_response(StatusCode::BAD_REQUEST, "MalformedRequest", e.to_string()),
    };
    let snap = state.current();
    match respond(&snap, &req, &state.gate, &state.mode) {
        Ok(mut resp) => {
            resp.latency_us = start.elapsed().as_micros() as u64;
            Json(resp).into_response()
        }
        Err(e) if is_client_error(&e) => error_response(StatusCode::BAD_REQUEST, e.kind(), e.to_string()),
        // internal details stay in the server
        Err(_) => error_response(StatusCode::INTERNAL_SERVER_ERROR, "Internal", "internal error".into()),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub model_version: u32,
    pub index_entities: usize,
    pub index_users: usize,
    pub table_entries: usize,
}

pub fn health(snap: &Snapshot) -> Health {
    Health {
        status: "ok".into(),
        model_version: snap.weights.version,
        index_entities: snap.index.entity_table.len(),
        index_users: snap.index.user_map.len(),
        table_entries: snap.table.as_ref().map_or(0, RewriteTable::len),
    }
}

async fn healthz(State(state): State<Arc<AppState>>) -> Json<Health> {
    Json(health(&state.current()))
}

/// Optional body of a reload request; missing paths reuse the current ones.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ReloadRequest {
    pub index: Option<PathBuf>,
    pub weights: Option<PathBuf>,
    pub table: Option<PathBuf>,
}

async fn reload(State(state): State<Arc<AppState>>, body: Bytes) -> Response {
    let req: ReloadRequest = if body.iter().all(u8::is_ascii_whitespace) {
        ReloadRequest::default()
    } else {
        match serde_json::from_slice(&body) {
            Ok(r) => r,
            Err(e) => return error_response(StatusCode::BAD_REQUEST, "MalformedRequest", e.to_string()),
        }
    };
    let current = state.paths.read().expect("paths lock poisoned").clone();
    let (Some(index), Some(weights)) = (
        req.index.clone().or_else(|| current.as_ref().map(|p| p.index.clone())),
        req.weights.clone().or_else(|| current.as_ref().map(|p| p.weights.clone())),
    ) else {
        return error_response(StatusCode::BAD_REQUEST, "Config", "no snapshot paths to reload from".into());
    };
    let table = req.table.clone().or_else(|| current.as_ref().and_then(|p| p.table.clone()));

    let loaded = tokio::task::spawn_blocking({
        let (index, weights, table) = (index.clone(), weights.clone(), table.clone());
        move || Snapshot::load(&index, &weights, table.as_deref())
    })
    .await;
    match loaded {
        Ok(Ok(snap)) => {
            let h = health(&snap);
            state.swap(snap);
            *state.paths.write().expect("paths lock poisoned") = Some(SnapshotPaths { index, weights, table });
            Json(h).into_response()
        }
        Ok(Err(e @ Error::StaleEmbeddings { .. })) => error_response(StatusCode::CONFLICT, e.kind(), e.to_string()),
        Ok(Err(e)) => error_response(StatusCode::BAD_REQUEST, e.kind(), e.to_string()),
        Err(_) => error_response(StatusCode::INTERNAL_SERVER_ERROR, "Internal", "internal error".into()),
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/v1/rewrite", post(rewrite))
        .route("/healthz", get(healthz))
        .route("/admin/reload", post(reload))
        .with_state(state)
}

/// Serves until `shutdown` resolves.
pub async fn serve(
    listener: TcpListener,
    state: Arc<AppState>,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> Result<()> {
    let addr = listener.local_addr().map_err(|e| Error::io("listener", e))?;
    axum::serve(listener, router(state))
        .with_graceful_shutdown(shutdown)
        .await
        .map_err(|e| Error::io(format!("serve {addr}"), e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn request_validation() {
        let ok = RewriteRequest {
            user: "u".into(),
            query: "play karen".into(),
            context: vec![],
            gate: None,
        };
        assert!(validate_request(&ok).is_ok());
        let empty = RewriteRequest { query: "  ".into(), ..ok.clone() };
        assert!(matches!(validate_request(&empty), Err(Error::EmptyQuery { .. })));
        let disordered = RewriteRequest {
            context: vec![
                ContextTurn { query: "a".into(), response: String::new(), ts: 5 },
                ContextTurn { query: "b".into(), response: String::new(), ts: 1 },
            ],
            ..ok.clone()
        };
        assert!(matches!(validate_request(&disordered), Err(Error::NonChronological { index: 1 })));
        let no_user = RewriteRequest { user: String::new(), ..ok };
        assert!(validate_request(&no_user).is_err());
    }

    #[test]
    fn response_field_names() {
        let r = RewriteResponse {
            triggered: false,
            rewrite: None,
            entity_value: None,
            entity_domain: None,
            s1: None,
            s2: None,
            reason: Reason::NoCandidates,
            latency_us: 3,
            model_version: 1,
        };
        let v = serde_json::to_value(&r).unwrap();
        let keys: Vec<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
        for k in ["triggered", "rewrite", "entity_value", "entity_domain", "s1", "s2", "reason", "latency_us"] {
            assert!(keys.contains(&k), "{k}");
        }
        assert_eq!(v["reason"], "NoCandidates");
    }
}
