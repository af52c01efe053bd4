//! Python bindings: corpus generation, index, encoder weights, training,
//! evaluation and single-request correction.

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};
use serde::Serialize;

use entirec::datagen::{generate_corpus as gen_corpus, split_by_user, GenConfig};
use entirec::encoder::{encode_text, EncoderWeights, DEFAULT_DIM, DEFAULT_FEATURE_DIM, DEFAULT_MAX_LEN};
use entirec::eval::{calibrate_gate as calibrate, default_calibration_grid, evaluate as eval_sessions};
use entirec::index::{
    build_index, load_snapshot, refresh_embeddings, save_snapshot, PersonalIndex, UsageEvent, DEFAULT_MIN_FREQ,
    DEFAULT_WINDOW_DAYS,
};
use entirec::model::{Session, Turn, UserId};
use entirec::retrieval::{correct as correct_query, GateConfig, InferenceMode};
use entirec::training::{self, build_examples, TrainConfig, Variant};

create_exception!(entirec_py, EntirecError, PyException);

fn err(e: entirec::Error) -> PyErr {
    EntirecError::new_err(format!("{}: {e}", e.kind()))
}

/// Serde value → plain Python objects, via the json module.
fn to_py<'py, T: Serialize>(py: Python<'py>, v: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(v).map_err(|e| EntirecError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn variant(name: &str) -> PyResult<Variant> {
    name.parse().map_err(err)
}

fn mode_for(name: &str) -> PyResult<InferenceMode> {
    Ok(variant(name)?.inference_mode(DEFAULT_MAX_LEN))
}

#[pyclass(name = "GateConfig", from_py_object)]
#[derive(Clone)]
struct PyGate {
    inner: GateConfig,
}

#[pymethods]
impl PyGate {
    #[new]
    #[pyo3(signature = (tau1 = 0.8, tau2 = 0.6, k = 10))]
    fn new(tau1: f64, tau2: f64, k: usize) -> PyResult<Self> {
        Ok(PyGate {
            inner: GateConfig::new(tau1, tau2, k).map_err(err)?,
        })
    }
    #[getter]
    fn tau1(&self) -> f64 {
        self.inner.tau1
    }
    #[getter]
    fn tau2(&self) -> f64 {
        self.inner.tau2
    }
    #[getter]
    fn k(&self) -> usize {
        self.inner.k
    }
    fn __repr__(&self) -> String {
        format!("GateConfig(tau1={}, tau2={}, k={})", self.inner.tau1, self.inner.tau2, self.inner.k)
    }
}

#[pyclass(name = "Weights")]
struct PyWeights {
    inner: EncoderWeights,
}

#[pymethods]
impl PyWeights {
    #[staticmethod]
    #[pyo3(signature = (dim = DEFAULT_DIM, feature_dim = DEFAULT_FEATURE_DIM, seed = 42))]
    fn random(dim: u32, feature_dim: u32, seed: u64) -> Self {
        PyWeights {
            inner: EncoderWeights::random(dim, feature_dim, seed),
        }
    }
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(PyWeights {
            inner: EncoderWeights::load(path).map_err(err)?,
        })
    }
    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(path).map_err(err)
    }
    #[getter]
    fn version(&self) -> u32 {
        self.inner.version
    }
    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }
    /// Unit-norm embedding of `text`.
    fn encode(&self, text: &str) -> PyResult<Vec<f32>> {
        Ok(encode_text(&self.inner, text).map_err(err)?.0)
    }
}

#[pyclass(name = "Sessions", skip_from_py_object)]
#[derive(Clone)]
struct PySessions {
    inner: Vec<Session>,
}

#[pymethods]
impl PySessions {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(PySessions {
            inner: entirec::jsonl::read(path).map_err(err)?,
        })
    }
    fn save(&self, path: &str) -> PyResult<()> {
        entirec::jsonl::write(path, &self.inner).map_err(err)
    }
    fn __len__(&self) -> usize {
        self.inner.len()
    }
    /// Per-user holdout: the last `test_fraction` of each user's sessions.
    fn split(&self, test_fraction: f64) -> (PySessions, PySessions) {
        let (a, b) = split_by_user(&self.inner, test_fraction);
        (PySessions { inner: a }, PySessions { inner: b })
    }
    fn to_list<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner)
    }
}

#[pyclass(name = "Corpus")]
struct PyCorpus {
    sessions: Vec<Session>,
    usage_log: Vec<UsageEvent>,
    now_ms: i64,
}

#[pymethods]
impl PyCorpus {
    #[getter]
    fn sessions(&self) -> PySessions {
        PySessions {
            inner: self.sessions.clone(),
        }
    }
    #[getter]
    fn n_usage_events(&self) -> usize {
        self.usage_log.len()
    }
    #[getter]
    fn now_ms(&self) -> i64 {
        self.now_ms
    }
}

#[pyclass(name = "Index")]
struct PyIndex {
    inner: PersonalIndex,
}

#[pymethods]
impl PyIndex {
    #[staticmethod]
    #[pyo3(signature = (corpus, window_days = DEFAULT_WINDOW_DAYS, min_freq = DEFAULT_MIN_FREQ))]
    fn build(corpus: &PyCorpus, window_days: u32, min_freq: u64) -> Self {
        PyIndex {
            inner: build_index(&corpus.usage_log, corpus.now_ms, window_days, min_freq),
        }
    }
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(PyIndex {
            inner: load_snapshot(path).map_err(err)?,
        })
    }
    fn save(&self, path: &str) -> PyResult<()> {
        save_snapshot(&self.inner, path).map_err(err)
    }
    /// A copy with every entity embedded by `weights`.
    fn refreshed(&self, weights: &PyWeights) -> PyResult<PyIndex> {
        Ok(PyIndex {
            inner: refresh_embeddings(&self.inner, &weights.inner).map_err(err)?,
        })
    }
    #[getter]
    fn n_users(&self) -> usize {
        self.inner.user_map.len()
    }
    #[getter]
    fn n_entities(&self) -> usize {
        self.inner.entity_table.len()
    }
    /// `(value, domain)` for each of the user's candidates.
    fn candidates(&self, user: &str) -> PyResult<Vec<(String, String)>> {
        let u = UserId::new(user).map_err(err)?;
        Ok(self
            .inner
            .lookup_candidates(&u)
            .iter()
            .map(|r| (r.value.clone(), r.domain.clone()))
            .collect())
    }
}

#[pyfunction]
#[pyo3(signature = (n_users = 1000, n_sessions = 10_000, seed = 42))]
fn generate_corpus(py: Python<'_>, n_users: usize, n_sessions: usize, seed: u64) -> PyResult<PyCorpus> {
    let cfg = GenConfig {
        n_users,
        n_sessions,
        seed,
        ..GenConfig::default()
    };
    let corpus = py.detach(|| gen_corpus(&cfg)).map_err(err)?;
    Ok(PyCorpus {
        sessions: corpus.sessions,
        usage_log: corpus.usage_log,
        now_ms: cfg.now_ms,
    })
}

/// Trains (or continues training `init`) and returns the weights with the
/// per-step loss curve.
#[pyfunction]
#[pyo3(signature = (sessions, variant = "CC", epochs = 10, seed = 42, batch_size = 128, mu = 0.5, init = None))]
fn train<'py>(
    py: Python<'py>,
    sessions: &PySessions,
    variant: &str,
    epochs: usize,
    seed: u64,
    batch_size: usize,
    mu: f64,
    init: Option<&PyWeights>,
) -> PyResult<(PyWeights, Bound<'py, PyAny>)> {
    let cfg = TrainConfig {
        variant: self::variant(variant)?,
        epochs,
        seed,
        batch_size,
        mu,
        ..TrainConfig::default()
    };
    let init = init.map(|w| w.inner.clone());
    let out = py
        .detach(|| {
            let ex = build_examples(&sessions.inner, cfg.variant, cfg.max_len)?;
            match init {
                Some(w) => training::train_from(w, &ex, &cfg, None),
                None => training::train(&ex, &cfg),
            }
        })
        .map_err(err)?;
    let curve: Vec<(u64, f64, f64, f64)> = out.curve.iter().map(|r| (r.step, r.l_e, r.l_d, r.total)).collect();
    Ok((PyWeights { inner: out.weights }, curve.into_pyobject(py)?.into_any()))
}

#[pyfunction]
#[pyo3(signature = (weights, index, sessions, gate = None, variant = "CC"))]
fn evaluate<'py>(
    py: Python<'py>,
    weights: &PyWeights,
    index: &PyIndex,
    sessions: &PySessions,
    gate: Option<PyGate>,
    variant: &str,
) -> PyResult<Bound<'py, PyAny>> {
    let gate = gate.map_or_else(GateConfig::default, |g| g.inner);
    let mode = mode_for(variant)?;
    let r = py
        .detach(|| eval_sessions(&weights.inner, &index.inner, &sessions.inner, &gate, variant, &mode))
        .map_err(err)?;
    to_py(py, &r)
}

/// The gate with the best EM on `sessions` over a 0.1-step grid.
#[pyfunction]
#[pyo3(signature = (weights, index, sessions, variant = "CC", k = 10))]
fn calibrate_gate(
    py: Python<'_>,
    weights: &PyWeights,
    index: &PyIndex,
    sessions: &PySessions,
    variant: &str,
    k: usize,
) -> PyResult<PyGate> {
    let mode = mode_for(variant)?;
    let grid = default_calibration_grid();
    let (gate, _) = py
        .detach(|| calibrate(&weights.inner, &index.inner, &sessions.inner, &grid, &grid, k, &mode))
        .map_err(err)?;
    Ok(PyGate { inner: gate })
}

/// Corrects one query. `context` holds earlier `(query, response, ts)` turns.
#[pyfunction]
#[pyo3(signature = (user, query, index, weights, context = Vec::new(), gate = None, variant = "CC"))]
#[allow(clippy::too_many_arguments)]
fn correct<'py>(
    py: Python<'py>,
    user: &str,
    query: &str,
    index: &PyIndex,
    weights: &PyWeights,
    context: Vec<(String, String, i64)>,
    gate: Option<PyGate>,
    variant: &str,
) -> PyResult<Bound<'py, PyDict>> {
    let user = UserId::new(user).map_err(err)?;
    let turns: Vec<Turn> = context.iter().map(|(q, r, ts)| Turn::new(q, r, *ts)).collect();
    let gate = gate.map_or_else(GateConfig::default, |g| g.inner);
    let d = correct_query(&user, query, &turns, &index.inner, &weights.inner, &gate, &mode_for(variant)?)
        .map_err(err)?;
    let out = PyDict::new(py);
    out.set_item("triggered", d.triggered)?;
    out.set_item("rewrite", d.rewrite)?;
    out.set_item("entity_value", d.entity.as_ref().map(|e| e.value.clone()))?;
    out.set_item("entity_domain", d.entity.as_ref().map(|e| e.domain.clone()))?;
    out.set_item("s1", d.s1)?;
    out.set_item("s2", d.s2)?;
    out.set_item("reason", d.reason.to_string())?;
    Ok(out)
}

/// `(loss, d_query, d_entity)`; rows of `entities` past the queries are
/// shared extra negatives.
#[pyfunction]
#[pyo3(signature = (queries, entities, scale = 20.0))]
fn loss_mnrl(queries: Vec<Vec<f64>>, entities: Vec<Vec<f64>>, scale: f64) -> PyResult<(f64, Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let r = training::loss_mnrl(&queries, &entities, scale).map_err(err)?;
    Ok((r.loss, r.d_query, r.d_entity))
}

/// `(loss, grads)` over `(i, j, same_domain)` pairs of `embeddings`.
#[pyfunction]
#[pyo3(signature = (embeddings, pairs, lambda_margin = 0.75))]
fn loss_contrastive_domain(
    embeddings: Vec<Vec<f64>>,
    pairs: Vec<(usize, usize, bool)>,
    lambda_margin: f64,
) -> PyResult<(f64, Vec<Vec<f64>>)> {
    if let Some(&(i, j, _)) = pairs.iter().find(|(i, j, _)| *i >= embeddings.len() || *j >= embeddings.len()) {
        return Err(EntirecError::new_err(format!("pair ({i}, {j}) is out of range")));
    }
    let r = training::loss_contrastive_domain(&embeddings, &pairs, lambda_margin);
    Ok((r.loss, r.grads))
}

#[pyfunction]
fn variants(py: Python<'_>) -> PyResult<Bound<'_, PyList>> {
    PyList::new(py, Variant::ALL.iter().map(|v| v.to_string()))
}

#[pymodule]
fn entirec_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("EntirecError", m.py().get_type::<EntirecError>())?;
    m.add_class::<PyGate>()?;
    m.add_class::<PyWeights>()?;
    m.add_class::<PySessions>()?;
    m.add_class::<PyCorpus>()?;
    m.add_class::<PyIndex>()?;
    m.add_function(wrap_pyfunction!(generate_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(calibrate_gate, m)?)?;
    m.add_function(wrap_pyfunction!(correct, m)?)?;
    m.add_function(wrap_pyfunction!(loss_mnrl, m)?)?;
    m.add_function(wrap_pyfunction!(loss_contrastive_domain, m)?)?;
    m.add_function(wrap_pyfunction!(variants, m)?)?;
    Ok(())
}
