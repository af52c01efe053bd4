//! Exact-match evaluation, trigger accounting, threshold sweeps and
//! embedding export.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::{featurize, flatten_context, Embedding, EncoderWeights, TokenSequence};
use crate::error::{Error, Result};
use crate::index::PersonalIndex;
use crate::model::{extract_target_domain, Session};
use crate::retrieval::{decide, rank, GateConfig, GazetteerDetector, InferenceMode, Ranking};
use crate::text::normalize;

/// 1 iff a prediction exists and equals the label after normalization.
pub fn exact_match(predicted: Option<&str>, label: &str) -> u8 {
    match predicted {
        Some(p) if normalize(p) == normalize(label) => 1,
        _ => 0,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub variant: String,
    pub em_overall: f64,
    pub em_triggered: f64,
    pub trigger_rate: f64,
    pub n_samples: usize,
    pub tau1: f64,
    pub tau2: f64,
    pub n_triggered: usize,
    /// Samples scoring 1 (correct rewrites, plus correct abstentions on
    /// samples labeled "no rewrite").
    pub n_correct: usize,
    /// Correct rewrites among triggered decisions.
    pub n_correct_triggered: usize,
    /// Gate-independent: the top-ranked entity is the labeled target.
    pub n_top1: usize,
}

impl EvalReport {
    fn from_counts(variant: &str, cfg: &GateConfig, c: Counts) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        EvalReport {
            variant: variant.to_string(),
            em_overall: ratio(c.correct, c.samples),
            em_triggered: ratio(c.correct_triggered, c.triggered),
            trigger_rate: ratio(c.triggered, c.samples),
            n_samples: c.samples,
            tau1: cfg.tau1,
            tau2: cfg.tau2,
            n_triggered: c.triggered,
            n_correct: c.correct,
            n_correct_triggered: c.correct_triggered,
            n_top1: c.top1,
        }
    }

    fn counts(&self) -> Counts {
        Counts {
            samples: self.n_samples,
            triggered: self.n_triggered,
            correct: self.n_correct,
            correct_triggered: self.n_correct_triggered,
            top1: self.n_top1,
        }
    }

    pub fn top1_accuracy(&self) -> f64 {
        if self.n_samples == 0 {
            0.0
        } else {
            self.n_top1 as f64 / self.n_samples as f64
        }
    }

    /// Sample-weighted merge of reports over disjoint test sets evaluated
    /// with the same gate.
    pub fn merge(&self, other: &EvalReport) -> EvalReport {
        let cfg = GateConfig {
            tau1: self.tau1,
            tau2: self.tau2,
            k: 0,
        };
        EvalReport::from_counts(&self.variant, &cfg, self.counts() + other.counts())
    }

    pub const CSV_HEADER: &'static str =
        "variant,tau1,tau2,n_samples,n_triggered,trigger_rate,em_overall,em_triggered,top1";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{:.6},{:.6},{:.6},{:.6}",
            self.variant,
            self.tau1,
            self.tau2,
            self.n_samples,
            self.n_triggered,
            self.trigger_rate,
            self.em_overall,
            self.em_triggered,
            self.top1_accuracy()
        )
    }
}

/// Relative EM change against a baseline run, in percent.
pub fn relative_em(report: &EvalReport, baseline: &EvalReport) -> Option<f64> {
    (baseline.em_overall > 0.0)
        .then(|| (report.em_overall - baseline.em_overall) / baseline.em_overall * 100.0)
}

pub fn reports_csv(reports: &[EvalReport]) -> String {
    let mut s = String::from(EvalReport::CSV_HEADER);
    s.push('\n');
    for r in reports {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

/// Fixed-width table for terminals, with EM relative to `baseline` if given.
pub fn reports_table(reports: &[EvalReport], baseline: Option<&EvalReport>) -> String {
    let mut s = format!(
        "{:<8} {:>6} {:>6} {:>8} {:>9} {:>8} {:>9} {:>8} {:>10}\n",
        "variant", "tau1", "tau2", "samples", "trig_rate", "em", "em_trig", "top1", "rel_em_%"
    );
    for r in reports {
        let rel = baseline
            .and_then(|b| relative_em(r, b))
            .map_or("-".to_string(), |v| format!("{v:+.2}"));
        let _ = writeln!(
            s,
            "{:<8} {:>6.2} {:>6.2} {:>8} {:>9.4} {:>8.4} {:>9.4} {:>8.4} {:>10}",
            r.variant,
            r.tau1,
            r.tau2,
            r.n_samples,
            r.trigger_rate,
            r.em_overall,
            r.em_triggered,
            r.top1_accuracy(),
            rel
        );
    }
    s
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
struct Counts {
    samples: usize,
    triggered: usize,
    correct: usize,
    correct_triggered: usize,
    top1: usize,
}

impl std::ops::Add for Counts {
    type Output = Counts;
    fn add(self, o: Counts) -> Counts {
        Counts {
            samples: self.samples + o.samples,
            triggered: self.triggered + o.triggered,
            correct: self.correct + o.correct,
            correct_triggered: self.correct_triggered + o.correct_triggered,
            top1: self.top1 + o.top1,
        }
    }
}

fn check_fresh(index: &PersonalIndex, w: &EncoderWeights) -> Result<()> {
    if index.is_fresh_for(w.version) {
        return Ok(());
    }
    let stale = index
        .entity_table
        .values()
        .find(|r| r.model_version != Some(w.version) || r.embedding.is_none());
    Err(Error::StaleEmbeddings {
        index: stale.and_then(|r| r.model_version),
        weights: w.version,
    })
}

fn rank_session<'a>(
    s: &Session,
    index: &'a PersonalIndex,
    w: &EncoderWeights,
    k: usize,
    mode: &InferenceMode,
) -> Result<Ranking<'a>> {
    let source = s.source_turn().ok_or(Error::TooFewTurns)?;
    rank(&s.user, &source.query, s.context(), index, w, k, mode)
}

fn score(s: &Session, ranking: &Ranking<'_>, cfg: &GateConfig) -> Counts {
    let d = decide(ranking, cfg, &GazetteerDetector::default());
    let triggered = usize::from(d.triggered);
    let top1 = match (&s.target_entity, ranking.scored.first()) {
        (Some(t), Some(c)) => usize::from(c.record.value == t.value),
        _ => 0,
    };
    let correct = if s.is_labeled() {
        let label = &s.target_turn().expect("labeled sessions have two turns").query;
        usize::from(exact_match(d.rewrite.as_deref(), label))
    } else {
        // labeled "no rewrite": abstaining is the right answer
        usize::from(!d.triggered)
    };
    Counts {
        samples: 1,
        triggered,
        correct,
        correct_triggered: correct * triggered,
        top1,
    }
}

/// Runs `correct` on every sample and aggregates EM and trigger counts.
pub fn evaluate(
    w: &EncoderWeights,
    index: &PersonalIndex,
    test_set: &[Session],
    cfg: &GateConfig,
    variant: &str,
    mode: &InferenceMode,
) -> Result<EvalReport> {
    if test_set.is_empty() {
        return Err(Error::EmptyTestSet);
    }
    cfg.validate()?;
    check_fresh(index, w)?;
    let counts = test_set
        .par_iter()
        .map(|s| rank_session(s, index, w, cfg.k, mode).map(|r| score(s, &r, cfg)))
        .try_reduce(Counts::default, |a, b| Ok(a + b))?;
    Ok(EvalReport::from_counts(variant, cfg, counts))
}

#[allow(clippy::too_many_arguments)]
/// One report per (tau1, tau2) cell, rows ordered by tau1 then tau2.
/// Rankings are computed once and reused across cells.
pub fn threshold_sweep(
    w: &EncoderWeights,
    index: &PersonalIndex,
    test_set: &[Session],
    tau1_grid: &[f64],
    tau2_grid: &[f64],
    k: usize,
    variant: &str,
    mode: &InferenceMode,
) -> Result<Vec<EvalReport>> {
    if tau1_grid.is_empty() || tau2_grid.is_empty() {
        return Err(Error::Config("threshold grids must be non-empty".into()));
    }
    if test_set.is_empty() {
        return Err(Error::EmptyTestSet);
    }
    check_fresh(index, w)?;
    let rankings: Vec<Ranking<'_>> = test_set
        .par_iter()
        .map(|s| rank_session(s, index, w, k, mode))
        .collect::<Result<_>>()?;
    let mut out = Vec::with_capacity(tau1_grid.len() * tau2_grid.len());
    for &tau1 in tau1_grid {
        for &tau2 in tau2_grid {
            let cfg = GateConfig::new(tau1, tau2, k)?;
            let counts = test_set
                .par_iter()
                .zip(&rankings)
                .map(|(s, r)| score(s, r, &cfg))
                .reduce(Counts::default, |a, b| a + b);
            out.push(EvalReport::from_counts(variant, &cfg, counts));
        }
    }
    Ok(out)
}

/// Default grid searched by `calibrate_gate`: 0.1, 0.2, …, 1.0.
pub fn default_calibration_grid() -> Vec<f64> {
    (1..=10).map(|i| f64::from(i) / 10.0).collect()
}

/// The gate cell with the best overall EM on `validation`. Ties go to the
/// stricter cell (higher τ₁, then lower τ₂).
pub fn calibrate_gate(
    w: &EncoderWeights,
    index: &PersonalIndex,
    validation: &[Session],
    tau1_grid: &[f64],
    tau2_grid: &[f64],
    k: usize,
    mode: &InferenceMode,
) -> Result<(GateConfig, EvalReport)> {
    let rows = threshold_sweep(w, index, validation, tau1_grid, tau2_grid, k, "calibration", mode)?;
    let best = rows
        .into_iter()
        .max_by(|a, b| {
            a.n_correct
                .cmp(&b.n_correct)
                .then(a.tau1.total_cmp(&b.tau1))
                .then(b.tau2.total_cmp(&a.tau2))
        })
        .expect("grids are non-empty");
    Ok((GateConfig::new(best.tau1, best.tau2, k)?, best))
}

/// Model inputs for each labeled session with its target domain, as fed to
/// the encoder under `mode`.
pub fn session_inputs(sessions: &[Session], mode: &InferenceMode) -> Result<Vec<(TokenSequence, String)>> {
    sessions
        .iter()
        .filter_map(|s| {
            let source = s.source_turn()?;
            let domain = extract_target_domain(s).ok()?.to_string();
            let ctx = if mode.contextual { s.context() } else { &[] };
            Some(flatten_context(ctx, &source.query, mode.max_len, mode.prompt).map(|t| (t, domain)))
        })
        .collect()
}

/// TSV of query embeddings: `c0..c{d-1}`, `domain`, `query`.
pub fn export_embeddings(
    w: &EncoderWeights,
    queries: &[(TokenSequence, String)],
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let mut line = String::new();
    for c in 0..w.dim() {
        let _ = write!(line, "c{c}\t");
    }
    line.push_str("domain\tquery\n");
    out.write_all(line.as_bytes()).map_err(|e| Error::io(path, e))?;
    for (seq, domain) in queries {
        let emb = w.encode(&featurize(seq, w.feature_dim()))?;
        line.clear();
        for v in emb.as_slice() {
            // shortest round-trip rendering
            let _ = write!(line, "{v}\t");
        }
        let _ = writeln!(line, "{domain}\t{seq}");
        out.write_all(line.as_bytes()).map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Reads back a file written by [`export_embeddings`].
pub fn import_embeddings(path: impl AsRef<Path>) -> Result<Vec<(Embedding, String, String)>> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if i == 0 || line.is_empty() {
            continue;
        }
        let mut cols: Vec<&str> = line.split('\t').collect();
        let bad = || Error::Config(format!("{}: malformed row {}", path.display(), i + 1));
        if cols.len() < 2 {
            return Err(bad());
        }
        let query = cols.pop().ok_or_else(bad)?.to_string();
        let domain = cols.pop().ok_or_else(bad)?.to_string();
        let emb = cols
            .iter()
            .map(|c| c.parse::<f32>().map_err(|_| bad()))
            .collect::<Result<Vec<f32>>>()?;
        rows.push((Embedding(emb), domain, query));
    }
    Ok(rows)
}
