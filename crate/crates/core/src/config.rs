//! Flat key-value configuration shared by every CLI stage.
//!
//! Values come from built-in defaults, then a TOML file (`--config` or the
//! `ENTIREC_CONFIG` environment variable), then command-line flags.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datagen::{ContextMix, GenConfig, DEFAULT_MAX_EDIT_RATIO, DEFAULT_MAX_TIME_GAP_MS};
use crate::encoder::{Activation, DEFAULT_DIM, DEFAULT_FEATURE_DIM, DEFAULT_MAX_LEN};
use crate::error::{Error, Result};
use crate::eval::default_calibration_grid;
use crate::index::{DEFAULT_MIN_FREQ, DEFAULT_WINDOW_DAYS};
use crate::retrieval::GateConfig;
use crate::training::{TrainConfig, Variant};

pub const CONFIG_ENV: &str = "ENTIREC_CONFIG";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    /// Directory holding every pipeline artifact.
    pub data_dir: PathBuf,

    // corpus
    pub n_users: usize,
    pub n_sessions: usize,
    pub entities_per_user_min: usize,
    pub entities_per_user_max: usize,
    pub session_length_min: usize,
    pub session_length_max: usize,
    pub corruption_strength: f64,
    pub confusion_rate: f64,
    pub noise_rate: f64,
    pub lexicon_families: usize,
    pub now_ms: i64,
    pub test_fraction: f64,
    /// Share of each user's training sessions held out for gate calibration.
    pub val_fraction: f64,
    pub max_edit_ratio: f64,
    pub max_time_gap_ms: i64,

    // index
    pub window_days: u32,
    pub min_freq: u64,

    // encoder
    pub dim: u32,
    pub feature_dim: u32,
    pub max_len: usize,
    pub activation: Activation,
    pub init_scale: f64,

    // training
    pub variant: Variant,
    pub mu: f64,
    pub lambda_margin: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub scale: f64,
    /// Sessions file (under `data_dir`) used by `train` and `mine-negatives`.
    pub train_file: String,
    /// Checkpoint to continue training from.
    pub init_weights: Option<PathBuf>,
    /// Hard negatives to use in training.
    pub negatives: Option<PathBuf>,
    /// `two-pass` or `bm25`.
    pub negatives_method: String,
    pub bm25_k: usize,

    // gate
    pub tau1: f64,
    pub tau2: f64,
    pub k: usize,
    /// Pick τ₁/τ₂ on the validation split before evaluating.
    pub calibrate: bool,
    pub tau1_grid: Vec<f64>,
    pub tau2_grid: Vec<f64>,
    /// Where `eval` writes the static (user, query) → rewrite table.
    pub emit_table: Option<PathBuf>,

    // service
    pub bind: String,
    pub table: Option<PathBuf>,

    // load test
    pub endpoint: String,
    pub qps: f64,
    pub duration_s: f64,
    pub timeout_ms: u64,
}

impl Default for Config {
    fn default() -> Self {
        let gen = GenConfig::default();
        let train = TrainConfig::default();
        let gate = GateConfig::default();
        Config {
            seed: 42,
            data_dir: PathBuf::from("data"),
            n_users: gen.n_users,
            n_sessions: gen.n_sessions,
            entities_per_user_min: gen.entities_per_user.0,
            entities_per_user_max: gen.entities_per_user.1,
            session_length_min: gen.session_length.0,
            session_length_max: gen.session_length.1,
            corruption_strength: gen.corruption_strength,
            confusion_rate: gen.confusion_rate,
            noise_rate: gen.noise_rate,
            lexicon_families: gen.lexicon_families,
            now_ms: gen.now_ms,
            test_fraction: 0.2,
            val_fraction: 0.1,
            max_edit_ratio: DEFAULT_MAX_EDIT_RATIO,
            max_time_gap_ms: DEFAULT_MAX_TIME_GAP_MS,
            window_days: DEFAULT_WINDOW_DAYS,
            min_freq: DEFAULT_MIN_FREQ,
            dim: DEFAULT_DIM,
            feature_dim: DEFAULT_FEATURE_DIM,
            max_len: DEFAULT_MAX_LEN,
            activation: Activation::Linear,
            init_scale: train.init_scale,
            variant: train.variant,
            mu: train.mu,
            lambda_margin: train.lambda_margin,
            epochs: train.epochs,
            batch_size: train.batch_size,
            learning_rate: train.learning_rate,
            weight_decay: train.weight_decay,
            scale: train.scale,
            train_file: "train.jsonl".into(),
            init_weights: None,
            negatives: None,
            negatives_method: "two-pass".into(),
            bm25_k: 5,
            tau1: gate.tau1,
            tau2: gate.tau2,
            k: gate.k,
            calibrate: false,
            tau1_grid: default_calibration_grid(),
            tau2_grid: default_calibration_grid(),
            emit_table: None,
            bind: "127.0.0.1:8080".into(),
            table: None,
            endpoint: "http://127.0.0.1:8080".into(),
            qps: 120.0,
            duration_s: 60.0,
            timeout_ms: 2000,
        }
    }
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    /// Defaults, overlaid by `explicit` or else the file named by
    /// `ENTIREC_CONFIG`, if any.
    pub fn resolve(explicit: Option<&Path>) -> Result<Self> {
        match explicit {
            Some(p) => Self::load(p),
            None => match std::env::var_os(CONFIG_ENV) {
                Some(p) if !p.is_empty() => Self::load(PathBuf::from(p)),
                _ => Ok(Self::default()),
            },
        }
    }

    /// Replaces every field named in `overrides`; unknown keys are errors.
    pub fn merge(&self, overrides: toml::Table) -> Result<Self> {
        let mut table = toml::Table::try_from(self).map_err(|e| Error::Config(e.to_string()))?;
        for (k, v) in overrides {
            table.insert(k, v);
        }
        table
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }

    pub fn gen(&self) -> GenConfig {
        GenConfig {
            n_users: self.n_users,
            n_sessions: self.n_sessions,
            entities_per_user: (self.entities_per_user_min, self.entities_per_user_max),
            domains: crate::datagen::DOMAINS.iter().map(|d| d.to_string()).collect(),
            session_length: (self.session_length_min, self.session_length_max),
            corruption_strength: self.corruption_strength,
            confusion_rate: self.confusion_rate,
            noise_rate: self.noise_rate,
            lexicon_families: self.lexicon_families,
            context_mix: ContextMix::default(),
            now_ms: self.now_ms,
            seed: self.seed,
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            variant: self.variant,
            mu: self.mu,
            lambda_margin: self.lambda_margin,
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            scale: self.scale,
            seed: self.seed,
            dim: self.dim,
            feature_dim: self.feature_dim,
            max_len: self.max_len,
            activation: self.activation,
            init_scale: self.init_scale,
            ..TrainConfig::default()
        }
    }

    pub fn gate(&self) -> Result<GateConfig> {
        GateConfig::new(self.tau1, self.tau2, self.k)
    }

    /// `name` inside `data_dir`.
    pub fn path(&self, name: &str) -> PathBuf {
        self.data_dir.join(name)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_roundtrip_through_toml() {
        let c = Config::default();
        assert_eq!(Config::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn partial_file_keeps_defaults() {
        let c = Config::from_toml("tau1 = 0.9\nvariant = \"N\"\n").unwrap();
        assert_eq!(c.tau1, 0.9);
        assert_eq!(c.variant, Variant::N);
        assert_eq!(c.tau2, 0.6);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(matches!(Config::from_toml("tua1 = 0.9"), Err(Error::Config(_))));
    }

    #[test]
    fn overrides_win() {
        let c = Config::from_toml("epochs = 3").unwrap();
        let mut o = toml::Table::new();
        o.insert("epochs".into(), toml::Value::Integer(7));
        o.insert("bind".into(), toml::Value::String("0.0.0.0:9".into()));
        let m = c.merge(o).unwrap();
        assert_eq!(m.epochs, 7);
        assert_eq!(m.bind, "0.0.0.0:9");
    }
}
