//! `entirec` command line: one subcommand per pipeline stage.
//!
//! Every config field is also a `--flag`; precedence is flag > `--config`
//! file (or `ENTIREC_CONFIG`) > built-in default. Artifacts live under
//! `data_dir` with fixed names.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Arg, ArgMatches, Command};

use entirec::config::Config;
use entirec::datagen::{generate_corpus, select_rephrase_pairs, split_by_user};
use entirec::encoder::EncoderWeights;
use entirec::eval::{
    calibrate_gate, evaluate, export_embeddings, reports_csv, reports_table, session_inputs, threshold_sweep,
};
use entirec::index::{build_index, load_snapshot, refresh_embeddings, save_snapshot, PersonalIndex, UsageEvent};
use entirec::loadtest::{self, LoadConfig};
use entirec::model::Session;
use entirec::retrieval::{correct, GateConfig};
use entirec::service::{self, AppState, RewriteRequest, Snapshot, SnapshotPaths, TableEntry};
use entirec::training::{
    bm25_mine, build_examples, loss_curve_csv, mine_two_pass, train, train_from, Bm25, HardNegativeSet,
};
use entirec::{jsonl, Error, Result};

const RAW: &str = "raw.jsonl";
const SESSIONS: &str = "sessions.jsonl";
const TRAIN: &str = "train.jsonl";
const VAL: &str = "val.jsonl";
const TEST: &str = "test.jsonl";
const USAGE: &str = "usage_log.jsonl";
const INDEX: &str = "index.bin";
const WEIGHTS: &str = "weights.bin";
const LOSS: &str = "loss.csv";
const NEGATIVES: &str = "negatives.jsonl";
const EVAL: &str = "eval.csv";
const SWEEP: &str = "sweep.csv";
const EMBEDDINGS: &str = "embeddings.tsv";
const LOADTEST: &str = "loadtest";

/// Config keys whose default is absent, so they cannot be typed from it.
const OPTIONAL_PATHS: &[&str] = &["table", "init_weights", "negatives", "emit_table"];

const SUBCOMMANDS: &[(&str, &str)] = &[
    ("datagen", "Generate the synthetic corpus and its train/val/test splits"),
    ("build-index", "Aggregate the usage log into a personal entity index"),
    ("refresh-embeddings", "Re-embed every indexed entity with the current weights"),
    ("train", "Train the encoder for the configured variant"),
    ("mine-negatives", "Mine hard negatives (two-pass or BM25) for the training file"),
    ("eval", "Evaluate on the test split and write the EM report"),
    ("sweep", "Evaluate over the tau1 x tau2 grid"),
    ("export-embeddings", "Write test-query embeddings with their domains as TSV"),
    ("serve", "Serve the rewrite endpoint"),
    ("loadtest", "Offer open-loop load to a running endpoint"),
];

fn defaults_table() -> toml::Table {
    toml::Table::try_from(Config::default()).expect("config is serializable")
}

fn flag_name(key: &str) -> String {
    key.replace('_', "-")
}

fn cli() -> Command {
    let mut root = Command::new("entirec")
        .about("Personalized, context-aware entity correction for dialogue query rewriting")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .args_override_self(true)
        .arg(
            Arg::new("config")
                .long("config")
                .value_name("PATH")
                .global(true)
                .help("TOML config file (default: $ENTIREC_CONFIG)"),
        );
    for (key, value) in defaults_table() {
        root = root.arg(
            Arg::new(key.clone())
                .long(flag_name(&key))
                .value_name(kind_name(&value))
                .global(true)
                .help(format!("config `{key}` (default {value})")),
        );
    }
    for key in OPTIONAL_PATHS {
        root = root.arg(
            Arg::new(*key)
                .long(flag_name(key))
                .value_name("PATH")
                .global(true)
                .help(format!("config `{key}` (default unset)")),
        );
    }
    for (name, about) in SUBCOMMANDS {
        root = root.subcommand(Command::new(*name).about(*about));
    }
    root
}

fn kind_name(v: &toml::Value) -> &'static str {
    match v {
        toml::Value::Integer(_) => "INT",
        toml::Value::Float(_) => "REAL",
        toml::Value::Boolean(_) => "BOOL",
        toml::Value::Array(_) => "LIST",
        _ => "STRING",
    }
}

/// Types a flag's text after the field's default value.
fn typed(key: &str, text: &str, default: Option<&toml::Value>) -> std::result::Result<toml::Value, String> {
    let bad = || format!("invalid value {text:?} for --{}", flag_name(key));
    Ok(match default {
        Some(toml::Value::Integer(_)) => toml::Value::Integer(text.parse().map_err(|_| bad())?),
        Some(toml::Value::Float(_)) => toml::Value::Float(text.parse().map_err(|_| bad())?),
        Some(toml::Value::Boolean(_)) => toml::Value::Boolean(text.parse().map_err(|_| bad())?),
        Some(toml::Value::Array(_)) => toml::Value::Array(
            text.split(',')
                .map(|x| x.trim().parse::<f64>().map(toml::Value::Float).map_err(|_| bad()))
                .collect::<std::result::Result<_, _>>()?,
        ),
        _ => toml::Value::String(text.to_string()),
    })
}

fn overrides(m: &ArgMatches) -> std::result::Result<toml::Table, String> {
    let defaults = defaults_table();
    let mut out = toml::Table::new();
    let keys = defaults.keys().map(String::as_str).chain(OPTIONAL_PATHS.iter().copied());
    for key in keys {
        if let Some(text) = m.get_one::<String>(key) {
            out.insert(key.to_string(), typed(key, text, defaults.get(key))?);
        }
    }
    Ok(out)
}

fn log(msg: impl AsRef<str>) {
    eprintln!("[entirec] {}", msg.as_ref());
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn read_sessions(cfg: &Config, name: &str) -> Result<Vec<Session>> {
    jsonl::read(cfg.path(name))
}

fn load_weights(cfg: &Config) -> Result<EncoderWeights> {
    EncoderWeights::load(cfg.path(WEIGHTS))
}

/// The stored index, re-embedded in memory when its embeddings predate `w`.
fn fresh_index(cfg: &Config, w: &EncoderWeights) -> Result<PersonalIndex> {
    let index = load_snapshot(cfg.path(INDEX))?;
    if index.is_fresh_for(w.version) {
        Ok(index)
    } else {
        log(format!("index embeddings are stale; re-embedding for weights v{}", w.version));
        refresh_embeddings(&index, w)
    }
}

fn datagen(cfg: &Config) -> Result<()> {
    std::fs::create_dir_all(&cfg.data_dir).map_err(|e| Error::Io {
        path: cfg.data_dir.clone(),
        source: e,
    })?;
    let corpus = generate_corpus(&cfg.gen())?;
    let sessions = select_rephrase_pairs(&corpus.raw, cfg.max_edit_ratio, cfg.max_time_gap_ms);
    let (train_all, test) = split_by_user(&sessions, cfg.test_fraction);
    let (train, val) = split_by_user(&train_all, cfg.val_fraction);
    jsonl::write(cfg.path(RAW), &corpus.raw)?;
    jsonl::write(cfg.path(SESSIONS), &sessions)?;
    jsonl::write(cfg.path(TRAIN), &train)?;
    jsonl::write(cfg.path(VAL), &val)?;
    jsonl::write(cfg.path(TEST), &test)?;
    jsonl::write(cfg.path(USAGE), &corpus.usage_log)?;
    log(format!(
        "raw {} selected {} train {} val {} test {} usage events {}",
        corpus.raw.len(),
        sessions.len(),
        train.len(),
        val.len(),
        test.len(),
        corpus.usage_log.len()
    ));
    Ok(())
}

fn build(cfg: &Config) -> Result<()> {
    let log_events: Vec<UsageEvent> = jsonl::read(cfg.path(USAGE))?;
    let index = build_index(&log_events, cfg.now_ms, cfg.window_days, cfg.min_freq);
    save_snapshot(&index, cfg.path(INDEX))?;
    log(format!("users {} entities {}", index.user_map.len(), index.entity_table.len()));
    Ok(())
}

fn refresh(cfg: &Config) -> Result<()> {
    let w = load_weights(cfg)?;
    let index = refresh_embeddings(&load_snapshot(cfg.path(INDEX))?, &w)?;
    save_snapshot(&index, cfg.path(INDEX))?;
    log(format!("re-embedded {} entities for weights v{}", index.entity_table.len(), w.version));
    Ok(())
}

fn train_cmd(cfg: &Config) -> Result<()> {
    let tc = cfg.train();
    let sessions = read_sessions(cfg, &cfg.train_file)?;
    let examples = build_examples(&sessions, tc.variant, tc.max_len)?;
    let negatives = cfg.negatives.as_ref().map(HardNegativeSet::load).transpose()?;
    let out = match &cfg.init_weights {
        Some(p) => train_from(EncoderWeights::load(p)?, &examples, &tc, negatives.as_ref())?,
        None if negatives.is_some() => {
            let mut init = EncoderWeights::random_scaled(tc.dim, tc.feature_dim, tc.seed, tc.init_scale);
            init.activation = tc.activation;
            train_from(init, &examples, &tc, negatives.as_ref())?
        }
        None => train(&examples, &tc)?,
    };
    out.weights.save(cfg.path(WEIGHTS))?;
    write_text(&cfg.path(LOSS), &loss_curve_csv(&out.curve))?;
    let last = out.curve.last();
    log(format!(
        "variant {} examples {} steps {} final L_E {:.4} L_D {:.4} -> weights v{}",
        tc.variant,
        examples.len(),
        out.curve.len(),
        last.map_or(0.0, |r| r.l_e),
        last.map_or(0.0, |r| r.l_d),
        out.weights.version
    ));
    Ok(())
}

fn mine(cfg: &Config) -> Result<()> {
    let sessions = read_sessions(cfg, &cfg.train_file)?;
    let set = match cfg.negatives_method.as_str() {
        "two-pass" => {
            let w = load_weights(cfg)?;
            let index = fresh_index(cfg, &w)?;
            mine_two_pass(&w, &sessions, &index, &cfg.variant.inference_mode(cfg.max_len))?
        }
        "bm25" => {
            let index = load_snapshot(cfg.path(INDEX))?;
            let mut pools: BTreeMap<&str, Bm25> = BTreeMap::new();
            let mut set = HardNegativeSet::new();
            for (i, s) in sessions.iter().enumerate() {
                let (Some(target), Some(source)) = (&s.target_entity, s.source_turn()) else {
                    continue;
                };
                let pool = pools.entry(s.user.as_str()).or_insert_with(|| {
                    let values: Vec<&str> =
                        index.lookup_candidates(&s.user).iter().map(|r| r.value.as_str()).collect();
                    Bm25::new(&values)
                });
                for v in bm25_mine(pool, &target.value, &source.query, cfg.bm25_k) {
                    set.insert(i as u64, &v, &target.value);
                }
            }
            set
        }
        other => {
            return Err(Error::Config(format!(
                "negatives_method must be two-pass or bm25, got {other:?}"
            )))
        }
    };
    let out = cfg.negatives.clone().unwrap_or_else(|| cfg.path(NEGATIVES));
    set.save(&out)?;
    log(format!("{} examples with hard negatives -> {}", set.len(), out.display()));
    Ok(())
}

fn chosen_gate(cfg: &Config, w: &EncoderWeights, index: &PersonalIndex) -> Result<GateConfig> {
    if !cfg.calibrate {
        return cfg.gate();
    }
    let val = read_sessions(cfg, VAL)?;
    let mode = cfg.variant.inference_mode(cfg.max_len);
    let (gate, best) = calibrate_gate(w, index, &val, &cfg.tau1_grid, &cfg.tau2_grid, cfg.k, &mode)?;
    log(format!(
        "calibrated on {} validation sessions: tau1 {} tau2 {} (validation EM {:.4})",
        val.len(),
        gate.tau1,
        gate.tau2,
        best.em_overall
    ));
    Ok(gate)
}

fn eval_cmd(cfg: &Config) -> Result<()> {
    let w = load_weights(cfg)?;
    let index = fresh_index(cfg, &w)?;
    let test = read_sessions(cfg, TEST)?;
    let gate = chosen_gate(cfg, &w, &index)?;
    let mode = cfg.variant.inference_mode(cfg.max_len);
    let report = evaluate(&w, &index, &test, &gate, &cfg.variant.to_string(), &mode)?;
    write_text(&cfg.path(EVAL), &reports_csv(std::slice::from_ref(&report)))?;
    print!("{}", reports_table(std::slice::from_ref(&report), None));

    if let Some(path) = &cfg.emit_table {
        let mut rows = Vec::new();
        for s in &test {
            let Some(source) = s.source_turn() else { continue };
            let d = correct(&s.user, &source.query, s.context(), &index, &w, &gate, &mode)?;
            if let (true, Some(rewrite), Some(e)) = (d.triggered, d.rewrite, d.entity) {
                rows.push(TableEntry {
                    user: s.user.as_str().to_string(),
                    query: source.query.clone(),
                    rewrite,
                    entity_value: e.value,
                    entity_domain: e.domain,
                });
            }
        }
        jsonl::write(path, &rows)?;
        log(format!("{} table rows -> {}", rows.len(), path.display()));
    }
    Ok(())
}

fn sweep_cmd(cfg: &Config) -> Result<()> {
    let w = load_weights(cfg)?;
    let index = fresh_index(cfg, &w)?;
    let test = read_sessions(cfg, TEST)?;
    let mode = cfg.variant.inference_mode(cfg.max_len);
    let rows = threshold_sweep(
        &w,
        &index,
        &test,
        &cfg.tau1_grid,
        &cfg.tau2_grid,
        cfg.k,
        &cfg.variant.to_string(),
        &mode,
    )?;
    write_text(&cfg.path(SWEEP), &reports_csv(&rows))?;
    print!("{}", reports_table(&rows, None));
    Ok(())
}

fn export_cmd(cfg: &Config) -> Result<()> {
    let w = load_weights(cfg)?;
    let test = read_sessions(cfg, TEST)?;
    let inputs = session_inputs(&test, &cfg.variant.inference_mode(cfg.max_len))?;
    export_embeddings(&w, &inputs, cfg.path(EMBEDDINGS))?;
    log(format!("{} embeddings -> {}", inputs.len(), cfg.path(EMBEDDINGS).display()));
    Ok(())
}

fn runtime() -> Result<tokio::runtime::Runtime> {
    tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| Error::Io {
            path: PathBuf::from("tokio runtime"),
            source: e,
        })
}

fn serve_cmd(cfg: &Config) -> Result<()> {
    let paths = SnapshotPaths {
        index: cfg.path(INDEX),
        weights: cfg.path(WEIGHTS),
        table: cfg.table.clone(),
    };
    let snapshot = Snapshot::load(&paths.index, &paths.weights, paths.table.as_deref())?;
    let state = Arc::new(AppState::new(
        snapshot,
        Some(paths),
        cfg.gate()?,
        cfg.variant.inference_mode(cfg.max_len),
    ));
    runtime()?.block_on(async {
        let listener = tokio::net::TcpListener::bind(&cfg.bind)
            .await
            .map_err(|e| Error::Io {
                path: PathBuf::from(&cfg.bind),
                source: e,
            })?;
        log(format!("listening on {}", cfg.bind));
        service::serve(listener, state, async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
    })
}

fn loadtest_cmd(cfg: &Config) -> Result<()> {
    let test = read_sessions(cfg, TEST)?;
    let corpus: Vec<RewriteRequest> = test.iter().filter_map(RewriteRequest::from_session).collect();
    let lc = LoadConfig {
        endpoint: cfg.endpoint.clone(),
        qps: cfg.qps,
        duration_s: cfg.duration_s,
        timeout_ms: cfg.timeout_ms,
        seed: cfg.seed,
    };
    let (report, samples) = runtime()?.block_on(loadtest::run(&lc, &corpus))?;
    report.write(&samples, &cfg.path(LOADTEST))?;
    println!("{}", report.summary());
    Ok(())
}

fn run(name: &str, cfg: &Config) -> Result<()> {
    match name {
        "datagen" => datagen(cfg),
        "build-index" => build(cfg),
        "refresh-embeddings" => refresh(cfg),
        "train" => train_cmd(cfg),
        "mine-negatives" => mine(cfg),
        "eval" => eval_cmd(cfg),
        "sweep" => sweep_cmd(cfg),
        "export-embeddings" => export_cmd(cfg),
        "serve" => serve_cmd(cfg),
        "loadtest" => loadtest_cmd(cfg),
        _ => unreachable!("clap rejects unknown subcommands"),
    }
}

fn fail(e: &Error) -> ExitCode {
    let msg = e.to_string().replace('\n', " ");
    eprintln!("error: kind={} msg={msg}", e.kind());
    ExitCode::from(1)
}

fn main() -> ExitCode {
    let matches = cli().get_matches();
    let (name, sub) = matches.subcommand().expect("subcommand is required");
    let base = match Config::resolve(sub.get_one::<String>("config").map(Path::new)) {
        Ok(c) => c,
        Err(e) => return fail(&e),
    };
    let flags = match overrides(sub) {
        Ok(t) => t,
        Err(msg) => {
            eprintln!("error: kind=Usage msg={msg}");
            return ExitCode::from(2);
        }
    };
    let cfg = match base.merge(flags) {
        Ok(c) => c,
        Err(e) => return fail(&e),
    };
    match run(name, &cfg) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(&e),
    }
}
