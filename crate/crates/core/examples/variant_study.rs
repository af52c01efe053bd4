//! Trains every model variant on one synthetic corpus, calibrates each gate
//! on a validation split and prints an EM table.
//!
//! cargo run --release --example variant_study -- [n_sessions] [epochs] [variants]

use std::time::Instant;

use entirec::datagen::{generate_corpus, split_by_user, GenConfig};
use entirec::eval::{calibrate_gate, default_calibration_grid, evaluate, reports_table};
use entirec::index::{build_index, refresh_embeddings, DEFAULT_MIN_FREQ, DEFAULT_WINDOW_DAYS};
use entirec::training::{build_examples, train, TrainConfig, Variant};

fn main() -> entirec::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let n_sessions = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(10_000);
    let epochs = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(10);
    let variants: Vec<Variant> = match args.get(3) {
        Some(list) => list.split(',').map(|v| v.parse()).collect::<entirec::Result<_>>()?,
        None => Variant::ALL.to_vec(),
    };

    let gen = GenConfig {
        n_users: (n_sessions / 10).max(1),
        n_sessions,
        ..GenConfig::default()
    };
    let corpus = generate_corpus(&gen)?;
    let (train_all, test_set) = split_by_user(&corpus.sessions, 0.2);
    let (train_set, val_set) = split_by_user(&train_all, 0.1);
    let raw_index = build_index(&corpus.usage_log, gen.now_ms, DEFAULT_WINDOW_DAYS, DEFAULT_MIN_FREQ);
    println!(
        "train {} val {} test {} entities {}",
        train_set.len(),
        val_set.len(),
        test_set.len(),
        raw_index.entity_table.len()
    );

    let grid = default_calibration_grid();
    let mut reports = Vec::new();
    for v in variants {
        let t0 = Instant::now();
        let cfg = TrainConfig { variant: v, epochs, ..TrainConfig::default() };
        let ex = build_examples(&train_set, v, cfg.max_len)?;
        let out = train(&ex, &cfg)?;
        let index = refresh_embeddings(&raw_index, &out.weights)?;
        let mode = v.inference_mode(cfg.max_len);
        let (gate, _) = calibrate_gate(&out.weights, &index, &val_set, &grid, &grid, 10, &mode)?;
        let r = evaluate(&out.weights, &index, &test_set, &gate, &v.to_string(), &mode)?;
        let first = out.curve.first().map_or(0.0, |c| c.l_e);
        let last = out.curve.last().map_or(0.0, |c| c.l_e);
        println!("{v}: {:.1}s  L_E {first:.3} -> {last:.3}", t0.elapsed().as_secs_f64());
        reports.push(r);
    }
    let base = reports.iter().find(|r| r.variant == "N").cloned();
    print!("{}", reports_table(&reports, base.as_ref()));
    Ok(())
}
