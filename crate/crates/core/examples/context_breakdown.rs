//! Top-1 accuracy of a variant broken down by what the context holds.
//!
//! cargo run --release --example context_breakdown -- [variant] [epochs]

use std::collections::BTreeMap;

use entirec::datagen::{generate_corpus, split_by_user, GenConfig};
use entirec::index::{build_index, refresh_embeddings, DEFAULT_MIN_FREQ, DEFAULT_WINDOW_DAYS};
use entirec::retrieval::rank;
use entirec::training::{build_examples, train, TrainConfig, Variant};

fn main() -> entirec::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let variant: Variant = args.get(1).map_or(Ok(Variant::C), |s| s.parse())?;
    let epochs = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(10);
    let gen = GenConfig::default();
    let corpus = generate_corpus(&gen)?;
    let (train_set, test_set) = split_by_user(&corpus.sessions, 0.2);
    let raw_index = build_index(&corpus.usage_log, gen.now_ms, DEFAULT_WINDOW_DAYS, DEFAULT_MIN_FREQ);
    let cfg = TrainConfig { variant, epochs, ..TrainConfig::default() };
    let out = train(&build_examples(&train_set, variant, cfg.max_len)?, &cfg)?;
    let index = refresh_embeddings(&raw_index, &out.weights)?;
    let mode = variant.inference_mode(cfg.max_len);

    let mut by: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for s in &test_set {
        let target = s.target_entity.as_ref().unwrap();
        let src = s.source_turn().unwrap();
        let cands = index.lookup_candidates(&s.user);
        let ctx = s.context();
        let mut tags = Vec::new();
        if ctx.is_empty() {
            tags.push("none".to_string());
        }
        for t in ctx {
            let h = t.hypothesis.as_ref().unwrap();
            let tag = match h.entities.first() {
                Some(e) if e.value == target.value => "mention",
                Some(e) if cands.iter().any(|c| c.value == e.value) => "distractor",
                Some(_) => "failed",
                None if h.domain == "Global" => "filler",
                None => "cue",
            };
            tags.push(tag.to_string());
        }
        let garbled = &src.hypothesis.as_ref().unwrap().entities[0].value;
        let dt = entirec::text::levenshtein(garbled, &target.value);
        let other = cands.iter().filter(|c| c.value != target.value)
            .map(|c| entirec::text::levenshtein(garbled, &c.value)).min().unwrap_or(usize::MAX);
        tags.push(if other <= dt { "amb" } else if other <= dt + 1 { "near" } else { "clear" }.to_string());
        tags.sort();
        tags.dedup();
        let r = rank(&s.user, &src.query, ctx, &index, &out.weights, 1, &mode)?;
        let hit = r.scored.first().is_some_and(|c| c.record.value == target.value);
        for t in tags.iter().chain(std::iter::once(&"all".to_string())) {
            let e = by.entry(t.clone()).or_default();
            e.0 += 1;
            e.1 += usize::from(hit);
        }
    }
    for (k, (n, h)) in by {
        println!("{variant} {k:<12} n={n:<5} top1={:.4}", h as f64 / n as f64);
    }
    Ok(())
}
