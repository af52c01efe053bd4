//! Multi-task training of the shared encoder.
//!
//! The primary task ranks each query's target entity above the other
//! entities in the batch (plus any mined hard negatives). The auxiliary task
//! pulls together queries whose targets share a domain and pushes apart the
//! rest. The two are mixed as `mu * L_E + (1 - mu) * L_D`.

pub mod loss;
pub mod negatives;
pub mod optim;

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{
    featurize, featurize_text, flatten_context, Activation, EncoderWeights, FeatureVector,
    Forward, SpecialToken, TokenSequence, DEFAULT_DIM, DEFAULT_FEATURE_DIM, DEFAULT_MAX_LEN,
};
use crate::error::{Error, Result};
use crate::model::{extract_target_domain, Entity, Session};
use crate::retrieval::InferenceMode;

pub use loss::{loss_contrastive_domain, loss_mnrl, pair_contribution};
pub use negatives::{bm25_mine, mine_two_pass, Bm25, HardNegativeSet};
pub use optim::{AdamWConfig, GradAccumulator, OptimizerState};

/// Model settings: which input the primary task sees, whether (and on what
/// input) the domain task runs, and whether task markers are prefixed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    N,
    NN,
    NC,
    NNP,
    NCP,
    C,
    CC,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AuxInput {
    None,
    NonContextual,
    Contextual,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::N,
        Variant::NN,
        Variant::NC,
        Variant::NNP,
        Variant::NCP,
        Variant::C,
        Variant::CC,
    ];

    pub fn primary_contextual(self) -> bool {
        matches!(self, Variant::C | Variant::CC)
    }

    pub fn aux(self) -> AuxInput {
        match self {
            Variant::N | Variant::C => AuxInput::None,
            Variant::NN | Variant::NNP => AuxInput::NonContextual,
            Variant::NC | Variant::NCP | Variant::CC => AuxInput::Contextual,
        }
    }

    pub fn prompted(self) -> bool {
        matches!(self, Variant::NNP | Variant::NCP)
    }

    /// Inference uses the same input construction as the primary task.
    pub fn inference_mode(self, max_len: usize) -> InferenceMode {
        InferenceMode {
            contextual: self.primary_contextual(),
            prompt: self.prompted().then_some(SpecialToken::Rewrite),
            max_len,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.to_string().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub variant: Variant,
    pub mu: f64,
    pub lambda_margin: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Similarity temperature applied to cosines before the softmax.
    pub scale: f64,
    pub seed: u64,
    pub dim: u32,
    pub feature_dim: u32,
    pub max_len: usize,
    pub activation: Activation,
    /// Scale of the uniform initialization relative to variance 1/d.
    pub init_scale: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            variant: Variant::CC,
            mu: 0.5,
            lambda_margin: 0.75,
            epochs: 10,
            batch_size: 128,
            learning_rate: 1e-3,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            scale: 20.0,
            seed: 42,
            dim: DEFAULT_DIM,
            feature_dim: DEFAULT_FEATURE_DIM,
            max_len: DEFAULT_MAX_LEN,
            activation: Activation::Linear,
            init_scale: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.mu > 0.0 && self.mu <= 1.0) {
            return Err(Error::Config(format!("mu must be in (0, 1], got {}", self.mu)));
        }
        if !(self.lambda_margin > 0.0) {
            return Err(Error::Config("lambda_margin must be positive".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::DegenerateBatch(self.batch_size));
        }
        if !(self.init_scale > 0.0) {
            return Err(Error::Config("init_scale must be positive".into()));
        }
        if self.dim == 0 || self.feature_dim == 0 {
            return Err(Error::Config("dimensions must be positive".into()));
        }
        Ok(())
    }

    /// Variants without an auxiliary task train on `L_E` alone.
    pub fn effective_mu(&self) -> f64 {
        if self.variant.aux() == AuxInput::None {
            1.0
        } else {
            self.mu
        }
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }
}

pub fn combine_losses(mu: f64, l_e: f64, l_d: f64) -> f64 {
    if mu >= 1.0 {
        l_e
    } else {
        mu * l_e + (1.0 - mu) * l_d
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    pub id: u64,
    pub input_tokens: TokenSequence,
    /// Input for the domain task when it differs from the primary input.
    pub aux_tokens: Option<TokenSequence>,
    pub target_entity: Entity,
    pub target_domain: Option<String>,
}

/// Builds one example per labeled session; ids are positions in `sessions`.
pub fn build_examples(
    sessions: &[Session],
    variant: Variant,
    max_len: usize,
) -> Result<Vec<TrainingExample>> {
    let rewrite = variant.prompted().then_some(SpecialToken::Rewrite);
    let domain = variant.prompted().then_some(SpecialToken::Domain);
    let mut out = Vec::new();
    for (i, s) in sessions.iter().enumerate() {
        let (Some(target), Some(source)) = (&s.target_entity, s.source_turn()) else {
            continue;
        };
        let ctx = s.context();
        let primary_ctx = if variant.primary_contextual() { ctx } else { &[] };
        let input_tokens = flatten_context(primary_ctx, &source.query, max_len, rewrite)?;
        let aux_tokens = match variant.aux() {
            AuxInput::None => None,
            AuxInput::NonContextual => Some(flatten_context(&[], &source.query, max_len, domain)?),
            AuxInput::Contextual => Some(flatten_context(ctx, &source.query, max_len, domain)?),
        };
        let aux_tokens = aux_tokens.filter(|a| *a != input_tokens);
        out.push(TrainingExample {
            id: i as u64,
            input_tokens,
            aux_tokens,
            target_entity: target.clone(),
            target_domain: extract_target_domain(s).ok().map(str::to_string),
        });
    }
    Ok(out)
}

/// Example with features precomputed for a fixed hashing dimension.
#[derive(Debug, Clone)]
pub struct PreparedExample {
    pub id: u64,
    pub primary: FeatureVector,
    pub aux: Option<FeatureVector>,
    pub entity: FeatureVector,
    pub entity_value: String,
    pub domain: Option<String>,
}

pub fn prepare(examples: &[TrainingExample], feature_dim: u32) -> Vec<PreparedExample> {
    examples
        .iter()
        .map(|ex| PreparedExample {
            id: ex.id,
            primary: featurize(&ex.input_tokens, feature_dim),
            aux: ex.aux_tokens.as_ref().map(|t| featurize(t, feature_dim)),
            entity: featurize_text(&ex.target_entity.value, feature_dim),
            entity_value: ex.target_entity.value.clone(),
            domain: ex.target_domain.clone(),
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct Batch<'a> {
    pub examples: Vec<&'a PreparedExample>,
    /// Per-example hard negative entity values (may be empty).
    pub hard_negatives: Vec<Vec<String>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    pub l_e: f64,
    pub l_d: f64,
    pub total: f64,
}

/// Every index pair (i < j) of an n-element batch, in lexicographic order.
fn all_pairs(n: usize) -> Vec<(usize, usize)> {
    let mut v = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            v.push((i, j));
        }
    }
    v
}

fn accumulate(
    w: &EncoderWeights,
    grads: &mut GradAccumulator,
    x: &FeatureVector,
    fwd: &Forward,
    upstream: &[f64],
) {
    if upstream.iter().all(|&u| u == 0.0) {
        return;
    }
    let dir = w.backward_direction(fwd, upstream);
    for &(j, c) in x.entries() {
        grads.add(j, f64::from(c), &dir);
    }
}

/// Forward, both losses, backward, one optimizer update.
pub fn multitask_step(
    batch: &Batch<'_>,
    w: &mut EncoderWeights,
    opt: &mut OptimizerState,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<LossRecord> {
    let (mut record, grads) = step_gradients(batch, w, cfg, rng)?;
    opt.apply(w, &grads);
    record.step = opt.step;
    Ok(record)
}

/// Losses and their gradient with respect to W for one batch. The domain
/// pairs are drawn from `rng`.
pub fn step_gradients(
    batch: &Batch<'_>,
    w: &EncoderWeights,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(LossRecord, GradAccumulator)> {
    let n = batch.examples.len();
    if n < 2 {
        return Err(Error::DegenerateBatch(n));
    }
    let mu = cfg.effective_mu();
    let use_aux = mu < 1.0;
    if use_aux && batch.examples.iter().any(|e| e.domain.is_none()) {
        return Err(Error::MissingDomainLabels);
    }

    let fwd_q: Vec<Forward> = batch
        .examples
        .iter()
        .map(|e| w.forward(&e.primary))
        .collect::<Result<_>>()?;
    let fwd_e: Vec<Forward> = batch
        .examples
        .iter()
        .map(|e| w.forward(&e.entity))
        .collect::<Result<_>>()?;

    // Shared hard-negative columns, skipping any value that is a positive in
    // this batch.
    let mut neg_values: Vec<&str> = Vec::new();
    for negs in &batch.hard_negatives {
        for v in negs {
            let is_positive = batch.examples.iter().any(|e| e.entity_value == *v);
            if !is_positive && !neg_values.contains(&v.as_str()) {
                neg_values.push(v);
            }
        }
    }
    let neg_x: Vec<FeatureVector> = neg_values
        .iter()
        .map(|v| featurize_text(v, w.feature_dim()))
        .collect();
    let fwd_n: Vec<Forward> = neg_x.iter().map(|x| w.forward(x)).collect::<Result<_>>()?;

    let q_rows: Vec<Vec<f64>> = fwd_q.iter().map(|f| f.unit.clone()).collect();
    let e_rows: Vec<Vec<f64>> = fwd_e
        .iter()
        .chain(&fwd_n)
        .map(|f| f.unit.clone())
        .collect();
    let ranking = loss_mnrl(&q_rows, &e_rows, cfg.scale)?;

    let scale_by = |v: &[f64], s: f64| v.iter().map(|x| x * s).collect::<Vec<f64>>();
    let mut up_q: Vec<Vec<f64>> = ranking.d_query.iter().map(|g| scale_by(g, mu)).collect();
    let up_e: Vec<Vec<f64>> = ranking.d_entity.iter().map(|g| scale_by(g, mu)).collect();

    let mut l_d = 0.0;
    let mut aux_fwd: Vec<Option<Forward>> = Vec::new();
    let mut up_aux: Vec<Vec<f64>> = Vec::new();
    if use_aux {
        aux_fwd = batch
            .examples
            .iter()
            .map(|e| e.aux.as_ref().map(|x| w.forward(x)).transpose())
            .collect::<Result<_>>()?;
        let aux_rows: Vec<Vec<f64>> = aux_fwd
            .iter()
            .zip(&fwd_q)
            .map(|(a, q)| a.as_ref().unwrap_or(q).unit.clone())
            .collect();

        let candidates = all_pairs(n);
        let picks = rand::seq::index::sample(rng, candidates.len(), n.min(candidates.len()));
        let pairs: Vec<(usize, usize, bool)> = picks
            .iter()
            .map(|k| {
                let (i, j) = candidates[k];
                (i, j, batch.examples[i].domain == batch.examples[j].domain)
            })
            .collect();
        let contrastive = loss_contrastive_domain(&aux_rows, &pairs, cfg.lambda_margin);
        l_d = contrastive.loss;

        up_aux = vec![Vec::new(); n];
        for (i, g) in contrastive.grads.iter().enumerate() {
            let g = scale_by(g, 1.0 - mu);
            if aux_fwd[i].is_some() {
                up_aux[i] = g;
            } else {
                for (u, v) in up_q[i].iter_mut().zip(&g) {
                    *u += v;
                }
            }
        }
    }

    let mut grads = GradAccumulator::new(w.dim());
    for (i, ex) in batch.examples.iter().enumerate() {
        accumulate(w, &mut grads, &ex.primary, &fwd_q[i], &up_q[i]);
        accumulate(w, &mut grads, &ex.entity, &fwd_e[i], &up_e[i]);
        if let (Some(Some(fwd)), Some(x)) = (aux_fwd.get(i), ex.aux.as_ref()) {
            accumulate(w, &mut grads, x, fwd, &up_aux[i]);
        }
    }
    for (k, x) in neg_x.iter().enumerate() {
        accumulate(w, &mut grads, x, &fwd_n[k], &up_e[n + k]);
    }
    let record = LossRecord {
        step: 0,
        l_e: ranking.loss,
        l_d,
        total: combine_losses(mu, ranking.loss, l_d),
    };
    Ok((record, grads))
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub weights: EncoderWeights,
    pub curve: Vec<LossRecord>,
}

pub fn train(corpus: &[TrainingExample], cfg: &TrainConfig) -> Result<TrainOutput> {
    let mut init = EncoderWeights::random_scaled(cfg.dim, cfg.feature_dim, cfg.seed, cfg.init_scale);
    init.activation = cfg.activation;
    train_from(init, corpus, cfg, None)
}

/// Continues training from `init`. With `hard_negatives`, each example's
/// mined negatives become extra candidate columns in the ranking loss.
pub fn train_from(
    init: EncoderWeights,
    corpus: &[TrainingExample],
    cfg: &TrainConfig,
    hard_negatives: Option<&HardNegativeSet>,
) -> Result<TrainOutput> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if corpus.len() < 2 {
        return Err(Error::DegenerateBatch(corpus.len()));
    }
    if init.dim() != cfg.dim as usize || init.feature_dim() != cfg.feature_dim {
        return Err(Error::DimensionMismatch(format!(
            "init weights are {}x{}, config asks for {}x{}",
            init.dim(),
            init.feature_dim(),
            cfg.dim,
            cfg.feature_dim
        )));
    }
    let prepared = prepare(corpus, cfg.feature_dim);
    let mut w = init;
    let mut opt = OptimizerState::new(cfg.adamw(), &w);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut curve = Vec::new();
    let bs = cfg.batch_size;

    for _ in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..prepared.len()).collect();
        order.shuffle(&mut rng);
        for chunk in order.chunks(bs) {
            let mut idx = chunk.to_vec();
            if idx.len() == 1 {
                // keep N >= 2 for in-batch negatives
                idx.push(order[0]);
            }
            let examples: Vec<&PreparedExample> = idx.iter().map(|&i| &prepared[i]).collect();
            let hard = examples
                .iter()
                .map(|e| {
                    hard_negatives
                        .and_then(|h| h.get(e.id))
                        .map(<[String]>::to_vec)
                        .unwrap_or_default()
                })
                .collect();
            let batch = Batch {
                examples,
                hard_negatives: hard,
            };
            curve.push(multitask_step(&batch, &mut w, &mut opt, cfg, &mut rng)?);
        }
    }
    w.version += 1;
    Ok(TrainOutput { weights: w, curve })
}

/// Mean ranking loss over consecutive fixed-order batches, without updates.
pub fn mean_ranking_loss(
    w: &EncoderWeights,
    corpus: &[TrainingExample],
    batch_size: usize,
    scale: f64,
) -> Result<f64> {
    let prepared = prepare(corpus, w.feature_dim());
    let mut total = 0.0;
    let mut batches = 0;
    for chunk in prepared.chunks(batch_size.max(2)) {
        if chunk.len() < 2 {
            continue;
        }
        let q: Vec<Vec<f64>> = chunk
            .iter()
            .map(|e| w.forward(&e.primary).map(|f| f.unit))
            .collect::<Result<_>>()?;
        let en: Vec<Vec<f64>> = chunk
            .iter()
            .map(|e| w.forward(&e.entity).map(|f| f.unit))
            .collect::<Result<_>>()?;
        total += loss_mnrl(&q, &en, scale)?.loss;
        batches += 1;
    }
    if batches == 0 {
        return Err(Error::DegenerateBatch(corpus.len()));
    }
    Ok(total / batches as f64)
}

/// Writes the loss curve as `step,l_e,l_d,total` CSV.
pub fn loss_curve_csv(curve: &[LossRecord]) -> String {
    let mut s = String::from("step,l_e,l_d,total\n");
    for r in curve {
        s.push_str(&format!("{},{},{},{}\n", r.step, r.l_e, r.l_d, r.total));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{NLHypothesis, Turn, UserId};

    fn session(i: usize, value: &str, domain: &str) -> Session {
        let e = Entity::new("T", value, domain).unwrap();
        let h = NLHypothesis::new(domain, "I", vec![e.clone()]).unwrap();
        let wrong = format!("{}x", &value[..value.len() - 1]);
        Session {
            user: UserId::new(format!("u{i}")).unwrap(),
            turns: vec![
                Turn::new(&format!("hello {domain}"), "okay", 0),
                Turn::new(&format!("play {wrong}"), "sorry", 1),
                Turn::new(&format!("play {value}"), "", 2).with_hypothesis(h),
            ],
            target_entity: Some(e),
            erroneous_span: Some((5, 5 + value.chars().count()).into()),
        }
    }

    fn small_cfg(variant: Variant) -> TrainConfig {
        TrainConfig {
            variant,
            dim: 16,
            feature_dim: 1 << 12,
            batch_size: 4,
            epochs: 2,
            ..Default::default()
        }
    }

    fn corpus() -> Vec<Session> {
        let names = ["scars", "callen", "carrie", "wallows", "benny", "karen", "sandra", "otto"];
        names
            .iter()
            .enumerate()
            .map(|(i, n)| session(i, n, if i % 2 == 0 { "Music" } else { "Video" }))
            .collect()
    }

    #[test]
    fn variant_properties() {
        assert!(Variant::CC.primary_contextual());
        assert!(!Variant::NC.primary_contextual());
        assert_eq!(Variant::NC.aux(), AuxInput::Contextual);
        assert_eq!(Variant::N.aux(), AuxInput::None);
        assert!(Variant::NCP.prompted());
        assert_eq!("cc".parse::<Variant>().unwrap(), Variant::CC);
        assert!("XY".parse::<Variant>().is_err());
        let m = Variant::NNP.inference_mode(256);
        assert_eq!(m.prompt, Some(SpecialToken::Rewrite));
        assert!(!m.contextual);
    }

    #[test]
    fn examples_follow_variant() {
        let s = corpus();
        let n = build_examples(&s, Variant::N, 256).unwrap();
        assert_eq!(n[0].input_tokens.to_string(), "[USER] play scarx");
        assert!(n[0].aux_tokens.is_none());
        let c = build_examples(&s, Variant::C, 256).unwrap();
        assert!(c[0].input_tokens.to_string().starts_with("[USER] hello music [DEVICE] okay"));
        let cc = build_examples(&s, Variant::CC, 256).unwrap();
        assert!(cc[0].aux_tokens.is_none(), "aux input equals primary input");
        let ncp = build_examples(&s, Variant::NCP, 256).unwrap();
        assert!(ncp[0].input_tokens.to_string().starts_with("[REWRITE] [USER] play"));
        assert!(ncp[0]
            .aux_tokens
            .as_ref()
            .unwrap()
            .to_string()
            .starts_with("[DOMAIN] [USER] hello"));
        assert_eq!(cc[1].target_domain.as_deref(), Some("Video"));
    }

    #[test]
    fn combine() {
        assert!((combine_losses(0.5, 0.4, 0.2) - 0.3).abs() < 1e-15);
        assert_eq!(combine_losses(1.0, 0.4, 123.0), 0.4);
    }

    #[test]
    fn degenerate_and_empty_corpora() {
        let cfg = small_cfg(Variant::N);
        assert!(matches!(train(&[], &cfg), Err(Error::EmptyCorpus)));
        let one = build_examples(&corpus()[..1], Variant::N, 256).unwrap();
        assert!(matches!(train(&one, &cfg), Err(Error::DegenerateBatch(1))));
    }

    #[test]
    fn missing_domains_rejected_when_aux_active() {
        let cfg = small_cfg(Variant::CC);
        let mut ex = build_examples(&corpus(), Variant::CC, 256).unwrap();
        ex[0].target_domain = None;
        assert!(matches!(train(&ex, &cfg), Err(Error::MissingDomainLabels)));
        // N never looks at domains
        let cfg = small_cfg(Variant::N);
        assert!(train(&ex, &cfg).is_ok());
    }

    #[test]
    fn mu_one_equals_pure_ranking_step() {
        let ex = build_examples(&corpus(), Variant::NN, 256).unwrap();
        let mut cfg = small_cfg(Variant::NN);
        cfg.mu = 1.0;
        let a = train(&ex, &cfg).unwrap();
        let ex_n = build_examples(&corpus(), Variant::N, 256).unwrap();
        let mut cfg_n = small_cfg(Variant::N);
        cfg_n.mu = 1.0;
        let b = train(&ex_n, &cfg_n).unwrap();
        assert_eq!(a.weights, b.weights);
        assert!(a.curve.iter().all(|r| r.l_d == 0.0 && r.total == r.l_e));
    }

    #[test]
    fn replay_is_bit_identical() {
        let ex = build_examples(&corpus(), Variant::CC, 256).unwrap();
        let cfg = small_cfg(Variant::CC);
        let a = train(&ex, &cfg).unwrap();
        let b = train(&ex, &cfg).unwrap();
        assert_eq!(a.weights, b.weights);
        assert_eq!(a.curve, b.curve);
        assert_eq!(a.curve.len(), 2 * 2);
        assert_eq!(a.weights.version, 1);
    }

    #[test]
    fn step_gradient_matches_finite_differences() {
        // Total loss as a function of W, with the domain pairs held fixed by
        // reseeding the pair sampler for every evaluation.
        for variant in [Variant::N, Variant::NC, Variant::CC] {
            let mut cfg = small_cfg(variant);
            cfg.feature_dim = 1 << 10;
            cfg.dim = 8;
            cfg.scale = 5.0;
            let ex = build_examples(&corpus(), variant, 256).unwrap();
            let prepared = prepare(&ex, cfg.feature_dim);
            let batch = Batch {
                examples: prepared.iter().collect(),
                hard_negatives: vec![vec!["karan".into()]; prepared.len()],
            };
            let w = EncoderWeights::random(cfg.dim, cfg.feature_dim, 5);
            let eval = |w: &EncoderWeights| {
                let mut rng = ChaCha8Rng::seed_from_u64(99);
                step_gradients(&batch, w, &cfg, &mut rng).unwrap()
            };
            let (_, grads) = eval(&w);
            let cols: Vec<u32> = prepared[0].primary.entries().iter().map(|e| e.0).collect();
            let h = 1e-3f32;
            let mut worst = 0.0f64;
            for &j in cols.iter().take(6) {
                for r in 0..cfg.dim as usize {
                    let mut a = w.clone();
                    let mut b = w.clone();
                    let v = w.get(r, j);
                    a.set(r, j, v + h);
                    b.set(r, j, v - h);
                    let ha = f64::from(a.get(r, j)) - f64::from(v);
                    let hb = f64::from(v) - f64::from(b.get(r, j));
                    let num = (eval(&a).0.total - eval(&b).0.total) / (ha + hb);
                    let ana = grads.get(r, j);
                    let err = (ana - num).abs() / ana.abs().max(num.abs()).max(1e-3);
                    worst = worst.max(err);
                }
            }
            // W is stored in f32, so the perturbation is coarser than in the
            // pure-f64 loss oracles.
            assert!(worst < 1e-3, "{variant}: max relative error {worst}");
        }
    }

    #[test]
    fn curve_csv_header() {
        let csv = loss_curve_csv(&[LossRecord {
            step: 1,
            l_e: 0.5,
            l_d: 0.25,
            total: 0.375,
        }]);
        assert_eq!(csv, "step,l_e,l_d,total\n1,0.5,0.25,0.375\n");
    }
}
