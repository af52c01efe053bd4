use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::encoder::EncoderWeights;

/// Sparse gradient accumulator keyed by feature column.
#[derive(Debug, Clone, Default)]
pub struct GradAccumulator {
    dim: usize,
    columns: BTreeMap<u32, Vec<f64>>,
}

impl GradAccumulator {
    pub fn new(dim: usize) -> Self {
        GradAccumulator {
            dim,
            columns: BTreeMap::new(),
        }
    }

    /// Adds `scale · direction` to column `j`.
    pub fn add(&mut self, j: u32, scale: f64, direction: &[f64]) {
        let col = self
            .columns
            .entry(j)
            .or_insert_with(|| vec![0.0; self.dim]);
        for (c, v) in col.iter_mut().zip(direction) {
            *c += scale * v;
        }
    }

    pub fn get(&self, r: usize, j: u32) -> f64 {
        self.columns.get(&j).map_or(0.0, |c| c[r])
    }

    pub fn is_empty(&self) -> bool {
        self.columns.is_empty()
    }

    pub fn touched(&self) -> usize {
        self.columns.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// Adaptive moments with decoupled weight decay.
///
/// The update is dense: every parameter's moments decay and every parameter
/// is decayed each step, even where the gradient is zero.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub cfg: AdamWConfig,
    pub step: u64,
    m: Vec<f32>,
    v: Vec<f32>,
}

const BLOCK_COLUMNS: usize = 2048;

impl OptimizerState {
    pub fn new(cfg: AdamWConfig, w: &EncoderWeights) -> Self {
        let n = w.raw().len();
        OptimizerState {
            cfg,
            step: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    pub fn apply(&mut self, w: &mut EncoderWeights, grads: &GradAccumulator) {
        assert_eq!(self.m.len(), w.raw().len(), "optimizer shape mismatch");
        self.step += 1;
        let cfg = self.cfg;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        let decay = 1.0 - cfg.learning_rate * cfg.weight_decay;
        let d = w.dim();
        let block = BLOCK_COLUMNS * d;

        let touched: Vec<(u32, &Vec<f64>)> = grads.columns.iter().map(|(&j, g)| (j, g)).collect();

        w.raw_mut()
            .par_chunks_mut(block)
            .zip(self.m.par_chunks_mut(block))
            .zip(self.v.par_chunks_mut(block))
            .enumerate()
            .for_each(|(b, ((wc, mc), vc))| {
                let col0 = (b * BLOCK_COLUMNS) as u32;
                let col1 = col0 + (wc.len() / d) as u32;
                let lo = touched.partition_point(|(j, _)| *j < col0);
                let hi = touched.partition_point(|(j, _)| *j < col1);
                let mut next = touched[lo..hi].iter().peekable();
                for c in 0..wc.len() / d {
                    let col = col0 + c as u32;
                    let g = match next.peek() {
                        Some((j, g)) if *j == col => {
                            let g = Some(*g);
                            next.next();
                            g
                        }
                        _ => None,
                    };
                    for r in 0..d {
                        let k = c * d + r;
                        let gk = g.map_or(0.0, |g| g[r]);
                        let m = cfg.beta1 * f64::from(mc[k]) + (1.0 - cfg.beta1) * gk;
                        let v = cfg.beta2 * f64::from(vc[k]) + (1.0 - cfg.beta2) * gk * gk;
                        mc[k] = m as f32;
                        vc[k] = v as f32;
                        let update = (m / bc1) / ((v / bc2).sqrt() + cfg.eps);
                        let p = f64::from(wc[k]) * decay - cfg.learning_rate * update;
                        wc[k] = p as f32;
                    }
                }
            });
    }
}
