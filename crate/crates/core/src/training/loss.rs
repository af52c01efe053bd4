//! In-batch ranking loss for entity prediction and the margin-contrastive
//! domain loss, each with analytic gradients.

use crate::error::{Error, Result};

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankingLoss {
    pub loss: f64,
    /// dL/dq_i for each query row.
    pub d_query: Vec<Vec<f64>>,
    /// dL/de_j for each candidate column (positives, then extra negatives).
    pub d_entity: Vec<Vec<f64>>,
}

/// Multiple-negatives ranking loss.
///
/// `entities[i]` is the positive for `queries[i]`; any rows of `entities`
/// beyond the first N are extra negative columns shared by every query.
/// S[i][j] = scale · ⟨q_i, e_j⟩ and
/// L = −(1/N) Σ_i log softmax_j(S[i])[i].
pub fn loss_mnrl(queries: &[Vec<f64>], entities: &[Vec<f64>], scale: f64) -> Result<RankingLoss> {
    let n = queries.len();
    if n < 2 {
        return Err(Error::DegenerateBatch(n));
    }
    if entities.len() < n {
        return Err(Error::DimensionMismatch(format!(
            "{} entity rows for {n} queries",
            entities.len()
        )));
    }
    let m = entities.len();
    let d = queries[0].len();
    let inv_n = 1.0 / n as f64;

    let mut loss = 0.0;
    let mut d_query = vec![vec![0.0; d]; n];
    let mut d_entity = vec![vec![0.0; d]; m];
    let mut logits = vec![0.0; m];

    for (i, q) in queries.iter().enumerate() {
        for (l, e) in logits.iter_mut().zip(entities) {
            *l = scale * dot(q, e);
        }
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = logits.iter().map(|l| (l - max).exp()).sum();
        let lse = max + sum.ln();
        loss += lse - logits[i];

        for (j, e) in entities.iter().enumerate() {
            let p = (logits[j] - lse).exp();
            let g = (p - if i == j { 1.0 } else { 0.0 }) * inv_n * scale;
            if g == 0.0 {
                continue;
            }
            for k in 0..d {
                d_query[i][k] += g * e[k];
                d_entity[j][k] += g * q[k];
            }
        }
    }
    Ok(RankingLoss {
        loss: loss * inv_n,
        d_query,
        d_entity,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveLoss {
    pub loss: f64,
    /// Gradient for every embedding in the table passed in.
    pub grads: Vec<Vec<f64>>,
    /// Per-pair contributions before averaging.
    pub contributions: Vec<f64>,
}

/// One pair's term: squared distance when the domains agree, otherwise the
/// hinge `max(0, λ − ‖a − b‖²)`.
pub fn pair_contribution(a: &[f64], b: &[f64], same_domain: bool, lambda: f64) -> f64 {
    let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    if same_domain {
        d2
    } else {
        (lambda - d2).max(0.0)
    }
}

/// Domain contrastive loss over `pairs` of rows of `embeddings`, averaged
/// over the number of pairs.
pub fn loss_contrastive_domain(
    embeddings: &[Vec<f64>],
    pairs: &[(usize, usize, bool)],
    lambda: f64,
) -> ContrastiveLoss {
    let d = embeddings.first().map_or(0, Vec::len);
    let mut grads = vec![vec![0.0; d]; embeddings.len()];
    let mut contributions = Vec::with_capacity(pairs.len());
    if pairs.is_empty() {
        return ContrastiveLoss {
            loss: 0.0,
            grads,
            contributions,
        };
    }
    let inv = 1.0 / pairs.len() as f64;
    let mut loss = 0.0;
    for &(i, j, same) in pairs {
        let (a, b) = (&embeddings[i], &embeddings[j]);
        let c = pair_contribution(a, b, same, lambda);
        contributions.push(c);
        loss += c;
        // d(d²)/da = 2(a − b)
        let coef = if same {
            2.0 * inv
        } else if c > 0.0 {
            -2.0 * inv
        } else {
            continue;
        };
        for k in 0..d {
            let g = coef * (a[k] - b[k]);
            grads[i][k] += g;
            grads[j][k] -= g;
        }
    }
    ContrastiveLoss {
        loss: loss * inv,
        grads,
        contributions,
    }
}

/// Pair-list form: each pair carries its own two embeddings.
pub fn loss_contrastive_pairs(
    pairs: &[(Vec<f64>, Vec<f64>, bool)],
    lambda: f64,
) -> (f64, Vec<(Vec<f64>, Vec<f64>)>) {
    let mut table = Vec::with_capacity(pairs.len() * 2);
    let mut idx = Vec::with_capacity(pairs.len());
    for (k, (a, b, same)) in pairs.iter().enumerate() {
        table.push(a.clone());
        table.push(b.clone());
        idx.push((2 * k, 2 * k + 1, *same));
    }
    let out = loss_contrastive_domain(&table, &idx, lambda);
    let mut grads = out.grads.into_iter();
    let per_pair = (0..pairs.len())
        .map(|_| (grads.next().unwrap(), grads.next().unwrap()))
        .collect();
    (out.loss, per_pair)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_by_two_identity() {
        let q = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let out = loss_mnrl(&q, &q, 1.0).unwrap();
        // hand softmax: -log(e / (e + 1)) = log(1 + e^-1)
        let want = (1.0 + (-1.0f64).exp()).ln();
        assert!((out.loss - want).abs() < 1e-12);
        assert!((out.loss - 0.31326).abs() < 1e-5);
    }

    #[test]
    fn uniform_scores_give_log_n() {
        for n in [2usize, 3, 8, 128] {
            let row = vec![1.0, 0.0, 0.0];
            let q = vec![row.clone(); n];
            let out = loss_mnrl(&q, &q, 20.0).unwrap();
            assert!((out.loss - (n as f64).ln()).abs() < 1e-9);
        }
    }

    #[test]
    fn single_row_is_degenerate() {
        let q = vec![vec![1.0]];
        assert!(matches!(loss_mnrl(&q, &q, 1.0), Err(Error::DegenerateBatch(1))));
    }

    #[test]
    fn extra_columns_only_add_mass() {
        let q = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let mut e = q.clone();
        let base = loss_mnrl(&q, &e, 5.0).unwrap().loss;
        e.push(vec![std::f64::consts::FRAC_1_SQRT_2; 2]);
        let with = loss_mnrl(&q, &e, 5.0).unwrap();
        assert!(with.loss > base);
        assert_eq!(with.d_entity.len(), 3);
    }

    #[test]
    fn contrastive_point_values() {
        let a = vec![0.6, 0.8];
        assert_eq!(pair_contribution(&a, &a, true, 0.75), 0.0);
        let x = vec![1.0, 0.0];
        let y = vec![0.0, 1.0];
        assert_eq!(pair_contribution(&x, &y, false, 0.75), 0.0);
        // d² = 0.5 → 0.75 − 0.5
        let p = vec![0.5f64.sqrt(), 0.0];
        let r = vec![0.0, 0.0];
        assert!((pair_contribution(&p, &r, false, 0.75) - 0.25).abs() < 1e-12);
    }

    #[test]
    fn pair_list_matches_table_form() {
        let pairs = vec![
            (vec![1.0, 0.0], vec![0.8, 0.6], true),
            (vec![1.0, 0.0], vec![0.8, 0.6], false),
        ];
        let (loss, grads) = loss_contrastive_pairs(&pairs, 0.75);
        // same: d² = 0.04 + 0.36 = 0.4; diff: 0.75 - 0.4 = 0.35
        assert!((loss - (0.4 + 0.35) / 2.0).abs() < 1e-12);
        assert_eq!(grads.len(), 2);
        // the two terms pull in opposite directions with equal magnitude
        for k in 0..2 {
            assert!((grads[0].0[k] + grads[1].0[k]).abs() < 1e-12);
        }
    }

    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| {
                let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                v.into_iter().map(|x| x / norm).collect()
            })
            .collect()
    }

    fn rel_err(analytic: f64, numeric: f64) -> f64 {
        (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
    }

    const H: f64 = 1e-6;

    #[test]
    fn ranking_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut worst = 0.0f64;
        for trial in 0..100 {
            let (n, d) = (4, 8);
            let q = unit_rows(&mut rng, n, d);
            // every other instance carries two extra negative columns
            let e = unit_rows(&mut rng, n + 2 * (trial % 2), d);
            let scale = if trial % 3 == 0 { 1.0 } else { 5.0 };
            let out = loss_mnrl(&q, &e, scale).unwrap();
            for i in 0..q.len() {
                for k in 0..d {
                    let (mut a, mut b) = (q.clone(), q.clone());
                    a[i][k] += H;
                    b[i][k] -= H;
                    let num = (loss_mnrl(&a, &e, scale).unwrap().loss
                        - loss_mnrl(&b, &e, scale).unwrap().loss)
                        / (2.0 * H);
                    worst = worst.max(rel_err(out.d_query[i][k], num));
                }
            }
            for j in 0..e.len() {
                for k in 0..d {
                    let (mut a, mut b) = (e.clone(), e.clone());
                    a[j][k] += H;
                    b[j][k] -= H;
                    let num = (loss_mnrl(&q, &a, scale).unwrap().loss
                        - loss_mnrl(&q, &b, scale).unwrap().loss)
                        / (2.0 * H);
                    worst = worst.max(rel_err(out.d_entity[j][k], num));
                }
            }
        }
        assert!(worst < 1e-4, "max relative error {worst}");
    }

    #[test]
    fn contrastive_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut worst = 0.0f64;
        for _ in 0..100 {
            let (n, d) = (6, 8);
            // shrink some rows so hinge pairs land on both sides of the margin
            let emb: Vec<Vec<f64>> = unit_rows(&mut rng, n, d)
                .into_iter()
                .map(|r| {
                    let s = rng.random_range(0.2..1.0);
                    r.into_iter().map(|x| x * s).collect()
                })
                .collect();
            let pairs: Vec<(usize, usize, bool)> = (0..n)
                .map(|_| {
                    let i = rng.random_range(0..n);
                    let j = (i + rng.random_range(1..n)) % n;
                    (i, j, rng.random_bool(0.5))
                })
                .collect();
            let out = loss_contrastive_domain(&emb, &pairs, 0.75);
            for i in 0..n {
                for k in 0..d {
                    let (mut a, mut b) = (emb.clone(), emb.clone());
                    a[i][k] += H;
                    b[i][k] -= H;
                    let num = (loss_contrastive_domain(&a, &pairs, 0.75).loss
                        - loss_contrastive_domain(&b, &pairs, 0.75).loss)
                        / (2.0 * H);
                    // skip points sitting exactly on the hinge kink
                    let near_kink = pairs.iter().any(|&(p, q, same)| {
                        !same && (p == i || q == i) && {
                            let d2: f64 =
                                emb[p].iter().zip(&emb[q]).map(|(x, y)| (x - y) * (x - y)).sum();
                            (d2 - 0.75).abs() < 1e-5
                        }
                    });
                    if !near_kink {
                        worst = worst.max(rel_err(out.grads[i][k], num));
                    }
                }
            }
        }
        assert!(worst < 1e-4, "max relative error {worst}");
    }

    #[test]
    fn contributions_bounded_for_unit_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let emb = unit_rows(&mut rng, 20, 4);
        let pairs: Vec<_> = (0..19).map(|i| (i, i + 1, i % 2 == 0)).collect();
        let out = loss_contrastive_domain(&emb, &pairs, 0.75);
        assert!(out.contributions.iter().all(|&c| (0.0..=4.0).contains(&c)));
    }
}
