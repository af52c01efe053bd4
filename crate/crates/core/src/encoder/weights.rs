//! The shared projection matrix, its forward and backward passes, and the
//! `ENC1` snapshot format.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::features::FeatureVector;
use crate::error::{Error, Result};

pub const DEFAULT_DIM: u32 = 64;
const MAGIC: &[u8; 4] = b"ENC1";
const MIN_NORM: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Linear,
    Tanh,
}

/// Unit-norm dense vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding(pub Vec<f32>);

impl Embedding {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>().sqrt()
    }

    /// Dot product; equals cosine for unit vectors.
    pub fn cosine(&self, other: &Embedding) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(&a, &b)| f64::from(a) * f64::from(b))
            .sum()
    }
}

/// Intermediate values of one forward pass, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    /// Pre-normalization activations.
    pub act: Vec<f64>,
    pub norm: f64,
    /// Unit output in f64.
    pub unit: Vec<f64>,
}

impl Forward {
    pub fn embedding(&self) -> Embedding {
        Embedding(self.unit.iter().map(|&v| v as f32).collect())
    }
}

/// Gradient with respect to W, nonzero only on the input's feature columns.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseGrad {
    pub dim: usize,
    /// (feature column, d-vector) pairs sorted by column.
    pub columns: Vec<(u32, Vec<f64>)>,
}

impl SparseGrad {
    /// Entry at row `r`, column `j` of the d × D_feat gradient.
    pub fn get(&self, r: usize, j: u32) -> f64 {
        self.columns
            .binary_search_by_key(&j, |(c, _)| *c)
            .map(|p| self.columns[p].1[r])
            .unwrap_or(0.0)
    }

    pub fn is_zero(&self) -> bool {
        self.columns.iter().all(|(_, v)| v.iter().all(|&x| x == 0.0))
    }
}

/// d × D_feat projection shared by query and entity encoding.
///
/// Stored column-major internally (one contiguous d-vector per feature) so the
/// sparse product touches contiguous memory.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderWeights {
    dim: u32,
    feature_dim: u32,
    pub seed: u64,
    pub version: u32,
    pub activation: Activation,
    columns: Vec<f32>,
}

impl EncoderWeights {
    /// Uniform init with variance 1/d.
    pub fn random(dim: u32, feature_dim: u32, seed: u64) -> Self {
        Self::random_scaled(dim, feature_dim, seed, 1.0)
    }

    /// Uniform init with variance scale²/d. A small scale lets learned
    /// features dominate uninformative ones after training.
    pub fn random_scaled(dim: u32, feature_dim: u32, seed: u64, scale: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = (scale * (3.0 / f64::from(dim)).sqrt()) as f32;
        let n = dim as usize * feature_dim as usize;
        let columns = (0..n).map(|_| rng.random_range(-a..a)).collect();
        EncoderWeights {
            dim,
            feature_dim,
            seed,
            version: 0,
            activation: Activation::Linear,
            columns,
        }
    }

    /// Builds from a row-major d × D_feat matrix.
    pub fn from_rows(dim: u32, feature_dim: u32, rows: &[f32]) -> Result<Self> {
        let (d, f) = (dim as usize, feature_dim as usize);
        if rows.len() != d * f || d == 0 || f == 0 {
            return Err(Error::DimensionMismatch(format!(
                "{} values for a {d}x{f} matrix",
                rows.len()
            )));
        }
        let mut columns = vec![0.0; d * f];
        for r in 0..d {
            for j in 0..f {
                columns[j * d + r] = rows[r * f + j];
            }
        }
        Ok(EncoderWeights {
            dim,
            feature_dim,
            seed: 0,
            version: 0,
            activation: Activation::Linear,
            columns,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim as usize
    }

    pub fn feature_dim(&self) -> u32 {
        self.feature_dim
    }

    pub fn get(&self, r: usize, j: u32) -> f32 {
        self.columns[j as usize * self.dim as usize + r]
    }

    pub fn set(&mut self, r: usize, j: u32, v: f32) {
        let d = self.dim as usize;
        self.columns[j as usize * d + r] = v;
    }

    pub fn column(&self, j: u32) -> &[f32] {
        let d = self.dim as usize;
        &self.columns[j as usize * d..(j as usize + 1) * d]
    }

    pub(crate) fn raw_mut(&mut self) -> &mut [f32] {
        &mut self.columns
    }

    pub(crate) fn raw(&self) -> &[f32] {
        &self.columns
    }

    pub fn is_finite(&self) -> bool {
        self.columns.iter().all(|v| v.is_finite())
    }

    pub fn forward(&self, x: &FeatureVector) -> Result<Forward> {
        if x.is_empty() {
            return Err(Error::EmptyInput);
        }
        if x.dim != self.feature_dim {
            return Err(Error::DimensionMismatch(format!(
                "features of dim {} for weights with D_feat {}",
                x.dim, self.feature_dim
            )));
        }
        let d = self.dim as usize;
        let mut z = vec![0.0f64; d];
        for &(j, c) in x.entries() {
            let c = f64::from(c);
            for (acc, &w) in z.iter_mut().zip(self.column(j)) {
                *acc += c * f64::from(w);
            }
        }
        if self.activation == Activation::Tanh {
            z.iter_mut().for_each(|v| *v = v.tanh());
        }
        let norm = z.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm >= MIN_NORM) {
            return Err(Error::DegenerateNorm(norm));
        }
        let unit = z.iter().map(|v| v / norm).collect();
        Ok(Forward { act: z, norm, unit })
    }

    pub fn encode(&self, x: &FeatureVector) -> Result<Embedding> {
        self.forward(x).map(|f| f.embedding())
    }

    /// Gradient direction shared by every nonzero column: the upstream
    /// gradient pulled back through normalization (and tanh, if enabled).
    pub fn backward_direction(&self, fwd: &Forward, upstream: &[f64]) -> Vec<f64> {
        let radial: f64 = fwd.unit.iter().zip(upstream).map(|(e, g)| e * g).sum();
        let mut v: Vec<f64> = fwd
            .unit
            .iter()
            .zip(upstream)
            .map(|(e, g)| (g - e * radial) / fwd.norm)
            .collect();
        if self.activation == Activation::Tanh {
            for (vi, a) in v.iter_mut().zip(&fwd.act) {
                *vi *= 1.0 - a * a;
            }
        }
        v
    }

    /// ∂(upstream · e)/∂W for e = encode(x).
    pub fn backward(&self, x: &FeatureVector, upstream: &[f64]) -> Result<SparseGrad> {
        let fwd = self.forward(x)?;
        let dir = self.backward_direction(&fwd, upstream);
        let columns = x
            .entries()
            .iter()
            .map(|&(j, c)| (j, dir.iter().map(|v| v * f64::from(c)).collect()))
            .collect();
        Ok(SparseGrad {
            dim: self.dim as usize,
            columns,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&self.dim.to_le_bytes())?;
        w.write_all(&self.feature_dim.to_le_bytes())?;
        w.write_all(&self.seed.to_le_bytes())?;
        w.write_all(&self.version.to_le_bytes())?;
        let (d, f) = (self.dim as usize, self.feature_dim as usize);
        let mut row = Vec::with_capacity(f * 4);
        for r in 0..d {
            row.clear();
            for j in 0..f {
                row.extend_from_slice(&self.columns[j * d + r].to_le_bytes());
            }
            w.write_all(&row)?;
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(&mut BufReader::new(file))
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let truncated = |e: std::io::Error| Error::CorruptSnapshot(format!("weights: {e}"));
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(truncated)?;
        if &magic != MAGIC {
            return Err(Error::CorruptSnapshot("bad weights magic".into()));
        }
        let mut b4 = [0u8; 4];
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b4).map_err(truncated)?;
        let dim = u32::from_le_bytes(b4);
        r.read_exact(&mut b4).map_err(truncated)?;
        let feature_dim = u32::from_le_bytes(b4);
        r.read_exact(&mut b8).map_err(truncated)?;
        let seed = u64::from_le_bytes(b8);
        r.read_exact(&mut b4).map_err(truncated)?;
        let version = u32::from_le_bytes(b4);
        if dim == 0 || feature_dim == 0 || dim > 1 << 16 {
            return Err(Error::DimensionMismatch(format!(
                "implausible dims d={dim} D_feat={feature_dim}"
            )));
        }
        let n = dim as usize * feature_dim as usize;
        let mut bytes = vec![0u8; n * 4];
        r.read_exact(&mut bytes).map_err(truncated)?;
        let mut rest = [0u8; 1];
        if r.read(&mut rest).map_err(truncated)? != 0 {
            return Err(Error::DimensionMismatch(
                "trailing bytes after weight matrix".into(),
            ));
        }
        let rows: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let mut w = Self::from_rows(dim, feature_dim, &rows)?;
        w.seed = seed;
        w.version = version;
        Ok(w)
    }
}

/// Convenience: (weights, features) → embedding.
pub fn encode(w: &EncoderWeights, x: &FeatureVector) -> Result<Embedding> {
    w.encode(x)
}

pub fn encode_backward(
    w: &EncoderWeights,
    x: &FeatureVector,
    upstream: &[f64],
) -> Result<SparseGrad> {
    w.backward(x, upstream)
}
