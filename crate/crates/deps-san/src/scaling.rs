//! Gaussian dependency-scaled matrices and knowledge sparsing.
//!
//! A distance matrix is converted entrywise through a Gaussian density,
//! so closer tree neighbours get larger scale values. Two regularizers
//! operate on distances before the conversion: random replacement of
//! entries by a dilution distance `k` (RS), and a hard window mask keeping
//! only entries within distance `k` (Wink).

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::deptree::DistanceMatrix;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScalingError {
    #[error("sigma must be strictly positive with a representable square, got {0}")]
    NonPositiveSigma(f64),
    #[error("probability must lie in [0, 1], got {0}")]
    InvalidProbability(f64),
    #[error("mask rows must form an n x n matrix (row {row} has {found} entries, expected {expected})")]
    MaskShape {
        row: usize,
        found: usize,
        expected: usize,
    },
}

/// Gaussian density of an integer tree distance: (1/√(2πσ²))·exp(−d²/(2σ²)).
///
/// The result is clamped to the smallest positive normal so that scaled
/// entries stay strictly positive even where the true density underflows
/// f64 (distances beyond ~38σ).
pub fn gauss_dist(d: u32, sigma: f64) -> Result<f64, ScalingError> {
    check_sigma(sigma)?;
    Ok(gauss_dist_unchecked(d, sigma))
}

/// σ² must be a positive normal f64: otherwise the normalization factor
/// 1/√(2πσ²) degenerates to ∞ or 0 and the densities stop being usable.
fn check_sigma(sigma: f64) -> Result<(), ScalingError> {
    if !(sigma > 0.0) || !(sigma * sigma).is_normal() {
        return Err(ScalingError::NonPositiveSigma(sigma));
    }
    Ok(())
}

fn gauss_dist_unchecked(d: u32, sigma: f64) -> f64 {
    let var = sigma * sigma;
    let norm = 1.0 / (2.0 * std::f64::consts::PI * var).sqrt();
    let x = d as f64;
    let v = norm * (-x * x / (2.0 * var)).exp();
    v.max(f64::MIN_POSITIVE)
}

/// Matrix of Gaussian densities of tree distances, with its σ.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaledMatrix {
    n: usize,
    values: Vec<f64>,
    sigma: f64,
}

impl ScaledMatrix {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.n..(i + 1) * self.n]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// All-ones matrix. Not a Gaussian scaling of anything; provided as a
    /// diagnostic that reduces dependency-scaled attention to the baseline.
    pub fn ones(n: usize) -> Self {
        ScaledMatrix {
            n,
            values: vec![1.0; n * n],
            sigma: f64::NAN,
        }
    }

    /// CSV form: first line `n=<I>`, then rows with entries to 6 decimals.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "n={}", self.n);
        for i in 0..self.n {
            let row: Vec<String> = self.row(i).iter().map(|v| format!("{:.6}", v)).collect();
            let _ = writeln!(out, "{}", row.join(","));
        }
        out
    }

    /// JSON form: `{"n": I, "sigma": s, "values": [[...]]}`, 6 decimals.
    pub fn to_json(&self) -> String {
        let mut out = String::new();
        let _ = write!(out, "{{\"n\":{},\"sigma\":{:.6},\"values\":[", self.n, self.sigma);
        for i in 0..self.n {
            if i > 0 {
                out.push(',');
            }
            out.push('[');
            for (j, v) in self.row(i).iter().enumerate() {
                if j > 0 {
                    out.push(',');
                }
                let _ = write!(out, "{:.6}", v);
            }
            out.push(']');
        }
        out.push_str("]}");
        out
    }
}

/// Apply the Gaussian density entrywise to a distance matrix.
pub fn scale_matrix(dist: &DistanceMatrix, sigma: f64) -> Result<ScaledMatrix, ScalingError> {
    check_sigma(sigma)?;
    let n = dist.n();
    let values = dist
        .entries()
        .iter()
        .map(|&d| gauss_dist_unchecked(d, sigma))
        .collect();
    Ok(ScaledMatrix { n, values, sigma })
}

/// Which knowledge-sparsing regularizer to apply during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SparsingMode {
    #[default]
    None,
    Rs,
    Wink,
}

/// Sparsing hyperparameters: dilution/window distance `k`, replacement
/// probability `q` (RS only), and the RNG seed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SparsingConfig {
    pub mode: SparsingMode,
    pub k: u32,
    pub q: f64,
    pub seed: u64,
}

impl Default for SparsingConfig {
    fn default() -> Self {
        SparsingConfig {
            mode: SparsingMode::None,
            k: 6,
            q: 0.1,
            seed: 0,
        }
    }
}

impl SparsingConfig {
    pub fn validate(&self) -> Result<(), ScalingError> {
        if !(0.0..=1.0).contains(&self.q) || self.q.is_nan() {
            return Err(ScalingError::InvalidProbability(self.q));
        }
        Ok(())
    }
}

/// Replace each distance entry by `k` with probability `q`.
///
/// Entries are drawn independently in row-major order from a ChaCha8 stream
/// seeded with `seed`, one f64 per cell, so runs are reproducible across
/// platforms. The output is generally not symmetric.
pub fn rs_sparsify(
    dist: &DistanceMatrix,
    k: u32,
    q: f64,
    seed: u64,
) -> Result<DistanceMatrix, ScalingError> {
    if !(0.0..=1.0).contains(&q) || q.is_nan() {
        return Err(ScalingError::InvalidProbability(q));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = dist.n();
    let mut out = Vec::with_capacity(n * n);
    for &d in dist.entries() {
        let u: f64 = rng.random();
        out.push(if u < q { k } else { d });
    }
    Ok(DistanceMatrix::from_raw(n, out))
}

/// Boolean attention mask; `allowed[i][j]` says whether query i may attend
/// to key j.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    n: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    pub fn all_allowed(n: usize) -> Self {
        AttentionMask {
            n,
            allowed: vec![true; n * n],
        }
    }

    /// Padding mask: keys at positions >= real_len are hidden from every
    /// query.
    pub fn pad(n: usize, real_len: usize) -> Self {
        let mut allowed = vec![false; n * n];
        for i in 0..n {
            for j in 0..real_len.min(n) {
                allowed[i * n + j] = true;
            }
        }
        AttentionMask { n, allowed }
    }

    /// Build from explicit rows. Only the n x n shape is validated; rows
    /// with no allowed entry are caught at attention time.
    pub fn from_rows(rows: Vec<Vec<bool>>) -> Result<Self, ScalingError> {
        let n = rows.len();
        let mut allowed = Vec::with_capacity(n * n);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != n {
                return Err(ScalingError::MaskShape {
                    row: i,
                    found: row.len(),
                    expected: n,
                });
            }
            allowed.extend_from_slice(row);
        }
        Ok(AttentionMask { n, allowed })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn allows(&self, i: usize, j: usize) -> bool {
        self.allowed[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[bool] {
        &self.allowed[i * self.n..(i + 1) * self.n]
    }

    pub fn is_all_allowed(&self) -> bool {
        self.allowed.iter().all(|&b| b)
    }

    /// Positions allowed by both masks.
    pub fn intersect(&self, other: &AttentionMask) -> AttentionMask {
        assert_eq!(self.n, other.n, "mask dimensions must agree");
        let allowed = self
            .allowed
            .iter()
            .zip(&other.allowed)
            .map(|(&a, &b)| a && b)
            .collect();
        AttentionMask { n: self.n, allowed }
    }

    /// CSV of 0/1 rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "n={}", self.n);
        for i in 0..self.n {
            let row: Vec<&str> = self
                .row(i)
                .iter()
                .map(|&b| if b { "1" } else { "0" })
                .collect();
            let _ = writeln!(out, "{}", row.join(","));
        }
        out
    }
}

/// Window mask keeping only positions with `d_ij <= k`. The diagonal is
/// always allowed since self-distance is 0.
pub fn wink_mask(dist: &DistanceMatrix, k: u32) -> AttentionMask {
    let n = dist.n();
    let allowed = dist.entries().iter().map(|&d| d <= k).collect();
    AttentionMask { n, allowed }
}
