//! Weighted particle ensembles and the log-space weight arithmetic every
//! sampler in this crate shares.
//!
//! Weights live strictly in log space; linear weights only ever appear inside
//! max-shifted sums, so ensembles survive weight ranges that would underflow
//! linear arithmetic. A raw vector that is all -inf (zero total mass) is a
//! typed error, never a silent NaN.

use crate::error::{CraftError, Result};
use crate::math::logsumexp;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Positions plus normalized log-weights for n particles of dimension dim.
#[derive(Debug, Clone)]
pub struct ParticleEnsemble {
    n: usize,
    dim: usize,
    positions: Vec<f64>,
    log_weights: Vec<f64>,
}

/// When to resample: whenever ESS <= threshold_fraction * n.
#[derive(Debug, Clone, Copy)]
pub struct ResampleConfig {
    pub threshold_fraction: f64,
}

impl Default for ResampleConfig {
    fn default() -> Self {
        ResampleConfig {
            threshold_fraction: 0.3,
        }
    }
}

impl ParticleEnsemble {
    /// Builds an ensemble with uniform weights from row-major positions.
    pub fn from_positions(positions: Vec<f64>, dim: usize) -> Self {
        assert!(dim > 0 && !positions.is_empty() && positions.len() % dim == 0);
        let n = positions.len() / dim;
        let lw = -(n as f64).ln();
        ParticleEnsemble {
            n,
            dim,
            positions,
            log_weights: vec![lw; n],
        }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn position(&self, i: usize) -> &[f64] {
        &self.positions[i * self.dim..(i + 1) * self.dim]
    }

    pub fn position_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.positions[i * self.dim..(i + 1) * self.dim]
    }

    pub fn positions(&self) -> &[f64] {
        &self.positions
    }

    pub fn log_weights(&self) -> &[f64] {
        &self.log_weights
    }

    /// Normalized linear weights (max-shifted; exact for uniform ensembles).
    pub fn weights(&self) -> Vec<f64> {
        let m = self
            .log_weights
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max);
        let unnorm: Vec<f64> = self.log_weights.iter().map(|&lw| (lw - m).exp()).collect();
        let total: f64 = unnorm.iter().sum();
        unnorm.into_iter().map(|w| w / total).collect()
    }

    /// Replaces the weights with `normalize_log_weights(raw)`, returning the
    /// log-normalizer of the raw vector.
    pub fn set_raw_log_weights(&mut self, mut raw: Vec<f64>, transition: usize) -> Result<f64> {
        assert_eq!(raw.len(), self.n);
        let log_norm = normalize_log_weights(&mut raw, transition)?;
        self.log_weights = raw;
        Ok(log_norm)
    }

    pub fn effective_sample_size(&self) -> f64 {
        effective_sample_size(&self.log_weights)
    }

    /// Weighted ensemble average of a function of position.
    pub fn weighted_mean<F: FnMut(&[f64]) -> f64>(&self, mut f: F) -> f64 {
        let w = self.weights();
        (0..self.n).map(|i| w[i] * f(self.position(i))).sum()
    }

    /// Multinomial resampling. Draws n category picks from the normalized
    /// weights, replaces positions by the picked ones, and resets the weights
    /// to exactly uniform.
    pub fn resample(&mut self, rng: &mut ChaCha8Rng) {
        let w = self.weights();
        let mut cum = Vec::with_capacity(self.n);
        let mut acc = 0.0;
        for &wi in &w {
            acc += wi;
            cum.push(acc);
        }
        // Guard against rounding: the last bucket always catches u -> 1.
        cum[self.n - 1] = f64::INFINITY;
        let mut new_positions = Vec::with_capacity(self.positions.len());
        for _ in 0..self.n {
            let u: f64 = rng.random();
            let idx = cum.partition_point(|&c| c <= u);
            new_positions.extend_from_slice(self.position(idx));
        }
        self.positions = new_positions;
        self.log_weights = vec![-(self.n as f64).ln(); self.n];
    }
}

/// Normalizes raw log-weights in place so the total mass is one, returning
/// logsumexp of the raw vector. All--inf input is the degenerate-mass error;
/// NaN is rejected.
pub fn normalize_log_weights(raw: &mut [f64], transition: usize) -> Result<f64> {
    for (i, &w) in raw.iter().enumerate() {
        if w.is_nan() {
            return Err(CraftError::InvalidLogWeight {
                transition,
                detail: format!("NaN raw log-weight for particle {i}"),
            });
        }
        if w == f64::INFINITY {
            return Err(CraftError::InvalidLogWeight {
                transition,
                detail: format!("+inf raw log-weight for particle {i}"),
            });
        }
    }
    let log_norm = logsumexp(raw);
    if log_norm == f64::NEG_INFINITY {
        return Err(CraftError::DegenerateWeights { transition });
    }
    for w in raw.iter_mut() {
        *w -= log_norm;
    }
    Ok(log_norm)
}

/// Effective sample size (sum w)^2 / (sum w^2) on max-shifted linear weights.
///
/// The shift makes uniform ensembles evaluate to exactly n and one-hot
/// ensembles to exactly 1.
pub fn effective_sample_size(log_weights: &[f64]) -> f64 {
    let m = log_weights
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    let mut s1 = 0.0;
    let mut s2 = 0.0;
    for &lw in log_weights {
        let w = (lw - m).exp();
        s1 += w;
        s2 += w * w;
    }
    s1 * s1 / s2
}

/// Log-normalizer increment: logsumexp(normalized previous log-weights plus
/// per-particle incremental log-weights).
pub fn log_z_increment(prev_normalized: &[f64], log_incremental: &[f64]) -> f64 {
    debug_assert_eq!(prev_normalized.len(), log_incremental.len());
    let combined: Vec<f64> = prev_normalized
        .iter()
        .zip(log_incremental)
        .map(|(&a, &b)| a + b)
        .collect();
    logsumexp(&combined)
}
