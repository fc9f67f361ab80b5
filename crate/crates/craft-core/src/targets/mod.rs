//! Target densities and the annealed path between them.
//!
//! A path blends a normalized standard-normal initial density into an
//! unnormalized target on the log scale: at inverse temperature beta the
//! annealed log-density is (1 - beta) * log pi_0 + beta * log gamma. The
//! endpoints are evaluated exactly (no blending arithmetic), and a -inf from
//! either side propagates as -inf rather than NaN.

mod gaussian;
mod lgcp;
mod phi4;

pub use gaussian::{Gaussian, GaussianMixture};
pub use lgcp::LgcpGrid;
pub use phi4::{ising_energy_density, mean_field, two_point_susceptibility, Phi4};

use crate::error::{CraftError, Result};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use std::sync::Arc;

/// An unnormalized log-density with first- and second-order oracles.
///
/// The Hessian-vector product is only exercised by trainers that
/// differentiate through MCMC trajectories; everything else uses values and
/// gradients.
pub trait Density: Send + Sync {
    fn dim(&self) -> usize;
    fn log_density(&self, x: &[f64]) -> f64;
    fn grad_log_density(&self, x: &[f64], out: &mut [f64]);
    fn hvp_log_density(&self, x: &[f64], v: &[f64], out: &mut [f64]);
}

/// The initial distribution: a standard multivariate normal.
#[derive(Debug, Clone)]
pub struct StdNormal {
    dim: usize,
}

impl StdNormal {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0);
        StdNormal { dim }
    }

    pub fn sample(&self, rng: &mut ChaCha8Rng, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.dim);
        for v in out.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
    }
}

impl Density for StdNormal {
    fn dim(&self) -> usize {
        self.dim
    }

    fn log_density(&self, x: &[f64]) -> f64 {
        let q: f64 = x.iter().map(|v| v * v).sum();
        -0.5 * q - 0.5 * self.dim as f64 * (2.0 * std::f64::consts::PI).ln()
    }

    fn grad_log_density(&self, x: &[f64], out: &mut [f64]) {
        for (o, &v) in out.iter_mut().zip(x) {
            *o = -v;
        }
    }

    fn hvp_log_density(&self, _x: &[f64], v: &[f64], out: &mut [f64]) {
        for (o, &vi) in out.iter_mut().zip(v) {
            *o = -vi;
        }
    }
}

/// Evenly spaced inverse temperatures 0, 1/K, ..., 1.
pub fn uniform_schedule(num_transitions: usize) -> Vec<f64> {
    assert!(num_transitions >= 1);
    (0..=num_transitions)
        .map(|k| k as f64 / num_transitions as f64)
        .collect()
}

/// Geometric annealing between a standard normal and an unnormalized target.
#[derive(Clone)]
pub struct AnnealedPath {
    initial: StdNormal,
    target: Arc<dyn Density>,
    betas: Vec<f64>,
}

impl AnnealedPath {
    pub fn new(target: Arc<dyn Density>, betas: Vec<f64>) -> Result<Self> {
        let mut problems = Vec::new();
        if betas.len() < 2 {
            problems.push("schedule needs at least two temperatures".to_string());
        } else {
            if betas[0] != 0.0 {
                problems.push(format!("schedule must start at 0, got {}", betas[0]));
            }
            if *betas.last().unwrap() != 1.0 {
                problems.push(format!(
                    "schedule must end at 1, got {}",
                    betas.last().unwrap()
                ));
            }
            if betas.windows(2).any(|w| w[1] < w[0]) {
                problems.push("schedule must be nondecreasing".to_string());
            }
            if betas.iter().any(|b| !b.is_finite()) {
                problems.push("schedule contains a non-finite temperature".to_string());
            }
        }
        if !problems.is_empty() {
            return Err(CraftError::InvalidConfig(problems));
        }
        let initial = StdNormal::new(target.dim());
        Ok(AnnealedPath {
            initial,
            target,
            betas,
        })
    }

    pub fn with_uniform_schedule(target: Arc<dyn Density>, num_transitions: usize) -> Self {
        AnnealedPath::new(target, uniform_schedule(num_transitions)).unwrap()
    }

    /// Number of transitions K; temperatures are indexed 0..=K.
    pub fn num_transitions(&self) -> usize {
        self.betas.len() - 1
    }

    pub fn beta(&self, k: usize) -> f64 {
        self.betas[k]
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn dim(&self) -> usize {
        self.initial.dim
    }

    pub fn initial(&self) -> &StdNormal {
        &self.initial
    }

    pub fn target(&self) -> &dyn Density {
        self.target.as_ref()
    }

    pub fn sample_initial(&self, rng: &mut ChaCha8Rng, out: &mut [f64]) {
        self.initial.sample(rng, out);
    }

    pub fn log_density(&self, k: usize, x: &[f64]) -> f64 {
        let b = self.betas[k];
        if b == 0.0 {
            return self.initial.log_density(x);
        }
        if b == 1.0 {
            return self.target.log_density(x);
        }
        let a = self.initial.log_density(x);
        let t = self.target.log_density(x);
        if a == f64::NEG_INFINITY || t == f64::NEG_INFINITY {
            return f64::NEG_INFINITY;
        }
        (1.0 - b) * a + b * t
    }

    pub fn grad(&self, k: usize, x: &[f64], out: &mut [f64]) {
        let b = self.betas[k];
        if b == 0.0 {
            self.initial.grad_log_density(x, out);
            return;
        }
        if b == 1.0 {
            self.target.grad_log_density(x, out);
            return;
        }
        self.target.grad_log_density(x, out);
        for (o, &xi) in out.iter_mut().zip(x) {
            *o = b * *o + (1.0 - b) * (-xi);
        }
    }

    pub fn hvp(&self, k: usize, x: &[f64], v: &[f64], out: &mut [f64]) {
        let b = self.betas[k];
        if b == 0.0 {
            self.initial.hvp_log_density(x, v, out);
            return;
        }
        if b == 1.0 {
            self.target.hvp_log_density(x, v, out);
            return;
        }
        self.target.hvp_log_density(x, v, out);
        for (o, &vi) in out.iter_mut().zip(v) {
            *o = b * *o + (1.0 - b) * (-vi);
        }
    }
}
