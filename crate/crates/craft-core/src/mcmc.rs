//! Hamiltonian rejuvenation kernels at fixed annealing temperatures.
//!
//! Each transition of the sampler rejuvenates the ensemble with a few HMC
//! steps that leave the current annealed density invariant. Momenta carry
//! unit mass. A step whose final energy is not finite is rejected outright
//! and counted as divergent. The traced variants additionally record
//! accepted trajectories so that trainers which differentiate through the
//! kernel can replay them backwards with Hessian-vector products; rejected
//! steps pass gradients through unchanged, and the fresh-momentum direction
//! carries no gradient to earlier stages of the sampler.

use crate::ensemble::ParticleEnsemble;
use crate::math::linear_interp;
use crate::rng::{labels, RngKey};
use crate::targets::AnnealedPath;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HmcConfig {
    pub leapfrog_steps: usize,
    pub steps_per_transition: usize,
    /// Step size as a piecewise-linear function of the annealing parameter:
    /// `step_size_points` are knot locations in [0, 1], `step_size_values`
    /// the step sizes there.
    pub step_size_points: Vec<f64>,
    pub step_size_values: Vec<f64>,
}

impl Default for HmcConfig {
    fn default() -> Self {
        HmcConfig {
            leapfrog_steps: 10,
            steps_per_transition: 1,
            step_size_points: vec![0.0, 1.0],
            step_size_values: vec![0.2, 0.2],
        }
    }
}

impl HmcConfig {
    pub fn step_size(&self, beta: f64) -> f64 {
        linear_interp(&self.step_size_points, &self.step_size_values, beta)
    }

    pub fn collect_problems(&self, problems: &mut Vec<String>) {
        if self.leapfrog_steps == 0 {
            problems.push("hmc: leapfrog_steps must be at least 1".into());
        }
        if self.step_size_points.len() != self.step_size_values.len() {
            problems.push(format!(
                "hmc: {} step-size points but {} values",
                self.step_size_points.len(),
                self.step_size_values.len()
            ));
        }
        if self.step_size_points.is_empty() {
            problems.push("hmc: step-size schedule is empty".into());
        }
        if !self.step_size_points.windows(2).all(|w| w[0] < w[1]) {
            problems.push("hmc: step-size points must be strictly increasing".into());
        }
        // Zero is allowed: it freezes the kernel, which some trainers use as
        // a degenerate limit.
        if self.step_size_values.iter().any(|&v| !(v >= 0.0)) {
            problems.push("hmc: step sizes must be nonnegative".into());
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct HmcStats {
    pub attempted: usize,
    pub accepted: usize,
    pub divergent: usize,
}

impl HmcStats {
    pub fn acceptance_rate(&self) -> f64 {
        if self.attempted == 0 {
            f64::NAN
        } else {
            self.accepted as f64 / self.attempted as f64
        }
    }

    pub fn absorb(&mut self, other: HmcStats) {
        self.attempted += other.attempted;
        self.accepted += other.accepted;
        self.divergent += other.divergent;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOutcome {
    Accepted,
    Rejected,
    Divergent,
}

/// Reusable buffers so the particle loop stays allocation-free.
pub struct HmcScratch {
    p: Vec<f64>,
    grad: Vec<f64>,
    backup: Vec<f64>,
}

impl HmcScratch {
    pub fn new(dim: usize) -> Self {
        HmcScratch {
            p: vec![0.0; dim],
            grad: vec![0.0; dim],
            backup: vec![0.0; dim],
        }
    }
}

/// Leapfrog with unit mass: half kick, alternating drifts and full kicks,
/// half kick. When `record` is given, positions after every drift are pushed
/// onto it (the starting point is not).
fn leapfrog(
    path: &AnnealedPath,
    k: usize,
    x: &mut [f64],
    p: &mut [f64],
    eps: f64,
    steps: usize,
    grad: &mut [f64],
    mut record: Option<&mut Vec<Vec<f64>>>,
) {
    path.grad(k, x, grad);
    for (pi, gi) in p.iter_mut().zip(grad.iter()) {
        *pi += 0.5 * eps * gi;
    }
    for t in 1..=steps {
        for (xi, pi) in x.iter_mut().zip(p.iter()) {
            *xi += eps * pi;
        }
        if let Some(rec) = record.as_deref_mut() {
            rec.push(x.to_vec());
        }
        path.grad(k, x, grad);
        let c = if t == steps { 0.5 * eps } else { eps };
        for (pi, gi) in p.iter_mut().zip(grad.iter()) {
            *pi += c * gi;
        }
    }
}

fn kinetic(p: &[f64]) -> f64 {
    0.5 * p.iter().map(|v| v * v).sum::<f64>()
}

/// One Metropolis-adjusted HMC step on `x`, in place. The uniform for the
/// accept test is always drawn so the random stream does not depend on the
/// outcome.
pub fn hmc_step(
    path: &AnnealedPath,
    k: usize,
    x: &mut [f64],
    eps: f64,
    leapfrog_steps: usize,
    rng: &mut ChaCha8Rng,
    scratch: &mut HmcScratch,
) -> StepOutcome {
    for pi in scratch.p.iter_mut() {
        *pi = rng.sample(StandardNormal);
    }
    scratch.backup.copy_from_slice(x);
    let h0 = -path.log_density(k, x) + kinetic(&scratch.p);
    leapfrog(
        path,
        k,
        x,
        &mut scratch.p,
        eps,
        leapfrog_steps,
        &mut scratch.grad,
        None,
    );
    let h1 = -path.log_density(k, x) + kinetic(&scratch.p);
    let u: f64 = rng.random();
    if !h0.is_finite() || !h1.is_finite() {
        x.copy_from_slice(&scratch.backup);
        return StepOutcome::Divergent;
    }
    if u.ln() < h0 - h1 {
        StepOutcome::Accepted
    } else {
        x.copy_from_slice(&scratch.backup);
        StepOutcome::Rejected
    }
}

/// Rejuvenates every particle at temperature `k` with the configured number
/// of HMC steps. Particle `i` draws from the substream
/// `key.child(MCMC).child(i)`, so results do not depend on sweep order.
pub fn kernel_sweep(
    path: &AnnealedPath,
    k: usize,
    ensemble: &mut ParticleEnsemble,
    cfg: &HmcConfig,
    key: RngKey,
) -> HmcStats {
    let eps = cfg.step_size(path.beta(k));
    let mut scratch = HmcScratch::new(ensemble.dim());
    let mut stats = HmcStats::default();
    let mcmc_key = key.child(labels::MCMC);
    for i in 0..ensemble.len() {
        let mut rng = mcmc_key.child(i as u64).rng();
        let x = ensemble.position_mut(i);
        for _ in 0..cfg.steps_per_transition {
            stats.attempted += 1;
            match hmc_step(path, k, x, eps, cfg.leapfrog_steps, &mut rng, &mut scratch) {
                StepOutcome::Accepted => stats.accepted += 1,
                StepOutcome::Rejected => {}
                StepOutcome::Divergent => stats.divergent += 1,
            }
        }
    }
    stats
}

/// Record of one HMC step, enough to replay its gradient.
#[derive(Debug, Clone)]
struct StepTrace {
    /// Start point plus the position after every drift; empty unless the
    /// step was accepted.
    trajectory: Vec<Vec<f64>>,
    eps: f64,
    accepted: bool,
}

/// Record of a chain of HMC steps on one particle at one temperature.
#[derive(Debug, Clone)]
pub struct HmcTrace {
    k: usize,
    steps: Vec<StepTrace>,
}

impl HmcTrace {
    pub fn accept_pattern(&self) -> Vec<bool> {
        self.steps.iter().map(|s| s.accepted).collect()
    }
}

/// Same sampling path as repeated [`hmc_step`] (bit for bit, given the same
/// stream), but records accepted trajectories for the backward pass.
pub fn hmc_chain_traced(
    path: &AnnealedPath,
    k: usize,
    x: &mut [f64],
    cfg: &HmcConfig,
    rng: &mut ChaCha8Rng,
    scratch: &mut HmcScratch,
) -> (HmcTrace, HmcStats) {
    let eps = cfg.step_size(path.beta(k));
    let mut steps = Vec::with_capacity(cfg.steps_per_transition);
    let mut stats = HmcStats::default();
    for _ in 0..cfg.steps_per_transition {
        stats.attempted += 1;
        for pi in scratch.p.iter_mut() {
            *pi = rng.sample(StandardNormal);
        }
        scratch.backup.copy_from_slice(x);
        let h0 = -path.log_density(k, x) + kinetic(&scratch.p);
        let mut trajectory = vec![x.to_vec()];
        leapfrog(
            path,
            k,
            x,
            &mut scratch.p,
            eps,
            cfg.leapfrog_steps,
            &mut scratch.grad,
            Some(&mut trajectory),
        );
        let h1 = -path.log_density(k, x) + kinetic(&scratch.p);
        let u: f64 = rng.random();
        let outcome = if !h0.is_finite() || !h1.is_finite() {
            StepOutcome::Divergent
        } else if u.ln() < h0 - h1 {
            StepOutcome::Accepted
        } else {
            StepOutcome::Rejected
        };
        let accepted = outcome == StepOutcome::Accepted;
        if !accepted {
            x.copy_from_slice(&scratch.backup);
            trajectory.clear();
        }
        match outcome {
            StepOutcome::Accepted => stats.accepted += 1,
            StepOutcome::Divergent => stats.divergent += 1,
            StepOutcome::Rejected => {}
        }
        steps.push(StepTrace {
            trajectory,
            eps,
            accepted,
        });
    }
    (HmcTrace { k, steps }, stats)
}

/// Pulls a gradient with respect to the chain's output back to its input,
/// treating every accept/reject outcome as fixed. Accepted steps replay the
/// leapfrog in reverse through Hessian-vector products of the annealed
/// density; rejected steps are the identity.
pub fn hmc_chain_backward(path: &AnnealedPath, trace: &HmcTrace, xbar: &mut [f64]) {
    let dim = xbar.len();
    let mut pbar = vec![0.0; dim];
    let mut hv = vec![0.0; dim];
    for step in trace.steps.iter().rev() {
        if !step.accepted {
            continue;
        }
        let n = step.trajectory.len() - 1;
        let eps = step.eps;
        pbar.iter_mut().for_each(|v| *v = 0.0);
        for t in (1..=n).rev() {
            // The final kick's reverse (coefficient eps/2 at t == n) is a
            // no-op because the output momentum carries no cotangent.
            if t < n {
                path.hvp(trace.k, &step.trajectory[t], &pbar, &mut hv);
                for (xb, h) in xbar.iter_mut().zip(&hv) {
                    *xb += eps * h;
                }
            }
            for (pb, xb) in pbar.iter_mut().zip(xbar.iter()) {
                *pb += eps * xb;
            }
        }
        path.hvp(trace.k, &step.trajectory[0], &pbar, &mut hv);
        for (xb, h) in xbar.iter_mut().zip(&hv) {
            *xb += 0.5 * eps * h;
        }
    }
}
