//! Variational baseline: one flow (usually a deep composite) trained to push
//! the initial distribution directly onto the target by stochastic gradient
//! ascent on the reverse-KL bound. No annealing, no importance correction:
//! whatever mass the optimized map fails to cover is simply lost, which is
//! the known mode-seeking behavior the annealed samplers exist to avoid.

use crate::error::{CraftError, Result};
use crate::flows::Flow;
use crate::rng::{labels, RngKey};
use crate::smc::init_ensemble;
use crate::targets::AnnealedPath;
use crate::training::adam::{AdamState, OptimizerConfig};

#[derive(Debug, Clone)]
pub struct ViConfig {
    pub num_samples: usize,
    pub num_iterations: usize,
    pub optimizer: OptimizerConfig,
    pub prescale_limit: f64,
}

impl Default for ViConfig {
    fn default() -> Self {
        ViConfig {
            num_samples: 256,
            num_iterations: 500,
            optimizer: OptimizerConfig::default(),
            prescale_limit: 20.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ViRecord {
    pub iteration: usize,
    /// Monte Carlo estimate of the bound; approaches log Z from below as the
    /// map improves.
    pub objective: f64,
    pub max_abs_prescale: f64,
}

/// Bound estimate on a batch of initial samples: the batch mean of
/// log gamma_K(T(x)) + log|det T'(x)| - log pi_0(x).
pub fn vi_objective(path: &AnnealedPath, flow: &Flow, batch: &crate::ParticleEnsemble) -> f64 {
    let last = path.num_transitions();
    let n = batch.len();
    let mut total = 0.0;
    for i in 0..n {
        let x = batch.position(i);
        let ev = flow.forward(x);
        total += path.log_density(last, &ev.y) + ev.log_det - path.log_density(0, x);
    }
    total / n as f64
}

/// Trains the flow in place; every iteration draws a fresh batch from the
/// initial distribution, using the same per-particle substream layout as the
/// samplers.
pub fn train_vi(
    path: &AnnealedPath,
    flow: &mut Flow,
    cfg: &ViConfig,
    key: RngKey,
    mut on_iteration: impl FnMut(&ViRecord) -> Result<()>,
) -> Result<Vec<ViRecord>> {
    let last = path.num_transitions();
    let dim = path.dim();
    let mut adam = AdamState::new(flow.num_params());
    let mut records = Vec::with_capacity(cfg.num_iterations);
    let batch_base = key.child(labels::PASS);
    let mut gy = vec![0.0; dim];

    for iteration in 0..cfg.num_iterations {
        let batch = init_ensemble(path, cfg.num_samples, batch_base.child(iteration as u64));
        let scale = 1.0 / cfg.num_samples as f64;
        let mut objective = 0.0;
        let mut grad = vec![0.0; flow.num_params()];
        let mut max_prescale = 0.0f64;
        for i in 0..cfg.num_samples {
            let x = batch.position(i);
            let ev = flow.forward(x);
            objective += path.log_density(last, &ev.y) + ev.log_det - path.log_density(0, x);
            max_prescale = max_prescale.max(ev.max_abs_prescale);
            // Descend on the negated bound: cotangents carry -1/n.
            path.grad(last, &ev.y, &mut gy);
            for v in gy.iter_mut() {
                *v *= -scale;
            }
            let (_, gp) = flow.adjoint(x, &gy, -scale);
            for (a, b) in grad.iter_mut().zip(&gp) {
                *a += b;
            }
        }
        objective *= scale;

        if !objective.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(CraftError::NonFinite {
                quantity: "variational objective",
                transition: last,
                iteration,
            });
        }
        if max_prescale > cfg.prescale_limit {
            return Err(CraftError::PreScaleOverflow {
                transition: last,
                iteration,
                value: max_prescale,
                limit: cfg.prescale_limit,
            });
        }

        let mut params = flow.params();
        adam.step(&cfg.optimizer, iteration, &mut params, &grad);
        flow.set_params(&params);

        let record = ViRecord {
            iteration,
            objective,
            max_abs_prescale: max_prescale,
        };
        on_iteration(&record)?;
        records.push(record);
    }
    Ok(records)
}
