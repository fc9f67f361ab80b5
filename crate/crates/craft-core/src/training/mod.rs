//! Flow trainers and the loss estimators they share.
//!
//! The per-transition loss is the importance-weighted KL surrogate
//!
//!   loss_k = -sum_i W_i log G_k(x_i),
//!
//! whose parameter gradient flows through the transported point and the
//! volume term only (the pre-transport density does not depend on the flow).
//! Summed over transitions the loss is bounded below by -log Z, with
//! equality exactly when every flow transports its annealed density onto the
//! next one, which is what makes it a useful training signal for the
//! sampler.

pub mod adam;
pub mod aft;
pub mod craft;
pub mod snf;
pub mod vi;

pub use adam::{AdamState, OptimizerConfig};
pub use aft::{
    train_aft_practical, train_aft_simple, AftConfig, AftPracticalOutcome, AftSimpleOutcome,
    AftTransitionRecord,
};
pub use craft::{train_craft, CraftConfig, PassRecord};
pub use snf::{train_snf, SnfConfig, SnfPassRecord};
pub use vi::{train_vi, vi_objective, ViConfig, ViRecord};

use crate::ensemble::ParticleEnsemble;
use crate::error::Result;
use crate::flows::Flow;
use crate::smc::log_incremental_weight;
use crate::targets::AnnealedPath;

/// Weighted loss estimate at transition k on the (pre-transport) ensemble.
/// Particles with zero weight contribute nothing, even where the incremental
/// weight is degenerate.
pub fn kl_loss_estimate(
    path: &AnnealedPath,
    k: usize,
    flow: &Flow,
    ensemble: &ParticleEnsemble,
) -> Result<f64> {
    let w = ensemble.weights();
    let mut loss = 0.0;
    for i in 0..ensemble.len() {
        if w[i] == 0.0 {
            continue;
        }
        let (log_g, _) = log_incremental_weight(path, k, flow, ensemble.position(i))?;
        loss -= w[i] * log_g;
    }
    Ok(loss)
}

/// Loss and its gradient in the flow parameters, in one sweep. The gradient
/// of -W_i log G_k(x_i) reaches the parameters through the transported point
/// (cotangent -W_i grad log gamma_k at T(x_i)) and through the volume term
/// (cotangent -W_i), which is exactly one adjoint call per particle.
pub fn flow_grad_estimate(
    path: &AnnealedPath,
    k: usize,
    flow: &Flow,
    ensemble: &ParticleEnsemble,
) -> Result<(f64, Vec<f64>)> {
    let w = ensemble.weights();
    let dim = ensemble.dim();
    let mut grad = vec![0.0; flow.num_params()];
    let mut gy = vec![0.0; dim];
    let mut loss = 0.0;
    for i in 0..ensemble.len() {
        if w[i] == 0.0 {
            continue;
        }
        let x = ensemble.position(i);
        let (log_g, ev) = log_incremental_weight(path, k, flow, x)?;
        loss -= w[i] * log_g;
        path.grad(k, &ev.y, &mut gy);
        for v in gy.iter_mut() {
            *v *= -w[i];
        }
        let (_, gp) = flow.adjoint(x, &gy, -w[i]);
        for (a, b) in grad.iter_mut().zip(&gp) {
            *a += b;
        }
    }
    Ok((loss, grad))
}

/// Self-normalized estimate of the gradient of log Z with respect to
/// parameters of the target density: sum_i W_i d_phi log gamma(x_i), with
/// `param_grad` writing d_phi log gamma at a point into its output slice.
pub fn log_z_param_grad(
    ensemble: &ParticleEnsemble,
    num_params: usize,
    mut param_grad: impl FnMut(&[f64], &mut [f64]),
) -> Vec<f64> {
    let w = ensemble.weights();
    let mut total = vec![0.0; num_params];
    let mut buf = vec![0.0; num_params];
    for i in 0..ensemble.len() {
        if w[i] == 0.0 {
            continue;
        }
        param_grad(ensemble.position(i), &mut buf);
        for (t, b) in total.iter_mut().zip(&buf) {
            *t += w[i] * b;
        }
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ensemble::ResampleConfig;
    use crate::mcmc::HmcConfig;
    use crate::rng::RngKey;
    use crate::smc::{deploy, identity_flows, init_ensemble, smc_nf_step};
    use crate::targets::testutil::{blended_log_norm, optimal_affine_flows};
    use crate::targets::{Gaussian, Phi4};
    use std::sync::Arc;

    #[test]
    fn flow_grad_matches_finite_differences() {
        let target = Gaussian::new(vec![1.0, -0.5, 0.3, 0.0], {
            let mut cov = vec![0.0; 16];
            for d in 0..4 {
                cov[d * 4 + d] = 0.5 + 0.3 * d as f64;
            }
            cov
        })
        .unwrap();
        let path = AnnealedPath::with_uniform_schedule(Arc::new(target), 3);
        let mut flow = Flow::coupling(4, 0, 6, RngKey::new(88));
        // Push the final layer off zero so the gradient check sees a generic
        // point in parameter space.
        let mut p = flow.params();
        for (j, v) in p.iter_mut().enumerate() {
            *v += 0.05 * ((j % 7) as f64 - 3.0);
        }
        flow.set_params(&p);

        let ensemble = init_ensemble(&path, 16, RngKey::new(5));
        let k = 2;
        let (loss, grad) = flow_grad_estimate(&path, k, &flow, &ensemble).unwrap();
        assert!(loss.is_finite());

        let h = 1e-6;
        for j in 0..p.len() {
            let mut fp = flow.clone();
            let mut fm = flow.clone();
            let mut pp = p.clone();
            let mut pm = p.clone();
            pp[j] += h;
            pm[j] -= h;
            fp.set_params(&pp);
            fm.set_params(&pm);
            let lp = kl_loss_estimate(&path, k, &fp, &ensemble).unwrap();
            let lm = kl_loss_estimate(&path, k, &fm, &ensemble).unwrap();
            let fd = (lp - lm) / (2.0 * h);
            assert!(
                (grad[j] - fd).abs() < 1e-5 * (1.0 + fd.abs()),
                "param {j}: {} vs fd {}",
                grad[j],
                fd
            );
        }
    }

    /// At the zero-variance transport the per-transition loss equals the
    /// negative log of the normalizer increment, so the total equals -log Z.
    #[test]
    fn total_loss_at_optimum_is_minus_log_z() {
        let (mu, sig2, ls) = ([0.4, -0.9], [0.6, 1.8], -0.25);
        let target = Gaussian::new(vec![mu[0], mu[1]], vec![sig2[0], 0.0, 0.0, sig2[1]])
            .unwrap()
            .with_log_scale(ls);
        let path = AnnealedPath::with_uniform_schedule(Arc::new(target), 4);
        let flows = optimal_affine_flows(path.betas(), &mu, &sig2);

        let mut ensemble = init_ensemble(&path, 64, RngKey::new(17));
        let mut log_z = 0.0;
        let mut total = 0.0;
        let hmc = HmcConfig {
            steps_per_transition: 0,
            ..HmcConfig::default()
        };
        for k in 1..=4 {
            total += kl_loss_estimate(&path, k, &flows[k - 1], &ensemble).unwrap();
            smc_nf_step(
                &path,
                k,
                &flows[k - 1],
                &mut ensemble,
                &mut log_z,
                &ResampleConfig {
                    threshold_fraction: 0.0,
                },
                &hmc,
                RngKey::new(17).child(k as u64),
            )
            .unwrap();
        }
        let analytic =
            blended_log_norm(1.0, mu[0], sig2[0], ls) + blended_log_norm(1.0, mu[1], sig2[1], 0.0);
        assert!((total + log_z).abs() < 1e-9, "loss {total} vs -log_z {}", -log_z);
        assert!((log_z - analytic).abs() < 1e-9);
    }

    /// With static particles the normalizer estimate telescopes, making the
    /// self-normalized parameter gradient exact; check it against finite
    /// differences of the whole deployment in the lattice mass parameter.
    #[test]
    fn param_grad_matches_deployment_finite_differences() {
        let run = |m2: f64| {
            let path =
                AnnealedPath::with_uniform_schedule(Arc::new(Phi4::new(3, 0.3, m2)), 4);
            deploy(
                &path,
                &identity_flows(&path),
                32,
                &ResampleConfig {
                    threshold_fraction: 0.0,
                },
                &HmcConfig {
                    steps_per_transition: 0,
                    ..HmcConfig::default()
                },
                RngKey::new(23),
            )
            .unwrap()
        };
        let m2 = -0.8;
        let out = run(m2);
        // d log gamma / d m2 = -sum_x phi_x^2.
        let grad = log_z_param_grad(&out.ensemble, 1, |x, g| {
            g[0] = -x.iter().map(|v| v * v).sum::<f64>();
        });
        let h = 1e-5;
        let fd = (run(m2 + h).log_z - run(m2 - h).log_z) / (2.0 * h);
        assert!(
            (grad[0] - fd).abs() < 1e-5 * (1.0 + fd.abs()),
            "{} vs fd {}",
            grad[0],
            fd
        );
    }

    #[test]
    fn dead_particles_do_not_poison_the_loss() {
        let target = Gaussian::new(vec![0.0], vec![1.0]).unwrap();
        let path = AnnealedPath::with_uniform_schedule(Arc::new(target), 2);
        let mut ensemble = init_ensemble(&path, 4, RngKey::new(2));
        let raw = vec![0.0, f64::NEG_INFINITY, -0.5, -1.0];
        ensemble.set_raw_log_weights(raw, 1).unwrap();
        let flow = Flow::identity(1);
        let loss = kl_loss_estimate(&path, 1, &flow, &ensemble).unwrap();
        assert!(loss.is_finite());
        let (loss2, grad) = flow_grad_estimate(&path, 1, &flow, &ensemble).unwrap();
        assert_eq!(loss.to_bits(), loss2.to_bits());
        assert!(grad.is_empty());
    }
}
