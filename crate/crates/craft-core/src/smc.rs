//! The annealed transport step and full sampler deployment.
//!
//! One transition moves a weighted ensemble from annealed density k-1 to k:
//! transport every particle through the transition's flow, multiply weights
//! by the incremental ratio (new density over old, times the flow's volume
//! change), absorb the normalizer increment, resample if the effective
//! sample size has collapsed, then rejuvenate with HMC at the new
//! temperature. With identity flows the procedure reduces to annealed
//! importance sampling with resampling; the normalizer estimate stays
//! unbiased for any fixed flows because the weighting is exact regardless of
//! how well the flows transport.

use crate::ensemble::{ParticleEnsemble, ResampleConfig};
use crate::error::{CraftError, Result};
use crate::flows::{Flow, FlowEval};
use crate::mcmc::{kernel_sweep, HmcConfig};
use crate::rng::{labels, RngKey};
use crate::targets::AnnealedPath;

/// Telemetry for one completed transition.
#[derive(Debug, Clone)]
pub struct TransitionRecord {
    pub k: usize,
    pub beta: f64,
    /// Effective sample size over ensemble size, after reweighting and
    /// before any resampling.
    pub ess_fraction: f64,
    pub resampled: bool,
    /// Running log-normalizer estimate after this transition.
    pub log_z: f64,
    pub acceptance_rate: f64,
    pub divergent: usize,
    /// Largest |pre-scale| any particle produced inside the flow.
    pub max_abs_prescale: f64,
}

/// Log of the incremental weight for one particle at transition k, together
/// with the flow evaluation that produced it.
///
/// A particle sitting where the previous annealed density vanishes makes the
/// ratio ill-defined, so that is a hard error rather than a NaN.
pub fn log_incremental_weight(
    path: &AnnealedPath,
    k: usize,
    flow: &Flow,
    x: &[f64],
) -> Result<(f64, FlowEval)> {
    let prev = path.log_density(k - 1, x);
    if prev == f64::NEG_INFINITY {
        return Err(CraftError::InvalidLogWeight {
            transition: k,
            detail: "pre-transport annealed density vanished at a live particle".into(),
        });
    }
    let ev = flow.forward(x);
    let new = path.log_density(k, &ev.y);
    Ok((new - prev + ev.log_det, ev))
}

/// Draws the initial ensemble; particle i uses substream INIT/i of `key`.
pub fn init_ensemble(path: &AnnealedPath, n: usize, key: RngKey) -> ParticleEnsemble {
    let dim = path.dim();
    let init_key = key.child(labels::INIT);
    let mut positions = vec![0.0; n * dim];
    for i in 0..n {
        let mut rng = init_key.child(i as u64).rng();
        path.sample_initial(&mut rng, &mut positions[i * dim..(i + 1) * dim]);
    }
    ParticleEnsemble::from_positions(positions, dim)
}

/// One transition, in place. `key` must be unique per (run, transition);
/// resampling and rejuvenation consume disjoint substreams of it.
#[allow(clippy::too_many_arguments)]
pub fn smc_nf_step(
    path: &AnnealedPath,
    k: usize,
    flow: &Flow,
    ensemble: &mut ParticleEnsemble,
    log_z: &mut f64,
    resample: &ResampleConfig,
    hmc: &HmcConfig,
    key: RngKey,
) -> Result<TransitionRecord> {
    let n = ensemble.len();
    let mut raw = Vec::with_capacity(n);
    let mut max_abs_prescale = 0.0f64;
    for i in 0..n {
        let (log_g, ev) = log_incremental_weight(path, k, flow, ensemble.position(i))?;
        raw.push(ensemble.log_weights()[i] + log_g);
        max_abs_prescale = max_abs_prescale.max(ev.max_abs_prescale);
        ensemble.position_mut(i).copy_from_slice(&ev.y);
    }
    // The previous weights were normalized, so the shift that renormalizes
    // the raw weights is exactly the log of the normalizer increment.
    let increment = ensemble.set_raw_log_weights(raw, k)?;
    *log_z += increment;

    let ess = ensemble.effective_sample_size();
    let resampled = ess <= resample.threshold_fraction * n as f64;
    if resampled {
        let mut rng = key.child(labels::RESAMPLE).rng();
        ensemble.resample(&mut rng);
    }
    let stats = kernel_sweep(path, k, ensemble, hmc, key);

    Ok(TransitionRecord {
        k,
        beta: path.beta(k),
        ess_fraction: ess / n as f64,
        resampled,
        log_z: *log_z,
        acceptance_rate: stats.acceptance_rate(),
        divergent: stats.divergent,
        max_abs_prescale,
    })
}

#[derive(Debug)]
pub struct DeployResult {
    pub ensemble: ParticleEnsemble,
    pub log_z: f64,
    pub transitions: Vec<TransitionRecord>,
}

/// Runs the full sampler with the given flows (one per transition; identity
/// entries recover plain annealed importance sampling). Every random draw
/// descends from `key`, so equal keys give bit-identical results.
pub fn deploy(
    path: &AnnealedPath,
    flows: &[Flow],
    n: usize,
    resample: &ResampleConfig,
    hmc: &HmcConfig,
    key: RngKey,
) -> Result<DeployResult> {
    deploy_traced(path, flows, n, resample, hmc, key, |_| Ok(()))
}

/// [`deploy`] with a per-transition callback, so long runs can stream their
/// trace somewhere as it happens. Callback errors abort the run.
pub fn deploy_traced(
    path: &AnnealedPath,
    flows: &[Flow],
    n: usize,
    resample: &ResampleConfig,
    hmc: &HmcConfig,
    key: RngKey,
    mut on_transition: impl FnMut(&TransitionRecord) -> Result<()>,
) -> Result<DeployResult> {
    assert_eq!(
        flows.len(),
        path.num_transitions(),
        "need one flow per transition"
    );
    let mut ensemble = init_ensemble(path, n, key);
    let mut log_z = 0.0;
    let mut transitions = Vec::with_capacity(flows.len());
    let transition_key = key.child(labels::TRANSITION);
    for k in 1..=path.num_transitions() {
        let record = smc_nf_step(
            path,
            k,
            &flows[k - 1],
            &mut ensemble,
            &mut log_z,
            resample,
            hmc,
            transition_key.child(k as u64),
        )?;
        on_transition(&record)?;
        transitions.push(record);
    }
    Ok(DeployResult {
        ensemble,
        log_z,
        transitions,
    })
}

/// Identity flows for a K-transition path.
pub fn identity_flows(path: &AnnealedPath) -> Vec<Flow> {
    (0..path.num_transitions())
        .map(|_| Flow::identity(path.dim()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::logsumexp;
    use crate::mcmc::{hmc_step, HmcScratch};
    use crate::targets::testutil::{blended_log_norm, optimal_affine_flows};
    use crate::targets::{Density, Gaussian};
    use rand::Rng;
    use std::sync::Arc;

    fn no_hmc() -> HmcConfig {
        HmcConfig {
            steps_per_transition: 0,
            ..HmcConfig::default()
        }
    }

    fn never_resample() -> ResampleConfig {
        ResampleConfig {
            threshold_fraction: 0.0,
        }
    }

    /// Per-coordinate affine maps that push each annealed marginal exactly
    /// onto the next one; the resulting incremental weights are constant, so
    /// the normalizer estimate is exact for any ensemble size.
    #[test]
    fn perfect_transport_gives_exact_normalizer() {
        let (mu, sig2, ls) = ([0.9, -1.4], [0.5, 2.0], 0.37);
        let target = Gaussian::new(vec![mu[0], mu[1]], vec![sig2[0], 0.0, 0.0, sig2[1]])
            .unwrap()
            .with_log_scale(ls);
        let path = AnnealedPath::with_uniform_schedule(Arc::new(target), 3);
        let flows = optimal_affine_flows(path.betas(), &mu, &sig2);

        let out = deploy(
            &path,
            &flows,
            64,
            &never_resample(),
            &no_hmc(),
            RngKey::new(7),
        )
        .unwrap();

        // Sum of the per-coordinate log-normalizers at beta = 1 is log_scale
        // spread over coordinates; the oracle never touches sampler code.
        let expected: f64 = blended_log_norm(1.0, mu[0], sig2[0], ls)
            + blended_log_norm(1.0, mu[1], sig2[1], 0.0);
        assert!(
            (out.log_z - expected).abs() < 1e-9,
            "log_z {} vs analytic {}",
            out.log_z,
            expected
        );
        for rec in &out.transitions {
            assert!(rec.ess_fraction > 1.0 - 1e-9, "ESS {}", rec.ess_fraction);
            assert!(!rec.resampled);
        }
    }

    /// With identity flows and static particles the normalizer telescopes,
    /// so the streamed estimate must match the one-shot importance-sampling
    /// form computed directly from the initial positions.
    #[test]
    fn static_identity_run_telescopes_to_importance_sampling() {
        let target = Gaussian::new(vec![1.0, 0.5], vec![0.7, 0.2, 0.2, 1.1])
            .unwrap()
            .with_log_scale(-0.8);
        let path = AnnealedPath::with_uniform_schedule(Arc::new(target), 6);
        let key = RngKey::new(42);
        let n = 128;

        let start = init_ensemble(&path, n, key);
        let terms: Vec<f64> = (0..n)
            .map(|i| {
                let x = start.position(i);
                path.log_density(6, x) - path.log_density(0, x)
            })
            .collect();
        let one_shot = logsumexp(&terms) - (n as f64).ln();

        let out = deploy(
            &path,
            &identity_flows(&path),
            n,
            &never_resample(),
            &no_hmc(),
            key,
        )
        .unwrap();
        assert!(
            (out.log_z - one_shot).abs() < 1e-10,
            "streamed {} vs one-shot {}",
            out.log_z,
            one_shot
        );
    }

    /// Independent re-implementation of the full loop (own weight algebra,
    /// own resampler, own HMC driver) consuming the same substreams: every
    /// number must match bit for bit.
    #[test]
    fn deployment_matches_independent_reference_bit_for_bit() {
        let target = Gaussian::new(vec![2.0], vec![0.3]).unwrap();
        let path = AnnealedPath::with_uniform_schedule(Arc::new(target), 5);
        let n = 48;
        let key = RngKey::new(1234);
        let resample = ResampleConfig {
            threshold_fraction: 0.8,
        };
        let hmc = HmcConfig {
            leapfrog_steps: 4,
            steps_per_transition: 2,
            ..HmcConfig::default()
        };

        let out = deploy(&path, &identity_flows(&path), n, &resample, &hmc, key).unwrap();

        // Reference: plain vectors, inline normalization, inverse-CDF
        // resampling, direct HMC calls.
        let mut xs: Vec<f64> = vec![0.0; n];
        for i in 0..n {
            let mut rng = key.child(labels::INIT).child(i as u64).rng();
            let mut buf = [0.0];
            path.sample_initial(&mut rng, &mut buf);
            xs[i] = buf[0];
        }
        let mut logw = vec![-(n as f64).ln(); n];
        let mut log_z = 0.0;
        let tkey = key.child(labels::TRANSITION);
        for k in 1..=5 {
            let kkey = tkey.child(k as u64);
            for i in 0..n {
                logw[i] += path.log_density(k, &[xs[i]]) - path.log_density(k - 1, &[xs[i]]);
            }
            let m = logw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let ln_norm = m + logw.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
            for v in logw.iter_mut() {
                *v -= ln_norm;
            }
            log_z += ln_norm;
            let lin: Vec<f64> = {
                let m = logw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let raw: Vec<f64> = logw.iter().map(|&v| (v - m).exp()).collect();
                let s: f64 = raw.iter().sum();
                raw.iter().map(|&v| v / s).collect()
            };
            let ess = 1.0 / lin.iter().map(|&v| v * v).sum::<f64>();
            if ess <= 0.8 * n as f64 {
                let mut rng = kkey.child(labels::RESAMPLE).rng();
                let mut cum: Vec<f64> = lin
                    .iter()
                    .scan(0.0, |acc, &v| {
                        *acc += v;
                        Some(*acc)
                    })
                    .collect();
                cum[n - 1] = f64::INFINITY;
                let old = xs.clone();
                for slot in xs.iter_mut() {
                    let u: f64 = rng.random();
                    let idx = cum.iter().position(|&c| u < c).unwrap();
                    *slot = old[idx];
                }
                logw = vec![-(n as f64).ln(); n];
            }
            let mut scratch = HmcScratch::new(1);
            let eps = hmc.step_size(path.beta(k));
            let mkey = kkey.child(labels::MCMC);
            for i in 0..n {
                let mut rng = mkey.child(i as u64).rng();
                let mut x = [xs[i]];
                for _ in 0..hmc.steps_per_transition {
                    hmc_step(&path, k, &mut x, eps, hmc.leapfrog_steps, &mut rng, &mut scratch);
                }
                xs[i] = x[0];
            }
        }

        assert_eq!(out.log_z.to_bits(), log_z.to_bits());
        for i in 0..n {
            assert_eq!(out.ensemble.position(i)[0].to_bits(), xs[i].to_bits());
            assert_eq!(out.ensemble.log_weights()[i].to_bits(), logw[i].to_bits());
        }
    }

    #[test]
    fn collapse_triggers_resampling_and_uniform_weights() {
        let target = Gaussian::new(vec![6.0], vec![0.01]).unwrap();
        let path = AnnealedPath::with_uniform_schedule(Arc::new(target), 2);
        let out = deploy(
            &path,
            &identity_flows(&path),
            64,
            &ResampleConfig {
                threshold_fraction: 0.9,
            },
            &no_hmc(),
            RngKey::new(9),
        )
        .unwrap();
        assert!(out.transitions.iter().any(|r| r.resampled));
        let last = out.transitions.last().unwrap();
        if last.resampled {
            let u = -(64f64).ln();
            for &lw in out.ensemble.log_weights() {
                assert_eq!(lw.to_bits(), u.to_bits());
            }
        }
    }

    struct UnitInterval;
    impl Density for UnitInterval {
        fn dim(&self) -> usize {
            1
        }
        fn log_density(&self, x: &[f64]) -> f64 {
            if x[0].abs() <= 1.0 {
                0.0
            } else {
                f64::NEG_INFINITY
            }
        }
        fn grad_log_density(&self, _x: &[f64], out: &mut [f64]) {
            out.fill(0.0);
        }
        fn hvp_log_density(&self, _x: &[f64], _v: &[f64], out: &mut [f64]) {
            out.fill(0.0);
        }
    }

    /// A particle parked where the previous annealed density vanished makes
    /// the next incremental weight ill-defined; that must surface as a typed
    /// error naming the transition, not as NaN.
    #[test]
    fn vanished_pre_transport_density_is_a_typed_error() {
        let path = AnnealedPath::with_uniform_schedule(Arc::new(UnitInterval), 2);
        // No resampling, no moves: dead particles stay parked outside.
        let err = deploy(
            &path,
            &identity_flows(&path),
            32,
            &never_resample(),
            &no_hmc(),
            RngKey::new(3),
        )
        .unwrap_err();
        match err {
            CraftError::InvalidLogWeight { transition, .. } => assert_eq!(transition, 2),
            other => panic!("expected InvalidLogWeight, got {other:?}"),
        }
    }
}
