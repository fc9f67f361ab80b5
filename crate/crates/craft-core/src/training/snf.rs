//! Stochastic-normalizing-flow baseline: the same flow-then-MCMC pipeline,
//! trained end to end on a single ELBO instead of per-transition losses.
//!
//! A pass pushes fresh particles through every transition without ever
//! resampling, accumulating each particle's total log-weight; the objective
//! is the mean of those. Its gradient follows the reparameterized sampling
//! path: through flows exactly, and through accepted HMC trajectories by
//! replaying them in reverse with Hessian-vector products of the annealed
//! densities. Accept/reject outcomes and the initial draws are treated as
//! fixed noise — the score contribution of flipped decisions is not
//! estimated — and all flows receive one joint optimizer update per pass.

use crate::error::{CraftError, Result};
use crate::flows::Flow;
use crate::mcmc::{hmc_chain_backward, hmc_chain_traced, HmcConfig, HmcScratch, HmcTrace};
use crate::rng::{labels, RngKey};
use crate::smc::{init_ensemble, log_incremental_weight};
use crate::targets::AnnealedPath;
use crate::training::adam::{AdamState, OptimizerConfig};

#[derive(Debug, Clone)]
pub struct SnfConfig {
    pub num_particles: usize,
    pub num_passes: usize,
    pub optimizer: OptimizerConfig,
    pub hmc: HmcConfig,
    pub prescale_limit: f64,
}

impl Default for SnfConfig {
    fn default() -> Self {
        SnfConfig {
            num_particles: 256,
            num_passes: 100,
            optimizer: OptimizerConfig::default(),
            hmc: HmcConfig::default(),
            prescale_limit: 20.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SnfPassRecord {
    pub pass: usize,
    /// Mean total log-weight across particles: the bound being maximized.
    pub elbo: f64,
    pub mean_acceptance: f64,
    pub divergent: usize,
    pub max_abs_prescale: f64,
}

struct PassEval {
    elbo: f64,
    /// Ascent-direction gradient of the ELBO over concatenated flow params.
    grad: Vec<f64>,
    mean_acceptance: f64,
    divergent: usize,
    max_abs_prescale: f64,
}

/// Forward sweep plus reverse replay for one pass: positions and kernels are
/// sampled exactly as a no-resampling deployment with the same key would.
fn snf_pass(
    path: &AnnealedPath,
    flows: &[Flow],
    cfg: &SnfConfig,
    pass_key: RngKey,
    pass: usize,
) -> Result<PassEval> {
    let num_k = path.num_transitions();
    let n = cfg.num_particles;
    let dim = path.dim();
    let ensemble = init_ensemble(path, n, pass_key);
    let transition_base = pass_key.child(labels::TRANSITION);

    // Forward: record pre-flow positions per transition, post-flow positions,
    // and the HMC traces, particle-major inside each transition.
    let mut pre_flow: Vec<Vec<f64>> = Vec::with_capacity(num_k);
    let mut post_flow: Vec<Vec<f64>> = Vec::with_capacity(num_k);
    let mut traces: Vec<Vec<HmcTrace>> = Vec::with_capacity(num_k);
    let mut positions = ensemble.positions().to_vec();
    let mut log_w = vec![0.0; n];
    let mut max_abs_prescale = 0.0f64;
    let mut accepted = 0usize;
    let mut attempted = 0usize;
    let mut divergent = 0usize;
    let mut scratch = HmcScratch::new(dim);

    for k in 1..=num_k {
        pre_flow.push(positions.clone());
        let mut post = vec![0.0; n * dim];
        for i in 0..n {
            let x = &positions[i * dim..(i + 1) * dim];
            let (log_g, ev) = log_incremental_weight(path, k, &flows[k - 1], x)?;
            log_w[i] += log_g;
            max_abs_prescale = max_abs_prescale.max(ev.max_abs_prescale);
            post[i * dim..(i + 1) * dim].copy_from_slice(&ev.y);
        }
        post_flow.push(post.clone());

        let mcmc_key = transition_base.child(k as u64).child(labels::MCMC);
        let mut k_traces = Vec::with_capacity(n);
        for i in 0..n {
            let mut rng = mcmc_key.child(i as u64).rng();
            let x = &mut post[i * dim..(i + 1) * dim];
            let (trace, stats) = hmc_chain_traced(path, k, x, &cfg.hmc, &mut rng, &mut scratch);
            accepted += stats.accepted;
            attempted += stats.attempted;
            divergent += stats.divergent;
            k_traces.push(trace);
        }
        traces.push(k_traces);
        positions = post;
    }
    let elbo = log_w.iter().sum::<f64>() / n as f64;

    // Reverse: per particle, walk the transitions backwards accumulating the
    // pathwise cotangent, emitting one parameter-gradient block per flow.
    let total_params: usize = flows.iter().map(|f| f.num_params()).sum();
    let mut grad = vec![0.0; total_params];
    let offsets: Vec<usize> = flows
        .iter()
        .scan(0, |acc, f| {
            let at = *acc;
            *acc += f.num_params();
            Some(at)
        })
        .collect();
    let mut gy = vec![0.0; dim];
    let mut glow = vec![0.0; dim];
    for i in 0..n {
        let mut xbar = vec![0.0; dim];
        for k in (1..=num_k).rev() {
            let y = &post_flow[k - 1][i * dim..(i + 1) * dim];
            // Cotangent at the pre-MCMC point: downstream pulled back
            // through the kernel, plus the direct density term.
            hmc_chain_backward(path, &traces[k - 1][i], &mut xbar);
            path.grad(k, y, &mut gy);
            for (a, b) in xbar.iter_mut().zip(&gy) {
                *a += b;
            }
            let x = &pre_flow[k - 1][i * dim..(i + 1) * dim];
            let (gx, gp) = flows[k - 1].adjoint(x, &xbar, 1.0);
            let at = offsets[k - 1];
            for (slot, g) in grad[at..at + gp.len()].iter_mut().zip(&gp) {
                *slot += g;
            }
            if k > 1 {
                path.grad(k - 1, x, &mut glow);
                for (a, (g, d)) in xbar.iter_mut().zip(gx.iter().zip(&glow)) {
                    *a = g - d;
                }
            }
        }
    }
    let scale = 1.0 / n as f64;
    for g in grad.iter_mut() {
        *g *= scale;
    }

    if !elbo.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(CraftError::NonFinite {
            quantity: "stochastic-flow bound",
            transition: num_k,
            iteration: pass,
        });
    }
    Ok(PassEval {
        elbo,
        grad,
        mean_acceptance: if attempted == 0 {
            f64::NAN
        } else {
            accepted as f64 / attempted as f64
        },
        divergent,
        max_abs_prescale,
    })
}

/// Trains all flows jointly in place, one optimizer update per pass.
pub fn train_snf(
    path: &AnnealedPath,
    flows: &mut [Flow],
    cfg: &SnfConfig,
    key: RngKey,
    mut on_pass: impl FnMut(&SnfPassRecord) -> Result<()>,
) -> Result<Vec<SnfPassRecord>> {
    assert_eq!(flows.len(), path.num_transitions());
    let total_params: usize = flows.iter().map(|f| f.num_params()).sum();
    let mut adam = AdamState::new(total_params);
    let mut records = Vec::with_capacity(cfg.num_passes);
    let pass_base = key.child(labels::PASS);

    for pass in 0..cfg.num_passes {
        let eval = snf_pass(path, flows, cfg, pass_base.child(pass as u64), pass)?;
        if eval.max_abs_prescale > cfg.prescale_limit {
            return Err(CraftError::PreScaleOverflow {
                transition: path.num_transitions(),
                iteration: pass,
                value: eval.max_abs_prescale,
                limit: cfg.prescale_limit,
            });
        }

        let mut params: Vec<f64> = Vec::with_capacity(total_params);
        for f in flows.iter() {
            params.extend(f.params());
        }
        // Maximize: descend on the negated bound.
        let descent: Vec<f64> = eval.grad.iter().map(|g| -g).collect();
        adam.step(&cfg.optimizer, pass, &mut params, &descent);
        let mut at = 0;
        for f in flows.iter_mut() {
            let np = f.num_params();
            f.set_params(&params[at..at + np]);
            at += np;
        }

        let record = SnfPassRecord {
            pass,
            elbo: eval.elbo,
            mean_acceptance: eval.mean_acceptance,
            divergent: eval.divergent,
            max_abs_prescale: eval.max_abs_prescale,
        };
        on_pass(&record)?;
        records.push(record);
    }
    Ok(records)
}
