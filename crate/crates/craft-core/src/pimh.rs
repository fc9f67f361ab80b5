//! Independence Metropolis–Hastings whose proposals are whole sampler runs.
//!
//! Each proposal is an (ensemble, log normalizer) pair from an independent
//! run of some SMC-style sampler; a move is accepted with probability
//! min{1, Z*/Z}. Averaging a function of the retained ensembles — repeats
//! and all — gives asymptotically unbiased expectations under the target
//! even though each individual ensemble is biased. Error bars come from
//! batch means, since the chain's repeats are autocorrelated by design.

use crate::ensemble::ParticleEnsemble;
use crate::error::{CraftError, Result};
use crate::rng::{labels, RngKey};
use rand::Rng;
use std::time::{Duration, Instant};

/// A scalar function of one configuration, estimated under a weighted
/// ensemble as sum_i W_i f(x_i).
pub struct Observable {
    name: String,
    func: Box<dyn Fn(&[f64]) -> f64>,
}

impl Observable {
    pub fn new(name: impl Into<String>, func: impl Fn(&[f64]) -> f64 + 'static) -> Self {
        Observable {
            name: name.into(),
            func: Box::new(func),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn evaluate(&self, ensemble: &ParticleEnsemble) -> f64 {
        ensemble.weighted_mean(|x| (self.func)(x))
    }
}

/// Current retained sampler run plus chain bookkeeping.
pub struct PimhState {
    pub ensemble: ParticleEnsemble,
    pub log_z: f64,
    /// Accept/reject decisions taken so far (the initial run is kept
    /// unconditionally and does not count).
    pub decisions: usize,
    pub accepted: usize,
    /// Proposal attempts consumed, including failed ones; also the next
    /// attempt's key index, so retries never reuse a stream.
    pub attempts: u64,
    pub proposal_failures: usize,
}

impl PimhState {
    pub fn acceptance_rate(&self) -> f64 {
        if self.decisions == 0 {
            f64::NAN
        } else {
            self.accepted as f64 / self.decisions as f64
        }
    }
}

/// One proposal attempt; a failure is retried once on a fresh substream and
/// then aborts the chain.
fn propose_with_retry(
    propose: &mut impl FnMut(RngKey) -> Result<(ParticleEnsemble, f64)>,
    key: RngKey,
    attempts: &mut u64,
    failures: &mut usize,
    step: usize,
) -> Result<(ParticleEnsemble, f64)> {
    let proposal_key = key.child(labels::PROPOSAL);
    for remaining in [1usize, 0] {
        let attempt_key = proposal_key.child(*attempts);
        *attempts += 1;
        match propose(attempt_key) {
            Ok(run) => return Ok(run),
            Err(err) => {
                *failures += 1;
                if remaining == 0 {
                    return Err(CraftError::ProposalFailed {
                        step,
                        detail: err.to_string(),
                    });
                }
            }
        }
    }
    unreachable!("the retry loop always returns");
}

/// Runs the first sampler and keeps it unconditionally.
pub fn pimh_init(
    propose: &mut impl FnMut(RngKey) -> Result<(ParticleEnsemble, f64)>,
    key: RngKey,
) -> Result<PimhState> {
    let mut attempts = 0;
    let mut failures = 0;
    let (ensemble, log_z) = propose_with_retry(propose, key, &mut attempts, &mut failures, 0)?;
    if !log_z.is_finite() {
        return Err(CraftError::ProposalFailed {
            step: 0,
            detail: format!("initial run returned log_z = {log_z}"),
        });
    }
    Ok(PimhState {
        ensemble,
        log_z,
        decisions: 0,
        accepted: 0,
        attempts,
        proposal_failures: failures,
    })
}

/// One accept/reject decision against a fresh proposal. Returns whether the
/// chain moved. The acceptance uniform always comes from the substream
/// indexed by this decision, so outcomes are reproducible regardless of how
/// many proposal retries occurred.
pub fn pimh_step(
    state: &mut PimhState,
    propose: &mut impl FnMut(RngKey) -> Result<(ParticleEnsemble, f64)>,
    key: RngKey,
) -> Result<bool> {
    let step = state.decisions + 1;
    let (ensemble, log_z) = propose_with_retry(
        propose,
        key,
        &mut state.attempts,
        &mut state.proposal_failures,
        step,
    )?;
    let mut rng = key
        .child(labels::CHAIN_ACCEPT)
        .child(state.decisions as u64)
        .rng();
    let u: f64 = rng.random();
    // min{1, Z*/Z}: ln u < log_z* - log_z. A -inf proposal never passes.
    let accept = u.ln() < log_z - state.log_z;
    state.decisions += 1;
    if accept {
        state.ensemble = ensemble;
        state.log_z = log_z;
        state.accepted += 1;
    }
    debug_assert!(state.accepted <= state.decisions);
    Ok(accept)
}

/// Per-retained-sample record, in chain order.
#[derive(Debug, Clone)]
pub struct PimhStepRecord {
    pub step: usize,
    /// False when the chain kept the previous run (always true at step 0).
    pub accepted: bool,
    pub log_z: f64,
    /// Current ensemble's estimate of each observable.
    pub values: Vec<f64>,
    /// Mean of each observable over retained samples up to this step.
    pub running_means: Vec<f64>,
}

#[derive(Debug)]
pub struct PimhChainResult {
    /// Per-observable value sequences, indexed [observable][step].
    pub values: Vec<Vec<f64>>,
    pub means: Vec<f64>,
    /// Batch-means standard errors (20 batches) for each observable.
    pub stderrs: Vec<f64>,
    pub acceptance_rate: f64,
    pub steps: usize,
    pub proposal_failures: usize,
}

pub const BATCH_MEANS_BATCHES: usize = 20;

/// Runs a chain of up to `num_steps` retained samples (the first is the
/// unconditionally kept initial run). An expired `time_budget` stops the
/// chain early at a step boundary; budgeted runs therefore trade
/// reproducibility of the chain length for a wall-clock guarantee.
pub fn pimh_chain(
    propose: &mut impl FnMut(RngKey) -> Result<(ParticleEnsemble, f64)>,
    observables: &[Observable],
    num_steps: usize,
    time_budget: Option<Duration>,
    key: RngKey,
    mut on_step: impl FnMut(&PimhStepRecord) -> Result<()>,
) -> Result<PimhChainResult> {
    assert!(num_steps >= 1, "a chain has at least its initial run");
    let start = Instant::now();
    let mut state = pimh_init(propose, key)?;
    let mut values: Vec<Vec<f64>> = vec![Vec::with_capacity(num_steps); observables.len()];
    let mut sums = vec![0.0; observables.len()];
    let mut current: Vec<f64> = observables
        .iter()
        .map(|o| o.evaluate(&state.ensemble))
        .collect();

    let mut record_step = |state: &PimhState,
                           step: usize,
                           accepted: bool,
                           current: &[f64],
                           values: &mut Vec<Vec<f64>>,
                           sums: &mut Vec<f64>|
     -> Result<()> {
        let mut running = Vec::with_capacity(current.len());
        for (m, (&v, sum)) in current.iter().zip(sums.iter_mut()).enumerate() {
            *sum += v;
            values[m].push(v);
            running.push(*sum / (step + 1) as f64);
        }
        on_step(&PimhStepRecord {
            step,
            accepted,
            log_z: state.log_z,
            values: current.to_vec(),
            running_means: running,
        })
    };

    record_step(&state, 0, true, &current, &mut values, &mut sums)?;
    for step in 1..num_steps {
        if let Some(budget) = time_budget {
            if start.elapsed() >= budget {
                break;
            }
        }
        let moved = pimh_step(&mut state, propose, key)?;
        if moved {
            for (slot, o) in current.iter_mut().zip(observables) {
                *slot = o.evaluate(&state.ensemble);
            }
        }
        record_step(&state, step, moved, &current, &mut values, &mut sums)?;
    }

    let steps = values.first().map_or(0, Vec::len);
    let means: Vec<f64> = sums.iter().map(|s| s / steps as f64).collect();
    let stderrs: Vec<f64> = values
        .iter()
        .map(|v| batch_means_stderr(v, BATCH_MEANS_BATCHES))
        .collect();
    Ok(PimhChainResult {
        values,
        means,
        stderrs,
        acceptance_rate: state.acceptance_rate(),
        steps,
        proposal_failures: state.proposal_failures,
    })
}

/// Standard error of the mean of an autocorrelated sequence: split into
/// `num_batches` equal batches (dropping the remainder at the end), take the
/// sample standard deviation of the batch means, divide by sqrt(batches).
pub fn batch_means_stderr(values: &[f64], num_batches: usize) -> f64 {
    assert!(num_batches >= 2);
    let m = values.len() / num_batches;
    if m == 0 {
        return f64::NAN;
    }
    let batch_means: Vec<f64> = (0..num_batches)
        .map(|b| values[b * m..(b + 1) * m].iter().sum::<f64>() / m as f64)
        .collect();
    let grand = batch_means.iter().sum::<f64>() / num_batches as f64;
    let var = batch_means
        .iter()
        .map(|&bm| (bm - grand) * (bm - grand))
        .sum::<f64>()
        / (num_batches - 1) as f64;
    (var / num_batches as f64).sqrt()
}

/// Independent sampler runs for proposal-size tuning: the chain mixes well
/// when the standard deviation of these log normalizers is near 1. Each
/// run's normalizer is handed to `on_run` as soon as it exists.
pub fn independent_normalizers(
    propose: &mut impl FnMut(RngKey) -> Result<(ParticleEnsemble, f64)>,
    runs: usize,
    key: RngKey,
    mut on_run: impl FnMut(usize, f64) -> Result<()>,
) -> Result<Vec<f64>> {
    let mut attempts = 0;
    let mut failures = 0;
    (0..runs)
        .map(|j| {
            let (_, log_z) = propose_with_retry(propose, key, &mut attempts, &mut failures, j)?;
            on_run(j, log_z)?;
            Ok(log_z)
        })
        .collect()
}
