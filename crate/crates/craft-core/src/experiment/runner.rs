//! Executes a validated config: builds the problem, runs the requested mode,
//! and writes `metrics.csv`, `summary.json`, and (for training runs) a
//! `flows.json` checkpoint into one output directory.
//!
//! Everything written to disk is a pure function of `(config, seed)`: rows
//! use the shortest round-tripping float form, JSON keys are sorted, and no
//! artifact records wall-clock time (timing talk belongs on the caller's
//! stdout, where it can't break byte-for-byte reproducibility).

use std::fs::{self, File};
use std::io::{BufWriter, Write as _};
use std::path::{Path, PathBuf};

use serde_json::{json, Value};

use crate::ensemble::ParticleEnsemble;
use crate::error::{CraftError, Result};
use crate::experiment::config::{Algorithm, ExperimentConfig, Mode, TargetKind};
use crate::flows::{load_flows, save_flows, Flow};
use crate::pimh::{independent_normalizers, pimh_chain, Observable};
use crate::rng::RngKey;
use crate::smc::{deploy, deploy_traced, identity_flows, TransitionRecord};
use crate::targets::{
    ising_energy_density, mean_field, two_point_susceptibility, AnnealedPath,
};
use crate::training::{
    train_aft_practical, train_aft_simple, train_craft, train_snf, train_vi, AftConfig,
    AftTransitionRecord, CraftConfig, SnfConfig, ViConfig,
};

/// Environment variable naming the default root for run outputs.
pub const OUTPUT_ROOT_ENV: &str = "CRAFT_RUNS_DIR";

/// Sampler runs behind one calibration report.
pub const CALIBRATION_RUNS: usize = 50;

/// Append-only CSV sink. The single header line carries the format version,
/// the record kind, and the column names:
///
/// ```text
/// # craft-metrics v1 deploy: k,beta,ess_fraction,...
/// ```
///
/// so an empty stream leaves a header-only file and a 3-record stream has
/// exactly 4 lines. Every row is flushed as soon as it is written, which
/// keeps long runs inspectable while they are still going.
pub struct MetricsWriter {
    out: BufWriter<File>,
    columns: usize,
}

impl MetricsWriter {
    pub fn create(path: &Path, kind: &str, columns: &[&str]) -> Result<Self> {
        let mut out = BufWriter::new(File::create(path)?);
        writeln!(out, "# craft-metrics v1 {kind}: {}", columns.join(","))?;
        out.flush()?;
        Ok(MetricsWriter {
            out,
            columns: columns.len(),
        })
    }

    pub fn row(&mut self, cells: &[String]) -> Result<()> {
        assert_eq!(cells.len(), self.columns, "row width must match the header");
        writeln!(self.out, "{}", cells.join(","))?;
        self.out.flush()?;
        Ok(())
    }
}

/// Shortest decimal that parses back to exactly `x` (`0.05`, `1e-300`,
/// `NaN`); the float form used in every CSV cell.
pub fn csv_f64(x: f64) -> String {
    format!("{x:?}")
}

fn csv_bool(b: bool) -> String {
    (b as u8).to_string()
}

/// Pick the run's output directory: explicit override, then the config's
/// `output_dir`, then `$CRAFT_RUNS_DIR/<config stem>-<seed>`, then
/// `runs/<config stem>-<seed>`.
pub fn resolve_output_dir(
    override_dir: Option<&Path>,
    config: &ExperimentConfig,
    config_path: &Path,
) -> PathBuf {
    if let Some(dir) = override_dir {
        return dir.to_path_buf();
    }
    if let Some(dir) = &config.output_dir {
        return dir.clone();
    }
    let stem = config_path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("experiment");
    let leaf = format!("{stem}-{}", config.seed);
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) => PathBuf::from(root).join(leaf),
        None => PathBuf::from("runs").join(leaf),
    }
}

/// Where a finished run put its artifacts, plus the parsed summary.
#[derive(Debug)]
pub struct RunArtifacts {
    pub output_dir: PathBuf,
    pub metrics_path: PathBuf,
    pub summary_path: PathBuf,
    pub checkpoint_path: Option<PathBuf>,
    pub summary: Value,
}

/// Progress messages go to `log`; nothing in here prints on its own.
/// `base_dir` anchors relative paths named inside the config (data files,
/// checkpoints) and is normally the config file's directory.
pub fn run_experiment(
    config: &ExperimentConfig,
    base_dir: &Path,
    output_dir: &Path,
    mut log: impl FnMut(&str),
) -> Result<RunArtifacts> {
    config.validate()?;
    fs::create_dir_all(output_dir)?;
    let path = config.build_path(base_dir)?;
    let key = RngKey::new(config.seed);
    let metrics_path = output_dir.join("metrics.csv");

    let (payload, checkpoint_path) = match config.mode {
        Mode::Train => run_train(config, &path, key, output_dir, &metrics_path, &mut log)?,
        Mode::Deploy => (
            run_deploy(config, &path, key, base_dir, &metrics_path, false, &mut log)?,
            None,
        ),
        Mode::GoldStandard => (
            run_deploy(config, &path, key, base_dir, &metrics_path, true, &mut log)?,
            None,
        ),
        Mode::Pimh => (
            run_pimh(config, &path, key, base_dir, &metrics_path, &mut log)?,
            None,
        ),
        Mode::Calibrate => (
            run_calibrate(config, &path, key, base_dir, &metrics_path, &mut log)?,
            None,
        ),
    };

    let mut summary = json!({
        "format": "craft-summary",
        "version": 1,
        "mode": config.mode.as_str(),
        "seed": config.seed,
    });
    let doc = summary.as_object_mut().expect("object literal");
    for (k, v) in payload.as_object().expect("payload is an object") {
        doc.insert(k.clone(), v.clone());
    }
    let summary_path = output_dir.join("summary.json");
    fs::write(&summary_path, serde_json::to_string_pretty(&summary)? + "\n")?;

    Ok(RunArtifacts {
        output_dir: output_dir.to_path_buf(),
        metrics_path,
        summary_path,
        checkpoint_path,
        summary,
    })
}

/// Thin progress throttle: first, last, and roughly every tenth step.
fn worth_logging(i: usize, total: usize) -> bool {
    i == 0 || i + 1 == total || (i + 1) % total.div_ceil(10).max(1) == 0
}

/// Flows for a sampling mode: a checkpoint when the config names one,
/// otherwise freshly initialized (identity-behaving) flows.
fn flows_for_sampling(
    config: &ExperimentConfig,
    path: &AnnealedPath,
    key: &RngKey,
    base_dir: &Path,
) -> Result<Vec<Flow>> {
    let Some(ckpt) = &config.flow.checkpoint else {
        return Ok(config.build_flows(path.dim(), key));
    };
    let ckpt_path = if ckpt.is_absolute() {
        ckpt.clone()
    } else {
        base_dir.join(ckpt)
    };
    let flows = load_flows(&ckpt_path)?;
    let mut problems = Vec::new();
    if flows.len() != path.num_transitions() {
        problems.push(format!(
            "checkpoint {} holds {} flows but the schedule has {} transitions",
            ckpt_path.display(),
            flows.len(),
            path.num_transitions()
        ));
    }
    if let Some(f) = flows.iter().find(|f| f.dim() != path.dim()) {
        problems.push(format!(
            "checkpoint {} holds a flow of dimension {} but the target has dimension {}",
            ckpt_path.display(),
            f.dim(),
            path.dim()
        ));
    }
    if problems.is_empty() {
        Ok(flows)
    } else {
        Err(CraftError::InvalidConfig(problems))
    }
}

const TRANSITION_COLUMNS: &[&str] = &[
    "k",
    "beta",
    "ess_fraction",
    "resampled",
    "log_z",
    "acceptance_rate",
    "divergent",
    "max_abs_prescale",
];

fn transition_row(t: &TransitionRecord) -> Vec<String> {
    vec![
        t.k.to_string(),
        csv_f64(t.beta),
        csv_f64(t.ess_fraction),
        csv_bool(t.resampled),
        csv_f64(t.log_z),
        csv_f64(t.acceptance_rate),
        t.divergent.to_string(),
        csv_f64(t.max_abs_prescale),
    ]
}

fn transitions_payload(transitions: &[TransitionRecord]) -> (f64, usize, f64, usize) {
    let min_ess = transitions
        .iter()
        .map(|t| t.ess_fraction)
        .fold(f64::INFINITY, f64::min);
    let resamples = transitions.iter().filter(|t| t.resampled).count();
    let acc: Vec<f64> = transitions
        .iter()
        .map(|t| t.acceptance_rate)
        .filter(|a| !a.is_nan())
        .collect();
    let mean_acceptance = acc.iter().sum::<f64>() / acc.len().max(1) as f64;
    let divergent = transitions.iter().map(|t| t.divergent).sum();
    (min_ess, resamples, mean_acceptance, divergent)
}

fn run_deploy(
    config: &ExperimentConfig,
    path: &AnnealedPath,
    key: RngKey,
    base_dir: &Path,
    metrics_path: &Path,
    gold_standard: bool,
    log: &mut impl FnMut(&str),
) -> Result<Value> {
    let kind = if gold_standard { "gold_standard" } else { "deploy" };
    // The gold standard is the plain annealed sampler: no transport, many
    // transitions, so its answer doesn't depend on any trained object.
    let flows = if gold_standard {
        identity_flows(path)
    } else {
        flows_for_sampling(config, path, &key, base_dir)?
    };
    let n = config.sampler.num_particles;
    let total = path.num_transitions();
    log(&format!(
        "{kind}: {n} particles through {total} transitions (dim {})",
        path.dim()
    ));

    let mut metrics = MetricsWriter::create(metrics_path, kind, TRANSITION_COLUMNS)?;
    let result = deploy_traced(
        path,
        &flows,
        n,
        &config.sampler.resample_config(),
        &config.sampler.hmc_config(),
        key,
        |t| {
            metrics.row(&transition_row(t))?;
            if worth_logging(t.k - 1, total) {
                log(&format!(
                    "  transition {}/{total}: ess {:.3}, log Z {:.6}",
                    t.k, t.ess_fraction, t.log_z
                ));
            }
            Ok(())
        },
    )?;

    let (min_ess, resamples, mean_acceptance, divergent) =
        transitions_payload(&result.transitions);
    log(&format!("{kind} finished: log Z = {:.6}", result.log_z));
    Ok(json!({
        "log_z": result.log_z,
        "num_particles": n,
        "num_transitions": total,
        "min_ess_fraction": min_ess,
        "resample_count": resamples,
        "mean_acceptance": mean_acceptance,
        "divergent": divergent,
    }))
}

/// What a chain watches: the lattice observables for field configurations,
/// first-coordinate moments otherwise.
fn observables_for(kind: TargetKind) -> Vec<Observable> {
    match kind {
        TargetKind::Phi4 => vec![
            Observable::new("two_point_susceptibility", two_point_susceptibility),
            Observable::new("ising_energy_density", ising_energy_density),
            Observable::new("mean_field", mean_field),
        ],
        _ => vec![
            Observable::new("coord0", |x: &[f64]| x[0]),
            Observable::new("coord0_sq", |x: &[f64]| x[0] * x[0]),
        ],
    }
}

fn run_pimh(
    config: &ExperimentConfig,
    path: &AnnealedPath,
    key: RngKey,
    base_dir: &Path,
    metrics_path: &Path,
    log: &mut impl FnMut(&str),
) -> Result<Value> {
    let section = config.pimh.as_ref().expect("validated");
    let flows = flows_for_sampling(config, path, &key, base_dir)?;
    let n = section.proposal_particles.unwrap_or(config.sampler.num_particles);
    let steps = section.num_steps;
    let observables = observables_for(config.target.kind);

    let mut columns: Vec<String> = vec!["step".into(), "accepted".into(), "log_z".into()];
    for obs in &observables {
        columns.push(format!("{}_value", obs.name()));
        columns.push(format!("{}_running_mean", obs.name()));
    }
    let column_refs: Vec<&str> = columns.iter().map(String::as_str).collect();
    let mut metrics = MetricsWriter::create(metrics_path, "pimh", &column_refs)?;

    let resample = config.sampler.resample_config();
    let hmc = config.sampler.hmc_config();
    let mut propose = |proposal_key: RngKey| -> Result<(ParticleEnsemble, f64)> {
        let run = deploy(path, &flows, n, &resample, &hmc, proposal_key)?;
        Ok((run.ensemble, run.log_z))
    };

    log(&format!(
        "pimh: {steps} steps, proposals of {n} particles through {} transitions",
        path.num_transitions()
    ));
    let result = pimh_chain(&mut propose, &observables, steps, None, key, |rec| {
        let mut cells = vec![
            rec.step.to_string(),
            csv_bool(rec.accepted),
            csv_f64(rec.log_z),
        ];
        for (value, mean) in rec.values.iter().zip(&rec.running_means) {
            cells.push(csv_f64(*value));
            cells.push(csv_f64(*mean));
        }
        metrics.row(&cells)?;
        if worth_logging(rec.step, steps) {
            log(&format!(
                "  step {}/{steps}: log Z {:.6}, running means {:?}",
                rec.step + 1,
                rec.log_z,
                rec.running_means
            ));
        }
        Ok(())
    })?;

    log(&format!(
        "pimh finished: acceptance {:.3}, {} proposal retries",
        result.acceptance_rate, result.proposal_failures
    ));
    let per_observable: Vec<Value> = observables
        .iter()
        .enumerate()
        .map(|(i, obs)| {
            json!({
                "name": obs.name(),
                "mean": result.means[i],
                "stderr": result.stderrs[i],
            })
        })
        .collect();
    Ok(json!({
        "num_steps": result.steps,
        "acceptance_rate": result.acceptance_rate,
        "proposal_failures": result.proposal_failures,
        "proposal_particles": n,
        "observables": per_observable,
    }))
}

fn run_calibrate(
    config: &ExperimentConfig,
    path: &AnnealedPath,
    key: RngKey,
    base_dir: &Path,
    metrics_path: &Path,
    log: &mut impl FnMut(&str),
) -> Result<Value> {
    let flows = flows_for_sampling(config, path, &key, base_dir)?;
    let n = config.sampler.num_particles;
    let resample = config.sampler.resample_config();
    let hmc = config.sampler.hmc_config();
    let mut propose = |proposal_key: RngKey| -> Result<(ParticleEnsemble, f64)> {
        let run = deploy(path, &flows, n, &resample, &hmc, proposal_key)?;
        Ok((run.ensemble, run.log_z))
    };

    log(&format!(
        "calibrate: {CALIBRATION_RUNS} independent runs of {n} particles"
    ));
    let mut metrics = MetricsWriter::create(metrics_path, "calibrate", &["run", "log_z"])?;
    let normalizers = independent_normalizers(&mut propose, CALIBRATION_RUNS, key, |run, z| {
        metrics.row(&[run.to_string(), csv_f64(z)])?;
        if worth_logging(run, CALIBRATION_RUNS) {
            log(&format!("  run {}/{CALIBRATION_RUNS}: log Z {z:.6}", run + 1));
        }
        Ok(())
    })?;

    let mean = normalizers.iter().sum::<f64>() / normalizers.len() as f64;
    let var = normalizers.iter().map(|z| (z - mean).powi(2)).sum::<f64>()
        / (normalizers.len() - 1) as f64;
    let std = var.sqrt();
    log(&format!(
        "calibrate finished: log Z std {std:.4} (want about 1 for a well-sized proposal)"
    ));
    Ok(json!({
        "runs": CALIBRATION_RUNS,
        "num_particles": n,
        "log_z_mean": mean,
        "log_z_std": std,
    }))
}

fn run_train(
    config: &ExperimentConfig,
    path: &AnnealedPath,
    key: RngKey,
    output_dir: &Path,
    metrics_path: &Path,
    log: &mut impl FnMut(&str),
) -> Result<(Value, Option<PathBuf>)> {
    let trainer = config.trainer.as_ref().expect("validated");
    let sampler = &config.sampler;
    let dim = path.dim();
    let total = trainer.iterations;
    let checkpoint = output_dir.join("flows.json");
    log(&format!(
        "train ({}): {} iterations, {} particles, {} transitions",
        trainer.algorithm.as_str(),
        total,
        sampler.num_particles,
        path.num_transitions()
    ));

    let payload = match trainer.algorithm {
        Algorithm::Craft => {
            let mut flows = config.build_flows(dim, &key);
            let cfg = CraftConfig {
                num_particles: sampler.num_particles,
                num_passes: total,
                optimizer: trainer.optimizer_config(),
                resample: sampler.resample_config(),
                hmc: sampler.hmc_config(),
                prescale_limit: trainer.prescale_limit,
            };
            let mut columns: Vec<String> = [
                "pass",
                "total_loss",
                "log_z",
                "min_ess_fraction",
                "resample_count",
                "mean_acceptance",
                "divergent",
                "max_abs_prescale",
            ]
            .map(String::from)
            .to_vec();
            for k in 1..=path.num_transitions() {
                columns.push(format!("loss_{k}"));
            }
            for k in 1..=path.num_transitions() {
                columns.push(format!("ess_{k}"));
            }
            let column_refs: Vec<&str> = columns.iter().map(String::as_str).collect();
            let mut metrics = MetricsWriter::create(metrics_path, "train-craft", &column_refs)?;

            let records = train_craft(path, &mut flows, &cfg, key, |rec| {
                let mut cells = vec![
                    rec.pass.to_string(),
                    csv_f64(rec.total_loss),
                    csv_f64(rec.log_z),
                    csv_f64(rec.min_ess_fraction),
                    rec.resample_count.to_string(),
                    csv_f64(rec.mean_acceptance),
                    rec.divergent.to_string(),
                    csv_f64(rec.max_abs_prescale),
                ];
                cells.extend(rec.per_temperature_loss.iter().map(|&x| csv_f64(x)));
                cells.extend(rec.ess_fractions.iter().map(|&x| csv_f64(x)));
                metrics.row(&cells)?;
                if worth_logging(rec.pass, total) {
                    log(&format!(
                        "  pass {}/{total}: loss {:.6}, log Z {:.6}, min ess {:.3}",
                        rec.pass + 1,
                        rec.total_loss,
                        rec.log_z,
                        rec.min_ess_fraction
                    ));
                }
                Ok(())
            })?;
            save_flows(&checkpoint, &flows)?;
            let last = records.last();
            json!({
                "algorithm": "craft",
                "iterations": total,
                "final_total_loss": last.map(|r| r.total_loss),
                "final_log_z": last.map(|r| r.log_z),
                "final_min_ess_fraction": last.map(|r| r.min_ess_fraction),
                "checkpoint": "flows.json",
            })
        }
        Algorithm::Snf => {
            let mut flows = config.build_flows(dim, &key);
            let cfg = SnfConfig {
                num_particles: sampler.num_particles,
                num_passes: total,
                optimizer: trainer.optimizer_config(),
                hmc: sampler.hmc_config(),
                prescale_limit: trainer.prescale_limit,
            };
            let mut metrics = MetricsWriter::create(
                metrics_path,
                "train-snf",
                &["pass", "elbo", "mean_acceptance", "divergent", "max_abs_prescale"],
            )?;
            let records = train_snf(path, &mut flows, &cfg, key, |rec| {
                metrics.row(&[
                    rec.pass.to_string(),
                    csv_f64(rec.elbo),
                    csv_f64(rec.mean_acceptance),
                    rec.divergent.to_string(),
                    csv_f64(rec.max_abs_prescale),
                ])?;
                if worth_logging(rec.pass, total) {
                    log(&format!(
                        "  pass {}/{total}: bound {:.6}, acceptance {:.3}",
                        rec.pass + 1,
                        rec.elbo,
                        rec.mean_acceptance
                    ));
                }
                Ok(())
            })?;
            save_flows(&checkpoint, &flows)?;
            json!({
                "algorithm": "snf",
                "iterations": total,
                "final_elbo": records.last().map(|r| r.elbo),
                "checkpoint": "flows.json",
            })
        }
        Algorithm::Vi => {
            let mut flow = config.build_single_flow(dim, &key);
            let cfg = ViConfig {
                num_samples: sampler.num_particles,
                num_iterations: total,
                optimizer: trainer.optimizer_config(),
                prescale_limit: trainer.prescale_limit,
            };
            let mut metrics = MetricsWriter::create(
                metrics_path,
                "train-vi",
                &["iteration", "objective", "max_abs_prescale"],
            )?;
            let records = train_vi(path, &mut flow, &cfg, key, |rec| {
                metrics.row(&[
                    rec.iteration.to_string(),
                    csv_f64(rec.objective),
                    csv_f64(rec.max_abs_prescale),
                ])?;
                if worth_logging(rec.iteration, total) {
                    log(&format!(
                        "  iteration {}/{total}: objective {:.6}",
                        rec.iteration + 1,
                        rec.objective
                    ));
                }
                Ok(())
            })?;
            save_flows(&checkpoint, std::slice::from_ref(&flow))?;
            json!({
                "algorithm": "vi",
                "iterations": total,
                "final_objective": records.last().map(|r| r.objective),
                "checkpoint": "flows.json",
            })
        }
        Algorithm::AftSimple | Algorithm::AftPractical => {
            let mut flows = config.build_flows(dim, &key);
            let cfg = AftConfig {
                num_particles: sampler.num_particles,
                iterations_per_transition: total,
                optimizer: trainer.optimizer_config(),
                resample: sampler.resample_config(),
                hmc: sampler.hmc_config(),
                prescale_limit: trainer.prescale_limit,
            };
            let practical = trainer.algorithm == Algorithm::AftPractical;
            let kind = if practical {
                "train-aft_practical"
            } else {
                "train-aft_simple"
            };
            let mut metrics = MetricsWriter::create(
                metrics_path,
                kind,
                &["k", "iteration", "train_loss", "heldout_loss"],
            )?;
            let num_transitions = path.num_transitions();
            let mut selected: Vec<Option<usize>> = Vec::with_capacity(num_transitions);
            let mut on_transition = |rec: &AftTransitionRecord| -> Result<()> {
                for (t, (train, heldout)) in
                    rec.train_losses.iter().zip(&rec.heldout_losses).enumerate()
                {
                    metrics.row(&[
                        rec.k.to_string(),
                        t.to_string(),
                        csv_f64(*train),
                        csv_f64(*heldout),
                    ])?;
                }
                selected.push(rec.selected_iteration);
                log(&format!(
                    "  temperature {}/{num_transitions}: train loss {:.6}, held-out {:.6}{}",
                    rec.k,
                    rec.train_losses.last().copied().unwrap_or(f64::NAN),
                    rec.heldout_losses.last().copied().unwrap_or(f64::NAN),
                    match rec.selected_iteration {
                        Some(t) => format!(", kept iterate {t}"),
                        None => String::new(),
                    }
                ));
                Ok(())
            };
            let payload = if practical {
                let out = train_aft_practical(path, &mut flows, &cfg, key, &mut on_transition)?;
                json!({
                    "algorithm": "aft_practical",
                    "iterations": total,
                    "train_log_z": out.train_log_z,
                    "validation_log_z": out.validation_log_z,
                    "test_log_z": out.test_log_z,
                    "selected_iterations": selected,
                    "checkpoint": "flows.json",
                })
            } else {
                let out = train_aft_simple(path, &mut flows, &cfg, key, &mut on_transition)?;
                json!({
                    "algorithm": "aft_simple",
                    "iterations": total,
                    "train_log_z": out.train_log_z,
                    "heldout_log_z": out.heldout_log_z,
                    "checkpoint": "flows.json",
                })
            };
            save_flows(&checkpoint, &flows)?;
            payload
        }
        Algorithm::None => {
            // Initialize and checkpoint without optimizing: gives deploy and
            // pimh configs something to load, and exercises the empty metric
            // stream (the file stays header-only).
            let flows = config.build_flows(dim, &key);
            MetricsWriter::create(metrics_path, "train-none", &["pass", "total_loss"])?;
            save_flows(&checkpoint, &flows)?;
            json!({
                "algorithm": "none",
                "iterations": 0,
                "checkpoint": "flows.json",
            })
        }
    };

    log(&format!("checkpoint written to {}", checkpoint.display()));
    Ok((payload, Some(checkpoint)))
}
