//! TOML experiment descriptions.
//!
//! A config file picks a target, an annealing schedule, a flow family, and a
//! run mode; [`ExperimentConfig::validate`] collects *every* problem it can
//! find rather than stopping at the first, so a bad file is fixed in one
//! round trip.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::Deserialize;

use crate::ensemble::ResampleConfig;
use crate::error::{CraftError, Result};
use crate::flows::Flow;
use crate::mcmc::HmcConfig;
use crate::rng::{labels, RngKey};
use crate::targets::{
    uniform_schedule, AnnealedPath, Density, Gaussian, GaussianMixture, LgcpGrid, Phi4,
};
use crate::training::OptimizerConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Deploy,
    Pimh,
    GoldStandard,
    Calibrate,
}

impl Mode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::Train => "train",
            Mode::Deploy => "deploy",
            Mode::Pimh => "pimh",
            Mode::GoldStandard => "gold_standard",
            Mode::Calibrate => "calibrate",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = CraftError;

    fn from_str(s: &str) -> Result<Mode> {
        match s {
            "train" => Ok(Mode::Train),
            "deploy" => Ok(Mode::Deploy),
            "pimh" => Ok(Mode::Pimh),
            "gold_standard" => Ok(Mode::GoldStandard),
            "calibrate" => Ok(Mode::Calibrate),
            other => Err(CraftError::InvalidConfig(vec![format!(
                "unknown mode {other:?}; expected one of train, deploy, pimh, gold_standard, calibrate"
            )])),
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetKind {
    Gaussian,
    GaussianMixture,
    Phi4,
    Lgcp,
}

impl TargetKind {
    fn as_str(&self) -> &'static str {
        match self {
            TargetKind::Gaussian => "gaussian",
            TargetKind::GaussianMixture => "gaussian_mixture",
            TargetKind::Phi4 => "phi4",
            TargetKind::Lgcp => "lgcp",
        }
    }
}

/// `[target]` section: a kind plus the keys that kind needs. Keys belonging
/// to a different kind are rejected during validation so typos surface
/// instead of silently doing nothing.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetConfig {
    pub kind: TargetKind,
    // gaussian
    pub dim: Option<usize>,
    pub mean: Option<Vec<f64>>,
    pub variance: Option<Vec<f64>>,
    pub log_scale: Option<f64>,
    // gaussian_mixture
    pub weights: Option<Vec<f64>>,
    pub means: Option<Vec<Vec<f64>>>,
    pub variances: Option<Vec<Vec<f64>>>,
    // phi4
    pub lattice_side: Option<usize>,
    pub lambda: Option<f64>,
    pub m2: Option<f64>,
    // lgcp
    pub grid_side: Option<usize>,
    pub counts_csv: Option<PathBuf>,
    pub kernel_variance: Option<f64>,
    pub kernel_lengthscale: Option<f64>,
    pub mean_offset: Option<f64>,
}

impl TargetConfig {
    /// (field name, set?) for every kind-specific key.
    fn field_presence(&self) -> Vec<(&'static str, bool)> {
        vec![
            ("dim", self.dim.is_some()),
            ("mean", self.mean.is_some()),
            ("variance", self.variance.is_some()),
            ("log_scale", self.log_scale.is_some()),
            ("weights", self.weights.is_some()),
            ("means", self.means.is_some()),
            ("variances", self.variances.is_some()),
            ("lattice_side", self.lattice_side.is_some()),
            ("lambda", self.lambda.is_some()),
            ("m2", self.m2.is_some()),
            ("grid_side", self.grid_side.is_some()),
            ("counts_csv", self.counts_csv.is_some()),
            ("kernel_variance", self.kernel_variance.is_some()),
            ("kernel_lengthscale", self.kernel_lengthscale.is_some()),
            ("mean_offset", self.mean_offset.is_some()),
        ]
    }

    fn allowed_fields(&self) -> &'static [&'static str] {
        match self.kind {
            TargetKind::Gaussian => &["dim", "mean", "variance", "log_scale"],
            TargetKind::GaussianMixture => &["dim", "weights", "means", "variances"],
            TargetKind::Phi4 => &["lattice_side", "lambda", "m2"],
            TargetKind::Lgcp => &[
                "grid_side",
                "counts_csv",
                "kernel_variance",
                "kernel_lengthscale",
                "mean_offset",
            ],
        }
    }

    /// Problem dimension, when the config pins it down. Mixture dimension
    /// comes from the first component mean.
    pub fn dim(&self) -> Option<usize> {
        match self.kind {
            TargetKind::Gaussian => self.dim,
            TargetKind::GaussianMixture => self.means.as_ref().and_then(|m| m.first()).map(Vec::len),
            TargetKind::Phi4 => self.lattice_side.map(|l| l * l),
            TargetKind::Lgcp => self.grid_side.map(|m| m * m),
        }
    }

    /// Side length when the target lives on a square lattice.
    pub fn lattice_side(&self) -> Option<usize> {
        match self.kind {
            TargetKind::Phi4 => self.lattice_side,
            TargetKind::Lgcp => self.grid_side,
            _ => None,
        }
    }

    fn collect_problems(&self, problems: &mut Vec<String>) {
        let allowed = self.allowed_fields();
        for (name, set) in self.field_presence() {
            if set && !allowed.contains(&name) {
                problems.push(format!(
                    "target.{name} does not apply to target kind {:?}",
                    self.kind.as_str()
                ));
            }
        }
        let req = |problems: &mut Vec<String>, set: bool, name: &str| {
            if !set {
                problems.push(format!(
                    "target.{name} is required for target kind {:?}",
                    self.kind.as_str()
                ));
            }
        };
        match self.kind {
            TargetKind::Gaussian => {
                req(problems, self.dim.is_some(), "dim");
                if let Some(dim) = self.dim {
                    if dim == 0 {
                        problems.push("target.dim must be at least 1".into());
                    }
                    for (name, vals) in [("mean", &self.mean), ("variance", &self.variance)] {
                        if let Some(v) = vals {
                            if v.len() != 1 && v.len() != dim {
                                problems.push(format!(
                                    "target.{name} must have length 1 or {dim}, got {}",
                                    v.len()
                                ));
                            }
                        }
                    }
                }
                if let Some(v) = &self.variance {
                    if v.iter().any(|&x| !(x > 0.0) || !x.is_finite()) {
                        problems.push("target.variance entries must be positive and finite".into());
                    }
                }
                if let Some(ls) = self.log_scale {
                    if !ls.is_finite() {
                        problems.push("target.log_scale must be finite".into());
                    }
                }
            }
            TargetKind::GaussianMixture => {
                req(problems, self.weights.is_some(), "weights");
                req(problems, self.means.is_some(), "means");
                req(problems, self.variances.is_some(), "variances");
                if let (Some(w), Some(m), Some(v)) = (&self.weights, &self.means, &self.variances) {
                    if w.is_empty() {
                        problems.push("target.weights must not be empty".into());
                    }
                    if m.len() != w.len() || v.len() != w.len() {
                        problems.push(format!(
                            "target mixture component counts disagree: {} weights, {} means, {} variances",
                            w.len(),
                            m.len(),
                            v.len()
                        ));
                    }
                    if w.iter().any(|&x| !(x > 0.0) || !x.is_finite()) {
                        problems.push("target.weights entries must be positive and finite".into());
                    }
                    let dim = self.dim.or_else(|| m.first().map(Vec::len));
                    if let Some(dim) = dim {
                        if m.iter().any(|c| c.len() != dim) || v.iter().any(|c| c.len() != dim) {
                            problems.push(format!(
                                "target mixture components must all have dimension {dim}"
                            ));
                        }
                    }
                    if v.iter().flatten().any(|&x| !(x > 0.0) || !x.is_finite()) {
                        problems
                            .push("target.variances entries must be positive and finite".into());
                    }
                }
            }
            TargetKind::Phi4 => {
                req(problems, self.lattice_side.is_some(), "lattice_side");
                req(problems, self.lambda.is_some(), "lambda");
                req(problems, self.m2.is_some(), "m2");
                if let Some(l) = self.lattice_side {
                    if l < 2 {
                        problems.push("target.lattice_side must be at least 2".into());
                    }
                }
                if let Some(lambda) = self.lambda {
                    if !(lambda >= 0.0) || !lambda.is_finite() {
                        problems.push("target.lambda must be nonnegative and finite".into());
                    }
                }
                if let Some(m2) = self.m2 {
                    if !m2.is_finite() {
                        problems.push("target.m2 must be finite".into());
                    }
                }
            }
            TargetKind::Lgcp => {
                req(problems, self.grid_side.is_some(), "grid_side");
                req(problems, self.counts_csv.is_some(), "counts_csv");
                req(problems, self.kernel_variance.is_some(), "kernel_variance");
                req(
                    problems,
                    self.kernel_lengthscale.is_some(),
                    "kernel_lengthscale",
                );
                req(problems, self.mean_offset.is_some(), "mean_offset");
                if let Some(m) = self.grid_side {
                    if m < 2 {
                        problems.push("target.grid_side must be at least 2".into());
                    }
                }
                for (name, val) in [
                    ("kernel_variance", self.kernel_variance),
                    ("kernel_lengthscale", self.kernel_lengthscale),
                ] {
                    if let Some(x) = val {
                        if !(x > 0.0) || !x.is_finite() {
                            problems
                                .push(format!("target.{name} must be positive and finite"));
                        }
                    }
                }
                if let Some(x) = self.mean_offset {
                    if !x.is_finite() {
                        problems.push("target.mean_offset must be finite".into());
                    }
                }
            }
        }
    }
}

/// `[schedule]` section.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub num_transitions: usize,
    /// Explicit temperatures (length `num_transitions + 1`, from 0 to 1);
    /// omitted means uniform spacing.
    pub betas: Option<Vec<f64>>,
}

impl ScheduleConfig {
    fn collect_problems(&self, problems: &mut Vec<String>) {
        if self.num_transitions == 0 {
            problems.push("schedule.num_transitions must be at least 1".into());
        }
        if let Some(betas) = &self.betas {
            if betas.len() != self.num_transitions + 1 {
                problems.push(format!(
                    "schedule.betas must have num_transitions + 1 = {} entries, got {}",
                    self.num_transitions + 1,
                    betas.len()
                ));
            }
            if betas.first() != Some(&0.0) {
                problems.push("schedule.betas must start at 0".into());
            }
            if betas.last() != Some(&1.0) {
                problems.push("schedule.betas must end at 1".into());
            }
            if betas.iter().any(|b| !b.is_finite()) {
                problems.push("schedule.betas entries must be finite".into());
            }
            if !betas.windows(2).all(|w| w[0] <= w[1]) {
                problems.push("schedule.betas must be nondecreasing".into());
            }
        }
    }

    pub fn betas(&self) -> Vec<f64> {
        self.betas
            .clone()
            .unwrap_or_else(|| uniform_schedule(self.num_transitions))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlowFamily {
    Identity,
    DiagAffine,
    Coupling,
    ConvCoupling,
}

/// `[flow]` section. The whole section may be omitted, which means identity
/// flows (plain annealed SMC).
fn default_family() -> FlowFamily {
    FlowFamily::Identity
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowConfig {
    #[serde(default = "default_family")]
    pub family: FlowFamily,
    /// Coupling layers composed per transition, alternating checkerboard /
    /// half-split parity. Only meaningful for the coupling families.
    pub layers_per_transition: Option<usize>,
    /// Conditioner hidden width (dense coupling).
    pub hidden_width: Option<usize>,
    /// Conditioner channels and kernel size (convolutional coupling).
    pub hidden_channels: Option<usize>,
    pub kernel_size: Option<usize>,
    /// Load trained flows from this checkpoint instead of initializing
    /// fresh ones (deploy and pimh modes).
    pub checkpoint: Option<PathBuf>,
}

impl Default for FlowConfig {
    fn default() -> Self {
        FlowConfig {
            family: FlowFamily::Identity,
            layers_per_transition: None,
            hidden_width: None,
            hidden_channels: None,
            kernel_size: None,
            checkpoint: None,
        }
    }
}

impl FlowConfig {
    fn layers(&self) -> usize {
        self.layers_per_transition.unwrap_or(1)
    }

    fn collect_problems(&self, target: &TargetConfig, problems: &mut Vec<String>) {
        let coupling_family = matches!(self.family, FlowFamily::Coupling | FlowFamily::ConvCoupling);
        if let Some(layers) = self.layers_per_transition {
            if layers == 0 {
                problems.push("flow.layers_per_transition must be at least 1".into());
            }
            if layers > 1 && !coupling_family {
                problems.push(
                    "flow.layers_per_transition only applies to the coupling families".into(),
                );
            }
        }
        match self.family {
            FlowFamily::Identity | FlowFamily::DiagAffine => {
                for (name, set) in [
                    ("hidden_width", self.hidden_width.is_some()),
                    ("hidden_channels", self.hidden_channels.is_some()),
                    ("kernel_size", self.kernel_size.is_some()),
                ] {
                    if set {
                        problems.push(format!(
                            "flow.{name} does not apply to this flow family"
                        ));
                    }
                }
            }
            FlowFamily::Coupling => {
                if self.hidden_width.is_none() {
                    problems.push("flow.hidden_width is required for coupling flows".into());
                }
                for (name, set) in [
                    ("hidden_channels", self.hidden_channels.is_some()),
                    ("kernel_size", self.kernel_size.is_some()),
                ] {
                    if set {
                        problems.push(format!(
                            "flow.{name} does not apply to dense coupling flows"
                        ));
                    }
                }
                if let Some(dim) = target.dim() {
                    if dim < 2 {
                        problems.push("flow coupling needs a target with dim >= 2".into());
                    }
                }
            }
            FlowFamily::ConvCoupling => {
                if self.hidden_channels.is_none() {
                    problems
                        .push("flow.hidden_channels is required for conv coupling flows".into());
                }
                match self.kernel_size {
                    None => problems
                        .push("flow.kernel_size is required for conv coupling flows".into()),
                    Some(k) if k % 2 == 0 || k == 0 => {
                        problems.push("flow.kernel_size must be odd".into())
                    }
                    _ => {}
                }
                if self.hidden_width.is_some() {
                    problems.push("flow.hidden_width does not apply to conv coupling flows".into());
                }
                if target.lattice_side().is_none() {
                    problems.push(format!(
                        "flow conv_coupling needs a square-lattice target, not {:?}",
                        target.kind.as_str()
                    ));
                }
            }
        }
    }
}

fn default_particles() -> usize {
    256
}
fn default_threshold() -> f64 {
    0.3
}
fn default_hmc_steps() -> usize {
    1
}
fn default_leapfrog() -> usize {
    10
}
fn default_points() -> Vec<f64> {
    vec![0.0, 1.0]
}
fn default_values() -> Vec<f64> {
    vec![0.2, 0.2]
}

/// `[sampler]` section: particle count, resampling, and the HMC kernel.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    #[serde(default = "default_particles")]
    pub num_particles: usize,
    /// Resample when ESS drops to this fraction of the particle count.
    #[serde(default = "default_threshold")]
    pub resample_threshold: f64,
    /// HMC steps applied after each transition.
    #[serde(default = "default_hmc_steps")]
    pub hmc_steps: usize,
    #[serde(default = "default_leapfrog")]
    pub leapfrog_steps: usize,
    /// Piecewise-linear step size over temperature: knots and values.
    #[serde(default = "default_points")]
    pub step_size_points: Vec<f64>,
    #[serde(default = "default_values")]
    pub step_size_values: Vec<f64>,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            num_particles: default_particles(),
            resample_threshold: default_threshold(),
            hmc_steps: default_hmc_steps(),
            leapfrog_steps: default_leapfrog(),
            step_size_points: default_points(),
            step_size_values: default_values(),
        }
    }
}

impl SamplerConfig {
    fn collect_problems(&self, problems: &mut Vec<String>) {
        if self.num_particles < 2 {
            problems.push("sampler.num_particles must be at least 2".into());
        }
        let lo = 1.0 / self.num_particles.max(1) as f64;
        if !(self.resample_threshold >= lo && self.resample_threshold < 1.0) {
            problems.push(format!(
                "sampler.resample_threshold must lie in [1/num_particles, 1) = [{lo}, 1), got {}",
                self.resample_threshold
            ));
        }
        let mut hmc_problems = Vec::new();
        self.hmc_config().collect_problems(&mut hmc_problems);
        problems.extend(hmc_problems.into_iter().map(|p| format!("sampler.{p}")));
    }

    pub fn hmc_config(&self) -> HmcConfig {
        HmcConfig {
            leapfrog_steps: self.leapfrog_steps,
            steps_per_transition: self.hmc_steps,
            step_size_points: self.step_size_points.clone(),
            step_size_values: self.step_size_values.clone(),
        }
    }

    pub fn resample_config(&self) -> ResampleConfig {
        ResampleConfig {
            threshold_fraction: self.resample_threshold,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Craft,
    AftSimple,
    AftPractical,
    Snf,
    Vi,
    /// Initialize and checkpoint flows without optimizing them.
    None,
}

impl Algorithm {
    pub fn as_str(&self) -> &'static str {
        match self {
            Algorithm::Craft => "craft",
            Algorithm::AftSimple => "aft_simple",
            Algorithm::AftPractical => "aft_practical",
            Algorithm::Snf => "snf",
            Algorithm::Vi => "vi",
            Algorithm::None => "none",
        }
    }
}

fn default_prescale_limit() -> f64 {
    20.0
}

/// `[trainer]` section; required in train mode.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainerConfig {
    pub algorithm: Algorithm,
    /// Optimization passes (per temperature for the annealed-transport
    /// trainers that fit one flow at a time).
    pub iterations: usize,
    pub learning_rate: f64,
    /// Later `[iteration, rate]` pairs; the rate switches when the iteration
    /// counter reaches each entry.
    pub lr_drops: Option<Vec<(usize, f64)>>,
    /// Abort when a conditioner pre-scale output exceeds this magnitude.
    #[serde(default = "default_prescale_limit")]
    pub prescale_limit: f64,
}

impl TrainerConfig {
    fn collect_problems(&self, problems: &mut Vec<String>) {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            problems.push("trainer.learning_rate must be positive and finite".into());
        }
        if let Some(drops) = &self.lr_drops {
            if drops.iter().any(|&(_, r)| !(r > 0.0) || !r.is_finite()) {
                problems.push("trainer.lr_drops rates must be positive and finite".into());
            }
            let mut last = 0usize;
            for &(it, _) in drops {
                if it <= last {
                    problems.push(
                        "trainer.lr_drops iterations must be strictly increasing and positive"
                            .into(),
                    );
                    break;
                }
                last = it;
            }
        }
        if !(self.prescale_limit > 0.0) {
            problems.push("trainer.prescale_limit must be positive".into());
        }
    }

    pub fn optimizer_config(&self) -> OptimizerConfig {
        let mut schedule = vec![(0, self.learning_rate)];
        if let Some(drops) = &self.lr_drops {
            schedule.extend(drops.iter().copied());
        }
        OptimizerConfig::with_schedule(schedule)
    }
}

/// `[pimh]` section; required in pimh mode.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PimhSection {
    pub num_steps: usize,
    /// Particles per proposal run; defaults to sampler.num_particles.
    pub proposal_particles: Option<usize>,
}

impl PimhSection {
    fn collect_problems(&self, problems: &mut Vec<String>) {
        if self.num_steps == 0 {
            problems.push("pimh.num_steps must be at least 1".into());
        }
        if let Some(n) = self.proposal_particles {
            if n < 2 {
                problems.push("pimh.proposal_particles must be at least 2".into());
            }
        }
    }
}

/// `[desk_scale]` overlay: shrunken problem sizes for quick runs of a
/// full-scale config. Nothing applies it implicitly — callers opt in via
/// [`ExperimentConfig::desk_scaled`] (the CLI's `--desk-scale`).
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeskScale {
    /// Gaussian targets only.
    pub dim: Option<usize>,
    /// Square-lattice field targets only.
    pub lattice_side: Option<usize>,
    pub num_transitions: Option<usize>,
    pub num_particles: Option<usize>,
    pub iterations: Option<usize>,
    pub num_steps: Option<usize>,
    pub proposal_particles: Option<usize>,
}

impl DeskScale {
    /// Applicability problems against the sections the overlay would touch.
    fn collect_problems(&self, config: &ExperimentConfig, problems: &mut Vec<String>) {
        if self.dim.is_some() && config.target.kind != TargetKind::Gaussian {
            problems.push("desk_scale.dim applies only to gaussian targets".into());
        }
        if self.lattice_side.is_some() && config.target.lattice_side().is_none() {
            problems.push("desk_scale.lattice_side needs a square-lattice target".into());
        }
        if self.num_transitions.is_some() && config.schedule.betas.is_some() {
            problems
                .push("desk_scale.num_transitions cannot rescale an explicit beta list".into());
        }
        if self.iterations.is_some() && config.trainer.is_none() {
            problems.push("desk_scale.iterations needs a [trainer] section".into());
        }
        if (self.num_steps.is_some() || self.proposal_particles.is_some())
            && config.pimh.is_none()
        {
            problems.push("desk_scale num_steps/proposal_particles need a [pimh] section".into());
        }
    }
}

/// A whole experiment: target, schedule, flows, sampler, and what to do with
/// them. `(config, seed)` fully determines every artifact a run writes.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub mode: Mode,
    /// Root seed; there is no wall-clock fallback.
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
    pub target: TargetConfig,
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub flow: FlowConfig,
    #[serde(default)]
    pub sampler: SamplerConfig,
    pub trainer: Option<TrainerConfig>,
    pub pimh: Option<PimhSection>,
    pub desk_scale: Option<DeskScale>,
}

/// Parse TOML text into a validated config.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let config: ExperimentConfig = toml::from_str(text)
        .map_err(|e| CraftError::InvalidConfig(vec![format!("toml parse error: {e}")]))?;
    config.validate()?;
    Ok(config)
}

/// Read and validate a config file.
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)?;
    parse_config(&text)
}

impl ExperimentConfig {
    /// Check everything checkable without touching the filesystem; returns
    /// all problems found, not just the first.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        self.target.collect_problems(&mut problems);
        self.schedule.collect_problems(&mut problems);
        self.flow.collect_problems(&self.target, &mut problems);
        self.sampler.collect_problems(&mut problems);
        if let Some(trainer) = &self.trainer {
            trainer.collect_problems(&mut problems);
        }
        if let Some(pimh) = &self.pimh {
            pimh.collect_problems(&mut problems);
        }
        if let Some(desk) = &self.desk_scale {
            desk.collect_problems(self, &mut problems);
        }
        match self.mode {
            Mode::Train => {
                if self.trainer.is_none() {
                    problems.push("train mode needs a [trainer] section".into());
                }
            }
            Mode::Pimh => {
                if self.pimh.is_none() {
                    problems.push("pimh mode needs a [pimh] section".into());
                }
            }
            Mode::Deploy | Mode::GoldStandard | Mode::Calibrate => {}
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(CraftError::InvalidConfig(problems))
        }
    }

    /// The config with its `[desk_scale]` overlay applied (a no-op when
    /// there is none). The result is re-validated, so a shrunken problem
    /// that breaks some constraint is caught here.
    pub fn desk_scaled(&self) -> Result<ExperimentConfig> {
        let Some(desk) = &self.desk_scale else {
            return Ok(self.clone());
        };
        let mut problems = Vec::new();
        desk.collect_problems(self, &mut problems);
        if !problems.is_empty() {
            return Err(CraftError::InvalidConfig(problems));
        }
        let mut config = self.clone();
        if let Some(dim) = desk.dim {
            config.target.dim = Some(dim);
        }
        if let Some(side) = desk.lattice_side {
            match config.target.kind {
                TargetKind::Phi4 => config.target.lattice_side = Some(side),
                TargetKind::Lgcp => config.target.grid_side = Some(side),
                _ => unreachable!("checked above"),
            }
        }
        if let Some(k) = desk.num_transitions {
            config.schedule.num_transitions = k;
        }
        if let Some(n) = desk.num_particles {
            config.sampler.num_particles = n;
        }
        if let Some(j) = desk.iterations {
            config.trainer.as_mut().expect("checked above").iterations = j;
        }
        if let Some(s) = desk.num_steps {
            config.pimh.as_mut().expect("checked above").num_steps = s;
        }
        if let Some(n) = desk.proposal_particles {
            config.pimh.as_mut().expect("checked above").proposal_particles = Some(n);
        }
        config.desk_scale = None;
        config.validate()?;
        Ok(config)
    }

    /// Build the target density. `base_dir` anchors relative data paths
    /// (normally the config file's directory).
    pub fn build_target(&self, base_dir: &Path) -> Result<Arc<dyn Density>> {
        match self.target.kind {
            TargetKind::Gaussian => {
                let dim = self.target.dim.expect("validated");
                let broadcast = |vals: &Option<Vec<f64>>, fill: f64| -> Vec<f64> {
                    match vals {
                        None => vec![fill; dim],
                        Some(v) if v.len() == 1 => vec![v[0]; dim],
                        Some(v) => v.clone(),
                    }
                };
                let mean = broadcast(&self.target.mean, 0.0);
                let variance = broadcast(&self.target.variance, 1.0);
                let mut g = Gaussian::diagonal(mean, variance)?;
                if let Some(ls) = self.target.log_scale {
                    g = g.with_log_scale(ls);
                }
                Ok(Arc::new(g))
            }
            TargetKind::GaussianMixture => {
                let weights = self.target.weights.clone().expect("validated");
                let means = self.target.means.clone().expect("validated");
                let variances = self.target.variances.clone().expect("validated");
                let components = means
                    .into_iter()
                    .zip(variances)
                    .map(|(m, v)| Gaussian::diagonal(m, v))
                    .collect::<Result<Vec<_>>>()?;
                Ok(Arc::new(GaussianMixture::new(weights, components)?))
            }
            TargetKind::Phi4 => {
                let l = self.target.lattice_side.expect("validated");
                let lambda = self.target.lambda.expect("validated");
                let m2 = self.target.m2.expect("validated");
                Ok(Arc::new(Phi4::new(l, lambda, m2)))
            }
            TargetKind::Lgcp => {
                let m = self.target.grid_side.expect("validated");
                let csv = self.target.counts_csv.as_ref().expect("validated");
                let csv_path = if csv.is_absolute() {
                    csv.clone()
                } else {
                    base_dir.join(csv)
                };
                let counts = load_counts_csv(&csv_path)?;
                Ok(Arc::new(LgcpGrid::new(
                    m,
                    counts,
                    self.target.kernel_variance.expect("validated"),
                    self.target.kernel_lengthscale.expect("validated"),
                    self.target.mean_offset.expect("validated"),
                )?))
            }
        }
    }

    pub fn build_path(&self, base_dir: &Path) -> Result<AnnealedPath> {
        AnnealedPath::new(self.build_target(base_dir)?, self.schedule.betas())
    }

    /// One flow for transition `k`: a single layer, or a composite of
    /// `layers_per_transition` layers with alternating parity.
    fn build_transition_flow(&self, dim: usize, k: usize, key: &RngKey) -> Flow {
        let layers = self.flow.layers();
        let layer = |j: usize| -> Flow {
            let layer_key = key
                .child(labels::PARAM_INIT)
                .child(k as u64)
                .child(j as u64);
            let parity = (j % 2) as u8;
            match self.flow.family {
                FlowFamily::Identity => Flow::identity(dim),
                FlowFamily::DiagAffine => Flow::diag_affine(dim),
                FlowFamily::Coupling => Flow::coupling(
                    dim,
                    parity,
                    self.flow.hidden_width.expect("validated"),
                    layer_key,
                ),
                FlowFamily::ConvCoupling => Flow::conv_coupling(
                    self.target.lattice_side().expect("validated"),
                    parity,
                    self.flow.hidden_channels.expect("validated"),
                    self.flow.kernel_size.expect("validated"),
                    layer_key,
                ),
            }
        };
        if layers == 1 {
            layer(0)
        } else {
            Flow::composite((0..layers).map(layer).collect())
        }
    }

    /// Freshly initialized flows, one per transition.
    pub fn build_flows(&self, dim: usize, key: &RngKey) -> Vec<Flow> {
        (0..self.schedule.num_transitions)
            .map(|k| self.build_transition_flow(dim, k, key))
            .collect()
    }

    /// A single flow for variational fitting (transition index 0).
    pub fn build_single_flow(&self, dim: usize, key: &RngKey) -> Flow {
        self.build_transition_flow(dim, 0, key)
    }
}

/// Read an M x M grid of counts: one row per line, comma-separated numbers.
pub fn load_counts_csv(path: &Path) -> Result<Vec<f64>> {
    let text = std::fs::read_to_string(path)?;
    let mut counts = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        for cell in line.split(',') {
            let cell = cell.trim();
            counts.push(cell.parse::<f64>().map_err(|_| {
                CraftError::InvalidConfig(vec![format!(
                    "{}:{}: cannot parse {cell:?} as a count",
                    path.display(),
                    lineno + 1
                )])
            })?);
        }
    }
    Ok(counts)
}
