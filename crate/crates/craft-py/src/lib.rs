//! Python bindings for the annealed-transport samplers.
//!
//! The module mirrors the command-line surface — load a TOML experiment
//! config, validate it, run it to deterministic artifacts — and exposes the
//! lattice target with its observables plus the log-space weight utilities,
//! so Python-side analysis can cross-check the Rust numerics directly.

use std::path::{Path, PathBuf};

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use craft_core::ensemble;
use craft_core::error::CraftError;
use craft_core::experiment::{load_config, run_experiment, ExperimentConfig, Mode};
use craft_core::targets::{
    ising_energy_density, mean_field, two_point_susceptibility, Density, Phi4,
};

fn to_py_err(err: CraftError) -> PyErr {
    match err {
        CraftError::InvalidConfig(problems) => {
            PyValueError::new_err(format!("invalid config: {}", problems.join("; ")))
        }
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

/// One experiment description, loaded from a TOML file.
#[pyclass(module = "craft_mc")]
struct Experiment {
    config: ExperimentConfig,
    base_dir: PathBuf,
    path: PathBuf,
}

#[pymethods]
impl Experiment {
    #[new]
    fn new(config_path: &str) -> PyResult<Self> {
        let path = Path::new(config_path).to_path_buf();
        let config = load_config(&path).map_err(to_py_err)?;
        let base_dir = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        Ok(Experiment {
            config,
            base_dir,
            path,
        })
    }

    /// Mode, seed, and annealing length, for quick inspection.
    fn describe(&self) -> (String, u64, usize) {
        (
            self.config.mode.as_str().to_string(),
            self.config.seed,
            self.config.schedule.num_transitions,
        )
    }

    /// Applies the config's desk-scale overlay, in place.
    fn apply_desk_scale(&mut self) -> PyResult<()> {
        self.config = self.config.desk_scaled().map_err(to_py_err)?;
        Ok(())
    }

    #[pyo3(signature = (seed=None, mode=None))]
    fn override_run(&mut self, seed: Option<u64>, mode: Option<&str>) -> PyResult<()> {
        if let Some(seed) = seed {
            self.config.seed = seed;
        }
        if let Some(mode) = mode {
            self.config.mode = mode.parse::<Mode>().map_err(to_py_err)?;
            self.config.validate().map_err(to_py_err)?;
        }
        Ok(())
    }

    /// Runs the experiment, writing metrics.csv and summary.json under
    /// `output_dir`, and returns the summary as a JSON string.
    fn run(&self, output_dir: &str) -> PyResult<String> {
        let artifacts = run_experiment(&self.config, &self.base_dir, Path::new(output_dir), |_| {})
            .map_err(to_py_err)?;
        serde_json::to_string(&artifacts.summary)
            .map_err(|e| PyRuntimeError::new_err(e.to_string()))
    }

    fn __repr__(&self) -> String {
        format!(
            "Experiment(path={:?}, mode={}, seed={})",
            self.path,
            self.config.mode.as_str(),
            self.config.seed
        )
    }
}

/// Periodic two-dimensional scalar field theory on an L x L lattice.
#[pyclass(module = "craft_mc")]
struct Phi4Lattice {
    inner: Phi4,
    side: usize,
}

#[pymethods]
impl Phi4Lattice {
    #[new]
    fn new(lattice_side: usize, lambda: f64, m2: f64) -> PyResult<Self> {
        if lattice_side < 2 {
            return Err(PyValueError::new_err("lattice_side must be at least 2"));
        }
        Ok(Phi4Lattice {
            inner: Phi4::new(lattice_side, lambda, m2),
            side: lattice_side,
        })
    }

    fn dim(&self) -> usize {
        self.side * self.side
    }

    fn log_density(&self, field: Vec<f64>) -> PyResult<f64> {
        self.check(&field)?;
        Ok(self.inner.log_density(&field))
    }

    fn grad_log_density(&self, field: Vec<f64>) -> PyResult<Vec<f64>> {
        self.check(&field)?;
        let mut out = vec![0.0; field.len()];
        self.inner.grad_log_density(&field, &mut out);
        Ok(out)
    }
}

impl Phi4Lattice {
    fn check(&self, field: &[f64]) -> PyResult<()> {
        if field.len() != self.side * self.side {
            return Err(PyValueError::new_err(format!(
                "field has {} entries but the lattice needs {}",
                field.len(),
                self.side * self.side
            )));
        }
        Ok(())
    }
}

/// Validates a config file; returns the list of problems (empty when valid).
#[pyfunction]
fn validate_config(config_path: &str) -> PyResult<Vec<String>> {
    let text = std::fs::read_to_string(config_path)
        .map_err(|e| PyValueError::new_err(format!("{config_path}: {e}")))?;
    match craft_core::experiment::parse_config(&text) {
        Ok(_) => Ok(Vec::new()),
        Err(CraftError::InvalidConfig(problems)) => Ok(problems),
        Err(other) => Err(to_py_err(other)),
    }
}

/// Loads, optionally desk-scales, and runs a config in one call; returns the
/// summary as a JSON string.
#[pyfunction]
#[pyo3(signature = (config_path, output_dir, seed=None, mode=None, desk_scale=false))]
fn run_config(
    config_path: &str,
    output_dir: &str,
    seed: Option<u64>,
    mode: Option<&str>,
    desk_scale: bool,
) -> PyResult<String> {
    let mut experiment = Experiment::new(config_path)?;
    if desk_scale {
        experiment.apply_desk_scale()?;
    }
    experiment.override_run(seed, mode)?;
    experiment.run(output_dir)
}

/// Normalizes raw log-weights in place (log-sum-exp shift) and returns the
/// normalized weights together with the log of the shift, which is the
/// increment the running normalizer estimate receives.
#[pyfunction]
fn normalize_log_weights(mut raw: Vec<f64>) -> PyResult<(Vec<f64>, f64)> {
    let increment = ensemble::normalize_log_weights(&mut raw, 0).map_err(to_py_err)?;
    Ok((raw, increment))
}

/// Effective sample size of normalized log-weights: 1 / sum W_i^2.
#[pyfunction]
fn effective_sample_size(log_weights: Vec<f64>) -> f64 {
    ensemble::effective_sample_size(&log_weights)
}

#[pyfunction(name = "two_point_susceptibility")]
fn susceptibility_py(field: Vec<f64>) -> f64 {
    two_point_susceptibility(&field)
}

#[pyfunction(name = "ising_energy_density")]
fn energy_density_py(field: Vec<f64>) -> f64 {
    ising_energy_density(&field)
}

#[pyfunction(name = "mean_field")]
fn mean_field_py(field: Vec<f64>) -> f64 {
    mean_field(&field)
}

#[pymodule]
fn craft_mc(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Experiment>()?;
    m.add_class::<Phi4Lattice>()?;
    m.add_function(wrap_pyfunction!(validate_config, m)?)?;
    m.add_function(wrap_pyfunction!(run_config, m)?)?;
    m.add_function(wrap_pyfunction!(normalize_log_weights, m)?)?;
    m.add_function(wrap_pyfunction!(effective_sample_size, m)?)?;
    m.add_function(wrap_pyfunction!(susceptibility_py, m)?)?;
    m.add_function(wrap_pyfunction!(energy_density_py, m)?)?;
    m.add_function(wrap_pyfunction!(mean_field_py, m)?)?;
    Ok(())
}
