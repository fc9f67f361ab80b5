//! Gaussian and Gaussian-mixture targets.
//!
//! Both are exact: log-densities, gradients, and Hessian-vector products come
//! from the Cholesky factor of each covariance. A `log_scale` offset turns a
//! normalized density into an unnormalized one with a known integral, which
//! is what the normalizing-constant tests anneal toward.

use super::Density;
use crate::error::{CraftError, Result};
use crate::math::{
    cholesky_in_place, dot, logsumexp, solve_lower, solve_lower_transpose,
};

#[derive(Debug, Clone)]
pub struct Gaussian {
    mean: Vec<f64>,
    chol: Vec<f64>,
    /// log((2 pi)^{d/2} |L|): subtracting it normalizes the quadratic form.
    log_norm: f64,
    /// Additive offset, so the density integrates to exp(log_scale).
    log_scale: f64,
}

impl Gaussian {
    pub fn new(mean: Vec<f64>, covariance: Vec<f64>) -> Result<Self> {
        let d = mean.len();
        if covariance.len() != d * d {
            return Err(CraftError::DimensionMismatch(format!(
                "covariance has {} entries, expected {}",
                covariance.len(),
                d * d
            )));
        }
        let mut chol = covariance;
        cholesky_in_place(&mut chol, d)
            .map_err(|e| CraftError::InvalidConfig(vec![format!("covariance: {e}")]))?;
        let half_log_det: f64 = (0..d).map(|i| chol[i * d + i].ln()).sum();
        let log_norm = 0.5 * d as f64 * (2.0 * std::f64::consts::PI).ln() + half_log_det;
        Ok(Gaussian {
            mean,
            chol,
            log_norm,
            log_scale: 0.0,
        })
    }

    pub fn diagonal(mean: Vec<f64>, variances: Vec<f64>) -> Result<Self> {
        let d = mean.len();
        if variances.len() != d {
            return Err(CraftError::DimensionMismatch(
                "variances length != mean length".to_string(),
            ));
        }
        let mut cov = vec![0.0; d * d];
        for i in 0..d {
            cov[i * d + i] = variances[i];
        }
        Gaussian::new(mean, cov)
    }

    pub fn isotropic(dim: usize, mean: f64, variance: f64) -> Result<Self> {
        Gaussian::diagonal(vec![mean; dim], vec![variance; dim])
    }

    /// Offsets the log-density so the integral becomes exp(log_scale).
    pub fn with_log_scale(mut self, log_scale: f64) -> Self {
        self.log_scale = log_scale;
        self
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    /// log of the integral of this (possibly unnormalized) density.
    pub fn log_normalizer(&self) -> f64 {
        self.log_scale
    }

    fn whiten(&self, x: &[f64]) -> Vec<f64> {
        let d = self.mean.len();
        let mut r: Vec<f64> = x.iter().zip(&self.mean).map(|(&a, &b)| a - b).collect();
        solve_lower(&self.chol, d, &mut r);
        r
    }

    /// Sigma^{-1} (x - mean), reused by gradient and mixture responsibilities.
    fn precision_residual(&self, x: &[f64]) -> Vec<f64> {
        let d = self.mean.len();
        let mut r = self.whiten(x);
        solve_lower_transpose(&self.chol, d, &mut r);
        r
    }
}

impl Density for Gaussian {
    fn dim(&self) -> usize {
        self.mean.len()
    }

    fn log_density(&self, x: &[f64]) -> f64 {
        let w = self.whiten(x);
        -0.5 * dot(&w, &w) - self.log_norm + self.log_scale
    }

    fn grad_log_density(&self, x: &[f64], out: &mut [f64]) {
        let r = self.precision_residual(x);
        for (o, r) in out.iter_mut().zip(r) {
            *o = -r;
        }
    }

    fn hvp_log_density(&self, _x: &[f64], v: &[f64], out: &mut [f64]) {
        let d = self.mean.len();
        let mut r = v.to_vec();
        solve_lower(&self.chol, d, &mut r);
        solve_lower_transpose(&self.chol, d, &mut r);
        for (o, r) in out.iter_mut().zip(r) {
            *o = -r;
        }
    }
}

#[derive(Debug, Clone)]
pub struct GaussianMixture {
    log_weights: Vec<f64>,
    components: Vec<Gaussian>,
}

impl GaussianMixture {
    /// Component weights are normalized; each component is a normalized
    /// Gaussian scaled by its weight, so the mixture integrates to one (times
    /// any per-component log_scale, which tests use for unnormalized targets).
    pub fn new(weights: Vec<f64>, components: Vec<Gaussian>) -> Result<Self> {
        if weights.len() != components.len() || components.is_empty() {
            return Err(CraftError::DimensionMismatch(
                "mixture needs one weight per component".to_string(),
            ));
        }
        if weights.iter().any(|&w| !(w > 0.0) || !w.is_finite()) {
            return Err(CraftError::InvalidConfig(vec![
                "mixture weights must be positive and finite".to_string(),
            ]));
        }
        let dim = components[0].dim();
        if components.iter().any(|c| c.dim() != dim) {
            return Err(CraftError::DimensionMismatch(
                "mixture components disagree on dimension".to_string(),
            ));
        }
        let total: f64 = weights.iter().sum();
        let log_weights = weights.iter().map(|w| (w / total).ln()).collect();
        Ok(GaussianMixture {
            log_weights,
            components,
        })
    }

    fn component_log_terms(&self, x: &[f64]) -> Vec<f64> {
        self.log_weights
            .iter()
            .zip(&self.components)
            .map(|(&lw, c)| lw + c.log_density(x))
            .collect()
    }

    /// Posterior responsibilities; zero vector when every component vanished.
    fn responsibilities(&self, x: &[f64]) -> (Vec<f64>, f64) {
        let terms = self.component_log_terms(x);
        let total = logsumexp(&terms);
        if total == f64::NEG_INFINITY {
            return (vec![0.0; terms.len()], total);
        }
        (terms.iter().map(|&t| (t - total).exp()).collect(), total)
    }
}

impl Density for GaussianMixture {
    fn dim(&self) -> usize {
        self.components[0].dim()
    }

    fn log_density(&self, x: &[f64]) -> f64 {
        logsumexp(&self.component_log_terms(x))
    }

    fn grad_log_density(&self, x: &[f64], out: &mut [f64]) {
        let (r, _) = self.responsibilities(x);
        out.fill(0.0);
        let mut g = vec![0.0; x.len()];
        for (rj, c) in r.iter().zip(&self.components) {
            if *rj == 0.0 {
                continue;
            }
            c.grad_log_density(x, &mut g);
            for (o, &gi) in out.iter_mut().zip(&g) {
                *o += rj * gi;
            }
        }
    }

    fn hvp_log_density(&self, x: &[f64], v: &[f64], out: &mut [f64]) {
        // H = sum_j r_j (H_j + g_j g_j^T) - g g^T with g = sum_j r_j g_j.
        let (r, _) = self.responsibilities(x);
        let d = x.len();
        out.fill(0.0);
        let mut g_mix = vec![0.0; d];
        let mut g = vec![0.0; d];
        let mut hv = vec![0.0; d];
        for (rj, c) in r.iter().zip(&self.components) {
            if *rj == 0.0 {
                continue;
            }
            c.grad_log_density(x, &mut g);
            c.hvp_log_density(x, v, &mut hv);
            let gv = dot(&g, v);
            for i in 0..d {
                out[i] += rj * (hv[i] + g[i] * gv);
                g_mix[i] += rj * g[i];
            }
        }
        let gmv = dot(&g_mix, v);
        for i in 0..d {
            out[i] -= g_mix[i] * gmv;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::super::testutil::*;
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn log_density_matches_explicit_two_by_two_formula() {
        // Hand inversion of [[2, 0.6], [0.6, 1]] in the test, no Cholesky.
        let (a, b, c) = (2.0, 0.6, 1.0);
        let det = a * c - b * b;
        let g = Gaussian::new(vec![0.5, -1.0], vec![a, b, b, c]).unwrap();
        let x = [1.3, 0.2];
        let (dx, dy) = (x[0] - 0.5, x[1] + 1.0);
        let q = (c * dx * dx - 2.0 * b * dx * dy + a * dy * dy) / det;
        let want = -0.5 * q - (2.0 * std::f64::consts::PI) .ln() - 0.5 * det.ln();
        assert_relative_eq!(g.log_density(&x), want, epsilon = 1e-13);
    }

    #[test]
    fn log_scale_shifts_density_and_normalizer() {
        let g = Gaussian::isotropic(3, 0.0, 2.0).unwrap();
        let s = g.clone().with_log_scale(1.7);
        let x = [0.1, 0.2, 0.3];
        assert_relative_eq!(s.log_density(&x), g.log_density(&x) + 1.7, epsilon = 1e-14);
        assert_eq!(s.log_normalizer(), 1.7);
    }

    #[test]
    fn gradient_and_hvp_match_finite_differences() {
        let g = Gaussian::new(
            vec![0.5, -1.0, 0.0],
            vec![2.0, 0.3, 0.1, 0.3, 1.0, -0.2, 0.1, -0.2, 1.5],
        )
        .unwrap();
        let x = [1.0, 0.7, -0.3];
        let mut grad = vec![0.0; 3];
        g.grad_log_density(&x, &mut grad);
        assert_close(&grad, &fd_grad(&g, &x, 1e-6), 1e-8, "gaussian grad");
        let v = [0.2, -1.0, 0.5];
        let mut hv = vec![0.0; 3];
        g.hvp_log_density(&x, &v, &mut hv);
        assert_close(&hv, &fd_hvp(&g, &x, &v, 1e-6), 1e-7, "gaussian hvp");
    }

    #[test]
    fn single_component_mixture_reduces_to_gaussian() {
        let g = Gaussian::diagonal(vec![1.0, -2.0], vec![0.5, 3.0]).unwrap();
        let m = GaussianMixture::new(vec![4.0], vec![g.clone()]).unwrap();
        let x = [0.3, 0.4];
        assert_relative_eq!(m.log_density(&x), g.log_density(&x), epsilon = 1e-13);
    }

    #[test]
    fn mixture_matches_direct_sum_of_pdfs() {
        let c1 = Gaussian::isotropic(1, -2.0, 0.5).unwrap();
        let c2 = Gaussian::isotropic(1, 3.0, 2.0).unwrap();
        let m = GaussianMixture::new(vec![0.3, 0.7], vec![c1.clone(), c2.clone()]).unwrap();
        let x = [0.4];
        let direct = 0.3 * c1.log_density(&x).exp() + 0.7 * c2.log_density(&x).exp();
        assert_relative_eq!(m.log_density(&x), direct.ln(), epsilon = 1e-12);
    }

    #[test]
    fn mixture_is_stable_far_from_every_mode() {
        // At x = 40 both components have astronomically small density; the
        // log-density must stay finite and equal the dominating term.
        let c1 = Gaussian::isotropic(1, 0.0, 1.0).unwrap();
        let c2 = Gaussian::isotropic(1, 8.0, 1.0).unwrap();
        let m = GaussianMixture::new(vec![0.5, 0.5], vec![c1, c2.clone()]).unwrap();
        let x = [40.0];
        let v = m.log_density(&x);
        assert!(v.is_finite());
        let dominant = 0.5f64.ln() + c2.log_density(&x);
        assert_relative_eq!(v, dominant, epsilon = 1e-9);
        let mut g = vec![0.0];
        m.grad_log_density(&x, &mut g);
        assert!(g[0].is_finite());
        assert_relative_eq!(g[0], -(40.0 - 8.0), epsilon = 1e-9);
    }

    #[test]
    fn mixture_gradient_and_hvp_match_finite_differences() {
        let c1 = Gaussian::diagonal(vec![-1.0, 0.0], vec![0.8, 1.2]).unwrap();
        let c2 = Gaussian::new(vec![2.0, 1.0], vec![1.0, 0.4, 0.4, 0.7]).unwrap();
        let m = GaussianMixture::new(vec![0.4, 0.6], vec![c1, c2]).unwrap();
        let x = [0.5, -0.25];
        let mut grad = vec![0.0; 2];
        m.grad_log_density(&x, &mut grad);
        assert_close(&grad, &fd_grad(&m, &x, 1e-6), 1e-7, "mixture grad");
        let v = [1.0, 0.3];
        let mut hv = vec![0.0; 2];
        m.hvp_log_density(&x, &v, &mut hv);
        assert_close(&hv, &fd_hvp(&m, &x, &v, 1e-5), 1e-6, "mixture hvp");
    }
}
