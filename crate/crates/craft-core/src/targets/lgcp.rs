//! Log-Gaussian Cox process on a square grid, whitened parametrization.
//!
//! The latent field over an M x M grid of unit-square cells has a Gaussian
//! prior with exponential-decay covariance
//!
//!   k(s, s') = sigma^2 exp(-||s - s'|| / lengthscale)
//!
//! and mean offset mu. With L the Cholesky factor of the covariance, the
//! sampled variable is the whitened x: the latent intensity exponent is
//! f = mu + L x, and each cell contributes a Poisson likelihood with exposure
//! equal to the cell area. The unnormalized posterior log-density in x is
//!
//!   log gamma(x) = log N(x; 0, I) + sum_i [ y_i f_i - a exp(f_i) ].

use super::Density;
use crate::error::{CraftError, Result};
use crate::math::{cholesky_in_place, lower_mul, lower_transpose_mul};

#[derive(Debug, Clone)]
pub struct LgcpGrid {
    m: usize,
    counts: Vec<f64>,
    mu: f64,
    cell_area: f64,
    chol: Vec<f64>,
}

impl LgcpGrid {
    pub fn new(
        m: usize,
        counts: Vec<f64>,
        kernel_variance: f64,
        kernel_lengthscale: f64,
        mean_offset: f64,
    ) -> Result<Self> {
        let d = m * m;
        let mut problems = Vec::new();
        if m < 2 {
            problems.push("grid side must be at least 2".to_string());
        }
        if counts.len() != d {
            problems.push(format!("expected {d} counts, got {}", counts.len()));
        }
        if counts.iter().any(|&c| c < 0.0 || !c.is_finite()) {
            problems.push("counts must be finite and nonnegative".to_string());
        }
        if !(kernel_variance > 0.0) || !(kernel_lengthscale > 0.0) {
            problems.push("kernel variance and lengthscale must be positive".to_string());
        }
        if !problems.is_empty() {
            return Err(CraftError::InvalidConfig(problems));
        }

        // Cell centers in the unit square, row-major.
        let centers: Vec<(f64, f64)> = (0..d)
            .map(|i| {
                let (r, c) = (i / m, i % m);
                ((r as f64 + 0.5) / m as f64, (c as f64 + 0.5) / m as f64)
            })
            .collect();
        let mut cov = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                let dr = centers[i].0 - centers[j].0;
                let dc = centers[i].1 - centers[j].1;
                let dist = (dr * dr + dc * dc).sqrt();
                cov[i * d + j] = kernel_variance * (-dist / kernel_lengthscale).exp();
            }
        }
        // Tiny jitter keeps the factorization stable for large grids.
        for i in 0..d {
            cov[i * d + i] += 1e-10 * kernel_variance;
        }
        cholesky_in_place(&mut cov, d)
            .map_err(|e| CraftError::InvalidConfig(vec![format!("covariance: {e}")]))?;
        Ok(LgcpGrid {
            m,
            counts,
            mu: mean_offset,
            cell_area: 1.0 / d as f64,
            chol: cov,
        })
    }

    pub fn grid_side(&self) -> usize {
        self.m
    }

    /// Latent exponent f = mu + L x.
    pub fn latent(&self, x: &[f64]) -> Vec<f64> {
        let d = self.m * self.m;
        let mut f = vec![0.0; d];
        lower_mul(&self.chol, d, x, &mut f);
        for v in f.iter_mut() {
            *v += self.mu;
        }
        f
    }
}

impl Density for LgcpGrid {
    fn dim(&self) -> usize {
        self.m * self.m
    }

    fn log_density(&self, x: &[f64]) -> f64 {
        let d = self.dim();
        let f = self.latent(x);
        let prior: f64 =
            -0.5 * x.iter().map(|v| v * v).sum::<f64>()
                - 0.5 * d as f64 * (2.0 * std::f64::consts::PI).ln();
        let mut lik = 0.0;
        for i in 0..d {
            lik += self.counts[i] * f[i] - self.cell_area * f[i].exp();
        }
        prior + lik
    }

    fn grad_log_density(&self, x: &[f64], out: &mut [f64]) {
        let d = self.dim();
        let f = self.latent(x);
        let resid: Vec<f64> = (0..d)
            .map(|i| self.counts[i] - self.cell_area * f[i].exp())
            .collect();
        lower_transpose_mul(&self.chol, d, &resid, out);
        for (o, &xi) in out.iter_mut().zip(x) {
            *o -= xi;
        }
    }

    fn hvp_log_density(&self, x: &[f64], v: &[f64], out: &mut [f64]) {
        // H v = -v - L^T (a e^f . (L v)).
        let d = self.dim();
        let f = self.latent(x);
        let mut lv = vec![0.0; d];
        lower_mul(&self.chol, d, v, &mut lv);
        for i in 0..d {
            lv[i] *= self.cell_area * f[i].exp();
        }
        lower_transpose_mul(&self.chol, d, &lv, out);
        for (o, &vi) in out.iter_mut().zip(v) {
            *o = -*o - vi;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::super::testutil::*;
    use super::*;

    fn small() -> LgcpGrid {
        LgcpGrid::new(2, vec![0.0, 2.0, 1.0, 3.0], 1.3, 0.8, -0.4).unwrap()
    }

    #[test]
    fn whitened_density_matches_direct_prior_times_likelihood() {
        // Build the same posterior without whitening: a multivariate normal
        // prior on f (dense inverse via Gauss-Jordan in the test) plus the
        // Poisson terms. The two parametrizations must differ by exactly the
        // constant Jacobian log|L| for every x.
        let g = small();
        let d = 4;
        let centers = [
            (0.25, 0.25),
            (0.25, 0.75),
            (0.75, 0.25),
            (0.75, 0.75),
        ];
        let mut cov = [[0.0f64; 4]; 4];
        for i in 0..d {
            for j in 0..d {
                let dr: f64 = centers[i].0 - centers[j].0;
                let dc: f64 = centers[i].1 - centers[j].1;
                cov[i][j] = 1.3 * (-(dr * dr + dc * dc).sqrt() / 0.8).exp();
                if i == j {
                    cov[i][j] += 1e-10 * 1.3;
                }
            }
        }
        // Gauss-Jordan inverse and determinant.
        let mut aug = [[0.0f64; 8]; 4];
        for i in 0..d {
            for j in 0..d {
                aug[i][j] = cov[i][j];
            }
            aug[i][d + i] = 1.0;
        }
        let mut det = 1.0;
        for col in 0..d {
            let piv = aug[col][col];
            det *= piv;
            for j in 0..2 * d {
                aug[col][j] /= piv;
            }
            for row in 0..d {
                if row != col {
                    let f = aug[row][col];
                    for j in 0..2 * d {
                        aug[row][j] -= f * aug[col][j];
                    }
                }
            }
        }

        let counts = [0.0, 2.0, 1.0, 3.0];
        let area = 0.25;
        let direct = |f: &[f64]| -> f64 {
            let r: Vec<f64> = f.iter().map(|v| v + 0.4).collect();
            let mut q = 0.0;
            for i in 0..d {
                for j in 0..d {
                    q += r[i] * aug[i][d + j] * r[j];
                }
            }
            let prior = -0.5 * q
                - 0.5 * (d as f64) * (2.0 * std::f64::consts::PI).ln()
                - 0.5 * det.ln();
            let lik: f64 = (0..d)
                .map(|i| counts[i] * f[i] - area * f[i].exp())
                .sum();
            prior + lik
        };

        let xs = [
            vec![0.0, 0.0, 0.0, 0.0],
            vec![0.5, -1.0, 0.3, 2.0],
            vec![-0.7, 0.2, 1.4, -0.9],
        ];
        let mut offsets = Vec::new();
        for x in &xs {
            let f = g.latent(x);
            offsets.push(g.log_density(x) - direct(&f));
        }
        // Constant offset = log|L|: same for every x.
        for w in offsets.windows(2) {
            assert!(
                (w[0] - w[1]).abs() < 1e-9,
                "offsets not constant: {offsets:?}"
            );
        }
    }

    #[test]
    fn gradient_and_hvp_match_finite_differences() {
        let g = small();
        let x = [0.4, -0.8, 1.1, 0.2];
        let mut grad = vec![0.0; 4];
        g.grad_log_density(&x, &mut grad);
        assert_close(&grad, &fd_grad(&g, &x, 1e-6), 1e-7, "lgcp grad");
        let v = [1.0, -0.2, 0.5, 0.8];
        let mut hv = vec![0.0; 4];
        g.hvp_log_density(&x, &v, &mut hv);
        assert_close(&hv, &fd_hvp(&g, &x, &v, 1e-6), 1e-6, "lgcp hvp");
    }

    #[test]
    fn config_problems_are_collected() {
        let err = LgcpGrid::new(1, vec![1.0], -1.0, 0.0, 0.0).unwrap_err();
        match err {
            CraftError::InvalidConfig(problems) => assert!(problems.len() >= 2),
            other => panic!("unexpected {other:?}"),
        }
    }
}
