//! Two-dimensional lattice phi^4 scalar field theory.
//!
//! The euclidean action on an L x L periodic lattice is
//!
//!   S(phi) = sum_x [ phi(x) zeta(x) + m^2 phi(x)^2 + lambda phi(x)^4 ],
//!   zeta(x) = sum_mu [ 2 phi(x) - phi(x + e_mu) - phi(x - e_mu) ],
//!
//! with mu running over the two lattice directions. The target log-density is
//! -S. Per-site terms are accumulated with a value-sorted sum, so the action
//! is exactly invariant under every lattice translation (the multiset of site
//! terms is the invariant object; a plain left-to-right sum would pick up
//! order-dependent rounding).

use super::Density;
use crate::lattice::neighbor_table;
use crate::math::sorted_sum;

#[derive(Debug, Clone)]
pub struct Phi4 {
    l: usize,
    lambda: f64,
    m2: f64,
    neighbors: Vec<[usize; 4]>,
}

impl Phi4 {
    pub fn new(l: usize, lambda: f64, m2: f64) -> Self {
        assert!(l >= 2, "lattice side must be at least 2");
        Phi4 {
            l,
            lambda,
            m2,
            neighbors: neighbor_table(l),
        }
    }

    pub fn lattice_side(&self) -> usize {
        self.l
    }

    #[inline]
    fn zeta(&self, phi: &[f64], i: usize) -> f64 {
        let nb = &self.neighbors[i];
        4.0 * phi[i] - phi[nb[0]] - phi[nb[1]] - phi[nb[2]] - phi[nb[3]]
    }

    pub fn action(&self, phi: &[f64]) -> f64 {
        debug_assert_eq!(phi.len(), self.l * self.l);
        let mut terms: Vec<f64> = (0..phi.len())
            .map(|i| {
                let p = phi[i];
                let p2 = p * p;
                p * self.zeta(phi, i) + self.m2 * p2 + self.lambda * p2 * p2
            })
            .collect();
        sorted_sum(&mut terms)
    }

    /// dS/dphi(x) = 2 zeta(x) + 2 m^2 phi(x) + 4 lambda phi(x)^3.
    pub fn action_grad(&self, phi: &[f64], out: &mut [f64]) {
        for i in 0..phi.len() {
            let p = phi[i];
            out[i] = 2.0 * self.zeta(phi, i) + 2.0 * self.m2 * p + 4.0 * self.lambda * p * p * p;
        }
    }
}

fn lattice_side_of(field: &[f64]) -> usize {
    let l = (field.len() as f64).sqrt().round() as usize;
    assert_eq!(l * l, field.len(), "field is not a square lattice");
    l
}

/// chi_2(phi) = (sum_x phi(x))^2 / V. The per-configuration estimator; the
/// disconnected mean^2 part vanishes by the phi -> -phi symmetry of the
/// action. Value-sorted sums keep it exactly translation invariant.
pub fn two_point_susceptibility(field: &[f64]) -> f64 {
    let mut vals = field.to_vec();
    let s = sorted_sum(&mut vals);
    s * s / field.len() as f64
}

/// E(phi) = (1 / 2V) sum_x sum_mu phi(x) phi(x + e_mu), mu over the two
/// positive lattice directions.
pub fn ising_energy_density(field: &[f64]) -> f64 {
    let l = lattice_side_of(field);
    let neighbors = neighbor_table(l);
    let mut terms = Vec::with_capacity(2 * field.len());
    for (i, nb) in neighbors.iter().enumerate() {
        terms.push(field[i] * field[nb[0]]);
        terms.push(field[i] * field[nb[2]]);
    }
    sorted_sum(&mut terms) / (2.0 * field.len() as f64)
}

/// Average field value (the magnetization per site).
pub fn mean_field(field: &[f64]) -> f64 {
    let mut vals = field.to_vec();
    sorted_sum(&mut vals) / field.len() as f64
}

impl Density for Phi4 {
    fn dim(&self) -> usize {
        self.l * self.l
    }

    fn log_density(&self, x: &[f64]) -> f64 {
        -self.action(x)
    }

    fn grad_log_density(&self, x: &[f64], out: &mut [f64]) {
        self.action_grad(x, out);
        for o in out.iter_mut() {
            *o = -*o;
        }
    }

    fn hvp_log_density(&self, x: &[f64], v: &[f64], out: &mut [f64]) {
        // The kinetic form is linear in phi, so its Hessian applies zeta to v;
        // the potential contributes the diagonal 2 m^2 + 12 lambda phi^2.
        for i in 0..x.len() {
            let diag = 2.0 * self.m2 + 12.0 * self.lambda * x[i] * x[i];
            out[i] = -(2.0 * self.zeta(v, i) + diag * v[i]);
        }
    }
}
