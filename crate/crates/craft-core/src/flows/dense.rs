//! Dense conditioner network for coupling flows on unstructured targets.
//!
//! Two leaky-rectifier hidden layers and a linear output layer whose weights
//! and biases start at zero, so a freshly built coupling flow is the identity.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

const LEAKY_SLOPE: f64 = 0.01;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Mlp {
    sizes: Vec<usize>,
    /// Per layer, row-major sizes[l+1] x sizes[l].
    weights: Vec<Vec<f64>>,
    biases: Vec<Vec<f64>>,
}

pub struct MlpTrace {
    /// Post-activation values per layer, starting with the input.
    acts: Vec<Vec<f64>>,
    /// Pre-activation values per layer (needed for the rectifier mask).
    preacts: Vec<Vec<f64>>,
}

impl MlpTrace {
    pub fn output(&self) -> &[f64] {
        self.acts.last().unwrap()
    }
}

impl Mlp {
    /// Hidden layers get scaled normal init from `rng`; the final layer is
    /// zero so the network output starts at zero.
    pub fn new(sizes: Vec<usize>, rng: &mut ChaCha8Rng) -> Self {
        assert!(sizes.len() >= 2);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for l in 0..sizes.len() - 1 {
            let (fan_in, fan_out) = (sizes[l], sizes[l + 1]);
            let last = l == sizes.len() - 2;
            let scale = if last { 0.0 } else { (1.0 / fan_in as f64).sqrt() };
            let w: Vec<f64> = (0..fan_in * fan_out)
                .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
                .collect();
            weights.push(w);
            biases.push(vec![0.0; fan_out]);
        }
        Mlp {
            sizes,
            weights,
            biases,
        }
    }

    pub fn num_params(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum::<usize>()
            + self.biases.iter().map(|b| b.len()).sum::<usize>()
    }

    pub fn params_into(&self, out: &mut Vec<f64>) {
        for l in 0..self.weights.len() {
            out.extend_from_slice(&self.weights[l]);
            out.extend_from_slice(&self.biases[l]);
        }
    }

    pub fn set_params(&mut self, p: &[f64]) {
        let mut at = 0;
        for l in 0..self.weights.len() {
            let wn = self.weights[l].len();
            self.weights[l].copy_from_slice(&p[at..at + wn]);
            at += wn;
            let bn = self.biases[l].len();
            self.biases[l].copy_from_slice(&p[at..at + bn]);
            at += bn;
        }
        debug_assert_eq!(at, p.len());
    }

    pub fn forward(&self, input: &[f64]) -> Vec<f64> {
        self.forward_trace(input).acts.pop().unwrap()
    }

    pub fn forward_trace(&self, input: &[f64]) -> MlpTrace {
        debug_assert_eq!(input.len(), self.sizes[0]);
        let layers = self.weights.len();
        let mut acts = Vec::with_capacity(layers + 1);
        let mut preacts = Vec::with_capacity(layers);
        acts.push(input.to_vec());
        for l in 0..layers {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let mut pre = self.biases[l].clone();
            let a = &acts[l];
            for r in 0..n_out {
                let row = &self.weights[l][r * n_in..(r + 1) * n_in];
                let mut s = 0.0;
                for (wi, ai) in row.iter().zip(a) {
                    s += wi * ai;
                }
                pre[r] += s;
            }
            let post = if l + 1 == layers {
                pre.clone()
            } else {
                pre.iter()
                    .map(|&v| if v > 0.0 { v } else { LEAKY_SLOPE * v })
                    .collect()
            };
            preacts.push(pre);
            acts.push(post);
        }
        MlpTrace { acts, preacts }
    }

    /// Backpropagates `upstream` (dL/d output). Parameter gradients are
    /// accumulated into `grad_params` (same flat layout as `params_into`);
    /// returns dL/d input.
    pub fn backward(&self, trace: &MlpTrace, upstream: &[f64], grad_params: &mut [f64]) -> Vec<f64> {
        let layers = self.weights.len();
        debug_assert_eq!(grad_params.len(), self.num_params());
        // Flat offsets of each layer's weight block.
        let mut offsets = Vec::with_capacity(layers);
        let mut at = 0;
        for l in 0..layers {
            offsets.push(at);
            at += self.weights[l].len() + self.biases[l].len();
        }
        let mut g = upstream.to_vec();
        for l in (0..layers).rev() {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            if l + 1 != layers {
                for (gi, &pre) in g.iter_mut().zip(&trace.preacts[l]) {
                    if pre <= 0.0 {
                        *gi *= LEAKY_SLOPE;
                    }
                }
            }
            let w_off = offsets[l];
            let b_off = w_off + self.weights[l].len();
            let a = &trace.acts[l];
            let mut g_in = vec![0.0; n_in];
            for r in 0..n_out {
                let gr = g[r];
                grad_params[b_off + r] += gr;
                let row = &self.weights[l][r * n_in..(r + 1) * n_in];
                let wrow = &mut grad_params[w_off + r * n_in..w_off + (r + 1) * n_in];
                for i in 0..n_in {
                    wrow[i] += gr * a[i];
                    g_in[i] += gr * row[i];
                }
            }
            g = g_in;
        }
        g
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngKey;

    #[test]
    fn zero_final_layer_means_zero_output() {
        let mut rng = RngKey::new(3).rng();
        let net = Mlp::new(vec![4, 8, 8, 6], &mut rng);
        let out = net.forward(&[1.0, -2.0, 0.5, 3.0]);
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = RngKey::new(5).rng();
        let mut net = Mlp::new(vec![3, 5, 5, 2], &mut rng);
        // Perturb every parameter away from the zero final layer.
        let mut p = Vec::new();
        net.params_into(&mut p);
        let mut lcg = 12345u64;
        for v in p.iter_mut() {
            lcg = lcg.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            *v += ((lcg >> 33) as f64 / (1u64 << 31) as f64 - 0.5) * 0.8;
        }
        net.set_params(&p);

        let x = [0.3, -0.7, 1.2];
        let up = [1.0, -2.0];
        let scalar = |net: &Mlp, x: &[f64]| -> f64 {
            net.forward(x).iter().zip(&up).map(|(o, u)| o * u).sum()
        };

        let trace = net.forward_trace(&x);
        let mut gp = vec![0.0; net.num_params()];
        let gx = net.backward(&trace, &up, &mut gp);

        let h = 1e-6;
        for i in 0..x.len() {
            let mut xp = x.to_vec();
            xp[i] += h;
            let mut xm = x.to_vec();
            xm[i] -= h;
            let fd = (scalar(&net, &xp) - scalar(&net, &xm)) / (2.0 * h);
            assert!(
                (fd - gx[i]).abs() < 1e-6 * (1.0 + fd.abs()),
                "input grad {i}: fd {fd} vs {got}",
                got = gx[i]
            );
        }
        for j in 0..p.len() {
            let mut pp = p.clone();
            pp[j] += h;
            let mut net_p = net.clone();
            net_p.set_params(&pp);
            pp[j] -= 2.0 * h;
            let mut net_m = net.clone();
            net_m.set_params(&pp);
            let fd = (scalar(&net_p, &x) - scalar(&net_m, &x)) / (2.0 * h);
            assert!(
                (fd - gp[j]).abs() < 1e-6 * (1.0 + fd.abs()),
                "param grad {j}: fd {fd} vs {got}",
                got = gp[j]
            );
        }
    }
}
