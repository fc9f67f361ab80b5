//! Periodic 2-D convolution for lattice conditioners.
//!
//! Channels-first layout: a buffer of c channels over an l x l lattice stores
//! channel ch at [ch * l * l .. (ch + 1) * l * l], row-major, and all indexing
//! wraps cyclically. Convolution (not correlation) offsets are centered, so a
//! k x k kernel reaches (k-1)/2 sites in every direction.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Conv2d {
    in_ch: usize,
    out_ch: usize,
    kernel: usize,
    /// [out][in][k][k] flattened.
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl Conv2d {
    pub fn new(in_ch: usize, out_ch: usize, kernel: usize, zero_init: bool, rng: &mut ChaCha8Rng) -> Self {
        assert!(kernel % 2 == 1, "kernel must be odd for centered offsets");
        let n = out_ch * in_ch * kernel * kernel;
        let scale = if zero_init {
            0.0
        } else {
            (1.0 / (in_ch * kernel * kernel) as f64).sqrt()
        };
        let weights = (0..n)
            .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Conv2d {
            in_ch,
            out_ch,
            kernel,
            weights,
            bias: vec![0.0; out_ch],
        }
    }

    pub fn num_params(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    pub fn params_into(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(&self.weights);
        out.extend_from_slice(&self.bias);
    }

    pub fn set_params(&mut self, p: &[f64]) {
        let wn = self.weights.len();
        self.weights.copy_from_slice(&p[..wn]);
        self.bias.copy_from_slice(&p[wn..]);
    }

    #[inline]
    fn w(&self, o: usize, i: usize, dr: usize, dc: usize) -> f64 {
        let k = self.kernel;
        self.weights[((o * self.in_ch + i) * k + dr) * k + dc]
    }

    pub fn forward(&self, l: usize, input: &[f64], out: &mut [f64]) {
        debug_assert_eq!(input.len(), self.in_ch * l * l);
        debug_assert_eq!(out.len(), self.out_ch * l * l);
        let k = self.kernel;
        let half = k / 2;
        for o in 0..self.out_ch {
            let plane = &mut out[o * l * l..(o + 1) * l * l];
            plane.fill(self.bias[o]);
            for i in 0..self.in_ch {
                let inp = &input[i * l * l..(i + 1) * l * l];
                for dr in 0..k {
                    for dc in 0..k {
                        let w = self.w(o, i, dr, dc);
                        if w == 0.0 {
                            continue;
                        }
                        // Source row/col offset: output (r, c) reads input
                        // (r + dr - half, c + dc - half), wrapped.
                        let roff = (dr + 2 * l - half % l) % l;
                        let coff = (dc + 2 * l - half % l) % l;
                        for r in 0..l {
                            let sr = (r + roff) % l;
                            for c in 0..l {
                                let sc = (c + coff) % l;
                                plane[r * l + c] += w * inp[sr * l + sc];
                            }
                        }
                    }
                }
            }
        }
    }

    /// Accumulates parameter gradients into `grad_params` (weights then bias)
    /// and input gradients into `grad_input`.
    pub fn backward(
        &self,
        l: usize,
        input: &[f64],
        upstream: &[f64],
        grad_params: &mut [f64],
        grad_input: &mut [f64],
    ) {
        debug_assert_eq!(grad_params.len(), self.num_params());
        debug_assert_eq!(grad_input.len(), self.in_ch * l * l);
        let k = self.kernel;
        let half = k / 2;
        let wn = self.weights.len();
        for o in 0..self.out_ch {
            let up = &upstream[o * l * l..(o + 1) * l * l];
            grad_params[wn + o] += up.iter().sum::<f64>();
            for i in 0..self.in_ch {
                let inp = &input[i * l * l..(i + 1) * l * l];
                let gin = &mut grad_input[i * l * l..(i + 1) * l * l];
                for dr in 0..k {
                    for dc in 0..k {
                        let roff = (dr + 2 * l - half % l) % l;
                        let coff = (dc + 2 * l - half % l) % l;
                        let w = self.w(o, i, dr, dc);
                        let mut gw = 0.0;
                        for r in 0..l {
                            let sr = (r + roff) % l;
                            for c in 0..l {
                                let sc = (c + coff) % l;
                                let u = up[r * l + c];
                                gw += u * inp[sr * l + sc];
                                gin[sr * l + sc] += u * w;
                            }
                        }
                        grad_params[((o * self.in_ch + i) * k + dr) * k + dc] += gw;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::translate;
    use crate::rng::RngKey;

    fn randomized(in_ch: usize, out_ch: usize, k: usize, seed: u64) -> Conv2d {
        let mut rng = RngKey::new(seed).rng();
        let mut c = Conv2d::new(in_ch, out_ch, k, false, &mut rng);
        let mut p = Vec::new();
        c.params_into(&mut p);
        // Nonzero biases too.
        for (i, v) in p.iter_mut().enumerate() {
            if *v == 0.0 {
                *v = 0.1 + 0.01 * i as f64;
            }
        }
        c.set_params(&p);
        c
    }

    #[test]
    fn matches_hand_convolution_on_small_lattice() {
        // 1 channel, 3x3 kernel, 2x2 lattice: every input site contributes
        // through several kernel taps because of wrapping; compare against a
        // fully unrolled hand computation at one output site.
        let c = randomized(1, 1, 3, 9);
        let l = 2;
        let input = vec![1.0, -2.0, 0.5, 3.0];
        let mut out = vec![0.0; 4];
        c.forward(l, &input, &mut out);
        let mut want = c.bias[0];
        for dr in 0..3usize {
            for dc in 0..3usize {
                // Output (0, 0) reads input ((0 + dr - 1) mod 2, (0 + dc - 1) mod 2).
                let sr = (dr + 1) % 2;
                let sc = (dc + 1) % 2;
                want += c.w(0, 0, dr, dc) * input[sr * 2 + sc];
            }
        }
        assert!((out[0] - want).abs() < 1e-12);
    }

    #[test]
    fn forward_commutes_with_translation() {
        let c = randomized(2, 3, 3, 17);
        let l = 5;
        let input: Vec<f64> = (0..2 * l * l).map(|i| ((i * 31 + 7) % 13) as f64 - 6.0).collect();
        let mut out = vec![0.0; 3 * l * l];
        c.forward(l, &input, &mut out);
        for (dr, dc) in [(1usize, 0usize), (0, 1), (2, 3), (4, 4)] {
            let shifted_in: Vec<f64> = (0..2)
                .flat_map(|ch| translate(&input[ch * l * l..(ch + 1) * l * l], l, dr, dc))
                .collect();
            let mut out_shifted = vec![0.0; 3 * l * l];
            c.forward(l, &shifted_in, &mut out_shifted);
            for ch in 0..3 {
                let want = translate(&out[ch * l * l..(ch + 1) * l * l], l, dr, dc);
                for (a, b) in out_shifted[ch * l * l..(ch + 1) * l * l].iter().zip(&want) {
                    assert_eq!(a.to_bits(), b.to_bits());
                }
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let c = randomized(2, 2, 3, 23);
        let l = 3;
        let input: Vec<f64> = (0..2 * l * l).map(|i| ((i as f64) * 0.7).sin()).collect();
        let upstream: Vec<f64> = (0..2 * l * l).map(|i| ((i as f64) * 1.1).cos()).collect();
        let scalar = |c: &Conv2d, input: &[f64]| -> f64 {
            let mut out = vec![0.0; 2 * l * l];
            c.forward(l, input, &mut out);
            out.iter().zip(&upstream).map(|(o, u)| o * u).sum()
        };
        let mut gp = vec![0.0; c.num_params()];
        let mut gi = vec![0.0; input.len()];
        c.backward(l, &input, &upstream, &mut gp, &mut gi);

        let h = 1e-6;
        for i in 0..input.len() {
            let mut ip = input.clone();
            ip[i] += h;
            let mut im = input.clone();
            im[i] -= h;
            let fd = (scalar(&c, &ip) - scalar(&c, &im)) / (2.0 * h);
            assert!((fd - gi[i]).abs() < 1e-6 * (1.0 + fd.abs()), "input {i}");
        }
        let mut p = Vec::new();
        c.params_into(&mut p);
        for j in 0..p.len() {
            let mut cp = c.clone();
            let mut pp = p.clone();
            pp[j] += h;
            cp.set_params(&pp);
            let mut cm = c.clone();
            pp[j] -= 2.0 * h;
            cm.set_params(&pp);
            let fd = (scalar(&cp, &input) - scalar(&cm, &input)) / (2.0 * h);
            assert!((fd - gp[j]).abs() < 1e-6 * (1.0 + fd.abs()), "param {j}");
        }
    }
}
