//! Invertible transport maps with hand-written adjoints.
//!
//! Families:
//! - identity,
//! - diagonal affine (per-coordinate log-scale and shift),
//! - coupling with a dense conditioner (index-parity mask),
//! - convolutional coupling on square periodic lattices (checkerboard mask),
//! - composites of the above.
//!
//! Every family starts as the identity map: couplings zero-initialize their
//! final conditioner layer, the diagonal affine starts at log-scale and shift
//! zero. The adjoint of a flow computes, for the scalar
//!
//!   phi = <grad_y, T(x)> + grad_log_det * log_det T(x),
//!
//! the gradients with respect to x and to the parameters; trainers build all
//! of their objective gradients out of that single primitive, so there is no
//! general-purpose tape anywhere in the crate.

mod conv;
mod dense;

pub use conv::Conv2d;
pub use dense::Mlp;

use crate::error::{CraftError, Result};
use crate::math::sorted_sum;
use crate::rng::RngKey;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Result of a forward pass.
#[derive(Debug, Clone)]
pub struct FlowEval {
    pub y: Vec<f64>,
    pub log_det: f64,
    /// Largest |pre-scale| produced anywhere in the flow; trainers abort when
    /// this runs away.
    pub max_abs_prescale: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiagAffineFlow {
    dim: usize,
    log_scale: Vec<f64>,
    shift: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CouplingFlow {
    dim: usize,
    /// Transforms coordinates with index parity equal to this.
    parity: u8,
    net: Mlp,
    #[serde(skip)]
    cached_idx: std::sync::OnceLock<(Vec<usize>, Vec<usize>)>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConvCouplingFlow {
    lattice_side: usize,
    /// Transforms sites with (row + col) parity equal to this.
    parity: u8,
    hidden_channels: usize,
    kernel_size: usize,
    conv_in: Conv2d,
    conv_out: Conv2d,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompositeFlow {
    parts: Vec<Flow>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum Flow {
    Identity { dim: usize },
    DiagAffine(DiagAffineFlow),
    Coupling(CouplingFlow),
    ConvCoupling(ConvCouplingFlow),
    Composite(CompositeFlow),
}

impl CouplingFlow {
    fn index_split(&self) -> &(Vec<usize>, Vec<usize>) {
        self.cached_idx.get_or_init(|| {
            let transformed: Vec<usize> =
                (0..self.dim).filter(|i| (i % 2) as u8 == self.parity).collect();
            let kept: Vec<usize> =
                (0..self.dim).filter(|i| (i % 2) as u8 != self.parity).collect();
            (transformed, kept)
        })
    }
}

impl ConvCouplingFlow {
    #[inline]
    fn site_transformed(&self, idx: usize) -> bool {
        let l = self.lattice_side;
        (((idx / l) + (idx % l)) % 2) as u8 == self.parity
    }

    fn conditioner_input(&self, x: &[f64]) -> Vec<f64> {
        // The conditioner sees only the untransformed class; transformed
        // sites are zeroed so the Jacobian stays triangular.
        (0..x.len())
            .map(|i| if self.site_transformed(i) { 0.0 } else { x[i] })
            .collect()
    }

    /// (pre-scale plane, shift plane, hidden preactivation, masked input).
    fn conditioner(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
        let l = self.lattice_side;
        let v = l * l;
        let inp = self.conditioner_input(x);
        let mut pre_h = vec![0.0; self.hidden_channels * v];
        self.conv_in.forward(l, &inp, &mut pre_h);
        let h: Vec<f64> = pre_h.iter().map(|&z| if z > 0.0 { z } else { 0.0 }).collect();
        let mut out = vec![0.0; 2 * v];
        self.conv_out.forward(l, &h, &mut out);
        let scale = out[..v].to_vec();
        let shift = out[v..].to_vec();
        (scale, shift, pre_h, inp)
    }

    /// Same parameters, complementary mask. A translation that flips
    /// checkerboard parity maps this layer onto exactly that partner, which
    /// is what lattice equivariance means for masked couplings.
    pub fn parity_swapped(&self) -> ConvCouplingFlow {
        let mut f = self.clone();
        f.parity ^= 1;
        f
    }
}

impl Flow {
    pub fn identity(dim: usize) -> Flow {
        Flow::Identity { dim }
    }

    pub fn diag_affine(dim: usize) -> Flow {
        Flow::DiagAffine(DiagAffineFlow {
            dim,
            log_scale: vec![0.0; dim],
            shift: vec![0.0; dim],
        })
    }

    /// Dense-conditioner coupling; two hidden layers of `hidden_width`.
    pub fn coupling(dim: usize, parity: u8, hidden_width: usize, key: RngKey) -> Flow {
        assert!(dim >= 2, "coupling needs at least two coordinates");
        let n_t = (0..dim).filter(|i| (i % 2) as u8 == parity).count();
        let n_k = dim - n_t;
        let mut rng = key.rng();
        let net = Mlp::new(vec![n_k, hidden_width, hidden_width, 2 * n_t], &mut rng);
        Flow::Coupling(CouplingFlow {
            dim,
            parity,
            net,
            cached_idx: std::sync::OnceLock::new(),
        })
    }

    /// Checkerboard conv coupling on an l x l periodic lattice.
    pub fn conv_coupling(
        lattice_side: usize,
        parity: u8,
        hidden_channels: usize,
        kernel_size: usize,
        key: RngKey,
    ) -> Flow {
        let mut rng = key.rng();
        let conv_in = Conv2d::new(1, hidden_channels, kernel_size, false, &mut rng);
        let conv_out = Conv2d::new(hidden_channels, 2, kernel_size, true, &mut rng);
        Flow::ConvCoupling(ConvCouplingFlow {
            lattice_side,
            parity,
            hidden_channels,
            kernel_size,
            conv_in,
            conv_out,
        })
    }

    pub fn composite(parts: Vec<Flow>) -> Flow {
        assert!(!parts.is_empty());
        let dim = parts[0].dim();
        assert!(parts.iter().all(|p| p.dim() == dim));
        Flow::Composite(CompositeFlow { parts })
    }

    pub fn dim(&self) -> usize {
        match self {
            Flow::Identity { dim } => *dim,
            Flow::DiagAffine(f) => f.dim,
            Flow::Coupling(f) => f.dim,
            Flow::ConvCoupling(f) => f.lattice_side * f.lattice_side,
            Flow::Composite(f) => f.parts[0].dim(),
        }
    }

    pub fn num_params(&self) -> usize {
        match self {
            Flow::Identity { .. } => 0,
            Flow::DiagAffine(f) => 2 * f.dim,
            Flow::Coupling(f) => f.net.num_params(),
            Flow::ConvCoupling(f) => f.conv_in.num_params() + f.conv_out.num_params(),
            Flow::Composite(f) => f.parts.iter().map(|p| p.num_params()).sum(),
        }
    }

    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        self.params_into(&mut out);
        out
    }

    fn params_into(&self, out: &mut Vec<f64>) {
        match self {
            Flow::Identity { .. } => {}
            Flow::DiagAffine(f) => {
                out.extend_from_slice(&f.log_scale);
                out.extend_from_slice(&f.shift);
            }
            Flow::Coupling(f) => f.net.params_into(out),
            Flow::ConvCoupling(f) => {
                f.conv_in.params_into(out);
                f.conv_out.params_into(out);
            }
            Flow::Composite(f) => {
                for p in &f.parts {
                    p.params_into(out);
                }
            }
        }
    }

    pub fn set_params(&mut self, p: &[f64]) {
        debug_assert_eq!(p.len(), self.num_params());
        match self {
            Flow::Identity { .. } => {}
            Flow::DiagAffine(f) => {
                f.log_scale.copy_from_slice(&p[..f.dim]);
                f.shift.copy_from_slice(&p[f.dim..]);
            }
            Flow::Coupling(f) => f.net.set_params(p),
            Flow::ConvCoupling(f) => {
                let n_in = f.conv_in.num_params();
                f.conv_in.set_params(&p[..n_in]);
                f.conv_out.set_params(&p[n_in..]);
            }
            Flow::Composite(f) => {
                let mut at = 0;
                for part in &mut f.parts {
                    let n = part.num_params();
                    part.set_params(&p[at..at + n]);
                    at += n;
                }
            }
        }
    }

    pub fn forward(&self, x: &[f64]) -> FlowEval {
        debug_assert_eq!(x.len(), self.dim());
        match self {
            Flow::Identity { .. } => FlowEval {
                y: x.to_vec(),
                log_det: 0.0,
                max_abs_prescale: 0.0,
            },
            Flow::DiagAffine(f) => {
                let mut y = Vec::with_capacity(f.dim);
                let mut prescale = 0.0f64;
                for i in 0..f.dim {
                    y.push(x[i] * f.log_scale[i].exp() + f.shift[i]);
                    prescale = prescale.max(f.log_scale[i].abs());
                }
                FlowEval {
                    y,
                    log_det: f.log_scale.iter().sum(),
                    max_abs_prescale: prescale,
                }
            }
            Flow::Coupling(f) => {
                let (t_idx, k_idx) = f.index_split();
                let xc: Vec<f64> = k_idx.iter().map(|&i| x[i]).collect();
                let st = f.net.forward(&xc);
                let n_t = t_idx.len();
                let mut y = x.to_vec();
                let mut log_scales = Vec::with_capacity(n_t);
                let mut prescale = 0.0f64;
                for (j, &i) in t_idx.iter().enumerate() {
                    let s = st[j];
                    let t = st[n_t + j];
                    y[i] = x[i] * s.exp() + t;
                    log_scales.push(s);
                    prescale = prescale.max(s.abs());
                }
                FlowEval {
                    y,
                    log_det: log_scales.iter().sum(),
                    max_abs_prescale: prescale,
                }
            }
            Flow::ConvCoupling(f) => {
                let (scale, shift, _, _) = f.conditioner(x);
                let mut y = x.to_vec();
                let mut log_scales = Vec::new();
                let mut prescale = 0.0f64;
                for i in 0..x.len() {
                    if f.site_transformed(i) {
                        y[i] = x[i] * scale[i].exp() + shift[i];
                        log_scales.push(scale[i]);
                        prescale = prescale.max(scale[i].abs());
                    }
                }
                // Sorted accumulation: the log-det is a function of the
                // multiset of site scales, so translations cannot change it.
                FlowEval {
                    y,
                    log_det: sorted_sum(&mut log_scales),
                    max_abs_prescale: prescale,
                }
            }
            Flow::Composite(f) => {
                let mut y = x.to_vec();
                let mut log_det = 0.0;
                let mut prescale = 0.0f64;
                for part in &f.parts {
                    let ev = part.forward(&y);
                    y = ev.y;
                    log_det += ev.log_det;
                    prescale = prescale.max(ev.max_abs_prescale);
                }
                FlowEval {
                    y,
                    log_det,
                    max_abs_prescale: prescale,
                }
            }
        }
    }

    /// Gradients of phi = <grad_y, T(x)> + grad_log_det * log_det(x) with
    /// respect to the input and the parameters.
    pub fn adjoint(&self, x: &[f64], grad_y: &[f64], grad_log_det: f64) -> (Vec<f64>, Vec<f64>) {
        match self {
            Flow::Identity { .. } => (grad_y.to_vec(), Vec::new()),
            Flow::DiagAffine(f) => {
                let mut gx = Vec::with_capacity(f.dim);
                let mut gp = vec![0.0; 2 * f.dim];
                for i in 0..f.dim {
                    let e = f.log_scale[i].exp();
                    gx.push(grad_y[i] * e);
                    gp[i] = grad_y[i] * x[i] * e + grad_log_det;
                    gp[f.dim + i] = grad_y[i];
                }
                (gx, gp)
            }
            Flow::Coupling(f) => {
                let (t_idx, k_idx) = f.index_split();
                let xc: Vec<f64> = k_idx.iter().map(|&i| x[i]).collect();
                let trace = f.net.forward_trace(&xc);
                let st = trace_output(&trace);
                let n_t = t_idx.len();
                let mut upstream = vec![0.0; 2 * n_t];
                let mut gx = grad_y.to_vec();
                for (j, &i) in t_idx.iter().enumerate() {
                    let e = st[j].exp();
                    upstream[j] = grad_y[i] * x[i] * e + grad_log_det;
                    upstream[n_t + j] = grad_y[i];
                    gx[i] = grad_y[i] * e;
                }
                let mut gp = vec![0.0; f.net.num_params()];
                let g_xc = f.net.backward(&trace, &upstream, &mut gp);
                for (j, &i) in k_idx.iter().enumerate() {
                    gx[i] += g_xc[j];
                }
                (gx, gp)
            }
            Flow::ConvCoupling(f) => {
                let l = f.lattice_side;
                let v = l * l;
                let (scale, _shift, pre_h, inp) = f.conditioner(x);
                let h: Vec<f64> =
                    pre_h.iter().map(|&z| if z > 0.0 { z } else { 0.0 }).collect();
                let mut up2 = vec![0.0; 2 * v];
                let mut gx = grad_y.to_vec();
                for i in 0..v {
                    if f.site_transformed(i) {
                        let e = scale[i].exp();
                        up2[i] = grad_y[i] * x[i] * e + grad_log_det;
                        up2[v + i] = grad_y[i];
                        gx[i] = grad_y[i] * e;
                    }
                }
                let n_in = f.conv_in.num_params();
                let mut gp = vec![0.0; n_in + f.conv_out.num_params()];
                let mut g_h = vec![0.0; h.len()];
                f.conv_out.backward(l, &h, &up2, &mut gp[n_in..], &mut g_h);
                for (g, &z) in g_h.iter_mut().zip(&pre_h) {
                    if z <= 0.0 {
                        *g = 0.0;
                    }
                }
                let mut g_inp = vec![0.0; v];
                f.conv_in.backward(l, &inp, &g_h, &mut gp[..n_in], &mut g_inp);
                for i in 0..v {
                    if !f.site_transformed(i) {
                        gx[i] += g_inp[i];
                    }
                }
                (gx, gp)
            }
            Flow::Composite(f) => {
                // Forward chain keeping intermediates, then reverse sweep.
                let mut xs: Vec<Vec<f64>> = Vec::with_capacity(f.parts.len());
                let mut cur = x.to_vec();
                for part in &f.parts {
                    xs.push(cur.clone());
                    cur = part.forward(&cur).y;
                }
                let mut g = grad_y.to_vec();
                let mut grads_rev: Vec<Vec<f64>> = Vec::with_capacity(f.parts.len());
                for (part, xin) in f.parts.iter().zip(&xs).rev() {
                    let (gx, gp) = part.adjoint(xin, &g, grad_log_det);
                    g = gx;
                    grads_rev.push(gp);
                }
                let mut gp_all = Vec::with_capacity(self.num_params());
                for gp in grads_rev.into_iter().rev() {
                    gp_all.extend(gp);
                }
                (g, gp_all)
            }
        }
    }

    /// Checkerboard-mask parity if this is a lattice coupling layer.
    pub fn conv_layer(&self) -> Option<&ConvCouplingFlow> {
        match self {
            Flow::ConvCoupling(f) => Some(f),
            _ => None,
        }
    }

    pub fn parts(&self) -> Option<&[Flow]> {
        match self {
            Flow::Composite(f) => Some(&f.parts),
            _ => None,
        }
    }
}

fn trace_output(trace: &dense::MlpTrace) -> &[f64] {
    trace.output()
}

/// Writes flows as a versioned JSON checkpoint; floats round-trip exactly.
pub fn save_flows(path: &Path, flows: &[Flow]) -> Result<()> {
    #[derive(Serialize)]
    struct Checkpoint<'a> {
        format: &'static str,
        version: u32,
        flows: &'a [Flow],
    }
    let data = serde_json::to_string_pretty(&Checkpoint {
        format: "flow-checkpoint",
        version: 1,
        flows,
    })?;
    std::fs::write(path, data)?;
    Ok(())
}

pub fn load_flows(path: &Path) -> Result<Vec<Flow>> {
    #[derive(Deserialize)]
    struct Checkpoint {
        format: String,
        version: u32,
        flows: Vec<Flow>,
    }
    let data = std::fs::read_to_string(path)?;
    let ckpt: Checkpoint = serde_json::from_str(&data)?;
    if ckpt.format != "flow-checkpoint" || ckpt.version != 1 {
        return Err(CraftError::InvalidConfig(vec![format!(
            "unsupported checkpoint format {}/{}",
            ckpt.format, ckpt.version
        )]));
    }
    Ok(ckpt.flows)
}
