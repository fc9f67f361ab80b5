//! Scalar and small dense linear-algebra helpers.
//!
//! Everything is plain `f64`. Two routines are deliberately order-insensitive:
//! [`sorted_sum`] sorts its addends so the result is invariant under any
//! permutation of the inputs, which the lattice code relies on for exact
//! translation invariance of actions and coupling log-determinants.

/// Log of the sum of exponentials, shifted by the maximum for stability.
///
/// Empty input and all-(-inf) input both return -inf. NaN propagates.
pub fn logsumexp(xs: &[f64]) -> f64 {
    let mut m = f64::NEG_INFINITY;
    for &x in xs {
        if x.is_nan() {
            return f64::NAN;
        }
        if x > m {
            m = x;
        }
    }
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let sum: f64 = xs.iter().map(|&x| (x - m).exp()).sum();
    m + sum.ln()
}

/// Sum that cannot depend on the order the values were produced in.
///
/// Sorts by the IEEE total order first; identical multisets of addends give
/// bit-identical results regardless of the caller's traversal order.
pub fn sorted_sum(values: &mut [f64]) -> f64 {
    values.sort_unstable_by(f64::total_cmp);
    values.iter().sum()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// In-place lower-triangular Cholesky factor of a symmetric positive-definite
/// matrix in row-major order. The strict upper triangle is zeroed.
pub fn cholesky_in_place(a: &mut [f64], n: usize) -> Result<(), String> {
    debug_assert_eq!(a.len(), n * n);
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            d -= a[j * n + k] * a[j * n + k];
        }
        if d <= 0.0 || !d.is_finite() {
            return Err(format!("matrix not positive definite at pivot {j}"));
        }
        let d = d.sqrt();
        a[j * n + j] = d;
        for i in (j + 1)..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= a[i * n + k] * a[j * n + k];
            }
            a[i * n + j] = s / d;
        }
        for i in 0..j {
            a[i * n + j] = 0.0;
        }
    }
    Ok(())
}

/// Solves L x = b in place for lower-triangular L.
pub fn solve_lower(l: &[f64], n: usize, b: &mut [f64]) {
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i * n + k] * b[k];
        }
        b[i] = s / l[i * n + i];
    }
}

/// Solves L^T x = b in place for lower-triangular L.
pub fn solve_lower_transpose(l: &[f64], n: usize, b: &mut [f64]) {
    for i in (0..n).rev() {
        let mut s = b[i];
        for k in (i + 1)..n {
            s -= l[k * n + i] * b[k];
        }
        b[i] = s / l[i * n + i];
    }
}

/// y = L x for lower-triangular L.
pub fn lower_mul(l: &[f64], n: usize, x: &[f64], y: &mut [f64]) {
    for i in 0..n {
        let mut s = 0.0;
        for k in 0..=i {
            s += l[i * n + k] * x[k];
        }
        y[i] = s;
    }
}

/// y = L^T x for lower-triangular L.
pub fn lower_transpose_mul(l: &[f64], n: usize, x: &[f64], y: &mut [f64]) {
    for i in 0..n {
        let mut s = 0.0;
        for k in i..n {
            s += l[k * n + i] * x[k];
        }
        y[i] = s;
    }
}

/// Piecewise-linear interpolation through (points, values), clamped at the
/// ends. Points must be strictly increasing.
pub fn linear_interp(points: &[f64], values: &[f64], x: f64) -> f64 {
    debug_assert_eq!(points.len(), values.len());
    debug_assert!(!points.is_empty());
    if x <= points[0] {
        return values[0];
    }
    if x >= points[points.len() - 1] {
        return values[values.len() - 1];
    }
    let mut hi = 1;
    while points[hi] < x {
        hi += 1;
    }
    let lo = hi - 1;
    let t = (x - points[lo]) / (points[hi] - points[lo]);
    values[lo] + t * (values[hi] - values[lo])
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    /// Double-double accumulation of sum(exp(x - m)): an independent
    /// higher-precision path for checking logsumexp.
    fn logsumexp_reference(xs: &[f64]) -> f64 {
        let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if m == f64::NEG_INFINITY {
            return f64::NEG_INFINITY;
        }
        // Two-float (hi, lo) running sum via the two-sum trick.
        let (mut hi, mut lo) = (0.0f64, 0.0f64);
        let mut terms: Vec<f64> = xs.iter().map(|&x| (x - m).exp()).collect();
        terms.sort_unstable_by(f64::total_cmp);
        for t in terms {
            let s = hi + t;
            let e = if hi.abs() >= t.abs() {
                (hi - s) + t
            } else {
                (t - s) + hi
            };
            lo += e;
            hi = s;
        }
        m + (hi + lo).ln()
    }

    #[test]
    fn logsumexp_matches_high_precision_reference() {
        let mut state = 0x2545f4914f6cdd1du64;
        let mut next = move || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 11) as f64 / (1u64 << 53) as f64
        };
        for n in [1usize, 2, 10, 1000] {
            let xs: Vec<f64> = (0..n).map(|_| 200.0 * next() - 100.0).collect();
            let got = logsumexp(&xs);
            let want = logsumexp_reference(&xs);
            assert_relative_eq!(got, want, max_relative = 1e-13);
        }
    }

    #[test]
    fn logsumexp_edge_cases() {
        assert_eq!(logsumexp(&[]), f64::NEG_INFINITY);
        assert_eq!(
            logsumexp(&[f64::NEG_INFINITY, f64::NEG_INFINITY]),
            f64::NEG_INFINITY
        );
        // A single spike dominates exactly.
        assert_eq!(logsumexp(&[0.0, f64::NEG_INFINITY, f64::NEG_INFINITY]), 0.0);
        assert!(logsumexp(&[f64::NAN, 0.0]).is_nan());
        // Huge shifts must not overflow.
        let v = logsumexp(&[1e308f64.ln(), 1e308f64.ln()]);
        assert!(v.is_finite());
    }

    #[test]
    fn sorted_sum_is_permutation_invariant() {
        let mut a = vec![1e16, 1.0, -1e16, 3.5, 0.25, -7.125];
        let mut b = vec![3.5, -1e16, 0.25, 1.0, -7.125, 1e16];
        assert_eq!(sorted_sum(&mut a).to_bits(), sorted_sum(&mut b).to_bits());
    }

    #[test]
    fn cholesky_reconstructs_spd_matrix() {
        // A = B B^T + n I is SPD for any B.
        let n = 5;
        let mut b = vec![0.0; n * n];
        for (i, v) in b.iter_mut().enumerate() {
            *v = ((i * 2654435761) % 97) as f64 / 97.0 - 0.5;
        }
        let mut a = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                let mut s = 0.0;
                for k in 0..n {
                    s += b[i * n + k] * b[j * n + k];
                }
                a[i * n + j] = s + if i == j { n as f64 } else { 0.0 };
            }
        }
        let mut l = a.clone();
        cholesky_in_place(&mut l, n).unwrap();
        for i in 0..n {
            for j in 0..n {
                let mut s = 0.0;
                for k in 0..n {
                    s += l[i * n + k] * l[j * n + k];
                }
                assert_relative_eq!(s, a[i * n + j], max_relative = 1e-12);
            }
        }
        // Solve round-trip: L (L^T x) = A x.
        let x: Vec<f64> = (0..n).map(|i| i as f64 - 2.0).collect();
        let mut ax = vec![0.0; n];
        for i in 0..n {
            ax[i] = dot(&a[i * n..(i + 1) * n], &x);
        }
        let mut y = ax.clone();
        solve_lower(&l, n, &mut y);
        solve_lower_transpose(&l, n, &mut y);
        for i in 0..n {
            assert_relative_eq!(y[i], x[i], max_relative = 1e-10);
        }
    }

    #[test]
    fn interp_clamps_and_interpolates() {
        let p = [0.0, 0.25, 0.5, 1.0];
        let v = [0.3, 0.3, 0.2, 0.2];
        assert_eq!(linear_interp(&p, &v, -1.0), 0.3);
        assert_eq!(linear_interp(&p, &v, 0.0), 0.3);
        assert_eq!(linear_interp(&p, &v, 0.1), 0.3);
        assert_relative_eq!(linear_interp(&p, &v, 0.375), 0.25, epsilon = 1e-15);
        assert_eq!(linear_interp(&p, &v, 0.75), 0.2);
        assert_eq!(linear_interp(&p, &v, 2.0), 0.2);
    }

    proptest! {
        #[test]
        fn logsumexp_shift_invariant(
            xs in proptest::collection::vec(-50.0f64..50.0, 1..40),
            c in -30.0f64..30.0,
        ) {
            let shifted: Vec<f64> = xs.iter().map(|x| x + c).collect();
            let a = logsumexp(&xs) + c;
            let b = logsumexp(&shifted);
            prop_assert!((a - b).abs() <= 1e-10 * (1.0 + a.abs()));
        }

        #[test]
        fn logsumexp_bounds(xs in proptest::collection::vec(-50.0f64..50.0, 1..40)) {
            let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let v = logsumexp(&xs);
            prop_assert!(v >= m - 1e-12);
            prop_assert!(v <= m + (xs.len() as f64).ln() + 1e-12);
        }

        #[test]
        fn sorted_sum_shuffle_stable(
            mut xs in proptest::collection::vec(-1e6f64..1e6, 1..60),
            rot in 0usize..59,
        ) {
            let mut ys = xs.clone();
            let r = rot % ys.len();
            ys.rotate_left(r);
            prop_assert_eq!(sorted_sum(&mut xs).to_bits(), sorted_sum(&mut ys).to_bits());
        }
    }
}
