//! Small dense complex helpers for the k×k algebra inside the hot loops.
//!
//! Matrices are row-major `Vec<Complex64>` of side `k`. The factorization
//! stage uses nalgebra; these routines exist so the per-grid-point work does
//! not allocate.

use num_complex::Complex64;

use crate::error::{Error, Result};

pub(crate) type C64 = Complex64;

pub(crate) const ZERO: C64 = C64 { re: 0.0, im: 0.0 };
pub(crate) const ONE: C64 = C64 { re: 1.0, im: 0.0 };

/// Solves `a x = rhs` in place by Gaussian elimination with partial pivoting.
/// `a` is destroyed; the solution overwrites `rhs`.
pub(crate) fn solve_in_place(a: &mut [C64], k: usize, rhs: &mut [C64]) -> Result<()> {
    debug_assert_eq!(a.len(), k * k);
    debug_assert_eq!(rhs.len(), k);
    let scale = a.iter().map(|z| z.norm()).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    for col in 0..k {
        let mut piv = col;
        let mut best = a[col * k + col].norm();
        for row in col + 1..k {
            let m = a[row * k + col].norm();
            if m > best {
                best = m;
                piv = row;
            }
        }
        if best <= 1e-14 * scale {
            return Err(Error::Singular(format!(
                "pivot {best:e} at column {col} of a {k}x{k} system"
            )));
        }
        if piv != col {
            for j in 0..k {
                a.swap(col * k + j, piv * k + j);
            }
            rhs.swap(col, piv);
        }
        let d = a[col * k + col];
        for row in col + 1..k {
            let f = a[row * k + col] / d;
            if f == ZERO {
                continue;
            }
            for j in col..k {
                let v = a[col * k + j];
                a[row * k + j] -= f * v;
            }
            let r = rhs[col];
            rhs[row] -= f * r;
        }
    }
    for col in (0..k).rev() {
        let mut s = rhs[col];
        for j in col + 1..k {
            s -= a[col * k + j] * rhs[j];
        }
        rhs[col] = s / a[col * k + col];
    }
    Ok(())
}

/// `exp(z) - 1` accurate for small |z|.
pub(crate) fn expm1(z: C64) -> C64 {
    if z.norm() < 1e-3 {
        // Horner on z + z²/2 + … + z⁶/720
        let mut acc = ONE;
        for n in (2..=7).rev() {
            acc = ONE + acc * z / n as f64;
        }
        acc * z
    } else {
        z.exp() - ONE
    }
}

/// `(exp(x) - exp(y)) / (x - y)`, with the limit `exp(x)` when `x ≈ y`.
pub(crate) fn exp_divided_difference(x: C64, y: C64) -> C64 {
    let d = x - y;
    if d.norm() == 0.0 {
        return x.exp();
    }
    // exp(y)·expm1(d)/d
    y.exp() * expm1(d) / d
}
