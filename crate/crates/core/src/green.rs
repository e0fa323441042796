//! Green's function of `L_* = v·I + Δ·L` and its `t`-derivatives.
//!
//! [`green_eval`] uses the rearranged form in which every exponential has a
//! non-positive real rate; [`green_eval_naive`] assembles the explicit
//! boundary-matrix form and is only usable while `exp((b-a)·|Re η|)` fits in
//! a double.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::cmat::{self, C64, ONE, ZERO};
use crate::error::{Error, Result};
use crate::operator::SpectralFactorization;

/// Largest `|Re η|·(b - a)` accepted by the explicit form.
pub const NAIVE_EXPONENT_GUARD: f64 = 300.0;
/// Relative size of the imaginary part tolerated in a real-valued result.
pub const IMAG_TOL: f64 = 1e-8;

/// The row vectors `φ_μ(t)` and `ψ_μ(t)` weighting the two branches of the
/// stable kernel.
#[derive(Debug, Clone)]
pub struct PhiPsi {
    pub t: f64,
    pub mu_order: usize,
    pub phi: Vec<Complex64>,
    pub psi: Vec<Complex64>,
}

/// Decaying exponentials at a point `t`.
#[derive(Debug, Clone)]
pub(crate) struct PointExp {
    /// `exp((t-a)η⁻)`
    pub em_ta: Vec<C64>,
    /// `exp((b-t)η⁻)`
    pub em_bt: Vec<C64>,
    /// `exp(-(t-a)η⁺)`
    pub ep_ta: Vec<C64>,
    /// `exp(-(b-t)η⁺)`
    pub ep_bt: Vec<C64>,
}

impl PointExp {
    pub(crate) fn new(fac: &SpectralFactorization, t: f64) -> Self {
        let (ta, bt) = (t - fac.a, fac.b - t);
        Self {
            em_ta: fac.exp_minus(ta),
            em_bt: fac.exp_minus(bt),
            ep_ta: fac.exp_plus(ta),
            ep_bt: fac.exp_plus(bt),
        }
    }
}

/// Reusable buffers for contracting `φ_μ(t)` and `ψ_μ(t)` against vectors
/// without forming them explicitly.
pub(crate) struct Contractor {
    k: usize,
    q: Vec<C64>,
    pub(crate) x_phi: Vec<C64>,
    pub(crate) x_psi: Vec<C64>,
    powers_m: Vec<Vec<C64>>,
    powers_p: Vec<Vec<C64>>,
}

impl Contractor {
    pub(crate) fn new(fac: &SpectralFactorization, max_mu: usize) -> Self {
        let k = fac.k;
        let pw = |eta: &[C64]| -> Vec<Vec<C64>> {
            (0..=max_mu)
                .map(|m| eta.iter().map(|e| e.powu(m as u32)).collect())
                .collect()
        };
        Self {
            k,
            q: vec![ZERO; k * k],
            x_phi: vec![ZERO; k],
            x_psi: vec![ZERO; k],
            powers_m: pw(&fac.eta_minus),
            powers_p: pw(&fac.eta_plus),
        }
    }

    /// Solves `Q_φ(t) x = forward` and `Q_ψ(t) x = backward`, storing the
    /// results; afterwards [`Self::phi_dot`] and [`Self::psi_dot`] give
    /// `α·φ_μ(t)·forward` and `α·ψ_μ(t)·backward`.
    pub(crate) fn prepare(
        &mut self,
        fac: &SpectralFactorization,
        pe: &PointExp,
        forward: &[C64],
        backward: &[C64],
    ) -> Result<()> {
        let k = self.k;
        for i in 0..k {
            for j in 0..k {
                let d = if i == j { ONE } else { ZERO };
                self.q[i * k + j] = d - pe.em_ta[i] * fac.x_mat[(i, j)] * pe.em_bt[j];
            }
        }
        self.x_phi.copy_from_slice(forward);
        cmat::solve_in_place(&mut self.q, k, &mut self.x_phi)?;
        for i in 0..k {
            for j in 0..k {
                let d = if i == j { ONE } else { ZERO };
                self.q[i * k + j] = d - pe.ep_bt[i] * fac.y_mat[(i, j)] * pe.ep_ta[j];
            }
        }
        self.x_psi.copy_from_slice(backward);
        cmat::solve_in_place(&mut self.q, k, &mut self.x_psi)?;
        Ok(())
    }

    /// `(v1 J₋^μ − v1 J₊^μ e^{-(b-t)J₊} P_b e^{(b-t)J₋}) · x_phi`
    pub(crate) fn phi_dot(&self, fac: &SpectralFactorization, pe: &PointExp, mu: usize) -> C64 {
        let k = self.k;
        let pm = &self.powers_m[mu];
        let pp = &self.powers_p[mu];
        let mut acc = ZERO;
        for j in 0..k {
            let mut u = pm[j];
            let mut corr = ZERO;
            for i in 0..k {
                corr += pp[i] * pe.ep_bt[i] * fac.pb[(i, j)];
            }
            u -= corr * pe.em_bt[j];
            acc += u * self.x_phi[j];
        }
        acc
    }

    /// `(v1 J₊^μ − v1 J₋^μ e^{(t-a)J₋} P_a e^{-(t-a)J₊}) · x_psi`
    pub(crate) fn psi_dot(&self, fac: &SpectralFactorization, pe: &PointExp, mu: usize) -> C64 {
        let k = self.k;
        let pm = &self.powers_m[mu];
        let pp = &self.powers_p[mu];
        let mut acc = ZERO;
        for j in 0..k {
            let mut u = pp[j];
            let mut corr = ZERO;
            for i in 0..k {
                corr += pm[i] * pe.em_ta[i] * fac.pa[(i, j)];
            }
            u -= corr * pe.ep_ta[j];
            acc += u * self.x_psi[j];
        }
        acc
    }
}

fn check_order(fac: &SpectralFactorization, mu: usize) -> Result<()> {
    let max = 2 * fac.k - 1;
    if mu > max {
        return Err(Error::OrderTooLarge { mu, max });
    }
    Ok(())
}

fn check_point(fac: &SpectralFactorization, t: f64) -> Result<()> {
    if t >= fac.a && t <= fac.b {
        Ok(())
    } else {
        Err(Error::OutsideDomain { t, a: fac.a, b: fac.b })
    }
}

pub(crate) fn real_part(z: C64, scale: f64) -> Result<f64> {
    if !(z.re.is_finite() && z.im.is_finite()) {
        return Err(Error::NonFinite(format!("{z}")));
    }
    if z.im.abs() > IMAG_TOL * (z.re.abs() + scale) {
        return Err(Error::ImaginaryResidual { value: z.re, imag: z.im });
    }
    Ok(z.re)
}

/// `φ_μ(t)` and `ψ_μ(t)` as explicit row vectors.
pub fn phi_psi(fac: &SpectralFactorization, t: f64, mu: usize) -> Result<PhiPsi> {
    check_order(fac, mu)?;
    check_point(fac, t)?;
    let k = fac.k;
    let pe = PointExp::new(fac, t);
    let mut ctr = Contractor::new(fac, mu);
    let mut phi = vec![ZERO; k];
    let mut psi = vec![ZERO; k];
    // Row vector u·Q⁻¹ is recovered one unit vector at a time.
    let mut e = vec![ZERO; k];
    for j in 0..k {
        e.iter_mut().for_each(|x| *x = ZERO);
        e[j] = ONE;
        ctr.prepare(fac, &pe, &e, &e)?;
        phi[j] = ctr.phi_dot(fac, &pe, mu) / fac.leading;
        psi[j] = ctr.psi_dot(fac, &pe, mu) / fac.leading;
    }
    Ok(PhiPsi {
        t,
        mu_order: mu,
        phi,
        psi,
    })
}

/// `∂_t^μ G_*(t, s)` from the stable form. At `t = s` the `s ≤ t` branch is
/// used, so for `μ ≥ 1` the result is the limit from the left in `s`.
pub fn green_eval(fac: &SpectralFactorization, t: f64, s: f64, mu: usize) -> Result<f64> {
    check_order(fac, mu)?;
    check_point(fac, t)?;
    check_point(fac, s)?;
    let k = fac.k;
    let pe = PointExp::new(fac, t);
    let mut ctr = Contractor::new(fac, mu);
    let mut bracket = vec![ZERO; k];
    let zeros = vec![ZERO; k];
    let value;
    if s <= t {
        // e^{(t-s)J₋}(v₋ + e^{(s-a)J₋} P_a e^{-(s-a)J₊} v₊)
        let em_sa = fac.exp_minus(s - fac.a);
        let ep_sa = fac.exp_plus(s - fac.a);
        let em_ts = fac.exp_minus(t - s);
        let w: Vec<C64> = fac.vp.iter().zip(&ep_sa).map(|(v, e)| v * e).collect();
        let mut pw = vec![ZERO; k];
        mat_vec(&fac.pa, &w, &mut pw);
        for i in 0..k {
            bracket[i] = em_ts[i] * (fac.vm[i] + em_sa[i] * pw[i]);
        }
        ctr.prepare(fac, &pe, &bracket, &zeros)?;
        value = ctr.phi_dot(fac, &pe, mu) / fac.leading;
    } else {
        // -e^{-(s-t)J₊}(v₊ + e^{-(b-s)J₊} P_b e^{(b-s)J₋} v₋)
        let em_bs = fac.exp_minus(fac.b - s);
        let ep_bs = fac.exp_plus(fac.b - s);
        let ep_st = fac.exp_plus(s - t);
        let w: Vec<C64> = fac.vm.iter().zip(&em_bs).map(|(v, e)| v * e).collect();
        let mut pw = vec![ZERO; k];
        mat_vec(&fac.pb, &w, &mut pw);
        for i in 0..k {
            bracket[i] = ep_st[i] * (fac.vp[i] + ep_bs[i] * pw[i]);
        }
        ctr.prepare(fac, &pe, &zeros, &bracket)?;
        value = -ctr.psi_dot(fac, &pe, mu) / fac.leading;
    }
    let scale = bracket.iter().map(|z| z.norm()).sum::<f64>()
        * fac.eta_minus.iter().chain(&fac.eta_plus).map(|e| e.norm().powi(mu as i32)).sum::<f64>()
        / fac.leading.abs();
    real_part(value, scale)
}

pub(crate) fn mat_vec(m: &DMatrix<C64>, x: &[C64], out: &mut [C64]) {
    for i in 0..m.nrows() {
        out[i] = (0..m.ncols()).map(|j| m[(i, j)] * x[j]).sum();
    }
}

/// Explicit-form kernel assembled from `H = F̄_a W e^{aJ} + F̄_b W e^{bJ}`.
///
/// The kernel is translation invariant, so the interval is shifted to start
/// at zero before exponentiating.
pub fn green_eval_naive(fac: &SpectralFactorization, t: f64, s: f64, mu: usize) -> Result<f64> {
    check_order(fac, mu)?;
    check_point(fac, t)?;
    check_point(fac, s)?;
    let k = fac.k;
    let n = 2 * k;
    let len = fac.b - fac.a;
    let roots = fac.roots();
    let exponent = roots.iter().map(|z| z.re.abs()).fold(0.0, f64::max) * len;
    if exponent > NAIVE_EXPONENT_GUARD {
        return Err(Error::OverflowGuard { exponent });
    }
    let (t, s) = (t - fac.a, s - fac.a);
    let mut w = DMatrix::<C64>::zeros(n, n);
    w.view_mut((0, 0), (n, k)).copy_from(&fac.wm);
    w.view_mut((0, k), (n, k)).copy_from(&fac.wp);
    let exp_diag = |x: f64| DMatrix::from_diagonal(&DVector::from_iterator(n, roots.iter().map(|e| (e * x).exp())));
    let fa_bar = stack(&fac.fa, true, k);
    let fb_bar = stack(&fac.fb, false, k);
    let h = &fa_bar * &w + &fb_bar * &w * exp_diag(len);
    let h_inv = h
        .try_inverse()
        .ok_or_else(|| Error::Singular("boundary matrix H".into()))?;
    let wv2 = DVector::from_iterator(n, fac.vm.iter().chain(&fac.vp).copied());
    let row = DMatrix::from_fn(1, n, |_, j| roots[j].powu(mu as u32)) * exp_diag(t) * h_inv;
    let g = if s <= t {
        (row * &fa_bar * &w * exp_diag(-s) * &wv2)[(0, 0)]
    } else {
        -(row * &fb_bar * &w * exp_diag(len - s) * &wv2)[(0, 0)]
    };
    let g = g / fac.leading;
    real_part(g, 0.0).or_else(|e| match e {
        // the explicit form cancels large terms; judge realness against them
        Error::ImaginaryResidual { value, imag } if imag.abs() <= 1e-6 * value.abs().max(1e-12) => Ok(value),
        other => Err(other),
    })
}

fn stack(f: &DMatrix<f64>, top: bool, k: usize) -> DMatrix<C64> {
    let mut out = DMatrix::<C64>::zeros(2 * k, 2 * k);
    let off = if top { 0 } else { k };
    for i in 0..k {
        for j in 0..2 * k {
            out[(off + i, j)] = C64::new(f[(i, j)], 0.0);
        }
    }
    out
}

/// The terms of `G_*(t, t)` in the form used for closed-form integration
/// over `[a, b]`, evaluated pointwise. Term order matches
/// [`crate::logdet::DiagIntegralParts::terms`].
pub(crate) fn diag_terms(fac: &SpectralFactorization, t: f64) -> [C64; 8] {
    let k = fac.k;
    let pe = PointExp::new(fac, t);
    let em_ba = fac.exp_minus(fac.b - fac.a);
    let (pa, pb, bm) = (&fac.pa, &fac.pb, &fac.b_mat);
    // quadratic form v1 · D_l · M · D_r · w
    let form = |left: &[C64], m: &DMatrix<C64>, right: &[C64], w: &[C64]| -> C64 {
        let mut acc = ZERO;
        for i in 0..k {
            for j in 0..k {
                acc += left[i] * m[(i, j)] * right[j] * w[j];
            }
        }
        acc
    };
    let ones = vec![ONE; k];
    let id = DMatrix::<C64>::identity(k, k);
    let b_em_pa = bm * diag_left(&em_ba, pa);
    let pb_em_b = pb * diag_left(&em_ba, bm);
    let pb_em_b_em_pa = &pb_em_b * diag_left(&em_ba, pa);
    let pb_em_pa = pb * diag_left(&em_ba, pa);
    let alpha = fac.leading;
    [
        form(&ones, &id, &ones, &fac.vm),
        form(&pe.em_ta, pa, &pe.ep_ta, &fac.vp),
        -form(&pe.ep_bt, pb, &pe.em_bt, &fac.vm),
        -form(&pe.ep_bt, &pb_em_pa, &pe.ep_ta, &fac.vp),
        form(&pe.em_ta, bm, &pe.em_bt, &fac.vm),
        form(&pe.em_ta, &b_em_pa, &pe.ep_ta, &fac.vp),
        -form(&pe.ep_bt, &pb_em_b, &pe.em_bt, &fac.vm),
        -form(&pe.ep_bt, &pb_em_b_em_pa, &pe.ep_ta, &fac.vp),
    ]
    .map(|z| z / alpha)
}

fn diag_left(d: &[C64], m: &DMatrix<C64>) -> DMatrix<C64> {
    crate::operator::diag_left(d, m)
}

/// `G_*(t, t)` via the rearrangement `(I - X)⁻¹ = I + X(I - X)⁻¹`, which
/// removes the growing factor `e^{-(b-t)J₋}`.
pub fn green_diag_stable(fac: &SpectralFactorization, t: f64) -> Result<f64> {
    check_point(fac, t)?;
    let terms = diag_terms(fac, t);
    let total: C64 = terms.iter().sum();
    let scale = terms.iter().map(|z| z.norm()).sum();
    real_part(total, scale)
}
