//! Linear-time evaluation of `∂_t^μ (I + ΔL)⁻¹ E_z` at every grid point.
//!
//! The kernel splits into a part decaying forward in `t` (rates `η⁻`) and
//! a part decaying backward (rates `η⁺`). Each part is accumulated by a
//! scan that multiplies by `e^{ΔJ₋}` or `e^{-ΔJ₊}`, so no accumulator grows.

use nalgebra::DMatrix;

use crate::cmat::{C64, ZERO};
use crate::error::{Error, Result};
use crate::green::{real_part, Contractor, PointExp};
use crate::grid::Grid;
use crate::operator::SpectralFactorization;

/// Below this `|Δη|` the weights are evaluated from their Taylor series.
pub const XI_SERIES_THRESHOLD: f64 = 0.5;
const SERIES_TERMS: usize = 24;
/// Relative agreement required between the grid mesh and the factorization.
const MESH_TOL: f64 = 1e-9;

/// Integrals of the exponential modes against the hat functions of the
/// piecewise-linear embedding.
#[derive(Debug, Clone)]
pub struct XiWeights {
    /// `(e^{Δη⁻/2} - 1)/η⁻`, the half cell at `a`.
    pub xi_m: Vec<C64>,
    /// `(1 - e^{-Δη⁺/2})/η⁺`, the half cell at `b`.
    pub xi_p: Vec<C64>,
    pub xi_m0: Vec<C64>,
    pub xi_p0: Vec<C64>,
    pub xi_m1: Vec<C64>,
    pub xi_p1: Vec<C64>,
}

/// `expm1(x)/x`
fn e1(x: C64) -> C64 {
    if x.norm() < XI_SERIES_THRESHOLD {
        // Σ x^n/(n+1)!
        let mut acc = C64::new(1.0, 0.0);
        for n in (1..SERIES_TERMS).rev() {
            acc = 1.0 + acc * x / (n + 1) as f64;
        }
        acc
    } else {
        crate::cmat::expm1(x) / x
    }
}

/// `(1 - (1 - x)eˣ)/x²`
fn f0(x: C64) -> C64 {
    if x.norm() < XI_SERIES_THRESHOLD {
        // Σ_{n≥2} (n-1)/n! x^{n-2}
        let mut term = C64::new(0.5, 0.0);
        let mut acc = term;
        for n in 3..SERIES_TERMS + 2 {
            term = term * x * ((n - 1) as f64 / ((n - 2) as f64 * n as f64));
            acc += term;
        }
        acc
    } else {
        (1.0 - (1.0 - x) * x.exp()) / (x * x)
    }
}

/// `(eˣ - 1 - x)/x²`
fn f1(x: C64) -> C64 {
    if x.norm() < XI_SERIES_THRESHOLD {
        // Σ_{n≥2} x^{n-2}/n!
        let mut acc = C64::new(1.0, 0.0);
        for n in (3..SERIES_TERMS + 2).rev() {
            acc = 1.0 + acc * x / n as f64;
        }
        acc * 0.5
    } else {
        (crate::cmat::expm1(x) - x) / (x * x)
    }
}

pub fn xi_weights(fac: &SpectralFactorization) -> XiWeights {
    let d = fac.delta;
    let xm: Vec<C64> = fac.eta_minus.iter().map(|e| e * d).collect();
    let xp: Vec<C64> = fac.eta_plus.iter().map(|e| e * d).collect();
    XiWeights {
        xi_m: xm.iter().map(|&x| 0.5 * d * e1(0.5 * x)).collect(),
        xi_p: xp.iter().map(|&x| 0.5 * d * e1(-0.5 * x)).collect(),
        xi_m0: xm.iter().map(|&x| d * f0(x)).collect(),
        xi_m1: xm.iter().map(|&x| d * f1(x)).collect(),
        xi_p0: xp.iter().map(|&x| d * f1(-x)).collect(),
        xi_p1: xp.iter().map(|&x| d * f0(-x)).collect(),
    }
}

/// Values `∂_t^μ (I + ΔL)⁻¹ E_z(t_n)`, one column per requested order.
#[derive(Debug, Clone)]
pub struct SolveResult<'g> {
    pub grid: &'g Grid,
    pub orders: Vec<usize>,
    pub values: DMatrix<f64>,
}

impl SolveResult<'_> {
    /// Column for the `i`-th requested order.
    pub fn column(&self, i: usize) -> Vec<f64> {
        self.values.column(i).iter().copied().collect()
    }
}

fn check_solve_inputs(fac: &SpectralFactorization, grid: &Grid, z: &[f64], orders: &[usize]) -> Result<f64> {
    let delta = grid.mesh().ok_or(Error::NotEquidistant)?;
    if z.len() != grid.len() {
        return Err(Error::Dimension(format!("z has length {}, grid has {} points", z.len(), grid.len())));
    }
    if fac.v != 1.0 {
        return Err(Error::InvalidArgument(format!("solve needs v = 1, factorization has v = {}", fac.v)));
    }
    let width = grid.width();
    if (fac.delta - delta).abs() > MESH_TOL * delta
        || (fac.a - grid.a()).abs() > MESH_TOL * width
        || (fac.b - grid.b()).abs() > MESH_TOL * width
    {
        return Err(Error::InvalidArgument(format!(
            "factorization built for mesh {} on [{}, {}], grid has mesh {delta} on [{}, {}]",
            fac.delta,
            fac.a,
            fac.b,
            grid.a(),
            grid.b()
        )));
    }
    let max = 2 * fac.k - 1;
    if let Some(&mu) = orders.iter().find(|&&mu| mu > max) {
        return Err(Error::OrderTooLarge { mu, max });
    }
    if z.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("input vector".into()));
    }
    Ok(delta)
}

fn mul(a: &[C64], b: &[C64]) -> Vec<C64> {
    a.iter().zip(b).map(|(x, y)| x * y).collect()
}

/// Applies `∂_t^μ (I + ΔL)⁻¹ E_z` at all grid points in `O(N·k²)` time.
///
/// `fac` must be the factorization of `I + ΔL` (ridge `v = 1`) with `Δ`
/// equal to the grid mesh.
pub fn solve_grid<'g>(
    fac: &SpectralFactorization,
    grid: &'g Grid,
    z: &[f64],
    orders: &[usize],
) -> Result<SolveResult<'g>> {
    check_solve_inputs(fac, grid, z, orders)?;
    let n = grid.len();
    let k = fac.k;
    let t = grid.points();
    let (a, b) = (fac.a, fac.b);
    let xi = xi_weights(fac);
    let dm = fac.exp_minus(fac.delta);
    let dp = fac.exp_plus(fac.delta);

    let w1 = mul(&fac.vm, &xi.xi_m0);
    let w2_first = mul(&fac.vm, &xi.xi_m);
    let w2 = mul(&fac.vm, &xi.xi_m1);
    let w3 = mul(&fac.vp, &xi.xi_p0);
    let w3_last = mul(&fac.vp, &xi.xi_p);
    let w4 = mul(&fac.vp, &xi.xi_p1);
    let (w5, w6_first, w6) = (&w3, &mul(&fac.vp, &xi.xi_p), &w4);
    let (w7, w7_last, w8) = (&w1, &w2_first, &w2);

    // Forward pass: everything multiplied by φ_μ(t_n).
    let mut forward = vec![ZERO; n * k];
    let mut s1 = vec![ZERO; k];
    let mut s2 = vec![ZERO; k];
    let mut s56 = vec![ZERO; k];
    let mut tmp = vec![ZERO; k];
    let mut ep_prev = vec![C64::new(1.0, 0.0); k];
    for i in 0..n {
        let zi = z[i];
        let ep_ta = fac.exp_plus(t[i] - a);
        let em_ta = fac.exp_minus(t[i] - a);
        for r in 0..k {
            if i > 0 {
                s1[r] = dm[r] * s1[r] + w1[r] * z[i - 1];
                s2[r] = dm[r] * s2[r] + w2[r] * zi;
                s56[r] += ep_prev[r] * w6[r] * zi;
            } else {
                s2[r] = w2_first[r] * zi;
                s56[r] = w6_first[r] * zi;
            }
        }
        crate::green::mat_vec(&fac.pa, &s56, &mut tmp);
        let f = &mut forward[i * k..(i + 1) * k];
        for r in 0..k {
            f[r] = s1[r] + s2[r] + em_ta[r] * tmp[r];
        }
        // the j = i term of the ξ₊⁰ sum enters from the next point on
        for r in 0..k {
            s56[r] += ep_ta[r] * w5[r] * zi;
        }
        ep_prev = ep_ta;
    }

    // Backward pass: accumulate the ψ_μ(t_n) terms and contract.
    let max_mu = orders.iter().copied().max().unwrap_or(0);
    let mut ctr = Contractor::new(fac, max_mu);
    let mut values = DMatrix::<f64>::zeros(n, orders.len());
    let mut t3 = vec![ZERO; k];
    let mut t4 = vec![ZERO; k];
    let mut t78 = vec![ZERO; k];
    let mut back = vec![ZERO; k];
    for i in (0..n).rev() {
        let zi = z[i];
        let pe = PointExp::new(fac, t[i]);
        for r in 0..k {
            if i + 1 < n {
                let em_next = (fac.eta_minus[r] * (b - t[i + 1])).exp();
                t3[r] = dp[r] * t3[r] + w3[r] * zi;
                t4[r] = dp[r] * t4[r] + w4[r] * z[i + 1];
                t78[r] += em_next * (w7[r] * zi + w8[r] * z[i + 1]);
            } else {
                t3[r] = w3_last[r] * zi;
                t78[r] = w7_last[r] * zi;
            }
        }
        crate::green::mat_vec(&fac.pb, &t78, &mut tmp);
        for r in 0..k {
            back[r] = t3[r] + t4[r] + pe.ep_bt[r] * tmp[r];
        }
        ctr.prepare(fac, &pe, &forward[i * k..(i + 1) * k], &back)?;
        for (c, &mu) in orders.iter().enumerate() {
            let fwd = ctr.phi_dot(fac, &pe, mu);
            let bwd = ctr.psi_dot(fac, &pe, mu);
            let scale = (fwd.norm() + bwd.norm()) / fac.leading.abs();
            values[(i, c)] = real_part((fwd - bwd) / fac.leading, scale)?;
        }
    }
    Ok(SolveResult {
        grid,
        orders: orders.to_vec(),
        values,
    })
}
