//! Approximation of `log det(I + R₀)` by `∫₀¹ ∫_a^b G_v(t, t) dt dv`, where
//! `G_v` is the Green's function of `v·I + Δ·L`.

use std::num::NonZeroUsize;

use gauss_quad::legendre::GaussLegendre;
use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cmat::{exp_divided_difference, C64, ZERO};
use crate::error::{Error, Result};
use crate::green::real_part;
use crate::grid::Grid;
use crate::operator::{diag_left, factorize, BrownianKind, OperatorSpec, SpectralFactorization};

/// `∫_a^b G_v(t, t) dt` split into its eight closed-form terms.
#[derive(Debug, Clone)]
pub struct DiagIntegralParts {
    pub v: f64,
    pub a_mm: DMatrix<C64>,
    pub a_pp: DMatrix<C64>,
    pub a_mp: DMatrix<C64>,
    pub a_pm: DMatrix<C64>,
    pub terms: [f64; 8],
    pub total: f64,
}

/// `v1 (M ⊙ A) w`
fn hadamard_form(m: &DMatrix<C64>, a: &DMatrix<C64>, w: &[C64]) -> C64 {
    let mut acc = ZERO;
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            acc += m[(i, j)] * a[(i, j)] * w[j];
        }
    }
    acc
}

/// Closed-form terms for an existing factorization of `v·I + Δ·L`.
pub fn diag_integral_from(fac: &SpectralFactorization, n: usize) -> Result<DiagIntegralParts> {
    let k = fac.k;
    let len = fac.b - fac.a;
    let nf = n as f64;
    let (em, ep) = (&fac.eta_minus, &fac.eta_plus);
    // N·(e^x - e^y)/(x - y), which is N·e^x on the diagonal
    let dd = |x: C64, y: C64| exp_divided_difference(x, y) * nf;
    let a_mm = DMatrix::from_fn(k, k, |i, j| dd(em[i] * len, em[j] * len));
    let a_pp = DMatrix::from_fn(k, k, |i, j| dd(-ep[i] * len, -ep[j] * len));
    let a_mp = DMatrix::from_fn(k, k, |i, j| dd(ZERO, (em[i] - ep[j]) * len));
    let a_pm = DMatrix::from_fn(k, k, |i, j| dd(ZERO, -(ep[i] - em[j]) * len));

    let em_ba = fac.exp_minus(len);
    let (pa, pb, bm) = (&fac.pa, &fac.pb, &fac.b_mat);
    let pb_e = pb * diag_left(&em_ba, &DMatrix::identity(k, k));
    let e_pa = diag_left(&em_ba, pa);
    let raw = [
        fac.vm.iter().sum::<C64>() * nf,
        hadamard_form(pa, &a_mp, &fac.vp),
        -hadamard_form(pb, &a_pm, &fac.vm),
        -hadamard_form(&(&pb_e * pa), &a_pp, &fac.vp),
        hadamard_form(bm, &a_mm, &fac.vm),
        hadamard_form(&(bm * &e_pa), &a_mp, &fac.vp),
        -hadamard_form(&(&pb_e * bm), &a_pm, &fac.vm),
        -hadamard_form(&(&pb_e * bm * &e_pa), &a_pp, &fac.vp),
    ];
    let raw = raw.map(|z| z / fac.tau);
    let scale: f64 = raw.iter().map(|z| z.norm()).sum();
    let mut terms = [0.0; 8];
    for (t, z) in terms.iter_mut().zip(&raw) {
        *t = real_part(*z, scale)?;
    }
    let total = real_part(raw.iter().sum(), scale)?;
    if !(total > 0.0) {
        return Err(Error::NonFinite(format!("diagonal integral {total} at v = {} is not positive", fac.v)));
    }
    Ok(DiagIntegralParts {
        v: fac.v,
        a_mm,
        a_pp,
        a_mp,
        a_pm,
        terms,
        total,
    })
}

pub fn diag_integral(op: &OperatorSpec, grid: &Grid, v: f64) -> Result<DiagIntegralParts> {
    if !(v > 0.0 && v <= 1.0) {
        return Err(Error::InvalidArgument(format!("ridge v = {v} must lie in (0, 1]")));
    }
    let delta = grid.mesh().ok_or(Error::NotEquidistant)?;
    let fac = factorize(op, v, delta, grid.a(), grid.b())?;
    diag_integral_from(&fac, grid.len())
}

/// How `[0, 1]` is cut into Gauss–Legendre panels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum QuadratureSplit {
    /// One panel.
    None,
    /// `[0, 1/N]` and `[1/N, 1]`.
    ReciprocalN,
    /// `[0, v₀]` followed by `panels` geometrically growing panels up to 1,
    /// where `v₀ = |τ|·Δ/(b-a)^{2k}` is the ridge at which the slowest
    /// mode decays over the whole interval.
    Geometric { panels: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QuadratureSpec {
    /// Nodes per panel.
    pub nodes: usize,
    pub split: QuadratureSplit,
}

impl Default for QuadratureSpec {
    fn default() -> Self {
        Self {
            nodes: 24,
            split: QuadratureSplit::Geometric { panels: 12 },
        }
    }
}

impl QuadratureSpec {
    /// Panel boundaries in `[0, 1]`.
    pub fn breakpoints(&self, op: &OperatorSpec, grid: &Grid) -> Vec<f64> {
        let n = grid.len() as f64;
        match self.split {
            QuadratureSplit::None => vec![0.0, 1.0],
            QuadratureSplit::ReciprocalN => vec![0.0, 1.0 / n, 1.0],
            QuadratureSplit::Geometric { panels } => {
                let width = grid.width();
                let v0 = op.tau().abs() * (width / n) / width.powi(2 * op.k() as i32);
                if !(v0 < 1.0) || panels == 0 {
                    return vec![0.0, 1.0];
                }
                let ratio = (1.0 / v0).powf(1.0 / panels as f64);
                let mut pts = vec![0.0];
                pts.extend((0..panels).map(|i| v0 * ratio.powi(i as i32)));
                pts.push(1.0);
                pts
            }
        }
    }

    /// Nodes and weights over `[0, 1]`.
    pub fn rule(&self, op: &OperatorSpec, grid: &Grid) -> Result<Vec<(f64, f64)>> {
        let nodes = NonZeroUsize::new(self.nodes)
            .ok_or_else(|| Error::InvalidArgument("quadrature needs at least one node".into()))?;
        let gl = GaussLegendre::new(nodes);
        let bp = self.breakpoints(op, grid);
        let mut out = Vec::with_capacity((bp.len() - 1) * self.nodes);
        for w in bp.windows(2) {
            let (lo, hi) = (w[0], w[1]);
            for &(x, wt) in gl.as_node_weight_pairs() {
                let v = 0.5 * ((hi - lo) * x + hi + lo);
                out.push((v, 0.5 * (hi - lo) * wt));
            }
        }
        if out.iter().any(|(v, w)| !(v.is_finite() && w.is_finite() && *v > 0.0 && *v <= 1.0)) {
            return Err(Error::NonFinite("quadrature nodes".into()));
        }
        Ok(out)
    }
}

/// `∫₀¹ ∫_a^b G_v(t, t) dt dv`, approximating `log det(I + R₀)`.
pub fn logdet_approx(op: &OperatorSpec, grid: &Grid, quad: &QuadratureSpec) -> Result<f64> {
    let rule = quad.rule(op, grid)?;
    let parts: Result<Vec<f64>> = rule
        .par_iter()
        .map(|&(v, w)| diag_integral(op, grid, v).map(|p| w * p.total))
        .collect();
    let value: f64 = parts?.iter().sum();
    if !value.is_finite() {
        return Err(Error::NonFinite("log-determinant quadrature".into()));
    }
    Ok(value)
}

/// `log cosh x` without overflow.
pub fn log_cosh(x: f64) -> f64 {
    let x = x.abs();
    x + (-2.0 * x).exp().ln_1p() - std::f64::consts::LN_2
}

/// `log(sinh x / x)` without overflow or cancellation at small `x`.
pub fn log_sinhc(x: f64) -> f64 {
    let x = x.abs();
    if x < 1.0 {
        // sinh x / x - 1 = Σ_{n≥1} x^{2n}/(2n+1)!
        let x2 = x * x;
        let mut acc = 1.0;
        for n in (2..12).rev() {
            acc = 1.0 + acc * x2 / ((2 * n) * (2 * n + 1)) as f64;
        }
        return (acc * x2 / 6.0).ln_1p();
    }
    x + (-(-2.0 * x).exp()).ln_1p() - std::f64::consts::LN_2 - x.ln()
}

/// Exact value of the approximation for the Laplacian penalty `K = λ∂`.
pub fn logdet_closed_brownian(kind: BrownianKind, lambda: f64, a: f64, b: f64, n: usize) -> f64 {
    let x = ((b - a) * n as f64).sqrt() / lambda;
    match kind {
        BrownianKind::Motion => log_cosh(x),
        BrownianKind::Bridge => log_sinhc(x),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::green::green_diag_stable;
    use crate::operator::BoundaryConditions;

    fn brownian(kind: BrownianKind, lambda: f64) -> OperatorSpec {
        OperatorSpec::brownian(lambda, kind).unwrap()
    }

    #[test]
    fn diag_integral_examples() {
        let grid = Grid::equidistant(0.0, 1.0, 4).unwrap();
        let m = diag_integral(&brownian(BrownianKind::Motion, 1.0), &grid, 1.0).unwrap();
        assert!((m.total - 2.0f64.tanh()).abs() < 1e-13, "{}", m.total);
        let b = diag_integral(&brownian(BrownianKind::Bridge, 1.0), &grid, 1.0).unwrap();
        let want = 1.0 / 2.0f64.tanh() - 0.5;
        assert!((b.total - want).abs() < 1e-13, "{}", b.total);
        let small = diag_integral(&brownian(BrownianKind::Motion, 1.0), &grid, 1e-6).unwrap();
        assert!((small.total - 2.0).abs() < 0.02, "{}", small.total);
    }

    fn integrate_diag(fac: &SpectralFactorization) -> f64 {
        // composite Gauss–Legendre, panels refined towards both ends
        let gl = GaussLegendre::new(NonZeroUsize::new(20).unwrap());
        let (a, b) = fac.interval();
        let mut bp = vec![a, b];
        let mut h = (b - a) / 2.0;
        for _ in 0..30 {
            bp.push(a + h);
            bp.push(b - h);
            h /= 2.0;
        }
        bp.sort_by(|x, y| x.partial_cmp(y).unwrap());
        bp.dedup();
        bp.windows(2)
            .map(|w| gl.integrate(w[0], w[1], |t| green_diag_stable(fac, t).unwrap()))
            .sum()
    }

    #[test]
    fn terms_match_pointwise_diagonal() {
        let ops = [
            brownian(BrownianKind::Motion, 0.7),
            brownian(BrownianKind::Bridge, 1.3),
            OperatorSpec::new(
                vec![vec![0.0, 0.0, 1.0], vec![0.0, 0.5]],
                BoundaryConditions::from_orders(2, &[0, 1], &[2, 3]).unwrap(),
            )
            .unwrap(),
            OperatorSpec::new(
                vec![vec![0.3, 0.0, 0.8]],
                BoundaryConditions::from_orders(2, &[0, 2], &[0, 1]).unwrap(),
            )
            .unwrap(),
        ];
        let grid = Grid::equidistant(0.0, 2.0, 40).unwrap();
        for op in &ops {
            for v in [0.1, 0.5, 1.0] {
                let fac = factorize(op, v, grid.mesh().unwrap(), 0.0, 2.0).unwrap();
                let parts = diag_integral_from(&fac, 40).unwrap();
                let numeric = integrate_diag(&fac);
                assert!(
                    (parts.total - numeric).abs() <= 1e-8 * numeric.abs(),
                    "{:?} v={v}: {} vs {numeric}",
                    op.penalties(),
                    parts.total
                );
            }
        }
    }

    #[test]
    fn closed_form_examples() {
        let m = logdet_closed_brownian(BrownianKind::Motion, 1.0, 0.0, 1.0, 100);
        assert!((m - 10.0f64.cosh().ln()).abs() < 1e-12);
        assert!((m - 9.3068528).abs() < 1e-7);
        let b = logdet_closed_brownian(BrownianKind::Bridge, 1.0, 0.0, 1.0, 100);
        assert!((b - (10.0f64.sinh() / 10.0).ln()).abs() < 1e-12);
        assert!((b - 7.0042677).abs() < 1e-7);
        assert!(logdet_closed_brownian(BrownianKind::Motion, 1e9, 0.0, 1.0, 100) < 1e-12);
        assert!(log_cosh(1e4).is_finite() && log_sinhc(1e4).is_finite());
        for x in [1e-3, 5e-3, 0.0099, 0.0101, 0.3, 0.999, 1.001, 3.0] {
            assert!((log_sinhc(x) - (x.sinh() / x).ln()).abs() < 1e-15);
        }
    }

    #[test]
    fn approximation_matches_closed_forms() {
        for kind in [BrownianKind::Motion, BrownianKind::Bridge] {
            for n in [10, 100, 1000, 10_000] {
                for lambda in [0.5, 1.0, 2.0] {
                    let grid = Grid::equidistant(0.0, 1.0, n).unwrap();
                    let got = logdet_approx(&brownian(kind, lambda), &grid, &QuadratureSpec::default()).unwrap();
                    let want = logdet_closed_brownian(kind, lambda, 0.0, 1.0, n);
                    assert!((got - want).abs() <= 1e-6 * want, "{kind:?} n={n} λ={lambda}: {got} vs {want}");
                }
            }
        }
    }

    #[test]
    fn monotone_in_n_and_lambda() {
        let q = QuadratureSpec::default();
        let mut prev_row: Option<Vec<f64>> = None;
        for n in [20, 80, 320] {
            let grid = Grid::equidistant(0.0, 1.0, n).unwrap();
            let row: Vec<f64> = [0.5, 1.0, 2.0]
                .iter()
                .map(|&l| logdet_approx(&brownian(BrownianKind::Motion, l), &grid, &q).unwrap())
                .collect();
            assert!(row.windows(2).all(|w| w[0] > w[1]));
            if let Some(p) = &prev_row {
                assert!(p.iter().zip(&row).all(|(a, b)| b > a));
            }
            prev_row = Some(row);
        }
    }
}
