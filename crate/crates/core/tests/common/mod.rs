//! Helpers shared by the integration tests and the acceptance runner.
#![allow(dead_code)]

use std::f64::consts::{PI, SQRT_2};

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64 as C64;
use opmix::green::phi_psi;
use opmix::grid::Grid;
use opmix::model::MixedModelData;
use opmix::operator::{factorize, BoundaryConditions, OperatorSpec, SpectralFactorization};
use opmix::simulate::polynomial_design;
use opmix::solve::xi_weights;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub const KL_TERMS: usize = 256;

/// Two samples on `[0, 1]` whose smooth effect is a truncated Karhunen–Loève
/// expansion of Brownian motion with penalty `lambda`, so the same seed
/// gives the same continuous path at every `N`. Fixed effects `1, t` with
/// `β = (1, -0.5)` and one random effect `cos 3t + sample/2`.
pub fn kl_design(n: usize, seed: u64, lambda: f64) -> MixedModelData {
    let m = 2;
    let grid = Grid::equidistant(0.0, 1.0, n).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = || -> f64 { StandardNormal.sample(&mut rng) };
    let coef: Vec<Vec<f64>> = (0..m).map(|_| (0..KL_TERMS).map(|_| draw()).collect()).collect();
    let u = draw();
    let t = grid.points().to_vec();
    let z = DMatrix::from_fn(n * m, 1, |r, _| (3.0 * t[r % n]).cos() + 0.5 * (r / n) as f64);
    let gamma = polynomial_design(&grid, m, 1);
    let mean = &gamma * DVector::from_vec(vec![1.0, -0.5]) + &z * u;
    let y = DMatrix::from_fn(n, m, |i, s| {
        let x: f64 = coef[s]
            .iter()
            .enumerate()
            .map(|(j, c)| {
                let w = (j as f64 + 0.5) * PI;
                c * SQRT_2 * (w * t[i]).sin() / (w * lambda)
            })
            .sum();
        x + mean[s * n + i]
    });
    MixedModelData::new(grid, y, gamma, z).unwrap()
}

fn had(a: &[C64], b: &[C64]) -> Vec<C64> {
    a.iter().zip(b).map(|(x, y)| x * y).collect()
}

fn scaled_add(acc: &mut [C64], w: &[C64], c: f64) {
    for (a, x) in acc.iter_mut().zip(w) {
        *a += x * c;
    }
}

fn mat_vec(m: &DMatrix<C64>, x: &[C64]) -> Vec<C64> {
    (0..m.nrows()).map(|i| (0..m.ncols()).map(|j| m[(i, j)] * x[j]).sum()).collect()
}

/// `∂_t^μ (I + ΔL)⁻¹ E_z(t_n)` from the eight sums written out term by
/// term, `O(N²)`. Indices are 1-based as in the formula, with `t_0 = a`
/// and `t_{N+1} = b`. Returns the complex values before the real part is
/// taken.
pub fn eight_sums(fac: &SpectralFactorization, grid: &Grid, z: &[f64], mu: usize) -> Vec<C64> {
    let n_pts = grid.len();
    let (a, b) = fac.interval();
    let tt = |j: usize| -> f64 {
        if j == 0 {
            a
        } else if j == n_pts + 1 {
            b
        } else {
            grid.points()[j - 1]
        }
    };
    let zz = |j: usize| z[j - 1];
    let xi = xi_weights(fac);
    let (vm, vp) = (fac.v_minus(), fac.v_plus());
    let em = |x: f64| fac.exp_minus(x);
    let ep = |x: f64| fac.exp_plus(x);
    let k = fac.k();
    let zero = || vec![C64::new(0.0, 0.0); k];

    let mut out = Vec::with_capacity(n_pts);
    for n in 1..=n_pts {
        let tn = tt(n);
        let mut fwd = zero();
        let mut back = zero();
        // 1
        for j in 1..n {
            scaled_add(&mut fwd, &had(&em(tn - tt(j + 1)), &had(vm, &xi.xi_m0)), zz(j));
        }
        // 2
        for j in 1..=n {
            let w = if j == 1 { &xi.xi_m } else { &xi.xi_m1 };
            scaled_add(&mut fwd, &had(&em(tn - tt(j)), &had(vm, w)), zz(j));
        }
        // 3
        for j in n..=n_pts {
            let w = if j < n_pts { &xi.xi_p0 } else { &xi.xi_p };
            scaled_add(&mut back, &had(&ep(tt(j) - tn), &had(vp, w)), zz(j));
        }
        // 4
        for j in n + 1..=n_pts {
            scaled_add(&mut back, &had(&ep(tt(j - 1) - tn), &had(vp, &xi.xi_p1)), zz(j));
        }
        // 5 and 6 share the boundary coupling at a
        let mut at_a = zero();
        for j in 1..n {
            scaled_add(&mut at_a, &had(&ep(tt(j) - a), &had(vp, &xi.xi_p0)), zz(j));
        }
        for j in 1..=n {
            let w = if j == 1 { &xi.xi_p } else { &xi.xi_p1 };
            scaled_add(&mut at_a, &had(&ep(tt(j - 1) - a), &had(vp, w)), zz(j));
        }
        let coupled = had(&em(tn - a), &mat_vec(fac.fa_wm_inv_fa_wp(), &at_a));
        scaled_add(&mut fwd, &coupled, 1.0);
        // 7 and 8 share the boundary coupling at b
        let mut at_b = zero();
        for j in n..=n_pts {
            let w = if j < n_pts { &xi.xi_m0 } else { &xi.xi_m };
            scaled_add(&mut at_b, &had(&em(b - tt(j + 1)), &had(vm, w)), zz(j));
        }
        for j in n + 1..=n_pts {
            scaled_add(&mut at_b, &had(&em(b - tt(j)), &had(vm, &xi.xi_m1)), zz(j));
        }
        let coupled = had(&ep(b - tn), &mat_vec(fac.fb_wp_inv_fb_wm(), &at_b));
        scaled_add(&mut back, &coupled, 1.0);

        let pp = phi_psi(fac, tn, mu).unwrap();
        let f: C64 = pp.phi.iter().zip(&fwd).map(|(p, x)| p * x).sum();
        let g: C64 = pp.psi.iter().zip(&back).map(|(p, x)| p * x).sum();
        out.push(f - g);
    }
    out
}

/// Boundary conditions picking order `i` or `2k-1-i` for every slot.
pub fn random_boundary(rng: &mut ChaCha8Rng, k: usize) -> BoundaryConditions {
    let mut side = || -> Vec<usize> {
        (0..k)
            .map(|i| if rng.random_bool(0.5) { i } else { 2 * k - 1 - i })
            .collect()
    };
    BoundaryConditions {
        at_a: side(),
        at_b: side(),
    }
}

/// One penalty of order `k` (sometimes two) with random coefficients.
pub fn random_operator(rng: &mut ChaCha8Rng, k: usize) -> OperatorSpec {
    let pen = |rng: &mut ChaCha8Rng, lead: bool| -> Vec<f64> {
        (0..=k)
            .map(|i| {
                if i == k && lead {
                    rng.random_range(0.2..1.5)
                } else {
                    rng.random_range(-1.0..1.0)
                }
            })
            .collect()
    };
    let mut penalties = vec![pen(rng, true)];
    if rng.random_bool(0.3) {
        let mut second = pen(rng, false);
        second[k] = 0.0;
        penalties.push(second);
    }
    let bc = random_boundary(rng, k);
    OperatorSpec::new(penalties, bc).unwrap()
}

/// Random operator and ridge whose slowest and fastest exponents over the
/// interval stay well inside the explicit form's overflow guard.
pub fn bounded_case(rng: &mut ChaCha8Rng, k: usize) -> Option<(SpectralFactorization, f64, f64, bool)> {
    let op = random_operator(rng, k);
    let v = rng.random_range(0.05..1.0);
    let delta = 10f64.powf(rng.random_range(-2.0..0.0));
    let a = rng.random_range(-1.0..1.0);
    let b = a + rng.random_range(0.5..3.0);
    let fac = factorize(&op, v, delta, a, b).ok()?;
    let widest = fac.roots().iter().map(|r| r.re.abs()).fold(0.0, f64::max) * (b - a);
    (widest < 40.0).then_some((fac, a, b, op.is_self_adjoint()))
}

/// Largest entry of `|x - y|` relative to the largest `|y|`.
pub fn rel_inf(x: &[f64], y: &[f64]) -> f64 {
    let d = x.iter().zip(y).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let s = y.iter().map(|v| v.abs()).fold(0.0, f64::max);
    d / s
}
