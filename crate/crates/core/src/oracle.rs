//! Dense reference implementation of the mixed model for small designs.
//!
//! `R₀` is formed entry by entry from a covariance kernel and every solve
//! is a Cholesky solve, so nothing here depends on the operator
//! approximation.

use std::num::NonZeroUsize;

use gauss_quad::legendre::GaussLegendre;
use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::green::green_eval;
use crate::grid::Grid;
use crate::model::{FitResult, MixedModelData, Neg2Components, VarianceParams};
use crate::operator::{factorize, BrownianKind, OperatorSpec};

/// Largest `N·M` accepted by the dense routines.
pub const ORACLE_SIZE_LIMIT: usize = 5000;

/// Covariance kernel of the smooth effect.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum DenseKernel {
    /// `λ⁻²((t∧s) - a)`
    BrownianMotion { lambda: f64 },
    /// `λ⁻²((t∧s) - a)(b - t∨s)/(b - a)`
    BrownianBridge { lambda: f64 },
    /// Green's function of `L` itself; `L` must be invertible.
    Generic { op: OperatorSpec },
}

impl DenseKernel {
    /// Closed form for `K = λ∂` with Brownian boundary conditions,
    /// otherwise the generic Green's function.
    pub fn for_operator(op: &OperatorSpec) -> Self {
        match op.as_brownian() {
            Some((BrownianKind::Motion, lambda)) => Self::BrownianMotion { lambda },
            Some((BrownianKind::Bridge, lambda)) => Self::BrownianBridge { lambda },
            None => Self::Generic { op: op.clone() },
        }
    }
}

/// Kernel matrix of `grid` for the given kernel.
pub fn kernel_matrix(kernel: &DenseKernel, grid: &Grid) -> Result<DMatrix<f64>> {
    let (a, b) = (grid.a(), grid.b());
    let t = grid.points();
    let n = t.len();
    let r0 = match kernel {
        DenseKernel::BrownianMotion { lambda } => {
            DMatrix::from_fn(n, n, |i, j| (t[i].min(t[j]) - a) / (lambda * lambda))
        }
        DenseKernel::BrownianBridge { lambda } => DMatrix::from_fn(n, n, |i, j| {
            (t[i].min(t[j]) - a) * (b - t[i].max(t[j])) / ((b - a) * lambda * lambda)
        }),
        DenseKernel::Generic { op } => {
            if !op.is_self_adjoint() {
                return Err(Error::InvalidOperator("operator is not self-adjoint, its kernel is not symmetric".into()));
            }
            let fac = factorize(op, 0.0, 1.0, a, b).map_err(|e| {
                Error::InvalidOperator(format!("operator is not invertible, no dense kernel: {e}"))
            })?;
            let mut r0 = DMatrix::zeros(n, n);
            for i in 0..n {
                for j in 0..=i {
                    let g = green_eval(&fac, t[i], t[j], 0)?;
                    r0[(i, j)] = g;
                    r0[(j, i)] = g;
                }
            }
            r0
        }
    };
    let asym = (&r0 - r0.transpose()).amax();
    if asym > 1e-10 * r0.amax().max(1e-300) {
        return Err(Error::InvalidArgument(format!("kernel matrix asymmetric by {asym}")));
    }
    Ok(r0)
}

/// `R₀` with the Cholesky factor of `A₀ = I + R₀`.
#[derive(Debug, Clone)]
pub struct DenseModel {
    r0: DMatrix<f64>,
    a0_chol: Cholesky<f64, Dyn>,
}

pub fn build_r0(kernel: &DenseKernel, grid: &Grid) -> Result<DenseModel> {
    let r0 = kernel_matrix(kernel, grid)?;
    DenseModel::from_matrix(r0)
}

impl DenseModel {
    pub fn from_matrix(r0: DMatrix<f64>) -> Result<Self> {
        if !r0.is_square() {
            return Err(Error::Dimension("R₀ must be square".into()));
        }
        if Cholesky::new(r0.clone()).is_none() {
            return Err(Error::NotPositiveDefinite("R₀; kernel and boundary conditions do not match".into()));
        }
        let n = r0.nrows();
        let a0_chol = Cholesky::new(DMatrix::identity(n, n) + &r0)
            .ok_or_else(|| Error::NotPositiveDefinite("I + R₀".into()))?;
        Ok(Self { r0, a0_chol })
    }

    pub fn r0(&self) -> &DMatrix<f64> {
        &self.r0
    }

    /// `log det(I + R₀)` from the Cholesky factor.
    pub fn logdet_a0(&self) -> f64 {
        2.0 * self.a0_chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }

    /// `(I + R₀)⁻¹ z` column by column.
    pub fn solve_a0(&self, z: &DMatrix<f64>) -> DMatrix<f64> {
        self.a0_chol.solve(z)
    }
}

/// `∫₀¹ tr(R₀(I + vR₀)⁻¹) dv`, which equals `log det(I + R₀)`.
///
/// The integrand behaves like `1/v` once `v` exceeds the inverse of the
/// spectrum, so `[0, 1]` is cut geometrically from `1/tr R₀`.
pub fn logdet_identity_integral(r0: &DMatrix<f64>) -> Result<f64> {
    let n = r0.nrows();
    let tr = r0.trace().max(1.0);
    let mut bp = vec![0.0];
    let mut v = 1.0 / tr;
    while v < 1.0 {
        bp.push(v);
        v *= 2.0;
    }
    bp.push(1.0);
    let gl = GaussLegendre::new(NonZeroUsize::new(16).expect("non-zero"));
    let mut total = 0.0;
    for w in bp.windows(2) {
        for &(x, wt) in gl.as_node_weight_pairs() {
            let v = 0.5 * ((w[1] - w[0]) * x + w[1] + w[0]);
            let m = DMatrix::identity(n, n) + r0 * v;
            let c = Cholesky::new(m).ok_or_else(|| Error::NotPositiveDefinite("I + vR₀".into()))?;
            total += 0.5 * (w[1] - w[0]) * wt * c.solve(r0).trace();
        }
    }
    Ok(total)
}

fn guard(data: &MixedModelData) -> Result<()> {
    let size = data.n_total();
    if size > ORACLE_SIZE_LIMIT {
        return Err(Error::SizeGuard {
            size,
            limit: ORACLE_SIZE_LIMIT,
        });
    }
    Ok(())
}

/// Exact GLS estimates and BLUPs through the marginal covariance
/// `V = A₀ ⊗ I_M + Z G Zᵀ` (relative to `σ²`).
pub fn oracle_fit(data: &MixedModelData, vp: &VarianceParams, dense: &DenseModel) -> Result<FitResult> {
    guard(data)?;
    let (n, m, p, q) = (data.n(), data.m(), data.p(), data.q());
    let total = data.n_total();
    if dense.r0.nrows() != n {
        return Err(Error::Dimension(format!("R₀ is {}×{}, grid has {n} points", n, dense.r0.nrows())));
    }
    let gamma = data.gamma();
    let z = data.z();
    let yv = DVector::from_column_slice(data.y().as_slice());
    let logdet_a = m as f64 * dense.logdet_a0();

    // A⁻¹ block by block
    let ainv = |x: &DMatrix<f64>| -> DMatrix<f64> {
        let mut out = DMatrix::zeros(x.nrows(), x.ncols());
        for s in 0..m {
            let block = x.rows(s * n, n).into_owned();
            out.rows_mut(s * n, n).copy_from(&dense.solve_a0(&block));
        }
        out
    };
    let v_chol = if q > 0 {
        let mut v = DMatrix::zeros(total, total);
        let a0 = DMatrix::identity(n, n) + &dense.r0;
        for s in 0..m {
            v.view_mut((s * n, s * n), (n, n)).copy_from(&a0);
        }
        v += z * &vp.g * z.transpose();
        Some(Cholesky::new(v).ok_or_else(|| Error::NotPositiveDefinite("marginal covariance".into()))?)
    } else {
        None
    };
    let vinv = |x: &DMatrix<f64>| -> DMatrix<f64> {
        match &v_chol {
            Some(c) => c.solve(x),
            None => ainv(x),
        }
    };
    let logdet_v = match &v_chol {
        Some(c) => 2.0 * c.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>(),
        None => logdet_a,
    };

    let (beta_hat, c_beta, logdet_fixed) = if p > 0 {
        let gram = gamma.transpose() * vinv(gamma);
        let gram = (&gram + gram.transpose()) * 0.5;
        let gc = Cholesky::new(gram).ok_or_else(|| Error::Singular("ΓᵀV⁻¹Γ".into()))?;
        let rhs = gamma.transpose() * vinv(&DMatrix::from_column_slice(total, 1, yv.as_slice()));
        let beta = gc.solve(&rhs).column(0).into_owned();
        let ld = 2.0 * gc.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        (beta, gc.inverse(), ld)
    } else {
        (DVector::zeros(0), DMatrix::zeros(0, 0), 0.0)
    };
    let centred = &yv - gamma * &beta_hat;
    let e = vinv(&DMatrix::from_column_slice(total, 1, centred.as_slice())).column(0).into_owned();
    let u_blup: DVector<f64> = &vp.g * z.transpose() * &e;
    let e_grid = DMatrix::from_column_slice(n, m, e.as_slice());
    let x_blup = &dense.r0 * &e_grid;
    let r = &centred - z * &u_blup;
    let residuals = DMatrix::from_column_slice(n, m, r.as_slice()) - &x_blup;

    let c_u = if q > 0 {
        let gi = Cholesky::new(vp.g.clone()).ok_or_else(|| Error::NotPositiveDefinite("G".into()))?.inverse();
        let prec = gi + z.transpose() * ainv(z);
        Cholesky::new((&prec + prec.transpose()) * 0.5)
            .ok_or_else(|| Error::Singular("G⁻¹ + ZᵀA⁻¹Z".into()))?
            .inverse()
    } else {
        DMatrix::zeros(0, 0)
    };
    let u_quad = if q > 0 {
        let gc = Cholesky::new(vp.g.clone()).ok_or_else(|| Error::NotPositiveDefinite("G".into()))?;
        u_blup.dot(&gc.solve(&u_blup))
    } else {
        0.0
    };
    // x̂ = R₀e, so x̂ᵀR₀⁻¹x̂ = eᵀR₀e
    let x_quad = e_grid.dot(&x_blup);
    let rss = residuals.norm_squared();
    let components = Neg2Components {
        n_total: total,
        p,
        m,
        logdet_a0: dense.logdet_a0(),
        logdet_random: logdet_v - logdet_a,
        logdet_fixed,
        rss,
        u_quad,
        x_quad,
        x_quad_identity: x_quad,
    };
    let neg2_relik = components.neg2_at(vp.sigma2);
    Ok(FitResult {
        beta_hat,
        u_blup,
        x_blup,
        x_blup_deriv: Vec::new(),
        residuals,
        sigma2_profile: components.sigma2_profile(),
        neg2_relik,
        c_beta,
        c_u,
        components,
    })
}

/// Exact −2 · restricted log-likelihood. Independently of the fit, the
/// quadratic term is `(y - Γβ̂)ᵀV⁻¹(y - Γβ̂)`.
pub fn oracle_neg2relik(data: &MixedModelData, vp: &VarianceParams, dense: &DenseModel) -> Result<f64> {
    let fit = oracle_fit(data, vp, dense)?;
    Ok(fit.neg2_relik)
}
