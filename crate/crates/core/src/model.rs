//! Linear mixed model `y = Γβ + Zu + x + ε` with a serially correlated
//! effect `x_m ~ N(0, σ²R₀)` per sample, `u ~ N(0, σ²G)` and white noise.
//!
//! Every application of `A⁻¹ = ((I + R₀) ⊗ I_M)⁻¹` goes through
//! [`solve_grid`]; the only dense factorizations are `p×p` and `q×q`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::logdet::{logdet_approx, QuadratureSpec};
use crate::operator::{factorize, OperatorSpec, SpectralFactorization};
use crate::optim::{nelder_mead, Minimum, NelderMeadOptions};
use crate::solve::solve_grid;

/// Observations on a common grid, stored sample-major: row `m·N + n` of
/// `gamma` and `z` belongs to sample `m` at `t_n`.
#[derive(Debug, Clone)]
pub struct MixedModelData {
    grid: Grid,
    y: DMatrix<f64>,
    gamma: DMatrix<f64>,
    z: DMatrix<f64>,
}

impl MixedModelData {
    /// `y` is `N×M`; `gamma` is `(N·M)×p` and `z` is `(N·M)×q`.
    pub fn new(grid: Grid, y: DMatrix<f64>, gamma: DMatrix<f64>, z: DMatrix<f64>) -> Result<Self> {
        let n = grid.len();
        if y.nrows() != n || y.ncols() == 0 {
            return Err(Error::Dimension(format!(
                "y is {}×{}, expected {n} rows and at least one sample",
                y.nrows(),
                y.ncols()
            )));
        }
        let total = n * y.ncols();
        for (name, d) in [("fixed-effect design", &gamma), ("random-effect design", &z)] {
            if d.nrows() != total {
                return Err(Error::Dimension(format!("{name} has {} rows, expected {total}", d.nrows())));
            }
        }
        if y.iter().chain(gamma.iter()).chain(z.iter()).any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("model data".into()));
        }
        Ok(Self { grid, y, gamma, z })
    }

    /// No fixed or random effects.
    pub fn smoothing_only(grid: Grid, y: DMatrix<f64>) -> Result<Self> {
        let total = y.len();
        Self::new(grid, y, DMatrix::zeros(total, 0), DMatrix::zeros(total, 0))
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }
    pub fn y(&self) -> &DMatrix<f64> {
        &self.y
    }
    pub fn gamma(&self) -> &DMatrix<f64> {
        &self.gamma
    }
    pub fn z(&self) -> &DMatrix<f64> {
        &self.z
    }
    pub fn n(&self) -> usize {
        self.grid.len()
    }
    pub fn m(&self) -> usize {
        self.y.ncols()
    }
    pub fn p(&self) -> usize {
        self.gamma.ncols()
    }
    pub fn q(&self) -> usize {
        self.z.ncols()
    }
    pub fn n_total(&self) -> usize {
        self.y.len()
    }

    /// Same data with `y` replaced.
    pub fn with_y(&self, y: DMatrix<f64>) -> Result<Self> {
        Self::new(self.grid.clone(), y, self.gamma.clone(), self.z.clone())
    }
}

/// `σ²`, the random-effect covariance `G` (relative to `σ²`) and the
/// operator whose Green's function gives `R₀`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceParams {
    pub sigma2: f64,
    pub g: DMatrix<f64>,
    pub op: OperatorSpec,
}

impl VarianceParams {
    pub fn new(sigma2: f64, g: DMatrix<f64>, op: OperatorSpec) -> Result<Self> {
        if !(sigma2 > 0.0 && sigma2.is_finite()) {
            return Err(Error::InvalidArgument(format!("σ² = {sigma2} must be positive")));
        }
        if !op.is_self_adjoint() {
            return Err(Error::InvalidOperator(
                "boundary conditions leave a boundary form, so the covariance would not be symmetric".into(),
            ));
        }
        if g.nrows() != g.ncols() {
            return Err(Error::Dimension("G must be square".into()));
        }
        let asym = (&g - g.transpose()).amax();
        if asym > 1e-12 * g.amax().max(1.0) {
            return Err(Error::InvalidArgument("G is not symmetric".into()));
        }
        if g.nrows() > 0 && Cholesky::new(g.clone()).is_none() {
            return Err(Error::NotPositiveDefinite("G".into()));
        }
        Ok(Self { sigma2, g, op })
    }
}

/// Which form of `E[x|y]ᵀR⁻¹E[x|y]` enters the likelihood.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QuadForm {
    /// `Δ Σ_l Σ_m Σ_n (K_l E[x_m|y](t_n))²` from derivative BLUPs.
    #[default]
    Derivative,
    /// `E[x|y]ᵀA⁻¹(y - Γβ̂ - Z E[u|y])`, which needs no derivatives.
    Identity,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct FitOptions {
    pub quadrature: QuadratureSpec,
    /// Derivative orders of the smooth effect to report.
    pub derivative_orders: Vec<usize>,
    pub quad_form: QuadForm,
}

/// The σ²-independent pieces of the restricted likelihood.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Neg2Components {
    pub n_total: usize,
    pub p: usize,
    pub m: usize,
    /// Approximation of `log det A₀`.
    pub logdet_a0: f64,
    /// `log det(I_q + ZᵀA⁻¹Z G)`
    pub logdet_random: f64,
    /// `log det(ΓᵀC_rΓ) = -log det C_β`
    pub logdet_fixed: f64,
    /// `rᵀr`
    pub rss: f64,
    /// `E[u|y]ᵀG⁻¹E[u|y]`
    pub u_quad: f64,
    /// `E[x|y]ᵀR⁻¹E[x|y]` in the configured form.
    pub x_quad: f64,
    /// The same quadratic form via `E[x|y]ᵀA⁻¹(y - Γβ̂ - Z E[u|y])`.
    pub x_quad_identity: f64,
}

impl Neg2Components {
    pub fn quad(&self) -> f64 {
        self.rss + self.u_quad + self.x_quad
    }

    /// `σ̂² = quad / (N_total - p)`
    pub fn sigma2_profile(&self) -> f64 {
        self.quad() / (self.n_total - self.p) as f64
    }

    /// −2 · restricted log-likelihood at `σ²`, up to the constant.
    pub fn neg2_at(&self, sigma2: f64) -> f64 {
        (self.n_total - self.p) as f64 * sigma2.ln()
            + self.m as f64 * self.logdet_a0
            + self.logdet_random
            + self.logdet_fixed
            + self.quad() / sigma2
    }
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub beta_hat: DVector<f64>,
    pub u_blup: DVector<f64>,
    /// `N×M`
    pub x_blup: DMatrix<f64>,
    /// `(μ, ∂_t^μ E[x|y])` for each requested order.
    pub x_blup_deriv: Vec<(usize, DMatrix<f64>)>,
    /// `y - Γβ̂ - Z E[u|y] - E[x|y]`, `N×M`
    pub residuals: DMatrix<f64>,
    pub sigma2_profile: f64,
    /// −2 · restricted log-likelihood at the supplied `σ²`.
    pub neg2_relik: f64,
    pub c_beta: DMatrix<f64>,
    pub c_u: DMatrix<f64>,
    pub components: Neg2Components,
}

/// `A⁻¹` on grid vectors, applied sample by sample.
#[derive(Debug, Clone)]
pub struct AinvOperator {
    fac: SpectralFactorization,
    grid: Grid,
}

/// Builds the `A⁻¹` operator for the grid of `data`.
pub fn apply_ainv(data: &MixedModelData, op: &OperatorSpec) -> Result<AinvOperator> {
    AinvOperator::new(data.grid(), op)
}

impl AinvOperator {
    pub fn new(grid: &Grid, op: &OperatorSpec) -> Result<Self> {
        let delta = grid.mesh().ok_or(Error::NotEquidistant)?;
        let fac = factorize(op, 1.0, delta, grid.a(), grid.b())?;
        Ok(Self {
            fac,
            grid: grid.clone(),
        })
    }

    pub fn factorization(&self) -> &SpectralFactorization {
        &self.fac
    }

    /// `z - (I + ΔL)⁻¹E_z` for every column of an `N×c` matrix.
    pub fn apply(&self, z: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.apply_stacked(z, 1).map(|w| w.reshape_generic(Dyn(z.nrows()), Dyn(z.ncols())))
    }

    /// Applies `A⁻¹ = A₀⁻¹ ⊗ I_M` to each column of an `(N·M)×c` matrix.
    pub fn apply_stacked(&self, cols: &DMatrix<f64>, m: usize) -> Result<DMatrix<f64>> {
        let smooth = self.smooth_stacked(cols, m, &[0])?;
        Ok(cols - &smooth[0])
    }

    /// `∂_t^μ (I + ΔL)⁻¹E_z` for every `N`-section of every column, one
    /// output matrix per order.
    pub fn smooth_stacked(&self, cols: &DMatrix<f64>, m: usize, orders: &[usize]) -> Result<Vec<DMatrix<f64>>> {
        let n = self.grid.len();
        if cols.nrows() != n * m {
            return Err(Error::Dimension(format!("{} rows, expected {}", cols.nrows(), n * m)));
        }
        let jobs: Vec<(usize, usize)> = (0..cols.ncols()).flat_map(|c| (0..m).map(move |s| (c, s))).collect();
        let sections: Vec<DMatrix<f64>> = jobs
            .par_iter()
            .map(|&(c, s)| {
                let col = cols.column(c);
                let z = &col.as_slice()[s * n..(s + 1) * n];
                solve_grid(&self.fac, &self.grid, z, orders).map(|r| r.values)
            })
            .collect::<Result<_>>()?;
        let mut out = vec![DMatrix::zeros(cols.nrows(), cols.ncols()); orders.len()];
        for (&(c, s), vals) in jobs.iter().zip(&sections) {
            for (o, mat) in out.iter_mut().enumerate() {
                mat.view_mut((s * n, c), (n, 1)).copy_from(&vals.column(o));
            }
        }
        Ok(out)
    }
}

fn symmetrize(m: DMatrix<f64>) -> DMatrix<f64> {
    (&m + m.transpose()) * 0.5
}

fn logdet_chol(c: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * c.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
}

/// Henderson/GLS estimates and BLUPs for fixed variance parameters.
pub fn gls_fit(data: &MixedModelData, vp: &VarianceParams, opts: &FitOptions) -> Result<FitResult> {
    let (n, m, p, q) = (data.n(), data.m(), data.p(), data.q());
    let total = data.n_total();
    if vp.g.nrows() != q {
        return Err(Error::Dimension(format!("G is {}×{}, design has q = {q}", vp.g.nrows(), vp.g.ncols())));
    }
    if total <= p {
        return Err(Error::Dimension(format!("{total} observations for {p} fixed effects")));
    }
    let ainv = apply_ainv(data, &vp.op)?;
    let k = vp.op.k();
    let yv = DVector::from_column_slice(data.y.as_slice());

    let mut stacked = DMatrix::zeros(total, p + q + 1);
    stacked.columns_mut(0, p).copy_from(&data.gamma);
    stacked.columns_mut(p, q).copy_from(&data.z);
    stacked.column_mut(p + q).copy_from(&yv);
    let w = ainv.apply_stacked(&stacked, m)?;
    let (wg, wz, wy) = (w.columns(0, p), w.columns(p, q), w.column(p + q));
    let (gamma, z) = (&data.gamma, &data.z);

    // C_u = L_G (I + L_Gᵀ ZᵀA⁻¹Z L_G)⁻¹ L_Gᵀ avoids inverting G itself
    let (c_u, logdet_random, g_chol) = if q > 0 {
        let g_chol = Cholesky::new(vp.g.clone()).ok_or_else(|| Error::NotPositiveDefinite("G".into()))?;
        let lg = g_chol.l();
        let s = symmetrize(z.transpose() * wz);
        let inner = symmetrize(DMatrix::identity(q, q) + lg.transpose() * &s * &lg);
        let ic = Cholesky::new(inner).ok_or_else(|| Error::Singular("I + L_GᵀZᵀA⁻¹ZL_G".into()))?;
        let c_u = symmetrize(&lg * ic.inverse() * lg.transpose());
        (c_u, logdet_chol(&ic), Some(g_chol))
    } else {
        (DMatrix::zeros(0, 0), 0.0, None)
    };
    let zt_wg = z.transpose() * wg;
    let zt_wy = z.transpose() * wy;

    let (beta_hat, c_beta, logdet_fixed) = if p > 0 {
        // solving with the unsymmetrized Gram keeps β̂(y + Γc) = β̂(y) + c exact
        let gram = gamma.transpose() * wg - zt_wg.transpose() * &c_u * &zt_wg;
        let gc = Cholesky::new(symmetrize(gram.clone()))
            .ok_or_else(|| Error::Singular("ΓᵀC_rΓ; the fixed-effect design is rank deficient".into()))?;
        let rhs = gamma.transpose() * wy - zt_wg.transpose() * &c_u * &zt_wy;
        let beta = gram
            .lu()
            .solve(&rhs)
            .ok_or_else(|| Error::Singular("ΓᵀC_rΓ".into()))?;
        (beta, gc.inverse(), logdet_chol(&gc))
    } else {
        (DVector::zeros(0), DMatrix::zeros(0, 0), 0.0)
    };
    let u_blup: DVector<f64> = if q > 0 {
        &c_u * (&zt_wy - &zt_wg * &beta_hat)
    } else {
        DVector::zeros(0)
    };

    let r_tilde = &yv - gamma * &beta_hat - z * &u_blup;
    let mut orders = vec![0];
    let penalties = vp.op.penalties();
    if opts.quad_form == QuadForm::Derivative {
        orders.extend(1..=k);
    }
    for &mu in &opts.derivative_orders {
        if !orders.contains(&mu) {
            orders.push(mu);
        }
    }
    let r_mat = DMatrix::from_column_slice(total, 1, r_tilde.as_slice());
    let smooth = ainv.smooth_stacked(&r_mat, m, &orders)?;
    let as_grid = |v: &DMatrix<f64>| DMatrix::from_column_slice(n, m, v.as_slice());
    let x_blup = as_grid(&smooth[0]);
    let residuals = DMatrix::from_column_slice(n, m, r_tilde.as_slice()) - &x_blup;

    let rss = residuals.norm_squared();
    let u_quad = match &g_chol {
        Some(c) => {
            let half = c.l().solve_lower_triangular(&u_blup).ok_or_else(|| Error::Singular("G".into()))?;
            half.norm_squared()
        }
        None => 0.0,
    };
    let x_quad_identity = x_blup.dot(&residuals);
    let x_quad = match opts.quad_form {
        QuadForm::Identity => x_quad_identity,
        QuadForm::Derivative => {
            let delta = data.grid.mesh().ok_or(Error::NotEquidistant)?;
            let mut acc = 0.0;
            for c in penalties {
                let mut kx = DMatrix::<f64>::zeros(total, 1);
                for (i, &ci) in c.iter().enumerate() {
                    if ci != 0.0 {
                        kx += &smooth[i] * ci;
                    }
                }
                acc += kx.norm_squared();
            }
            delta * acc
        }
    };
    let x_blup_deriv = opts
        .derivative_orders
        .iter()
        .map(|mu| {
            let idx = orders.iter().position(|o| o == mu).expect("order requested");
            (*mu, as_grid(&smooth[idx]))
        })
        .collect();

    let components = Neg2Components {
        n_total: total,
        p,
        m,
        logdet_a0: logdet_approx(&vp.op, &data.grid, &opts.quadrature)?,
        logdet_random,
        logdet_fixed,
        rss,
        u_quad,
        x_quad,
        x_quad_identity,
    };
    let neg2_relik = components.neg2_at(vp.sigma2);
    if !neg2_relik.is_finite() {
        return Err(Error::NonFinite(format!("restricted likelihood {neg2_relik}")));
    }
    Ok(FitResult {
        beta_hat,
        u_blup,
        x_blup,
        x_blup_deriv,
        residuals,
        sigma2_profile: components.sigma2_profile(),
        neg2_relik,
        c_beta,
        c_u,
        components,
    })
}

/// −2 · restricted log-likelihood, up to the additive constant.
pub fn neg2_restricted_loglik(data: &MixedModelData, vp: &VarianceParams, opts: &FitOptions) -> Result<f64> {
    gls_fit(data, vp, opts).map(|f| f.neg2_relik)
}

/// Maximizer of the restricted likelihood in `σ²` with everything else fixed.
pub fn profile_sigma2(data: &MixedModelData, vp: &VarianceParams, opts: &FitOptions) -> Result<f64> {
    gls_fit(data, vp, opts).map(|f| f.sigma2_profile)
}

#[derive(Debug, Clone)]
pub struct RemlOptions {
    pub max_evals: usize,
    pub tol: f64,
    pub initial_step: f64,
    pub fit: FitOptions,
}

impl Default for RemlOptions {
    fn default() -> Self {
        Self {
            max_evals: 200,
            tol: 1e-6,
            initial_step: 0.5,
            fit: FitOptions::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RemlResult {
    /// Estimates, with `σ²` at its profile value.
    pub params: VarianceParams,
    pub fit: FitResult,
    /// Penalty multipliers relative to the initial operator.
    pub penalty_scales: Vec<f64>,
    pub converged: bool,
    /// Simplex history in the unconstrained coordinates.
    pub minimum: Minimum,
}

/// Unconstrained coordinates: log penalty multipliers followed by the
/// log-Cholesky entries of `G` (log diagonal, raw strict lower triangle).
fn unpack(theta: &[f64], init: &VarianceParams) -> Result<(VarianceParams, Vec<f64>)> {
    let l_pen = init.op.penalties().len();
    let scales: Vec<f64> = theta[..l_pen].iter().map(|t| t.exp()).collect();
    let op = init.op.scaled(&scales)?;
    let q = init.g.nrows();
    let mut l = DMatrix::zeros(q, q);
    let mut it = theta[l_pen..].iter();
    for i in 0..q {
        for j in 0..=i {
            let v = *it.next().expect("parameter count");
            l[(i, j)] = if i == j { v.exp() } else { v };
        }
    }
    let g = &l * l.transpose();
    Ok((VarianceParams::new(init.sigma2, g, op)?, scales))
}

fn pack_g(g: &DMatrix<f64>) -> Result<Vec<f64>> {
    let q = g.nrows();
    if q == 0 {
        return Ok(Vec::new());
    }
    let l = Cholesky::new(g.clone()).ok_or_else(|| Error::NotPositiveDefinite("G".into()))?.l();
    let mut out = Vec::with_capacity(q * (q + 1) / 2);
    for i in 0..q {
        for j in 0..=i {
            out.push(if i == j { l[(i, i)].ln() } else { l[(i, j)] });
        }
    }
    Ok(out)
}

/// Restricted maximum likelihood over the penalty scales and `G`, with
/// `σ²` profiled out.
pub fn reml_optimize(data: &MixedModelData, init: &VarianceParams, opts: &RemlOptions) -> Result<RemlResult> {
    let mut theta0 = vec![0.0; init.op.penalties().len()];
    theta0.extend(pack_g(&init.g)?);
    let objective = |theta: &[f64]| -> Result<f64> {
        let (vp, _) = unpack(theta, init)?;
        let fit = gls_fit(data, &vp, &opts.fit)?;
        Ok(fit.components.neg2_at(fit.sigma2_profile))
    };
    let start = objective(&theta0)?;
    if !start.is_finite() {
        return Err(Error::NonFinite("restricted likelihood at the initial point".into()));
    }
    let nm = NelderMeadOptions {
        max_evals: opts.max_evals,
        tol: opts.tol,
        initial_step: opts.initial_step,
    };
    let minimum = nelder_mead(|t| objective(t).unwrap_or(f64::INFINITY), &theta0, &nm);
    let (mut params, penalty_scales) = unpack(&minimum.x, init)?;
    let fit0 = gls_fit(data, &params, &opts.fit)?;
    params.sigma2 = fit0.sigma2_profile.max(f64::MIN_POSITIVE);
    let fit = gls_fit(data, &params, &opts.fit)?;
    Ok(RemlResult {
        params,
        fit,
        penalty_scales,
        converged: minimum.converged,
        minimum,
    })
}

/// Likelihood-ratio statistic `neg2(null) - neg2(full)` and its degrees of
/// freedom for nested fixed-effect designs. The reference distribution is
/// χ² with `df` degrees of freedom.
pub fn lrt_report(full: &FitResult, null: &FitResult) -> Result<(f64, usize)> {
    let stat = null.neg2_relik - full.neg2_relik;
    let (pf, pn) = (full.beta_hat.len(), null.beta_hat.len());
    if pn > pf {
        return Err(Error::InvalidArgument(format!("null model has more fixed effects ({pn}) than the full one ({pf})")));
    }
    if stat < -1e-6 {
        return Err(Error::InvalidArgument(format!(
            "negative likelihood-ratio statistic {stat}; models are not nested or the fit failed"
        )));
    }
    Ok((stat.max(0.0), pf - pn))
}
