//! Constant-coefficient differential operators `L = Σ_l K_l†K_l` with
//! separated boundary conditions, and the spectral factorization of the
//! regularized operator `L_* = v·I + Δ·L`.

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative separation below which two characteristic roots count as equal.
pub const DISTINCT_ROOT_TOL: f64 = 1e-8;
/// Relative size of a real part below which a root counts as oscillatory.
pub const ZERO_REAL_TOL: f64 = 1e-12;

/// Expands `Σ_l K_l†K_l` into the coefficients `α_0..α_{2k}` of `L`.
///
/// Each `K_l` is given by its constant coefficients `(c_0, …, c_j)` in
/// `K_l = Σ_i c_i ∂^i`. The formal adjoint is `(c ∂^i)† = (-1)^i c ∂^i`,
/// so `α_m = Σ_l Σ_{i+j=m} (-1)^i c_i c_j`; odd coefficients cancel.
/// Returns `(alpha, k)`.
pub fn adjoint_square(penalties: &[Vec<f64>]) -> Result<(Vec<f64>, usize)> {
    if penalties.is_empty() {
        return Err(Error::InvalidOperator("no penalty operators given".into()));
    }
    if penalties.iter().flatten().any(|c| !c.is_finite()) {
        return Err(Error::InvalidOperator("non-finite penalty coefficient".into()));
    }
    let order = |c: &Vec<f64>| c.iter().rposition(|&x| x != 0.0);
    let k = penalties.iter().filter_map(order).max().unwrap_or(0);
    if k == 0 {
        return Err(Error::InvalidOperator(
            "all penalty operators have order 0; L would not measure roughness".into(),
        ));
    }
    let mut alpha = vec![0.0; 2 * k + 1];
    for c in penalties {
        for (i, ci) in c.iter().enumerate() {
            let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
            for (j, cj) in c.iter().enumerate() {
                alpha[i + j] += sign * ci * cj;
            }
        }
    }
    Ok((alpha, k))
}

/// Companion matrix of `Σ_j α*_j z^j`; its last row is `-α*_j / α*_{2k}`.
pub fn companion(alpha_star: &[f64]) -> Result<DMatrix<f64>> {
    let d = alpha_star.len().saturating_sub(1);
    if d == 0 {
        return Err(Error::InvalidOperator("constant polynomial has no roots".into()));
    }
    let lead = alpha_star[d];
    if lead == 0.0 || !lead.is_finite() {
        return Err(Error::InvalidOperator(format!("leading coefficient {lead} must be non-zero")));
    }
    let mut c = DMatrix::zeros(d, d);
    for i in 0..d - 1 {
        c[(i, i + 1)] = 1.0;
    }
    for j in 0..d {
        c[(d - 1, j)] = -alpha_star[j] / lead;
    }
    Ok(c)
}

/// Which derivative vanishes at each endpoint.
///
/// Slot `i` (1-based) holds an order in `{i - 1, 2k - i}`, so each endpoint
/// imposes exactly `k` conditions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundaryConditions {
    pub at_a: Vec<usize>,
    pub at_b: Vec<usize>,
}

/// The two Laplacian boundary configurations with closed-form kernels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BrownianKind {
    /// `θ(a) = θ'(b) = 0`.
    Motion,
    /// `θ(a) = θ(b) = 0`.
    Bridge,
}

impl BoundaryConditions {
    /// Places an unordered list of derivative orders into their slots.
    pub fn from_orders(k: usize, at_a: &[usize], at_b: &[usize]) -> Result<Self> {
        Ok(Self {
            at_a: slot_orders(k, at_a, "a")?,
            at_b: slot_orders(k, at_b, "b")?,
        })
    }

    fn validate(&self, k: usize) -> Result<()> {
        for (name, sel) in [("a", &self.at_a), ("b", &self.at_b)] {
            if sel.len() != k {
                return Err(Error::InvalidBoundary(format!(
                    "{} conditions at {name}, need {k}",
                    sel.len()
                )));
            }
            for (i, &o) in sel.iter().enumerate() {
                if o != i && o != 2 * k - 1 - i {
                    return Err(Error::InvalidBoundary(format!(
                        "slot {} at {name} admits orders {{{}, {}}}, got {o}",
                        i + 1,
                        i,
                        2 * k - 1 - i
                    )));
                }
            }
        }
        Ok(())
    }
}

fn slot_orders(k: usize, orders: &[usize], end: &str) -> Result<Vec<usize>> {
    if orders.len() != k {
        return Err(Error::InvalidBoundary(format!(
            "{} conditions at {end}, need {k}",
            orders.len()
        )));
    }
    let mut slots: Vec<Option<usize>> = vec![None; k];
    for &o in orders {
        if o >= 2 * k {
            return Err(Error::InvalidBoundary(format!(
                "derivative order {o} at {end} exceeds 2k-1 = {}",
                2 * k - 1
            )));
        }
        let slot = if o < k { o } else { 2 * k - 1 - o };
        if let Some(prev) = slots[slot] {
            return Err(Error::InvalidBoundary(format!(
                "orders {prev} and {o} at {end} compete for the same condition slot"
            )));
        }
        slots[slot] = Some(o);
    }
    Ok(slots.into_iter().map(|s| s.expect("all slots filled")).collect())
}

/// `L = Σ_l K_l†K_l` together with its boundary conditions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatorSpec {
    k: usize,
    penalties: Vec<Vec<f64>>,
    alpha: Vec<f64>,
    bc: BoundaryConditions,
}

impl OperatorSpec {
    pub fn new(penalties: Vec<Vec<f64>>, bc: BoundaryConditions) -> Result<Self> {
        let (alpha, k) = adjoint_square(&penalties)?;
        bc.validate(k)?;
        let tau = alpha[2 * k];
        // L = Σ K†K has leading coefficient (-1)^k Σ c_k²
        let signed = if k % 2 == 0 { tau } else { -tau };
        if signed <= 0.0 {
            return Err(Error::InvalidOperator(format!(
                "leading coefficient {tau} has the wrong sign for a sum of squares"
            )));
        }
        Ok(Self {
            k,
            penalties,
            alpha,
            bc,
        })
    }

    /// `K = λ∂` with (B1) or (B2) boundary conditions, so `L = -λ²∂²`.
    pub fn brownian(lambda: f64, kind: BrownianKind) -> Result<Self> {
        let at_b = match kind {
            BrownianKind::Motion => vec![1],
            BrownianKind::Bridge => vec![0],
        };
        Self::new(
            vec![vec![0.0, lambda]],
            BoundaryConditions {
                at_a: vec![0],
                at_b,
            },
        )
    }

    /// Half-order of `L`.
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn penalties(&self) -> &[Vec<f64>] {
        &self.penalties
    }

    /// Coefficients `α_0..α_{2k}` of `L`.
    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    /// Leading coefficient of `L`; its sign is `(-1)^k`.
    pub fn tau(&self) -> f64 {
        self.alpha[2 * self.k]
    }

    pub fn boundary(&self) -> &BoundaryConditions {
        &self.bc
    }

    /// Whether the boundary form of `L` vanishes on functions meeting the
    /// boundary conditions, i.e. whether the Green's function is symmetric.
    ///
    /// `∂^{2m}` contributes `Σ_{p+q=2m-1} ±θ^{(p)}φ^{(q)}` at each endpoint;
    /// every pair needs one of its orders among the imposed conditions.
    pub fn is_self_adjoint(&self) -> bool {
        [&self.bc.at_a, &self.bc.at_b].iter().all(|zero| {
            (1..=self.k)
                .filter(|&m| self.alpha[2 * m] != 0.0)
                .all(|m| (0..2 * m).all(|p| zero.contains(&p) || zero.contains(&(2 * m - 1 - p))))
        })
    }

    /// Same operator with penalty `l` multiplied by `scales[l]`.
    pub fn scaled(&self, scales: &[f64]) -> Result<Self> {
        if scales.len() != self.penalties.len() {
            return Err(Error::Dimension(format!(
                "{} scales for {} penalties",
                scales.len(),
                self.penalties.len()
            )));
        }
        let penalties = self
            .penalties
            .iter()
            .zip(scales)
            .map(|(c, s)| c.iter().map(|x| x * s).collect())
            .collect();
        Self::new(penalties, self.bc.clone())
    }

    /// Recognizes `K = λ∂` with (B1)/(B2) conditions and returns `(kind, λ)`.
    pub fn as_brownian(&self) -> Option<(BrownianKind, f64)> {
        if self.k != 1 || self.alpha[0] != 0.0 || self.bc.at_a != [0] {
            return None;
        }
        let lambda = (-self.alpha[2]).sqrt();
        match self.bc.at_b[0] {
            1 => Some((BrownianKind::Motion, lambda)),
            _ => Some((BrownianKind::Bridge, lambda)),
        }
    }

    /// Coefficients of `v·I + Δ·L`.
    pub fn regularized(&self, v: f64, delta: f64) -> Vec<f64> {
        let mut a: Vec<f64> = self.alpha.iter().map(|x| delta * x).collect();
        a[0] += v;
        a
    }
}

/// Spectral data of `L_* = v·I + Δ·L` on `[a, b]`.
///
/// Roots of the characteristic polynomial are split into `k` with
/// non-positive real part (`eta_minus`) and `k` with non-negative real part
/// (`eta_plus`). All exponentials used downstream are of the form
/// `exp(x·η⁻)` or `exp(-x·η⁺)` with `x ≥ 0`, which never grow.
#[derive(Debug, Clone)]
pub struct SpectralFactorization {
    pub(crate) k: usize,
    pub(crate) v: f64,
    pub(crate) delta: f64,
    pub(crate) a: f64,
    pub(crate) b: f64,
    pub(crate) leading: f64,
    pub(crate) tau: f64,
    pub(crate) bc: BoundaryConditions,
    pub(crate) eta_minus: Vec<Complex64>,
    pub(crate) eta_plus: Vec<Complex64>,
    pub(crate) wm: DMatrix<Complex64>,
    pub(crate) wp: DMatrix<Complex64>,
    pub(crate) vm: Vec<Complex64>,
    pub(crate) vp: Vec<Complex64>,
    pub(crate) fa: DMatrix<f64>,
    pub(crate) fb: DMatrix<f64>,
    /// `(F_a W_-)⁻¹ F_a W_+`
    pub(crate) pa: DMatrix<Complex64>,
    /// `(F_b W_+)⁻¹ F_b W_-`
    pub(crate) pb: DMatrix<Complex64>,
    pub(crate) b_mat: DMatrix<Complex64>,
    /// `P_a e^{-(b-a)J_+} P_b`
    pub(crate) x_mat: DMatrix<Complex64>,
    /// `P_b e^{(b-a)J_-} P_a`
    pub(crate) y_mat: DMatrix<Complex64>,
}

impl SpectralFactorization {
    pub fn k(&self) -> usize {
        self.k
    }
    pub fn v(&self) -> f64 {
        self.v
    }
    pub fn delta(&self) -> f64 {
        self.delta
    }
    pub fn interval(&self) -> (f64, f64) {
        (self.a, self.b)
    }
    /// Leading coefficient of `L_*`, i.e. `Δ·τ`.
    pub fn leading(&self) -> f64 {
        self.leading
    }
    pub fn tau(&self) -> f64 {
        self.tau
    }
    pub fn boundary(&self) -> &BoundaryConditions {
        &self.bc
    }
    pub fn eta_minus(&self) -> &[Complex64] {
        &self.eta_minus
    }
    pub fn eta_plus(&self) -> &[Complex64] {
        &self.eta_plus
    }
    pub fn w_minus(&self) -> &DMatrix<Complex64> {
        &self.wm
    }
    pub fn w_plus(&self) -> &DMatrix<Complex64> {
        &self.wp
    }
    pub fn v_minus(&self) -> &[Complex64] {
        &self.vm
    }
    pub fn v_plus(&self) -> &[Complex64] {
        &self.vp
    }
    pub fn f_a(&self) -> &DMatrix<f64> {
        &self.fa
    }
    pub fn f_b(&self) -> &DMatrix<f64> {
        &self.fb
    }
    /// `(F_a W_-)⁻¹ F_a W_+`
    pub fn fa_wm_inv_fa_wp(&self) -> &DMatrix<Complex64> {
        &self.pa
    }
    /// `(F_b W_+)⁻¹ F_b W_-`
    pub fn fb_wp_inv_fb_wm(&self) -> &DMatrix<Complex64> {
        &self.pb
    }
    pub fn b_matrix(&self) -> &DMatrix<Complex64> {
        &self.b_mat
    }

    /// Characteristic roots, minus block first.
    pub fn roots(&self) -> Vec<Complex64> {
        self.eta_minus.iter().chain(&self.eta_plus).copied().collect()
    }

    /// `diag(exp(x·η⁻))`, bounded by one for `x ≥ 0`.
    pub fn exp_minus(&self, x: f64) -> Vec<Complex64> {
        self.eta_minus.iter().map(|e| (e * x).exp()).collect()
    }

    /// `diag(exp(-x·η⁺))`, bounded by one for `x ≥ 0`.
    pub fn exp_plus(&self, x: f64) -> Vec<Complex64> {
        self.eta_plus.iter().map(|e| (-e * x).exp()).collect()
    }
}

/// Roots of `Σ_j α*_j z^j` from the companion matrix, refined by Newton steps.
fn polynomial_roots(alpha_star: &[f64]) -> Result<Vec<Complex64>> {
    let c = companion(alpha_star)?;
    let eig: Vec<Complex64> = match nalgebra::linalg::Schur::try_new(c, f64::EPSILON, 500) {
        Some(schur) => schur.complex_eigenvalues().iter().copied().collect(),
        // QR stalls on some symmetric root patterns; fall back to Aberth
        None => aberth_roots(alpha_star)?,
    };
    let poly = |z: Complex64| -> (Complex64, Complex64) {
        let mut p = Complex64::new(0.0, 0.0);
        let mut dp = Complex64::new(0.0, 0.0);
        for &a in alpha_star.iter().rev() {
            dp = dp * z + p;
            p = p * z + a;
        }
        (p, dp)
    };
    let roots = eig
        .iter()
        .map(|&z0| {
            let mut z = z0;
            let mut best = (z, poly(z).0.norm());
            for _ in 0..3 {
                let (p, dp) = poly(z);
                if dp.norm() == 0.0 {
                    break;
                }
                z -= p / dp;
                let r = poly(z).0.norm();
                if r < best.1 {
                    best = (z, r);
                }
            }
            best.0
        })
        .collect();
    Ok(roots)
}

/// Simultaneous Newton iteration with Aberth corrections.
fn aberth_roots(alpha_star: &[f64]) -> Result<Vec<Complex64>> {
    let d = alpha_star.len() - 1;
    let lead = alpha_star[d];
    // Cauchy bound on the root moduli
    let radius = 1.0 + alpha_star[..d].iter().map(|a| (a / lead).abs()).fold(0.0, f64::max);
    let start = radius.min(
        (alpha_star[0] / lead).abs().powf(1.0 / d as f64).max(1e-3),
    );
    let mut z: Vec<Complex64> = (0..d)
        .map(|j| Complex64::from_polar(start, 2.0 * std::f64::consts::PI * (j as f64 + 0.25) / d as f64 + 0.4))
        .collect();
    for _ in 0..500 {
        let mut moved = 0.0f64;
        for i in 0..d {
            let (mut p, mut dp) = (Complex64::new(0.0, 0.0), Complex64::new(0.0, 0.0));
            for &a in alpha_star.iter().rev() {
                dp = dp * z[i] + p;
                p = p * z[i] + a;
            }
            if p.norm() == 0.0 {
                continue;
            }
            let ratio = p / dp;
            let repulsion: Complex64 = (0..d).filter(|&j| j != i).map(|j| 1.0 / (z[i] - z[j])).sum();
            let step = ratio / (1.0 - ratio * repulsion);
            if step.re.is_finite() && step.im.is_finite() {
                z[i] -= step;
                moved = moved.max(step.norm() / z[i].norm().max(1e-300));
            }
        }
        if moved < 1e-15 {
            return Ok(z);
        }
    }
    if z.iter().all(|r| r.re.is_finite() && r.im.is_finite()) {
        Ok(z)
    } else {
        Err(Error::NonFinite("characteristic roots did not converge".into()))
    }
}

fn selection_matrix(k: usize, orders: &[usize]) -> DMatrix<f64> {
    let mut f = DMatrix::zeros(k, 2 * k);
    for (i, &o) in orders.iter().enumerate() {
        f[(i, o)] = 1.0;
    }
    f
}

fn vandermonde(roots: &[Complex64], rows: usize) -> DMatrix<Complex64> {
    DMatrix::from_fn(rows, roots.len(), |r, c| roots[c].powu(r as u32))
}

fn select_rows(w: &DMatrix<Complex64>, orders: &[usize]) -> DMatrix<Complex64> {
    DMatrix::from_fn(orders.len(), w.ncols(), |i, j| w[(orders[i], j)])
}

fn inverse(m: DMatrix<Complex64>, what: &str) -> Result<DMatrix<Complex64>> {
    let scale = m.iter().map(|z| z.norm()).fold(0.0, f64::max);
    let inv = m
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::Singular(what.to_string()))?;
    let iscale = inv.iter().map(|z| z.norm()).fold(0.0, f64::max);
    if !(iscale.is_finite()) || scale * iscale > 1e14 {
        return Err(Error::Singular(format!("{what} (condition ~ {:e})", scale * iscale)));
    }
    Ok(inv)
}

pub(crate) fn diag_left(d: &[Complex64], m: &DMatrix<Complex64>) -> DMatrix<Complex64> {
    DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| d[i] * m[(i, j)])
}

/// Factorizes `L_* = v·I + Δ·L` on `[a, b]`.
pub fn factorize(op: &OperatorSpec, v: f64, delta: f64, a: f64, b: f64) -> Result<SpectralFactorization> {
    if !(0.0..=1.0).contains(&v) {
        return Err(Error::InvalidArgument(format!("ridge v = {v} must lie in [0, 1]")));
    }
    if !(delta > 0.0 && delta.is_finite()) {
        return Err(Error::InvalidArgument(format!("mesh {delta} must be positive")));
    }
    if !(b > a) {
        return Err(Error::InvalidArgument(format!("empty interval [{a}, {b}]")));
    }
    factorize_coefficients(&op.regularized(v, delta), op.tau(), &op.bc, v, delta, a, b)
}

pub(crate) fn factorize_coefficients(
    alpha_star: &[f64],
    tau: f64,
    bc: &BoundaryConditions,
    v: f64,
    delta: f64,
    a: f64,
    b: f64,
) -> Result<SpectralFactorization> {
    let k = (alpha_star.len() - 1) / 2;
    let leading = alpha_star[2 * k];
    let roots = polynomial_roots(alpha_star)?;
    let max_abs = roots.iter().map(|z| z.norm()).fold(0.0, f64::max);
    if !(max_abs > 0.0 && max_abs.is_finite()) {
        return Err(Error::RepeatedRoots { separation: 0.0 });
    }
    let mut min_sep = f64::INFINITY;
    for i in 0..roots.len() {
        for j in i + 1..roots.len() {
            min_sep = min_sep.min((roots[i] - roots[j]).norm());
        }
    }
    if min_sep < DISTINCT_ROOT_TOL * max_abs {
        return Err(Error::RepeatedRoots { separation: min_sep });
    }
    if roots.iter().any(|z| z.re.abs() <= ZERO_REAL_TOL * max_abs) {
        // purely oscillatory modes leave no decaying direction to split on
        return Err(Error::UnbalancedRoots { k });
    }
    let mut eta_minus: Vec<Complex64> = roots.iter().copied().filter(|z| z.re < 0.0).collect();
    let mut eta_plus: Vec<Complex64> = roots.iter().copied().filter(|z| z.re > 0.0).collect();
    if eta_minus.len() != k || eta_plus.len() != k {
        return Err(Error::UnbalancedRoots { k });
    }
    let key = |z: &Complex64| (z.re, z.im);
    eta_minus.sort_by(|x, y| key(x).partial_cmp(&key(y)).unwrap());
    eta_plus.sort_by(|x, y| key(x).partial_cmp(&key(y)).unwrap());

    let wm = vandermonde(&eta_minus, 2 * k);
    let wp = vandermonde(&eta_plus, 2 * k);
    let mut w = DMatrix::zeros(2 * k, 2 * k);
    w.view_mut((0, 0), (2 * k, k)).copy_from(&wm);
    w.view_mut((0, k), (2 * k, k)).copy_from(&wp);
    let mut e_last = nalgebra::DVector::zeros(2 * k);
    e_last[2 * k - 1] = Complex64::new(1.0, 0.0);
    let sol = w
        .lu()
        .solve(&e_last)
        .ok_or_else(|| Error::Singular("Vandermonde matrix of the roots".into()))?;
    let vm: Vec<Complex64> = sol.iter().take(k).copied().collect();
    let vp: Vec<Complex64> = sol.iter().skip(k).copied().collect();

    let fa = selection_matrix(k, &bc.at_a);
    let fb = selection_matrix(k, &bc.at_b);
    let fa_wm = select_rows(&wm, &bc.at_a);
    let fa_wp = select_rows(&wp, &bc.at_a);
    let fb_wm = select_rows(&wm, &bc.at_b);
    let fb_wp = select_rows(&wp, &bc.at_b);
    let pa = inverse(fa_wm, "F_a W_- (boundary conditions at a)")? * fa_wp;
    let pb = inverse(fb_wp, "F_b W_+ (boundary conditions at b)")? * fb_wm;

    let len = b - a;
    let em: Vec<Complex64> = eta_minus.iter().map(|e| (e * len).exp()).collect();
    let ep: Vec<Complex64> = eta_plus.iter().map(|e| (-e * len).exp()).collect();
    let x_mat = &pa * diag_left(&ep, &pb);
    let y_mat = &pb * diag_left(&em, &pa);
    let inner = DMatrix::identity(k, k) - diag_left(&em, &x_mat);
    let b_mat = &x_mat * inverse(inner, "I - e^{(b-a)J_-} P_a e^{-(b-a)J_+} P_b")?;

    Ok(SpectralFactorization {
        k,
        v,
        delta,
        a,
        b,
        leading,
        tau,
        bc: bc.clone(),
        eta_minus,
        eta_plus,
        wm,
        wp,
        vm,
        vp,
        fa,
        fb,
        pa,
        pb,
        b_mat,
        x_mat,
        y_mat,
    })
}
