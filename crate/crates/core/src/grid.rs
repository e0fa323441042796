//! Discretizations of `[a, b]`, the piecewise-linear embedding of grid
//! vectors, and the multiplication weights `mu`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative tolerance (in units of `b - a`) under which a set of points is
/// treated as the equidistant midpoint design.
pub const EQUIDISTANT_TOL: f64 = 1e-12;

/// How the sample points of a [`Grid`] are chosen.
#[derive(Debug, Clone, PartialEq)]
pub enum GridKind {
    /// `n` cell midpoints `t_n = a + (2n - 1)/(2N) (b - a)`.
    Equidistant(usize),
    /// Explicit, strictly increasing interior points.
    Points(Vec<f64>),
}

/// A discretization `a < t_1 < … < t_N < b`.
///
/// The endpoints act as implicit points `t_0 = a` and `t_{N+1} = b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    a: f64,
    b: f64,
    points: Vec<f64>,
    equidistant: bool,
    mu: Vec<f64>,
}

pub fn make_grid(a: f64, b: f64, kind: GridKind) -> Result<Grid> {
    match kind {
        GridKind::Equidistant(n) => Grid::equidistant(a, b, n),
        GridKind::Points(points) => Grid::from_points(a, b, points),
    }
}

impl Grid {
    pub fn equidistant(a: f64, b: f64, n: usize) -> Result<Self> {
        check_interval(a, b)?;
        if n < 2 {
            return Err(Error::InvalidGrid(format!("need at least 2 points, got {n}")));
        }
        let len = b - a;
        let points = (1..=n)
            .map(|i| a + (2 * i - 1) as f64 / (2 * n) as f64 * len)
            .collect();
        Ok(Self {
            a,
            b,
            points,
            equidistant: true,
            mu: vec![n as f64 / len; n],
        })
    }

    /// Builds a grid from explicit points; equidistance is detected.
    pub fn from_points(a: f64, b: f64, points: Vec<f64>) -> Result<Self> {
        check_interval(a, b)?;
        let n = points.len();
        if n < 2 {
            return Err(Error::InvalidGrid(format!("need at least 2 points, got {n}")));
        }
        if points.iter().any(|t| !t.is_finite()) {
            return Err(Error::InvalidGrid("non-finite point".into()));
        }
        if points[0] <= a || points[n - 1] >= b {
            return Err(Error::InvalidGrid(format!(
                "points must lie strictly inside ({a}, {b})"
            )));
        }
        if let Some(w) = points.windows(2).find(|w| w[1] <= w[0]) {
            return Err(Error::InvalidGrid(format!(
                "points not strictly increasing at {} -> {}",
                w[0], w[1]
            )));
        }
        let len = b - a;
        let equidistant = points.iter().enumerate().all(|(i, &t)| {
            let ideal = a + (2 * i + 1) as f64 / (2 * n) as f64 * len;
            (t - ideal).abs() <= EQUIDISTANT_TOL * len
        });
        if equidistant {
            let mut g = Self::equidistant(a, b, n)?;
            g.points = points;
            return Ok(g);
        }
        let mu = mu_weights(a, b, &points);
        Ok(Self {
            a,
            b,
            points,
            equidistant,
            mu,
        })
    }

    pub fn a(&self) -> f64 {
        self.a
    }

    pub fn b(&self) -> f64 {
        self.b
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    pub fn is_equidistant(&self) -> bool {
        self.equidistant
    }

    /// Mesh length `(b - a)/N`, defined for equidistant grids only.
    pub fn mesh(&self) -> Option<f64> {
        self.equidistant.then(|| (self.b - self.a) / self.len() as f64)
    }

    pub fn width(&self) -> f64 {
        self.b - self.a
    }

    pub fn contains(&self, t: f64) -> bool {
        t >= self.a && t <= self.b
    }

    pub(crate) fn check_inside(&self, t: f64) -> Result<()> {
        if self.contains(t) {
            Ok(())
        } else {
            Err(Error::OutsideDomain {
                t,
                a: self.a,
                b: self.b,
            })
        }
    }

    pub fn embed<'g>(&'g self, values: &'g [f64]) -> Result<EmbeddedFunction<'g>> {
        EmbeddedFunction::new(self, values)
    }
}

fn check_interval(a: f64, b: f64) -> Result<()> {
    if !(a.is_finite() && b.is_finite() && b > a) {
        return Err(Error::InvalidGrid(format!("need finite a < b, got [{a}, {b}]")));
    }
    Ok(())
}

/// Weights `mu_n = 2 / (t_{n+1} - t_{n-1})` with the endpoint cells measured
/// against `a` and `b` (which enter twice).
fn mu_weights(a: f64, b: f64, t: &[f64]) -> Vec<f64> {
    let n = t.len();
    (0..n)
        .map(|i| {
            let span = match i {
                0 => t[1] + t[0] - 2.0 * a,
                i if i == n - 1 => 2.0 * b - t[n - 1] - t[n - 2],
                i => t[i + 1] - t[i - 1],
            };
            2.0 / span
        })
        .collect()
}

/// Piecewise-linear interpolant of grid values, held constant on the two
/// boundary half-cells so that `E_z(a) = z_1` and `E_z(b) = z_N`.
#[derive(Debug, Clone, Copy)]
pub struct EmbeddedFunction<'g> {
    grid: &'g Grid,
    values: &'g [f64],
}

impl<'g> EmbeddedFunction<'g> {
    pub fn new(grid: &'g Grid, values: &'g [f64]) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::Dimension(format!(
                "embedding {} values on a grid of {} points",
                values.len(),
                grid.len()
            )));
        }
        Ok(Self { grid, values })
    }

    pub fn grid(&self) -> &Grid {
        self.grid
    }

    pub fn values(&self) -> &[f64] {
        self.values
    }

    pub fn eval(&self, t: f64) -> Result<f64> {
        embed_eval(self, t)
    }
}

pub fn embed_eval(e: &EmbeddedFunction<'_>, t: f64) -> Result<f64> {
    let g = e.grid;
    g.check_inside(t)?;
    let pts = &g.points;
    let z = e.values;
    let n = pts.len();
    // index of the first point strictly greater than t
    let idx = pts.partition_point(|&p| p <= t);
    Ok(match idx {
        0 => z[0],
        i if i == n => z[n - 1],
        i => {
            let (t0, t1) = (pts[i - 1], pts[i]);
            let w = (t - t0) / (t1 - t0);
            (1.0 - w) * z[i - 1] + w * z[i]
        }
    })
}

/// `Δ⁻¹ ∫_a^b E_z(s) ds`, integrated segment by segment in closed form.
pub fn weighted_sum_identity_check(grid: &Grid, z: &[f64]) -> Result<f64> {
    let delta = grid.mesh().ok_or(Error::NotEquidistant)?;
    if z.len() != grid.len() {
        return Err(Error::Dimension(format!(
            "{} values on a grid of {} points",
            z.len(),
            grid.len()
        )));
    }
    let t = grid.points();
    let n = t.len();
    let mut integral = (t[0] - grid.a) * z[0] + (grid.b - t[n - 1]) * z[n - 1];
    for i in 0..n - 1 {
        integral += 0.5 * (z[i] + z[i + 1]) * (t[i + 1] - t[i]);
    }
    Ok(integral / delta)
}
