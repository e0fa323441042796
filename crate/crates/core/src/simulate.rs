//! Draws synthetic data from the mixed model.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::model::MixedModelData;
use crate::oracle::{kernel_matrix, DenseKernel};

/// Largest grid whose kernel matrix is factorized for sampling.
pub const SIMULATION_GRID_LIMIT: usize = 5000;

#[derive(Debug, Clone)]
pub struct SimulationSpec {
    pub grid: Grid,
    pub samples: usize,
    pub kernel: DenseKernel,
    pub sigma2: f64,
    /// `q×q`, relative to `σ²`.
    pub g: DMatrix<f64>,
    pub beta: DVector<f64>,
    /// `(N·M)×p`
    pub gamma: DMatrix<f64>,
    /// `(N·M)×q`
    pub z: DMatrix<f64>,
    pub seed: u64,
}

/// Columns `1, t, …, t^degree` repeated for each sample.
pub fn polynomial_design(grid: &Grid, samples: usize, degree: usize) -> DMatrix<f64> {
    let n = grid.len();
    DMatrix::from_fn(n * samples, degree + 1, |r, c| grid.points()[r % n].powi(c as i32))
}

/// One indicator column per sample: a random intercept.
pub fn sample_intercepts(grid: &Grid, samples: usize) -> DMatrix<f64> {
    let n = grid.len();
    DMatrix::from_fn(n * samples, samples, |r, c| if r / n == c { 1.0 } else { 0.0 })
}

/// Smooth effect, random effects and noise are drawn in that order from a
/// single ChaCha stream, so a seed fixes the output.
pub fn simulate(spec: &SimulationSpec) -> Result<MixedModelData> {
    let n = spec.grid.len();
    if n > SIMULATION_GRID_LIMIT {
        return Err(Error::SizeGuard {
            size: n,
            limit: SIMULATION_GRID_LIMIT,
        });
    }
    if !(spec.sigma2 >= 0.0 && spec.sigma2.is_finite()) {
        return Err(Error::InvalidArgument(format!("σ² = {} must be non-negative", spec.sigma2)));
    }
    let m = spec.samples;
    let total = n * m;
    if spec.gamma.nrows() != total || spec.z.nrows() != total {
        return Err(Error::Dimension(format!("designs must have {total} rows")));
    }
    if spec.beta.len() != spec.gamma.ncols() || spec.g.nrows() != spec.z.ncols() {
        return Err(Error::Dimension("β/Γ or G/Z sizes disagree".into()));
    }
    let r0 = kernel_matrix(&spec.kernel, &spec.grid)?;
    let l = Cholesky::new(r0)
        .ok_or_else(|| Error::NotPositiveDefinite("kernel matrix; unsupported kernel for sampling".into()))?
        .l();
    let q = spec.g.nrows();
    let lg = if q > 0 {
        Cholesky::new(spec.g.clone())
            .ok_or_else(|| Error::NotPositiveDefinite("G".into()))?
            .l()
    } else {
        DMatrix::zeros(0, 0)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut normal = |len: usize| DVector::from_iterator(len, (0..len).map(|_| StandardNormal.sample(&mut rng)));
    let sd = spec.sigma2.sqrt();
    let mut x = DMatrix::zeros(n, m);
    for s in 0..m {
        x.set_column(s, &(&l * normal(n) * sd));
    }
    let u = &lg * normal(q) * sd;
    let eps = normal(total) * sd;
    let mean = &spec.gamma * &spec.beta + &spec.z * &u;
    let y = DMatrix::from_fn(n, m, |i, s| x[(i, s)] + mean[s * n + i] + eps[s * n + i]);
    MixedModelData::new(spec.grid.clone(), y, spec.gamma.clone(), spec.z.clone())
}
