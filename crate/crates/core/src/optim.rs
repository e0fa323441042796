//! Derivative-free minimization by the Nelder–Mead simplex method.

#[derive(Debug, Clone)]
pub struct NelderMeadOptions {
    pub max_evals: usize,
    /// Stop when the spread of simplex values falls below
    /// `tol·(1 + |f_best|)` and its diameter below `tol`.
    pub tol: f64,
    pub initial_step: f64,
}

impl Default for NelderMeadOptions {
    fn default() -> Self {
        Self {
            max_evals: 200,
            tol: 1e-6,
            initial_step: 0.5,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub value: f64,
    pub evals: usize,
    pub converged: bool,
    /// Every evaluated point in order.
    pub trace: Vec<(Vec<f64>, f64)>,
}

/// Minimizes `f` from `x0`. Non-finite values are treated as `+∞`, so the
/// simplex backs away from regions where `f` fails.
pub fn nelder_mead<F>(mut f: F, x0: &[f64], opts: &NelderMeadOptions) -> Minimum
where
    F: FnMut(&[f64]) -> f64,
{
    let n = x0.len();
    let mut trace = Vec::new();
    let mut eval = |x: &[f64], trace: &mut Vec<(Vec<f64>, f64)>| {
        let v = f(x);
        let v = if v.is_finite() { v } else { f64::INFINITY };
        trace.push((x.to_vec(), v));
        v
    };
    if n == 0 {
        let v = eval(x0, &mut trace);
        return Minimum {
            x: Vec::new(),
            value: v,
            evals: 1,
            converged: true,
            trace,
        };
    }
    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n + 1);
    let v0 = eval(x0, &mut trace);
    simplex.push((x0.to_vec(), v0));
    for i in 0..n {
        let mut x = x0.to_vec();
        x[i] += opts.initial_step;
        let v = eval(&x, &mut trace);
        simplex.push((x, v));
    }
    let (alpha, gamma, rho, sigma) = (1.0, 2.0, 0.5, 0.5);
    let mut converged = false;
    // an iteration costs at most n + 2 evaluations
    while trace.len() + n + 2 <= opts.max_evals {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let best = simplex[0].1;
        let worst = simplex[n].1;
        let diameter = simplex[1..]
            .iter()
            .map(|(x, _)| x.iter().zip(&simplex[0].0).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
            .fold(0.0, f64::max);
        if best.is_finite() && (worst - best).abs() <= opts.tol * (1.0 + best.abs()) && diameter <= opts.tol.sqrt() {
            converged = true;
            break;
        }
        let mut centroid = vec![0.0; n];
        for (x, _) in &simplex[..n] {
            for (c, xi) in centroid.iter_mut().zip(x) {
                *c += xi / n as f64;
            }
        }
        let along = |t: f64| -> Vec<f64> {
            centroid
                .iter()
                .zip(&simplex[n].0)
                .map(|(c, w)| c + t * (c - w))
                .collect()
        };
        let xr = along(alpha);
        let fr = eval(&xr, &mut trace);
        if fr < simplex[0].1 {
            let xe = along(gamma);
            let fe = eval(&xe, &mut trace);
            simplex[n] = if fe < fr { (xe, fe) } else { (xr, fr) };
            continue;
        }
        if fr < simplex[n - 1].1 {
            simplex[n] = (xr, fr);
            continue;
        }
        let (xc, fc) = if fr < simplex[n].1 {
            let xc = along(rho);
            let fc = eval(&xc, &mut trace);
            (xc, fc)
        } else {
            let xc = along(-rho);
            let fc = eval(&xc, &mut trace);
            (xc, fc)
        };
        if fc < simplex[n].1.min(fr) {
            simplex[n] = (xc, fc);
            continue;
        }
        let x_best = simplex[0].0.clone();
        for item in simplex.iter_mut().skip(1) {
            let x: Vec<f64> = x_best.iter().zip(&item.0).map(|(b, x)| b + sigma * (x - b)).collect();
            let v = eval(&x, &mut trace);
            *item = (x, v);
        }
    }
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    let (x, value) = simplex.swap_remove(0);
    Minimum {
        x,
        value,
        evals: trace.len(),
        converged,
        trace,
    }
}
