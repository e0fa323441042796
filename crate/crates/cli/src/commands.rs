//! The subcommands. Each returns an [`Outcome`] or a hard error.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use opmix::grid::Grid;
use opmix::logdet::{logdet_approx, logdet_closed_brownian};
use opmix::model::{gls_fit, reml_optimize, AinvOperator, FitOptions, FitResult, RemlOptions, VarianceParams};
use opmix::operator::{BrownianKind, OperatorSpec};
use opmix::oracle::{build_r0, oracle_fit, DenseKernel};
use opmix::simulate::{polynomial_design, sample_intercepts, simulate, SimulationSpec};
use opmix::solve::solve_grid;
use serde_json::{json, Value};

use crate::config::Config;
use crate::error::{CliError, CliResult};
use crate::ingest::{ingest_csv, write_csv, Ingested};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Success,
    /// Outputs were written but the optimizer stopped on its budget.
    NotConverged,
}

impl Outcome {
    pub fn exit_code(self) -> u8 {
        match self {
            Self::Success => 0,
            Self::NotConverged => 2,
        }
    }
}

fn create(path: &Path) -> CliResult<std::io::BufWriter<std::fs::File>> {
    std::fs::File::create(path)
        .map(std::io::BufWriter::new)
        .map_err(|e| CliError::io(path, e))
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn max_abs_diff<'a>(a: impl IntoIterator<Item = &'a f64>, b: impl IntoIterator<Item = &'a f64>) -> f64 {
    a.into_iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

struct Estimate {
    params: VarianceParams,
    fit: FitResult,
    penalty_scales: Vec<f64>,
    converged: bool,
    evaluations: usize,
    trace: Vec<(Vec<f64>, f64)>,
}

/// `fit` runs the restricted-likelihood search; `predict` (`optimize =
/// false`) evaluates the configured initial parameters as given.
pub fn run_fit(data_path: &Path, config_path: &Path, out_dir: &Path, oracle: bool, optimize: bool) -> CliResult<Outcome> {
    let cfg = Config::load(config_path)?;
    let ing = ingest_csv(data_path, cfg.domain)?;
    let data = &ing.data;
    let init = VarianceParams::new(cfg.init_sigma2(), cfg.init_g(data.q())?, cfg.operator()?)?;
    let mut orders: Vec<usize> = cfg.emit_derivatives.iter().copied().filter(|&o| o > 0).collect();
    orders.sort_unstable();
    orders.dedup();
    let fit_opts = FitOptions {
        quadrature: cfg.quadrature,
        derivative_orders: orders.clone(),
        ..FitOptions::default()
    };
    let est = if optimize {
        let opts = RemlOptions {
            max_evals: cfg.optimizer.max_iter,
            tol: cfg.optimizer.tol,
            initial_step: cfg.optimizer.initial_step,
            fit: fit_opts,
        };
        let r = reml_optimize(data, &init, &opts)?;
        Estimate {
            evaluations: r.minimum.evals,
            trace: r.minimum.trace,
            params: r.params,
            fit: r.fit,
            penalty_scales: r.penalty_scales,
            converged: r.converged,
        }
    } else {
        Estimate {
            fit: gls_fit(data, &init, &fit_opts)?,
            penalty_scales: vec![1.0; init.op.penalties().len()],
            params: init,
            converged: true,
            evaluations: 1,
            trace: Vec::new(),
        }
    };
    let dense = if oracle {
        let model = build_r0(&DenseKernel::for_operator(&est.params.op), data.grid())?;
        Some(oracle_fit(data, &est.params, &model)?)
    } else {
        None
    };

    std::fs::create_dir_all(out_dir).map_err(|e| CliError::io(out_dir, e))?;
    let summary = fit_summary(&cfg, &ing, &est, dense.as_ref(), optimize);
    let json_path = out_dir.join("fit.json");
    let mut w = create(&json_path)?;
    serde_json::to_writer_pretty(&mut w, &summary)?;
    writeln!(w).and_then(|_| w.flush()).map_err(|e| CliError::io(&json_path, e))?;
    write_predictions(&out_dir.join("predictions.csv"), &ing, &est.fit, dense.as_ref())?;
    Ok(if est.converged {
        Outcome::Success
    } else {
        Outcome::NotConverged
    })
}

fn fit_summary(cfg: &Config, ing: &Ingested, est: &Estimate, dense: Option<&FitResult>, optimize: bool) -> Value {
    let data = &ing.data;
    let fit = &est.fit;
    let se: Vec<f64> = fit.c_beta.diagonal().iter().map(|v| (v * est.params.sigma2).sqrt()).collect();
    let oracle = dense.map(|d| {
        json!({
            "neg2_reml": d.neg2_relik,
            "max_abs_diff": {
                "beta_hat": max_abs_diff(&fit.beta_hat, &d.beta_hat),
                "u_blup": max_abs_diff(&fit.u_blup, &d.u_blup),
                "x_blup": max_abs_diff(&fit.x_blup, &d.x_blup),
                "neg2_reml": (fit.neg2_relik - d.neg2_relik).abs(),
            }
        })
    });
    json!({
        "command": if optimize { "fit" } else { "predict" },
        "converged": est.converged,
        "evaluations": est.evaluations,
        "data": {
            "n": data.n(),
            "m": data.m(),
            "p": data.p(),
            "q": data.q(),
            "domain": [data.grid().a(), data.grid().b()],
            "fixed_names": ing.fixed_names,
            "random_names": ing.random_names,
        },
        "operator": {
            "k": est.params.op.k(),
            "penalties": est.params.op.penalties(),
            "bc_a": cfg.operator.bc_a,
            "bc_b": cfg.operator.bc_b,
        },
        "penalty_scales": est.penalty_scales,
        "sigma2": est.params.sigma2,
        "G": rows(&est.params.g),
        "beta_hat": fit.beta_hat.as_slice(),
        "beta_se": se,
        "c_beta": rows(&fit.c_beta),
        "u_blup": fit.u_blup.as_slice(),
        "neg2_reml": fit.neg2_relik,
        "components": fit.components,
        "trace": est.trace.iter().map(|(x, v)| json!({"theta": x, "neg2_reml": v})).collect::<Vec<_>>(),
        "quadrature": cfg.quadrature,
        "derivative_orders": fit.x_blup_deriv.iter().map(|(o, _)| o).collect::<Vec<_>>(),
        "oracle": oracle,
    })
}

fn write_predictions(path: &Path, ing: &Ingested, fit: &FitResult, dense: Option<&FitResult>) -> CliResult<()> {
    let io = |e| CliError::io(path, e);
    let mut w = create(path)?;
    let mut head = vec!["sample_id".to_owned(), "time".into(), "x_blup".into()];
    head.extend(fit.x_blup_deriv.iter().map(|(o, _)| format!("x_blup_d{o}")));
    head.push("residual".into());
    if dense.is_some() {
        head.extend(["x_blup_oracle".into(), "residual_oracle".into()]);
    }
    writeln!(w, "{}", head.join(",")).map_err(io)?;
    let t = ing.data.grid().points();
    for (s, id) in ing.sample_ids.iter().enumerate() {
        for (i, ti) in t.iter().enumerate() {
            let mut line = format!("{id},{ti:.16e},{:.16e}", fit.x_blup[(i, s)]);
            for (_, d) in &fit.x_blup_deriv {
                line.push_str(&format!(",{:.16e}", d[(i, s)]));
            }
            line.push_str(&format!(",{:.16e}", fit.residuals[(i, s)]));
            if let Some(d) = dense {
                line.push_str(&format!(",{:.16e},{:.16e}", d.x_blup[(i, s)], d.residuals[(i, s)]));
            }
            writeln!(w, "{line}").map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

/// `data.csv` → `data.truth.json`.
pub fn truth_path(out: &Path) -> PathBuf {
    out.with_extension("truth.json")
}

pub fn run_simulate(config_path: &Path, out: &Path, seed: u64) -> CliResult<Outcome> {
    let cfg = Config::load(config_path)?;
    let sim = cfg
        .simulation
        .clone()
        .ok_or_else(|| CliError::Config("simulate needs a \"simulation\" section".into()))?;
    let op = cfg.operator()?;
    let [a, b] = cfg.domain.unwrap_or([0.0, 1.0]);
    let grid = Grid::equidistant(a, b, sim.n)?;
    let m = sim.samples;
    if m == 0 {
        return Err(CliError::Config("simulation.samples must be positive".into()));
    }
    let total = sim.n * m;
    let gamma = if sim.beta.is_empty() {
        DMatrix::zeros(total, 0)
    } else {
        polynomial_design(&grid, m, sim.beta.len() - 1)
    };
    if !(sim.random_intercept_var >= 0.0 && sim.random_intercept_var.is_finite()) {
        return Err(CliError::Config("simulation.random_intercept_var must be non-negative".into()));
    }
    let (z, g) = if sim.random_intercept_var > 0.0 {
        (sample_intercepts(&grid, m), DMatrix::identity(m, m) * sim.random_intercept_var)
    } else {
        (DMatrix::zeros(total, 0), DMatrix::zeros(0, 0))
    };
    let kernel = DenseKernel::for_operator(&op);
    let spec = SimulationSpec {
        grid,
        samples: m,
        kernel: kernel.clone(),
        sigma2: sim.sigma2,
        g,
        beta: DVector::from_vec(sim.beta.clone()),
        gamma,
        z,
        seed,
    };
    let data = simulate(&spec)?;
    let ids: Vec<String> = (1..=m).map(|s| format!("s{s}")).collect();
    let fixed: Vec<String> = (0..sim.beta.len())
        .map(|d| if d == 0 { "fixed_intercept".into() } else { format!("fixed_t{d}") })
        .collect();
    let random: Vec<String> = (1..=data.q()).map(|s| format!("random_s{s}")).collect();
    write_csv(out, &data, &ids, &fixed, &random)?;
    let truth = json!({
        "seed": seed,
        "n": sim.n,
        "samples": m,
        "domain": [a, b],
        "sigma2": sim.sigma2,
        "beta": sim.beta,
        "random_intercept_var": sim.random_intercept_var,
        "penalties": op.penalties(),
        "kernel": kernel,
    });
    let tp = truth_path(out);
    let mut w = create(&tp)?;
    serde_json::to_writer_pretty(&mut w, &truth)?;
    writeln!(w).and_then(|_| w.flush()).map_err(|e| CliError::io(&tp, e))?;
    Ok(Outcome::Success)
}

/// Seconds per call, repeating until at least `min_total` has elapsed.
fn time_per_call<F: FnMut() -> CliResult<()>>(mut f: F, min_total: f64) -> CliResult<f64> {
    f()?;
    let mut reps = 1usize;
    loop {
        let start = Instant::now();
        for _ in 0..reps {
            f()?;
        }
        let el = start.elapsed().as_secs_f64();
        if el >= min_total {
            return Ok(el / reps as f64);
        }
        reps *= 2;
    }
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let (lx, ly): (Vec<f64>, Vec<f64>) = points.iter().map(|&(x, y)| (x.ln(), y.ln())).unzip();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    sxy / sxx
}

pub fn run_benchmark(out: &Path, max_n: usize, config_path: Option<&Path>) -> CliResult<Outcome> {
    let (op, quad) = match config_path {
        Some(p) => {
            let cfg = Config::load(p)?;
            (cfg.operator()?, cfg.quadrature)
        }
        None => (OperatorSpec::brownian(1.0, BrownianKind::Motion)?, Default::default()),
    };
    let sizes: Vec<usize> = [1_000, 10_000, 100_000, 1_000_000].into_iter().filter(|&n| n <= max_n).collect();
    if sizes.len() < 2 {
        return Err(CliError::Config(format!("--max-n {max_n} leaves fewer than two sizes")));
    }
    let mut w = create(out)?;
    let io = |e| CliError::io(out, e);
    writeln!(w, "routine,n,seconds").map_err(io)?;
    let mut solve_t = Vec::new();
    let mut logdet_t = Vec::new();
    for &n in &sizes {
        let grid = Grid::equidistant(0.0, 1.0, n)?;
        let ainv = AinvOperator::new(&grid, &op)?;
        let z: Vec<f64> = grid.points().iter().map(|t| (6.0 * t).sin() + t).collect();
        let s = time_per_call(
            || {
                solve_grid(ainv.factorization(), &grid, &z, &[0])?;
                Ok(())
            },
            0.2,
        )?;
        let l = time_per_call(
            || {
                logdet_approx(&op, &grid, &quad)?;
                Ok(())
            },
            0.2,
        )?;
        writeln!(w, "solve_grid,{n},{s:.16e}").map_err(io)?;
        writeln!(w, "logdet_approx,{n},{l:.16e}").map_err(io)?;
        solve_t.push((n as f64, s));
        logdet_t.push((n as f64, l));
    }
    w.flush().map_err(io)?;
    println!("solve_grid log-log slope {:.3}", loglog_slope(&solve_t));
    println!("logdet_approx log-log slope {:.3}", loglog_slope(&logdet_t));
    Ok(Outcome::Success)
}

pub fn run_logdet(config_path: &Path, n: usize, a: f64, b: f64) -> CliResult<Outcome> {
    let cfg = Config::load(config_path)?;
    let op = cfg.operator()?;
    let grid = Grid::equidistant(a, b, n)?;
    let approx = logdet_approx(&op, &grid, &cfg.quadrature)?;
    println!("logdet_approx {approx:.16e}");
    if let Some((kind, lambda)) = op.as_brownian() {
        let exact = logdet_closed_brownian(kind, lambda, a, b, n);
        println!("closed_form {exact:.16e}");
        println!("relative_error {:.3e}", ((approx - exact) / exact).abs());
    }
    Ok(Outcome::Success)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slope_of_power_law() {
        let pts: Vec<(f64, f64)> = [10.0, 100.0, 1000.0].iter().map(|&x: &f64| (x, 3.0 * x.powf(1.1))).collect();
        assert!((loglog_slope(&pts) - 1.1).abs() < 1e-12);
    }

    #[test]
    fn truth_sidecar_name() {
        assert_eq!(truth_path(Path::new("out/data.csv")), PathBuf::from("out/data.truth.json"));
    }
}
