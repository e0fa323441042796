//! JSON run configuration.

use std::path::Path;

use nalgebra::DMatrix;
use opmix::logdet::QuadratureSpec;
use opmix::operator::{BoundaryConditions, OperatorSpec};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct OperatorConfig {
    pub k: usize,
    /// Coefficients `c_0..c_k` of each penalty operator.
    pub penalties: Vec<Vec<f64>>,
    pub bc_a: Vec<String>,
    pub bc_b: Vec<String>,
}

#[derive(Debug, Clone, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct InitConfig {
    pub sigma2: Option<f64>,
    #[serde(rename = "G")]
    pub g: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub max_iter: usize,
    pub tol: f64,
    pub initial_step: f64,
    pub init: InitConfig,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            max_iter: 200,
            tol: 1e-6,
            initial_step: 0.5,
            init: InitConfig::default(),
        }
    }
}

/// What `simulate` draws. Fixed effects are the polynomial `1, t, …` with
/// as many terms as `beta`; `random_intercept_var > 0` adds one random
/// intercept per sample.
#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationConfig {
    pub n: usize,
    pub samples: usize,
    pub sigma2: f64,
    #[serde(default)]
    pub beta: Vec<f64>,
    #[serde(default)]
    pub random_intercept_var: f64,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub operator: OperatorConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub quadrature: QuadratureSpec,
    #[serde(default)]
    pub emit_derivatives: Vec<usize>,
    /// `[a, b]`; inferred from the time column when absent.
    #[serde(default)]
    pub domain: Option<[f64; 2]>,
    #[serde(default)]
    pub simulation: Option<SimulationConfig>,
}

impl Config {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        cfg.operator()?;
        if cfg.quadrature.nodes == 0 {
            return Err(CliError::Config("quadrature.nodes must be positive".into()));
        }
        if let Some([a, b]) = cfg.domain {
            if !(a.is_finite() && b.is_finite() && a < b) {
                return Err(CliError::Config(format!("domain [{a}, {b}] is not an interval")));
            }
        }
        Ok(cfg)
    }

    pub fn operator(&self) -> CliResult<OperatorSpec> {
        let o = &self.operator;
        let at_a = parse_side(&o.bc_a, End::A)?;
        let at_b = parse_side(&o.bc_b, End::B)?;
        let bc = BoundaryConditions::from_orders(o.k, &at_a, &at_b)?;
        let op = OperatorSpec::new(o.penalties.clone(), bc)?;
        if op.k() != o.k {
            return Err(CliError::Config(format!(
                "k = {} but the penalties have order {}",
                o.k,
                op.k()
            )));
        }
        Ok(op)
    }

    /// `G` from the config, or the identity when absent.
    pub fn init_g(&self, q: usize) -> CliResult<DMatrix<f64>> {
        match &self.optimizer.init.g {
            None => Ok(DMatrix::identity(q, q)),
            Some(rows) => {
                if rows.len() != q || rows.iter().any(|r| r.len() != q) {
                    return Err(CliError::Config(format!("optimizer.init.G must be {q}×{q}")));
                }
                Ok(DMatrix::from_fn(q, q, |i, j| rows[i][j]))
            }
        }
    }

    pub fn init_sigma2(&self) -> f64 {
        self.optimizer.init.sigma2.unwrap_or(1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum End {
    A,
    B,
}

/// Parses `theta(a)=0`, `theta'(b)=0`, `theta''(a)=0` or `theta^(3)(b)=0`
/// into the endpoint and the derivative order.
pub fn parse_condition(s: &str) -> CliResult<(End, usize)> {
    let compact: String = s.chars().filter(|c| !c.is_whitespace()).collect();
    let bad = || CliError::Config(format!("cannot parse boundary condition {s:?}"));
    let body = compact.strip_suffix("=0").ok_or_else(bad)?;
    let rest = body.strip_prefix("theta").ok_or_else(bad)?;
    let (order, rest) = if let Some(r) = rest.strip_prefix("^(") {
        let close = r.find(')').ok_or_else(bad)?;
        let n: usize = r[..close].parse().map_err(|_| bad())?;
        (n, &r[close + 1..])
    } else {
        let primes = rest.chars().take_while(|&c| c == '\'').count();
        (primes, &rest[primes..])
    };
    let end = match rest {
        "(a)" => End::A,
        "(b)" => End::B,
        _ => return Err(bad()),
    };
    Ok((end, order))
}

fn parse_side(conds: &[String], end: End) -> CliResult<Vec<usize>> {
    let mut orders = Vec::with_capacity(conds.len());
    for c in conds {
        let (e, order) = parse_condition(c)?;
        if e != end {
            let want = if end == End::A { "bc_a" } else { "bc_b" };
            return Err(CliError::Config(format!("{c:?} is listed under {want} but names the other endpoint")));
        }
        if orders.contains(&order) {
            return Err(CliError::Config(format!("duplicate boundary condition {c:?}")));
        }
        orders.push(order);
    }
    Ok(orders)
}
