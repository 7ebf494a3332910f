//! Built-in problems and JSON problem files.

use std::f64::consts::PI;
use std::path::Path;
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::model::fields::{
    ConstantScalar, ConstantVector, ExitIndicator, GaussianBump, Polynomial, PolynomialProfile,
    PotentialGradient, SeparablePolynomialField, SeparablePolynomialScalar,
};
use crate::model::{
    principal_exit_rate_1d, BoxDomain, Diffusion, ProblemSpec, ScalarField, Stopping, VectorField,
};

pub const BUILTIN_NAMES: [&str; 3] = ["brownian-exit", "double-well", "quadratic"];

/// Fraction of the principal exit rate declared as `λ₀`.
const EXIT_RATE_MARGIN: f64 = 0.9;

/// Exit of `X_t = (u − 1)t + B_t` from `(−2, b)` started at 0, with the single
/// constant basis function 1, `λ = 2` and zero costs. At `a = 1` the path is a
/// standard Brownian motion and `M^{u}_τ = B_τ`.
pub fn brownian_exit(b: f64) -> Result<ProblemSpec> {
    if !(b.is_finite() && b > 0.0) {
        return Err(invalid(format!("right endpoint b must be positive, got {b}")));
    }
    let width = 2.0 + b;
    // Principal Dirichlet rate of BM with drift −1 on an interval of length 2 + b.
    let rate = PI * PI / (2.0 * width * width) + 0.5;
    ProblemSpec::builder("brownian-exit", BoxDomain::new(vec![(-2.0, b)])?)
        .drift(Arc::new(ConstantVector(vec![-1.0])))
        .diffusion(Diffusion::Constant(DMatrix::identity(1, 1)))
        .alpha(1.0)
        .basis_function("constant", Arc::new(ConstantVector(vec![1.0])), 1.0)
        .lambda(2.0)
        .initial_state(vec![0.0])
        .dt(1e-3)
        .t_max(40.0)
        .exit_rate(Some(EXIT_RATE_MARGIN * rate))
        .build()
}

/// Overdamped motion in `V(x) = (x² − 1)²` with `dX = −V'(X) dt + √(2ε) dB`,
/// `ε = 1`, started in the left well and stopped on leaving `(−2, 0.5)`.
/// Unit running cost, terminal cost `(x − 0.5)²`, three Gaussian bumps.
pub fn double_well() -> Result<ProblemSpec> {
    let epsilon: f64 = 1.0;
    let sigma = (2.0 * epsilon).sqrt();
    let potential = PotentialGradient::new(vec![Polynomial::new(vec![1.0, 0.0, -2.0, 0.0, 1.0])]);
    let (lo, hi) = (-2.0, 0.5);
    let rate = principal_exit_rate_1d(&potential, sigma, lo, hi, 4000)?;
    let mut builder = ProblemSpec::builder("double-well", BoxDomain::new(vec![(lo, hi)])?)
        .drift(Arc::new(potential))
        .diffusion(Diffusion::Constant(DMatrix::from_element(1, 1, sigma)))
        .alpha(sigma)
        .running_cost(Arc::new(ConstantScalar(1.0)), true)
        .terminal_cost(Arc::new(SeparablePolynomialScalar {
            components: vec![Polynomial::new(vec![0.25, -1.0, 1.0])],
        }))
        .lambda(1.0)
        .initial_state(vec![-1.0])
        .dt(1e-3)
        .t_max(40.0)
        .exit_rate(Some(EXIT_RATE_MARGIN * rate));
    for (i, c) in [-1.5, -0.75, 0.0].into_iter().enumerate() {
        builder = builder.basis_function(
            format!("bump{i}"),
            Arc::new(GaussianBump {
                center: vec![c],
                width: 0.5,
                direction: vec![1.0],
            }),
            1.0,
        );
    }
    builder.build()
}

/// `dX = u dt + dB` on a fixed horizon `T` with zero cost and the constant
/// basis: the objective is exactly `½λ a² T`.
pub fn quadratic(horizon: f64) -> Result<ProblemSpec> {
    ProblemSpec::builder("quadratic", BoxDomain::new(vec![(-1e6, 1e6)])?)
        .drift(Arc::new(ConstantVector(vec![0.0])))
        .diffusion(Diffusion::Constant(DMatrix::identity(1, 1)))
        .alpha(1.0)
        .basis_function("constant", Arc::new(ConstantVector(vec![1.0])), 1.0)
        .lambda(1.0)
        .initial_state(vec![0.0])
        .dt(1e-2)
        .t_max(horizon)
        .stopping(Stopping::FixedHorizon)
        .build()
}

/// Parameters for built-in problems.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BuiltinParams {
    pub b: f64,
    pub horizon: f64,
}

impl Default for BuiltinParams {
    fn default() -> Self {
        Self { b: 1.0, horizon: 1.0 }
    }
}

pub fn builtin(name: &str, params: BuiltinParams) -> Result<ProblemSpec> {
    match name {
        "brownian-exit" => brownian_exit(params.b),
        "double-well" => double_well(),
        "quadratic" => quadratic(params.horizon),
        other => Err(Error::Config(format!(
            "unknown builtin problem '{other}' (expected one of {})",
            BUILTIN_NAMES.join(", ")
        ))),
    }
}

/// A builtin name, or a path to a JSON problem file.
pub fn load_problem(source: &str, params: BuiltinParams) -> Result<ProblemSpec> {
    if BUILTIN_NAMES.contains(&source) {
        return builtin(source, params);
    }
    let path = Path::new(source);
    if !path.exists() {
        return Err(Error::Config(format!(
            "'{source}' is neither a builtin problem nor an existing file"
        )));
    }
    let text = std::fs::read_to_string(path)?;
    let config: ProblemConfig = serde_json::from_str(&text)?;
    config.build()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum DriftConfig {
    Constant { value: Vec<f64> },
    /// One polynomial per coordinate, coefficients in increasing degree.
    Polynomial { coefficients: Vec<Vec<f64>> },
    /// `−∇V` for a separable polynomial potential.
    PotentialGradient { potential: Vec<Vec<f64>> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum DiffusionConfig {
    Scalar { value: f64 },
    Diagonal { values: Vec<f64> },
    Matrix { rows: Vec<Vec<f64>> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum CostConfig {
    Constant { value: f64 },
    Polynomial { coefficients: Vec<Vec<f64>> },
    ExitIndicator { coordinate: usize, level: f64, upper: bool },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum BasisConfig {
    Constant {
        direction: Vec<f64>,
        #[serde(default)]
        bound: Option<f64>,
    },
    GaussianBump {
        center: Vec<f64>,
        width: f64,
        direction: Vec<f64>,
        #[serde(default)]
        bound: Option<f64>,
    },
    Polynomial {
        coordinate: usize,
        coefficients: Vec<f64>,
        direction: Vec<f64>,
        #[serde(default)]
        bound: Option<f64>,
    },
}

fn default_lambda() -> f64 {
    1.0
}
fn default_dt() -> f64 {
    1e-3
}
fn default_t_max() -> f64 {
    100.0
}

/// JSON problem description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemConfig {
    #[serde(default)]
    pub name: Option<String>,
    #[serde(default)]
    pub dimension: Option<usize>,
    pub domain: Vec<[f64; 2]>,
    pub drift: DriftConfig,
    pub diffusion: DiffusionConfig,
    /// Defaults to `1/√(λ_max((ffᵀ)⁺))` when omitted.
    #[serde(default)]
    pub alpha: Option<f64>,
    #[serde(default)]
    pub running_cost: Option<CostConfig>,
    #[serde(default)]
    pub running_cost_nonnegative: Option<bool>,
    #[serde(default)]
    pub terminal_cost: Option<CostConfig>,
    pub basis: Vec<BasisConfig>,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    pub initial_state: Vec<f64>,
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default = "default_t_max")]
    pub t_max: f64,
    #[serde(default)]
    pub bridge: bool,
    #[serde(default)]
    pub stopping: Stopping,
    #[serde(default)]
    pub exit_rate: Option<f64>,
}

fn polys(coefficients: &[Vec<f64>], d: usize, what: &str) -> Result<Vec<Polynomial>> {
    if coefficients.len() != d {
        return Err(Error::Config(format!(
            "{what}: expected {d} coordinate polynomials, got {}",
            coefficients.len()
        )));
    }
    Ok(coefficients.iter().cloned().map(Polynomial::new).collect())
}

fn cost(config: &Option<CostConfig>, d: usize, what: &str) -> Result<(Arc<dyn ScalarField>, bool)> {
    Ok(match config {
        None => (Arc::new(ConstantScalar(0.0)), true),
        Some(CostConfig::Constant { value }) => (Arc::new(ConstantScalar(*value)), *value >= 0.0),
        Some(CostConfig::Polynomial { coefficients }) => (
            Arc::new(SeparablePolynomialScalar {
                components: polys(coefficients, d, what)?,
            }),
            false,
        ),
        Some(CostConfig::ExitIndicator {
            coordinate,
            level,
            upper,
        }) => {
            if *coordinate >= d {
                return Err(Error::Config(format!("{what}: coordinate out of range")));
            }
            (
                Arc::new(ExitIndicator {
                    coordinate: *coordinate,
                    level: *level,
                    upper: *upper,
                }),
                true,
            )
        }
    })
}

fn sup_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

impl ProblemConfig {
    pub fn build(&self) -> Result<ProblemSpec> {
        let d = self.domain.len();
        if let Some(dim) = self.dimension {
            if dim != d {
                return Err(Error::Config(format!(
                    "dimension {dim} does not match the {d} domain intervals"
                )));
            }
        }
        let domain = BoxDomain::new(self.domain.iter().map(|[lo, hi]| (*lo, *hi)).collect())?;
        let check_len = |v: &[f64], what: &str| {
            if v.len() == d {
                Ok(())
            } else {
                Err(Error::Config(format!("{what} must have length {d}")))
            }
        };

        let drift: Arc<dyn VectorField> = match &self.drift {
            DriftConfig::Constant { value } => {
                check_len(value, "drift value")?;
                Arc::new(ConstantVector(value.clone()))
            }
            DriftConfig::Polynomial { coefficients } => Arc::new(SeparablePolynomialField {
                components: polys(coefficients, d, "drift")?,
            }),
            DriftConfig::PotentialGradient { potential } => {
                Arc::new(PotentialGradient::new(polys(potential, d, "potential")?))
            }
        };

        let f = match &self.diffusion {
            DiffusionConfig::Scalar { value } => DMatrix::identity(d, d) * *value,
            DiffusionConfig::Diagonal { values } => {
                check_len(values, "diffusion diagonal")?;
                DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(values))
            }
            DiffusionConfig::Matrix { rows } => {
                if rows.len() != d || rows.iter().any(|r| r.len() != d) {
                    return Err(Error::Config(format!("diffusion matrix must be {d}×{d}")));
                }
                DMatrix::from_fn(d, d, |i, j| rows[i][j])
            }
        };
        let alpha = match self.alpha {
            Some(a) => a,
            None => {
                let pinv = crate::model::pseudo_inverse(&f, crate::model::DEFAULT_PINV_REL_TOL)?;
                let top = (pinv.transpose() * &pinv)
                    .symmetric_eigenvalues()
                    .iter()
                    .fold(0.0f64, |m, &e| m.max(e));
                if top > 0.0 {
                    1.0 / top.sqrt()
                } else {
                    return Err(Error::Config("alpha cannot be derived from a zero diffusion".into()));
                }
            }
        };

        let (running, running_nonneg) = cost(&self.running_cost, d, "running_cost")?;
        let (terminal, _) = cost(&self.terminal_cost, d, "terminal_cost")?;

        let mut builder = ProblemSpec::builder(self.name.clone().unwrap_or_else(|| "custom".into()), domain.clone())
            .drift(drift)
            .diffusion(Diffusion::Constant(f))
            .alpha(alpha)
            .running_cost(running, self.running_cost_nonnegative.unwrap_or(running_nonneg))
            .terminal_cost(terminal)
            .lambda(self.lambda)
            .initial_state(self.initial_state.clone())
            .dt(self.dt)
            .t_max(self.t_max)
            .bridge(self.bridge)
            .stopping(self.stopping)
            .exit_rate(self.exit_rate);

        for (i, b) in self.basis.iter().enumerate() {
            let (field, bound): (Arc<dyn VectorField>, f64) = match b {
                BasisConfig::Constant { direction, bound } => {
                    check_len(direction, "basis direction")?;
                    (
                        Arc::new(ConstantVector(direction.clone())),
                        bound.unwrap_or_else(|| sup_abs(direction)),
                    )
                }
                BasisConfig::GaussianBump {
                    center,
                    width,
                    direction,
                    bound,
                } => {
                    check_len(direction, "basis direction")?;
                    check_len(center, "basis center")?;
                    if !(*width > 0.0) {
                        return Err(Error::Config("gaussian_bump width must be positive".into()));
                    }
                    (
                        Arc::new(GaussianBump {
                            center: center.clone(),
                            width: *width,
                            direction: direction.clone(),
                        }),
                        bound.unwrap_or_else(|| sup_abs(direction)),
                    )
                }
                BasisConfig::Polynomial {
                    coordinate,
                    coefficients,
                    direction,
                    bound,
                } => {
                    check_len(direction, "basis direction")?;
                    if *coordinate >= d {
                        return Err(Error::Config("basis coordinate out of range".into()));
                    }
                    let profile = Polynomial::new(coefficients.clone());
                    let (lo, hi) = domain.bounds()[*coordinate];
                    let derived = profile.abs_bound(lo, hi) * sup_abs(direction);
                    (
                        Arc::new(PolynomialProfile {
                            coordinate: *coordinate,
                            profile,
                            direction: direction.clone(),
                        }),
                        bound.unwrap_or(derived),
                    )
                }
            };
            builder = builder.basis_function(format!("basis{i}"), field, bound);
        }
        builder.build()
    }
}
