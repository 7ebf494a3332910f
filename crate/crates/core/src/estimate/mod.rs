//! Monte Carlo estimators of the entropy-regularized objective and its
//! derivatives with respect to the control coefficients.
//!
//! Everything is computed from one [`RecordSet`]: the objective, gradient and
//! Hessian at the same coefficients share the same trajectories.

mod cv;

use std::fmt;
use std::str::FromStr;

use log::warn;
use nalgebra::DMatrix;
use serde::ser::{SerializeStruct, Serializer};
use serde::{Deserialize, Serialize};

pub use cv::{
    control_variate_beta, cv_efficiency_gate, optimal_cv_coefficients, phi_control_variate,
    ControlVariateResult,
};

use crate::error::{invalid, Error, Result};
use crate::model::{CoeffVector, ProblemSpec, Stopping};
use crate::simulate::{
    censored_fraction, exponential_martingale, simulate_batch, TrajectoryRecord,
};
use crate::stats::McEstimate;

/// Which derivative statistics to use.
///
/// `Plain` uses the weight `φ + λ(½x² + x)` (gradient) and
/// `φ + λ(½x² + 2x + 1)` (Hessian), `x = a·m`, times products of `m`.
/// `Compensated` differentiates the simulated objective `a ↦ E^a[φ + ½λ a·G·a]`
/// through the change of measure, which adds the explicit dependence of the
/// covariation term on `a`. The two agree at `a = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DerivativeForm {
    #[default]
    Plain,
    Compensated,
}

impl fmt::Display for DerivativeForm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DerivativeForm::Plain => "plain",
            DerivativeForm::Compensated => "compensated",
        })
    }
}

impl FromStr for DerivativeForm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plain" => Ok(DerivativeForm::Plain),
            "compensated" => Ok(DerivativeForm::Compensated),
            other => Err(invalid(format!("unknown derivative form '{other}'"))),
        }
    }
}

/// Statistic family for directional derivatives of order `n`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DerivativeKind {
    /// `φ · Π_k M^{v_k}`: derivative of `u ↦ E^u[φ]`.
    Plain,
    /// `((M^u)² + 2n M^u + n(n−1)) · Π_k M^{v_k}`: derivative of `u ↦ E^u[(M^u)²]`.
    Entropy,
}

/// Gradient (order 1) or Hessian (order 2) estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct DerivativeEstimate {
    pub order: u8,
    pub form: DerivativeForm,
    dim: usize,
    values: Vec<f64>,
    std_errors: Vec<f64>,
    pub n_samples: usize,
    pub censored_fraction: f64,
}

impl DerivativeEstimate {
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Flat values: the vector, or the row-major matrix.
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn std_errors(&self) -> &[f64] {
        &self.std_errors
    }

    pub fn get(&self, k: usize) -> f64 {
        self.values[k]
    }

    pub fn entry(&self, k: usize, l: usize) -> f64 {
        self.values[k * self.dim + l]
    }

    pub fn entry_std_error(&self, k: usize, l: usize) -> f64 {
        self.std_errors[k * self.dim + l]
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn matrix(&self) -> DMatrix<f64> {
        if self.order == 1 {
            DMatrix::from_column_slice(self.dim, 1, &self.values)
        } else {
            DMatrix::from_row_slice(self.dim, self.dim, &self.values)
        }
    }

    fn rows(&self, flat: &[f64]) -> Vec<Vec<f64>> {
        flat.chunks(self.dim).map(<[f64]>::to_vec).collect()
    }
}

impl Serialize for DerivativeEstimate {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let mut st = s.serialize_struct("DerivativeEstimate", 6)?;
        st.serialize_field("order", &self.order)?;
        st.serialize_field("form", &self.form)?;
        if self.order == 1 {
            st.serialize_field("values", &self.values)?;
            st.serialize_field("std_errors", &self.std_errors)?;
        } else {
            st.serialize_field("values", &self.rows(&self.values))?;
            st.serialize_field("std_errors", &self.rows(&self.std_errors))?;
        }
        st.serialize_field("n_samples", &self.n_samples)?;
        st.serialize_field("censored_fraction", &self.censored_fraction)?;
        st.end()
    }
}

/// Relative entropy estimated two ways: `½ w·G·w` and `½ (w·m)²`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KlEstimate {
    pub covariation: McEstimate,
    pub quadratic: McEstimate,
}

impl KlEstimate {
    /// Difference of the two forms in units of their combined standard error.
    pub fn discrepancy_in_std_errors(&self) -> f64 {
        let se = self.covariation.combined_std_error(&self.quadratic);
        let diff = (self.covariation.mean - self.quadratic.mean).abs();
        if se > 0.0 {
            diff / se
        } else if diff == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    }
}

/// Trajectories simulated at fixed coefficients, with the problem's `λ`.
#[derive(Debug, Clone)]
pub struct RecordSet {
    a: CoeffVector,
    lambda: f64,
    records: Vec<TrajectoryRecord>,
    censored_fraction: f64,
}

impl RecordSet {
    /// Simulates samples `0..n` of `seed` under `u^a`.
    pub fn simulate(spec: &ProblemSpec, a: &CoeffVector, n: usize, seed: u64) -> Result<Self> {
        if n < 2 {
            return Err(invalid(format!("need at least 2 samples, got {n}")));
        }
        let records = simulate_batch(spec, a, n, seed)?;
        Self::from_records(spec, a.clone(), records)
    }

    pub fn from_records(
        spec: &ProblemSpec,
        a: CoeffVector,
        records: Vec<TrajectoryRecord>,
    ) -> Result<Self> {
        spec.check_coefficients(&a)?;
        if records.len() < 2 {
            return Err(invalid("need at least 2 records"));
        }
        if records.iter().any(|r| r.basis_size() != a.len()) {
            return Err(invalid("record basis size does not match coefficients"));
        }
        let censored_fraction = censored_fraction(&records);
        if spec.stopping() == Stopping::FirstExit && censored_fraction >= 1.0 {
            return Err(Error::DegenerateEstimate(format!(
                "all {} paths reached t_max = {} before exiting",
                records.len(),
                spec.t_max()
            )));
        }
        if censored_fraction > 0.0 {
            warn!(
                "{:.3e} of paths censored at t_max = {}",
                censored_fraction,
                spec.t_max()
            );
        }
        Ok(Self {
            a,
            lambda: spec.lambda(),
            records,
            censored_fraction,
        })
    }

    pub fn coefficients(&self) -> &CoeffVector {
        &self.a
    }
    pub fn lambda(&self) -> f64 {
        self.lambda
    }
    pub fn records(&self) -> &[TrajectoryRecord] {
        &self.records
    }
    pub fn len(&self) -> usize {
        self.records.len()
    }
    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
    pub fn censored_fraction(&self) -> f64 {
        self.censored_fraction
    }
    pub fn basis_size(&self) -> usize {
        self.a.len()
    }

    /// Same records with a different regularization weight.
    pub fn with_lambda(&self, lambda: f64) -> Self {
        let mut s = self.clone();
        s.lambda = lambda;
        s
    }

    fn estimate(&self, samples: &[f64]) -> Result<McEstimate> {
        McEstimate::from_samples(samples, self.censored_fraction)
    }

    /// Per-path objective `φ + ½λ a·G·a`.
    pub fn phi_samples(&self) -> Vec<f64> {
        let half = 0.5 * self.lambda;
        self.records
            .iter()
            .map(|r| r.phi + half * r.covariation(&self.a, &self.a))
            .collect()
    }

    pub fn phi(&self) -> Result<McEstimate> {
        self.estimate(&self.phi_samples())
    }

    /// Per-path gradient weight `φ + λ(½x² + x)` with `x = a·m`.
    pub fn gradient_weights(&self) -> Vec<f64> {
        self.records
            .iter()
            .map(|r| {
                let x = r.martingale(&self.a);
                r.phi + self.lambda * (0.5 * x * x + x)
            })
            .collect()
    }

    /// Per-path gradient statistics, row-major `len × n`.
    fn gradient_samples(&self, form: DerivativeForm) -> Vec<Vec<f64>> {
        let n = self.basis_size();
        let lambda = self.lambda;
        let mut cols = vec![Vec::with_capacity(self.len()); n];
        match form {
            DerivativeForm::Plain => {
                for (r, w) in self.records.iter().zip(self.gradient_weights()) {
                    for (k, col) in cols.iter_mut().enumerate() {
                        col.push(w * r.m[k]);
                    }
                }
            }
            DerivativeForm::Compensated => {
                for r in &self.records {
                    let ga = r.gram_times(&self.a);
                    let f = r.phi + 0.5 * lambda * self.a.dot(&ga);
                    for (k, col) in cols.iter_mut().enumerate() {
                        col.push(f * r.m[k] + lambda * ga[k]);
                    }
                }
            }
        }
        cols
    }

    pub fn gradient(&self, form: DerivativeForm) -> Result<DerivativeEstimate> {
        let n = self.basis_size();
        let mut values = Vec::with_capacity(n);
        let mut std_errors = Vec::with_capacity(n);
        for col in self.gradient_samples(form) {
            let e = self.estimate(&col)?;
            values.push(e.mean);
            std_errors.push(e.std_error);
        }
        Ok(DerivativeEstimate {
            order: 1,
            form,
            dim: n,
            values,
            std_errors,
            n_samples: self.len(),
            censored_fraction: self.censored_fraction,
        })
    }

    /// Per-path Hessian statistic for entry `(k, l)`.
    fn hessian_samples(&self, form: DerivativeForm, k: usize, l: usize) -> Vec<f64> {
        let lambda = self.lambda;
        match form {
            DerivativeForm::Plain => self
                .records
                .iter()
                .map(|r| {
                    let x = r.martingale(&self.a);
                    (r.phi + lambda * (0.5 * x * x + 2.0 * x + 1.0)) * r.m[k] * r.m[l]
                })
                .collect(),
            DerivativeForm::Compensated => self
                .records
                .iter()
                .map(|r| {
                    let ga = r.gram_times(&self.a);
                    let f = r.phi + 0.5 * lambda * self.a.dot(&ga);
                    let gkl = r.gram_at(k, l);
                    f * (r.m[k] * r.m[l] - gkl)
                        + lambda * (ga[k] * r.m[l] + ga[l] * r.m[k])
                        + lambda * gkl
                })
                .collect(),
        }
    }

    /// Symmetric Hessian estimate; entry `(l, k)` is a copy of `(k, l)`.
    pub fn hessian(&self, form: DerivativeForm) -> Result<DerivativeEstimate> {
        let n = self.basis_size();
        let mut values = vec![0.0; n * n];
        let mut std_errors = vec![0.0; n * n];
        for k in 0..n {
            for l in k..n {
                let e = self.estimate(&self.hessian_samples(form, k, l))?;
                for (i, j) in [(k, l), (l, k)] {
                    values[i * n + j] = e.mean;
                    std_errors[i * n + j] = e.std_error;
                }
            }
        }
        Ok(DerivativeEstimate {
            order: 2,
            form,
            dim: n,
            values,
            std_errors,
            n_samples: self.len(),
            censored_fraction: self.censored_fraction,
        })
    }

    /// Hessian statistics for every upper-triangular entry, path by path.
    pub(crate) fn hessian_sample_columns(&self, form: DerivativeForm) -> Vec<((usize, usize), Vec<f64>)> {
        let n = self.basis_size();
        let mut out = Vec::new();
        for k in 0..n {
            for l in k..n {
                out.push(((k, l), self.hessian_samples(form, k, l)));
            }
        }
        out
    }

    pub fn nth_derivative(
        &self,
        directions: &[CoeffVector],
        kind: DerivativeKind,
    ) -> Result<McEstimate> {
        if directions.is_empty() {
            return Err(invalid("at least one direction is required"));
        }
        if directions.iter().any(|v| v.len() != self.basis_size()) {
            return Err(invalid("direction length does not match the basis"));
        }
        let order = directions.len() as f64;
        let samples: Vec<f64> = self
            .records
            .iter()
            .map(|r| {
                let prod: f64 = directions.iter().map(|v| r.martingale(v)).product();
                let weight = match kind {
                    DerivativeKind::Plain => r.phi,
                    DerivativeKind::Entropy => {
                        let x = r.martingale(&self.a);
                        x * x + 2.0 * order * x + order * (order - 1.0)
                    }
                };
                weight * prod
            })
            .collect();
        self.estimate(&samples)
    }

    /// `E^{a}[φ · ε(M^{u^w})]`, an estimate of `E^{a+w}[φ]`.
    pub fn reweighted(&self, w: &CoeffVector) -> Result<McEstimate> {
        let samples = self
            .records
            .iter()
            .map(|r| Ok(r.phi * exponential_martingale(r, w)?))
            .collect::<Result<Vec<f64>>>()?;
        self.estimate(&samples)
    }

    pub fn kl(&self, w: &CoeffVector) -> Result<KlEstimate> {
        if w.len() != self.basis_size() {
            return Err(invalid("direction length does not match the basis"));
        }
        let cov: Vec<f64> = self.records.iter().map(|r| 0.5 * r.covariation(w, w)).collect();
        let quad: Vec<f64> = self
            .records
            .iter()
            .map(|r| {
                let x = r.martingale(w);
                0.5 * x * x
            })
            .collect();
        Ok(KlEstimate {
            covariation: self.estimate(&cov)?,
            quadratic: self.estimate(&quad)?,
        })
    }

    /// Objective at `b` from these records by change of measure:
    /// mean of `(φ + ½λ b·G·b) ε(M^{u^{b−a}})`.
    pub fn reweighted_phi(&self, b: &CoeffVector) -> Result<McEstimate> {
        self.estimate(&self.reweighted_phi_samples(b)?)
    }

    pub fn reweighted_phi_samples(&self, b: &CoeffVector) -> Result<Vec<f64>> {
        if b.len() != self.basis_size() {
            return Err(invalid("coefficient length does not match the basis"));
        }
        let shift = b.axpy(-1.0, &self.a);
        let half = 0.5 * self.lambda;
        self.records
            .iter()
            .map(|r| Ok((r.phi + half * r.covariation(b, b)) * exponential_martingale(r, &shift)?))
            .collect()
    }

    /// Per-path directional gradient statistic `dir·ĝ_i`.
    pub fn gradient_samples_along(&self, form: DerivativeForm, dir: &[f64]) -> Vec<f64> {
        let cols = self.gradient_samples(form);
        (0..self.len())
            .map(|i| cols.iter().zip(dir).map(|(c, d)| c[i] * d).sum())
            .collect()
    }
}

pub fn estimate_phi(spec: &ProblemSpec, a: &CoeffVector, n: usize, seed: u64) -> Result<McEstimate> {
    RecordSet::simulate(spec, a, n, seed)?.phi()
}

/// Gradient from the plain statistics; see [`estimate_gradient_with`].
pub fn estimate_gradient(
    spec: &ProblemSpec,
    a: &CoeffVector,
    n: usize,
    seed: u64,
) -> Result<DerivativeEstimate> {
    estimate_gradient_with(spec, a, n, seed, DerivativeForm::Plain)
}

pub fn estimate_gradient_with(
    spec: &ProblemSpec,
    a: &CoeffVector,
    n: usize,
    seed: u64,
    form: DerivativeForm,
) -> Result<DerivativeEstimate> {
    RecordSet::simulate(spec, a, n, seed)?.gradient(form)
}

pub fn estimate_hessian(
    spec: &ProblemSpec,
    a: &CoeffVector,
    n: usize,
    seed: u64,
) -> Result<DerivativeEstimate> {
    estimate_hessian_with(spec, a, n, seed, DerivativeForm::Plain)
}

pub fn estimate_hessian_with(
    spec: &ProblemSpec,
    a: &CoeffVector,
    n: usize,
    seed: u64,
    form: DerivativeForm,
) -> Result<DerivativeEstimate> {
    RecordSet::simulate(spec, a, n, seed)?.hessian(form)
}

pub fn estimate_nth_derivative(
    spec: &ProblemSpec,
    a: &CoeffVector,
    directions: &[CoeffVector],
    kind: DerivativeKind,
    n: usize,
    seed: u64,
) -> Result<McEstimate> {
    RecordSet::simulate(spec, a, n, seed)?.nth_derivative(directions, kind)
}

/// Warns when `‖u^w‖_sup` exceeds the admissibility radius of the problem.
fn warn_if_outside_radius(spec: &ProblemSpec, w: &CoeffVector) {
    if let Some(r) = spec.admissible_radius() {
        let norm = spec.control_sup_bound(w);
        if norm > r {
            warn!("control sup-norm bound {norm:.4} exceeds the admissible radius {r:.4}");
        }
    }
}

pub fn reweighted_expectation(
    spec: &ProblemSpec,
    a_sim: &CoeffVector,
    w: &CoeffVector,
    n: usize,
    seed: u64,
) -> Result<McEstimate> {
    spec.check_coefficients(w)?;
    warn_if_outside_radius(spec, w);
    RecordSet::simulate(spec, a_sim, n, seed)?.reweighted(w)
}

pub fn estimate_kl(
    spec: &ProblemSpec,
    a: &CoeffVector,
    w: &CoeffVector,
    n: usize,
    seed: u64,
) -> Result<KlEstimate> {
    spec.check_coefficients(w)?;
    RecordSet::simulate(spec, a, n, seed)?.kl(w)
}

/// `F(λ) = −λ log E^0[exp(−φ/λ)]` from uncontrolled records.
pub fn free_energy_from_records(records: &RecordSet, lambda: f64) -> Result<McEstimate> {
    if !(lambda.is_finite() && lambda > 0.0) {
        return Err(invalid("lambda must be finite and positive"));
    }
    let phis: Vec<f64> = records.records().iter().map(|r| r.phi).collect();
    let shift = phis.iter().copied().fold(f64::INFINITY, f64::min);
    let weights: Vec<f64> = phis.iter().map(|p| (-(p - shift) / lambda).exp()).collect();
    let w = McEstimate::from_samples(&weights, records.censored_fraction())?;
    if !(w.mean > 0.0) || !w.mean.is_finite() {
        return Err(Error::EstimatorUnusable(
            "mean of exp(-phi/lambda) underflowed".into(),
        ));
    }
    Ok(McEstimate {
        mean: shift - lambda * w.mean.ln(),
        std_error: lambda * w.std_error / w.mean,
        n_samples: w.n_samples,
        censored_fraction: w.censored_fraction,
    })
}

pub fn estimate_free_energy(spec: &ProblemSpec, lambda: f64, n: usize, seed: u64) -> Result<McEstimate> {
    let zero = CoeffVector::zeros(spec.basis_size());
    let records = RecordSet::simulate(spec, &zero, n, seed)?;
    free_energy_from_records(&records, lambda)
}
