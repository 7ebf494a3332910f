//! Gradient descent and Newton iterations on the sample-average objective.
//!
//! Every iteration re-simulates at the current coefficients with the same
//! seed, so the objective and gradient are deterministic functions of the
//! coefficients. Armijo trial points are scored either by reweighting the
//! current paths (the default, whose exact gradient is the compensated
//! estimate) or by re-simulating at the trial point.

use std::io::Write;

use log::{debug, info};
use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::estimate::{DerivativeForm, RecordSet};
use crate::model::{CoeffVector, ProblemSpec};
use crate::simulate::exponential_martingale;
use crate::stats::{CompensatedSum, McEstimate};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    GradientTolerance,
    MaxIterations,
    LineSearchFailure,
    /// Newton hit the iteration limit while still ridging an indefinite Hessian.
    HessianIndefiniteFallback,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Gd,
    Newton,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OptTrace {
    pub method: Method,
    pub iterates: Vec<CoeffVector>,
    pub phi_values: Vec<McEstimate>,
    pub grad_norms: Vec<f64>,
    /// Step size that produced iterate `j + 1`.
    pub step_sizes: Vec<f64>,
    /// GD only: line-search objective at the accepted trial point `j + 1`,
    /// to be compared with `phi_values[j]`.
    pub accepted_objectives: Vec<f64>,
    /// Newton only: whether the step leaving iterate `j` was ridged.
    pub ridged: Vec<bool>,
    pub termination: Termination,
}

impl OptTrace {
    pub fn final_iterate(&self) -> &CoeffVector {
        self.iterates.last().expect("trace has at least the initial iterate")
    }

    pub fn final_grad_norm(&self) -> f64 {
        *self.grad_norms.last().expect("trace has at least one gradient")
    }

    /// Rows `j, a_0..a_{n-1}, phi_mean, phi_se, grad_norm, step`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let n = self.iterates.first().map_or(0, |a| a.len());
        let mut header = vec!["j".to_string()];
        header.extend((0..n).map(|k| format!("a_{k}")));
        header.extend(["phi_mean", "phi_se", "grad_norm", "step"].map(String::from));
        w.write_record(&header)?;
        for (j, a) in self.iterates.iter().enumerate() {
            let mut row = vec![j.to_string()];
            row.extend(a.iter().map(|v| v.to_string()));
            row.push(self.phi_values[j].mean.to_string());
            row.push(self.phi_values[j].std_error.to_string());
            row.push(self.grad_norms[j].to_string());
            row.push(if j == 0 {
                String::new()
            } else {
                self.step_sizes[j - 1].to_string()
            });
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// How gradient descent scores Armijo trial points.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LineSearch {
    /// Change of measure from the paths at the current iterate.
    #[default]
    Reweight,
    /// Fresh paths at the trial point with the same seed.
    Resimulate,
}

impl std::str::FromStr for LineSearch {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reweight" => Ok(Self::Reweight),
            "resimulate" => Ok(Self::Resimulate),
            other => Err(invalid(format!("unknown line search {other:?}"))),
        }
    }
}

/// Reweighted trial points need at least this fraction of `n` as effective
/// sample size.
pub const MIN_ESS_FRACTION: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerSettings {
    pub n_samples: usize,
    pub seed: u64,
    pub max_iter: usize,
    pub grad_tol: f64,
    pub form: DerivativeForm,
    /// Use seed `seed + j` at iteration `j` instead of a fixed seed.
    pub fresh_samples: bool,
    pub line_search: LineSearch,
    pub armijo_c: f64,
    pub backtrack: f64,
    pub initial_step: f64,
    pub max_halvings: u32,
    /// Newton ridge floor; `None` means `1e-8 (1 + ‖Ĵ‖)`.
    pub ridge_floor: Option<f64>,
}

impl OptimizerSettings {
    pub fn new(n_samples: usize, seed: u64) -> Self {
        Self {
            n_samples,
            seed,
            max_iter: 100,
            grad_tol: 1e-3,
            form: DerivativeForm::Compensated,
            fresh_samples: false,
            line_search: LineSearch::Reweight,
            armijo_c: 1e-4,
            backtrack: 0.5,
            initial_step: 1.0,
            max_halvings: 40,
            ridge_floor: None,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n_samples < 2 {
            return Err(invalid("n_samples must be at least 2"));
        }
        if !(self.grad_tol > 0.0) {
            return Err(invalid("grad_tol must be positive"));
        }
        if !(self.initial_step > 0.0 && self.backtrack > 0.0 && self.backtrack < 1.0) {
            return Err(invalid("need initial_step > 0 and backtrack in (0, 1)"));
        }
        Ok(())
    }

    fn seed_at(&self, j: usize) -> u64 {
        if self.fresh_samples {
            self.seed.wrapping_add(j as u64)
        } else {
            self.seed
        }
    }
}

struct Point {
    a: CoeffVector,
    records: RecordSet,
    phi: McEstimate,
    gradient: Vec<f64>,
}

fn evaluate(spec: &ProblemSpec, a: CoeffVector, seed: u64, s: &OptimizerSettings) -> Result<Point> {
    let records = RecordSet::simulate(spec, &a, s.n_samples, seed)?;
    let phi = records.phi()?;
    let gradient = records.gradient(s.form)?.values().to_vec();
    Ok(Point {
        a,
        records,
        phi,
        gradient,
    })
}

/// Reweighted objective at `b`, or `None` when the weights are too uneven.
fn reweighted_trial(records: &RecordSet, b: &CoeffVector) -> Result<Option<f64>> {
    let shift = b.axpy(-1.0, records.coefficients());
    let mut sum = CompensatedSum::default();
    let mut sum_sq = CompensatedSum::default();
    for r in records.records() {
        let w = match exponential_martingale(r, &shift) {
            Ok(w) => w,
            Err(Error::EstimatorUnusable(_)) => return Ok(None),
            Err(e) => return Err(e),
        };
        sum.add(w);
        sum_sq.add(w * w);
    }
    let ess = sum.value().powi(2) / sum_sq.value();
    if !(ess >= MIN_ESS_FRACTION * records.len() as f64) {
        debug!("trial point rejected: effective sample size {ess:.1}");
        return Ok(None);
    }
    Ok(Some(records.reweighted_phi(b)?.mean))
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Armijo-backtracked descent `a ← a − h ĝ(a)`.
pub fn gradient_descent(
    spec: &ProblemSpec,
    a0: &CoeffVector,
    settings: &OptimizerSettings,
) -> Result<OptTrace> {
    settings.validate()?;
    spec.check_coefficients(a0)?;
    let mut point = evaluate(spec, a0.clone(), settings.seed_at(0), settings)?;
    let mut trace = OptTrace {
        method: Method::Gd,
        iterates: vec![point.a.clone()],
        phi_values: vec![point.phi],
        grad_norms: vec![norm(&point.gradient)],
        step_sizes: Vec::new(),
        accepted_objectives: Vec::new(),
        ridged: Vec::new(),
        termination: Termination::MaxIterations,
    };

    for j in 0..settings.max_iter {
        let gnorm = norm(&point.gradient);
        if gnorm <= settings.grad_tol {
            trace.termination = Termination::GradientTolerance;
            return Ok(trace);
        }
        let seed = settings.seed_at(j);
        let base = if settings.fresh_samples && j > 0 {
            // Objective and gradient at the current point under this iteration's seed.
            let p = evaluate(spec, point.a.clone(), seed, settings)?;
            point = p;
            point.phi.mean
        } else {
            point.phi.mean
        };
        let g2: f64 = point.gradient.iter().map(|g| g * g).sum();
        let mut h = settings.initial_step;
        let mut accepted = None;
        for _ in 0..=settings.max_halvings {
            let candidate = point.a.axpy(-h, &point.gradient);
            let (value, trial) = match settings.line_search {
                LineSearch::Reweight => (reweighted_trial(&point.records, &candidate)?, None),
                LineSearch::Resimulate => {
                    let trial = evaluate(spec, candidate.clone(), seed, settings)?;
                    (Some(trial.phi.mean), Some(trial))
                }
            };
            debug!("gd j={j} h={h:.3e} trial={value:?} base={base:.8}");
            if value.is_some_and(|v| v <= base - settings.armijo_c * h * g2) {
                accepted = Some((candidate, trial, value.unwrap_or(f64::NAN)));
                break;
            }
            h *= settings.backtrack;
        }
        let Some((candidate, trial, objective)) = accepted else {
            trace.termination = Termination::LineSearchFailure;
            return Ok(trace);
        };
        point = match trial {
            Some(trial) => trial,
            None => evaluate(spec, candidate, seed, settings)?,
        };
        trace.accepted_objectives.push(objective);
        info!(
            "gd iteration {}: phi = {:.6}, |grad| = {:.3e}, step = {h:.3e}",
            j + 1,
            point.phi.mean,
            norm(&point.gradient)
        );
        trace.iterates.push(point.a.clone());
        trace.phi_values.push(point.phi);
        trace.grad_norms.push(norm(&point.gradient));
        trace.step_sizes.push(h);
    }
    if norm(&point.gradient) <= settings.grad_tol {
        trace.termination = Termination::GradientTolerance;
    }
    Ok(trace)
}

/// Solution of the (possibly ridged) Newton system.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NewtonUpdate {
    pub step: Vec<f64>,
    pub eigenvalues: Vec<f64>,
    pub ridged: bool,
    pub ridge: f64,
}

/// Solves `Ĵ s = ĝ`, shifting `Ĵ` by `(floor − λ_min) I` when `λ_min < floor`.
pub fn newton_update(
    gradient: &[f64],
    hessian: &DMatrix<f64>,
    ridge_floor: Option<f64>,
) -> Result<NewtonUpdate> {
    let n = gradient.len();
    if hessian.nrows() != n || hessian.ncols() != n {
        return Err(invalid("Hessian shape does not match the gradient"));
    }
    if hessian.iter().chain(gradient).any(|v| !v.is_finite()) {
        return Err(invalid("non-finite gradient or Hessian"));
    }
    let sym = (hessian + hessian.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym.clone());
    let mut eigenvalues: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    eigenvalues.sort_by(f64::total_cmp);
    let lambda_min = eigenvalues[0];
    let floor = ridge_floor.unwrap_or(1e-8 * (1.0 + sym.norm()));
    let mut system = sym;
    let (ridged, ridge) = if lambda_min < floor {
        let shift = floor - lambda_min;
        for k in 0..n {
            system[(k, k)] += shift;
        }
        (true, shift)
    } else {
        (false, 0.0)
    };
    let chol = Cholesky::new(system).ok_or_else(|| Error::IndefiniteHessian {
        eigenvalues: eigenvalues.clone(),
        reason: "Cholesky factorization failed after ridging".into(),
    })?;
    let step = chol.solve(&DVector::from_column_slice(gradient));
    Ok(NewtonUpdate {
        step: step.iter().copied().collect(),
        eigenvalues,
        ridged,
        ridge,
    })
}

/// Result of one Newton step from `a`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NewtonStep {
    pub next: CoeffVector,
    pub gradient: Vec<f64>,
    pub update: NewtonUpdate,
}

/// One Newton step `a − Ĵ⁻¹ĝ` with gradient and Hessian from shared records.
pub fn newton_step(
    spec: &ProblemSpec,
    a: &CoeffVector,
    n_samples: usize,
    seed: u64,
    ridge_floor: Option<f64>,
    form: DerivativeForm,
) -> Result<NewtonStep> {
    let records = RecordSet::simulate(spec, a, n_samples, seed)?;
    newton_step_on(&records, ridge_floor, form)
}

pub fn newton_step_on(
    records: &RecordSet,
    ridge_floor: Option<f64>,
    form: DerivativeForm,
) -> Result<NewtonStep> {
    let gradient = records.gradient(form)?.values().to_vec();
    let hessian = records.hessian(form)?.matrix();
    let update = newton_update(&gradient, &hessian, ridge_floor)?;
    Ok(NewtonStep {
        next: records.coefficients().axpy(-1.0, &update.step),
        gradient,
        update,
    })
}

/// Full Newton iterations (unit step) until `‖ĝ‖ ≤ grad_tol`.
pub fn newton(spec: &ProblemSpec, a0: &CoeffVector, settings: &OptimizerSettings) -> Result<OptTrace> {
    settings.validate()?;
    spec.check_coefficients(a0)?;
    let mut a = a0.clone();
    let mut trace = OptTrace {
        method: Method::Newton,
        iterates: Vec::new(),
        phi_values: Vec::new(),
        grad_norms: Vec::new(),
        step_sizes: Vec::new(),
        accepted_objectives: Vec::new(),
        ridged: Vec::new(),
        termination: Termination::MaxIterations,
    };
    for j in 0..=settings.max_iter {
        let records = RecordSet::simulate(spec, &a, settings.n_samples, settings.seed_at(j))?;
        let phi = records.phi()?;
        let step = newton_step_on(&records, settings.ridge_floor, settings.form)?;
        let gnorm = norm(&step.gradient);
        trace.iterates.push(a.clone());
        trace.phi_values.push(phi);
        trace.grad_norms.push(gnorm);
        info!("newton iteration {j}: phi = {:.6}, |grad| = {gnorm:.3e}", phi.mean);
        if gnorm <= settings.grad_tol {
            trace.termination = Termination::GradientTolerance;
            return Ok(trace);
        }
        if j == settings.max_iter {
            break;
        }
        trace.ridged.push(step.update.ridged);
        trace.step_sizes.push(1.0);
        a = step.next;
    }
    if trace.ridged.last() == Some(&true) {
        trace.termination = Termination::HessianIndefiniteFallback;
    }
    Ok(trace)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ConvexityReport {
    pub min_eigenvalue: f64,
    pub std_error: f64,
}

fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 1 {
        return m[(0, 0)];
    }
    let sym = (m + m.transpose()) * 0.5;
    SymmetricEigen::new(sym)
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

/// Smallest Hessian eigenvalue with a delete-a-group jackknife standard error
/// (at most 100 contiguous groups).
pub fn check_convexity_on(records: &RecordSet, form: DerivativeForm) -> Result<ConvexityReport> {
    let n = records.basis_size();
    let len = records.len();
    let full = records.hessian(form)?.matrix();
    let theta = min_eigenvalue(&full);

    let groups = len.min(100);
    let bounds: Vec<usize> = (0..=groups).map(|g| g * len / groups).collect();
    let columns = records.hessian_sample_columns(form);
    // block_sums[g][c]
    let mut block_sums = vec![vec![0.0; columns.len()]; groups];
    let mut totals = vec![0.0; columns.len()];
    for (c, (_, samples)) in columns.iter().enumerate() {
        let mut total = CompensatedSum::default();
        for g in 0..groups {
            let mut s = CompensatedSum::default();
            for &v in &samples[bounds[g]..bounds[g + 1]] {
                s.add(v);
            }
            block_sums[g][c] = s.value();
            total.add(s.value());
        }
        totals[c] = total.value();
    }
    let mut leave_out = Vec::with_capacity(groups);
    for (g, sums) in block_sums.iter().enumerate() {
        let count = (len - (bounds[g + 1] - bounds[g])) as f64;
        let mut m = DMatrix::zeros(n, n);
        for (c, ((k, l), _)) in columns.iter().enumerate() {
            let v = (totals[c] - sums[c]) / count;
            m[(*k, *l)] = v;
            m[(*l, *k)] = v;
        }
        leave_out.push(min_eigenvalue(&m));
    }
    let gf = groups as f64;
    let mean = leave_out.iter().sum::<f64>() / gf;
    let var = leave_out.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>() * (gf - 1.0) / gf;
    Ok(ConvexityReport {
        min_eigenvalue: theta,
        std_error: var.sqrt(),
    })
}

pub fn check_convexity(
    spec: &ProblemSpec,
    a: &CoeffVector,
    n_samples: usize,
    seed: u64,
    form: DerivativeForm,
) -> Result<ConvexityReport> {
    let records = RecordSet::simulate(spec, a, n_samples, seed)?;
    check_convexity_on(&records, form)
}
