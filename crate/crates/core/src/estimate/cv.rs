//! Control variates built from the basis martingales.

use nalgebra::{Cholesky, DMatrix};
use serde::Serialize;

use super::RecordSet;
use crate::error::{invalid, Error, Result};
use crate::model::CoeffVector;
use crate::stats::{covariance, mean, variance, McEstimate};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ControlVariateResult {
    pub beta: f64,
    pub adjusted: McEstimate,
    /// `1 − Corr²`: predicted variance ratio of the adjusted estimator.
    pub reduction: f64,
    pub correlation: f64,
}

/// Optimal single control variate `β* = Cov(φ, κ)/Var(κ)`.
pub fn control_variate_beta(
    primary: &[f64],
    control: &[f64],
    control_mean: f64,
) -> Result<ControlVariateResult> {
    if primary.len() != control.len() || primary.len() < 2 {
        return Err(invalid("primary and control need equal lengths of at least 2"));
    }
    let var_c = variance(control);
    if !(var_c > 0.0) {
        return Err(Error::DegenerateControl("control samples have zero variance".into()));
    }
    let var_p = variance(primary);
    let cov = covariance(primary, control);
    let beta = cov / var_c;
    let correlation = if var_p > 0.0 {
        (cov / (var_p * var_c).sqrt()).clamp(-1.0, 1.0)
    } else {
        0.0
    };
    let adjusted: Vec<f64> = primary
        .iter()
        .zip(control)
        .map(|(p, c)| p + beta * (control_mean - c))
        .collect();
    let mut est = McEstimate::from_samples(&adjusted, 0.0)?;
    est.mean = mean(primary) + beta * (control_mean - mean(control));
    Ok(ControlVariateResult {
        beta,
        adjusted: est,
        reduction: 1.0 - correlation * correlation,
        correlation,
    })
}

/// Solves `(Cov(m) + εI) x = gradient`, `ε = 1e-10 · trace/n`.
pub fn optimal_cv_coefficients(m_samples: &DMatrix<f64>, gradient: &[f64]) -> Result<Vec<f64>> {
    let n = m_samples.ncols();
    if gradient.len() != n {
        return Err(invalid("gradient length must match the number of columns"));
    }
    if m_samples.nrows() < 2 {
        return Err(invalid("need at least 2 sample rows"));
    }
    let cols: Vec<Vec<f64>> = (0..n)
        .map(|k| m_samples.column(k).iter().copied().collect())
        .collect();
    let mut cov = DMatrix::zeros(n, n);
    for k in 0..n {
        for l in k..n {
            let c = covariance(&cols[k], &cols[l]);
            cov[(k, l)] = c;
            cov[(l, k)] = c;
        }
    }
    let ridge = 1e-10 * cov.trace() / n as f64;
    for k in 0..n {
        cov[(k, k)] += ridge;
    }
    let chol = Cholesky::new(cov).ok_or_else(|| {
        Error::DegenerateControl("martingale covariance is singular".into())
    })?;
    let x = chol.solve(&DMatrix::from_column_slice(n, 1, gradient));
    Ok(x.iter().copied().collect())
}

/// `|corr| > √(c_κ / (c_φ + c_κ))`.
pub fn cv_efficiency_gate(corr: f64, cost_primary: f64, cost_control: f64) -> bool {
    let threshold = (cost_control / (cost_primary + cost_control)).sqrt();
    corr.abs() > threshold
}

impl RecordSet {
    /// Rows are paths, columns the basis martingales.
    pub fn martingale_matrix(&self) -> DMatrix<f64> {
        let n = self.basis_size();
        DMatrix::from_fn(self.len(), n, |i, k| self.records()[i].m[k])
    }

    /// Control variate `z·m` (mean zero) on the objective statistic.
    pub fn phi_with_control(&self, z: &CoeffVector) -> Result<ControlVariateResult> {
        let primary = self.phi_samples();
        let control: Vec<f64> = self.records().iter().map(|r| r.martingale(z)).collect();
        let mut res = control_variate_beta(&primary, &control, 0.0)?;
        res.adjusted.censored_fraction = self.censored_fraction();
        Ok(res)
    }

    /// `z*` for the gradient-weight statistic `φ + λ(½x² + x)`.
    pub fn optimal_control_direction(&self) -> Result<CoeffVector> {
        let weights = self.gradient_weights();
        let n = self.basis_size();
        let target: Vec<f64> = (0..n)
            .map(|k| {
                let prod: Vec<f64> = self
                    .records()
                    .iter()
                    .zip(&weights)
                    .map(|(r, w)| w * r.m[k])
                    .collect();
                mean(&prod)
            })
            .collect();
        Ok(CoeffVector::new(optimal_cv_coefficients(
            &self.martingale_matrix(),
            &target,
        )?))
    }
}

/// Objective estimate with `M^{u^a}` as control variate.
pub fn phi_control_variate(records: &RecordSet) -> Result<ControlVariateResult> {
    records.phi_with_control(&records.coefficients().clone())
}
