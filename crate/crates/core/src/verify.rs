//! Closed-form oracles and pathwise identity checks.
//!
//! The brownian-exit oracles use the builtin with drift `−1` and control
//! `u ≡ 1`, so the controlled process is a standard Brownian motion started at
//! 0 in `(−2, b)`.

use std::io::Write;
use std::path::Path;

use log::{info, warn};
use nalgebra::SymmetricEigen;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{invalid, Error, Result};
use crate::estimate::{DerivativeForm, RecordSet};
use crate::model::{CoeffVector, ProblemSpec};
use crate::problems::{brownian_exit, double_well};
use crate::simulate::{exponential_martingale, TrajectoryRecord};
use crate::stats::McEstimate;

/// Two-point law of the exit position of Brownian motion from `(−2, b)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ExitLaw {
    pub b: f64,
    pub p_left: f64,
    pub p_right: f64,
}

pub fn exit_law_oracle(b: f64) -> Result<ExitLaw> {
    if !(b > 0.0 && b.is_finite()) {
        return Err(invalid(format!("b must be positive and finite, got {b}")));
    }
    Ok(ExitLaw {
        b,
        p_left: b / (2.0 + b),
        p_right: 2.0 / (2.0 + b),
    })
}

/// `q(b) = 2b(b² + 2b − 2)`.
pub fn q_polynomial(b: f64) -> f64 {
    2.0 * b * (b * b + 2.0 * b - 2.0)
}

/// Minimizer of `q` on `b > 0`.
pub fn q_minimizer() -> f64 {
    (-2.0 + 10f64.sqrt()) / 3.0
}

/// Critical point `(√7 − 1)/3` quoted for the brownian-exit example.
pub fn quoted_critical_b() -> f64 {
    (7f64.sqrt() - 1.0) / 3.0
}

/// `x⁴ + 4x³ + 2x²`.
pub fn exit_statistic(x: f64) -> f64 {
    let x2 = x * x;
    x2 * (x2 + 4.0 * x + 2.0)
}

fn brownian_exit_records(b: f64, n: usize, dt: f64, seed: u64, bridge: bool) -> Result<RecordSet> {
    let spec = brownian_exit(b)?.with_dt(dt)?.with_bridge(bridge);
    RecordSet::simulate(&spec, &CoeffVector::new(vec![1.0]), n, seed)
}

/// Estimated exit law at `(−2, b)` under `u ≡ 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ExitFrequencies {
    pub p_left: McEstimate,
    pub p_right: McEstimate,
    pub oracle: ExitLaw,
}

pub fn exit_frequencies_on(records: &RecordSet, b: f64) -> Result<ExitFrequencies> {
    let oracle = exit_law_oracle(b)?;
    let mid = 0.5 * (b - 2.0);
    let exited: Vec<&TrajectoryRecord> = records.records().iter().filter(|r| !r.censored).collect();
    let left: Vec<f64> = exited
        .iter()
        .map(|r| if r.exit_state[0] < mid { 1.0 } else { 0.0 })
        .collect();
    let right: Vec<f64> = left.iter().map(|l| 1.0 - l).collect();
    let cf = records.censored_fraction();
    Ok(ExitFrequencies {
        p_left: McEstimate::from_samples(&left, cf)?,
        p_right: McEstimate::from_samples(&right, cf)?,
        oracle,
    })
}

pub fn exit_frequencies(b: f64, n: usize, dt: f64, seed: u64, bridge: bool) -> Result<ExitFrequencies> {
    exit_frequencies_on(&brownian_exit_records(b, n, dt, seed, bridge)?, b)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NonconvexityEstimate {
    pub b: f64,
    pub estimate: McEstimate,
    pub oracle: f64,
}

/// `E[B_τ⁴ + 4B_τ³ + 2B_τ²]` from exit states, against `q(b)`.
pub fn nonconvexity_on(records: &RecordSet, b: f64) -> Result<NonconvexityEstimate> {
    let samples: Vec<f64> = records
        .records()
        .iter()
        .filter(|r| !r.censored)
        .map(|r| exit_statistic(r.exit_state[0]))
        .collect();
    Ok(NonconvexityEstimate {
        b,
        estimate: McEstimate::from_samples(&samples, records.censored_fraction())?,
        oracle: q_polynomial(b),
    })
}

pub fn reproduce_nonconvexity(
    b: f64,
    n: usize,
    dt: f64,
    seed: u64,
    bridge: bool,
) -> Result<NonconvexityEstimate> {
    if !(b > 0.0) {
        return Err(invalid(format!("b must be positive, got {b}")));
    }
    if b > 3.0 {
        warn!("b = {b} is outside the recommended range (0, 3]");
    }
    nonconvexity_on(&brownian_exit_records(b, n, dt, seed, bridge)?, b)
}

/// One row of the `q(b)` sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SweepRow {
    pub b: f64,
    pub estimate: f64,
    pub std_error: f64,
    pub oracle: f64,
}

/// Runs [`reproduce_nonconvexity`] over `grid`, all with the same seed.
pub fn q_sweep(grid: &[f64], n: usize, dt: f64, seed: u64, bridge: bool) -> Result<Vec<SweepRow>> {
    if grid.is_empty() {
        return Err(invalid("empty b grid"));
    }
    grid.iter()
        .map(|&b| {
            let r = reproduce_nonconvexity(b, n, dt, seed, bridge)?;
            info!("q sweep b={b}: {:.5} ± {:.5} (q = {:.5})", r.estimate.mean, r.estimate.std_error, r.oracle);
            Ok(SweepRow {
                b,
                estimate: r.estimate.mean,
                std_error: r.estimate.std_error,
                oracle: r.oracle,
            })
        })
        .collect()
}

pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

/// Parses `start:stop:step` (inclusive of `stop` up to rounding) or a
/// comma-separated list.
pub fn parse_grid(text: &str) -> Result<Vec<f64>> {
    let text = text.trim();
    if text.is_empty() {
        return Err(invalid("empty b grid"));
    }
    let num = |s: &str| {
        s.trim()
            .parse::<f64>()
            .map_err(|_| invalid(format!("bad number {s:?} in grid {text:?}")))
    };
    let parts: Vec<&str> = text.split(':').collect();
    let grid = match parts.as_slice() {
        [start, stop, step] => {
            let (start, stop, step) = (num(start)?, num(stop)?, num(step)?);
            if !(step > 0.0) || stop < start {
                return Err(invalid(format!("grid {text:?} is empty")));
            }
            let count = ((stop - start) / step + 1e-9).floor() as usize + 1;
            (0..count).map(|i| start + i as f64 * step).collect()
        }
        [_] => text.split(',').map(num).collect::<Result<Vec<f64>>>()?,
        _ => return Err(invalid(format!("grid {text:?} must be start:stop:step or a list"))),
    };
    if grid.is_empty() {
        return Err(invalid("empty b grid"));
    }
    Ok(grid)
}

/// `|−log ε(M^{−a})_τ − (a·m + ½ a·G·a)|`.
pub fn pathwise_identity_check(rec: &TrajectoryRecord, a: &CoeffVector) -> Result<f64> {
    let lhs = -exponential_martingale(rec, &a.scaled(-1.0))?.ln();
    let rhs = rec.martingale(a) + 0.5 * rec.covariation(a, a);
    Ok((lhs - rhs).abs())
}

/// Residual budget `1e-10 (1 + |a·m|)`.
pub fn pathwise_identity_tolerance(rec: &TrajectoryRecord, a: &CoeffVector) -> f64 {
    1e-10 * (1.0 + rec.martingale(a).abs())
}

/// Finite differences against resimulated or reweighted objectives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FdMode {
    /// `Φ̂(a ± h·dir)` from fresh paths with the same seed.
    #[default]
    Resimulate,
    /// `Φ̂(a ± h·dir)` from the paths at `a` by change of measure.
    Reweight,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FdReport {
    pub directional: f64,
    pub directional_std_error: f64,
    pub finite_difference: f64,
    pub finite_difference_std_error: f64,
    pub relative_error: f64,
}

/// `|x − y| / max(|x|, |y|)`, zero when both vanish.
pub fn relative_error(x: f64, y: f64) -> f64 {
    let scale = x.abs().max(y.abs());
    if scale == 0.0 {
        0.0
    } else {
        (x - y).abs() / scale
    }
}

pub fn finite_difference_check(
    spec: &ProblemSpec,
    a: &CoeffVector,
    direction: &CoeffVector,
    h: f64,
    n: usize,
    seed: u64,
) -> Result<FdReport> {
    finite_difference_check_with(spec, a, direction, h, n, seed, FdMode::Resimulate, DerivativeForm::Plain)
}

#[allow(clippy::too_many_arguments)]
pub fn finite_difference_check_with(
    spec: &ProblemSpec,
    a: &CoeffVector,
    direction: &CoeffVector,
    h: f64,
    n: usize,
    seed: u64,
    mode: FdMode,
    form: DerivativeForm,
) -> Result<FdReport> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(invalid(format!("h must be positive, got {h}")));
    }
    if direction.len() != a.len() {
        return Err(invalid("direction length does not match the coefficients"));
    }
    let base = RecordSet::simulate(spec, a, n, seed)?;
    let grad = base.gradient(form)?;
    let dir_samples = base.gradient_samples_along(form, direction);
    let directional = McEstimate::from_samples(&dir_samples, base.censored_fraction())?;

    let up = a.axpy(h, direction);
    let down = a.axpy(-h, direction);
    let (plus, minus) = match mode {
        FdMode::Resimulate => (
            RecordSet::simulate(spec, &up, n, seed)?.phi_samples(),
            RecordSet::simulate(spec, &down, n, seed)?.phi_samples(),
        ),
        FdMode::Reweight => (base.reweighted_phi_samples(&up)?, base.reweighted_phi_samples(&down)?),
    };
    let quotients: Vec<f64> = plus.iter().zip(&minus).map(|(p, m)| (p - m) / (2.0 * h)).collect();
    let fd = McEstimate::from_samples(&quotients, 0.0)?;
    let value = direction.dot(grad.values());
    Ok(FdReport {
        directional: value,
        directional_std_error: directional.std_error,
        finite_difference: fd.mean,
        finite_difference_std_error: fd.std_error,
        relative_error: relative_error(value, fd.mean),
    })
}

/// Outcome of the pathwise covariation inequalities over a record set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BoundReport {
    pub records: usize,
    pub pairs_checked: usize,
    pub kunita_watanabe_violations: usize,
    pub covariation_violations: usize,
    /// Smallest `√(G_kk G_ll) − |G_kl|`, relative to its scale.
    pub worst_kunita_watanabe_slack: f64,
    /// Smallest `α⁻²‖u‖‖v‖τ − G_uv`, relative to its scale.
    pub worst_covariation_slack: f64,
}

impl BoundReport {
    pub fn violations(&self) -> usize {
        self.kunita_watanabe_violations + self.covariation_violations
    }
}

const BOUND_REL_TOL: f64 = 1e-9;

/// Slack of `|G_kl| ≤ √(G_kk G_ll)` relative to the right-hand side.
pub fn kunita_watanabe_slack(gkk: f64, gll: f64, gkl: f64) -> f64 {
    let rhs = (gkk.max(0.0) * gll.max(0.0)).sqrt();
    (rhs - gkl.abs()) / rhs.max(f64::MIN_POSITIVE)
}

/// Checks, for every record, the Kunita–Watanabe inequality on all basis
/// pairs and the sup-norm covariation bound on basis pairs and on `u^a`.
pub fn bound_checks(records: &[TrajectoryRecord], spec: &ProblemSpec, a: &CoeffVector) -> Result<BoundReport> {
    spec.check_coefficients(a)?;
    let n = spec.basis_size();
    let bounds: Vec<f64> = spec.basis().iter().map(|b| b.bound).collect();
    let inv_alpha2 = spec.alpha().powi(-2);
    let ua_bound = spec.control_sup_bound(a);
    let mut report = BoundReport {
        records: records.len(),
        pairs_checked: 0,
        kunita_watanabe_violations: 0,
        covariation_violations: 0,
        worst_kunita_watanabe_slack: f64::INFINITY,
        worst_covariation_slack: f64::INFINITY,
    };
    let covariation = |value: f64, rhs: f64, report: &mut BoundReport| {
        let slack = (rhs - value) / rhs.max(f64::MIN_POSITIVE);
        report.worst_covariation_slack = report.worst_covariation_slack.min(slack);
        if slack < -BOUND_REL_TOL {
            report.covariation_violations += 1;
        }
    };
    for rec in records {
        if rec.basis_size() != n {
            return Err(invalid("record basis size does not match the problem"));
        }
        for k in 0..n {
            for l in k..n {
                report.pairs_checked += 1;
                let gkl = rec.gram_at(k, l);
                let kw = kunita_watanabe_slack(rec.gram_at(k, k), rec.gram_at(l, l), gkl);
                report.worst_kunita_watanabe_slack = report.worst_kunita_watanabe_slack.min(kw);
                if kw < -BOUND_REL_TOL {
                    report.kunita_watanabe_violations += 1;
                }
                covariation(gkl, inv_alpha2 * bounds[k] * bounds[l] * rec.tau, &mut report);
            }
        }
        covariation(rec.covariation(a, a), inv_alpha2 * ua_bound * ua_bound * rec.tau, &mut report);
    }
    Ok(report)
}

/// Largest `α` compatible with constant diffusion, `σ_min(f)`; `None` for
/// state-dependent diffusion.
pub fn alpha_upper_bound(spec: &ProblemSpec) -> Option<f64> {
    let f = &spec.constant_factors()?.f;
    let gram = f * f.transpose();
    let eig = SymmetricEigen::new(gram).eigenvalues;
    Some(eig.iter().cloned().fold(f64::INFINITY, f64::min).max(0.0).sqrt())
}

/// Estimates at `dt` and `dt/2` with a Richardson bias estimate for a scheme
/// of weak order `order`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DtHalving {
    pub dt: f64,
    pub coarse: McEstimate,
    pub fine: McEstimate,
    /// Estimated bias of `fine`.
    pub bias: f64,
    pub extrapolated: f64,
}

pub fn dt_halving_study<F>(
    spec: &ProblemSpec,
    a: &CoeffVector,
    n: usize,
    seed: u64,
    order: f64,
    statistic: F,
) -> Result<DtHalving>
where
    F: Fn(&RecordSet) -> Result<McEstimate>,
{
    if !(order > 0.0) {
        return Err(invalid("order must be positive"));
    }
    let dt = spec.dt();
    let coarse = statistic(&RecordSet::simulate(spec, a, n, seed)?)?;
    let fine = statistic(&RecordSet::simulate(&spec.with_dt(0.5 * dt)?, a, n, seed)?)?;
    let ratio = 0.5f64.powf(order);
    let bias = (coarse.mean - fine.mean) * ratio / (1.0 - ratio);
    Ok(DtHalving {
        dt,
        coarse,
        fine,
        bias,
        extrapolated: fine.mean - bias,
    })
}

/// One comparison in a verification report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub check_name: String,
    pub value: f64,
    pub oracle: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl CheckResult {
    /// Passes when `|value − oracle| ≤ tolerance`.
    pub fn within(name: impl Into<String>, value: f64, oracle: f64, tolerance: f64) -> Self {
        Self {
            check_name: name.into(),
            value,
            oracle,
            tolerance,
            pass: (value - oracle).abs() <= tolerance,
        }
    }

    /// Passes when `value ≤ limit`.
    pub fn at_most(name: impl Into<String>, value: f64, limit: f64) -> Self {
        Self {
            check_name: name.into(),
            value,
            oracle: limit,
            tolerance: 0.0,
            pass: value <= limit,
        }
    }

    /// Passes when `value ≥ limit`.
    pub fn at_least(name: impl Into<String>, value: f64, limit: f64) -> Self {
        Self {
            check_name: name.into(),
            value,
            oracle: limit,
            tolerance: 0.0,
            pass: value >= limit,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct VerifyReport {
    pub checks: Vec<CheckResult>,
}

impl VerifyReport {
    pub fn push(&mut self, check: CheckResult) {
        info!(
            "{} {}: value {:.6e}, oracle {:.6e}, tolerance {:.3e}",
            if check.pass { "PASS" } else { "FAIL" },
            check.check_name,
            check.value,
            check.oracle,
            check.tolerance
        );
        self.checks.push(check);
    }

    pub fn extend(&mut self, other: VerifyReport) {
        self.checks.extend(other.checks);
    }

    pub fn all_pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        serde_json::to_writer_pretty(std::io::BufWriter::new(file), &self.checks)?;
        Ok(())
    }
}

/// Default settings for the verification suites.
#[derive(Debug, Clone, PartialEq)]
pub struct SuiteSettings {
    pub seed: u64,
    pub n_samples: usize,
    pub dt: f64,
    pub bridge: bool,
    pub b_grid: Vec<f64>,
}

impl SuiteSettings {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            n_samples: 20_000,
            dt: 1e-3,
            bridge: true,
            b_grid: vec![0.3, 1.0],
        }
    }
}

/// `q(b)` sweep with oracle comparisons at `max(3·se, 0.05)` and sign checks
/// on either side of the positive root.
pub fn nonconvexity_suite(s: &SuiteSettings) -> Result<(VerifyReport, Vec<SweepRow>)> {
    let rows = q_sweep(&s.b_grid, s.n_samples, s.dt, s.seed, s.bridge)?;
    let root = 3f64.sqrt() - 1.0;
    let mut report = VerifyReport::default();
    for row in &rows {
        report.push(CheckResult::within(
            format!("nonconvexity_q_b={}", row.b),
            row.estimate,
            row.oracle,
            (3.0 * row.std_error).max(0.05),
        ));
        let margin = 3.0 * row.std_error;
        if row.oracle.abs() > margin {
            let name = format!("nonconvexity_sign_b={}", row.b);
            report.push(if row.b < root {
                CheckResult::at_most(name, row.estimate, 0.0)
            } else {
                CheckResult::at_least(name, row.estimate, 0.0)
            });
        }
    }
    Ok((report, rows))
}

/// Exit-law frequencies against the two-point law on each grid point.
pub fn exit_law_suite(s: &SuiteSettings) -> Result<VerifyReport> {
    let mut report = VerifyReport::default();
    for &b in &s.b_grid {
        let freq = exit_frequencies(b, s.n_samples, s.dt, s.seed, s.bridge)?;
        report.push(CheckResult::within(
            format!("exit_law_p_left_b={b}"),
            freq.p_left.mean,
            freq.oracle.p_left,
            3.0 * freq.p_left.std_error,
        ));
    }
    Ok(report)
}

/// Pathwise identity with a random `a` per record, covariation bounds and the
/// `α` assumption, on the brownian-exit and double-well builtins.
pub fn identities_suite(s: &SuiteSettings) -> Result<VerifyReport> {
    let mut report = VerifyReport::default();
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
    let problems = [
        (brownian_exit(1.0)?.with_dt(s.dt)?, CoeffVector::new(vec![1.0])),
        (double_well()?.with_dt(s.dt)?, CoeffVector::new(vec![0.1, 0.1, 0.1])),
    ];
    for (spec, a) in &problems {
        let name = spec.name();
        let records = RecordSet::simulate(spec, a, s.n_samples, s.seed)?;
        let mut worst = 0.0f64;
        let mut failures = 0usize;
        for rec in records.records() {
            let w = CoeffVector::new((0..a.len()).map(|_| rng.random_range(-2.0..2.0)).collect());
            let r = pathwise_identity_check(rec, &w)?;
            let tol = pathwise_identity_tolerance(rec, &w);
            worst = worst.max(r / tol * 1e-10);
            if r >= tol {
                failures += 1;
            }
        }
        report.push(CheckResult::at_most(format!("pathwise_identity_{name}"), worst, 1e-10));
        report.push(CheckResult::at_most(format!("pathwise_identity_failures_{name}"), failures as f64, 0.0));

        let bounds = bound_checks(records.records(), spec, a)?;
        report.push(CheckResult::at_most(
            format!("kunita_watanabe_violations_{name}"),
            bounds.kunita_watanabe_violations as f64,
            0.0,
        ));
        report.push(CheckResult::at_most(
            format!("covariation_bound_violations_{name}"),
            bounds.covariation_violations as f64,
            0.0,
        ));
        if let Some(max_alpha) = alpha_upper_bound(spec) {
            report.push(CheckResult::at_most(
                format!("alpha_assumption_{name}"),
                spec.alpha(),
                max_alpha * (1.0 + 1e-12),
            ));
        }
    }
    Ok(report)
}

/// Gradient oracle `2b²` on brownian-exit at `a = 1`, `λ = 2`, `φ ≡ 0`.
pub fn gradient_suite(s: &SuiteSettings) -> Result<VerifyReport> {
    let mut report = VerifyReport::default();
    for &b in &s.b_grid {
        let records = brownian_exit_records(b, s.n_samples, s.dt, s.seed, s.bridge)?;
        let g = records.gradient(DerivativeForm::Plain)?;
        report.push(CheckResult::within(
            format!("gradient_b={b}"),
            g.get(0),
            2.0 * b * b,
            (3.0 * g.std_errors()[0]).max(0.05),
        ));
        let hess = records.hessian(DerivativeForm::Plain)?;
        report.push(CheckResult::within(
            format!("hessian_b={b}"),
            hess.entry(0, 0),
            q_polynomial(b),
            (3.0 * hess.entry_std_error(0, 0)).max(0.05),
        ));
    }
    Ok(report)
}

/// Verification suites selectable from the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    Nonconvexity,
    ExitLaw,
    Identities,
    Gradient,
    All,
}

impl std::str::FromStr for Suite {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "nonconvexity" => Ok(Self::Nonconvexity),
            "exit-law" => Ok(Self::ExitLaw),
            "identities" => Ok(Self::Identities),
            "gradient" => Ok(Self::Gradient),
            "all" => Ok(Self::All),
            other => Err(invalid(format!("unknown suite {other:?}"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::quadratic;
    use proptest::prelude::*;

    #[test]
    fn exit_law_examples() {
        let l = exit_law_oracle(1.0).unwrap();
        assert!((l.p_left - 1.0 / 3.0).abs() < 1e-15 && (l.p_right - 2.0 / 3.0).abs() < 1e-15);
        let l = exit_law_oracle(2.0).unwrap();
        assert_eq!((l.p_left, l.p_right), (0.5, 0.5));
        let l = exit_law_oracle(1e-12).unwrap();
        assert!(l.p_left < 1e-12 && (l.p_right - 1.0).abs() < 1e-12);
        assert!(exit_law_oracle(0.0).is_err());
        assert!(exit_law_oracle(-1.0).is_err());
    }

    #[test]
    fn q_polynomial_values() {
        assert_eq!(q_polynomial(0.0), 0.0);
        assert!(q_polynomial(3f64.sqrt() - 1.0).abs() < 1e-14);
        assert!((q_polynomial(1.0) - 2.0).abs() < 1e-15);
        // At (√7−1)/3 the polynomial is −0.66037, not −1.2585.
        let bq = quoted_critical_b();
        assert!((q_polynomial(bq) + 0.660372).abs() < 1e-6, "{}", q_polynomial(bq));
        let bm = q_minimizer();
        let dq = 6.0 * bm * bm + 8.0 * bm - 4.0;
        assert!(dq.abs() < 1e-12);
        assert!(q_polynomial(bm) < q_polynomial(bq));
        assert!((q_polynomial(bm) + 0.83301).abs() < 1e-5);
    }

    #[test]
    fn exit_statistic_matches_two_point_law_expectation() {
        // E under the two-point law equals q(b)
        for b in [0.3, 0.5486, 1.0, 2.0] {
            let law = exit_law_oracle(b).unwrap();
            let e = law.p_left * exit_statistic(-2.0) + law.p_right * exit_statistic(b);
            assert!((e - q_polynomial(b)).abs() < 1e-12, "b={b}");
        }
    }

    proptest! {
        #[test]
        fn exit_law_sums_to_one(b in 1e-6f64..1e6) {
            let l = exit_law_oracle(b).unwrap();
            prop_assert!((l.p_left + l.p_right - 1.0).abs() < 1e-12);
            prop_assert!((l.p_left - b / (2.0 + b)).abs() < 1e-15);
        }

        #[test]
        fn kunita_watanabe_holds_for_psd_gram(x in proptest::collection::vec(-3.0f64..3.0, 6)) {
            // G = LLᵀ for a random lower-triangular L
            let l = nalgebra::Matrix3::new(x[0], 0.0, 0.0, x[1], x[2], 0.0, x[3], x[4], x[5]);
            let g = l * l.transpose();
            for k in 0..3 {
                for j in 0..3 {
                    prop_assert!(kunita_watanabe_slack(g[(k, k)], g[(j, j)], g[(k, j)]) >= -1e-9);
                }
            }
        }
    }

    #[test]
    fn reproduce_nonconvexity_at_one() {
        let r = reproduce_nonconvexity(1.0, 4000, 1e-3, 5, true).unwrap();
        assert_eq!(r.oracle, 2.0);
        assert!((r.estimate.mean - 2.0).abs() < (3.0 * r.estimate.std_error).max(0.05));
    }

    #[test]
    fn pathwise_identity_residuals() {
        let spec = double_well().unwrap().with_dt(1e-2).unwrap();
        let a = CoeffVector::new(vec![0.2, -0.1, 0.3]);
        let records = RecordSet::simulate(&spec, &a, 200, 3).unwrap();
        let zero = CoeffVector::zeros(3);
        for rec in records.records() {
            assert_eq!(pathwise_identity_check(rec, &zero).unwrap(), 0.0);
            for w in [a.clone(), a.scaled(2.0), CoeffVector::new(vec![-1.5, 0.7, 1.1])] {
                let r = pathwise_identity_check(rec, &w).unwrap();
                assert!(r < pathwise_identity_tolerance(rec, &w), "{r}");
            }
        }
    }

    #[test]
    fn constant_basis_gram_is_tight() {
        let spec = brownian_exit(1.0).unwrap().with_dt(1e-2).unwrap();
        let a = CoeffVector::new(vec![1.0]);
        let records = RecordSet::simulate(&spec, &a, 300, 2).unwrap();
        for rec in records.records() {
            assert!((rec.gram_at(0, 0) - rec.tau).abs() < 1e-9 * (1.0 + rec.tau));
        }
        let report = bound_checks(records.records(), &spec, &a).unwrap();
        assert_eq!(report.violations(), 0);
        assert!(report.worst_covariation_slack.abs() < 1e-9);
    }

    #[test]
    fn planted_violation_is_detected() {
        let spec = double_well().unwrap().with_dt(1e-2).unwrap();
        let a = CoeffVector::zeros(3);
        let mut records = RecordSet::simulate(&spec, &a, 50, 4).unwrap().records().to_vec();
        let clean = bound_checks(&records, &spec, &a).unwrap();
        assert_eq!(clean.violations(), 0);
        assert_eq!(clean.pairs_checked, 50 * 6);
        // push an off-diagonal entry beyond √(G₀₀G₁₁), keeping symmetry
        let r = &mut records[7];
        let big = 1.5 * (r.gram_at(0, 0) * r.gram_at(1, 1)).sqrt() + 1e-6;
        let n = r.basis_size();
        r.gram[1] = big;
        r.gram[n] = big;
        let dirty = bound_checks(&records, &spec, &a).unwrap();
        assert_eq!(dirty.kunita_watanabe_violations, 1);
        assert!(dirty.worst_kunita_watanabe_slack < 0.0);
    }

    #[test]
    fn fd_quotient_is_exact_on_the_quadratic() {
        let spec = quadratic(1.0).unwrap();
        let a = CoeffVector::new(vec![0.5]);
        let dir = CoeffVector::new(vec![1.0]);
        let rep = finite_difference_check(&spec, &a, &dir, 1e-3, 2000, 9).unwrap();
        // Φ(a) = ½λa²T with λ = T = 1, derivative 0.5
        assert!((rep.finite_difference - 0.5).abs() < 1e-9);
        assert!(rep.relative_error < 5.0 * rep.directional_std_error / 0.5);
        let rough = finite_difference_check(&spec, &a, &dir, 1e-8, 2000, 9).unwrap();
        assert!((rough.finite_difference - 0.5).abs() > (rep.finite_difference - 0.5).abs());
        let zero = finite_difference_check(&spec, &CoeffVector::zeros(1), &dir, 1e-3, 200, 9).unwrap();
        assert!(zero.relative_error < 1e-6);
        assert!(finite_difference_check(&spec, &a, &dir, 0.0, 10, 1).is_err());
    }

    #[test]
    fn reweighted_fd_matches_compensated_gradient() {
        let spec = double_well().unwrap().with_dt(1e-2).unwrap();
        let a = CoeffVector::new(vec![0.2, 0.3, -0.1]);
        let dir = CoeffVector::new(vec![0.0, 1.0, 0.0]);
        let rep = finite_difference_check_with(
            &spec,
            &a,
            &dir,
            1e-4,
            500,
            2,
            FdMode::Reweight,
            DerivativeForm::Compensated,
        )
        .unwrap();
        assert!(rep.relative_error < 1e-6, "{rep:?}");
    }

    #[test]
    fn grid_parsing() {
        let g = parse_grid("0.2:1.2:0.1").unwrap();
        assert_eq!(g.len(), 11);
        assert!((g[10] - 1.2).abs() < 1e-12);
        assert_eq!(parse_grid("0.5, 1,2").unwrap(), vec![0.5, 1.0, 2.0]);
        assert!(parse_grid("").is_err());
        assert!(parse_grid("1:0:0.1").is_err());
        assert!(parse_grid("0:1:0").is_err());
        assert!(parse_grid("a,b").is_err());
    }

    #[test]
    fn alpha_bound_for_builtins() {
        let dw = double_well().unwrap();
        assert!((alpha_upper_bound(&dw).unwrap() - 2f64.sqrt()).abs() < 1e-12);
        assert!(dw.alpha() <= alpha_upper_bound(&dw).unwrap() + 1e-12);
    }

    #[test]
    fn richardson_on_exact_statistic_has_no_bias() {
        // p_left under the bridge correction is unbiased in dt
        let spec = brownian_exit(1.0).unwrap().with_dt(2e-2).unwrap().with_bridge(true);
        let study = dt_halving_study(&spec, &CoeffVector::new(vec![1.0]), 4000, 3, 0.5, |rs| {
            Ok(exit_frequencies_on(rs, 1.0)?.p_left)
        })
        .unwrap();
        assert!((study.fine.mean - 1.0 / 3.0).abs() < 4.0 * study.fine.std_error);
        assert!(study.bias.abs() < 10.0 * study.fine.std_error);
    }

    #[test]
    fn report_serializes_with_expected_keys() {
        let mut r = VerifyReport::default();
        r.push(CheckResult::within("x", 1.0, 1.1, 0.2));
        r.push(CheckResult::at_most("y", 2.0, 1.0));
        assert!(!r.all_pass());
        let v = serde_json::to_value(&r.checks).unwrap();
        let mut keys: Vec<&str> = v[0].as_object().unwrap().keys().map(|s| s.as_str()).collect();
        keys.sort_unstable();
        assert_eq!(keys, ["check_name", "oracle", "pass", "tolerance", "value"]);
        assert_eq!(v[0]["pass"], true);
    }
}
