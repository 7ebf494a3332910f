//! Problem data for first-exit control problems: coefficients, domain,
//! costs, control basis, and the admissibility bounds that go with them.

pub mod fields;

use std::f64::consts::SQRT_2;
use std::fmt;
use std::ops::Deref;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
pub use fields::{MatrixField, ScalarField, VectorField};

/// Default relative cutoff for singular values in pseudo-inverses.
pub const DEFAULT_PINV_REL_TOL: f64 = 1e-12;

/// Open axis-aligned box `Π_j (lo_j, hi_j)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxDomain {
    bounds: Vec<(f64, f64)>,
}

impl BoxDomain {
    pub fn new(bounds: Vec<(f64, f64)>) -> Result<Self> {
        if bounds.is_empty() {
            return Err(invalid("domain must have at least one coordinate"));
        }
        for (j, &(lo, hi)) in bounds.iter().enumerate() {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(invalid(format!(
                    "domain coordinate {j}: need finite lo < hi, got ({lo}, {hi})"
                )));
            }
        }
        Ok(Self { bounds })
    }

    pub fn dimension(&self) -> usize {
        self.bounds.len()
    }

    pub fn bounds(&self) -> &[(f64, f64)] {
        &self.bounds
    }

    /// Strict membership in the open box.
    pub fn contains(&self, x: &[f64]) -> bool {
        self.bounds
            .iter()
            .zip(x)
            .all(|(&(lo, hi), &v)| v > lo && v < hi)
    }
}

/// Diffusion coefficient `f`.
#[derive(Clone)]
pub enum Diffusion {
    /// State- and time-independent matrix; its pseudo-inverse is computed once.
    Constant(DMatrix<f64>),
    Field(Arc<dyn MatrixField>),
}

impl fmt::Debug for Diffusion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Diffusion::Constant(m) => write!(f, "Diffusion::Constant({:?})", m.as_slice()),
            Diffusion::Field(field) => write!(f, "Diffusion::Field({field:?})"),
        }
    }
}

/// Precomputed factors of a diffusion matrix.
#[derive(Debug, Clone)]
pub struct DiffusionFactors {
    pub f: DMatrix<f64>,
    /// `f⁺`, so that `(f⁺)ᵀ f⁺ = (f fᵀ)⁺`.
    pub f_pinv: DMatrix<f64>,
    /// Per-coordinate standard deviation `sqrt((f fᵀ)_jj)`.
    pub coord_sigma: Vec<f64>,
}

impl DiffusionFactors {
    pub fn new(f: DMatrix<f64>, rel_tol: f64) -> Result<Self> {
        let f_pinv = pseudo_inverse(&f, rel_tol)?;
        let cov = &f * f.transpose();
        let coord_sigma = (0..f.nrows()).map(|j| cov[(j, j)].max(0.0).sqrt()).collect();
        Ok(Self {
            f,
            f_pinv,
            coord_sigma,
        })
    }
}

/// One control basis function `b_k` with its declared sup-norm bound.
#[derive(Clone)]
pub struct BasisFunction {
    pub label: String,
    pub field: Arc<dyn VectorField>,
    pub bound: f64,
}

impl fmt::Debug for BasisFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("BasisFunction")
            .field("label", &self.label)
            .field("bound", &self.bound)
            .finish()
    }
}

/// How a trajectory is stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Stopping {
    /// First exit from the domain, truncated (and flagged censored) at `t_max`.
    #[default]
    FirstExit,
    /// Deterministic horizon `τ = t_max`; the domain is not monitored.
    FixedHorizon,
}

/// Complete definition of a first-exit control problem.
#[derive(Clone)]
pub struct ProblemSpec {
    name: String,
    domain: BoxDomain,
    drift: Arc<dyn VectorField>,
    diffusion: Diffusion,
    constant_factors: Option<DiffusionFactors>,
    alpha: f64,
    running_cost: Arc<dyn ScalarField>,
    terminal_cost: Arc<dyn ScalarField>,
    basis: Vec<BasisFunction>,
    lambda: f64,
    initial_state: Vec<f64>,
    dt: f64,
    t_max: f64,
    bridge: bool,
    stopping: Stopping,
    exit_rate: Option<f64>,
    running_cost_nonnegative: bool,
}

impl fmt::Debug for ProblemSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ProblemSpec")
            .field("name", &self.name)
            .field("domain", &self.domain)
            .field("diffusion", &self.diffusion)
            .field("alpha", &self.alpha)
            .field("basis", &self.basis)
            .field("lambda", &self.lambda)
            .field("initial_state", &self.initial_state)
            .field("dt", &self.dt)
            .field("t_max", &self.t_max)
            .field("bridge", &self.bridge)
            .field("stopping", &self.stopping)
            .finish()
    }
}

impl ProblemSpec {
    pub fn builder(name: impl Into<String>, domain: BoxDomain) -> ProblemBuilder {
        ProblemBuilder::new(name, domain)
    }

    pub fn name(&self) -> &str {
        &self.name
    }
    pub fn dimension(&self) -> usize {
        self.domain.dimension()
    }
    pub fn domain(&self) -> &BoxDomain {
        &self.domain
    }
    pub fn drift(&self) -> &dyn VectorField {
        self.drift.as_ref()
    }
    pub fn diffusion(&self) -> &Diffusion {
        &self.diffusion
    }
    /// Cached factors when the diffusion is constant.
    pub fn constant_factors(&self) -> Option<&DiffusionFactors> {
        self.constant_factors.as_ref()
    }
    pub fn alpha(&self) -> f64 {
        self.alpha
    }
    pub fn running_cost(&self) -> &dyn ScalarField {
        self.running_cost.as_ref()
    }
    pub fn terminal_cost(&self) -> &dyn ScalarField {
        self.terminal_cost.as_ref()
    }
    pub fn basis(&self) -> &[BasisFunction] {
        &self.basis
    }
    pub fn basis_size(&self) -> usize {
        self.basis.len()
    }
    pub fn lambda(&self) -> f64 {
        self.lambda
    }
    pub fn initial_state(&self) -> &[f64] {
        &self.initial_state
    }
    pub fn dt(&self) -> f64 {
        self.dt
    }
    pub fn t_max(&self) -> f64 {
        self.t_max
    }
    pub fn bridge(&self) -> bool {
        self.bridge
    }
    pub fn stopping(&self) -> Stopping {
        self.stopping
    }
    /// Declared `λ₀` with `E⁰[exp(λ₀ τ)] < ∞`, if known.
    pub fn exit_rate(&self) -> Option<f64> {
        self.exit_rate
    }
    /// True when the running cost was declared nonnegative.
    pub fn running_cost_nonnegative(&self) -> bool {
        self.running_cost_nonnegative
    }

    /// Maximum number of Euler steps before truncation.
    pub fn max_steps(&self) -> u64 {
        let r = self.t_max / self.dt;
        let nearest = r.round();
        if (r - nearest).abs() <= 1e-9 * r.max(1.0) {
            nearest as u64
        } else {
            r.ceil() as u64
        }
    }

    /// Sup-norm bound `Σ_k |a_k| · bound_k` of the control `u^a`.
    pub fn control_sup_bound(&self, a: &CoeffVector) -> f64 {
        a.iter()
            .zip(&self.basis)
            .map(|(ak, b)| ak.abs() * b.bound)
            .sum()
    }

    /// Admissibility radius from the declared exit rate, if any.
    pub fn admissible_radius(&self) -> Option<f64> {
        self.exit_rate
            .and_then(|l0| admissible_radius(self.alpha, l0).ok())
    }

    pub fn with_lambda(&self, lambda: f64) -> Result<Self> {
        positive("lambda", lambda)?;
        let mut s = self.clone();
        s.lambda = lambda;
        Ok(s)
    }

    pub fn with_dt(&self, dt: f64) -> Result<Self> {
        positive("dt", dt)?;
        if self.t_max < dt {
            return Err(invalid("t_max must be at least dt"));
        }
        let mut s = self.clone();
        s.dt = dt;
        Ok(s)
    }

    pub fn with_t_max(&self, t_max: f64) -> Result<Self> {
        if !(t_max.is_finite() && t_max >= self.dt) {
            return Err(invalid("t_max must be finite and at least dt"));
        }
        let mut s = self.clone();
        s.t_max = t_max;
        Ok(s)
    }

    pub fn with_bridge(&self, bridge: bool) -> Self {
        let mut s = self.clone();
        s.bridge = bridge;
        s
    }

    pub fn with_running_cost(&self, cost: Arc<dyn ScalarField>, nonnegative: bool) -> Self {
        let mut s = self.clone();
        s.running_cost = cost;
        s.running_cost_nonnegative = nonnegative;
        s
    }

    pub fn with_terminal_cost(&self, cost: Arc<dyn ScalarField>) -> Self {
        let mut s = self.clone();
        s.terminal_cost = cost;
        s
    }

    /// Checks that `a` has one coefficient per basis function.
    pub fn check_coefficients(&self, a: &CoeffVector) -> Result<()> {
        if a.len() != self.basis.len() {
            return Err(invalid(format!(
                "coefficient vector has length {}, basis has {} functions",
                a.len(),
                self.basis.len()
            )));
        }
        if a.iter().any(|v| !v.is_finite()) {
            return Err(invalid("coefficient vector has non-finite entries"));
        }
        Ok(())
    }
}

/// Builder for [`ProblemSpec`]; `build` validates every invariant.
pub struct ProblemBuilder {
    name: String,
    domain: BoxDomain,
    drift: Option<Arc<dyn VectorField>>,
    diffusion: Option<Diffusion>,
    alpha: Option<f64>,
    running_cost: Arc<dyn ScalarField>,
    terminal_cost: Arc<dyn ScalarField>,
    running_cost_nonnegative: bool,
    basis: Vec<BasisFunction>,
    lambda: f64,
    initial_state: Option<Vec<f64>>,
    dt: f64,
    t_max: f64,
    bridge: bool,
    stopping: Stopping,
    exit_rate: Option<f64>,
}

impl ProblemBuilder {
    fn new(name: impl Into<String>, domain: BoxDomain) -> Self {
        Self {
            name: name.into(),
            domain,
            drift: None,
            diffusion: None,
            alpha: None,
            running_cost: Arc::new(fields::ConstantScalar(0.0)),
            terminal_cost: Arc::new(fields::ConstantScalar(0.0)),
            running_cost_nonnegative: true,
            basis: Vec::new(),
            lambda: 1.0,
            initial_state: None,
            dt: 1e-3,
            t_max: 100.0,
            bridge: false,
            stopping: Stopping::FirstExit,
            exit_rate: None,
        }
    }

    pub fn drift(mut self, drift: Arc<dyn VectorField>) -> Self {
        self.drift = Some(drift);
        self
    }
    pub fn diffusion(mut self, diffusion: Diffusion) -> Self {
        self.diffusion = Some(diffusion);
        self
    }
    pub fn alpha(mut self, alpha: f64) -> Self {
        self.alpha = Some(alpha);
        self
    }
    /// `nonnegative` declares `k_run ≥ 0`; only used for convexity diagnostics.
    pub fn running_cost(mut self, cost: Arc<dyn ScalarField>, nonnegative: bool) -> Self {
        self.running_cost = cost;
        self.running_cost_nonnegative = nonnegative;
        self
    }
    pub fn terminal_cost(mut self, cost: Arc<dyn ScalarField>) -> Self {
        self.terminal_cost = cost;
        self
    }
    pub fn basis_function(
        mut self,
        label: impl Into<String>,
        field: Arc<dyn VectorField>,
        bound: f64,
    ) -> Self {
        self.basis.push(BasisFunction {
            label: label.into(),
            field,
            bound,
        });
        self
    }
    pub fn lambda(mut self, lambda: f64) -> Self {
        self.lambda = lambda;
        self
    }
    pub fn initial_state(mut self, x0: Vec<f64>) -> Self {
        self.initial_state = Some(x0);
        self
    }
    pub fn dt(mut self, dt: f64) -> Self {
        self.dt = dt;
        self
    }
    pub fn t_max(mut self, t_max: f64) -> Self {
        self.t_max = t_max;
        self
    }
    pub fn bridge(mut self, bridge: bool) -> Self {
        self.bridge = bridge;
        self
    }
    pub fn stopping(mut self, stopping: Stopping) -> Self {
        self.stopping = stopping;
        self
    }
    pub fn exit_rate(mut self, rate: Option<f64>) -> Self {
        self.exit_rate = rate;
        self
    }

    pub fn build(self) -> Result<ProblemSpec> {
        let d = self.domain.dimension();
        let drift = self.drift.ok_or_else(|| invalid("drift is required"))?;
        let diffusion = self.diffusion.ok_or_else(|| invalid("diffusion is required"))?;
        let alpha = self.alpha.ok_or_else(|| invalid("alpha is required"))?;
        let x0 = self
            .initial_state
            .ok_or_else(|| invalid("initial_state is required"))?;
        positive("alpha", alpha)?;
        positive("lambda", self.lambda)?;
        positive("dt", self.dt)?;
        if !(self.t_max.is_finite() && self.t_max >= self.dt) {
            return Err(invalid("t_max must be finite and at least dt"));
        }
        if x0.len() != d {
            return Err(invalid(format!(
                "initial_state has dimension {}, domain has {d}",
                x0.len()
            )));
        }
        if !self.domain.contains(&x0) {
            return Err(invalid("initial_state must lie strictly inside the domain"));
        }
        if self.basis.is_empty() {
            return Err(invalid("control basis must contain at least one function"));
        }
        for b in &self.basis {
            if !(b.bound.is_finite() && b.bound >= 0.0) {
                return Err(invalid(format!(
                    "basis function '{}' needs a finite nonnegative sup-norm bound",
                    b.label
                )));
            }
        }
        if let Some(rate) = self.exit_rate {
            positive("exit_rate", rate)?;
        }
        let constant_factors = match &diffusion {
            Diffusion::Constant(m) => {
                if m.nrows() != d || m.ncols() != d {
                    return Err(invalid(format!("diffusion matrix must be {d}×{d}")));
                }
                Some(DiffusionFactors::new(m.clone(), DEFAULT_PINV_REL_TOL)?)
            }
            Diffusion::Field(_) => None,
        };
        Ok(ProblemSpec {
            name: self.name,
            domain: self.domain,
            drift,
            diffusion,
            constant_factors,
            alpha,
            running_cost: self.running_cost,
            terminal_cost: self.terminal_cost,
            basis: self.basis,
            lambda: self.lambda,
            initial_state: x0,
            dt: self.dt,
            t_max: self.t_max,
            bridge: self.bridge,
            stopping: self.stopping,
            exit_rate: self.exit_rate,
            running_cost_nonnegative: self.running_cost_nonnegative,
        })
    }
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(invalid(format!("{name} must be finite and positive, got {v}")))
    }
}

/// Coefficients `a` of the control `u^a = Σ_k a_k b_k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CoeffVector(Vec<f64>);

impl CoeffVector {
    pub fn new(a: Vec<f64>) -> Self {
        Self(a)
    }
    pub fn zeros(n: usize) -> Self {
        Self(vec![0.0; n])
    }
    pub fn unit(n: usize, k: usize) -> Self {
        let mut v = vec![0.0; n];
        v[k] = 1.0;
        Self(v)
    }
    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
    pub fn dot(&self, other: &[f64]) -> f64 {
        self.0.iter().zip(other).map(|(a, b)| a * b).sum()
    }
    pub fn norm(&self) -> f64 {
        self.dot(&self.0).sqrt()
    }
    /// `self + c · other`.
    pub fn axpy(&self, c: f64, other: &[f64]) -> Self {
        Self(self.0.iter().zip(other).map(|(a, b)| a + c * b).collect())
    }
    pub fn scaled(&self, c: f64) -> Self {
        Self(self.0.iter().map(|a| c * a).collect())
    }
    pub fn to_dvector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.0)
    }
}

impl Deref for CoeffVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl From<Vec<f64>> for CoeffVector {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

/// `u^a(t, x) = Σ_k a_k b_k(t, x)`.
pub fn evaluate_control(spec: &ProblemSpec, a: &CoeffVector, t: f64, x: &[f64]) -> Result<Vec<f64>> {
    spec.check_coefficients(a)?;
    if x.len() != spec.dimension() || x.iter().any(|v| !v.is_finite()) {
        return Err(invalid("state must be finite with the problem's dimension"));
    }
    let d = spec.dimension();
    let mut out = vec![0.0; d];
    let mut buf = vec![0.0; d];
    for (ak, b) in a.iter().zip(spec.basis()) {
        b.field.eval(t, x, &mut buf);
        for (o, v) in out.iter_mut().zip(&buf) {
            *o += ak * v;
        }
    }
    Ok(out)
}

fn check_matrix(f: &DMatrix<f64>) -> Result<()> {
    if f.iter().any(|v| !v.is_finite()) {
        return Err(invalid("matrix has non-finite entries"));
    }
    Ok(())
}

fn rank_cutoff(singular_values: &DVector<f64>, rel_tol: f64) -> f64 {
    let smax = singular_values.iter().fold(0.0f64, |m, &s| m.max(s));
    rel_tol * smax
}

/// Moore–Penrose pseudo-inverse `f⁺` via SVD; singular values at or below
/// `rel_tol · σ_max` are treated as zero.
pub fn pseudo_inverse(f: &DMatrix<f64>, rel_tol: f64) -> Result<DMatrix<f64>> {
    check_matrix(f)?;
    if !(rel_tol > 0.0 && rel_tol < 1.0) {
        return Err(invalid("rel_tol must lie in (0, 1)"));
    }
    let svd = f.clone().svd(true, true);
    let cutoff = rank_cutoff(&svd.singular_values, rel_tol);
    let u = svd.u.as_ref().expect("svd computed with u");
    let v_t = svd.v_t.as_ref().expect("svd computed with v_t");
    let mut out = DMatrix::zeros(f.ncols(), f.nrows());
    for (i, &s) in svd.singular_values.iter().enumerate() {
        if s > cutoff && s > 0.0 {
            out += (v_t.row(i).transpose() * u.column(i).transpose()) / s;
        }
    }
    Ok(out)
}

/// Applies `(f fᵀ)⁺` to `y`.
pub fn pseudo_apply(f: &DMatrix<f64>, y: &[f64], rel_tol: f64) -> Result<Vec<f64>> {
    check_matrix(f)?;
    if !(rel_tol > 0.0 && rel_tol < 1.0) {
        return Err(invalid("rel_tol must lie in (0, 1)"));
    }
    if y.len() != f.nrows() {
        return Err(invalid("vector length must match the matrix row count"));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(invalid("vector has non-finite entries"));
    }
    let svd = f.clone().svd(true, false);
    let cutoff = rank_cutoff(&svd.singular_values, rel_tol);
    let u = svd.u.as_ref().expect("svd computed with u");
    let y = DVector::from_column_slice(y);
    let mut out = DVector::zeros(f.nrows());
    for (i, &s) in svd.singular_values.iter().enumerate() {
        if s > cutoff && s > 0.0 {
            let col = u.column(i);
            out += col * (col.dot(&y) / (s * s));
        }
    }
    Ok(out.as_slice().to_vec())
}

/// Sup-norm radius `r = 2 α √λ₀ (1 − 1/√2)` of the ball of admissible
/// changes of drift, given `E⁰[exp(λ₀ τ)] < ∞`.
pub fn admissible_radius(alpha: f64, lambda0: f64) -> Result<f64> {
    positive("alpha", alpha)?;
    positive("lambda0", lambda0)?;
    Ok(2.0 * alpha * lambda0.sqrt() * (1.0 - 1.0 / SQRT_2))
}

/// Integrability exponent `q` of the exponential martingale `ε(M^v)_τ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "kind", content = "q", rename_all = "snake_case")]
pub enum Integrability {
    /// `v = 0`: every `L^q`.
    Unbounded,
    Exponent(f64),
    /// The norm is too large for any `q > 1`.
    NotGuaranteed,
}

impl Integrability {
    /// The exponent as a real: `∞`, `q`, or the boundary value 1.
    pub fn q(&self) -> f64 {
        match self {
            Integrability::Unbounded => f64::INFINITY,
            Integrability::Exponent(q) => *q,
            Integrability::NotGuaranteed => 1.0,
        }
    }
}

/// Largest `q` for which `‖v‖² ≤ λ_u (¼ (√p/(√p−1))² α⁻²)⁻¹` holds with the
/// conjugate `p = q/(q−1)`.
pub fn integrability_exponent(alpha: f64, lambda_u: f64, v_norm: f64) -> Result<Integrability> {
    positive("alpha", alpha)?;
    positive("lambda_u", lambda_u)?;
    if !(v_norm.is_finite() && v_norm >= 0.0) {
        return Err(invalid("v_norm must be finite and nonnegative"));
    }
    if v_norm == 0.0 {
        return Ok(Integrability::Unbounded);
    }
    // The condition reads √p/(√p−1) ≤ r, with s ↦ s/(s−1) decreasing on (1, ∞).
    let r = 2.0 * alpha * lambda_u.sqrt() / v_norm;
    if r <= 1.0 {
        return Ok(Integrability::NotGuaranteed);
    }
    let s = r / (r - 1.0);
    let p = s * s;
    Ok(Integrability::Exponent(p / (p - 1.0)))
}

/// Principal Dirichlet eigenvalue of `−L`, `L = ½σ² ∂² + g ∂`, on `(lo, hi)`.
/// This is the exponential decay rate of `P(τ > t)` for a one-dimensional
/// diffusion with constant `σ` and time-independent drift `g`.
pub fn principal_exit_rate_1d(
    drift: &dyn VectorField,
    sigma: f64,
    lo: f64,
    hi: f64,
    grid: usize,
) -> Result<f64> {
    positive("sigma", sigma)?;
    if !(lo < hi) || grid < 8 {
        return Err(invalid("need lo < hi and at least 8 grid points"));
    }
    let h = (hi - lo) / (grid + 1) as f64;
    let diff = 0.5 * sigma * sigma / (h * h);
    // Tridiagonal −L: sub, diag, sup.
    let mut sub = vec![0.0; grid];
    let mut dia = vec![0.0; grid];
    let mut sup = vec![0.0; grid];
    let mut g = [0.0];
    for i in 0..grid {
        let x = lo + (i + 1) as f64 * h;
        drift.eval(0.0, &[x], &mut g);
        let adv = g[0] / (2.0 * h);
        sub[i] = -(diff - adv);
        dia[i] = 2.0 * diff;
        sup[i] = -(diff + adv);
    }
    let mut v = vec![1.0; grid];
    let mut rate = 0.0;
    for _ in 0..500 {
        let w = thomas_solve(&sub, &dia, &sup, &v)?;
        let norm_w = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        let norm_v = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let next = norm_v / norm_w;
        v = w.iter().map(|x| x / norm_w).collect();
        if (next - rate).abs() <= 1e-13 * next {
            return Ok(next);
        }
        rate = next;
    }
    Ok(rate)
}

fn thomas_solve(sub: &[f64], dia: &[f64], sup: &[f64], rhs: &[f64]) -> Result<Vec<f64>> {
    let n = dia.len();
    let mut c = vec![0.0; n];
    let mut d = vec![0.0; n];
    let mut denom = dia[0];
    if denom == 0.0 {
        return Err(invalid("singular tridiagonal system"));
    }
    c[0] = sup[0] / denom;
    d[0] = rhs[0] / denom;
    for i in 1..n {
        denom = dia[i] - sub[i] * c[i - 1];
        if denom == 0.0 {
            return Err(invalid("singular tridiagonal system"));
        }
        c[i] = sup[i] / denom;
        d[i] = (rhs[i] - sub[i] * d[i - 1]) / denom;
    }
    let mut x = vec![0.0; n];
    x[n - 1] = d[n - 1];
    for i in (0..n - 1).rev() {
        x[i] = d[i] - c[i] * x[i + 1];
    }
    Ok(x)
}
