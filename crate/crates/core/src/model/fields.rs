//! Coefficient evaluators.
//!
//! Every evaluator is a pure function of `(t, x)`. Implementations must be
//! `Send + Sync` so a problem can be shared by all simulation workers.

use std::fmt;

use nalgebra::DMatrix;

pub trait VectorField: Send + Sync + fmt::Debug {
    /// Writes the value at `(t, x)` into `out` (length = state dimension).
    fn eval(&self, t: f64, x: &[f64], out: &mut [f64]);
}

pub trait ScalarField: Send + Sync + fmt::Debug {
    fn eval(&self, t: f64, x: &[f64]) -> f64;
}

pub trait MatrixField: Send + Sync + fmt::Debug {
    /// Writes the d×d value at `(t, x)` into `out`.
    fn eval(&self, t: f64, x: &[f64], out: &mut DMatrix<f64>);
}

/// Polynomial in one variable, coefficients in increasing degree.
#[derive(Debug, Clone, PartialEq)]
pub struct Polynomial {
    coefficients: Vec<f64>,
}

impl Polynomial {
    pub fn new(coefficients: Vec<f64>) -> Self {
        Self { coefficients }
    }

    pub fn coefficients(&self) -> &[f64] {
        &self.coefficients
    }

    pub fn eval(&self, x: f64) -> f64 {
        self.coefficients.iter().rev().fold(0.0, |acc, &c| acc * x + c)
    }

    pub fn derivative(&self) -> Polynomial {
        let coefficients = self
            .coefficients
            .iter()
            .enumerate()
            .skip(1)
            .map(|(i, &c)| i as f64 * c)
            .collect();
        Polynomial { coefficients }
    }

    /// Upper bound of `|p(x)|` for `x` in `[lo, hi]` (sum of absolute terms).
    pub fn abs_bound(&self, lo: f64, hi: f64) -> f64 {
        let r = lo.abs().max(hi.abs());
        self.coefficients
            .iter()
            .enumerate()
            .map(|(i, c)| c.abs() * r.powi(i as i32))
            .sum()
    }
}

#[derive(Debug, Clone)]
pub struct ConstantVector(pub Vec<f64>);

impl VectorField for ConstantVector {
    fn eval(&self, _t: f64, _x: &[f64], out: &mut [f64]) {
        if let ([o], [v]) = (&mut *out, self.0.as_slice()) {
            *o = *v;
        } else {
            out.copy_from_slice(&self.0);
        }
    }
}

/// `out_j = p_j(x_j)`.
#[derive(Debug, Clone)]
pub struct SeparablePolynomialField {
    pub components: Vec<Polynomial>,
}

impl VectorField for SeparablePolynomialField {
    fn eval(&self, _t: f64, x: &[f64], out: &mut [f64]) {
        for ((o, p), &xj) in out.iter_mut().zip(&self.components).zip(x) {
            *o = p.eval(xj);
        }
    }
}

/// Gradient drift `-∇V` of a separable potential `V(x) = Σ_j V_j(x_j)`.
#[derive(Debug, Clone)]
pub struct PotentialGradient {
    potentials: Vec<Polynomial>,
    derivatives: Vec<Polynomial>,
}

impl PotentialGradient {
    pub fn new(potentials: Vec<Polynomial>) -> Self {
        let derivatives = potentials.iter().map(Polynomial::derivative).collect();
        Self {
            potentials,
            derivatives,
        }
    }

    pub fn potentials(&self) -> &[Polynomial] {
        &self.potentials
    }
}

impl VectorField for PotentialGradient {
    fn eval(&self, _t: f64, x: &[f64], out: &mut [f64]) {
        for ((o, p), &xj) in out.iter_mut().zip(&self.derivatives).zip(x) {
            *o = -p.eval(xj);
        }
    }
}

/// `direction · exp(-|x - center|² / (2 width²))`.
#[derive(Debug, Clone)]
pub struct GaussianBump {
    pub center: Vec<f64>,
    pub width: f64,
    pub direction: Vec<f64>,
}

impl VectorField for GaussianBump {
    fn eval(&self, _t: f64, x: &[f64], out: &mut [f64]) {
        let r2: f64 = x
            .iter()
            .zip(&self.center)
            .map(|(xi, ci)| (xi - ci) * (xi - ci))
            .sum();
        let w = (-0.5 * r2 / (self.width * self.width)).exp();
        for (o, d) in out.iter_mut().zip(&self.direction) {
            *o = w * d;
        }
    }
}

/// `direction · p(x_coordinate)`.
#[derive(Debug, Clone)]
pub struct PolynomialProfile {
    pub coordinate: usize,
    pub profile: Polynomial,
    pub direction: Vec<f64>,
}

impl VectorField for PolynomialProfile {
    fn eval(&self, _t: f64, x: &[f64], out: &mut [f64]) {
        let w = self.profile.eval(x[self.coordinate]);
        for (o, d) in out.iter_mut().zip(&self.direction) {
            *o = w * d;
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ConstantScalar(pub f64);

impl ScalarField for ConstantScalar {
    fn eval(&self, _t: f64, _x: &[f64]) -> f64 {
        self.0
    }
}

/// `Σ_j p_j(x_j)`.
#[derive(Debug, Clone)]
pub struct SeparablePolynomialScalar {
    pub components: Vec<Polynomial>,
}

impl ScalarField for SeparablePolynomialScalar {
    fn eval(&self, _t: f64, x: &[f64]) -> f64 {
        self.components
            .iter()
            .zip(x)
            .map(|(p, &xj)| p.eval(xj))
            .sum()
    }
}

/// 1 when `x_coordinate` is at or beyond `level` on the given side, else 0.
#[derive(Debug, Clone, Copy)]
pub struct ExitIndicator {
    pub coordinate: usize,
    pub level: f64,
    pub upper: bool,
}

impl ScalarField for ExitIndicator {
    fn eval(&self, _t: f64, x: &[f64]) -> f64 {
        let v = x[self.coordinate];
        let hit = if self.upper { v >= self.level } else { v <= self.level };
        if hit {
            1.0
        } else {
            0.0
        }
    }
}

/// Adapter turning a closure into a [`VectorField`].
pub struct FnVectorField<F> {
    name: &'static str,
    f: F,
}

impl<F> FnVectorField<F>
where
    F: Fn(f64, &[f64], &mut [f64]) + Send + Sync,
{
    pub fn new(name: &'static str, f: F) -> Self {
        Self { name, f }
    }
}

impl<F> fmt::Debug for FnVectorField<F> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "FnVectorField({})", self.name)
    }
}

impl<F> VectorField for FnVectorField<F>
where
    F: Fn(f64, &[f64], &mut [f64]) + Send + Sync,
{
    fn eval(&self, t: f64, x: &[f64], out: &mut [f64]) {
        (self.f)(t, x, out)
    }
}

pub struct FnScalarField<F> {
    name: &'static str,
    f: F,
}

impl<F> FnScalarField<F>
where
    F: Fn(f64, &[f64]) -> f64 + Send + Sync,
{
    pub fn new(name: &'static str, f: F) -> Self {
        Self { name, f }
    }
}

impl<F> fmt::Debug for FnScalarField<F> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "FnScalarField({})", self.name)
    }
}

impl<F> ScalarField for FnScalarField<F>
where
    F: Fn(f64, &[f64]) -> f64 + Send + Sync,
{
    fn eval(&self, t: f64, x: &[f64]) -> f64 {
        (self.f)(t, x)
    }
}

pub struct FnMatrixField<F> {
    name: &'static str,
    f: F,
}

impl<F> FnMatrixField<F>
where
    F: Fn(f64, &[f64], &mut DMatrix<f64>) + Send + Sync,
{
    pub fn new(name: &'static str, f: F) -> Self {
        Self { name, f }
    }
}

impl<F> fmt::Debug for FnMatrixField<F> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "FnMatrixField({})", self.name)
    }
}

impl<F> MatrixField for FnMatrixField<F>
where
    F: Fn(f64, &[f64], &mut DMatrix<f64>) + Send + Sync,
{
    fn eval(&self, t: f64, x: &[f64], out: &mut DMatrix<f64>) {
        (self.f)(t, x, out)
    }
}
