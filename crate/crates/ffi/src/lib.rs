//! C ABI over the `girsanov-grad` estimators.
//!
//! Handles are opaque pointers created by `gg_*_new`/`gg_simulate` style
//! constructors and released with the matching `*_free`. Every fallible call
//! returns a [`GgStatus`]; on failure the message is available through
//! [`gg_last_error`] on the same thread.
//!
//! Arrays are passed as pointer plus length. Hessians are row-major `K×K`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use girsanov_grad::estimate::{DerivativeForm, RecordSet};
use girsanov_grad::model::{CoeffVector, ProblemSpec};
use girsanov_grad::optimize::{self, OptimizerSettings, Termination};
use girsanov_grad::problems::{self, BuiltinParams, ProblemConfig};
use girsanov_grad::verify;
use girsanov_grad::Error;

/// Status codes returned by every fallible function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GgStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidInput = 2,
    SimulationDiverged = 3,
    DegenerateEstimate = 4,
    EstimatorUnusable = 5,
    DegenerateControl = 6,
    IndefiniteHessian = 7,
    Config = 8,
    Io = 9,
    BufferTooSmall = 10,
    Panic = 11,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GgForm {
    Plain = 0,
    Compensated = 1,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GgMethod {
    Gd = 0,
    Newton = 1,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GgTermination {
    GradientTolerance = 0,
    MaxIterations = 1,
    LineSearchFailure = 2,
    HessianIndefiniteFallback = 3,
}

/// Monte Carlo mean with its standard error.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct GgEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub n_samples: usize,
    pub censored_fraction: f64,
}

/// Opaque problem handle.
pub struct GgProblem {
    spec: ProblemSpec,
}

/// Opaque handle to a set of simulated trajectory records.
pub struct GgRecords {
    records: RecordSet,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> GgStatus {
    match e {
        Error::InvalidInput(_) => GgStatus::InvalidInput,
        Error::SimulationDiverged { .. } => GgStatus::SimulationDiverged,
        Error::DegenerateEstimate(_) => GgStatus::DegenerateEstimate,
        Error::EstimatorUnusable(_) => GgStatus::EstimatorUnusable,
        Error::DegenerateControl(_) => GgStatus::DegenerateControl,
        Error::IndefiniteHessian { .. } => GgStatus::IndefiniteHessian,
        Error::Config(_) => GgStatus::Config,
        Error::Io(_) => GgStatus::Io,
    }
}

enum Failure {
    Null(&'static str),
    Buffer(usize),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

fn guard<F>(f: F) -> GgStatus
where
    F: FnOnce() -> Result<(), Failure>,
{
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => GgStatus::Ok,
        Ok(Err(Failure::Null(what))) => {
            set_last_error(format!("null pointer: {what}"));
            GgStatus::NullPointer
        }
        Ok(Err(Failure::Buffer(needed))) => {
            set_last_error(format!("output buffer too small, need {needed} entries"));
            GgStatus::BufferTooSmall
        }
        Ok(Err(Failure::Core(e))) => {
            set_last_error(e.to_string());
            status_of(&e)
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(format!("panic: {msg}"));
            GgStatus::Panic
        }
    }
}

unsafe fn borrow<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or(Failure::Null(what))
}

unsafe fn borrow_mut<'a, T>(p: *mut T, what: &'static str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or(Failure::Null(what))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &'static str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|e| Failure::Core(Error::InvalidInput(format!("{what} is not UTF-8: {e}"))))
}

unsafe fn slice_arg<'a>(p: *const f64, len: usize, what: &'static str) -> Result<&'a [f64], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn write_slice(out: *mut f64, len: usize, values: &[f64], what: &'static str) -> Result<(), Failure> {
    if len < values.len() {
        return Err(Failure::Buffer(values.len()));
    }
    if values.is_empty() {
        return Ok(());
    }
    if out.is_null() {
        return Err(Failure::Null(what));
    }
    std::slice::from_raw_parts_mut(out, values.len()).copy_from_slice(values);
    Ok(())
}

fn coefficients(spec: &ProblemSpec, a: &[f64]) -> Result<CoeffVector, Failure> {
    let a = CoeffVector::new(a.to_vec());
    spec.check_coefficients(&a)?;
    Ok(a)
}

fn form(f: GgForm) -> DerivativeForm {
    match f {
        GgForm::Plain => DerivativeForm::Plain,
        GgForm::Compensated => DerivativeForm::Compensated,
    }
}

fn boxed<T>(value: T, out: *mut *mut T) {
    // SAFETY: callers checked `out` for null.
    unsafe { *out = Box::into_raw(Box::new(value)) };
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn gg_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Last error message on this thread, or NULL. Free with [`gg_string_free`].
#[no_mangle]
pub extern "C" fn gg_last_error() -> *mut c_char {
    LAST_ERROR.with(|e| match e.borrow().as_ref() {
        Some(c) => c.clone().into_raw(),
        None => ptr::null_mut(),
    })
}

/// # Safety
/// `s` must be NULL or a string returned by this library.
#[no_mangle]
pub unsafe extern "C" fn gg_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Builds a builtin problem (`brownian-exit`, `double-well`, `quadratic`).
///
/// # Safety
/// `name` must be a valid C string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn gg_problem_builtin(
    name: *const c_char,
    b: f64,
    horizon: f64,
    out: *mut *mut GgProblem,
) -> GgStatus {
    guard(|| {
        let name = str_arg(name, "name")?;
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        let spec = problems::builtin(name, BuiltinParams { b, horizon })?;
        boxed(GgProblem { spec }, out);
        Ok(())
    })
}

/// Builds a problem from JSON text.
///
/// # Safety
/// `json` must be a valid C string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn gg_problem_from_json(json: *const c_char, out: *mut *mut GgProblem) -> GgStatus {
    guard(|| {
        let text = str_arg(json, "json")?;
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        let config: ProblemConfig = serde_json::from_str(text).map_err(Error::from)?;
        let spec = config.build()?;
        boxed(GgProblem { spec }, out);
        Ok(())
    })
}

/// # Safety
/// `problem` must be NULL or a handle from this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn gg_problem_free(problem: *mut GgProblem) {
    if !problem.is_null() {
        drop(Box::from_raw(problem));
    }
}

/// Number of basis functions, or 0 for a NULL handle.
///
/// # Safety
/// `problem` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn gg_problem_basis_size(problem: *const GgProblem) -> usize {
    problem.as_ref().map_or(0, |p| p.spec.basis_size())
}

/// # Safety
/// `problem` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn gg_problem_set_lambda(problem: *mut GgProblem, lambda: f64) -> GgStatus {
    guard(|| {
        let p = borrow_mut(problem, "problem")?;
        p.spec = p.spec.with_lambda(lambda)?;
        Ok(())
    })
}

/// # Safety
/// `problem` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn gg_problem_set_dt(problem: *mut GgProblem, dt: f64) -> GgStatus {
    guard(|| {
        let p = borrow_mut(problem, "problem")?;
        p.spec = p.spec.with_dt(dt)?;
        Ok(())
    })
}

/// # Safety
/// `problem` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn gg_problem_set_t_max(problem: *mut GgProblem, t_max: f64) -> GgStatus {
    guard(|| {
        let p = borrow_mut(problem, "problem")?;
        p.spec = p.spec.with_t_max(t_max)?;
        Ok(())
    })
}

/// # Safety
/// `problem` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn gg_problem_set_bridge(problem: *mut GgProblem, bridge: bool) -> GgStatus {
    guard(|| {
        let p = borrow_mut(problem, "problem")?;
        p.spec = p.spec.with_bridge(bridge);
        Ok(())
    })
}

/// Simulates `n` trajectories under the control with coefficients `a`.
///
/// # Safety
/// `problem` must be a live handle, `a` must hold `a_len` doubles and `out`
/// must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn gg_simulate(
    problem: *const GgProblem,
    a: *const f64,
    a_len: usize,
    n: usize,
    seed: u64,
    out: *mut *mut GgRecords,
) -> GgStatus {
    guard(|| {
        let p = borrow(problem, "problem")?;
        let a = coefficients(&p.spec, slice_arg(a, a_len, "a")?)?;
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        let records = RecordSet::simulate(&p.spec, &a, n, seed)?;
        boxed(GgRecords { records }, out);
        Ok(())
    })
}

/// # Safety
/// `records` must be NULL or a handle from [`gg_simulate`], not yet freed.
#[no_mangle]
pub unsafe extern "C" fn gg_records_free(records: *mut GgRecords) {
    if !records.is_null() {
        drop(Box::from_raw(records));
    }
}

/// # Safety
/// `records` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn gg_records_phi(records: *const GgRecords, out: *mut GgEstimate) -> GgStatus {
    guard(|| {
        let r = borrow(records, "records")?;
        let out = borrow_mut(out, "out")?;
        let e = r.records.phi()?;
        *out = GgEstimate {
            mean: e.mean,
            std_error: e.std_error,
            n_samples: e.n_samples,
            censored_fraction: e.censored_fraction,
        };
        Ok(())
    })
}

/// Gradient estimate; both buffers need `K` entries.
///
/// # Safety
/// `records` must be a live handle; the buffers must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn gg_records_gradient(
    records: *const GgRecords,
    form: GgForm,
    values: *mut f64,
    std_errors: *mut f64,
    len: usize,
) -> GgStatus {
    guard(|| {
        let r = borrow(records, "records")?;
        let g = r.records.gradient(self::form(form))?;
        write_slice(values, len, g.values(), "values")?;
        write_slice(std_errors, len, g.std_errors(), "std_errors")
    })
}

/// Hessian estimate, row-major; both buffers need `K·K` entries.
///
/// # Safety
/// `records` must be a live handle; the buffers must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn gg_records_hessian(
    records: *const GgRecords,
    form: GgForm,
    values: *mut f64,
    std_errors: *mut f64,
    len: usize,
) -> GgStatus {
    guard(|| {
        let r = borrow(records, "records")?;
        let h = r.records.hessian(self::form(form))?;
        write_slice(values, len, h.values(), "values")?;
        write_slice(std_errors, len, h.std_errors(), "std_errors")
    })
}

/// Runs gradient descent or Newton from `a0` with default settings apart
/// from the arguments. The final iterate is written to `a_out`.
///
/// # Safety
/// `problem` must be a live handle; `a0` and `a_out` must hold `len`
/// doubles; `iterations` and `termination` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn gg_optimize(
    problem: *const GgProblem,
    method: GgMethod,
    a0: *const f64,
    len: usize,
    n: usize,
    seed: u64,
    max_iter: usize,
    grad_tol: f64,
    a_out: *mut f64,
    iterations: *mut usize,
    termination: *mut GgTermination,
) -> GgStatus {
    guard(|| {
        let p = borrow(problem, "problem")?;
        let a0 = coefficients(&p.spec, slice_arg(a0, len, "a0")?)?;
        let iterations = borrow_mut(iterations, "iterations")?;
        let termination = borrow_mut(termination, "termination")?;
        let mut settings = OptimizerSettings::new(n, seed);
        settings.max_iter = max_iter;
        settings.grad_tol = grad_tol;
        let trace = match method {
            GgMethod::Gd => optimize::gradient_descent(&p.spec, &a0, &settings)?,
            GgMethod::Newton => optimize::newton(&p.spec, &a0, &settings)?,
        };
        write_slice(a_out, len, &trace.final_iterate()[..], "a_out")?;
        *iterations = trace.iterates.len() - 1;
        *termination = match trace.termination {
            Termination::GradientTolerance => GgTermination::GradientTolerance,
            Termination::MaxIterations => GgTermination::MaxIterations,
            Termination::LineSearchFailure => GgTermination::LineSearchFailure,
            Termination::HessianIndefiniteFallback => GgTermination::HessianIndefiniteFallback,
        };
        Ok(())
    })
}

/// Closed-form exit probabilities of driftless Brownian motion from 0 on
/// `(-2, b)`.
///
/// # Safety
/// `p_left` and `p_right` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn gg_exit_law(b: f64, p_left: *mut f64, p_right: *mut f64) -> GgStatus {
    guard(|| {
        let left = borrow_mut(p_left, "p_left")?;
        let right = borrow_mut(p_right, "p_right")?;
        let law = verify::exit_law_oracle(b)?;
        *left = law.p_left;
        *right = law.p_right;
        Ok(())
    })
}

/// `q(b) = 2b(b² + 2b − 2)`.
#[no_mangle]
pub extern "C" fn gg_q_polynomial(b: f64) -> f64 {
    verify::q_polynomial(b)
}
