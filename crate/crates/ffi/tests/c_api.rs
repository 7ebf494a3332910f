use std::ffi::{CStr, CString};
use std::ptr;

use girsanov_grad_ffi::*;

fn last_error() -> String {
    let p = gg_last_error();
    assert!(!p.is_null());
    let s = unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned();
    unsafe { gg_string_free(p) };
    s
}

fn builtin(name: &str, b: f64) -> *mut GgProblem {
    let name = CString::new(name).unwrap();
    let mut p = ptr::null_mut();
    let status = unsafe { gg_problem_builtin(name.as_ptr(), b, 1.0, &mut p) };
    assert_eq!(status, GgStatus::Ok);
    assert!(!p.is_null());
    p
}

#[test]
fn exit_law_matches_closed_form() {
    let (mut l, mut r) = (0.0, 0.0);
    assert_eq!(unsafe { gg_exit_law(1.0, &mut l, &mut r) }, GgStatus::Ok);
    assert!((l - 1.0 / 3.0).abs() < 1e-15);
    assert!((r - 2.0 / 3.0).abs() < 1e-15);
    assert_eq!(gg_q_polynomial(1.0), 2.0);

    assert_eq!(unsafe { gg_exit_law(-1.0, &mut l, &mut r) }, GgStatus::InvalidInput);
    assert!(last_error().contains("b must be positive"));
}

#[test]
fn simulate_and_estimate_quadratic() {
    let p = builtin("quadratic", 0.0);
    let k = unsafe { gg_problem_basis_size(p) };
    assert_eq!(k, 1);
    assert_eq!(unsafe { gg_problem_set_dt(p, 1e-2) }, GgStatus::Ok);

    // objective ½λa²T = 0.125 is deterministic; gradient λaT = 0.5
    let a = [0.5];
    let mut records = ptr::null_mut();
    let status = unsafe { gg_simulate(p, a.as_ptr(), 1, 4000, 11, &mut records) };
    assert_eq!(status, GgStatus::Ok);

    let mut phi = GgEstimate::default();
    assert_eq!(unsafe { gg_records_phi(records, &mut phi) }, GgStatus::Ok);
    assert_eq!(phi.n_samples, 4000);
    assert!((phi.mean - 0.125).abs() < 1e-9, "{}", phi.mean);

    let mut g = [f64::NAN];
    let mut se = [f64::NAN];
    let status =
        unsafe { gg_records_gradient(records, GgForm::Compensated, g.as_mut_ptr(), se.as_mut_ptr(), 1) };
    assert_eq!(status, GgStatus::Ok);
    assert!((g[0] - 0.5).abs() < 5.0 * se[0], "{} ± {}", g[0], se[0]);

    let mut h = [f64::NAN];
    let mut hse = [f64::NAN];
    let status =
        unsafe { gg_records_hessian(records, GgForm::Compensated, h.as_mut_ptr(), hse.as_mut_ptr(), 1) };
    assert_eq!(status, GgStatus::Ok);
    assert!(h[0] > 0.0);

    unsafe {
        gg_records_free(records);
        gg_problem_free(p);
    }
}

#[test]
fn same_seed_same_records() {
    let p = builtin("brownian-exit", 1.0);
    let a = [0.5];
    let mut means = Vec::new();
    for _ in 0..2 {
        let mut r = ptr::null_mut();
        assert_eq!(unsafe { gg_simulate(p, a.as_ptr(), 1, 500, 3, &mut r) }, GgStatus::Ok);
        let mut e = GgEstimate::default();
        assert_eq!(unsafe { gg_records_phi(r, &mut e) }, GgStatus::Ok);
        means.push(e.mean);
        unsafe { gg_records_free(r) };
    }
    assert_eq!(means[0].to_bits(), means[1].to_bits());
    unsafe { gg_problem_free(p) };
}

#[test]
fn error_codes() {
    let mut p = ptr::null_mut();
    let bad = CString::new("no-such-problem").unwrap();
    assert_eq!(unsafe { gg_problem_builtin(bad.as_ptr(), 1.0, 1.0, &mut p) }, GgStatus::Config);
    assert!(p.is_null());
    assert!(last_error().contains("unknown builtin"));

    assert_eq!(unsafe { gg_problem_builtin(ptr::null(), 1.0, 1.0, &mut p) }, GgStatus::NullPointer);

    let json = CString::new("{ not json").unwrap();
    assert_eq!(unsafe { gg_problem_from_json(json.as_ptr(), &mut p) }, GgStatus::Config);

    let p = builtin("brownian-exit", 1.0);
    assert_eq!(unsafe { gg_problem_set_lambda(p, -1.0) }, GgStatus::InvalidInput);

    // wrong coefficient length
    let a = [0.0, 0.0];
    let mut r = ptr::null_mut();
    assert_eq!(unsafe { gg_simulate(p, a.as_ptr(), 2, 10, 0, &mut r) }, GgStatus::InvalidInput);
    assert!(r.is_null());

    let a = [0.0];
    assert_eq!(unsafe { gg_simulate(p, a.as_ptr(), 1, 100, 0, &mut r) }, GgStatus::Ok);
    let mut h: [f64; 0] = [];
    let status = unsafe { gg_records_hessian(r, GgForm::Plain, h.as_mut_ptr(), h.as_mut_ptr(), 0) };
    assert_eq!(status, GgStatus::BufferTooSmall);

    assert_eq!(unsafe { gg_records_phi(ptr::null(), &mut GgEstimate::default()) }, GgStatus::NullPointer);
    assert_eq!(unsafe { gg_problem_basis_size(ptr::null()) }, 0);

    unsafe {
        gg_records_free(r);
        gg_problem_free(p);
        gg_problem_free(ptr::null_mut());
        gg_string_free(ptr::null_mut());
    }
}

#[test]
fn newton_on_quadratic() {
    let p = builtin("quadratic", 0.0);
    assert_eq!(unsafe { gg_problem_set_dt(p, 1e-2) }, GgStatus::Ok);
    let a0 = [1.0];
    let mut a = [f64::NAN];
    let mut iterations = 0usize;
    let mut termination = GgTermination::MaxIterations;
    let status = unsafe {
        gg_optimize(
            p,
            GgMethod::Newton,
            a0.as_ptr(),
            1,
            4000,
            5,
            10,
            1e-6,
            a.as_mut_ptr(),
            &mut iterations,
            &mut termination,
        )
    };
    assert_eq!(status, GgStatus::Ok);
    assert!(iterations >= 1);
    assert!(a[0].abs() < 0.1, "final iterate {}", a[0]);
    unsafe { gg_problem_free(p) };
}

#[test]
fn version_and_header() {
    let v = unsafe { CStr::from_ptr(gg_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));

    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/girsanov_grad.h"))
        .expect("header generated by build.rs");
    for symbol in [
        "gg_problem_builtin",
        "gg_problem_from_json",
        "gg_simulate",
        "gg_records_gradient",
        "gg_records_hessian",
        "gg_optimize",
        "gg_last_error",
        "gg_string_free",
        "typedef struct GgProblem GgProblem",
        "GG_STATUS_OK",
    ] {
        assert!(header.contains(symbol), "header lacks {symbol}");
    }
}
