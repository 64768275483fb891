//! C ABI for the lqmkv solver.
//!
//! Handles are opaque and owned by the caller, who frees them with the
//! matching `_free` function. Every fallible call returns a status code
//! (the CLI exit codes plus [`LQMKV_ERR_NULL`] and [`LQMKV_ERR_PANIC`]);
//! [`lqmkv_last_error`] gives the message of the last failure on the
//! calling thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

use lqmkv::error::LqError;
use lqmkv::feedback::{solve, Solution, SolveOptions};
use lqmkv::mckv_sim::{martingale_diagnostic, SimConfig, DEFAULT_EPS};
use lqmkv::model::{parse_problem, ProblemSpec};
use lqmkv::resource_case::{closed_form_constants, PriceModel, ResourceParams};

pub const LQMKV_OK: i32 = 0;
pub const LQMKV_ERR_PARSE: i32 = 1;
pub const LQMKV_ERR_INVALID: i32 = 2;
pub const LQMKV_ERR_SOLVER: i32 = 3;
pub const LQMKV_ERR_VERDICT: i32 = 4;
pub const LQMKV_ERR_NULL: i32 = 5;
pub const LQMKV_ERR_PANIC: i32 = 6;

/// Parsed problem.
pub struct LqmkvProblem {
    spec: ProblemSpec,
    hash: String,
}

/// Solved problem: backward system, feedback law and value.
pub struct LqmkvSolution {
    sol: Solution,
    hash: String,
}

#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct LqmkvResourceParams {
    pub x0: f64,
    pub sigma: f64,
    pub delta: f64,
    pub epsilon: f64,
    pub eta: f64,
    pub c: f64,
    pub rho: f64,
    pub kappa: f64,
    pub pbar: f64,
    pub price_vol: f64,
    pub p0: f64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct LqmkvResourceConstants {
    pub k_eta: f64,
    pub lambda_eps: f64,
    pub k: f64,
    pub lambda: f64,
    pub y_const: f64,
    pub y_price: f64,
    pub xbar_infty: f64,
    pub lambda_eta: f64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct LqmkvVerifyResult {
    pub pass: i32,
    pub value: f64,
    pub j_mc: f64,
    pub j_se: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn fail(e: LqError) -> i32 {
    set_error(&e.to_string());
    e.exit_code()
}

/// Runs `f`, converting errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), i32>) -> i32 {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => LQMKV_OK,
        Ok(Err(code)) => code,
        Err(_) => {
            set_error("internal panic");
            LQMKV_ERR_PANIC
        }
    }
}

fn null(what: &str) -> i32 {
    set_error(&format!("null pointer: {what}"));
    LQMKV_ERR_NULL
}

/// Message of the last failed call on this thread; valid until the next
/// call on the same thread. Empty if no call has failed.
#[no_mangle]
pub extern "C" fn lqmkv_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Parses a problem document (UTF-8 JSON).
///
/// # Safety
/// `json` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn lqmkv_problem_from_json(json: *const c_char, out: *mut *mut LqmkvProblem) -> i32 {
    guard(|| {
        if json.is_null() || out.is_null() {
            return Err(null("json or out"));
        }
        let text = CStr::from_ptr(json)
            .to_str()
            .map_err(|_| fail(LqError::Io("input is not UTF-8".into())))?;
        let spec = parse_problem(text, "<json>").map_err(fail)?;
        let hash = lqmkv::io::sha256_hex(text.as_bytes());
        *out = Box::into_raw(Box::new(LqmkvProblem { spec, hash }));
        Ok(())
    })
}

/// # Safety
/// `p` must come from [`lqmkv_problem_from_json`] or be null.
#[no_mangle]
pub unsafe extern "C" fn lqmkv_problem_free(p: *mut LqmkvProblem) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

/// State and control dimensions.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn lqmkv_problem_dims(p: *const LqmkvProblem, d: *mut usize, m: *mut usize) -> i32 {
    guard(|| {
        let p = p.as_ref().ok_or_else(|| null("problem"))?;
        if d.is_null() || m.is_null() {
            return Err(null("d or m"));
        }
        *d = p.spec.d;
        *m = p.spec.m;
        Ok(())
    })
}

/// Solves the problem. `allow_unverified` != 0 proceeds past failed
/// existence checks.
///
/// # Safety
/// `p` must be a live problem handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn lqmkv_solve(
    p: *const LqmkvProblem,
    grid_steps: usize,
    allow_unverified: i32,
    out: *mut *mut LqmkvSolution,
) -> i32 {
    guard(|| {
        let p = p.as_ref().ok_or_else(|| null("problem"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let opts = SolveOptions {
            grid_steps,
            allow_unverified: allow_unverified != 0,
            ..Default::default()
        };
        let sol = solve(&p.spec, &opts).map_err(fail)?;
        *out = Box::into_raw(Box::new(LqmkvSolution {
            sol,
            hash: p.hash.clone(),
        }));
        Ok(())
    })
}

/// # Safety
/// `s` must come from [`lqmkv_solve`] or be null.
#[no_mangle]
pub unsafe extern "C" fn lqmkv_solution_free(s: *mut LqmkvSolution) {
    if !s.is_null() {
        drop(Box::from_raw(s));
    }
}

/// Optimal value V₀.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn lqmkv_solution_value(s: *const LqmkvSolution, out: *mut f64) -> i32 {
    guard(|| {
        let s = s.as_ref().ok_or_else(|| null("solution"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = s.sol.value;
        Ok(())
    })
}

unsafe fn copy_row_major(m: &lqmkv::linalg::Mat, dst: *mut f64, len: usize) -> Result<(), i32> {
    if dst.is_null() {
        return Err(null("buffer"));
    }
    if len < m.len() {
        return Err(fail(LqError::DimensionMismatch(format!(
            "buffer holds {len} values, {} needed",
            m.len()
        ))));
    }
    let out = std::slice::from_raw_parts_mut(dst, m.len());
    for (o, v) in out.iter_mut().zip(m.transpose().iter()) {
        *o = *v;
    }
    Ok(())
}

/// K(t) and Λ(t), each d×d row-major into buffers of at least `len`.
///
/// # Safety
/// `k` and `lambda` must point to `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn lqmkv_solution_riccati(
    s: *const LqmkvSolution,
    t: f64,
    k: *mut f64,
    lambda: *mut f64,
    len: usize,
) -> i32 {
    guard(|| {
        let s = s.as_ref().ok_or_else(|| null("solution"))?;
        let node = s.sol.w.at(t).map_err(fail)?;
        copy_row_major(&node.k, k, len)?;
        copy_row_major(&node.lambda, lambda, len)
    })
}

/// Feedback gains at t, each m×d row-major: α = gain·(x − x̄) +
/// gain_bar·x̄ + offset.
///
/// # Safety
/// `gain` and `gain_bar` must point to `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn lqmkv_solution_gains(
    s: *const LqmkvSolution,
    t: f64,
    gain: *mut f64,
    gain_bar: *mut f64,
    len: usize,
) -> i32 {
    guard(|| {
        let s = s.as_ref().ok_or_else(|| null("solution"))?;
        let node = s.sol.law.at(t).map_err(fail)?;
        copy_row_major(&node.gain, gain, len)?;
        copy_row_major(&node.gain_bar, gain_bar, len)
    })
}

/// Law bundle as JSON; free the string with [`lqmkv_string_free`].
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn lqmkv_solution_bundle_json(s: *const LqmkvSolution, out: *mut *mut c_char) -> i32 {
    guard(|| {
        let s = s.as_ref().ok_or_else(|| null("solution"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let text = lqmkv::io::to_json(&s.sol.bundle(&s.hash)).map_err(fail)?;
        *out = CString::new(text).map_err(|_| fail(LqError::Io("NUL in output".into())))?.into_raw();
        Ok(())
    })
}

/// # Safety
/// `s` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn lqmkv_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Martingale diagnostic. `worlds` = 0 uses one world; `perturb` != 0
/// runs the perturbation catalogue. Returns [`LQMKV_ERR_VERDICT`] with
/// `out` filled when a verdict fails.
///
/// # Safety
/// All pointers must be valid handles or writable structs.
#[no_mangle]
pub unsafe extern "C" fn lqmkv_verify(
    p: *const LqmkvProblem,
    s: *const LqmkvSolution,
    particles: usize,
    worlds: usize,
    dt: f64,
    seed: u64,
    perturb: i32,
    out: *mut LqmkvVerifyResult,
) -> i32 {
    guard(|| {
        let p = p.as_ref().ok_or_else(|| null("problem"))?;
        let s = s.as_ref().ok_or_else(|| null("solution"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        if p.hash != s.hash {
            return Err(fail(LqError::Invalid("solution belongs to another problem".into())));
        }
        let cfg = SimConfig {
            particles,
            worlds: worlds.max(1),
            dt,
            seed,
            ..Default::default()
        };
        let eps: &[f64] = if perturb != 0 { &DEFAULT_EPS } else { &[] };
        let bundle = s.sol.bundle(&s.hash);
        let r = martingale_diagnostic(&s.sol.prob, Some(&bundle), &cfg, eps).map_err(fail)?;
        *out = LqmkvVerifyResult {
            pass: r.pass as i32,
            value: r.value,
            j_mc: r.j_mc,
            j_se: r.j_se,
        };
        if r.pass {
            Ok(())
        } else {
            set_error("diagnostic verdict failed");
            Err(LQMKV_ERR_VERDICT)
        }
    })
}

/// Default resource parameters.
#[no_mangle]
pub extern "C" fn lqmkv_resource_default_params() -> LqmkvResourceParams {
    let p = ResourceParams::default();
    LqmkvResourceParams {
        x0: p.x0,
        sigma: p.sigma,
        delta: p.delta,
        epsilon: p.epsilon,
        eta: p.eta,
        c: p.c,
        rho: p.rho,
        kappa: p.price.kappa,
        pbar: p.price.pbar,
        price_vol: p.price.vol,
        p0: p.price.p0,
    }
}

/// Closed-form constants of the resource model.
///
/// # Safety
/// Both pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn lqmkv_resource_constants(
    params: *const LqmkvResourceParams,
    out: *mut LqmkvResourceConstants,
) -> i32 {
    guard(|| {
        let a = params.as_ref().ok_or_else(|| null("params"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let p = ResourceParams {
            x0: a.x0,
            sigma: a.sigma,
            delta: a.delta,
            epsilon: a.epsilon,
            eta: a.eta,
            c: a.c,
            rho: a.rho,
            price: PriceModel {
                kappa: a.kappa,
                pbar: a.pbar,
                vol: a.price_vol,
                p0: a.p0,
            },
        };
        let s = closed_form_constants(&p).map_err(fail)?;
        *out = LqmkvResourceConstants {
            k_eta: s.k_eta,
            lambda_eps: s.lambda_eps,
            k: s.k,
            lambda: s.lambda,
            y_const: s.y_const,
            y_price: s.y_price,
            xbar_infty: s.xbar_infty,
            lambda_eta: s.lambda_eta,
        };
        Ok(())
    })
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn lqmkv_version() -> *const c_char {
    static V: &str = concat!(env!("CARGO_PKG_VERSION"), "\0");
    V.as_ptr().cast()
}
