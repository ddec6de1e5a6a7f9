//! C ABI for the srusk engine: opaque model handles, status codes matching
//! the CLI exit-code map, and JSON/CSV string outputs.
//!
//! Every string returned through an out-parameter is heap-allocated by this
//! library and must be released with [`srusk_string_free`]. Error details for
//! the most recent failing call on the current thread are available through
//! [`srusk_last_error`]. All entry points catch panics and report
//! `SRUSK_STATUS_PANIC` instead of unwinding across the boundary.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::ffi::{CStr, CString};
use std::os::raw::c_char;
use std::panic::{catch_unwind, AssertUnwindSafe};

use srusk_core::cli::build_analyze_report;
use srusk_core::constraints::{run_algorithm, AlgoOptions, ChainError, ChainStatus};
use srusk_core::dynamics::{solve_z, SolveMode};
use srusk_core::expr::ZeroCfg;
use srusk_core::integrator::{
    integrate, lift_initial_condition, IntegrateError, IntegrateOptions,
};
use srusk_core::legendre::Classification;
use srusk_core::model::{parse_system, SystemSpec};
use srusk_core::verification::{run_suite, SuiteOptions};

/// Status codes returned by every fallible entry point. The numeric values
/// 0/2/3/4/5 mirror the srusk CLI exit codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SruskStatus {
    Ok = 0,
    ModelError = 2,
    NonStabilizing = 3,
    BadInitialCondition = 4,
    VerifyFailed = 5,
    NullArgument = 10,
    InvalidUtf8 = 11,
    Panic = 12,
}

/// Opaque handle to a parsed model.
pub struct SruskModel {
    spec: SystemSpec,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").unwrap());
}

fn set_error(message: impl Into<String>) {
    let message = message.into().replace('\0', " ");
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(message).unwrap_or_default();
    });
}

fn out_string(out: *mut *mut c_char, s: String) -> SruskStatus {
    match CString::new(s.replace('\0', " ")) {
        Ok(c) => {
            unsafe { *out = c.into_raw() };
            SruskStatus::Ok
        }
        Err(_) => {
            set_error("output contained an interior NUL");
            SruskStatus::ModelError
        }
    }
}

fn guard<F: FnOnce() -> SruskStatus>(f: F) -> SruskStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => status,
        Err(_) => {
            set_error("internal panic");
            SruskStatus::Panic
        }
    }
}

/// Library version string (static storage, do not free).
#[no_mangle]
pub extern "C" fn srusk_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Message for the most recent error on this thread (thread-local storage,
/// valid until the next failing call on the same thread; do not free).
#[no_mangle]
pub extern "C" fn srusk_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Release a string allocated by this library.
///
/// # Safety
/// `s` must be a pointer previously returned through an out-parameter of this
/// library and not yet freed.
#[no_mangle]
pub unsafe extern "C" fn srusk_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Parse a `.lag` model definition into an opaque handle.
///
/// # Safety
/// `source` must be a valid NUL-terminated string; `out_model` must be a
/// valid writable pointer.
#[no_mangle]
pub unsafe extern "C" fn srusk_model_parse(
    source: *const c_char,
    out_model: *mut *mut SruskModel,
) -> SruskStatus {
    guard(|| {
        if source.is_null() || out_model.is_null() {
            set_error("null argument");
            return SruskStatus::NullArgument;
        }
        let text = match unsafe { CStr::from_ptr(source) }.to_str() {
            Ok(t) => t,
            Err(_) => {
                set_error("source is not valid UTF-8");
                return SruskStatus::InvalidUtf8;
            }
        };
        match parse_system(text) {
            Ok(spec) => {
                let handle = Box::new(SruskModel { spec });
                unsafe { *out_model = Box::into_raw(handle) };
                SruskStatus::Ok
            }
            Err(e) => {
                set_error(e.to_string());
                SruskStatus::ModelError
            }
        }
    })
}

/// Release a model handle.
///
/// # Safety
/// `model` must come from [`srusk_model_parse`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn srusk_model_free(model: *mut SruskModel) {
    if !model.is_null() {
        drop(unsafe { Box::from_raw(model) });
    }
}

/// Fibre dimension n of the model, or -1 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle from [`srusk_model_parse`].
#[no_mangle]
pub unsafe extern "C" fn srusk_model_dim(model: *const SruskModel) -> i32 {
    if model.is_null() {
        return -1;
    }
    unsafe { &*model }.spec.n as i32
}

/// Run the constraint algorithm and vector-field solve; writes the analysis
/// report as a JSON string.
///
/// # Safety
/// `model` must be a live handle and `out_json` a valid writable pointer.
#[no_mangle]
pub unsafe extern "C" fn srusk_model_analyze_json(
    model: *const SruskModel,
    seed: u64,
    out_json: *mut *mut c_char,
) -> SruskStatus {
    guard(|| {
        if model.is_null() || out_json.is_null() {
            set_error("null argument");
            return SruskStatus::NullArgument;
        }
        let spec = &unsafe { &*model }.spec;
        match build_analyze_report(spec, seed, 20) {
            Ok((report, status)) => {
                let code = match status {
                    ChainStatus::MaxIterationsExceeded => SruskStatus::NonStabilizing,
                    _ => SruskStatus::Ok,
                };
                let rendered = serde_json::to_string_pretty(&report).unwrap();
                match out_string(out_json, rendered) {
                    SruskStatus::Ok => code,
                    other => other,
                }
            }
            Err(ChainError::VariableRank(msg)) => {
                set_error(format!("variable-rank Hessian: {msg}"));
                SruskStatus::ModelError
            }
            Err(e) => {
                set_error(e.to_string());
                SruskStatus::ModelError
            }
        }
    })
}

/// Integrate the flow from an initial condition `(t0, q.., qd..)` of length
/// 2n+1 and write the trajectory as a CSV string. `bindings_json` may be
/// null or a JSON object binding free parameters, e.g. `{"u1": 0.0}`;
/// unbound free parameters default to 0.
///
/// # Safety
/// `model` must be a live handle, `ic` must point to `ic_len` doubles,
/// `bindings_json` must be null or NUL-terminated, and `out_csv` must be a
/// valid writable pointer.
#[no_mangle]
pub unsafe extern "C" fn srusk_model_simulate_csv(
    model: *const SruskModel,
    ic: *const f64,
    ic_len: usize,
    h: f64,
    horizon: f64,
    bindings_json: *const c_char,
    out_csv: *mut *mut c_char,
) -> SruskStatus {
    guard(|| {
        if model.is_null() || ic.is_null() || out_csv.is_null() {
            set_error("null argument");
            return SruskStatus::NullArgument;
        }
        let spec = &unsafe { &*model }.spec;
        let n = spec.n as usize;
        if ic_len != 2 * n + 1 {
            set_error(format!("initial condition needs {} values, got {ic_len}", 2 * n + 1));
            return SruskStatus::BadInitialCondition;
        }
        let ic = unsafe { std::slice::from_raw_parts(ic, ic_len) };
        let mut bindings: BTreeMap<String, f64> = BTreeMap::new();
        if !bindings_json.is_null() {
            let text = match unsafe { CStr::from_ptr(bindings_json) }.to_str() {
                Ok(t) => t,
                Err(_) => {
                    set_error("bindings are not valid UTF-8");
                    return SruskStatus::InvalidUtf8;
                }
            };
            match serde_json::from_str::<BTreeMap<String, f64>>(text) {
                Ok(map) => bindings = map,
                Err(e) => {
                    set_error(format!("bindings must be a JSON object of numbers: {e}"));
                    return SruskStatus::BadInitialCondition;
                }
            }
        }

        let algo = AlgoOptions::default();
        let chain = match run_algorithm(spec, &algo) {
            Ok(c) => c,
            Err(e) => {
                set_error(e.to_string());
                return SruskStatus::ModelError;
            }
        };
        match chain.status {
            ChainStatus::Stabilized(_) => {}
            ChainStatus::MaxIterationsExceeded => {
                set_error("constraint chain did not stabilize");
                return SruskStatus::NonStabilizing;
            }
            ChainStatus::EmptyFinal => {
                set_error("empty final constraint set; no dynamics");
                return SruskStatus::ModelError;
            }
        }
        let mode = if chain.regularity.classification == Classification::Regular {
            SolveMode::GraphRefined
        } else {
            SolveMode::Raw
        };
        let z = match solve_z(spec, &chain, mode, &ZeroCfg::default()) {
            Ok(z) => z,
            Err(e) => {
                set_error(e.to_string());
                return SruskStatus::ModelError;
            }
        };
        let mut params = spec.default_params();
        params.extend(bindings.iter().map(|(k, v)| (k.clone(), *v)));
        let x0 = match lift_initial_condition(spec, &chain, ic[0], &ic[1..=n], &ic[n + 1..], &params)
        {
            Ok(x) => x,
            Err(e @ IntegrateError::InconsistentIc(_)) => {
                set_error(e.to_string());
                return SruskStatus::BadInitialCondition;
            }
            Err(e) => {
                set_error(e.to_string());
                return SruskStatus::ModelError;
            }
        };
        let mut opts = IntegrateOptions::new(h, horizon);
        opts.bindings = bindings;
        for p in &z.free_params {
            opts.bindings.entry(p.clone()).or_insert(0.0);
        }
        match integrate(spec, &z, &x0, &opts) {
            Ok(traj) => out_string(out_csv, traj.to_csv()),
            Err(e @ IntegrateError::InconsistentIc(_)) => {
                set_error(e.to_string());
                SruskStatus::BadInitialCondition
            }
            Err(e) => {
                set_error(e.to_string());
                SruskStatus::ModelError
            }
        }
    })
}

/// Run the verification suite and write the report as a JSON string. Returns
/// `Ok` when every check passed, `VerifyFailed` otherwise (the report is
/// written in both cases).
///
/// # Safety
/// `model` must be a live handle and `out_json` a valid writable pointer.
#[no_mangle]
pub unsafe extern "C" fn srusk_model_verify_json(
    model: *const SruskModel,
    seed: u64,
    points: usize,
    out_json: *mut *mut c_char,
) -> SruskStatus {
    guard(|| {
        if model.is_null() || out_json.is_null() {
            set_error("null argument");
            return SruskStatus::NullArgument;
        }
        let spec = &unsafe { &*model }.spec;
        let opts = SuiteOptions { seed, points: points.max(1), ..Default::default() };
        let report = run_suite(spec, &opts);
        let all_passed = report.all_passed;
        let rendered = serde_json::to_string_pretty(&report).unwrap();
        match out_string(out_json, rendered) {
            SruskStatus::Ok => {
                if all_passed {
                    SruskStatus::Ok
                } else {
                    set_error("verification checks failed");
                    SruskStatus::VerifyFailed
                }
            }
            other => other,
        }
    })
}
