//! C interface to the scenario runner and a few numeric building blocks.
//!
//! Every fallible call returns a `PdecbfStatus`; on failure the message is
//! available from `pdecbf_last_error` until the next call on the same thread.
//! Handles are opaque and must be released with the matching `_free`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use pdecbf::scenario::{load_scenario, run_scenario, write_outputs, Outcome, RunOptions, Scenario};
use pdecbf::series::theta_gap;
use pdecbf::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PdecbfStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Domain = 4,
    Numerical = 5,
    Io = 6,
    Panic = 7,
}

/// Columns of the trajectory log.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PdecbfColumn {
    Time = 0,
    /// First ODE state.
    Y1 = 1,
    U0 = 2,
    U1 = 3,
    Input = 4,
    Barrier = 5,
    LambdaHat = 6,
    BHat = 7,
}

/// Parsed scenario.
pub struct PdecbfScenario(Scenario);

/// Completed run: trajectory plus report.
pub struct PdecbfRun(Outcome);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> PdecbfStatus {
    match e {
        Error::Config(_) => PdecbfStatus::Config,
        Error::Io(_) => PdecbfStatus::Io,
        Error::NonFinite { .. }
        | Error::DivideByZero(_)
        | Error::Convergence { .. }
        | Error::Denominator(_)
        | Error::Window { .. }
        | Error::Inconsistency(_)
        | Error::Singular(_) => PdecbfStatus::Numerical,
        _ => PdecbfStatus::Domain,
    }
}

struct Fail(PdecbfStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> PdecbfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            PdecbfStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("panic inside pdecbf".into());
            PdecbfStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(PdecbfStatus::NullPointer, format!("{what} is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| Fail(PdecbfStatus::InvalidArgument, format!("{what} is not valid UTF-8")))
}

/// Message of the last failed call on this thread, or NULL. Owned by the
/// library; valid until the next call.
#[no_mangle]
pub extern "C" fn pdecbf_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn pdecbf_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a TOML or JSON scenario file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pdecbf_scenario_load(path: *const c_char, out: *mut *mut PdecbfScenario) -> PdecbfStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let path = str_arg(path, "path")?;
        let sc = load_scenario(Path::new(path))?;
        *out = Box::into_raw(Box::new(PdecbfScenario(sc)));
        Ok(())
    })
}

/// Parses a scenario from TOML text.
///
/// # Safety
/// `text` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pdecbf_scenario_parse(text: *const c_char, out: *mut *mut PdecbfScenario) -> PdecbfStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let sc = Scenario::from_toml_str(str_arg(text, "text")?)?;
        *out = Box::into_raw(Box::new(PdecbfScenario(sc)));
        Ok(())
    })
}

/// Checks the scenario without stepping.
///
/// # Safety
/// `sc` must come from `pdecbf_scenario_load` or `pdecbf_scenario_parse`.
#[no_mangle]
pub unsafe extern "C" fn pdecbf_scenario_validate(sc: *const PdecbfScenario) -> PdecbfStatus {
    guard(|| {
        let sc = sc.as_ref().ok_or_else(|| null("scenario"))?;
        sc.0.prepare()?;
        Ok(())
    })
}

/// # Safety
/// `sc` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn pdecbf_scenario_free(sc: *mut PdecbfScenario) {
    if !sc.is_null() {
        drop(Box::from_raw(sc));
    }
}

/// Runs a scenario. `stride` 0 keeps the scenario's own snapshot stride.
///
/// # Safety
/// `sc` must be a live scenario handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pdecbf_run(sc: *const PdecbfScenario, stride: usize, strict: bool, out: *mut *mut PdecbfRun) -> PdecbfStatus {
    guard(|| {
        let sc = sc.as_ref().ok_or_else(|| null("scenario"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let opts = RunOptions { stride: (stride > 0).then_some(stride), strict, skip_residuals: false };
        let outcome = run_scenario(&sc.0, &opts)?;
        *out = Box::into_raw(Box::new(PdecbfRun(outcome)));
        Ok(())
    })
}

/// # Safety
/// `run` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn pdecbf_run_free(run: *mut PdecbfRun) {
    if !run.is_null() {
        drop(Box::from_raw(run));
    }
}

/// Whether every enabled check passed (warnings count under `strict`).
///
/// # Safety
/// `run` must be a live run handle and `passed` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pdecbf_run_passed(run: *const PdecbfRun, passed: *mut bool) -> PdecbfStatus {
    guard(|| {
        let run = run.as_ref().ok_or_else(|| null("run"))?;
        let passed = passed.as_mut().ok_or_else(|| null("passed"))?;
        *passed = run.0.report.pass;
        Ok(())
    })
}

/// Number of logged rows.
///
/// # Safety
/// `run` must be a live run handle and `len` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pdecbf_run_len(run: *const PdecbfRun, len: *mut usize) -> PdecbfStatus {
    guard(|| {
        let run = run.as_ref().ok_or_else(|| null("run"))?;
        let len = len.as_mut().ok_or_else(|| null("len"))?;
        *len = run.0.log.len();
        Ok(())
    })
}

/// Copies one logged column into `buf`, which must hold `cap` values;
/// `cap` smaller than the log length is an error.
///
/// # Safety
/// `run` must be a live run handle and `buf` valid for `cap` writes.
#[no_mangle]
pub unsafe extern "C" fn pdecbf_run_column(run: *const PdecbfRun, column: PdecbfColumn, buf: *mut f64, cap: usize) -> PdecbfStatus {
    guard(|| {
        let run = run.as_ref().ok_or_else(|| null("run"))?;
        if buf.is_null() {
            return Err(null("buf"));
        }
        let log = &run.0.log;
        if cap < log.len() {
            return Err(Fail(PdecbfStatus::InvalidArgument, format!("buffer holds {cap}, log has {}", log.len())));
        }
        let src: Vec<f64> = match column {
            PdecbfColumn::Time => log.times.clone(),
            PdecbfColumn::Y1 => log.y.iter().map(|y| y[0]).collect(),
            PdecbfColumn::U0 => log.u0.clone(),
            PdecbfColumn::U1 => log.u1.clone(),
            PdecbfColumn::Input => log.u_cmd.clone(),
            PdecbfColumn::Barrier => log.h.clone(),
            PdecbfColumn::LambdaHat => log.lambda_hat.clone(),
            PdecbfColumn::BHat => log.b_hat.clone(),
        };
        std::slice::from_raw_parts_mut(buf, src.len()).copy_from_slice(&src);
        Ok(())
    })
}

/// JSON report as a newly allocated string; release with `pdecbf_string_free`.
///
/// # Safety
/// `run` must be a live run handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pdecbf_run_report_json(run: *const PdecbfRun, out: *mut *mut c_char) -> PdecbfStatus {
    guard(|| {
        let run = run.as_ref().ok_or_else(|| null("run"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let json = serde_json::to_string(&run.0.report).map_err(|e| Fail(PdecbfStatus::Io, e.to_string()))?;
        *out = CString::new(json).map_err(|e| Fail(PdecbfStatus::Io, e.to_string()))?.into_raw();
        Ok(())
    })
}

/// Writes trajectory.csv, field.csv and report.json into `dir`.
///
/// # Safety
/// `run` must be a live run handle and `dir` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn pdecbf_run_write(run: *const PdecbfRun, dir: *const c_char) -> PdecbfStatus {
    guard(|| {
        let run = run.as_ref().ok_or_else(|| null("run"))?;
        write_outputs(&run.0, Path::new(str_arg(dir, "dir")?))?;
        Ok(())
    })
}

/// # Safety
/// `s` must be NULL or a string returned by this library.
#[no_mangle]
pub unsafe extern "C" fn pdecbf_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Gap pi/4 - sum_j (-1)^j e^{-(2j+1)^2 x}/(2j+1) with `terms` terms, and a
/// bound on the truncation error.
///
/// # Safety
/// `value` and `tail` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn pdecbf_theta_gap(x: f64, terms: usize, value: *mut f64, tail: *mut f64) -> PdecbfStatus {
    guard(|| {
        let value = value.as_mut().ok_or_else(|| null("value"))?;
        let tail = tail.as_mut().ok_or_else(|| null("tail"))?;
        let g = theta_gap(x, terms)?;
        *value = g.value;
        *tail = g.tail;
        Ok(())
    })
}
