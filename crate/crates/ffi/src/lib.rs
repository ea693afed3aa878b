//! C ABI over `ordfix`.
//!
//! Objects cross the boundary as opaque handles that the caller frees with
//! the matching `*_free` function. Every fallible call returns an
//! [`OrdfixStatus`]; on failure [`ordfix_last_error`] describes it.
//! Strings returned by the library are freed with [`ordfix_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::ptr;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use ordfix::scenario::{Overrides, Scenario, Selection};
use ordfix::space::{AffineMap, DistanceKind, ValidationConfig};
use ordfix::{Convergence, Engine, EngineConfig, MetricSpaceSpec, Operator, OperatorKind, Ordinal};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OrdfixStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Parse = 3,
    Io = 4,
    Invalid = 5,
    /// The run finished without a fixed point.
    Diverged = 6,
    /// A directive's expectation was not met.
    Unmet = 7,
    Panic = 8,
}

/// An ordinal below ε₀.
pub struct OrdfixOrdinal(Ordinal);

/// A loaded scenario.
pub struct OrdfixScenario(Scenario);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: impl Into<String>) {
    let text = CString::new(message.into().replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(text));
}

struct Failure(OrdfixStatus, String);

impl Failure {
    fn new(status: OrdfixStatus, message: impl ToString) -> Self {
        Failure(status, message.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> OrdfixStatus {
    match panic::catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => OrdfixStatus::Ok,
        Ok(Err(Failure(status, message))) => {
            set_error(message);
            status
        }
        Err(_) => {
            set_error("internal panic");
            OrdfixStatus::Panic
        }
    }
}

unsafe fn c_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure::new(
            OrdfixStatus::NullPointer,
            format!("{what} is null"),
        ));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure::new(OrdfixStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

unsafe fn deref<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref()
        .ok_or_else(|| Failure::new(OrdfixStatus::NullPointer, format!("{what} is null")))
}

unsafe fn put<T>(out: *mut T, value: T, what: &str) -> Result<(), Failure> {
    if out.is_null() {
        return Err(Failure::new(
            OrdfixStatus::NullPointer,
            format!("{what} is null"),
        ));
    }
    out.write(value);
    Ok(())
}

/// Message for the last failed call on this thread, or null. Valid until the
/// next failing call on the same thread.
#[no_mangle]
pub extern "C" fn ordfix_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Frees a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn ordfix_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Parses an ordinal such as `w^2*3 + w + 1`.
///
/// # Safety
/// `text` must be a nul-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ordfix_ordinal_parse(
    text: *const c_char,
    out: *mut *mut OrdfixOrdinal,
) -> OrdfixStatus {
    guard(|| {
        let s = c_str(text, "text")?;
        let o: Ordinal = s
            .parse()
            .map_err(|e| Failure::new(OrdfixStatus::Parse, e))?;
        put(out, Box::into_raw(Box::new(OrdfixOrdinal(o))), "out")
    })
}

/// Writes -1, 0 or 1 to `out` as `a` is less than, equal to or greater than
/// `b`.
///
/// # Safety
/// `a` and `b` must be live handles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ordfix_ordinal_compare(
    a: *const OrdfixOrdinal,
    b: *const OrdfixOrdinal,
    out: *mut i32,
) -> OrdfixStatus {
    guard(|| {
        let (a, b) = (deref(a, "a")?, deref(b, "b")?);
        put(out, a.0.compare(&b.0) as i32, "out")
    })
}

/// Ordinal sum `a + b` as a new handle.
///
/// # Safety
/// `a` and `b` must be live handles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ordfix_ordinal_add(
    a: *const OrdfixOrdinal,
    b: *const OrdfixOrdinal,
    out: *mut *mut OrdfixOrdinal,
) -> OrdfixStatus {
    guard(|| {
        let sum = deref(a, "a")?.0.add(&deref(b, "b")?.0);
        put(out, Box::into_raw(Box::new(OrdfixOrdinal(sum))), "out")
    })
}

/// Canonical text of an ordinal; free it with [`ordfix_string_free`].
///
/// # Safety
/// `a` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ordfix_ordinal_to_string(
    a: *const OrdfixOrdinal,
    out: *mut *mut c_char,
) -> OrdfixStatus {
    guard(|| {
        let s = CString::new(deref(a, "a")?.0.to_string()).expect("no nul in ordinal text");
        put(out, s.into_raw(), "out")
    })
}

/// Frees an ordinal handle. Null is ignored.
///
/// # Safety
/// `a` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn ordfix_ordinal_free(a: *mut OrdfixOrdinal) {
    if !a.is_null() {
        drop(Box::from_raw(a));
    }
}

/// Loads and validates a scenario file with its own defaults.
///
/// # Safety
/// `path` must be a nul-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ordfix_scenario_load(
    path: *const c_char,
    out: *mut *mut OrdfixScenario,
) -> OrdfixStatus {
    guard(|| {
        let path = c_str(path, "path")?;
        let scenario = Scenario::load(Path::new(path), &Overrides::default()).map_err(|e| {
            let status = match e {
                ordfix::scenario::ScenarioError::Io { .. } => OrdfixStatus::Io,
                ordfix::scenario::ScenarioError::Parse { .. } => OrdfixStatus::Parse,
                _ => OrdfixStatus::Invalid,
            };
            Failure::new(status, e)
        })?;
        put(
            out,
            Box::into_raw(Box::new(OrdfixScenario(scenario))),
            "out",
        )
    })
}

/// Runs every directive. Artifacts are written to `out_dir` unless it is
/// null. Returns `ORDFIX_STATUS_UNMET` when some directive's expectation
/// failed.
///
/// # Safety
/// `scenario` must be a live handle; `out_dir` is null or a nul-terminated
/// string.
#[no_mangle]
pub unsafe extern "C" fn ordfix_scenario_run(
    scenario: *const OrdfixScenario,
    out_dir: *const c_char,
) -> OrdfixStatus {
    guard(|| {
        let scenario = deref(scenario, "scenario")?;
        let report = scenario.0.run(Selection::All);
        if !out_dir.is_null() {
            let dir = c_str(out_dir, "out_dir")?;
            report
                .write(Path::new(dir))
                .map_err(|e| Failure::new(OrdfixStatus::Io, e))?;
        }
        if report.success() {
            Ok(())
        } else {
            let failed: Vec<&str> = report
                .runs
                .iter()
                .filter(|r| !r.record.met)
                .map(|r| r.record.run.as_str())
                .collect();
            Err(Failure::new(
                OrdfixStatus::Unmet,
                format!("unmet runs: {}", failed.join(", ")),
            ))
        }
    })
}

/// Frees a scenario handle. Null is ignored.
///
/// # Safety
/// `scenario` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn ordfix_scenario_free(scenario: *mut OrdfixScenario) {
    if !scenario.is_null() {
        drop(Box::from_raw(scenario));
    }
}

/// Fixed point of `x ↦ A x + b` on ℝⁿ, where `A` is row-major `n × n` and
/// declared a contraction with the given factor in (0, 1). Iterates from
/// `initial` and writes the certified value to `out` (length `n`). When
/// `closure` is not null it receives the closure ordinal.
///
/// # Safety
/// `matrix` must hold `n * n` doubles, `offset`, `initial` and `out` `n`
/// each; `closure` is null or writable.
#[no_mangle]
pub unsafe extern "C" fn ordfix_affine_fixpoint(
    n: usize,
    matrix: *const f64,
    offset: *const f64,
    factor: f64,
    initial: *const f64,
    out: *mut f64,
    closure: *mut *mut OrdfixOrdinal,
) -> OrdfixStatus {
    guard(|| {
        if n == 0 {
            return Err(Failure::new(
                OrdfixStatus::Invalid,
                "dimension must be positive",
            ));
        }
        if matrix.is_null() || offset.is_null() || initial.is_null() || out.is_null() {
            return Err(Failure::new(
                OrdfixStatus::NullPointer,
                "null vector argument",
            ));
        }
        let a = DMatrix::from_row_slice(n, n, std::slice::from_raw_parts(matrix, n * n));
        let b = DVector::from_column_slice(std::slice::from_raw_parts(offset, n));
        let x0 = DVector::from_column_slice(std::slice::from_raw_parts(initial, n));
        let invalid = |e: &dyn ToString| Failure::new(OrdfixStatus::Invalid, e.to_string());
        let space = Arc::new(
            MetricSpaceSpec::new("R", n, DistanceKind::Euclidean, 1e-9).map_err(|e| invalid(&e))?,
        );
        let op = Operator::affine(
            "affine",
            space,
            OperatorKind::Contraction { factor },
            AffineMap::new(a, b).map_err(|e| invalid(&e))?,
        )
        .map_err(|e| invalid(&e))?
        .validate(&ValidationConfig::default())
        .map_err(|e| invalid(&e))?;
        let engine = Engine::new(EngineConfig::default());
        let budget = engine.config().budget.clone();
        match engine
            .iterate_to_fixpoint(&op, &x0, &budget)
            .map_err(|e| invalid(&e))?
        {
            Convergence::Converged(cert) => {
                std::slice::from_raw_parts_mut(out, n).copy_from_slice(cert.value.as_slice());
                if !closure.is_null() {
                    closure.write(Box::into_raw(Box::new(OrdfixOrdinal(cert.closure))));
                }
                Ok(())
            }
            Convergence::Diverged(d) => Err(Failure::new(OrdfixStatus::Diverged, d)),
        }
    })
}
