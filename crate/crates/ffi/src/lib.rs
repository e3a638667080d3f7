//! C ABI over `mtlue-core`.
//!
//! Conventions:
//! - every fallible function returns an [`MtlueStatus`]; results come back through out-pointers;
//! - on failure, [`mtlue_last_error`] returns a description for the calling thread;
//! - handles are opaque and released with their matching `*_free` function;
//! - strings returned through out-pointers are owned by the caller and released with
//!   [`mtlue_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use mtlue_core::attacks::{patch_grid, target_label};
use mtlue_core::config::ExperimentConfig;
use mtlue_core::error::Error;
use mtlue_core::gradcheck::full_suite;
use mtlue_core::harness::{run_experiment, ExperimentReport};

/// Status codes returned by every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MtlueStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    /// Bad configuration or argument (validation, parse or JSON errors).
    InvalidInput = 3,
    Io = 4,
    /// The requested artifact already exists and would be overwritten.
    AlreadyExists = 5,
    NotFound = 6,
    Runtime = 7,
    Panic = 8,
}

/// Experiment configuration handle.
pub struct MtlueConfig(ExperimentConfig);

/// Experiment report handle.
pub struct MtlueReport(ExperimentReport);

/// Geometry of the class-wise patch grid.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MtluePatchGrid {
    pub n: usize,
    pub patch_h: usize,
    pub patch_w: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn status_of(err: &Error) -> MtlueStatus {
    match err {
        Error::Io { .. } => MtlueStatus::Io,
        Error::ArtifactExists(_) => MtlueStatus::AlreadyExists,
        e if e.is_validation() => MtlueStatus::InvalidInput,
        _ => MtlueStatus::Runtime,
    }
}

struct Fail(MtlueStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

/// Runs `f`, converting errors and panics into a status plus last-error message.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> MtlueStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            MtlueStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".to_string());
            set_error(format!("panic: {msg}"));
            MtlueStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(MtlueStatus::NullPointer, format!("null pointer: {what}"))
}

unsafe fn read_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(MtlueStatus::InvalidUtf8, format!("{what} is not valid UTF-8")))
}

unsafe fn write_out<T>(out: *mut T, v: T, what: &str) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null(what));
    }
    out.write(v);
    Ok(())
}

unsafe fn write_string(out: *mut *mut c_char, s: String) -> Result<(), Fail> {
    let c = CString::new(s).map_err(|_| Fail(MtlueStatus::Runtime, "string contains NUL".to_string()))?;
    write_out(out, c.into_raw(), "out")
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn mtlue_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message for the last failed call on this thread, or NULL. Valid until the next call.
#[no_mangle]
pub extern "C" fn mtlue_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Releases a string returned by this library. NULL is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed already.
#[no_mangle]
pub unsafe extern "C" fn mtlue_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Parses and validates a JSON experiment configuration.
///
/// # Safety
/// `json` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mtlue_config_from_json(json: *const c_char, out: *mut *mut MtlueConfig) -> MtlueStatus {
    guard(|| {
        let cfg = ExperimentConfig::from_json(read_str(json, "json")?)?;
        cfg.validate()?;
        write_out(out, Box::into_raw(Box::new(MtlueConfig(cfg))), "out")
    })
}

/// Reads and validates a JSON experiment configuration file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mtlue_config_from_file(path: *const c_char, out: *mut *mut MtlueConfig) -> MtlueStatus {
    guard(|| {
        let path = PathBuf::from(read_str(path, "path")?);
        if !path.exists() {
            return Err(Fail(MtlueStatus::NotFound, format!("no such file: {}", path.display())));
        }
        let cfg = ExperimentConfig::from_file(&path)?;
        cfg.validate()?;
        write_out(out, Box::into_raw(Box::new(MtlueConfig(cfg))), "out")
    })
}

/// Overrides the master seed.
///
/// # Safety
/// `cfg` must be a live config handle.
#[no_mangle]
pub unsafe extern "C" fn mtlue_config_set_seed(cfg: *mut MtlueConfig, seed: u64) -> MtlueStatus {
    guard(|| {
        cfg.as_mut().ok_or_else(|| null("cfg"))?.0.seed = seed;
        Ok(())
    })
}

/// Sets the directory artifacts are written to; NULL disables persistence.
///
/// # Safety
/// `cfg` must be a live config handle; `dir` must be NULL or a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn mtlue_config_set_output_dir(cfg: *mut MtlueConfig, dir: *const c_char) -> MtlueStatus {
    guard(|| {
        let cfg = cfg.as_mut().ok_or_else(|| null("cfg"))?;
        cfg.0.output_dir = if dir.is_null() { None } else { Some(PathBuf::from(read_str(dir, "dir")?)) };
        Ok(())
    })
}

/// Serializes the configuration to JSON.
///
/// # Safety
/// `cfg` must be a live config handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mtlue_config_to_json(cfg: *const MtlueConfig, out: *mut *mut c_char) -> MtlueStatus {
    guard(|| write_string(out, handle(cfg, "cfg")?.0.to_json()?))
}

/// Content hash of the configuration (hex SHA-256, output directory excluded).
///
/// # Safety
/// `cfg` must be a live config handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mtlue_config_hash(cfg: *const MtlueConfig, out: *mut *mut c_char) -> MtlueStatus {
    guard(|| write_string(out, handle(cfg, "cfg")?.0.config_hash()))
}

/// Releases a config handle. NULL is ignored.
///
/// # Safety
/// `cfg` must come from this library and not have been freed already.
#[no_mangle]
pub unsafe extern "C" fn mtlue_config_free(cfg: *mut MtlueConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// Runs a full experiment: craft, poison, train victims and evaluate.
///
/// # Safety
/// `cfg` must be a live config handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mtlue_run_experiment(cfg: *const MtlueConfig, out: *mut *mut MtlueReport) -> MtlueStatus {
    guard(|| {
        let cfg = handle(cfg, "cfg")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let report = run_experiment(&cfg.0)?;
        write_out(out, Box::into_raw(Box::new(MtlueReport(report))), "out")
    })
}

/// Full report as JSON.
///
/// # Safety
/// `report` must be a live report handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mtlue_report_json(report: *const MtlueReport, out: *mut *mut c_char) -> MtlueStatus {
    guard(|| {
        let json = serde_json::to_string_pretty(&handle(report, "report")?.0).map_err(Error::from)?;
        write_string(out, json)
    })
}

/// Average test accuracy of a victim. With `baseline` nonzero the clean-baseline victim of the
/// same id is used.
///
/// # Safety
/// `report` must be a live report handle; `victim` a NUL-terminated string; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn mtlue_report_victim_accuracy(
    report: *const MtlueReport,
    victim: *const c_char,
    baseline: i32,
    out: *mut f64,
) -> MtlueStatus {
    guard(|| {
        let report = &handle(report, "report")?.0;
        let id = read_str(victim, "victim")?;
        let found = if baseline != 0 { report.baseline(id) } else { report.victim(id) };
        let v = found.ok_or_else(|| Fail(MtlueStatus::NotFound, format!("no victim `{id}` in report")))?;
        write_out(out, v.metrics.avg_accuracy, "out")
    })
}

/// Largest absolute perturbation value the attack produced.
///
/// # Safety
/// `report` must be a live report handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mtlue_report_max_abs_delta(report: *const MtlueReport, out: *mut f64) -> MtlueStatus {
    guard(|| write_out(out, handle(report, "report")?.0.attack.max_abs_delta, "out"))
}

/// Releases a report handle. NULL is ignored.
///
/// # Safety
/// `report` must come from this library and not have been freed already.
#[no_mangle]
pub unsafe extern "C" fn mtlue_report_free(report: *mut MtlueReport) {
    if !report.is_null() {
        drop(Box::from_raw(report));
    }
}

/// Patch grid used by class-wise patterns for `tasks` tasks on `h`×`w` images.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mtlue_patch_grid(tasks: usize, h: usize, w: usize, out: *mut MtluePatchGrid) -> MtlueStatus {
    guard(|| {
        let g = patch_grid(tasks, h, w)?;
        write_out(
            out,
            MtluePatchGrid {
                n: g.n,
                patch_h: g.patch_h,
                patch_w: g.patch_w,
            },
            "out",
        )
    })
}

/// Target class used by targeted attacks for label `y` of a `classes`-way task.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mtlue_target_label(y: usize, classes: usize, out: *mut usize) -> MtlueStatus {
    guard(|| {
        if classes == 0 || y >= classes {
            return Err(Fail(MtlueStatus::InvalidInput, format!("label {y} out of range for {classes} classes")));
        }
        write_out(out, target_label(y, classes), "out")
    })
}

/// Runs the gradient-check suite; reports how many checks ran and passed.
///
/// # Safety
/// `total` and `passed` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mtlue_gradcheck(seed: u64, total: *mut usize, passed: *mut usize) -> MtlueStatus {
    guard(|| {
        if total.is_null() || passed.is_null() {
            return Err(null("total/passed"));
        }
        let reports = full_suite(seed)?;
        write_out(total, reports.len(), "total")?;
        write_out(passed, reports.iter().filter(|r| r.passed).count(), "passed")
    })
}
