//! C ABI over the estimator.
//!
//! Handles are opaque and owned by the caller, who releases them with the
//! matching `*_free`. Every fallible call returns a [`TvspecStatus`]; on
//! failure `tvspec_last_error` describes the cause until the next failing
//! call on the same thread. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

use serde::Deserialize;
use tvspec::model::MultivariateSeries;
use tvspec::posterior::{changepoint_posterior, default_freq_grid, default_time_grid, summarize, Functional};
use tvspec::priors::PriorConfig;
use tvspec::sampler::{run_chain, ChainOutput, SamplerConfig};
use tvspec::Error;

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TvspecStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Data = 4,
    Numerical = 5,
    Io = 6,
    BufferTooSmall = 7,
    Panic = 8,
}

/// A `T × N` real series.
pub struct TvspecSeries(MultivariateSeries);

/// A finished chain and the prior it was run under.
pub struct TvspecRun {
    prior: PriorConfig,
    output: ChainOutput,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(err: &Error) -> TvspecStatus {
    match err {
        Error::InvalidArgument(_) => TvspecStatus::InvalidArgument,
        Error::Config(_) | Error::Json(_) => TvspecStatus::Config,
        Error::Data(_) => TvspecStatus::Data,
        Error::InvalidState(_) | Error::InvalidPartition(_) => TvspecStatus::Numerical,
        Error::Io { .. } => TvspecStatus::Io,
    }
}

struct Failure(TvspecStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(TvspecStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> TvspecStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => TvspecStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            TvspecStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(TvspecStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

/// Message of the last failure on this thread; empty if none. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn tvspec_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn tvspec_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copy a row-major `len × dim` array into a new series.
///
/// # Safety
/// `values` must point to `len * dim` readable doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tvspec_series_new(
    values: *const f64,
    len: usize,
    dim: usize,
    out: *mut *mut TvspecSeries,
) -> TvspecStatus {
    guard(|| {
        if values.is_null() {
            return Err(null("values"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let n = len
            .checked_mul(dim)
            .ok_or_else(|| Failure(TvspecStatus::InvalidArgument, "len * dim overflows".into()))?;
        let data = std::slice::from_raw_parts(values, n).to_vec();
        let series = MultivariateSeries::from_flat(len, dim, data)?;
        *out = Box::into_raw(Box::new(TvspecSeries(series)));
        Ok(())
    })
}

/// Read a numeric CSV (optional header row) into a new series.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tvspec_series_load_csv(path: *const c_char, out: *mut *mut TvspecSeries) -> TvspecStatus {
    guard(|| {
        let path = str_arg(path, "path")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let series = tvspec::io::load_csv(path)?;
        *out = Box::into_raw(Box::new(TvspecSeries(series)));
        Ok(())
    })
}

/// # Safety
/// `series` must come from a `tvspec_series_*` constructor and not be freed yet; null is ignored.
#[no_mangle]
pub unsafe extern "C" fn tvspec_series_free(series: *mut TvspecSeries) {
    if !series.is_null() {
        drop(Box::from_raw(series));
    }
}

/// # Safety
/// `series` must be a live handle or null (which yields 0).
#[no_mangle]
pub unsafe extern "C" fn tvspec_series_len(series: *const TvspecSeries) -> usize {
    series.as_ref().map_or(0, |s| s.0.len())
}

/// # Safety
/// `series` must be a live handle or null (which yields 0).
#[no_mangle]
pub unsafe extern "C" fn tvspec_series_dim(series: *const TvspecSeries) -> usize {
    series.as_ref().map_or(0, |s| s.0.dim())
}

#[derive(Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
struct RunSettings {
    prior: PriorConfig,
    sampler: SamplerConfig,
}

/// Run the sampler. `settings_json` is `{"prior": {…}, "sampler": {…}}`
/// with the same fields and defaults as the command line configuration, or
/// null for all defaults. `M` is capped at `⌊T / n_min⌋`.
///
/// # Safety
/// `series` must be a live handle, `settings_json` null or NUL-terminated, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn tvspec_run_new(
    series: *const TvspecSeries,
    settings_json: *const c_char,
    out: *mut *mut TvspecRun,
) -> TvspecStatus {
    guard(|| {
        let series = &series.as_ref().ok_or_else(|| null("series"))?.0;
        if out.is_null() {
            return Err(null("out"));
        }
        let settings: RunSettings = if settings_json.is_null() {
            RunSettings::default()
        } else {
            serde_json::from_str(str_arg(settings_json, "settings_json")?)
                .map_err(|e| Failure(TvspecStatus::Config, e.to_string()))?
        };
        let mut prior = settings.prior;
        prior.max_segments = prior.max_segments.min(series.len() / prior.n_min.max(1)).max(1);
        let output = run_chain(series, &prior, &settings.sampler)?;
        *out = Box::into_raw(Box::new(TvspecRun { prior, output }));
        Ok(())
    })
}

/// # Safety
/// `run` must come from `tvspec_run_new` and not be freed yet; null is ignored.
#[no_mangle]
pub unsafe extern "C" fn tvspec_run_free(run: *mut TvspecRun) {
    if !run.is_null() {
        drop(Box::from_raw(run));
    }
}

/// Maximum number of segments `M` the run used; the length of its `Pr(m)` vector.
///
/// # Safety
/// `run` must be a live handle or null (which yields 0).
#[no_mangle]
pub unsafe extern "C" fn tvspec_run_max_segments(run: *const TvspecRun) -> usize {
    run.as_ref().map_or(0, |r| r.prior.max_segments)
}

/// # Safety
/// `run` must be a live handle or null (which yields 0).
#[no_mangle]
pub unsafe extern "C" fn tvspec_run_snapshot_count(run: *const TvspecRun) -> usize {
    run.as_ref().map_or(0, |r| r.output.snapshots.len())
}

fn run_ref<'a>(run: *const TvspecRun) -> Result<&'a TvspecRun, Failure> {
    // SAFETY: callers pass a live handle or null.
    unsafe { run.as_ref() }.ok_or_else(|| null("run"))
}

fn check_capacity(needed: usize, cap: usize) -> Result<(), Failure> {
    if cap < needed {
        return Err(Failure(
            TvspecStatus::BufferTooSmall,
            format!("buffer holds {cap} values, {needed} needed"),
        ));
    }
    Ok(())
}

/// Write `Pr(m = k | Y)` for `k = 1..=M` into `out`.
///
/// # Safety
/// `run` must be a live handle and `out` must hold `cap` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn tvspec_run_pm(run: *const TvspecRun, out: *mut f64, cap: usize) -> TvspecStatus {
    guard(|| {
        let run = run_ref(run)?;
        if out.is_null() {
            return Err(null("out"));
        }
        let len = run.output.snapshots[0].partition.len();
        let cp = changepoint_posterior(&run.output.snapshots, run.prior.max_segments, len)?;
        check_capacity(cp.pm.len(), cap)?;
        std::slice::from_raw_parts_mut(out, cp.pm.len()).copy_from_slice(&cp.pm);
        Ok(())
    })
}

/// Posterior mean of a functional (`"f11"`, `"logf22"`, `"rho21"`, …) on
/// every time point `1..=T` and `n_freqs` equally spaced frequencies in
/// `[0, 0.5]`, written time-major into `out` (`T * n_freqs` values).
///
/// # Safety
/// `run` must be a live handle, `functional` NUL-terminated, `out` must hold `cap` doubles.
#[no_mangle]
pub unsafe extern "C" fn tvspec_run_mean(
    run: *const TvspecRun,
    functional: *const c_char,
    n_freqs: usize,
    out: *mut f64,
    cap: usize,
) -> TvspecStatus {
    guard(|| {
        let run = run_ref(run)?;
        let functional = Functional::parse(str_arg(functional, "functional")?)?;
        if out.is_null() {
            return Err(null("out"));
        }
        if n_freqs == 0 {
            return Err(Failure(TvspecStatus::InvalidArgument, "n_freqs must be positive".into()));
        }
        let len = run.output.snapshots[0].partition.len();
        check_capacity(len * n_freqs, cap)?;
        let times = default_time_grid(len);
        let freqs = default_freq_grid(n_freqs);
        let summary = summarize(&run.output.snapshots, run.prior.max_segments, &times, &freqs, &[], 0.95)?;
        let grid = summary
            .mean(functional)
            .ok_or_else(|| Failure(TvspecStatus::InvalidArgument, format!("{} is not available", functional.label())))?;
        std::slice::from_raw_parts_mut(out, grid.values.len()).copy_from_slice(&grid.values);
        Ok(())
    })
}

/// Move statistics of the run as a JSON string, released with `tvspec_string_free`.
///
/// # Safety
/// `run` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn tvspec_run_diagnostics_json(run: *const TvspecRun, out: *mut *mut c_char) -> TvspecStatus {
    guard(|| {
        let run = run_ref(run)?;
        if out.is_null() {
            return Err(null("out"));
        }
        let json = serde_json::to_string(&run.output.diagnostics).map_err(Error::from)?;
        *out = CString::new(json).map_err(|e| Failure(TvspecStatus::Panic, e.to_string()))?.into_raw();
        Ok(())
    })
}

/// # Safety
/// `s` must come from this library and not be freed yet; null is ignored.
#[no_mangle]
pub unsafe extern "C" fn tvspec_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
