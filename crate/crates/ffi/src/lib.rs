//! C interface to the simulator.
//!
//! Objects cross the boundary as opaque handles created by `*_new`/`*_load`
//! functions and released by the matching `*_free`. Every fallible call
//! returns an [`OtfsStatus`]; on failure a description is available from
//! [`otfs_last_error`] on the same thread until the next failing call.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use otfs_scma::scma::ScmaCodebookSet;
use otfs_scma::sim::{noise_from_snr, records_to_csv, run_ber, BerRecord, SimConfig};
use otfs_scma::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OtfsStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    InvalidConfig = 3,
    InvalidCodebook = 4,
    Dimension = 5,
    ComplexityCap = 6,
    Numerical = 7,
    Io = 8,
    Panic = 9,
}

/// Simulation configuration.
pub struct OtfsConfig(SimConfig);

/// Codebook set.
pub struct OtfsCodebook(ScmaCodebookSet);

/// BER curve produced by [`otfs_run`].
pub struct OtfsResult(Vec<BerRecord>);

/// One simulated `(P, SNR)` point.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct OtfsBerPoint {
    pub paths: u32,
    pub snr_db: f64,
    pub frames: u64,
    pub bit_errors: u64,
    pub total_bits: u64,
    pub ber: f64,
    pub mean_iterations: f64,
}

/// Shape of a codebook set.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct OtfsCodebookInfo {
    pub users: u32,
    pub resources: u32,
    pub alphabet: u32,
    pub dv: u32,
    pub df: u32,
    pub overloading: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: String) {
    let text = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(text));
}

fn status_of(e: &Error) -> OtfsStatus {
    match e {
        Error::InvalidConfig(_) | Error::InvalidChannel(_) | Error::UnsupportedExtension(_) | Error::Json(_) => {
            OtfsStatus::InvalidConfig
        }
        Error::Validation(_) | Error::InvalidSymbol { .. } => OtfsStatus::InvalidCodebook,
        Error::Dimension(_) | Error::Allocation(_) | Error::Structure(_) => OtfsStatus::Dimension,
        Error::ComplexityCap { .. } | Error::BudgetExceeded { .. } => OtfsStatus::ComplexityCap,
        Error::Numerical(_) => OtfsStatus::Numerical,
        Error::Io { .. } => OtfsStatus::Io,
        Error::InvalidParameter(_) => OtfsStatus::InvalidArgument,
    }
}

/// Runs `body`, turning errors and panics into a status plus last-error text.
fn guard(body: impl FnOnce() -> Result<(), (OtfsStatus, String)>) -> OtfsStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => OtfsStatus::Ok,
        Ok(Err((status, message))) => {
            set_error(message);
            status
        }
        Err(payload) => {
            let message = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {message}"));
            OtfsStatus::Panic
        }
    }
}

fn lib<T>(r: otfs_scma::Result<T>) -> Result<T, (OtfsStatus, String)> {
    r.map_err(|e| (status_of(&e), e.to_string()))
}

fn null(what: &str) -> (OtfsStatus, String) {
    (OtfsStatus::NullPointer, format!("{what} is null"))
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, (OtfsStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (OtfsStatus::InvalidArgument, format!("{what} is not valid UTF-8")))
}

unsafe fn deref<'a, T>(p: *const T, what: &str) -> Result<&'a T, (OtfsStatus, String)> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn deref_mut<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, (OtfsStatus, String)> {
    p.as_mut().ok_or_else(|| null(what))
}

fn into_c_string(s: String) -> Result<*mut c_char, (OtfsStatus, String)> {
    CString::new(s)
        .map(CString::into_raw)
        .map_err(|_| (OtfsStatus::InvalidArgument, "output contains a NUL byte".into()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn otfs_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failing call on this thread, or NULL if none.
/// The pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn otfs_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Releases a string returned by this library. NULL is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn otfs_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Default configuration (8x8 downlink OTFS-SCMA).
///
/// # Safety
/// `out` must be a valid pointer to writable storage for a handle.
#[no_mangle]
pub unsafe extern "C" fn otfs_config_new(out: *mut *mut OtfsConfig) -> OtfsStatus {
    guard(|| {
        let out = deref_mut(out, "out")?;
        *out = Box::into_raw(Box::new(OtfsConfig(SimConfig::default())));
        Ok(())
    })
}

/// Parses and validates a JSON configuration.
///
/// # Safety
/// `json` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn otfs_config_from_json(json: *const c_char, out: *mut *mut OtfsConfig) -> OtfsStatus {
    guard(|| {
        let out = deref_mut(out, "out")?;
        let cfg = lib(SimConfig::from_json_str(text(json, "json")?))?;
        lib(cfg.validate())?;
        *out = Box::into_raw(Box::new(OtfsConfig(cfg)));
        Ok(())
    })
}

/// Serializes a configuration to JSON; free the result with [`otfs_string_free`].
///
/// # Safety
/// `cfg` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn otfs_config_to_json(cfg: *const OtfsConfig, out: *mut *mut c_char) -> OtfsStatus {
    guard(|| {
        let cfg = deref(cfg, "cfg")?;
        let out = deref_mut(out, "out")?;
        let json = serde_json::to_string(&cfg.0).map_err(|e| (OtfsStatus::InvalidConfig, e.to_string()))?;
        *out = into_c_string(json)?;
        Ok(())
    })
}

/// Sets the number of frames per SNR point.
///
/// # Safety
/// `cfg` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn otfs_config_set_frames(cfg: *mut OtfsConfig, frames: u64) -> OtfsStatus {
    guard(|| {
        let cfg = deref_mut(cfg, "cfg")?;
        if frames == 0 {
            return Err((OtfsStatus::InvalidArgument, "frames must be at least 1".into()));
        }
        cfg.0.frames = frames as usize;
        Ok(())
    })
}

/// Sets the run seed.
///
/// # Safety
/// `cfg` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn otfs_config_set_seed(cfg: *mut OtfsConfig, seed: u64) -> OtfsStatus {
    guard(|| {
        deref_mut(cfg, "cfg")?.0.seed = seed;
        Ok(())
    })
}

/// Replaces the SNR grid with `len` values in dB.
///
/// # Safety
/// `cfg` must be a live handle; `snr_db` must point to `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn otfs_config_set_snr(cfg: *mut OtfsConfig, snr_db: *const f64, len: usize) -> OtfsStatus {
    guard(|| {
        let cfg = deref_mut(cfg, "cfg")?;
        if snr_db.is_null() || len == 0 {
            return Err((OtfsStatus::InvalidArgument, "the SNR grid must not be empty".into()));
        }
        cfg.0.snr_points = std::slice::from_raw_parts(snr_db, len).to_vec();
        Ok(())
    })
}

/// Releases a configuration. NULL is ignored.
///
/// # Safety
/// `cfg` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn otfs_config_free(cfg: *mut OtfsConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// Runs the Monte Carlo simulation described by `cfg`.
///
/// # Safety
/// `cfg` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn otfs_run(cfg: *const OtfsConfig, out: *mut *mut OtfsResult) -> OtfsStatus {
    guard(|| {
        let cfg = deref(cfg, "cfg")?;
        let out = deref_mut(out, "out")?;
        *out = Box::into_raw(Box::new(OtfsResult(lib(run_ber(&cfg.0))?)));
        Ok(())
    })
}

/// Number of points in a result.
///
/// # Safety
/// `result` must be a live handle or NULL (which yields 0).
#[no_mangle]
pub unsafe extern "C" fn otfs_result_len(result: *const OtfsResult) -> usize {
    result.as_ref().map_or(0, |r| r.0.len())
}

/// Copies point `index` of a result into `out`.
///
/// # Safety
/// `result` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn otfs_result_point(result: *const OtfsResult, index: usize, out: *mut OtfsBerPoint) -> OtfsStatus {
    guard(|| {
        let result = deref(result, "result")?;
        let out = deref_mut(out, "out")?;
        let r = result
            .0
            .get(index)
            .ok_or_else(|| (OtfsStatus::InvalidArgument, format!("index {index} of {}", result.0.len())))?;
        *out = OtfsBerPoint {
            paths: r.paths as u32,
            snr_db: r.snr_db,
            frames: r.frames_run as u64,
            bit_errors: r.bit_errors,
            total_bits: r.total_bits,
            ber: r.ber,
            mean_iterations: r.mean_mpa_iterations,
        };
        Ok(())
    })
}

/// Renders a result as CSV; free the string with [`otfs_string_free`].
///
/// # Safety
/// `result` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn otfs_result_csv(result: *const OtfsResult, out: *mut *mut c_char) -> OtfsStatus {
    guard(|| {
        let result = deref(result, "result")?;
        let out = deref_mut(out, "out")?;
        *out = into_c_string(records_to_csv(&result.0))?;
        Ok(())
    })
}

/// Releases a result. NULL is ignored.
///
/// # Safety
/// `result` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn otfs_result_free(result: *mut OtfsResult) {
    if !result.is_null() {
        drop(Box::from_raw(result));
    }
}

/// The built-in six-user, four-resource codebook set.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn otfs_codebook_default(out: *mut *mut OtfsCodebook) -> OtfsStatus {
    guard(|| {
        *deref_mut(out, "out")? = Box::into_raw(Box::new(OtfsCodebook(ScmaCodebookSet::default_6x4())));
        Ok(())
    })
}

/// Loads and validates a codebook JSON file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn otfs_codebook_load(path: *const c_char, out: *mut *mut OtfsCodebook) -> OtfsStatus {
    guard(|| {
        let out = deref_mut(out, "out")?;
        let set = lib(ScmaCodebookSet::load(text(path, "path")?))?;
        *out = Box::into_raw(Box::new(OtfsCodebook(set)));
        Ok(())
    })
}

/// Dimensions of a codebook set.
///
/// # Safety
/// `cb` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn otfs_codebook_info(cb: *const OtfsCodebook, out: *mut OtfsCodebookInfo) -> OtfsStatus {
    guard(|| {
        let set = &deref(cb, "cb")?.0;
        *deref_mut(out, "out")? = OtfsCodebookInfo {
            users: set.users() as u32,
            resources: set.resources() as u32,
            alphabet: set.alphabet() as u32,
            dv: set.dv() as u32,
            df: set.df() as u32,
            overloading: set.overloading(),
        };
        Ok(())
    })
}

/// Noise variance matching an `E_b/N_0` in dB for this codebook.
///
/// # Safety
/// `cb` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn otfs_noise_from_snr(cb: *const OtfsCodebook, snr_db: f64, out: *mut f64) -> OtfsStatus {
    guard(|| {
        let set = &deref(cb, "cb")?.0;
        if !snr_db.is_finite() {
            return Err((OtfsStatus::InvalidArgument, format!("non-finite SNR {snr_db}")));
        }
        *deref_mut(out, "out")? = noise_from_snr(snr_db, set, otfs_scma::sim::Link::Downlink);
        Ok(())
    })
}

/// Releases a codebook. NULL is ignored.
///
/// # Safety
/// `cb` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn otfs_codebook_free(cb: *mut OtfsCodebook) {
    if !cb.is_null() {
        drop(Box::from_raw(cb));
    }
}
