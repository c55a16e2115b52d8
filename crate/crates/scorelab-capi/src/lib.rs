//! C ABI for the scorelab experiment runner.
//!
//! Configs are opaque handles created from JSON; runs write the same CSV
//! and summary artifacts as the CLI. All functions return a status code
//! and never unwind across the boundary; the last error message is kept
//! per thread and can be copied out with `scorelab_last_error`.

use scorelab::cli::{run_config, sample_from_config};
use scorelab::config::ExperimentConfig;
use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

/// Result of every C-ABI call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScorelabStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    ConfigError = 3,
    RunFailure = 4,
    BufferTooSmall = 5,
    Panic = 6,
}

/// Opaque experiment configuration handle.
pub struct ScorelabConfig {
    inner: ExperimentConfig,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").unwrap());
}

fn set_error(msg: &str) {
    let sanitized: String = msg.chars().filter(|c| *c != '\0').collect();
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(sanitized).unwrap_or_default();
    });
}

fn guard<F: FnOnce() -> ScorelabStatus>(f: F) -> ScorelabStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => status,
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".to_string());
            set_error(&msg);
            ScorelabStatus::Panic
        }
    }
}

unsafe fn read_utf8<'a>(ptr: *const c_char) -> Result<&'a str, ScorelabStatus> {
    if ptr.is_null() {
        set_error("null pointer argument");
        return Err(ScorelabStatus::NullArgument);
    }
    CStr::from_ptr(ptr).to_str().map_err(|_| {
        set_error("argument is not valid UTF-8");
        ScorelabStatus::InvalidUtf8
    })
}

/// Library version as a static nul-terminated string.
#[no_mangle]
pub extern "C" fn scorelab_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Copies the last error message of the calling thread into `buf`
/// (truncating if needed) and returns the full length including the
/// terminating nul. `buf` may be null to query the length.
#[no_mangle]
pub extern "C" fn scorelab_last_error(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|slot| {
        let msg = slot.borrow();
        let bytes = msg.as_bytes_with_nul();
        if !buf.is_null() && cap > 0 {
            let n = bytes.len().min(cap);
            unsafe {
                std::ptr::copy_nonoverlapping(bytes.as_ptr() as *const c_char, buf, n);
                // always terminate
                *buf.add(n - 1) = 0;
            }
        }
        bytes.len()
    })
}

/// Parses a JSON experiment config into a new handle.
///
/// # Safety
/// `json` must be a valid nul-terminated string and `out` a valid
/// pointer; the returned handle must be released with
/// `scorelab_config_free`.
#[no_mangle]
pub unsafe extern "C" fn scorelab_config_parse_json(
    json: *const c_char,
    out: *mut *mut ScorelabConfig,
) -> ScorelabStatus {
    guard(|| {
        if out.is_null() {
            set_error("null output pointer");
            return ScorelabStatus::NullArgument;
        }
        let text = match read_utf8(json) {
            Ok(t) => t,
            Err(s) => return s,
        };
        match ExperimentConfig::from_json(text) {
            Ok(cfg) => {
                *out = Box::into_raw(Box::new(ScorelabConfig { inner: cfg }));
                ScorelabStatus::Ok
            }
            Err(e) => {
                set_error(&e.to_string());
                ScorelabStatus::ConfigError
            }
        }
    })
}

/// Loads a config from a file path.
///
/// # Safety
/// As for `scorelab_config_parse_json`.
#[no_mangle]
pub unsafe extern "C" fn scorelab_config_load(
    path: *const c_char,
    out: *mut *mut ScorelabConfig,
) -> ScorelabStatus {
    guard(|| {
        if out.is_null() {
            set_error("null output pointer");
            return ScorelabStatus::NullArgument;
        }
        let path = match read_utf8(path) {
            Ok(t) => t,
            Err(s) => return s,
        };
        match ExperimentConfig::load(Path::new(path)) {
            Ok(cfg) => {
                *out = Box::into_raw(Box::new(ScorelabConfig { inner: cfg }));
                ScorelabStatus::Ok
            }
            Err(e) => {
                set_error(&e.to_string());
                ScorelabStatus::ConfigError
            }
        }
    })
}

/// Releases a config handle. Null is ignored.
///
/// # Safety
/// `cfg` must have come from this library and not been freed before.
#[no_mangle]
pub unsafe extern "C" fn scorelab_config_free(cfg: *mut ScorelabConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// Overrides the master seed.
///
/// # Safety
/// `cfg` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn scorelab_config_set_seed(
    cfg: *mut ScorelabConfig,
    seed: u64,
) -> ScorelabStatus {
    guard(|| {
        if cfg.is_null() {
            set_error("null config");
            return ScorelabStatus::NullArgument;
        }
        (*cfg).inner.seed = seed;
        ScorelabStatus::Ok
    })
}

/// Runs the config's pipeline, writing the CSV and summary under
/// `out_dir`. `exit_code` (optional) receives 0 when every assertion
/// row passed and 1 otherwise.
///
/// # Safety
/// `cfg` must be a live handle and `out_dir` a valid string.
#[no_mangle]
pub unsafe extern "C" fn scorelab_run(
    cfg: *const ScorelabConfig,
    out_dir: *const c_char,
    exit_code: *mut i32,
) -> ScorelabStatus {
    guard(|| {
        if cfg.is_null() {
            set_error("null config");
            return ScorelabStatus::NullArgument;
        }
        let dir = match read_utf8(out_dir) {
            Ok(t) => t,
            Err(s) => return s,
        };
        match run_config(&(*cfg).inner, Path::new(dir)) {
            Ok(outcome) => {
                if !exit_code.is_null() {
                    *exit_code = outcome.exit_code;
                }
                ScorelabStatus::Ok
            }
            Err(e) => {
                set_error(&e.to_string());
                ScorelabStatus::RunFailure
            }
        }
    })
}

/// Reports the sample matrix shape the config would produce (rows =
/// paths, cols = state dimension).
///
/// # Safety
/// `cfg` must be a live handle; `rows`/`cols` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn scorelab_sample_dims(
    cfg: *const ScorelabConfig,
    rows: *mut usize,
    cols: *mut usize,
) -> ScorelabStatus {
    guard(|| {
        if cfg.is_null() || rows.is_null() || cols.is_null() {
            set_error("null argument");
            return ScorelabStatus::NullArgument;
        }
        let inner = &(*cfg).inner;
        let Some(sampler) = inner.sampler.as_ref() else {
            set_error("config has no sampler section");
            return ScorelabStatus::ConfigError;
        };
        let d = inner.target.dim();
        *rows = sampler.n_samples;
        *cols = inner.process.build().state_dim(d);
        ScorelabStatus::Ok
    })
}

/// Runs the reverse sampler and fills `buf` with the final states in
/// row-major order. `len` is the capacity of `buf` in doubles; the
/// written shape is returned through `rows`/`cols`.
///
/// # Safety
/// `cfg` must be a live handle and `buf` must point to at least `len`
/// doubles.
#[no_mangle]
pub unsafe extern "C" fn scorelab_sample(
    cfg: *const ScorelabConfig,
    buf: *mut f64,
    len: usize,
    rows: *mut usize,
    cols: *mut usize,
) -> ScorelabStatus {
    guard(|| {
        if cfg.is_null() || buf.is_null() || rows.is_null() || cols.is_null() {
            set_error("null argument");
            return ScorelabStatus::NullArgument;
        }
        match sample_from_config(&(*cfg).inner) {
            Ok((_, points)) => {
                let (n, d) = (points.nrows(), points.ncols());
                if len < n * d {
                    set_error(&format!("buffer holds {len} doubles, need {}", n * d));
                    return ScorelabStatus::BufferTooSmall;
                }
                for i in 0..n {
                    for j in 0..d {
                        *buf.add(i * d + j) = points[(i, j)];
                    }
                }
                *rows = n;
                *cols = d;
                ScorelabStatus::Ok
            }
            Err(e) => {
                set_error(&e.to_string());
                ScorelabStatus::RunFailure
            }
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const TINY: &str = r#"{
  "schema_version": 1,
  "experiment_id": "capi_tiny",
  "seed": 42,
  "target": {"kind": "isotropic_gaussian", "dim": 2, "variance": 1.0},
  "process": {"kind": "ddpm"},
  "sampler": {"horizon": 1.0, "steps": 10, "n_samples": 32},
  "score": {"error_model": "exact"},
  "metrics": [{"kind": "exact_tv"}],
  "bound": {"which": "ddpm"},
  "pipeline": "sample_measure"
}"#;

    fn cstring(s: &str) -> CString {
        CString::new(s).unwrap()
    }

    #[test]
    fn parse_run_and_free() {
        let json = cstring(TINY);
        let mut handle: *mut ScorelabConfig = std::ptr::null_mut();
        let status = unsafe { scorelab_config_parse_json(json.as_ptr(), &mut handle) };
        assert_eq!(status, ScorelabStatus::Ok);
        assert!(!handle.is_null());

        let dir = tempfile::tempdir().unwrap();
        let out = cstring(dir.path().to_str().unwrap());
        let mut exit_code = -1;
        let status = unsafe { scorelab_run(handle, out.as_ptr(), &mut exit_code) };
        assert_eq!(status, ScorelabStatus::Ok);
        assert_eq!(exit_code, 0);
        assert!(dir.path().join("capi_tiny.csv").exists());
        unsafe { scorelab_config_free(handle) };
    }

    #[test]
    fn bad_json_reports_error_message() {
        let json = cstring("{\"schema_version\": 99}");
        let mut handle: *mut ScorelabConfig = std::ptr::null_mut();
        let status = unsafe { scorelab_config_parse_json(json.as_ptr(), &mut handle) };
        assert_eq!(status, ScorelabStatus::ConfigError);
        let needed = scorelab_last_error(std::ptr::null_mut(), 0);
        assert!(needed > 1);
        let mut buf = vec![0i8 as c_char; needed];
        scorelab_last_error(buf.as_mut_ptr(), buf.len());
        let msg = unsafe { CStr::from_ptr(buf.as_ptr()) }.to_str().unwrap();
        assert!(msg.contains("parse error"), "{msg}");
    }

    #[test]
    fn sampling_fills_row_major_buffer() {
        let json = cstring(TINY);
        let mut handle: *mut ScorelabConfig = std::ptr::null_mut();
        unsafe { scorelab_config_parse_json(json.as_ptr(), &mut handle) };
        unsafe { scorelab_config_set_seed(handle, 7) };
        let (mut rows, mut cols) = (0usize, 0usize);
        let status = unsafe { scorelab_sample_dims(handle, &mut rows, &mut cols) };
        assert_eq!(status, ScorelabStatus::Ok);
        assert_eq!((rows, cols), (32, 2));

        let mut buf = vec![0.0f64; rows * cols];
        let status = unsafe {
            scorelab_sample(handle, buf.as_mut_ptr(), buf.len(), &mut rows, &mut cols)
        };
        assert_eq!(status, ScorelabStatus::Ok);
        assert!(buf.iter().all(|v| v.is_finite()));
        assert!(buf.iter().any(|v| *v != 0.0));

        // deterministic given the seed
        let mut buf2 = vec![0.0f64; rows * cols];
        let status = unsafe {
            scorelab_sample(handle, buf2.as_mut_ptr(), buf2.len(), &mut rows, &mut cols)
        };
        assert_eq!(status, ScorelabStatus::Ok);
        assert_eq!(buf, buf2);

        // too-small buffer is refused
        let mut tiny = vec![0.0f64; 3];
        let status = unsafe {
            scorelab_sample(handle, tiny.as_mut_ptr(), tiny.len(), &mut rows, &mut cols)
        };
        assert_eq!(status, ScorelabStatus::BufferTooSmall);
        unsafe { scorelab_config_free(handle) };
    }

    #[test]
    fn version_is_nul_terminated() {
        let v = unsafe { CStr::from_ptr(scorelab_version()) };
        assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
    }
}
