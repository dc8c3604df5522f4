//! C ABI over trained checkpoints: load once, score sample rows or whole
//! files. All functions are panic-safe; failures return a status code and
//! leave a message retrievable via `duin_last_error` on the same thread.
//!
//! The generated header lands in `include/duin.h` at build time.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use duin_core::checkpoint::{load_checkpoint, LoadedCheckpoint};
use duin_core::data;
use duin_core::metrics::auc;
use duin_core::trainer::score;

/// Result of every fallible call. Mirrors the CLI exit codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DuinStatus {
    DuinOk = 0,
    /// Null pointer, empty buffer, or a string that is not UTF-8.
    DuinInvalidArgument = 1,
    /// Unreadable or malformed files, unknown rows, degenerate inputs.
    DuinDataError = 2,
    /// Non-finite arithmetic or an internal panic.
    DuinNumericError = 3,
}

/// Opaque scorer produced by `duin_open`; release with `duin_close`.
#[repr(C)]
pub struct DuinModel {
    _private: [u8; 0],
}

struct Inner {
    loaded: LoadedCheckpoint,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").unwrap());
}

fn set_error(msg: &str) {
    let sanitized: String = msg.chars().filter(|&c| c != '\0').collect();
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(sanitized).unwrap();
    });
}

fn fail(status: DuinStatus, msg: &str) -> DuinStatus {
    set_error(msg);
    status
}

/// # Safety
/// `ptr` must be null or a NUL-terminated string valid for the call.
unsafe fn utf8_arg<'a>(ptr: *const c_char, what: &str) -> Result<&'a str, DuinStatus> {
    if ptr.is_null() {
        return Err(fail(
            DuinStatus::DuinInvalidArgument,
            &format!("{what} is null"),
        ));
    }
    CStr::from_ptr(ptr).to_str().map_err(|_| {
        fail(
            DuinStatus::DuinInvalidArgument,
            &format!("{what} is not valid UTF-8"),
        )
    })
}

fn guarded(body: impl FnOnce() -> DuinStatus) -> DuinStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(status) => status,
        Err(_) => fail(DuinStatus::DuinNumericError, "internal panic"),
    }
}

/// Message for the most recent failure on this thread. The pointer stays
/// valid until the next failing call on the same thread. Never null.
#[no_mangle]
pub extern "C" fn duin_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Crate version as a static string.
#[no_mangle]
pub extern "C" fn duin_version() -> *const c_char {
    static VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), "\0");
    VERSION.as_ptr() as *const c_char
}

/// Loads a checkpoint directory (weights, vocabularies, graph) and writes
/// the handle to `out`.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn duin_open(path: *const c_char, out: *mut *mut DuinModel) -> DuinStatus {
    guarded(|| {
        if out.is_null() {
            return fail(DuinStatus::DuinInvalidArgument, "out handle is null");
        }
        let path = match utf8_arg(path, "checkpoint path") {
            Ok(p) => p,
            Err(status) => return status,
        };
        match load_checkpoint(Path::new(path)) {
            Ok(loaded) => {
                let boxed = Box::new(Inner { loaded });
                *out = Box::into_raw(boxed) as *mut DuinModel;
                DuinStatus::DuinOk
            }
            Err(e) => fail(DuinStatus::DuinDataError, &e.to_string()),
        }
    })
}

/// Releases a handle. Null is a no-op.
///
/// # Safety
/// `handle` must have come from `duin_open` and not been closed before.
#[no_mangle]
pub unsafe extern "C" fn duin_close(handle: *mut DuinModel) {
    if !handle.is_null() {
        drop(Box::from_raw(handle as *mut Inner));
    }
}

unsafe fn inner_ref<'a>(handle: *const DuinModel) -> Result<&'a Inner, DuinStatus> {
    if handle.is_null() {
        return Err(fail(DuinStatus::DuinInvalidArgument, "model handle is null"));
    }
    Ok(&*(handle as *const Inner))
}

/// Scores one sample row in the prepared-samples TSV layout (11 tab
/// separated fields, no header) and writes the click probability.
///
/// # Safety
/// `handle` must be open; `row` NUL-terminated; `out_prob` valid.
#[no_mangle]
pub unsafe extern "C" fn duin_score_row(
    handle: *const DuinModel,
    row: *const c_char,
    out_prob: *mut f64,
) -> DuinStatus {
    guarded(|| {
        if out_prob.is_null() {
            return fail(DuinStatus::DuinInvalidArgument, "out_prob is null");
        }
        let inner = match inner_ref(handle) {
            Ok(i) => i,
            Err(status) => return status,
        };
        let row = match utf8_arg(row, "sample row") {
            Ok(r) => r,
            Err(status) => return status,
        };
        let raw = match data::parse_sample_row(row) {
            Ok(r) => r,
            Err(e) => return fail(DuinStatus::DuinDataError, &e.to_string()),
        };
        let samples = data::intern_samples(&inner.loaded.vocabs, std::slice::from_ref(&raw));
        match score(&inner.loaded.model, &inner.loaded.graph, &samples) {
            Ok(probs) if probs[0].is_finite() => {
                *out_prob = probs[0];
                DuinStatus::DuinOk
            }
            Ok(_) => fail(DuinStatus::DuinNumericError, "non-finite score"),
            Err(e) => fail(DuinStatus::DuinNumericError, &e.to_string()),
        }
    })
}

/// Scores a whole samples TSV (with header) and writes the ranking AUC of
/// the stored labels.
///
/// # Safety
/// `handle` must be open; `path` NUL-terminated; `out_auc` valid.
#[no_mangle]
pub unsafe extern "C" fn duin_score_file(
    handle: *const DuinModel,
    path: *const c_char,
    out_auc: *mut f64,
) -> DuinStatus {
    guarded(|| {
        if out_auc.is_null() {
            return fail(DuinStatus::DuinInvalidArgument, "out_auc is null");
        }
        let inner = match inner_ref(handle) {
            Ok(i) => i,
            Err(status) => return status,
        };
        let path = match utf8_arg(path, "samples path") {
            Ok(p) => p,
            Err(status) => return status,
        };
        let raw = match data::read_samples(Path::new(path)) {
            Ok(r) => r,
            Err(e) => return fail(DuinStatus::DuinDataError, &e.to_string()),
        };
        let labels: Vec<bool> = raw.iter().map(|s| s.label == 1).collect();
        let samples = data::intern_samples(&inner.loaded.vocabs, &raw);
        let scores = match score(&inner.loaded.model, &inner.loaded.graph, &samples) {
            Ok(s) => s,
            Err(e) => return fail(DuinStatus::DuinNumericError, &e.to_string()),
        };
        match auc(&scores, &labels) {
            Ok(value) => {
                *out_auc = value;
                DuinStatus::DuinOk
            }
            Err(e) => fail(DuinStatus::DuinDataError, &e.to_string()),
        }
    })
}
