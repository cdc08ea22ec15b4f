//! C interface to the imexreg toolkit.
//!
//! Every function returns an [`ImexStatus`]. On failure the message is kept
//! per thread and can be read with [`imexreg_last_error`]. Handles are opaque
//! and owned by the caller until passed to the matching `*_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use imexreg::cli::{run_single, CliError, ExperimentConfig};
use imexreg::losses::{ecr_loss, er_loss, supcon_loss};
use imexreg::memory::{BufferItem, ReplayBuffer};
use imexreg::metrics::{forgetting, jl_bound_dim, AccuracyMatrix};
use imexreg::rng::{stream, Stream};
use imexreg::trainer::Method;
use imexreg::{Error, Tape, Tensor};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImexStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    EmptyBuffer = 3,
    ShapeMismatch = 4,
    NumericOverflow = 5,
    Divergence = 6,
    InvalidConfig = 7,
    Io = 8,
    Panic = 9,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = CString::new(msg.into().replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(msg));
}

fn fail(status: ImexStatus, msg: impl Into<String>) -> ImexStatus {
    set_error(msg);
    status
}

fn from_core(e: Error) -> ImexStatus {
    let status = match &e {
        Error::Shape { .. } => ImexStatus::ShapeMismatch,
        Error::NumericOverflow { .. } => ImexStatus::NumericOverflow,
        Error::EmptyBuffer => ImexStatus::EmptyBuffer,
        Error::Divergence { .. } => ImexStatus::Divergence,
        Error::Io(_) => ImexStatus::Io,
        _ => ImexStatus::InvalidArgument,
    };
    fail(status, e.to_string())
}

fn guard(f: impl FnOnce() -> ImexStatus) -> ImexStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(_) => fail(ImexStatus::Panic, "internal panic"),
    }
}

macro_rules! non_null {
    ($($p:ident),+) => {
        $(if $p.is_null() {
            return fail(ImexStatus::NullPointer, concat!("`", stringify!($p), "` is null"));
        })+
    };
}

/// Message of the last failure on this thread, or null. Valid until the next
/// failing call on the same thread.
#[no_mangle]
pub extern "C" fn imexreg_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn imexreg_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Reservoir-sampled replay buffer of fixed feature width.
pub struct ImexBuffer {
    inner: ReplayBuffer,
    dim: usize,
}

/// Creates an empty buffer. `capacity` may be 0.
///
/// # Safety
/// `out` must be a valid pointer to writable storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn imexreg_buffer_new(capacity: usize, dim: usize, seed: u64, out: *mut *mut ImexBuffer) -> ImexStatus {
    non_null!(out);
    if dim == 0 {
        return fail(ImexStatus::InvalidArgument, "feature width must be positive");
    }
    let b = Box::new(ImexBuffer {
        inner: ReplayBuffer::new(capacity, stream(seed, Stream::Buffer)),
        dim,
    });
    *out = Box::into_raw(b);
    ImexStatus::Ok
}

/// # Safety
/// `buffer` must come from [`imexreg_buffer_new`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn imexreg_buffer_free(buffer: *mut ImexBuffer) {
    if !buffer.is_null() {
        drop(Box::from_raw(buffer));
    }
}

/// Offers one sample. `task` < 0 means unknown. `out_slot` receives the slot
/// written or -1.
///
/// # Safety
/// `features` must point to `dim` values; `out_slot` may be null.
#[no_mangle]
pub unsafe extern "C" fn imexreg_buffer_insert(
    buffer: *mut ImexBuffer,
    features: *const f64,
    label: usize,
    task: i64,
    out_slot: *mut i64,
) -> ImexStatus {
    non_null!(buffer, features);
    let b = &mut *buffer;
    let item = BufferItem {
        features: std::slice::from_raw_parts(features, b.dim).to_vec(),
        label,
        task: usize::try_from(task).ok(),
    };
    let slot = b.inner.insert(item);
    if !out_slot.is_null() {
        *out_slot = slot.map_or(-1, |s| s as i64);
    }
    ImexStatus::Ok
}

/// # Safety
/// `buffer` must be a live handle and `out_len`/`out_seen` valid or null.
#[no_mangle]
pub unsafe extern "C" fn imexreg_buffer_stats(buffer: *const ImexBuffer, out_len: *mut usize, out_seen: *mut u64) -> ImexStatus {
    non_null!(buffer);
    let b = &*buffer;
    if !out_len.is_null() {
        *out_len = b.inner.len();
    }
    if !out_seen.is_null() {
        *out_seen = b.inner.seen();
    }
    ImexStatus::Ok
}

/// Draws up to `k` distinct stored items. Output arrays must hold `k` slots,
/// `k` labels and `k * dim` features; `out_count` receives the number drawn.
///
/// # Safety
/// All pointers must be valid for the sizes above.
#[no_mangle]
pub unsafe extern "C" fn imexreg_buffer_sample(
    buffer: *mut ImexBuffer,
    k: usize,
    out_slots: *mut usize,
    out_labels: *mut usize,
    out_features: *mut f64,
    out_count: *mut usize,
) -> ImexStatus {
    non_null!(buffer, out_slots, out_labels, out_features, out_count);
    guard(|| {
        let b = &mut *buffer;
        let (slots, items) = match b.inner.sample(k) {
            Ok(v) => v,
            Err(e) => return from_core(e),
        };
        for (i, (s, it)) in slots.iter().zip(&items).enumerate() {
            *out_slots.add(i) = *s;
            *out_labels.add(i) = it.label;
            ptr::copy_nonoverlapping(it.features.as_ptr(), out_features.add(i * b.dim), b.dim);
        }
        *out_count = slots.len();
        ImexStatus::Ok
    })
}

unsafe fn matrix(data: *const f64, rows: usize, cols: usize) -> Result<Tensor<f64>, ImexStatus> {
    if rows == 0 || cols == 0 {
        return Err(fail(ImexStatus::InvalidArgument, "matrix extents must be positive"));
    }
    Tensor::matrix(rows, cols, std::slice::from_raw_parts(data, rows * cols).to_vec()).map_err(from_core)
}

fn scalar_loss(build: impl FnOnce(&Tape<f64>) -> imexreg::Result<imexreg::Var>, out: *mut f64) -> ImexStatus {
    guard(|| {
        let tape = Tape::new();
        match build(&tape).and_then(|v| tape.scalar(v)) {
            Ok(v) => {
                // SAFETY: checked non-null by the callers.
                unsafe { *out = v };
                ImexStatus::Ok
            }
            Err(e) => from_core(e),
        }
    })
}

/// Mean cross-entropy of row-major `logits` (rows x classes).
///
/// # Safety
/// `logits` holds `rows * classes` values and `labels` holds `rows`.
#[no_mangle]
pub unsafe extern "C" fn imexreg_er_loss(
    logits: *const f64,
    labels: *const usize,
    rows: usize,
    classes: usize,
    out: *mut f64,
) -> ImexStatus {
    non_null!(logits, labels, out);
    let m = match matrix(logits, rows, classes) {
        Ok(m) => m,
        Err(s) => return s,
    };
    let labels = std::slice::from_raw_parts(labels, rows);
    scalar_loss(|t| er_loss(t, t.constant(m), labels), out)
}

/// Supervised contrastive loss of unit rows `z` (rows x dim), summed over
/// anchors.
///
/// # Safety
/// `z` holds `rows * dim` values and `labels` holds `rows`.
#[no_mangle]
pub unsafe extern "C" fn imexreg_supcon_loss(
    z: *const f64,
    labels: *const usize,
    rows: usize,
    dim: usize,
    tau: f64,
    out: *mut f64,
) -> ImexStatus {
    non_null!(z, labels, out);
    let m = match matrix(z, rows, dim) {
        Ok(m) => m,
        Err(s) => return s,
    };
    let labels = std::slice::from_raw_parts(labels, rows);
    scalar_loss(|t| supcon_loss(t, t.constant(m), labels, tau), out)
}

/// Gram-matrix alignment loss between unit rows `z` (rows x dz) and `c`
/// (rows x dc).
///
/// # Safety
/// `z` holds `rows * dz` values and `c` holds `rows * dc`.
#[no_mangle]
pub unsafe extern "C" fn imexreg_ecr_loss(
    z: *const f64,
    c: *const f64,
    rows: usize,
    dz: usize,
    dc: usize,
    out: *mut f64,
) -> ImexStatus {
    non_null!(z, c, out);
    let (mz, mc) = match (matrix(z, rows, dz), matrix(c, rows, dc)) {
        (Ok(a), Ok(b)) => (a, b),
        (Err(s), _) | (_, Err(s)) => return s,
    };
    scalar_loss(|t| ecr_loss(t, t.constant(mz), t.constant(mc)), out)
}

/// Mean forgetting from a packed lower-triangular accuracy matrix: row `i`
/// contributes `i + 1` values, `tasks * (tasks + 1) / 2` in total.
///
/// # Safety
/// `packed` must hold that many values.
#[no_mangle]
pub unsafe extern "C" fn imexreg_forgetting(packed: *const f64, tasks: usize, out: *mut f64) -> ImexStatus {
    non_null!(packed, out);
    let data = std::slice::from_raw_parts(packed, tasks * (tasks + 1) / 2);
    let mut rows = Vec::with_capacity(tasks);
    let mut at = 0;
    for i in 0..tasks {
        rows.push(data[at..at + i + 1].to_vec());
        at += i + 1;
    }
    match AccuracyMatrix::new(rows).and_then(|a| forgetting(&a, false)) {
        Ok(f) => {
            *out = f.mean;
            ImexStatus::Ok
        }
        Err(e) => from_core(e),
    }
}

/// Smallest target dimension guaranteeing `epsilon` distortion for `n` points.
///
/// # Safety
/// `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn imexreg_jl_bound_dim(epsilon: f64, n: usize, out: *mut usize) -> ImexStatus {
    non_null!(out);
    match jl_bound_dim(epsilon, n) {
        Ok(d) => {
            *out = d;
            ImexStatus::Ok
        }
        Err(e) => from_core(e),
    }
}

/// Trains one run described by an experiment config (JSON text) and returns
/// its report as JSON in `out_report`, to be released with
/// [`imexreg_string_free`]. `method` is e.g. "imex-reg"; relative dataset
/// paths resolve against `base_dir`, which may be null.
///
/// # Safety
/// String arguments must be NUL-terminated; `out_report` must be valid.
#[no_mangle]
pub unsafe extern "C" fn imexreg_run_json(
    config_json: *const c_char,
    method: *const c_char,
    seed: u64,
    base_dir: *const c_char,
    out_report: *mut *mut c_char,
) -> ImexStatus {
    non_null!(config_json, method, out_report);
    let text = |p: *const c_char| CStr::from_ptr(p).to_str().map_err(|_| fail(ImexStatus::InvalidArgument, "string is not UTF-8"));
    let (cfg, method_name) = match (text(config_json), text(method)) {
        (Ok(a), Ok(b)) => (a, b),
        (Err(s), _) | (_, Err(s)) => return s,
    };
    let base = if base_dir.is_null() {
        "."
    } else {
        match text(base_dir) {
            Ok(b) => b,
            Err(s) => return s,
        }
    };
    guard(|| {
        let Ok(method) = serde_json::from_value::<Method>(serde_json::Value::String(method_name.into())) else {
            return fail(ImexStatus::InvalidArgument, format!("unknown method {method_name:?}"));
        };
        let result = ExperimentConfig::parse(cfg)
            .and_then(|c| c.train_config().map(|t| (c, t)))
            .and_then(|(c, t)| run_single(&c, &t, Path::new(base), method, seed));
        match result {
            Ok(report) => match serde_json::to_string(&report) {
                Ok(s) => {
                    *out_report = CString::new(s).unwrap_or_default().into_raw();
                    ImexStatus::Ok
                }
                Err(e) => fail(ImexStatus::Io, e.to_string()),
            },
            Err(e) => {
                let status = match e {
                    CliError::Schema(_) => ImexStatus::InvalidConfig,
                    CliError::Divergence { .. } => ImexStatus::Divergence,
                    CliError::Other(_) => ImexStatus::InvalidArgument,
                };
                fail(status, e.to_string())
            }
        }
    })
}

/// Releases a string returned by this library.
///
/// # Safety
/// `s` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn imexreg_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
