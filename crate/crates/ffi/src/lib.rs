//! C ABI over the quoteflow core.
//!
//! Every fallible function returns a [`QfStatus`]. On failure the message is
//! kept per thread and can be read with [`qf_last_error`] until the next call
//! on that thread. Panics never cross the boundary; they surface as
//! `QF_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{CStr, CString};
use std::panic::{self, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use libc::{c_char, c_int, size_t};
use nalgebra::DMatrix;
use quoteflow::causal::compute_exposures;
use quoteflow::cluster::{hdbscan, ClusterParams, Selection};
use quoteflow::corpus::{ingest, Corpus, IngestOptions};
use quoteflow::embed::ReducedMatrix;
use quoteflow::pipeline::{run_from_path, Stage};
use quoteflow::salience::{salience_from_counts, Discount, FormulaVariant, SalienceConfig};
use quoteflow::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QfStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Parse = 4,
    Config = 5,
    MissingArtifact = 6,
    Internal = 7,
    Panic = 8,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QfVariant {
    MainText = 0,
    Supplement = 1,
    Figure2 = 2,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QfDiscount {
    Identity = 0,
    Sqrt = 1,
    Log1p = 2,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QfSelection {
    ExcessOfMass = 0,
    Leaf = 1,
}

/// Loaded, validated corpus. Create with [`qf_corpus_load`], release with
/// [`qf_corpus_free`].
pub struct QfCorpus {
    inner: Corpus,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn status_of(err: &Error) -> QfStatus {
    match err {
        Error::Io { .. } => QfStatus::Io,
        Error::Parse { .. } | Error::Csv(_) | Error::Json(_) => QfStatus::Parse,
        Error::Config(_) => QfStatus::Config,
        Error::MissingArtifact { .. } => QfStatus::MissingArtifact,
        Error::Internal(_) => QfStatus::Internal,
        _ => QfStatus::InvalidArgument,
    }
}

/// Runs `f`, recording any error or panic as the thread's last error.
fn guard(f: impl FnOnce() -> Result<(), (QfStatus, String)>) -> QfStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match panic::catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => QfStatus::Ok,
        Ok(Err((status, msg))) => {
            set_last_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_last_error(format!("panic: {msg}"));
            QfStatus::Panic
        }
    }
}

fn core_err(e: Error) -> (QfStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (QfStatus, String) {
    (QfStatus::NullPointer, format!("`{what}` is null"))
}

fn invalid(msg: impl Into<String>) -> (QfStatus, String) {
    (QfStatus::InvalidArgument, msg.into())
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, (QfStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| invalid(format!("`{what}` is not valid UTF-8")))?;
    Ok(PathBuf::from(s))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], (QfStatus, String)> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_out<'a, T>(p: *mut T, len: usize, what: &str) -> Result<&'a mut [T], (QfStatus, String)> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

fn checked_len(a: usize, b: usize) -> Result<usize, (QfStatus, String)> {
    a.checked_mul(b).ok_or_else(|| invalid("buffer size overflows"))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn qf_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or NULL. The pointer is
/// valid until the next quoteflow call on the same thread.
#[no_mangle]
pub extern "C" fn qf_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Loads records (JSONL) and outlets (JSONL) with default ingest options.
///
/// # Safety
/// Both paths must be NUL-terminated strings; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn qf_corpus_load(
    records_path: *const c_char,
    outlets_path: *const c_char,
    out: *mut *mut QfCorpus,
) -> QfStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let records = path_arg(records_path, "records_path")?;
        let outlets = path_arg(outlets_path, "outlets_path")?;
        let (corpus, _) = ingest(&records, &outlets, &IngestOptions::default()).map_err(core_err)?;
        *out = Box::into_raw(Box::new(QfCorpus { inner: corpus }));
        Ok(())
    })
}

/// Releases a corpus. NULL is ignored.
///
/// # Safety
/// `corpus` must come from [`qf_corpus_load`] and not be freed already.
#[no_mangle]
pub unsafe extern "C" fn qf_corpus_free(corpus: *mut QfCorpus) {
    if !corpus.is_null() {
        drop(Box::from_raw(corpus));
    }
}

/// Number of records; 0 for NULL.
///
/// # Safety
/// `corpus` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn qf_corpus_len(corpus: *const QfCorpus) -> size_t {
    corpus.as_ref().map_or(0, |c| c.inner.len())
}

/// Number of outlets; 0 for NULL.
///
/// # Safety
/// `corpus` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn qf_corpus_outlet_count(corpus: *const QfCorpus) -> size_t {
    corpus.as_ref().map_or(0, |c| c.inner.outlets().len())
}

/// Salience of one quote for a follower from its counts.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn qf_salience_from_counts(
    s_q: size_t,
    n_j: size_t,
    n_after: size_t,
    variant: QfVariant,
    g1: QfDiscount,
    g2: QfDiscount,
    out: *mut f64,
) -> QfStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        if n_after > n_j {
            return Err(invalid(format!("n_after {n_after} exceeds n_j {n_j}")));
        }
        let discount = |d| match d {
            QfDiscount::Identity => Discount::Identity,
            QfDiscount::Sqrt => Discount::Sqrt,
            QfDiscount::Log1p => Discount::Log1p,
        };
        let cfg = SalienceConfig {
            variant: match variant {
                QfVariant::MainText => FormulaVariant::MainText,
                QfVariant::Supplement => FormulaVariant::Supplement,
                QfVariant::Figure2 => FormulaVariant::Figure2,
            },
            g1: discount(g1),
            g2: discount(g2),
        };
        *out = salience_from_counts(s_q, n_j, n_after, &cfg);
        Ok(())
    })
}

/// Log-exposures `s^(h)` for hops `1..=n_hop`.
///
/// `adjacency` is `n * n` row-major; `z` has `n` entries. `out` receives
/// `n_hop * n` values, hop-major.
///
/// # Safety
/// Buffers must hold the stated number of elements.
#[no_mangle]
pub unsafe extern "C" fn qf_exposures(
    adjacency: *const f64,
    n: size_t,
    z: *const f64,
    n_hop: size_t,
    out: *mut f64,
) -> QfStatus {
    guard(|| {
        let a = slice_arg(adjacency, checked_len(n, n)?, "adjacency")?;
        let z = slice_arg(z, n, "z")?;
        let out = slice_out(out, checked_len(n_hop, n)?, "out")?;
        let a = DMatrix::from_row_slice(n, n, a);
        let tensor = compute_exposures(&a, z, n_hop).map_err(core_err)?;
        for (h, hop) in tensor.hops.iter().enumerate() {
            out[h * n..(h + 1) * n].copy_from_slice(hop);
        }
        Ok(())
    })
}

/// HDBSCAN on `n` points of dimension `dim` (row-major).
///
/// `labels` receives the cluster of each point or -1 for noise;
/// `probabilities` (may be NULL) the membership strengths.
///
/// # Safety
/// Buffers must hold the stated number of elements; `n_clusters` must be
/// writable.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn qf_hdbscan(
    points: *const f64,
    n: size_t,
    dim: size_t,
    min_cluster_size: size_t,
    min_samples: size_t,
    selection: QfSelection,
    labels: *mut i64,
    probabilities: *mut f64,
    n_clusters: *mut size_t,
) -> QfStatus {
    guard(|| {
        if n_clusters.is_null() {
            return Err(null("n_clusters"));
        }
        let pts = slice_arg(points, checked_len(n, dim)?, "points")?;
        let labels = slice_out(labels, n, "labels")?;
        let reduced = ReducedMatrix::from_points((0..n).map(|i| i.to_string()).collect(), DMatrix::from_row_slice(n, dim, pts));
        let params = ClusterParams {
            min_cluster_size,
            min_samples,
            selection: match selection {
                QfSelection::ExcessOfMass => Selection::ExcessOfMass,
                QfSelection::Leaf => Selection::Leaf,
            },
            ..ClusterParams::default()
        };
        let result = hdbscan(&reduced, &params).map_err(core_err)?;
        for (slot, label) in labels.iter_mut().zip(&result.labels) {
            *slot = label.map_or(-1, |l| l as i64);
        }
        if !probabilities.is_null() {
            std::slice::from_raw_parts_mut(probabilities, n).copy_from_slice(&result.probabilities);
        }
        *n_clusters = result.n_clusters;
        Ok(())
    })
}

/// Runs a pipeline stage (`"ingest"`, ..., `"report"`, `"simulate"` or
/// `"all"`) from a JSON config. `executed` (may be NULL) receives the number
/// of stages that ran rather than being served from cache.
///
/// # Safety
/// Strings must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn qf_pipeline_run(
    config_path: *const c_char,
    stage: *const c_char,
    force: c_int,
    executed: *mut size_t,
) -> QfStatus {
    guard(|| {
        let config = path_arg(config_path, "config_path")?;
        if stage.is_null() {
            return Err(null("stage"));
        }
        let name = CStr::from_ptr(stage).to_string_lossy();
        let stage = Stage::SEQUENCE
            .into_iter()
            .chain([Stage::Simulate, Stage::All])
            .find(|s| s.as_str() == name)
            .ok_or_else(|| invalid(format!("unknown stage `{name}`")))?;
        let summary = run_from_path(stage, &config, force != 0).map_err(core_err)?;
        if !executed.is_null() {
            *executed = summary.executed.len();
        }
        Ok(())
    })
}
