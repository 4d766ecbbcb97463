//! C ABI for the protofuse pipeline.
//!
//! Conventions: every function returns a [`PfStatus`]; results come back
//! through out-pointers. Handles (`PfPrototypeBank`, `PfSlideSummary`) are
//! opaque and must be released with their matching `_free` function. The
//! last error message for the calling thread is available through
//! [`pf_last_error_message`] (free it with [`pf_string_free`]). Matrix
//! buffers are row-major `double` arrays.

use protofuse::aggregation::{
    aggregate_gmm, aggregate_hc, aggregate_ot, gmm_posteriors, GmmConfig, PatchEmbeddingSet,
    SlideSummary,
};
use protofuse::error::Error;
use protofuse::fusion::check_lemma1;
use protofuse::numerics::{Matrix, SeededRng};
use protofuse::prototypes::{fit_kmeans, nearest_prototype, KMeansConfig, PrototypeBank};
use protofuse::sinkhorn::SinkhornConfig;
use protofuse::survival::{concordance_index, cox_gradient, cox_loss, logrank_test, SurvivalRecord};
use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

/// Status code returned by every FFI entry point.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PfStatus {
    PfOk = 0,
    PfNullPointer = 1,
    PfArgumentError = 2,
    PfDataError = 3,
    PfConvergenceError = 4,
    PfVerificationFailure = 5,
    PfUtf8Error = 6,
    PfPanic = 7,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg).unwrap_or_else(|_| CString::new("invalid error text").unwrap());
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(c));
}

fn clear_error() {
    LAST_ERROR.with(|slot| *slot.borrow_mut() = None);
}

fn status_of(e: &Error) -> PfStatus {
    match e {
        Error::Argument(_) => PfStatus::PfArgumentError,
        Error::Convergence { .. } => PfStatus::PfConvergenceError,
        Error::Verification(_) => PfStatus::PfVerificationFailure,
        _ => PfStatus::PfDataError,
    }
}

fn guard<F: FnOnce() -> PfStatus>(f: F) -> PfStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => status,
        Err(_) => {
            set_error("panic crossed the FFI boundary".to_string());
            PfStatus::PfPanic
        }
    }
}

fn fail(e: Error) -> PfStatus {
    let status = status_of(&e);
    set_error(e.to_string());
    status
}

unsafe fn slice_arg<'a>(ptr: *const f64, len: usize) -> Option<&'a [f64]> {
    if ptr.is_null() && len > 0 {
        None
    } else if len == 0 {
        Some(&[])
    } else {
        Some(std::slice::from_raw_parts(ptr, len))
    }
}

unsafe fn str_arg<'a>(ptr: *const c_char) -> Result<&'a str, PfStatus> {
    if ptr.is_null() {
        return Err(PfStatus::PfNullPointer);
    }
    CStr::from_ptr(ptr).to_str().map_err(|_| {
        set_error("argument is not valid UTF-8".to_string());
        PfStatus::PfUtf8Error
    })
}

fn records_from(times: &[f64], events: &[u8]) -> Result<Vec<SurvivalRecord>, Error> {
    times
        .iter()
        .zip(events)
        .enumerate()
        .map(|(i, (&t, &e))| SurvivalRecord::new(format!("p{i}"), t, e != 0))
        .collect()
}

/// Opaque handle to a fitted prototype bank.
pub struct PfPrototypeBank {
    inner: PrototypeBank,
}

/// Opaque handle to a slide summary.
pub struct PfSlideSummary {
    inner: SlideSummary,
}

/// Library version as a static string; do not free.
#[no_mangle]
pub extern "C" fn pf_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Last error message for this thread, or NULL when the last call succeeded.
/// The caller owns the returned string and must release it with
/// `pf_string_free`.
#[no_mangle]
pub extern "C" fn pf_last_error_message() -> *mut c_char {
    LAST_ERROR.with(|slot| match &*slot.borrow() {
        Some(msg) => msg.clone().into_raw(),
        None => std::ptr::null_mut(),
    })
}

/// Release a string returned by this library.
///
/// # Safety
/// `s` must be a pointer previously returned by a protofuse FFI function and
/// not yet freed; NULL is ignored.
#[no_mangle]
pub unsafe extern "C" fn pf_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Fit a K-means prototype bank over row-major `points` (n x dim).
///
/// # Safety
/// `points` must reference n*dim readable doubles and `out` a writable slot.
#[no_mangle]
pub unsafe extern "C" fn pf_bank_fit_kmeans(
    points: *const f64,
    n: usize,
    dim: usize,
    prototype_count: usize,
    seed: u64,
    out: *mut *mut PfPrototypeBank,
) -> PfStatus {
    guard(|| {
        if out.is_null() {
            return PfStatus::PfNullPointer;
        }
        let Some(data) = slice_arg(points, n * dim) else {
            return PfStatus::PfNullPointer;
        };
        let matrix = match Matrix::from_vec(n, dim, data.to_vec()) {
            Ok(m) => m,
            Err(e) => return fail(e),
        };
        let cfg = KMeansConfig {
            prototype_count,
            ..Default::default()
        };
        match fit_kmeans(&matrix, &cfg, &mut SeededRng::new(seed)) {
            Ok(fit) => {
                *out = Box::into_raw(Box::new(PfPrototypeBank { inner: fit.bank }));
                PfStatus::PfOk
            }
            Err(e) => fail(e),
        }
    })
}

/// Load a bank from its CSV serialization.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` a writable slot.
#[no_mangle]
pub unsafe extern "C" fn pf_bank_load_csv(
    path: *const c_char,
    out: *mut *mut PfPrototypeBank,
) -> PfStatus {
    guard(|| {
        if out.is_null() {
            return PfStatus::PfNullPointer;
        }
        let path = match str_arg(path) {
            Ok(p) => p,
            Err(status) => return status,
        };
        match protofuse::io::load_bank_csv(std::path::Path::new(path)) {
            Ok(bank) => {
                *out = Box::into_raw(Box::new(PfPrototypeBank { inner: bank }));
                PfStatus::PfOk
            }
            Err(e) => fail(e),
        }
    })
}

/// Write a bank to CSV.
///
/// # Safety
/// `bank` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn pf_bank_save_csv(
    bank: *const PfPrototypeBank,
    path: *const c_char,
) -> PfStatus {
    guard(|| {
        if bank.is_null() {
            return PfStatus::PfNullPointer;
        }
        let path = match str_arg(path) {
            Ok(p) => p,
            Err(status) => return status,
        };
        match protofuse::io::write_bank_csv(std::path::Path::new(path), &(*bank).inner) {
            Ok(()) => PfStatus::PfOk,
            Err(e) => fail(e),
        }
    })
}

/// Number of prototypes in the bank (0 for NULL).
///
/// # Safety
/// `bank` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn pf_bank_count(bank: *const PfPrototypeBank) -> usize {
    if bank.is_null() {
        0
    } else {
        (*bank).inner.count()
    }
}

/// Embedding dimension of the bank (0 for NULL).
///
/// # Safety
/// `bank` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn pf_bank_dim(bank: *const PfPrototypeBank) -> usize {
    if bank.is_null() {
        0
    } else {
        (*bank).inner.dim()
    }
}

/// Copy the centroid matrix (count x dim, row-major) into `out`.
///
/// # Safety
/// `out` must reference `len` writable doubles with len >= count*dim.
#[no_mangle]
pub unsafe extern "C" fn pf_bank_centroids(
    bank: *const PfPrototypeBank,
    out: *mut f64,
    len: usize,
) -> PfStatus {
    guard(|| {
        if bank.is_null() || out.is_null() {
            return PfStatus::PfNullPointer;
        }
        let data = (*bank).inner.centroids().data();
        if len < data.len() {
            set_error(format!("buffer holds {len} values, need {}", data.len()));
            return PfStatus::PfArgumentError;
        }
        std::ptr::copy_nonoverlapping(data.as_ptr(), out, data.len());
        PfStatus::PfOk
    })
}

/// Index of the prototype closest to `z` (squared L2, lowest index on ties).
///
/// # Safety
/// `z` must reference `dim` readable doubles; `out_index` a writable slot.
#[no_mangle]
pub unsafe extern "C" fn pf_bank_nearest(
    bank: *const PfPrototypeBank,
    z: *const f64,
    dim: usize,
    out_index: *mut usize,
) -> PfStatus {
    guard(|| {
        if bank.is_null() || out_index.is_null() {
            return PfStatus::PfNullPointer;
        }
        let Some(query) = slice_arg(z, dim) else {
            return PfStatus::PfNullPointer;
        };
        match nearest_prototype(&(*bank).inner, query) {
            Ok(idx) => {
                *out_index = idx;
                PfStatus::PfOk
            }
            Err(e) => fail(e),
        }
    })
}

/// Release a bank handle.
///
/// # Safety
/// `bank` must be NULL or a live handle; it is invalid afterwards.
#[no_mangle]
pub unsafe extern "C" fn pf_bank_free(bank: *mut PfPrototypeBank) {
    if !bank.is_null() {
        drop(Box::from_raw(bank));
    }
}

unsafe fn patch_set(
    patches: *const f64,
    n: usize,
    dim: usize,
) -> Result<PatchEmbeddingSet, PfStatus> {
    let Some(data) = slice_arg(patches, n * dim) else {
        return Err(PfStatus::PfNullPointer);
    };
    let m = Matrix::from_vec(n, dim, data.to_vec()).map_err(fail)?;
    PatchEmbeddingSet::new("ffi", m).map_err(fail)
}

/// GMM aggregation against the bank; summary rows are [pi, mu, sigma].
///
/// # Safety
/// `patches` must reference n*dim readable doubles; `out` a writable slot.
#[no_mangle]
pub unsafe extern "C" fn pf_aggregate_gmm(
    bank: *const PfPrototypeBank,
    patches: *const f64,
    n: usize,
    dim: usize,
    em_iters: usize,
    out: *mut *mut PfSlideSummary,
) -> PfStatus {
    guard(|| {
        if bank.is_null() || out.is_null() {
            return PfStatus::PfNullPointer;
        }
        let set = match patch_set(patches, n, dim) {
            Ok(s) => s,
            Err(status) => return status,
        };
        let cfg = GmmConfig {
            em_iters,
            ..Default::default()
        };
        match aggregate_gmm(&set, &(*bank).inner, &cfg) {
            Ok(summary) => {
                *out = Box::into_raw(Box::new(PfSlideSummary { inner: summary }));
                PfStatus::PfOk
            }
            Err(e) => fail(e),
        }
    })
}

/// Hard-clustering aggregation (empty prototypes emit their centroid).
///
/// # Safety
/// Same contracts as `pf_aggregate_gmm`.
#[no_mangle]
pub unsafe extern "C" fn pf_aggregate_hc(
    bank: *const PfPrototypeBank,
    patches: *const f64,
    n: usize,
    dim: usize,
    out: *mut *mut PfSlideSummary,
) -> PfStatus {
    guard(|| {
        if bank.is_null() || out.is_null() {
            return PfStatus::PfNullPointer;
        }
        let set = match patch_set(patches, n, dim) {
            Ok(s) => s,
            Err(status) => return status,
        };
        match aggregate_hc(&set, &(*bank).inner) {
            Ok(summary) => {
                *out = Box::into_raw(Box::new(PfSlideSummary { inner: summary }));
                PfStatus::PfOk
            }
            Err(e) => fail(e),
        }
    })
}

/// Entropic-OT aggregation. `epsilon <= 0` selects the default
/// (0.1 x mean cost); marginals are checked to `marginal_tol`.
///
/// # Safety
/// Same contracts as `pf_aggregate_gmm`.
#[no_mangle]
pub unsafe extern "C" fn pf_aggregate_ot(
    bank: *const PfPrototypeBank,
    patches: *const f64,
    n: usize,
    dim: usize,
    epsilon: f64,
    max_iters: usize,
    marginal_tol: f64,
    out: *mut *mut PfSlideSummary,
) -> PfStatus {
    guard(|| {
        if bank.is_null() || out.is_null() {
            return PfStatus::PfNullPointer;
        }
        let set = match patch_set(patches, n, dim) {
            Ok(s) => s,
            Err(status) => return status,
        };
        let cfg = SinkhornConfig {
            epsilon: if epsilon > 0.0 { epsilon } else { 0.1 },
            relative_epsilon: epsilon <= 0.0,
            max_iters,
            marginal_tol,
            ..Default::default()
        };
        match aggregate_ot(&set, &(*bank).inner, &cfg) {
            Ok(summary) => {
                *out = Box::into_raw(Box::new(PfSlideSummary { inner: summary }));
                PfStatus::PfOk
            }
            Err(e) => fail(e),
        }
    })
}

/// Final-iteration GMM responsibilities q(c|z_i), row-major n x count.
///
/// # Safety
/// `out` must reference `len >= n*count` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn pf_gmm_posteriors(
    bank: *const PfPrototypeBank,
    patches: *const f64,
    n: usize,
    dim: usize,
    em_iters: usize,
    out: *mut f64,
    len: usize,
) -> PfStatus {
    guard(|| {
        if bank.is_null() || out.is_null() {
            return PfStatus::PfNullPointer;
        }
        let set = match patch_set(patches, n, dim) {
            Ok(s) => s,
            Err(status) => return status,
        };
        let cfg = GmmConfig {
            em_iters,
            ..Default::default()
        };
        match gmm_posteriors(&set, &(*bank).inner, &cfg) {
            Ok(resp) => {
                if len < resp.data().len() {
                    set_error(format!(
                        "buffer holds {len} values, need {}",
                        resp.data().len()
                    ));
                    return PfStatus::PfArgumentError;
                }
                std::ptr::copy_nonoverlapping(resp.data().as_ptr(), out, resp.data().len());
                PfStatus::PfOk
            }
            Err(e) => fail(e),
        }
    })
}

/// Row count of a summary (0 for NULL).
///
/// # Safety
/// `summary` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn pf_summary_count(summary: *const PfSlideSummary) -> usize {
    if summary.is_null() {
        0
    } else {
        (*summary).inner.prototype_count()
    }
}

/// Per-row width of a summary (2*dim+1 for GMM, dim otherwise; 0 for NULL).
///
/// # Safety
/// `summary` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn pf_summary_dim(summary: *const PfSlideSummary) -> usize {
    if summary.is_null() {
        0
    } else {
        (*summary).inner.summary_dim()
    }
}

/// Copy the summary matrix (count x dim, row-major) into `out`.
///
/// # Safety
/// `out` must reference `len >= count*dim` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn pf_summary_rows(
    summary: *const PfSlideSummary,
    out: *mut f64,
    len: usize,
) -> PfStatus {
    guard(|| {
        if summary.is_null() || out.is_null() {
            return PfStatus::PfNullPointer;
        }
        let data = (*summary).inner.rows.data();
        if len < data.len() {
            set_error(format!("buffer holds {len} values, need {}", data.len()));
            return PfStatus::PfArgumentError;
        }
        std::ptr::copy_nonoverlapping(data.as_ptr(), out, data.len());
        PfStatus::PfOk
    })
}

/// Release a summary handle.
///
/// # Safety
/// `summary` must be NULL or a live handle; it is invalid afterwards.
#[no_mangle]
pub unsafe extern "C" fn pf_summary_free(summary: *mut PfSlideSummary) {
    if !summary.is_null() {
        drop(Box::from_raw(summary));
    }
}

/// Negative Cox partial log-likelihood (Breslow ties). `events[i]` nonzero
/// means death observed.
///
/// # Safety
/// `scores`, `times`, `events` must each reference n readable elements;
/// `out` a writable double.
#[no_mangle]
pub unsafe extern "C" fn pf_cox_loss(
    scores: *const f64,
    times: *const f64,
    events: *const u8,
    n: usize,
    out: *mut f64,
) -> PfStatus {
    guard(|| {
        if out.is_null() || events.is_null() {
            return PfStatus::PfNullPointer;
        }
        let (Some(s), Some(t)) = (slice_arg(scores, n), slice_arg(times, n)) else {
            return PfStatus::PfNullPointer;
        };
        let ev = std::slice::from_raw_parts(events, n);
        let records = match records_from(t, ev) {
            Ok(r) => r,
            Err(e) => return fail(e),
        };
        match cox_loss(s, &records) {
            Ok(v) => {
                *out = v;
                PfStatus::PfOk
            }
            Err(e) => fail(e),
        }
    })
}

/// Analytic gradient of the Cox loss with respect to the scores.
///
/// # Safety
/// As `pf_cox_loss`; `out` must reference n writable doubles.
#[no_mangle]
pub unsafe extern "C" fn pf_cox_gradient(
    scores: *const f64,
    times: *const f64,
    events: *const u8,
    n: usize,
    out: *mut f64,
) -> PfStatus {
    guard(|| {
        if out.is_null() || events.is_null() {
            return PfStatus::PfNullPointer;
        }
        let (Some(s), Some(t)) = (slice_arg(scores, n), slice_arg(times, n)) else {
            return PfStatus::PfNullPointer;
        };
        let ev = std::slice::from_raw_parts(events, n);
        let records = match records_from(t, ev) {
            Ok(r) => r,
            Err(e) => return fail(e),
        };
        match cox_gradient(s, &records) {
            Ok(g) => {
                std::ptr::copy_nonoverlapping(g.as_ptr(), out, n);
                PfStatus::PfOk
            }
            Err(e) => fail(e),
        }
    })
}

/// Harrell concordance index (ties weight one half).
///
/// # Safety
/// As `pf_cox_loss`.
#[no_mangle]
pub unsafe extern "C" fn pf_concordance_index(
    scores: *const f64,
    times: *const f64,
    events: *const u8,
    n: usize,
    out: *mut f64,
) -> PfStatus {
    guard(|| {
        if out.is_null() || events.is_null() {
            return PfStatus::PfNullPointer;
        }
        let (Some(s), Some(t)) = (slice_arg(scores, n), slice_arg(times, n)) else {
            return PfStatus::PfNullPointer;
        };
        let ev = std::slice::from_raw_parts(events, n);
        let records = match records_from(t, ev) {
            Ok(r) => r,
            Err(e) => return fail(e),
        };
        match concordance_index(s, &records) {
            Ok(v) => {
                *out = v;
                PfStatus::PfOk
            }
            Err(e) => fail(e),
        }
    })
}

/// Two-group log-rank test; chi-square statistic and 1-df p-value.
///
/// # Safety
/// Each times/events pair must reference the stated number of elements;
/// `out_chi_sq` and `out_p` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pf_logrank_test(
    times_a: *const f64,
    events_a: *const u8,
    n_a: usize,
    times_b: *const f64,
    events_b: *const u8,
    n_b: usize,
    out_chi_sq: *mut f64,
    out_p: *mut f64,
) -> PfStatus {
    guard(|| {
        if out_chi_sq.is_null() || out_p.is_null() || events_a.is_null() || events_b.is_null() {
            return PfStatus::PfNullPointer;
        }
        let (Some(ta), Some(tb)) = (slice_arg(times_a, n_a), slice_arg(times_b, n_b)) else {
            return PfStatus::PfNullPointer;
        };
        let ea = std::slice::from_raw_parts(events_a, n_a);
        let eb = std::slice::from_raw_parts(events_b, n_b);
        let (ra, rb) = match (records_from(ta, ea), records_from(tb, eb)) {
            (Ok(a), Ok(b)) => (a, b),
            (Err(e), _) | (_, Err(e)) => return fail(e),
        };
        match logrank_test(&ra, &rb) {
            Ok(lr) => {
                *out_chi_sq = lr.chi_sq;
                *out_p = lr.p;
                PfStatus::PfOk
            }
            Err(e) => fail(e),
        }
    })
}

/// Numerical check of the OT / cross-attention equivalence on caller-supplied
/// token and projection matrices (all row-major: z_g is c_g x d, z_h is
/// c_h x d, w_q and w are d x d).
///
/// # Safety
/// All matrix pointers must reference their stated extents; out-pointers
/// must be writable.
#[no_mangle]
pub unsafe extern "C" fn pf_check_lemma1(
    z_g: *const f64,
    c_g: usize,
    z_h: *const f64,
    c_h: usize,
    d: usize,
    w_q: *const f64,
    w: *const f64,
    tol: f64,
    out_max_dev: *mut f64,
    out_pass: *mut u8,
) -> PfStatus {
    guard(|| {
        if out_max_dev.is_null() || out_pass.is_null() {
            return PfStatus::PfNullPointer;
        }
        let (Some(zg), Some(zh), Some(wq), Some(ww)) = (
            slice_arg(z_g, c_g * d),
            slice_arg(z_h, c_h * d),
            slice_arg(w_q, d * d),
            slice_arg(w, d * d),
        ) else {
            return PfStatus::PfNullPointer;
        };
        let build = |r: usize, c: usize, data: &[f64]| Matrix::from_vec(r, c, data.to_vec());
        let (zg, zh, wq, ww) = match (
            build(c_g, d, zg),
            build(c_h, d, zh),
            build(d, d, wq),
            build(d, d, ww),
        ) {
            (Ok(a), Ok(b), Ok(c2), Ok(d2)) => (a, b, c2, d2),
            _ => {
                set_error("matrix construction failed".to_string());
                return PfStatus::PfArgumentError;
            }
        };
        match check_lemma1(&zg, &zh, &wq, &ww, tol) {
            Ok(rep) => {
                *out_max_dev = rep.max_abs_dev;
                *out_pass = rep.pass as u8;
                PfStatus::PfOk
            }
            Err(e) => fail(e),
        }
    })
}

/// Run the full pipeline from a key = value config file; on success returns
/// the metrics JSON through `metrics_json_out` (free with `pf_string_free`).
///
/// # Safety
/// `config_path` must be NUL-terminated; `metrics_json_out` writable.
#[no_mangle]
pub unsafe extern "C" fn pf_run_pipeline(
    config_path: *const c_char,
    metrics_json_out: *mut *mut c_char,
) -> PfStatus {
    guard(|| {
        if metrics_json_out.is_null() {
            return PfStatus::PfNullPointer;
        }
        let path = match str_arg(config_path) {
            Ok(p) => p,
            Err(status) => return status,
        };
        let mut cfg = protofuse::pipeline::PipelineConfig::default();
        if let Err(e) = cfg.load_file(std::path::Path::new(path)) {
            return fail(e);
        }
        if let Err(e) = protofuse::pipeline::cmd_run(&cfg) {
            return fail(e);
        }
        let metrics_path = cfg.output_dir.join("metrics.json");
        match std::fs::read_to_string(&metrics_path) {
            Ok(text) => match CString::new(text) {
                Ok(c) => {
                    *metrics_json_out = c.into_raw();
                    PfStatus::PfOk
                }
                Err(_) => {
                    set_error("metrics JSON contained an interior NUL".to_string());
                    PfStatus::PfDataError
                }
            },
            Err(e) => fail(Error::io(metrics_path.display().to_string(), e)),
        }
    })
}

/// Run the self-contained verification suite; PF_OK when every check passes.
#[no_mangle]
pub extern "C" fn pf_verify() -> PfStatus {
    guard(|| match protofuse::pipeline::run_verification(None) {
        Ok(checks) => {
            let failing: Vec<&str> = checks
                .iter()
                .filter(|c| !c.pass)
                .map(|c| c.name)
                .collect();
            if failing.is_empty() {
                PfStatus::PfOk
            } else {
                set_error(format!("failing checks: {}", failing.join(", ")));
                PfStatus::PfVerificationFailure
            }
        }
        Err(e) => fail(e),
    })
}
