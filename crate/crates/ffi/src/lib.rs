//! C ABI over the gmner core: CRF inference, embedding stores, similarity,
//! entropy, IoU, top-k selection and file-level evaluation.
//!
//! Every fallible function returns a [`GmnerStatus`]; on failure the message
//! is available from [`gmner_last_error`] on the same thread. Handles are
//! opaque and must be released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use gmner::crf::{load_checkpoint, CrfModel};
use gmner::dataset::{load_dataset, BoundingBox, DatasetFormat, Schema};
use gmner::embedding::{cosine_slices, EmbeddingStore};
use gmner::eval::{self, MatchMode};
use gmner::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GmnerStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    DimMismatch = 4,
    Io = 5,
    Format = 6,
    NotFound = 7,
    BufferTooSmall = 8,
    Panic = 9,
}

/// Axis-aligned box in pixel coordinates, `min` inclusive and `max` exclusive.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GmnerBox {
    pub x_min: i32,
    pub y_min: i32,
    pub x_max: i32,
    pub y_max: i32,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GmnerPrf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub gold: usize,
    pub pred: usize,
    pub correct: usize,
}

/// Opaque CRF model.
pub struct GmnerCrf(CrfModel);

/// Opaque embedding store.
pub struct GmnerStore(EmbeddingStore);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Fail(GmnerStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::DimMismatch { .. } => GmnerStatus::DimMismatch,
            Error::Io { .. } => GmnerStatus::Io,
            Error::MissingKey(_) => GmnerStatus::NotFound,
            Error::EmbeddingFormat(_)
            | Error::Checkpoint(_)
            | Error::Json { .. }
            | Error::Schema { .. }
            | Error::SpanAlignment { .. }
            | Error::OverlappingSpans { .. }
            | Error::NonFinite(_)
            | Error::DuplicateKey(_) => GmnerStatus::Format,
            _ => GmnerStatus::InvalidArgument,
        };
        Fail(status, e.to_string())
    }
}

fn fail(status: GmnerStatus, msg: impl Into<String>) -> Fail {
    Fail(status, msg.into())
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> GmnerStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            GmnerStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            GmnerStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(fail(GmnerStatus::NullPointer, format!("`{name}` is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(GmnerStatus::InvalidUtf8, format!("`{name}` is not UTF-8")))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, name: &str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(fail(GmnerStatus::NullPointer, format!("`{name}` is null")));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn out_arg<'a, T>(p: *mut T, name: &str) -> Result<&'a mut T, Fail> {
    p.as_mut()
        .ok_or_else(|| fail(GmnerStatus::NullPointer, format!("`{name}` is null")))
}

unsafe fn out_slice<'a, T>(p: *mut T, len: usize, name: &str) -> Result<&'a mut [T], Fail> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(fail(GmnerStatus::NullPointer, format!("`{name}` is null")));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn crf_ref<'a>(h: *const GmnerCrf) -> Result<&'a CrfModel, Fail> {
    h.as_ref()
        .map(|m| &m.0)
        .ok_or_else(|| fail(GmnerStatus::NullPointer, "CRF handle is null"))
}

unsafe fn store_ref<'a>(h: *const GmnerStore) -> Result<&'a EmbeddingStore, Fail> {
    h.as_ref()
        .map(|s| &s.0)
        .ok_or_else(|| fail(GmnerStatus::NullPointer, "store handle is null"))
}

/// Splits a row-major `n_tokens × dim` buffer into rows.
unsafe fn rows<'a>(emb: *const f64, n_tokens: usize, dim: usize) -> Result<Vec<&'a [f64]>, Fail> {
    if n_tokens == 0 {
        return Err(fail(GmnerStatus::InvalidArgument, "empty sequence"));
    }
    let flat = slice_arg(emb, n_tokens * dim, "embeddings")?;
    Ok(flat.chunks(dim.max(1)).take(n_tokens).collect())
}

/// Message for the last failed call on this thread, or null. Valid until the
/// next gmner call on the same thread.
#[no_mangle]
pub extern "C" fn gmner_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn gmner_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a checkpoint and its JSON sidecar.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gmner_crf_load(path: *const c_char, out: *mut *mut GmnerCrf) -> GmnerStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let (model, _) = load_checkpoint(Path::new(str_arg(path, "path")?))?;
        *out = Box::into_raw(Box::new(GmnerCrf(model)));
        Ok(())
    })
}

/// Builds a model from a flat parameter vector: emission weights (L×D),
/// emission bias (L), transitions (L×L, from-major), start (L), end (L).
///
/// # Safety
/// `params` must hold `n_params` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gmner_crf_from_params(
    labels: usize,
    dim: usize,
    params: *const f64,
    n_params: usize,
    out: *mut *mut GmnerCrf,
) -> GmnerStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let p = slice_arg(params, n_params, "params")?;
        let model = CrfModel::from_params(labels, dim, p.to_vec())?;
        *out = Box::into_raw(Box::new(GmnerCrf(model)));
        Ok(())
    })
}

/// Releases a CRF handle; null is ignored.
///
/// # Safety
/// `h` must come from a gmner constructor and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn gmner_crf_free(h: *mut GmnerCrf) {
    if !h.is_null() {
        drop(Box::from_raw(h));
    }
}

/// Label count, or 0 for a null handle.
///
/// # Safety
/// `h` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn gmner_crf_labels(h: *const GmnerCrf) -> usize {
    h.as_ref().map_or(0, |m| m.0.labels())
}

/// Feature dimension, or 0 for a null handle.
///
/// # Safety
/// `h` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn gmner_crf_dim(h: *const GmnerCrf) -> usize {
    h.as_ref().map_or(0, |m| m.0.dim())
}

/// Best label path for a row-major `n_tokens × dim` embedding buffer.
///
/// # Safety
/// `emb` must hold `n_tokens × dim` doubles, `out_labels` room for
/// `n_tokens` entries; `out_score` may be null.
#[no_mangle]
pub unsafe extern "C" fn gmner_crf_viterbi(
    h: *const GmnerCrf,
    emb: *const f64,
    n_tokens: usize,
    out_labels: *mut u32,
    out_score: *mut f64,
) -> GmnerStatus {
    guard(|| {
        let m = crf_ref(h)?;
        let x = rows(emb, n_tokens, m.dim())?;
        let out = out_slice(out_labels, n_tokens, "out_labels")?;
        let path = m.viterbi(&x)?;
        for (o, l) in out.iter_mut().zip(&path.labels) {
            *o = *l as u32;
        }
        if let Some(s) = out_score.as_mut() {
            *s = path.score;
        }
        Ok(())
    })
}

/// Posterior marginals, written row-major as `n_tokens × labels`.
///
/// # Safety
/// `emb` must hold `n_tokens × dim` doubles, `out` `n_tokens × labels`.
#[no_mangle]
pub unsafe extern "C" fn gmner_crf_marginals(
    h: *const GmnerCrf,
    emb: *const f64,
    n_tokens: usize,
    out: *mut f64,
) -> GmnerStatus {
    guard(|| {
        let m = crf_ref(h)?;
        let x = rows(emb, n_tokens, m.dim())?;
        let out = out_slice(out, n_tokens * m.labels(), "out")?;
        let table = m.marginals(&x)?;
        for (dst, row) in out.chunks_mut(m.labels()).zip(table.rows()) {
            dst.copy_from_slice(row);
        }
        Ok(())
    })
}

/// Log partition function of the sequence.
///
/// # Safety
/// `emb` must hold `n_tokens × dim` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gmner_crf_log_partition(
    h: *const GmnerCrf,
    emb: *const f64,
    n_tokens: usize,
    out: *mut f64,
) -> GmnerStatus {
    guard(|| {
        let m = crf_ref(h)?;
        let x = rows(emb, n_tokens, m.dim())?;
        *out_arg(out, "out")? = m.log_partition(&x)?;
        Ok(())
    })
}

/// Opens an embedding store (binary or JSON lines).
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gmner_store_load(path: *const c_char, out: *mut *mut GmnerStore) -> GmnerStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let store = EmbeddingStore::load(Path::new(str_arg(path, "path")?))?;
        *out = Box::into_raw(Box::new(GmnerStore(store)));
        Ok(())
    })
}

/// Releases a store handle; null is ignored.
///
/// # Safety
/// `h` must come from [`gmner_store_load`] and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn gmner_store_free(h: *mut GmnerStore) {
    if !h.is_null() {
        drop(Box::from_raw(h));
    }
}

/// Vector dimension, or 0 for a null handle.
///
/// # Safety
/// `h` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn gmner_store_dim(h: *const GmnerStore) -> usize {
    h.as_ref().map_or(0, |s| s.0.dim())
}

/// Number of stored vectors, or 0 for a null handle.
///
/// # Safety
/// `h` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn gmner_store_len(h: *const GmnerStore) -> usize {
    h.as_ref().map_or(0, |s| s.0.len())
}

/// Copies the vector stored under `key` into `out`.
///
/// # Safety
/// `key` must be NUL-terminated; `out` must have room for `cap` doubles.
#[no_mangle]
pub unsafe extern "C" fn gmner_store_get(
    h: *const GmnerStore,
    key: *const c_char,
    out: *mut f64,
    cap: usize,
) -> GmnerStatus {
    guard(|| {
        let s = store_ref(h)?;
        let v = s.get(str_arg(key, "key")?)?.values();
        if cap < v.len() {
            return Err(fail(
                GmnerStatus::BufferTooSmall,
                format!("need {} doubles, got {cap}", v.len()),
            ));
        }
        out_slice(out, v.len(), "out")?.copy_from_slice(v);
        Ok(())
    })
}

/// Cosine similarity of two stored vectors.
///
/// # Safety
/// Keys must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gmner_store_cosine(
    h: *const GmnerStore,
    a: *const c_char,
    b: *const c_char,
    out: *mut f64,
) -> GmnerStatus {
    guard(|| {
        let s = store_ref(h)?;
        let va = s.get(str_arg(a, "a")?)?;
        let vb = s.get(str_arg(b, "b")?)?;
        *out_arg(out, "out")? = gmner::embedding::cosine(va, vb)?;
        Ok(())
    })
}

/// Cosine similarity of two length-`n` vectors; zero-norm input is an error.
///
/// # Safety
/// `a` and `b` must hold `n` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gmner_cosine(a: *const f64, b: *const f64, n: usize, out: *mut f64) -> GmnerStatus {
    guard(|| {
        let a = slice_arg(a, n, "a")?;
        let b = slice_arg(b, n, "b")?;
        *out_arg(out, "out")? = cosine_slices(a, b)?;
        Ok(())
    })
}

/// Shannon entropy (nats) of one probability row.
///
/// # Safety
/// `row` must hold `n` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gmner_token_entropy(row: *const f64, n: usize, out: *mut f64) -> GmnerStatus {
    guard(|| {
        let r = slice_arg(row, n, "row")?;
        *out_arg(out, "out")? = gmner::uncertainty::token_entropy(r)?;
        Ok(())
    })
}

/// Intersection over union; 0 when the union is empty.
#[no_mangle]
pub extern "C" fn gmner_iou(a: GmnerBox, b: GmnerBox) -> f64 {
    let cv = |g: GmnerBox| BoundingBox {
        x_min: g.x_min,
        y_min: g.y_min,
        x_max: g.x_max,
        y_max: g.y_max,
    };
    eval::iou(&cv(a), &cv(b))
}

/// Indices of the `k` largest scores, best first; ties go to the lower index.
///
/// # Safety
/// `scores` must hold `n` doubles, `out` room for `k` entries.
#[no_mangle]
pub unsafe extern "C" fn gmner_topk(scores: *const f64, n: usize, k: usize, out: *mut usize) -> GmnerStatus {
    guard(|| {
        let s = slice_arg(scores, n, "scores")?;
        let o = out_slice(out, k, "out")?;
        o.copy_from_slice(&gmner::icl::top_k(s, k)?);
        Ok(())
    })
}

/// Scores a predictions file against a gold dataset. `types` lists the
/// schema's entity types; `text_only` ignores regions.
///
/// # Safety
/// Paths and every entry of `types` must be NUL-terminated strings; `types`
/// must hold `n_types` pointers; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gmner_eval_files(
    gold_path: *const c_char,
    pred_path: *const c_char,
    types: *const *const c_char,
    n_types: usize,
    text_only: bool,
    out: *mut GmnerPrf,
) -> GmnerStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let names = slice_arg(types, n_types, "types")?
            .iter()
            .map(|&t| str_arg(t, "types[i]"))
            .collect::<Result<Vec<_>, _>>()?;
        let schema = Schema::new(&names)?;
        let gold = load_dataset(
            Path::new(str_arg(gold_path, "gold_path")?),
            DatasetFormat::JsonLines,
            &schema,
        )?;
        let pred = eval::read_predictions(Path::new(str_arg(pred_path, "pred_path")?), &gold)?;
        let mode = if text_only { MatchMode::Text } else { MatchMode::Triplet };
        let r = eval::score(&gold, &pred, mode, "ffi")?;
        *out = GmnerPrf {
            precision: r.precision,
            recall: r.recall,
            f1: r.f1,
            gold: r.counts.gold,
            pred: r.counts.pred,
            correct: r.counts.correct,
        };
        Ok(())
    })
}
