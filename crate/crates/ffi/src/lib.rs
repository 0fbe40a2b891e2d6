//! C ABI over the `sltrain` core.
//!
//! Every function returns an [`SltStatus`]; on failure the message is kept per
//! thread and read with [`slt_last_error`]. Handles are opaque and released
//! with their `_free` function. Matrices are row-major `f64` buffers.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use sltrain::harness::{restore, Checkpoint};
use sltrain::kernels::{Matrix, SeededRng};
use sltrain::mem_estimator::{count_sltrain, estimate, MemoryBreakdown};
use sltrain::model::Model;
use sltrain::sl_layer::SlLinear;
use sltrain::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SltStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    ShapeMismatch = 3,
    Io = 4,
    Format = 5,
    Config = 6,
    NumericalFailure = 7,
    Panic = 8,
}

/// One sparse-plus-low-rank linear layer.
pub struct SltLayer {
    inner: SlLinear,
}

/// A model restored from a checkpoint.
pub struct SltModel {
    inner: Model,
}

/// Number counts fed to the memory estimator.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SltMemoryBreakdown {
    pub bf16_param_count: u64,
    pub int64_count: u64,
    pub trainable_count: u64,
    pub extra_optimizer_bf16: u64,
}

/// Bytes and rounded gigabytes (hundredths of 1e9 bytes).
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SltMemoryReport {
    pub param_bytes: u64,
    pub optimizer_bytes: u64,
    pub total_bytes: u64,
    pub param_centi_g: u64,
    pub optimizer_centi_g: u64,
    pub total_centi_g: u64,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> SltStatus {
    match e {
        Error::ShapeMismatch { .. } | Error::LengthMismatch { .. } => SltStatus::ShapeMismatch,
        Error::Io { .. } => SltStatus::Io,
        Error::Format(_) => SltStatus::Format,
        Error::Config(_) => SltStatus::Config,
        Error::NumericalFailure { .. } | Error::NonFinite(_) => SltStatus::NumericalFailure,
        _ => SltStatus::InvalidArgument,
    }
}

struct Fail(SltStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(SltStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> SltStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            SltStatus::Ok
        }
        Ok(Err(Fail(s, msg))) => {
            set_error(&msg);
            s
        }
        Err(_) => {
            set_error("internal panic");
            SltStatus::Panic
        }
    }
}

unsafe fn slice<'a, T>(p: *const T, n: usize, what: &str) -> Result<&'a [T], Fail> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

unsafe fn slice_mut<'a, T>(p: *mut T, n: usize, what: &str) -> Result<&'a mut [T], Fail> {
    if n == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, n))
}

unsafe fn layer<'a>(l: *const SltLayer) -> Result<&'a SlLinear, Fail> {
    l.as_ref().map(|l| &l.inner).ok_or_else(|| null("layer"))
}

unsafe fn write<T>(out: *mut T, v: T, what: &str) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null(what));
    }
    out.write(v);
    Ok(())
}

/// Message of the last failed call on this thread; empty after a success.
/// Valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn slt_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn slt_version() -> *const c_char {
    static V: &str = concat!(env!("CARGO_PKG_VERSION"), "\0");
    V.as_ptr().cast()
}

/// Creates a `d x p` layer with rank `r` and density `delta`.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn slt_layer_new(
    d: usize,
    p: usize,
    r: usize,
    delta: f64,
    alpha: f64,
    seed: u64,
    out: *mut *mut SltLayer,
) -> SltStatus {
    guard(|| {
        let inner = SlLinear::init(d, p, r, delta, alpha, &mut SeededRng::new(seed))?;
        write(out, Box::into_raw(Box::new(SltLayer { inner })), "out")
    })
}

/// # Safety
/// `layer` must come from `slt_layer_new` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn slt_layer_free(layer: *mut SltLayer) {
    if !layer.is_null() {
        drop(Box::from_raw(layer));
    }
}

/// Output rows, input columns, rank and number of sparse entries.
///
/// # Safety
/// `layer` must be valid; output pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn slt_layer_shape(
    layer: *const SltLayer,
    d: *mut usize,
    p: *mut usize,
    r: *mut usize,
    nnz: *mut usize,
) -> SltStatus {
    guard(|| {
        let l = self::layer(layer)?;
        write(d, l.out_dim(), "d")?;
        write(p, l.in_dim(), "p")?;
        write(r, l.low_rank().rank(), "r")?;
        write(nnz, l.sparse().nnz(), "nnz")
    })
}

/// `Z = W X` with `X` of shape `p x n` and `Z` of shape `d x n`.
///
/// # Safety
/// `x` must hold `p * n` values and `z` room for `d * n`.
#[no_mangle]
pub unsafe extern "C" fn slt_layer_forward(layer: *const SltLayer, x: *const f64, n: usize, z: *mut f64) -> SltStatus {
    guard(|| {
        let l = self::layer(layer)?;
        let xm = Matrix::new(l.in_dim(), n, slice(x, l.in_dim() * n, "x")?.to_vec())?;
        let zm = l.forward(&xm)?;
        slice_mut(z, zm.len(), "z")?.copy_from_slice(zm.as_slice());
        Ok(())
    })
}

/// Gradients for cotangent `dz` (`d x n`): `db` (`d x r`), `da` (`r x p`),
/// `dv` (`nnz`, support order) and `dx` (`p x n`).
///
/// # Safety
/// Every buffer must have the documented length.
#[no_mangle]
pub unsafe extern "C" fn slt_layer_backward(
    layer: *const SltLayer,
    x: *const f64,
    dz: *const f64,
    n: usize,
    db: *mut f64,
    da: *mut f64,
    dv: *mut f64,
    dx: *mut f64,
) -> SltStatus {
    guard(|| {
        let l = self::layer(layer)?;
        let (d, p, r) = (l.out_dim(), l.in_dim(), l.low_rank().rank());
        let xm = Matrix::new(p, n, slice(x, p * n, "x")?.to_vec())?;
        let dzm = Matrix::new(d, n, slice(dz, d * n, "dz")?.to_vec())?;
        let g = l.backward(&xm, &dzm)?;
        slice_mut(db, d * r, "db")?.copy_from_slice(g.db.as_slice());
        slice_mut(da, r * p, "da")?.copy_from_slice(g.da.as_slice());
        slice_mut(dv, g.dv.len(), "dv")?.copy_from_slice(&g.dv);
        slice_mut(dx, p * n, "dx")?.copy_from_slice(g.dx.as_slice());
        Ok(())
    })
}

/// Writes the dense `d x p` weight.
///
/// # Safety
/// `w` must have room for `d * p` values.
#[no_mangle]
pub unsafe extern "C" fn slt_layer_densify(layer: *const SltLayer, w: *mut f64) -> SltStatus {
    guard(|| {
        let dense = self::layer(layer)?.densify();
        slice_mut(w, dense.len(), "w")?.copy_from_slice(dense.as_slice());
        Ok(())
    })
}

/// Restores the model stored in a checkpoint file.
///
/// # Safety
/// `path` must be a nul-terminated UTF-8 string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn slt_model_load(path: *const c_char, out: *mut *mut SltModel) -> SltStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| Fail(SltStatus::InvalidArgument, "path is not UTF-8".into()))?;
        let (inner, _, _) = restore(&Checkpoint::load(Path::new(path))?)?;
        write(out, Box::into_raw(Box::new(SltModel { inner })), "out")
    })
}

/// # Safety
/// `model` must come from `slt_model_load` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn slt_model_free(model: *mut SltModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Vocabulary size and total trainable numbers.
///
/// # Safety
/// `model` must be valid; output pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn slt_model_info(model: *const SltModel, vocab: *mut usize, trainable: *mut usize) -> SltStatus {
    guard(|| {
        let m = &model.as_ref().ok_or_else(|| null("model"))?.inner;
        write(vocab, m.config().vocab, "vocab")?;
        write(trainable, m.trainable_count(), "trainable")
    })
}

/// Perplexity over a token stream of at least two ids.
///
/// # Safety
/// `tokens` must hold `len` ids; `ppl` must be writable.
#[no_mangle]
pub unsafe extern "C" fn slt_model_perplexity(
    model: *const SltModel,
    tokens: *const u32,
    len: usize,
    ppl: *mut f64,
) -> SltStatus {
    guard(|| {
        let m = &model.as_ref().ok_or_else(|| null("model"))?.inner;
        let t = slice(tokens, len, "tokens")?;
        if let Some(&bad) = t.iter().find(|&&id| id as usize >= m.config().vocab) {
            return Err(Fail(SltStatus::InvalidArgument, format!("token {bad} outside vocabulary")));
        }
        write(ppl, m.perplexity(t)?, "ppl")
    })
}

fn to_core(b: &SltMemoryBreakdown) -> MemoryBreakdown {
    MemoryBreakdown {
        bf16_param_count: b.bf16_param_count,
        int64_count: b.int64_count,
        trainable_count: b.trainable_count,
        extra_optimizer_bf16: b.extra_optimizer_bf16,
    }
}

/// Memory of parameters and Adam state under the bf16 convention.
///
/// # Safety
/// `counts` must be readable and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn slt_estimate_memory(counts: *const SltMemoryBreakdown, out: *mut SltMemoryReport) -> SltStatus {
    guard(|| {
        let r = estimate(&to_core(counts.as_ref().ok_or_else(|| null("counts"))?));
        write(
            out,
            SltMemoryReport {
                param_bytes: r.param_bytes,
                optimizer_bytes: r.optimizer_bytes,
                total_bytes: r.total_bytes,
                param_centi_g: r.param_centi_g,
                optimizer_centi_g: r.optimizer_centi_g,
                total_centi_g: r.total_centi_g,
            },
            "out",
        )
    })
}

/// Counts for sparse-plus-low-rank pretraining of the `(d, p)` pairs in
/// `shapes` (`2 * n_shapes` values) plus `non_adapted` dense numbers.
///
/// # Safety
/// `shapes` must hold `2 * n_shapes` values and `out` be writable.
#[no_mangle]
pub unsafe extern "C" fn slt_count_sltrain(
    shapes: *const usize,
    n_shapes: usize,
    non_adapted: u64,
    r: usize,
    delta: f64,
    out: *mut SltMemoryBreakdown,
) -> SltStatus {
    guard(|| {
        let flat = slice(shapes, 2 * n_shapes, "shapes")?;
        let pairs: Vec<(usize, usize)> = flat.chunks_exact(2).map(|c| (c[0], c[1])).collect();
        let b = count_sltrain(&pairs, non_adapted, r, delta)?;
        write(
            out,
            SltMemoryBreakdown {
                bf16_param_count: b.bf16_param_count,
                int64_count: b.int64_count,
                trainable_count: b.trainable_count,
                extra_optimizer_bf16: b.extra_optimizer_bf16,
            },
            "out",
        )
    })
}
