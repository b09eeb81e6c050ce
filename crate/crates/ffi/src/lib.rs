//! C interface to the generator, the finite-difference oracle, the norm
//! report and the shard planner.
//!
//! Every fallible function returns a [`PdgnStatus`]; on failure
//! [`pdgn_last_error`] describes the most recent error on the calling thread.
//! Generators are opaque handles released with [`pdgn_generator_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use pdegen_core::autodiff::Tensor;
use pdegen_core::distributed::ShardPlan;
use pdegen_core::model::{checkpoint_precision, Generator, GeneratorConfig};
use pdegen_core::oracle::{compute_norms, solve_fdm, FdmConfig, Field};
use pdegen_core::pde_loss::initial_condition;
use pdegen_core::{Error, Precision, Scalar};

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PdgnStatus {
    Ok = 0,
    /// A null pointer, a short buffer or an out-of-range value.
    InvalidArgument = 1,
    /// Shapes or sizes that do not fit together.
    Shape = 2,
    Config = 3,
    /// A non-finite value or another numerical failure.
    Numerical = 4,
    /// A file that is not a valid checkpoint or field.
    Format = 5,
    Io = 6,
    /// The library panicked; this is a bug.
    Internal = 7,
}

/// Parameter precision of a generator.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PdgnPrecision {
    F32 = 0,
    F64 = 1,
}

enum Model {
    F32(Generator<f32>),
    F64(Generator<f64>),
}

/// Opaque generator handle.
pub struct PdgnGenerator {
    model: Model,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> PdgnStatus {
    match e {
        Error::Shape { .. } => PdgnStatus::Shape,
        Error::InvalidArgument(_) => PdgnStatus::InvalidArgument,
        Error::Config(_) => PdgnStatus::Config,
        Error::NonFinite(_) | Error::Numerical(_) => PdgnStatus::Numerical,
        Error::Format(_) => PdgnStatus::Format,
        Error::Io(_) => PdgnStatus::Io,
        Error::Transport { .. } | Error::Timeout { .. } | Error::ReplicaDivergence(_) => {
            PdgnStatus::Internal
        }
    }
}

fn guard(f: impl FnOnce() -> Result<(), Error>) -> PdgnStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => PdgnStatus::Ok,
        Ok(Err(e)) => {
            set_error(&e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("internal error: the library panicked");
            PdgnStatus::Internal
        }
    }
}

fn invalid(msg: &str) -> Error {
    Error::InvalidArgument(msg.into())
}

unsafe fn path_arg(path: *const c_char) -> Result<PathBuf, Error> {
    if path.is_null() {
        return Err(invalid("path is null"));
    }
    let s = CStr::from_ptr(path)
        .to_str()
        .map_err(|_| invalid("path is not valid UTF-8"))?;
    Ok(PathBuf::from(s))
}

unsafe fn out_slice<'a>(ptr: *mut f64, len: usize, need: usize) -> Result<&'a mut [f64], Error> {
    if ptr.is_null() {
        return Err(invalid("output buffer is null"));
    }
    if len < need {
        return Err(invalid(&format!("output buffer holds {len} values, {need} needed")));
    }
    Ok(std::slice::from_raw_parts_mut(ptr, need))
}

unsafe fn in_slice<'a>(ptr: *const f64, len: usize) -> Result<&'a [f64], Error> {
    if ptr.is_null() {
        return Err(invalid("input buffer is null"));
    }
    Ok(std::slice::from_raw_parts(ptr, len))
}

fn infer_into<S: Scalar>(g: &Generator<S>, c: f64, out: &mut [f64]) -> Result<(), Error> {
    let n = g.config().resolution;
    let field = g.infer(&Tensor::from_f64(&[1, n], &initial_condition(c, n))?)?;
    for (o, v) in out.iter_mut().zip(field.data()) {
        *o = v.as_f64();
    }
    Ok(())
}

/// Message of the last failed call on this thread; empty if none. The
/// pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn pdgn_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Creates a freshly initialized generator for `resolution x resolution`
/// fields with the default architecture.
///
/// # Safety
/// `out` must be a valid pointer to writable handle storage.
#[no_mangle]
pub unsafe extern "C" fn pdgn_generator_new(
    resolution: usize,
    seed: u64,
    precision: PdgnPrecision,
    out: *mut *mut PdgnGenerator,
) -> PdgnStatus {
    guard(|| {
        if out.is_null() {
            return Err(invalid("handle pointer is null"));
        }
        let cfg = GeneratorConfig::new(resolution, seed);
        let model = match precision {
            PdgnPrecision::F32 => Model::F32(Generator::new(cfg)?),
            PdgnPrecision::F64 => Model::F64(Generator::new(cfg)?),
        };
        *out = Box::into_raw(Box::new(PdgnGenerator { model }));
        Ok(())
    })
}

/// Loads a checkpoint written by training.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pdgn_generator_load(
    path: *const c_char,
    out: *mut *mut PdgnGenerator,
) -> PdgnStatus {
    guard(|| {
        if out.is_null() {
            return Err(invalid("handle pointer is null"));
        }
        let bytes = fs::read(path_arg(path)?)?;
        let model = match checkpoint_precision(&bytes)? {
            Precision::F32 => Model::F32(Generator::from_checkpoint_bytes(&bytes)?),
            Precision::F64 => Model::F64(Generator::from_checkpoint_bytes(&bytes)?),
        };
        *out = Box::into_raw(Box::new(PdgnGenerator { model }));
        Ok(())
    })
}

/// Writes the generator as a checkpoint file.
///
/// # Safety
/// `gen` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn pdgn_generator_save(
    gen: *const PdgnGenerator,
    path: *const c_char,
) -> PdgnStatus {
    guard(|| {
        let g = gen.as_ref().ok_or_else(|| invalid("generator is null"))?;
        let mut buf = Vec::new();
        match &g.model {
            Model::F32(m) => m.write_checkpoint(&mut buf)?,
            Model::F64(m) => m.write_checkpoint(&mut buf)?,
        }
        fs::write(path_arg(path)?, buf)?;
        Ok(())
    })
}

/// Field resolution `N` of the generator, or 0 for a null handle.
///
/// # Safety
/// `gen` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn pdgn_generator_resolution(gen: *const PdgnGenerator) -> usize {
    match gen.as_ref().map(|g| &g.model) {
        Some(Model::F32(m)) => m.config().resolution,
        Some(Model::F64(m)) => m.config().resolution,
        None => 0,
    }
}

/// Evaluates the generator for parameter `c` and writes the `N x N` field,
/// rows at increasing time, into `out` (capacity `len`).
///
/// # Safety
/// `gen` must be a live handle and `out` must point to `len` writable values.
#[no_mangle]
pub unsafe extern "C" fn pdgn_generator_infer(
    gen: *const PdgnGenerator,
    c: f64,
    out: *mut f64,
    len: usize,
) -> PdgnStatus {
    guard(|| {
        let g = gen.as_ref().ok_or_else(|| invalid("generator is null"))?;
        if !c.is_finite() {
            return Err(invalid("c must be finite"));
        }
        let n = pdgn_generator_resolution(gen);
        let out = out_slice(out, len, n * n)?;
        match &g.model {
            Model::F32(m) => infer_into(m, c, out),
            Model::F64(m) => infer_into(m, c, out),
        }
    })
}

/// Releases a generator. Null is ignored.
///
/// # Safety
/// `gen` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn pdgn_generator_free(gen: *mut PdgnGenerator) {
    if !gen.is_null() {
        drop(Box::from_raw(gen));
    }
}

/// Finite-difference reference solution on the `n x n` output grid.
/// `nx = 0` selects the default cell count and `cfl <= 0` the default
/// Courant number.
///
/// # Safety
/// `out` must point to `len` writable values.
#[no_mangle]
pub unsafe extern "C" fn pdgn_solve(
    c: f64,
    n: usize,
    nx: usize,
    cfl: f64,
    out: *mut f64,
    len: usize,
) -> PdgnStatus {
    guard(|| {
        let mut cfg = FdmConfig::default();
        if nx > 0 {
            cfg.nx = Some(nx);
        }
        if cfl > 0.0 {
            cfg.cfl = cfl;
        }
        let out = out_slice(out, len, n.checked_mul(n).ok_or_else(|| invalid("n too large"))?)?;
        let field = solve_fdm(c, &cfg, n)?;
        out.copy_from_slice(&field.data);
        Ok(())
    })
}

/// Discrete L2 norms of two `n x n` fields: writes `norm_g`, `norm_fd` and
/// `norm_delta` to `out[0..3]`.
///
/// # Safety
/// `generated` and `reference` must point to `n*n` values, `out` to 3.
#[no_mangle]
pub unsafe extern "C" fn pdgn_norms(
    n: usize,
    generated: *const f64,
    reference: *const f64,
    out: *mut f64,
) -> PdgnStatus {
    guard(|| {
        let nn = n.checked_mul(n).ok_or_else(|| invalid("n too large"))?;
        let g = Field::new(n, 0.0, in_slice(generated, nn)?.to_vec())?;
        let r = Field::new(n, 0.0, in_slice(reference, nn)?.to_vec())?;
        let report = compute_norms(&g, &r)?;
        out_slice(out, 3, 3)?.copy_from_slice(&[report.norm_g, report.norm_fd, report.norm_delta]);
        Ok(())
    })
}

/// Sample range `[start, end)` owned by `rank` in mini-batch `minibatch`
/// when `samples` samples in batches of `batch` are split over `workers`.
/// Counts that do not divide evenly are rounded as in training.
///
/// # Safety
/// `start` and `end` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn pdgn_shard(
    samples: usize,
    batch: usize,
    workers: usize,
    minibatch: usize,
    rank: usize,
    start: *mut usize,
    end: *mut usize,
) -> PdgnStatus {
    guard(|| {
        if start.is_null() || end.is_null() {
            return Err(invalid("range pointers are null"));
        }
        let r = ShardPlan::new(samples, batch, workers)?.shard(minibatch, rank)?;
        *start = r.start;
        *end = r.end;
        Ok(())
    })
}
