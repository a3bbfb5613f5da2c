//! C ABI for progdistill.
//!
//! Every fallible function returns a [`PdStatus`]; on failure a message is
//! available from [`pd_last_error`] on the same thread. Models are opaque
//! handles created by [`pd_model_load`] and released with [`pd_model_free`].
//! Arrays are row-major `double` buffers owned by the caller.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use ndarray::ArrayView2;
use progdistill::diffusion::LossWeighting;
use progdistill::metrics::energy_distance;
use progdistill::net::{Model, Weights};
use progdistill::rng::Streams;
use progdistill::samplers::{ddim_step, sample_final, SamplerKind};
use progdistill::schedule::{alpha_sigma, SchedulePoint, StepGrid, TimePoint};
use progdistill::{Error, Result};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PdStatus {
    Ok = 0,
    NullPointer = 1,
    Domain = 2,
    ZeroSnr = 3,
    Shape = 4,
    Divergence = 5,
    Config = 6,
    Io = 7,
    Checkpoint = 8,
    InvalidString = 9,
    Panic = 10,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PdLossWeighting {
    Snr = 0,
    TruncatedSnr = 1,
    SnrPlusOne = 2,
}

/// Opaque model handle.
pub struct PdModel {
    model: Model,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> PdStatus {
    match e {
        Error::Domain(_) => PdStatus::Domain,
        Error::ZeroSnr(_) => PdStatus::ZeroSnr,
        Error::Shape { .. } => PdStatus::Shape,
        Error::DegenerateDenominator { .. } => PdStatus::Domain,
        Error::Divergence(_) => PdStatus::Divergence,
        Error::Config(_) => PdStatus::Config,
        Error::Checkpoint { .. } => PdStatus::Checkpoint,
        Error::Json(_) | Error::Io(_) => PdStatus::Io,
    }
}

enum Fail {
    Null(&'static str),
    Utf8,
    Lib(Error),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Lib(e)
    }
}

/// Run `f`, translating errors and panics into a status code.
fn guard(f: impl FnOnce() -> std::result::Result<(), Fail>) -> PdStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            PdStatus::Ok
        }
        Ok(Err(Fail::Null(what))) => {
            set_error(&format!("null pointer: {what}"));
            PdStatus::NullPointer
        }
        Ok(Err(Fail::Utf8)) => {
            set_error("string argument is not valid UTF-8");
            PdStatus::InvalidString
        }
        Ok(Err(Fail::Lib(e))) => {
            set_error(&e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("internal panic");
            PdStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &'static str) -> std::result::Result<&'a str, Fail> {
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| Fail::Utf8)
}

unsafe fn slice_arg<'a>(
    p: *const f64,
    len: usize,
    what: &'static str,
) -> std::result::Result<&'a [f64], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn out_slice<'a>(
    p: *mut f64,
    len: usize,
    what: &'static str,
) -> std::result::Result<&'a mut [f64], Fail> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn out_ref<'a, T>(p: *mut T, what: &'static str) -> std::result::Result<&'a mut T, Fail> {
    p.as_mut().ok_or(Fail::Null(what))
}

fn weights(use_ema: bool) -> Weights {
    if use_ema {
        Weights::Ema
    } else {
        Weights::Raw
    }
}

/// Last error message on this thread; empty after a successful call. The
/// pointer stays valid until the next library call on the same thread.
#[no_mangle]
pub extern "C" fn pd_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn pd_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Load a checkpoint file into a new handle.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pd_model_load(path: *const c_char, out: *mut *mut PdModel) -> PdStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        *out = std::ptr::null_mut();
        let path = str_arg(path, "path")?;
        let model = Model::load(Path::new(path))?;
        *out = Box::into_raw(Box::new(PdModel { model }));
        Ok(())
    })
}

/// Release a handle; null is ignored.
///
/// # Safety
/// `model` must come from [`pd_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn pd_model_free(model: *mut PdModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Data dimension of the model.
///
/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pd_model_dim(model: *const PdModel, out: *mut usize) -> PdStatus {
    guard(|| {
        let m = model.as_ref().ok_or(Fail::Null("model"))?;
        *out_ref(out, "out")? = m.model.dim();
        Ok(())
    })
}

/// `x_hat` for `rows` latents `z` (rows x dim) at times `t` (one per row).
///
/// # Safety
/// `z` and `out` must hold `rows * dim` doubles, `t` must hold `rows`.
#[no_mangle]
pub unsafe extern "C" fn pd_model_predict_x(
    model: *const PdModel,
    z: *const f64,
    t: *const f64,
    rows: usize,
    use_ema: bool,
    out: *mut f64,
) -> PdStatus {
    guard(|| {
        let m = &model.as_ref().ok_or(Fail::Null("model"))?.model;
        let d = m.dim();
        let z = slice_arg(z, rows * d, "z")?;
        let t = slice_arg(t, rows, "t")?;
        let out = out_slice(out, rows * d, "out")?;
        let points: Vec<SchedulePoint> = t
            .iter()
            .map(|&t| TimePoint::new(t).map(alpha_sigma))
            .collect::<Result<_>>()?;
        let zv = ArrayView2::from_shape((rows, d), z).map_err(|e| Error::Domain(e.to_string()))?;
        let x = m.predict_x(weights(use_ema), zv, &points)?;
        out.copy_from_slice(x.as_slice().expect("standard layout"));
        Ok(())
    })
}

/// Draw `count` samples with `sampler` (e.g. "ddim", "ancestral:0.5") on an
/// `steps`-step grid. `out` receives `count * dim` doubles.
///
/// # Safety
/// `sampler` must be NUL-terminated; `out` must hold `count * dim` doubles.
#[no_mangle]
pub unsafe extern "C" fn pd_model_sample(
    model: *const PdModel,
    sampler: *const c_char,
    steps: usize,
    count: usize,
    seed: u64,
    use_ema: bool,
    out: *mut f64,
) -> PdStatus {
    guard(|| {
        let m = &model.as_ref().ok_or(Fail::Null("model"))?.model;
        let kind: SamplerKind = str_arg(sampler, "sampler")?.parse()?;
        let out = out_slice(out, count * m.dim(), "out")?;
        let x = sample_final(
            &m.denoiser(weights(use_ema)),
            kind,
            &StepGrid::new(steps)?,
            &Streams::new(seed),
            count,
        )?;
        out.copy_from_slice(x.as_slice().expect("standard layout"));
        Ok(())
    })
}

/// Schedule coefficients and log-SNR at `t` (log-SNR is +/-infinity at the endpoints).
///
/// # Safety
/// Output pointers must be valid; any may be null to skip it.
#[no_mangle]
pub unsafe extern "C" fn pd_alpha_sigma(
    t: f64,
    alpha: *mut f64,
    sigma: *mut f64,
    log_snr: *mut f64,
) -> PdStatus {
    guard(|| {
        let p = alpha_sigma(TimePoint::new(t)?);
        if let Some(a) = alpha.as_mut() {
            *a = p.alpha;
        }
        if let Some(s) = sigma.as_mut() {
            *s = p.sigma;
        }
        if let Some(l) = log_snr.as_mut() {
            *l = p.log_snr.as_f64();
        }
        Ok(())
    })
}

/// Loss weight at log-SNR `lambda` (infinite values select the endpoint limits).
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pd_loss_weight(
    lambda: f64,
    weighting: PdLossWeighting,
    out: *mut f64,
) -> PdStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        if lambda.is_nan() {
            return Err(Error::Domain("log-SNR is NaN".into()).into());
        }
        let l = if lambda == f64::INFINITY {
            progdistill::schedule::LogSnr::Clean
        } else if lambda == f64::NEG_INFINITY {
            progdistill::schedule::LogSnr::ZeroSnr
        } else {
            progdistill::schedule::LogSnr::Finite(lambda)
        };
        let w = match weighting {
            PdLossWeighting::Snr => LossWeighting::Snr,
            PdLossWeighting::TruncatedSnr => LossWeighting::TruncatedSnr,
            PdLossWeighting::SnrPlusOne => LossWeighting::SnrPlusOne,
        };
        *out = progdistill::diffusion::loss_weight(l, w);
        Ok(())
    })
}

/// One DDIM step `t -> s` of a `dim`-vector given the denoiser output `x_hat`.
///
/// # Safety
/// `z`, `x_hat` and `out` must hold `dim` doubles.
#[no_mangle]
pub unsafe extern "C" fn pd_ddim_step(
    z: *const f64,
    x_hat: *const f64,
    dim: usize,
    t: f64,
    s: f64,
    out: *mut f64,
) -> PdStatus {
    guard(|| {
        let z = slice_arg(z, dim, "z")?;
        let x = slice_arg(x_hat, dim, "x_hat")?;
        let out = out_slice(out, dim, "out")?;
        out.copy_from_slice(&ddim_step(z, TimePoint::new(t)?, TimePoint::new(s)?, x)?);
        Ok(())
    })
}

/// Energy distance between `na` and `nb` samples of dimension `dim`.
///
/// # Safety
/// `a` must hold `na * dim` doubles, `b` `nb * dim`; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn pd_energy_distance(
    a: *const f64,
    na: usize,
    b: *const f64,
    nb: usize,
    dim: usize,
    out: *mut f64,
) -> PdStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        let a = ArrayView2::from_shape((na, dim), slice_arg(a, na * dim, "a")?)
            .map_err(|e| Error::Domain(e.to_string()))?;
        let b = ArrayView2::from_shape((nb, dim), slice_arg(b, nb * dim, "b")?)
            .map_err(|e| Error::Domain(e.to_string()))?;
        *out = energy_distance(a, b)?;
        Ok(())
    })
}
