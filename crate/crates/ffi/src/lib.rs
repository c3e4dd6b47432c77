//! C ABI over `vico-core`.
//!
//! Every function returns a [`VicoStatus`]; on failure the message is kept
//! per thread and read with [`vico_last_error`]. Models are opaque handles
//! created by [`vico_model_load`] and released by [`vico_model_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use vico_core::diffusion::NoiseSchedule;
use vico_core::numerics::Tensor;
use vico_core::trainer::load_checkpoint;
use vico_core::vico::{mask_from_column, otsu_threshold, ViCoModel};
use vico_core::Error;

/// Result code of every exported function.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VicoStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    Config = 4,
    Checkpoint = 5,
    Io = 6,
    NonFinite = 7,
    Panic = 8,
}

impl From<&Error> for VicoStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::ShapeMismatch { .. } => VicoStatus::Shape,
            Error::Config { .. } => VicoStatus::Config,
            Error::Checkpoint(_) | Error::Json(_) => VicoStatus::Checkpoint,
            Error::Io(_) | Error::Image { .. } => VicoStatus::Io,
            Error::NonFinite(_) => VicoStatus::NonFinite,
            _ => VicoStatus::InvalidArgument,
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior nul replaced");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Result<(), (VicoStatus, String)>) -> VicoStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => VicoStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            VicoStatus::Panic
        }
    }
}

fn core_err(e: Error) -> (VicoStatus, String) {
    ((&e).into(), e.to_string())
}

fn null(what: &str) -> (VicoStatus, String) {
    (VicoStatus::NullPointer, format!("`{what}` is null"))
}

unsafe fn c_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, (VicoStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (VicoStatus::InvalidArgument, format!("`{what}` is not UTF-8")))
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next failing call on the same thread.
#[no_mangle]
pub extern "C" fn vico_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn vico_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Otsu threshold over `n` values with `bins` histogram bins.
///
/// # Safety
/// `values` must point to `n` readable doubles; `out_tau` and
/// `out_degenerate` must be writable.
#[no_mangle]
pub unsafe extern "C" fn vico_otsu_threshold(
    values: *const f64,
    n: usize,
    bins: usize,
    out_tau: *mut f64,
    out_degenerate: *mut bool,
) -> VicoStatus {
    guard(|| {
        if values.is_null() || out_tau.is_null() || out_degenerate.is_null() {
            return Err(null("values/out_tau/out_degenerate"));
        }
        let v = std::slice::from_raw_parts(values, n);
        let o = otsu_threshold(v, bins).map_err(core_err)?;
        *out_tau = o.tau;
        *out_degenerate = o.degenerate;
        Ok(())
    })
}

/// Binarizes a similarity column into `out_mask` (0/1 bytes, length `n`),
/// with the all-ones fallback for constant or empty results.
///
/// # Safety
/// `values` must hold `n` doubles, `out_mask` room for `n` bytes and
/// `out_fallback` must be writable.
#[no_mangle]
pub unsafe extern "C" fn vico_object_mask(
    values: *const f64,
    n: usize,
    bins: usize,
    out_mask: *mut u8,
    out_fallback: *mut bool,
) -> VicoStatus {
    guard(|| {
        if values.is_null() || out_mask.is_null() || out_fallback.is_null() {
            return Err(null("values/out_mask/out_fallback"));
        }
        let v = std::slice::from_raw_parts(values, n);
        let m = mask_from_column(0, v, bins).map_err(core_err)?;
        let out = std::slice::from_raw_parts_mut(out_mask, n);
        for (o, &b) in out.iter_mut().zip(&m.values) {
            *o = b as u8;
        }
        *out_fallback = m.fallback;
        Ok(())
    })
}

/// Opaque trained model with its noise schedule.
pub struct VicoModel {
    model: ViCoModel<f32>,
    schedule: NoiseSchedule,
}

/// Loads a checkpoint into a new handle written to `out`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn vico_model_load(path: *const c_char, out: *mut *mut VicoModel) -> VicoStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = std::ptr::null_mut();
        let p = c_str(path, "path")?;
        let state = load_checkpoint::<f32>(Path::new(p)).map_err(core_err)?;
        let schedule = NoiseSchedule::from_config(&state.schedule).map_err(core_err)?;
        *out = Box::into_raw(Box::new(VicoModel {
            model: state.model,
            schedule,
        }));
        Ok(())
    })
}

/// Releases a handle; null is ignored.
///
/// # Safety
/// `model` must come from [`vico_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn vico_model_free(model: *mut VicoModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Latent shape `[C, H, W]` of the model.
///
/// # Safety
/// `model` must be a live handle and `out_shape` room for 3 values.
#[no_mangle]
pub unsafe extern "C" fn vico_model_latent_shape(model: *const VicoModel, out_shape: *mut usize) -> VicoStatus {
    guard(|| {
        if model.is_null() || out_shape.is_null() {
            return Err(null("model/out_shape"));
        }
        let s = (*model).model.cfg.unet.latent;
        std::ptr::copy_nonoverlapping(s.as_ptr(), out_shape, 3);
        Ok(())
    })
}

/// Generates one latent with DDIM from `prompt` (one `{}` slot) and
/// `n_refs` reference latents laid out `[n_refs, C, H, W]`. Writes `C·H·W`
/// floats to `out`.
///
/// # Safety
/// `references` must hold `n_refs·C·H·W` floats and `out` room for
/// `out_len ≥ C·H·W` floats.
#[no_mangle]
pub unsafe extern "C" fn vico_model_sample(
    model: *const VicoModel,
    prompt: *const c_char,
    references: *const f32,
    n_refs: usize,
    steps: usize,
    seed: u64,
    out: *mut f32,
    out_len: usize,
) -> VicoStatus {
    guard(|| {
        if model.is_null() || references.is_null() || out.is_null() {
            return Err(null("model/references/out"));
        }
        let m = &*model;
        let prompt = c_str(prompt, "prompt")?;
        let [c, h, w] = m.model.cfg.unet.latent;
        if n_refs == 0 {
            return Err((VicoStatus::InvalidArgument, "a reference latent is required".into()));
        }
        if out_len < c * h * w {
            return Err((
                VicoStatus::Shape,
                format!("output holds {out_len} floats, need {}", c * h * w),
            ));
        }
        let refs = std::slice::from_raw_parts(references, n_refs * c * h * w).to_vec();
        let refs = Tensor::new(&[n_refs, c, h, w], refs).map_err(core_err)?;
        let tokens = m.model.text.tokenize(prompt).map_err(core_err)?;
        let s = m
            .model
            .sample(&tokens, &refs, &m.schedule, steps, seed, |_| false)
            .map_err(core_err)?;
        std::slice::from_raw_parts_mut(out, c * h * w).copy_from_slice(s.latent.data());
        Ok(())
    })
}
