//! C ABI over `rae-core`.
//!
//! Models and stage matrices are opaque handles released with their `_free`
//! function. Images are tightly packed row-major `H × W × C` bytes. Every
//! call returns a [`RaeStatus`]; on failure [`rae_last_error`] describes it.
//! Errors are per thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use rae_core::quantize::{self, StageMatrix};
use rae_core::raster::Image8;
use rae_core::stego::{self, EmbedMode, Key, StegoError};
use rae_core::whitebox::{sa_wa_attack, WhiteAttackConfig};
use rae_core::zoo::{self, Model, ZooError};
use rand::SeedableRng;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RaeStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    KeyRequired = 5,
    Checksum = 6,
    Capacity = 7,
    Attack = 8,
    BufferTooSmall = 9,
    Panic = 10,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RaeMode {
    Lsb = 0,
    Hs = 1,
}

/// Trained classifier.
pub struct RaeModel(Model);

/// Per-pixel perturbation stages.
pub struct RaeStages(StageMatrix);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

type Fail = (RaeStatus, String);

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> RaeStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            RaeStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            RaeStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    (RaeStatus::NullArgument, format!("{what} is null"))
}

fn zoo_fail(e: ZooError) -> Fail {
    let status = if matches!(e, ZooError::Io(_)) { RaeStatus::Io } else { RaeStatus::Format };
    (status, e.to_string())
}

fn stego_fail(e: StegoError) -> Fail {
    let status = match e {
        StegoError::KeyRequired => RaeStatus::KeyRequired,
        StegoError::Checksum => RaeStatus::Checksum,
        StegoError::Capacity { .. } | StegoError::HsCapacity { .. } => RaeStatus::Capacity,
        StegoError::Shape { .. } => RaeStatus::InvalidArgument,
        _ => RaeStatus::Format,
    };
    (status, e.to_string())
}

unsafe fn image_in(pixels: *const u8, h: usize, w: usize, c: usize) -> Result<Image8, Fail> {
    if pixels.is_null() {
        return Err(null("pixels"));
    }
    let n = h.checked_mul(w).and_then(|v| v.checked_mul(c)).ok_or((RaeStatus::InvalidArgument, "size overflow".into()))?;
    let data = std::slice::from_raw_parts(pixels, n).to_vec();
    Image8::new(h, w, c, data).map_err(|e| (RaeStatus::InvalidArgument, e.to_string()))
}

unsafe fn image_out(img: &Image8, out: *mut u8) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null("out"));
    }
    ptr::copy_nonoverlapping(img.data().as_ptr(), out, img.data().len());
    Ok(())
}

unsafe fn key_in(key: *const u8, len: usize) -> Result<Option<Key>, Fail> {
    if key.is_null() || len == 0 {
        return Ok(None);
    }
    let bytes = std::slice::from_raw_parts(key, len).to_vec();
    Ok(Key::new(bytes).ok())
}

/// Message for the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn rae_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Loads a weights file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn rae_model_load(path: *const c_char, out: *mut *mut RaeModel) -> RaeStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let path = CStr::from_ptr(path).to_str().map_err(|e| (RaeStatus::InvalidArgument, e.to_string()))?;
        let model = zoo::load_weights(path).map_err(zoo_fail)?;
        *out = Box::into_raw(Box::new(RaeModel(model)));
        Ok(())
    })
}

/// # Safety
/// `model` must come from [`rae_model_load`] and not be freed twice. Null is
/// ignored.
#[no_mangle]
pub unsafe extern "C" fn rae_model_free(model: *mut RaeModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Input height, width, channels and class count. Any out pointer may be null.
///
/// # Safety
/// `model` must be a live handle; non-null out pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn rae_model_shape(
    model: *const RaeModel,
    height: *mut usize,
    width: *mut usize,
    channels: *mut usize,
    classes: *mut usize,
) -> RaeStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let [h, w, c] = m.0.spec().input_shape();
        for (p, v) in [(height, h), (width, w), (channels, c), (classes, m.0.spec().classes)] {
            if !p.is_null() {
                *p = v;
            }
        }
        Ok(())
    })
}

/// Writes class probabilities for one image into `probs`.
///
/// # Safety
/// `pixels` must hold `H·W·C` bytes of the model's input shape and `probs`
/// `probs_len` floats.
#[no_mangle]
pub unsafe extern "C" fn rae_model_predict(
    model: *const RaeModel,
    pixels: *const u8,
    probs: *mut f32,
    probs_len: usize,
) -> RaeStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if probs.is_null() {
            return Err(null("probs"));
        }
        let [h, w, c] = m.0.spec().input_shape();
        let img = image_in(pixels, h, w, c)?;
        let p = m.0.predict(&img.to_tensor()).map_err(zoo_fail)?;
        if probs_len < p.len() {
            return Err((RaeStatus::BufferTooSmall, format!("need {} floats, got {probs_len}", p.len())));
        }
        ptr::copy_nonoverlapping(p.as_ptr(), probs, p.len());
        Ok(())
    })
}

/// Builds a stage matrix from `height·width` values in `-2..=2`.
///
/// # Safety
/// `data` must hold `height·width` bytes; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rae_stages_new(
    height: usize,
    width: usize,
    xi: u8,
    data: *const i8,
    out: *mut *mut RaeStages,
) -> RaeStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let n = height.checked_mul(width).ok_or((RaeStatus::InvalidArgument, "size overflow".into()))?;
        let values = if n == 0 {
            Vec::new()
        } else if data.is_null() {
            return Err(null("data"));
        } else {
            std::slice::from_raw_parts(data, n).to_vec()
        };
        let s = StageMatrix::new(height, width, xi, values).map_err(|e| (RaeStatus::InvalidArgument, e.to_string()))?;
        *out = Box::into_raw(Box::new(RaeStages(s)));
        Ok(())
    })
}

/// # Safety
/// `stages` must be a live handle; out pointers may be null.
#[no_mangle]
pub unsafe extern "C" fn rae_stages_shape(
    stages: *const RaeStages,
    height: *mut usize,
    width: *mut usize,
    xi: *mut u8,
) -> RaeStatus {
    guard(|| {
        let s = &stages.as_ref().ok_or_else(|| null("stages"))?.0;
        if !height.is_null() {
            *height = s.height();
        }
        if !width.is_null() {
            *width = s.width();
        }
        if !xi.is_null() {
            *xi = s.xi();
        }
        Ok(())
    })
}

/// Copies the stage values, row-major, into `out`.
///
/// # Safety
/// `out` must hold `out_len` bytes.
#[no_mangle]
pub unsafe extern "C" fn rae_stages_copy(stages: *const RaeStages, out: *mut i8, out_len: usize) -> RaeStatus {
    guard(|| {
        let s = &stages.as_ref().ok_or_else(|| null("stages"))?.0;
        if out_len < s.len() {
            return Err((RaeStatus::BufferTooSmall, format!("need {} bytes, got {out_len}", s.len())));
        }
        if s.is_empty() {
            return Ok(());
        }
        if out.is_null() {
            return Err(null("out"));
        }
        ptr::copy_nonoverlapping(s.data().as_ptr(), out, s.len());
        Ok(())
    })
}

/// # Safety
/// `stages` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn rae_stages_free(stages: *mut RaeStages) {
    if !stages.is_null() {
        drop(Box::from_raw(stages));
    }
}

/// White-box phase against an equally weighted ensemble, with default
/// settings apart from the adaptive mask switch.
///
/// # Safety
/// `models` must point to `n_models` live handles, `pixels` to `H·W·C`
/// bytes, and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rae_attack_white(
    models: *const *const RaeModel,
    n_models: usize,
    pixels: *const u8,
    height: usize,
    width: usize,
    channels: usize,
    label: usize,
    seed: u64,
    sa_enabled: bool,
    out: *mut *mut RaeStages,
) -> RaeStatus {
    guard(|| {
        if models.is_null() || n_models == 0 {
            return Err(null("models"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let handles = std::slice::from_raw_parts(models, n_models);
        let refs = handles
            .iter()
            .map(|&p| p.as_ref().map(|m| &m.0).ok_or_else(|| null("model handle")))
            .collect::<Result<Vec<&Model>, _>>()?;
        let x = image_in(pixels, height, width, channels)?;
        let cfg = WhiteAttackConfig { sa_enabled, ..Default::default() };
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let r = sa_wa_attack(&x, label, &refs, &cfg, &mut rng).map_err(|e| (RaeStatus::Attack, e.to_string()))?;
        *out = Box::into_raw(Box::new(RaeStages(r.stages)));
        Ok(())
    })
}

/// Adds the decoded perturbation to an image, writing `H·W·C` bytes to `out`.
///
/// # Safety
/// `pixels` and `out` must hold `H·W·C` bytes; `stages` must be live.
#[no_mangle]
pub unsafe extern "C" fn rae_apply(
    pixels: *const u8,
    height: usize,
    width: usize,
    channels: usize,
    stages: *const RaeStages,
    out: *mut u8,
) -> RaeStatus {
    guard(|| {
        let s = &stages.as_ref().ok_or_else(|| null("stages"))?.0;
        let x = image_in(pixels, height, width, channels)?;
        let adv = quantize::apply(&x, s).map_err(|e| (RaeStatus::InvalidArgument, e.to_string()))?;
        image_out(&adv, out)
    })
}

/// Embeds `stages` into the adversarial image. A null or empty key embeds
/// without encryption.
///
/// # Safety
/// `x_adv` and `out` must hold `H·W·C` bytes; `key` must hold `key_len`
/// bytes when non-null.
#[no_mangle]
pub unsafe extern "C" fn rae_make(
    x_adv: *const u8,
    height: usize,
    width: usize,
    channels: usize,
    stages: *const RaeStages,
    key: *const u8,
    key_len: usize,
    mode: RaeMode,
    out: *mut u8,
) -> RaeStatus {
    guard(|| {
        let s = &stages.as_ref().ok_or_else(|| null("stages"))?.0;
        let x = image_in(x_adv, height, width, channels)?;
        let key = key_in(key, key_len)?;
        let mode = match mode {
            RaeMode::Lsb => EmbedMode::Lsb,
            RaeMode::Hs => EmbedMode::Hs,
        };
        let img = stego::make_rae(&x, s, key.as_ref(), mode).map_err(stego_fail)?;
        image_out(&img, out)
    })
}

/// Restores the original image into `x_hat` and optionally returns the
/// embedded stages through `stages_out`.
///
/// # Safety
/// `stego_pixels` and `x_hat` must hold `H·W·C` bytes; `stages_out` may be
/// null.
#[no_mangle]
pub unsafe extern "C" fn rae_recover(
    stego_pixels: *const u8,
    height: usize,
    width: usize,
    channels: usize,
    key: *const u8,
    key_len: usize,
    x_hat: *mut u8,
    stages_out: *mut *mut RaeStages,
) -> RaeStatus {
    guard(|| {
        if x_hat.is_null() {
            return Err(null("x_hat"));
        }
        let img = image_in(stego_pixels, height, width, channels)?;
        let key = key_in(key, key_len)?;
        let r = stego::recover(&img, key.as_ref()).map_err(stego_fail)?;
        image_out(&r.x_hat, x_hat)?;
        if !stages_out.is_null() {
            *stages_out = Box::into_raw(Box::new(RaeStages(r.stages)));
        }
        Ok(())
    })
}
