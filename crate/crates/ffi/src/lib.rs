//! C ABI for the maxsr library: opaque model handles, status codes, and a
//! thread-local last-error message. The header is generated by cbindgen at
//! build time into include/maxsr.h.
//!
//! Conventions: functions returning [`MaxsrStatus`] never panic across the
//! boundary; any non-Ok status leaves a printable message retrievable with
//! [`maxsr_last_error_message`]. Pointers must be valid for the documented
//! extents; handles are created and released only by this library.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::path::Path;

use maxsr::eval::{ImageBuffer, NetworkModel, SrModel};
use maxsr::geometry::{adaptive_footage, attention_cost, AttentionMode};
use maxsr::model::{build_model, load_checkpoint, save_checkpoint, ModelConfig, ModelState};
use maxsr::tensor::Tensor;

/// Opaque model handle: a trained (or freshly initialized) network plus its
/// configuration.
pub struct MaxsrModel {
    state: ModelState<f32>,
    config: ModelConfig,
}

/// Status codes returned by every fallible entry point.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaxsrStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    IoError = 3,
    InvalidCheckpoint = 4,
    InvalidConfig = 5,
    ShapeMismatch = 6,
    RuntimeError = 7,
}

/// Attention footage selection for maxsr_attention_cost.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaxsrAttentionMode {
    AdaptiveExact = 0,
    AdaptiveApprox = 1,
    Fixed = 2,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into();
    let c = CString::new(msg).unwrap_or_else(|_| CString::new("invalid error text").unwrap());
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(err: &maxsr::Error) -> MaxsrStatus {
    match err {
        maxsr::Error::Io(_) | maxsr::Error::Image(_) => MaxsrStatus::IoError,
        maxsr::Error::Checkpoint(_) => MaxsrStatus::InvalidCheckpoint,
        maxsr::Error::Json(_) | maxsr::Error::InvalidArgument { .. } => MaxsrStatus::InvalidConfig,
        maxsr::Error::ShapeMismatch { .. } => MaxsrStatus::ShapeMismatch,
        _ => MaxsrStatus::RuntimeError,
    }
}

fn fail(err: maxsr::Error) -> MaxsrStatus {
    let status = status_of(&err);
    set_error(err.to_string());
    status
}

/// # Safety
/// `ptr` must be a valid NUL-terminated string.
unsafe fn cstr_arg<'a>(ptr: *const c_char) -> Result<&'a str, MaxsrStatus> {
    if ptr.is_null() {
        set_error("null string argument");
        return Err(MaxsrStatus::NullArgument);
    }
    CStr::from_ptr(ptr).to_str().map_err(|_| {
        set_error("string argument is not valid UTF-8");
        MaxsrStatus::InvalidUtf8
    })
}

/// Message for the most recent non-Ok status on this thread. The pointer is
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn maxsr_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Load a model from a checkpoint file written by this library or the CLI.
///
/// # Safety
/// `path` must be a valid NUL-terminated string and `out_model` a valid
/// destination pointer.
#[no_mangle]
pub unsafe extern "C" fn maxsr_model_load(
    path: *const c_char,
    out_model: *mut *mut MaxsrModel,
) -> MaxsrStatus {
    if out_model.is_null() {
        set_error("null out_model");
        return MaxsrStatus::NullArgument;
    }
    let path = match cstr_arg(path) {
        Ok(p) => p,
        Err(s) => return s,
    };
    match load_checkpoint(Path::new(path)) {
        Ok((state, config)) => {
            *out_model = Box::into_raw(Box::new(MaxsrModel { state, config }));
            MaxsrStatus::Ok
        }
        Err(e) => fail(e),
    }
}

/// Build a freshly initialized model from a JSON configuration (the same
/// schema as the CLI's "model" section) and a seed.
///
/// # Safety
/// `config_json` must be a valid NUL-terminated string and `out_model` a
/// valid destination pointer.
#[no_mangle]
pub unsafe extern "C" fn maxsr_model_build(
    config_json: *const c_char,
    seed: u64,
    out_model: *mut *mut MaxsrModel,
) -> MaxsrStatus {
    if out_model.is_null() {
        set_error("null out_model");
        return MaxsrStatus::NullArgument;
    }
    let json = match cstr_arg(config_json) {
        Ok(p) => p,
        Err(s) => return s,
    };
    let config: ModelConfig = match serde_json::from_str(json) {
        Ok(c) => c,
        Err(e) => {
            set_error(format!("bad config: {e}"));
            return MaxsrStatus::InvalidConfig;
        }
    };
    match build_model::<f32>(&config, seed) {
        Ok(state) => {
            *out_model = Box::into_raw(Box::new(MaxsrModel { state, config }));
            MaxsrStatus::Ok
        }
        Err(e) => fail(e),
    }
}

/// Write the model to a checkpoint file (atomic write).
///
/// # Safety
/// `model` must be a live handle from this library; `path` a valid string.
#[no_mangle]
pub unsafe extern "C" fn maxsr_model_save(
    model: *const MaxsrModel,
    path: *const c_char,
) -> MaxsrStatus {
    let Some(model) = model.as_ref() else {
        set_error("null model");
        return MaxsrStatus::NullArgument;
    };
    let path = match cstr_arg(path) {
        Ok(p) => p,
        Err(s) => return s,
    };
    match save_checkpoint(&model.state, &model.config, Path::new(path)) {
        Ok(()) => MaxsrStatus::Ok,
        Err(e) => fail(e),
    }
}

/// Release a handle. Passing NULL is a no-op.
///
/// # Safety
/// `model` must be NULL or a pointer obtained from this library, not yet
/// freed.
#[no_mangle]
pub unsafe extern "C" fn maxsr_model_free(model: *mut MaxsrModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Upsampling factor of the model (0 for a NULL handle).
///
/// # Safety
/// `model` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn maxsr_model_scale(model: *const MaxsrModel) -> u32 {
    model.as_ref().map_or(0, |m| m.config.scale as u32)
}

/// Learnable parameter count (0 for a NULL handle).
///
/// # Safety
/// `model` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn maxsr_model_param_count(model: *const MaxsrModel) -> u64 {
    model.as_ref().map_or(0, |m| maxsr::model::param_count(&m.state))
}

/// Upscale an interleaved RGB8 image of extent width x height. The output
/// buffer must hold (width*scale) * (height*scale) * 3 bytes.
///
/// # Safety
/// `pixels` must point to width*height*3 readable bytes and `out_pixels` to
/// the documented number of writable bytes; `model` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn maxsr_upscale_rgb8(
    model: *const MaxsrModel,
    pixels: *const u8,
    width: u32,
    height: u32,
    self_ensemble: bool,
    out_pixels: *mut u8,
) -> MaxsrStatus {
    let Some(model) = model.as_ref() else {
        set_error("null model");
        return MaxsrStatus::NullArgument;
    };
    if pixels.is_null() || out_pixels.is_null() {
        set_error("null pixel buffer");
        return MaxsrStatus::NullArgument;
    }
    if width == 0 || height == 0 {
        set_error("zero image extent");
        return MaxsrStatus::ShapeMismatch;
    }
    let (w, h) = (width as usize, height as usize);
    let input = std::slice::from_raw_parts(pixels, w * h * 3);
    let img = match ImageBuffer::from_rgb8(w, h, input.to_vec()) {
        Ok(i) => i,
        Err(e) => return fail(e),
    };
    match upscale_image(model, &img, self_ensemble) {
        Ok(out) => {
            let dst = std::slice::from_raw_parts_mut(out_pixels, out.data.len());
            dst.copy_from_slice(&out.data);
            MaxsrStatus::Ok
        }
        Err(e) => fail(e),
    }
}

/// Upscale a PNG file to another PNG file.
///
/// # Safety
/// `model` must be a live handle; both paths valid NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn maxsr_upscale_png(
    model: *const MaxsrModel,
    input_path: *const c_char,
    output_path: *const c_char,
    self_ensemble: bool,
) -> MaxsrStatus {
    let Some(model) = model.as_ref() else {
        set_error("null model");
        return MaxsrStatus::NullArgument;
    };
    let input = match cstr_arg(input_path) {
        Ok(p) => p,
        Err(s) => return s,
    };
    let output = match cstr_arg(output_path) {
        Ok(p) => p,
        Err(s) => return s,
    };
    let run = || -> maxsr::Result<()> {
        let img = maxsr::image_io::read_png(Path::new(input))?;
        let out = upscale_image(model, &img, self_ensemble)?;
        maxsr::image_io::write_png(Path::new(output), &out)
    };
    match run() {
        Ok(()) => MaxsrStatus::Ok,
        Err(e) => fail(e),
    }
}

fn upscale_image(
    model: &MaxsrModel,
    img: &ImageBuffer,
    self_ensemble: bool,
) -> maxsr::Result<ImageBuffer> {
    let x = img.to_float_chw();
    let (h, w) = (x.shape()[1], x.shape()[2]);
    let x = x.reshape(&[1, 3, h, w])?;
    let net = NetworkModel::new(&model.state, model.config);
    let y: Tensor<f32> = if self_ensemble {
        maxsr::eval::self_ensemble(&net, &x)?
    } else {
        net.upscale(&x)?
    };
    ImageBuffer::from_float_chw(&y)
}

/// Query-key pair count of one block-attention plus one grid-attention pass
/// over a height x width feature map. `fixed_footage` is only read in Fixed
/// mode.
///
/// # Safety
/// `out_cost` must be a valid destination pointer.
#[no_mangle]
pub unsafe extern "C" fn maxsr_attention_cost(
    height: u32,
    width: u32,
    mode: MaxsrAttentionMode,
    fixed_footage: u32,
    out_cost: *mut u64,
) -> MaxsrStatus {
    if out_cost.is_null() {
        set_error("null out_cost");
        return MaxsrStatus::NullArgument;
    }
    let mode = match mode {
        MaxsrAttentionMode::AdaptiveExact => AttentionMode::AdaptiveExact,
        MaxsrAttentionMode::AdaptiveApprox => AttentionMode::AdaptiveApprox,
        MaxsrAttentionMode::Fixed => AttentionMode::Fixed(fixed_footage as usize),
    };
    match adaptive_footage(height as usize, width as usize, mode) {
        Ok(plan) => {
            *out_cost = attention_cost(&plan);
            MaxsrStatus::Ok
        }
        Err(e) => fail(e),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn build_handle() -> *mut MaxsrModel {
        let cfg = CString::new(
            r#"{"blocks":2,"stages":2,"width":8,"heads":2,"scale":2}"#,
        )
        .unwrap();
        let mut handle: *mut MaxsrModel = std::ptr::null_mut();
        let status = unsafe { maxsr_model_build(cfg.as_ptr(), 7, &mut handle) };
        assert_eq!(status, MaxsrStatus::Ok);
        assert!(!handle.is_null());
        handle
    }

    #[test]
    fn build_query_free() {
        let handle = build_handle();
        unsafe {
            assert_eq!(maxsr_model_scale(handle), 2);
            assert!(maxsr_model_param_count(handle) > 0);
            maxsr_model_free(handle);
        }
    }

    #[test]
    fn upscale_rgb8_round_trip() {
        let handle = build_handle();
        let (w, h) = (6usize, 5usize);
        let pixels: Vec<u8> = (0..w * h * 3).map(|i| (i * 31 % 256) as u8).collect();
        let mut out = vec![0u8; (w * 2) * (h * 2) * 3];
        let status = unsafe {
            maxsr_upscale_rgb8(handle, pixels.as_ptr(), w as u32, h as u32, false, out.as_mut_ptr())
        };
        assert_eq!(status, MaxsrStatus::Ok);
        // deterministic across calls
        let mut out2 = vec![0u8; out.len()];
        let status = unsafe {
            maxsr_upscale_rgb8(handle, pixels.as_ptr(), w as u32, h as u32, false, out2.as_mut_ptr())
        };
        assert_eq!(status, MaxsrStatus::Ok);
        assert_eq!(out, out2);
        unsafe { maxsr_model_free(handle) };
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = CString::new(dir.path().join("m.ckpt").to_str().unwrap()).unwrap();
        let handle = build_handle();
        unsafe {
            assert_eq!(maxsr_model_save(handle, path.as_ptr()), MaxsrStatus::Ok);
            let mut loaded: *mut MaxsrModel = std::ptr::null_mut();
            assert_eq!(maxsr_model_load(path.as_ptr(), &mut loaded), MaxsrStatus::Ok);
            assert_eq!(maxsr_model_param_count(loaded), maxsr_model_param_count(handle));
            maxsr_model_free(loaded);
            maxsr_model_free(handle);
        }
    }

    #[test]
    fn upscale_png_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let input = dir.path().join("in.png");
        let data: Vec<u8> = (0..10 * 8 * 3).map(|i| (i * 17 % 256) as u8).collect();
        let img = ImageBuffer::from_rgb8(10, 8, data).unwrap();
        maxsr::image_io::write_png(&input, &img).unwrap();

        let handle = build_handle();
        let output = dir.path().join("out.png");
        let c_in = CString::new(input.to_str().unwrap()).unwrap();
        let c_out = CString::new(output.to_str().unwrap()).unwrap();
        let status = unsafe { maxsr_upscale_png(handle, c_in.as_ptr(), c_out.as_ptr(), false) };
        assert_eq!(status, MaxsrStatus::Ok);
        let out = maxsr::image_io::read_png(&output).unwrap();
        assert_eq!((out.width, out.height), (20, 16));
        unsafe { maxsr_model_free(handle) };
    }

    #[test]
    fn errors_set_message_and_status() {
        unsafe {
            let mut handle: *mut MaxsrModel = std::ptr::null_mut();
            let missing = CString::new("/definitely/not/here.ckpt").unwrap();
            let status = maxsr_model_load(missing.as_ptr(), &mut handle);
            assert_eq!(status, MaxsrStatus::InvalidCheckpoint);
            let msg = CStr::from_ptr(maxsr_last_error_message());
            assert!(!msg.to_bytes().is_empty());

            let bad_cfg = CString::new(r#"{"blocks":3,"stages":2,"width":8,"heads":2,"scale":2}"#).unwrap();
            let status = maxsr_model_build(bad_cfg.as_ptr(), 0, &mut handle);
            assert_eq!(status, MaxsrStatus::InvalidConfig);

            assert_eq!(maxsr_model_scale(std::ptr::null()), 0);
            maxsr_model_free(std::ptr::null_mut());
        }
    }

    #[test]
    fn attention_cost_values() {
        unsafe {
            let mut cost = 0u64;
            assert_eq!(
                maxsr_attention_cost(64, 64, MaxsrAttentionMode::AdaptiveExact, 0, &mut cost),
                MaxsrStatus::Ok
            );
            assert_eq!(cost, 524_288);
            assert_eq!(
                maxsr_attention_cost(64, 64, MaxsrAttentionMode::Fixed, 8, &mut cost),
                MaxsrStatus::Ok
            );
            assert_eq!(cost, 524_288);
            assert_eq!(
                maxsr_attention_cost(0, 4, MaxsrAttentionMode::AdaptiveExact, 0, &mut cost),
                MaxsrStatus::InvalidConfig
            );
        }
    }
}
