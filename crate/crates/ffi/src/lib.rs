//! C interface to `nommer`.
//!
//! Models are opaque `NommerModel` handles created by one of the
//! constructors and released with `nommer_model_free`. Every fallible call
//! returns a `NommerStatus`; on failure the message is kept per thread and
//! can be copied out with `nommer_last_error_message`. Handles are not
//! thread-safe: use one handle from one thread at a time.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use nommer::model::checkpoint;
use nommer::model::{Model, ModelConfig, RunConfig};
use nommer::nominator::NominationMode;
use nommer::{NomError, Tensor, Var};

/// Result code of every fallible call.
#[repr(i32)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NommerStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Config = 3,
    Shape = 4,
    Numerical = 5,
    Io = 6,
    Checkpoint = 7,
    BufferTooSmall = 8,
    Panic = 9,
    Other = 10,
}

/// Opaque model handle.
pub struct NommerModel {
    model: Model,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

fn status_of(e: &NomError) -> NommerStatus {
    match e {
        NomError::ShapeMismatch { .. } | NomError::InvalidShape { .. } => NommerStatus::Shape,
        NomError::Config { .. } | NomError::InvalidArgument(_) => NommerStatus::Config,
        NomError::Numerical(_) => NommerStatus::Numerical,
        NomError::Io { .. } => NommerStatus::Io,
        NomError::Checkpoint(_) => NommerStatus::Checkpoint,
        _ => NommerStatus::Other,
    }
}

struct Fail(NommerStatus, String);

impl From<NomError> for Fail {
    fn from(e: NomError) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> NommerStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            NommerStatus::Ok
        }
        Ok(Err(Fail(code, msg))) => {
            set_error(msg);
            code
        }
        Err(_) => {
            set_error("internal panic");
            NommerStatus::Panic
        }
    }
}

unsafe fn c_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(Fail(NommerStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(NommerStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

unsafe fn model_ref<'a>(h: *const NommerModel) -> Result<&'a NommerModel, Fail> {
    h.as_ref()
        .ok_or_else(|| Fail(NommerStatus::NullPointer, "model handle is null".into()))
}

unsafe fn emit(out: *mut *mut NommerModel, model: Model) -> Result<(), Fail> {
    *out = Box::into_raw(Box::new(NommerModel { model }));
    Ok(())
}

fn null_out<T>(out: *mut T) -> Result<(), Fail> {
    if out.is_null() {
        Err(Fail(NommerStatus::NullPointer, "output pointer is null".into()))
    } else {
        Ok(())
    }
}

/// Builds a freshly initialised preset model (`nommer-t`, `nommer-s`,
/// `nommer-b` or `micro`).
///
/// # Safety
/// `name` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn nommer_model_new_preset(
    name: *const c_char,
    seed: u64,
    out: *mut *mut NommerModel,
) -> NommerStatus {
    guard(|| {
        null_out(out)?;
        let name = c_str(name, "name")?;
        emit(out, Model::build(ModelConfig::preset(name)?, seed)?)
    })
}

/// Builds a freshly initialised model from a TOML run configuration file.
///
/// # Safety
/// `config_path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn nommer_model_from_config(
    config_path: *const c_char,
    seed: u64,
    out: *mut *mut NommerModel,
) -> NommerStatus {
    guard(|| {
        null_out(out)?;
        let path = c_str(config_path, "config_path")?;
        let run = RunConfig::load(Path::new(path))?;
        emit(out, Model::build(run.model, seed)?)
    })
}

/// Loads a checkpoint written for the model described by `config_path`.
///
/// # Safety
/// Both paths must be NUL-terminated strings and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn nommer_model_load(
    config_path: *const c_char,
    checkpoint_path: *const c_char,
    out: *mut *mut NommerModel,
) -> NommerStatus {
    guard(|| {
        null_out(out)?;
        let cfg = c_str(config_path, "config_path")?;
        let ck = c_str(checkpoint_path, "checkpoint_path")?;
        let run = RunConfig::load(Path::new(cfg))?;
        emit(out, checkpoint::load(Path::new(ck), run.model)?)
    })
}

/// # Safety
/// `model` must come from one of the constructors; `path` must be a
/// NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn nommer_model_save(
    model: *const NommerModel,
    path: *const c_char,
) -> NommerStatus {
    guard(|| {
        let m = model_ref(model)?;
        let path = c_str(path, "path")?;
        checkpoint::save(&m.model, Path::new(path))?;
        Ok(())
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `model` must come from one of the constructors and not be used again.
#[no_mangle]
pub unsafe extern "C" fn nommer_model_free(model: *mut NommerModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn nommer_model_param_count(
    model: *const NommerModel,
    out: *mut u64,
) -> NommerStatus {
    guard(|| {
        null_out(out)?;
        *out = model_ref(model)?.model.count_params() as u64;
        Ok(())
    })
}

/// Writes `[height, width, channels]` of the expected input into `out`.
///
/// # Safety
/// `model` must be a live handle and `out` must point to 3 writable `size_t`.
#[no_mangle]
pub unsafe extern "C" fn nommer_model_input_shape(
    model: *const NommerModel,
    out: *mut usize,
) -> NommerStatus {
    guard(|| {
        null_out(out)?;
        let c = &model_ref(model)?.model.config;
        let dims = [c.image_size, c.image_size, c.in_channels];
        ptr::copy_nonoverlapping(dims.as_ptr(), out, 3);
        Ok(())
    })
}

/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn nommer_model_num_classes(
    model: *const NommerModel,
    out: *mut usize,
) -> NommerStatus {
    guard(|| {
        null_out(out)?;
        *out = model_ref(model)?.model.config.num_classes;
        Ok(())
    })
}

/// Eval-mode forward of one row-major `[H, W, C]` image.
///
/// `image_len` must equal `H * W * C` and `logits_len` the class count.
///
/// # Safety
/// `image` must point to `image_len` readable doubles and `logits` to
/// `logits_len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn nommer_model_forward(
    model: *const NommerModel,
    image: *const f64,
    image_len: usize,
    logits: *mut f64,
    logits_len: usize,
) -> NommerStatus {
    guard(|| {
        let m = &model_ref(model)?.model;
        if image.is_null() || logits.is_null() {
            return Err(Fail(NommerStatus::NullPointer, "buffer is null".into()));
        }
        let c = &m.config;
        let shape = [c.image_size, c.image_size, c.in_channels];
        if image_len != shape.iter().product::<usize>() {
            return Err(Fail(
                NommerStatus::Shape,
                format!("image has {image_len} values, model expects {shape:?}"),
            ));
        }
        if logits_len < c.num_classes {
            return Err(Fail(
                NommerStatus::BufferTooSmall,
                format!("logits buffer holds {logits_len}, need {}", c.num_classes),
            ));
        }
        let data = std::slice::from_raw_parts(image, image_len).to_vec();
        let x = Var::constant(Tensor::new(&shape, data)?);
        let y = m.forward(&x, NominationMode::Hard, None)?;
        let v = y.logits.value().data();
        ptr::copy_nonoverlapping(v.as_ptr(), logits, v.len());
        Ok(())
    })
}

/// Copies the calling thread's last error message, NUL-terminated, into
/// `buf` and returns its length without the terminator. A return value
/// `>= len` means the message was truncated; pass a null `buf` to query the
/// length.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn nommer_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        let bytes = msg.as_bytes();
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len - 1);
            ptr::copy_nonoverlapping(bytes.as_ptr().cast::<c_char>(), buf, n);
            *buf.add(n) = 0;
        }
        bytes.len()
    })
}

/// Static NUL-terminated crate version.
#[no_mangle]
pub extern "C" fn nommer_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}
