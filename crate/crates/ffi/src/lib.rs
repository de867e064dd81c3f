//! C ABI over a trained run directory.
//!
//! Every fallible call returns an [`SaStatus`]; on failure the message is
//! available from [`sa_last_error_message`] on the same thread until the next
//! failing call. Images are row-major `[N, H, W, C]` doubles.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use swin_align::gradcam::gradcam;
use swin_align::heads::HeadKind;
use swin_align::model::Model;
use swin_align::params::ParamStore;
use swin_align::tensor::Tensor;
use swin_align::train::RunDir;
use swin_align::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SaStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Config = 5,
    Dimension = 6,
    Contract = 7,
    Runtime = 8,
    Panic = 9,
}

/// Opaque handle to a loaded model and its parameters.
pub struct SaModel {
    model: Model,
    store: ParamStore,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_last_error(message: &str) {
    let c = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> SaStatus {
    match e {
        Error::Dimension { .. } => SaStatus::Dimension,
        Error::Config(_) => SaStatus::Config,
        Error::Contract(_) => SaStatus::Contract,
        Error::Format { .. } | Error::UnsupportedVersion { .. } => SaStatus::Format,
        Error::Divergence { .. } => SaStatus::Runtime,
        Error::File { .. } | Error::Io(_) => SaStatus::Io,
    }
}

fn fail(status: SaStatus, message: impl AsRef<str>) -> SaStatus {
    set_last_error(message.as_ref());
    status
}

fn guard(f: impl FnOnce() -> Result<(), SaStatus>) -> SaStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SaStatus::Ok,
        Ok(Err(status)) => status,
        Err(_) => fail(SaStatus::Panic, "internal panic"),
    }
}

fn lift<T>(r: swin_align::Result<T>) -> Result<T, SaStatus> {
    r.map_err(|e| fail(status_of(&e), e.to_string()))
}

unsafe fn model_ref<'a>(model: *const SaModel) -> Result<&'a SaModel, SaStatus> {
    model.as_ref().ok_or_else(|| fail(SaStatus::NullPointer, "model handle is null"))
}

unsafe fn write_out<T>(ptr: *mut T, value: T) {
    if !ptr.is_null() {
        *ptr = value;
    }
}

impl SaModel {
    fn image_shape(&self) -> [usize; 3] {
        let b = &self.model.config.backbone;
        [b.image_size, b.image_size, b.in_channels]
    }

    fn output_width(&self) -> usize {
        match self.model.head.kind() {
            HeadKind::MlpReg => 1,
            _ => self.model.config.grades,
        }
    }

    fn map_side(&self) -> usize {
        let b = &self.model.config.backbone;
        b.stage_side(b.stages() - 1)
    }
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn sa_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the most recent failure on this thread, or an empty string.
/// The pointer stays valid until the next failing call on this thread.
#[no_mangle]
pub extern "C" fn sa_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Loads the config and checkpoint of a run directory.
///
/// # Safety
/// `run_dir` must be a NUL-terminated UTF-8 path and `out` a writable
/// pointer. On success `*out` owns a handle to release with
/// [`sa_model_free`].
#[no_mangle]
pub unsafe extern "C" fn sa_model_open(run_dir: *const c_char, out: *mut *mut SaModel) -> SaStatus {
    guard(|| {
        if run_dir.is_null() || out.is_null() {
            return Err(fail(SaStatus::NullPointer, "run_dir and out must be non-null"));
        }
        *out = std::ptr::null_mut();
        let path = CStr::from_ptr(run_dir)
            .to_str()
            .map_err(|_| fail(SaStatus::InvalidArgument, "run_dir is not valid UTF-8"))?;
        let (_, model, store) = lift(RunDir::new(Path::new(path)).load())?;
        *out = Box::into_raw(Box::new(SaModel { model, store }));
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a handle from [`sa_model_open`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sa_model_free(model: *mut SaModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Expected image height, width and channel count. Each out pointer may be
/// null.
///
/// # Safety
/// `model` must be a live handle; non-null out pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn sa_model_input_shape(
    model: *const SaModel,
    height: *mut usize,
    width: *mut usize,
    channels: *mut usize,
) -> SaStatus {
    guard(|| {
        let [h, w, c] = model_ref(model)?.image_shape();
        write_out(height, h);
        write_out(width, w);
        write_out(channels, c);
        Ok(())
    })
}

/// Number of grades and values per image written by [`sa_model_predict`]:
/// one probability per grade, or a single regression estimate.
///
/// # Safety
/// `model` must be a live handle; non-null out pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn sa_model_output_shape(
    model: *const SaModel,
    grades: *mut usize,
    output_width: *mut usize,
) -> SaStatus {
    guard(|| {
        let m = model_ref(model)?;
        write_out(grades, m.model.config.grades);
        write_out(output_width, m.output_width());
        Ok(())
    })
}

/// Side length of the square activation map from [`sa_model_gradcam`].
///
/// # Safety
/// `model` must be a live handle and `side` writable.
#[no_mangle]
pub unsafe extern "C" fn sa_model_map_side(model: *const SaModel, side: *mut usize) -> SaStatus {
    guard(|| {
        let m = model_ref(model)?;
        if side.is_null() {
            return Err(fail(SaStatus::NullPointer, "side must be non-null"));
        }
        *side = m.map_side();
        Ok(())
    })
}

/// Classifies `count` images. `outputs` receives `count · output_width`
/// values and `grades`, when non-null, `count` decided grades.
///
/// # Safety
/// `images` must hold `count · H · W · C` doubles, `outputs` room for
/// `outputs_len` doubles and a non-null `grades` room for `count` values.
#[no_mangle]
pub unsafe extern "C" fn sa_model_predict(
    model: *const SaModel,
    images: *const f64,
    count: usize,
    outputs: *mut f64,
    outputs_len: usize,
    grades: *mut usize,
) -> SaStatus {
    guard(|| {
        let m = model_ref(model)?;
        if images.is_null() || outputs.is_null() {
            return Err(fail(SaStatus::NullPointer, "images and outputs must be non-null"));
        }
        if count == 0 {
            return Err(fail(SaStatus::InvalidArgument, "count must be positive"));
        }
        let need = count * m.output_width();
        if outputs_len < need {
            return Err(fail(
                SaStatus::InvalidArgument,
                format!("outputs holds {outputs_len} values, {need} required"),
            ));
        }
        let [h, w, c] = m.image_shape();
        let pixels = std::slice::from_raw_parts(images, count * h * w * c);
        let batch = lift(Tensor::new(vec![count, h, w, c], pixels.to_vec()))?;
        let (out, decided) = lift(m.model.predict(&m.store, &batch))?;
        std::slice::from_raw_parts_mut(outputs, need).copy_from_slice(out.data());
        if !grades.is_null() {
            std::slice::from_raw_parts_mut(grades, count).copy_from_slice(&decided);
        }
        Ok(())
    })
}

/// Activation map for one image and grade, written row-major into `map`
/// (`side · side` values, see [`sa_model_map_side`]).
///
/// # Safety
/// `image` must hold `H · W · C` doubles and `map` room for `map_len`.
#[no_mangle]
pub unsafe extern "C" fn sa_model_gradcam(
    model: *const SaModel,
    image: *const f64,
    grade: usize,
    map: *mut f64,
    map_len: usize,
) -> SaStatus {
    guard(|| {
        let m = model_ref(model)?;
        if image.is_null() || map.is_null() {
            return Err(fail(SaStatus::NullPointer, "image and map must be non-null"));
        }
        let side = m.map_side();
        if map_len < side * side {
            return Err(fail(
                SaStatus::InvalidArgument,
                format!("map holds {map_len} values, {} required", side * side),
            ));
        }
        let [h, w, c] = m.image_shape();
        let pixels = std::slice::from_raw_parts(image, h * w * c);
        let img = lift(Tensor::new(vec![h, w, c], pixels.to_vec()))?;
        let cam = lift(gradcam(&m.model, &m.store, &img, grade))?;
        std::slice::from_raw_parts_mut(map, side * side).copy_from_slice(cam.data());
        Ok(())
    })
}
