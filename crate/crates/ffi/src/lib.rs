//! C interface to ggnet.
//!
//! Every fallible function returns a [`GgnetStatus`]. On failure a message
//! describing the error is stored per thread and can be read with
//! [`ggnet_last_error`]. Images are row-major `height × width` buffers:
//! intensities as `double` in [0, 1], masks as `uint8_t` where any nonzero
//! byte is foreground. Panics never cross the boundary; they are reported as
//! [`GgnetStatus::Panic`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use ggnet::checkpoint::Checkpoint;
use ggnet::data::{generate_phantom, PhantomParams};
use ggnet::metrics::evaluate;
use ggnet::network::GgNet;
use ggnet::{BinaryMask, Error, Tensor};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GgnetStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    ConfigError = 3,
    DataError = 4,
    CheckpointError = 5,
    NumericError = 6,
    InternalError = 7,
    Panic = 8,
}

/// A trained network loaded from a checkpoint. Opaque to C callers.
pub struct GgnetModel {
    net: GgNet,
}

/// Overlap and distance metrics of one prediction. When either mask is
/// empty the distances are undefined: `has_distances` is 0 and `hd` and
/// `abd` are NaN.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GgnetMetrics {
    pub dice: f64,
    pub jaccard: f64,
    pub accuracy: f64,
    pub recall: f64,
    pub precision: f64,
    pub hd: f64,
    pub abd: f64,
    pub has_distances: u8,
}

/// Synthetic phantom settings. Fill with [`ggnet_phantom_default_params`]
/// and adjust.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GgnetPhantomParams {
    pub height: usize,
    pub width: usize,
    pub axes_min: f64,
    pub axes_max: f64,
    pub lesion_mean: f64,
    pub background_mean: f64,
    pub speckle: f64,
    pub shadow_prob: f64,
    pub blur: f64,
    pub irregularity: f64,
    pub seed: u64,
}

impl From<&PhantomParams> for GgnetPhantomParams {
    fn from(p: &PhantomParams) -> Self {
        GgnetPhantomParams {
            height: p.height,
            width: p.width,
            axes_min: p.axes_min,
            axes_max: p.axes_max,
            lesion_mean: p.lesion_mean,
            background_mean: p.background_mean,
            speckle: p.speckle,
            shadow_prob: p.shadow_prob,
            blur: p.blur,
            irregularity: p.irregularity,
            seed: p.seed,
        }
    }
}

impl From<&GgnetPhantomParams> for PhantomParams {
    fn from(p: &GgnetPhantomParams) -> Self {
        PhantomParams {
            height: p.height,
            width: p.width,
            axes_min: p.axes_min,
            axes_max: p.axes_max,
            lesion_mean: p.lesion_mean,
            background_mean: p.background_mean,
            speckle: p.speckle,
            shadow_prob: p.shadow_prob,
            blur: p.blur,
            irregularity: p.irregularity,
            seed: p.seed,
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_last_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

struct Failure(GgnetStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Config(_) | Error::Phantom(_) | Error::LayerCount { .. } => GgnetStatus::ConfigError,
            Error::MissingPair { .. } | Error::Format { .. } | Error::Io { .. } => GgnetStatus::DataError,
            Error::Checkpoint(_) => GgnetStatus::CheckpointError,
            Error::NonFinite { .. } | Error::UndefinedMetric(_) => GgnetStatus::NumericError,
            Error::Tensor(_) | Error::Param(_) => GgnetStatus::InternalError,
        };
        Failure(status, e.to_string())
    }
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(GgnetStatus::InvalidArgument, msg.into())
}

/// Runs `f`, converting errors and panics into a status code.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> GgnetStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => GgnetStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_last_error(&msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_last_error(&format!("panic: {msg}"));
            GgnetStatus::Panic
        }
    }
}

fn pixel_count(height: usize, width: usize) -> Result<usize, Failure> {
    if height == 0 || width == 0 {
        return Err(invalid("height and width must be positive"));
    }
    height.checked_mul(width).ok_or_else(|| invalid("height * width overflows"))
}

fn non_null<T>(p: *const T, what: &str) -> Result<(), Failure> {
    if p.is_null() {
        Err(Failure(GgnetStatus::NullPointer, format!("{what} is null")))
    } else {
        Ok(())
    }
}

/// # Safety
/// `p` must be null or point to `n` readable elements.
unsafe fn input<'a, T>(p: *const T, n: usize, what: &str) -> Result<&'a [T], Failure> {
    non_null(p, what)?;
    Ok(std::slice::from_raw_parts(p, n))
}

/// # Safety
/// `p` must be null or point to `n` writable elements.
unsafe fn output<'a, T>(p: *mut T, n: usize, what: &str) -> Result<&'a mut [T], Failure> {
    non_null(p, what)?;
    Ok(std::slice::from_raw_parts_mut(p, n))
}

unsafe fn read_mask(p: *const u8, height: usize, width: usize, what: &str) -> Result<BinaryMask, Failure> {
    let n = pixel_count(height, width)?;
    let bits = input(p, n, what)?.iter().map(|&b| b != 0).collect();
    Ok(BinaryMask::new(height, width, bits)?)
}

unsafe fn read_image(p: *const f64, height: usize, width: usize) -> Result<Tensor, Failure> {
    let n = pixel_count(height, width)?;
    let data = input(p, n, "image")?.to_vec();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(invalid("image contains non-finite values"));
    }
    Ok(Tensor::new(&[1, height, width], data).map_err(Error::from)?)
}

fn write_mask(mask: &BinaryMask, out: &mut [u8]) {
    for (o, &m) in out.iter_mut().zip(mask.data()) {
        *o = u8::from(m);
    }
}

/// Message of the most recent failure on this thread, or an empty string.
/// The pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn ggnet_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ggnet_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a checkpoint written by `ggnet train`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer. On
/// success `*out` owns a model that must be released with
/// [`ggnet_model_free`].
#[no_mangle]
pub unsafe extern "C" fn ggnet_model_load(path: *const c_char, out: *mut *mut GgnetModel) -> GgnetStatus {
    guard(|| {
        non_null(path, "path")?;
        non_null(out, "out")?;
        *out = ptr::null_mut();
        let path = CStr::from_ptr(path).to_str().map_err(|_| invalid("path is not valid UTF-8"))?;
        let ck = Checkpoint::load(Path::new(path))?;
        *out = Box::into_raw(Box::new(GgnetModel { net: ck.net }));
        Ok(())
    })
}

/// Releases a model. Null is accepted and ignored.
///
/// # Safety
/// `model` must come from [`ggnet_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ggnet_model_free(model: *mut GgnetModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of trainable scalars in the model.
///
/// # Safety
/// `model` must be a live model and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ggnet_model_parameter_count(model: *const GgnetModel, out: *mut usize) -> GgnetStatus {
    guard(|| {
        non_null(model, "model")?;
        non_null(out, "out")?;
        *out = (*model).net.parameter_count();
        Ok(())
    })
}

/// Foreground probability per pixel. Both extents must be multiples of 16.
///
/// # Safety
/// `image` and `out_prob` must each hold `height * width` elements.
#[no_mangle]
pub unsafe extern "C" fn ggnet_model_predict_prob(
    model: *const GgnetModel,
    image: *const f64,
    height: usize,
    width: usize,
    out_prob: *mut f64,
) -> GgnetStatus {
    guard(|| {
        non_null(model, "model")?;
        let img = read_image(image, height, width)?;
        let out = output(out_prob, height * width, "out_prob")?;
        out.copy_from_slice(&(*model).net.predict_prob(&img)?);
        Ok(())
    })
}

/// Binary segmentation: 1 where the probability exceeds `threshold`.
///
/// # Safety
/// `image` and `out_mask` must each hold `height * width` elements.
#[no_mangle]
pub unsafe extern "C" fn ggnet_model_infer(
    model: *const GgnetModel,
    image: *const f64,
    height: usize,
    width: usize,
    threshold: f64,
    out_mask: *mut u8,
) -> GgnetStatus {
    guard(|| {
        non_null(model, "model")?;
        if !(0.0..1.0).contains(&threshold) {
            return Err(invalid("threshold must lie in [0, 1)"));
        }
        let img = read_image(image, height, width)?;
        let out = output(out_mask, height * width, "out_mask")?;
        write_mask(&(*model).net.infer(&img, threshold)?, out);
        Ok(())
    })
}

/// Compares a predicted mask with a ground-truth mask.
///
/// # Safety
/// `pred` and `gt` must each hold `height * width` bytes; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn ggnet_metrics(
    pred: *const u8,
    gt: *const u8,
    height: usize,
    width: usize,
    out: *mut GgnetMetrics,
) -> GgnetStatus {
    guard(|| {
        non_null(out, "out")?;
        let p = read_mask(pred, height, width, "pred")?;
        let g = read_mask(gt, height, width, "gt")?;
        let m = evaluate("", 0, &p, &g)?;
        *out = GgnetMetrics {
            dice: m.dice,
            jaccard: m.jaccard,
            accuracy: m.accuracy,
            recall: m.recall,
            precision: m.precision,
            hd: m.hd.unwrap_or(f64::NAN),
            abd: m.abd.unwrap_or(f64::NAN),
            has_distances: u8::from(m.hd.is_some()),
        };
        Ok(())
    })
}

/// One-pixel inner boundary of a mask.
///
/// # Safety
/// `mask` and `out` must each hold `height * width` bytes.
#[no_mangle]
pub unsafe extern "C" fn ggnet_boundary(mask: *const u8, height: usize, width: usize, out: *mut u8) -> GgnetStatus {
    guard(|| {
        let m = read_mask(mask, height, width, "mask")?;
        let o = output(out, height * width, "out")?;
        write_mask(&ggnet::bd::boundary_gt(&m), o);
        Ok(())
    })
}

/// Writes the default phantom settings to `out`.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ggnet_phantom_default_params(out: *mut GgnetPhantomParams) -> GgnetStatus {
    guard(|| {
        non_null(out, "out")?;
        *out = GgnetPhantomParams::from(&PhantomParams::default());
        Ok(())
    })
}

/// Generates one phantom and its lesion mask.
///
/// # Safety
/// `params` must be valid; `out_image` and `out_mask` must each hold
/// `params->height * params->width` elements.
#[no_mangle]
pub unsafe extern "C" fn ggnet_phantom(
    params: *const GgnetPhantomParams,
    out_image: *mut f64,
    out_mask: *mut u8,
) -> GgnetStatus {
    guard(|| {
        non_null(params, "params")?;
        let p = PhantomParams::from(&*params);
        let n = pixel_count(p.height, p.width)?;
        let sample = generate_phantom(&p, "phantom")?;
        output(out_image, n, "out_image")?.copy_from_slice(sample.image.data());
        write_mask(&sample.mask, output(out_mask, n, "out_mask")?);
        Ok(())
    })
}
