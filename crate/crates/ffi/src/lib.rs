//! C interface to trained SAR predictors, `SARD` datasets and the metrics.
//!
//! Every fallible function returns a [`SarfStatus`]; on failure a message is
//! available from [`sarf_last_error`] on the same thread. Handles returned by
//! the `*_open`/`*_load` functions must be released with the matching
//! `*_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use sarforge::dataset::{read_dataset, DatasetError, Sample};
use sarforge::evaluate::{rmse_pct, ssim, MetricError};
use sarforge::nn::checkpoint::load_checkpoint;
use sarforge::nn::{NnError, UNet};
use sarforge::raster::Grid2;

/// Result codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SarfStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Incompatible = 5,
    OutOfRange = 6,
    Metric = 7,
    Panic = 8,
}

/// A loaded network.
pub struct SarfModel {
    net: UNet<f32>,
}

/// An in-memory dataset.
pub struct SarfDataset {
    samples: Vec<Sample>,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).unwrap_or_default());
}

struct Fail(SarfStatus, String);

impl From<NnError> for Fail {
    fn from(e: NnError) -> Self {
        let code = match e {
            NnError::Io { .. } => SarfStatus::Io,
            NnError::Format { .. } => SarfStatus::Format,
            NnError::Incompatible { .. } | NnError::Shape { .. } => SarfStatus::Incompatible,
            _ => SarfStatus::InvalidArgument,
        };
        Fail(code, e.to_string())
    }
}

impl From<DatasetError> for Fail {
    fn from(e: DatasetError) -> Self {
        let code = match e {
            DatasetError::Io { .. } => SarfStatus::Io,
            DatasetError::Format { .. } => SarfStatus::Format,
            _ => SarfStatus::InvalidArgument,
        };
        Fail(code, e.to_string())
    }
}

impl From<MetricError> for Fail {
    fn from(e: MetricError) -> Self {
        Fail(SarfStatus::Metric, e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(SarfStatus::NullArgument, format!("{what} is null"))
}

/// Runs `f`, converting errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> SarfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            SarfStatus::Ok
        }
        Ok(Err(Fail(code, msg))) => {
            set_error(msg);
            code
        }
        Err(_) => {
            set_error("internal panic");
            SarfStatus::Panic
        }
    }
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(SarfStatus::InvalidArgument, "path is not UTF-8".into()))?;
    Ok(PathBuf::from(s))
}

unsafe fn grid_arg(data: *const f32, width: usize, height: usize, what: &str) -> Result<Grid2<f32>, Fail> {
    if data.is_null() {
        return Err(null(what));
    }
    let n = width
        .checked_mul(height)
        .filter(|&n| n > 0)
        .ok_or_else(|| Fail(SarfStatus::InvalidArgument, format!("{what}: bad size {width}x{height}")))?;
    let v = std::slice::from_raw_parts(data, n).to_vec();
    Ok(Grid2::from_vec(width, height, v).expect("length matches"))
}

/// Message describing the last failure on this thread; empty after success.
/// The pointer stays valid until the next call on this thread.
#[no_mangle]
pub extern "C" fn sarf_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn sarf_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a `SARW` checkpoint into `*out`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sarf_model_load(path: *const c_char, out: *mut *mut SarfModel) -> SarfStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let ck = load_checkpoint(&path_arg(path)?)?;
        let net = ck.model()?;
        *out = Box::into_raw(Box::new(SarfModel { net }));
        Ok(())
    })
}

/// Releases a model; null is ignored.
///
/// # Safety
/// `model` must come from [`sarf_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn sarf_model_free(model: *mut SarfModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Network depth and base channel count.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn sarf_model_arch(model: *const SarfModel, depth: *mut u32, base_channels: *mut u32) -> SarfStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if depth.is_null() || base_channels.is_null() {
            return Err(null("output"));
        }
        *depth = m.net.config.depth as u32;
        *base_channels = m.net.config.base_channels as u32;
        Ok(())
    })
}

/// Predicts a `height × width` SAR map (row-major, unclamped) from an input
/// raster of the same size. Both sides must be divisible by `2^depth`.
///
/// # Safety
/// `input` and `output` must each hold `width * height` floats.
#[no_mangle]
pub unsafe extern "C" fn sarf_model_predict(
    model: *const SarfModel,
    input: *const f32,
    width: usize,
    height: usize,
    output: *mut f32,
) -> SarfStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if output.is_null() {
            return Err(null("output"));
        }
        let x = grid_arg(input, width, height, "input")?;
        let y = m.net.predict(&x)?;
        std::slice::from_raw_parts_mut(output, width * height).copy_from_slice(y.as_slice());
        Ok(())
    })
}

/// Reads a `SARD` dataset into `*out`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sarf_dataset_open(path: *const c_char, out: *mut *mut SarfDataset) -> SarfStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let samples = read_dataset(&path_arg(path)?)?;
        *out = Box::into_raw(Box::new(SarfDataset { samples }));
        Ok(())
    })
}

/// Releases a dataset; null is ignored.
///
/// # Safety
/// `dataset` must come from [`sarf_dataset_open`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn sarf_dataset_free(dataset: *mut SarfDataset) {
    if !dataset.is_null() {
        drop(Box::from_raw(dataset));
    }
}

/// Number of samples.
///
/// # Safety
/// Both pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn sarf_dataset_len(dataset: *const SarfDataset, len: *mut usize) -> SarfStatus {
    guard(|| {
        let d = dataset.as_ref().ok_or_else(|| null("dataset"))?;
        let len = len.as_mut().ok_or_else(|| null("len"))?;
        *len = d.samples.len();
        Ok(())
    })
}

/// Raster width and height shared by all samples.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn sarf_dataset_shape(dataset: *const SarfDataset, width: *mut usize, height: *mut usize) -> SarfStatus {
    guard(|| {
        let d = dataset.as_ref().ok_or_else(|| null("dataset"))?;
        if width.is_null() || height.is_null() {
            return Err(null("output"));
        }
        let s = d
            .samples
            .first()
            .ok_or_else(|| Fail(SarfStatus::OutOfRange, "dataset is empty".into()))?;
        *width = s.width();
        *height = s.height();
        Ok(())
    })
}

/// Copies sample `index` into `input` and `target` (each `capacity` floats,
/// at least width × height) and its W/kg scale into `norm_factor`.
///
/// # Safety
/// Buffers must hold `capacity` floats; `norm_factor` may be null.
#[no_mangle]
pub unsafe extern "C" fn sarf_dataset_sample(
    dataset: *const SarfDataset,
    index: usize,
    input: *mut f32,
    target: *mut f32,
    capacity: usize,
    norm_factor: *mut f64,
) -> SarfStatus {
    guard(|| {
        let d = dataset.as_ref().ok_or_else(|| null("dataset"))?;
        let s = d.samples.get(index).ok_or_else(|| {
            Fail(
                SarfStatus::OutOfRange,
                format!("sample {index} out of range ({} samples)", d.samples.len()),
            )
        })?;
        if input.is_null() || target.is_null() {
            return Err(null("buffer"));
        }
        let n = s.input.len();
        if capacity < n {
            return Err(Fail(
                SarfStatus::InvalidArgument,
                format!("capacity {capacity} below raster size {n}"),
            ));
        }
        std::slice::from_raw_parts_mut(input, n).copy_from_slice(s.input.as_slice());
        std::slice::from_raw_parts_mut(target, n).copy_from_slice(s.target.as_slice());
        if let Some(nf) = norm_factor.as_mut() {
            *nf = s.meta.norm_factor;
        }
        Ok(())
    })
}

unsafe fn metric(
    pred: *const f32,
    truth: *const f32,
    width: usize,
    height: usize,
    out: *mut f64,
    f: fn(&Grid2<f64>, &Grid2<f64>) -> Result<f64, MetricError>,
) -> SarfStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let p = grid_arg(pred, width, height, "pred")?.map(|&v| v as f64);
        let t = grid_arg(truth, width, height, "truth")?.map(|&v| v as f64);
        *out = f(&p, &t)?;
        Ok(())
    })
}

/// `100 · RMSE / max(truth)` over the whole raster.
///
/// # Safety
/// `pred` and `truth` must hold `width * height` floats; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn sarf_rmse_pct(
    pred: *const f32,
    truth: *const f32,
    width: usize,
    height: usize,
    out: *mut f64,
) -> SarfStatus {
    metric(pred, truth, width, height, out, rmse_pct)
}

/// Mean SSIM (11×11 Gaussian window, σ 1.5, L = max(truth)).
///
/// # Safety
/// `pred` and `truth` must hold `width * height` floats; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn sarf_ssim(
    pred: *const f32,
    truth: *const f32,
    width: usize,
    height: usize,
    out: *mut f64,
) -> SarfStatus {
    metric(pred, truth, width, height, out, ssim)
}
