//! C ABI over `mirrorseg`.
//!
//! Every fallible function returns an [`MsStatus`]; on failure a message is kept per thread
//! and can be read with [`ms_last_error`]. Models are opaque [`MsModel`] handles owned by the
//! caller and released with [`ms_model_free`]. Images cross the boundary as channel-major
//! `f32` planes in `[0, 1]`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use candle_core::DType;
use mirrorseg::checkpoint::{load_checkpoint, save_checkpoint};
use mirrorseg::data::Image;
use mirrorseg::objective::compute_metrics;
use mirrorseg::pipeline::predict_frame;
use mirrorseg::prompt::select_points;
use mirrorseg::{Error, MirrorSegModel, RunConfig};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MsStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Shape = 4,
    Model = 5,
    Panic = 6,
}

/// Opaque model handle.
pub struct MsModel {
    inner: MirrorSegModel,
}

/// Binary-mask metrics of one prediction.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MsMetrics {
    pub iou: f64,
    pub f_beta: f64,
    pub accuracy: f64,
    pub mae: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let mut msg = msg.into();
    msg.retain(|c| c != '\0');
    let c = CString::new(msg).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

struct Failure(MsStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Io(_) | Error::Load { .. } | Error::Image(_) | Error::Safetensors(_) => MsStatus::Io,
            Error::Shape(_) => MsStatus::Shape,
            Error::Config(_) | Error::Invalid(_) | Error::CheckpointMismatch { .. } => MsStatus::InvalidArgument,
            _ => MsStatus::Model,
        };
        Failure(status, e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(MsStatus::NullPointer, format!("`{what}` is null"))
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(MsStatus::InvalidArgument, msg.into())
}

/// Runs `f`, converting errors and panics into a status plus the thread's last error.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> MsStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => MsStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("panic: {msg}"));
            MsStatus::Panic
        }
    }
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| invalid(format!("`{what}` is not UTF-8")))?;
    Ok(PathBuf::from(s))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut_arg<'a, T>(p: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

fn boxed(model: MirrorSegModel, out: *mut *mut MsModel) {
    let handle = Box::new(MsModel { inner: model });
    // SAFETY: callers check `out` for null before building the model.
    unsafe { *out = Box::into_raw(handle) };
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ms_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or null. Valid until the next call.
#[no_mangle]
pub extern "C" fn ms_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Builds a freshly initialized toy-profile model with parameters drawn from `seed`.
///
/// # Safety
/// `out` must be valid for a pointer write.
#[no_mangle]
pub unsafe extern "C" fn ms_model_new_toy(seed: u64, out: *mut *mut MsModel) -> MsStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let mut cfg = RunConfig::toy();
        cfg.seed = seed;
        boxed(MirrorSegModel::new(&cfg, DType::F32)?, out);
        Ok(())
    })
}

/// Loads a checkpoint written by `mirrorseg train` (or [`ms_model_save`]).
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be valid for a pointer write.
#[no_mangle]
pub unsafe extern "C" fn ms_model_load(path: *const c_char, out: *mut *mut MsModel) -> MsStatus {
    guard(|| {
        let path = path_arg(path, "path")?;
        if out.is_null() {
            return Err(null("out"));
        }
        boxed(load_checkpoint(&path, None, DType::F32)?, out);
        Ok(())
    })
}

/// Writes the model to a checkpoint file.
///
/// # Safety
/// `model` must come from this library; `path` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn ms_model_save(model: *const MsModel, path: *const c_char) -> MsStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let path = path_arg(path, "path")?;
        save_checkpoint(&m.inner, &path)?;
        Ok(())
    })
}

/// Releases a model handle. Null is ignored.
///
/// # Safety
/// `model` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ms_model_free(model: *mut MsModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Square side the model resizes every frame to.
///
/// # Safety
/// `model` must come from this library; `out` must be valid for a write.
#[no_mangle]
pub unsafe extern "C" fn ms_model_input_size(model: *const MsModel, out: *mut u32) -> MsStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = m.inner.config().input_size as u32;
        Ok(())
    })
}

/// Mirror probability of every pixel of one RGB-D frame.
///
/// `rgb` holds `3 * height * width` channel-major values, `depth` and `out_prob` hold
/// `height * width`. The output is at the frame's own size.
///
/// # Safety
/// Every buffer must be valid for the stated number of elements.
#[no_mangle]
pub unsafe extern "C" fn ms_model_predict_frame(
    model: *const MsModel,
    rgb: *const f32,
    depth: *const f32,
    height: u32,
    width: u32,
    out_prob: *mut f32,
) -> MsStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let (h, w) = (height as usize, width as usize);
        if h == 0 || w == 0 {
            return Err(invalid("frame must be at least 1x1"));
        }
        let rgb = slice_arg(rgb, 3 * h * w, "rgb")?;
        let depth = slice_arg(depth, h * w, "depth")?;
        let out = slice_mut_arg(out_prob, h * w, "out_prob")?;
        let rgb = Image {
            channels: 3,
            height: h,
            width: w,
            data: rgb.to_vec(),
        };
        let depth = Image {
            channels: 1,
            height: h,
            width: w,
            data: depth.to_vec(),
        };
        let (prob, _, _) = predict_frame(&m.inner, &rgb, &depth)?;
        out.copy_from_slice(&prob.data);
        Ok(())
    })
}

/// Greedy distance-filtered point selection over a row-major `height × width` map.
///
/// Writes up to `max_points` `(x / width, y / height)` pairs to `out_xy` (`2 * max_points`
/// values), their responses to `out_scores` and the number written to `out_count`.
///
/// # Safety
/// Every buffer must be valid for the stated number of elements.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn ms_select_points(
    values: *const f64,
    height: u32,
    width: u32,
    max_points: u32,
    min_distance: f64,
    out_xy: *mut f64,
    out_scores: *mut f64,
    out_count: *mut u32,
) -> MsStatus {
    guard(|| {
        let (h, w, k) = (height as usize, width as usize, max_points as usize);
        if h == 0 || w == 0 || k == 0 {
            return Err(invalid("height, width and max_points must be positive"));
        }
        if min_distance.is_nan() || min_distance < 0.0 {
            return Err(invalid("min_distance must be non-negative"));
        }
        let values = slice_arg(values, h * w, "values")?;
        let xy = slice_mut_arg(out_xy, 2 * k, "out_xy")?;
        let scores = slice_mut_arg(out_scores, k, "out_scores")?;
        let count = out_count.as_mut().ok_or_else(|| null("out_count"))?;
        let set = select_points(values, h, w, k, min_distance);
        for (i, ((x, y), s)) in set.coords.iter().zip(&set.scores).enumerate() {
            xy[2 * i] = *x;
            xy[2 * i + 1] = *y;
            scores[i] = *s;
        }
        *count = set.len() as u32;
        Ok(())
    })
}

/// IoU, F-beta, accuracy and MAE of `pred` (probabilities) against binary `gt`.
///
/// # Safety
/// `pred` and `gt` must hold `len` values; `out` must be valid for a write.
#[no_mangle]
pub unsafe extern "C" fn ms_compute_metrics(
    pred: *const f64,
    gt: *const f64,
    len: usize,
    threshold: f64,
    out: *mut MsMetrics,
) -> MsStatus {
    guard(|| {
        let pred = slice_arg(pred, len, "pred")?;
        let gt = slice_arg(gt, len, "gt")?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let m = compute_metrics(pred, gt, threshold)?;
        *out = MsMetrics {
            iou: m.iou,
            f_beta: m.f_beta,
            accuracy: m.accuracy,
            mae: m.mae,
        };
        Ok(())
    })
}
