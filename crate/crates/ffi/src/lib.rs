//! C ABI over `dcfm`: load a model, segment a clip, score frames and
//! accumulate a confusion matrix.
//!
//! Every fallible call returns a [`DcfmStatus`]; on failure a message is
//! kept per thread and exposed by [`dcfm_last_error_message`]. Handles are
//! opaque and must be released with the matching `_free` function. Panics
//! never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::slice;

use dcfm::dataio::{load_model, LabelMap, RgbImage};
use dcfm::engine::{frame_score, run_video, MergeMode, Policy, ScheduleConfig};
use dcfm::metrics::ConfusionMatrix;
use dcfm::model::Model;
use dcfm::Error;

/// Result codes. Zero is success.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DcfmStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Numeric = 4,
    Panic = 5,
}

/// Keyframe policy for [`DcfmSchedule`].
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DcfmPolicy {
    Fixed = 0,
    Adaptive = 1,
}

/// How a non-key frame between two keyframes is predicted.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DcfmMode {
    /// Previous keyframe only.
    P = 0,
    /// Average of the previous and next keyframe predictions.
    B = 1,
}

/// Keyframe schedule. `k` is used by the fixed policy, `min_k` and
/// `threshold` by the adaptive one.
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct DcfmSchedule {
    pub policy: DcfmPolicy,
    pub k: u32,
    pub min_k: u32,
    pub threshold: f64,
    pub first_key: u32,
    pub mode: DcfmMode,
}

/// Opaque trained model.
pub struct DcfmModel {
    inner: Model<f32>,
}

/// Opaque confusion matrix.
pub struct DcfmConfusion {
    inner: ConfusionMatrix,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> DcfmStatus {
    match e.exit_code() {
        2 => DcfmStatus::InvalidArgument,
        3 => DcfmStatus::Io,
        _ => DcfmStatus::Numeric,
    }
}

/// Runs `f`, mapping errors and panics to a status and recording the message.
fn guard(f: impl FnOnce() -> Result<(), (DcfmStatus, String)>) -> DcfmStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => DcfmStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            DcfmStatus::Panic
        }
    }
}

fn lib_err(e: Error) -> (DcfmStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (DcfmStatus, String) {
    (DcfmStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> (DcfmStatus, String) {
    (DcfmStatus::InvalidArgument, msg.into())
}

/// Message of the last failed call on this thread, or null. The pointer is
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn dcfm_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn dcfm_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Default schedule: fixed policy, K = 2, mode B.
#[no_mangle]
pub extern "C" fn dcfm_schedule_default() -> DcfmSchedule {
    let d = ScheduleConfig::default();
    DcfmSchedule {
        policy: DcfmPolicy::Fixed,
        k: d.k as u32,
        min_k: d.min_k as u32,
        threshold: d.threshold,
        first_key: d.first_key as u32,
        mode: DcfmMode::B,
    }
}

fn schedule_config(s: &DcfmSchedule) -> ScheduleConfig {
    ScheduleConfig {
        policy: match s.policy {
            DcfmPolicy::Fixed => Policy::Fixed,
            DcfmPolicy::Adaptive => Policy::Adaptive,
        },
        k: s.k as usize,
        min_k: s.min_k as usize,
        threshold: s.threshold,
        first_key: s.first_key as usize,
        mode: match s.mode {
            DcfmMode::P => MergeMode::P,
            DcfmMode::B => MergeMode::B,
        },
    }
}

/// Loads a model file. On success `*out` owns a new handle.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn dcfm_model_load(
    path: *const c_char,
    out: *mut *mut DcfmModel,
) -> DcfmStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| invalid("path is not valid UTF-8"))?;
        let inner = load_model(path).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(DcfmModel { inner }));
        Ok(())
    })
}

/// Releases a model. Null is accepted.
///
/// # Safety
/// `model` must come from [`dcfm_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn dcfm_model_free(model: *mut DcfmModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of output classes, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn dcfm_model_num_classes(model: *const DcfmModel) -> u32 {
    model
        .as_ref()
        .map_or(0, |m| m.inner.config().num_classes as u32)
}

fn frames_from(
    rgb: &[u8],
    n: usize,
    height: usize,
    width: usize,
) -> Result<Vec<dcfm::tensor::Tensor<f32>>, (DcfmStatus, String)> {
    let frame = height * width * 3;
    (0..n)
        .map(|t| {
            RgbImage::new(width, height, rgb[t * frame..(t + 1) * frame].to_vec())
                .map(|img| img.to_tensor())
                .map_err(lib_err)
        })
        .collect()
}

/// Segments a clip of `num_frames` interleaved 8-bit RGB frames stored back
/// to back in `rgb` (`num_frames * height * width * 3` bytes). Writes one
/// class index per pixel to `labels_out` (`num_frames * height * width`
/// bytes) and, if `is_key_out` is not null, 1 or 0 per frame marking
/// keyframes.
///
/// # Safety
/// All non-null pointers must reference buffers of the sizes above.
#[no_mangle]
pub unsafe extern "C" fn dcfm_run_video(
    model: *const DcfmModel,
    rgb: *const u8,
    num_frames: usize,
    height: usize,
    width: usize,
    schedule: *const DcfmSchedule,
    labels_out: *mut u8,
    is_key_out: *mut u8,
) -> DcfmStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        let schedule = schedule.as_ref().ok_or_else(|| null("schedule"))?;
        if rgb.is_null() {
            return Err(null("rgb"));
        }
        if labels_out.is_null() {
            return Err(null("labels_out"));
        }
        if num_frames == 0 || height == 0 || width == 0 {
            return Err(invalid("clip dimensions must be positive"));
        }
        let plane = height
            .checked_mul(width)
            .ok_or_else(|| invalid("frame size overflows"))?;
        let total = plane
            .checked_mul(num_frames)
            .and_then(|v| v.checked_mul(3))
            .ok_or_else(|| invalid("clip size overflows"))?;
        let frames = frames_from(slice::from_raw_parts(rgb, total), num_frames, height, width)?;
        let cfg = schedule_config(schedule);
        cfg.validate().map_err(lib_err)?;
        let output = run_video(&model.inner, &frames, &cfg).map_err(lib_err)?;
        let labels = slice::from_raw_parts_mut(labels_out, plane * num_frames);
        for (t, pred) in output.predictions.iter().enumerate() {
            labels[t * plane..(t + 1) * plane].copy_from_slice(pred.data());
        }
        if !is_key_out.is_null() {
            let keys = slice::from_raw_parts_mut(is_key_out, num_frames);
            keys.fill(0);
            for &k in &output.report.keyframe_indices {
                keys[k] = 1;
            }
        }
        Ok(())
    })
}

/// Mean absolute difference between two interleaved RGB frames, the score
/// the adaptive policy compares against its threshold.
///
/// # Safety
/// `a` and `b` must each hold `height * width * 3` bytes; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dcfm_frame_score(
    a: *const u8,
    b: *const u8,
    height: usize,
    width: usize,
    out: *mut f64,
) -> DcfmStatus {
    guard(|| {
        if a.is_null() || b.is_null() {
            return Err(null("frame"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let n = height
            .checked_mul(width)
            .and_then(|v| v.checked_mul(3))
            .ok_or_else(|| invalid("frame size overflows"))?;
        let fa = frames_from(slice::from_raw_parts(a, n), 1, height, width)?;
        let fb = frames_from(slice::from_raw_parts(b, n), 1, height, width)?;
        *out = frame_score(&fa[0], &fb[0]).map_err(lib_err)?;
        Ok(())
    })
}

/// New empty confusion matrix, or null unless `num_classes` is in 1..=255.
#[no_mangle]
pub extern "C" fn dcfm_confusion_new(num_classes: u32) -> *mut DcfmConfusion {
    if num_classes == 0 || num_classes > 255 {
        set_error(format!("num_classes must be in 1..=255, got {num_classes}"));
        return ptr::null_mut();
    }
    Box::into_raw(Box::new(DcfmConfusion {
        inner: ConfusionMatrix::new(num_classes as usize),
    }))
}

/// Releases a confusion matrix. Null is accepted.
///
/// # Safety
/// `cm` must come from [`dcfm_confusion_new`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn dcfm_confusion_free(cm: *mut DcfmConfusion) {
    if !cm.is_null() {
        drop(Box::from_raw(cm));
    }
}

/// Adds one `height x width` prediction/ground-truth pair. Ground-truth
/// value 255 is ignored.
///
/// # Safety
/// `pred` and `gt` must each hold `height * width` bytes.
#[no_mangle]
pub unsafe extern "C" fn dcfm_confusion_accumulate(
    cm: *mut DcfmConfusion,
    pred: *const u8,
    gt: *const u8,
    height: usize,
    width: usize,
) -> DcfmStatus {
    guard(|| {
        let cm = cm.as_mut().ok_or_else(|| null("cm"))?;
        if pred.is_null() || gt.is_null() {
            return Err(null("label map"));
        }
        let n = height
            .checked_mul(width)
            .ok_or_else(|| invalid("map size overflows"))?;
        let p = LabelMap::new(height, width, slice::from_raw_parts(pred, n).to_vec())
            .map_err(lib_err)?;
        let g =
            LabelMap::new(height, width, slice::from_raw_parts(gt, n).to_vec()).map_err(lib_err)?;
        cm.inner.accumulate(&p, &g).map_err(lib_err)
    })
}

/// Mean IoU over classes present in the accumulated ground truth.
///
/// # Safety
/// `cm` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn dcfm_confusion_miou(
    cm: *const DcfmConfusion,
    out: *mut f64,
) -> DcfmStatus {
    guard(|| {
        let cm = cm.as_ref().ok_or_else(|| null("cm"))?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = cm.inner.miou().map_err(lib_err)?;
        Ok(())
    })
}

/// Frequency-weighted IoU.
///
/// # Safety
/// `cm` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn dcfm_confusion_wiou(
    cm: *const DcfmConfusion,
    out: *mut f64,
) -> DcfmStatus {
    guard(|| {
        let cm = cm.as_ref().ok_or_else(|| null("cm"))?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = cm.inner.wiou().map_err(lib_err)?;
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn status_mapping_follows_exit_codes() {
        assert_eq!(
            status_of(&Error::Config("x".into())),
            DcfmStatus::InvalidArgument
        );
        assert_eq!(status_of(&Error::Format("x".into())), DcfmStatus::Io);
        assert_eq!(
            status_of(&Error::NonFinite { op: "x" }),
            DcfmStatus::Numeric
        );
    }

    #[test]
    fn panic_is_contained() {
        let s = guard(|| panic!("boom"));
        assert_eq!(s, DcfmStatus::Panic);
        assert!(!dcfm_last_error_message().is_null());
    }

    #[test]
    fn default_schedule_round_trips() {
        assert_eq!(
            schedule_config(&dcfm_schedule_default()),
            ScheduleConfig::default()
        );
    }
}
