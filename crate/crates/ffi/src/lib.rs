//! C ABI over `m2v-core`: opaque encoder handles, feature extraction and
//! the evaluation metrics. Every function returns an [`M2vStatus`]; the
//! message of the last failure on the calling thread is available through
//! [`m2v_last_error`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;
use std::slice;

use m2v_core::audio::normalize_samples;
use m2v_core::encoder::{encode, EncoderConfig, EncoderError};
use m2v_core::numerics::ParamStore;
use m2v_core::probe::{self, tap_frames, ProbeError, Tap};
use m2v_core::trainer::{Checkpoint, TrainError};

/// Result code of every call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum M2vStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Data = 3,
    Numerical = 4,
    BufferTooSmall = 5,
    Panic = 6,
}

/// Opaque encoder: a configuration plus one parameter table.
pub struct M2vEncoder {
    config: EncoderConfig,
    params: ParamStore<f32>,
    top_k: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn fail(status: M2vStatus, msg: impl AsRef<str>) -> M2vStatus {
    set_error(msg.as_ref());
    status
}

fn guard(f: impl FnOnce() -> M2vStatus) -> M2vStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(_) => fail(M2vStatus::Panic, "internal panic"),
    }
}

fn encoder_status(e: &EncoderError) -> M2vStatus {
    match e {
        EncoderError::Numerics(_) => M2vStatus::Numerical,
        EncoderError::Config(_) | EncoderError::Length { .. } => M2vStatus::InvalidArgument,
        EncoderError::Mask(_) => M2vStatus::Data,
    }
}

fn probe_status(e: &ProbeError) -> M2vStatus {
    match e {
        ProbeError::Config(_) => M2vStatus::InvalidArgument,
        ProbeError::Encoder(inner) => encoder_status(inner),
        _ => M2vStatus::Data,
    }
}

/// Message of the last failed call on this thread, or NULL. The pointer is
/// valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn m2v_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn m2v_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

unsafe fn path_arg<'a>(p: *const c_char) -> Result<&'a Path, M2vStatus> {
    if p.is_null() {
        return Err(fail(M2vStatus::NullPointer, "path is NULL"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(Path::new)
        .map_err(|_| fail(M2vStatus::InvalidArgument, "path is not UTF-8"))
}

/// Loads the student (`use_teacher == 0`) or teacher parameters of an
/// `M2V1` checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn m2v_encoder_load(path: *const c_char, use_teacher: i32, out: *mut *mut M2vEncoder) -> M2vStatus {
    guard(|| {
        if out.is_null() {
            return fail(M2vStatus::NullPointer, "out is NULL");
        }
        let path = match path_arg(path) {
            Ok(p) => p,
            Err(s) => return s,
        };
        match Checkpoint::load(path) {
            Ok(ck) => {
                let params = if use_teacher != 0 { ck.teacher } else { ck.student };
                let enc = M2vEncoder { config: ck.config.encoder, params, top_k: ck.config.target.top_k };
                *out = Box::into_raw(Box::new(enc));
                M2vStatus::Ok
            }
            Err(e @ TrainError::Io { .. }) | Err(e @ TrainError::Checkpoint(_)) => fail(M2vStatus::Data, e.to_string()),
            Err(e) => fail(M2vStatus::InvalidArgument, e.to_string()),
        }
    })
}

/// Randomly initialized desk-scale encoder.
///
/// # Safety
/// `out` must be a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn m2v_encoder_init_desk(seed: u64, out: *mut *mut M2vEncoder) -> M2vStatus {
    guard(|| {
        if out.is_null() {
            return fail(M2vStatus::NullPointer, "out is NULL");
        }
        let config = EncoderConfig::desk();
        match config.init_params(seed) {
            Ok(params) => {
                *out = Box::into_raw(Box::new(M2vEncoder { config, params, top_k: 1 }));
                M2vStatus::Ok
            }
            Err(e) => fail(encoder_status(&e), e.to_string()),
        }
    })
}

/// Releases an encoder; NULL is ignored.
///
/// # Safety
/// `enc` must come from one of the constructors and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn m2v_encoder_free(enc: *mut M2vEncoder) {
    if !enc.is_null() {
        drop(Box::from_raw(enc));
    }
}

/// Hidden width, transformer depth and target top-K of an encoder.
///
/// # Safety
/// `enc` must be a live handle; each out pointer may be NULL.
#[no_mangle]
pub unsafe extern "C" fn m2v_encoder_dims(
    enc: *const M2vEncoder,
    hidden: *mut usize,
    layers: *mut usize,
    top_k: *mut usize,
) -> M2vStatus {
    let Some(e) = enc.as_ref() else { return fail(M2vStatus::NullPointer, "encoder is NULL") };
    for (p, v) in [(hidden, e.config.hidden), (layers, e.config.layers), (top_k, e.top_k)] {
        if !p.is_null() {
            *p = v;
        }
    }
    M2vStatus::Ok
}

/// Number of frames produced for `samples` input samples.
///
/// # Safety
/// `enc` must be a live handle and `frames` writable.
#[no_mangle]
pub unsafe extern "C" fn m2v_encoder_output_length(enc: *const M2vEncoder, samples: usize, frames: *mut usize) -> M2vStatus {
    guard(|| {
        let Some(e) = enc.as_ref() else { return fail(M2vStatus::NullPointer, "encoder is NULL") };
        if frames.is_null() {
            return fail(M2vStatus::NullPointer, "frames is NULL");
        }
        match e.config.output_length(samples) {
            Ok(t) => {
                *frames = t;
                M2vStatus::Ok
            }
            Err(err) => fail(encoder_status(&err), err.to_string()),
        }
    })
}

/// Frame-level features of one tap (`0` conv output, `i` layer `i`,
/// `0x100 + k` mean of the last `k` layers) for a raw waveform, which is
/// normalized to zero mean and unit variance first. Writes `frames × hidden`
/// row-major floats into `out`; when `capacity` is too small nothing is
/// written, `needed` receives the required count and
/// `M2V_STATUS_BUFFER_TOO_SMALL` is returned.
///
/// # Safety
/// `samples` must point to `n` floats, `out` to `capacity` writable floats,
/// and `frames` / `needed` must be writable (either may be NULL).
#[no_mangle]
pub unsafe extern "C" fn m2v_encoder_features(
    enc: *const M2vEncoder,
    samples: *const f32,
    n: usize,
    tap_id: u32,
    out: *mut f32,
    capacity: usize,
    frames: *mut usize,
    needed: *mut usize,
) -> M2vStatus {
    guard(|| {
        let Some(e) = enc.as_ref() else { return fail(M2vStatus::NullPointer, "encoder is NULL") };
        if samples.is_null() {
            return fail(M2vStatus::NullPointer, "samples is NULL");
        }
        let Some(tap) = Tap::from_id(tap_id) else { return fail(M2vStatus::InvalidArgument, format!("unknown tap id {tap_id:#x}")) };
        let wav = match normalize_samples(slice::from_raw_parts(samples, n)) {
            Ok(w) => w,
            Err(err) => return fail(M2vStatus::InvalidArgument, err.to_string()),
        };
        let outputs = match encode(&e.config, &e.params, &wav, None) {
            Ok(o) => o,
            Err(err) => return fail(encoder_status(&err), err.to_string()),
        };
        let feats = match tap_frames(&outputs, tap) {
            Ok(f) => f,
            Err(err) => return fail(probe_status(&err), err.to_string()),
        };
        let data = feats.data();
        if !needed.is_null() {
            *needed = data.len();
        }
        if !frames.is_null() {
            *frames = feats.shape()[0];
        }
        if data.len() > capacity {
            return fail(M2vStatus::BufferTooSmall, format!("{} floats needed, capacity {capacity}", data.len()));
        }
        if out.is_null() {
            return fail(M2vStatus::NullPointer, "out is NULL");
        }
        ptr::copy_nonoverlapping(data.as_ptr(), out, data.len());
        M2vStatus::Ok
    })
}

unsafe fn metric_call(
    scores: *const f64,
    labels: *const u8,
    n: usize,
    out: *mut f64,
    f: fn(&[f64], &[bool]) -> Result<f64, ProbeError>,
) -> M2vStatus {
    guard(|| {
        if scores.is_null() || labels.is_null() || out.is_null() {
            return fail(M2vStatus::NullPointer, "NULL argument");
        }
        let labels: Vec<bool> = slice::from_raw_parts(labels, n).iter().map(|&l| l != 0).collect();
        match f(slice::from_raw_parts(scores, n), &labels) {
            Ok(v) => {
                *out = v;
                M2vStatus::Ok
            }
            Err(e) => fail(M2vStatus::InvalidArgument, e.to_string()),
        }
    })
}

/// Area under the ROC curve; `labels` are 0/1 bytes.
///
/// # Safety
/// `scores` and `labels` must point to `n` elements, `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn m2v_roc_auc(scores: *const f64, labels: *const u8, n: usize, out: *mut f64) -> M2vStatus {
    metric_call(scores, labels, n, out, probe::roc_auc)
}

/// Average precision; `labels` are 0/1 bytes.
///
/// # Safety
/// `scores` and `labels` must point to `n` elements, `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn m2v_average_precision(scores: *const f64, labels: *const u8, n: usize, out: *mut f64) -> M2vStatus {
    metric_call(scores, labels, n, out, probe::average_precision)
}

/// Coefficient of determination.
///
/// # Safety
/// `y` and `y_hat` must point to `n` elements, `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn m2v_r2(y: *const f64, y_hat: *const f64, n: usize, out: *mut f64) -> M2vStatus {
    guard(|| {
        if y.is_null() || y_hat.is_null() || out.is_null() {
            return fail(M2vStatus::NullPointer, "NULL argument");
        }
        match probe::r2(slice::from_raw_parts(y, n), slice::from_raw_parts(y_hat, n)) {
            Ok(v) => {
                *out = v;
                M2vStatus::Ok
            }
            Err(e) => fail(M2vStatus::InvalidArgument, e.to_string()),
        }
    })
}

/// Weighted key score of one estimate; classes are `tonic + 12·minor`.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn m2v_key_weighted_score(reference: u32, estimate: u32, out: *mut f64) -> M2vStatus {
    if out.is_null() {
        return fail(M2vStatus::NullPointer, "out is NULL");
    }
    match probe::key_weighted_score(reference as usize, estimate as usize) {
        Ok(v) => {
            *out = v;
            M2vStatus::Ok
        }
        Err(e) => fail(M2vStatus::InvalidArgument, e.to_string()),
    }
}
