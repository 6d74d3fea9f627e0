use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use m2v_ffi::*;

fn last_error() -> String {
    let p = m2v_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn tone(n: usize) -> Vec<f32> {
    (0..n).map(|i| (i as f32 * 0.05).sin() + 0.1 * (i as f32 * 0.31).cos()).collect()
}

#[test]
fn encoder_round_trip_through_handles() {
    let mut enc: *mut M2vEncoder = ptr::null_mut();
    assert_eq!(unsafe { m2v_encoder_init_desk(3, &mut enc) }, M2vStatus::Ok);
    let (mut hidden, mut layers, mut top_k) = (0usize, 0usize, 0usize);
    assert_eq!(unsafe { m2v_encoder_dims(enc, &mut hidden, &mut layers, &mut top_k) }, M2vStatus::Ok);
    assert_eq!((hidden, layers, top_k), (64, 2, 1));

    let mut frames = 0usize;
    assert_eq!(unsafe { m2v_encoder_output_length(enc, 80_000, &mut frames) }, M2vStatus::Ok);
    assert_eq!(frames, 249);

    let wav = tone(16_000);
    let mut needed = 0usize;
    let status = unsafe { m2v_encoder_features(enc, wav.as_ptr(), wav.len(), 2, ptr::null_mut(), 0, &mut frames, &mut needed) };
    assert_eq!(status, M2vStatus::BufferTooSmall);
    assert_eq!(needed, frames * hidden);
    let mut buf = vec![0.0f32; needed];
    let status = unsafe { m2v_encoder_features(enc, wav.as_ptr(), wav.len(), 2, buf.as_mut_ptr(), buf.len(), &mut frames, &mut needed) };
    assert_eq!(status, M2vStatus::Ok);
    assert!(buf.iter().all(|v| v.is_finite()) && buf.iter().any(|&v| v != 0.0));

    // Mean of the last layer only equals that layer.
    let mut mean = vec![0.0f32; needed];
    let status = unsafe { m2v_encoder_features(enc, wav.as_ptr(), wav.len(), 0x101, mean.as_mut_ptr(), mean.len(), &mut frames, &mut needed) };
    assert_eq!(status, M2vStatus::Ok);
    assert_eq!(mean, buf);

    let status = unsafe { m2v_encoder_features(enc, wav.as_ptr(), wav.len(), 3, buf.as_mut_ptr(), buf.len(), &mut frames, &mut needed) };
    assert_eq!(status, M2vStatus::InvalidArgument);
    assert!(last_error().contains("layer3"), "{}", last_error());

    let short = tone(300);
    let status = unsafe { m2v_encoder_features(enc, short.as_ptr(), short.len(), 0, buf.as_mut_ptr(), buf.len(), &mut frames, &mut needed) };
    assert_eq!(status, M2vStatus::InvalidArgument);
    unsafe { m2v_encoder_free(enc) };
    unsafe { m2v_encoder_free(ptr::null_mut()) };
}

#[test]
fn null_and_missing_inputs_are_reported() {
    let mut enc: *mut M2vEncoder = ptr::null_mut();
    assert_eq!(unsafe { m2v_encoder_load(ptr::null(), 0, &mut enc) }, M2vStatus::NullPointer);
    let missing = CString::new("/nonexistent/ck.m2v").unwrap();
    assert_eq!(unsafe { m2v_encoder_load(missing.as_ptr(), 0, &mut enc) }, M2vStatus::Data);
    assert!(enc.is_null());
    assert_eq!(unsafe { m2v_encoder_dims(ptr::null(), ptr::null_mut(), ptr::null_mut(), ptr::null_mut()) }, M2vStatus::NullPointer);
    assert!(!last_error().is_empty());
}

#[test]
fn metrics_match_worked_examples() {
    let mut v = 0.0;
    let scores = [0.1, 0.4, 0.35, 0.8];
    let labels = [0u8, 0, 1, 1];
    assert_eq!(unsafe { m2v_roc_auc(scores.as_ptr(), labels.as_ptr(), 4, &mut v) }, M2vStatus::Ok);
    assert_eq!(v, 0.75);
    let scores = [0.9, 0.8, 0.7];
    let labels = [1u8, 0, 1];
    assert_eq!(unsafe { m2v_average_precision(scores.as_ptr(), labels.as_ptr(), 3, &mut v) }, M2vStatus::Ok);
    assert!((v - 5.0 / 6.0).abs() < 1e-12);
    let (y, yh) = ([1.0, 2.0, 3.0], [3.0, 2.0, 1.0]);
    assert_eq!(unsafe { m2v_r2(y.as_ptr(), yh.as_ptr(), 3, &mut v) }, M2vStatus::Ok);
    assert_eq!(v, -3.0);
    // C major vs A minor.
    assert_eq!(unsafe { m2v_key_weighted_score(0, 21, &mut v) }, M2vStatus::Ok);
    assert_eq!(v, 0.3);
    assert_eq!(unsafe { m2v_key_weighted_score(0, 24, &mut v) }, M2vStatus::InvalidArgument);
    let one = [1u8; 3];
    assert_eq!(unsafe { m2v_roc_auc(scores.as_ptr(), one.as_ptr(), 3, &mut v) }, M2vStatus::InvalidArgument);
}

#[test]
fn version_is_a_c_string() {
    let v = unsafe { CStr::from_ptr(m2v_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_compiles_as_c() {
    let include = Path::new(env!("CARGO_MANIFEST_DIR")).join("include");
    let header = include.join("m2v.h");
    assert!(header.is_file(), "generated header missing");
    let Ok(out) = Command::new("cc").args(["-fsyntax-only", "-Wall", "-Werror", "-x", "c"]).arg(&header).output() else {
        eprintln!("no C compiler; skipping");
        return;
    };
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}
