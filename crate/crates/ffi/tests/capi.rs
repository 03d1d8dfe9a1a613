use std::ffi::{c_char, CStr, CString};
use std::ptr;

use nommer_ffi::*;

fn last_error() -> String {
    let mut buf = vec![0 as c_char; 256];
    unsafe {
        nommer_last_error_message(buf.as_mut_ptr(), buf.len());
        CStr::from_ptr(buf.as_ptr()).to_string_lossy().into_owned()
    }
}

fn micro() -> *mut NommerModel {
    let name = CString::new("micro").unwrap();
    let mut h = ptr::null_mut();
    assert_eq!(unsafe { nommer_model_new_preset(name.as_ptr(), 3, &mut h) }, NommerStatus::Ok);
    assert!(!h.is_null());
    h
}

#[test]
fn forward_round_trip_through_checkpoint() {
    let h = micro();
    let mut shape = [0usize; 3];
    let mut classes = 0usize;
    let mut count = 0u64;
    unsafe {
        assert_eq!(nommer_model_input_shape(h, shape.as_mut_ptr()), NommerStatus::Ok);
        assert_eq!(nommer_model_num_classes(h, &mut classes), NommerStatus::Ok);
        assert_eq!(nommer_model_param_count(h, &mut count), NommerStatus::Ok);
    }
    assert_eq!(shape, [32, 32, 3]);
    assert_eq!(classes, 2);
    assert!(count > 0);

    let image: Vec<f64> = (0..32 * 32 * 3).map(|i| ((i * 7) % 13) as f64 / 13.0).collect();
    let mut a = [0.0f64; 2];
    let st = unsafe { nommer_model_forward(h, image.as_ptr(), image.len(), a.as_mut_ptr(), 2) };
    assert_eq!(st, NommerStatus::Ok);
    assert!(a.iter().all(|v| v.is_finite()));

    let dir = tempfile::tempdir().unwrap();
    let ck = CString::new(dir.path().join("m.bin").to_str().unwrap()).unwrap();
    let cfg_path = dir.path().join("micro.toml");
    std::fs::write(&cfg_path, "preset = \"micro\"\n").unwrap();
    let cfg = CString::new(cfg_path.to_str().unwrap()).unwrap();
    let mut b = [0.0f64; 2];
    unsafe {
        assert_eq!(nommer_model_save(h, ck.as_ptr()), NommerStatus::Ok);
        let mut g = ptr::null_mut();
        assert_eq!(nommer_model_load(cfg.as_ptr(), ck.as_ptr(), &mut g), NommerStatus::Ok);
        let st = nommer_model_forward(g, image.as_ptr(), image.len(), b.as_mut_ptr(), 2);
        assert_eq!(st, NommerStatus::Ok);
        nommer_model_free(g);
        nommer_model_free(h);
    }
    assert_eq!(a, b);
}

#[test]
fn errors_carry_codes_and_messages() {
    let h = micro();
    let img = [0.0f64; 10];
    let mut logits = [0.0f64; 2];
    unsafe {
        let st = nommer_model_forward(h, img.as_ptr(), img.len(), logits.as_mut_ptr(), 2);
        assert_eq!(st, NommerStatus::Shape);
        assert!(last_error().contains("expects"));

        let full = vec![0.5f64; 32 * 32 * 3];
        let st = nommer_model_forward(h, full.as_ptr(), full.len(), logits.as_mut_ptr(), 1);
        assert_eq!(st, NommerStatus::BufferTooSmall);

        let mut n = 0usize;
        assert_eq!(nommer_model_num_classes(ptr::null(), &mut n), NommerStatus::NullPointer);

        let bad = CString::new("nommer-xl").unwrap();
        let mut g = ptr::null_mut();
        assert_eq!(nommer_model_new_preset(bad.as_ptr(), 0, &mut g), NommerStatus::Config);
        assert!(g.is_null());

        let missing = CString::new("/nonexistent/run.toml").unwrap();
        assert_eq!(nommer_model_from_config(missing.as_ptr(), 0, &mut g), NommerStatus::Io);

        // success clears the message
        assert_eq!(nommer_model_num_classes(h, &mut n), NommerStatus::Ok);
        assert_eq!(nommer_last_error_message(ptr::null_mut(), 0), 0);
        nommer_model_free(h);
        nommer_model_free(ptr::null_mut());
    }
}

#[test]
fn message_truncation_is_reported() {
    let mut g = ptr::null_mut();
    let bad = CString::new("nope").unwrap();
    unsafe {
        nommer_model_new_preset(bad.as_ptr(), 0, &mut g);
        let full = nommer_last_error_message(ptr::null_mut(), 0);
        let mut small = [0 as c_char; 5];
        assert_eq!(nommer_last_error_message(small.as_mut_ptr(), 5), full);
        assert!(full >= 5);
        assert_eq!(CStr::from_ptr(small.as_ptr()).to_bytes().len(), 4);
    }
}

#[test]
fn header_declares_the_interface() {
    let h = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/nommer.h")).unwrap();
    for sym in [
        "NOMMER_H",
        "typedef struct NommerModel NommerModel",
        "NOMMER_STATUS_OK = 0",
        "NOMMER_STATUS_BUFFER_TOO_SMALL",
        "nommer_model_new_preset",
        "nommer_model_from_config",
        "nommer_model_load",
        "nommer_model_save",
        "nommer_model_free",
        "nommer_model_forward",
        "nommer_model_input_shape",
        "nommer_last_error_message",
        "nommer_version",
    ] {
        assert!(h.contains(sym), "header lacks `{sym}`");
    }
    let v = unsafe { CStr::from_ptr(nommer_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}
