use std::ffi::{CStr, CString};
use std::ptr;

use hsseg_ffi::*;

fn cstr(s: &str) -> CString {
    CString::new(s).unwrap()
}

fn last_error() -> String {
    let p = hsseg_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn train_infer_evaluate_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = cstr(dir.path().join("data").to_str().unwrap());
    let out = cstr(dir.path().join("run").to_str().unwrap());
    unsafe {
        assert_eq!(hsseg_generate_dataset(data.as_ptr(), 10, 3, 3, 32), HssegStatus::Ok);
        let cfg = cstr("iterations = 4\ncrf_in_training = false\n");
        let mut model: *mut HssegModel = ptr::null_mut();
        assert_eq!(hsseg_train(data.as_ptr(), cfg.as_ptr(), out.as_ptr(), &mut model), HssegStatus::Ok);
        assert!(!model.is_null());
        assert_eq!(hsseg_model_input_size(model), 32);
        assert_eq!(hsseg_model_num_classes(model), 3);

        let ckpt = cstr(dir.path().join("run/model.ckpt").to_str().unwrap());
        let mut loaded: *mut HssegModel = ptr::null_mut();
        assert_eq!(hsseg_model_load(ckpt.as_ptr(), &mut loaded), HssegStatus::Ok);

        let rgb = vec![90u8; 32 * 32 * 3];
        let mut a = vec![0u8; 32 * 32];
        let mut b = vec![0u8; 32 * 32];
        let mut scores = [0.0f64; 3];
        assert_eq!(
            hsseg_infer(model, rgb.as_ptr(), 32, 32, true, true, a.as_mut_ptr(), a.len(), scores.as_mut_ptr(), 3),
            HssegStatus::Ok
        );
        assert_eq!(
            hsseg_infer(loaded, rgb.as_ptr(), 32, 32, true, true, b.as_mut_ptr(), b.len(), ptr::null_mut(), 0),
            HssegStatus::Ok
        );
        assert_eq!(a, b);
        assert!(scores.iter().all(|s| (0.0..=1.0).contains(s)));
        assert!(a.iter().all(|&l| l <= 3));

        let (mut miou, mut pca) = (f64::NAN, f64::NAN);
        let split = cstr("val");
        assert_eq!(
            hsseg_evaluate(loaded, data.as_ptr(), split.as_ptr(), false, false, &mut miou, &mut pca),
            HssegStatus::Ok
        );
        assert!((0.0..=1.0).contains(&miou) && (0.0..=1.0).contains(&pca));

        assert_eq!(
            hsseg_infer(model, rgb.as_ptr(), 32, 32, true, false, a.as_mut_ptr(), 10, ptr::null_mut(), 0),
            HssegStatus::InvalidArgument
        );
        assert!(last_error().contains("labels buffer"));
        hsseg_model_free(model);
        hsseg_model_free(loaded);
        hsseg_model_free(ptr::null_mut());
    }
}

#[test]
fn errors_are_reported() {
    let mut model: *mut HssegModel = ptr::null_mut();
    let missing = cstr("/nonexistent/model.ckpt");
    unsafe {
        assert_eq!(hsseg_model_load(missing.as_ptr(), &mut model), HssegStatus::DataError);
        assert!(last_error().contains("/nonexistent/model.ckpt"));
        assert!(model.is_null());
        assert_eq!(hsseg_model_load(ptr::null(), &mut model), HssegStatus::NullPointer);
        assert!(last_error().contains("path"));
        let dir = tempfile::tempdir().unwrap();
        let data = cstr(dir.path().to_str().unwrap());
        assert_eq!(hsseg_generate_dataset(data.as_ptr(), 0, 1, 5, 64), HssegStatus::InvalidArgument);
    }
}

#[test]
fn crf_without_pairwise_terms_returns_input() {
    let mut p = hsseg_crf_default_params();
    p.w_appearance = 0.0;
    p.w_smoothness = 0.0;
    let probs = [0.2, 0.7, 0.5, 0.8, 0.3, 0.5];
    let rgb = [10u8, 20, 30, 40, 50, 60, 70, 80, 90];
    let mut q = [0.0; 6];
    unsafe {
        assert_eq!(
            hsseg_crf_mean_field(probs.as_ptr(), 2, 1, 3, rgb.as_ptr(), &p, q.as_mut_ptr()),
            HssegStatus::Ok
        );
        for (a, b) in q.iter().zip(probs) {
            assert!((a - b).abs() < 1e-12, "{q:?}");
        }
        p.method = 9;
        assert_eq!(
            hsseg_crf_mean_field(probs.as_ptr(), 2, 1, 3, rgb.as_ptr(), &p, q.as_mut_ptr()),
            HssegStatus::InvalidArgument
        );
    }
}

#[test]
fn header_declares_the_api() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/hsseg.h")).unwrap();
    for name in [
        "hsseg_last_error_message",
        "hsseg_version",
        "hsseg_generate_dataset",
        "hsseg_train",
        "hsseg_model_load",
        "hsseg_model_save",
        "hsseg_model_free",
        "hsseg_infer",
        "hsseg_evaluate",
        "hsseg_crf_mean_field",
        "typedef struct HssegModel HssegModel",
        "HSSEG_STATUS_NUMERIC_ERROR = 3",
    ] {
        assert!(header.contains(name), "header lacks {name}");
    }
    let v = unsafe { CStr::from_ptr(hsseg_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}
