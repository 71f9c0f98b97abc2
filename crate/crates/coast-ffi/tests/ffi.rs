//! Drive the C ABI end to end: data generation, both training stages,
//! loading, prediction, evaluation, and the error paths.

use coast_ffi::*;
use std::ffi::{CStr, CString};
use std::os::raw::c_char;
use std::ptr;

fn c(s: &str) -> CString {
    CString::new(s).unwrap()
}

fn last_error() -> String {
    let mut buf = vec![0 as c_char; 512];
    unsafe {
        coast_last_error_message(buf.as_mut_ptr(), buf.len());
        CStr::from_ptr(buf.as_ptr()).to_string_lossy().into_owned()
    }
}

const CONFIG: &str = r#"{
    "data": {"h": 8, "w": 8, "num_classes": 3, "num_targets": 2,
             "source_size": 12, "target_size": 10, "unseen_size": 6,
             "eval_size": 6, "seed": 5},
    "model": {"widths": [6, 8], "dropout_rate": 0.0,
              "dropout_after": [false, false],
              "downsample_after": [true, false], "style_taps": [0]},
    "warmup": {"iterations": 4, "batch_size": 2, "seed": 1},
    "train": {"iterations": 3, "batch_size": 2, "n_b": 2, "seed": 1,
              "augment": {"hflip": false, "crop_h": 0, "crop_w": 0, "jitter": false}}
}"#;

#[test]
fn full_pipeline_through_the_c_api() {
    let dir = tempfile::tempdir().unwrap();
    let data = c(dir.path().join("data").to_str().unwrap());
    let ckpt = c(dir.path().join("warm.ckpt").to_str().unwrap());
    let st_out = c(dir.path().join("st").to_str().unwrap());
    let cfg = c(CONFIG);

    unsafe {
        assert!(!coast_version().is_null());

        assert_eq!(coast_generate_data(cfg.as_ptr(), data.as_ptr()), CoastStatus::Ok);
        assert!(dir.path().join("data/manifest.json").exists());

        assert_eq!(
            coast_run_warmup(cfg.as_ptr(), data.as_ptr(), ckpt.as_ptr()),
            CoastStatus::Ok
        );
        assert!(dir.path().join("warm.ckpt").exists());

        assert_eq!(
            coast_run_selftrain(cfg.as_ptr(), data.as_ptr(), ckpt.as_ptr(), st_out.as_ptr()),
            CoastStatus::Ok
        );
        assert!(dir.path().join("st/metrics.csv").exists());
        assert!(dir.path().join("st/checkpoint_final.ckpt").exists());

        let final_ckpt = c(dir.path().join("st/checkpoint_final.ckpt").to_str().unwrap());
        let mut model: *mut CoastModel = ptr::null_mut();
        assert_eq!(
            coast_model_load(final_ckpt.as_ptr(), cfg.as_ptr(), &mut model),
            CoastStatus::Ok
        );
        assert!(!model.is_null());
        assert_eq!(coast_model_num_classes(model), 3);
        assert_eq!(coast_model_num_targets(model), 2);

        // agnostic-head prediction on a synthetic gradient image
        let image: Vec<f64> = (0..3 * 64).map(|i| (i % 64) as f64 / 64.0).collect();
        let mut labels = vec![255u8; 64];
        assert_eq!(
            coast_model_predict(model, image.as_ptr(), 8, 8, -1, labels.as_mut_ptr()),
            CoastStatus::Ok
        );
        assert!(labels.iter().all(|&l| l < 3));

        // domain-specific head also works; out-of-range head fails cleanly
        assert_eq!(
            coast_model_predict(model, image.as_ptr(), 8, 8, 1, labels.as_mut_ptr()),
            CoastStatus::Ok
        );
        assert_eq!(
            coast_model_predict(model, image.as_ptr(), 8, 8, 7, labels.as_mut_ptr()),
            CoastStatus::InvalidArgument
        );
        assert!(last_error().contains("head"));

        let mut miou = f64::NAN;
        assert_eq!(
            coast_evaluate(model, data.as_ptr(), false, &mut miou),
            CoastStatus::Ok
        );
        assert!(miou.is_finite() && (0.0..=1.0).contains(&miou));
        let mut unseen = f64::NAN;
        assert_eq!(
            coast_evaluate(model, data.as_ptr(), true, &mut unseen),
            CoastStatus::Ok
        );
        assert!(unseen.is_finite());

        coast_model_free(model);
        coast_model_free(ptr::null_mut());
    }
}

#[test]
fn error_paths_report_status_and_message() {
    let dir = tempfile::tempdir().unwrap();
    unsafe {
        // null arguments
        assert_eq!(
            coast_generate_data(ptr::null(), ptr::null()),
            CoastStatus::NullArgument
        );
        let mut model: *mut CoastModel = ptr::null_mut();
        assert_eq!(
            coast_model_load(ptr::null(), ptr::null(), &mut model),
            CoastStatus::NullArgument
        );
        assert!(model.is_null());

        // malformed config JSON
        let bad_cfg = c("{not json");
        let out = c(dir.path().join("x").to_str().unwrap());
        assert_eq!(
            coast_generate_data(bad_cfg.as_ptr(), out.as_ptr()),
            CoastStatus::InvalidArgument
        );
        assert!(last_error().contains("config JSON"));

        // corrupt checkpoint
        let ckpt = dir.path().join("bad.ckpt");
        std::fs::write(&ckpt, b"XXXXX").unwrap();
        let ckpt_c = c(ckpt.to_str().unwrap());
        assert_eq!(
            coast_model_load(ckpt_c.as_ptr(), ptr::null(), &mut model),
            CoastStatus::CorruptData
        );

        // missing file
        let missing = c(dir.path().join("absent.ckpt").to_str().unwrap());
        assert_eq!(
            coast_model_load(missing.as_ptr(), ptr::null(), &mut model),
            CoastStatus::IoError
        );

        // null-model queries
        assert_eq!(coast_model_num_classes(ptr::null()), -1);
        assert_eq!(coast_model_num_targets(ptr::null()), -1);
    }
}

#[test]
fn last_error_message_truncates_safely() {
    unsafe {
        let bad_cfg = c("{definitely not json and quite long as messages go");
        let out = c("/nonexistent-dir-for-this-test/out");
        coast_generate_data(bad_cfg.as_ptr(), out.as_ptr());
        let full_len = coast_last_error_message(ptr::null_mut(), 0);
        assert!(full_len > 0);
        let mut tiny = [0 as c_char; 8];
        let reported = coast_last_error_message(tiny.as_mut_ptr(), tiny.len());
        assert_eq!(reported, full_len);
        let s = CStr::from_ptr(tiny.as_ptr());
        assert!(s.to_bytes().len() <= 7);
    }
}
