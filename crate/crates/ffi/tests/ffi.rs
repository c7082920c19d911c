use std::ffi::{CStr, CString};
use std::ptr;

use mirrorseg_ffi::*;

fn last_error() -> String {
    let p = ms_last_error();
    assert!(!p.is_null(), "expected an error message");
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn version_matches_package() {
    let v = unsafe { CStr::from_ptr(ms_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn select_points_honours_distance() {
    // 4x4 map, peak at (1, 1) and its neighbour (2, 1); a second peak at (3, 3)
    let mut values = vec![0.0f64; 16];
    values[4 + 1] = 0.9;
    values[4 + 2] = 0.8;
    values[12 + 3] = 0.7;
    let mut xy = [0.0f64; 6];
    let mut scores = [0.0f64; 3];
    let mut count = 0u32;
    let st = unsafe { ms_select_points(values.as_ptr(), 4, 4, 3, 2.0, xy.as_mut_ptr(), scores.as_mut_ptr(), &mut count) };
    assert_eq!(st, MsStatus::Ok);
    assert_eq!(count, 3);
    assert_eq!(&xy[..4], &[0.25, 0.25, 0.75, 0.75]);
    assert_eq!(&scores[..2], &[0.9, 0.7]);
    assert!(ms_last_error().is_null());
}

#[test]
fn select_points_rejects_bad_arguments() {
    let values = [0.0f64; 4];
    let mut xy = [0.0f64; 2];
    let mut scores = [0.0f64; 1];
    let mut count = 0u32;
    let st = unsafe { ms_select_points(ptr::null(), 2, 2, 1, 1.0, xy.as_mut_ptr(), scores.as_mut_ptr(), &mut count) };
    assert_eq!(st, MsStatus::NullPointer);
    assert!(last_error().contains("values"));
    let st = unsafe { ms_select_points(values.as_ptr(), 2, 2, 0, 1.0, xy.as_mut_ptr(), scores.as_mut_ptr(), &mut count) };
    assert_eq!(st, MsStatus::InvalidArgument);
    let st =
        unsafe { ms_select_points(values.as_ptr(), 2, 2, 1, f64::NAN, xy.as_mut_ptr(), scores.as_mut_ptr(), &mut count) };
    assert_eq!(st, MsStatus::InvalidArgument);
}

#[test]
fn metrics_of_a_half_overlap() {
    let pred = [0.9, 0.9, 0.1, 0.1];
    let gt = [1.0, 0.0, 1.0, 0.0];
    let mut m = MsMetrics::default();
    let st = unsafe { ms_compute_metrics(pred.as_ptr(), gt.as_ptr(), 4, 0.5, &mut m) };
    assert_eq!(st, MsStatus::Ok);
    assert!((m.iou - 1.0 / 3.0).abs() < 1e-12);
    assert!((m.accuracy - 0.5).abs() < 1e-12);
    assert!((m.mae - 0.5).abs() < 1e-12);
}

#[test]
fn metrics_reject_non_binary_ground_truth() {
    let pred = [0.5];
    let gt = [0.5];
    let mut m = MsMetrics::default();
    let st = unsafe { ms_compute_metrics(pred.as_ptr(), gt.as_ptr(), 1, 0.5, &mut m) };
    assert_ne!(st, MsStatus::Ok);
    assert!(!last_error().is_empty());
}

#[test]
fn model_handle_lifecycle() {
    let mut model = ptr::null_mut();
    assert_eq!(unsafe { ms_model_new_toy(3, &mut model) }, MsStatus::Ok);
    assert!(!model.is_null());
    let mut side = 0u32;
    assert_eq!(unsafe { ms_model_input_size(model, &mut side) }, MsStatus::Ok);
    assert_eq!(side, 64);

    let (h, w) = (40usize, 48usize);
    let rgb: Vec<f32> = (0..3 * h * w).map(|i| (i % 7) as f32 / 7.0).collect();
    let depth: Vec<f32> = (0..h * w).map(|i| (i % w) as f32 / w as f32).collect();
    let mut prob = vec![-1.0f32; h * w];
    let st = unsafe { ms_model_predict_frame(model, rgb.as_ptr(), depth.as_ptr(), h as u32, w as u32, prob.as_mut_ptr()) };
    assert_eq!(st, MsStatus::Ok, "{:?}", st);
    assert!(prob.iter().all(|p| (0.0..=1.0).contains(p)));

    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("m.safetensors").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { ms_model_save(model, path.as_ptr()) }, MsStatus::Ok);
    let mut loaded = ptr::null_mut();
    assert_eq!(unsafe { ms_model_load(path.as_ptr(), &mut loaded) }, MsStatus::Ok);
    let mut again = vec![-1.0f32; h * w];
    let st = unsafe { ms_model_predict_frame(loaded, rgb.as_ptr(), depth.as_ptr(), h as u32, w as u32, again.as_mut_ptr()) };
    assert_eq!(st, MsStatus::Ok);
    assert_eq!(prob, again);

    unsafe {
        ms_model_free(model);
        ms_model_free(loaded);
        ms_model_free(ptr::null_mut());
    }
}

#[test]
fn load_reports_io_errors() {
    let mut model = ptr::null_mut();
    let path = CString::new("/nonexistent/model.safetensors").unwrap();
    assert_eq!(unsafe { ms_model_load(path.as_ptr(), &mut model) }, MsStatus::Io);
    assert!(model.is_null());
    assert!(last_error().contains("nonexistent"));
    assert_eq!(unsafe { ms_model_load(ptr::null(), &mut model) }, MsStatus::NullPointer);
}

#[test]
fn predict_rejects_null_model() {
    let buf = [0.0f32; 3];
    let mut out = [0.0f32; 1];
    let st = unsafe { ms_model_predict_frame(ptr::null(), buf.as_ptr(), buf.as_ptr(), 1, 1, out.as_mut_ptr()) };
    assert_eq!(st, MsStatus::NullPointer);
}

#[test]
fn header_declares_the_api() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/mirrorseg.h")).unwrap();
    for name in [
        "ms_version",
        "ms_last_error",
        "ms_model_new_toy",
        "ms_model_load",
        "ms_model_save",
        "ms_model_free",
        "ms_model_input_size",
        "ms_model_predict_frame",
        "ms_select_points",
        "ms_compute_metrics",
        "MS_STATUS_OK = 0",
        "typedef struct MsModel MsModel;",
    ] {
        assert!(header.contains(name), "header lacks `{name}`");
    }
}
