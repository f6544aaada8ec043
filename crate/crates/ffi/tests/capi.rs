use std::ffi::{CStr, CString};
use std::ptr;

use dcfm::dataio::{save_model, synth, GenConfig, LabelMap};
use dcfm::engine::{run_video, ScheduleConfig};
use dcfm::metrics::ConfusionMatrix;
use dcfm::model::{Model, ModelConfig};
use dcfm_ffi::*;

fn saved_model(dir: &std::path::Path) -> (CString, Model<f32>) {
    let model = Model::<f32>::new(ModelConfig {
        num_classes: 3,
        c_hi: 16,
        seed: 4,
        ..Default::default()
    })
    .unwrap();
    let path = dir.join("model.bin");
    save_model(&path, &model).unwrap();
    (CString::new(path.to_str().unwrap()).unwrap(), model)
}

fn last_error() -> String {
    let p = dcfm_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn run_video_matches_library() {
    let dir = tempfile::tempdir().unwrap();
    let (path, model) = saved_model(dir.path());
    let cfg = GenConfig {
        videos: 1,
        frames_per_video: 5,
        height: 32,
        width: 48,
        classes: 3,
        ..Default::default()
    };
    let clip = synth::generate_clip(&cfg, 0).unwrap();
    let rgb: Vec<u8> = clip.frames.iter().flat_map(|f| f.data().to_vec()).collect();
    let tensors: Vec<_> = clip.frames.iter().map(|f| f.to_tensor()).collect();

    let mut handle = ptr::null_mut();
    assert_eq!(
        unsafe { dcfm_model_load(path.as_ptr(), &mut handle) },
        DcfmStatus::Ok
    );
    assert_eq!(unsafe { dcfm_model_num_classes(handle) }, 3);
    for mode in [DcfmMode::P, DcfmMode::B] {
        let mut sched = dcfm_schedule_default();
        sched.mode = mode;
        sched.k = 2;
        let mut labels = vec![0u8; 5 * 32 * 48];
        let mut keys = vec![9u8; 5];
        let s = unsafe {
            dcfm_run_video(
                handle,
                rgb.as_ptr(),
                5,
                32,
                48,
                &sched,
                labels.as_mut_ptr(),
                keys.as_mut_ptr(),
            )
        };
        assert_eq!(s, DcfmStatus::Ok);
        assert_eq!(keys, [1, 0, 1, 0, 1]);
        let mode = match mode {
            DcfmMode::P => dcfm::engine::MergeMode::P,
            DcfmMode::B => dcfm::engine::MergeMode::B,
        };
        let expect = run_video(&model, &tensors, &ScheduleConfig::fixed(2, mode)).unwrap();
        let flat: Vec<u8> = expect
            .predictions
            .iter()
            .flat_map(|p| p.data().to_vec())
            .collect();
        assert_eq!(labels, flat);
    }
    unsafe { dcfm_model_free(handle) };
}

#[test]
fn errors_are_reported() {
    let mut handle = ptr::null_mut();
    let missing = CString::new("/nonexistent/model.bin").unwrap();
    assert_eq!(
        unsafe { dcfm_model_load(missing.as_ptr(), &mut handle) },
        DcfmStatus::Io
    );
    assert!(handle.is_null());
    assert!(last_error().contains("nonexistent"));

    assert_eq!(
        unsafe { dcfm_model_load(ptr::null(), &mut handle) },
        DcfmStatus::NullPointer
    );

    let dir = tempfile::tempdir().unwrap();
    let (path, _) = saved_model(dir.path());
    assert_eq!(
        unsafe { dcfm_model_load(path.as_ptr(), &mut handle) },
        DcfmStatus::Ok
    );
    let rgb = vec![0u8; 16 * 16 * 3];
    let mut labels = vec![0u8; 16 * 16];
    let mut sched = dcfm_schedule_default();
    sched.k = 0;
    let s = unsafe {
        dcfm_run_video(
            handle,
            rgb.as_ptr(),
            1,
            16,
            16,
            &sched,
            labels.as_mut_ptr(),
            ptr::null_mut(),
        )
    };
    assert_eq!(s, DcfmStatus::InvalidArgument);
    // frame size not a multiple of 16 is padded internally, so it succeeds
    sched.k = 1;
    let rgb = vec![7u8; 10 * 12 * 3];
    let mut labels = vec![0u8; 10 * 12];
    let s = unsafe {
        dcfm_run_video(
            handle,
            rgb.as_ptr(),
            1,
            10,
            12,
            &sched,
            labels.as_mut_ptr(),
            ptr::null_mut(),
        )
    };
    assert_eq!(s, DcfmStatus::Ok, "{}", last_error());
    unsafe { dcfm_model_free(handle) };
    unsafe { dcfm_model_free(ptr::null_mut()) };
    assert_eq!(unsafe { dcfm_model_num_classes(ptr::null()) }, 0);
}

#[test]
fn frame_score_is_mean_absolute_difference() {
    let a = vec![10u8; 4 * 4 * 3];
    let mut b = a.clone();
    b[0] = 58;
    let mut out = 0.0;
    assert_eq!(
        unsafe { dcfm_frame_score(a.as_ptr(), b.as_ptr(), 4, 4, &mut out) },
        DcfmStatus::Ok
    );
    assert!((out - 1.0).abs() < 1e-12);
}

#[test]
fn confusion_matches_library() {
    let pred = [0u8, 1, 1, 2, 2, 2];
    let gt = [0u8, 1, 2, 2, 255, 1];
    let cm = dcfm_confusion_new(3);
    assert!(!cm.is_null());
    assert_eq!(
        unsafe { dcfm_confusion_accumulate(cm, pred.as_ptr(), gt.as_ptr(), 2, 3) },
        DcfmStatus::Ok
    );
    let (mut miou, mut wiou) = (0.0, 0.0);
    assert_eq!(
        unsafe { dcfm_confusion_miou(cm, &mut miou) },
        DcfmStatus::Ok
    );
    assert_eq!(
        unsafe { dcfm_confusion_wiou(cm, &mut wiou) },
        DcfmStatus::Ok
    );
    let mut lib = ConfusionMatrix::new(3);
    lib.accumulate(
        &LabelMap::new(2, 3, pred.to_vec()).unwrap(),
        &LabelMap::new(2, 3, gt.to_vec()).unwrap(),
    )
    .unwrap();
    assert_eq!(miou, lib.miou().unwrap());
    assert_eq!(wiou, lib.wiou().unwrap());
    let bad = [7u8; 6];
    assert_ne!(
        unsafe { dcfm_confusion_accumulate(cm, bad.as_ptr(), gt.as_ptr(), 2, 3) },
        DcfmStatus::Ok
    );
    unsafe { dcfm_confusion_free(cm) };
    assert!(dcfm_confusion_new(0).is_null());
}

#[test]
fn header_declares_every_export() {
    let header = include_str!("../include/dcfm.h");
    let src = include_str!("../src/lib.rs");
    let exports: Vec<&str> = src
        .lines()
        .filter_map(|l| l.split("extern \"C\" fn ").nth(1))
        .map(|rest| rest.split('(').next().unwrap())
        .collect();
    assert!(exports.len() >= 12);
    for name in exports {
        assert!(
            header.contains(&format!("{name}(")),
            "{name} missing from header"
        );
    }
    let v = unsafe { CStr::from_ptr(dcfm_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}
