use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use pavsgg::config::RunConfig;
use pavsgg::relnet::RelNet;
use pavsgg::scene::{generate_split, write_clip, Split};
use pavsgg_ffi::*;

fn last_error() -> String {
    let p = pavsgg_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

unsafe fn take_string(p: *mut std::ffi::c_char) -> String {
    let s = CStr::from_ptr(p).to_string_lossy().into_owned();
    pavsgg_string_free(p);
    s
}

#[test]
fn version_is_nul_terminated() {
    let v = unsafe { CStr::from_ptr(pavsgg_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn iou_matches_hand_value() {
    let a = [0.0, 0.0, 10.0, 10.0];
    let b = [5.0, 0.0, 15.0, 10.0];
    let mut out = 0.0;
    let status = unsafe { pavsgg_iou(a.as_ptr(), b.as_ptr(), &mut out) };
    assert_eq!(status, PavsggStatus::Ok);
    assert!((out - 50.0 / 150.0).abs() < 1e-15);
}

#[test]
fn null_and_invalid_inputs_report_errors() {
    let a = [0.0, 0.0, 10.0, 10.0];
    let mut out = 0.0;
    let status = unsafe { pavsgg_iou(a.as_ptr(), ptr::null(), &mut out) };
    assert_eq!(status, PavsggStatus::NullPointer);
    assert!(last_error().contains("null"));

    let bad = [5.0, 0.0, 1.0, 10.0];
    let status = unsafe { pavsgg_iou(a.as_ptr(), bad.as_ptr(), &mut out) };
    assert_eq!(status, PavsggStatus::InvalidArgument);

    // a successful call clears the message
    let status = unsafe { pavsgg_iou(a.as_ptr(), a.as_ptr(), &mut out) };
    assert_eq!(status, PavsggStatus::Ok);
    assert!(pavsgg_last_error_message().is_null());
}

#[test]
fn attention_delta_has_unit_reliability() {
    let mut values = vec![0.0; 64];
    values[27] = 1.0;
    let mut map = ptr::null_mut();
    unsafe {
        assert_eq!(pavsgg_attention_new(8, 8, values.as_ptr(), 64, &mut map), PavsggStatus::Ok);
        let mut r = 0.0;
        assert_eq!(pavsgg_reliability(map, &mut r), PavsggStatus::Ok);
        assert_eq!(r, 1.0);
        // whole image: C = 1, rho = 1/64
        let bbox = [0.0, 0.0, 512.0, 512.0];
        let mut gs = 0.0;
        assert_eq!(pavsgg_grounding_score(map, bbox.as_ptr(), &mut gs), PavsggStatus::Ok, "{}", last_error());
        let expected = 1.0 / (1.0 + (-1.0f64 / 64.0).exp());
        assert!((gs - expected).abs() < 1e-12);
        pavsgg_attention_free(map);
    }
}

#[test]
fn attention_length_mismatch_rejected() {
    let values = [0.25; 4];
    let mut map = ptr::null_mut();
    let status = unsafe { pavsgg_attention_new(3, 3, values.as_ptr(), 4, &mut map) };
    assert_eq!(status, PavsggStatus::InvalidArgument);
    assert!(map.is_null());
}

#[test]
fn composite_score_ignores_pa_when_disabled() {
    let mut on = 0.0;
    let mut off = 0.0;
    unsafe {
        pavsgg_composite_score(0.5, 0.8, 0.5, 0.25, 1, &mut on);
        pavsgg_composite_score(0.5, 0.8, 0.5, 0.25, 0, &mut off);
    }
    assert!((on - 0.05).abs() < 1e-15);
    assert!((off - 0.2).abs() < 1e-15);
}

#[test]
fn clip_json_roundtrip() {
    unsafe {
        let mut clip = ptr::null_mut();
        assert_eq!(pavsgg_clip_generate(ptr::null(), 42, &mut clip), PavsggStatus::Ok);
        let mut frames = 0;
        assert_eq!(pavsgg_clip_frame_count(clip, &mut frames), PavsggStatus::Ok);
        assert_eq!(frames, RunConfig::default().gen.frames_per_clip);

        let mut json = ptr::null_mut();
        assert_eq!(pavsgg_clip_to_json(clip, &mut json), PavsggStatus::Ok);
        let text = take_string(json);
        let c_text = CString::new(text.clone()).unwrap();
        let mut again = ptr::null_mut();
        assert_eq!(pavsgg_clip_from_json(c_text.as_ptr(), &mut again), PavsggStatus::Ok);
        let mut json2 = ptr::null_mut();
        assert_eq!(pavsgg_clip_to_json(again, &mut json2), PavsggStatus::Ok);
        assert_eq!(take_string(json2), text);
        pavsgg_clip_free(clip);
        pavsgg_clip_free(again);
    }
}

#[test]
fn malformed_inputs_rejected() {
    unsafe {
        let mut clip = ptr::null_mut();
        let junk = CString::new("{\"clip_id\": 3}").unwrap();
        assert_eq!(pavsgg_clip_from_json(junk.as_ptr(), &mut clip), PavsggStatus::Data);
        let cfg = CString::new("{\"nope\": 1}").unwrap();
        assert_eq!(pavsgg_clip_generate(cfg.as_ptr(), 1, &mut clip), PavsggStatus::InvalidArgument);
        assert!(last_error().contains("nope"));
        let missing = CString::new("/nonexistent/ckpt").unwrap();
        let mut model = ptr::null_mut();
        assert_eq!(pavsgg_model_load(missing.as_ptr(), &mut model), PavsggStatus::Io);
        assert!(model.is_null());
    }
}

fn write_checkpoint_and_split(root: &Path) -> (CString, CString) {
    let cfg = RunConfig::default();
    let (net, store) = RelNet::init(&cfg.model).unwrap();
    let ckpt = root.join("ckpt");
    std::fs::create_dir_all(&ckpt).unwrap();
    net.save(&store, &ckpt).unwrap();
    let mut gen = cfg.gen.clone();
    gen.test_clips = 2;
    let split = root.join("test");
    std::fs::create_dir_all(&split).unwrap();
    for r in generate_split(&gen, Split::Test).unwrap() {
        write_clip(&split, &r).unwrap();
    }
    (
        CString::new(ckpt.to_str().unwrap()).unwrap(),
        CString::new(split.to_str().unwrap()).unwrap(),
    )
}

#[test]
fn model_rank_and_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let (ckpt, split) = write_checkpoint_and_split(dir.path());
    unsafe {
        let mut model = ptr::null_mut();
        assert_eq!(pavsgg_model_load(ckpt.as_ptr(), &mut model), PavsggStatus::Ok, "{}", last_error());
        let mut clip = ptr::null_mut();
        assert_eq!(pavsgg_clip_generate(ptr::null(), 5, &mut clip), PavsggStatus::Ok);

        let mut json = ptr::null_mut();
        assert_eq!(pavsgg_model_rank(model, clip, 1, 1, 1, 1, &mut json), PavsggStatus::Ok);
        let ranked: serde_json::Value = serde_json::from_str(&take_string(json)).unwrap();
        let scores: Vec<f64> = ranked
            .as_array()
            .unwrap()
            .iter()
            .map(|r| r["score"].as_f64().unwrap())
            .collect();
        assert!(!scores.is_empty());
        assert!(scores.windows(2).all(|w| w[0] >= w[1]));

        assert_eq!(pavsgg_model_rank(model, clip, 99, 1, 1, 1, &mut json), PavsggStatus::InvalidArgument);

        assert_eq!(pavsgg_model_evaluate(model, split.as_ptr(), ptr::null(), &mut json), PavsggStatus::Ok, "{}", last_error());
        let report: serde_json::Value = serde_json::from_str(&take_string(json)).unwrap();
        assert_eq!(report["clips"], 2);
        assert_eq!(report["seed"], RunConfig::default().seed);

        pavsgg_clip_free(clip);
        pavsgg_model_free(model);
    }
}

#[test]
fn free_functions_accept_null() {
    unsafe {
        pavsgg_string_free(ptr::null_mut());
        pavsgg_clip_free(ptr::null_mut());
        pavsgg_model_free(ptr::null_mut());
        pavsgg_attention_free(ptr::null_mut());
    }
}

#[test]
fn header_declares_every_export_and_compiles() {
    let header_path = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/pavsgg.h");
    let header = std::fs::read_to_string(&header_path).unwrap();
    let lib = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("src/lib.rs")).unwrap();
    for line in lib.lines() {
        if let Some(rest) = line.split("extern \"C\" fn ").nth(1) {
            let name = rest.split('(').next().unwrap();
            assert!(header.contains(&format!("{name}(")), "{name} missing from header");
        }
    }
    let Ok(status) = Command::new("cc")
        .args(["-fsyntax-only", "-Wall", "-Werror", "-x", "c"])
        .arg(&header_path)
        .status()
    else {
        eprintln!("no C compiler; skipped syntax check");
        return;
    };
    assert!(status.success());
}
