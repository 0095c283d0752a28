use std::ffi::{c_char, CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;

use mindcross::checkpoint::save_checkpoint;
use mindcross::data::{de_feature, generate_synthetic, stack, SyntheticConfig, SEED_BANDS};
use mindcross::pipeline::{self, RunConfig};
use mindcross::{MindCrossModel, ModelConfig};
use mindcross_ffi::*;

fn last_error() -> String {
    let mut buf = vec![0 as c_char; 256];
    let n = unsafe { mc_last_error(buf.as_mut_ptr(), buf.len()) };
    assert!(n > 0);
    unsafe { CStr::from_ptr(buf.as_ptr()) }.to_string_lossy().into_owned()
}

struct Fixture {
    _dir: tempfile::TempDir,
    path: PathBuf,
    model: MindCrossModel,
    run: RunConfig,
    x_new: mindcross::Tensor,
}

fn fixture() -> Fixture {
    let ds = generate_synthetic(&SyntheticConfig {
        n_subjects: 3,
        n_classes: 3,
        trials_per_class: 4,
        in_dim: 8,
        embed_dim: 4,
        latent_dim: 3,
        ..SyntheticConfig::default()
    })
    .unwrap();
    let run = RunConfig {
        epochs_train: 2,
        epochs_calib: 2,
        batch_size: 6,
        top_k: 1,
        ..RunConfig::default()
    };
    let mut model = pipeline::init_model(ModelConfig::new(8, 6, 4, vec!["s0".into(), "s1".into()]), 0).unwrap();
    pipeline::train(&mut model, &ds.by_subject().unwrap(), &run).unwrap();
    let new = stack(&ds.subject_records("s2"), 8, 4).unwrap();
    pipeline::add_subject(&mut model, "s2", 1).unwrap();
    pipeline::calibrate(&mut model, "s2", &new, &run).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    let echo = serde_json::json!({ "config": { "run": run } });
    save_checkpoint(&path, &model, &echo).unwrap();
    Fixture {
        _dir: dir,
        path,
        model,
        run,
        x_new: new.x,
    }
}

fn load(path: &Path) -> *mut McModel {
    let c = CString::new(path.to_str().unwrap()).unwrap();
    let mut handle = std::ptr::null_mut();
    assert_eq!(unsafe { mc_model_load(c.as_ptr(), &mut handle) }, McStatus::Ok);
    assert!(!handle.is_null());
    handle
}

#[test]
fn round_trip_matches_library() {
    let fx = fixture();
    let h = load(&fx.path);
    let (mut m, mut d, mut n) = (0usize, 0usize, 0usize);
    assert_eq!(unsafe { mc_model_dims(h, &mut m, &mut d, &mut n) }, McStatus::Ok);
    assert_eq!((m, d, n), (8, 4, 3));

    let rows = fx.x_new.rows();
    let mut out = vec![0.0; rows * d];
    let s2 = CString::new("s2").unwrap();
    let status = unsafe { mc_model_predict(h, s2.as_ptr(), fx.x_new.data().as_ptr(), rows, out.as_mut_ptr(), out.len()) };
    assert_eq!(status, McStatus::Ok);
    let expected = pipeline::predict(&fx.model, "s2", &fx.x_new, &fx.run).unwrap();
    assert_eq!(out, expected.data());

    let s0 = CString::new("s0").unwrap();
    let status = unsafe { mc_model_predict(h, s0.as_ptr(), fx.x_new.data().as_ptr(), rows, out.as_mut_ptr(), out.len()) };
    assert_eq!(status, McStatus::Ok);
    assert_eq!(out, pipeline::semantic(&fx.model, "s0", &fx.x_new).unwrap().data());

    let mut sim = [0.0; 2];
    assert_eq!(unsafe { mc_model_similarity(h, s2.as_ptr(), sim.as_mut_ptr(), 2) }, McStatus::Ok);
    assert_eq!(sim.as_slice(), fx.model.similarity["s2"].as_slice());
    assert!((sim.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    unsafe { mc_model_free(h) };
}

#[test]
fn errors_are_reported_not_panicked() {
    let fx = fixture();
    let h = load(&fx.path);
    let ghost = CString::new("ghost").unwrap();
    let x = [0.0; 8];
    let mut out = vec![0.0; 4];
    unsafe {
        assert_eq!(
            mc_model_predict(h, ghost.as_ptr(), x.as_ptr(), 1, out.as_mut_ptr(), 4),
            McStatus::UnknownSubject
        );
        assert!(last_error().contains("ghost"));
        let s0 = CString::new("s0").unwrap();
        assert_eq!(
            mc_model_predict(h, s0.as_ptr(), x.as_ptr(), 1, out.as_mut_ptr(), 3),
            McStatus::BufferTooSmall
        );
        assert_eq!(
            mc_model_predict(h, s0.as_ptr(), std::ptr::null(), 1, out.as_mut_ptr(), 4),
            McStatus::NullPointer
        );
        assert_eq!(
            mc_model_similarity(h, s0.as_ptr(), out.as_mut_ptr(), 4),
            McStatus::UnknownSubject
        );
        assert_eq!(mc_model_dims(std::ptr::null(), std::ptr::null_mut(), std::ptr::null_mut(), std::ptr::null_mut()), McStatus::NullPointer);
        mc_model_free(h);
        mc_model_free(std::ptr::null_mut());

        let missing = CString::new(fx.path.with_extension("missing").to_str().unwrap()).unwrap();
        let mut handle = std::ptr::NonNull::<McModel>::dangling().as_ptr();
        assert_eq!(mc_model_load(missing.as_ptr(), &mut handle), McStatus::Io);
        assert!(handle.is_null());

        let garbage = fx.path.with_extension("bad");
        std::fs::write(&garbage, b"not a checkpoint").unwrap();
        let garbage = CString::new(garbage.to_str().unwrap()).unwrap();
        assert_eq!(mc_model_load(garbage.as_ptr(), &mut handle), McStatus::Format);
    }
}

#[test]
fn last_error_truncates_and_terminates() {
    unsafe {
        let mut h = std::ptr::null_mut();
        assert_eq!(mc_model_load(std::ptr::null(), &mut h), McStatus::NullPointer);
        let mut buf = [b'x' as c_char; 4];
        let n = mc_last_error(buf.as_mut_ptr(), buf.len());
        assert_eq!(n, "`path` is NULL".len());
        assert_eq!(CStr::from_ptr(buf.as_ptr()).to_bytes(), b"`pa");
        assert_eq!(mc_last_error(std::ptr::null_mut(), 0), n);
    }
}

#[test]
fn de_feature_matches_library() {
    let fs = 200.0;
    let signal: Vec<f64> = (0..2 * 400)
        .map(|i| {
            let t = (i % 400) as f64 / fs;
            (2.0 * std::f64::consts::PI * 10.0 * t).sin() * (1 + i / 400) as f64
        })
        .collect();
    let mut out = vec![0.0; 10];
    let status = unsafe { mc_de_feature(signal.as_ptr(), 2, 400, fs, out.as_mut_ptr(), out.len()) };
    assert_eq!(status, McStatus::Ok);
    let rows: Vec<&[f64]> = signal.chunks(400).collect();
    assert_eq!(out, de_feature(&rows, &SEED_BANDS, fs).unwrap().values);
    // The alpha band dominates, and doubling amplitude adds ln 4 / 2 = ln 2.
    assert!((out[5 + 2] - out[2] - std::f64::consts::LN_2).abs() < 1e-9);
    assert_eq!(
        unsafe { mc_de_feature(signal.as_ptr(), 2, 400, -1.0, out.as_mut_ptr(), out.len()) },
        McStatus::InvalidArgument
    );
}

#[test]
fn version_is_crate_version() {
    let v = unsafe { CStr::from_ptr(mc_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_compiles_as_c() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/mindcross.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for f in ["mc_model_load", "mc_model_free", "mc_model_predict", "mc_de_feature", "MC_STATUS_UNKNOWN_SUBJECT"] {
        assert!(text.contains(f), "{f} missing from header");
    }
    let Ok(out) = Command::new("cc").args(["-fsyntax-only", "-Wall", "-Werror", "-x", "c"]).arg(&header).output() else {
        eprintln!("no C compiler; syntax check skipped");
        return;
    };
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}
