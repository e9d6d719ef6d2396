use std::ffi::{CStr, CString};
use std::path::PathBuf;
use std::process::Command;
use std::ptr;

use distzo::model::{init_model, Batch, ModelConfig};
use distzo::zo::{mezo_step, ZoHyper};
use distzo_ffi::*;

const TINY: &str = r#"{"vocab_size":16,"d_model":8,"n_heads":2,"n_blocks":2,"seq_len":8}"#;

fn cstr(s: &str) -> CString {
    CString::new(s).unwrap()
}

fn last_error() -> String {
    let p = dz_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn new_model(json: &str, seed: u64) -> *mut DzModel {
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { dz_model_new(cstr(json).as_ptr(), seed, &mut m) }, DzStatus::Ok);
    assert!(!m.is_null());
    m
}

#[test]
fn steps_match_the_library() {
    let m = new_model(TINY, 7);
    let cfg = ModelConfig::from_json(TINY).unwrap();
    let mut reference = init_model::<f64>(&cfg, 7).unwrap();
    let batch = Batch::synthetic(cfg.vocab_size, 4, cfg.seq_len, 1).unwrap();
    let hyper = ZoHyper::new(1e-3, 1e-2, 1).unwrap();
    for i in 0..3 {
        let mut out = DzStep::default();
        assert_eq!(unsafe { dz_mezo_step(m, 1e-3, 1e-2, 4, 1, 50 + i, i, &mut out) }, DzStatus::Ok);
        let want = mezo_step(&mut reference, &batch, &hyper, 50 + i, i).unwrap();
        assert_eq!(out.g.to_bits(), want.g.to_bits());
        assert_eq!(out.loss_pos.to_bits(), want.loss_pos.to_bits());
    }
    let (mut n, mut sum) = (0usize, 0u64);
    unsafe {
        assert_eq!(dz_model_param_count(m, &mut n), DzStatus::Ok);
        assert_eq!(dz_model_checksum(m, &mut sum), DzStatus::Ok);
        dz_model_free(m);
    }
    assert_eq!(n, reference.param_count());
    assert_eq!(sum, reference.checksum());
}

#[test]
fn error_codes_and_messages() {
    let mut m = ptr::null_mut();
    let bad = cstr(r#"{"vocab_size":16,"d_model":8,"n_heads":3,"n_blocks":2,"seq_len":8}"#);
    assert_eq!(unsafe { dz_model_new(bad.as_ptr(), 0, &mut m) }, DzStatus::Config);
    assert!(last_error().contains("n_heads"));
    assert_eq!(unsafe { dz_model_new(ptr::null(), 0, &mut m) }, DzStatus::NullPointer);
    assert_eq!(unsafe { dz_model_new(cstr(TINY).as_ptr(), 0, ptr::null_mut()) }, DzStatus::NullPointer);
    let invalid = [0xffu8, 0xfe, 0];
    assert_eq!(unsafe { dz_model_new(invalid.as_ptr().cast(), 0, &mut m) }, DzStatus::Utf8);

    let mut g = 0.0;
    assert_eq!(unsafe { dz_zo_grad(1.5, 0.5, 0.25, &mut g) }, DzStatus::Ok);
    assert_eq!(g, 2.0);
    assert_eq!(unsafe { dz_zo_grad(1.0, 0.0, 0.0, &mut g) }, DzStatus::Numeric);

    let m = new_model(TINY, 1);
    let mut loss = 0.0;
    assert_eq!(unsafe { dz_model_loss(m, 0, 1, &mut loss) }, DzStatus::Config);
    assert_eq!(unsafe { dz_model_loss(m, 2, 1, &mut loss) }, DzStatus::Ok);
    assert!(loss.is_finite() && loss > 0.0);
    unsafe {
        dz_model_free(m);
        dz_model_free(ptr::null_mut());
        dz_string_free(ptr::null_mut());
    }
}

#[test]
fn checkpoint_round_trip_both_precisions() {
    let dir = tempfile::tempdir().unwrap();
    for dtype in ["f64", "f32"] {
        let json = TINY.replace('}', &format!(r#","dtype":"{dtype}"}}"#));
        let m = new_model(&json, 3);
        let path = cstr(dir.path().join(format!("{dtype}.ckpt")).to_str().unwrap());
        let mut back = ptr::null_mut();
        let (mut a, mut b) = (0u64, 0u64);
        unsafe {
            assert_eq!(dz_model_save(m, path.as_ptr()), DzStatus::Ok);
            assert_eq!(dz_model_load(path.as_ptr(), &mut back), DzStatus::Ok);
            dz_model_checksum(m, &mut a);
            dz_model_checksum(back, &mut b);
            dz_model_free(m);
            dz_model_free(back);
        }
        assert_eq!(a, b, "{dtype}");
    }
    let missing = cstr(dir.path().join("missing").to_str().unwrap());
    let mut out = ptr::null_mut();
    assert_eq!(unsafe { dz_model_load(missing.as_ptr(), &mut out) }, DzStatus::Io);
}

#[test]
fn comm_and_run_config() {
    let mut span = 0.0;
    assert_eq!(unsafe { dz_comm_sliced_upload_makespan(1.0, 3.0, 0.0, 4, 12, &mut span) }, DzStatus::Ok);
    assert_eq!(span, 15.0);
    assert_eq!(unsafe { dz_comm_sliced_upload_makespan(1.0, 3.0, 0.0, 0, 12, &mut span) }, DzStatus::Config);

    let mut report = ptr::null_mut();
    let cfg = cstr(r#"{"strategy":"pertp","hyper":{"epsilon":0.001,"lr":0.01,"steps":3}}"#);
    assert_eq!(unsafe { dz_run_config(cfg.as_ptr(), &mut report) }, DzStatus::Ok);
    let text = unsafe { CStr::from_ptr(report) }.to_str().unwrap().to_owned();
    unsafe { dz_string_free(report) };
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(v["workers"], 2);
    assert_eq!(v["steps"], 3);

    let bad = cstr(r#"{"strategy":"2d","workers":3}"#);
    assert_eq!(unsafe { dz_run_config(bad.as_ptr(), &mut report) }, DzStatus::Config);

    let version = unsafe { CStr::from_ptr(dz_version()) }.to_str().unwrap();
    assert_eq!(version, env!("CARGO_PKG_VERSION"));
}

/// Compile a C program against the generated header and the static library.
#[test]
fn c_program_links_against_header() {
    let manifest = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    let header_dir = manifest.join("include");
    assert!(header_dir.join("distzo.h").exists());
    // The test binary lives in target/<profile>/deps; the library one level up.
    let exe = std::env::current_exe().unwrap();
    let lib_dir = exe.parent().unwrap().parent().unwrap();
    let lib = lib_dir.join("libdistzo_ffi.a");
    if !lib.exists() {
        eprintln!("skipping: {} not built", lib.display());
        return;
    }
    let tmp = tempfile::tempdir().unwrap();
    let bin = tmp.path().join("smoke");
    let status = Command::new("cc")
        .arg("-std=c99")
        .arg("-Wall")
        .arg("-Werror")
        .arg("-I")
        .arg(&header_dir)
        .arg(manifest.join("tests/c/smoke.c"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&bin)
        .status();
    let Ok(status) = status else {
        eprintln!("skipping: no C compiler");
        return;
    };
    assert!(status.success(), "C compile failed");
    let out = Command::new(&bin).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("params=2080"), "{stdout}");
    assert!(stdout.contains("span=15"), "{stdout}");
}
