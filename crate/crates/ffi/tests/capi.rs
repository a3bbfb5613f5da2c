use std::f64::consts::FRAC_1_SQRT_2;
use std::ffi::{CStr, CString};
use std::path::Path;
use std::ptr;

use progdistill::diffusion::Parameterization;
use progdistill::net::{MlpConfig, Model, OptimizerSettings, Weights};
use progdistill::rng::Streams;
use progdistill::samplers::{sample_final, SamplerKind};
use progdistill::schedule::{alpha_sigma, StepGrid, TimePoint};
use progdistill_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(pd_last_error()) }
        .to_string_lossy()
        .into_owned()
}

fn model() -> Model {
    let mut cfg = MlpConfig::new(2, 1);
    cfg.hidden_dims = vec![12, 12];
    cfg.time_embed_dim = 4;
    let mut m = Model::new(
        cfg,
        Parameterization::V,
        OptimizerSettings::default(),
        &mut Streams::new(3).stream("init", 0),
    )
    .unwrap();
    // make the output layer non-trivial
    for (i, p) in m.params.iter_mut().enumerate() {
        *p += 0.01 * ((i % 7) as f64 - 3.0);
    }
    m.opt.ema = m.params.iter().map(|p| 0.5 * p).collect();
    m
}

fn load(path: &Path) -> *mut PdModel {
    let c = CString::new(path.to_str().unwrap()).unwrap();
    let mut h = ptr::null_mut();
    assert_eq!(
        unsafe { pd_model_load(c.as_ptr(), &mut h) },
        PdStatus::Ok,
        "{}",
        last_error()
    );
    assert!(!h.is_null());
    h
}

#[test]
fn model_handle_matches_library() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let m = model();
    m.save(&path, None).unwrap();
    let h = load(&path);

    let mut d = 0usize;
    assert_eq!(unsafe { pd_model_dim(h, &mut d) }, PdStatus::Ok);
    assert_eq!(d, 2);

    let z = [0.3, -1.2, 0.8, 0.1];
    let t = [0.4, 1.0];
    let mut out = [0.0; 4];
    for use_ema in [true, false] {
        assert_eq!(
            unsafe { pd_model_predict_x(h, z.as_ptr(), t.as_ptr(), 2, use_ema, out.as_mut_ptr()) },
            PdStatus::Ok
        );
        let points: Vec<_> = t
            .iter()
            .map(|&t| alpha_sigma(TimePoint::new(t).unwrap()))
            .collect();
        let which = if use_ema { Weights::Ema } else { Weights::Raw };
        let want = m
            .predict_x(
                which,
                ndarray::ArrayView2::from_shape((2, 2), &z).unwrap(),
                &points,
            )
            .unwrap();
        assert_eq!(out.as_slice(), want.as_slice().unwrap());
    }

    let sampler = CString::new("ancestral:0.5").unwrap();
    let mut samples = vec![0.0; 10 * 2];
    assert_eq!(
        unsafe { pd_model_sample(h, sampler.as_ptr(), 8, 10, 42, true, samples.as_mut_ptr()) },
        PdStatus::Ok
    );
    let want = sample_final(
        &m.denoiser(Weights::Ema),
        SamplerKind::Ancestral { gamma: 0.5 },
        &StepGrid::new(8).unwrap(),
        &Streams::new(42),
        10,
    )
    .unwrap();
    assert_eq!(samples.as_slice(), want.as_slice().unwrap());

    let bad = CString::new("heun").unwrap();
    assert_eq!(
        unsafe { pd_model_sample(h, bad.as_ptr(), 8, 10, 42, true, samples.as_mut_ptr()) },
        PdStatus::Config
    );
    assert!(last_error().contains("heun"));

    let t_bad = [0.4, 1.5];
    assert_eq!(
        unsafe { pd_model_predict_x(h, z.as_ptr(), t_bad.as_ptr(), 2, true, out.as_mut_ptr()) },
        PdStatus::Domain
    );
    unsafe { pd_model_free(h) };
    unsafe { pd_model_free(ptr::null_mut()) };
}

#[test]
fn load_errors() {
    let mut h = ptr::null_mut();
    let missing = CString::new("/nonexistent/model.ckpt").unwrap();
    assert_eq!(
        unsafe { pd_model_load(missing.as_ptr(), &mut h) },
        PdStatus::Checkpoint
    );
    assert!(h.is_null());
    assert!(!last_error().is_empty());
    assert_eq!(
        unsafe { pd_model_load(ptr::null(), &mut h) },
        PdStatus::NullPointer
    );
    assert_eq!(
        unsafe { pd_model_load(missing.as_ptr(), ptr::null_mut()) },
        PdStatus::NullPointer
    );

    let dir = tempfile::tempdir().unwrap();
    let junk = dir.path().join("junk.ckpt");
    std::fs::write(&junk, b"not a checkpoint").unwrap();
    let c = CString::new(junk.to_str().unwrap()).unwrap();
    assert_eq!(
        unsafe { pd_model_load(c.as_ptr(), &mut h) },
        PdStatus::Checkpoint
    );
    assert!(last_error().contains("magic"));
}

#[test]
fn schedule_and_weights() {
    let (mut a, mut s, mut l) = (0.0, 0.0, 0.0);
    assert_eq!(
        unsafe { pd_alpha_sigma(0.5, &mut a, &mut s, &mut l) },
        PdStatus::Ok
    );
    assert!(
        (a - FRAC_1_SQRT_2).abs() < 1e-15 && (s - FRAC_1_SQRT_2).abs() < 1e-15 && l.abs() < 1e-12
    );
    assert_eq!(
        unsafe { pd_alpha_sigma(1.0, &mut a, ptr::null_mut(), &mut l) },
        PdStatus::Ok
    );
    assert_eq!(a, 0.0);
    assert_eq!(l, f64::NEG_INFINITY);
    assert_eq!(
        unsafe { pd_alpha_sigma(-0.1, &mut a, &mut s, &mut l) },
        PdStatus::Domain
    );
    assert!(last_error().contains("outside"));

    let mut w = 0.0;
    assert_eq!(
        unsafe { pd_loss_weight(0.0, PdLossWeighting::SnrPlusOne, &mut w) },
        PdStatus::Ok
    );
    assert_eq!(w, 2.0);
    assert_eq!(
        unsafe { pd_loss_weight(f64::NEG_INFINITY, PdLossWeighting::Snr, &mut w) },
        PdStatus::Ok
    );
    assert_eq!(w, 0.0);
    assert_eq!(
        unsafe { pd_loss_weight(f64::NEG_INFINITY, PdLossWeighting::TruncatedSnr, &mut w) },
        PdStatus::Ok
    );
    assert_eq!(w, 1.0);
    assert_eq!(
        unsafe { pd_loss_weight(f64::NAN, PdLossWeighting::Snr, &mut w) },
        PdStatus::Domain
    );
    assert_eq!(
        unsafe { pd_loss_weight(0.0, PdLossWeighting::Snr, ptr::null_mut()) },
        PdStatus::NullPointer
    );
}

#[test]
fn ddim_and_energy() {
    let mut out = [0.0];
    assert_eq!(
        unsafe {
            pd_ddim_step(
                [1.0].as_ptr(),
                [0.5].as_ptr(),
                1,
                0.5,
                0.25,
                out.as_mut_ptr(),
            )
        },
        PdStatus::Ok
    );
    assert!((out[0] - 0.81179416).abs() < 1e-8);
    assert_eq!(
        unsafe {
            pd_ddim_step(
                [1.0].as_ptr(),
                [0.5].as_ptr(),
                1,
                0.0,
                0.0,
                out.as_mut_ptr(),
            )
        },
        PdStatus::Domain
    );

    let a = [0.0, 1.0, 2.0, 3.0];
    let b = [0.5, 1.5, 2.5, 3.5];
    let mut e = -1.0;
    assert_eq!(
        unsafe { pd_energy_distance(a.as_ptr(), 4, a.as_ptr(), 4, 1, &mut e) },
        PdStatus::Ok
    );
    assert_eq!(e, 0.0);
    assert_eq!(
        unsafe { pd_energy_distance(a.as_ptr(), 2, b.as_ptr(), 2, 2, &mut e) },
        PdStatus::Ok
    );
    assert!(e > 0.0);
    assert_eq!(
        unsafe { pd_energy_distance(a.as_ptr(), 1, b.as_ptr(), 4, 1, &mut e) },
        PdStatus::Domain
    );
    assert_eq!(
        unsafe { pd_energy_distance(ptr::null(), 4, b.as_ptr(), 4, 1, &mut e) },
        PdStatus::NullPointer
    );
}

#[test]
fn version_and_clear_error() {
    let v = unsafe { CStr::from_ptr(pd_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
    let mut w = 0.0;
    unsafe { pd_loss_weight(f64::NAN, PdLossWeighting::Snr, &mut w) };
    assert!(!last_error().is_empty());
    unsafe { pd_loss_weight(0.0, PdLossWeighting::Snr, &mut w) };
    assert!(last_error().is_empty());
}

#[test]
fn header_is_valid_c() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/progdistill.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for sym in [
        "pd_model_load",
        "pd_model_free",
        "pd_model_sample",
        "pd_energy_distance",
        "PD_STATUS_ZERO_SNR",
        "typedef struct PdModel PdModel",
    ] {
        assert!(text.contains(sym), "{sym} missing from header");
    }
    let Ok(status) = std::process::Command::new("cc")
        .args(["-fsyntax-only", "-x", "c"])
        .arg(&header)
        .status()
    else {
        eprintln!("no C compiler; skipped syntax check");
        return;
    };
    assert!(status.success());
}
