use std::ffi::c_char;
use std::process::Command;
use std::ptr;

use sma_dpsgd::accountant::{rdp_subsampled_gaussian, sigma_eff_joint};
use sma_dpsgd_ffi::*;

fn last_error() -> String {
    let mut buf = vec![0 as c_char; 256];
    let n = unsafe { sma_last_error_message(buf.as_mut_ptr(), buf.len()) };
    let bytes: Vec<u8> = buf[..n.min(255)].iter().map(|c| *c as u8).collect();
    String::from_utf8(bytes).unwrap()
}

fn small_config() -> SmaTrainerConfig {
    let mut cfg = std::mem::MaybeUninit::<SmaTrainerConfig>::uninit();
    assert_eq!(unsafe { sma_trainer_config_default(cfg.as_mut_ptr()) }, SmaStatus::Ok);
    let mut cfg = unsafe { cfg.assume_init() };
    cfg.n = 200;
    cfg.seed = 3;
    cfg
}

#[test]
fn trainer_round_trip() {
    let cfg = small_config();
    let mut handle = ptr::null_mut();
    assert_eq!(unsafe { sma_trainer_new(&cfg, &mut handle) }, SmaStatus::Ok);
    assert!(!handle.is_null());
    let mut info = SmaStepInfo::default();
    let mut prev_eps = 0.0;
    for t in 0..10 {
        assert_eq!(unsafe { sma_trainer_step(handle, 1e-5, &mut info) }, SmaStatus::Ok);
        assert_eq!(info.step, t);
        assert!(info.epsilon_joint > prev_eps);
        prev_eps = info.epsilon_joint;
    }
    let (mut loss, mut acc) = (0.0, 0.0);
    assert_eq!(unsafe { sma_trainer_evaluate(handle, &mut loss, &mut acc) }, SmaStatus::Ok);
    assert!(loss.is_finite() && (0.0..=1.0).contains(&acc));

    assert_eq!(unsafe { sma_trainer_num_groups(handle) }, 2);
    let mut count = 0;
    assert_eq!(unsafe { sma_trainer_group_params(handle, 0, ptr::null_mut(), 0, &mut count) }, SmaStatus::Ok);
    assert_eq!(count, 16 * 20 + 16);
    let mut params = vec![0.0; count];
    assert_eq!(unsafe { sma_trainer_group_params(handle, 0, params.as_mut_ptr(), count, &mut count) }, SmaStatus::Ok);
    assert!(params.iter().any(|p| *p != 0.0));
    let mut short = vec![0.0; 3];
    assert_eq!(
        unsafe { sma_trainer_group_params(handle, 0, short.as_mut_ptr(), 3, &mut count) },
        SmaStatus::InvalidArgument
    );
    assert_eq!(unsafe { sma_trainer_group_params(handle, 7, ptr::null_mut(), 0, &mut count) }, SmaStatus::InvalidArgument);
    unsafe { sma_trainer_free(handle) };
}

#[test]
fn invalid_config_reports_message() {
    let mut cfg = small_config();
    cfg.q = 1.5;
    let mut handle = ptr::null_mut();
    assert_eq!(unsafe { sma_trainer_new(&cfg, &mut handle) }, SmaStatus::InvalidArgument);
    assert!(handle.is_null());
    assert!(last_error().contains('q'), "{}", last_error());

    cfg = small_config();
    cfg.architecture = 9;
    assert_eq!(unsafe { sma_trainer_new(&cfg, &mut handle) }, SmaStatus::InvalidArgument);
    assert!(last_error().contains("architecture"));
}

#[test]
fn null_pointers_are_rejected() {
    assert_eq!(unsafe { sma_trainer_new(ptr::null(), ptr::null_mut()) }, SmaStatus::NullPointer);
    assert_eq!(unsafe { sma_trainer_step(ptr::null_mut(), 1e-5, ptr::null_mut()) }, SmaStatus::NullPointer);
    assert_eq!(unsafe { sma_rdp_subsampled_gaussian(2, 0.1, 1.0, ptr::null_mut()) }, SmaStatus::NullPointer);
    assert_eq!(unsafe { sma_trainer_num_groups(ptr::null()) }, 0);
    unsafe {
        sma_trainer_free(ptr::null_mut());
        sma_ledger_free(ptr::null_mut());
    }
}

#[test]
fn accountant_functions_match_library() {
    let mut v = 0.0;
    assert_eq!(unsafe { sma_rdp_subsampled_gaussian(16, 0.01, 1.0, &mut v) }, SmaStatus::Ok);
    assert_eq!(v, rdp_subsampled_gaussian(16, 0.01, 1.0).unwrap());
    let sigmas = [1.0, 2.0, 0.5];
    assert_eq!(unsafe { sma_sigma_eff_joint(0.8, sigmas.as_ptr(), 3, &mut v) }, SmaStatus::Ok);
    assert_eq!(v, sigma_eff_joint(0.8, &sigmas).unwrap());

    let mut ledger = ptr::null_mut();
    assert_eq!(unsafe { sma_ledger_new(2, 2, 0, &mut ledger) }, SmaStatus::Ok);
    // One q=1 step at σ=1 costs order/(2σ²) = 1 at order 2.
    assert_eq!(unsafe { sma_ledger_compose(ledger, 1.0, 1.0) }, SmaStatus::Ok);
    let (mut eps, mut order) = (0.0, 0u32);
    assert_eq!(unsafe { sma_ledger_epsilon(ledger, 1e-5, &mut eps, &mut order) }, SmaStatus::Ok);
    assert!((eps - 12.512925464970229).abs() < 1e-9);
    assert_eq!(order, 2);
    assert_eq!(unsafe { sma_ledger_compose(ledger, 2.0, 1.0) }, SmaStatus::InvalidArgument);
    unsafe { sma_ledger_free(ledger) };

    assert_eq!(unsafe { sma_ledger_new(5, 2, 0, &mut ledger) }, SmaStatus::InvalidArgument);
}

#[test]
fn spectral_functions() {
    let eigs: Vec<f64> = (1..=40).map(|i| (i as f64).powf(-2.0)).collect();
    let mut r = SmaSpectralResult::default();
    assert_eq!(unsafe { sma_fit_powerlaw(eigs.as_ptr(), eigs.len(), 8, &mut r) }, SmaStatus::Ok);
    assert_eq!(r.valid, 1);
    assert!(r.rho > 1.0);

    let w: Vec<f64> = (0..12 * 12).map(|k| if k % 13 == 0 { 1.0 / (1 + k / 13) as f64 } else { 0.0 }).collect();
    assert_eq!(unsafe { sma_spectral_fit(w.as_ptr(), 12, 12, 2.0, 6.0, 1.0, 4, &mut r) }, SmaStatus::Ok);
    assert_eq!(r.valid, 1);
    assert!(r.tempering >= 0.0 && r.tempering < 1.0);

    let tiny = [1.0, 2.0];
    assert_eq!(unsafe { sma_spectral_fit(tiny.as_ptr(), 1, 2, 2.0, 6.0, 1.0, 8, &mut r) }, SmaStatus::Ok);
    assert_eq!(r.valid, 0);
    assert!(r.rho.is_nan());
    assert_eq!(unsafe { sma_spectral_fit(ptr::null(), 2, 2, 2.0, 6.0, 1.0, 8, &mut r) }, SmaStatus::NullPointer);
    assert_eq!(unsafe { sma_spectral_fit(tiny.as_ptr(), 1, 2, 7.0, 6.0, 1.0, 8, &mut r) }, SmaStatus::InvalidArgument);
}

#[test]
fn header_compiles_as_c() {
    let header = concat!(env!("CARGO_MANIFEST_DIR"), "/include/sma_dpsgd.h");
    let text = std::fs::read_to_string(header).unwrap();
    for name in ["sma_trainer_new", "sma_trainer_step", "sma_ledger_epsilon", "sma_spectral_fit", "SMA_STATUS_OK"] {
        assert!(text.contains(name), "{name} missing from header");
    }
    let Ok(probe) = Command::new("cc").arg("--version").output() else {
        return;
    };
    if !probe.status.success() {
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        "#include \"sma_dpsgd.h\"\nint main(void) { SmaTrainerConfig c; SmaTrainer *t = 0;\n\
         if (sma_trainer_config_default(&c) != SMA_STATUS_OK) return 1;\n\
         return (int)sma_trainer_new(&c, &t); }\n",
    )
    .unwrap();
    let out = Command::new("cc")
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I"])
        .arg(concat!(env!("CARGO_MANIFEST_DIR"), "/include"))
        .arg(&src)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}
