//! C ABI for the sma-dpsgd trainer, privacy ledger and spectral fit.
//!
//! Every function returns an `SmaStatus`. On failure the message is kept
//! per thread and can be copied out with `sma_last_error_message`.
//! Handles are opaque and must be released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, c_int};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::slice;

use sma_dpsgd::accountant::{rdp_subsampled_gaussian, sigma_eff_joint, LedgerMode, PrivacyLedger, RdpOrderGrid, StepRecord};
use sma_dpsgd::data::gen_synthetic;
use sma_dpsgd::model::{evaluate, init_model, Architecture};
use sma_dpsgd::numerics::{DenseMatrix, RandomStream};
use sma_dpsgd::optimizer::{OptimizerConfig, Trainer};
use sma_dpsgd::spectral::{fit_powerlaw_exponent, spectral_report, SpectralInterval};
use sma_dpsgd::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SmaStatus {
    Ok = 0,
    InvalidArgument = 1,
    NullPointer = 2,
    Numerical = 3,
    State = 4,
    Io = 5,
    Panic = 6,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

fn status_of(err: &Error) -> SmaStatus {
    match err {
        Error::Parameter(_) | Error::Config(_) | Error::Structural(_) | Error::Format { .. } | Error::Length { .. } => {
            SmaStatus::InvalidArgument
        }
        Error::Numerical { .. } | Error::Numerics(_) | Error::Accounting(_) => SmaStatus::Numerical,
        Error::State(_) => SmaStatus::State,
        Error::Csv(_) | Error::Io(_) => SmaStatus::Io,
    }
}

struct Failure(SmaStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn null(name: &str) -> Failure {
    Failure(SmaStatus::NullPointer, format!("{name} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> SmaStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            SmaStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            SmaStatus::Panic
        }
    }
}

unsafe fn out<'a, T>(p: *mut T, name: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| null(name))
}

unsafe fn input<'a, T>(p: *const T, len: usize, name: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(name));
    }
    Ok(slice::from_raw_parts(p, len))
}

/// Copies the calling thread's last error message into `buf` (NUL
/// terminated, truncated to `len`). Returns the full message length.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn sma_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr().cast::<c_char>(), buf, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Training settings for a synthetic-data trainer.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct SmaTrainerConfig {
    pub beta: f64,
    pub alpha: f64,
    pub window_k: usize,
    pub learning_rate: f64,
    pub q: f64,
    pub rho_min: f64,
    pub rho_max: f64,
    pub c_lambda: f64,
    pub gamma_ema: f64,
    pub tau_warm: f64,
    pub xi_max: f64,
    pub eps_num: f64,
    pub min_tail: usize,
    pub seed: u64,
    /// Synthetic examples, input dimension and classes.
    pub n: usize,
    pub d: usize,
    pub classes: usize,
    /// 0 for logistic regression, 1 for one hidden tanh layer.
    pub architecture: c_int,
    pub hidden: usize,
    pub clip_norm: f64,
    pub sigma: f64,
}

/// Fills `cfg` with the library defaults.
///
/// # Safety
/// `cfg` must be null or valid for writes.
#[no_mangle]
pub unsafe extern "C" fn sma_trainer_config_default(cfg: *mut SmaTrainerConfig) -> SmaStatus {
    guard(|| {
        let o = OptimizerConfig::default();
        *out(cfg, "cfg")? = SmaTrainerConfig {
            beta: o.beta,
            alpha: o.alpha,
            window_k: o.window_k,
            learning_rate: o.learning_rate,
            q: o.q,
            rho_min: o.interval.rho_min,
            rho_max: o.interval.rho_max,
            c_lambda: o.c_lambda,
            gamma_ema: o.gamma_ema,
            tau_warm: o.tau_warm,
            xi_max: o.xi_max,
            eps_num: o.eps_num,
            min_tail: o.min_tail,
            seed: o.seed,
            n: 2000,
            d: 20,
            classes: 2,
            architecture: 1,
            hidden: 16,
            clip_norm: 1.0,
            sigma: 1.0,
        };
        Ok(())
    })
}

/// Opaque trainer handle.
pub struct SmaTrainer {
    trainer: Trainer,
}

/// Per-step summary returned by `sma_trainer_step`.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct SmaStepInfo {
    pub step: u64,
    pub batch_size: usize,
    pub mean_d_eff: f64,
    pub mean_memory_ratio: f64,
    pub epsilon_joint: f64,
    pub epsilon_marginal: f64,
}

/// Builds a trainer on synthetic Gaussian-blob data.
///
/// # Safety
/// `cfg` must point to a valid config and `handle` be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn sma_trainer_new(cfg: *const SmaTrainerConfig, handle: *mut *mut SmaTrainer) -> SmaStatus {
    guard(|| {
        let slot = out(handle, "handle")?;
        *slot = ptr::null_mut();
        let c = *cfg.as_ref().ok_or_else(|| null("cfg"))?;
        let architecture = match c.architecture {
            0 => Architecture::LogReg,
            1 => Architecture::Mlp1,
            other => return Err(Failure(SmaStatus::InvalidArgument, format!("unknown architecture {other}"))),
        };
        let config = OptimizerConfig {
            beta: c.beta,
            alpha: c.alpha,
            window_k: c.window_k,
            learning_rate: c.learning_rate,
            q: c.q,
            interval: SpectralInterval::new(c.rho_min, c.rho_max)?,
            c_lambda: c.c_lambda,
            gamma_ema: c.gamma_ema,
            tau_warm: c.tau_warm,
            xi_max: c.xi_max,
            eps_num: c.eps_num,
            min_tail: c.min_tail,
            // The caller decides how many steps to run.
            steps: u64::MAX,
            seed: c.seed,
        };
        config.validate()?;
        let data = gen_synthetic(RandomStream::data(c.seed), c.n, c.d, c.classes)?;
        let model = init_model(
            RandomStream::init(c.seed),
            architecture,
            c.d,
            c.hidden,
            c.classes,
            &[c.clip_norm],
            &[c.sigma],
        )?;
        let trainer = Trainer::new(config, model, data, RdpOrderGrid::default())?;
        *slot = Box::into_raw(Box::new(SmaTrainer { trainer }));
        Ok(())
    })
}

/// # Safety
/// `handle` must be null or come from `sma_trainer_new` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn sma_trainer_free(handle: *mut SmaTrainer) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

/// Runs one private step; `epsilon_*` are reported at `delta`.
///
/// # Safety
/// `handle` must be a live trainer and `info` null or valid for writes.
#[no_mangle]
pub unsafe extern "C" fn sma_trainer_step(handle: *mut SmaTrainer, delta: f64, info: *mut SmaStepInfo) -> SmaStatus {
    guard(|| {
        let t = &mut out(handle, "handle")?.trainer;
        let trace = t.step()?;
        let n = trace.groups.len() as f64;
        let summary = SmaStepInfo {
            step: trace.step,
            batch_size: trace.batch_size,
            mean_d_eff: trace.groups.iter().map(|g| g.memory.d_eff).sum::<f64>() / n,
            mean_memory_ratio: trace.groups.iter().map(|g| g.memory_ratio).sum::<f64>() / n,
            epsilon_joint: t.joint.rdp_to_dp(delta)?.epsilon,
            epsilon_marginal: t.marginal.rdp_to_dp(delta)?.epsilon,
        };
        if let Some(info) = info.as_mut() {
            *info = summary;
        }
        Ok(())
    })
}

/// Loss and accuracy on the training data.
///
/// # Safety
/// `handle` must be a live trainer; `loss` and `accuracy` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn sma_trainer_evaluate(handle: *const SmaTrainer, loss: *mut f64, accuracy: *mut f64) -> SmaStatus {
    guard(|| {
        let t = &handle.as_ref().ok_or_else(|| null("handle"))?.trainer;
        let e = evaluate(&t.model, &t.data)?;
        *out(loss, "loss")? = e.loss;
        *out(accuracy, "accuracy")? = e.accuracy;
        Ok(())
    })
}

/// Number of parameter groups.
///
/// # Safety
/// `handle` must be a live trainer or null (returns 0).
#[no_mangle]
pub unsafe extern "C" fn sma_trainer_num_groups(handle: *const SmaTrainer) -> usize {
    handle.as_ref().map_or(0, |h| h.trainer.model.num_groups())
}

/// Copies group `group`'s flat parameters (weights row-major, then bias)
/// into `buf`. `count` receives the parameter count; pass a null `buf` to
/// query it.
///
/// # Safety
/// `buf` must be null or hold `len` writable doubles; `count` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn sma_trainer_group_params(
    handle: *const SmaTrainer,
    group: usize,
    buf: *mut f64,
    len: usize,
    count: *mut usize,
) -> SmaStatus {
    guard(|| {
        let t = &handle.as_ref().ok_or_else(|| null("handle"))?.trainer;
        let flat = t.model.group(group)?.flat();
        *out(count, "count")? = flat.len();
        if buf.is_null() {
            return Ok(());
        }
        if len < flat.len() {
            return Err(Failure(
                SmaStatus::InvalidArgument,
                format!("buffer holds {len} values, group has {}", flat.len()),
            ));
        }
        ptr::copy_nonoverlapping(flat.as_ptr(), buf, flat.len());
        Ok(())
    })
}

/// Opaque privacy ledger handle.
pub struct SmaLedger {
    ledger: PrivacyLedger,
}

/// Creates an empty ledger over orders `lo..=hi`. `marginal` nonzero tags it
/// as the marginal diagnostic.
///
/// # Safety
/// `handle` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn sma_ledger_new(lo: u32, hi: u32, marginal: c_int, handle: *mut *mut SmaLedger) -> SmaStatus {
    guard(|| {
        let slot = out(handle, "handle")?;
        *slot = ptr::null_mut();
        let mode = if marginal != 0 { LedgerMode::Marginal } else { LedgerMode::Joint };
        let ledger = PrivacyLedger::new(mode, RdpOrderGrid::range(lo, hi)?);
        *slot = Box::into_raw(Box::new(SmaLedger { ledger }));
        Ok(())
    })
}

/// # Safety
/// `handle` must be null or come from `sma_ledger_new` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn sma_ledger_free(handle: *mut SmaLedger) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

/// Adds one subsampled Gaussian step.
///
/// # Safety
/// `handle` must be a live ledger.
#[no_mangle]
pub unsafe extern "C" fn sma_ledger_compose(handle: *mut SmaLedger, q: f64, sigma_eff: f64) -> SmaStatus {
    guard(|| {
        let l = &mut out(handle, "handle")?.ledger;
        let grid = l.grid().clone();
        let step = l.records().len() as u64;
        l.compose(StepRecord { step, q, sigma_eff }, &grid)?;
        Ok(())
    })
}

/// Best `ε` over the ledger's orders at `delta`.
///
/// # Safety
/// `handle` must be a live ledger; `epsilon` and `order` null or valid for writes.
#[no_mangle]
pub unsafe extern "C" fn sma_ledger_epsilon(handle: *const SmaLedger, delta: f64, epsilon: *mut f64, order: *mut u32) -> SmaStatus {
    guard(|| {
        let l = &handle.as_ref().ok_or_else(|| null("handle"))?.ledger;
        let dp = l.rdp_to_dp(delta)?;
        *out(epsilon, "epsilon")? = dp.epsilon;
        if let Some(o) = order.as_mut() {
            *o = dp.best_order;
        }
        Ok(())
    })
}

/// RDP of one Poisson-subsampled Gaussian step at an integer order.
///
/// # Safety
/// `result` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn sma_rdp_subsampled_gaussian(order: u32, q: f64, sigma: f64, result: *mut f64) -> SmaStatus {
    guard(|| {
        *out(result, "result")? = rdp_subsampled_gaussian(order, q, sigma)?;
        Ok(())
    })
}

/// `1 / (β·sqrt(Σ σ_g⁻²))`.
///
/// # Safety
/// `sigmas` must hold `n` doubles; `result` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn sma_sigma_eff_joint(beta: f64, sigmas: *const f64, n: usize, result: *mut f64) -> SmaStatus {
    guard(|| {
        let s = input(sigmas, n, "sigmas")?;
        *out(result, "result")? = sigma_eff_joint(beta, s)?;
        Ok(())
    })
}

/// Spectral diagnostics of one weight matrix.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct SmaSpectralResult {
    /// NaN when the fit is invalid.
    pub rho: f64,
    pub deviation: f64,
    pub tempering: f64,
    pub tail_size: usize,
    pub valid: c_int,
}

/// Power-law exponent from eigenvalues.
///
/// # Safety
/// `eigs` must hold `n` doubles; `result` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn sma_fit_powerlaw(eigs: *const f64, n: usize, min_tail: usize, result: *mut SmaSpectralResult) -> SmaStatus {
    guard(|| {
        let fit = fit_powerlaw_exponent(input(eigs, n, "eigs")?, min_tail)?;
        *out(result, "result")? = SmaSpectralResult {
            rho: fit.rho,
            deviation: 0.0,
            tempering: 0.0,
            tail_size: fit.tail_size,
            valid: fit.valid as c_int,
        };
        Ok(())
    })
}

/// Exponent, interval deviation and tempering of a row-major `rows×cols` matrix.
///
/// # Safety
/// `weights` must hold `rows*cols` doubles; `result` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn sma_spectral_fit(
    weights: *const f64,
    rows: usize,
    cols: usize,
    rho_min: f64,
    rho_max: f64,
    c_lambda: f64,
    min_tail: usize,
    result: *mut SmaSpectralResult,
) -> SmaStatus {
    guard(|| {
        let data = input(weights, rows.saturating_mul(cols), "weights")?.to_vec();
        let w = DenseMatrix::new(rows, cols, data)?;
        let interval = SpectralInterval::new(rho_min, rho_max)?;
        let r = spectral_report(0, 0, &w, &interval, c_lambda, min_tail)?;
        *out(result, "result")? = SmaSpectralResult {
            rho: r.rho,
            deviation: r.deviation,
            tempering: r.tempering,
            tail_size: r.tail_size,
            valid: r.valid as c_int,
        };
        Ok(())
    })
}
