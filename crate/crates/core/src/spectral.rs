//! Layer spectral diagnostics: tail exponent of the eigenvalues of `WᵀW`,
//! its deviation from a reliability interval, and the resulting tempering
//! coefficient.

use std::collections::BTreeMap;

use crate::error::{param, structural, Error, Result};
use crate::numerics::{sym_eigvals, DenseMatrix};

/// Eigenvalues at or below this are treated as zero and never fitted.
pub const EIGEN_FLOOR: f64 = 1e-12;
pub const DEFAULT_MIN_TAIL: usize = 8;
const NEGATIVE_SLACK: f64 = 1e-10;
/// Largest `f64` strictly below one.
pub(crate) const ONE_MINUS_ULP: f64 = 1.0 - f64::EPSILON / 2.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpectralInterval {
    pub rho_min: f64,
    pub rho_max: f64,
}

impl SpectralInterval {
    pub fn new(rho_min: f64, rho_max: f64) -> Result<Self> {
        if !(rho_min.is_finite() && rho_max.is_finite() && rho_min < rho_max) {
            return Err(param(format!(
                "spectral interval needs finite rho_min < rho_max, got [{rho_min}, {rho_max}]"
            )));
        }
        Ok(Self { rho_min, rho_max })
    }

    pub fn midpoint(&self) -> f64 {
        0.5 * (self.rho_min + self.rho_max)
    }

    pub fn half_width(&self) -> f64 {
        0.5 * (self.rho_max - self.rho_min)
    }

    pub fn contains(&self, rho: f64) -> bool {
        (self.rho_min..=self.rho_max).contains(&rho)
    }
}

impl Default for SpectralInterval {
    fn default() -> Self {
        Self {
            rho_min: 2.0,
            rho_max: 6.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PowerLawFit {
    /// `NaN` when `valid` is false.
    pub rho: f64,
    pub tail_size: usize,
    pub valid: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpectralReport {
    pub group_id: usize,
    pub step: u64,
    pub rho: f64,
    pub deviation: f64,
    pub tempering: f64,
    pub tail_size: usize,
    pub valid: bool,
}

/// Eigenvalues of `WᵀW`, descending, with round-off negatives clamped to 0.
pub fn spectral_eigs(weight: &DenseMatrix) -> Result<Vec<f64>> {
    let mut eigs = sym_eigvals(&weight.gram())?;
    let scale = eigs.first().copied().unwrap_or(0.0).abs().max(1.0);
    for e in &mut eigs {
        if *e < 0.0 {
            if *e < -NEGATIVE_SLACK * scale {
                return Err(Error::Numerics(format!(
                    "Gram matrix has a negative eigenvalue {e:e}"
                )));
            }
            *e = 0.0;
        }
    }
    Ok(eigs)
}

/// Continuous maximum-likelihood tail exponent over the top half of the
/// usable spectrum (and at least `min_tail` values), with the smallest
/// retained eigenvalue as the threshold:
/// `ρ̂ = 1 + k / Σ ln(λ_i / λ_min)`.
pub fn fit_powerlaw_exponent(eigs: &[f64], min_tail: usize) -> Result<PowerLawFit> {
    if eigs.is_empty() {
        return Err(structural("cannot fit a power law to an empty spectrum"));
    }
    let min_tail = min_tail.max(2);
    let mut usable: Vec<f64> = eigs.iter().copied().filter(|&e| e > EIGEN_FLOOR).collect();
    usable.sort_by(|a, b| b.total_cmp(a));
    let n = usable.len();
    let invalid = |tail_size| PowerLawFit {
        rho: f64::NAN,
        tail_size,
        valid: false,
    };
    if n < min_tail {
        return Ok(invalid(n));
    }
    let k = n.div_ceil(2).max(min_tail);
    let tail = &usable[..k];
    let lambda_min = tail[k - 1];
    if lambda_min >= tail[0] {
        return Ok(invalid(k));
    }
    let log_sum: f64 = tail.iter().map(|&e| (e / lambda_min).ln()).sum();
    Ok(PowerLawFit {
        rho: 1.0 + k as f64 / log_sum,
        tail_size: k,
        valid: true,
    })
}

/// Distance from `rho` to the interval; zero inside.
pub fn interval_deviation(rho: f64, interval: &SpectralInterval) -> f64 {
    0.0f64
        .max(interval.rho_min - rho)
        .max(rho - interval.rho_max)
}

/// Midpoint form of [`interval_deviation`].
pub fn interval_deviation_centered(rho: f64, interval: &SpectralInterval) -> f64 {
    0.0f64.max((rho - interval.midpoint()).abs() - interval.half_width())
}

/// `1 − exp(−c·d)`, kept strictly below one.
pub fn tempering(deviation: f64, c_lambda: f64) -> Result<f64> {
    if deviation.is_nan() || deviation < 0.0 {
        return Err(param(format!("deviation must be non-negative, got {deviation}")));
    }
    if !(c_lambda > 0.0 && c_lambda.is_finite()) {
        return Err(param(format!("c_lambda must be positive, got {c_lambda}")));
    }
    Ok((-(-c_lambda * deviation).exp_m1()).min(ONE_MINUS_ULP))
}

/// Spectral report for one weight matrix. A failed fit is reported with
/// `valid = false` and zero deviation, so the group keeps its longest memory.
pub fn spectral_report(
    group_id: usize,
    step: u64,
    weight: &DenseMatrix,
    interval: &SpectralInterval,
    c_lambda: f64,
    min_tail: usize,
) -> Result<SpectralReport> {
    let eigs = spectral_eigs(weight)?;
    let fit = fit_powerlaw_exponent(&eigs, min_tail)?;
    let deviation = if fit.valid {
        interval_deviation(fit.rho, interval)
    } else {
        log::debug!("group {group_id} step {step}: spectrum too small for a tail fit");
        0.0
    };
    Ok(SpectralReport {
        group_id,
        step,
        rho: fit.rho,
        deviation,
        tempering: tempering(deviation, c_lambda)?,
        tail_size: fit.tail_size,
        valid: fit.valid,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StageSummary {
    pub mean_rho: f64,
    pub mean_lambda: f64,
    pub count: usize,
}

/// Mean exponent and tempering per stage over valid reports. Stages with
/// no valid report map to `None`.
pub fn aggregate_stagewise(
    reports: &[SpectralReport],
    stages: &BTreeMap<usize, String>,
) -> Result<BTreeMap<String, Option<StageSummary>>> {
    let mut acc: BTreeMap<String, (f64, f64, usize)> = BTreeMap::new();
    for tag in stages.values() {
        acc.entry(tag.clone()).or_default();
    }
    for r in reports {
        let tag = stages
            .get(&r.group_id)
            .ok_or_else(|| structural(format!("group {} has no stage tag", r.group_id)))?;
        if r.valid {
            let e = acc.get_mut(tag).expect("stage registered above");
            e.0 += r.rho;
            e.1 += r.tempering;
            e.2 += 1;
        }
    }
    Ok(acc
        .into_iter()
        .map(|(tag, (rho, lam, count))| {
            let summary = (count > 0).then(|| StageSummary {
                mean_rho: rho / count as f64,
                mean_lambda: lam / count as f64,
                count,
            });
            (tag, summary)
        })
        .collect())
}
