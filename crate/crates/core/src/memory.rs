//! Private release history and the memory branch built from it.
//!
//! Nothing here accepts the current clipped sum: every input is either a
//! stored release, the EMA trend of stored releases, or a public
//! hyperparameter.

use std::collections::VecDeque;

use crate::error::{param, structural, Error, Result};
use crate::numerics::{dot, norm2};
use crate::spectral::ONE_MINUS_ULP;

/// One private release split into its query and noise parts.
#[derive(Debug, Clone, PartialEq)]
pub struct ReleaseRecord {
    pub step: u64,
    pub group_id: usize,
    pub query: Vec<f64>,
    pub noise: Vec<f64>,
    pub release: Vec<f64>,
}

impl ReleaseRecord {
    pub fn new(step: u64, group_id: usize, query: Vec<f64>, noise: Vec<f64>) -> Result<Self> {
        if query.len() != noise.len() {
            return Err(structural(format!(
                "query has length {}, noise has length {}",
                query.len(),
                noise.len()
            )));
        }
        let release = query.iter().zip(&noise).map(|(r, z)| r + z).collect();
        Ok(Self {
            step,
            group_id,
            query,
            noise,
            release,
        })
    }
}

/// Ring buffer of the last `K − 1` releases of one group plus the EMA trend
/// over all of its releases.
#[derive(Debug, Clone, PartialEq)]
pub struct ReleaseHistory {
    pub group_id: usize,
    capacity: usize,
    /// Newest first.
    records: VecDeque<ReleaseRecord>,
    ema_trend: Option<Vec<f64>>,
    gamma_ema: f64,
    /// Steps appended so far; the next record must carry this step.
    next_step: u64,
}

impl ReleaseHistory {
    /// History for window `K`, keeping `K − 1` releases.
    pub fn new(group_id: usize, window_k: usize, gamma_ema: f64) -> Result<Self> {
        if window_k == 0 {
            return Err(param("memory window K must be at least 1"));
        }
        check_gamma(gamma_ema)?;
        Ok(Self {
            group_id,
            capacity: window_k - 1,
            records: VecDeque::with_capacity(window_k - 1),
            ema_trend: None,
            gamma_ema,
            next_step: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> impl Iterator<Item = &ReleaseRecord> {
        self.records.iter()
    }

    /// `μ` after the most recent release; `None` before the first one.
    pub fn ema_trend(&self) -> Option<&[f64]> {
        self.ema_trend.as_deref()
    }

    pub fn gamma_ema(&self) -> f64 {
        self.gamma_ema
    }

    /// Number of releases appended over the history's lifetime.
    pub fn steps_recorded(&self) -> u64 {
        self.next_step
    }

    /// Appends the release of the next step, evicting the oldest record once
    /// the buffer is full, and advances the EMA trend.
    pub fn append(&mut self, record: ReleaseRecord) -> Result<()> {
        if record.group_id != self.group_id {
            return Err(Error::State(format!(
                "record for group {} appended to history of group {}",
                record.group_id, self.group_id
            )));
        }
        if record.step != self.next_step {
            return Err(Error::State(format!(
                "history of group {} expects step {}, got {}",
                self.group_id, self.next_step, record.step
            )));
        }
        if let Some(prev) = &self.ema_trend {
            if prev.len() != record.release.len() {
                return Err(structural("release length differs from earlier releases"));
            }
        }
        let trend = ema_update(
            self.ema_trend.as_deref(),
            &record.release,
            self.gamma_ema,
            self.next_step == 0,
        )?;
        self.ema_trend = Some(trend);
        if self.capacity > 0 {
            if self.records.len() == self.capacity {
                self.records.pop_back();
            }
            self.records.push_front(record);
        }
        self.next_step += 1;
        Ok(())
    }
}

fn check_gamma(gamma: f64) -> Result<()> {
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(param(format!("gamma_ema must lie in (0, 1], got {gamma}")));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct KernelWeights {
    pub raw: Vec<f64>,
    pub hat: Vec<f64>,
}

/// Tempered fractional kernel `a_j = (j+1)^(α−1)·exp(−λj)` for
/// `j = 1..=m_t`, and its normalization.
pub fn kernel_weights(alpha: f64, lambda: f64, m_t: usize) -> Result<KernelWeights> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(param(format!("fractional order alpha must lie in (0, 1], got {alpha}")));
    }
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(param(format!("tempering must be finite and non-negative, got {lambda}")));
    }
    let raw: Vec<f64> = (1..=m_t)
        .map(|j| {
            let j = j as f64;
            (j + 1.0).powf(alpha - 1.0) * (-lambda * j).exp()
        })
        .collect();
    let total: f64 = raw.iter().sum();
    let hat = raw.iter().map(|a| a / total).collect();
    Ok(KernelWeights { raw, hat })
}

/// Mean lag `Σ j·â_j`; zero without lags.
pub fn effective_depth(hat: &[f64]) -> f64 {
    hat.iter()
        .enumerate()
        .map(|(i, w)| (i + 1) as f64 * w)
        .sum()
}

fn weighted_sum<'a>(
    history: &'a ReleaseHistory,
    hat: &[f64],
    pick: impl Fn(&'a ReleaseRecord) -> &'a [f64],
) -> Result<Vec<f64>> {
    if hat.len() > history.len() {
        return Err(structural(format!(
            "{} kernel weights but only {} stored releases",
            hat.len(),
            history.len()
        )));
    }
    let mut records = history.records();
    let Some(first) = records.next() else {
        return Ok(Vec::new());
    };
    let dim = pick(first).len();
    let mut out = vec![0.0; dim];
    for (w, rec) in hat.iter().zip(std::iter::once(first).chain(records)) {
        let v = pick(rec);
        if v.len() != dim {
            return Err(structural(format!(
                "release at step {} has length {}, expected {dim}",
                rec.step,
                v.len()
            )));
        }
        for (o, x) in out.iter_mut().zip(v) {
            *o += w * x;
        }
    }
    Ok(out)
}

/// `ν = Σ â_j·s̃_(t−j)`, newest release weighted by `â_1`.
pub fn memory_vector(history: &ReleaseHistory, hat: &[f64]) -> Result<Vec<f64>> {
    weighted_sum(history, hat, |r| &r.release)
}

/// Query and noise parts of the memory vector.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryDecomposition {
    pub nu_rec: Vec<f64>,
    pub nu_noise: Vec<f64>,
}

pub fn memory_decompose(history: &ReleaseHistory, hat: &[f64]) -> Result<MemoryDecomposition> {
    Ok(MemoryDecomposition {
        nu_rec: weighted_sum(history, hat, |r| &r.query)?,
        nu_noise: weighted_sum(history, hat, |r| &r.noise)?,
    })
}

/// `μ ← γ·s̃ + (1−γ)·μ`, or `μ ← s̃` on the first release.
pub fn ema_update(prev: Option<&[f64]>, release: &[f64], gamma: f64, is_first: bool) -> Result<Vec<f64>> {
    check_gamma(gamma)?;
    if is_first {
        return Ok(release.to_vec());
    }
    let prev = prev.ok_or_else(|| Error::State("EMA update needs the previous trend".into()))?;
    if prev.len() != release.len() {
        return Err(structural("EMA trend and release lengths differ"));
    }
    Ok(release
        .iter()
        .zip(prev)
        .map(|(s, m)| gamma * s + (1.0 - gamma) * m)
        .collect())
}

/// `Γ = max(0, ⟨μ,ν⟩ / (‖μ‖‖ν‖ + ε))`, clipped to `[0, 1]`.
pub fn alignment_gate(mu: &[f64], nu: &[f64], eps: f64) -> f64 {
    let g = dot(mu, nu) / (norm2(mu) * norm2(nu) + eps);
    g.clamp(0.0, 1.0)
}

/// `Ψ = min(ξ_max, ‖μ‖ / (‖ν‖ + ε))`.
pub fn norm_scale(mu: &[f64], nu: &[f64], xi_max: f64, eps: f64) -> f64 {
    (norm2(mu) / (norm2(nu) + eps)).min(xi_max)
}

/// `ω_t = 1 − exp(−t/τ)`, kept strictly below one.
pub fn warmup(t: u64, tau: f64) -> f64 {
    (-(-(t as f64) / tau).exp_m1()).min(ONE_MINUS_ULP)
}

/// Public hyperparameters of the memory branch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MemoryParams {
    pub alpha: f64,
    pub beta: f64,
    pub xi_max: f64,
    pub eps: f64,
}

/// Everything the memory branch computed for one group at one step.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryState {
    pub weights_hat: Vec<f64>,
    pub nu: Vec<f64>,
    pub d_eff: f64,
    pub gate: f64,
    pub scale: f64,
    pub warmup: f64,
    /// `(1−β)·ω·Γ·Ψ·ν`.
    pub branch: Vec<f64>,
}

impl MemoryState {
    /// No lags available: zero memory, gate and scale.
    pub fn empty(dim: usize, warmup: f64) -> Self {
        Self {
            weights_hat: Vec::new(),
            nu: vec![0.0; dim],
            d_eff: 0.0,
            gate: 0.0,
            scale: 0.0,
            warmup,
            branch: vec![0.0; dim],
        }
    }

    pub fn branch_norm(&self) -> f64 {
        norm2(&self.branch)
    }
}

/// Builds the memory branch for step `t` from the stored history, the
/// group's tempering coefficient and `m_t = min(K−1, t)` available lags.
pub fn build_memory_state(
    history: &ReleaseHistory,
    dim: usize,
    tempering: f64,
    m_t: usize,
    omega: f64,
    params: &MemoryParams,
) -> Result<MemoryState> {
    if m_t == 0 {
        return Ok(MemoryState::empty(dim, omega));
    }
    let kernel = kernel_weights(params.alpha, tempering, m_t)?;
    let nu = memory_vector(history, &kernel.hat)?;
    if nu.len() != dim {
        return Err(structural(format!(
            "stored releases have length {}, group has {dim} parameters",
            nu.len()
        )));
    }
    let mu = history
        .ema_trend()
        .ok_or_else(|| Error::State("memory requested before any release".into()))?;
    let gate = alignment_gate(mu, &nu, params.eps);
    let scale = norm_scale(mu, &nu, params.xi_max, params.eps);
    let factor = (1.0 - params.beta) * omega * gate * scale;
    let branch = nu.iter().map(|v| factor * v).collect();
    Ok(MemoryState {
        d_eff: effective_depth(&kernel.hat),
        weights_hat: kernel.hat,
        nu,
        gate,
        scale,
        warmup: omega,
        branch,
    })
}

/// `‖b‖ / (‖β·s‖ + ε)`.
pub fn memory_ratio(branch: &[f64], clipped_sum: &[f64], beta: f64, eps: f64) -> f64 {
    norm2(branch) / (beta * norm2(clipped_sum) + eps)
}
