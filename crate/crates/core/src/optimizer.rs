//! The private step: clip, sum, mix with the history-only memory branch,
//! release with Gaussian noise, update, record.

use crate::accountant::{
    sigma_eff_joint, sigma_marginal, LedgerMode, PrivacyLedger, RdpOrderGrid, StepRecord,
};
use crate::data::{poisson_sample, Dataset, SampleBatch};
use crate::error::{param, structural, Error, Result};
use crate::memory::{build_memory_state, memory_ratio, warmup, MemoryParams, MemoryState, ReleaseHistory, ReleaseRecord};
use crate::model::{per_example_grads_indexed, ModelState, PerExampleGradient};
use crate::numerics::{gaussian_vector, norm2, RandomStream};
use crate::spectral::{spectral_report, SpectralInterval, SpectralReport, DEFAULT_MIN_TAIL};

/// Hyperparameters of one private training run.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerConfig {
    /// Weight of the current clipped sum; `1` disables memory.
    pub beta: f64,
    /// Fractional order of the memory kernel.
    pub alpha: f64,
    /// Memory window `K`; `K − 1` past releases are kept.
    pub window_k: usize,
    pub learning_rate: f64,
    /// Poisson sampling probability.
    pub q: f64,
    pub interval: SpectralInterval,
    pub c_lambda: f64,
    pub gamma_ema: f64,
    pub tau_warm: f64,
    pub xi_max: f64,
    pub eps_num: f64,
    pub min_tail: usize,
    pub steps: u64,
    pub seed: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            beta: 0.95,
            alpha: 0.7,
            window_k: 4,
            learning_rate: 1.0,
            q: 0.1,
            interval: SpectralInterval::default(),
            c_lambda: 1.0,
            gamma_ema: 0.9,
            tau_warm: 5.0,
            xi_max: 3.0,
            eps_num: 1e-12,
            min_tail: DEFAULT_MIN_TAIL,
            steps: 300,
            seed: 0,
        }
    }
}

impl OptimizerConfig {
    /// Every range violation, in field order.
    pub fn issues(&self) -> Vec<String> {
        let mut out = Vec::new();
        let mut check = |ok: bool, msg: String| {
            if !ok {
                out.push(msg);
            }
        };
        check(self.beta > 0.0 && self.beta <= 1.0, format!("beta must lie in (0, 1], got {}", self.beta));
        check(self.alpha > 0.0 && self.alpha <= 1.0, format!("alpha must lie in (0, 1], got {}", self.alpha));
        check(self.window_k >= 1, format!("window_k must be >= 1, got {}", self.window_k));
        check(
            self.learning_rate > 0.0 && self.learning_rate.is_finite(),
            format!("learning_rate must be positive, got {}", self.learning_rate),
        );
        check(self.q > 0.0 && self.q <= 1.0, format!("q must lie in (0, 1], got {}", self.q));
        check(
            self.interval.rho_min < self.interval.rho_max,
            format!("interval needs rho_min < rho_max, got [{}, {}]", self.interval.rho_min, self.interval.rho_max),
        );
        check(self.c_lambda > 0.0 && self.c_lambda.is_finite(), format!("c_lambda must be positive, got {}", self.c_lambda));
        check(self.gamma_ema > 0.0 && self.gamma_ema <= 1.0, format!("gamma_ema must lie in (0, 1], got {}", self.gamma_ema));
        check(self.tau_warm > 0.0 && self.tau_warm.is_finite(), format!("tau_warm must be positive, got {}", self.tau_warm));
        check(self.xi_max > 0.0 && self.xi_max.is_finite(), format!("xi_max must be positive, got {}", self.xi_max));
        check(self.eps_num > 0.0 && self.eps_num.is_finite(), format!("eps_num must be positive, got {}", self.eps_num));
        check(self.min_tail >= 2, format!("min_tail must be >= 2, got {}", self.min_tail));
        check(self.steps >= 1, "steps must be >= 1".to_string());
        out
    }

    pub fn validate(&self) -> Result<()> {
        let issues = self.issues();
        if issues.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(issues))
        }
    }

    pub fn memory_params(&self) -> MemoryParams {
        MemoryParams {
            alpha: self.alpha,
            beta: self.beta,
            xi_max: self.xi_max,
            eps: self.eps_num,
        }
    }

    /// `M_t = min(K − 1, t)`.
    pub fn available_lags(&self, t: u64) -> usize {
        (self.window_k - 1).min(t.min(usize::MAX as u64) as usize)
    }
}

/// Per-group part of a [`StepTrace`].
#[derive(Debug, Clone, PartialEq)]
pub struct GroupTrace {
    pub group_id: usize,
    pub clipped_sum: Vec<f64>,
    /// Absent at `t = 0`, where no spectral signal is consumed.
    pub spectral: Option<SpectralReport>,
    pub memory: MemoryState,
    /// Carries the query `r`, the noise and the release.
    pub release: ReleaseRecord,
    pub update_norm: f64,
    pub memory_ratio: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepTrace {
    pub step: u64,
    pub batch_size: usize,
    /// FNV-1a over the sampled indices.
    pub mask_hash: u64,
    pub groups: Vec<GroupTrace>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdjacencyProbeResult {
    pub removed_index: usize,
    pub group_id: usize,
    pub delta: f64,
    pub bound: f64,
    pub satisfied: bool,
}

pub(crate) fn mask_hash(indices: &[usize]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &i in indices {
        for b in (i as u64).to_le_bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    h
}

/// `g / max(1, ‖g‖/C)`.
pub fn clip_gradient(g: &PerExampleGradient, clip_norm: f64) -> Result<PerExampleGradient> {
    if clip_norm.is_nan() || clip_norm <= 0.0 {
        return Err(param(format!("clip norm must be positive, got {clip_norm}")));
    }
    if g.flat.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerics(format!("non-finite gradient in group {}", g.group_id)));
    }
    let factor = (norm2(&g.flat) / clip_norm).max(1.0);
    Ok(PerExampleGradient {
        group_id: g.group_id,
        flat: g.flat.iter().map(|v| v / factor).collect(),
    })
}

/// Clipped sums for every group, accumulated in sampled-index order.
pub fn clipped_sums(batch: &SampleBatch, model: &ModelState, data: &Dataset) -> Result<Vec<Vec<f64>>> {
    if batch.mask.len() != data.len() {
        return Err(structural(format!(
            "batch covers {} examples, dataset has {}",
            batch.mask.len(),
            data.len()
        )));
    }
    let mut sums: Vec<Vec<f64>> = model.groups.iter().map(|g| vec![0.0; g.param_count()]).collect();
    for &i in &batch.indices {
        let grads = per_example_grads_indexed(model, data.features(i), data.label(i), i)?;
        for (g, sum) in grads.iter().zip(sums.iter_mut()) {
            let clipped = clip_gradient(g, model.groups[g.group_id].clip_norm)?;
            for (s, v) in sum.iter_mut().zip(&clipped.flat) {
                *s += v;
            }
        }
    }
    Ok(sums)
}

pub fn clipped_sum(batch: &SampleBatch, model: &ModelState, data: &Dataset, group_id: usize) -> Result<Vec<f64>> {
    model.group(group_id)?;
    Ok(clipped_sums(batch, model, data)?.swap_remove(group_id))
}

/// `r = β·s + b`, where `b` already carries the `(1−β)·ω·Γ·Ψ` factor.
pub fn recursive_query(s: &[f64], branch: &[f64], beta: f64) -> Result<Vec<f64>> {
    if s.len() != branch.len() {
        return Err(structural(format!(
            "clipped sum has length {}, memory branch has {}",
            s.len(),
            branch.len()
        )));
    }
    Ok(s.iter().zip(branch).map(|(x, b)| beta * x + b).collect())
}

/// `s̃ = r + N(0, σ²C²I)` with noise drawn from `stream`. The record's step
/// and group come from the stream coordinates.
pub fn private_release(r: Vec<f64>, clip_norm: f64, sigma: f64, stream: RandomStream) -> Result<ReleaseRecord> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(param(format!("noise multiplier must be positive, got {sigma}")));
    }
    if !(clip_norm > 0.0 && clip_norm.is_finite()) {
        return Err(param(format!("clip norm must be positive, got {clip_norm}")));
    }
    let noise = gaussian_vector(stream, r.len(), sigma * clip_norm)?;
    ReleaseRecord::new(stream.step, stream.group as usize, r, noise)
}

/// `θ ← θ − η·s̃/L` for one group.
pub fn apply_update(model: &mut ModelState, group_id: usize, release: &[f64], eta: f64, lot: f64) -> Result<()> {
    if lot.is_nan() || lot <= 0.0 {
        return Err(param(format!("expected lot size must be positive, got {lot}")));
    }
    model
        .group_mut(group_id)?
        .update_with(release, |p, s| p - eta * s / lot)
}

fn check_histories(model: &ModelState, histories: &[ReleaseHistory], t: u64, config: &OptimizerConfig) -> Result<()> {
    if histories.len() != model.num_groups() {
        return Err(Error::State(format!(
            "{} histories for {} parameter groups",
            histories.len(),
            model.num_groups()
        )));
    }
    for (g, h) in histories.iter().enumerate() {
        if h.group_id != g {
            return Err(Error::State(format!("history {g} belongs to group {}", h.group_id)));
        }
        if h.steps_recorded() != t {
            return Err(Error::State(format!(
                "history of group {g} holds {} steps, step {t} requested",
                h.steps_recorded()
            )));
        }
        if h.capacity() != config.window_k - 1 {
            return Err(Error::State(format!(
                "history of group {g} keeps {} releases, window needs {}",
                h.capacity(),
                config.window_k - 1
            )));
        }
    }
    Ok(())
}

/// Spectral report and memory branch of every group at step `t`, computed
/// from `θ_t` and the stored history only.
pub fn memory_branches(
    model: &ModelState,
    config: &OptimizerConfig,
    histories: &[ReleaseHistory],
    t: u64,
) -> Result<Vec<(Option<SpectralReport>, MemoryState)>> {
    check_histories(model, histories, t, config)?;
    let omega = warmup(t, config.tau_warm);
    let m_t = config.available_lags(t);
    let params = config.memory_params();
    model
        .groups
        .iter()
        .zip(histories)
        .map(|(group, history)| {
            let dim = group.param_count();
            if t == 0 {
                return Ok((None, MemoryState::empty(dim, omega)));
            }
            let report = spectral_report(
                group.group_id,
                t,
                &group.weight,
                &config.interval,
                config.c_lambda,
                config.min_tail,
            )?;
            let memory = build_memory_state(history, dim, report.tempering, m_t, omega, &params)?;
            Ok((Some(report), memory))
        })
        .collect()
}

pub fn new_histories(model: &ModelState, config: &OptimizerConfig) -> Result<Vec<ReleaseHistory>> {
    model
        .groups
        .iter()
        .map(|g| ReleaseHistory::new(g.group_id, config.window_k, config.gamma_ema))
        .collect()
}

/// One full step. Model and histories are only modified if every group's
/// release succeeds.
pub fn step(
    model: &mut ModelState,
    data: &Dataset,
    config: &OptimizerConfig,
    histories: &mut [ReleaseHistory],
    t: u64,
) -> Result<StepTrace> {
    let batch = poisson_sample(RandomStream::sampling(config.seed, t), data.len(), config.q)?;
    let memory = memory_branches(model, config, histories, t)?;
    let sums = clipped_sums(&batch, model, data)?;

    let mut next_model = model.clone();
    let mut next_histories = histories.to_vec();
    let mut groups = Vec::with_capacity(model.num_groups());
    for ((group, (spectral, memory)), sum) in model.groups.iter().zip(memory).zip(sums) {
        let g = group.group_id;
        let query = recursive_query(&sum, &memory.branch, config.beta)?;
        let release = private_release(
            query,
            group.clip_norm,
            group.noise_multiplier,
            RandomStream::noise(config.seed, t, g as u64),
        )?;
        apply_update(&mut next_model, g, &release.release, config.learning_rate, batch.expected_lot)?;
        next_histories[g].append(release.clone())?;
        let update_norm = config.learning_rate * norm2(&release.release) / batch.expected_lot;
        groups.push(GroupTrace {
            group_id: g,
            memory_ratio: memory_ratio(&memory.branch, &sum, config.beta, config.eps_num),
            clipped_sum: sum,
            spectral,
            memory,
            release,
            update_norm,
        });
    }
    *model = next_model;
    histories.clone_from_slice(&next_histories);
    Ok(StepTrace {
        step: t,
        batch_size: batch.len(),
        mask_hash: mask_hash(&batch.indices),
        groups,
    })
}

/// Plain group-wise DP-SGD step (no memory), sharing the sampling and noise
/// streams of [`step`].
pub fn reference_dpsgd_step(model: &mut ModelState, data: &Dataset, config: &OptimizerConfig, t: u64) -> Result<StepTrace> {
    let batch = poisson_sample(RandomStream::sampling(config.seed, t), data.len(), config.q)?;
    let sums = clipped_sums(&batch, model, data)?;
    let omega = warmup(t, config.tau_warm);
    let mut next = model.clone();
    let mut groups = Vec::with_capacity(model.num_groups());
    for (group, sum) in model.groups.iter().zip(sums) {
        let g = group.group_id;
        let release = private_release(
            sum.clone(),
            group.clip_norm,
            group.noise_multiplier,
            RandomStream::noise(config.seed, t, g as u64),
        )?;
        apply_update(&mut next, g, &release.release, config.learning_rate, batch.expected_lot)?;
        groups.push(GroupTrace {
            group_id: g,
            clipped_sum: sum.clone(),
            spectral: None,
            memory: MemoryState::empty(sum.len(), omega),
            update_norm: config.learning_rate * norm2(&release.release) / batch.expected_lot,
            release,
            memory_ratio: 0.0,
        });
    }
    *model = next;
    Ok(StepTrace {
        step: t,
        batch_size: batch.len(),
        mask_hash: mask_hash(&batch.indices),
        groups,
    })
}

/// Largest dataset the brute-force adjacency probe accepts.
pub const PROBE_MAX_EXAMPLES: usize = 12;

/// For every sampled example, the change in each group's query when that
/// example is removed, against the bound `β·C`.
pub fn adjacency_probe(
    data: &Dataset,
    mask: &SampleBatch,
    model: &ModelState,
    config: &OptimizerConfig,
    histories: &[ReleaseHistory],
    t: u64,
) -> Result<Vec<AdjacencyProbeResult>> {
    if data.len() > PROBE_MAX_EXAMPLES {
        return Err(param(format!(
            "adjacency probe is limited to {PROBE_MAX_EXAMPLES} examples, got {}",
            data.len()
        )));
    }
    let memory = memory_branches(model, config, histories, t)?;
    let full = clipped_sums(mask, model, data)?;
    let queries: Vec<Vec<f64>> = full
        .iter()
        .zip(&memory)
        .map(|(s, (_, m))| recursive_query(s, &m.branch, config.beta))
        .collect::<Result<_>>()?;

    let mut out = Vec::new();
    for &i in &mask.indices {
        let reduced = clipped_sums(&mask.without(i), model, data)?;
        for (g, (s, (_, m))) in reduced.iter().zip(&memory).enumerate() {
            let r = recursive_query(s, &m.branch, config.beta)?;
            let delta = norm2(
                &queries[g]
                    .iter()
                    .zip(&r)
                    .map(|(a, b)| a - b)
                    .collect::<Vec<_>>(),
            );
            let bound = config.beta * model.groups[g].clip_norm;
            out.push(AdjacencyProbeResult {
                removed_index: i,
                group_id: g,
                delta,
                bound,
                satisfied: delta <= bound + 1e-9,
            });
        }
    }
    Ok(out)
}

/// Model, histories and both privacy ledgers of one run, advanced one step
/// at a time.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: OptimizerConfig,
    pub model: ModelState,
    pub data: Dataset,
    pub histories: Vec<ReleaseHistory>,
    pub joint: PrivacyLedger,
    pub marginal: PrivacyLedger,
    /// When set, steps run plain DP-SGD instead of the memory-augmented rule.
    pub reference_dpsgd: bool,
    sigma_eff: f64,
    sigma_marginal: f64,
    t: u64,
}

impl Trainer {
    pub fn new(config: OptimizerConfig, model: ModelState, data: Dataset, grid: RdpOrderGrid) -> Result<Self> {
        config.validate()?;
        if data.dim() != model.input_dim || data.num_classes() > model.num_classes {
            return Err(structural("dataset does not match the model's input or class count"));
        }
        let sigmas: Vec<f64> = model.groups.iter().map(|g| g.noise_multiplier).collect();
        let sigma_eff = sigma_eff_joint(config.beta, &sigmas)?;
        let min_sigma = sigmas.iter().copied().fold(f64::INFINITY, f64::min);
        let sigma_marginal = sigma_marginal(config.beta, min_sigma)?;
        let histories = new_histories(&model, &config)?;
        Ok(Self {
            config,
            model,
            data,
            histories,
            joint: PrivacyLedger::new(LedgerMode::Joint, grid.clone()),
            marginal: PrivacyLedger::new(LedgerMode::Marginal, grid),
            reference_dpsgd: false,
            sigma_eff,
            sigma_marginal,
            t: 0,
        })
    }

    /// Index of the next step to run.
    pub fn current_step(&self) -> u64 {
        self.t
    }

    pub fn sigma_eff(&self) -> f64 {
        self.sigma_eff
    }

    /// `min_g σ_g / β`, the ratio charged by the marginal ledger.
    pub fn sigma_marginal(&self) -> f64 {
        self.sigma_marginal
    }

    pub fn step(&mut self) -> Result<StepTrace> {
        let t = self.t;
        let trace = if self.reference_dpsgd {
            reference_dpsgd_step(&mut self.model, &self.data, &self.config, t)?
        } else {
            step(&mut self.model, &self.data, &self.config, &mut self.histories, t)?
        };
        let grid = self.joint.grid().clone();
        self.joint.compose(
            StepRecord { step: t, q: self.config.q, sigma_eff: self.sigma_eff },
            &grid,
        )?;
        self.marginal.compose(
            StepRecord { step: t, q: self.config.q, sigma_eff: self.sigma_marginal },
            &grid,
        )?;
        self.t += 1;
        Ok(trace)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_synthetic;
    use crate::model::{init_model, Architecture};

    fn grad(v: Vec<f64>) -> PerExampleGradient {
        PerExampleGradient { group_id: 0, flat: v }
    }

    #[test]
    fn clip_examples() {
        let g = grad(vec![3.0, 4.0]);
        let c = clip_gradient(&g, 2.0).unwrap();
        assert!((norm2(&c.flat) - 2.0).abs() < 1e-15);
        assert!((c.flat[0] - 1.2).abs() < 1e-15 && (c.flat[1] - 1.6).abs() < 1e-15);
        let small = grad(vec![0.6, 0.8]);
        assert_eq!(clip_gradient(&small, 2.0).unwrap(), small);
        assert_eq!(clip_gradient(&grad(vec![0.0; 3]), 1.0).unwrap().flat, vec![0.0; 3]);
        assert!(clip_gradient(&grad(vec![f64::NAN]), 1.0).is_err());
        assert!(clip_gradient(&g, 0.0).is_err());
    }

    #[test]
    fn query_examples() {
        assert_eq!(recursive_query(&[2.0, 0.0], &[0.0, 1.0], 0.5).unwrap(), vec![1.0, 1.0]);
        assert_eq!(recursive_query(&[2.0, -3.0], &[0.0, 0.0], 1.0).unwrap(), vec![2.0, -3.0]);
        assert!(recursive_query(&[1.0], &[1.0, 2.0], 0.5).is_err());
    }

    #[test]
    fn release_examples() {
        let s = RandomStream::noise(1, 4, 0);
        let r = private_release(vec![1.0, 2.0], 1.0, 1e-9, s).unwrap();
        assert!(r.release.iter().zip([1.0, 2.0]).all(|(a, b)| (a - b).abs() < 1e-7));
        assert_eq!(r, private_release(vec![1.0, 2.0], 1.0, 1e-9, s).unwrap());
        assert_eq!(r.step, 4);
        assert!(private_release(vec![1.0], 1.0, 0.0, s).is_err());
        for (i, v) in r.release.iter().enumerate() {
            assert_eq!(*v, r.query[i] + r.noise[i]);
        }
    }

    #[test]
    fn update_examples() {
        let mut m = init_model(RandomStream::init(0), Architecture::Mlp1, 3, 4, 2, &[1.0], &[1.0]).unwrap();
        let before = m.clone();
        apply_update(&mut m, 0, &vec![0.0; 16], 0.5, 3.0).unwrap();
        assert_eq!(m, before);

        let v: Vec<f64> = (0..16).map(|i| i as f64 * 0.25).collect();
        apply_update(&mut m, 0, &v, 1.0, 1.0).unwrap();
        let expected: Vec<f64> = before.groups[0].flat().iter().zip(&v).map(|(p, d)| p - d).collect();
        assert_eq!(m.groups[0].flat(), expected);
        assert_eq!(m.groups[1], before.groups[1]);
        assert!(apply_update(&mut m, 0, &v[..3], 1.0, 1.0).is_err());
        assert!(apply_update(&mut m, 0, &v, 1.0, 0.0).is_err());
    }

    #[test]
    fn empty_batch_sum_is_zero() {
        let data = gen_synthetic(RandomStream::data(0), 10, 3, 2).unwrap();
        let m = init_model(RandomStream::init(0), Architecture::LogReg, 3, 0, 2, &[1.0], &[1.0]).unwrap();
        let batch = SampleBatch::from_mask(vec![false; 10], 0.1).unwrap();
        assert_eq!(clipped_sum(&batch, &m, &data, 0).unwrap(), vec![0.0; 8]);
    }

    #[test]
    fn config_issues_are_collected() {
        let c = OptimizerConfig { beta: 0.0, alpha: 2.0, q: 0.0, ..Default::default() };
        let issues = c.issues();
        assert_eq!(issues.len(), 3, "{issues:?}");
        assert!(matches!(c.validate(), Err(Error::Config(v)) if v.len() == 3));
    }

    #[test]
    fn step_rejects_inconsistent_history_without_mutation() {
        let data = gen_synthetic(RandomStream::data(0), 20, 3, 2).unwrap();
        let mut m = init_model(RandomStream::init(0), Architecture::LogReg, 3, 0, 2, &[1.0], &[1.0]).unwrap();
        let config = OptimizerConfig::default();
        let mut h = new_histories(&m, &config).unwrap();
        let before = m.clone();
        assert!(matches!(step(&mut m, &data, &config, &mut h, 3), Err(Error::State(_))));
        assert_eq!(m, before);
        assert_eq!(h[0].steps_recorded(), 0);
    }

    #[test]
    fn probe_rejects_large_datasets() {
        let data = gen_synthetic(RandomStream::data(0), 20, 3, 2).unwrap();
        let m = init_model(RandomStream::init(0), Architecture::LogReg, 3, 0, 2, &[1.0], &[1.0]).unwrap();
        let config = OptimizerConfig::default();
        let h = new_histories(&m, &config).unwrap();
        let batch = SampleBatch::from_mask(vec![true; 20], 1.0).unwrap();
        assert!(adjacency_probe(&data, &batch, &m, &config, &h, 0).is_err());
    }
}
