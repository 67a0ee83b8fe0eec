//! Configuration, orchestration and CSV reporting.
//!
//! Configuration is a flat `key=value` text file; command-line `key=value`
//! pairs override it. Output files, one per concern, go to
//! `<out_dir>/<label>/`:
//!
//! | file              | rows                                                |
//! |-------------------|-----------------------------------------------------|
//! | `trace.csv`       | per step and group: batch, norms of s, r, Z, s̃      |
//! | `diagnostics.csv` | per step and group: memory branch and spectrum      |
//! | `ledger.csv`      | per step: joint and marginal `(ε, δ)`               |
//! | `report.csv`      | per step and group: loss, accuracy and diagnostics  |
//! | `summary.csv`     | one row of run means                                |
//! | `failure.csv`     | only when a step failed                             |
//!
//! Floats are written with nine significant digits.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use crate::accountant::{
    epsilon_curve, sigma_eff_joint, sigma_marginal, RdpOrderGrid, DEFAULT_DELTA, MARGINAL_LABEL,
};
use crate::data::{gen_synthetic, load_idx, Dataset, SampleBatch};
use crate::error::{param, Error, Result};
use crate::memory::{ReleaseHistory, ReleaseRecord};
use crate::model::{evaluate, init_model, Architecture, ModelState};
use crate::numerics::{gaussian_vector, norm2, DenseMatrix, RandomStream};
use crate::optimizer::{adjacency_probe, new_histories, AdjacencyProbeResult, OptimizerConfig, StepTrace, Trainer};
use crate::spectral::{spectral_report, SpectralInterval, SpectralReport};

/// Environment variable that overrides the configured output directory.
pub const OUT_DIR_ENV: &str = "SMA_DPSGD_OUT_DIR";

/// Nine significant digits, re-parseable by `f64::from_str`.
pub fn fmt_f(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.8e}")
    } else {
        x.to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunMode {
    Sma,
    ReferenceDpsgd,
}

impl RunMode {
    pub fn as_str(self) -> &'static str {
        match self {
            RunMode::Sma => "sma",
            RunMode::ReferenceDpsgd => "reference-dpsgd",
        }
    }
}

impl FromStr for RunMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sma" => Ok(RunMode::Sma),
            "reference-dpsgd" => Ok(RunMode::ReferenceDpsgd),
            other => Err(param(format!("unknown mode {other:?} (expected sma or reference-dpsgd)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DatasetSource {
    /// Gaussian blobs; `n` training rows plus `eval_n` held-out rows.
    Synthetic {
        n: usize,
        d: usize,
        classes: usize,
        eval_n: usize,
    },
    Idx {
        images: PathBuf,
        labels: PathBuf,
        subset: Option<usize>,
        eval_images: Option<PathBuf>,
        eval_labels: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub optimizer: OptimizerConfig,
    pub dataset: DatasetSource,
    pub architecture: Architecture,
    pub hidden_dim: usize,
    pub clip_norms: Vec<f64>,
    pub sigmas: Vec<f64>,
    pub delta: f64,
    pub grid: RdpOrderGrid,
    pub out_dir: PathBuf,
    pub label: String,
    pub mode: RunMode,
    /// Evaluate every this many steps (and always at the last step).
    pub eval_every: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerConfig::default(),
            dataset: DatasetSource::Synthetic {
                n: 2000,
                d: 20,
                classes: 2,
                eval_n: 500,
            },
            architecture: Architecture::Mlp1,
            hidden_dim: 16,
            clip_norms: vec![1.0],
            sigmas: vec![1.0],
            delta: DEFAULT_DELTA,
            grid: RdpOrderGrid::default(),
            out_dir: PathBuf::from("runs"),
            label: "run".into(),
            mode: RunMode::Sma,
            eval_every: 1,
        }
    }
}

fn parse_list(value: &str) -> std::result::Result<Vec<f64>, String> {
    value
        .split(',')
        .map(|v| v.trim().parse::<f64>().map_err(|_| format!("cannot parse {v:?} as a number")))
        .collect()
}

/// `2-64` for a range, or a comma list.
pub fn parse_orders(value: &str) -> Result<RdpOrderGrid> {
    let bad = || param(format!("cannot parse order grid {value:?}"));
    if let Some((lo, hi)) = value.split_once('-') {
        let lo = lo.trim().parse().map_err(|_| bad())?;
        let hi = hi.trim().parse().map_err(|_| bad())?;
        RdpOrderGrid::range(lo, hi)
    } else {
        let orders = value
            .split(',')
            .map(|v| v.trim().parse().map_err(|_| bad()))
            .collect::<Result<Vec<u32>>>()?;
        RdpOrderGrid::new(orders)
    }
}

/// Splits `key=value` lines, ignoring blanks and `#` comments.
pub fn parse_pairs(text: &str) -> std::result::Result<Vec<(String, String)>, Vec<String>> {
    let mut pairs = Vec::new();
    let mut errors = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        match line.split_once('=') {
            Some((k, v)) => pairs.push((k.trim().to_owned(), v.trim().to_owned())),
            None => errors.push(format!("line {}: expected key=value, got {line:?}", n + 1)),
        }
    }
    if errors.is_empty() {
        Ok(pairs)
    } else {
        Err(errors)
    }
}

impl RunConfig {
    /// Applies `key=value` settings on top of `self`, collecting every error.
    pub fn apply<I, K, V>(&mut self, pairs: I) -> std::result::Result<(), Vec<String>>
    where
        I: IntoIterator<Item = (K, V)>,
        K: AsRef<str>,
        V: AsRef<str>,
    {
        let mut errors = Vec::new();
        let mut syn = match &self.dataset {
            DatasetSource::Synthetic { n, d, classes, eval_n } => (*n, *d, *classes, *eval_n),
            _ => (2000, 20, 2, 500),
        };
        let mut idx = match &self.dataset {
            DatasetSource::Idx { images, labels, subset, eval_images, eval_labels } => (
                Some(images.clone()),
                Some(labels.clone()),
                *subset,
                eval_images.clone(),
                eval_labels.clone(),
            ),
            _ => (None, None, None, None, None),
        };
        let mut use_idx = matches!(self.dataset, DatasetSource::Idx { .. });
        let (mut rho_min, mut rho_max) = (self.optimizer.interval.rho_min, self.optimizer.interval.rho_max);

        for (key, value) in pairs {
            let (key, value) = (key.as_ref(), value.as_ref());
            macro_rules! num {
                ($t:ty) => {
                    match value.parse::<$t>() {
                        Ok(v) => Some(v),
                        Err(_) => {
                            errors.push(format!("{key}: cannot parse {value:?}"));
                            None
                        }
                    }
                };
            }
            let o = &mut self.optimizer;
            match key {
                "beta" => o.beta = num!(f64).unwrap_or(o.beta),
                "alpha" => o.alpha = num!(f64).unwrap_or(o.alpha),
                "window_k" | "k" => o.window_k = num!(usize).unwrap_or(o.window_k),
                "learning_rate" | "lr" => o.learning_rate = num!(f64).unwrap_or(o.learning_rate),
                "q" => o.q = num!(f64).unwrap_or(o.q),
                "rho_min" => rho_min = num!(f64).unwrap_or(rho_min),
                "rho_max" => rho_max = num!(f64).unwrap_or(rho_max),
                "c_lambda" => o.c_lambda = num!(f64).unwrap_or(o.c_lambda),
                "gamma_ema" => o.gamma_ema = num!(f64).unwrap_or(o.gamma_ema),
                "tau_warm" => o.tau_warm = num!(f64).unwrap_or(o.tau_warm),
                "xi_max" => o.xi_max = num!(f64).unwrap_or(o.xi_max),
                "eps_num" => o.eps_num = num!(f64).unwrap_or(o.eps_num),
                "min_tail" => o.min_tail = num!(usize).unwrap_or(o.min_tail),
                "steps" => o.steps = num!(u64).unwrap_or(o.steps),
                "seed" => o.seed = num!(u64).unwrap_or(o.seed),
                "dataset" => match value {
                    "synthetic" => use_idx = false,
                    "idx" => use_idx = true,
                    _ => errors.push(format!("dataset: expected synthetic or idx, got {value:?}")),
                },
                "n" => syn.0 = num!(usize).unwrap_or(syn.0),
                "d" => syn.1 = num!(usize).unwrap_or(syn.1),
                "classes" => syn.2 = num!(usize).unwrap_or(syn.2),
                "eval_n" => syn.3 = num!(usize).unwrap_or(syn.3),
                "idx_images" => idx.0 = Some(PathBuf::from(value)),
                "idx_labels" => idx.1 = Some(PathBuf::from(value)),
                "subset" => idx.2 = num!(usize),
                "idx_eval_images" => idx.3 = Some(PathBuf::from(value)),
                "idx_eval_labels" => idx.4 = Some(PathBuf::from(value)),
                "arch" => match value.parse() {
                    Ok(a) => self.architecture = a,
                    Err(e) => errors.push(format!("arch: {e}")),
                },
                "hidden" => self.hidden_dim = num!(usize).unwrap_or(self.hidden_dim),
                "clip_norms" | "clip_norm" => match parse_list(value) {
                    Ok(v) => self.clip_norms = v,
                    Err(e) => errors.push(format!("{key}: {e}")),
                },
                "sigmas" | "sigma" => match parse_list(value) {
                    Ok(v) => self.sigmas = v,
                    Err(e) => errors.push(format!("{key}: {e}")),
                },
                "delta" => self.delta = num!(f64).unwrap_or(self.delta),
                "orders" => match parse_orders(value) {
                    Ok(g) => self.grid = g,
                    Err(e) => errors.push(format!("orders: {e}")),
                },
                "out_dir" => self.out_dir = PathBuf::from(value),
                "label" => self.label = value.to_owned(),
                "mode" => match value.parse() {
                    Ok(m) => self.mode = m,
                    Err(e) => errors.push(format!("mode: {e}")),
                },
                "eval_every" => self.eval_every = num!(u64).unwrap_or(self.eval_every),
                _ => errors.push(format!("unknown configuration key {key:?}")),
            }
        }
        self.optimizer.interval = SpectralInterval { rho_min, rho_max };
        self.dataset = if use_idx {
            match (idx.0, idx.1) {
                (Some(images), Some(labels)) => DatasetSource::Idx {
                    images,
                    labels,
                    subset: idx.2,
                    eval_images: idx.3,
                    eval_labels: idx.4,
                },
                _ => {
                    errors.push("dataset=idx needs idx_images and idx_labels".into());
                    self.dataset.clone()
                }
            }
        } else {
            DatasetSource::Synthetic { n: syn.0, d: syn.1, classes: syn.2, eval_n: syn.3 }
        };
        if errors.is_empty() {
            Ok(())
        } else {
            Err(errors)
        }
    }

    /// Defaults, then the config file, then [`OUT_DIR_ENV`], then overrides.
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut cfg = Self::default();
        let mut errors = Vec::new();
        if let Some(path) = file {
            match fs::read_to_string(path) {
                Ok(text) => match parse_pairs(&text) {
                    Ok(pairs) => errors.extend(cfg.apply(pairs).err().unwrap_or_default()),
                    Err(e) => errors.extend(e),
                },
                Err(e) => errors.push(format!("cannot read config {}: {e}", path.display())),
            }
        }
        if let Ok(dir) = std::env::var(OUT_DIR_ENV) {
            if !dir.is_empty() {
                cfg.out_dir = PathBuf::from(dir);
            }
        }
        match parse_pairs(&overrides.join("\n")) {
            Ok(pairs) => errors.extend(cfg.apply(pairs).err().unwrap_or_default()),
            Err(e) => errors.extend(e),
        }
        errors.extend(cfg.issues());
        if errors.is_empty() {
            Ok(cfg)
        } else {
            Err(Error::Config(errors))
        }
    }

    pub fn issues(&self) -> Vec<String> {
        let mut out = self.optimizer.issues();
        let groups = self.architecture.num_groups();
        for (name, v) in [("clip_norms", &self.clip_norms), ("sigmas", &self.sigmas)] {
            if v.len() != 1 && v.len() != groups {
                out.push(format!("{name}: expected 1 or {groups} values, got {}", v.len()));
            }
            if v.iter().any(|x| !(*x > 0.0 && x.is_finite())) {
                out.push(format!("{name}: values must be positive and finite"));
            }
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            out.push(format!("delta must lie in (0, 1), got {}", self.delta));
        }
        if self.architecture == Architecture::Mlp1 && self.hidden_dim == 0 {
            out.push("hidden must be positive for mlp1".into());
        }
        if self.eval_every == 0 {
            out.push("eval_every must be >= 1".into());
        }
        if self.label.is_empty() || self.label.contains(['/', '\\']) {
            out.push(format!("label must be a non-empty file name, got {:?}", self.label));
        }
        match &self.dataset {
            DatasetSource::Synthetic { n, d, classes, .. } => {
                if *n == 0 || *d == 0 {
                    out.push("synthetic dataset needs n >= 1 and d >= 1".into());
                }
                if *classes < 2 || *classes > 2 * *d {
                    out.push(format!("classes must lie in [2, 2*d], got {classes}"));
                }
            }
            DatasetSource::Idx { images, labels, eval_images, eval_labels, subset } => {
                for p in [Some(images), Some(labels), eval_images.as_ref(), eval_labels.as_ref()]
                    .into_iter()
                    .flatten()
                {
                    if !p.exists() {
                        out.push(format!("file not found: {}", p.display()));
                    }
                }
                if eval_images.is_some() != eval_labels.is_some() {
                    out.push("idx_eval_images and idx_eval_labels must be given together".into());
                }
                if *subset == Some(0) {
                    out.push("subset must be positive".into());
                }
            }
        }
        out
    }

    pub fn run_dir(&self) -> PathBuf {
        self.out_dir.join(&self.label)
    }

    /// Training and evaluation datasets.
    pub fn load_data(&self) -> Result<(Dataset, Dataset)> {
        match &self.dataset {
            DatasetSource::Synthetic { n, d, classes, eval_n } => {
                let all = gen_synthetic(RandomStream::data(self.optimizer.seed), n + eval_n, *d, *classes)?;
                if *eval_n == 0 {
                    Ok((all.clone(), all))
                } else {
                    all.split_at(*n)
                }
            }
            DatasetSource::Idx { images, labels, subset, eval_images, eval_labels } => {
                let train = load_idx(images, labels, *subset)?;
                let eval = match (eval_images, eval_labels) {
                    (Some(i), Some(l)) => load_idx(i, l, None)?,
                    _ => train.clone(),
                };
                Ok((train, eval))
            }
        }
    }

    pub fn build_model(&self, data: &Dataset) -> Result<ModelState> {
        init_model(
            RandomStream::init(self.optimizer.seed),
            self.architecture,
            data.dim(),
            self.hidden_dim,
            data.num_classes(),
            &self.clip_norms,
            &self.sigmas,
        )
    }
}

/// One row of `report.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub step: u64,
    pub group_id: usize,
    pub epoch: f64,
    pub train_loss: f64,
    pub eval_accuracy: f64,
    pub d_eff: f64,
    pub memory_ratio: f64,
    pub rho: f64,
    pub lambda: f64,
    pub epsilon_joint: f64,
    pub epsilon_marginal: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub label: String,
    pub steps_completed: u64,
    pub mean_d_eff: f64,
    pub mean_memory_ratio: f64,
    pub final_accuracy: f64,
    pub final_loss: f64,
    pub epsilon_joint: f64,
    pub epsilon_marginal: f64,
    pub spectral_invalid_fraction: f64,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub rows: Vec<ReportRow>,
    pub summary: RunSummary,
    /// Sampled-mask hash per step.
    pub mask_hashes: Vec<u64>,
    /// Spectral reports of every step after the first.
    pub spectral: Vec<SpectralReport>,
    /// Largest `‖b‖ / ((1−β)·ω·‖μ‖)` seen; at most 1 up to rounding.
    pub max_branch_bound_ratio: f64,
    pub failure: Option<String>,
    pub final_model: ModelState,
}

struct Outputs {
    trace: csv::Writer<fs::File>,
    diagnostics: csv::Writer<fs::File>,
    ledger: csv::Writer<fs::File>,
    report: csv::Writer<fs::File>,
}

impl Outputs {
    fn create(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let _ = fs::remove_file(dir.join("failure.csv"));
        let open = |name: &str, header: &[&str]| -> Result<csv::Writer<fs::File>> {
            let mut w = csv::Writer::from_path(dir.join(name))?;
            w.write_record(header)?;
            Ok(w)
        };
        Ok(Self {
            trace: open("trace.csv", TRACE_HEADER)?,
            diagnostics: open("diagnostics.csv", DIAGNOSTICS_HEADER)?,
            ledger: open("ledger.csv", LEDGER_HEADER)?,
            report: open("report.csv", REPORT_HEADER)?,
        })
    }

    fn flush(&mut self) -> Result<()> {
        self.trace.flush()?;
        self.diagnostics.flush()?;
        self.ledger.flush()?;
        self.report.flush()?;
        Ok(())
    }
}

pub const TRACE_HEADER: &[&str] = &[
    "step", "mode", "group_id", "batch_size", "mask_hash", "clipped_norm", "query_norm",
    "noise_norm", "release_norm", "update_norm", "param_norm",
];
pub const DIAGNOSTICS_HEADER: &[&str] = &[
    "step", "group_id", "d_eff", "gate", "scale", "warmup", "branch_norm", "memory_ratio", "rho",
    "deviation", "tempering", "spectral_valid",
];
pub const LEDGER_HEADER: &[&str] = &[
    "step", "q", "sigma_eff", "epsilon_joint", "best_order_joint", "sigma_marginal",
    "epsilon_marginal", "best_order_marginal", "marginal_label",
];
pub const REPORT_HEADER: &[&str] = &[
    "step", "group_id", "epoch", "train_loss", "eval_accuracy", "d_eff", "memory_ratio", "rho",
    "lambda", "epsilon_joint", "epsilon_marginal",
];
pub const SUMMARY_HEADER: &[&str] = &[
    "label", "steps_completed", "mean_d_eff", "mean_memory_ratio", "final_accuracy", "final_loss",
    "epsilon_joint", "epsilon_marginal", "spectral_invalid_fraction", "wall_seconds", "failure",
];

fn write_trace(out: &mut Outputs, mode: RunMode, trace: &StepTrace, model: &ModelState) -> Result<()> {
    for g in &trace.groups {
        out.trace.write_record([
            trace.step.to_string(),
            mode.as_str().to_owned(),
            g.group_id.to_string(),
            trace.batch_size.to_string(),
            format!("{:016x}", trace.mask_hash),
            fmt_f(norm2(&g.clipped_sum)),
            fmt_f(norm2(&g.release.query)),
            fmt_f(norm2(&g.release.noise)),
            fmt_f(norm2(&g.release.release)),
            fmt_f(g.update_norm),
            fmt_f(norm2(&model.groups[g.group_id].flat())),
        ])?;
        let (rho, dev, temp, valid) = match &g.spectral {
            Some(s) => (s.rho, s.deviation, s.tempering, s.valid.to_string()),
            None => (f64::NAN, f64::NAN, f64::NAN, String::new()),
        };
        out.diagnostics.write_record([
            trace.step.to_string(),
            g.group_id.to_string(),
            fmt_f(g.memory.d_eff),
            fmt_f(g.memory.gate),
            fmt_f(g.memory.scale),
            fmt_f(g.memory.warmup),
            fmt_f(g.memory.branch_norm()),
            fmt_f(g.memory_ratio),
            fmt_f(rho),
            fmt_f(dev),
            fmt_f(temp),
            valid,
        ])?;
    }
    Ok(())
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

fn write_summary(path: &Path, summaries: &[(RunSummary, Option<String>)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(SUMMARY_HEADER)?;
    for (s, failure) in summaries {
        w.write_record([
            s.label.clone(),
            s.steps_completed.to_string(),
            fmt_f(s.mean_d_eff),
            fmt_f(s.mean_memory_ratio),
            fmt_f(s.final_accuracy),
            fmt_f(s.final_loss),
            fmt_f(s.epsilon_joint),
            fmt_f(s.epsilon_marginal),
            fmt_f(s.spectral_invalid_fraction),
            fmt_f(s.wall_seconds),
            failure.clone().unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Runs `steps` private steps and writes every CSV. Configuration errors are
/// returned before any compute; a failure mid-run leaves the CSVs written so
/// far, adds `failure.csv`, and is reported in [`RunReport::failure`].
pub fn run_train(config: &RunConfig) -> Result<RunReport> {
    let issues = config.issues();
    if !issues.is_empty() {
        return Err(Error::Config(issues));
    }
    let started = Instant::now();
    let (train, eval) = config.load_data()?;
    let model = config.build_model(&train)?;
    let mut trainer = Trainer::new(config.optimizer.clone(), model, train, config.grid.clone())?;
    trainer.reference_dpsgd = config.mode == RunMode::ReferenceDpsgd;

    let dir = config.run_dir();
    let mut out = Outputs::create(&dir)?;
    let opt = &config.optimizer;
    let beta = opt.beta;
    let mut rows = Vec::new();
    let mut mask_hashes = Vec::new();
    let mut spectral = Vec::new();
    let mut failure = None;
    let mut last_eval = (f64::NAN, f64::NAN);
    let mut max_bound_ratio: f64 = 0.0;
    let mut prev_trends: Vec<Option<Vec<f64>>> =
        trainer.histories.iter().map(|h| h.ema_trend().map(<[f64]>::to_vec)).collect();

    for t in 0..opt.steps {
        let trace = match trainer.step() {
            Ok(tr) => tr,
            Err(e) => {
                log::error!("step {t} failed: {e}");
                failure = Some(format!("step {t}: {e}"));
                break;
            }
        };
        mask_hashes.push(trace.mask_hash);
        let joint = trainer.joint.rdp_to_dp(config.delta)?;
        let marginal = trainer.marginal.rdp_to_dp(config.delta)?;
        out.ledger.write_record([
            t.to_string(),
            fmt_f(opt.q),
            fmt_f(trainer.sigma_eff()),
            fmt_f(joint.epsilon),
            joint.best_order.to_string(),
            fmt_f(trainer.sigma_marginal()),
            fmt_f(marginal.epsilon),
            marginal.best_order.to_string(),
            MARGINAL_LABEL.to_owned(),
        ])?;
        write_trace(&mut out, config.mode, &trace, &trainer.model)?;

        if (t + 1) % config.eval_every == 0 || t + 1 == opt.steps {
            let train_eval = evaluate(&trainer.model, &trainer.data)?;
            let eval_eval = evaluate(&trainer.model, &eval)?;
            last_eval = (train_eval.loss, eval_eval.accuracy);
            if !train_eval.loss.is_finite() {
                failure = Some(format!("step {t}: training loss is not finite"));
            }
        }
        for g in &trace.groups {
            // ‖b‖ ≤ (1−β)·ω·‖μ_{t−1}‖, with μ_{t−1} the trend before this step.
            if let Some(mu) = &prev_trends[g.group_id] {
                let cap = (1.0 - beta) * g.memory.warmup * norm2(mu);
                let b = g.memory.branch_norm();
                if b > 0.0 {
                    max_bound_ratio = max_bound_ratio.max(if cap > 0.0 { b / cap } else { f64::INFINITY });
                }
            }
            if let Some(s) = &g.spectral {
                spectral.push(s.clone());
            }
            let (rho, lambda) = g.spectral.as_ref().map_or((f64::NAN, f64::NAN), |s| (s.rho, s.tempering));
            let row = ReportRow {
                step: t,
                group_id: g.group_id,
                epoch: t as f64 * opt.q,
                train_loss: last_eval.0,
                eval_accuracy: last_eval.1,
                d_eff: g.memory.d_eff,
                memory_ratio: g.memory_ratio,
                rho,
                lambda,
                epsilon_joint: joint.epsilon,
                epsilon_marginal: marginal.epsilon,
            };
            out.report.write_record([
                row.step.to_string(),
                row.group_id.to_string(),
                fmt_f(row.epoch),
                fmt_f(row.train_loss),
                fmt_f(row.eval_accuracy),
                fmt_f(row.d_eff),
                fmt_f(row.memory_ratio),
                fmt_f(row.rho),
                fmt_f(row.lambda),
                fmt_f(row.epsilon_joint),
                fmt_f(row.epsilon_marginal),
            ])?;
            rows.push(row);
        }
        prev_trends = trainer.histories.iter().map(|h| h.ema_trend().map(<[f64]>::to_vec)).collect();
        if failure.is_some() {
            break;
        }
    }
    out.flush()?;

    let final_eval = evaluate(&trainer.model, &eval)?;
    let invalid = spectral.iter().filter(|s| !s.valid).count();
    let summary = RunSummary {
        label: config.label.clone(),
        steps_completed: trainer.current_step(),
        mean_d_eff: mean(rows.iter().map(|r| r.d_eff)),
        mean_memory_ratio: mean(rows.iter().map(|r| r.memory_ratio)),
        final_accuracy: final_eval.accuracy,
        final_loss: final_eval.loss,
        epsilon_joint: trainer.joint.rdp_to_dp(config.delta)?.epsilon,
        epsilon_marginal: trainer.marginal.rdp_to_dp(config.delta)?.epsilon,
        spectral_invalid_fraction: if spectral.is_empty() { 0.0 } else { invalid as f64 / spectral.len() as f64 },
        wall_seconds: started.elapsed().as_secs_f64(),
    };
    write_summary(&dir.join("summary.csv"), &[(summary.clone(), failure.clone())])?;
    if let Some(msg) = &failure {
        let mut w = csv::Writer::from_path(dir.join("failure.csv"))?;
        w.write_record(["step", "message"])?;
        w.write_record([trainer.current_step().to_string(), msg.clone()])?;
        w.flush()?;
    }
    Ok(RunReport {
        rows,
        summary,
        mask_hashes,
        spectral,
        max_branch_bound_ratio: max_bound_ratio,
        failure,
        final_model: trainer.model,
    })
}

/// Outcome of one sweep arm.
#[derive(Debug, Clone)]
pub struct SweepArm {
    pub label: String,
    pub result: std::result::Result<RunReport, String>,
}

#[derive(Debug, Clone, Default)]
pub struct SweepReport {
    pub arms: Vec<SweepArm>,
    pub warnings: Vec<String>,
    pub csv_path: Option<PathBuf>,
}

fn run_arm(config: &RunConfig) -> SweepArm {
    let result = match run_train(config) {
        Ok(r) => match &r.failure {
            Some(f) => {
                log::warn!("arm {} failed: {f}", config.label);
                Ok(r)
            }
            None => Ok(r),
        },
        Err(e) => {
            log::warn!("arm {} failed: {e}", config.label);
            Err(e.to_string())
        }
    };
    SweepArm {
        label: config.label.clone(),
        result,
    }
}

pub const SWEEP_BETA_HEADER: &[&str] = &[
    "beta", "step", "epoch", "eval_accuracy", "epsilon_joint", "epsilon_marginal", "marginal_label",
    "mask_hash", "status",
];

/// One run per `β`, sharing seeds (and therefore sampling masks).
pub fn run_sweep_beta(config: &RunConfig, betas: &[f64]) -> Result<SweepReport> {
    let mut report = SweepReport::default();
    if betas.is_empty() {
        let msg = "sweep-beta called with an empty beta list; nothing to do".to_string();
        log::warn!("{msg}");
        report.warnings.push(msg);
        return Ok(report);
    }
    if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b <= 1.0)) {
        return Err(Error::Config(vec![format!("beta must lie in (0, 1], got {b}")]));
    }
    let issues = config.issues();
    if !issues.is_empty() {
        return Err(Error::Config(issues));
    }
    fs::create_dir_all(config.run_dir())?;
    let path = config.run_dir().join("sweep_beta.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(SWEEP_BETA_HEADER)?;
    for &beta in betas {
        let mut arm_cfg = config.clone();
        arm_cfg.optimizer.beta = beta;
        arm_cfg.out_dir = config.run_dir();
        arm_cfg.label = format!("beta-{beta}");
        let arm = run_arm(&arm_cfg);
        match &arm.result {
            Ok(r) => {
                let status = r.failure.clone().unwrap_or_else(|| "ok".into());
                for row in r.rows.iter().filter(|row| row.group_id == 0) {
                    w.write_record([
                        fmt_f(beta),
                        row.step.to_string(),
                        fmt_f(row.epoch),
                        fmt_f(row.eval_accuracy),
                        fmt_f(row.epsilon_joint),
                        fmt_f(row.epsilon_marginal),
                        MARGINAL_LABEL.to_owned(),
                        format!("{:016x}", r.mask_hashes[row.step as usize]),
                        status.clone(),
                    ])?;
                }
            }
            Err(e) => {
                w.write_record([fmt_f(beta), String::new(), String::new(), String::new(), String::new(), String::new(), MARGINAL_LABEL.to_owned(), String::new(), format!("error: {e}")])?;
            }
        }
        report.arms.push(arm);
    }
    w.flush()?;
    report.csv_path = Some(path);
    Ok(report)
}

pub const SWEEP_INTERVAL_HEADER: &[&str] = &[
    "rho_min", "rho_max", "mean_d_eff", "mean_memory_ratio", "final_accuracy", "observed_rho_min",
    "observed_rho_max", "spectral_invalid_fraction", "status",
];

/// One run per spectral interval, summarized as mean `D_eff` and mean memory ratio.
pub fn run_sweep_interval(config: &RunConfig, intervals: &[SpectralInterval]) -> Result<SweepReport> {
    let mut report = SweepReport::default();
    if intervals.is_empty() {
        let msg = "sweep-interval called with an empty interval list; nothing to do".to_string();
        log::warn!("{msg}");
        report.warnings.push(msg);
        return Ok(report);
    }
    let mut issues = config.issues();
    for i in intervals {
        if SpectralInterval::new(i.rho_min, i.rho_max).is_err() {
            issues.push(format!("invalid interval [{}, {}]", i.rho_min, i.rho_max));
        }
    }
    if !issues.is_empty() {
        return Err(Error::Config(issues));
    }
    fs::create_dir_all(config.run_dir())?;
    let path = config.run_dir().join("sweep_interval.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(SWEEP_INTERVAL_HEADER)?;
    for interval in intervals {
        let mut arm_cfg = config.clone();
        arm_cfg.optimizer.interval = *interval;
        arm_cfg.out_dir = config.run_dir();
        arm_cfg.label = format!("interval-{}-{}", interval.rho_min, interval.rho_max);
        let arm = run_arm(&arm_cfg);
        match &arm.result {
            Ok(r) => {
                let (lo, hi) = observed_rho_range(&r.spectral);
                w.write_record([
                    fmt_f(interval.rho_min),
                    fmt_f(interval.rho_max),
                    fmt_f(r.summary.mean_d_eff),
                    fmt_f(r.summary.mean_memory_ratio),
                    fmt_f(r.summary.final_accuracy),
                    fmt_f(lo),
                    fmt_f(hi),
                    fmt_f(r.summary.spectral_invalid_fraction),
                    r.failure.clone().unwrap_or_else(|| "ok".into()),
                ])?;
            }
            Err(e) => {
                let nan = fmt_f(f64::NAN);
                w.write_record([fmt_f(interval.rho_min), fmt_f(interval.rho_max), nan.clone(), nan.clone(), nan.clone(), nan.clone(), nan.clone(), nan, format!("error: {e}")])?;
            }
        }
        report.arms.push(arm);
    }
    w.flush()?;
    report.csv_path = Some(path);
    Ok(report)
}

/// Smallest and largest valid exponent in a run; `NaN` if none.
pub fn observed_rho_range(reports: &[SpectralReport]) -> (f64, f64) {
    reports
        .iter()
        .filter(|s| s.valid)
        .fold((f64::NAN, f64::NAN), |(lo, hi), s| (lo.min(s.rho), hi.max(s.rho)))
}

/// Arguments of the `accountant` subcommand.
#[derive(Debug, Clone, PartialEq)]
pub struct AccountantArgs {
    pub q: f64,
    /// One value per group; a single value is repeated `groups` times.
    pub sigmas: Vec<f64>,
    pub beta: f64,
    pub groups: usize,
    pub steps: u64,
    pub delta: f64,
    pub grid: RdpOrderGrid,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AccountantRow {
    pub step: u64,
    pub epsilon_joint: f64,
    pub epsilon_marginal: f64,
    pub best_order: u32,
}

pub const ACCOUNTANT_HEADER: &[&str] = &["step", "epsilon_joint", "epsilon_marginal", "best_order", "marginal_label"];

impl AccountantArgs {
    pub fn issues(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !(0.0..=1.0).contains(&self.q) {
            out.push(format!("--q must lie in [0, 1], got {}", self.q));
        }
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            out.push(format!("--beta must lie in (0, 1], got {}", self.beta));
        }
        if self.groups == 0 {
            out.push("--groups must be >= 1".into());
        }
        if self.sigmas.len() != 1 && self.sigmas.len() != self.groups {
            out.push(format!(
                "--sigmas lists {} values for {} groups",
                self.sigmas.len(),
                self.groups
            ));
        }
        if self.sigmas.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            out.push("noise multipliers must be positive".into());
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            out.push(format!("--delta must lie in (0, 1), got {}", self.delta));
        }
        out
    }

    fn group_sigmas(&self) -> Vec<f64> {
        if self.sigmas.len() == 1 {
            vec![self.sigmas[0]; self.groups]
        } else {
            self.sigmas.clone()
        }
    }
}

/// Joint and marginal `ε` after each step; row 0 is the empty composition.
/// The marginal column uses the smallest `σ_g`, i.e. the costliest group.
pub fn run_accountant(args: &AccountantArgs) -> Result<Vec<AccountantRow>> {
    let issues = args.issues();
    if !issues.is_empty() {
        return Err(Error::Config(issues));
    }
    let sigmas = args.group_sigmas();
    let joint_ratio = sigma_eff_joint(args.beta, &sigmas)?;
    let min_sigma = sigmas.iter().copied().fold(f64::INFINITY, f64::min);
    let marginal_ratio = sigma_marginal(args.beta, min_sigma)?;
    let joint = epsilon_curve(joint_ratio, args.q, args.steps, args.delta, &args.grid)?;
    let marginal = epsilon_curve(marginal_ratio, args.q, args.steps, args.delta, &args.grid)?;
    Ok(joint
        .iter()
        .zip(&marginal)
        .map(|(j, m)| AccountantRow {
            step: j.step,
            epsilon_joint: j.epsilon,
            epsilon_marginal: m.epsilon,
            best_order: j.best_order,
        })
        .collect())
}

pub fn write_accountant_csv<W: std::io::Write>(rows: &[AccountantRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(ACCOUNTANT_HEADER)?;
    for r in rows {
        w.write_record([
            r.step.to_string(),
            fmt_f(r.epsilon_joint),
            fmt_f(r.epsilon_marginal),
            r.best_order.to_string(),
            MARGINAL_LABEL.to_owned(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a CSV written by this module into header and rows.
pub fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let mut r = csv::Reader::from_path(path)?;
    let header = r.headers()?.iter().map(str::to_owned).collect();
    let rows = r
        .records()
        .map(|rec| rec.map(|r| r.iter().map(str::to_owned).collect()))
        .collect::<std::result::Result<_, _>>()?;
    Ok((header, rows))
}

pub const SPECTRAL_FIT_HEADER: &[&str] = &["rho", "deviation", "tempering", "tail_size", "valid"];

/// Spectral diagnostics of a whitespace-delimited weight matrix file.
pub fn spectral_fit_file(path: &Path, interval: &SpectralInterval, c_lambda: f64, min_tail: usize) -> Result<SpectralReport> {
    let text = fs::read_to_string(path)?;
    let w = DenseMatrix::parse_text(&text)?;
    spectral_report(0, 0, &w, interval, c_lambda, min_tail)
}

pub fn write_spectral_fit<W: std::io::Write>(report: &SpectralReport, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(SPECTRAL_FIT_HEADER)?;
    w.write_record([
        fmt_f(report.rho),
        fmt_f(report.deviation),
        fmt_f(report.tempering),
        report.tail_size.to_string(),
        report.valid.to_string(),
    ])?;
    w.flush()?;
    Ok(())
}

/// One randomized adjacency-probe instance.
#[derive(Debug, Clone)]
pub struct ProbeInstance {
    pub data: Dataset,
    pub mask: SampleBatch,
    pub model: ModelState,
    pub config: OptimizerConfig,
    pub histories: Vec<ReleaseHistory>,
    pub t: u64,
}

const PROBE_BETAS: [f64; 3] = [0.3, 0.7, 1.0];

/// Tiny random instance: `N ≤ 12`, `K ≤ 5`, random step, random stored
/// releases, random mask, random clip norms. Architecture and `β` cycle with
/// `index` so every combination appears.
pub fn random_probe_instance(seed: u64, index: u64) -> Result<ProbeInstance> {
    let mut rng = RandomStream::new(seed, index, 0, crate::numerics::Purpose::Data).generator();
    let arch = if index.is_multiple_of(2) { Architecture::LogReg } else { Architecture::Mlp1 };
    let beta = PROBE_BETAS[(index / 2 % 3) as usize];
    let n = 1 + rng.below(12) as usize;
    let d = 2 + rng.below(4) as usize;
    let classes = 2 + rng.below(2) as usize;
    let hidden = 2 + rng.below(5) as usize;
    let window_k = 1 + rng.below(5) as usize;
    let t = rng.below(9);

    let features: Vec<f64> = (0..n * d).map(|_| 3.0 * rng.standard_normal()).collect();
    let labels: Vec<usize> = (0..n).map(|_| rng.below(classes as u64) as usize).collect();
    let data = Dataset::new(features, labels, d, classes, "probe")?;

    let groups = arch.num_groups();
    let clips: Vec<f64> = (0..groups).map(|_| 0.05 + 2.0 * rng.uniform()).collect();
    let mut model = init_model(
        RandomStream::init(seed ^ index.rotate_left(17)),
        arch,
        d,
        hidden,
        classes,
        &clips,
        &[1.0],
    )?;
    // Larger weights push some per-example gradients past their clip norm.
    for g in &mut model.groups {
        let scale = 1.0 + 4.0 * rng.uniform();
        for w in g.weight.as_mut_slice() {
            *w *= scale;
        }
    }

    let config = OptimizerConfig {
        beta,
        window_k,
        alpha: 0.1 + 0.9 * rng.uniform(),
        gamma_ema: 0.1 + 0.9 * rng.uniform(),
        q: 0.5,
        seed,
        ..OptimizerConfig::default()
    };
    let mut histories = new_histories(&model, &config)?;
    for step in 0..t {
        for (g, h) in histories.iter_mut().enumerate() {
            let dim = model.groups[g].param_count();
            let stream = RandomStream::new(seed, 1000 + index * 16 + step, g as u64, crate::numerics::Purpose::Noise);
            let query = gaussian_vector(stream, dim, 2.0)?;
            let noise: Vec<f64> = query.iter().map(|_| rng.standard_normal()).collect();
            h.append(ReleaseRecord::new(step, g, query, noise)?)?;
        }
    }
    let mask: Vec<bool> = (0..n).map(|_| rng.bernoulli(0.6)).collect();
    let mask = SampleBatch::from_mask(mask, config.q)?;
    Ok(ProbeInstance {
        data,
        mask,
        model,
        config,
        histories,
        t,
    })
}

#[derive(Debug, Clone, Default)]
pub struct ProbeSummary {
    pub instances: usize,
    pub probes: usize,
    pub violations: Vec<(u64, AdjacencyProbeResult)>,
    pub max_delta_over_bound: f64,
    /// Instances per (architecture, β) combination.
    pub coverage: BTreeMap<String, usize>,
}

pub fn probe_sensitivity(instances: u64, seed: u64) -> Result<(ProbeSummary, Vec<(u64, AdjacencyProbeResult)>)> {
    let mut summary = ProbeSummary::default();
    let mut all = Vec::new();
    for index in 0..instances {
        let inst = random_probe_instance(seed, index)?;
        let results = adjacency_probe(&inst.data, &inst.mask, &inst.model, &inst.config, &inst.histories, inst.t)?;
        summary.instances += 1;
        *summary
            .coverage
            .entry(format!("{}/beta={}", inst.model.architecture, inst.config.beta))
            .or_default() += 1;
        for r in results {
            summary.probes += 1;
            summary.max_delta_over_bound = summary.max_delta_over_bound.max(r.delta / r.bound);
            if !r.satisfied {
                summary.violations.push((index, r));
            }
            all.push((index, r));
        }
    }
    Ok((summary, all))
}

pub const PROBE_HEADER: &[&str] = &["instance", "removed_index", "group_id", "delta", "bound", "satisfied"];

pub fn write_probe_csv<W: std::io::Write>(rows: &[(u64, AdjacencyProbeResult)], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(PROBE_HEADER)?;
    for (i, r) in rows {
        w.write_record([
            i.to_string(),
            r.removed_index.to_string(),
            r.group_id.to_string(),
            fmt_f(r.delta),
            fmt_f(r.bound),
            r.satisfied.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn float_format_round_trips() {
        for x in [0.0, 1.0, -2.5e-7, 12_345.678_912_3, f64::NAN, f64::INFINITY] {
            let s = fmt_f(x);
            let y: f64 = s.parse().unwrap();
            if x.is_nan() {
                assert!(y.is_nan());
            } else if x.is_infinite() {
                assert_eq!(x, y);
            } else {
                assert!((x - y).abs() <= 1e-8 * x.abs(), "{x} -> {s}");
            }
        }
        assert_eq!(fmt_f(0.5), "5.00000000e-1");
    }

    #[test]
    fn pairs_and_overrides() {
        let mut cfg = RunConfig::default();
        cfg.apply([("beta", "0.5"), ("k", "6"), ("sigmas", "1.0,2.0"), ("orders", "2-10")]).unwrap();
        assert_eq!(cfg.optimizer.beta, 0.5);
        assert_eq!(cfg.optimizer.window_k, 6);
        assert_eq!(cfg.sigmas, vec![1.0, 2.0]);
        assert_eq!(cfg.grid.orders().len(), 9);
        let errs = cfg.apply([("beta", "x"), ("nope", "1"), ("arch", "cnn")]).unwrap_err();
        assert_eq!(errs.len(), 3, "{errs:?}");
        assert!(parse_pairs("a=1\nbroken\n").is_err());
    }

    #[test]
    fn all_issues_reported_together() {
        let mut cfg = RunConfig::default();
        cfg.apply([("beta", "1.5"), ("q", "2"), ("delta", "0"), ("sigmas", "1,2,3")]).unwrap();
        let issues = cfg.issues();
        assert!(issues.len() >= 4, "{issues:?}");
    }

    #[test]
    fn idx_paths_must_exist() {
        let mut cfg = RunConfig::default();
        cfg.apply([("dataset", "idx"), ("idx_images", "/no/such/file"), ("idx_labels", "/no/such/labels")])
            .unwrap();
        let issues = cfg.issues();
        assert_eq!(issues.iter().filter(|i| i.starts_with("file not found")).count(), 2);
    }

    #[test]
    fn accountant_rejects_bad_q() {
        let args = AccountantArgs {
            q: 1.5,
            sigmas: vec![1.0],
            beta: 1.0,
            groups: 1,
            steps: 3,
            delta: 1e-5,
            grid: RdpOrderGrid::default(),
        };
        assert!(matches!(run_accountant(&args), Err(Error::Config(_))));
    }

    #[test]
    fn orders_parse() {
        assert_eq!(parse_orders("2,4,8").unwrap().orders(), &[2, 4, 8]);
        assert!(parse_orders("1-4").is_err());
        assert!(parse_orders("a").is_err());
    }
}
