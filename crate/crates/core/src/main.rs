use std::fs;
use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use sma_dpsgd::accountant::DEFAULT_DELTA;
use sma_dpsgd::run::{
    parse_orders, probe_sensitivity, run_accountant, run_sweep_beta, run_sweep_interval, run_train,
    spectral_fit_file, write_accountant_csv, write_probe_csv, write_spectral_fit, AccountantArgs,
    RunConfig, SweepReport,
};
use sma_dpsgd::spectral::{SpectralInterval, DEFAULT_MIN_TAIL};
use sma_dpsgd::Error;

/// Differentially private SGD with a release-only fractional memory branch.
#[derive(Parser)]
#[command(name = "sma-dpsgd", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// key=value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// key=value overrides, applied after the file.
    #[arg(value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model and write trace, diagnostics, ledger and report CSVs.
    Train(RunArgs),
    /// One training run per mixing weight, sharing seeds.
    SweepBeta {
        /// Comma-separated mixing weights in (0, 1].
        #[arg(long, value_delimiter = ',', default_value = "1.0,0.9,0.7,0.5")]
        betas: Vec<f64>,
        #[command(flatten)]
        run: RunArgs,
    },
    /// One training run per spectral interval, written as a summary table.
    SweepInterval {
        /// Comma-separated `lo:hi` pairs.
        #[arg(long, value_delimiter = ',', default_value = "1:3,2:4,2:6,3:5,4:6,5:7")]
        intervals: Vec<String>,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Privacy curve for the joint and the marginal ratio.
    Accountant {
        /// Poisson sampling rate.
        #[arg(long)]
        q: f64,
        /// Noise multiplier, one shared value or one per group.
        #[arg(long, value_delimiter = ',', required = true)]
        sigma: Vec<f64>,
        #[arg(long, default_value_t = 1.0)]
        beta: f64,
        #[arg(long, default_value_t = 1)]
        groups: usize,
        #[arg(long)]
        steps: u64,
        #[arg(long, default_value_t = DEFAULT_DELTA)]
        delta: f64,
        /// `lo-hi` range or comma list of integer orders.
        #[arg(long, default_value = "2-64")]
        orders: String,
        /// Write here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Power-law exponent, deviation and tempering of a weight matrix file.
    SpectralFit {
        /// Whitespace-delimited matrix, one row per line.
        #[arg(long)]
        matrix: PathBuf,
        #[arg(long, default_value_t = 2.0)]
        rho_min: f64,
        #[arg(long, default_value_t = 6.0)]
        rho_max: f64,
        #[arg(long, default_value_t = 1.0)]
        c_lambda: f64,
        #[arg(long, default_value_t = DEFAULT_MIN_TAIL)]
        min_tail: usize,
    },
    /// Brute-force remove-one sensitivity check on random tiny instances.
    ProbeSensitivity {
        #[arg(long, default_value_t = 120)]
        instances: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn output(path: &Option<PathBuf>) -> io::Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(fs::File::create(p)?),
        None => Box::new(io::stdout().lock()),
    })
}

fn parse_intervals(items: &[String]) -> Result<Vec<SpectralInterval>, Error> {
    let mut errors = Vec::new();
    let mut out = Vec::new();
    for item in items {
        let parsed = item
            .split_once(':')
            .and_then(|(a, b)| Some((a.trim().parse().ok()?, b.trim().parse().ok()?)));
        match parsed.map(|(a, b)| SpectralInterval::new(a, b)) {
            Some(Ok(i)) => out.push(i),
            Some(Err(e)) => errors.push(format!("interval {item:?}: {e}")),
            None => errors.push(format!("interval {item:?}: expected lo:hi")),
        }
    }
    if errors.is_empty() {
        Ok(out)
    } else {
        Err(Error::Config(errors))
    }
}

fn report_sweep(report: &SweepReport) -> bool {
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    let mut ok = true;
    for arm in &report.arms {
        match &arm.result {
            Ok(r) if r.failure.is_none() => {}
            Ok(r) => {
                ok = false;
                eprintln!("arm {} failed: {}", arm.label, r.failure.as_deref().unwrap_or(""));
            }
            Err(e) => {
                ok = false;
                eprintln!("arm {} failed: {e}", arm.label);
            }
        }
    }
    if let Some(p) = &report.csv_path {
        println!("{}", p.display());
    }
    ok
}

/// `Ok(false)` means the command ran but hit a runtime failure it recorded.
fn execute(cmd: Command) -> Result<bool, Error> {
    match cmd {
        Command::Train(args) => {
            let cfg = RunConfig::load(args.config.as_deref(), &args.overrides)?;
            let report = run_train(&cfg)?;
            let s = &report.summary;
            println!(
                "{}: steps={} accuracy={:.4} loss={:.4} eps_joint={:.4} eps_marginal={:.4} mean_d_eff={:.4} mean_memory_ratio={:.4}",
                cfg.run_dir().display(),
                s.steps_completed,
                s.final_accuracy,
                s.final_loss,
                s.epsilon_joint,
                s.epsilon_marginal,
                s.mean_d_eff,
                s.mean_memory_ratio
            );
            if let Some(f) = &report.failure {
                eprintln!("run failed: {f}");
            }
            Ok(report.failure.is_none())
        }
        Command::SweepBeta { betas, run } => {
            let cfg = RunConfig::load(run.config.as_deref(), &run.overrides)?;
            Ok(report_sweep(&run_sweep_beta(&cfg, &betas)?))
        }
        Command::SweepInterval { intervals, run } => {
            let cfg = RunConfig::load(run.config.as_deref(), &run.overrides)?;
            let intervals = parse_intervals(&intervals)?;
            Ok(report_sweep(&run_sweep_interval(&cfg, &intervals)?))
        }
        Command::Accountant { q, sigma, beta, groups, steps, delta, orders, out } => {
            let grid = parse_orders(&orders).map_err(|e| Error::Config(vec![format!("--orders: {e}")]))?;
            let args = AccountantArgs { q, sigmas: sigma, beta, groups, steps, delta, grid };
            let rows = run_accountant(&args)?;
            write_accountant_csv(&rows, output(&out)?)?;
            Ok(true)
        }
        Command::SpectralFit { matrix, rho_min, rho_max, c_lambda, min_tail } => {
            let interval = SpectralInterval::new(rho_min, rho_max)?;
            if !(c_lambda >= 0.0 && c_lambda.is_finite()) {
                return Err(Error::Config(vec![format!("--c-lambda must be finite and >= 0, got {c_lambda}")]));
            }
            if !matrix.exists() {
                return Err(Error::Config(vec![format!("file not found: {}", matrix.display())]));
            }
            let report = spectral_fit_file(&matrix, &interval, c_lambda, min_tail)?;
            write_spectral_fit(&report, io::stdout().lock())?;
            Ok(true)
        }
        Command::ProbeSensitivity { instances, seed, out } => {
            let (summary, rows) = probe_sensitivity(instances, seed)?;
            write_probe_csv(&rows, output(&out)?)?;
            eprintln!(
                "instances={} probes={} violations={} max_delta_over_bound={:.6}",
                summary.instances,
                summary.probes,
                summary.violations.len(),
                summary.max_delta_over_bound
            );
            Ok(summary.violations.is_empty())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match execute(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
