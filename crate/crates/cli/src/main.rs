//! `regimeflow` command-line pipeline.

mod artifacts;
mod commands;
mod error;
mod tables;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use regimeflow::config::CovarianceKind;
use regimeflow::{InvestorType, RunConfig};

use crate::artifacts::read_input;
use crate::commands::Context;
use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(name = "regimeflow", version, about = "Regime-aware order-flow signal pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic panel (panel.csv) and its hidden truth (truth.json).
    Simulate(SimulateArgs),
    /// Validate a panel and write normalized flow series.
    Ingest(PanelArgs),
    /// Fit and run the Kalman filter on every series.
    Filter(PanelArgs),
    /// Fit the three-state regime model and regime-conditional regressions.
    Regime(PanelArgs),
    /// Asymmetric response of each investor type to market shocks.
    Asym(PanelArgs),
    /// Predictive regressions of raw and filtered flow.
    Predict(PanelArgs),
    /// Static, filtered and All-Weather strategy backtests.
    Backtest(PanelArgs),
    /// Subperiod, size-quintile, bootstrap and parameter-sensitivity runs.
    Robust(PanelArgs),
    /// Summarize earlier runs as Markdown.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum InvestorArg {
    Foreign,
    Institutional,
    Individual,
}

impl From<InvestorArg> for InvestorType {
    fn from(a: InvestorArg) -> Self {
        match a {
            InvestorArg::Foreign => InvestorType::Foreign,
            InvestorArg::Institutional => InvestorType::Institutional,
            InvestorArg::Individual => InvestorType::Individual,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum CovarianceArg {
    Conventional,
    Robust,
    ClusteredByDate,
}

impl From<CovarianceArg> for CovarianceKind {
    fn from(a: CovarianceArg) -> Self {
        match a {
            CovarianceArg::Conventional => CovarianceKind::Conventional,
            CovarianceArg::Robust => CovarianceKind::Robust,
            CovarianceArg::ClusteredByDate => CovarianceKind::ClusteredByDate,
        }
    }
}

/// Options shared by every computing command. Flags override the config file.
#[derive(Debug, Args)]
struct Common {
    /// TOML configuration file; defaults apply to anything it leaves out.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run seed (synthetic generator and bootstrap).
    #[arg(long, env = "REGIMEFLOW_SEED")]
    seed: Option<u64>,
    /// Cap on worker threads.
    #[arg(long)]
    threads: Option<usize>,
    /// Output directory (default: runs/<command>).
    #[arg(long, short)]
    out: Option<PathBuf>,
    /// Investor type driving the headline strategy.
    #[arg(long, value_enum)]
    investor: Option<InvestorArg>,
    /// Standard errors for the predictive and asymmetric-response regressions.
    #[arg(long, value_enum)]
    covariance: Option<CovarianceArg>,
    /// Transaction cost in basis points of traded notional.
    #[arg(long)]
    cost_bps: Option<f64>,
    /// Disable the All-Weather stop-loss.
    #[arg(long)]
    no_stop_loss: bool,
    /// Trade against the flow signal instead of with it.
    #[arg(long)]
    fade: bool,
    /// Use configured Kalman parameters instead of per-series estimates.
    #[arg(long)]
    no_estimate: bool,
    /// Bootstrap resamples per interval.
    #[arg(long)]
    bootstrap_iterations: Option<usize>,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    #[arg(long)]
    n_stocks: Option<usize>,
    #[arg(long)]
    n_days: Option<usize>,
    #[command(flatten)]
    common: Common,
}

#[derive(Debug, Args)]
struct PanelArgs {
    /// Panel CSV: date, stock_id, buy_/sell_ values for for/ins/ind, mcap, return.
    #[arg(long)]
    panel: PathBuf,
    #[command(flatten)]
    common: Common,
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// Directory holding earlier runs (searched one level deep).
    #[arg(long, default_value = "runs")]
    root: PathBuf,
    /// Also write report.md and a manifest here.
    #[arg(long, short)]
    out: Option<PathBuf>,
}

fn resolve_config(common: &Common, inputs: &mut Vec<artifacts::FileDigest>) -> Result<RunConfig, CliError> {
    let mut cfg = match &common.config {
        Some(path) => {
            let (bytes, digest) = read_input(path)?;
            inputs.push(digest);
            let text = String::from_utf8(bytes)
                .map_err(|_| CliError::validation(format!("{} is not UTF-8 text", path.display())))?;
            RunConfig::from_toml_str(&text).map_err(|e| CliError::validation(format!("{}: {e}", path.display())))?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
        cfg.synth.seed = seed;
    }
    if let Some(inv) = common.investor {
        cfg.backtest.investor = inv.into();
    }
    if let Some(cov) = common.covariance {
        cfg.predict.covariance = cov.into();
        cfg.asymmetry.covariance = cov.into();
    }
    if let Some(c) = common.cost_bps {
        cfg.backtest.cost_bps = c;
    }
    if common.no_stop_loss {
        cfg.backtest.stop_loss = false;
    }
    if common.fade {
        cfg.backtest.signal_sign = -1.0;
    }
    if common.no_estimate {
        cfg.kalman.estimate = false;
    }
    if let Some(b) = common.bootstrap_iterations {
        cfg.backtest.bootstrap_iterations = b;
    }
    Ok(cfg)
}

fn context(command: &'static str, common: &Common, extra: impl FnOnce(&mut RunConfig)) -> Result<Context, CliError> {
    let mut inputs = Vec::new();
    let mut cfg = resolve_config(common, &mut inputs)?;
    extra(&mut cfg);
    cfg.validate().map_err(|e| CliError::validation(e.to_string()))?;
    if let Some(n) = common.threads {
        if n == 0 {
            return Err(CliError::validation("--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::runtime(format!("thread pool: {e}")))?;
    }
    Ok(Context { command, cfg, threads: common.threads, inputs })
}

fn out_dir(common: &Common, command: &str) -> PathBuf {
    common.out.clone().unwrap_or_else(|| Path::new("runs").join(command))
}

type PanelCommand = fn(&mut Context, &Path, &Path) -> Result<PathBuf, CliError>;

fn run_panel(name: &'static str, args: &PanelArgs, f: PanelCommand) -> Result<(), CliError> {
    let mut ctx = context(name, &args.common, |_| {})?;
    f(&mut ctx, &args.panel, &out_dir(&args.common, name)).map(|_| ())
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Simulate(a) => {
            let mut ctx = context("simulate", &a.common, |cfg| {
                if let Some(n) = a.n_stocks {
                    cfg.synth.n_stocks = n;
                }
                if let Some(n) = a.n_days {
                    cfg.synth.n_days = n;
                }
            })?;
            commands::simulate(&mut ctx, &out_dir(&a.common, "simulate")).map(|_| ())
        }
        Command::Ingest(a) => run_panel("ingest", &a, commands::ingest_cmd),
        Command::Filter(a) => run_panel("filter", &a, commands::filter),
        Command::Regime(a) => run_panel("regime", &a, commands::regime),
        Command::Asym(a) => run_panel("asym", &a, commands::asym),
        Command::Predict(a) => run_panel("predict", &a, commands::predict),
        Command::Backtest(a) => run_panel("backtest", &a, commands::backtest),
        Command::Robust(a) => run_panel("robust", &a, commands::robust),
        Command::Report(a) => {
            let mut ctx = Context { command: "report", cfg: RunConfig::default(), threads: None, inputs: Vec::new() };
            let md = commands::report(&mut ctx, &a.root, a.out.as_deref())?;
            print!("{md}");
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
