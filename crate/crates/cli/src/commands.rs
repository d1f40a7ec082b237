//! One function per subcommand. Each reads its inputs, runs the pipeline
//! stages it needs and stages its artifacts for an atomic commit.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use regimeflow::ingest::read_panel_csv;
use regimeflow::pipeline::{
    fit_regimes, ingest, metrics_table, regime_signal, run_asymmetry, run_backtests, run_filters, run_predictive,
    run_regimes, run_robustness_stage, run_sensitivity, BacktestRun, FilterStage, MetricsTable,
};
use regimeflow::{generate_panel, IngestOutput, InvestorType, PanelObservation, RunConfig};

use crate::artifacts::{read_input, sha256_hex, FileDigest, Manifest, Staging};
use crate::error::CliError;
use crate::tables;

/// Resolved configuration plus the provenance collected while running.
pub struct Context {
    pub command: &'static str,
    pub cfg: RunConfig,
    pub threads: Option<usize>,
    pub inputs: Vec<FileDigest>,
}

impl Context {
    fn manifest(&self) -> Result<Manifest, CliError> {
        let config = serde_json::to_value(&self.cfg)?;
        Ok(Manifest {
            command: self.command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed: self.cfg.seed,
            config_hash: sha256_hex(serde_json::to_string(&config)?.as_bytes()),
            config,
            threads: self.threads,
            inputs: self.inputs.clone(),
            outputs: Vec::new(),
        })
    }

    fn load_panel(&mut self, path: &Path) -> Result<Vec<PanelObservation>, CliError> {
        let (bytes, digest) = read_input(path)?;
        self.inputs.push(digest);
        Ok(read_panel_csv(bytes.as_slice())?)
    }

    fn ingest(&mut self, path: &Path) -> Result<IngestOutput, CliError> {
        let rows = self.load_panel(path)?;
        Ok(ingest(rows, &self.cfg)?)
    }

    fn commit(&self, staging: Staging) -> Result<PathBuf, CliError> {
        let n = staging.outputs().len();
        let dir = staging.commit(self.manifest()?)?;
        println!("{}: wrote {n} artifacts to {}", self.command, dir.display());
        Ok(dir)
    }
}

pub fn simulate(ctx: &mut Context, out: &Path) -> Result<PathBuf, CliError> {
    let synth = generate_panel(&ctx.cfg.synth)?;
    let mut panel = Vec::new();
    regimeflow::ingest::write_panel_csv(&mut panel, &synth.rows)?;
    let mut truth = serde_json::to_vec(&synth.truth)?;
    truth.push(b'\n');
    let mut s = Staging::new(out)?;
    s.write("panel.csv", &panel)?;
    s.write("truth.json", &truth)?;
    ctx.commit(s)
}

pub fn ingest_cmd(ctx: &mut Context, panel: &Path, out: &Path) -> Result<PathBuf, CliError> {
    let ing = ctx.ingest(panel)?;
    let mut s = Staging::new(out)?;
    s.write("series.csv", &tables::series_csv(&ing)?)?;
    s.write("market.csv", &tables::market_csv(&ing)?)?;
    s.write("ingest_stats.json", &tables::json_pretty(&ing.stats)?)?;
    ctx.commit(s)
}

pub fn filter(ctx: &mut Context, panel: &Path, out: &Path) -> Result<PathBuf, CliError> {
    let ing = ctx.ingest(panel)?;
    let filters = run_filters(&ing, &ctx.cfg.kalman)?;
    let mut s = Staging::new(out)?;
    s.write("filter_params.csv", &tables::filter_params_csv(&filters)?)?;
    for (k, series) in ing.series.iter().enumerate() {
        for inv in InvestorType::ALL {
            let name = format!("series/{}_{}.csv", tables::file_stem(series.stock_id()), inv.code());
            s.write(&name, &tables::filter_series_csv(series, &filters, k, inv)?)?;
        }
    }
    ctx.commit(s)
}

pub fn regime(ctx: &mut Context, panel: &Path, out: &Path) -> Result<PathBuf, CliError> {
    let ing = ctx.ingest(panel)?;
    let filters = run_filters(&ing, &ctx.cfg.kalman)?;
    let stage = run_regimes(&ing, &filters, &ctx.cfg)?;
    let mut s = Staging::new(out)?;
    s.write("regimes.csv", &tables::regimes_csv(&ing, &stage)?)?;
    s.write("regime_model.json", &tables::json_pretty(&tables::regime_model_view(&stage))?)?;
    s.write("table3.csv", &tables::table3_csv(&stage)?)?;
    s.write("regime_regression.csv", &tables::regime_regression_csv(&stage)?)?;
    ctx.commit(s)
}

pub fn asym(ctx: &mut Context, panel: &Path, out: &Path) -> Result<PathBuf, CliError> {
    let ing = ctx.ingest(panel)?;
    let fits = run_asymmetry(&ing, &ctx.cfg)?;
    let mut s = Staging::new(out)?;
    s.write("table4.csv", &tables::table4_csv(&fits)?)?;
    s.write("asymmetry.json", &tables::json_pretty(&fits)?)?;
    ctx.commit(s)
}

pub fn predict(ctx: &mut Context, panel: &Path, out: &Path) -> Result<PathBuf, CliError> {
    let ing = ctx.ingest(panel)?;
    let filters = run_filters(&ing, &ctx.cfg.kalman)?;
    let rows = run_predictive(&ing, &filters, &ctx.cfg)?;
    let mut s = Staging::new(out)?;
    s.write("table2.csv", &tables::table2_csv(&rows)?)?;
    s.write("predictive.json", &tables::json_pretty(&rows)?)?;
    ctx.commit(s)
}

struct Strategies {
    ing: IngestOutput,
    filters: FilterStage,
    signal: regimeflow::backtest::RegimeSignal,
    fits: Vec<regimeflow::AsymmetryFit>,
    runs: Vec<BacktestRun>,
}

fn strategies(ctx: &mut Context, panel: &Path) -> Result<Strategies, CliError> {
    let ing = ctx.ingest(panel)?;
    let cfg = &ctx.cfg;
    let filters = run_filters(&ing, &cfg.kalman)?;
    let (_, path) = fit_regimes(&ing, cfg)?;
    let signal = regime_signal(&ing, &path, cfg);
    let fits = run_asymmetry(&ing, cfg)?;
    let runs = run_backtests(&ing, &filters, &signal, &fits, cfg)?;
    Ok(Strategies { ing, filters, signal, fits, runs })
}

pub fn backtest(ctx: &mut Context, panel: &Path, out: &Path) -> Result<PathBuf, CliError> {
    let st = strategies(ctx, panel)?;
    let cfg = &ctx.cfg;
    let metrics = metrics_table(&st.runs, cfg.backtest.investor);
    let robustness = run_robustness_stage(&st.ing, &st.filters, &st.signal, &st.runs, cfg)?;
    let mut s = Staging::new(out)?;
    s.write("equity.csv", &tables::equity_csv(&st.runs, cfg.backtest.investor)?)?;
    s.write("metrics.json", metrics.to_json().as_bytes())?;
    s.write("robustness.json", &tables::json_pretty(&robustness)?)?;
    ctx.commit(s)
}

pub fn robust(ctx: &mut Context, panel: &Path, out: &Path) -> Result<PathBuf, CliError> {
    let st = strategies(ctx, panel)?;
    let cfg = &ctx.cfg;
    let robustness = run_robustness_stage(&st.ing, &st.filters, &st.signal, &st.runs, cfg)?;
    let sensitivity = run_sensitivity(&st.ing, &st.filters, &st.signal, &st.fits, cfg)?;
    let mut s = Staging::new(out)?;
    s.write("robustness.json", &tables::json_pretty(&robustness)?)?;
    s.write("sensitivity.json", &tables::json_pretty(&sensitivity)?)?;
    ctx.commit(s)
}

// ─── Report ────────────────────────────────────────────────────────────────

pub const REPORT_ARTIFACTS: [&str; 4] = ["metrics.json", "table2.csv", "table4.csv", "regime_model.json"];

/// `name` in `root` or one of its immediate (non-hidden) subdirectories,
/// first match in sorted order.
fn locate(root: &Path, name: &str) -> Option<PathBuf> {
    let direct = root.join(name);
    if direct.is_file() {
        return Some(direct);
    }
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)
        .ok()?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir() && !p.file_name().is_some_and(|n| n.to_string_lossy().starts_with('.')))
        .collect();
    dirs.sort();
    dirs.into_iter().map(|d| d.join(name)).find(|p| p.is_file())
}

fn csv_to_markdown(bytes: &[u8]) -> Result<String, CliError> {
    let mut rdr = csv::Reader::from_reader(bytes);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let mut md = format!("| {} |\n|{}\n", header.join(" | "), "---|".repeat(header.len()));
    for rec in rdr.records() {
        let rec = rec?;
        let cells: Vec<String> = rec
            .iter()
            .map(|c| {
                c.parse::<f64>().map_or_else(
                    |_| c.to_string(),
                    |x| if x.fract() == 0.0 && x.abs() < 1e6 { format!("{x}") } else { format!("{x:.4}") },
                )
            })
            .collect();
        let _ = writeln!(md, "| {} |", cells.join(" | "));
    }
    Ok(md)
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or_else(|| "n/a".to_string(), |v| format!("{v:.3}"))
}

fn render_report(found: &[(String, Vec<u8>)]) -> Result<String, CliError> {
    let get = |name: &str| &found.iter().find(|(n, _)| n == name).expect("located").1;
    let metrics: MetricsTable =
        serde_json::from_slice(get("metrics.json")).map_err(|e| CliError::validation(format!("metrics.json: {e}")))?;
    let model: serde_json::Value = serde_json::from_slice(get("regime_model.json"))
        .map_err(|e| CliError::validation(format!("regime_model.json: {e}")))?;

    let mut md = String::from("# regimeflow report\n\n");
    let _ = writeln!(
        md,
        "## Strategy performance\n\nHeadline investor: {}. {} trading days.\n",
        metrics.headline_investor.label(),
        metrics.n_days
    );
    md.push_str("| Investor | Strategy | Return | Ann. return | Sharpe | Calmar | Max DD | Turnover |\n|---|---|---|---|---|---|---|---|\n");
    for r in &metrics.rows {
        let calmar = if r.calmar_infinite { "inf".to_string() } else { fmt_opt(r.calmar) };
        let _ = writeln!(
            md,
            "| {} | {} | {:.2}% | {:.2}% | {} | {} | {:.2}% | {:.3} |",
            r.investor,
            r.strategy,
            100.0 * r.total_return,
            100.0 * r.annualized_return,
            fmt_opt(r.sharpe),
            calmar,
            100.0 * r.max_drawdown,
            r.turnover
        );
    }
    md.push_str("\n## Regimes\n\n| Regime | Mean | Volatility | Occupancy |\n|---|---|---|---|\n");
    for k in 0..3 {
        let at = |field: &str| model[field][k].as_f64().unwrap_or(f64::NAN);
        let _ = writeln!(
            md,
            "| {} | {:.3}% | {:.3}% | {:.3} |",
            model["labels"][k].as_str().unwrap_or("?"),
            100.0 * at("mu"),
            100.0 * at("sigma"),
            at("occupancy")
        );
    }
    md.push_str("\n## Predictive regressions\n\n");
    md.push_str(&csv_to_markdown(get("table2.csv"))?);
    md.push_str("\n## Asymmetric response\n\n");
    md.push_str(&csv_to_markdown(get("table4.csv"))?);
    Ok(md)
}

pub fn report(ctx: &mut Context, root: &Path, out: Option<&Path>) -> Result<String, CliError> {
    let located: Vec<(&str, Option<PathBuf>)> = REPORT_ARTIFACTS.iter().map(|n| (*n, locate(root, n))).collect();
    let missing: Vec<&str> = located.iter().filter(|(_, p)| p.is_none()).map(|(n, _)| *n).collect();
    if !missing.is_empty() {
        return Err(CliError::validation(format!(
            "missing artifacts under {}: {} (run the regime, predict, asym and backtest commands first)",
            root.display(),
            missing.join(", ")
        )));
    }
    let mut found = Vec::new();
    for (name, path) in located {
        let (bytes, digest) = read_input(&path.expect("checked"))?;
        ctx.inputs.push(digest);
        found.push((name.to_string(), bytes));
    }
    let md = render_report(&found)?;
    if let Some(out) = out {
        let mut s = Staging::new(out)?;
        s.write("report.md", md.as_bytes())?;
        ctx.commit(s)?;
    }
    Ok(md)
}
