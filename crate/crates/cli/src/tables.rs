//! CSV and JSON shapes of the command outputs.

use serde::Serialize;

use regimeflow::backtest::Variant;
use regimeflow::pipeline::{BacktestRun, FilterStage, RegimeStage};
use regimeflow::{AsymmetryFit, IngestOutput, InvestorType, PredictiveRow, Regime};

use crate::error::CliError;

type Csv = csv::Writer<Vec<u8>>;

fn csv_with_header(header: &[&str]) -> Result<Csv, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    Ok(w)
}

fn finish(w: Csv) -> Result<Vec<u8>, CliError> {
    w.into_inner().map_err(|e| CliError::runtime(format!("csv: {e}")))
}

/// Shortest round-trip text; exponent notation for very small or large magnitudes.
fn num(x: f64) -> String {
    format!("{x:?}")
}

fn opt(x: Option<f64>) -> String {
    x.map(num).unwrap_or_default()
}

pub fn json_pretty<T: Serialize>(value: &T) -> Result<Vec<u8>, CliError> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s.into_bytes())
}

// ─── Ingest ────────────────────────────────────────────────────────────────

const SERIES_COLUMNS: [&str; 8] = [
    "date",
    "return",
    "market_cap",
    "flow_foreign",
    "flow_institutional",
    "flow_individual",
    "realized_vol",
    "vol_baseline",
];

fn series_record(s: &regimeflow::FlowSeries, t: usize) -> Vec<String> {
    vec![
        s.dates()[t].to_string(),
        num(s.returns()[t]),
        num(s.market_cap()[t]),
        num(s.flow(InvestorType::Foreign)[t]),
        num(s.flow(InvestorType::Institutional)[t]),
        num(s.flow(InvestorType::Individual)[t]),
        num(s.realized_vol()[t]),
        num(s.vol_baseline()[t]),
    ]
}

/// Every retained stock, long format.
pub fn series_csv(ingest: &IngestOutput) -> Result<Vec<u8>, CliError> {
    let mut header = vec!["stock_id"];
    header.extend(SERIES_COLUMNS);
    let mut w = csv_with_header(&header)?;
    for s in &ingest.series {
        for t in 0..s.len() {
            let mut rec = vec![s.stock_id().to_string()];
            rec.extend(series_record(s, t));
            w.write_record(&rec)?;
        }
    }
    finish(w)
}

pub fn market_csv(ingest: &IngestOutput) -> Result<Vec<u8>, CliError> {
    let mut w = csv_with_header(&SERIES_COLUMNS)?;
    for t in 0..ingest.market.len() {
        w.write_record(series_record(&ingest.market, t))?;
    }
    finish(w)
}

// ─── Filter ────────────────────────────────────────────────────────────────

pub fn filter_params_csv(filters: &FilterStage) -> Result<Vec<u8>, CliError> {
    let mut w = csv_with_header(&[
        "stock_id",
        "investor",
        "phi",
        "q",
        "r0",
        "gamma",
        "estimated",
        "converged",
        "degenerate",
        "log_likelihood",
    ])?;
    for signals in &filters.signals {
        for s in signals {
            let f = &s.fit;
            w.write_record([
                f.stock_id.clone(),
                f.investor.code().to_string(),
                num(f.params.phi),
                num(f.params.q),
                num(f.params.r0),
                num(f.params.gamma),
                f.estimated.to_string(),
                f.converged.to_string(),
                f.degenerate.to_string(),
                num(f.log_likelihood),
            ])?;
        }
    }
    finish(w)
}

/// `date,raw,filtered,gain,r_t` for one stock and investor type.
pub fn filter_series_csv(
    series: &regimeflow::FlowSeries,
    filters: &FilterStage,
    k: usize,
    inv: InvestorType,
) -> Result<Vec<u8>, CliError> {
    let sig = filters.signal(k, inv);
    let mut w = csv_with_header(&["date", "raw", "filtered", "gain", "r_t"])?;
    for t in 0..series.len() {
        w.write_record([
            series.dates()[t].to_string(),
            num(series.flow(inv)[t]),
            num(sig.filtered[t]),
            num(sig.gain[t]),
            num(sig.measurement_var[t]),
        ])?;
    }
    finish(w)
}

/// File name for a stock id: anything outside `[A-Za-z0-9._-]` becomes `_`.
pub fn file_stem(stock_id: &str) -> String {
    stock_id.chars().map(|c| if c.is_ascii_alphanumeric() || "._-".contains(c) { c } else { '_' }).collect()
}

// ─── Regimes ───────────────────────────────────────────────────────────────

pub fn regimes_csv(ingest: &IngestOutput, stage: &RegimeStage) -> Result<Vec<u8>, CliError> {
    let mut w = csv_with_header(&["date", "p_bull", "p_normal", "p_crisis", "state", "crisis_flag"])?;
    for (t, d) in ingest.calendar.iter().enumerate() {
        let p = stage.path.filtered[t];
        w.write_record([
            d.to_string(),
            num(p[0]),
            num(p[1]),
            num(p[2]),
            stage.assigned[t].to_string(),
            stage.path.crisis[t].to_string(),
        ])?;
    }
    finish(w)
}

#[derive(Debug, Serialize)]
pub struct RegimeModelView<'a> {
    pub labels: [Regime; 3],
    pub mu: [f64; 3],
    pub sigma: [f64; 3],
    pub transition: [[f64; 3]; 3],
    pub stationary: [f64; 3],
    /// Share of dates assigned to each regime.
    pub occupancy: [f64; 3],
    pub log_likelihood: f64,
    pub iterations: usize,
    pub converged: bool,
    pub restarts: usize,
    pub merged: bool,
    pub max_overlap: f64,
    pub loglik_trace: &'a [f64],
}

fn occupancy(stage: &RegimeStage) -> [f64; 3] {
    let mut occ = [0.0; 3];
    let n = stage.assigned.len().max(1) as f64;
    for r in &stage.assigned {
        occ[r.index()] += 1.0 / n;
    }
    occ
}

pub fn regime_model_view(stage: &RegimeStage) -> RegimeModelView<'_> {
    let m = &stage.model;
    RegimeModelView {
        labels: Regime::ALL,
        mu: m.params.mu,
        sigma: m.params.sigma,
        transition: m.params.transition,
        stationary: m.stationary(),
        occupancy: occupancy(stage),
        log_likelihood: m.log_likelihood,
        iterations: m.iterations,
        converged: m.converged,
        restarts: m.restarts,
        merged: m.merged,
        max_overlap: m.max_overlap,
        loglik_trace: &m.loglik_trace,
    }
}

/// Regime characteristics with the per-regime flow coefficient of each investor type.
pub fn table3_csv(stage: &RegimeStage) -> Result<Vec<u8>, CliError> {
    let mut header = vec!["Regime".to_string(), "Mean Return".into(), "Volatility".into(), "Occupancy".into()];
    for inv in InvestorType::ALL {
        header.push(format!("beta_{}", inv.code()));
        header.push(format!("t(beta_{})", inv.code()));
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(&header)?;
    let occ = occupancy(stage);
    for r in Regime::ALL {
        let mut rec = vec![r.to_string(), num(stage.model.mu(r)), num(stage.model.sigma(r)), num(occ[r.index()])];
        for (_, reg) in &stage.regressions {
            let row = reg.row(r);
            rec.push(num(row.beta));
            rec.push(num(row.t_beta));
        }
        w.write_record(&rec)?;
    }
    finish(w)
}

pub fn regime_regression_csv(stage: &RegimeStage) -> Result<Vec<u8>, CliError> {
    let mut w = csv_with_header(&[
        "Investor", "Regime", "alpha", "beta", "se", "t", "R2", "N", "ci_low", "ci_high", "skipped",
    ])?;
    for (inv, reg) in &stage.regressions {
        for row in &reg.rows {
            w.write_record([
                inv.label().to_string(),
                row.regime.to_string(),
                num(row.alpha),
                num(row.beta),
                num(row.se_beta),
                num(row.t_beta),
                num(row.r_squared),
                row.n.to_string(),
                num(row.ci_low),
                num(row.ci_high),
                row.skipped.to_string(),
            ])?;
        }
    }
    finish(w)
}

// ─── Regressions ───────────────────────────────────────────────────────────

pub const TABLE4_HEADER: [&str; 7] =
    ["Investor Type", "beta_plus", "t(beta_plus)", "beta_minus", "t(beta_minus)", "Ratio", "p-value"];

pub fn table4_csv(fits: &[AsymmetryFit]) -> Result<Vec<u8>, CliError> {
    let mut w = csv_with_header(&TABLE4_HEADER)?;
    for f in fits {
        w.write_record([
            f.investor.label().to_string(),
            num(f.beta_plus),
            num(f.t_plus),
            num(f.beta_minus),
            num(f.t_minus),
            opt(f.ratio),
            num(f.p_value),
        ])?;
    }
    finish(w)
}

pub const TABLE2_HEADER: [&str; 7] =
    ["Investor", "Horizon", "t_raw", "t_filtered", "R2_raw", "R2_filtered", "Improvement"];

pub fn table2_csv(rows: &[PredictiveRow]) -> Result<Vec<u8>, CliError> {
    let mut w = csv_with_header(&TABLE2_HEADER)?;
    for r in rows {
        w.write_record([
            r.investor.label().to_string(),
            r.horizon.to_string(),
            num(r.t_raw),
            num(r.t_filtered),
            num(r.r2_raw),
            num(r.r2_filtered),
            num(r.improvement),
        ])?;
    }
    finish(w)
}

// ─── Backtests ─────────────────────────────────────────────────────────────

/// Equity and drawdown of the headline investor's variants, one row per date and variant.
pub fn equity_csv(runs: &[BacktestRun], headline: InvestorType) -> Result<Vec<u8>, CliError> {
    let mut w = csv_with_header(&["date", "variant", "equity", "drawdown"])?;
    for v in Variant::ALL {
        let Some(run) = runs.iter().find(|r| r.spec.investor == headline && r.spec.variant == v) else {
            continue;
        };
        let rep = &run.report;
        for t in 0..rep.returns.len() {
            w.write_record([
                rep.dates[t].to_string(),
                v.label().to_string(),
                num(rep.equity[t]),
                num(rep.drawdown[t]),
            ])?;
        }
    }
    finish(w)
}
