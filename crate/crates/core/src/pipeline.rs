//! Stage orchestration: ingest, filtering, regimes, regressions, backtests
//! and robustness. Each stage is a pure function of its inputs.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backtest::{
    run_backtest, run_robustness, BacktestError, BacktestReport, RegimeSignal, RobustnessReport, SignalPanel,
    StrategySpec, Variant,
};
use crate::config::{
    AsymmetryConfig, ConfigError, KalmanConfig, RegimeAssignment, RunConfig, ShockVolScope, VolSource,
};
use crate::econometrics::{
    asymmetry_fit, predictive_rows, shock_days, shock_indicators, AsymmetryFit, AsymmetryOptions, OlsError,
    PairedSignal, PredictiveRow, ResponseInput, ResponseProfile, ShockDay,
};
use crate::ingest::{build_flow_series, realized_vol_seeded, vol_baseline, IngestError, IngestOutput};
use crate::kalman::{estimate_params, filter_series, KalmanError, KalmanParams, MIN_ESTIMATION_LENGTH};
use crate::regime::{
    fit_em, regime_conditional_regression, regime_path, AlignedSignal, EmOptions, RegimeError, RegimeModel, RegimePath,
    RegimeRegression,
};
use crate::stats::mean;
use crate::types::{validate_panel, DataError, FlowSeries, InvestorType, PanelObservation, Regime};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error("filter for {stock_id}/{investor}: {source}")]
    Kalman { stock_id: String, investor: InvestorType, source: KalmanError },
    #[error(transparent)]
    Regime(#[from] RegimeError),
    #[error(transparent)]
    Regression(#[from] OlsError),
    #[error(transparent)]
    Backtest(#[from] BacktestError),
}

// ─── Ingest ────────────────────────────────────────────────────────────────

pub fn ingest(rows: Vec<PanelObservation>, cfg: &RunConfig) -> Result<IngestOutput, PipelineError> {
    let panel = validate_panel(rows)?;
    Ok(build_flow_series(&panel, &cfg.ingest, cfg.kalman.ewma_decay)?)
}

/// Calendar position of each observation of `series`.
pub fn calendar_positions(calendar: &[crate::types::Date], series: &FlowSeries) -> Vec<usize> {
    series.dates().iter().map(|d| calendar.binary_search(d).expect("series dates come from the calendar")).collect()
}

// ─── Filtering ─────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterFit {
    pub stock_id: String,
    pub investor: InvestorType,
    pub params: KalmanParams,
    /// Parameters came from maximum likelihood rather than configuration.
    pub estimated: bool,
    pub converged: bool,
    pub degenerate: bool,
    pub log_likelihood: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilteredSignal {
    pub fit: FilterFit,
    pub filtered: Vec<f64>,
    pub gain: Vec<f64>,
    /// `R_t` used at each date.
    pub measurement_var: Vec<f64>,
}

/// Filtered flows, `signals[k][investor]` for `ingest.series[k]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterStage {
    pub signals: Vec<[FilteredSignal; 3]>,
}

impl FilterStage {
    pub fn signal(&self, k: usize, investor: InvestorType) -> &FilteredSignal {
        &self.signals[k][investor.index()]
    }
}

/// Volatility and baseline that scale the measurement noise of `series`.
pub fn noise_inputs(
    ingest: &IngestOutput,
    series: &FlowSeries,
    positions: &[usize],
    source: VolSource,
) -> (Vec<f64>, Vec<f64>) {
    match source {
        VolSource::Stock => (series.realized_vol().to_vec(), series.vol_baseline().to_vec()),
        VolSource::Market => {
            let (sig, base) = (ingest.market.realized_vol(), ingest.market.vol_baseline());
            (positions.iter().map(|&c| sig[c]).collect(), positions.iter().map(|&c| base[c]).collect())
        }
    }
}

/// Baseline parameters when no estimate is requested or possible.
fn configured_params(s: &[f64], cfg: &KalmanConfig) -> KalmanParams {
    let mut p = KalmanParams::from_sample_variance(s, cfg.phi, cfg.gamma);
    if let Some(q) = cfg.q {
        p.q = q;
    }
    if let Some(r0) = cfg.r0 {
        p.r0 = r0;
    }
    p
}

fn fit_signal(
    stock_id: &str,
    investor: InvestorType,
    s: &[f64],
    sigma: &[f64],
    baseline: &[f64],
    cfg: &KalmanConfig,
) -> Result<FilteredSignal, PipelineError> {
    let wrap = |source| PipelineError::Kalman { stock_id: stock_id.to_string(), investor, source };
    let mut fit = FilterFit {
        stock_id: stock_id.to_string(),
        investor,
        params: configured_params(s, cfg),
        estimated: false,
        converged: false,
        degenerate: false,
        log_likelihood: f64::NAN,
    };
    if cfg.estimate && s.len() >= MIN_ESTIMATION_LENGTH {
        let est = estimate_params(s, sigma, baseline, cfg.gamma).map_err(wrap)?;
        if est.params.validate().is_ok() {
            fit.params = est.params;
            fit.estimated = true;
            fit.converged = est.converged;
            fit.degenerate = est.degenerate;
            fit.log_likelihood = est.log_likelihood;
        }
    }
    let out = filter_series(s, sigma, baseline, &fit.params).map_err(wrap)?;
    Ok(FilteredSignal { fit, filtered: out.filtered, gain: out.gain, measurement_var: out.measurement_var })
}

/// Filtered flow of one investor type for every series.
pub fn filter_investor(
    ingest: &IngestOutput,
    cfg: &KalmanConfig,
    investor: InvestorType,
) -> Result<Vec<FilteredSignal>, PipelineError> {
    ingest
        .series
        .par_iter()
        .map(|series| {
            let pos = calendar_positions(&ingest.calendar, series);
            let (sigma, base) = noise_inputs(ingest, series, &pos, cfg.vol_source);
            fit_signal(series.stock_id(), investor, series.flow(investor), &sigma, &base, cfg)
        })
        .collect()
}

pub fn run_filters(ingest: &IngestOutput, cfg: &KalmanConfig) -> Result<FilterStage, PipelineError> {
    let [f, ins, ind] = InvestorType::ALL.map(|inv| filter_investor(ingest, cfg, inv));
    let signals = f?.into_iter().zip(ins?).zip(ind?).map(|((a, b), c)| [a, b, c]).collect();
    Ok(FilterStage { signals })
}

// ─── Regimes ───────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeStage {
    pub model: RegimeModel,
    pub path: RegimePath,
    /// Regime used in the conditional regression, per calendar date.
    pub assigned: Vec<Regime>,
    /// One regression per investor type, on filtered flow.
    pub regressions: Vec<(InvestorType, RegimeRegression)>,
}

pub fn fit_regimes(ingest: &IngestOutput, cfg: &RunConfig) -> Result<(RegimeModel, RegimePath), PipelineError> {
    let r = ingest.market.returns();
    let model = fit_em(r, &EmOptions::from(&cfg.regime))?;
    let path = regime_path(r, &model, cfg.regime.crisis_threshold)?;
    Ok((model, path))
}

pub fn run_regimes(
    ingest: &IngestOutput,
    filters: &FilterStage,
    cfg: &RunConfig,
) -> Result<RegimeStage, PipelineError> {
    let (model, path) = fit_regimes(ingest, cfg)?;
    let assigned = match cfg.regime.assignment {
        RegimeAssignment::Filtered => path.state.clone(),
        RegimeAssignment::Smoothed => path.smoothed_state(),
    };
    let states: Vec<Option<Regime>> = assigned.iter().copied().map(Some).collect();
    let positions: Vec<Vec<usize>> = ingest.series.iter().map(|s| calendar_positions(&ingest.calendar, s)).collect();
    let mut regressions = Vec::with_capacity(3);
    for inv in InvestorType::ALL {
        let aligned: Vec<AlignedSignal> = ingest
            .series
            .iter()
            .enumerate()
            .map(|(k, s)| AlignedSignal {
                calendar_index: &positions[k],
                signal: &filters.signal(k, inv).filtered,
                returns: s.returns(),
            })
            .collect();
        let reg = regime_conditional_regression(
            &aligned,
            &states,
            cfg.regime.flow_unit,
            cfg.regime.min_regime_observations,
            cfg.predict.covariance,
        )?;
        regressions.push((inv, reg));
    }
    Ok(RegimeStage { model, path, assigned, regressions })
}

// ─── Asymmetric response ───────────────────────────────────────────────────

/// Lagged shock indicators for each observation of each series.
pub fn response_shocks(ingest: &IngestOutput, cfg: &RunConfig) -> Vec<Vec<ShockDay>> {
    let a = &cfg.asymmetry;
    let warmup = cfg.ingest.vol_seed_window;
    match a.vol_scope {
        ShockVolScope::Market => {
            let m = &ingest.market;
            let market = shock_indicators(m.returns(), m.realized_vol(), a.shock_multiple, warmup);
            ingest
                .series
                .iter()
                .map(|s| calendar_positions(&ingest.calendar, s).iter().map(|&c| market[c]).collect())
                .collect()
        }
        ShockVolScope::Stock => ingest
            .series
            .iter()
            .map(|s| shock_indicators(s.returns(), s.realized_vol(), a.shock_multiple, warmup))
            .collect(),
    }
}

pub fn asymmetry_options(a: &AsymmetryConfig) -> AsymmetryOptions {
    AsymmetryOptions { shock_scale: a.shock_scale, dependent: a.dependent, covariance: a.covariance }
}

/// One fit per investor type, on raw normalized flow.
pub fn run_asymmetry(ingest: &IngestOutput, cfg: &RunConfig) -> Result<Vec<AsymmetryFit>, PipelineError> {
    let shocks = response_shocks(ingest, cfg);
    let positions: Vec<Vec<usize>> = ingest.series.iter().map(|s| calendar_positions(&ingest.calendar, s)).collect();
    let opts = asymmetry_options(&cfg.asymmetry);
    InvestorType::ALL
        .iter()
        .map(|&inv| {
            let inputs: Vec<ResponseInput> = ingest
                .series
                .iter()
                .enumerate()
                .map(|(k, s)| ResponseInput { calendar_index: &positions[k], flow: s.flow(inv), shocks: &shocks[k] })
                .collect();
            Ok(asymmetry_fit(inv, &inputs, &opts)?)
        })
        .collect()
}

// ─── Predictive regressions ────────────────────────────────────────────────

pub fn run_predictive(
    ingest: &IngestOutput,
    filters: &FilterStage,
    cfg: &RunConfig,
) -> Result<Vec<PredictiveRow>, PipelineError> {
    let positions: Vec<Vec<usize>> = ingest.series.iter().map(|s| calendar_positions(&ingest.calendar, s)).collect();
    let mut rows = Vec::new();
    for inv in InvestorType::ALL {
        let pairs: Vec<PairedSignal> = ingest
            .series
            .iter()
            .enumerate()
            .map(|(k, s)| PairedSignal {
                calendar_index: &positions[k],
                raw: s.flow(inv),
                filtered: &filters.signal(k, inv).filtered,
                returns: s.returns(),
            })
            .collect();
        rows.extend(predictive_rows(inv, &pairs, &cfg.predict.horizons, cfg.regime.flow_unit, cfg.predict.covariance)?);
    }
    Ok(rows)
}

// ─── Backtests ─────────────────────────────────────────────────────────────

/// Dense date-by-stock matrices for one investor type.
pub fn signal_panel(ingest: &IngestOutput, filters: &FilterStage, investor: InvestorType) -> SignalPanel {
    let filtered: Vec<&[f64]> =
        (0..ingest.series.len()).map(|j| filters.signal(j, investor).filtered.as_slice()).collect();
    signal_panel_from(ingest, investor, &filtered)
}

/// As [`signal_panel`], with `filtered[j]` aligned to `ingest.series[j]`.
pub fn signal_panel_from(ingest: &IngestOutput, investor: InvestorType, filtered_flow: &[&[f64]]) -> SignalPanel {
    let t_len = ingest.calendar.len();
    let n = ingest.series.len();
    let nan = || vec![vec![f64::NAN; n]; t_len];
    let (mut raw, mut filtered, mut returns, mut market_cap) = (nan(), nan(), nan(), nan());
    for (j, s) in ingest.series.iter().enumerate() {
        let f = filtered_flow[j];
        for (k, c) in calendar_positions(&ingest.calendar, s).into_iter().enumerate() {
            raw[c][j] = s.flow(investor)[k];
            filtered[c][j] = f[k];
            returns[c][j] = s.returns()[k];
            market_cap[c][j] = s.market_cap()[k];
        }
    }
    SignalPanel {
        dates: ingest.calendar.clone(),
        stocks: ingest.series.iter().map(|s| s.stock_id().to_string()).collect(),
        raw,
        filtered,
        returns,
        market_cap,
    }
}

/// Filtered crisis probability, filtered state and same-day negative shocks.
pub fn regime_signal(ingest: &IngestOutput, path: &RegimePath, cfg: &RunConfig) -> RegimeSignal {
    let m = &ingest.market;
    let days = shock_days(m.returns(), m.realized_vol(), cfg.asymmetry.shock_multiple, cfg.ingest.vol_seed_window);
    RegimeSignal {
        p_crisis: path.p_crisis(),
        state: path.state.iter().copied().map(Some).collect(),
        negative_shock: days.iter().map(|d| d.negative).collect(),
    }
}

pub fn profile_of(fits: &[AsymmetryFit], investor: InvestorType) -> ResponseProfile {
    fits.iter().find(|f| f.investor == investor).map_or(ResponseProfile::Undetermined, AsymmetryFit::profile)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BacktestRun {
    pub spec: StrategySpec,
    pub report: BacktestReport,
}

/// All variant by investor cells.
pub fn run_backtests(
    ingest: &IngestOutput,
    filters: &FilterStage,
    regimes: &RegimeSignal,
    fits: &[AsymmetryFit],
    cfg: &RunConfig,
) -> Result<Vec<BacktestRun>, PipelineError> {
    let panels: Vec<SignalPanel> = InvestorType::ALL.iter().map(|&inv| signal_panel(ingest, filters, inv)).collect();
    let cells: Vec<(InvestorType, Variant)> =
        InvestorType::ALL.iter().flat_map(|&inv| Variant::ALL.map(|v| (inv, v))).collect();
    cells
        .par_iter()
        .map(|&(inv, variant)| {
            let spec = StrategySpec::new(variant, inv, &cfg.backtest, profile_of(fits, inv));
            let report = run_backtest(&panels[inv.index()], regimes, &spec)?;
            Ok(BacktestRun { spec, report })
        })
        .collect()
}

// ─── Reporting shapes ──────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub investor: String,
    pub strategy: String,
    #[serde(rename = "return")]
    pub total_return: f64,
    pub annualized_return: f64,
    pub sharpe: Option<f64>,
    pub calmar: Option<f64>,
    pub calmar_infinite: bool,
    pub max_drawdown: f64,
    pub turnover: f64,
    pub regime_sharpe: Vec<(Regime, Option<f64>)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsTable {
    pub headline_investor: InvestorType,
    pub n_days: usize,
    pub rows: Vec<MetricsRow>,
}

impl MetricsTable {
    /// Canonical `metrics.json` text: pretty-printed, newline-terminated.
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("metrics serialize");
        s.push('\n');
        s
    }
}

pub fn metrics_table(runs: &[BacktestRun], headline: InvestorType) -> MetricsTable {
    MetricsTable {
        headline_investor: headline,
        n_days: runs.first().map_or(0, |r| r.report.metrics.n_days),
        rows: runs
            .iter()
            .map(|r| {
                let m = &r.report.metrics;
                MetricsRow {
                    investor: r.spec.investor.label().to_string(),
                    strategy: r.spec.variant.label().to_string(),
                    total_return: m.total_return,
                    annualized_return: m.annualized_return,
                    sharpe: m.sharpe,
                    calmar: m.calmar,
                    calmar_infinite: m.calmar_infinite,
                    max_drawdown: m.max_drawdown,
                    turnover: r.report.turnover,
                    regime_sharpe: r.report.per_regime.iter().map(|b| (b.regime, b.sharpe)).collect(),
                }
            })
            .collect(),
    }
}

// ─── Robustness and sensitivity ────────────────────────────────────────────

pub fn run_robustness_stage(
    ingest: &IngestOutput,
    filters: &FilterStage,
    regimes: &RegimeSignal,
    runs: &[BacktestRun],
    cfg: &RunConfig,
) -> Result<RobustnessReport, PipelineError> {
    let inv = cfg.backtest.investor;
    let panel = signal_panel(ingest, filters, inv);
    let pairs: Vec<(StrategySpec, BacktestReport)> =
        runs.iter().filter(|r| r.spec.investor == inv).map(|r| (r.spec.clone(), r.report.clone())).collect();
    Ok(run_robustness(&panel, regimes, &pairs, cfg.backtest.bootstrap_iterations, cfg.backtest.block_length, cfg.seed)?)
}

pub const SENSITIVITY_PHI: [f64; 3] = [0.90, 0.95, 0.99];
pub const SENSITIVITY_Q_MULTIPLIER: [f64; 3] = [0.5, 1.0, 2.0];
pub const SENSITIVITY_EWMA_DECAY: [f64; 3] = [0.90, 0.94, 0.97];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityRow {
    pub phi: f64,
    pub q_multiplier: f64,
    pub ewma_decay: f64,
    pub mean_gain: f64,
    pub sharpe: Option<f64>,
    pub max_drawdown: f64,
}

/// Kalman-filtered strategy of the headline investor with `phi` fixed, each
/// series' fitted `Q` scaled, and volatility re-estimated at each decay.
pub fn run_sensitivity(
    ingest: &IngestOutput,
    filters: &FilterStage,
    regimes: &RegimeSignal,
    fits: &[AsymmetryFit],
    cfg: &RunConfig,
) -> Result<Vec<SensitivityRow>, PipelineError> {
    let inv = cfg.backtest.investor;
    let grid: Vec<(f64, f64, f64)> = SENSITIVITY_PHI
        .iter()
        .flat_map(|&p| SENSITIVITY_Q_MULTIPLIER.iter().flat_map(move |&q| SENSITIVITY_EWMA_DECAY.map(|l| (p, q, l))))
        .collect();
    let base_panel = signal_panel(ingest, filters, inv);
    let spec = StrategySpec::new(Variant::KalmanFiltered, inv, &cfg.backtest, profile_of(fits, inv));
    grid.par_iter()
        .map(|&(phi, qm, lambda)| {
            let vols = |s: &FlowSeries| -> Result<(Vec<f64>, Vec<f64>), PipelineError> {
                let sig = realized_vol_seeded(s.returns(), lambda, cfg.ingest.vol_seed_window)?;
                let base = vol_baseline(&sig, cfg.ingest.vol_baseline);
                Ok((sig, base))
            };
            let market = vols(&ingest.market)?;
            let mut panel = base_panel.clone();
            let mut gains = Vec::new();
            for (j, s) in ingest.series.iter().enumerate() {
                let pos = calendar_positions(&ingest.calendar, s);
                let (sigma, base) = match cfg.kalman.vol_source {
                    VolSource::Stock => vols(s)?,
                    VolSource::Market => {
                        (pos.iter().map(|&c| market.0[c]).collect(), pos.iter().map(|&c| market.1[c]).collect())
                    }
                };
                let fitted = &filters.signal(j, inv).fit.params;
                let params = KalmanParams { phi, q: fitted.q * qm, ..*fitted };
                let out = filter_series(s.flow(inv), &sigma, &base, &params).map_err(|source| {
                    PipelineError::Kalman { stock_id: s.stock_id().to_string(), investor: inv, source }
                })?;
                for (k, &c) in pos.iter().enumerate() {
                    panel.filtered[c][j] = out.filtered[k];
                }
                gains.extend(out.gain);
            }
            let rep = run_backtest(&panel, regimes, &spec)?;
            Ok(SensitivityRow {
                phi,
                q_multiplier: qm,
                ewma_decay: lambda,
                mean_gain: mean(&gains),
                sharpe: rep.metrics.sharpe,
                max_drawdown: rep.metrics.max_drawdown,
            })
        })
        .collect()
}

// ─── Whole pipeline ────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOutput {
    pub ingest: IngestOutput,
    pub filters: FilterStage,
    pub regimes: RegimeStage,
    pub asymmetry: Vec<AsymmetryFit>,
    pub predictive: Vec<PredictiveRow>,
    pub backtests: Vec<BacktestRun>,
    pub metrics: MetricsTable,
    pub robustness: RobustnessReport,
    pub sensitivity: Vec<SensitivityRow>,
}

pub fn run_pipeline(rows: Vec<PanelObservation>, cfg: &RunConfig) -> Result<PipelineOutput, PipelineError> {
    cfg.validate()?;
    let ingest = ingest(rows, cfg)?;
    let filters = run_filters(&ingest, &cfg.kalman)?;
    let regimes = run_regimes(&ingest, &filters, cfg)?;
    let asymmetry = run_asymmetry(&ingest, cfg)?;
    let predictive = run_predictive(&ingest, &filters, cfg)?;
    let signal = regime_signal(&ingest, &regimes.path, cfg);
    let backtests = run_backtests(&ingest, &filters, &signal, &asymmetry, cfg)?;
    let metrics = metrics_table(&backtests, cfg.backtest.investor);
    let robustness = run_robustness_stage(&ingest, &filters, &signal, &backtests, cfg)?;
    let sensitivity = run_sensitivity(&ingest, &filters, &signal, &asymmetry, cfg)?;
    Ok(PipelineOutput { ingest, filters, regimes, asymmetry, predictive, backtests, metrics, robustness, sensitivity })
}
