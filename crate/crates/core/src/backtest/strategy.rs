//! Daily long-short strategies on raw or filtered flow.
//!
//! Weights formed from information at the close of day `t` earn the stock
//! returns of day `t + 1`. Missing values are NaN throughout.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::metrics::{compute_metrics, drawdowns, equity_curve, sharpe_ratio, PerformanceMetrics};
use crate::config::BacktestConfig;
use crate::econometrics::ResponseProfile;
use crate::types::{Date, InvestorType, Regime};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BacktestError {
    #[error("invalid strategy: {0}")]
    Invalid(String),
    #[error("{what} has {got} rows, expected {expected}")]
    ShapeMismatch { what: &'static str, expected: usize, got: usize },
    #[error("need at least two dates, got {0}")]
    TooShort(usize),
    #[error("equity fell to {equity} on {date}")]
    EquityExhausted { date: Date, equity: f64 },
    #[error("weights on {date} change when later data is removed")]
    LookaheadViolation { date: Date },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Variant {
    StaticRaw,
    KalmanFiltered,
    AllWeather,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::StaticRaw, Variant::KalmanFiltered, Variant::AllWeather];

    pub fn label(self) -> &'static str {
        match self {
            Variant::StaticRaw => "Static Raw",
            Variant::KalmanFiltered => "Kalman Filtered",
            Variant::AllWeather => "All-Weather",
        }
    }

    pub fn uses_filtered(self) -> bool {
        !matches!(self, Variant::StaticRaw)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategySpec {
    pub variant: Variant,
    pub investor: InvestorType,
    /// Fraction of the eligible cross-section held on each side.
    pub quantile: f64,
    /// All-Weather exposure is `max(0, 1 - p_crisis / threshold_cap)`.
    pub threshold_cap: f64,
    pub stop_loss: bool,
    /// Shock-response profile of `investor`, deciding whether the stop-loss applies.
    pub profile: ResponseProfile,
    pub signal_sign: f64,
    /// Charged on `sum |w_t - w_{t-1}|`.
    pub cost_bps: f64,
    pub annualization: f64,
}

impl StrategySpec {
    pub fn new(variant: Variant, investor: InvestorType, cfg: &BacktestConfig, profile: ResponseProfile) -> Self {
        Self {
            variant,
            investor,
            quantile: cfg.quantile,
            threshold_cap: cfg.threshold_cap,
            stop_loss: cfg.stop_loss,
            profile,
            signal_sign: cfg.signal_sign,
            cost_bps: cfg.cost_bps,
            annualization: cfg.annualization,
        }
    }

    pub fn validate(&self) -> Result<(), BacktestError> {
        if !(self.quantile > 0.0 && self.quantile <= 0.5) {
            return Err(BacktestError::Invalid(format!("quantile {} outside (0, 0.5]", self.quantile)));
        }
        if !(self.threshold_cap > 0.0 && self.threshold_cap <= 1.0) {
            return Err(BacktestError::Invalid(format!("threshold_cap {} outside (0, 1]", self.threshold_cap)));
        }
        if self.signal_sign != 1.0 && self.signal_sign != -1.0 {
            return Err(BacktestError::Invalid("signal_sign must be +1 or -1".into()));
        }
        if !(self.cost_bps >= 0.0) || !(self.annualization > 0.0) {
            return Err(BacktestError::Invalid("cost_bps and annualization must be non-negative and positive".into()));
        }
        Ok(())
    }

    fn stop_loss_active(&self) -> bool {
        self.variant == Variant::AllWeather && self.stop_loss && self.profile == ResponseProfile::Momentum
    }
}

/// Dense date-by-stock matrices for one investor type.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalPanel {
    pub dates: Vec<Date>,
    pub stocks: Vec<String>,
    /// `raw[t][j]`: normalized flow of stock `j` on date `t`.
    pub raw: Vec<Vec<f64>>,
    pub filtered: Vec<Vec<f64>>,
    pub returns: Vec<Vec<f64>>,
    pub market_cap: Vec<Vec<f64>>,
}

impl SignalPanel {
    pub fn validate(&self) -> Result<(), BacktestError> {
        let t = self.dates.len();
        let n = self.stocks.len();
        for (what, m) in [
            ("raw", &self.raw),
            ("filtered", &self.filtered),
            ("returns", &self.returns),
            ("market_cap", &self.market_cap),
        ] {
            if m.len() != t {
                return Err(BacktestError::ShapeMismatch { what, expected: t, got: m.len() });
            }
            if let Some(row) = m.iter().find(|r| r.len() != n) {
                return Err(BacktestError::ShapeMismatch { what, expected: n, got: row.len() });
            }
        }
        Ok(())
    }

    /// The first `len` dates.
    pub fn truncated(&self, len: usize) -> SignalPanel {
        let len = len.min(self.dates.len());
        SignalPanel {
            dates: self.dates[..len].to_vec(),
            stocks: self.stocks.clone(),
            raw: self.raw[..len].to_vec(),
            filtered: self.filtered[..len].to_vec(),
            returns: self.returns[..len].to_vec(),
            market_cap: self.market_cap[..len].to_vec(),
        }
    }

    fn signal(&self, variant: Variant) -> &[Vec<f64>] {
        if variant.uses_filtered() {
            &self.filtered
        } else {
            &self.raw
        }
    }
}

/// Market-level regime information, one entry per date.
#[derive(Debug, Clone, PartialEq)]
pub struct RegimeSignal {
    /// Filtered crisis probability; NaN when unavailable.
    pub p_crisis: Vec<f64>,
    pub state: Vec<Option<Regime>>,
    /// Same-day negative market shock.
    pub negative_shock: Vec<bool>,
}

impl RegimeSignal {
    pub fn truncated(&self, len: usize) -> RegimeSignal {
        let len = len.min(self.p_crisis.len());
        RegimeSignal {
            p_crisis: self.p_crisis[..len].to_vec(),
            state: self.state[..len].to_vec(),
            negative_shock: self.negative_shock[..len].to_vec(),
        }
    }

    fn validate(&self, t: usize) -> Result<(), BacktestError> {
        for (what, got) in [
            ("p_crisis", self.p_crisis.len()),
            ("state", self.state.len()),
            ("negative_shock", self.negative_shock.len()),
        ] {
            if got != t {
                return Err(BacktestError::ShapeMismatch { what, expected: t, got });
            }
        }
        Ok(())
    }
}

/// `max(0, 1 - p / cap)`; zero when `p` is unavailable.
pub fn regime_scale(p_crisis: f64, threshold_cap: f64) -> f64 {
    if p_crisis.is_nan() {
        0.0
    } else {
        (1.0 - p_crisis / threshold_cap).max(0.0)
    }
}

/// Equal-weight long top / short bottom `quantile` of one cross-section.
///
/// `eligible` restricts the universe. Writes zeros everywhere when fewer than
/// one name per side qualifies or the two sides are not separated.
pub fn long_short_weights(signal: &[f64], eligible: Option<&[bool]>, quantile: f64, sign: f64, out: &mut [f64]) {
    out.fill(0.0);
    let mut ranked: Vec<(f64, usize)> = signal
        .iter()
        .enumerate()
        .filter(|(j, s)| s.is_finite() && eligible.map_or(true, |e| e[*j]))
        .map(|(j, s)| (sign * s, j))
        .collect();
    let n_side = (quantile * ranked.len() as f64).floor() as usize;
    if n_side == 0 {
        return;
    }
    ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let n = ranked.len();
    if ranked[n - n_side].0 <= ranked[n_side - 1].0 {
        return;
    }
    let w = 1.0 / n_side as f64;
    for &(_, j) in &ranked[..n_side] {
        out[j] = -w;
    }
    for &(_, j) in &ranked[n - n_side..] {
        out[j] = w;
    }
}

/// Weights for every date, `weights[t][j]`.
pub fn build_positions(
    panel: &SignalPanel,
    regimes: &RegimeSignal,
    spec: &StrategySpec,
) -> Result<Vec<Vec<f64>>, BacktestError> {
    build_positions_within(panel, regimes, spec, None)
}

/// As `build_positions`, with a per-date eligibility mask `universe[t][j]`.
pub fn build_positions_within(
    panel: &SignalPanel,
    regimes: &RegimeSignal,
    spec: &StrategySpec,
    universe: Option<&[Vec<bool>]>,
) -> Result<Vec<Vec<f64>>, BacktestError> {
    spec.validate()?;
    panel.validate()?;
    let t_len = panel.dates.len();
    regimes.validate(t_len)?;
    if let Some(u) = universe {
        if u.len() != t_len {
            return Err(BacktestError::ShapeMismatch { what: "universe", expected: t_len, got: u.len() });
        }
    }
    let signal = panel.signal(spec.variant);
    let n = panel.stocks.len();
    let mut weights = vec![vec![0.0; n]; t_len];
    for (t, w) in weights.iter_mut().enumerate() {
        let p = regimes.p_crisis[t];
        if p.is_nan() {
            continue;
        }
        long_short_weights(&signal[t], universe.map(|u| u[t].as_slice()), spec.quantile, spec.signal_sign, w);
        if spec.variant == Variant::AllWeather {
            let g = regime_scale(p, spec.threshold_cap);
            for x in w.iter_mut() {
                *x *= g;
            }
            if spec.stop_loss_active() && regimes.negative_shock[t] {
                for x in w.iter_mut().filter(|x| **x > 0.0) {
                    *x = 0.0;
                }
            }
        }
    }
    Ok(weights)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeBreakdown {
    pub regime: Regime,
    pub days: usize,
    pub sharpe: Option<f64>,
    pub mean_daily: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BacktestReport {
    pub variant: Variant,
    pub investor: InvestorType,
    /// Date on which each strategy return is earned.
    pub dates: Vec<Date>,
    pub returns: Vec<f64>,
    pub equity: Vec<f64>,
    pub drawdown: Vec<f64>,
    pub metrics: PerformanceMetrics,
    /// Keyed by the regime on the formation date.
    pub per_regime: Vec<RegimeBreakdown>,
    /// Mean daily `sum |w_t - w_{t-1}|`.
    pub turnover: f64,
    pub mean_gross_exposure: f64,
}

impl BacktestReport {
    /// Largest gap between the stored curve and one rebuilt from `returns`.
    pub fn equity_discrepancy(&self) -> f64 {
        equity_curve(&self.returns).iter().zip(&self.equity).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }
}

pub fn run_backtest(
    panel: &SignalPanel,
    regimes: &RegimeSignal,
    spec: &StrategySpec,
) -> Result<BacktestReport, BacktestError> {
    let weights = build_positions(panel, regimes, spec)?;
    evaluate_weights(panel, regimes, spec, &weights)
}

/// Applies `weights[t]` to the returns of `t + 1` and summarizes the result.
pub fn evaluate_weights(
    panel: &SignalPanel,
    regimes: &RegimeSignal,
    spec: &StrategySpec,
    weights: &[Vec<f64>],
) -> Result<BacktestReport, BacktestError> {
    let t_len = panel.dates.len();
    if t_len < 2 {
        return Err(BacktestError::TooShort(t_len));
    }
    let n = panel.stocks.len();
    let cost = spec.cost_bps / 1e4;
    let mut returns = Vec::with_capacity(t_len - 1);
    let mut turnover = 0.0;
    let mut gross = 0.0;
    let zero = vec![0.0; n];
    for t in 0..t_len - 1 {
        let w = &weights[t];
        let prev = if t == 0 { &zero } else { &weights[t - 1] };
        let traded: f64 = w.iter().zip(prev).map(|(a, b)| (a - b).abs()).sum();
        let mut r = 0.0;
        for (wj, rj) in w.iter().zip(&panel.returns[t + 1]) {
            if *wj != 0.0 && rj.is_finite() {
                r += wj * rj;
            }
        }
        turnover += traded;
        gross += w.iter().map(|x| x.abs()).sum::<f64>();
        returns.push(r - cost * traded);
    }
    let equity = equity_curve(&returns);
    if let Some(k) = equity.iter().position(|e| !(*e > 0.0)) {
        return Err(BacktestError::EquityExhausted { date: panel.dates[k + 1], equity: equity[k] });
    }
    let per_regime = Regime::ALL
        .iter()
        .map(|&regime| {
            let sub: Vec<f64> = returns
                .iter()
                .enumerate()
                .filter(|(t, _)| regimes.state[*t] == Some(regime))
                .map(|(_, r)| *r)
                .collect();
            RegimeBreakdown {
                regime,
                days: sub.len(),
                sharpe: sharpe_ratio(&sub, spec.annualization),
                mean_daily: if sub.is_empty() { 0.0 } else { crate::stats::mean(&sub) },
            }
        })
        .collect();
    let days = returns.len() as f64;
    Ok(BacktestReport {
        variant: spec.variant,
        investor: spec.investor,
        dates: panel.dates[1..].to_vec(),
        drawdown: drawdowns(&equity),
        metrics: compute_metrics(&returns, spec.annualization),
        returns,
        equity,
        per_regime,
        turnover: turnover / days,
        mean_gross_exposure: gross / days,
    })
}

/// Rebuilds the weights from the panel truncated after `cut` and checks they
/// match the full-sample weights on every retained date.
pub fn verify_no_lookahead(
    panel: &SignalPanel,
    regimes: &RegimeSignal,
    spec: &StrategySpec,
    cut: usize,
) -> Result<(), BacktestError> {
    let full = build_positions(panel, regimes, spec)?;
    let short = build_positions(&panel.truncated(cut + 1), &regimes.truncated(cut + 1), spec)?;
    for (t, w) in short.iter().enumerate() {
        if w != &full[t] {
            return Err(BacktestError::LookaheadViolation { date: panel.dates[t] });
        }
    }
    Ok(())
}
