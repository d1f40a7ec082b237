//! Run configuration: one structured TOML document with a section per stage.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::synth::SynthSpec;
use crate::types::InvestorType;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config value `{field}`: {reason}")]
    Invalid { field: &'static str, reason: String },
}

fn invalid(field: &'static str, reason: impl Into<String>) -> ConfigError {
    ConfigError::Invalid { field, reason: reason.into() }
}

/// Where the volatility that scales measurement noise comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VolSource {
    /// Realized volatility of the value-weighted market aggregate.
    Market,
    /// Realized volatility of the stock's own returns.
    Stock,
}

/// How the volatility baseline (sigma bar) is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineMode {
    /// Trailing expanding mean through t-1. Causal.
    Expanding,
    /// Full-sample mean everywhere. Diagnostic only: looks ahead.
    FullSample,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovarianceKind {
    Conventional,
    /// White heteroskedasticity-robust (HC1).
    Robust,
    /// Clustered by calendar date.
    ClusteredByDate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegimeAssignment {
    Filtered,
    Smoothed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlowDependent {
    /// Day-over-day flow change, as in the response equation.
    Change,
    /// Flow level, for sensitivity runs.
    Level,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShockVolScope {
    Market,
    Stock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IngestConfig {
    /// Stocks with fewer observations are dropped.
    pub min_observations: usize,
    /// Quantile clamp applied to normalized flows, pooled per investor type.
    pub flow_winsor: (f64, f64),
    pub return_winsor: (f64, f64),
    /// Observations used to seed the EWMA variance.
    pub vol_seed_window: usize,
    pub vol_baseline: BaselineMode,
}

impl Default for IngestConfig {
    fn default() -> Self {
        Self {
            min_observations: 60,
            flow_winsor: (0.01, 0.99),
            return_winsor: (0.0, 1.0),
            vol_seed_window: 20,
            vol_baseline: BaselineMode::Expanding,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KalmanConfig {
    /// Signal persistence. Starting value when `estimate` is set.
    pub phi: f64,
    /// State noise variance; `None` derives it from the series variance.
    pub q: Option<f64>,
    /// Baseline measurement variance; `None` derives it from the series variance.
    pub r0: Option<f64>,
    pub gamma: f64,
    /// EWMA decay of the realized volatility estimator.
    pub ewma_decay: f64,
    /// Fit (phi, Q, R0) per series by maximum likelihood.
    pub estimate: bool,
    pub vol_source: VolSource,
}

impl Default for KalmanConfig {
    fn default() -> Self {
        Self {
            phi: 0.95,
            q: None,
            r0: None,
            gamma: 1.0,
            ewma_decay: 0.94,
            estimate: true,
            vol_source: VolSource::Market,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegimeConfig {
    pub n_regimes: usize,
    pub crisis_threshold: f64,
    pub max_iterations: usize,
    pub tolerance: f64,
    pub max_restarts: usize,
    pub assignment: RegimeAssignment,
    /// Flow unit for the regime-conditional regression: regressor = flow / unit.
    pub flow_unit: f64,
    pub min_regime_observations: usize,
}

impl Default for RegimeConfig {
    fn default() -> Self {
        Self {
            n_regimes: 3,
            crisis_threshold: 0.30,
            max_iterations: 500,
            tolerance: 1e-6,
            max_restarts: 5,
            assignment: RegimeAssignment::Filtered,
            flow_unit: 1e-3,
            min_regime_observations: 30,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AsymmetryConfig {
    /// Shock threshold k in units of sigma.
    pub shock_multiple: f64,
    /// Multiplier applied to |r| in the design (100 = percentage points).
    pub shock_scale: f64,
    pub dependent: FlowDependent,
    pub vol_scope: ShockVolScope,
    pub covariance: CovarianceKind,
}

impl Default for AsymmetryConfig {
    fn default() -> Self {
        Self {
            shock_multiple: 2.0,
            shock_scale: 100.0,
            dependent: FlowDependent::Change,
            vol_scope: ShockVolScope::Market,
            covariance: CovarianceKind::Conventional,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictConfig {
    pub horizons: Vec<usize>,
    pub covariance: CovarianceKind,
}

impl Default for PredictConfig {
    fn default() -> Self {
        Self { horizons: vec![1, 5, 20], covariance: CovarianceKind::Conventional }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BacktestConfig {
    /// Investor type whose flow drives the headline strategy.
    pub investor: InvestorType,
    /// Fraction of the cross-section held on each side.
    pub quantile: f64,
    /// p_crisis at which All-Weather exposure reaches zero.
    pub threshold_cap: f64,
    pub stop_loss: bool,
    /// +1 follows the flow, -1 fades it.
    pub signal_sign: f64,
    pub annualization: f64,
    pub cost_bps: f64,
    pub bootstrap_iterations: usize,
    pub block_length: usize,
}

impl Default for BacktestConfig {
    fn default() -> Self {
        Self {
            investor: InvestorType::Foreign,
            quantile: 0.1,
            threshold_cap: 0.6,
            stop_loss: true,
            signal_sign: 1.0,
            annualization: 252.0,
            cost_bps: 0.0,
            bootstrap_iterations: 1000,
            block_length: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub ingest: IngestConfig,
    pub kalman: KalmanConfig,
    pub regime: RegimeConfig,
    pub asymmetry: AsymmetryConfig,
    pub predict: PredictConfig,
    pub backtest: BacktestConfig,
    pub synth: SynthSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 20_200_102,
            ingest: IngestConfig::default(),
            kalman: KalmanConfig::default(),
            regime: RegimeConfig::default(),
            asymmetry: AsymmetryConfig::default(),
            predict: PredictConfig::default(),
            backtest: BacktestConfig::default(),
            synth: SynthSpec::default(),
        }
    }
}

fn open_unit(x: f64) -> bool {
    x > 0.0 && x < 1.0
}

fn check_quantiles(field: &'static str, (lo, hi): (f64, f64)) -> Result<(), ConfigError> {
    if !(0.0 <= lo && lo < hi && hi <= 1.0) {
        return Err(invalid(field, format!("need 0 <= lower < upper <= 1, got ({lo}, {hi})")));
    }
    Ok(())
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let k = &self.kalman;
        if !open_unit(k.phi) {
            return Err(invalid("kalman.phi", format!("{} not in (0, 1)", k.phi)));
        }
        if let Some(q) = k.q {
            if !(q > 0.0) {
                return Err(invalid("kalman.q", format!("{q} must be positive")));
            }
        }
        if let Some(r0) = k.r0 {
            if !(r0 > 0.0) {
                return Err(invalid("kalman.r0", format!("{r0} must be positive")));
            }
        }
        if !(k.gamma >= 0.0) {
            return Err(invalid("kalman.gamma", format!("{} must be >= 0", k.gamma)));
        }
        if !open_unit(k.ewma_decay) {
            return Err(invalid("kalman.ewma_decay", format!("{} not in (0, 1)", k.ewma_decay)));
        }
        let r = &self.regime;
        if r.n_regimes != 3 {
            return Err(invalid("regime.n_regimes", "only three regimes are supported"));
        }
        if !open_unit(r.crisis_threshold) {
            return Err(invalid("regime.crisis_threshold", format!("{} not in (0, 1)", r.crisis_threshold)));
        }
        if r.max_iterations == 0 {
            return Err(invalid("regime.max_iterations", "must be positive"));
        }
        if !(r.tolerance > 0.0) {
            return Err(invalid("regime.tolerance", "must be positive"));
        }
        if !(r.flow_unit > 0.0) {
            return Err(invalid("regime.flow_unit", "must be positive"));
        }
        if !(self.asymmetry.shock_multiple > 0.0) {
            return Err(invalid("asymmetry.shock_multiple", "k must be positive"));
        }
        if !(self.asymmetry.shock_scale > 0.0) {
            return Err(invalid("asymmetry.shock_scale", "must be positive"));
        }
        check_quantiles("ingest.flow_winsor", self.ingest.flow_winsor)?;
        check_quantiles("ingest.return_winsor", self.ingest.return_winsor)?;
        if self.ingest.vol_seed_window == 0 {
            return Err(invalid("ingest.vol_seed_window", "must be positive"));
        }
        if self.predict.horizons.is_empty() || self.predict.horizons.contains(&0) {
            return Err(invalid("predict.horizons", "need positive horizons"));
        }
        let b = &self.backtest;
        if !(b.quantile > 0.0 && b.quantile <= 0.5) {
            return Err(invalid("backtest.quantile", format!("{} not in (0, 0.5]", b.quantile)));
        }
        if !(b.threshold_cap > 0.0 && b.threshold_cap <= 1.0) {
            return Err(invalid("backtest.threshold_cap", "must be in (0, 1]"));
        }
        if b.signal_sign != 1.0 && b.signal_sign != -1.0 {
            return Err(invalid("backtest.signal_sign", "must be +1 or -1"));
        }
        if !(b.annualization > 0.0) {
            return Err(invalid("backtest.annualization", "must be positive"));
        }
        if !(b.cost_bps >= 0.0) {
            return Err(invalid("backtest.cost_bps", "must be non-negative"));
        }
        if b.bootstrap_iterations == 0 || b.block_length == 0 {
            return Err(invalid("backtest.bootstrap", "iterations and block length must be positive"));
        }
        self.synth.validate().map_err(|e| invalid("synth", e.to_string()))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn sections_override_defaults() {
        let cfg = RunConfig::from_toml_str(
            r#"
            seed = 9
            [kalman]
            phi = 0.8
            gamma = 2.0
            [backtest]
            investor = "individual"
            signal_sign = -1.0
            "#,
        )
        .unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.kalman.phi, 0.8);
        assert_eq!(cfg.kalman.ewma_decay, 0.94);
        assert_eq!(cfg.backtest.investor, InvestorType::Individual);
    }

    #[test]
    fn out_of_range_values_rejected() {
        for text in [
            "[kalman]\nphi = 1.0",
            "[kalman]\ngamma = -0.5",
            "[kalman]\newma_decay = 0.0",
            "[kalman]\nq = 0.0",
            "[regime]\ncrisis_threshold = 1.5",
            "[asymmetry]\nshock_multiple = 0.0",
            "[ingest]\nflow_winsor = [0.9, 0.1]",
        ] {
            assert!(matches!(RunConfig::from_toml_str(text), Err(ConfigError::Invalid { .. })), "accepted `{text}`");
        }
    }

    #[test]
    fn unknown_keys_are_parse_errors() {
        assert!(matches!(RunConfig::from_toml_str("[kalman]\nphii = 0.5"), Err(ConfigError::Parse(_))));
    }
}
