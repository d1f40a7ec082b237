//! Return, Sharpe, Calmar and drawdown from a daily return series.

use serde::{Deserialize, Serialize};

use crate::stats::{mean, sample_sd};

/// Sample standard deviations at or below this multiple of `|mean|` count as zero.
const ZERO_VARIANCE_RELATIVE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerformanceMetrics {
    pub n_days: usize,
    /// Compounded over the whole series.
    pub total_return: f64,
    pub annualized_return: f64,
    pub mean_daily: f64,
    pub sd_daily: f64,
    /// `None` when the series has zero variance or fewer than two days.
    pub sharpe: Option<f64>,
    /// Largest peak-to-trough loss as a fraction of the peak, in `[0, 1]`.
    pub max_drawdown: f64,
    /// `None` when there is no drawdown; see `calmar_infinite`.
    pub calmar: Option<f64>,
    pub calmar_infinite: bool,
    pub zero_variance: bool,
}

/// `E_0 = 1`, `E_k = E_{k-1} (1 + r_k)`; the returned curve excludes `E_0`.
pub fn equity_curve(returns: &[f64]) -> Vec<f64> {
    let mut e = 1.0;
    returns
        .iter()
        .map(|r| {
            e *= 1.0 + r;
            e
        })
        .collect()
}

/// Drawdown of each point of `equity` from the running peak (which starts at 1).
pub fn drawdowns(equity: &[f64]) -> Vec<f64> {
    let mut peak: f64 = 1.0;
    equity
        .iter()
        .map(|&e| {
            peak = peak.max(e);
            1.0 - e / peak
        })
        .collect()
}

pub fn max_drawdown(equity: &[f64]) -> f64 {
    drawdowns(equity).into_iter().fold(0.0, f64::max).clamp(0.0, 1.0)
}

/// Annualized Sharpe ratio, `mean / sd * sqrt(periods)`.
pub fn sharpe_ratio(returns: &[f64], periods_per_year: f64) -> Option<f64> {
    if returns.len() < 2 {
        return None;
    }
    let m = mean(returns);
    let sd = sample_sd(returns);
    (sd > ZERO_VARIANCE_RELATIVE * m.abs() && sd > 0.0).then(|| m / sd * periods_per_year.sqrt())
}

/// Calmar ratio of a return series; `None` without a drawdown.
pub fn calmar_ratio(returns: &[f64], periods_per_year: f64) -> Option<f64> {
    compute_metrics(returns, periods_per_year).calmar
}

pub fn compute_metrics(returns: &[f64], periods_per_year: f64) -> PerformanceMetrics {
    let n = returns.len();
    let equity = equity_curve(returns);
    let total_return = equity.last().map_or(0.0, |e| e - 1.0);
    let annualized_return = if n == 0 { 0.0 } else { (1.0 + total_return).powf(periods_per_year / n as f64) - 1.0 };
    let max_drawdown = max_drawdown(&equity);
    let sharpe = sharpe_ratio(returns, periods_per_year);
    let (calmar, calmar_infinite) = if max_drawdown > 0.0 {
        (Some(annualized_return / max_drawdown), false)
    } else {
        (None, annualized_return > 0.0)
    };
    PerformanceMetrics {
        n_days: n,
        total_return,
        annualized_return,
        mean_daily: if n == 0 { 0.0 } else { mean(returns) },
        sd_daily: if n < 2 { 0.0 } else { sample_sd(returns) },
        sharpe,
        max_drawdown,
        calmar,
        calmar_infinite,
        zero_variance: n >= 2 && sharpe.is_none(),
    }
}
