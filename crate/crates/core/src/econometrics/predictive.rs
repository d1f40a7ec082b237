//! Raw versus filtered flow as predictors of compounded forward returns.

use serde::{Deserialize, Serialize};

use super::ols::{pooled_ols, OlsError};
use crate::config::CovarianceKind;
use crate::types::InvestorType;

/// Raw and filtered flow for one stock, aligned to the shared calendar.
#[derive(Debug, Clone, Copy)]
pub struct PairedSignal<'a> {
    pub calendar_index: &'a [usize],
    pub raw: &'a [f64],
    pub filtered: &'a [f64],
    pub returns: &'a [f64],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictiveRow {
    pub investor: InvestorType,
    pub horizon: usize,
    pub t_raw: f64,
    pub t_filtered: f64,
    pub r2_raw: f64,
    pub r2_filtered: f64,
    /// `(t_filtered - t_raw) / |t_raw|`.
    pub improvement: f64,
    pub beta_raw: f64,
    pub beta_filtered: f64,
    pub n: usize,
}

/// `prod_{k=1..h} (1 + r_{t+k}) - 1` when the next `h` calendar dates are all observed.
pub fn forward_return(calendar_index: &[usize], returns: &[f64], k: usize, h: usize) -> Option<f64> {
    if k + h >= returns.len() || calendar_index[k + h] != calendar_index[k] + h {
        return None;
    }
    let mut growth = 1.0;
    for r in &returns[k + 1..=k + h] {
        growth *= 1.0 + r;
    }
    Some(growth - 1.0)
}

/// `(t_f - t_r) / |t_r|`.
pub fn improvement(t_raw: f64, t_filtered: f64) -> f64 {
    (t_filtered - t_raw) / t_raw.abs()
}

/// One row per horizon: pooled OLS of `r_{t->t+h}` on raw and on filtered flow.
pub fn predictive_rows(
    investor: InvestorType,
    series: &[PairedSignal<'_>],
    horizons: &[usize],
    flow_unit: f64,
    covariance: CovarianceKind,
) -> Result<Vec<PredictiveRow>, OlsError> {
    let mut rows = Vec::with_capacity(horizons.len());
    for &h in horizons {
        let mut y = Vec::new();
        let mut raw = Vec::new();
        let mut filt = Vec::new();
        let mut cluster = Vec::new();
        for s in series {
            for k in 0..s.raw.len() {
                let Some(fwd) = forward_return(s.calendar_index, s.returns, k, h) else {
                    continue;
                };
                if !s.raw[k].is_finite() || !s.filtered[k].is_finite() {
                    continue;
                }
                y.push(fwd);
                raw.push(s.raw[k] / flow_unit);
                filt.push(s.filtered[k] / flow_unit);
                cluster.push(s.calendar_index[k]);
            }
        }
        let fr = pooled_ols(&y, &[&raw], true, covariance, Some(&cluster))?;
        let ff = pooled_ols(&y, &[&filt], true, covariance, Some(&cluster))?;
        rows.push(PredictiveRow {
            investor,
            horizon: h,
            t_raw: fr.t[1],
            t_filtered: ff.t[1],
            r2_raw: fr.r_squared,
            r2_filtered: ff.r_squared,
            improvement: improvement(fr.t[1], ff.t[1]),
            beta_raw: fr.coef[1],
            beta_filtered: ff.coef[1],
            n: y.len(),
        });
    }
    Ok(rows)
}
