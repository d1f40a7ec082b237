//! Panel CSV ingestion and construction of per-stock flow series.
//!
//! Each retained stock gets market-cap normalized flows per investor type,
//! its returns, a causal EWMA volatility and a volatility baseline. A
//! market-aggregate series (value-weighted return, equal-weighted flow) is
//! built from the same retained stocks.

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};

use chrono::NaiveDate;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{BaselineMode, IngestConfig};
use crate::stats;
use crate::types::{DataError, Date, FlowSeries, InvestorType, Panel, PanelObservation};

/// Exact header of the panel CSV.
pub const PANEL_COLUMNS: [&str; 10] =
    ["date", "stock_id", "buy_for", "sell_for", "buy_ins", "sell_ins", "buy_ind", "sell_ind", "mcap", "return"];

/// Identifier of the market-aggregate series.
pub const MARKET_ID: &str = "MARKET";

pub const DROP_INSUFFICIENT_HISTORY: &str = "insufficient_history";

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("series too short: {len} observations, need at least 2")]
    SeriesTooShort { len: usize },
    #[error("no stocks left after filters")]
    EmptyAfterFilters,
    #[error("unexpected CSV header {found:?}")]
    HeaderMismatch { found: Vec<String> },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestStats {
    pub rows_read: usize,
    pub rows_retained: usize,
    pub dropped: BTreeMap<String, usize>,
    pub stocks_read: usize,
    pub stocks_retained: usize,
    pub first_date: Option<Date>,
    pub last_date: Option<Date>,
}

impl IngestStats {
    /// rows read == retained + all drops.
    pub fn is_consistent(&self) -> bool {
        self.rows_read == self.rows_retained + self.dropped.values().sum::<usize>()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IngestOutput {
    /// Retained stocks in stock-id order.
    pub series: Vec<FlowSeries>,
    pub market: FlowSeries,
    /// Every date in the retained panel, sorted.
    pub calendar: Vec<Date>,
    pub stats: IngestStats,
}

impl IngestOutput {
    /// Position of each date in `calendar`.
    pub fn calendar_index(&self) -> HashMap<Date, usize> {
        self.calendar.iter().enumerate().map(|(i, d)| (*d, i)).collect()
    }
}

/// `(buy - sell) / market_cap` for one investor type.
pub fn normalize_flow(obs: &PanelObservation, investor: InvestorType) -> f64 {
    obs.net_value(investor) / obs.market_cap
}

/// Incremental EWMA volatility forecaster.
///
/// `sigma()` is the forecast for the next, not yet observed, return. The
/// first `seed_window` observations feed an expanding zero-mean variance;
/// after that the RiskMetrics recursion takes over.
#[derive(Debug, Clone)]
pub struct EwmaVol {
    lambda: f64,
    seed_window: usize,
    seen: usize,
    sum_sq: f64,
    var: f64,
}

impl EwmaVol {
    pub fn new(lambda: f64, seed_window: usize) -> Self {
        Self { lambda, seed_window: seed_window.max(1), seen: 0, sum_sq: 0.0, var: 0.0 }
    }

    pub fn sigma(&self) -> f64 {
        self.var.sqrt()
    }

    pub fn observe(&mut self, r: f64) {
        if self.seen < self.seed_window {
            self.sum_sq += r * r;
            self.seen += 1;
            self.var = self.sum_sq / self.seen as f64;
        } else {
            self.var = self.lambda * self.var + (1.0 - self.lambda) * r * r;
            self.seen += 1;
        }
    }
}

/// Causal EWMA volatility with the default 20-observation seed.
pub fn realized_vol(returns: &[f64], lambda: f64) -> Result<Vec<f64>, IngestError> {
    realized_vol_seeded(returns, lambda, 20)
}

/// `sigma[t]` only uses `returns[..t]`; `sigma[0]` is 0 (nothing observed yet).
pub fn realized_vol_seeded(returns: &[f64], lambda: f64, seed_window: usize) -> Result<Vec<f64>, IngestError> {
    if returns.len() < 2 {
        return Err(IngestError::SeriesTooShort { len: returns.len() });
    }
    let mut vol = EwmaVol::new(lambda, seed_window);
    Ok(returns
        .iter()
        .map(|&r| {
            let s = vol.sigma();
            vol.observe(r);
            s
        })
        .collect())
}

/// Volatility baseline sigma bar per date.
///
/// `Expanding`: mean of `sigma[..t]`, with `sigma[0]` itself at t = 0.
pub fn vol_baseline(sigma: &[f64], mode: BaselineMode) -> Vec<f64> {
    if sigma.is_empty() {
        return Vec::new();
    }
    match mode {
        BaselineMode::FullSample => vec![stats::mean(sigma); sigma.len()],
        BaselineMode::Expanding => {
            let mut out = Vec::with_capacity(sigma.len());
            out.push(sigma[0]);
            let mut sum = 0.0;
            for (t, s) in sigma.iter().enumerate().take(sigma.len() - 1) {
                sum += s;
                out.push(sum / (t + 1) as f64);
            }
            out
        }
    }
}

/// Clamp values to their empirical `[lower, upper]` quantiles.
///
/// `(0, 1)` is the identity. NaNs pass through untouched.
pub fn winsorize(series: &[f64], lower: f64, upper: f64) -> Vec<f64> {
    if lower <= 0.0 && upper >= 1.0 {
        return series.to_vec();
    }
    let (lo, hi) = winsor_bounds(series, lower, upper);
    series.iter().map(|&x| clamp_nan(x, lo, hi)).collect()
}

fn winsor_bounds(series: &[f64], lower: f64, upper: f64) -> (f64, f64) {
    let mut v: Vec<f64> = series.iter().copied().filter(|x| !x.is_nan()).collect();
    v.sort_by(f64::total_cmp);
    (stats::quantile_sorted(&v, lower), stats::quantile_sorted(&v, upper))
}

fn clamp_nan(x: f64, lo: f64, hi: f64) -> f64 {
    if x.is_nan() {
        x
    } else {
        x.clamp(lo, hi)
    }
}

struct StockColumns<'a> {
    id: &'a str,
    dates: Vec<Date>,
    flows: [Vec<f64>; 3],
    returns: Vec<f64>,
    caps: Vec<f64>,
}

/// Builds per-stock flow series and the market aggregate.
pub fn build_flow_series(panel: &Panel, cfg: &IngestConfig, ewma_decay: f64) -> Result<IngestOutput, IngestError> {
    let mut stats = IngestStats {
        rows_read: panel.len(),
        rows_retained: 0,
        dropped: BTreeMap::new(),
        stocks_read: 0,
        stocks_retained: 0,
        first_date: None,
        last_date: None,
    };
    let mut kept: Vec<StockColumns> = Vec::new();
    for rows in panel.by_stock() {
        stats.stocks_read += 1;
        if rows.len() < cfg.min_observations.max(2) {
            *stats.dropped.entry(DROP_INSUFFICIENT_HISTORY.to_string()).or_insert(0) += rows.len();
            continue;
        }
        kept.push(StockColumns {
            id: &rows[0].stock_id,
            dates: rows.iter().map(|r| r.date).collect(),
            flows: InvestorType::ALL.map(|i| rows.iter().map(|r| normalize_flow(r, i)).collect()),
            returns: rows.iter().map(|r| r.close_return).collect(),
            caps: rows.iter().map(|r| r.market_cap).collect(),
        });
    }
    if kept.is_empty() {
        return Err(IngestError::EmptyAfterFilters);
    }
    stats.stocks_retained = kept.len();
    stats.rows_retained = kept.iter().map(|s| s.dates.len()).sum();

    // Pooled winsorization per investor type.
    for investor in InvestorType::ALL {
        let (lo, hi) = cfg.flow_winsor;
        if lo <= 0.0 && hi >= 1.0 {
            continue;
        }
        let pooled: Vec<f64> = kept.iter().flat_map(|s| s.flows[investor.index()].iter().copied()).collect();
        let (qlo, qhi) = winsor_bounds(&pooled, lo, hi);
        for s in kept.iter_mut() {
            for x in s.flows[investor.index()].iter_mut() {
                *x = clamp_nan(*x, qlo, qhi);
            }
        }
    }
    let (rlo, rhi) = cfg.return_winsor;
    if rlo > 0.0 || rhi < 1.0 {
        let pooled: Vec<f64> = kept.iter().flat_map(|s| s.returns.iter().copied()).collect();
        let (qlo, qhi) = winsor_bounds(&pooled, rlo, rhi);
        for s in kept.iter_mut() {
            for x in s.returns.iter_mut() {
                *x = clamp_nan(*x, qlo, qhi);
            }
        }
    }

    let mut calendar: Vec<Date> = kept.iter().flat_map(|s| s.dates.iter().copied()).collect();
    calendar.sort_unstable();
    calendar.dedup();
    stats.first_date = calendar.first().copied();
    stats.last_date = calendar.last().copied();
    let index: HashMap<Date, usize> = calendar.iter().enumerate().map(|(i, d)| (*d, i)).collect();

    // Per-day partial sums for the aggregate, accumulated in stock order.
    let n = calendar.len();
    let mut cap_sum = vec![0.0; n];
    let mut cap_ret = vec![0.0; n];
    let mut flow_sum = [vec![0.0; n], vec![0.0; n], vec![0.0; n]];
    let mut count = vec![0usize; n];
    for s in &kept {
        for (k, d) in s.dates.iter().enumerate() {
            let t = index[d];
            cap_sum[t] += s.caps[k];
            cap_ret[t] += s.caps[k] * s.returns[k];
            for i in 0..3 {
                flow_sum[i][t] += s.flows[i][k];
            }
            count[t] += 1;
        }
    }
    let market_returns: Vec<f64> = (0..n).map(|t| cap_ret[t] / cap_sum[t]).collect();
    let market_flows: [Vec<f64>; 3] = [0, 1, 2].map(|i| (0..n).map(|t| flow_sum[i][t] / count[t] as f64).collect());
    let market = finish_series(MARKET_ID, calendar.clone(), market_flows, market_returns, cap_sum, cfg, ewma_decay)?;

    let series = kept
        .into_par_iter()
        .map(|s| finish_series(s.id, s.dates, s.flows, s.returns, s.caps, cfg, ewma_decay))
        .collect::<Result<Vec<_>, _>>()?;

    Ok(IngestOutput { series, market, calendar, stats })
}

fn finish_series(
    id: &str,
    dates: Vec<Date>,
    flows: [Vec<f64>; 3],
    returns: Vec<f64>,
    caps: Vec<f64>,
    cfg: &IngestConfig,
    ewma_decay: f64,
) -> Result<FlowSeries, IngestError> {
    let sigma = realized_vol_seeded(&returns, ewma_decay, cfg.vol_seed_window)?;
    let baseline = vol_baseline(&sigma, cfg.vol_baseline);
    Ok(FlowSeries::new(id, dates, flows, returns, caps, sigma, baseline)?)
}

/// Reads a panel CSV with the exact [`PANEL_COLUMNS`] header.
///
/// Row numbers in errors are zero-based data-record positions, matching the
/// positions reported later by [`crate::types::validate_panel`].
pub fn read_panel_csv<R: Read>(reader: R) -> Result<Vec<PanelObservation>, IngestError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if header != PANEL_COLUMNS {
        return Err(IngestError::HeaderMismatch { found: header });
    }
    let mut rows = Vec::new();
    for (row, record) in rdr.records().enumerate() {
        let record = record?;
        rows.push(parse_record(row, &record)?);
    }
    Ok(rows)
}

fn parse_record(row: usize, rec: &csv::StringRecord) -> Result<PanelObservation, DataError> {
    let field = |col: usize| -> Result<&str, DataError> {
        match rec.get(col) {
            Some(s) if !s.is_empty() => Ok(s),
            _ => Err(DataError::MissingValue { row, column: PANEL_COLUMNS[col].to_string() }),
        }
    };
    let number = |col: usize| -> Result<f64, DataError> {
        let s = field(col)?;
        s.parse::<f64>().map_err(|e| DataError::InvalidValue {
            row,
            column: PANEL_COLUMNS[col].to_string(),
            reason: format!("`{s}`: {e}"),
        })
    };
    let raw_date = field(0)?;
    let date = NaiveDate::parse_from_str(raw_date, "%Y-%m-%d")
        .map_err(|_| DataError::UnparseableDate { row, value: raw_date.to_string() })?;
    Ok(PanelObservation {
        date,
        stock_id: field(1)?.to_string(),
        buy_value: [number(2)?, number(4)?, number(6)?],
        sell_value: [number(3)?, number(5)?, number(7)?],
        market_cap: number(8)?,
        close_return: number(9)?,
    })
}

/// Writes rows in the panel CSV schema. Floats use shortest round-trip form.
pub fn write_panel_csv<W: Write>(writer: W, rows: &[PanelObservation]) -> Result<(), IngestError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(PANEL_COLUMNS)?;
    for r in rows {
        w.write_record([
            r.date.format("%Y-%m-%d").to_string(),
            r.stock_id.clone(),
            r.buy_value[0].to_string(),
            r.sell_value[0].to_string(),
            r.buy_value[1].to_string(),
            r.sell_value[1].to_string(),
            r.buy_value[2].to_string(),
            r.sell_value[2].to_string(),
            r.market_cap.to_string(),
            r.close_return.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
