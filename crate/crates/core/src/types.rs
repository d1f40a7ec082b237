//! Core domain types shared by every stage of the pipeline.
//!
//! Everything here is an immutable value once constructed. `Panel` and
//! `FlowSeries` can only be built through checking constructors, so the
//! downstream estimators may rely on their invariants without re-validating.

use std::fmt;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Calendar day key. Dates are ordered keys only; no trading calendar is implied.
pub type Date = NaiveDate;

/// The three investor classes every flow record is disaggregated into.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InvestorType {
    Foreign,
    Institutional,
    Individual,
}

impl InvestorType {
    pub const ALL: [InvestorType; 3] = [InvestorType::Foreign, InvestorType::Institutional, InvestorType::Individual];

    /// Position of this type in per-investor arrays.
    pub const fn index(self) -> usize {
        match self {
            InvestorType::Foreign => 0,
            InvestorType::Institutional => 1,
            InvestorType::Individual => 2,
        }
    }

    /// Short column suffix used in panel CSV headers (`buy_for`, ...).
    pub fn code(self) -> &'static str {
        match self {
            InvestorType::Foreign => "for",
            InvestorType::Institutional => "ins",
            InvestorType::Individual => "ind",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            InvestorType::Foreign => "Foreign",
            InvestorType::Institutional => "Institutional",
            InvestorType::Individual => "Individual",
        }
    }
}

impl fmt::Display for InvestorType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl std::str::FromStr for InvestorType {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "foreign" | "for" => Ok(InvestorType::Foreign),
            "institutional" | "ins" => Ok(InvestorType::Institutional),
            "individual" | "ind" => Ok(InvestorType::Individual),
            other => Err(format!("unknown investor type `{other}`")),
        }
    }
}

/// Market regime labels of the three-state switching model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Regime {
    Bull,
    Normal,
    Crisis,
}

impl Regime {
    pub const ALL: [Regime; 3] = [Regime::Bull, Regime::Normal, Regime::Crisis];

    pub const fn index(self) -> usize {
        match self {
            Regime::Bull => 0,
            Regime::Normal => 1,
            Regime::Crisis => 2,
        }
    }

    pub fn from_index(i: usize) -> Option<Regime> {
        Regime::ALL.get(i).copied()
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Regime::Bull => "Bull",
            Regime::Normal => "Normal",
            Regime::Crisis => "Crisis",
        };
        f.write_str(s)
    }
}

/// One stock-day record. Currency amounts are in the panel's native currency.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelObservation {
    pub date: Date,
    pub stock_id: String,
    /// Buy value per investor type, indexed by [`InvestorType::index`].
    pub buy_value: [f64; 3],
    /// Sell value per investor type.
    pub sell_value: [f64; 3],
    /// Prior-day market capitalization.
    pub market_cap: f64,
    pub close_return: f64,
}

impl PanelObservation {
    pub fn net_value(&self, investor: InvestorType) -> f64 {
        self.buy_value[investor.index()] - self.sell_value[investor.index()]
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DataError {
    #[error("panel is empty")]
    EmptyPanel,
    #[error("row {row}: market cap {value} is not positive")]
    NonPositiveMarketCap { row: usize, value: f64 },
    #[error("row {row}: duplicate key ({stock_id}, {date})")]
    DuplicateKey { row: usize, stock_id: String, date: Date },
    #[error("row {row}: unparseable date `{value}`")]
    UnparseableDate { row: usize, value: String },
    #[error("row {row}: missing value in column `{column}`")]
    MissingValue { row: usize, column: String },
    #[error("row {row}: invalid value in column `{column}`: {reason}")]
    InvalidValue { row: usize, column: String, reason: String },
    #[error("flow series `{stock_id}`: {reason}")]
    InvalidSeries { stock_id: String, reason: String },
}

/// A validated panel: rows sorted by `(stock_id, date)` with unique keys.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Panel {
    rows: Vec<PanelObservation>,
}

impl Panel {
    pub fn rows(&self) -> &[PanelObservation] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn into_rows(self) -> Vec<PanelObservation> {
        self.rows
    }

    /// Sorted, de-duplicated trading dates present anywhere in the panel.
    pub fn calendar(&self) -> Vec<Date> {
        let mut dates: Vec<Date> = self.rows.iter().map(|r| r.date).collect();
        dates.sort_unstable();
        dates.dedup();
        dates
    }

    /// Rows grouped by stock, in stock-id order. Each group is date-sorted.
    pub fn by_stock(&self) -> impl Iterator<Item = &[PanelObservation]> {
        self.rows.chunk_by(|a, b| a.stock_id == b.stock_id)
    }
}

/// Validates raw rows into a [`Panel`].
///
/// Row numbers in errors refer to positions in `rows` as given.
pub fn validate_panel(rows: Vec<PanelObservation>) -> Result<Panel, DataError> {
    if rows.is_empty() {
        return Err(DataError::EmptyPanel);
    }
    for (row, obs) in rows.iter().enumerate() {
        check_observation(row, obs)?;
    }

    let mut indexed: Vec<(usize, PanelObservation)> = rows.into_iter().enumerate().collect();
    indexed.sort_by(|(ia, a), (ib, b)| a.stock_id.cmp(&b.stock_id).then(a.date.cmp(&b.date)).then(ia.cmp(ib)));
    for pair in indexed.windows(2) {
        let (_, a) = &pair[0];
        let (row, b) = &pair[1];
        if a.stock_id == b.stock_id && a.date == b.date {
            return Err(DataError::DuplicateKey { row: *row, stock_id: b.stock_id.clone(), date: b.date });
        }
    }
    Ok(Panel { rows: indexed.into_iter().map(|(_, r)| r).collect() })
}

fn check_observation(row: usize, obs: &PanelObservation) -> Result<(), DataError> {
    let invalid = |column: &str, reason: String| DataError::InvalidValue { row, column: column.to_string(), reason };
    if !(obs.market_cap > 0.0) || !obs.market_cap.is_finite() {
        return Err(DataError::NonPositiveMarketCap { row, value: obs.market_cap });
    }
    for investor in InvestorType::ALL {
        let i = investor.index();
        for (side, v) in [("buy", obs.buy_value[i]), ("sell", obs.sell_value[i])] {
            if !v.is_finite() || v < 0.0 {
                return Err(invalid(
                    &format!("{side}_{}", investor.code()),
                    format!("{v} is not a finite non-negative amount"),
                ));
            }
        }
    }
    if !obs.close_return.is_finite() || obs.close_return <= -1.0 {
        return Err(invalid("return", format!("{} must be finite and above -1", obs.close_return)));
    }
    if obs.stock_id.is_empty() {
        return Err(invalid("stock_id", "empty identifier".into()));
    }
    Ok(())
}

/// Normalized flows, returns and volatility for one stock (or the market aggregate).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowSeries {
    stock_id: String,
    dates: Vec<Date>,
    /// Market-cap normalized flow per investor type: `s_mc[i][t]`.
    s_mc: [Vec<f64>; 3],
    returns: Vec<f64>,
    /// Market capitalization at the start of each date (total cap for the aggregate).
    market_cap: Vec<f64>,
    realized_vol: Vec<f64>,
    /// Per-date volatility baseline (sigma bar) used to scale measurement noise.
    vol_baseline: Vec<f64>,
}

impl FlowSeries {
    pub fn new(
        stock_id: impl Into<String>,
        dates: Vec<Date>,
        s_mc: [Vec<f64>; 3],
        returns: Vec<f64>,
        market_cap: Vec<f64>,
        realized_vol: Vec<f64>,
        vol_baseline: Vec<f64>,
    ) -> Result<Self, DataError> {
        let stock_id = stock_id.into();
        let fail = |reason: String| DataError::InvalidSeries { stock_id: stock_id.clone(), reason };
        let n = dates.len();
        let lengths = [
            s_mc[0].len(),
            s_mc[1].len(),
            s_mc[2].len(),
            returns.len(),
            market_cap.len(),
            realized_vol.len(),
            vol_baseline.len(),
        ];
        if lengths.iter().any(|&l| l != n) {
            return Err(fail(format!("array lengths {lengths:?} differ from {n} dates")));
        }
        if let Some(w) = dates.windows(2).find(|w| w[0] >= w[1]) {
            return Err(fail(format!("dates not strictly increasing at {} -> {}", w[0], w[1])));
        }
        if let Some(v) = realized_vol.iter().find(|v| !(**v >= 0.0)) {
            return Err(fail(format!("negative or NaN realized volatility {v}")));
        }
        if let Some(v) = vol_baseline.iter().find(|v| !(**v >= 0.0)) {
            return Err(fail(format!("negative or NaN volatility baseline {v}")));
        }
        Ok(Self { stock_id, dates, s_mc, returns, market_cap, realized_vol, vol_baseline })
    }

    pub fn stock_id(&self) -> &str {
        &self.stock_id
    }

    pub fn dates(&self) -> &[Date] {
        &self.dates
    }

    pub fn flow(&self, investor: InvestorType) -> &[f64] {
        &self.s_mc[investor.index()]
    }

    pub fn returns(&self) -> &[f64] {
        &self.returns
    }

    pub fn market_cap(&self) -> &[f64] {
        &self.market_cap
    }

    pub fn realized_vol(&self) -> &[f64] {
        &self.realized_vol
    }

    pub fn vol_baseline(&self) -> &[f64] {
        &self.vol_baseline
    }

    pub fn len(&self) -> usize {
        self.dates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dates.is_empty()
    }
}
