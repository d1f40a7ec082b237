//! Subperiod, size-quintile and bootstrap views of a backtest.

use std::collections::BTreeMap;

use chrono::Datelike;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::{calmar_ratio, compute_metrics, sharpe_ratio, PerformanceMetrics};
use super::strategy::{
    build_positions_within, evaluate_weights, BacktestError, BacktestReport, RegimeSignal, SignalPanel, StrategySpec,
    Variant,
};
use crate::econometrics::{bootstrap_ci, BootstrapResult};
use crate::stats::quantile;

pub const N_QUINTILES: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubperiodRow {
    pub year: i32,
    pub variant: Variant,
    pub metrics: PerformanceMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuintileRow {
    /// 1 holds the smallest stocks.
    pub quintile: usize,
    pub variant: Variant,
    pub metrics: PerformanceMetrics,
    /// Average number of eligible stocks per date with a bucket.
    pub mean_members: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapRow {
    pub variant: Variant,
    pub result: BootstrapResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessReport {
    pub subperiods: Vec<SubperiodRow>,
    pub size_quintiles: Vec<QuintileRow>,
    pub bootstrap: Vec<BootstrapRow>,
}

/// Metrics of `report` restricted to each calendar year of its return dates.
pub fn subperiod_rows(report: &BacktestReport, annualization: f64) -> Vec<SubperiodRow> {
    let mut by_year: BTreeMap<i32, Vec<f64>> = BTreeMap::new();
    for (d, r) in report.dates.iter().zip(&report.returns) {
        by_year.entry(d.year()).or_default().push(*r);
    }
    by_year
        .into_iter()
        .map(|(year, r)| SubperiodRow { year, variant: report.variant, metrics: compute_metrics(&r, annualization) })
        .collect()
}

/// `buckets[t][j]`: size quintile (0-based) of stock `j` on date `t`, from
/// its median market cap over the previous calendar month.
pub fn size_buckets(panel: &SignalPanel) -> Vec<Vec<Option<usize>>> {
    let n = panel.stocks.len();
    let month = |t: usize| (panel.dates[t].year(), panel.dates[t].month());
    // Month key -> per-stock medians.
    let mut medians: BTreeMap<(i32, u32), Vec<Option<f64>>> = BTreeMap::new();
    let mut t = 0;
    while t < panel.dates.len() {
        let key = month(t);
        let end = (t..panel.dates.len()).find(|&k| month(k) != key).unwrap_or(panel.dates.len());
        let med = (0..n)
            .map(|j| {
                let caps: Vec<f64> =
                    panel.market_cap[t..end].iter().map(|row| row[j]).filter(|c| c.is_finite() && *c > 0.0).collect();
                (!caps.is_empty()).then(|| quantile(&caps, 0.5))
            })
            .collect();
        medians.insert(key, med);
        t = end;
    }
    let mut assigned: BTreeMap<(i32, u32), Vec<Option<usize>>> = BTreeMap::new();
    for &(y, m) in medians.keys() {
        let prev = if m == 1 { (y - 1, 12) } else { (y, m - 1) };
        let buckets = match medians.get(&prev) {
            Some(med) => quintile_assignment(med),
            None => vec![None; n],
        };
        assigned.insert((y, m), buckets);
    }
    (0..panel.dates.len()).map(|t| assigned[&month(t)].clone()).collect()
}

/// `floor(rank * 5 / n)` over the stocks with a value, ranked ascending.
pub fn quintile_assignment(values: &[Option<f64>]) -> Vec<Option<usize>> {
    let mut ranked: Vec<(f64, usize)> = values.iter().enumerate().filter_map(|(j, v)| v.map(|x| (x, j))).collect();
    ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let n = ranked.len();
    let mut out = vec![None; values.len()];
    for (rank, (_, j)) in ranked.into_iter().enumerate() {
        out[j] = Some(rank * N_QUINTILES / n);
    }
    out
}

/// Runs `spec` separately inside each size quintile.
pub fn quintile_rows(
    panel: &SignalPanel,
    regimes: &RegimeSignal,
    spec: &StrategySpec,
) -> Result<Vec<QuintileRow>, BacktestError> {
    let buckets = size_buckets(panel);
    (0..N_QUINTILES)
        .into_par_iter()
        .map(|q| {
            let universe: Vec<Vec<bool>> =
                buckets.iter().map(|row| row.iter().map(|b| *b == Some(q)).collect()).collect();
            let members: usize = universe.iter().map(|row| row.iter().filter(|x| **x).count()).sum();
            let dated = universe.iter().filter(|row| row.iter().any(|x| *x)).count().max(1);
            let w = build_positions_within(panel, regimes, spec, Some(&universe))?;
            let rep = evaluate_weights(panel, regimes, spec, &w)?;
            Ok(QuintileRow {
                quintile: q + 1,
                variant: spec.variant,
                metrics: rep.metrics,
                mean_members: members as f64 / dated as f64,
            })
        })
        .collect()
}

/// Block-bootstrap intervals for the Sharpe and Calmar ratios of `report`.
pub fn bootstrap_rows(
    report: &BacktestReport,
    annualization: f64,
    iterations: usize,
    block: usize,
    seed: u64,
) -> Vec<BootstrapRow> {
    let stream = seed ^ ((report.variant as u64 + 1) << 40);
    vec![
        BootstrapRow {
            variant: report.variant,
            result: bootstrap_ci(
                "sharpe",
                &report.returns,
                |x| sharpe_ratio(x, annualization),
                iterations,
                block,
                stream,
            ),
        },
        BootstrapRow {
            variant: report.variant,
            result: bootstrap_ci(
                "calmar",
                &report.returns,
                |x| calmar_ratio(x, annualization),
                iterations,
                block,
                stream ^ 1,
            ),
        },
    ]
}

/// Subperiod, size-quintile and bootstrap views for each `(spec, report)` pair.
pub fn run_robustness(
    panel: &SignalPanel,
    regimes: &RegimeSignal,
    runs: &[(StrategySpec, BacktestReport)],
    iterations: usize,
    block: usize,
    seed: u64,
) -> Result<RobustnessReport, BacktestError> {
    type Rows = (Vec<SubperiodRow>, Vec<QuintileRow>, Vec<BootstrapRow>);
    let parts: Vec<Result<Rows, BacktestError>> = runs
        .par_iter()
        .map(|(spec, report)| {
            Ok((
                subperiod_rows(report, spec.annualization),
                quintile_rows(panel, regimes, spec)?,
                bootstrap_rows(report, spec.annualization, iterations, block, seed),
            ))
        })
        .collect();
    let mut out = RobustnessReport { subperiods: Vec::new(), size_quintiles: Vec::new(), bootstrap: Vec::new() };
    for p in parts {
        let (a, b, c) = p?;
        out.subperiods.extend(a);
        out.size_quintiles.extend(b);
        out.bootstrap.extend(c);
    }
    Ok(out)
}
