//! Synthetic panel generator with planted ground truth.
//!
//! The generator runs forward one day at a time because the planted shock
//! response depends on yesterday's market-aggregate return. Within a day the
//! stocks are independent and each owns its own derived RNG stream, so the
//! output is identical for any thread count.
//!
//! Generative structure per stock `j`, investor `i`, day `t`:
//!
//! ```text
//! s_t            ~ Markov(P)
//! m_t            = mu[s_t] + sigma[s_t] z_t                          market component
//! theta[i]_t     = phi theta[i]_{t-1} + a[i]_t + eta,  eta ~ N(0, Q)
//! a[i]_t         = b+[i] 1[r_{t-1} > k sig_{t-1}] c|r_{t-1}| + b-[i] 1[r_{t-1} < -k sig_{t-1}] c|r_{t-1}|
//! S[i]_t         = mean[i] + theta[i]_t + eps,  eps ~ N(0, R0 (sig_t / sigbar_t)^gamma)
//! r_jt           = m_t + sum_i beta[i][s_{t-1}] mult_j theta[i]_{t-1} / unit + iota sigma[s_t] e_jt
//! ```
//!
//! `sig_t` and `sigbar_t` are the causal EWMA volatility and expanding
//! baseline of the value-weighted market return, computed with the same
//! arithmetic the ingest stage uses.

use chrono::{Datelike, Days, NaiveDate, Weekday};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::EwmaVol;
use crate::kalman::noise_ratio;
use crate::regime::stationary_distribution;
use crate::stats::derived_rng;
use crate::types::{Date, InvestorType, PanelObservation, Regime};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SynthError {
    #[error("invalid synthetic panel parameter `{field}`: {reason}")]
    Invalid { field: &'static str, reason: String },
}

fn invalid(field: &'static str, reason: impl Into<String>) -> SynthError {
    SynthError::Invalid { field, reason: reason.into() }
}

/// Every planted parameter of the generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub seed: u64,
    pub n_stocks: usize,
    pub n_days: usize,
    pub start_date: Date,
    /// Daily mean return per regime, in `Regime` order (Bull, Normal, Crisis).
    pub regime_mu: [f64; 3],
    pub regime_sigma: [f64; 3],
    /// Row-stochastic transition matrix, `transition[from][to]`.
    pub transition: [[f64; 3]; 3],
    /// Fixed first regime; `None` draws it from the stationary distribution.
    pub initial_regime: Option<Regime>,
    /// Next-day return per flow unit, `flow_beta[investor][regime]`.
    pub flow_beta: [[f64; 3]; 3],
    pub flow_unit: f64,
    /// Planted shock response `[beta_plus, beta_minus]` per investor.
    pub shock_beta: [[f64; 2]; 3],
    pub shock_multiple: f64,
    /// Multiplier on |r| in the shock response (100 = percentage points).
    pub shock_scale: f64,
    pub phi: f64,
    pub q: f64,
    pub r0: f64,
    pub gamma: f64,
    /// Mean of the observed flow per investor.
    pub flow_mean: [f64; 3],
    pub ewma_decay: f64,
    pub vol_seed_window: usize,
    /// Idiosyncratic return volatility as a multiple of the regime volatility.
    pub idio_multiple: f64,
    /// Initial market caps are log-uniform on this range.
    pub cap_range: (f64, f64),
    /// Two-sided gross turnover (fraction of cap) added to buy and sell values.
    pub turnover: f64,
    /// Flow predictiveness tilt: 0 is uniform, 1 gives the smallest stock
    /// twice the average strength and the largest none.
    pub size_signal_slope: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            seed: 8,
            n_stocks: 200,
            n_days: 1220,
            start_date: NaiveDate::from_ymd_opt(2020, 1, 2).expect("valid date"),
            regime_mu: [0.00154, -0.00034, -0.00223],
            regime_sigma: [0.0054, 0.0124, 0.0387],
            // Stationary shares (0.43, 0.49, 0.08); mean durations 50, 50, 20 days.
            transition: [[0.98, 0.019, 0.001], [0.012714, 0.98, 0.007286], [0.0296, 0.0204, 0.95]],
            initial_regime: None,
            flow_beta: [[0.00023, 0.00064, 0.00204], [0.0, 0.0, 0.0], [0.0, 0.0, 0.0]],
            flow_unit: 1e-3,
            shock_beta: [[-0.000035, 0.000070], [-0.000021, -0.000045], [0.000089, 0.000014]],
            shock_multiple: 2.0,
            shock_scale: 100.0,
            phi: 0.95,
            q: 1e-6 * (1.0 - 0.95 * 0.95),
            r0: 2.5e-7,
            gamma: 1.0,
            flow_mean: [-0.000023, -0.000036, 0.000084],
            ewma_decay: 0.94,
            vol_seed_window: 20,
            idio_multiple: 0.5,
            cap_range: (1e10, 1e13),
            turnover: 0.002,
            size_signal_slope: 0.0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.n_stocks == 0 {
            return Err(invalid("n_stocks", "need at least one stock"));
        }
        if self.n_days < 2 {
            return Err(invalid("n_days", "need at least two days"));
        }
        for (s, row) in self.transition.iter().enumerate() {
            if row.iter().any(|p| !(*p >= 0.0)) {
                return Err(invalid("transition", format!("row {s} has a negative entry")));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-12 {
                return Err(invalid("transition", format!("row {s} sums to {sum}")));
            }
        }
        if self.regime_sigma.iter().any(|s| !(*s > 0.0)) {
            return Err(invalid("regime_sigma", "volatilities must be positive"));
        }
        if !(0.0..1.0).contains(&self.phi) {
            return Err(invalid("phi", format!("{} not in [0, 1)", self.phi)));
        }
        if !(self.q >= 0.0) || !(self.r0 >= 0.0) {
            return Err(invalid("q/r0", "noise variances must be non-negative"));
        }
        if !(self.gamma >= 0.0) {
            return Err(invalid("gamma", "must be non-negative"));
        }
        if !(self.ewma_decay > 0.0 && self.ewma_decay < 1.0) {
            return Err(invalid("ewma_decay", "must lie in (0, 1)"));
        }
        if !(self.flow_unit > 0.0) || !(self.shock_scale > 0.0) || !(self.shock_multiple > 0.0) {
            return Err(invalid("flow_unit/shock", "must be positive"));
        }
        if !(self.idio_multiple >= 0.0) || !(self.turnover >= 0.0) {
            return Err(invalid("idio_multiple/turnover", "must be non-negative"));
        }
        let (lo, hi) = self.cap_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(invalid("cap_range", format!("bad range ({lo}, {hi})")));
        }
        if !(0.0..=1.0).contains(&self.size_signal_slope) {
            return Err(invalid("size_signal_slope", "must lie in [0, 1]"));
        }
        Ok(())
    }

    /// Stationary regime distribution of the planted chain.
    pub fn stationary(&self) -> [f64; 3] {
        stationary_distribution(&self.transition)
    }
}

/// Hidden paths for one stock.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StockTruth {
    pub stock_id: String,
    pub initial_cap: f64,
    pub signal_multiplier: f64,
    /// Latent signal per investor, `theta[i][t]`.
    pub theta: [Vec<f64>; 3],
    /// Measurement noise per investor.
    pub noise: [Vec<f64>; 3],
    /// Idiosyncratic return component.
    pub idio: Vec<f64>,
}

/// Everything needed to recompute the generated observables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthTruth {
    pub spec: SynthSpec,
    pub dates: Vec<Date>,
    pub regimes: Vec<Regime>,
    pub market_component: Vec<f64>,
    /// Value-weighted aggregate of the generated stock returns.
    pub market_return: Vec<f64>,
    pub market_vol: Vec<f64>,
    pub market_vol_baseline: Vec<f64>,
    /// Planted shock response per investor and day.
    pub shock_response: [Vec<f64>; 3],
    pub stocks: Vec<StockTruth>,
}

#[derive(Debug, Clone)]
pub struct SynthPanel {
    /// Rows ordered by stock, then date.
    pub rows: Vec<PanelObservation>,
    pub truth: SynthTruth,
}

/// Weekdays starting at `start` (moved forward to a weekday if needed).
pub fn business_days(start: Date, n: usize) -> Vec<Date> {
    let mut out = Vec::with_capacity(n);
    let mut d = start;
    while out.len() < n {
        if !matches!(d.weekday(), Weekday::Sat | Weekday::Sun) {
            out.push(d);
        }
        d = d + Days::new(1);
    }
    out
}

fn draw_index<R: Rng>(rng: &mut R, probs: &[f64; 3]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // Rounding left u above the last cumulative sum: take the last state
    // with positive mass.
    probs.iter().rposition(|p| *p > 0.0).unwrap_or(2)
}

/// Samples a regime path of length `n` from the planted chain.
pub fn generate_regime_path<R: Rng>(spec: &SynthSpec, n: usize, rng: &mut R) -> Vec<Regime> {
    let mut path = Vec::with_capacity(n);
    if n == 0 {
        return path;
    }
    let mut s = match spec.initial_regime {
        Some(r) => r.index(),
        None => draw_index(rng, &spec.stationary()),
    };
    path.push(Regime::ALL[s]);
    for _ in 1..n {
        s = draw_index(rng, &spec.transition[s]);
        path.push(Regime::ALL[s]);
    }
    path
}

/// Regime path and market returns `mu[s_t] + sigma[s_t] z_t` of length `n`.
pub fn simulate_market(spec: &SynthSpec, n: usize, seed: u64) -> (Vec<Regime>, Vec<f64>) {
    let mut rng = derived_rng(seed, 0);
    let regimes = generate_regime_path(spec, n, &mut rng);
    let returns = regimes
        .iter()
        .map(|s| {
            let z: f64 = rng.sample(StandardNormal);
            spec.regime_mu[s.index()] + spec.regime_sigma[s.index()] * z
        })
        .collect();
    (regimes, returns)
}

struct StockState {
    rng: ChaCha8Rng,
    id: String,
    cap: f64,
    initial_cap: f64,
    mult: f64,
    theta: [f64; 3],
    rows: Vec<PanelObservation>,
    theta_path: [Vec<f64>; 3],
    noise_path: [Vec<f64>; 3],
    idio_path: Vec<f64>,
}

struct DayInputs {
    date: Date,
    t: usize,
    regime: usize,
    prev_regime: Option<usize>,
    market: f64,
    noise_ratio: f64,
    response: [f64; 3],
}

impl StockState {
    fn step(&mut self, spec: &SynthSpec, day: &DayInputs) {
        let sq = spec.q.sqrt();
        let meas_sd = (spec.r0 * day.noise_ratio).sqrt();
        let lagged = self.theta;
        let mut flows = [0.0; 3];
        for i in 0..3 {
            let eta: f64 = self.rng.sample(StandardNormal);
            let e: f64 = self.rng.sample(StandardNormal);
            self.theta[i] = spec.phi * self.theta[i] + day.response[i] + sq * eta;
            let noise = meas_sd * e;
            flows[i] = spec.flow_mean[i] + self.theta[i] + noise;
            self.theta_path[i].push(self.theta[i]);
            self.noise_path[i].push(noise);
        }
        let z: f64 = self.rng.sample(StandardNormal);
        let idio = spec.idio_multiple * spec.regime_sigma[day.regime] * z;
        let mut predictable = 0.0;
        if let Some(prev) = day.prev_regime {
            for (i, lag) in lagged.iter().enumerate() {
                predictable += spec.flow_beta[i][prev] * self.mult * lag / spec.flow_unit;
            }
        }
        let ret = (day.market + predictable + idio).max(-0.95);
        self.idio_path.push(idio);

        let cap_prev = self.cap;
        let base = spec.turnover * cap_prev;
        let mut buy = [0.0; 3];
        let mut sell = [0.0; 3];
        for i in 0..3 {
            let net = flows[i] * cap_prev;
            buy[i] = base + net.max(0.0);
            sell[i] = base + (-net).max(0.0);
        }
        self.rows.push(PanelObservation {
            date: day.date,
            stock_id: self.id.clone(),
            buy_value: buy,
            sell_value: sell,
            market_cap: cap_prev,
            close_return: ret,
        });
        debug_assert_eq!(self.rows.len(), day.t + 1);
        self.cap = cap_prev * (1.0 + ret);
    }
}

/// Stock identifiers `S0001`, `S0002`, ... (zero padded, so they sort numerically).
pub fn stock_ids(n: usize) -> Vec<String> {
    let width = n.to_string().len().max(4);
    (1..=n).map(|j| format!("S{j:0width$}")).collect()
}

/// Generates a full panel plus the hidden truth record.
pub fn generate_panel(spec: &SynthSpec) -> Result<SynthPanel, SynthError> {
    spec.validate()?;
    let n_days = spec.n_days;
    let dates = business_days(spec.start_date, n_days);
    let mut market_rng = derived_rng(spec.seed, 0);
    let regimes = generate_regime_path(spec, n_days, &mut market_rng);

    let (lo, hi) = spec.cap_range;
    let (ln_lo, ln_hi) = (lo.ln(), hi.ln());
    let stationary_sd = (spec.q / (1.0 - spec.phi * spec.phi)).sqrt();
    let mut stocks: Vec<StockState> = stock_ids(spec.n_stocks)
        .into_iter()
        .enumerate()
        .map(|(j, id)| {
            let mut rng = derived_rng(spec.seed, j as u64 + 1);
            let u: f64 = rng.random();
            let ln_cap = ln_lo + u * (ln_hi - ln_lo);
            let z = if ln_hi > ln_lo { (ln_cap - ln_lo) / (ln_hi - ln_lo) } else { 0.5 };
            let theta = [0usize, 1, 2].map(|_| {
                let e: f64 = rng.sample(StandardNormal);
                stationary_sd * e
            });
            StockState {
                rng,
                id,
                cap: ln_cap.exp(),
                initial_cap: ln_cap.exp(),
                mult: 1.0 + spec.size_signal_slope * (1.0 - 2.0 * z),
                theta,
                rows: Vec::with_capacity(n_days),
                theta_path: [0, 1, 2].map(|_| Vec::with_capacity(n_days)),
                noise_path: [0, 1, 2].map(|_| Vec::with_capacity(n_days)),
                idio_path: Vec::with_capacity(n_days),
            }
        })
        .collect();

    let mut vol = EwmaVol::new(spec.ewma_decay, spec.vol_seed_window);
    let mut sigma_sum = 0.0;
    let mut market_component = Vec::with_capacity(n_days);
    let mut market_return: Vec<f64> = Vec::with_capacity(n_days);
    let mut market_vol: Vec<f64> = Vec::with_capacity(n_days);
    let mut market_baseline = Vec::with_capacity(n_days);
    let mut shock_response = [0, 1, 2].map(|_| Vec::with_capacity(n_days));

    for t in 0..n_days {
        let s = regimes[t].index();
        let sigma = vol.sigma();
        let baseline = if t == 0 { sigma } else { sigma_sum / t as f64 };
        let z: f64 = market_rng.sample(StandardNormal);
        let market = spec.regime_mu[s] + spec.regime_sigma[s] * z;

        let mut response = [0.0; 3];
        if t > spec.vol_seed_window {
            let r = market_return[t - 1];
            let band = spec.shock_multiple * market_vol[t - 1];
            let mag = spec.shock_scale * r.abs();
            for i in 0..3 {
                if r > band {
                    response[i] = spec.shock_beta[i][0] * mag;
                } else if r < -band {
                    response[i] = spec.shock_beta[i][1] * mag;
                }
            }
        }
        let day = DayInputs {
            date: dates[t],
            t,
            regime: s,
            prev_regime: t.checked_sub(1).map(|p| regimes[p].index()),
            market,
            noise_ratio: noise_ratio(sigma, baseline, spec.gamma),
            response,
        };
        stocks.par_iter_mut().for_each(|st| st.step(spec, &day));

        // Same reduction order as the ingest aggregate.
        let mut cap_sum = 0.0;
        let mut cap_ret = 0.0;
        for st in &stocks {
            let row = &st.rows[t];
            cap_sum += row.market_cap;
            cap_ret += row.market_cap * row.close_return;
        }
        let r_mkt = cap_ret / cap_sum;

        market_component.push(market);
        market_return.push(r_mkt);
        market_vol.push(sigma);
        market_baseline.push(baseline);
        for i in 0..3 {
            shock_response[i].push(response[i]);
        }
        vol.observe(r_mkt);
        sigma_sum += sigma;
    }

    let mut rows = Vec::with_capacity(spec.n_stocks * n_days);
    let mut truths = Vec::with_capacity(spec.n_stocks);
    for st in stocks {
        rows.extend(st.rows);
        truths.push(StockTruth {
            stock_id: st.id,
            initial_cap: st.initial_cap,
            signal_multiplier: st.mult,
            theta: st.theta_path,
            noise: st.noise_path,
            idio: st.idio_path,
        });
    }
    Ok(SynthPanel {
        rows,
        truth: SynthTruth {
            spec: spec.clone(),
            dates,
            regimes,
            market_component,
            market_return,
            market_vol,
            market_vol_baseline: market_baseline,
            shock_response,
            stocks: truths,
        },
    })
}

impl SynthTruth {
    /// Latent signal of one stock and investor, if the stock exists.
    pub fn theta(&self, stock_id: &str, investor: InvestorType) -> Option<&[f64]> {
        self.stocks.iter().find(|s| s.stock_id == stock_id).map(|s| s.theta[investor.index()].as_slice())
    }
}
