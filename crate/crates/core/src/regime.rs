//! Three-state Markov-switching model for market returns.
//!
//! `r_t = mu[s_t] + sigma[s_t] e_t` with `s_t` a first-order Markov chain.
//! Forward filtering works with log densities and a max shift so that tight
//! regimes (sigma around 0.5%) never underflow.

use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

use crate::config::{CovarianceKind, RegimeConfig};
use crate::econometrics::{pooled_ols, OlsError};
use crate::stats::{self, derived_rng};
use crate::types::Regime;

/// Lower bound on any regime volatility during EM.
pub const SIGMA_FLOOR: f64 = 1e-6;
/// Volatilities closer than this are treated as tied when labeling.
pub const TIE_TOLERANCE: f64 = 1e-10;
/// Bhattacharyya coefficient above which two regimes count as merged.
pub const MERGE_OVERLAP: f64 = 0.95;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RegimeError {
    #[error("empty return series")]
    Empty,
    #[error("non-finite return at t = {t}")]
    NonFinite { t: usize },
    #[error("all regime densities vanish at t = {t}")]
    ZeroLikelihood { t: usize },
    #[error("regime volatility collapsed below {SIGMA_FLOOR} after {restarts} restarts")]
    DegenerateRegime { restarts: usize },
    #[error("invalid regime model: {0}")]
    InvalidModel(String),
    #[error(transparent)]
    Ols(#[from] OlsError),
}

/// Parameters of the switching model, in fitted (unlabeled) index order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkovParams {
    pub mu: [f64; 3],
    pub sigma: [f64; 3],
    /// `transition[from][to]`.
    pub transition: [[f64; 3]; 3],
    /// Distribution of the first state.
    pub initial: [f64; 3],
}

impl MarkovParams {
    pub fn validate(&self) -> Result<(), RegimeError> {
        for (i, row) in self.transition.iter().enumerate() {
            let sum: f64 = row.iter().sum();
            if row.iter().any(|p| !(*p >= 0.0)) || (sum - 1.0).abs() > 1e-10 {
                return Err(RegimeError::InvalidModel(format!("transition row {i} is not a probability vector")));
            }
        }
        let init_sum: f64 = self.initial.iter().sum();
        if self.initial.iter().any(|p| !(*p >= 0.0)) || (init_sum - 1.0).abs() > 1e-10 {
            return Err(RegimeError::InvalidModel("initial distribution".into()));
        }
        if self.sigma.iter().any(|s| !(*s > 0.0)) || self.mu.iter().any(|m| !m.is_finite()) {
            return Err(RegimeError::InvalidModel("need finite mu and sigma > 0".into()));
        }
        Ok(())
    }

    fn permuted(&self, order: [usize; 3]) -> MarkovParams {
        let mut p = self.clone();
        for (new, &old) in order.iter().enumerate() {
            p.mu[new] = self.mu[old];
            p.sigma[new] = self.sigma[old];
            p.initial[new] = self.initial[old];
            for (new_to, &old_to) in order.iter().enumerate() {
                p.transition[new][new_to] = self.transition[old][old_to];
            }
        }
        p
    }
}

/// Stationary distribution `pi = pi P` of a 3-state chain.
pub fn stationary_distribution(p: &[[f64; 3]; 3]) -> [f64; 3] {
    use nalgebra::{Matrix3, Vector3};
    // (P' - I) pi = 0 with the last equation replaced by sum(pi) = 1.
    let mut a = Matrix3::from_fn(|i, j| p[j][i] - if i == j { 1.0 } else { 0.0 });
    for j in 0..3 {
        a[(2, j)] = 1.0;
    }
    let b = Vector3::new(0.0, 0.0, 1.0);
    match a.lu().solve(&b) {
        Some(x) if x.iter().all(|v| v.is_finite()) => {
            let mut out = [x[0].max(0.0), x[1].max(0.0), x[2].max(0.0)];
            let s: f64 = out.iter().sum();
            out.iter_mut().for_each(|v| *v /= s);
            out
        }
        // Reducible chain: fall back to the long-run average of a uniform start.
        _ => {
            let mut v = [1.0 / 3.0; 3];
            for _ in 0..10_000 {
                let mut next = [0.0; 3];
                for i in 0..3 {
                    for j in 0..3 {
                        next[j] += v[i] * p[i][j];
                    }
                }
                v = next;
            }
            v
        }
    }
}

fn log_normal_density(x: f64, mu: f64, sigma: f64) -> f64 {
    let z = (x - mu) / sigma;
    -0.5 * z * z - sigma.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
}

/// Forward-filter output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilteredPath {
    /// `xi_{t|t}`.
    pub filtered: Vec<[f64; 3]>,
    /// `xi_{t|t-1}`; the first entry is the initial distribution.
    pub predicted: Vec<[f64; 3]>,
    pub log_likelihood: f64,
}

/// Hamilton forward recursion.
pub fn hamilton_filter(returns: &[f64], params: &MarkovParams) -> Result<FilteredPath, RegimeError> {
    params.validate()?;
    if returns.is_empty() {
        return Err(RegimeError::Empty);
    }
    let n = returns.len();
    let mut filtered = Vec::with_capacity(n);
    let mut predicted = Vec::with_capacity(n);
    let mut ll = 0.0;
    let mut pred = params.initial;
    for (t, &r) in returns.iter().enumerate() {
        if !r.is_finite() {
            return Err(RegimeError::NonFinite { t });
        }
        if t > 0 {
            let prev: &[f64; 3] = &filtered[t - 1];
            pred = [0.0; 3];
            for i in 0..3 {
                for j in 0..3 {
                    pred[j] += prev[i] * params.transition[i][j];
                }
            }
        }
        let mut log_joint = [f64::NEG_INFINITY; 3];
        for s in 0..3 {
            if pred[s] > 0.0 {
                log_joint[s] = pred[s].ln() + log_normal_density(r, params.mu[s], params.sigma[s]);
            }
        }
        let m = log_joint.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !m.is_finite() {
            return Err(RegimeError::ZeroLikelihood { t });
        }
        let w = log_joint.map(|l| (l - m).exp());
        let total: f64 = w.iter().sum();
        ll += m + total.ln();
        filtered.push(w.map(|x| x / total));
        predicted.push(pred);
    }
    Ok(FilteredPath { filtered, predicted, log_likelihood: ll })
}

/// Kim backward recursion for `xi_{t|T}`.
pub fn kim_smoother(path: &FilteredPath, params: &MarkovParams) -> Vec<[f64; 3]> {
    let n = path.filtered.len();
    let mut smoothed = vec![[0.0; 3]; n];
    if n == 0 {
        return smoothed;
    }
    smoothed[n - 1] = path.filtered[n - 1];
    for t in (0..n - 1).rev() {
        let mut ratio = [0.0; 3];
        for j in 0..3 {
            if path.predicted[t + 1][j] > 0.0 {
                ratio[j] = smoothed[t + 1][j] / path.predicted[t + 1][j];
            }
        }
        let mut out = [0.0; 3];
        for i in 0..3 {
            let back: f64 = (0..3).map(|j| params.transition[i][j] * ratio[j]).sum();
            out[i] = path.filtered[t][i] * back;
        }
        let s: f64 = out.iter().sum();
        smoothed[t] = if s > 0.0 { out.map(|x| x / s) } else { path.filtered[t] };
    }
    smoothed
}

/// Label assignment: `labels[k]` is the label of fitted regime `k`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Labeling {
    pub labels: [Regime; 3],
    /// Some volatilities were within [`TIE_TOLERANCE`]; index order decided.
    pub tie_break: bool,
}

impl Labeling {
    /// Fitted index carrying `regime`.
    pub fn index_of(&self, regime: Regime) -> usize {
        self.labels.iter().position(|l| *l == regime).expect("labels are a permutation")
    }

    fn order(&self) -> [usize; 3] {
        Regime::ALL.map(|r| self.index_of(r))
    }
}

/// Crisis is the highest volatility; of the other two, Bull has the higher mean.
pub fn label_regimes(mu: &[f64; 3], sigma: &[f64; 3]) -> Labeling {
    let mut crisis = 0;
    for k in 1..3 {
        if sigma[k] > sigma[crisis] + TIE_TOLERANCE {
            crisis = k;
        }
    }
    let tie_break = (0..3).any(|i| (i + 1..3).any(|j| (sigma[i] - sigma[j]).abs() <= TIE_TOLERANCE));
    let rest: Vec<usize> = (0..3).filter(|k| *k != crisis).collect();
    let (bull, normal) = if mu[rest[1]] > mu[rest[0]] { (rest[1], rest[0]) } else { (rest[0], rest[1]) };
    let mut labels = [Regime::Normal; 3];
    labels[crisis] = Regime::Crisis;
    labels[bull] = Regime::Bull;
    labels[normal] = Regime::Normal;
    Labeling { labels, tie_break }
}

/// Bhattacharyya coefficient of two normal densities (1 = identical).
pub fn normal_overlap(mu1: f64, s1: f64, mu2: f64, s2: f64) -> f64 {
    let v = s1 * s1 + s2 * s2;
    (2.0 * s1 * s2 / v).sqrt() * (-(mu1 - mu2).powi(2) / (4.0 * v)).exp()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmOptions {
    pub max_iterations: usize,
    pub tolerance: f64,
    pub max_restarts: usize,
}

impl Default for EmOptions {
    fn default() -> Self {
        Self { max_iterations: 500, tolerance: 1e-6, max_restarts: 5 }
    }
}

impl From<&RegimeConfig> for EmOptions {
    fn from(c: &RegimeConfig) -> Self {
        Self { max_iterations: c.max_iterations, tolerance: c.tolerance, max_restarts: c.max_restarts }
    }
}

/// Fitted model, stored in label order (index 0 Bull, 1 Normal, 2 Crisis).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeModel {
    pub params: MarkovParams,
    pub log_likelihood: f64,
    pub labeling: Labeling,
    pub iterations: usize,
    pub converged: bool,
    pub restarts: usize,
    /// Log-likelihood at every EM iteration.
    pub loglik_trace: Vec<f64>,
    /// Largest pairwise Bhattacharyya overlap between regime densities.
    pub max_overlap: f64,
    /// Two regimes are statistically indistinguishable.
    pub merged: bool,
}

impl RegimeModel {
    pub fn mu(&self, r: Regime) -> f64 {
        self.params.mu[r.index()]
    }

    pub fn sigma(&self, r: Regime) -> f64 {
        self.params.sigma[r.index()]
    }

    /// Long-run share of each regime implied by the fitted chain.
    pub fn stationary(&self) -> [f64; 3] {
        stationary_distribution(&self.params.transition)
    }
}

fn tertile_init(returns: &[f64]) -> MarkovParams {
    let mut sorted = returns.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let mut mu = [0.0; 3];
    let mut sigma = [0.0; 3];
    let overall = stats::sample_sd(returns).max(SIGMA_FLOOR * 10.0);
    for k in 0..3 {
        let chunk = &sorted[k * n / 3..(k + 1) * n / 3];
        mu[k] = stats::mean(chunk);
        let sd = stats::sample_sd(chunk);
        sigma[k] = if sd.is_finite() && sd > SIGMA_FLOOR { sd } else { overall };
    }
    MarkovParams {
        mu,
        sigma,
        transition: [[0.9, 0.05, 0.05], [0.05, 0.9, 0.05], [0.05, 0.05, 0.9]],
        initial: [1.0 / 3.0; 3],
    }
}

fn perturb(init: &MarkovParams, restart: usize, scale: f64) -> MarkovParams {
    let mut rng = derived_rng(0x5EED_0E11, restart as u64);
    let mut p = init.clone();
    for k in 0..3 {
        let a: f64 = rng.random_range(-0.5..0.5);
        let b: f64 = rng.random_range(-0.5..0.5);
        p.mu[k] += a * scale;
        p.sigma[k] = (p.sigma[k] * (1.0 + b)).max(scale * 0.1);
    }
    p
}

enum EmOutcome {
    Done(MarkovParams, Vec<f64>, bool),
    Degenerate,
}

fn run_em(returns: &[f64], mut params: MarkovParams, opts: &EmOptions) -> Result<EmOutcome, RegimeError> {
    let n = returns.len();
    let mut trace = Vec::new();
    for it in 0..opts.max_iterations {
        let fp = hamilton_filter(returns, &params)?;
        let ll = fp.log_likelihood;
        if it > 0 && ll - trace[it - 1] < opts.tolerance {
            trace.push(ll);
            return Ok(EmOutcome::Done(params, trace, true));
        }
        trace.push(ll);
        let smoothed = kim_smoother(&fp, &params);

        let mut weight = [0.0; 3];
        let mut mu = [0.0; 3];
        for (g, r) in smoothed.iter().zip(returns) {
            for s in 0..3 {
                weight[s] += g[s];
                mu[s] += g[s] * r;
            }
        }
        if weight.iter().any(|w| *w < 1e-8) {
            return Ok(EmOutcome::Degenerate);
        }
        for s in 0..3 {
            mu[s] /= weight[s];
        }
        let mut sigma = [0.0; 3];
        for (g, r) in smoothed.iter().zip(returns) {
            for s in 0..3 {
                sigma[s] += g[s] * (r - mu[s]).powi(2);
            }
        }
        for s in 0..3 {
            sigma[s] = (sigma[s] / weight[s]).sqrt();
        }
        if sigma.iter().any(|s| !(*s >= SIGMA_FLOOR)) {
            return Ok(EmOutcome::Degenerate);
        }

        let mut joint = [[0.0; 3]; 3];
        let mut from = [0.0; 3];
        for t in 0..n - 1 {
            for j in 0..3 {
                let pred = fp.predicted[t + 1][j];
                if pred <= 0.0 {
                    continue;
                }
                let r = smoothed[t + 1][j] / pred;
                for i in 0..3 {
                    let x = fp.filtered[t][i] * params.transition[i][j] * r;
                    joint[i][j] += x;
                }
            }
        }
        for i in 0..3 {
            from[i] = joint[i].iter().sum();
        }
        let mut transition = params.transition;
        for i in 0..3 {
            if from[i] > 0.0 {
                for j in 0..3 {
                    transition[i][j] = joint[i][j] / from[i];
                }
            }
        }
        params = MarkovParams { mu, sigma, transition, initial: smoothed[0] };
    }
    let fp = hamilton_filter(returns, &params)?;
    trace.push(fp.log_likelihood);
    let converged = trace.len() >= 2 && trace[trace.len() - 1] - trace[trace.len() - 2] < opts.tolerance;
    Ok(EmOutcome::Done(params, trace, converged))
}

/// EM fit of the three-state model, started from return tertiles.
pub fn fit_em(returns: &[f64], opts: &EmOptions) -> Result<RegimeModel, RegimeError> {
    if returns.len() < 3 {
        return Err(RegimeError::Empty);
    }
    if let Some(t) = returns.iter().position(|r| !r.is_finite()) {
        return Err(RegimeError::NonFinite { t });
    }
    let init = tertile_init(returns);
    let scale = stats::sample_sd(returns).max(SIGMA_FLOOR);
    for restart in 0..=opts.max_restarts {
        let start = if restart == 0 { init.clone() } else { perturb(&init, restart, scale) };
        match run_em(returns, start, opts)? {
            EmOutcome::Degenerate => continue,
            EmOutcome::Done(params, trace, converged) => {
                let labeling = label_regimes(&params.mu, &params.sigma);
                let ordered = params.permuted(labeling.order());
                let mut max_overlap: f64 = 0.0;
                for i in 0..3 {
                    for j in i + 1..3 {
                        max_overlap = max_overlap.max(normal_overlap(
                            ordered.mu[i],
                            ordered.sigma[i],
                            ordered.mu[j],
                            ordered.sigma[j],
                        ));
                    }
                }
                return Ok(RegimeModel {
                    params: ordered,
                    log_likelihood: *trace.last().expect("at least one iteration"),
                    labeling: Labeling { labels: Regime::ALL, tie_break: labeling.tie_break },
                    iterations: trace.len(),
                    converged,
                    restarts: restart,
                    loglik_trace: trace,
                    max_overlap,
                    merged: max_overlap > MERGE_OVERLAP,
                });
            }
        }
    }
    Err(RegimeError::DegenerateRegime { restarts: opts.max_restarts })
}

/// Per-date regime probabilities in label order (Bull, Normal, Crisis).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimePath {
    pub filtered: Vec<[f64; 3]>,
    pub smoothed: Vec<[f64; 3]>,
    /// Most likely filtered state.
    pub state: Vec<Regime>,
    /// Filtered crisis probability above the threshold.
    pub crisis: Vec<bool>,
    pub log_likelihood: f64,
}

impl RegimePath {
    pub fn len(&self) -> usize {
        self.filtered.len()
    }

    pub fn is_empty(&self) -> bool {
        self.filtered.is_empty()
    }

    pub fn p_crisis(&self) -> Vec<f64> {
        self.filtered.iter().map(|p| p[Regime::Crisis.index()]).collect()
    }

    pub fn smoothed_state(&self) -> Vec<Regime> {
        self.smoothed.iter().map(argmax_regime).collect()
    }
}

fn argmax_regime(p: &[f64; 3]) -> Regime {
    let mut best = 0;
    for k in 1..3 {
        if p[k] > p[best] {
            best = k;
        }
    }
    Regime::ALL[best]
}

/// Filters and smooths `returns` under a fitted model.
pub fn regime_path(returns: &[f64], model: &RegimeModel, crisis_threshold: f64) -> Result<RegimePath, RegimeError> {
    let fp = hamilton_filter(returns, &model.params)?;
    let smoothed = kim_smoother(&fp, &model.params);
    let state = fp.filtered.iter().map(argmax_regime).collect();
    let crisis = fp.filtered.iter().map(|p| p[Regime::Crisis.index()] > crisis_threshold).collect();
    Ok(RegimePath { filtered: fp.filtered, smoothed, state, crisis, log_likelihood: fp.log_likelihood })
}

/// One stock's signal aligned to the shared calendar.
#[derive(Debug, Clone, Copy)]
pub struct AlignedSignal<'a> {
    /// Calendar position of each observation (strictly increasing).
    pub calendar_index: &'a [usize],
    pub signal: &'a [f64],
    pub returns: &'a [f64],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeRegressionRow {
    pub regime: Regime,
    pub alpha: f64,
    pub beta: f64,
    pub se_beta: f64,
    pub t_beta: f64,
    pub r_squared: f64,
    pub n: usize,
    pub ci_low: f64,
    pub ci_high: f64,
    /// Fewer than the minimum observations; estimates are NaN.
    pub skipped: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeRegression {
    pub rows: Vec<RegimeRegressionRow>,
    /// Observations with a next-day return and a regime assignment.
    pub usable: usize,
}

impl RegimeRegression {
    pub fn row(&self, r: Regime) -> &RegimeRegressionRow {
        &self.rows[r.index()]
    }

    /// beta(Crisis) / beta(Bull), when both were estimated.
    pub fn crisis_bull_ratio(&self) -> Option<f64> {
        let (c, b) = (self.row(Regime::Crisis), self.row(Regime::Bull));
        (!c.skipped && !b.skipped && b.beta != 0.0).then(|| c.beta / b.beta)
    }
}

/// Pooled OLS of `r_{t+1}` on `signal_t / flow_unit`, separately per regime.
///
/// `states[c]` is the regime at calendar position `c` (`None` where no
/// assignment exists). The next-day return is only used when the stock
/// trades on the following calendar date.
pub fn regime_conditional_regression(
    series: &[AlignedSignal<'_>],
    states: &[Option<Regime>],
    flow_unit: f64,
    min_observations: usize,
    covariance: CovarianceKind,
) -> Result<RegimeRegression, RegimeError> {
    let mut y: [Vec<f64>; 3] = Default::default();
    let mut x: [Vec<f64>; 3] = Default::default();
    let mut cluster: [Vec<usize>; 3] = Default::default();
    for s in series {
        for k in 0..s.signal.len().saturating_sub(1) {
            let c = s.calendar_index[k];
            if s.calendar_index[k + 1] != c + 1 {
                continue;
            }
            let Some(Some(regime)) = states.get(c) else { continue };
            let (sig, next) = (s.signal[k], s.returns[k + 1]);
            if !sig.is_finite() || !next.is_finite() {
                continue;
            }
            let i = regime.index();
            y[i].push(next);
            x[i].push(sig / flow_unit);
            cluster[i].push(c);
        }
    }
    let usable = y.iter().map(Vec::len).sum();
    let mut rows = Vec::with_capacity(3);
    for r in Regime::ALL {
        let i = r.index();
        let n = y[i].len();
        if n < min_observations.max(3) {
            rows.push(RegimeRegressionRow {
                regime: r,
                alpha: f64::NAN,
                beta: f64::NAN,
                se_beta: f64::NAN,
                t_beta: f64::NAN,
                r_squared: f64::NAN,
                n,
                ci_low: f64::NAN,
                ci_high: f64::NAN,
                skipped: true,
            });
            continue;
        }
        let fit = pooled_ols(&y[i], &[&x[i]], true, covariance, Some(&cluster[i]))?;
        let crit = StudentsT::new(0.0, 1.0, (n - 2) as f64).map(|d| d.inverse_cdf(0.975)).unwrap_or(1.959963984540054);
        let (beta, se) = (fit.coef[1], fit.se[1]);
        rows.push(RegimeRegressionRow {
            regime: r,
            alpha: fit.coef[0],
            beta,
            se_beta: se,
            t_beta: fit.t[1],
            r_squared: fit.r_squared,
            n,
            ci_low: beta - crit * se,
            ci_high: beta + crit * se,
            skipped: false,
        });
    }
    Ok(RegimeRegression { rows, usable })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{simulate_market, SynthSpec};

    fn toy() -> MarkovParams {
        MarkovParams {
            mu: [0.01, 0.0, -0.02],
            sigma: [0.01, 0.02, 0.05],
            transition: [[0.8, 0.15, 0.05], [0.1, 0.8, 0.1], [0.2, 0.2, 0.6]],
            initial: [0.5, 0.3, 0.2],
        }
    }

    /// Exhaustive enumeration of all 3^T paths.
    fn brute_force(r: &[f64], p: &MarkovParams) -> (Vec<[f64; 3]>, Vec<[f64; 3]>, f64) {
        let n = r.len();
        let density = |x: f64, s: usize| log_normal_density(x, p.mu[s], p.sigma[s]).exp();
        let total_paths = 3usize.pow(n as u32);
        let mut marg_full = vec![[0.0; 3]; n];
        // prefix[t][s]: joint of r_1..r_t and s_t, summed over earlier states.
        let mut prefix = vec![[0.0; 3]; n];
        let mut total = 0.0;
        for code in 0..total_paths {
            let mut c = code;
            let path: Vec<usize> = (0..n)
                .map(|_| {
                    let s = c % 3;
                    c /= 3;
                    s
                })
                .collect();
            let mut w = p.initial[path[0]] * density(r[0], path[0]);
            let mut partial = vec![w];
            for t in 1..n {
                w *= p.transition[path[t - 1]][path[t]] * density(r[t], path[t]);
                partial.push(w);
            }
            total += w;
            for t in 0..n {
                marg_full[t][path[t]] += w;
            }
            // Each prefix of length t+1 appears 3^(n-t-1) times.
            for t in 0..n {
                let copies = 3usize.pow((n - t - 1) as u32) as f64;
                prefix[t][path[t]] += partial[t] / copies;
            }
        }
        let smoothed = marg_full.iter().map(|m| m.map(|x| x / total)).collect();
        let filtered = prefix
            .iter()
            .map(|m| {
                let s: f64 = m.iter().sum();
                m.map(|x| x / s)
            })
            .collect();
        (filtered, smoothed, total.ln())
    }

    #[test]
    fn matches_path_enumeration() {
        let r = [0.012, -0.03, 0.004, -0.07, 0.02, 0.001];
        let p = toy();
        let fp = hamilton_filter(&r, &p).unwrap();
        let sm = kim_smoother(&fp, &p);
        let (bf_f, bf_s, bf_ll) = brute_force(&r, &p);
        assert!((fp.log_likelihood - bf_ll).abs() < 1e-10);
        for t in 0..r.len() {
            for s in 0..3 {
                assert!((fp.filtered[t][s] - bf_f[t][s]).abs() < 1e-10);
                assert!((sm[t][s] - bf_s[t][s]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn symmetric_regimes_stay_uniform() {
        let p =
            MarkovParams { mu: [0.0; 3], sigma: [0.01; 3], transition: [[1.0 / 3.0; 3]; 3], initial: [1.0 / 3.0; 3] };
        let fp = hamilton_filter(&[0.01, -0.02, 0.3], &p).unwrap();
        for f in &fp.filtered {
            for x in f {
                assert!((x - 1.0 / 3.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn absorbing_chain_stays_put() {
        let p = MarkovParams {
            transition: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            initial: [0.0, 1.0, 0.0],
            ..toy()
        };
        let r = [0.05, -0.1, 0.0, 0.2];
        let fp = hamilton_filter(&r, &p).unwrap();
        assert!(fp.filtered.iter().all(|f| *f == [0.0, 1.0, 0.0]));
        let sm = kim_smoother(&fp, &p);
        assert_eq!(sm, fp.filtered);
    }

    #[test]
    fn single_period_smoother_is_filter() {
        let fp = hamilton_filter(&[0.02], &toy()).unwrap();
        assert_eq!(kim_smoother(&fp, &toy()), fp.filtered);
    }

    #[test]
    fn identity_transition_smoother_equals_filter() {
        let p = MarkovParams { transition: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]], ..toy() };
        let r = [0.01, -0.02, 0.03, -0.04];
        let fp = hamilton_filter(&r, &p).unwrap();
        let sm = kim_smoother(&fp, &p);
        // With an absorbing chain the smoother still uses later data; only
        // the last period must coincide.
        assert_eq!(sm[3], fp.filtered[3]);
        let (_, bf_s, _) = brute_force(&r, &p);
        for t in 0..4 {
            for s in 0..3 {
                assert!((sm[t][s] - bf_s[t][s]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn tiny_volatility_does_not_underflow() {
        let p = MarkovParams { sigma: [0.001, 0.002, 0.003], ..toy() };
        let r = [0.5, -0.5, 0.4];
        let fp = hamilton_filter(&r, &p).unwrap();
        assert!(fp.log_likelihood.is_finite());
    }

    #[test]
    fn labels_follow_volatility_then_mean() {
        let mu = [0.0015, -0.0003, -0.0022];
        let sigma = [0.0054, 0.0124, 0.0387];
        let l = label_regimes(&mu, &sigma);
        assert_eq!(l.labels, [Regime::Bull, Regime::Normal, Regime::Crisis]);
        assert!(!l.tie_break);
        let perm = label_regimes(&[mu[2], mu[0], mu[1]], &[sigma[2], sigma[0], sigma[1]]);
        assert_eq!(perm.labels, [Regime::Crisis, Regime::Bull, Regime::Normal]);
        let tied = label_regimes(&[0.0, 0.001, -0.001], &[0.02, 0.01, 0.02]);
        assert!(tied.tie_break);
        assert_eq!(tied.labels[0], Regime::Crisis);
    }

    #[test]
    fn stationary_of_default_chain() {
        let pi = stationary_distribution(&SynthSpec::default().transition);
        assert!((pi[0] - 0.43).abs() < 1e-4 && (pi[2] - 0.08).abs() < 1e-4);
    }

    #[test]
    fn em_loglik_is_monotone_and_labels_are_ordered() {
        let spec = SynthSpec::default();
        let (_, r) = simulate_market(&spec, 1500, 12);
        let m = fit_em(&r, &EmOptions::default()).unwrap();
        for w in m.loglik_trace.windows(2) {
            assert!(w[1] >= w[0] - 1e-9, "{w:?}");
        }
        assert!(m.sigma(Regime::Crisis) > m.sigma(Regime::Normal));
        assert!(m.sigma(Regime::Crisis) > m.sigma(Regime::Bull));
        assert!(m.mu(Regime::Bull) > m.mu(Regime::Normal));
        assert!(!m.merged);
    }

    #[test]
    fn single_regime_data_is_flagged_merged() {
        let spec = SynthSpec { regime_mu: [0.0005; 3], regime_sigma: [0.01; 3], ..SynthSpec::default() };
        let (_, r) = simulate_market(&spec, 2000, 13);
        let m = fit_em(&r, &EmOptions::default()).unwrap();
        assert!(m.merged, "overlap {}", m.max_overlap);
    }

    #[test]
    fn crisis_flag_ignores_future_returns() {
        let spec = SynthSpec::default();
        let (_, r) = simulate_market(&spec, 600, 14);
        let m = fit_em(&r, &EmOptions::default()).unwrap();
        let full = regime_path(&r, &m, 0.3).unwrap();
        let cut = regime_path(&r[..400], &m, 0.3).unwrap();
        assert_eq!(&full.crisis[..400], &cut.crisis[..]);
        assert_eq!(&full.filtered[..400], &cut.filtered[..]);
    }

    #[test]
    fn probability_vectors_are_simplex_valued() {
        let spec = SynthSpec::default();
        let (_, r) = simulate_market(&spec, 800, 15);
        let m = fit_em(&r, &EmOptions::default()).unwrap();
        let path = regime_path(&r, &m, 0.3).unwrap();
        for p in path.filtered.iter().chain(&path.smoothed) {
            let s: f64 = p.iter().sum();
            assert!((s - 1.0).abs() < 1e-8);
            assert!(p.iter().all(|x| (0.0..=1.0).contains(x)));
        }
    }

    #[test]
    fn regime_regression_recovers_per_regime_slopes() {
        // Two regimes alternate by calendar day; slopes 1 and 3 per flow unit.
        let n = 400;
        let cal: Vec<usize> = (0..n).collect();
        let states: Vec<Option<Regime>> =
            (0..n).map(|c| Some(if (c / 50) % 2 == 0 { Regime::Bull } else { Regime::Crisis })).collect();
        let mut rng = derived_rng(3, 0);
        let mut sigs = Vec::new();
        let mut rets = Vec::new();
        for _ in 0..20 {
            let sig: Vec<f64> = (0..n).map(|_| rng.random_range(-1e-3..1e-3)).collect();
            let mut ret = vec![0.0; n];
            for t in 1..n {
                let b = if states[t - 1] == Some(Regime::Bull) { 1.0 } else { 3.0 };
                ret[t] = b * sig[t - 1] / 1e-3 + rng.random_range(-0.1..0.1);
            }
            sigs.push(sig);
            rets.push(ret);
        }
        let series: Vec<AlignedSignal> = sigs
            .iter()
            .zip(&rets)
            .map(|(s, r)| AlignedSignal { calendar_index: &cal, signal: s, returns: r })
            .collect();
        let reg = regime_conditional_regression(&series, &states, 1e-3, 30, CovarianceKind::Conventional).unwrap();
        assert!(reg.row(Regime::Normal).skipped);
        assert!((reg.row(Regime::Bull).beta - 1.0).abs() < 0.05);
        assert!((reg.row(Regime::Crisis).beta - 3.0).abs() < 0.05);
        let total: usize = reg.rows.iter().map(|r| r.n).sum();
        assert_eq!(total, reg.usable);
    }

    proptest::proptest! {
        #[test]
        fn labeling_is_permutation_invariant(
            mu in proptest::array::uniform3(-0.01f64..0.01),
            sigma in proptest::array::uniform3(0.001f64..0.05),
            which in 0usize..6
        ) {
            let perms = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
            let p = perms[which];
            let base = label_regimes(&mu, &sigma);
            let pm = [mu[p[0]], mu[p[1]], mu[p[2]]];
            let ps = [sigma[p[0]], sigma[p[1]], sigma[p[2]]];
            let moved = label_regimes(&pm, &ps);
            if !base.tie_break && mu.iter().enumerate().all(|(i, a)| mu.iter().skip(i + 1).all(|b| a != b)) {
                for k in 0..3 {
                    proptest::prop_assert_eq!(moved.labels[k], base.labels[p[k]]);
                }
            }
        }
    }
}
