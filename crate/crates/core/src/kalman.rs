//! Scalar Kalman filter whose measurement noise scales with volatility.
//!
//! ```text
//! theta_t = phi theta_{t-1} + eta_t,      eta_t ~ N(0, Q)
//! S_t     = theta_t + eps_t,              eps_t ~ N(0, R_t)
//! R_t     = R0 (sigma_t / sigma_bar)^gamma
//! K_t     = P_{t|t-1} / (P_{t|t-1} + R_t)
//! ```

use argmin::core::{CostFunction, Error as ArgminError, Executor, State, TerminationReason};
use argmin::solver::neldermead::NelderMead;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::stats;

/// `R_t = R0 * VOL_FLOOR` when realized volatility is exactly zero.
pub const VOL_FLOOR: f64 = 1e-6;

/// Minimum series length for parameter estimation.
pub const MIN_ESTIMATION_LENGTH: usize = 100;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum KalmanError {
    #[error("volatility baseline {0} is not positive")]
    NonPositiveBaseline(f64),
    #[error("non-finite input at t = {t}")]
    NonFiniteInput { t: usize },
    #[error("length mismatch: flows {flows}, volatility {vol}, baseline {baseline}")]
    LengthMismatch { flows: usize, vol: usize, baseline: usize },
    #[error("invalid Kalman parameter {name} = {value}")]
    InvalidParams { name: &'static str, value: f64 },
    #[error("series too short for estimation: {len} < {MIN_ESTIMATION_LENGTH}")]
    SeriesTooShort { len: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KalmanParams {
    pub phi: f64,
    pub q: f64,
    pub r0: f64,
    pub gamma: f64,
}

impl KalmanParams {
    pub fn new(phi: f64, q: f64, r0: f64, gamma: f64) -> Result<Self, KalmanError> {
        let p = Self { phi, q, r0, gamma };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), KalmanError> {
        let bad = |name, value| Err(KalmanError::InvalidParams { name, value });
        if !(self.phi > 0.0 && self.phi < 1.0) {
            return bad("phi", self.phi);
        }
        if !(self.q > 0.0) || !self.q.is_finite() {
            return bad("q", self.q);
        }
        if !(self.r0 > 0.0) || !self.r0.is_finite() {
            return bad("r0", self.r0);
        }
        if !(self.gamma >= 0.0) {
            return bad("gamma", self.gamma);
        }
        Ok(())
    }

    /// Stationary state variance `Q / (1 - phi^2)`.
    pub fn stationary_variance(&self) -> f64 {
        self.q / (1.0 - self.phi * self.phi)
    }

    /// Starting values from the sample variance: `Q` takes 90% and `R0` 10%.
    pub fn from_sample_variance(series: &[f64], phi: f64, gamma: f64) -> Self {
        let v = stats::sample_variance(series);
        let v = if v.is_finite() && v > 0.0 { v } else { 1e-12 };
        Self { phi, q: 0.9 * v, r0: 0.1 * v, gamma }
    }
}

/// Multiplier `(sigma / sigma_bar)^gamma` applied to `R0`.
///
/// A non-positive baseline (no volatility history yet) is treated as a unit
/// ratio. Zero volatility with `gamma > 0` maps to [`VOL_FLOOR`].
pub fn noise_ratio(sigma: f64, baseline: f64, gamma: f64) -> f64 {
    if gamma == 0.0 || !(baseline > 0.0) {
        return 1.0;
    }
    if sigma <= 0.0 {
        return VOL_FLOOR;
    }
    (sigma / baseline).powf(gamma).max(VOL_FLOOR)
}

/// `R_t = R0 (sigma_t / sigma_bar)^gamma`.
pub fn measurement_variance(params: &KalmanParams, sigma: f64, baseline: f64) -> Result<f64, KalmanError> {
    if !(baseline > 0.0) {
        return Err(KalmanError::NonPositiveBaseline(baseline));
    }
    Ok(params.r0 * noise_ratio(sigma, baseline, params.gamma))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterState {
    /// Posterior mean.
    pub mean: f64,
    /// Posterior variance.
    pub var: f64,
    pub gain: f64,
    pub r: f64,
}

impl FilterState {
    /// `theta_0 = 0`, `P_0 = Q / (1 - phi^2)`.
    pub fn initial(params: &KalmanParams) -> Self {
        Self { mean: 0.0, var: params.stationary_variance(), gain: 0.0, r: params.r0 }
    }
}

/// One predict/update cycle.
pub fn step(state: &FilterState, params: &KalmanParams, obs: f64, r: f64) -> Result<FilterState, KalmanError> {
    if !obs.is_finite() || !r.is_finite() || r < 0.0 {
        return Err(KalmanError::NonFiniteInput { t: 0 });
    }
    let m_pred = params.phi * state.mean;
    let p_pred = params.phi * params.phi * state.var + params.q;
    let denom = p_pred + r;
    let gain = if denom > 0.0 { p_pred / denom } else { 0.0 };
    Ok(FilterState { mean: m_pred + gain * (obs - m_pred), var: (1.0 - gain) * p_pred, gain, r })
}

/// Per-date filter output; every array has the input length.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FilterOutput {
    pub filtered: Vec<f64>,
    pub gain: Vec<f64>,
    pub measurement_var: Vec<f64>,
    pub predicted_var: Vec<f64>,
    pub posterior_var: Vec<f64>,
}

impl FilterOutput {
    pub fn len(&self) -> usize {
        self.filtered.len()
    }

    pub fn is_empty(&self) -> bool {
        self.filtered.is_empty()
    }
}

fn check_lengths(s: &[f64], sigma: &[f64], baseline: &[f64]) -> Result<(), KalmanError> {
    if s.len() != sigma.len() || s.len() != baseline.len() {
        return Err(KalmanError::LengthMismatch { flows: s.len(), vol: sigma.len(), baseline: baseline.len() });
    }
    Ok(())
}

/// Runs the filter over a whole series. Strictly causal.
pub fn filter_series(
    s: &[f64],
    sigma: &[f64],
    baseline: &[f64],
    params: &KalmanParams,
) -> Result<FilterOutput, KalmanError> {
    check_lengths(s, sigma, baseline)?;
    params.validate()?;
    let n = s.len();
    let mut out = FilterOutput {
        filtered: Vec::with_capacity(n),
        gain: Vec::with_capacity(n),
        measurement_var: Vec::with_capacity(n),
        predicted_var: Vec::with_capacity(n),
        posterior_var: Vec::with_capacity(n),
    };
    let mut state = FilterState::initial(params);
    for t in 0..n {
        let r = params.r0 * noise_ratio(sigma[t], baseline[t], params.gamma);
        let p_pred = params.phi * params.phi * state.var + params.q;
        state = step(&state, params, s[t], r).map_err(|_| KalmanError::NonFiniteInput { t })?;
        out.filtered.push(state.mean);
        out.gain.push(state.gain);
        out.measurement_var.push(r);
        out.predicted_var.push(p_pred);
        out.posterior_var.push(state.var);
    }
    Ok(out)
}

/// Steady-state gain of the time-invariant filter with measurement variance `r`.
///
/// Positive root of `P^2 + P (R (1 - phi^2) - Q) - Q R = 0` for the
/// predicted variance, then `K = P / (P + R)`.
pub fn steady_state_gain(phi: f64, q: f64, r: f64) -> f64 {
    let b = r * (1.0 - phi * phi) - q;
    let p = (-b + (b * b + 4.0 * q * r).sqrt()) / 2.0;
    p / (p + r)
}

/// Gaussian prediction-error log-likelihood at the given parameters.
pub fn log_likelihood(s: &[f64], sigma: &[f64], baseline: &[f64], params: &KalmanParams) -> Result<f64, KalmanError> {
    check_lengths(s, sigma, baseline)?;
    params.validate()?;
    let mut m = 0.0;
    let mut p = params.stationary_variance();
    let mut ll = 0.0;
    for t in 0..s.len() {
        let r = params.r0 * noise_ratio(sigma[t], baseline[t], params.gamma);
        let mp = params.phi * m;
        let pp = params.phi * params.phi * p + params.q;
        let f = pp + r;
        let v = s[t] - mp;
        ll -= 0.5 * ((2.0 * std::f64::consts::PI).ln() + f.ln() + v * v / f);
        let k = pp / f;
        m = mp + k * v;
        p = (1.0 - k) * pp;
    }
    Ok(ll)
}

const PHI_MIN: f64 = 0.01;
const PHI_MAX: f64 = 0.999;
const LOG_Q_MIN: f64 = -13.815510557964274; // ln 1e-6
const LOG_Q_MAX: f64 = 13.815510557964274;
/// Profile log-likelihood range below which phi counts as unidentified
/// (half the 95% chi-square(1) critical value).
const FLAT_PROFILE: f64 = 1.92;

/// Log-likelihood with `R0` concentrated out.
///
/// With `R_t = s2 c_t` and `Q = q s2`, the maximizing `s2` is the mean of
/// `v_t^2 / f_t` where `f_t` is the innovation variance in units of `s2`.
/// Returns `(loglik, s2)`.
fn concentrated(s: &[f64], ratio: &[f64], phi: f64, q: f64) -> (f64, f64) {
    let n = s.len() as f64;
    let mut m = 0.0;
    let mut p = q / (1.0 - phi * phi);
    let mut sum_ln_f = 0.0;
    let mut sum_v2 = 0.0;
    for (x, c) in s.iter().zip(ratio) {
        let mp = phi * m;
        let pp = phi * phi * p + q;
        let f = pp + c;
        let v = x - mp;
        sum_ln_f += f.ln();
        sum_v2 += v * v / f;
        let k = pp / f;
        m = mp + k * v;
        p = (1.0 - k) * pp;
    }
    let s2 = (sum_v2 / n).max(f64::MIN_POSITIVE);
    let ll = -0.5 * n * ((2.0 * std::f64::consts::PI).ln() + s2.ln() + 1.0) - 0.5 * sum_ln_f;
    (ll, s2)
}

struct NegProfile<'a> {
    s: &'a [f64],
    ratio: &'a [f64],
}

impl CostFunction for NegProfile<'_> {
    type Param = Vec<f64>;
    type Output = f64;

    fn cost(&self, x: &Self::Param) -> Result<f64, ArgminError> {
        let phi = x[0].clamp(PHI_MIN, PHI_MAX);
        let lq = x[1].clamp(LOG_Q_MIN, LOG_Q_MAX);
        let penalty = (x[0] - phi).powi(2) + (x[1] - lq).powi(2);
        let (ll, _) = concentrated(self.s, self.ratio, phi, lq.exp());
        Ok(-ll + 1e6 * penalty)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub params: KalmanParams,
    pub log_likelihood: f64,
    /// Optimizer stopped on its tolerance rather than the iteration cap.
    pub converged: bool,
    /// Likelihood flat in phi, or Q pinned at its lower bound.
    pub degenerate: bool,
    /// max - min of the phi profile likelihood over the search grid.
    pub phi_profile_range: f64,
    pub iterations: u64,
}

fn phi_grid() -> Vec<f64> {
    let mut g: Vec<f64> = (0..9).map(|i| 0.05 + 0.1 * i as f64).collect();
    g.extend([0.9, 0.93, 0.95, 0.97, 0.98, 0.99, 0.995]);
    g
}

fn log_q_grid() -> Vec<f64> {
    let n = 25;
    (0..n).map(|i| LOG_Q_MIN + (LOG_Q_MAX - LOG_Q_MIN) * i as f64 / (n - 1) as f64).collect()
}

/// Maximum-likelihood `(phi, Q, R0)` for fixed `gamma`.
///
/// A coarse grid over `(phi, ln Q/R0)` seeds a Nelder-Mead polish. The
/// search is deterministic: the same data always yields the same estimate.
pub fn estimate_params(s: &[f64], sigma: &[f64], baseline: &[f64], gamma: f64) -> Result<Estimate, KalmanError> {
    check_lengths(s, sigma, baseline)?;
    if s.len() < MIN_ESTIMATION_LENGTH {
        return Err(KalmanError::SeriesTooShort { len: s.len() });
    }
    if !(gamma >= 0.0) {
        return Err(KalmanError::InvalidParams { name: "gamma", value: gamma });
    }
    if let Some(t) = s.iter().position(|x| !x.is_finite()) {
        return Err(KalmanError::NonFiniteInput { t });
    }
    let ratio: Vec<f64> = sigma.iter().zip(baseline).map(|(sg, b)| noise_ratio(*sg, *b, gamma)).collect();

    let lqs = log_q_grid();
    let mut best = (f64::NEG_INFINITY, 0.5, 0.0);
    let mut profile = Vec::new();
    for phi in phi_grid() {
        let mut row_best = f64::NEG_INFINITY;
        for &lq in &lqs {
            let (ll, _) = concentrated(s, &ratio, phi, lq.exp());
            row_best = row_best.max(ll);
            if ll > best.0 {
                best = (ll, phi, lq);
            }
        }
        profile.push(row_best);
    }
    let hi = profile.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lo = profile.iter().copied().fold(f64::INFINITY, f64::min);
    let phi_profile_range = hi - lo;

    let (_, phi0, lq0) = best;
    let simplex = vec![vec![phi0, lq0], vec![(phi0 + 0.02).min(PHI_MAX), lq0], vec![phi0, lq0 + 0.5]];
    let cost = NegProfile { s, ratio: &ratio };
    let solver = NelderMead::new(simplex).with_sd_tolerance(1e-10).expect("positive tolerance");
    let (phi, lq, converged, iterations) = match Executor::new(cost, solver).configure(|st| st.max_iters(400)).run() {
        Ok(res) => {
            let st = res.state();
            let x = st.get_best_param().cloned().unwrap_or(vec![phi0, lq0]);
            let converged = matches!(st.get_termination_reason(), Some(TerminationReason::SolverConverged));
            (x[0], x[1], converged, st.get_iter())
        }
        Err(_) => (phi0, lq0, false, 0),
    };
    let phi = phi.clamp(PHI_MIN, PHI_MAX);
    let lq = lq.clamp(LOG_Q_MIN, LOG_Q_MAX);
    let (mut ll, mut s2) = concentrated(s, &ratio, phi, lq.exp());
    let (mut phi, mut lq) = (phi, lq);
    if ll < best.0 {
        // The polish never should lose ground, but keep the grid point if it did.
        (phi, lq) = (phi0, lq0);
        (ll, s2) = concentrated(s, &ratio, phi, lq.exp());
    }
    let degenerate = phi_profile_range < FLAT_PROFILE || lq <= LOG_Q_MIN + 1e-6;
    Ok(Estimate {
        params: KalmanParams { phi, q: lq.exp() * s2, r0: s2, gamma },
        log_likelihood: ll,
        converged,
        degenerate,
        phi_profile_range,
        iterations,
    })
}
