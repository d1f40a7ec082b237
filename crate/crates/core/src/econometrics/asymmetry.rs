//! Shock indicators and the asymmetric flow-response regression.
//!
//! ```text
//! dS_t = a + b+ 1[r_{t-1} > k sig] |r_{t-1}| + b- 1[r_{t-1} < -k sig] |r_{t-1}| + e_t
//! ```

use serde::{Deserialize, Serialize};

use super::ols::{pooled_ols, OlsError};
use crate::config::{CovarianceKind, FlowDependent};
use crate::types::InvestorType;

/// Ratios are only reported when `|beta_plus|` exceeds this.
pub const RATIO_EPSILON: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ShockDay {
    pub positive: bool,
    pub negative: bool,
    /// `|r|` of the shock day (zero when neither indicator fires).
    pub magnitude: f64,
}

/// Classifies each day's own return: `r_t` against `k sigma_t`.
///
/// Days before `warmup` or with zero volatility are never shocks.
pub fn shock_days(returns: &[f64], sigma: &[f64], k: f64, warmup: usize) -> Vec<ShockDay> {
    returns
        .iter()
        .zip(sigma)
        .enumerate()
        .map(|(t, (&r, &s))| {
            if t < warmup || !(s > 0.0) {
                return ShockDay::default();
            }
            let positive = r > k * s;
            let negative = r < -k * s;
            ShockDay { positive, negative, magnitude: if positive || negative { r.abs() } else { 0.0 } }
        })
        .collect()
}

/// Indicators for the response at `t`, built from `r_{t-1}` and `sigma_{t-1}`.
pub fn shock_indicators(returns: &[f64], sigma: &[f64], k: f64, warmup: usize) -> Vec<ShockDay> {
    let days = shock_days(returns, sigma, k, warmup);
    let mut out = Vec::with_capacity(days.len());
    if !days.is_empty() {
        out.push(ShockDay::default());
        out.extend_from_slice(&days[..days.len() - 1]);
    }
    out
}

/// Flow series for one stock plus the shock indicators aligned to its rows.
#[derive(Debug, Clone, Copy)]
pub struct ResponseInput<'a> {
    pub calendar_index: &'a [usize],
    pub flow: &'a [f64],
    /// `shocks[k]` applies to observation `k` (built from the previous day).
    pub shocks: &'a [ShockDay],
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AsymmetryOptions {
    /// Multiplier on `|r|` (100 reads returns in percentage points).
    pub shock_scale: f64,
    pub dependent: FlowDependent,
    pub covariance: CovarianceKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResponseProfile {
    /// `0 <= beta-/beta+ < 1`: chases rallies more than it sells declines.
    Momentum,
    /// Negative ratio: leans against the move.
    Contrarian,
    /// Ratio of at least one.
    NegativeDominant,
    Undetermined,
}

impl ResponseProfile {
    pub fn from_ratio(ratio: Option<f64>) -> Self {
        match ratio {
            Some(r) if r < 0.0 => ResponseProfile::Contrarian,
            Some(r) if r < 1.0 => ResponseProfile::Momentum,
            Some(r) if r.is_finite() => ResponseProfile::NegativeDominant,
            _ => ResponseProfile::Undetermined,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AsymmetryFit {
    pub investor: InvestorType,
    pub alpha: f64,
    pub beta_plus: f64,
    pub se_plus: f64,
    pub t_plus: f64,
    pub beta_minus: f64,
    pub se_minus: f64,
    pub t_minus: f64,
    /// `beta_minus / beta_plus`, signed.
    pub ratio: Option<f64>,
    pub wald: f64,
    pub p_value: f64,
    pub n: usize,
    pub n_positive: usize,
    pub n_negative: usize,
    /// One indicator never fired; its coefficient and the Wald test are NaN.
    pub partial: bool,
}

impl AsymmetryFit {
    pub fn profile(&self) -> ResponseProfile {
        ResponseProfile::from_ratio(self.ratio)
    }
}

/// Pooled asymmetric-response regression for one investor type.
pub fn asymmetry_fit(
    investor: InvestorType,
    inputs: &[ResponseInput<'_>],
    opts: &AsymmetryOptions,
) -> Result<AsymmetryFit, OlsError> {
    let mut y = Vec::new();
    let mut plus = Vec::new();
    let mut minus = Vec::new();
    let mut cluster = Vec::new();
    for s in inputs {
        for k in 0..s.flow.len() {
            let dep = match opts.dependent {
                FlowDependent::Level => s.flow[k],
                FlowDependent::Change => {
                    if k == 0 || s.calendar_index[k] != s.calendar_index[k - 1] + 1 {
                        continue;
                    }
                    s.flow[k] - s.flow[k - 1]
                }
            };
            if !dep.is_finite() {
                continue;
            }
            let sh = s.shocks[k];
            let mag = opts.shock_scale * sh.magnitude;
            y.push(dep);
            plus.push(if sh.positive { mag } else { 0.0 });
            minus.push(if sh.negative { mag } else { 0.0 });
            cluster.push(s.calendar_index[k]);
        }
    }
    let n_positive = plus.iter().filter(|v| **v != 0.0).count();
    let n_negative = minus.iter().filter(|v| **v != 0.0).count();
    let nan = f64::NAN;
    let mut fit = AsymmetryFit {
        investor,
        alpha: nan,
        beta_plus: nan,
        se_plus: nan,
        t_plus: nan,
        beta_minus: nan,
        se_minus: nan,
        t_minus: nan,
        ratio: None,
        wald: nan,
        p_value: nan,
        n: y.len(),
        n_positive,
        n_negative,
        partial: n_positive == 0 || n_negative == 0,
    };
    let cl = Some(cluster.as_slice());
    match (n_positive > 0, n_negative > 0) {
        (true, true) => {
            let o = pooled_ols(&y, &[&plus, &minus], true, opts.covariance, cl)?;
            fit.alpha = o.coef[0];
            (fit.beta_plus, fit.se_plus, fit.t_plus) = (o.coef[1], o.se[1], o.t[1]);
            (fit.beta_minus, fit.se_minus, fit.t_minus) = (o.coef[2], o.se[2], o.t[2]);
            (fit.wald, fit.p_value) = o.wald_equal(1, 2);
        }
        (true, false) => {
            let o = pooled_ols(&y, &[&plus], true, opts.covariance, cl)?;
            fit.alpha = o.coef[0];
            (fit.beta_plus, fit.se_plus, fit.t_plus) = (o.coef[1], o.se[1], o.t[1]);
        }
        (false, true) => {
            let o = pooled_ols(&y, &[&minus], true, opts.covariance, cl)?;
            fit.alpha = o.coef[0];
            (fit.beta_minus, fit.se_minus, fit.t_minus) = (o.coef[1], o.se[1], o.t[1]);
        }
        (false, false) => {}
    }
    if fit.beta_plus.abs() > RATIO_EPSILON && fit.beta_minus.is_finite() {
        fit.ratio = Some(fit.beta_minus / fit.beta_plus);
    }
    Ok(fit)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::{derived_rng, normal_cdf};
    use rand::Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn shock_rule_cases() {
        let s = [0.01, 0.01, 0.01];
        let d = shock_days(&[0.0, 0.03, -0.025], &s, 2.0, 0);
        assert_eq!(d[0], ShockDay::default());
        assert!(d[1].positive && !d[1].negative);
        assert!((d[1].magnitude - 0.03).abs() < 1e-15);
        assert!(d[2].negative && !d[2].positive);
        let lagged = shock_indicators(&[0.0, 0.03, -0.025], &s, 2.0, 0);
        assert_eq!(lagged[0], ShockDay::default());
        assert_eq!(lagged[2], d[1]);
    }

    #[test]
    fn gaussian_shock_frequency() {
        let mut rng = derived_rng(31, 0);
        let sigma = 0.012;
        let n = 10_000;
        let r: Vec<f64> = (0..n).map(|_| sigma * rng.sample::<f64, _>(StandardNormal)).collect();
        let d = shock_days(&r, &vec![sigma; n], 2.0, 0);
        let freq = d.iter().filter(|x| x.positive || x.negative).count() as f64 / n as f64;
        let expected = 2.0 * normal_cdf(-2.0);
        assert!((freq - expected).abs() < 0.01, "{freq} vs {expected}");
    }

    fn simulate(beta_plus: f64, beta_minus: f64, stocks: usize, seed: u64) -> AsymmetryFit {
        let n = 600;
        let mut rng = derived_rng(seed, 0);
        let r: Vec<f64> = (0..n).map(|_| 0.01 * rng.sample::<f64, _>(StandardNormal)).collect();
        let shocks = shock_indicators(&r, &vec![0.01; n], 2.0, 0);
        let cal: Vec<usize> = (0..n).collect();
        let flows: Vec<Vec<f64>> = (0..stocks)
            .map(|j| {
                let mut rng = derived_rng(seed, j as u64 + 1);
                let mut level = 0.0;
                (0..n)
                    .map(|t| {
                        let sh = shocks[t];
                        let mag = 100.0 * sh.magnitude;
                        let a = if sh.positive {
                            beta_plus * mag
                        } else if sh.negative {
                            beta_minus * mag
                        } else {
                            0.0
                        };
                        level += a + 1e-4 * rng.sample::<f64, _>(StandardNormal);
                        level
                    })
                    .collect()
            })
            .collect();
        let inputs: Vec<ResponseInput> =
            flows.iter().map(|f| ResponseInput { calendar_index: &cal, flow: f, shocks: &shocks }).collect();
        let opts = AsymmetryOptions {
            shock_scale: 100.0,
            dependent: FlowDependent::Change,
            covariance: CovarianceKind::Conventional,
        };
        asymmetry_fit(InvestorType::Individual, &inputs, &opts).unwrap()
    }

    #[test]
    fn recovers_planted_individual_response() {
        let fit = simulate(0.000089, 0.000014, 50, 41);
        for (b, se, truth) in [(fit.beta_plus, fit.se_plus, 0.000089), (fit.beta_minus, fit.se_minus, 0.000014)] {
            assert!((b - truth).abs() < 1.96 * se, "{b} vs {truth} (se {se})");
        }
        let ratio = fit.ratio.unwrap();
        assert!(ratio < 1.0 && ratio > 0.0, "{ratio}");
        assert_eq!(fit.profile(), ResponseProfile::Momentum);
    }

    #[test]
    fn contrarian_sign_pattern() {
        let fit = simulate(-0.000035, 0.000070, 50, 42);
        assert!(fit.ratio.unwrap() < 0.0);
        assert_eq!(fit.profile(), ResponseProfile::Contrarian);
    }

    #[test]
    fn wald_is_scale_free() {
        let n = 400;
        let mut rng = derived_rng(43, 0);
        let r: Vec<f64> = (0..n).map(|_| 0.01 * rng.sample::<f64, _>(StandardNormal)).collect();
        let shocks = shock_indicators(&r, &vec![0.01; n], 1.5, 0);
        let cal: Vec<usize> = (0..n).collect();
        let flow: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let scaled: Vec<f64> = flow.iter().map(|x| x * 37.5).collect();
        let opts = AsymmetryOptions {
            shock_scale: 100.0,
            dependent: FlowDependent::Change,
            covariance: CovarianceKind::Conventional,
        };
        let a = asymmetry_fit(
            InvestorType::Foreign,
            &[ResponseInput { calendar_index: &cal, flow: &flow, shocks: &shocks }],
            &opts,
        )
        .unwrap();
        let b = asymmetry_fit(
            InvestorType::Foreign,
            &[ResponseInput { calendar_index: &cal, flow: &scaled, shocks: &shocks }],
            &opts,
        )
        .unwrap();
        assert!((a.wald - b.wald).abs() < 1e-9 * a.wald.abs().max(1.0));
    }

    #[test]
    fn missing_negative_shocks_gives_partial_fit() {
        let n = 100;
        let r: Vec<f64> = (0..n).map(|t| if t % 10 == 0 { 0.05 } else { 0.0 }).collect();
        let shocks = shock_indicators(&r, &vec![0.01; n], 2.0, 0);
        let cal: Vec<usize> = (0..n).collect();
        let flow: Vec<f64> = (0..n).map(|t| (t as f64 * 0.37).sin()).collect();
        let opts = AsymmetryOptions {
            shock_scale: 100.0,
            dependent: FlowDependent::Change,
            covariance: CovarianceKind::Conventional,
        };
        let fit = asymmetry_fit(
            InvestorType::Foreign,
            &[ResponseInput { calendar_index: &cal, flow: &flow, shocks: &shocks }],
            &opts,
        )
        .unwrap();
        assert!(fit.partial);
        assert!(fit.beta_plus.is_finite());
        assert!(fit.beta_minus.is_nan() && fit.wald.is_nan());
        assert_eq!(fit.ratio, None);
    }

    proptest::proptest! {
        #[test]
        fn indicators_exclusive_and_causal(
            r in proptest::collection::vec(-0.1f64..0.1, 2..80),
            s in 0.001f64..0.05, k in 0.5f64..3.0, cut in 1usize..80
        ) {
            let n = r.len();
            let sig = vec![s; n];
            let a = shock_indicators(&r, &sig, k, 0);
            for d in &a {
                proptest::prop_assert!(!(d.positive && d.negative));
            }
            // Changing r_t for t >= cut leaves indicators up to cut unchanged.
            let cut = cut.min(n - 1);
            let mut bumped = r.clone();
            for x in bumped[cut..].iter_mut() {
                *x = -*x + 0.07;
            }
            let b = shock_indicators(&bumped, &sig, k, 0);
            proptest::prop_assert_eq!(&a[..=cut], &b[..=cut]);
        }
    }
}
