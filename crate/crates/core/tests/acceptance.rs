//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.
//!
//! Every Monte Carlo design (panel size, replication count, seeds) is fixed
//! here in advance; the rationale for each lives next to the criterion.

#![allow(clippy::type_complexity, clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use regimeflow::backtest::{
    compute_metrics, run_backtest, verify_no_lookahead, RegimeSignal, SignalPanel, StrategySpec, Variant,
};
use regimeflow::config::{BacktestConfig, CovarianceKind, RunConfig};
use regimeflow::econometrics::{bootstrap_ci, predictive_rows, PairedSignal, ResponseProfile};
use regimeflow::ingest::IngestOutput;
use regimeflow::kalman::{filter_series, steady_state_gain, KalmanParams};
use regimeflow::pipeline::{
    calendar_positions, filter_investor, fit_regimes, ingest, profile_of, regime_signal, run_asymmetry, run_pipeline,
    signal_panel_from,
};
use regimeflow::regime::{
    fit_em, hamilton_filter, kim_smoother, regime_conditional_regression, regime_path, AlignedSignal, EmOptions,
    MarkovParams,
};
use regimeflow::stats::{derived_rng, mean, sample_sd};
use regimeflow::synth::{generate_panel, simulate_market, SynthSpec};
use regimeflow::types::{Date, InvestorType, Regime};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn within(elapsed: Duration, limit_s: f64) -> bool {
    elapsed.as_secs_f64() < limit_s
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("hamilton filter matches path enumeration", hamilton_oracle),
        ("kalman filter matches sequential Bayes and Riccati", kalman_oracle),
        ("EM recovers planted regime parameters", em_recovery),
        ("regime-conditional beta recovery", beta_recovery),
        ("asymmetric response sign pattern and Wald size", asymmetry_recovery),
        ("filtered signal beats raw flow", filter_value),
        ("backtest correctness", backtest_correctness),
        ("block-bootstrap Sharpe interval coverage", bootstrap_coverage),
        ("end-to-end determinism of metrics.json", determinism),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let t0 = Instant::now();
        let o = check();
        let status = if o.pass { "PASS" } else { "FAIL" };
        println!("{status}  {name}  [{:.2} s]  {}", t0.elapsed().as_secs_f64(), o.detail);
        failed += usize::from(!o.pass);
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}

// ─── Hamilton filter ───────────────────────────────────────────────────────

fn normal_pdf(x: f64, mu: f64, sigma: f64) -> f64 {
    let z = (x - mu) / sigma;
    (-0.5 * z * z).exp() / (sigma * (2.0 * std::f64::consts::PI).sqrt())
}

/// Filtered marginals, smoothed marginals and log-likelihood from all 3^T paths.
fn enumerate_paths(r: &[f64], p: &MarkovParams) -> (Vec<[f64; 3]>, Vec<[f64; 3]>, f64) {
    let n = r.len();
    let mut smoothed = vec![[0.0; 3]; n];
    // filtered_joint[t][s]: sum over paths of the density of r_0..r_t with s_t = s.
    let mut filtered_joint = vec![[0.0; 3]; n];
    let mut total = 0.0;
    for code in 0..3usize.pow(n as u32) {
        let mut c = code;
        let path: Vec<usize> = (0..n)
            .map(|_| {
                let s = c % 3;
                c /= 3;
                s
            })
            .collect();
        let mut w = p.initial[path[0]] * normal_pdf(r[0], p.mu[path[0]], p.sigma[path[0]]);
        let mut prefix = vec![w];
        for t in 1..n {
            w *= p.transition[path[t - 1]][path[t]] * normal_pdf(r[t], p.mu[path[t]], p.sigma[path[t]]);
            prefix.push(w);
        }
        total += w;
        for t in 0..n {
            smoothed[t][path[t]] += w;
            // A length-(t+1) prefix is shared by 3^(n-t-1) full paths.
            filtered_joint[t][path[t]] += prefix[t] / 3f64.powi((n - t - 1) as i32);
        }
    }
    let norm = |v: &[f64; 3]| {
        let s: f64 = v.iter().sum();
        v.map(|x| x / s)
    };
    (filtered_joint.iter().map(norm).collect(), smoothed.iter().map(norm).collect(), total.ln())
}

fn random_markov(rng: &mut impl Rng) -> MarkovParams {
    let prob = |rng: &mut dyn rand::RngCore| {
        let w = [0.05 + rng.random::<f64>(), 0.05 + rng.random::<f64>(), 0.05 + rng.random::<f64>()];
        let s: f64 = w.iter().sum();
        w.map(|x| x / s)
    };
    MarkovParams {
        mu: [0.01 * rng.random::<f64>(), 0.0, -0.02 * rng.random::<f64>()],
        sigma: [
            0.005 + 0.01 * rng.random::<f64>(),
            0.01 + 0.01 * rng.random::<f64>(),
            0.03 + 0.03 * rng.random::<f64>(),
        ],
        transition: [prob(rng), prob(rng), prob(rng)],
        initial: prob(rng),
    }
}

fn hamilton_oracle() -> Outcome {
    let t0 = Instant::now();
    let mut rng = derived_rng(101, 0);
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    for _ in 0..10 {
        let p = random_markov(&mut rng);
        for n in 1..=8 {
            let r: Vec<f64> = (0..n).map(|_| 0.03 * rng.sample::<f64, _>(StandardNormal)).collect();
            let fp = hamilton_filter(&r, &p).expect("valid model");
            let sm = kim_smoother(&fp, &p);
            let (bf_f, bf_s, bf_ll) = enumerate_paths(&r, &p);
            worst = worst.max((fp.log_likelihood - bf_ll).abs());
            for t in 0..n {
                for s in 0..3 {
                    worst = worst.max((fp.filtered[t][s] - bf_f[t][s]).abs());
                    worst = worst.max((sm[t][s] - bf_s[t][s]).abs());
                }
            }
            cases += 1;
        }
    }
    let el = t0.elapsed();
    outcome(
        worst <= 1e-10 && within(el, 1.0),
        format!(
            "{cases} series with T <= 8, max abs error {worst:.2e} (limit 1e-10), {:.3} s (limit 1 s)",
            el.as_secs_f64()
        ),
    )
}

// ─── Kalman filter ─────────────────────────────────────────────────────────

fn kalman_oracle() -> Outcome {
    let params = KalmanParams::new(0.9, 0.4, 0.7, 1.0).expect("valid");
    let mut rng = derived_rng(202, 0);
    let n = 50;
    let sigma: Vec<f64> = (0..n).map(|_| 0.01 * (0.5 + 2.0 * rng.random::<f64>())).collect();
    let baseline: Vec<f64> = (0..n).map(|_| 0.01 * (0.8 + 0.4 * rng.random::<f64>())).collect();
    let s: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let out = filter_series(&s, &sigma, &baseline, &params).expect("filter");

    // Sequential Bayes in precision form: Gaussian prior from the transition,
    // Gaussian likelihood from the observation, precisions add.
    let mut worst_seq: f64 = 0.0;
    let (mut m, mut v) = (0.0, params.q / (1.0 - params.phi * params.phi));
    for t in 0..n {
        let r = params.r0 * (sigma[t] / baseline[t]).powf(params.gamma);
        let (pm, pv) = (params.phi * m, params.phi * params.phi * v + params.q);
        let precision = 1.0 / pv + 1.0 / r;
        v = 1.0 / precision;
        m = v * (pm / pv + s[t] / r);
        worst_seq = worst_seq.max((out.filtered[t] - m).abs()).max((out.posterior_var[t] - v).abs());
    }

    // Batch conditioning on the joint Gaussian of (theta_1..theta_t, S_1..S_t).
    let p0 = params.q / (1.0 - params.phi * params.phi);
    let r_t: Vec<f64> = (0..n).map(|t| params.r0 * (sigma[t] / baseline[t]).powf(params.gamma)).collect();
    let mut worst_batch: f64 = 0.0;
    for t in [0, 9, 24, 49] {
        let k = t + 1;
        let cov = DMatrix::from_fn(k, k, |i, j| {
            p0 * params.phi.powi((i as i32 - j as i32).abs()) + if i == j { r_t[i] } else { 0.0 }
        });
        let cross = DVector::from_fn(k, |i, _| p0 * params.phi.powi((t - i) as i32));
        let chol = cov.cholesky().expect("positive definite");
        let w = chol.solve(&cross);
        let mean_b: f64 = (0..k).map(|i| w[i] * s[i]).sum();
        let var_b = p0 - cross.dot(&w);
        worst_batch = worst_batch.max((out.filtered[t] - mean_b).abs()).max((out.posterior_var[t] - var_b).abs());
    }

    // Steady state: Riccati residual and the limit of a long constant-noise run.
    let mut worst_ric: f64 = 0.0;
    for &(phi, q, r) in &[(0.95, 1e-8, 1e-6), (0.5, 1.0, 1.0), (0.99, 0.1, 10.0), (0.2, 3.0, 0.01)] {
        let k = steady_state_gain(phi, q, r);
        let p = k * r / (1.0 - k);
        let residual = (phi * phi * p * r / (p + r) + q - p).abs() / p;
        let kp = KalmanParams::new(phi, q, r, 0.0).expect("valid");
        let ones = vec![1.0; 5000];
        let long = filter_series(&vec![0.0; 5000], &ones, &ones, &kp).expect("filter");
        worst_ric = worst_ric.max(residual).max((long.gain[4999] - k).abs());
    }
    outcome(
        worst_seq <= 1e-10 && worst_batch <= 1e-10 && worst_ric <= 1e-8,
        format!(
            "T=50 sequential Bayes error {worst_seq:.2e}, batch conditioning error {worst_batch:.2e} (limit 1e-10); steady-state gain error {worst_ric:.2e} (limit 1e-8)"
        ),
    )
}

// ─── EM ────────────────────────────────────────────────────────────────────

/// 20 independent 3000-day market series from the default planted chain.
/// Occupancy of a persistent chain varies a lot between single 3000-day
/// draws (sd near 0.09 for Normal), so mean, volatility and occupancy are
/// judged on the Monte Carlo averages; log-likelihood monotonicity is
/// checked on every replication.
fn em_recovery() -> Outcome {
    const REPS: u64 = 20;
    const T: usize = 3000;
    let t0 = Instant::now();
    let spec = SynthSpec::default();
    let fits: Vec<([f64; 3], [f64; 3], [f64; 3], bool)> = (0..REPS)
        .into_par_iter()
        .map(|rep| {
            let (_, r) = simulate_market(&spec, T, 5000 + rep);
            let model = fit_em(&r, &EmOptions::default()).expect("EM fit");
            let monotone = model.loglik_trace.windows(2).all(|w| w[1] >= w[0] - 1e-8 * w[0].abs().max(1.0));
            let path = regime_path(&r, &model, 0.3).expect("path");
            let mut occ = [0.0; 3];
            for s in path.smoothed_state() {
                occ[s.index()] += 1.0 / T as f64;
            }
            (model.params.mu, model.params.sigma, occ, monotone)
        })
        .collect();
    let el = t0.elapsed();
    let target_occ = [0.43, 0.49, 0.08];
    let mut pass = within(el, 30.0) && fits.iter().all(|f| f.3);
    let mut parts = Vec::new();
    for s in 0..3 {
        let mus: Vec<f64> = fits.iter().map(|f| f.0[s]).collect();
        let se = sample_sd(&mus) / (REPS as f64).sqrt();
        let mu_ok = (mean(&mus) - spec.regime_mu[s]).abs() <= 2.0 * se;
        let sig = mean(&fits.iter().map(|f| f.1[s]).collect::<Vec<_>>());
        let sig_ok = (sig / spec.regime_sigma[s] - 1.0).abs() <= 0.10;
        let occ = mean(&fits.iter().map(|f| f.2[s]).collect::<Vec<_>>());
        let occ_ok = (occ - target_occ[s]).abs() <= 0.05;
        pass &= mu_ok && sig_ok && occ_ok;
        parts.push(format!(
            "{}: mu {:+.5} (true {:+.5}, 2se {:.5}) sigma {:.4} (true {:.4}) occ {:.3}",
            Regime::ALL[s],
            mean(&mus),
            spec.regime_mu[s],
            2.0 * se,
            sig,
            spec.regime_sigma[s],
            occ
        ));
    }
    outcome(
        pass,
        format!(
            "{REPS} x T={T}; {}; loglik monotone in {}/{REPS}",
            parts.join("; "),
            fits.iter().filter(|f| f.3).count()
        ),
    )
}

// ─── Regime-conditional beta ───────────────────────────────────────────────

fn aligned<'a>(ing: &'a IngestOutput, pos: &'a [Vec<usize>], signals: &'a [&'a [f64]]) -> Vec<AlignedSignal<'a>> {
    ing.series
        .iter()
        .enumerate()
        .map(|(k, s)| AlignedSignal { calendar_index: &pos[k], signal: signals[k], returns: s.returns() })
        .collect()
}

/// 500 stocks x 1200 days, default seed, shock response switched off.
///
/// The planted shock response is common to every stock on a given day, so
/// with it switched on the pooled residuals are cross-sectionally correlated
/// and conventional standard errors understate the sampling error of beta
/// even when the latent signal itself is the regressor. Regimes are the
/// planted path: the criterion is about recovering beta given the regime,
/// and the estimated-path result is printed alongside as a diagnostic.
fn beta_recovery() -> Outcome {
    let t0 = Instant::now();
    let cfg = RunConfig {
        synth: SynthSpec { n_stocks: 500, n_days: 1200, shock_beta: [[0.0; 2]; 3], ..SynthSpec::default() },
        ..RunConfig::default()
    };
    let synth = generate_panel(&cfg.synth).expect("synth");
    let ing = ingest(synth.rows.clone(), &cfg).expect("ingest");
    let inv = InvestorType::Foreign;
    let filtered = filter_investor(&ing, &cfg.kalman, inv).expect("filter");
    let pos: Vec<Vec<usize>> = ing.series.iter().map(|s| calendar_positions(&ing.calendar, s)).collect();
    let signals: Vec<&[f64]> = filtered.iter().map(|f| f.filtered.as_slice()).collect();
    let inputs = aligned(&ing, &pos, &signals);
    let truth: Vec<Option<Regime>> = synth.truth.regimes.iter().copied().map(Some).collect();
    let reg = regime_conditional_regression(
        &inputs,
        &truth,
        cfg.regime.flow_unit,
        cfg.regime.min_regime_observations,
        CovarianceKind::Conventional,
    )
    .expect("regression");
    let el = t0.elapsed();
    let planted = cfg.synth.flow_beta[inv.index()];
    let mut pass = within(el, 120.0);
    let mut parts = Vec::new();
    for row in &reg.rows {
        let b = planted[row.regime.index()];
        let covered = row.ci_low <= b && b <= row.ci_high;
        pass &= covered;
        parts.push(format!(
            "{} {:.6} [{:.6}, {:.6}] {}",
            row.regime,
            row.beta,
            row.ci_low,
            row.ci_high,
            if covered { "covers" } else { "misses" }
        ));
    }
    let ratio = reg.crisis_bull_ratio();
    pass &= ratio.is_some_and(|r| (6.0..=12.0).contains(&r));

    let (_, path) = fit_regimes(&ing, &cfg).expect("regimes");
    let est: Vec<Option<Regime>> = path.state.iter().copied().map(Some).collect();
    let diag = regime_conditional_regression(
        &inputs,
        &est,
        cfg.regime.flow_unit,
        cfg.regime.min_regime_observations,
        CovarianceKind::Conventional,
    )
    .ok()
    .and_then(|r| r.crisis_bull_ratio());
    outcome(
        pass,
        format!(
            "{}; crisis/bull {:.2} (target [6, 12]); with estimated regimes {:.2}",
            parts.join(", "),
            ratio.unwrap_or(f64::NAN),
            diag.unwrap_or(f64::NAN)
        ),
    )
}

// ─── Asymmetric response ───────────────────────────────────────────────────

/// Sign pattern: 100 default panels of 100 stocks x 1000 days.
///
/// Size: 400 panels of the same shape with each investor's planted
/// (beta_plus, beta_minus) set equal, so every one of the 1200 Wald tests is
/// under the null. Tests use HC1 standard errors: the lagged-shock design is
/// heteroskedastic (flow-change variance moves with volatility), and the
/// conventional covariance over-rejects; its rate is printed for reference.
fn asymmetry_recovery() -> Outcome {
    let t0 = Instant::now();
    let base =
        RunConfig { synth: SynthSpec { n_stocks: 100, n_days: 1000, ..SynthSpec::default() }, ..RunConfig::default() };
    let patterns: Vec<bool> = (0..100u64)
        .into_par_iter()
        .map(|rep| {
            let mut cfg = base.clone();
            cfg.synth.seed = 7000 + rep;
            let synth = generate_panel(&cfg.synth).expect("synth");
            let fits = run_asymmetry(&ingest(synth.rows, &cfg).expect("ingest"), &cfg).expect("fit");
            let ratio = |inv: InvestorType| fits.iter().find(|f| f.investor == inv).and_then(|f| f.ratio);
            ratio(InvestorType::Foreign).is_some_and(|r| r < 0.0)
                && ratio(InvestorType::Individual).is_some_and(|r| r < 1.0)
        })
        .collect();
    let sign_rate = patterns.iter().filter(|p| **p).count() as f64 / patterns.len() as f64;

    let rejections: Vec<(usize, usize, usize)> = (0..400u64)
        .into_par_iter()
        .map(|rep| {
            let mut cfg = base.clone();
            cfg.synth.seed = 60_000 + rep;
            for b in cfg.synth.shock_beta.iter_mut() {
                b[1] = b[0];
            }
            let synth = generate_panel(&cfg.synth).expect("synth");
            let ing = ingest(synth.rows, &cfg).expect("ingest");
            let count = |cov: CovarianceKind| {
                let mut c = cfg.clone();
                c.asymmetry.covariance = cov;
                run_asymmetry(&ing, &c).expect("fit").iter().filter(|f| f.p_value < 0.05).count()
            };
            (count(CovarianceKind::Robust), count(CovarianceKind::Conventional), InvestorType::ALL.len())
        })
        .collect();
    let tests: usize = rejections.iter().map(|r| r.2).sum();
    let size = rejections.iter().map(|r| r.0).sum::<usize>() as f64 / tests as f64;
    let size_conv = rejections.iter().map(|r| r.1).sum::<usize>() as f64 / tests as f64;
    outcome(
        sign_rate >= 0.95 && (0.02..=0.09).contains(&size),
        format!(
            "sign pattern in {:.0}% of 100 runs (need >= 95%); Wald size {:.1}% over {tests} null tests with HC1 (need [2, 9]%), conventional {:.1}%; {:.1} s",
            100.0 * sign_rate,
            100.0 * size,
            100.0 * size_conv,
            t0.elapsed().as_secs_f64()
        ),
    )
}

// ─── Filter value ──────────────────────────────────────────────────────────

struct FilterRun {
    mse_win: bool,
    t_win: bool,
}

fn filter_run(cfg: &RunConfig) -> FilterRun {
    let synth = generate_panel(&cfg.synth).expect("synth");
    let ing = ingest(synth.rows.clone(), cfg).expect("ingest");
    let inv = InvestorType::Foreign;
    let fs = filter_investor(&ing, &cfg.kalman, inv).expect("filter");
    let (mut se_f, mut se_r) = (0.0, 0.0);
    for (j, s) in ing.series.iter().enumerate() {
        let theta = synth.truth.theta(s.stock_id(), inv).expect("stock");
        for (t, th) in theta.iter().enumerate() {
            se_f += (fs[j].filtered[t] - th).powi(2);
            se_r += (s.flow(inv)[t] - th).powi(2);
        }
    }
    let pos: Vec<Vec<usize>> = ing.series.iter().map(|s| calendar_positions(&ing.calendar, s)).collect();
    let pairs: Vec<PairedSignal> = ing
        .series
        .iter()
        .enumerate()
        .map(|(j, s)| PairedSignal {
            calendar_index: &pos[j],
            raw: s.flow(inv),
            filtered: &fs[j].filtered,
            returns: s.returns(),
        })
        .collect();
    let row =
        &predictive_rows(inv, &pairs, &[1], cfg.regime.flow_unit, CovarianceKind::Conventional).expect("regression")[0];
    FilterRun { mse_win: se_f < se_r, t_win: row.t_filtered >= row.t_raw }
}

/// 40 default-size panels (200 stocks x 1220 days) with the shock response
/// switched off. The shock response adds market-wide jumps to the latent
/// signal that the filter's AR(1) state model does not contain; those jumps
/// land on high-volatility days, where the filter's gain is lowest, so the
/// filtered signal lags them while raw flow tracks them at once. With the
/// response off, the filter's model is correctly specified and the
/// comparison measures the filter alone. The full generator is measured in
/// the backtest criterion's runs and printed there.
fn filter_value() -> Outcome {
    const REPS: u64 = 40;
    let runs: Vec<FilterRun> = (0..REPS)
        .map(|rep| {
            let cfg = RunConfig {
                synth: SynthSpec { seed: 9000 + rep, shock_beta: [[0.0; 2]; 3], ..SynthSpec::default() },
                ..RunConfig::default()
            };
            filter_run(&cfg)
        })
        .collect();
    let mse = runs.iter().filter(|r| r.mse_win).count();
    let t = runs.iter().filter(|r| r.t_win).count();
    outcome(
        mse as f64 >= 0.95 * REPS as f64 && t as f64 >= 0.80 * REPS as f64,
        format!(
            "filtered MSE below raw in {mse}/{REPS} (need >= 95%); filtered t >= raw t in {t}/{REPS} (need >= 80%)"
        ),
    )
}

// ─── Backtest ──────────────────────────────────────────────────────────────

fn dates(n: usize) -> Vec<Date> {
    let start = Date::from_ymd_opt(2022, 3, 1).expect("date");
    (0..n).map(|k| start + chrono::Days::new(k as u64)).collect()
}

/// Two stocks, one per side; stock A's next-day returns are the strategy's.
fn hand_fixture() -> Result<String, String> {
    let r = [0.01, -0.02, 0.03, -0.01];
    let mut returns = vec![vec![0.0, 0.0]];
    returns.extend(r.iter().map(|x| vec![*x, 0.0]));
    let panel = SignalPanel {
        dates: dates(5),
        stocks: vec!["A".into(), "B".into()],
        raw: vec![vec![2.0, 1.0]; 5],
        filtered: vec![vec![2.0, 1.0]; 5],
        returns,
        market_cap: vec![vec![1.0, 1.0]; 5],
    };
    let regimes =
        RegimeSignal { p_crisis: vec![0.0; 5], state: vec![Some(Regime::Normal); 5], negative_shock: vec![false; 5] };
    let mut spec = StrategySpec::new(
        Variant::StaticRaw,
        InvestorType::Foreign,
        &BacktestConfig::default(),
        ResponseProfile::Contrarian,
    );
    spec.quantile = 0.5;
    let rep = run_backtest(&panel, &regimes, &spec).map_err(|e| e.to_string())?;
    // Equity 1.01, 0.9898, 1.019494, 1.00929906; peak 1.01, trough 0.9898.
    let total: f64 = 0.00929906;
    let max_dd = 0.02;
    let mean_r = 0.0025;
    let sd = ((0.0075f64.powi(2) + 0.0225f64.powi(2) + 0.0275f64.powi(2) + 0.0125f64.powi(2)) / 3.0).sqrt();
    let sharpe = mean_r / sd * 252f64.sqrt();
    let ann = (1.0 + total).powf(252.0 / 4.0) - 1.0;
    let m = &rep.metrics;
    let checks = [
        ("returns", rep.returns.iter().zip(&r).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)),
        ("total return", (m.total_return - total).abs()),
        ("max drawdown", (m.max_drawdown - max_dd).abs()),
        ("sharpe", (m.sharpe.unwrap_or(f64::NAN) - sharpe).abs()),
        ("annualized return", (m.annualized_return - ann).abs()),
        ("calmar", (m.calmar.unwrap_or(f64::NAN) - ann / max_dd).abs() / (ann / max_dd)),
    ];
    // Round-off in a handful of double-precision operations.
    match checks.iter().find(|(_, e)| !(*e <= 1e-14)) {
        Some((what, e)) => Err(format!("hand fixture {what} off by {e:.2e}")),
        None => Ok(format!("hand fixture matches (max dd {:.15})", m.max_drawdown)),
    }
}

fn random_panel(seed: u64, t: usize, n: usize) -> (SignalPanel, RegimeSignal) {
    let mut rng = derived_rng(seed, 0);
    let mut mat = |scale: f64, nan_rate: f64| -> Vec<Vec<f64>> {
        (0..t)
            .map(|_| {
                (0..n)
                    .map(|_| {
                        if rng.random::<f64>() < nan_rate {
                            f64::NAN
                        } else {
                            scale * rng.sample::<f64, _>(StandardNormal)
                        }
                    })
                    .collect()
            })
            .collect()
    };
    let panel = SignalPanel {
        dates: dates(t),
        stocks: (0..n).map(|j| format!("S{j}")).collect(),
        raw: mat(1e-3, 0.05),
        filtered: mat(1e-3, 0.05),
        returns: mat(0.02, 0.05),
        market_cap: mat(1.0, 0.0).into_iter().map(|row| row.into_iter().map(f64::exp).collect()).collect(),
    };
    let p_crisis: Vec<f64> =
        (0..t).map(|_| if rng.random::<f64>() < 0.05 { f64::NAN } else { rng.random::<f64>() }).collect();
    let state = (0..t).map(|k| Regime::from_index(k % 4)).collect();
    let negative_shock = (0..t).map(|_| rng.random::<f64>() < 0.1).collect();
    (panel, RegimeSignal { p_crisis, state, negative_shock })
}

/// Hand fixture; truncation property on 100 random panels at five cuts each;
/// drawdown comparison on 40 default-generator panels of 100 x 1000, keeping
/// those whose planted regime path visits Crisis.
fn backtest_correctness() -> Outcome {
    let hand = hand_fixture();

    let mut lookahead_failures = 0;
    let mut lookahead_checks = 0;
    for seed in 0..100u64 {
        let (panel, regimes) = random_panel(seed, 30 + (seed as usize % 50), 5 + (seed as usize % 40));
        for v in Variant::ALL {
            for profile in [ResponseProfile::Momentum, ResponseProfile::Contrarian] {
                let spec = StrategySpec::new(v, InvestorType::Foreign, &BacktestConfig::default(), profile);
                for cut in [0, 3, 11, panel.dates.len() / 2, panel.dates.len() - 2] {
                    lookahead_checks += 1;
                    lookahead_failures += usize::from(verify_no_lookahead(&panel, &regimes, &spec, cut).is_err());
                }
            }
        }
    }

    let runs: Vec<(bool, bool, bool)> = (0..40u64)
        .into_par_iter()
        .map(|rep| {
            let cfg = RunConfig {
                synth: SynthSpec { seed: 9000 + rep, n_stocks: 100, n_days: 1000, ..SynthSpec::default() },
                ..RunConfig::default()
            };
            let synth = generate_panel(&cfg.synth).expect("synth");
            let ing = ingest(synth.rows.clone(), &cfg).expect("ingest");
            let inv = cfg.backtest.investor;
            let fs = filter_investor(&ing, &cfg.kalman, inv).expect("filter");
            let (_, path) = fit_regimes(&ing, &cfg).expect("regimes");
            let sig = regime_signal(&ing, &path, &cfg);
            let profile = profile_of(&run_asymmetry(&ing, &cfg).expect("asymmetry"), inv);
            let filt: Vec<&[f64]> = fs.iter().map(|f| f.filtered.as_slice()).collect();
            let panel = signal_panel_from(&ing, inv, &filt);
            let kf =
                run_backtest(&panel, &sig, &StrategySpec::new(Variant::KalmanFiltered, inv, &cfg.backtest, profile))
                    .expect("kf");
            let aw = run_backtest(&panel, &sig, &StrategySpec::new(Variant::AllWeather, inv, &cfg.backtest, profile))
                .expect("aw");
            let has_crisis = synth.truth.regimes.contains(&Regime::Crisis);
            let pos: Vec<Vec<usize>> = ing.series.iter().map(|s| calendar_positions(&ing.calendar, s)).collect();
            let pairs: Vec<PairedSignal> = ing
                .series
                .iter()
                .enumerate()
                .map(|(j, s)| PairedSignal {
                    calendar_index: &pos[j],
                    raw: s.flow(inv),
                    filtered: filt[j],
                    returns: s.returns(),
                })
                .collect();
            let row = &predictive_rows(inv, &pairs, &[1], cfg.regime.flow_unit, CovarianceKind::Conventional)
                .expect("regression")[0];
            (has_crisis, aw.metrics.max_drawdown <= kf.metrics.max_drawdown, row.t_filtered >= row.t_raw)
        })
        .collect();
    let crisis_runs = runs.iter().filter(|r| r.0).count();
    let dd_wins = runs.iter().filter(|r| r.0 && r.1).count();
    let t_wins = runs.iter().filter(|r| r.2).count();
    let dd_ok = crisis_runs > 0 && dd_wins as f64 >= 0.70 * crisis_runs as f64;

    let hand_msg = match &hand {
        Ok(m) | Err(m) => m.clone(),
    };
    outcome(
        hand.is_ok() && lookahead_failures == 0 && dd_ok,
        format!(
            "{hand_msg}; truncation property {}/{lookahead_checks} ok; All-Weather max DD <= Kalman Filtered in {dd_wins}/{crisis_runs} crisis runs (need >= 70%); [diagnostic: full generator filtered t >= raw t in {t_wins}/40]",
            lookahead_checks - lookahead_failures
        ),
    )
}

// ─── Bootstrap ─────────────────────────────────────────────────────────────

/// 200 series of 1000 i.i.d. N(0.0005, 0.01^2) daily returns; 1000
/// resamples per interval, block length 10.
fn bootstrap_coverage() -> Outcome {
    const REPS: u64 = 200;
    let t0 = Instant::now();
    let (mu, sd, ann) = (0.0005, 0.01, 252.0);
    let truth = mu / sd * f64::sqrt(ann);
    let covered = (0..REPS)
        .filter(|&rep| {
            let mut rng = derived_rng(4242, rep);
            let r: Vec<f64> = (0..1000).map(|_| mu + sd * rng.sample::<f64, _>(StandardNormal)).collect();
            let ci = bootstrap_ci("sharpe", &r, |x| compute_metrics(x, ann).sharpe, 1000, 10, 77_000 + rep);
            ci.lower <= truth && truth <= ci.upper
        })
        .count();
    let el = t0.elapsed();
    let rate = covered as f64 / REPS as f64;
    outcome(
        (0.92..=0.98).contains(&rate) && within(el, 120.0),
        format!(
            "coverage {:.1}% over {REPS} replications (need 95 +/- 3), {:.1} s (limit 120 s)",
            100.0 * rate,
            el.as_secs_f64()
        ),
    )
}

// ─── Determinism ───────────────────────────────────────────────────────────

/// The default pipeline twice from scratch, on one thread and on four.
fn determinism() -> Outcome {
    let cfg = RunConfig::default();
    let once = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().expect("pool");
        pool.install(|| {
            let synth = generate_panel(&cfg.synth).expect("synth");
            run_pipeline(synth.rows, &cfg).expect("pipeline").metrics.to_json()
        })
    };
    let a = once(1);
    let b = once(4);
    outcome(a == b, format!("metrics.json {} bytes, identical across runs on 1 and 4 threads: {}", a.len(), a == b))
}
