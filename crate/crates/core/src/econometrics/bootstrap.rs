//! Circular block bootstrap with percentile intervals.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::stats::{derived_rng, quantile_sorted};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapResult {
    pub statistic: String,
    pub point: f64,
    pub lower: f64,
    pub upper: f64,
    pub iterations: usize,
    pub block_length: usize,
    /// Resamples on which the statistic was defined.
    pub defined_draws: usize,
    /// The statistic is undefined on the original sample.
    pub undefined: bool,
    /// The point estimate fell outside its own interval (resampling noise).
    pub point_outside: bool,
}

/// Fills `out` with one circular block resample of `data`.
pub fn circular_block_resample<R: Rng>(data: &[f64], block: usize, rng: &mut R, out: &mut Vec<f64>) {
    let n = data.len();
    out.clear();
    if n == 0 {
        return;
    }
    let block = block.clamp(1, n);
    while out.len() < n {
        let start = rng.random_range(0..n);
        for k in 0..block {
            if out.len() == n {
                break;
            }
            out.push(data[(start + k) % n]);
        }
    }
}

/// 95% percentile interval of `statistic` under the circular block bootstrap.
///
/// Iteration `i` draws from its own stream `(seed, i)`, so the result does
/// not depend on thread scheduling.
pub fn bootstrap_ci<F>(
    name: &str,
    data: &[f64],
    statistic: F,
    iterations: usize,
    block_length: usize,
    seed: u64,
) -> BootstrapResult
where
    F: Fn(&[f64]) -> Option<f64> + Sync,
{
    let point = statistic(data);
    let mut draws: Vec<f64> = (0..iterations)
        .into_par_iter()
        .map_init(Vec::new, |buf, i| {
            let mut rng = derived_rng(seed, i as u64);
            circular_block_resample(data, block_length, &mut rng, buf);
            statistic(buf).filter(|v| v.is_finite())
        })
        .collect::<Vec<Option<f64>>>()
        .into_iter()
        .flatten()
        .collect();
    draws.sort_by(f64::total_cmp);
    let (lower, upper) = if draws.is_empty() {
        (f64::NAN, f64::NAN)
    } else {
        (quantile_sorted(&draws, 0.025), quantile_sorted(&draws, 0.975))
    };
    let point_value = point.unwrap_or(f64::NAN);
    BootstrapResult {
        statistic: name.to_string(),
        point: point_value,
        lower,
        upper,
        iterations,
        block_length,
        defined_draws: draws.len(),
        undefined: point.is_none() || !point_value.is_finite(),
        point_outside: point_value.is_finite() && !(lower <= point_value && point_value <= upper),
    }
}
