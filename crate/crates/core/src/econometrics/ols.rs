//! Least squares through a QR decomposition, with three covariance choices.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

use crate::config::CovarianceKind;
use crate::stats;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OlsError {
    #[error("design matrix has rank {rank} < {k} columns")]
    RankDeficient { rank: usize, k: usize },
    #[error("{n} observations for {k} regressors")]
    InsufficientObservations { n: usize, k: usize },
    #[error("non-finite value in row {row}")]
    NonFinite { row: usize },
    #[error("regressor {column} has {len} rows, response has {n}")]
    LengthMismatch { column: usize, len: usize, n: usize },
    #[error("clustered covariance needs one cluster id per row")]
    MissingClusters,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OlsFit {
    /// Intercept first when one was requested.
    pub coef: Vec<f64>,
    pub se: Vec<f64>,
    pub t: Vec<f64>,
    pub p: Vec<f64>,
    pub r_squared: f64,
    pub n: usize,
    pub k: usize,
    /// Residual variance `SSR / (n - k)`.
    pub sigma2: f64,
    /// Coefficient covariance, row-major `k x k`.
    pub cov: Vec<Vec<f64>>,
    pub covariance: CovarianceKind,
}

/// Relative pivot size below which a column counts as collinear.
const RANK_TOLERANCE: f64 = 1e-10;

/// OLS of `y` on the given regressor columns (plus an optional intercept).
pub fn pooled_ols(
    y: &[f64],
    regressors: &[&[f64]],
    intercept: bool,
    covariance: CovarianceKind,
    clusters: Option<&[usize]>,
) -> Result<OlsFit, OlsError> {
    let n = y.len();
    let k = regressors.len() + usize::from(intercept);
    for (c, col) in regressors.iter().enumerate() {
        if col.len() != n {
            return Err(OlsError::LengthMismatch { column: c, len: col.len(), n });
        }
    }
    if n <= k {
        return Err(OlsError::InsufficientObservations { n, k });
    }
    if let Some(row) = (0..n).find(|&i| !y[i].is_finite() || regressors.iter().any(|c| !c[i].is_finite())) {
        return Err(OlsError::NonFinite { row });
    }
    let x = DMatrix::from_fn(n, k, |i, j| {
        if intercept {
            if j == 0 {
                1.0
            } else {
                regressors[j - 1][i]
            }
        } else {
            regressors[j][i]
        }
    });
    let qr = x.clone().qr();
    let r = qr.r();
    let pivot_max = (0..k).map(|i| r[(i, i)].abs()).fold(0.0, f64::max);
    let rank = (0..k).filter(|&i| r[(i, i)].abs() > RANK_TOLERANCE * pivot_max.max(f64::MIN_POSITIVE)).count();
    if rank < k || pivot_max == 0.0 {
        return Err(OlsError::RankDeficient { rank, k });
    }
    let mut qty = DVector::from_column_slice(y);
    qr.q_tr_mul(&mut qty);
    let rhs = qty.rows(0, k).into_owned();
    let beta = r.solve_upper_triangular(&rhs).ok_or(OlsError::RankDeficient { rank, k })?;
    let r_inv = r.solve_upper_triangular(&DMatrix::identity(k, k)).ok_or(OlsError::RankDeficient { rank, k })?;
    let xtx_inv = &r_inv * r_inv.transpose();

    let fitted = &x * &beta;
    let resid: Vec<f64> = (0..n).map(|i| y[i] - fitted[i]).collect();
    let ssr: f64 = resid.iter().map(|e| e * e).sum();
    let sst: f64 = if intercept {
        let m = stats::mean(y);
        y.iter().map(|v| (v - m) * (v - m)).sum()
    } else {
        y.iter().map(|v| v * v).sum()
    };
    let r_squared = if sst > 0.0 {
        (1.0 - ssr / sst).clamp(0.0, 1.0)
    } else if ssr <= 0.0 {
        1.0
    } else {
        0.0
    };
    let dof = (n - k) as f64;
    let sigma2 = ssr / dof;

    let cov = match covariance {
        CovarianceKind::Conventional => &xtx_inv * sigma2,
        CovarianceKind::Robust => {
            let mut meat = DMatrix::<f64>::zeros(k, k);
            for i in 0..n {
                let xi = x.row(i);
                meat += xi.transpose() * xi * (resid[i] * resid[i]);
            }
            (&xtx_inv * meat * &xtx_inv) * (n as f64 / dof)
        }
        CovarianceKind::ClusteredByDate => {
            let ids = clusters.filter(|c| c.len() == n).ok_or(OlsError::MissingClusters)?;
            let mut scores: BTreeMap<usize, DVector<f64>> = BTreeMap::new();
            for i in 0..n {
                let s = scores.entry(ids[i]).or_insert_with(|| DVector::zeros(k));
                for j in 0..k {
                    s[j] += x[(i, j)] * resid[i];
                }
            }
            let g = scores.len() as f64;
            let mut meat = DMatrix::<f64>::zeros(k, k);
            for s in scores.values() {
                meat += s * s.transpose();
            }
            let adj = if g > 1.0 { g / (g - 1.0) * (n as f64 - 1.0) / dof } else { 1.0 };
            (&xtx_inv * meat * &xtx_inv) * adj
        }
    };

    let coef: Vec<f64> = beta.iter().copied().collect();
    let se: Vec<f64> = (0..k).map(|j| cov[(j, j)].max(0.0).sqrt()).collect();
    let t: Vec<f64> = coef.iter().zip(&se).map(|(b, s)| b / s).collect();
    let dist = StudentsT::new(0.0, 1.0, dof).ok();
    let p = t
        .iter()
        .map(|tv| match (&dist, tv.is_finite()) {
            (Some(d), true) => (2.0 * (1.0 - d.cdf(tv.abs()))).clamp(0.0, 1.0),
            _ => stats::two_sided_p(*tv),
        })
        .collect();
    Ok(OlsFit {
        coef,
        se,
        t,
        p,
        r_squared,
        n,
        k,
        sigma2,
        cov: (0..k).map(|i| (0..k).map(|j| cov[(i, j)]).collect()).collect(),
        covariance,
    })
}

impl OlsFit {
    /// Wald test of `coef[i] == coef[j]`; returns `(statistic, p-value)`.
    pub fn wald_equal(&self, i: usize, j: usize) -> (f64, f64) {
        let d = self.coef[i] - self.coef[j];
        let v = self.cov[i][i] + self.cov[j][j] - 2.0 * self.cov[i][j];
        if !(v > 0.0) {
            return (f64::NAN, f64::NAN);
        }
        let w = d * d / v;
        (w, stats::chi_square_sf(w, 1.0))
    }

    pub fn residuals(&self, y: &[f64], regressors: &[&[f64]], intercept: bool) -> Vec<f64> {
        (0..y.len())
            .map(|i| {
                let mut fit = 0.0;
                let off = usize::from(intercept);
                if intercept {
                    fit += self.coef[0];
                }
                for (c, col) in regressors.iter().enumerate() {
                    fit += self.coef[c + off] * col[i];
                }
                y[i] - fit
            })
            .collect()
    }
}
