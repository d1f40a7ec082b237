//! Regression and inference: pooled OLS, predictive tables, asymmetric
//! response fits and block-bootstrap intervals.

pub mod asymmetry;
pub mod bootstrap;
pub mod ols;
pub mod predictive;

pub use asymmetry::{
    asymmetry_fit, shock_days, shock_indicators, AsymmetryFit, AsymmetryOptions, ResponseInput, ResponseProfile,
    ShockDay,
};
pub use bootstrap::{bootstrap_ci, circular_block_resample, BootstrapResult};
pub use ols::{pooled_ols, OlsError, OlsFit};
pub use predictive::{forward_return, predictive_rows, PairedSignal, PredictiveRow};
