//! Order-flow signal extraction under market regimes.
//!
//! Daily investor-type flows are filtered with a volatility-coupled Kalman
//! filter, the market is segmented into Bull, Normal and Crisis regimes by a
//! three-state Markov-switching model, and investor responses to large
//! market moves are measured separately for up and down shocks. The
//! [`backtest`] module turns the signals into long-short strategies and the
//! [`pipeline`] module wires every stage together. [`synth`] generates panels
//! with known parameters for testing the estimators.

// `!(x > 0.0)` rejects NaN along with non-positive values; indexed loops
// mirror the matrix algebra they implement.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod backtest;
pub mod config;
pub mod econometrics;
pub mod ingest;
pub mod kalman;
pub mod pipeline;
pub mod regime;
pub mod stats;
pub mod synth;
pub mod types;

pub use backtest::{BacktestReport, PerformanceMetrics, RobustnessReport, Variant};
pub use config::RunConfig;
pub use econometrics::{AsymmetryFit, PredictiveRow, ResponseProfile};
pub use ingest::{IngestOutput, IngestStats};
pub use kalman::{FilterOutput, KalmanParams};
pub use pipeline::{run_pipeline, PipelineError, PipelineOutput};
pub use regime::{RegimeModel, RegimePath, RegimeRegression};
pub use synth::{generate_panel, SynthPanel, SynthSpec};
pub use types::{Date, FlowSeries, InvestorType, PanelObservation, Regime};
