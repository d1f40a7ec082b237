//! Strategy engine, performance metrics and robustness harness.

pub mod metrics;
pub mod robustness;
pub mod strategy;

pub use metrics::{
    calmar_ratio, compute_metrics, drawdowns, equity_curve, max_drawdown, sharpe_ratio, PerformanceMetrics,
};
pub use robustness::{
    bootstrap_rows, quintile_assignment, quintile_rows, run_robustness, size_buckets, subperiod_rows, BootstrapRow,
    QuintileRow, RobustnessReport, SubperiodRow,
};
pub use strategy::{
    build_positions, build_positions_within, evaluate_weights, long_short_weights, regime_scale, run_backtest,
    verify_no_lookahead, BacktestError, BacktestReport, RegimeBreakdown, RegimeSignal, SignalPanel, StrategySpec,
    Variant,
};
