//! Shared fixtures for the regimeflow benchmarks.

use regimeflow::backtest::RegimeSignal;
use regimeflow::pipeline::{fit_regimes, ingest, regime_signal, run_asymmetry, run_filters, FilterStage};
use regimeflow::{generate_panel, AsymmetryFit, IngestOutput, RunConfig, SynthSpec};

/// Every stage a backtest needs, computed once.
pub struct Fixture {
    pub cfg: RunConfig,
    pub ingest: IngestOutput,
    pub filters: FilterStage,
    pub signal: RegimeSignal,
    pub fits: Vec<AsymmetryFit>,
}

/// Synthetic panel of `n_stocks` by `n_days` carried through the
/// filter, regime and asymmetry stages.
pub fn fixture(n_stocks: usize, n_days: usize) -> Fixture {
    let cfg = RunConfig { synth: SynthSpec { n_stocks, n_days, ..SynthSpec::default() }, ..RunConfig::default() };
    let panel = generate_panel(&cfg.synth).expect("synthetic panel");
    let ingest = ingest(panel.rows, &cfg).expect("ingest");
    let filters = run_filters(&ingest, &cfg.kalman).expect("filters");
    let (_, path) = fit_regimes(&ingest, &cfg).expect("regimes");
    let signal = regime_signal(&ingest, &path, &cfg);
    let fits = run_asymmetry(&ingest, &cfg).expect("asymmetry");
    Fixture { cfg, ingest, filters, signal, fits }
}
