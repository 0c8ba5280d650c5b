//! Fixtures shared by the benchmarks.

use jcdnet::data::{synth_generate, Dataset, SynthConfig};
use jcdnet::train::RunConfig;

/// The default synthetic training set with the matching run configuration.
pub fn synthetic_fixture() -> (RunConfig, Dataset) {
    let data = synth_generate(&SynthConfig::default())
        .expect("default synthetic config is valid")
        .dataset;
    (RunConfig::synthetic(), data)
}

/// Run configuration with the model widened to `hidden_dim` and `feature_dim`, for
/// scaling measurements.
pub fn widened(cfg: &RunConfig, feature_dim: usize, hidden_dim: usize) -> RunConfig {
    let mut cfg = cfg.clone();
    cfg.model.feature_dim = feature_dim;
    cfg.model.hidden_dim = hidden_dim;
    cfg
}
