//! Shared fixtures for the criterion benchmarks.

use epiforecast::data::{make_windows, normalize, NormMode, SplitSpec, Windows};
use epiforecast::model::SefnetConfig;
use epiforecast::synthetic::CoupledSinusoids;

/// Normalized windows of the default synthetic dataset.
pub fn synthetic_windows(window: usize, horizon: usize) -> Windows {
    let series = CoupledSinusoids::default().generate().expect("synthetic series");
    let bounds = SplitSpec::default().bounds(series.len()).expect("bounds");
    let (scaled, _) = normalize(&series, &bounds, NormMode::PerRegion).expect("normalize");
    make_windows(&scaled, window, horizon, &bounds).expect("windows")
}

pub fn bench_config() -> SefnetConfig {
    SefnetConfig::small(5, 20, 3)
}
