//! End-to-end runs: normalize, window, train (or sweep), score against the
//! linear baselines on the same split.

use serde::{Deserialize, Serialize};

use crate::baselines::{fit_ar_samples, select_lridge, LambdaScore, Persistence, LRIDGE_LAMBDAS};
use crate::checkpoint::Checkpoint;
use crate::data::{make_windows, EpidemicSeries, NormStats, SplitBounds, Windows};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalResult};
use crate::model::Sefnet;
use crate::train::{grid_search, train, Grid, GridRun, RunConfig, TrainReport};

/// Normalized windows of one series under one run configuration.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub regions: Vec<String>,
    pub bounds: SplitBounds,
    pub stats: NormStats,
    pub windows: Windows,
}

/// Splits, fits normalization on the training span and windows the series.
pub fn prepare(series: &EpidemicSeries, run: &RunConfig) -> Result<Prepared> {
    let bounds = run.split.bounds(series.len())?;
    let stats = NormStats::fit(series, &bounds, run.norm)?;
    prepare_with(series, run, stats)
}

/// As [`prepare`] with fixed normalization statistics (e.g. from a checkpoint).
pub fn prepare_with(series: &EpidemicSeries, run: &RunConfig, stats: NormStats) -> Result<Prepared> {
    if series.num_regions() != run.model.regions {
        return Err(Error::Data(format!(
            "model expects {} regions but the data has {}",
            run.model.regions,
            series.num_regions()
        )));
    }
    let bounds = run.split.bounds(series.len())?;
    let scaled = stats.apply(series)?;
    let windows = make_windows(&scaled, run.model.window, run.model.horizon, &bounds)?;
    Ok(Prepared {
        regions: series.regions().to_vec(),
        bounds,
        stats,
        windows,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineReport {
    pub lags: usize,
    pub persistence: EvalResult,
    pub ar: EvalResult,
    pub lridge: EvalResult,
    pub lridge_lambda: f64,
    pub lridge_scores: Vec<LambdaScore>,
}

/// Persistence, per-region AR and LRidge with `lags = T`, scored on the test
/// split.
pub fn baselines(prepared: &Prepared, run: &RunConfig) -> Result<BaselineReport> {
    let n = run.model.regions;
    let q = run.model.window;
    let w = &prepared.windows;
    let h = run.model.horizon;
    let score = |f: &dyn crate::eval::Forecaster| evaluate(f, &w.test, &prepared.stats, &prepared.regions, h, run.pcc);
    let ar = fit_ar_samples(&w.train, n, q)?;
    let (lridge, lridge_scores) = select_lridge(&w.train, &w.val, n, q, &LRIDGE_LAMBDAS)?;
    Ok(BaselineReport {
        lags: q,
        persistence: score(&Persistence { regions: n })?,
        ar: score(&ar)?,
        lridge: score(&lridge)?,
        lridge_lambda: lridge.lambda,
        lridge_scores,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub train: TrainReport,
    pub num_parameters: usize,
    pub test: EvalResult,
    pub baselines: Option<BaselineReport>,
    /// Every grid point when a sweep selected the configuration.
    pub grid: Option<Vec<GridRun>>,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub checkpoint: Checkpoint,
    pub model: Sefnet,
    pub report: RunReport,
}

/// Trains one configuration, or sweeps `grid` when it is non-empty, then
/// evaluates on the test split.
pub fn run_experiment(
    series: &EpidemicSeries,
    run: &RunConfig,
    grid: Option<&Grid>,
    with_baselines: bool,
    jobs: usize,
) -> Result<RunOutput> {
    run.validate()?;
    let prepared = prepare(series, run)?;
    if prepared.windows.test.is_empty() {
        return Err(Error::config("test split holds no samples"));
    }
    let (model, train_report, grid_runs, chosen) = match grid.filter(|g| !g.is_empty()) {
        Some(g) => {
            let outcome = grid_search(run, g, &prepared.windows, jobs)?;
            let best = outcome.best.ok_or_else(|| {
                let first = outcome.runs.iter().find_map(|r| r.error.clone()).unwrap_or_default();
                Error::Numerical(format!("every grid point failed; first failure: {first}"))
            })?;
            let chosen = outcome.runs[best].config.clone();
            let report = outcome.runs[best].report.clone().expect("selected run has a report");
            (
                outcome.best_model.expect("selected run has a model"),
                report,
                Some(outcome.runs),
                chosen,
            )
        }
        None => {
            let out = train(run, &prepared.windows)?;
            (out.model, out.report, None, run.clone())
        }
    };
    let test = evaluate(
        &model,
        &prepared.windows.test,
        &prepared.stats,
        &prepared.regions,
        run.model.horizon,
        run.pcc,
    )?;
    let baselines = if with_baselines {
        Some(baselines(&prepared, run)?)
    } else {
        None
    };
    let checkpoint = Checkpoint::new(chosen, prepared.regions.clone(), prepared.stats.clone(), &model);
    Ok(RunOutput {
        checkpoint,
        report: RunReport {
            train: train_report,
            num_parameters: model.num_parameters(),
            test,
            baselines,
            grid: grid_runs,
        },
        model,
    })
}

/// Test-split metrics of a checkpoint on `series`, using its stored
/// normalization statistics.
pub fn evaluate_checkpoint(checkpoint: &Checkpoint, series: &EpidemicSeries) -> Result<EvalResult> {
    if series.num_regions() != checkpoint.config.model.regions {
        return Err(Error::Data(format!(
            "checkpoint was trained on {} regions but the data has {}",
            checkpoint.config.model.regions,
            series.num_regions()
        )));
    }
    let model = checkpoint.model()?;
    let prepared = prepare_with(series, &checkpoint.config, checkpoint.norm_stats.clone())?;
    evaluate(
        &model,
        &prepared.windows.test,
        &prepared.stats,
        &prepared.regions,
        checkpoint.config.model.horizon,
        checkpoint.config.pcc,
    )
}

/// Denormalized `h`-step forecast from the window ending at `anchor`
/// (default: the last step).
pub fn forecast_latest(checkpoint: &Checkpoint, series: &EpidemicSeries, anchor: Option<usize>) -> Result<Vec<f64>> {
    let cfg = &checkpoint.config.model;
    if series.num_regions() != cfg.regions {
        return Err(Error::Data(format!(
            "checkpoint was trained on {} regions but the data has {}",
            cfg.regions,
            series.num_regions()
        )));
    }
    let t = match anchor {
        Some(t) if t >= series.len() => {
            return Err(Error::Data(format!(
                "anchor {t} is beyond the {} observed steps",
                series.len()
            )))
        }
        Some(t) => t,
        None => series.len().saturating_sub(1),
    };
    if t + 1 < cfg.window {
        return Err(Error::Data(format!(
            "insufficient history: the model needs T = {} trailing observations, found {}",
            cfg.window,
            t + 1
        )));
    }
    let model = checkpoint.model()?;
    let scaled = checkpoint.norm_stats.apply(series)?;
    let input = crate::data::window_at(&scaled, cfg.window, t);
    let pred = model.predict(&input, 1)?;
    let out = checkpoint.norm_stats.denormalize(&pred);
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite forecast".into()));
    }
    Ok(out)
}
