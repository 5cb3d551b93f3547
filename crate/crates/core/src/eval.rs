//! Real-scale RMSE and Pearson correlation.

use serde::{Deserialize, Serialize};

use crate::data::{NormStats, WindowSample};
use crate::error::{Error, Result};
use crate::model::Sefnet;
use crate::train::stack;

/// Anything that maps normalized windows to normalized `N`-vectors.
pub trait Forecaster {
    /// One prediction row per sample.
    fn forecast(&self, samples: &[WindowSample]) -> Result<Vec<Vec<f64>>>;
}

impl Forecaster for Sefnet {
    fn forecast(&self, samples: &[WindowSample]) -> Result<Vec<Vec<f64>>> {
        let n = self.config.regions;
        let mut out = Vec::with_capacity(samples.len());
        for part in samples.chunks(256) {
            let refs: Vec<&WindowSample> = part.iter().collect();
            let (inputs, _) = stack(&refs);
            let pred = self.predict(&inputs, part.len())?;
            out.extend(pred.chunks(n).map(<[f64]>::to_vec));
        }
        Ok(out)
    }
}

/// How the headline PCC aggregates over regions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PccMode {
    /// One correlation over all (region, time) pairs.
    #[default]
    Pooled,
    /// Mean of per-region correlations (regions with undefined PCC skipped).
    RegionMean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionMetrics {
    pub region: String,
    pub rmse: f64,
    pub pcc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub horizon: usize,
    pub samples: usize,
    pub rmse: f64,
    /// `None` when the truth (or prediction) has zero variance.
    pub pcc: Option<f64>,
    pub pcc_undefined: bool,
    pub pcc_mode: PccMode,
    pub per_region: Vec<RegionMetrics>,
}

pub fn rmse(pred: &[f64], truth: &[f64]) -> f64 {
    assert_eq!(pred.len(), truth.len());
    (pred.iter().zip(truth).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / pred.len() as f64).sqrt()
}

/// Pearson correlation; `None` if either side has zero variance.
pub fn pearson(pred: &[f64], truth: &[f64]) -> Option<f64> {
    assert_eq!(pred.len(), truth.len());
    let n = pred.len() as f64;
    if pred.is_empty() {
        return None;
    }
    let mp = pred.iter().sum::<f64>() / n;
    let mt = truth.iter().sum::<f64>() / n;
    let (mut cov, mut vp, mut vt) = (0.0, 0.0, 0.0);
    for (p, t) in pred.iter().zip(truth) {
        cov += (p - mp) * (t - mt);
        vp += (p - mp) * (p - mp);
        vt += (t - mt) * (t - mt);
    }
    if vp <= 0.0 || vt <= 0.0 {
        return None;
    }
    Some((cov / (vp.sqrt() * vt.sqrt())).clamp(-1.0, 1.0))
}

/// Metrics over real-scale `pred`/`truth` rows (one row per sample, one
/// column per region).
pub fn metrics(
    pred: &[Vec<f64>],
    truth: &[Vec<f64>],
    regions: &[String],
    horizon: usize,
    mode: PccMode,
) -> Result<EvalResult> {
    if pred.is_empty() || pred.len() != truth.len() {
        return Err(Error::config(format!(
            "evaluation needs matching non-empty predictions, got {} and {}",
            pred.len(),
            truth.len()
        )));
    }
    let n = regions.len();
    if pred.iter().chain(truth).any(|r| r.len() != n) {
        return Err(Error::dim("evaluate", &[n], &[pred[0].len()]));
    }
    let flat_p: Vec<f64> = pred.iter().flatten().copied().collect();
    let flat_t: Vec<f64> = truth.iter().flatten().copied().collect();
    let per_region: Vec<RegionMetrics> = (0..n)
        .map(|i| {
            let p: Vec<f64> = pred.iter().map(|r| r[i]).collect();
            let t: Vec<f64> = truth.iter().map(|r| r[i]).collect();
            RegionMetrics {
                region: regions[i].clone(),
                rmse: rmse(&p, &t),
                pcc: pearson(&p, &t),
            }
        })
        .collect();
    let pcc = match mode {
        PccMode::Pooled => pearson(&flat_p, &flat_t),
        PccMode::RegionMean => {
            let defined: Vec<f64> = per_region.iter().filter_map(|r| r.pcc).collect();
            (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)
        }
    };
    Ok(EvalResult {
        horizon,
        samples: pred.len(),
        rmse: rmse(&flat_p, &flat_t),
        pcc,
        pcc_undefined: pcc.is_none(),
        pcc_mode: mode,
        per_region,
    })
}

/// Forecasts `samples`, denormalizes with `stats` and scores against the
/// denormalized targets.
pub fn evaluate(
    model: &dyn Forecaster,
    samples: &[WindowSample],
    stats: &NormStats,
    regions: &[String],
    horizon: usize,
    mode: PccMode,
) -> Result<EvalResult> {
    if samples.is_empty() {
        return Err(Error::config("test set is empty"));
    }
    let pred: Vec<Vec<f64>> = model.forecast(samples)?.iter().map(|p| stats.denormalize(p)).collect();
    let truth: Vec<Vec<f64>> = samples.iter().map(|s| stats.denormalize(&s.target)).collect();
    if pred.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite prediction".into()));
    }
    metrics(&pred, &truth, regions, horizon, mode)
}
