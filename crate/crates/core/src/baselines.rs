//! Closed-form linear baselines: per-region autoregression, ridge-regularized
//! vector autoregression across all regions, and persistence.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{EpidemicSeries, SplitBounds, WindowSample};
use crate::error::{Error, Result};
use crate::eval::Forecaster;

/// Diagonal jitter keeping the AR normal equations positive definite.
pub const AR_JITTER: f64 = 1e-8;

/// Ridge strengths tried on the validation split.
pub const LRIDGE_LAMBDAS: [f64; 4] = [0.01, 0.1, 1.0, 10.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LinearKind {
    /// Each region regressed on its own `q` lags.
    Ar,
    /// Each region regressed on all regions' `q` lags.
    Lridge,
}

/// Fitted coefficients of a linear baseline, one row per target region.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearBaselineParams {
    pub kind: LinearKind,
    pub regions: usize,
    pub lags: usize,
    pub lambda: f64,
    /// Row `i` weights lag `m` (value at `t − m`) at position `m` for AR,
    /// and at `j·q + m` for region `j` in LRidge.
    pub coefficients: Vec<Vec<f64>>,
    pub intercepts: Vec<f64>,
}

fn lag_features(sample: &WindowSample, regions: usize, region: usize, q: usize) -> impl Iterator<Item = f64> + '_ {
    let t = sample.input.len() / regions;
    let row = &sample.input[region * t..(region + 1) * t];
    (0..q).map(move |m| row[t - 1 - m])
}

fn features(kind: LinearKind, sample: &WindowSample, regions: usize, region: usize, q: usize) -> Vec<f64> {
    match kind {
        LinearKind::Ar => lag_features(sample, regions, region, q).collect(),
        LinearKind::Lridge => (0..regions).flat_map(|j| lag_features(sample, regions, j, q)).collect(),
    }
}

/// Ridge regression with an unpenalized intercept, solved on centered data:
/// `w = (XcᵀXc + λI)⁻¹Xcᵀyc`, `b = ȳ − x̄·w`.
fn solve_ridge(x: &[Vec<f64>], y: &[f64], lambda: f64, jitter: f64) -> Result<(Vec<f64>, f64)> {
    let n = x.len();
    let p = x[0].len();
    let mean_x: Vec<f64> = (0..p).map(|j| x.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
    let mean_y = y.iter().sum::<f64>() / n as f64;
    let xc = DMatrix::from_fn(n, p, |i, j| x[i][j] - mean_x[j]);
    let yc = DVector::from_fn(n, |i, _| y[i] - mean_y);
    let mut gram = xc.transpose() * &xc;
    for j in 0..p {
        gram[(j, j)] += lambda + jitter;
    }
    let rhs = xc.transpose() * yc;
    let w = match gram.clone().cholesky() {
        Some(ch) => ch.solve(&rhs),
        None => gram
            .lu()
            .solve(&rhs)
            .ok_or_else(|| Error::Numerical("singular normal equations".into()))?,
    };
    let b = mean_y - w.iter().zip(&mean_x).map(|(a, m)| a * m).sum::<f64>();
    if w.iter().any(|v| !v.is_finite()) || !b.is_finite() {
        return Err(Error::Numerical("non-finite baseline coefficients".into()));
    }
    Ok((w.iter().copied().collect(), b))
}

fn fit(
    kind: LinearKind,
    train: &[WindowSample],
    regions: usize,
    q: usize,
    lambda: f64,
) -> Result<LinearBaselineParams> {
    if q == 0 {
        return Err(Error::config("baseline look-back must be positive"));
    }
    if !(lambda.is_finite() && lambda >= 0.0) {
        return Err(Error::config(format!(
            "ridge strength must be non-negative, got {lambda}"
        )));
    }
    let window = train.first().map_or(0, |s| s.input.len() / regions);
    if window < q {
        return Err(Error::config(format!("look-back {q} exceeds window {window}")));
    }
    let p = match kind {
        LinearKind::Ar => q,
        LinearKind::Lridge => regions * q,
    };
    let needed = if kind == LinearKind::Ar || lambda == 0.0 {
        p + 1
    } else {
        2
    };
    if train.len() < needed {
        return Err(Error::config(format!(
            "underdetermined baseline fit: {} training samples for {} unknowns",
            train.len(),
            p + 1
        )));
    }
    let jitter = if kind == LinearKind::Ar { AR_JITTER } else { 0.0 };
    let mut coefficients = Vec::with_capacity(regions);
    let mut intercepts = Vec::with_capacity(regions);
    let shared_x: Option<Vec<Vec<f64>>> =
        (kind == LinearKind::Lridge).then(|| train.iter().map(|s| features(kind, s, regions, 0, q)).collect());
    for i in 0..regions {
        let own;
        let x = match &shared_x {
            Some(x) => x,
            None => {
                own = train
                    .iter()
                    .map(|s| features(kind, s, regions, i, q))
                    .collect::<Vec<_>>();
                &own
            }
        };
        let y: Vec<f64> = train.iter().map(|s| s.target[i]).collect();
        let (w, b) = solve_ridge(x, &y, lambda, jitter)?;
        coefficients.push(w);
        intercepts.push(b);
    }
    Ok(LinearBaselineParams {
        kind,
        regions,
        lags: q,
        lambda,
        coefficients,
        intercepts,
    })
}

/// Least-squares AR(q) per region from windowed samples.
pub fn fit_ar_samples(train: &[WindowSample], regions: usize, q: usize) -> Result<LinearBaselineParams> {
    fit(LinearKind::Ar, train, regions, q, 0.0)
}

/// Ridge VAR(q) over all regions from windowed samples.
pub fn fit_lridge_samples(
    train: &[WindowSample],
    regions: usize,
    q: usize,
    lambda: f64,
) -> Result<LinearBaselineParams> {
    fit(LinearKind::Lridge, train, regions, q, lambda)
}

/// Lag samples of width `q` whose target index falls in `span`.
fn series_samples(series: &EpidemicSeries, q: usize, h: usize, span: std::ops::Range<usize>) -> Vec<WindowSample> {
    let first_target = q - 1 + h;
    (span.start.max(first_target)..span.end.min(series.len()))
        .map(|target| {
            let t = target - h;
            WindowSample {
                input: crate::data::window_at(series, q, t),
                target: series.column(target),
                t,
            }
        })
        .collect()
}

/// AR fit of `y_{t+h}` on `[x_t … x_{t−q+1}]` per region, over targets in
/// the training span of `bounds`.
pub fn fit_ar(series: &EpidemicSeries, q: usize, h: usize, bounds: &SplitBounds) -> Result<LinearBaselineParams> {
    if q == 0 || h == 0 {
        return Err(Error::config("look-back and horizon must be positive"));
    }
    let train = series_samples(series, q, h, 0..bounds.train_end);
    fit_ar_samples(&train, series.num_regions(), q)
}

/// Ridge VAR with a fixed `lambda` over targets in the training span.
pub fn fit_lridge(
    series: &EpidemicSeries,
    q: usize,
    h: usize,
    lambda: f64,
    bounds: &SplitBounds,
) -> Result<LinearBaselineParams> {
    if q == 0 || h == 0 {
        return Err(Error::config("look-back and horizon must be positive"));
    }
    let train = series_samples(series, q, h, 0..bounds.train_end);
    fit_lridge_samples(&train, series.num_regions(), q, lambda)
}

/// Validation MSE of one candidate ridge strength.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LambdaScore {
    pub lambda: f64,
    pub val_mse: f64,
}

/// Fits LRidge for each `lambda` and keeps the one with the lowest
/// validation MSE (ties to the smaller strength).
pub fn select_lridge(
    train: &[WindowSample],
    val: &[WindowSample],
    regions: usize,
    q: usize,
    lambdas: &[f64],
) -> Result<(LinearBaselineParams, Vec<LambdaScore>)> {
    if val.is_empty() || lambdas.is_empty() {
        return Err(Error::config(
            "ridge selection needs validation samples and candidate strengths",
        ));
    }
    let mut scores = Vec::new();
    let mut best: Option<(f64, LinearBaselineParams)> = None;
    for &lambda in lambdas {
        let model = fit_lridge_samples(train, regions, q, lambda)?;
        let pred = model.forecast(val)?;
        let mut sq = 0.0;
        for (p, s) in pred.iter().zip(val) {
            sq += p.iter().zip(&s.target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        }
        let val_mse = sq / (val.len() * regions) as f64;
        if !val_mse.is_finite() {
            return Err(Error::Numerical(format!(
                "validation error not finite for lambda {lambda}"
            )));
        }
        scores.push(LambdaScore { lambda, val_mse });
        if best.as_ref().is_none_or(|(b, _)| val_mse < *b) {
            best = Some((val_mse, model));
        }
    }
    Ok((best.unwrap().1, scores))
}

impl LinearBaselineParams {
    pub fn predict_one(&self, sample: &WindowSample) -> Vec<f64> {
        let shared = (self.kind == LinearKind::Lridge).then(|| features(self.kind, sample, self.regions, 0, self.lags));
        (0..self.regions)
            .map(|i| {
                let own;
                let x = match &shared {
                    Some(x) => x,
                    None => {
                        own = features(self.kind, sample, self.regions, i, self.lags);
                        &own
                    }
                };
                self.intercepts[i] + x.iter().zip(&self.coefficients[i]).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect()
    }
}

impl Forecaster for LinearBaselineParams {
    fn forecast(&self, samples: &[WindowSample]) -> Result<Vec<Vec<f64>>> {
        let window = samples.first().map_or(self.lags, |s| s.input.len() / self.regions);
        if window < self.lags || samples.iter().any(|s| s.input.len() != window * self.regions) {
            return Err(Error::dim("baseline forecast", &[self.regions, self.lags], &[window]));
        }
        Ok(samples.iter().map(|s| self.predict_one(s)).collect())
    }
}

/// Last observed value.
#[derive(Debug, Clone, Copy)]
pub struct Persistence {
    pub regions: usize,
}

impl Forecaster for Persistence {
    fn forecast(&self, samples: &[WindowSample]) -> Result<Vec<Vec<f64>>> {
        Ok(samples
            .iter()
            .map(|s| {
                let t = s.input.len() / self.regions;
                (0..self.regions).map(|i| s.input[i * t + t - 1]).collect()
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_windows, SplitSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn bounds(len: usize) -> SplitBounds {
        SplitSpec::default().bounds(len).unwrap()
    }

    #[test]
    fn recovers_noiseless_ar1() {
        let x: Vec<f64> = (0..80).map(|t| 100.0 * 0.9f64.powi(t)).collect();
        let s = EpidemicSeries::from_rows(vec![x]).unwrap();
        let b = bounds(80);
        let fit = fit_ar(&s, 1, 1, &b).unwrap();
        assert!((fit.coefficients[0][0] - 0.9).abs() < 1e-6, "{:?}", fit.coefficients);
        let w = make_windows(&s, 1, 1, &b).unwrap();
        let pred = fit.forecast(&w.test).unwrap();
        let err: f64 = pred
            .iter()
            .zip(&w.test)
            .map(|(p, s)| (p[0] - s.target[0]).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn constant_series_predicts_constant() {
        let s = EpidemicSeries::from_rows(vec![vec![4.0; 40]]).unwrap();
        let fit = fit_ar(&s, 3, 2, &bounds(40)).unwrap();
        assert!((fit.intercepts[0] - 4.0).abs() < 1e-12);
        let w = make_windows(&s, 5, 2, &bounds(40)).unwrap();
        for p in fit.forecast(&w.test).unwrap() {
            assert!((p[0] - 4.0).abs() < 1e-9);
        }
    }

    #[test]
    fn random_walk_coefficient_near_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let noise = Normal::new(0.0, 1.0).unwrap();
        let mut x = vec![1000.0];
        for _ in 1..2000 {
            let next = x.last().unwrap() + noise.sample(&mut rng);
            x.push(next);
        }
        let s = EpidemicSeries::from_rows(vec![x]).unwrap();
        let fit = fit_ar(&s, 1, 1, &bounds(2000)).unwrap();
        assert!((fit.coefficients[0][0] - 1.0).abs() < 0.1, "{}", fit.coefficients[0][0]);
    }

    #[test]
    fn underdetermined_reports_count() {
        let s = EpidemicSeries::from_rows(vec![(0..12).map(f64::from).collect()]).unwrap();
        let err = fit_ar(&s, 5, 1, &bounds(12)).unwrap_err();
        assert!(err.to_string().contains("1 training samples"), "{err}");
    }

    fn coupled_pair(len: usize) -> EpidemicSeries {
        let x1: Vec<f64> = (0..len)
            .map(|t| 5.0 + (t as f64 * 0.37).sin() + 0.5 * (t as f64 * 0.11).cos())
            .collect();
        let x2: Vec<f64> = (0..len).map(|t| if t >= 2 { x1[t - 2] } else { 5.0 }).collect();
        EpidemicSeries::from_rows(vec![x1, x2]).unwrap()
    }

    #[test]
    fn lridge_zero_lambda_matches_ols() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let noise = Normal::new(0.0, 0.2).unwrap();
        let base = coupled_pair(120);
        let rows = (0..2)
            .map(|i| base.region(i).iter().map(|v| v + noise.sample(&mut rng)).collect())
            .collect();
        let s = EpidemicSeries::from_rows(rows).unwrap();
        let b = bounds(120);
        let w = make_windows(&s, 3, 1, &b).unwrap();
        let ridge = fit_lridge_samples(&w.train, 2, 3, 0.0).unwrap();
        // OLS through the uncentered normal equations with an explicit intercept column
        for i in 0..2 {
            let x = DMatrix::from_fn(w.train.len(), 7, |r, c| {
                if c == 6 {
                    1.0
                } else {
                    features(LinearKind::Lridge, &w.train[r], 2, i, 3)[c]
                }
            });
            let y = DVector::from_fn(w.train.len(), |r, _| w.train[r].target[i]);
            let beta = (x.transpose() * &x).lu().solve(&(x.transpose() * y)).unwrap();
            let pred_ols: Vec<f64> = w
                .test
                .iter()
                .map(|s| {
                    let f = features(LinearKind::Lridge, s, 2, i, 3);
                    beta[6] + f.iter().zip(beta.iter()).map(|(a, b)| a * b).sum::<f64>()
                })
                .collect();
            let pred_ridge: Vec<f64> = ridge.forecast(&w.test).unwrap().iter().map(|p| p[i]).collect();
            for (a, b) in pred_ols.iter().zip(&pred_ridge) {
                assert!((a - b).abs() < 1e-6, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn huge_lambda_shrinks_to_intercept() {
        let s = coupled_pair(200);
        let b = bounds(200);
        let norm = |l: f64| {
            let f = fit_lridge(&s, 3, 2, l, &b).unwrap();
            f.coefficients.iter().flatten().map(|c| c * c).sum::<f64>().sqrt()
        };
        let (small, mid, huge) = (norm(0.01), norm(10.0), norm(1e6));
        assert!(small > mid && mid > huge, "{small} {mid} {huge}");
        assert!(huge < 1e-3);
    }

    #[test]
    fn lridge_recovers_lag_coupling() {
        let s = coupled_pair(300);
        let b = bounds(300);
        let fit = fit_lridge(&s, 2, 2, 0.0, &b).unwrap();
        let w = make_windows(&s, 2, 2, &b).unwrap();
        let pred = fit.forecast(&w.test).unwrap();
        let sq: f64 = pred
            .iter()
            .zip(&w.test)
            .map(|(p, s)| (p[1] - s.target[1]).powi(2))
            .sum();
        let rmse = (sq / w.test.len() as f64).sqrt();
        assert!(rmse < 1e-6, "{rmse}");
    }

    #[test]
    fn selection_minimizes_validation_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let noise = Normal::new(0.0, 0.3).unwrap();
        let base = coupled_pair(200);
        let rows: Vec<Vec<f64>> = (0..2)
            .map(|i| base.region(i).iter().map(|v| v + noise.sample(&mut rng)).collect())
            .collect();
        let s = EpidemicSeries::from_rows(rows).unwrap();
        let w = make_windows(&s, 4, 2, &bounds(200)).unwrap();
        let (chosen, scores) = select_lridge(&w.train, &w.val, 2, 4, &LRIDGE_LAMBDAS).unwrap();
        let min = scores.iter().map(|s| s.val_mse).fold(f64::INFINITY, f64::min);
        let chosen_score = scores.iter().find(|s| s.lambda == chosen.lambda).unwrap();
        assert_eq!(chosen_score.val_mse, min);
        assert!(scores.iter().all(|s| s.val_mse.is_finite()));
    }

    #[test]
    fn persistence_returns_last_column() {
        let s = EpidemicSeries::from_rows(vec![vec![1.0, 2.0, 3.0, 4.0], vec![5.0, 6.0, 7.0, 8.0]]).unwrap();
        let sample = WindowSample {
            input: crate::data::window_at(&s, 3, 2),
            target: s.column(3),
            t: 2,
        };
        assert_eq!(
            Persistence { regions: 2 }.forecast(&[sample]).unwrap(),
            vec![vec![3.0, 7.0]]
        );
    }
}
