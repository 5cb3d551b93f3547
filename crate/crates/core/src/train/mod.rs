//! Mini-batch Adam training with early stopping, and grid search.

mod adam;

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use adam::{AdamHyper, AdamState, Grads};

use crate::data::{NormMode, SplitSpec, WindowSample, Windows};
use crate::error::{Error, Result};
use crate::eval::PccMode;
use crate::model::{Sefnet, SefnetConfig};
use crate::tensor::{ComputeTape, DiffArray, Mode};

/// Hyperparameters of one reproducible run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: SefnetConfig,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    #[serde(default)]
    pub norm: NormMode,
    #[serde(default)]
    pub split: SplitSpec,
    #[serde(default)]
    pub adam: AdamHyper,
    #[serde(default)]
    pub pcc: PccMode,
}

impl RunConfig {
    pub fn new(model: SefnetConfig, seed: u64) -> Self {
        Self {
            model,
            lr: 0.005,
            weight_decay: 5e-4,
            batch_size: 128,
            max_epochs: 500,
            patience: 20,
            seed,
            norm: NormMode::PerRegion,
            split: SplitSpec::default(),
            adam: AdamHyper::default(),
            pcc: PccMode::Pooled,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.split.validate()?;
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::config(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::config("weight decay must be non-negative"));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::config("batch size and max epochs must be positive"));
        }
        if self.patience == 0 {
            return Err(Error::config("patience must be at least 1"));
        }
        Ok(())
    }
}

/// SplitMix64 of `(seed, stream, index)`; independent RNG streams per use.
pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const STREAM_INIT: u64 = 1;
const STREAM_SHUFFLE: u64 = 2;
const STREAM_DROPOUT: u64 = 3;

/// Mean of squared errors over all entries.
pub fn mse_loss(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(Error::dim("mse_loss", &[pred.len()], &[target.len()]));
    }
    if pred.is_empty() {
        return Err(Error::config("mse of an empty batch"));
    }
    Ok(pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / pred.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    Patience,
    MaxEpochs,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    /// 1-based.
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stop_reason: StopReason,
    pub adam: AdamHyper,
    /// Excluded from serialized reports so they stay byte-reproducible.
    #[serde(skip)]
    pub wall_time_secs: f64,
}

impl PartialEq for TrainReport {
    fn eq(&self, other: &Self) -> bool {
        self.epochs == other.epochs
            && self.best_epoch == other.best_epoch
            && self.best_val_loss == other.best_val_loss
            && self.stop_reason == other.stop_reason
            && self.adam == other.adam
    }
}

impl TrainReport {
    /// `epoch,train_loss,val_loss` lines with a header.
    pub fn epochs_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_loss\n");
        for e in &self.epochs {
            s.push_str(&format!("{},{},{}\n", e.epoch, e.train_loss, e.val_loss));
        }
        s
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Model as of the best validation epoch.
    pub model: Sefnet,
    pub report: TrainReport,
}

/// Flattens samples to `[B×N×T]` inputs and `[B×N]` targets.
pub fn stack(samples: &[&WindowSample]) -> (Vec<f64>, Vec<f64>) {
    let inputs = samples.iter().flat_map(|s| s.input.iter().copied()).collect();
    let targets = samples.iter().flat_map(|s| s.target.iter().copied()).collect();
    (inputs, targets)
}

/// Train-mode loss and gradients of one batch.
pub fn batch_gradients(
    model: &Sefnet,
    samples: &[&WindowSample],
    dropout_seed: u64,
) -> Result<(f64, Grads, Vec<crate::tensor::BnBatchStats>)> {
    let (inputs, targets) = stack(samples);
    let mut tape = ComputeTape::new();
    let out = model.forward(&mut tape, &inputs, samples.len(), Mode::Train, dropout_seed, true)?;
    let n = model.config.regions;
    let target = tape.constant(DiffArray::new(&[samples.len(), n], targets)?);
    let loss = tape.mse(out.pred, target)?;
    let value = tape.value(loss).values()[0];
    if !value.is_finite() {
        return Ok((value, Grads::new(), out.bn_stats));
    }
    tape.backward(loss)?;
    let grads = out
        .leaves
        .iter()
        .map(|(name, id)| {
            let g = tape
                .grad(*id)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; tape.value(*id).numel()]);
            (name.clone(), g)
        })
        .collect();
    Ok((value, grads, out.bn_stats))
}

/// Eval-mode MSE over `samples`, on the normalized scale.
pub fn eval_loss(model: &Sefnet, samples: &[WindowSample], chunk: usize) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::config("evaluation set is empty"));
    }
    let mut sq = 0.0;
    let mut count = 0usize;
    for part in samples.chunks(chunk.max(1)) {
        let refs: Vec<&WindowSample> = part.iter().collect();
        let (inputs, targets) = stack(&refs);
        let pred = model.predict(&inputs, part.len())?;
        sq += pred.iter().zip(&targets).map(|(p, t)| (p - t) * (p - t)).sum::<f64>();
        count += pred.len();
    }
    Ok(sq / count as f64)
}

/// Trains from a fresh initialization and returns the best-validation model.
pub fn train(run: &RunConfig, windows: &Windows) -> Result<TrainOutcome> {
    run.validate()?;
    let model = Sefnet::new(run.model.clone(), derive_seed(run.seed, STREAM_INIT, 0))?;
    train_from(run, model, windows)
}

/// Trains starting from `model`.
pub fn train_from(run: &RunConfig, mut model: Sefnet, windows: &Windows) -> Result<TrainOutcome> {
    run.validate()?;
    if windows.train.is_empty() || windows.val.is_empty() {
        return Err(Error::config(format!(
            "training needs non-empty train and validation splits, got {} and {} samples",
            windows.train.len(),
            windows.val.len()
        )));
    }
    let started = Instant::now();
    let mut adam = AdamState::new(run.adam);
    let mut order: Vec<usize> = (0..windows.train.len()).collect();
    let mut epochs = Vec::new();
    let mut best: Option<(usize, f64, Sefnet)> = None;
    let mut since_best = 0;
    let mut stop_reason = StopReason::MaxEpochs;

    for epoch in 1..=run.max_epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(run.seed, STREAM_SHUFFLE, epoch as u64));
        order.sort_unstable();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for (b, chunk) in order.chunks(run.batch_size).enumerate() {
            let samples: Vec<&WindowSample> = chunk.iter().map(|&i| &windows.train[i]).collect();
            let dropout_seed = derive_seed(run.seed, STREAM_DROPOUT, ((epoch as u64) << 32) | b as u64);
            let (loss, grads, stats) = batch_gradients(&model, &samples, dropout_seed)?;
            if !loss.is_finite() {
                return Err(Error::Numerical(format!(
                    "training loss became {loss} in epoch {epoch} (lr {:?})",
                    run.lr
                )));
            }
            loss_sum += loss * samples.len() as f64;
            adam.step(&mut model.params, &grads, run.lr, run.weight_decay)?;
            model.apply_bn_stats(&stats);
        }
        let train_loss = loss_sum / windows.train.len() as f64;
        let val_loss = eval_loss(&model, &windows.val, run.batch_size)?;
        if !val_loss.is_finite() {
            return Err(Error::Numerical(format!(
                "validation loss became {val_loss} in epoch {epoch} (lr {:?})",
                run.lr
            )));
        }
        epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
        });
        let improved = best.as_ref().is_none_or(|(_, b, _)| val_loss < *b);
        if improved {
            best = Some((epoch, val_loss, model.clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= run.patience {
                stop_reason = StopReason::Patience;
                break;
            }
        }
    }
    let (best_epoch, best_val_loss, best_model) = best.expect("at least one epoch ran");
    Ok(TrainOutcome {
        model: best_model,
        report: TrainReport {
            epochs,
            best_epoch,
            best_val_loss,
            stop_reason,
            adam: run.adam,
            wall_time_secs: started.elapsed().as_secs_f64(),
        },
    })
}

/// Value sets to sweep; an empty list keeps the base value.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Grid {
    pub lr: Vec<f64>,
    pub lstm_hidden: Vec<usize>,
    pub attn_dim: Vec<usize>,
    pub lstm_layers: Vec<usize>,
    pub filters: Vec<usize>,
    pub pool: Vec<usize>,
    pub ar_window: Vec<usize>,
}

impl Grid {
    /// The full sweep (1944 combinations).
    pub fn full() -> Self {
        Self {
            lr: vec![0.01, 0.005, 0.001],
            lstm_hidden: vec![16, 32, 64],
            attn_dim: vec![16, 32, 64],
            lstm_layers: vec![1, 2],
            filters: vec![4, 8, 12, 16],
            pool: vec![1, 3, 5],
            ar_window: vec![0, 10, 20],
        }
    }

    /// True when no axis is swept.
    pub fn is_empty(&self) -> bool {
        [
            self.lr.len(),
            self.lstm_hidden.len(),
            self.attn_dim.len(),
            self.lstm_layers.len(),
            self.filters.len(),
            self.pool.len(),
            self.ar_window.len(),
        ]
        .iter()
        .all(|&n| n == 0)
    }

    /// Cartesian product in a fixed order (lr outermost).
    pub fn expand(&self, base: &RunConfig) -> Vec<RunConfig> {
        fn or<T: Copy>(v: &[T], d: T) -> Vec<T> {
            if v.is_empty() {
                vec![d]
            } else {
                v.to_vec()
            }
        }
        let m = &base.model;
        let mut out = Vec::new();
        for &lr in &or(&self.lr, base.lr) {
            for &d in &or(&self.lstm_hidden, m.lstm_hidden) {
                for &a in &or(&self.attn_dim, m.attn_dim) {
                    for &l in &or(&self.lstm_layers, m.lstm_layers) {
                        for &k in &or(&self.filters, m.filters) {
                            for &p in &or(&self.pool, m.pool) {
                                for &q in &or(&self.ar_window, m.ar_window) {
                                    let mut c = base.clone();
                                    c.lr = lr;
                                    c.model.lstm_hidden = d;
                                    c.model.attn_dim = a;
                                    c.model.lstm_layers = l;
                                    c.model.filters = k;
                                    c.model.pool = p;
                                    c.model.ar_window = q;
                                    out.push(c);
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridRun {
    pub config: RunConfig,
    pub num_parameters: Option<usize>,
    pub report: Option<TrainReport>,
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct GridOutcome {
    pub runs: Vec<GridRun>,
    /// Index into `runs` of the selected configuration.
    pub best: Option<usize>,
    pub best_model: Option<Sefnet>,
}

impl GridOutcome {
    pub fn failures(&self) -> usize {
        self.runs.iter().filter(|r| r.error.is_some()).count()
    }
}

/// Trains every grid point (up to `jobs` at a time) and selects the lowest
/// best-validation loss, breaking ties by fewer parameters then lower
/// learning rate. Failed runs are recorded and skipped.
pub fn grid_search(base: &RunConfig, grid: &Grid, windows: &Windows, jobs: usize) -> Result<GridOutcome> {
    let configs = grid.expand(base);
    if configs.is_empty() {
        return Err(Error::config("grid is empty"));
    }
    let run_one = |config: &RunConfig| match train(config, windows) {
        Ok(out) => (
            GridRun {
                config: config.clone(),
                num_parameters: Some(out.model.num_parameters()),
                report: Some(out.report),
                error: None,
            },
            Some(out.model),
        ),
        Err(e) => (
            GridRun {
                config: config.clone(),
                num_parameters: None,
                report: None,
                error: Some(e.to_string()),
            },
            None,
        ),
    };
    let results: Vec<(GridRun, Option<Sefnet>)> = if jobs <= 1 {
        configs.iter().map(run_one).collect()
    } else {
        use rayon::prelude::*;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| Error::Internal(e.to_string()))?;
        pool.install(|| configs.par_iter().map(run_one).collect())
    };
    let (runs, mut models): (Vec<GridRun>, Vec<Option<Sefnet>>) = results.into_iter().unzip();
    let key = |r: &GridRun| {
        r.report
            .as_ref()
            .map(|rep| (rep.best_val_loss, r.num_parameters.unwrap_or(usize::MAX), r.config.lr))
    };
    let best = runs
        .iter()
        .enumerate()
        .filter_map(|(i, r)| key(r).map(|k| (i, k)))
        .min_by(|(_, a), (_, b)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.total_cmp(&b.2)))
        .map(|(i, _)| i);
    let best_model = best.and_then(|i| models[i].take());
    Ok(GridOutcome { runs, best, best_model })
}
