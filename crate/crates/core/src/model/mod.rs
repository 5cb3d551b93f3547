//! The forecasting network.
//!
//! Two embeddings are computed per region. The intra-series embedding is the
//! last LSTM hidden state over the region's own window. The inter-series
//! embedding runs five convolution blocks (local, dilated, window-length)
//! over each region, then self-attention across regions. Both are gated
//! element-wise by learnable matrices, concatenated and passed through a
//! dense layer; a linear autoregressive head over the last `q` inputs is
//! added on top.
//!
//! A batch of `B` windows is processed at once as `B·N` rows, so batch
//! normalization pools over every region of every window in the batch.

mod config;
mod params;

use std::collections::BTreeMap;

pub use config::{ConvBlock, SefnetConfig, Variant};
pub use params::{decays, SefnetParams};

use crate::error::{Error, Result};
use crate::tensor::{ArrayId, BnBatchStats, BnRunning, ComputeTape, DiffArray, Mode};

/// Tape handles of the parameters registered for one forward pass.
pub type ParamLeaves = BTreeMap<String, ArrayId>;

/// Everything a forward pass leaves on the tape.
#[derive(Debug)]
pub struct ForwardOutput {
    /// `[B×N]` predictions on the normalized scale.
    pub pred: ArrayId,
    pub leaves: ParamLeaves,
    /// Batch moments of each convolution block (train mode only).
    pub bn_stats: Vec<BnBatchStats>,
    /// `[B·N×D]`.
    pub h_intra: Option<ArrayId>,
    /// `[B·N×F]`.
    pub h_dev: Option<ArrayId>,
    /// `[B×N×N]`.
    pub attention: Option<ArrayId>,
    /// `[B×N×A]`.
    pub h_inter: Option<ArrayId>,
    /// `[B×N×W]`.
    pub h_fus: ArrayId,
    pub nonlinear: ArrayId,
    pub linear: Option<ArrayId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sefnet {
    pub config: SefnetConfig,
    pub params: SefnetParams,
    /// Running statistics, one per convolution block.
    pub bn_running: Vec<BnRunning>,
}

impl Sefnet {
    pub fn new(config: SefnetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = SefnetParams::init(&config, seed);
        let bn_running = Self::fresh_running(&config);
        Ok(Self {
            config,
            params,
            bn_running,
        })
    }

    pub fn from_parts(config: SefnetConfig, params: SefnetParams, bn_running: Vec<BnRunning>) -> Result<Self> {
        config.validate()?;
        params.check_against(&config)?;
        if bn_running.len() != Self::fresh_running(&config).len()
            || bn_running
                .iter()
                .any(|r| r.mean.len() != config.filters || r.var.len() != config.filters)
        {
            return Err(Error::config(
                "batch-norm running statistics do not match the architecture",
            ));
        }
        Ok(Self {
            config,
            params,
            bn_running,
        })
    }

    fn fresh_running(config: &SefnetConfig) -> Vec<BnRunning> {
        if config.variant.uses_inter() {
            vec![BnRunning::new(config.filters); config.conv_blocks().len()]
        } else {
            Vec::new()
        }
    }

    pub fn apply_bn_stats(&mut self, stats: &[BnBatchStats]) {
        for (running, batch) in self.bn_running.iter_mut().zip(stats) {
            running.absorb(batch);
        }
    }

    /// Registers every parameter as a tape leaf.
    pub fn register(&self, tape: &mut ComputeTape, track_grad: bool) -> ParamLeaves {
        self.params
            .iter()
            .map(|(name, arr)| {
                let mut a = arr.clone();
                a.set_requires_grad(track_grad);
                (name.to_string(), tape.leaf(a))
            })
            .collect()
    }

    fn leaf(leaves: &ParamLeaves, name: &str) -> Result<ArrayId> {
        leaves
            .get(name)
            .copied()
            .ok_or_else(|| Error::Internal(format!("parameter {name} not registered")))
    }

    /// LSTM over each row of `x: [R×T]` with shared weights; returns the
    /// last hidden state `[R×D]`.
    pub fn intra_forward(&self, tape: &mut ComputeTape, leaves: &ParamLeaves, x: ArrayId) -> Result<ArrayId> {
        let (rows, steps) = (tape.shape(x)[0], tape.shape(x)[1]);
        let d = self.config.lstm_hidden;
        let mut inputs: Vec<ArrayId> = (0..steps).map(|t| tape.select_last(x, &[t])).collect::<Result<_>>()?;
        for layer in 0..self.config.lstm_layers {
            let w_ih = Self::leaf(leaves, &format!("lstm.{layer}.w_ih"))?;
            let w_hh = Self::leaf(leaves, &format!("lstm.{layer}.w_hh"))?;
            let bias = Self::leaf(leaves, &format!("lstm.{layer}.bias"))?;
            let mut state: Option<(ArrayId, ArrayId)> = None;
            let mut outputs = Vec::with_capacity(steps);
            for &input in &inputs {
                let xw = tape.matmul(input, w_ih)?;
                let pre = match state {
                    Some((h, _)) => {
                        let hw = tape.matmul(h, w_hh)?;
                        tape.add(xw, hw)?
                    }
                    None => xw,
                };
                let gates = tape.add(pre, bias)?;
                let i_pre = tape.slice_last(gates, 0, d)?;
                let f_pre = tape.slice_last(gates, d, d)?;
                let g_pre = tape.slice_last(gates, 2 * d, d)?;
                let o_pre = tape.slice_last(gates, 3 * d, d)?;
                let i = tape.sigmoid(i_pre);
                let f = tape.sigmoid(f_pre);
                let g = tape.tanh(g_pre);
                let o = tape.sigmoid(o_pre);
                let ig = tape.mul(i, g)?;
                let c = match state {
                    Some((_, c_prev)) => {
                        let fc = tape.mul(f, c_prev)?;
                        tape.add(fc, ig)?
                    }
                    None => ig,
                };
                let tc = tape.tanh(c);
                let h = tape.mul(o, tc)?;
                state = Some((h, c));
                outputs.push(h);
            }
            inputs = outputs;
        }
        match inputs.last() {
            Some(&h) => Ok(h),
            None => Ok(tape.constant(DiffArray::zeros(&[rows, d]))),
        }
    }

    /// Region-aware convolution over `x: [R×T]`: every block is convolved,
    /// batch-normalized and (except the window-length block) max-pooled to
    /// `P`; the concatenation goes through tanh. Returns `[R×F]` and the
    /// batch moments of each block.
    pub fn raconv_forward(
        &self,
        tape: &mut ComputeTape,
        leaves: &ParamLeaves,
        x: ArrayId,
        mode: Mode,
    ) -> Result<(ArrayId, Vec<BnBatchStats>)> {
        let rows = tape.shape(x)[0];
        let mut parts = Vec::new();
        let mut stats = Vec::new();
        for (b, block) in self.config.conv_blocks().iter().enumerate() {
            let kernel = Self::leaf(leaves, &format!("conv.{b}.kernel"))?;
            let gamma = Self::leaf(leaves, &format!("conv.{b}.bn_gamma"))?;
            let beta = Self::leaf(leaves, &format!("conv.{b}.bn_beta"))?;
            let conv = tape.conv1d(x, kernel, block.dilation)?;
            let (normed, batch) = tape.batch_norm(conv, gamma, beta, &self.bn_running[b], mode)?;
            stats.extend(batch);
            let feat = if block.pooled {
                tape.adaptive_max_pool(normed, self.config.pool)?
            } else {
                normed
            };
            let width = tape.value(feat).numel() / rows;
            parts.push(tape.reshape(feat, &[rows, width])?);
        }
        let joined = tape.concat(&parts)?;
        Ok((tape.tanh(joined), stats))
    }

    /// Unscaled dot-product self-attention across the `N` regions of each
    /// window. `h_dev: [B·N×F]` → (`attention: [B×N×N]`, `h_inter: [B×N×A]`).
    pub fn attention_forward(
        &self,
        tape: &mut ComputeTape,
        leaves: &ParamLeaves,
        h_dev: ArrayId,
        batch: usize,
    ) -> Result<(ArrayId, ArrayId)> {
        let n = self.config.regions;
        let a = self.config.attn_dim;
        let project = |tape: &mut ComputeTape, name: &str| -> Result<ArrayId> {
            let w = Self::leaf(leaves, name)?;
            let p = tape.matmul(h_dev, w)?;
            tape.reshape(p, &[batch, n, a])
        };
        let q = project(tape, "attn.w_q")?;
        let k = project(tape, "attn.w_k")?;
        let v = project(tape, "attn.w_v")?;
        let scores = tape.batch_matmul(q, k, true)?;
        let attention = tape.softmax_rows(scores);
        let h_inter = tape.batch_matmul(attention, v, false)?;
        Ok((attention, h_inter))
    }

    /// Gates each embedding element-wise by its fusion matrix and
    /// concatenates along the feature axis. Either side may be absent
    /// (ablations); without fusion the embeddings are concatenated as is.
    pub fn fuse(
        &self,
        tape: &mut ComputeTape,
        leaves: &ParamLeaves,
        h_inter: Option<ArrayId>,
        h_intra: Option<ArrayId>,
    ) -> Result<ArrayId> {
        let fusion = self.config.variant.uses_fusion();
        let mut parts = Vec::new();
        if let Some(h) = h_inter {
            parts.push(if fusion {
                let w = Self::leaf(leaves, "fusion.w_inter")?;
                tape.mul(h, w)?
            } else {
                h
            });
        }
        if let Some(h) = h_intra {
            parts.push(if fusion {
                let w = Self::leaf(leaves, "fusion.w_intra")?;
                tape.mul(h, w)?
            } else {
                h
            });
        }
        if parts.len() == 1 {
            Ok(parts[0])
        } else {
            tape.concat(&parts)
        }
    }

    /// `Σ_m w_m · x_{t−m} + b` over the last `q` columns of `x: [R×T]`,
    /// weights shared across regions. `None` when `q = 0`.
    pub fn ar_forward(&self, tape: &mut ComputeTape, leaves: &ParamLeaves, x: ArrayId) -> Result<Option<ArrayId>> {
        let q = self.config.effective_ar_window();
        if q == 0 {
            return Ok(None);
        }
        let t = tape.shape(x)[1];
        let lags: Vec<usize> = (0..q).map(|m| t - 1 - m).collect();
        let recent = tape.select_last(x, &lags)?;
        let w = Self::leaf(leaves, "ar.w")?;
        let w = tape.reshape(w, &[q, 1])?;
        let b = Self::leaf(leaves, "ar.b")?;
        let lin = tape.matmul(recent, w)?;
        Ok(Some(tape.add(lin, b)?))
    }

    /// Full forward pass over `batch` windows; `inputs` is row-major
    /// `[B×N×T]`. Dropout (train mode only) is drawn from `dropout_seed`.
    pub fn forward(
        &self,
        tape: &mut ComputeTape,
        inputs: &[f64],
        batch: usize,
        mode: Mode,
        dropout_seed: u64,
        track_grad: bool,
    ) -> Result<ForwardOutput> {
        let leaves = self.register(tape, track_grad);
        self.forward_with(tape, leaves, inputs, batch, mode, dropout_seed)
    }

    /// As [`Self::forward`] with parameters already on the tape.
    pub fn forward_with(
        &self,
        tape: &mut ComputeTape,
        leaves: ParamLeaves,
        inputs: &[f64],
        batch: usize,
        mode: Mode,
        dropout_seed: u64,
    ) -> Result<ForwardOutput> {
        let cfg = &self.config;
        let (n, t) = (cfg.regions, cfg.window);
        if batch == 0 || inputs.len() != batch * n * t {
            return Err(Error::dim("forward", &[batch, n, t], &[inputs.len()]));
        }
        let rows = batch * n;
        let x = tape.constant(DiffArray::new(&[rows, t], inputs.to_vec())?);

        let h_intra = if cfg.variant.uses_intra() {
            Some(self.intra_forward(tape, &leaves, x)?)
        } else {
            None
        };
        let (h_dev, attention, h_inter, bn_stats) = if cfg.variant.uses_inter() {
            let (h_dev, stats) = self.raconv_forward(tape, &leaves, x, mode)?;
            let (attn, h_inter) = self.attention_forward(tape, &leaves, h_dev, batch)?;
            (Some(h_dev), Some(attn), Some(h_inter), stats)
        } else {
            (None, None, None, Vec::new())
        };
        let intra3 = match h_intra {
            Some(h) => Some(tape.reshape(h, &[batch, n, cfg.lstm_hidden])?),
            None => None,
        };
        let h_fus = self.fuse(tape, &leaves, h_inter, intra3)?;
        let width = tape.shape(h_fus)[2];
        let dropped = tape.dropout(h_fus, cfg.dropout, dropout_seed, mode)?;
        let flat = tape.reshape(dropped, &[rows, width])?;
        let w_n = Self::leaf(&leaves, "dense.w")?;
        let b_n = Self::leaf(&leaves, "dense.b")?;
        let dense = tape.matmul(flat, w_n)?;
        let nonlinear = tape.add(dense, b_n)?;
        let linear = self.ar_forward(tape, &leaves, x)?;
        let summed = match linear {
            Some(l) => tape.add(nonlinear, l)?,
            None => nonlinear,
        };
        let pred = tape.reshape(summed, &[batch, n])?;
        Ok(ForwardOutput {
            pred,
            leaves,
            bn_stats,
            h_intra,
            h_dev,
            attention,
            h_inter,
            h_fus,
            nonlinear,
            linear,
        })
    }

    /// Eval-mode predictions, row-major `[B×N]`.
    pub fn predict(&self, inputs: &[f64], batch: usize) -> Result<Vec<f64>> {
        let mut tape = ComputeTape::new();
        let out = self.forward(&mut tape, inputs, batch, Mode::Eval, 0, false)?;
        Ok(tape.value(out.pred).values().to_vec())
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }
}
