//! Reverse-mode differentiation over whole arrays.
//!
//! Every operation appends one node holding its output value and the bindings
//! (plus any cached intermediates) its adjoint needs. `backward` walks the
//! nodes once in reverse recording order, so an array feeding several
//! operations receives the sum of their contributions.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::array::DiffArray;
use super::kernels;
use crate::error::{Error, Result};

/// Handle to an array recorded on a [`ComputeTape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ArrayId(usize);

impl ArrayId {
    pub fn index(self) -> usize {
        self.0
    }
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-channel running statistics of a batch-normalization layer.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BnRunning {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl BnRunning {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }

    /// Exponential moving update with momentum [`BN_MOMENTUM`].
    pub fn absorb(&mut self, batch: &BnBatchStats) {
        for (r, b) in self.mean.iter_mut().zip(&batch.mean) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
        }
        for (r, b) in self.var.iter_mut().zip(&batch.var) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
        }
    }
}

/// Biased per-channel moments of one training batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BnBatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Matmul {
        a: ArrayId,
        b: ArrayId,
    },
    BatchMatmul {
        a: ArrayId,
        b: ArrayId,
        transpose_b: bool,
    },
    Conv1d {
        x: ArrayId,
        kernel: ArrayId,
        dilation: usize,
    },
    MaxPool {
        x: ArrayId,
        argmax: Vec<usize>,
    },
    BatchNorm {
        x: ArrayId,
        gamma: ArrayId,
        beta: ArrayId,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        mode: Mode,
    },
    Tanh(ArrayId),
    Sigmoid(ArrayId),
    Softmax(ArrayId),
    Concat(Vec<ArrayId>),
    Add(ArrayId, ArrayId),
    Sub(ArrayId, ArrayId),
    Mul(ArrayId, ArrayId),
    Scale(ArrayId, f64),
    Dropout {
        x: ArrayId,
        mask: Vec<f64>,
    },
    Reshape(ArrayId),
    Select {
        x: ArrayId,
        index: Vec<usize>,
    },
    Sum(ArrayId),
    Mean(ArrayId),
}

#[derive(Debug)]
struct Node {
    array: DiffArray,
    op: Op,
}

/// Ordered record of executed operations.
#[derive(Debug, Default)]
pub struct ComputeTape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
}

impl ComputeTape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input array. Its `requires_grad` flag decides whether it
    /// receives a gradient.
    pub fn leaf(&mut self, array: DiffArray) -> ArrayId {
        self.push(array, Op::Leaf)
    }

    pub fn constant(&mut self, array: DiffArray) -> ArrayId {
        self.push(array.with_requires_grad(false), Op::Leaf)
    }

    pub fn value(&self, id: ArrayId) -> &DiffArray {
        &self.nodes[id.0].array
    }

    pub fn shape(&self, id: ArrayId) -> &[usize] {
        self.nodes[id.0].array.shape()
    }

    /// Gradient accumulated at `id` by the last `backward`.
    pub fn grad(&self, id: ArrayId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    /// Clears all gradients so `backward` may run again.
    pub fn reset_grads(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
        for node in &mut self.nodes {
            node.array.clear_grad();
        }
        self.backward_done = false;
    }

    fn push(&mut self, array: DiffArray, op: Op) -> ArrayId {
        self.nodes.push(Node { array, op });
        self.grads.push(None);
        ArrayId(self.nodes.len() - 1)
    }

    fn needs_grad(&self, ids: &[ArrayId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].array.requires_grad())
    }

    fn record(&mut self, shape: &[usize], values: Vec<f64>, inputs: &[ArrayId], op: Op) -> ArrayId {
        let rg = self.needs_grad(inputs);
        let array = DiffArray::new(shape, values)
            .expect("op output shape is consistent")
            .with_requires_grad(rg);
        self.push(array, op)
    }

    fn vals(&self, id: ArrayId) -> &[f64] {
        self.nodes[id.0].array.values()
    }

    // ---------------------------------------------------------------- ops

    /// `[m×k]·[k×n] → [m×n]`.
    pub fn matmul(&mut self, a: ArrayId, b: ArrayId) -> Result<ArrayId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", &sa, &sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, k, n, self.vals(a), (k, 1), self.vals(b), (n, 1), &mut out, 0.0);
        Ok(self.record(&[m, n], out, &[a, b], Op::Matmul { a, b }))
    }

    /// Batched product `[B×m×k]·[B×k×n]`, or `[B×m×k]·[B×n×k]ᵀ` when
    /// `transpose_b` is set.
    pub fn batch_matmul(&mut self, a: ArrayId, b: ArrayId, transpose_b: bool) -> Result<ArrayId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(Error::dim("batch_matmul", &sa, &sb));
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if transpose_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kb != k {
            return Err(Error::dim("batch_matmul", &sa, &sb));
        }
        let mut out = vec![0.0; batch * m * n];
        let b_strides = if transpose_b { (1, k) } else { (n, 1) };
        for bi in 0..batch {
            kernels::gemm(
                m,
                k,
                n,
                &self.vals(a)[bi * m * k..(bi + 1) * m * k],
                (k, 1),
                &self.vals(b)[bi * k * n..(bi + 1) * k * n],
                b_strides,
                &mut out[bi * m * n..(bi + 1) * m * n],
                0.0,
            );
        }
        Ok(self.record(&[batch, m, n], out, &[a, b], Op::BatchMatmul { a, b, transpose_b }))
    }

    /// Valid dilated cross-correlation.
    ///
    /// Accepts `x: [T]` with `kernel: [s]` (output `[T − d(s−1)]`) or
    /// `x: [R×T]` with `kernel: [K×s]` (output `[R×K×(T − d(s−1))]`).
    pub fn conv1d(&mut self, x: ArrayId, kernel: ArrayId, dilation: usize) -> Result<ArrayId> {
        let (sx, sk) = (self.shape(x).to_vec(), self.shape(kernel).to_vec());
        match (sx.len(), sk.len()) {
            (1, 1) => {
                let x2 = self.reshape(x, &[1, sx[0]])?;
                let k2 = self.reshape(kernel, &[1, sk[0]])?;
                let y = self.conv1d(x2, k2, dilation)?;
                let len = self.shape(y)[2];
                self.reshape(y, &[len])
            }
            (2, 2) => {
                if dilation == 0 {
                    return Err(Error::config("dilation must be positive"));
                }
                let (rows, t) = (sx[0], sx[1]);
                let (filters, s) = (sk[0], sk[1]);
                if s == 0 {
                    return Err(Error::config("kernel size must be positive"));
                }
                let field = dilation * (s - 1) + 1;
                if t < field {
                    return Err(Error::config(format!(
                        "window length {t} is shorter than the receptive field; \
                         kernel {s} with dilation {dilation} requires T >= {field}"
                    )));
                }
                let out_len = t - field + 1;
                let out = kernels::conv1d_forward(self.vals(x), rows, t, self.vals(kernel), filters, s, dilation);
                Ok(self.record(
                    &[rows, filters, out_len],
                    out,
                    &[x, kernel],
                    Op::Conv1d { x, kernel, dilation },
                ))
            }
            _ => Err(Error::dim("conv1d", &sx, &sk)),
        }
    }

    /// Adaptive max pooling over the last axis to `pool` outputs. Segment
    /// `i` covers `floor(i·L/P) .. floor((i+1)·L/P)`; ties go to the first
    /// index.
    pub fn adaptive_max_pool(&mut self, x: ArrayId, pool: usize) -> Result<ArrayId> {
        let shape = self.shape(x).to_vec();
        let len = *shape.last().unwrap();
        if pool == 0 || len < pool {
            return Err(Error::config(format!(
                "adaptive max pool needs input length >= pool size, got length {len} for pool {pool}"
            )));
        }
        let outer = self.vals(x).len() / len;
        let mut out = Vec::with_capacity(outer * pool);
        let mut argmax = Vec::with_capacity(outer * pool);
        let xv = self.vals(x);
        for o in 0..outer {
            let row = &xv[o * len..(o + 1) * len];
            for (start, end) in kernels::pool_segments(len, pool) {
                let mut best = start;
                for j in start + 1..end {
                    if row[j] > row[best] {
                        best = j;
                    }
                }
                out.push(row[best]);
                argmax.push(o * len + best);
            }
        }
        let mut out_shape = shape.clone();
        *out_shape.last_mut().unwrap() = pool;
        Ok(self.record(&out_shape, out, &[x], Op::MaxPool { x, argmax }))
    }

    /// Batch normalization over `[R×C×L]` (or `[C×L]`, read as `R = 1`),
    /// per channel `C` across all `R·L` positions.
    ///
    /// In train mode the batch moments are used and returned so the caller
    /// can fold them into `running`; in eval mode `running` is applied.
    pub fn batch_norm(
        &mut self,
        x: ArrayId,
        gamma: ArrayId,
        beta: ArrayId,
        running: &BnRunning,
        mode: Mode,
    ) -> Result<(ArrayId, Option<BnBatchStats>)> {
        let shape = self.shape(x).to_vec();
        let (rows, channels, len) = match shape.as_slice() {
            [r, c, l] => (*r, *c, *l),
            [c, l] => (1, *c, *l),
            _ => return Err(Error::dim("batch_norm", &shape, &[])),
        };
        if self.shape(gamma) != [channels] || self.shape(beta) != [channels] {
            return Err(Error::dim("batch_norm", &shape, self.shape(gamma)));
        }
        if running.mean.len() != channels || running.var.len() != channels {
            return Err(Error::dim("batch_norm", &shape, &[running.mean.len()]));
        }
        let count = rows * len;
        let xv = self.vals(x);
        let idx = |r: usize, c: usize, l: usize| (r * channels + c) * len + l;
        let (mean, var, stats) = match mode {
            Mode::Train => {
                if count < 2 {
                    return Err(Error::config(format!(
                        "batch norm in train mode needs at least 2 elements per channel, got {count}"
                    )));
                }
                let mut mean = vec![0.0; channels];
                let mut var = vec![0.0; channels];
                for c in 0..channels {
                    let mut s = 0.0;
                    for r in 0..rows {
                        for l in 0..len {
                            s += xv[idx(r, c, l)];
                        }
                    }
                    let mu = s / count as f64;
                    let mut v = 0.0;
                    for r in 0..rows {
                        for l in 0..len {
                            let d = xv[idx(r, c, l)] - mu;
                            v += d * d;
                        }
                    }
                    mean[c] = mu;
                    var[c] = v / count as f64;
                }
                let stats = BnBatchStats {
                    mean: mean.clone(),
                    var: var.clone(),
                };
                (mean, var, Some(stats))
            }
            Mode::Eval => (running.mean.clone(), running.var.clone(), None),
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let (g, b) = (self.vals(gamma), self.vals(beta));
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            for c in 0..channels {
                for l in 0..len {
                    let i = idx(r, c, l);
                    xhat[i] = (xv[i] - mean[c]) * inv_std[c];
                    out[i] = g[c] * xhat[i] + b[c];
                }
            }
        }
        let id = self.record(
            &shape,
            out,
            &[x, gamma, beta],
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                mode,
            },
        );
        Ok((id, stats))
    }

    pub fn tanh(&mut self, x: ArrayId) -> ArrayId {
        let out = self.vals(x).iter().map(|v| v.tanh()).collect();
        let shape = self.shape(x).to_vec();
        self.record(&shape, out, &[x], Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: ArrayId) -> ArrayId {
        let out = self.vals(x).iter().map(|&v| kernels::sigmoid(v)).collect();
        let shape = self.shape(x).to_vec();
        self.record(&shape, out, &[x], Op::Sigmoid(x))
    }

    /// Softmax along the last axis.
    pub fn softmax_rows(&mut self, x: ArrayId) -> ArrayId {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().unwrap();
        let mut out = self.vals(x).to_vec();
        for row in out.chunks_mut(n) {
            kernels::softmax_in_place(row);
        }
        self.record(&shape, out, &[x], Op::Softmax(x))
    }

    /// Concatenation along the last axis; leading axes must agree.
    pub fn concat(&mut self, inputs: &[ArrayId]) -> Result<ArrayId> {
        let first = match inputs.first() {
            Some(id) => self.shape(*id).to_vec(),
            None => return Err(Error::config("concat of zero arrays")),
        };
        let lead = &first[..first.len() - 1];
        let mut total = 0;
        for id in inputs {
            let s = self.shape(*id);
            if s.len() != first.len() || &s[..s.len() - 1] != lead {
                return Err(Error::dim("concat", &first, s));
            }
            total += s[s.len() - 1];
        }
        let outer: usize = lead.iter().product();
        let mut out = Vec::with_capacity(outer * total);
        for o in 0..outer {
            for id in inputs {
                let w = self.shape(*id).last().copied().unwrap();
                out.extend_from_slice(&self.vals(*id)[o * w..(o + 1) * w]);
            }
        }
        let mut shape = first.clone();
        *shape.last_mut().unwrap() = total;
        Ok(self.record(&shape, out, inputs, Op::Concat(inputs.to_vec())))
    }

    fn check_broadcast(&self, op: &'static str, a: ArrayId, b: ArrayId) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let ok = sa == sb || sb.iter().product::<usize>() == 1 || (sb.len() < sa.len() && sa.ends_with(sb));
        if ok {
            Ok(())
        } else {
            Err(Error::dim(op, sa, sb))
        }
    }

    fn binary(&mut self, a: ArrayId, b: ArrayId, f: impl Fn(f64, f64) -> f64, op: Op) -> ArrayId {
        let bv = self.vals(b);
        let n = bv.len();
        let out = self.vals(a).iter().enumerate().map(|(i, &x)| f(x, bv[i % n])).collect();
        let shape = self.shape(a).to_vec();
        self.record(&shape, out, &[a, b], op)
    }

    /// Element-wise `a + b`; `b` may match a trailing suffix of `a`'s shape
    /// or be a single element, and is then repeated.
    pub fn add(&mut self, a: ArrayId, b: ArrayId) -> Result<ArrayId> {
        self.check_broadcast("add", a, b)?;
        Ok(self.binary(a, b, |x, y| x + y, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: ArrayId, b: ArrayId) -> Result<ArrayId> {
        self.check_broadcast("sub", a, b)?;
        Ok(self.binary(a, b, |x, y| x - y, Op::Sub(a, b)))
    }

    /// Element-wise `a ∘ b` with the same broadcasting as [`Self::add`].
    pub fn mul(&mut self, a: ArrayId, b: ArrayId) -> Result<ArrayId> {
        self.check_broadcast("mul", a, b)?;
        Ok(self.binary(a, b, |x, y| x * y, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: ArrayId, c: f64) -> ArrayId {
        let out = self.vals(x).iter().map(|v| v * c).collect();
        let shape = self.shape(x).to_vec();
        self.record(&shape, out, &[x], Op::Scale(x, c))
    }

    /// Inverted dropout. In train mode each element is zeroed with
    /// probability `p` and survivors are scaled by `1/(1−p)`; eval mode and
    /// `p = 0` return `x` unchanged.
    pub fn dropout(&mut self, x: ArrayId, p: f64, seed: u64, mode: Mode) -> Result<ArrayId> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::config(format!("dropout rate must lie in [0, 1), got {p}")));
        }
        if mode == Mode::Eval || p == 0.0 {
            return Ok(x);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..self.vals(x).len())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let out = self.vals(x).iter().zip(&mask).map(|(v, m)| v * m).collect();
        let shape = self.shape(x).to_vec();
        Ok(self.record(&shape, out, &[x], Op::Dropout { x, mask }))
    }

    pub fn reshape(&mut self, x: ArrayId, shape: &[usize]) -> Result<ArrayId> {
        let numel: usize = shape.iter().product();
        if numel != self.vals(x).len() || shape.is_empty() || shape.len() > 3 {
            return Err(Error::dim("reshape", self.shape(x), shape));
        }
        let out = self.vals(x).to_vec();
        Ok(self.record(shape, out, &[x], Op::Reshape(x)))
    }

    /// Gathers positions `index` along the last axis.
    pub fn select_last(&mut self, x: ArrayId, index: &[usize]) -> Result<ArrayId> {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().unwrap();
        if index.is_empty() || index.iter().any(|&i| i >= n) {
            return Err(Error::dim("select_last", &shape, &[index.len()]));
        }
        let xv = self.vals(x);
        let outer = xv.len() / n;
        let mut out = Vec::with_capacity(outer * index.len());
        for o in 0..outer {
            out.extend(index.iter().map(|&i| xv[o * n + i]));
        }
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = index.len();
        Ok(self.record(
            &out_shape,
            out,
            &[x],
            Op::Select {
                x,
                index: index.to_vec(),
            },
        ))
    }

    /// Contiguous range `start..start+len` of the last axis.
    pub fn slice_last(&mut self, x: ArrayId, start: usize, len: usize) -> Result<ArrayId> {
        let index: Vec<usize> = (start..start + len).collect();
        self.select_last(x, &index)
    }

    pub fn sum(&mut self, x: ArrayId) -> ArrayId {
        let s = self.vals(x).iter().sum();
        self.record(&[1], vec![s], &[x], Op::Sum(x))
    }

    pub fn mean(&mut self, x: ArrayId) -> ArrayId {
        let v = self.vals(x);
        let m = v.iter().sum::<f64>() / v.len() as f64;
        self.record(&[1], vec![m], &[x], Op::Mean(x))
    }

    /// Mean squared error between equally shaped arrays.
    pub fn mse(&mut self, pred: ArrayId, target: ArrayId) -> Result<ArrayId> {
        if self.shape(pred) != self.shape(target) {
            return Err(Error::dim("mse", self.shape(pred), self.shape(target)));
        }
        if self.vals(pred).is_empty() {
            return Err(Error::config("mse of an empty batch"));
        }
        let d = self.sub(pred, target)?;
        let sq = self.mul(d, d)?;
        Ok(self.mean(sq))
    }

    // ----------------------------------------------------------- backward

    /// Propagates d(root)/d(·) to every recorded array that requires a
    /// gradient. Leaves with `requires_grad` that the root does not reach
    /// receive zeros.
    pub fn backward(&mut self, root: ArrayId) -> Result<()> {
        if root.0 >= self.nodes.len() {
            return Err(Error::Autodiff(format!("array {} is not on this tape", root.0)));
        }
        if self.backward_done {
            return Err(Error::Autodiff(
                "backward already ran on this tape; call reset_grads first".into(),
            ));
        }
        let root_arr = &self.nodes[root.0].array;
        if root_arr.numel() != 1 {
            return Err(Error::Autodiff(format!(
                "backward root must be a scalar, got shape {:?}",
                root_arr.shape()
            )));
        }
        if !root_arr.requires_grad() {
            return Err(Error::Autodiff(
                "backward root is detached: no input requires a gradient".into(),
            ));
        }
        self.grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let Some(gy) = self.grads[i].take() else { continue };
            self.propagate(i, &gy);
            self.grads[i] = Some(gy);
        }
        for (i, node) in self.nodes.iter_mut().enumerate() {
            if matches!(node.op, Op::Leaf) && node.array.requires_grad() {
                let g = self.grads[i].get_or_insert_with(|| vec![0.0; node.array.numel()]);
                node.array.set_grad(g.clone())?;
            }
        }
        self.backward_done = true;
        Ok(())
    }

    fn propagate(&mut self, i: usize, gy: &[f64]) {
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        let rg = |id: ArrayId| nodes[id.0].array.requires_grad();
        let vals = |id: ArrayId| nodes[id.0].array.values();
        let shape = |id: ArrayId| nodes[id.0].array.shape();
        let mut acc = |id: ArrayId, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[id.0].array.requires_grad() {
                return;
            }
            let g = grads[id.0].get_or_insert_with(|| vec![0.0; nodes[id.0].array.numel()]);
            f(g);
        };
        let out = &nodes[i].array;
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (m, k) = (shape(*a)[0], shape(*a)[1]);
                let n = shape(*b)[1];
                if rg(*a) {
                    acc(*a, &mut |g| {
                        kernels::gemm(m, n, k, gy, (n, 1), vals(*b), (1, n), g, 1.0)
                    });
                }
                if rg(*b) {
                    acc(*b, &mut |g| {
                        kernels::gemm(k, m, n, vals(*a), (1, k), gy, (n, 1), g, 1.0)
                    });
                }
            }
            Op::BatchMatmul { a, b, transpose_b } => {
                let (batch, m, k) = (shape(*a)[0], shape(*a)[1], shape(*a)[2]);
                let n = out.shape()[2];
                let (av, bv) = (vals(*a), vals(*b));
                for bi in 0..batch {
                    let gyb = &gy[bi * m * n..(bi + 1) * m * n];
                    let ab = &av[bi * m * k..(bi + 1) * m * k];
                    let bb = &bv[bi * k * n..(bi + 1) * k * n];
                    if rg(*a) {
                        // dA = dC · Bᵀ (B is k×n) or dC · B (B stored n×k)
                        let b_str = if *transpose_b { (k, 1) } else { (1, n) };
                        acc(*a, &mut |g| {
                            kernels::gemm(
                                m,
                                n,
                                k,
                                gyb,
                                (n, 1),
                                bb,
                                b_str,
                                &mut g[bi * m * k..(bi + 1) * m * k],
                                1.0,
                            )
                        });
                    }
                    if rg(*b) {
                        acc(*b, &mut |g| {
                            let gb = &mut g[bi * k * n..(bi + 1) * k * n];
                            if *transpose_b {
                                // d(Bstored n×k) = dCᵀ · A
                                kernels::gemm(n, m, k, gyb, (1, n), ab, (k, 1), gb, 1.0)
                            } else {
                                kernels::gemm(k, m, n, ab, (1, k), gyb, (n, 1), gb, 1.0)
                            }
                        });
                    }
                }
            }
            Op::Conv1d { x, kernel, dilation } => {
                let (rows, t) = (shape(*x)[0], shape(*x)[1]);
                let (filters, s) = (shape(*kernel)[0], shape(*kernel)[1]);
                if rg(*x) {
                    acc(*x, &mut |g| {
                        kernels::conv1d_backward_input(gy, vals(*kernel), rows, t, filters, s, *dilation, g)
                    });
                }
                if rg(*kernel) {
                    acc(*kernel, &mut |g| {
                        kernels::conv1d_backward_kernel(gy, vals(*x), rows, t, filters, s, *dilation, g)
                    });
                }
            }
            Op::MaxPool { x, argmax } => acc(*x, &mut |g| {
                for (o, &src) in argmax.iter().enumerate() {
                    g[src] += gy[o];
                }
            }),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                mode,
            } => {
                let sh = shape(*x);
                let (rows, channels, len) = match sh {
                    [r, c, l] => (*r, *c, *l),
                    [c, l] => (1, *c, *l),
                    _ => unreachable!(),
                };
                let idx = |r: usize, c: usize, l: usize| (r * channels + c) * len + l;
                let gv = vals(*gamma);
                let mut sum_dy = vec![0.0; channels];
                let mut sum_dy_xhat = vec![0.0; channels];
                for r in 0..rows {
                    for c in 0..channels {
                        for l in 0..len {
                            let j = idx(r, c, l);
                            sum_dy[c] += gy[j];
                            sum_dy_xhat[c] += gy[j] * xhat[j];
                        }
                    }
                }
                acc(*gamma, &mut |g| {
                    for c in 0..channels {
                        g[c] += sum_dy_xhat[c];
                    }
                });
                acc(*beta, &mut |g| {
                    for c in 0..channels {
                        g[c] += sum_dy[c];
                    }
                });
                let count = (rows * len) as f64;
                acc(*x, &mut |g| {
                    for r in 0..rows {
                        for c in 0..channels {
                            for l in 0..len {
                                let j = idx(r, c, l);
                                g[j] += match mode {
                                    Mode::Eval => gy[j] * gv[c] * inv_std[c],
                                    // dxhat sums carry the factor gamma
                                    Mode::Train => {
                                        gv[c] * inv_std[c] / count
                                            * (count * gy[j] - sum_dy[c] - xhat[j] * sum_dy_xhat[c])
                                    }
                                };
                            }
                        }
                    }
                });
            }
            Op::Tanh(x) => acc(*x, &mut |g| {
                for (j, y) in out.values().iter().enumerate() {
                    g[j] += gy[j] * (1.0 - y * y);
                }
            }),
            Op::Sigmoid(x) => acc(*x, &mut |g| {
                for (j, y) in out.values().iter().enumerate() {
                    g[j] += gy[j] * y * (1.0 - y);
                }
            }),
            Op::Softmax(x) => {
                let n = out.last_dim();
                acc(*x, &mut |g| {
                    for ((yr, gyr), gr) in out.values().chunks(n).zip(gy.chunks(n)).zip(g.chunks_mut(n)) {
                        let dot: f64 = yr.iter().zip(gyr).map(|(y, d)| y * d).sum();
                        for j in 0..n {
                            gr[j] += yr[j] * (gyr[j] - dot);
                        }
                    }
                });
            }
            Op::Concat(inputs) => {
                let total = out.last_dim();
                let outer = out.numel() / total;
                let mut offset = 0;
                for id in inputs {
                    let w = *shape(*id).last().unwrap();
                    acc(*id, &mut |g| {
                        for o in 0..outer {
                            for j in 0..w {
                                g[o * w + j] += gy[o * total + offset + j];
                            }
                        }
                    });
                    offset += w;
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(nodes[i].op, Op::Sub(..)) { -1.0 } else { 1.0 };
                acc(*a, &mut |g| {
                    for (gj, d) in g.iter_mut().zip(gy) {
                        *gj += d;
                    }
                });
                acc(*b, &mut |g| {
                    let n = g.len();
                    for (j, d) in gy.iter().enumerate() {
                        g[j % n] += sign * d;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (vals(*a), vals(*b));
                let nb = bv.len();
                acc(*a, &mut |g| {
                    for (j, d) in gy.iter().enumerate() {
                        g[j] += d * bv[j % nb];
                    }
                });
                acc(*b, &mut |g| {
                    for (j, d) in gy.iter().enumerate() {
                        g[j % nb] += d * av[j];
                    }
                });
            }
            Op::Scale(x, c) => acc(*x, &mut |g| {
                for (gj, d) in g.iter_mut().zip(gy) {
                    *gj += c * d;
                }
            }),
            Op::Dropout { x, mask } => acc(*x, &mut |g| {
                for j in 0..g.len() {
                    g[j] += gy[j] * mask[j];
                }
            }),
            Op::Reshape(x) => acc(*x, &mut |g| {
                for (gj, d) in g.iter_mut().zip(gy) {
                    *gj += d;
                }
            }),
            Op::Select { x, index } => {
                let n = *shape(*x).last().unwrap();
                let w = index.len();
                acc(*x, &mut |g| {
                    for (o, gyr) in gy.chunks(w).enumerate() {
                        for (j, &src) in index.iter().enumerate() {
                            g[o * n + src] += gyr[j];
                        }
                    }
                });
            }
            Op::Sum(x) => acc(*x, &mut |g| g.iter_mut().for_each(|v| *v += gy[0])),
            Op::Mean(x) => {
                let scale = gy[0] / nodes[x.0].array.numel() as f64;
                acc(*x, &mut |g| g.iter_mut().for_each(|v| *v += scale))
            }
        }
    }
}
