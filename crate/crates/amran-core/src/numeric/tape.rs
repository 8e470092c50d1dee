//! Define-by-run compute graph with reverse-mode differentiation.
//!
//! A [`Graph`] records primitive applications in topological order as they are
//! built; [`Graph::backward`] walks the record once in reverse and accumulates
//! gradients into per-parameter slots. One graph scores one instance, so
//! batches are handled by summing per-instance gradients outside.

use crate::error::{Error, Result};
use crate::numeric::params::{Gradients, ParamId, ParamStore};
use crate::numeric::tensor::Tensor;

/// Index of a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ValueId(usize);

/// Tag identifying a batch-norm layer so the trainer can fold the plane
/// statistics observed during a forward pass into that layer's running stats.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct BnTag(pub usize);

/// Batch-norm execution mode. Training normalizes with statistics of the
/// current plane; evaluation uses running statistics captured at node
/// creation.
#[derive(Debug, Clone, Copy)]
pub enum BnMode {
    Train,
    Eval { mean: f64, var: f64 },
}

const BN_EPS: f64 = 1e-5;
const BCE_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone)]
enum Op {
    Const,
    Param(ParamId),
    LookupRow { param: ParamId, row: usize },
    Add(ValueId, ValueId),
    Mul(ValueId, ValueId),
    /// a*x + b, elementwise with constant coefficients; only `a` matters on
    /// the way back.
    Affine { x: ValueId, a: f64 },
    Relu(ValueId),
    Sigmoid(ValueId),
    Softmax(ValueId),
    MatMul(ValueId, ValueId),
    MatVec(ValueId, ValueId),
    /// 2-D convolution over (H, W, C_in) with kernel (C_out, C_in, k, k).
    Conv2d { x: ValueId, kernel: ValueId, bias: Option<ValueId>, pad: usize },
    CrossChannelMean(ValueId),
    GlobalAvgPool(ValueId),
    /// Stores the argmax flat index per channel; ties take the first index.
    GlobalMaxPool { x: ValueId, argmax: Vec<usize> },
    BatchNorm { x: ValueId, gamma: ValueId, beta: ValueId, mean: Vec<f64>, var: Vec<f64>, train: bool },
    Cosine(ValueId, ValueId),
    Concat(Vec<ValueId>),
    StackRows(Vec<ValueId>),
    StackChannels(Vec<ValueId>),
    /// plane (H, W, 1) times channel vector (C) -> (H, W, C).
    BroadcastChannelMul { plane: ValueId, chan: ValueId },
    MulScalar { s: ValueId, x: ValueId },
    Index { x: ValueId, i: usize },
    Sum(ValueId),
    Reshape(ValueId),
    /// Binary cross-entropy of a predicted probability against a 0/1 label,
    /// with the input clamped into [1e-7, 1-1e-7].
    Bce { yhat: ValueId, label: f64, clamped: bool },
}

struct Node {
    op: Op,
    value: Tensor,
}

pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    /// Count of BCE inputs that fell outside the open unit interval.
    pub clamp_events: usize,
    bn_observations: Vec<(BnTag, f64, f64)>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Graph {
            params,
            nodes: Vec::new(),
            clamp_events: 0,
            bn_observations: Vec::new(),
        }
    }

    pub fn value(&self, id: ValueId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Plane statistics (mean, variance) observed by train-mode batch-norm
    /// nodes, in creation order.
    pub fn bn_observations(&self) -> &[(BnTag, f64, f64)] {
        &self.bn_observations
    }

    fn push(&mut self, op: Op, value: Tensor) -> ValueId {
        self.nodes.push(Node { op, value });
        ValueId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> ValueId {
        self.push(Op::Const, t)
    }

    pub fn scalar(&mut self, v: f64) -> ValueId {
        self.constant(Tensor::scalar(v))
    }

    pub fn param(&mut self, id: ParamId) -> ValueId {
        let t = self.params.get(id).clone();
        self.push(Op::Param(id), t)
    }

    pub fn lookup_row(&mut self, id: ParamId, row: usize) -> Result<ValueId> {
        let table = self.params.get(id);
        if table.rank() != 2 || row >= table.shape()[0] {
            return Err(Error::Shape(format!(
                "lookup_row: row {row} out of bounds for table {:?} ({})",
                table.shape(),
                self.params.entry(id).name
            )));
        }
        let w = table.shape()[1];
        let data = table.data()[row * w..(row + 1) * w].to_vec();
        let value = Tensor::from_vec(&[w], data)?;
        Ok(self.push(Op::LookupRow { param: id, row }, value))
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Shape(format!(
                "add: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        Ok(self.push(Op::Add(a, b), out))
    }

    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Shape(format!(
                "mul: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor::from_vec(self.value(a).shape(), data)?;
        Ok(self.push(Op::Mul(a, b), out))
    }

    pub fn affine(&mut self, x: ValueId, a: f64, b: f64) -> ValueId {
        let out = self.value(x).map(|v| a * v + b);
        self.push(Op::Affine { x, a }, out)
    }

    pub fn relu(&mut self, x: ValueId) -> ValueId {
        let out = self.value(x).map(|v| v.max(0.0));
        self.push(Op::Relu(x), out)
    }

    pub fn sigmoid(&mut self, x: ValueId) -> ValueId {
        let out = self.value(x).map(sigmoid);
        self.push(Op::Sigmoid(x), out)
    }

    /// Softmax over a rank-1 tensor, stabilized by max subtraction.
    pub fn softmax(&mut self, x: ValueId) -> Result<ValueId> {
        if self.value(x).rank() != 1 {
            return Err(Error::Shape("softmax expects a rank-1 tensor".into()));
        }
        let v = self.value(x).data();
        let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = v.iter().map(|&x| (x - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        let out = Tensor::from_vec(
            self.value(x).shape(),
            exps.iter().map(|e| e / total).collect(),
        )?;
        Ok(self.push(Op::Softmax(x), out))
    }

    pub fn matmul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape(format!("matmul: {sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let aip = da[i * k + p];
                for j in 0..n {
                    out[i * n + j] += aip * db[p * n + j];
                }
            }
        }
        let out = Tensor::from_vec(&[m, n], out)?;
        Ok(self.push(Op::MatMul(a, b), out))
    }

    pub fn matvec(&mut self, mat: ValueId, vec: ValueId) -> Result<ValueId> {
        let (sm, sv) = (self.value(mat).shape(), self.value(vec).shape());
        if sm.len() != 2 || sv.len() != 1 || sm[1] != sv[0] {
            return Err(Error::Shape(format!("matvec: {sm:?} x {sv:?}")));
        }
        let (m, k) = (sm[0], sm[1]);
        let (dm, dv) = (self.value(mat).data(), self.value(vec).data());
        let mut out = vec![0.0; m];
        for i in 0..m {
            let mut acc = 0.0;
            for j in 0..k {
                acc += dm[i * k + j] * dv[j];
            }
            out[i] = acc;
        }
        let out = Tensor::from_vec(&[m], out)?;
        Ok(self.push(Op::MatVec(mat, vec), out))
    }

    /// Convolution over (H, W, C_in) with kernel (C_out, C_in, k, k) and zero
    /// padding `pad`, producing (H, W, C_out). 3x3 kernels use pad 1 and 1x1
    /// kernels pad 0 so the spatial shape is preserved.
    pub fn conv2d(
        &mut self,
        x: ValueId,
        kernel: ValueId,
        bias: Option<ValueId>,
        pad: usize,
    ) -> Result<ValueId> {
        let sx = self.value(x).shape().to_vec();
        let sk = self.value(kernel).shape().to_vec();
        if sx.len() != 3 || sk.len() != 4 || sk[2] != sk[3] {
            return Err(Error::Shape(format!("conv2d: input {sx:?} kernel {sk:?}")));
        }
        let (h, w, cin) = (sx[0], sx[1], sx[2]);
        let (cout, kin, k) = (sk[0], sk[1], sk[2]);
        if kin != cin {
            return Err(Error::Shape(format!(
                "conv2d: input has {cin} channels, kernel expects {kin}"
            )));
        }
        if k != 2 * pad + 1 {
            return Err(Error::Shape(format!(
                "conv2d: kernel size {k} with pad {pad} does not preserve shape"
            )));
        }
        if let Some(b) = bias {
            if self.value(b).shape() != [cout] {
                return Err(Error::Shape(format!(
                    "conv2d: bias shape {:?}, expected [{cout}]",
                    self.value(b).shape()
                )));
            }
        }
        let dx = self.value(x).data();
        let dk = self.value(kernel).data();
        let mut out = vec![0.0; h * w * cout];
        for hh in 0..h {
            for ww in 0..w {
                for o in 0..cout {
                    let mut acc = bias.map_or(0.0, |b| self.value(b).data()[o]);
                    for dh in 0..k {
                        let ih = hh as isize + dh as isize - pad as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        for dw in 0..k {
                            let iw = ww as isize + dw as isize - pad as isize;
                            if iw < 0 || iw >= w as isize {
                                continue;
                            }
                            let base = (ih as usize * w + iw as usize) * cin;
                            let kbase = ((o * cin) * k + dh) * k + dw;
                            for ci in 0..cin {
                                acc += dk[kbase + ci * k * k] * dx[base + ci];
                            }
                        }
                    }
                    out[(hh * w + ww) * cout + o] = acc;
                }
            }
        }
        let out = Tensor::from_vec(&[h, w, cout], out)?;
        Ok(self.push(Op::Conv2d { x, kernel, bias, pad }, out))
    }

    /// Mean over the channel axis: (H, W, C) -> (H, W, 1).
    pub fn cross_channel_mean(&mut self, x: ValueId) -> Result<ValueId> {
        let s = self.value(x).shape().to_vec();
        if s.len() != 3 {
            return Err(Error::Shape("cross_channel_mean expects rank 3".into()));
        }
        let (h, w, c) = (s[0], s[1], s[2]);
        let d = self.value(x).data();
        let mut out = vec![0.0; h * w];
        for p in 0..h * w {
            let mut acc = 0.0;
            for ch in 0..c {
                acc += d[p * c + ch];
            }
            out[p] = acc / c as f64;
        }
        let out = Tensor::from_vec(&[h, w, 1], out)?;
        Ok(self.push(Op::CrossChannelMean(x), out))
    }

    /// Mean over the spatial plane: (H, W, C) -> (C).
    pub fn global_avg_pool(&mut self, x: ValueId) -> Result<ValueId> {
        let s = self.value(x).shape().to_vec();
        if s.len() != 3 {
            return Err(Error::Shape("global_avg_pool expects rank 3".into()));
        }
        let (h, w, c) = (s[0], s[1], s[2]);
        let d = self.value(x).data();
        let mut out = vec![0.0; c];
        for p in 0..h * w {
            for ch in 0..c {
                out[ch] += d[p * c + ch];
            }
        }
        let plane = (h * w) as f64;
        for v in out.iter_mut() {
            *v /= plane;
        }
        let out = Tensor::from_vec(&[c], out)?;
        Ok(self.push(Op::GlobalAvgPool(x), out))
    }

    /// Max over the spatial plane: (H, W, C) -> (C). Gradient routes to the
    /// argmax position; ties go to the first index in scan order.
    pub fn global_max_pool(&mut self, x: ValueId) -> Result<ValueId> {
        let s = self.value(x).shape().to_vec();
        if s.len() != 3 {
            return Err(Error::Shape("global_max_pool expects rank 3".into()));
        }
        let (h, w, c) = (s[0], s[1], s[2]);
        let d = self.value(x).data();
        let mut out = vec![f64::NEG_INFINITY; c];
        let mut argmax = vec![0usize; c];
        for p in 0..h * w {
            for ch in 0..c {
                let v = d[p * c + ch];
                if v > out[ch] {
                    out[ch] = v;
                    argmax[ch] = p * c + ch;
                }
            }
        }
        let out = Tensor::from_vec(&[c], out)?;
        Ok(self.push(Op::GlobalMaxPool { x, argmax }, out))
    }

    /// Per-channel normalization over the spatial plane of an (H, W, C)
    /// tensor, followed by the affine rescale `gamma * xhat + beta`.
    pub fn batch_norm(
        &mut self,
        x: ValueId,
        gamma: ValueId,
        beta: ValueId,
        mode: BnMode,
        tag: BnTag,
    ) -> Result<ValueId> {
        let s = self.value(x).shape().to_vec();
        if s.len() != 3 {
            return Err(Error::Shape("batch_norm expects rank 3".into()));
        }
        let (h, w, c) = (s[0], s[1], s[2]);
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(Error::Shape(format!(
                "batch_norm: gamma/beta must have shape [{c}]"
            )));
        }
        let plane = (h * w) as f64;
        let d = self.value(x).data().to_vec();
        let (mean, var, train) = match mode {
            BnMode::Train => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for p in 0..h * w {
                    for ch in 0..c {
                        mean[ch] += d[p * c + ch];
                    }
                }
                for m in mean.iter_mut() {
                    *m /= plane;
                }
                for p in 0..h * w {
                    for ch in 0..c {
                        let diff = d[p * c + ch] - mean[ch];
                        var[ch] += diff * diff;
                    }
                }
                for v in var.iter_mut() {
                    *v /= plane;
                }
                (mean, var, true)
            }
            BnMode::Eval { mean, var } => (vec![mean; c], vec![var; c], false),
        };
        if train {
            for ch in 0..c {
                self.bn_observations.push((tag, mean[ch], var[ch]));
            }
        }
        let dg = self.value(gamma).data().to_vec();
        let db = self.value(beta).data().to_vec();
        let mut out = vec![0.0; h * w * c];
        for p in 0..h * w {
            for ch in 0..c {
                let xhat = (d[p * c + ch] - mean[ch]) / (var[ch] + BN_EPS).sqrt();
                out[p * c + ch] = dg[ch] * xhat + db[ch];
            }
        }
        let out = Tensor::from_vec(&s, out)?;
        Ok(self.push(
            Op::BatchNorm { x, gamma, beta, mean, var, train },
            out,
        ))
    }

    /// Cosine similarity of two equal-length vectors. A zero-norm operand
    /// makes the similarity 0 with zero gradient to both sides.
    pub fn cosine(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 1 || sa != sb {
            return Err(Error::Shape(format!("cosine: {sa:?} vs {sb:?}")));
        }
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let na = norm(da);
        let nb = norm(db);
        let value = if na == 0.0 || nb == 0.0 {
            0.0
        } else {
            dot(da, db) / (na * nb)
        };
        Ok(self.push(Op::Cosine(a, b), Tensor::scalar(value)))
    }

    /// Concatenate rank-1 tensors into one vector.
    pub fn concat(&mut self, parts: &[ValueId]) -> Result<ValueId> {
        if parts.is_empty() {
            return Err(Error::Shape("concat of zero tensors".into()));
        }
        let mut data = Vec::new();
        for &p in parts {
            if self.value(p).rank() != 1 {
                return Err(Error::Shape("concat expects rank-1 parts".into()));
            }
            data.extend_from_slice(self.value(p).data());
        }
        let n = data.len();
        let out = Tensor::from_vec(&[n], data)?;
        Ok(self.push(Op::Concat(parts.to_vec()), out))
    }

    /// Stack rank-1 tensors of equal length `w` into an (R, w) matrix.
    pub fn stack_rows(&mut self, rows: &[ValueId]) -> Result<ValueId> {
        if rows.is_empty() {
            return Err(Error::Shape("stack_rows of zero tensors".into()));
        }
        let w = self.value(rows[0]).numel();
        let mut data = Vec::with_capacity(rows.len() * w);
        for &r in rows {
            if self.value(r).rank() != 1 || self.value(r).numel() != w {
                return Err(Error::Shape("stack_rows: rows must share length".into()));
            }
            data.extend_from_slice(self.value(r).data());
        }
        let out = Tensor::from_vec(&[rows.len(), w], data)?;
        Ok(self.push(Op::StackRows(rows.to_vec()), out))
    }

    /// Stack rank-2 (H, W) slabs into an (H, W, B) tensor; slab `i` becomes
    /// channel `i`.
    pub fn stack_channels(&mut self, slabs: &[ValueId]) -> Result<ValueId> {
        if slabs.is_empty() {
            return Err(Error::Shape("stack_channels of zero tensors".into()));
        }
        let s0 = self.value(slabs[0]).shape().to_vec();
        if s0.len() != 2 {
            return Err(Error::Shape("stack_channels expects rank-2 slabs".into()));
        }
        let (h, w) = (s0[0], s0[1]);
        let b = slabs.len();
        let mut data = vec![0.0; h * w * b];
        for (ci, &s) in slabs.iter().enumerate() {
            if self.value(s).shape() != [h, w] {
                return Err(Error::Shape("stack_channels: slab shape mismatch".into()));
            }
            let d = self.value(s).data();
            for p in 0..h * w {
                data[p * b + ci] = d[p];
            }
        }
        let out = Tensor::from_vec(&[h, w, b], data)?;
        Ok(self.push(Op::StackChannels(slabs.to_vec()), out))
    }

    /// Broadcast product of a layer map (H, W, 1) and a channel vector (C),
    /// producing (H, W, C).
    pub fn broadcast_channel_mul(&mut self, plane: ValueId, chan: ValueId) -> Result<ValueId> {
        let sp = self.value(plane).shape().to_vec();
        let sc = self.value(chan).shape().to_vec();
        if sp.len() != 3 || sp[2] != 1 || sc.len() != 1 {
            return Err(Error::Shape(format!(
                "broadcast_channel_mul: plane {sp:?} chan {sc:?}"
            )));
        }
        let (h, w) = (sp[0], sp[1]);
        let c = sc[0];
        let dp = self.value(plane).data();
        let dc = self.value(chan).data();
        let mut data = vec![0.0; h * w * c];
        for p in 0..h * w {
            for ch in 0..c {
                data[p * c + ch] = dp[p] * dc[ch];
            }
        }
        let out = Tensor::from_vec(&[h, w, c], data)?;
        Ok(self.push(Op::BroadcastChannelMul { plane, chan }, out))
    }

    /// Scale a tensor by a scalar node.
    pub fn mul_scalar(&mut self, s: ValueId, x: ValueId) -> Result<ValueId> {
        if !self.value(s).is_scalar() {
            return Err(Error::Shape("mul_scalar: s must be scalar".into()));
        }
        let sv = self.value(s).item();
        let out = self.value(x).map(|v| sv * v);
        Ok(self.push(Op::MulScalar { s, x }, out))
    }

    /// Extract element `i` of a rank-1 tensor as a scalar node.
    pub fn index(&mut self, x: ValueId, i: usize) -> Result<ValueId> {
        if self.value(x).rank() != 1 || i >= self.value(x).numel() {
            return Err(Error::Shape(format!(
                "index {i} out of bounds for {:?}",
                self.value(x).shape()
            )));
        }
        let v = self.value(x).data()[i];
        Ok(self.push(Op::Index { x, i }, Tensor::scalar(v)))
    }

    pub fn sum(&mut self, x: ValueId) -> ValueId {
        let v = self.value(x).sum();
        self.push(Op::Sum(x), Tensor::scalar(v))
    }

    pub fn reshape(&mut self, x: ValueId, shape: &[usize]) -> Result<ValueId> {
        let out = self.value(x).clone().reshaped(shape)?;
        Ok(self.push(Op::Reshape(x), out))
    }

    /// `-(y ln p + (1-y) ln(1-p))` with `p = clamp(yhat)`. Inputs outside the
    /// open unit interval bump [`Graph::clamp_events`].
    pub fn bce(&mut self, yhat: ValueId, label: f64) -> Result<ValueId> {
        if !self.value(yhat).is_scalar() {
            return Err(Error::Shape("bce expects a scalar prediction".into()));
        }
        let raw = self.value(yhat).item();
        let p = raw.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
        let clamped = p != raw;
        if clamped {
            self.clamp_events += 1;
        }
        let loss = -(label * p.ln() + (1.0 - label) * (1.0 - p).ln());
        Ok(self.push(Op::Bce { yhat, label, clamped }, Tensor::scalar(loss)))
    }

    /// Reverse pass from a scalar loss; returns gradients for every parameter
    /// the graph touched.
    pub fn backward(&self, loss: ValueId) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Shape(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));
        let mut out = Gradients::zeros(self.params);

        for i in (0..self.nodes.len()).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            match &self.nodes[i].op {
                Op::Const => {}
                Op::Param(id) => {
                    out.accumulate(*id, self.params.get(*id).shape()).add_assign(&g);
                }
                Op::LookupRow { param, row } => {
                    let table = self.params.get(*param);
                    let w = table.shape()[1];
                    let slot = out.accumulate(*param, table.shape());
                    for (j, gv) in g.data().iter().enumerate() {
                        slot.data_mut()[row * w + j] += gv;
                    }
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, &g, &self.nodes);
                    acc(&mut grads, *b, &g, &self.nodes);
                }
                Op::Mul(a, b) => {
                    let ga = zip_mul(&g, self.value(*b));
                    let gb = zip_mul(&g, self.value(*a));
                    acc(&mut grads, *a, &ga, &self.nodes);
                    acc(&mut grads, *b, &gb, &self.nodes);
                }
                Op::Affine { x, a } => {
                    let gx = g.map(|v| a * v);
                    acc(&mut grads, *x, &gx, &self.nodes);
                }
                Op::Relu(x) => {
                    let mask = self.value(*x);
                    let gx = Tensor::from_vec(
                        g.shape(),
                        g.data()
                            .iter()
                            .zip(mask.data())
                            .map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 })
                            .collect(),
                    )?;
                    acc(&mut grads, *x, &gx, &self.nodes);
                }
                Op::Sigmoid(x) => {
                    let y = &self.nodes[i].value;
                    let gx = Tensor::from_vec(
                        g.shape(),
                        g.data()
                            .iter()
                            .zip(y.data())
                            .map(|(gv, yv)| gv * yv * (1.0 - yv))
                            .collect(),
                    )?;
                    acc(&mut grads, *x, &gx, &self.nodes);
                }
                Op::Softmax(x) => {
                    let y = self.nodes[i].value.data();
                    let inner: f64 = g.data().iter().zip(y).map(|(gv, yv)| gv * yv).sum();
                    let gx = Tensor::from_vec(
                        g.shape(),
                        g.data()
                            .iter()
                            .zip(y)
                            .map(|(gv, yv)| yv * (gv - inner))
                            .collect(),
                    )?;
                    acc(&mut grads, *x, &gx, &self.nodes);
                }
                Op::MatMul(a, b) => {
                    let (sa, sb) = (self.value(*a).shape(), self.value(*b).shape());
                    let (m, k, n) = (sa[0], sa[1], sb[1]);
                    let (da, db) = (self.value(*a).data(), self.value(*b).data());
                    let gd = g.data();
                    let mut ga = vec![0.0; m * k];
                    let mut gb = vec![0.0; k * n];
                    for i2 in 0..m {
                        for j in 0..n {
                            let gij = gd[i2 * n + j];
                            for p in 0..k {
                                ga[i2 * k + p] += gij * db[p * n + j];
                                gb[p * n + j] += gij * da[i2 * k + p];
                            }
                        }
                    }
                    acc(&mut grads, *a, &Tensor::from_vec(&[m, k], ga)?, &self.nodes);
                    acc(&mut grads, *b, &Tensor::from_vec(&[k, n], gb)?, &self.nodes);
                }
                Op::MatVec(mat, vecid) => {
                    let sm = self.value(*mat).shape();
                    let (m, k) = (sm[0], sm[1]);
                    let dm = self.value(*mat).data();
                    let dv = self.value(*vecid).data();
                    let gd = g.data();
                    let mut gm = vec![0.0; m * k];
                    let mut gv = vec![0.0; k];
                    for i2 in 0..m {
                        let gi = gd[i2];
                        for j in 0..k {
                            gm[i2 * k + j] += gi * dv[j];
                            gv[j] += gi * dm[i2 * k + j];
                        }
                    }
                    acc(&mut grads, *mat, &Tensor::from_vec(&[m, k], gm)?, &self.nodes);
                    acc(&mut grads, *vecid, &Tensor::from_vec(&[k], gv)?, &self.nodes);
                }
                Op::Conv2d { x, kernel, bias, pad } => {
                    let sx = self.value(*x).shape().to_vec();
                    let sk = self.value(*kernel).shape().to_vec();
                    let (h, w, cin) = (sx[0], sx[1], sx[2]);
                    let (cout, k) = (sk[0], sk[2]);
                    let dx = self.value(*x).data();
                    let dk = self.value(*kernel).data();
                    let gd = g.data();
                    let mut gx = vec![0.0; dx.len()];
                    let mut gk = vec![0.0; dk.len()];
                    let mut gbias = vec![0.0; cout];
                    let pad = *pad as isize;
                    for hh in 0..h {
                        for ww in 0..w {
                            for o in 0..cout {
                                let go = gd[(hh * w + ww) * cout + o];
                                if go == 0.0 {
                                    continue;
                                }
                                gbias[o] += go;
                                for dh in 0..k {
                                    let ih = hh as isize + dh as isize - pad;
                                    if ih < 0 || ih >= h as isize {
                                        continue;
                                    }
                                    for dw in 0..k {
                                        let iw = ww as isize + dw as isize - pad;
                                        if iw < 0 || iw >= w as isize {
                                            continue;
                                        }
                                        let base = (ih as usize * w + iw as usize) * cin;
                                        let kbase = ((o * cin) * k + dh) * k + dw;
                                        for ci in 0..cin {
                                            gk[kbase + ci * k * k] += go * dx[base + ci];
                                            gx[base + ci] += go * dk[kbase + ci * k * k];
                                        }
                                    }
                                }
                            }
                        }
                    }
                    acc(&mut grads, *x, &Tensor::from_vec(&sx, gx)?, &self.nodes);
                    acc(&mut grads, *kernel, &Tensor::from_vec(&sk, gk)?, &self.nodes);
                    if let Some(b) = bias {
                        acc(&mut grads, *b, &Tensor::from_vec(&[cout], gbias)?, &self.nodes);
                    }
                }
                Op::CrossChannelMean(x) => {
                    let sx = self.value(*x).shape().to_vec();
                    let (h, w, c) = (sx[0], sx[1], sx[2]);
                    let gd = g.data();
                    let mut gx = vec![0.0; h * w * c];
                    for p in 0..h * w {
                        let share = gd[p] / c as f64;
                        for ch in 0..c {
                            gx[p * c + ch] = share;
                        }
                    }
                    acc(&mut grads, *x, &Tensor::from_vec(&sx, gx)?, &self.nodes);
                }
                Op::GlobalAvgPool(x) => {
                    let sx = self.value(*x).shape().to_vec();
                    let (h, w, c) = (sx[0], sx[1], sx[2]);
                    let plane = (h * w) as f64;
                    let gd = g.data();
                    let mut gx = vec![0.0; h * w * c];
                    for p in 0..h * w {
                        for ch in 0..c {
                            gx[p * c + ch] = gd[ch] / plane;
                        }
                    }
                    acc(&mut grads, *x, &Tensor::from_vec(&sx, gx)?, &self.nodes);
                }
                Op::GlobalMaxPool { x, argmax } => {
                    let sx = self.value(*x).shape().to_vec();
                    let mut gx = vec![0.0; self.value(*x).numel()];
                    for (ch, &flat) in argmax.iter().enumerate() {
                        gx[flat] += g.data()[ch];
                    }
                    acc(&mut grads, *x, &Tensor::from_vec(&sx, gx)?, &self.nodes);
                }
                Op::BatchNorm { x, gamma, beta, mean, var, train } => {
                    let sx = self.value(*x).shape().to_vec();
                    let (h, w, c) = (sx[0], sx[1], sx[2]);
                    let plane = (h * w) as f64;
                    let d = self.value(*x).data();
                    let dg = self.value(*gamma).data();
                    let gd = g.data();
                    let mut gx = vec![0.0; d.len()];
                    let mut ggamma = vec![0.0; c];
                    let mut gbeta = vec![0.0; c];
                    for ch in 0..c {
                        let inv = 1.0 / (var[ch] + BN_EPS).sqrt();
                        let mut sum_g = 0.0;
                        let mut sum_gx = 0.0;
                        for p in 0..h * w {
                            let xhat = (d[p * c + ch] - mean[ch]) * inv;
                            let go = gd[p * c + ch];
                            ggamma[ch] += go * xhat;
                            gbeta[ch] += go;
                            sum_g += go;
                            sum_gx += go * xhat;
                        }
                        if *train {
                            let mg = sum_g / plane;
                            let mgx = sum_gx / plane;
                            for p in 0..h * w {
                                let xhat = (d[p * c + ch] - mean[ch]) * inv;
                                gx[p * c + ch] =
                                    dg[ch] * inv * (gd[p * c + ch] - mg - xhat * mgx);
                            }
                        } else {
                            for p in 0..h * w {
                                gx[p * c + ch] = dg[ch] * inv * gd[p * c + ch];
                            }
                        }
                    }
                    acc(&mut grads, *x, &Tensor::from_vec(&sx, gx)?, &self.nodes);
                    acc(&mut grads, *gamma, &Tensor::from_vec(&[c], ggamma)?, &self.nodes);
                    acc(&mut grads, *beta, &Tensor::from_vec(&[c], gbeta)?, &self.nodes);
                }
                Op::Cosine(a, b) => {
                    let da = self.value(*a).data();
                    let db = self.value(*b).data();
                    let na = norm(da);
                    let nb = norm(db);
                    if na == 0.0 || nb == 0.0 {
                        continue;
                    }
                    let gs = g.item();
                    let c = dot(da, db) / (na * nb);
                    let ga: Vec<f64> = da
                        .iter()
                        .zip(db)
                        .map(|(av, bv)| gs * (bv / (na * nb) - c * av / (na * na)))
                        .collect();
                    let gb: Vec<f64> = da
                        .iter()
                        .zip(db)
                        .map(|(av, bv)| gs * (av / (na * nb) - c * bv / (nb * nb)))
                        .collect();
                    acc(&mut grads, *a, &Tensor::from_vec(self.value(*a).shape(), ga)?, &self.nodes);
                    acc(&mut grads, *b, &Tensor::from_vec(self.value(*b).shape(), gb)?, &self.nodes);
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let n = self.value(p).numel();
                        let gp = Tensor::from_vec(&[n], g.data()[offset..offset + n].to_vec())?;
                        acc(&mut grads, p, &gp, &self.nodes);
                        offset += n;
                    }
                }
                Op::StackRows(rows) => {
                    let w = self.value(rows[0]).numel();
                    for (ri, &r) in rows.iter().enumerate() {
                        let gr =
                            Tensor::from_vec(&[w], g.data()[ri * w..(ri + 1) * w].to_vec())?;
                        acc(&mut grads, r, &gr, &self.nodes);
                    }
                }
                Op::StackChannels(slabs) => {
                    let s0 = self.value(slabs[0]).shape().to_vec();
                    let (h, w) = (s0[0], s0[1]);
                    let b = slabs.len();
                    for (ci, &s) in slabs.iter().enumerate() {
                        let mut gs = vec![0.0; h * w];
                        for p in 0..h * w {
                            gs[p] = g.data()[p * b + ci];
                        }
                        acc(&mut grads, s, &Tensor::from_vec(&[h, w], gs)?, &self.nodes);
                    }
                }
                Op::BroadcastChannelMul { plane, chan } => {
                    let sp = self.value(*plane).shape().to_vec();
                    let (h, w) = (sp[0], sp[1]);
                    let c = self.value(*chan).numel();
                    let dp = self.value(*plane).data();
                    let dc = self.value(*chan).data();
                    let gd = g.data();
                    let mut gp = vec![0.0; h * w];
                    let mut gc = vec![0.0; c];
                    for p in 0..h * w {
                        for ch in 0..c {
                            let go = gd[p * c + ch];
                            gp[p] += go * dc[ch];
                            gc[ch] += go * dp[p];
                        }
                    }
                    acc(&mut grads, *plane, &Tensor::from_vec(&sp, gp)?, &self.nodes);
                    acc(&mut grads, *chan, &Tensor::from_vec(&[c], gc)?, &self.nodes);
                }
                Op::MulScalar { s, x } => {
                    let sv = self.value(*s).item();
                    let gs: f64 = g
                        .data()
                        .iter()
                        .zip(self.value(*x).data())
                        .map(|(gv, xv)| gv * xv)
                        .sum();
                    let gx = g.map(|v| sv * v);
                    acc(&mut grads, *s, &Tensor::scalar(gs), &self.nodes);
                    acc(&mut grads, *x, &gx, &self.nodes);
                }
                Op::Index { x, i: at } => {
                    let n = self.value(*x).numel();
                    let mut gx = vec![0.0; n];
                    gx[*at] = g.item();
                    acc(&mut grads, *x, &Tensor::from_vec(&[n], gx)?, &self.nodes);
                }
                Op::Sum(x) => {
                    let gx = Tensor::filled(self.value(*x).shape(), g.item());
                    acc(&mut grads, *x, &gx, &self.nodes);
                }
                Op::Reshape(x) => {
                    let gx = g.clone().reshaped(self.value(*x).shape())?;
                    acc(&mut grads, *x, &gx, &self.nodes);
                }
                Op::Bce { yhat, label, clamped } => {
                    // Inside the clamp the output is constant in the input.
                    if !clamped {
                        let p = self.value(*yhat).item();
                        let dp = (p - label) / (p * (1.0 - p));
                        acc(&mut grads, *yhat, &Tensor::scalar(g.item() * dp), &self.nodes);
                    }
                }
            }
        }
        Ok(out)
    }
}

fn acc(grads: &mut [Option<Tensor>], id: ValueId, g: &Tensor, nodes: &[Node]) {
    debug_assert_eq!(nodes[id.0].value.shape(), g.shape());
    match grads[id.0].as_mut() {
        Some(t) => t.add_assign(g),
        None => grads[id.0] = Some(g.clone()),
    }
}

fn zip_mul(a: &Tensor, b: &Tensor) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
    Tensor::from_vec(a.shape(), data).expect("shapes checked at forward")
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
