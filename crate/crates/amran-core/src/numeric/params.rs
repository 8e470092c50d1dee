use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numeric::tensor::Tensor;

/// Handle into a [`ParamStore`]. Ids are assigned in registration order and
/// stay stable for the life of the store, so gradient accumulation and the
/// optimizer can use plain vectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub tensor: Tensor,
    /// Non-trainable entries (e.g. batch-norm running statistics) are carried
    /// through checkpoints but skipped by the optimizer and gradient checks.
    pub trainable: bool,
}

/// Named tensor registry holding every model parameter exactly once.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: &str, tensor: Tensor, trainable: bool) -> Result<ParamId> {
        if self.entries.iter().any(|e| e.name == name) {
            return Err(Error::Config(format!(
                "parameter {name:?} registered twice"
            )));
        }
        self.entries.push(ParamEntry {
            name: name.to_string(),
            tensor,
            trainable,
        });
        Ok(ParamId(self.entries.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].tensor
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    /// Sum of squares over trainable parameters, for L2 regularization.
    pub fn l2_norm_squared(&self) -> f64 {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.tensor.data().iter().map(|x| x * x).sum::<f64>())
            .sum()
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|e| e.tensor.is_finite())
    }
}

/// Per-parameter gradient accumulator aligned with a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Gradients {
    slots: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn zeros(params: &ParamStore) -> Self {
        Gradients {
            slots: vec![None; params.len()],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.slots[id.0].as_ref()
    }

    pub fn accumulate(&mut self, id: ParamId, shape: &[usize]) -> &mut Tensor {
        self.slots[id.0].get_or_insert_with(|| Tensor::zeros(shape))
    }

    /// Merge another gradient set into this one (elementwise sum). Summation
    /// order is the caller's responsibility; folding instances in index order
    /// keeps training bit-reproducible.
    pub fn merge(&mut self, other: &Gradients) {
        for (slot, o) in self.slots.iter_mut().zip(other.slots.iter()) {
            match (slot.as_mut(), o) {
                (Some(t), Some(g)) => t.add_assign(g),
                (None, Some(g)) => *slot = Some(g.clone()),
                _ => {}
            }
        }
    }

    pub fn scale(&mut self, c: f64) {
        for slot in self.slots.iter_mut().flatten() {
            slot.scale_assign(c);
        }
    }

    /// Add `2·lambda·theta` to every trainable slot: the gradient of the
    /// `lambda·||theta||^2` regularizer.
    pub fn add_l2_term(&mut self, params: &ParamStore, lambda: f64) {
        if lambda == 0.0 {
            return;
        }
        for (id, entry) in params.iter() {
            if !entry.trainable {
                continue;
            }
            let g = self.accumulate(id, entry.tensor.shape());
            for (gv, pv) in g.data_mut().iter_mut().zip(entry.tensor.data()) {
                *gv += 2.0 * lambda * pv;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.slots.iter().flatten().all(|t| t.is_finite())
    }
}

/// Xavier (Glorot) uniform initialization: values drawn from
/// `U(-sqrt(6/(fan_in+fan_out)), +sqrt(6/(fan_in+fan_out)))`.
///
/// Fan counts per rank: rank-1 uses the length for both fans; rank-2 is
/// (out, in); rank-4 convolution kernels (out_ch, in_ch, kh, kw) multiply the
/// channel fans by the receptive field size.
pub fn xavier_init(shape: &[usize], seed: u64) -> Result<Tensor> {
    if shape.is_empty() {
        return Err(Error::Config("xavier_init: empty shape".into()));
    }
    if shape.iter().any(|&d| d == 0) {
        return Err(Error::Config(format!(
            "xavier_init: zero dimension in shape {shape:?}"
        )));
    }
    let (fan_in, fan_out) = match shape.len() {
        1 => (shape[0], shape[0]),
        2 => (shape[1], shape[0]),
        3 => (shape[1] * shape[2], shape[0]),
        4 => {
            let receptive = shape[2] * shape[3];
            (shape[1] * receptive, shape[0] * receptive)
        }
        r => {
            return Err(Error::Config(format!(
                "xavier_init: unsupported rank {r}"
            )))
        }
    };
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::from_vec(shape, data)
}

/// First/second moment estimates for the Adam optimizer.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let m = params
            .iter()
            .map(|(_, e)| Tensor::zeros(e.tensor.shape()))
            .collect::<Vec<_>>();
        AdamState {
            v: m.clone(),
            m,
            step: 0,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// One Adam update with bias correction over all trainable parameters.
/// Missing gradient slots are treated as zero.
pub fn adam_update(
    params: &mut ParamStore,
    grads: &Gradients,
    state: &mut AdamState,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> Result<()> {
    if lr <= 0.0 {
        return Err(Error::Config(format!("adam: lr must be positive, got {lr}")));
    }
    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - beta1.powf(t);
    let bc2 = 1.0 - beta2.powf(t);
    for i in 0..params.len() {
        let id = ParamId(i);
        if !params.entry(id).trainable {
            continue;
        }
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let theta = params.get_mut(id).data_mut();
        match grads.get(id) {
            Some(g) => {
                let g = g.data();
                for j in 0..theta.len() {
                    m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
                    v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
                    let m_hat = m[j] / bc1;
                    let v_hat = v[j] / bc2;
                    theta[j] -= lr * m_hat / (v_hat.sqrt() + eps);
                }
            }
            None => {
                for j in 0..theta.len() {
                    m[j] *= beta1;
                    v[j] *= beta2;
                    let m_hat = m[j] / bc1;
                    let v_hat = v[j] / bc2;
                    theta[j] -= lr * m_hat / (v_hat.sqrt() + eps);
                }
            }
        }
    }
    Ok(())
}
