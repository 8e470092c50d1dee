//! Differentiable array computation core: tensors, a reverse-mode tape,
//! initializers, the Adam optimizer, finite-difference verification, and the
//! checkpoint container. Every neural module is written against this API.

pub mod checkpoint;
mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{finite_difference_check, GradCheckReport};
pub use params::{adam_update, xavier_init, AdamState, Gradients, ParamEntry, ParamId, ParamStore};
pub use tape::{BnMode, BnTag, Graph, ValueId};
pub use tensor::Tensor;

/// Running-statistics registry for batch-norm layers. Each layer owns two
/// non-trainable parameter tensors (mean, variance) that checkpoints carry
/// along; training folds observed plane statistics in with momentum 0.1.
#[derive(Debug, Clone, Default)]
pub struct BnRegistry {
    entries: Vec<(ParamId, ParamId)>,
}

pub const BN_MOMENTUM: f64 = 0.1;

impl BnRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(
        &mut self,
        params: &mut ParamStore,
        name: &str,
    ) -> crate::error::Result<BnTag> {
        let mean = params.register(&format!("{name}.running_mean"), Tensor::scalar(0.0), false)?;
        let var = params.register(&format!("{name}.running_var"), Tensor::scalar(1.0), false)?;
        self.entries.push((mean, var));
        Ok(BnTag(self.entries.len() - 1))
    }

    /// Rebind tags to an equally-shaped store loaded from a checkpoint.
    pub fn rebind(&self, params: &ParamStore) -> bool {
        self.entries
            .iter()
            .all(|(m, v)| m.0 < params.len() && v.0 < params.len())
    }

    pub fn eval_mode(&self, params: &ParamStore, tag: BnTag) -> BnMode {
        let (mean, var) = self.entries[tag.0];
        BnMode::Eval {
            mean: params.get(mean).item(),
            var: params.get(var).item(),
        }
    }

    /// Fold one batch worth of observed plane statistics into the running
    /// values. Observations for the same tag are averaged first so batch
    /// composition, not instance count, drives the update.
    pub fn fold(&self, params: &mut ParamStore, observations: &[(BnTag, f64, f64)]) {
        let mut sums: Vec<(f64, f64, usize)> = vec![(0.0, 0.0, 0); self.entries.len()];
        for &(tag, mean, var) in observations {
            let s = &mut sums[tag.0];
            s.0 += mean;
            s.1 += var;
            s.2 += 1;
        }
        for (i, &(mean_id, var_id)) in self.entries.iter().enumerate() {
            let (sm, sv, count) = sums[i];
            if count == 0 {
                continue;
            }
            let bm = sm / count as f64;
            let bv = sv / count as f64;
            let m = params.get_mut(mean_id).data_mut();
            m[0] = (1.0 - BN_MOMENTUM) * m[0] + BN_MOMENTUM * bm;
            let v = params.get_mut(var_id).data_mut();
            v[0] = (1.0 - BN_MOMENTUM) * v[0] + BN_MOMENTUM * bv;
        }
    }
}

/// Deterministic per-tensor seed stream for parameter initialization.
#[derive(Debug, Clone)]
pub struct SeedSeq {
    base: u64,
    counter: u64,
}

impl SeedSeq {
    pub fn new(base: u64) -> Self {
        SeedSeq { base, counter: 0 }
    }

    pub fn next_seed(&mut self) -> u64 {
        self.counter += 1;
        self.base
            .wrapping_mul(0x9e37_79b9_7f4a_7c15)
            .wrapping_add(self.counter)
    }
}
