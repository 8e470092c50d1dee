//! Run configuration: file paths, attribute schema, hyperparameters, and
//! ablation switches, loaded from one TOML file with CLI overrides applied on
//! top. A SHA-256 hash of the resolved config is stamped into every artifact.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::AttributeSchema;
use crate::error::{Error, Result};

pub const D_GRID: [usize; 4] = [8, 16, 32, 64];
pub const LR_GRID: [f64; 6] = [0.0001, 0.0003, 0.001, 0.01, 0.05, 0.1];
pub const LAMBDA_GRID: [f64; 5] = [0.1, 0.01, 0.001, 0.0001, 0.00001];
pub const K_SHIFT_GRID: [f64; 4] = [1.0, 2.0, 5.0, 10.0];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Paths {
    pub interactions: PathBuf,
    pub social: PathBuf,
    pub user_attrs: PathBuf,
    pub url_attrs: PathBuf,
    pub workdir: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct Hyper {
    /// Shared latent dimension of all submodules.
    pub d: usize,
    /// Attribute embedding width after the per-attribute projection.
    pub w: usize,
    /// Neighbors per CSAN stream.
    pub b_h: usize,
    /// Neighbors per type per graph attention layer.
    pub neighbor_budget: usize,
    pub layers: usize,
    pub lr: f64,
    pub lambda: f64,
    pub k_shift: f64,
    pub neg_ratio: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub patience: usize,
    pub runs: usize,
    pub seeds: Vec<u64>,
    pub num_eval_negatives: usize,
    /// Accept hyperparameters outside the tuned grids.
    pub allow_nonstandard: bool,
    /// Record real wall-clock seconds in train logs. Off by default so two
    /// identical runs produce byte-identical artifacts.
    pub record_wall_time: bool,
}

impl Default for Hyper {
    fn default() -> Self {
        Hyper {
            d: 16,
            w: 8,
            b_h: 10,
            neighbor_budget: 8,
            layers: 2,
            lr: 0.001,
            lambda: 0.0001,
            k_shift: 1.0,
            neg_ratio: 4,
            batch_size: 128,
            epochs: 50,
            patience: 10,
            runs: 5,
            seeds: vec![1, 2, 3, 4, 5],
            num_eval_negatives: 99,
            allow_nonstandard: false,
            record_wall_time: false,
        }
    }
}

/// Which submodules and attention mechanisms participate. Disabled
/// components contribute zero vectors of matching dimension to the final
/// concatenation.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationConfig {
    pub use_csan: bool,
    pub use_hgan: bool,
    pub use_spatial_attention: bool,
    pub use_graph_attention: bool,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            use_csan: true,
            use_hgan: true,
            use_spatial_attention: true,
            use_graph_attention: true,
        }
    }
}

impl AblationConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.use_csan && !self.use_hgan {
            return Err(Error::Config(
                "at least one of use_csan / use_hgan must be enabled".into(),
            ));
        }
        Ok(())
    }

    pub fn label(&self) -> String {
        match (
            self.use_csan,
            self.use_hgan,
            self.use_spatial_attention,
            self.use_graph_attention,
        ) {
            (true, true, true, true) => "full".into(),
            (true, false, true, _) => "csan_only".into(),
            (false, true, _, true) => "hgan_only".into(),
            (true, true, false, true) => "no_spatial_attention".into(),
            (true, true, true, false) => "no_graph_attention".into(),
            (true, false, false, _) => "csan_only_no_spatial_attention".into(),
            (false, true, _, false) => "hgan_only_no_graph_attention".into(),
            _ => "custom".into(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub paths: Paths,
    pub schema: AttributeSchema,
    #[serde(default)]
    pub hyper: Hyper,
    #[serde(default)]
    pub ablation: AblationConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Io(std::io::Error::new(
                e.kind(),
                format!("{}: {e}", path.display()),
            ))
        })?;
        let cfg: RunConfig = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.schema.validate()?;
        self.ablation.validate()?;
        let h = &self.hyper;
        if h.d == 0 || h.w == 0 || h.b_h == 0 || h.neighbor_budget == 0 || h.layers == 0 {
            return Err(Error::Config("dimensions must be positive".into()));
        }
        if h.lr <= 0.0 {
            return Err(Error::Config(format!("lr must be positive, got {}", h.lr)));
        }
        if h.lambda < 0.0 {
            return Err(Error::Config("lambda must be nonnegative".into()));
        }
        if h.k_shift <= 0.0 {
            return Err(Error::Config("k_shift must be positive".into()));
        }
        if h.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if h.runs == 0 || h.seeds.len() < h.runs {
            return Err(Error::Config(format!(
                "need at least {} seeds for {} runs, got {}",
                h.runs,
                h.runs,
                h.seeds.len()
            )));
        }
        if !h.allow_nonstandard {
            if !D_GRID.contains(&h.d) {
                return Err(Error::Config(format!(
                    "d = {} is outside the tuned grid {:?}; set allow_nonstandard to override",
                    h.d, D_GRID
                )));
            }
            if !LR_GRID.iter().any(|v| (v - h.lr).abs() < 1e-12) {
                return Err(Error::Config(format!(
                    "lr = {} is outside the tuned grid {:?}; set allow_nonstandard to override",
                    h.lr, LR_GRID
                )));
            }
            if !LAMBDA_GRID.iter().any(|v| (v - h.lambda).abs() < 1e-12) {
                return Err(Error::Config(format!(
                    "lambda = {} is outside the tuned grid {:?}; set allow_nonstandard to override",
                    h.lambda, LAMBDA_GRID
                )));
            }
            if !K_SHIFT_GRID.iter().any(|v| (v - h.k_shift).abs() < 1e-12) {
                return Err(Error::Config(format!(
                    "k_shift = {} is outside the tuned grid {:?}; set allow_nonstandard to override",
                    h.k_shift, K_SHIFT_GRID
                )));
            }
        }
        Ok(())
    }

    /// Hash of the canonical serialized config; stamped into artifacts.
    pub fn hash(&self) -> String {
        let text = toml::to_string(self).expect("config serializes");
        let digest = Sha256::digest(text.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}
