//! Run configuration file (TOML).
//!
//! Every section and key is optional; omitted keys take the defaults of the
//! corresponding `Default` impl. Unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::FusionKind;
use crate::losses::{LossConfig, LossKind};
use crate::model::ModelConfig;
use crate::numerics::AdamHyper;
use crate::synthdata::CorpusSpec;
use crate::text::{MaskKind, DEFAULT_MASK_KINDS, DEFAULT_MASK_RATIO};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub batch_size: usize,
    pub stage1_lr: f64,
    pub stage2_lr: f64,
    /// Final learning rate of the cosine schedule as a fraction of the initial one.
    pub lr_min_ratio: f64,
    pub mask_ratio: f64,
    /// Masking strategy of the (L1, L2, L3) branches.
    pub mask_kinds: [MaskKind; 3],
    pub stage1_fusion: FusionKind,
    /// Parameter-name prefixes held fixed in stage 1 (e.g. `"text."`).
    pub stage1_frozen: Vec<String>,
    pub adam: AdamHyper,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            stage1_epochs: 30,
            stage2_epochs: 10,
            batch_size: 8,
            stage1_lr: 1e-3,
            stage2_lr: 5e-3,
            lr_min_ratio: 0.01,
            mask_ratio: DEFAULT_MASK_RATIO,
            mask_kinds: DEFAULT_MASK_KINDS,
            stage1_fusion: FusionKind::Add,
            stage1_frozen: Vec::new(),
            adam: AdamHyper::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub data: CorpusSpec,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default)]
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            schema_version: SCHEMA_VERSION,
            seed: 0,
            data: CorpusSpec::default(),
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        if cfg.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                cfg.schema_version
            )));
        }
        Ok(cfg)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    /// Checks training options; model dimensions are checked once the
    /// vocabulary size is known.
    pub fn validate(&self) -> Result<()> {
        let t = &self.train;
        self.loss.validate()?;
        if t.batch_size < 2 || !t.batch_size.is_multiple_of(2) {
            return Err(Error::Config(format!("batch_size must be even and at least 2, got {}", t.batch_size)));
        }
        if !(t.mask_ratio > 0.0 && t.mask_ratio < 1.0) {
            return Err(Error::Config(format!("mask_ratio {} outside (0, 1)", t.mask_ratio)));
        }
        for (name, lr) in [("stage1_lr", t.stage1_lr), ("stage2_lr", t.stage2_lr)] {
            if !(lr >= 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!("{name} must be a non-negative number")));
            }
        }
        if !(0.0..=1.0).contains(&t.lr_min_ratio) {
            return Err(Error::Config("lr_min_ratio must lie in [0, 1]".into()));
        }
        if t.stage1_frozen.iter().any(String::is_empty) {
            return Err(Error::Config("stage1_frozen prefixes must be non-empty".into()));
        }
        if t.stage1_fusion == FusionKind::Atf {
            return Err(Error::Config("stage 1 fuses by addition or concatenation; ATF is trained in stage 2".into()));
        }
        Ok(())
    }

    /// Loss configuration used in stage 2: the enabled terms among SDM and AR.
    pub fn stage2_losses(&self) -> LossConfig {
        let mut l = self.loss.clone();
        for k in [LossKind::Bia, LossKind::Crs, LossKind::Uib, LossKind::Cus] {
            l.switch_mut(k).enabled = false;
        }
        l
    }
}
