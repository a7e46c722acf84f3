//! Model and training configuration, presets, and the flat `key = value`
//! config file shared by both.
//!
//! A config file is TOML without tables. Keys are the field names of
//! [`ModelConfig`] and [`TrainConfig`]; an optional `preset_name` picks the
//! model baseline before the other keys are applied.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How tokens are produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StemMode {
    /// Conv stem down to 1/8, then 2×2 patches of the feature map.
    Hybrid,
    /// Raw `patch_size` patches of the image; the conv stem only feeds skips.
    Pure,
}

impl std::str::FromStr for StemMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hybrid" => Ok(Self::Hybrid),
            "pure" => Ok(Self::Pure),
            other => Err(Error::Config(format!("unknown stem mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub preset_name: String,
    pub input_size: usize,
    /// Effective patch size on the input image.
    pub patch_size: usize,
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    /// Width of the first stem stage; later stages double it.
    pub stem_channels: usize,
    pub mlp_ratio: f64,
    pub stem: StemMode,
}

/// Downsampling factor of the conv stem.
pub const STEM_STRIDE: usize = 8;

impl ModelConfig {
    /// Desk-scale default: D=128, L=4, 4 heads.
    pub fn tiny() -> Self {
        Self {
            preset_name: "tiny".into(),
            input_size: 224,
            patch_size: 16,
            embed_dim: 128,
            num_layers: 4,
            num_heads: 4,
            stem_channels: 32,
            mlp_ratio: 4.0,
            stem: StemMode::Hybrid,
        }
    }

    /// ViT-Base sized encoder. The original work never states D, L or the head
    /// count, so this is a reconstruction; it is not trained in tests.
    pub fn paper() -> Self {
        Self {
            preset_name: "paper".into(),
            embed_dim: 768,
            num_layers: 12,
            num_heads: 12,
            stem_channels: 64,
            ..Self::tiny()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "tiny" => Ok(Self::tiny()),
            "paper" => Ok(Self::paper()),
            other => Err(Error::Config(format!("unknown preset {other:?} (expected tiny or paper)"))),
        }
    }

    /// Side length of the token grid.
    pub fn grid_side(&self) -> usize {
        self.input_size / self.patch_size
    }

    pub fn num_tokens(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    pub fn mlp_dim(&self) -> usize {
        (self.embed_dim as f64 * self.mlp_ratio).round() as usize
    }

    /// Channels of the three stem stages (1/2, 1/4, 1/8).
    pub fn stem_widths(&self) -> [usize; 3] {
        let c = self.stem_channels;
        [c, 2 * c, 4 * c]
    }

    /// Output channels of conv_more (1/16) and the four decoder blocks (1/8, 1/4, 1/2, 1).
    pub fn decoder_widths(&self) -> [usize; 5] {
        let c = self.stem_channels;
        [4 * c, 2 * c, c, (c / 2).max(1), (c / 2).max(1)]
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.patch_size != 2 * STEM_STRIDE {
            return bad(format!(
                "patch_size {} unsupported: the decoder cascade starts at 1/16",
                self.patch_size
            ));
        }
        if self.input_size == 0 || self.input_size % self.patch_size != 0 {
            return bad(format!(
                "input_size {} not divisible by patch_size {}",
                self.input_size, self.patch_size
            ));
        }
        if self.embed_dim == 0 || self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            return bad(format!(
                "embed_dim {} not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            ));
        }
        if self.stem_channels < 2 || self.stem_channels % 2 != 0 {
            return bad(format!("stem_channels {} must be even and >= 2", self.stem_channels));
        }
        if !(self.mlp_ratio > 0.0) || self.mlp_dim() == 0 {
            return bad(format!("mlp_ratio {} must be positive", self.mlp_ratio));
        }
        Ok(())
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::tiny()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    Constant,
    /// Cosine decay to zero over all steps.
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub num_runs: usize,
    pub w_hard: f64,
    pub w_easy: f64,
    pub deep_supervision: bool,
    pub seed: u64,
    /// Fraction of training patients held out for per-epoch validation Dice.
    pub val_fraction: f64,
    pub lr_schedule: LrSchedule,
    /// Random horizontal flips.
    pub augment: bool,
    /// Binarisation threshold for validation and evaluation.
    pub threshold: f64,
    /// Threads used by multi-run, ablation and comparison; results do not depend on it.
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            learning_rate: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            epochs: 10,
            num_runs: 8,
            w_hard: 12.0,
            w_easy: 1.0,
            deep_supervision: true,
            seed: 0,
            val_fraction: 0.1,
            lr_schedule: LrSchedule::Constant,
            augment: false,
            threshold: 0.5,
            workers: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 || self.epochs == 0 || self.num_runs == 0 || self.workers == 0 {
            return bad("batch_size, epochs, num_runs and workers must be positive".into());
        }
        if !(self.learning_rate > 0.0) {
            return bad(format!("learning_rate {} must be positive", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum {} outside [0, 1)", self.momentum));
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!("weight_decay {} negative", self.weight_decay));
        }
        if !(self.w_easy >= 1.0 && self.w_hard >= self.w_easy) {
            return bad(format!(
                "need w_hard >= w_easy >= 1, got w_hard {} w_easy {}",
                self.w_hard, self.w_easy
            ));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad(format!("val_fraction {} outside [0, 1)", self.val_fraction));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return bad(format!("threshold {} outside (0, 1)", self.threshold));
        }
        Ok(())
    }
}

/// Both halves of a run configuration.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    /// Parses a flat `key = value` document.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        Self::from_table(&table)
    }

    /// Defaults (or the named preset) with every key of `table` applied.
    pub fn from_table(table: &toml::Table) -> Result<Self> {
        let mut cfg = RunConfig::default();
        if let Some(v) = table.get("preset_name") {
            let name = v
                .as_str()
                .ok_or_else(|| Error::Config("preset_name must be a string".into()))?;
            cfg.model = ModelConfig::preset(name)?;
        }
        cfg.apply(table)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Overrides named fields; every key must belong to exactly one of the two configs.
    pub fn apply(&mut self, overrides: &toml::Table) -> Result<()> {
        let mut model = to_table(&self.model)?;
        let mut train = to_table(&self.train)?;
        for (key, value) in overrides {
            if let Some(slot) = model.get_mut(key) {
                *slot = coerce(slot, value.clone());
            } else if let Some(slot) = train.get_mut(key) {
                *slot = coerce(slot, value.clone());
            } else {
                return Err(Error::Config(format!("unknown config key {key:?}")));
            }
        }
        self.model = model
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        self.train = train
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }

    /// Flat rendering accepted by [`RunConfig::from_toml_str`].
    pub fn to_toml_string(&self) -> Result<String> {
        let mut flat = to_table(&self.model)?;
        flat.extend(to_table(&self.train)?);
        toml::to_string(&flat).map_err(|e| Error::Config(e.to_string()))
    }
}

fn to_table<T: Serialize>(v: &T) -> Result<toml::Table> {
    toml::Table::try_from(v).map_err(|e| Error::Config(e.to_string()))
}

/// Lets `learning_rate = 1` mean `1.0`.
fn coerce(slot: &toml::Value, value: toml::Value) -> toml::Value {
    match (slot, &value) {
        (toml::Value::Float(_), toml::Value::Integer(i)) => toml::Value::Float(*i as f64),
        _ => value,
    }
}
