//! Training configuration, read from a flat `key = value` file.
//!
//! ```text
//! train_data = "data/train.jsonl"
//! val_data = "data/val.jsonl"
//! test_data = "data/test.jsonl"
//! strategy = "capsule"
//! epochs = 20
//! seed = 7
//! ```
//!
//! Relative data paths are resolved against the directory of the config
//! file. `GRAPHCAGE_SEED` overrides `seed`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, Strategy};

pub const SEED_ENV: &str = "GRAPHCAGE_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub train_data: PathBuf,
    pub val_data: PathBuf,
    pub test_data: Option<PathBuf>,

    pub d_text: usize,
    pub d_audio: usize,
    pub d_vision: usize,
    pub max_len_text: usize,
    pub max_len_audio: usize,
    pub max_len_vision: usize,
    pub d_h: usize,
    pub depth: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub kernel_width: usize,
    pub source_positional: bool,
    pub d_c: usize,
    pub nodes: usize,
    pub routing_iters: usize,
    pub shared_capsule_weights: bool,
    pub strategy: Strategy,

    pub lambda: f64,
    pub lr: f64,
    pub rms_decay: f64,
    pub rms_eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub clip: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            train_data: "train.jsonl".into(),
            val_data: "val.jsonl".into(),
            test_data: None,
            d_text: m.d_text,
            d_audio: m.d_audio,
            d_vision: m.d_vision,
            max_len_text: m.max_len_text,
            max_len_audio: m.max_len_audio,
            max_len_vision: m.max_len_vision,
            d_h: m.d_h,
            depth: m.depth,
            heads: m.heads,
            ffn_hidden: m.ffn_hidden,
            kernel_width: m.kernel_width,
            source_positional: m.source_positional,
            d_c: m.d_c,
            nodes: m.nodes,
            routing_iters: m.routing_iters,
            shared_capsule_weights: m.shared_capsule_weights,
            strategy: m.strategy,
            lambda: 1e-4,
            lr: 1e-3,
            rms_decay: 0.9,
            rms_eps: 1e-8,
            batch_size: 16,
            epochs: 20,
            clip: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Parses the file contents without resolving paths or reading the
    /// environment.
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file, resolves data paths relative to it and applies
    /// the seed override from the environment.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        cfg.apply_seed_override(std::env::var(SEED_ENV).ok().as_deref())?;
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.train_data);
        fix(&mut self.val_data);
        if let Some(p) = self.test_data.as_mut() {
            fix(p);
        }
    }

    pub fn apply_seed_override(&mut self, value: Option<&str>) -> Result<()> {
        if let Some(v) = value {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV} must be an unsigned integer, got {v:?}")))?;
        }
        Ok(())
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            d_text: self.d_text,
            d_audio: self.d_audio,
            d_vision: self.d_vision,
            max_len_text: self.max_len_text,
            max_len_audio: self.max_len_audio,
            max_len_vision: self.max_len_vision,
            d_h: self.d_h,
            depth: self.depth,
            heads: self.heads,
            ffn_hidden: self.ffn_hidden,
            kernel_width: self.kernel_width,
            source_positional: self.source_positional,
            d_c: self.d_c,
            nodes: self.nodes,
            routing_iters: self.routing_iters,
            shared_capsule_weights: self.shared_capsule_weights,
            strategy: self.strategy,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model().validate()?;
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be at least 1".into()));
        }
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be positive, got {v}")))
            }
        };
        positive("clip", self.clip)?;
        positive("lr", self.lr)?;
        positive("rms_eps", self.rms_eps)?;
        if !(0.0..1.0).contains(&self.rms_decay) {
            return Err(Error::Config(format!("rms_decay must lie in [0, 1), got {}", self.rms_decay)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be non-negative, got {}", self.lambda)));
        }
        Ok(())
    }
}
