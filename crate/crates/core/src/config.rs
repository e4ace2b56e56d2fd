//! Flat `key = value` experiment configuration with typed validation, a
//! canonical echo and a content digest.

use std::fmt::Write as _;
use std::path::Path;

use cpgnn_autodiff::Real;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::decoder::{default_reshape, DecoderConfig};
use crate::encoder::{Composition, EncoderConfig, WeightScheme};
use crate::optim::OptimizerKind;
use crate::train::TrainConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`, found {text:?}")]
    Syntax { line: usize, text: String },
    #[error("unknown configuration key {0:?}")]
    UnknownKey(String),
    #[error("invalid value {value:?} for {key}: {reason}")]
    InvalidValue {
        key: String,
        value: String,
        reason: String,
    },
    #[error("{key} = {value} is outside the published grid {allowed}; set allow_off_grid = true to override")]
    OffGrid {
        key: &'static str,
        value: String,
        allowed: &'static str,
    },
    #[error("{0}")]
    Invalid(String),
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

macro_rules! experiment_config {
    ($($(#[doc = $doc:literal])* $field:ident : $ty:ty = $default:expr),+ $(,)?) => {
        /// Every setting of a run. A saved configuration determines the run's
        /// outputs given identical binaries.
        #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
        pub struct ExperimentConfig {
            $($(#[doc = $doc])* pub $field: $ty,)+
        }

        impl Default for ExperimentConfig {
            fn default() -> Self {
                Self { $($field: $default,)+ }
            }
        }

        impl ExperimentConfig {
            pub const KEYS: &'static [&'static str] = &[$(stringify!($field)),+];

            /// Sets one key from its textual value.
            pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
                match key {
                    $(stringify!($field) => {
                        self.$field = value.parse::<$ty>().map_err(|e| ConfigError::InvalidValue {
                            key: key.to_owned(),
                            value: value.to_owned(),
                            reason: e.to_string(),
                        })?;
                    })+
                    other => return Err(ConfigError::UnknownKey(other.to_owned())),
                }
                Ok(())
            }

            /// Canonical `key = value` text, one line per key in declaration order.
            pub fn to_text(&self) -> String {
                let mut s = String::new();
                $(writeln!(s, "{} = {}", stringify!($field), self.$field).unwrap();)+
                s
            }
        }
    };
}

experiment_config! {
    /// Directory holding train.txt, valid.txt and test.txt.
    data_dir: String = String::new(),
    output_dir: String = "runs".to_owned(),
    seed: u64 = 42,
    /// Answer-set size threshold M of the proximity measure.
    m: usize = 50,
    /// Proximity edges need SPM strictly above this value.
    threshold: f64 = 1.0,
    dim: usize = 500,
    layers_kg: usize = 1,
    layers_prox: usize = 1,
    composition: Composition = Composition::Additive,
    weight_scheme: WeightScheme = WeightScheme::Attention,
    ablation_kg_only: bool = false,
    /// Rows of the decoder's reshaped embedding; 0 picks the largest divisor of dim below its square root.
    reshape_h: usize = 0,
    filters: usize = 32,
    kernel: usize = 3,
    input_dropout: Real = 0.2,
    feature_dropout: Real = 0.2,
    hidden_dropout: Real = 0.3,
    label_smoothing: Real = 0.1,
    batch_size: usize = 256,
    learning_rate: Real = 3e-4,
    optimizer: OptimizerKind = OptimizerKind::Adam,
    epochs: usize = 500,
    edge_drop_rate: f64 = 0.3,
    /// Also drop proximity edges per batch at the edge drop rate.
    mask_proximity: bool = false,
    /// Validation interval in epochs; 0 disables periodic validation.
    eval_every: usize = 10,
    eval_batch_size: usize = 512,
    /// Accept values outside the published hyper-parameter grid.
    allow_off_grid: bool = false,
}

const GRID_BATCH: &[usize] = &[256, 512, 1024];
const GRID_LR: &[f64] = &[1e-4, 3e-4, 5e-3];
const GRID_DIM: &[usize] = &[500, 1000];
const GRID_LAYERS: &[usize] = &[1, 2, 3];
const GRID_DROP: &[f64] = &[0.1, 0.3, 0.5, 0.7, 1.0];
const GRID_M: &[usize] = &[25, 50, 100, 500];
const GRID_I: &[f64] = &[0.5, 1.0, 3.0, 5.0];

/// Default value sets of the hyper-parameter search, as `key = v1, v2, ...`.
pub const PUBLISHED_GRID: &str = "\
batch_size = 256, 512, 1024
learning_rate = 1e-4, 3e-4, 5e-3
dim = 500, 1000
layers_kg = 1, 2, 3
layers_prox = 1, 2, 3
edge_drop_rate = 0.1, 0.3, 0.5, 0.7, 1.0
m = 25, 50, 100, 500
threshold = 0.5, 1, 3, 5
";

fn on_grid_f(v: f64, set: &[f64]) -> bool {
    set.iter().any(|&g| (v - g).abs() <= 1e-12 * g.abs().max(1.0))
}

impl ExperimentConfig {
    /// Parses `key = value` lines; `#` starts a comment. Keys not mentioned
    /// keep their defaults. The result is not yet validated.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: i + 1,
                text: raw.to_owned(),
            })?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }

    /// Hex SHA-256 of the canonical text.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }

    /// Digest of the settings that determine the proximity graph.
    pub fn proximity_digest(&self) -> String {
        let key = format!("data_dir = {}\nm = {}\nthreshold = {}\n", self.data_dir, self.m, self.threshold);
        hex::encode(Sha256::digest(key.as_bytes()))
    }

    /// Structural checks always; grid membership unless `allow_off_grid`.
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.m <= 2 {
            return Err(ConfigError::Invalid(format!(
                "m must exceed 2 (the proximity measure divides by m - 2), got {}",
                self.m
            )));
        }
        if !(self.threshold >= 0.0 && self.threshold.is_finite()) {
            return Err(ConfigError::Invalid(format!("threshold must be finite and >= 0, got {}", self.threshold)));
        }
        if !(0.0..=1.0).contains(&self.edge_drop_rate) {
            return Err(ConfigError::Invalid(format!(
                "edge_drop_rate must lie in [0, 1], got {}",
                self.edge_drop_rate
            )));
        }
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return Err(ConfigError::Invalid("batch sizes must be positive".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(ConfigError::Invalid(format!("learning_rate must be >= 0, got {}", self.learning_rate)));
        }
        if self.layers_kg == 0 && self.layers_prox == 0 {
            return Err(ConfigError::Invalid("at least one encoder layer is required".into()));
        }
        if self.reshape_h != 0 && (self.reshape_h > self.dim || self.dim % self.reshape_h != 0) {
            return Err(ConfigError::Invalid(format!(
                "reshape_h = {} does not divide dim = {}",
                self.reshape_h, self.dim
            )));
        }
        self.decoder_config()
            .validate(self.dim)
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.allow_off_grid {
            return Ok(());
        }
        let off = |key: &'static str, value: String, allowed: &'static str| ConfigError::OffGrid { key, value, allowed };
        if !GRID_BATCH.contains(&self.batch_size) {
            return Err(off("batch_size", self.batch_size.to_string(), "{256, 512, 1024}"));
        }
        if !on_grid_f(self.learning_rate as f64, GRID_LR) {
            return Err(off("learning_rate", self.learning_rate.to_string(), "{1e-4, 3e-4, 5e-3}"));
        }
        if !GRID_DIM.contains(&self.dim) {
            return Err(off("dim", self.dim.to_string(), "{500, 1000}"));
        }
        if !GRID_LAYERS.contains(&self.layers_kg) {
            return Err(off("layers_kg", self.layers_kg.to_string(), "{1, 2, 3}"));
        }
        if !GRID_LAYERS.contains(&self.layers_prox) {
            return Err(off("layers_prox", self.layers_prox.to_string(), "{1, 2, 3}"));
        }
        if !on_grid_f(self.edge_drop_rate, GRID_DROP) {
            return Err(off("edge_drop_rate", self.edge_drop_rate.to_string(), "{0.1, 0.3, 0.5, 0.7, 1.0}"));
        }
        if !GRID_M.contains(&self.m) {
            return Err(off("m", self.m.to_string(), "{25, 50, 100, 500}"));
        }
        if !on_grid_f(self.threshold, GRID_I) {
            return Err(off("threshold", self.threshold.to_string(), "{0.5, 1, 3, 5}"));
        }
        Ok(())
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            dim: self.dim,
            layers_kg: self.layers_kg,
            layers_prox: self.layers_prox,
            composition: self.composition,
            weight_scheme: self.weight_scheme,
            ablation_kg_only: self.ablation_kg_only,
        }
    }

    pub fn decoder_config(&self) -> DecoderConfig {
        let (reshape_h, reshape_w) = if self.reshape_h == 0 {
            default_reshape(self.dim)
        } else {
            (self.reshape_h, self.dim / self.reshape_h)
        };
        DecoderConfig {
            reshape_h,
            reshape_w,
            filters: self.filters,
            kernel: self.kernel,
            input_dropout: self.input_dropout,
            feature_dropout: self.feature_dropout,
            hidden_dropout: self.hidden_dropout,
            label_smoothing: self.label_smoothing,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            optimizer: self.optimizer,
            epochs: self.epochs,
            edge_drop_rate: self.edge_drop_rate,
            mask_proximity: self.mask_proximity,
            eval_every: self.eval_every,
            eval_batch_size: self.eval_batch_size,
            seed: self.seed,
        }
    }

    /// Whether the configured removal rate drops every message-passing edge.
    pub fn is_degenerate_drop(&self) -> bool {
        self.edge_drop_rate >= 1.0
    }
}
