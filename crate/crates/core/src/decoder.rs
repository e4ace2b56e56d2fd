//! ConvE-style scoring of `(head, relation)` queries against every entity.

use cpgnn_autodiff::{DropoutKey, Real, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::model::{DecoderSlots, ModelError};

pub const INPUT_DROPOUT_LAYER: u64 = 100;
pub const FEATURE_DROPOUT_LAYER: u64 = 101;
pub const HIDDEN_DROPOUT_LAYER: u64 = 102;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub reshape_h: usize,
    pub reshape_w: usize,
    pub filters: usize,
    pub kernel: usize,
    pub input_dropout: Real,
    pub feature_dropout: Real,
    pub hidden_dropout: Real,
    pub label_smoothing: Real,
}

/// Largest divisor of `d` not exceeding `√d`.
pub fn default_reshape(d: usize) -> (usize, usize) {
    let mut h = 1;
    let mut i = 1;
    while i * i <= d {
        if d % i == 0 {
            h = i;
        }
        i += 1;
    }
    (h, d / h.max(1))
}

impl DecoderConfig {
    /// 32 filters of 3×3, dropouts 0.2/0.2/0.3, label smoothing 0.1.
    pub fn for_dim(d: usize) -> Self {
        let (reshape_h, reshape_w) = default_reshape(d);
        Self {
            reshape_h,
            reshape_w,
            filters: 32,
            kernel: 3,
            input_dropout: 0.2,
            feature_dropout: 0.2,
            hidden_dropout: 0.3,
            label_smoothing: 0.1,
        }
    }

    pub fn without_dropout(mut self) -> Self {
        self.input_dropout = 0.0;
        self.feature_dropout = 0.0;
        self.hidden_dropout = 0.0;
        self
    }

    pub fn validate(&self, d: usize) -> Result<(), ModelError> {
        if self.reshape_h * self.reshape_w != d {
            return Err(ModelError::Config(format!(
                "reshape {}x{} does not cover dimension {d}",
                self.reshape_h, self.reshape_w
            )));
        }
        if self.kernel == 0 || self.kernel > (2 * self.reshape_h).min(self.reshape_w) {
            return Err(ModelError::Config(format!(
                "kernel {} does not fit the {}x{} stacked input",
                self.kernel,
                2 * self.reshape_h,
                self.reshape_w
            )));
        }
        if self.filters == 0 {
            return Err(ModelError::Config("filter count must be positive".into()));
        }
        for (name, p) in [
            ("input_dropout", self.input_dropout),
            ("feature_dropout", self.feature_dropout),
            ("hidden_dropout", self.hidden_dropout),
        ] {
            if !(0.0..1.0).contains(&p) {
                return Err(ModelError::Config(format!("{name} must lie in [0, 1), got {p}")));
            }
        }
        if !(0.0..=1.0).contains(&self.label_smoothing) {
            return Err(ModelError::Config(format!(
                "label_smoothing must lie in [0, 1], got {}",
                self.label_smoothing
            )));
        }
        Ok(())
    }

    /// Spatial size of each feature map after the valid convolution.
    pub fn feature_map(&self) -> (usize, usize) {
        (2 * self.reshape_h + 1 - self.kernel, self.reshape_w + 1 - self.kernel)
    }

    pub fn flat_features(&self) -> usize {
        let (h, w) = self.feature_map();
        self.filters * h * w
    }
}

/// Dropout context for one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct DropoutCtx {
    pub seed: u64,
    pub step: u64,
    pub training: bool,
}

impl DropoutCtx {
    pub fn eval() -> Self {
        Self {
            seed: 0,
            step: 0,
            training: false,
        }
    }

    fn key(&self, layer: u64) -> DropoutKey {
        DropoutKey::new(self.seed, layer, self.step)
    }
}

/// Logits `[B, n_e]` for queries whose head and relation embeddings are the
/// rows of `heads` and `rels` (both `[B, d]`).
pub fn conve_logits(
    tape: &mut Tape,
    slots: &DecoderSlots,
    vars: &[Var],
    heads: Var,
    rels: Var,
    entities: Var,
    cfg: &DecoderConfig,
    dropout: DropoutCtx,
) -> Result<Var, ModelError> {
    let shape = tape.value(heads).shape().to_vec();
    let (b, d) = (shape[0], shape[1]);
    cfg.validate(d)?;
    let stacked = tape.concat_cols(heads, rels)?;
    let x = tape.reshape(stacked, &[b, 1, 2 * cfg.reshape_h, cfg.reshape_w])?;
    let x = tape.dropout(x, cfg.input_dropout, dropout.key(INPUT_DROPOUT_LAYER), dropout.training)?;
    let x = tape.conv2d(x, vars[slots.filters])?;
    let x = tape.relu(x);
    let x = tape.dropout(x, cfg.feature_dropout, dropout.key(FEATURE_DROPOUT_LAYER), dropout.training)?;
    let x = tape.reshape(x, &[b, cfg.flat_features()])?;
    let x = tape.matmul(x, vars[slots.fc_w])?;
    let x = tape.add(x, vars[slots.fc_b])?;
    let x = tape.dropout(x, cfg.hidden_dropout, dropout.key(HIDDEN_DROPOUT_LAYER), dropout.training)?;
    let x = tape.relu(x);
    let et = tape.transpose(entities)?;
    let s = tape.matmul(x, et)?;
    Ok(tape.add(s, vars[slots.entity_bias])?)
}

/// Probabilities `sigmoid(logits)`.
pub fn conve_score(
    tape: &mut Tape,
    slots: &DecoderSlots,
    vars: &[Var],
    heads: Var,
    rels: Var,
    entities: Var,
    cfg: &DecoderConfig,
    dropout: DropoutCtx,
) -> Result<Var, ModelError> {
    let logits = conve_logits(tape, slots, vars, heads, rels, entities, cfg, dropout)?;
    Ok(tape.sigmoid(logits))
}

/// Mean clipped binary cross entropy over all query-entity pairs.
pub fn bce_loss(tape: &mut Tape, probs: Var, targets: Tensor) -> Result<Var, ModelError> {
    Ok(tape.bce(probs, targets)?)
}
