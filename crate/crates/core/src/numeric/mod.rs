//! Dense tensors, the reverse-mode tape, the optimizer and training controls.

mod graph;
mod gradcheck;
mod optim;
mod params;
pub mod rng;
mod schedule;
mod tensor;

pub use graph::{ConvRounding, Graph, Mode, OpKind, Var, BN_EPS, BN_MOMENTUM};
pub use gradcheck::{grad_check, relative_error, GradCheckOptions, GradCheckReport, ParamCheck};
pub use optim::{adam_step, clip_global_norm, AdamState};
pub use params::{BufferStore, ParamRegistry, TensorStore};
pub use schedule::{early_stop_check, schedule_lr};
pub use tensor::Tensor;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Optimization recipe. Defaults are the published training settings; the
/// warm-up length and the cosine floor are not published and are declared here.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr_init: f64,
    pub lr_min: f64,
    pub total_epochs: usize,
    pub warmup_steps: usize,
    pub clip_norm: f64,
    pub patience: usize,
    pub weight_decay: f64,
    pub dropout_rate: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            lr_init: 0.001,
            lr_min: 1e-5,
            total_epochs: 200,
            warmup_steps: 100,
            clip_norm: 10.0,
            patience: 10,
            weight_decay: 0.0001,
            dropout_rate: 0.1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::config(format!("train.{m}")));
        if self.batch_size < 1 {
            return bad("batch_size must be >= 1");
        }
        if !(0.0 <= self.lr_min && self.lr_min <= self.lr_init) {
            return bad("lr_min must satisfy 0 <= lr_min <= lr_init");
        }
        if self.clip_norm <= 0.0 {
            return bad("clip_norm must be > 0");
        }
        if self.patience < 1 {
            return bad("patience must be >= 1");
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad("dropout_rate must be in [0, 1)");
        }
        if self.weight_decay < 0.0 {
            return bad("weight_decay must be >= 0");
        }
        Ok(())
    }
}
