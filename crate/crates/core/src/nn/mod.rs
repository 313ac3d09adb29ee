//! Small from-scratch CNN core in double precision: tensors, layer kernels,
//! a sequential network with reverse-mode gradients, SGD with weight decay,
//! and the binary weights format.

pub mod network;
pub mod ops;
pub mod tensor;
pub mod weights;

pub use network::{infer_shapes, Affine, DropoutMode, ForwardCache, Gradients, LayerSpec, Network};
pub use tensor::Tensor;

use crate::error::{Error, Result};

/// Optimizer and schedule settings.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Survival probability used by every dropout layer while training.
    pub dropout_keep: f64,
    pub rng_seed: u64,
}

impl Default for TrainingConfig {
    /// The reference recipe: lr 0.0005, weight decay 0.001, batch 20,
    /// 100 epochs, dropout 0.5.
    fn default() -> Self {
        TrainingConfig {
            learning_rate: 0.0005,
            weight_decay: 0.001,
            batch_size: 20,
            epochs: 100,
            dropout_keep: 0.5,
            rng_seed: 0,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate >= 0.0
            && self.learning_rate.is_finite()
            && self.weight_decay >= 0.0
            && self.batch_size > 0
            && self.epochs > 0
            && self.dropout_keep > 0.0
            && self.dropout_keep <= 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("invalid training config {self:?}")))
        }
    }
}
