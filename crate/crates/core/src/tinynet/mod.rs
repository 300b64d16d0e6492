//! Small 2.5D encoder-decoder with hand-written reverse-mode gradients,
//! switchable normalization, and a contrast-dropout training loop.

mod adam;
mod augment;
mod checkpoint;
mod gradcheck;
mod layers;
mod net;
mod norm;
mod stats;
mod tensor;
mod train;

pub use adam::Adam;
pub use augment::{SpatialWarp, WarpKind};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use gradcheck::{
    backward_check, finite_difference_check, gradient_suite, relative_error, CheckSpec, CheckTarget, GradCheck,
};
pub use layers::{
    maxpool2, maxpool2_backward, sigmoid, sigmoid_backward, upsample_nearest, upsample_nearest_backward,
    Activation, Conv2d, ConvGrad,
};
pub use net::{slabs_to_tensor, ForwardCache, Grads, Net, Unit, UnitGrad};
pub use norm::{normalize, InferenceStats, Norm, NormCache, NormGrad, NormMode, NormPolicy, Phase, StatsSource};
pub use stats::{export_norm_stats, stats_to_csv, NormStatRecord};
pub use tensor::Tensor;
pub use train::{contrast_dropout, sample_keep_set, train, TrainLog, Trainer, TrainingSubject};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::orient::Slab25D;

/// Network shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    pub levels: usize,
    pub channels: Vec<usize>,
    pub in_channels: usize,
    pub activation: Activation,
    /// `conv -> norm -> activation` when true, `conv -> activation -> norm` otherwise.
    pub norm_before_activation: bool,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl NetConfig {
    /// Three levels with 8/16/32 channels.
    pub fn desk() -> Self {
        Self {
            levels: 3,
            channels: vec![8, 16, 32],
            in_channels: Slab25D::N_CHANNELS,
            activation: Activation::Relu,
            norm_before_activation: true,
        }
    }

    /// Five levels with 64..1024 channels.
    pub fn full_scale() -> Self {
        Self { levels: 5, channels: vec![64, 128, 256, 512, 1024], ..Self::desk() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels < 2 {
            return Err(Error::Config(format!("need at least 2 levels, got {}", self.levels)));
        }
        if self.channels.len() != self.levels {
            return Err(Error::Config(format!(
                "{} channel counts for {} levels",
                self.channels.len(),
                self.levels
            )));
        }
        if self.channels[0] == 0 || self.channels.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config(format!("channels must be positive and strictly increasing: {:?}", self.channels)));
        }
        if self.in_channels == 0 {
            return Err(Error::Config("in_channels must be positive".into()));
        }
        Ok(())
    }
}

/// Optimization settings. Defaults follow the published recipe except the
/// batch size and iteration count, which are desk-scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub contrast_dropout: bool,
    pub rater_sampling: bool,
    /// Random elastic/affine warps before slab extraction.
    pub spatial_augmentation: bool,
    pub augmentation_probability: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 300,
            batch_size: 4,
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            contrast_dropout: true,
            rater_sampling: true,
            spatial_augmentation: true,
            augmentation_probability: 0.75,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::Config("adam_eps must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.augmentation_probability) {
            return Err(Error::Config("augmentation_probability must lie in [0, 1]".into()));
        }
        Ok(())
    }
}
