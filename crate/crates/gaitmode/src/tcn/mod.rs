//! Dilated causal temporal convolutional network with a past/future
//! target head, explicit reverse-mode gradients, and an Adam trainer.
//!
//! The network stacks residual blocks of causal convolutions. Block `b`
//! computes `relu(conv_J(...relu(conv_1(x))...) + proj(x))` where every
//! conv shares the block's dilation and `proj` is a 1x1 projection
//! (identity when channel counts already agree). A linear head maps the
//! last temporal position to `(2N+1) x 3` class scores: one row per
//! target offset from -N to +N around the current timestep.
//!
//! Everything is 64-bit and deterministic: the model is tiny, and exact
//! reproducibility (bit-identical checkpoints under one seed) is worth
//! more here than inference speed, which is still far under the 33 ms
//! real-time budget per window.

mod checkpoint;
mod net;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use net::{
    backward, finite_difference_check, forward, predict, predict_sequence, softmax_rows,
    window_cross_entropy, Gradients, TcnModel,
};
pub use train::{train, TrainReport};

pub(crate) use train::{fit, ClassWeights, SupervisedSeq, TrainOptions};

#[cfg(test)]
pub(crate) use train::evaluate_loss;

use crate::data::INPUT_CHANNELS;
use crate::error::{Error, Result};

/// Hyperparameters of the network and its trainer.
///
/// The defaults are the reference configuration: 3 blocks of 2 causal
/// convs (kernel 5, dilations 1/2/4, channels 16/32/64) over the two
/// angle channels, predicting a +/-60-sample target window. The
/// receptive field works out to 57 samples, which is also the input
/// window length consumed per prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct TcnConfig {
    pub input_channels: usize,
    pub n_blocks: usize,
    pub convs_per_block: usize,
    pub kernel_size: usize,
    /// One dilation per block, shared by the block's convs; strictly
    /// increasing.
    pub dilations: Vec<usize>,
    /// Output channels per block.
    pub channels: Vec<usize>,
    /// Target half-width N: the head scores offsets -N..=+N.
    pub target_half_width: usize,
    pub learning_rate: f64,
    /// Anchors per minibatch. Consecutive anchors are trained as one
    /// chunk sharing a single span convolution (see `train`).
    pub batch_size: usize,
    pub epochs: usize,
    /// L2 penalty added to gradients (decoupled weight decay is not
    /// used; the penalty flows through the adaptive rule).
    pub l2_weight: f64,
    /// Dropout rate on inner conv activations during training; 0 = off.
    pub dropout: f64,
    /// Reweight the loss by inverse class frequency. Balancing through
    /// weights rather than resampling keeps minibatch chunks contiguous.
    pub class_balanced: bool,
    /// Fraction of training sequences held out for a validation loss
    /// (taken from the end of the dataset order); 0 = no validation.
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for TcnConfig {
    fn default() -> Self {
        TcnConfig {
            input_channels: INPUT_CHANNELS,
            n_blocks: 3,
            convs_per_block: 2,
            kernel_size: 5,
            dilations: vec![1, 2, 4],
            channels: vec![16, 32, 64],
            target_half_width: 60,
            learning_rate: 1e-3,
            batch_size: 64,
            epochs: 30,
            l2_weight: 0.0,
            dropout: 0.0,
            class_balanced: false,
            val_fraction: 0.0,
            seed: 0,
        }
    }
}

impl TcnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_channels != INPUT_CHANNELS {
            return Err(Error::Invalid(format!(
                "model consumes {INPUT_CHANNELS} input channels, config says {}",
                self.input_channels
            )));
        }
        if self.n_blocks == 0 || self.convs_per_block == 0 || self.kernel_size == 0 {
            return Err(Error::Invalid("blocks, convs per block, and kernel must be positive".into()));
        }
        if self.dilations.len() != self.n_blocks || self.channels.len() != self.n_blocks {
            return Err(Error::Invalid(format!(
                "need one dilation and one channel count per block: {} blocks, {} dilations, {} channel counts",
                self.n_blocks,
                self.dilations.len(),
                self.channels.len()
            )));
        }
        if self.dilations.windows(2).any(|w| w[0] >= w[1]) || self.dilations[0] == 0 {
            return Err(Error::Invalid(format!(
                "dilations must be positive and strictly increasing, got {:?}",
                self.dilations
            )));
        }
        if self.channels.contains(&0) {
            return Err(Error::Invalid("channel counts must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Invalid(format!("learning rate {} must be positive", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::Invalid("batch size must be positive".into()));
        }
        if !(self.l2_weight >= 0.0) {
            return Err(Error::Invalid("l2 weight must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Invalid(format!("dropout {} must lie in [0, 1)", self.dropout)));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Invalid(format!(
                "validation fraction {} must lie in [0, 1)",
                self.val_fraction
            )));
        }
        Ok(())
    }

    /// Warm-up M: the number of past samples a prediction needs, so the
    /// first valid anchor in a sequence is `k = M`.
    pub fn warm_up(&self) -> usize {
        receptive_field(self) - 1
    }

    /// Rows of the target head: 2N+1.
    pub fn target_rows(&self) -> usize {
        2 * self.target_half_width + 1
    }
}

/// Number of input samples that can influence the output at the current
/// position: `1 + sum over conv layers of (kernel-1) * dilation`.
pub fn receptive_field(config: &TcnConfig) -> usize {
    1 + config.convs_per_block
        * config
            .dilations
            .iter()
            .map(|d| (config.kernel_size - 1) * d)
            .sum::<usize>()
}
