//! End-to-end orchestration: checkpointing, the two-phase training loop
//! (autoencoder first, then diffusion over its frozen latents), keyframe
//! interpolation inference, evaluation against reference baselines, and
//! the component ablation harness.

mod ablate;
mod checkpoint;
mod eval;
mod infer;
mod train;

pub use ablate::{ablate, dataset_hash, format_table, AblationRow};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use eval::{evaluate, linear_blend, ClipEval, EvalReport, FrameScores};
pub use infer::{condition_from_clip, condition_from_keyframes, interpolate, ConditionInputs};
pub use train::{train, train_ae, write_loss_csv, AeTrainConfig, TrainConfig, TrainOutcome};

use crate::condencoder::{CondEncoder, CondEncoderConfig};
use crate::denoiser::{Denoiser, DenoiserConfig};
use crate::error::{Error, Result};
use crate::latent::Autoencoder;
use crate::motion::STACK_CHANNELS;

/// Everything needed to rebuild the three models behind a checkpoint.
/// Parameters live under the fixed prefixes `ae.`, `den.`, and `cond.`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub latent_channels: usize,
    pub ae_width: usize,
    pub den: DenoiserConfig,
    pub cond: CondEncoderConfig,
    /// Diffusion schedule length T.
    pub timesteps: usize,
    /// Latents are divided by this before diffusion and multiplied back
    /// before decoding. The diffusion trainer sets it to the global
    /// standard deviation of the training latents so the pure-noise end of
    /// the schedule matches the data marginal; 1.0 until then.
    pub latent_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            latent_channels: 4,
            ae_width: 16,
            den: DenoiserConfig::default(),
            cond: CondEncoderConfig::default(),
            timesteps: 120,
            latent_scale: 1.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.den.latent_channels != self.latent_channels {
            return Err(Error::Config(format!(
                "denoiser latent channels {} vs autoencoder {}",
                self.den.latent_channels, self.latent_channels
            )));
        }
        if self.cond.stack_channels != STACK_CHANNELS {
            return Err(Error::Config(format!(
                "conditional encoder expects the {STACK_CHANNELS}-channel motion stack, got {}",
                self.cond.stack_channels
            )));
        }
        if self.timesteps < 2 {
            return Err(Error::Config(format!(
                "schedule needs timesteps >= 2, got {}",
                self.timesteps
            )));
        }
        if !(self.latent_scale.is_finite() && self.latent_scale > 0.0) {
            return Err(Error::Config(format!(
                "latent scale must be finite and positive, got {}",
                self.latent_scale
            )));
        }
        Ok(())
    }

    /// Construct the three models under their checkpoint prefixes.
    pub fn build(&self) -> Result<(Autoencoder, Denoiser, CondEncoder)> {
        self.validate()?;
        let ae = Autoencoder::new("ae", self.latent_channels, self.ae_width)?;
        let den = Denoiser::new("den", self.den.clone())?;
        let cond = CondEncoder::new("cond", &den, self.cond.clone())?;
        Ok((ae, den, cond))
    }

    /// Smallest config exercising every component; test-sized throughout.
    #[cfg(test)]
    pub(crate) fn tiny() -> Self {
        ModelConfig {
            latent_channels: 2,
            ae_width: 2,
            den: DenoiserConfig {
                latent_channels: 2,
                widths: [3, 4],
                groups: 1,
                heads: 1,
                temb_dim: 4,
                ctx_dim: 3,
            },
            cond: CondEncoderConfig {
                stack_channels: STACK_CHANNELS,
                temporal_channels: 4,
                r_spatial: 1,
                r_temporal: 2,
                fusion_heads: 1,
                fusion_d_k: 3,
                temporal: true,
                xframe: true,
            },
            timesteps: 16,
            latent_scale: 1.0,
        }
    }
}
