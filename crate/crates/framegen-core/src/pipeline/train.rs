//! The two-phase training loop: autoencoder reconstruction first, then
//! v-prediction diffusion over the frozen latents. Both phases are
//! deterministic per seed and abort with the offending step index if the
//! loss leaves the representable range.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::{ArrayD, Axis, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::Clip;
use crate::denoiser::Conditioning;
use crate::diffusion::{add_noise, v_target, NoiseSchedule};
use crate::error::{Error, Result};
use crate::latent::recon_loss;
use crate::nn::{randn, AdamW, AdamWConfig, ParamStore};
use crate::real::Real;
use crate::tape::Graph;

use super::infer::{condition_from_clip, ConditionInputs};
use super::{Checkpoint, ModelConfig};

/// Diffusion-phase hyperparameters and ablation switches.
///
/// The default learning rate suits this scale; much larger models want the
/// order of 1e-5.
#[derive(Clone, Debug)]
pub struct TrainConfig {
    /// Schedule length T; training draws t uniformly from {1..T-1}.
    pub timesteps: usize,
    pub lr: f64,
    /// Clips per optimizer step.
    pub batch: usize,
    pub steps: usize,
    pub seed: u64,
    /// Train only the conditional encoder, keeping the base denoiser at
    /// its initialization.
    pub freeze_base: bool,
    /// Drop the temporal branch and fusion from the forward graph.
    pub no_temporal: bool,
    /// Build the conditional encoder without cross-frame attention.
    pub no_xattn: bool,
    pub n_frames: usize,
    pub height: usize,
    pub width: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            timesteps: 120,
            lr: 1e-4,
            batch: 1,
            steps: 200,
            seed: 0,
            freeze_base: false,
            no_temporal: false,
            no_xattn: false,
            n_frames: 9,
            height: 64,
            width: 64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch == 0 {
            return Err(Error::Config("training needs steps >= 1 and batch >= 1".into()));
        }
        if self.timesteps < 2 {
            return Err(Error::Config(format!(
                "schedule needs timesteps >= 2, got {}",
                self.timesteps
            )));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("bad learning rate {}", self.lr)));
        }
        if self.n_frames < 3 {
            return Err(Error::Config(format!(
                "training clips need n_frames >= 3, got {}",
                self.n_frames
            )));
        }
        if self.height % 4 != 0 || self.width % 4 != 0 || self.height == 0 || self.width == 0 {
            return Err(Error::Config(format!(
                "frame dims {}x{} must be positive multiples of 4",
                self.height, self.width
            )));
        }
        Ok(())
    }
}

/// Autoencoder pre-training hyperparameters.
#[derive(Clone, Debug)]
pub struct AeTrainConfig {
    pub steps: usize,
    pub lr: f64,
    /// Frames drawn (with replacement across clips) per optimizer step.
    pub frames_per_step: usize,
    pub seed: u64,
}

impl Default for AeTrainConfig {
    fn default() -> Self {
        AeTrainConfig { steps: 400, lr: 2e-3, frames_per_step: 4, seed: 0 }
    }
}

/// A finished diffusion run: the checkpoint, the loss curve as
/// (step, loss) pairs, and the census of scalars that received gradient.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub curve: Vec<(usize, f64)>,
    pub trained_scalars: usize,
}

fn check_finite(phase: &str, step: usize, loss: f64) -> Result<()> {
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!(
            "{phase} diverged at step {step} (loss {loss})"
        )));
    }
    Ok(())
}

/// Phase one: train the autoencoder on frame reconstruction and return an
/// `ae.`-only checkpoint plus its loss curve. The result is the frozen
/// latent space every later phase builds on.
pub fn train_ae(
    model: &ModelConfig,
    clips: &[Clip],
    cfg: &AeTrainConfig,
) -> Result<(Checkpoint, Vec<(usize, f64)>)> {
    if clips.is_empty() {
        return Err(Error::Invalid("autoencoder training needs at least one clip".into()));
    }
    if cfg.steps == 0 || cfg.frames_per_step == 0 {
        return Err(Error::Config("training needs steps >= 1 and frames_per_step >= 1".into()));
    }
    let (h, w) = (clips[0].height(), clips[0].width());
    if clips.iter().any(|c| c.height() != h || c.width() != w) {
        return Err(Error::Invalid("clips must share one frame size".into()));
    }

    let (ae, _den, _cond) = model.build()?;
    let mut params = ParamStore::<f32>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    ae.init(&mut params, &mut rng);
    let mut opt = AdamW::<f32>::new(AdamWConfig { lr: cfg.lr, ..AdamWConfig::default() });

    let mut curve = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut batch = ArrayD::<f32>::zeros(IxDyn(&[cfg.frames_per_step, 3, h, w]));
        for slot in 0..cfg.frames_per_step {
            let clip = &clips[rng.random_range(0..clips.len())];
            let frame = rng.random_range(0..clip.n_frames());
            batch
                .index_axis_mut(Axis(0), slot)
                .assign(&clip.frames.index_axis(Axis(0), frame));
        }
        let mut g = Graph::<f32>::new();
        let x = g.leaf(batch);
        let z = ae.encode(&mut g, &params, x)?;
        let x_hat = ae.decode(&mut g, &params, z)?;
        let loss = recon_loss(&mut g, x, x_hat)?;
        let loss_val = g.scalar(loss).to_f64();
        check_finite("autoencoder training", step, loss_val)?;
        let grads = g.backward(loss)?;
        opt.step(&mut params, &g.param_grads(&grads))?;
        curve.push((step, loss_val));
    }

    let schedule = NoiseSchedule::cosine(model.timesteps)?;
    Ok((Checkpoint { model: model.clone(), schedule, params }, curve))
}

/// One clip's precomputed training tensors: clean latents (already divided
/// by the latent scale) and the keyframe-only condition inputs.
struct ClipCache {
    z0: ArrayD<f32>,
    cond: ConditionInputs,
}

/// Phase two: train the denoiser and conditional encoder with the
/// v-prediction objective over the frozen autoencoder's latents.
///
/// Per step and batch element: draw a clip, draw t uniformly from
/// {1..T-1}, draw gaussian noise, corrupt the clean latents, build the
/// condition from the keyframes alone, predict v, and take one AdamW step
/// on the mean squared error. `ae_ckpt` supplies the frozen autoencoder
/// and the model shape; the ablation switches in `cfg` override the
/// conditional encoder's wiring.
pub fn train(cfg: &TrainConfig, ae_ckpt: &Checkpoint, clips: &[Clip]) -> Result<TrainOutcome> {
    cfg.validate()?;
    if clips.is_empty() {
        return Err(Error::Invalid("diffusion training needs at least one clip".into()));
    }
    for (i, clip) in clips.iter().enumerate() {
        if clip.n_frames() != cfg.n_frames
            || clip.height() != cfg.height
            || clip.width() != cfg.width
        {
            return Err(Error::Invalid(format!(
                "clip {i} is {}x{}x{} but the config trains on {}x{}x{}",
                clip.n_frames(),
                clip.height(),
                clip.width(),
                cfg.n_frames,
                cfg.height,
                cfg.width
            )));
        }
    }

    let mut model = ae_ckpt.model.clone();
    model.cond.temporal = !cfg.no_temporal;
    model.cond.xframe = !cfg.no_xattn;
    model.timesteps = cfg.timesteps;
    model.latent_scale = 1.0;
    let (ae, den, cond) = model.build()?;

    let mut params = ParamStore::<f32>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    den.init(&mut params, &mut rng);
    cond.init(&mut params, &mut rng, &den)?;
    let mut ae_params = 0usize;
    for (k, v) in ae_ckpt.params.iter() {
        if k.starts_with("ae.") {
            params.insert(k.clone(), v.clone());
            ae_params += 1;
        }
    }
    if ae_params == 0 {
        return Err(Error::Invalid(
            "autoencoder checkpoint carries no ae. parameters".into(),
        ));
    }

    // The autoencoder is frozen, so latents and conditions are constants
    // of the dataset: encode everything once.
    let raw_latents: Vec<ArrayD<f32>> = clips
        .iter()
        .map(|clip| ae.encode_detached(&params, &clip.frames.clone().into_dyn()))
        .collect::<Result<_>>()?;
    model.latent_scale = global_std(&raw_latents);
    let inv = (1.0 / model.latent_scale) as f32;
    let cache: Vec<ClipCache> = clips
        .iter()
        .zip(raw_latents)
        .map(|(clip, z)| {
            Ok(ClipCache {
                z0: z.mapv(|v| v * inv),
                cond: condition_from_clip(&ae, &params, clip, model.latent_scale)?,
            })
        })
        .collect::<Result<_>>()?;

    let schedule = NoiseSchedule::cosine(cfg.timesteps)?;
    let mut opt = AdamW::<f32>::new(AdamWConfig { lr: cfg.lr, ..AdamWConfig::default() });
    let t_max = cfg.timesteps;
    let mut curve = Vec::with_capacity(cfg.steps);
    let mut trained_scalars = 0usize;

    for step in 0..cfg.steps {
        let mut g = Graph::<f32>::new();
        let mut total = None;
        for _ in 0..cfg.batch {
            let entry = &cache[rng.random_range(0..clips.len())];
            let t = rng.random_range(1..t_max);
            let eps = randn::<f32, _>(&mut rng, entry.z0.shape(), 1.0);
            let z_t = add_noise(&schedule, &entry.z0, &eps, t)?;
            let v = v_target(&schedule, &entry.z0, &eps, t)?;

            let slv = g.leaf(entry.cond.spatial.clone());
            let stv = g.leaf(entry.cond.stack.clone());
            let temb = den.timestep_embed(&mut g, &params, t, t_max)?;
            let ctx = cond.keyframe_context(&mut g, &params, slv)?;
            let feats = cond.encode_condition(&mut g, &params, slv, stv, temb, ctx)?;
            let deltas = cond.stage_deltas(&mut g, &params, &feats)?;
            let conditioning =
                Conditioning { s1: deltas[0], s2: deltas[1], mid: deltas[2], context: ctx };
            let zv = g.leaf(z_t);
            let v_pred = den.denoise(&mut g, &params, zv, t, t_max, Some(&conditioning))?;
            let vt = g.leaf(v);
            let l = g.mse(v_pred, vt)?;
            total = Some(match total {
                None => l,
                Some(acc) => g.add(acc, l)?,
            });
        }
        let mut loss = total.expect("batch >= 1");
        if cfg.batch > 1 {
            loss = g.scale(loss, 1.0 / cfg.batch as f64);
        }
        let loss_val = g.scalar(loss).to_f64();
        check_finite("diffusion training", step, loss_val)?;

        let grads = g.backward(loss)?;
        let mut pg = g.param_grads(&grads);
        pg.retain(|k, _| {
            k.starts_with("cond.") || (!cfg.freeze_base && k.starts_with("den."))
        });
        if step == 0 {
            trained_scalars = pg.values().map(|a| a.len()).sum();
        }
        opt.step(&mut params, &pg)?;
        curve.push((step, loss_val));
    }

    Ok(TrainOutcome {
        checkpoint: Checkpoint { model, schedule, params },
        curve,
        trained_scalars,
    })
}

/// Population standard deviation over every latent value; 1.0 when
/// degenerate so scaling is always safe to invert.
fn global_std(latents: &[ArrayD<f32>]) -> f64 {
    let mut n = 0u64;
    let mut sum = 0f64;
    let mut sq = 0f64;
    for z in latents {
        for &v in z.iter() {
            n += 1;
            sum += v as f64;
            sq += (v as f64) * (v as f64);
        }
    }
    if n == 0 {
        return 1.0;
    }
    let mean = sum / n as f64;
    let var = sq / n as f64 - mean * mean;
    let std = var.max(0.0).sqrt();
    if std.is_finite() && std > 1e-6 {
        std
    } else {
        1.0
    }
}

/// Write a loss curve as `step,loss` CSV.
pub fn write_loss_csv(path: &Path, curve: &[(usize, f64)]) -> Result<()> {
    let mut out = String::from("step,loss\n");
    for (step, loss) in curve {
        let _ = writeln!(out, "{step},{loss}");
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}
