//! Keyframe interpolation inference and the condition assembly shared with
//! training. Condition inputs are built here and nowhere else, so the
//! keyframes-only provenance rule has a single choke point.

use ndarray::{Array3, Array4, ArrayD, Axis};

use crate::condencoder::build_spatial_condition;
use crate::data::Clip;
use crate::diffusion::{sample, SampleOpts};
use crate::error::{Error, Result};
use crate::latent::{Autoencoder, DOWN_FACTOR};
use crate::motion::{bidirectional_flow, build_temporal_stack, depth_map, FlowConfig};
use crate::nn::ParamStore;
use crate::tape::Graph;

use super::Checkpoint;

/// The two condition tensors consumed by the conditional encoder. Both are
/// pure functions of the keyframes and the frame count: `spatial` is the
/// masked latent bundle `[N, C+1, h, w]` (latent channels pre-divided by
/// the checkpoint's latent scale), `stack` is the motion summary
/// `[N, 7, H, W]` from estimated flow and depth.
#[derive(Clone, Debug)]
pub struct ConditionInputs {
    pub spatial: ArrayD<f32>,
    pub stack: ArrayD<f32>,
}

/// Assemble both condition tensors from the two keyframes alone.
pub fn condition_from_keyframes(
    ae: &Autoencoder,
    ps: &ParamStore<f32>,
    first: &Array3<f32>,
    last: &Array3<f32>,
    n: usize,
    latent_scale: f64,
) -> Result<ConditionInputs> {
    let first_dyn = first.clone().into_dyn();
    let last_dyn = last.clone().into_dyn();
    let (mut spatial, _mask) = build_spatial_condition(ae, ps, &first_dyn, &last_dyn, n)?;
    let c = spatial.shape()[1] - 1;
    if latent_scale != 1.0 {
        let inv = (1.0 / latent_scale) as f32;
        spatial
            .slice_axis_mut(Axis(1), ndarray::Slice::from(0..c))
            .mapv_inplace(|v| v * inv);
    }

    let cfg = FlowConfig::default();
    let (fwd, bwd) = bidirectional_flow(&first.view(), &last.view(), &cfg)?;
    let d_first = depth_map(&first.view(), None);
    let d_last = depth_map(&last.view(), None);
    let stack = build_temporal_stack(&fwd, &bwd, &d_first, &d_last, n)?;
    Ok(ConditionInputs { spatial, stack: stack.into_dyn() })
}

/// Condition inputs for a training clip: only its keyframes are read.
pub fn condition_from_clip(
    ae: &Autoencoder,
    ps: &ParamStore<f32>,
    clip: &Clip,
    latent_scale: f64,
) -> Result<ConditionInputs> {
    let (first, last) = clip.keyframes();
    condition_from_keyframes(ae, ps, &first, &last, clip.n_frames(), latent_scale)
}

/// Interpolate an N-frame clip between two keyframes: build the condition,
/// run the deterministic reverse sampler in latent space, decode, and
/// replace the endpoint frames with the exact inputs.
pub fn interpolate(
    ckpt: &Checkpoint,
    first: &Array3<f32>,
    last: &Array3<f32>,
    n: usize,
    opts: &SampleOpts,
) -> Result<Clip> {
    if n < 3 {
        return Err(Error::Invalid(format!(
            "interpolation needs n >= 3 frames, got {n}"
        )));
    }
    if first.shape() != last.shape() || first.shape()[0] != 3 {
        return Err(Error::shape(
            "interpolate",
            format!("keyframes {:?} vs {:?}", first.shape(), last.shape()),
        ));
    }
    let (height, width) = (first.shape()[1], first.shape()[2]);
    if height % DOWN_FACTOR != 0 || width % DOWN_FACTOR != 0 {
        return Err(Error::Invalid(format!(
            "keyframe dims {height}x{width} must be divisible by {DOWN_FACTOR}"
        )));
    }

    let (ae, den, cond) = ckpt.model.build()?;
    let ps = &ckpt.params;
    let scale = ckpt.model.latent_scale;
    let inputs = condition_from_keyframes(&ae, ps, first, last, n, scale)?;
    let t_max = ckpt.model.timesteps;

    let shape = [
        n,
        ckpt.model.latent_channels,
        height / DOWN_FACTOR,
        width / DOWN_FACTOR,
    ];
    let z_hat = sample::<f32, _>(&ckpt.schedule, &shape, opts, |z_t, t| {
        let mut g = Graph::<f32>::new();
        let slv = g.leaf(inputs.spatial.clone());
        let stv = g.leaf(inputs.stack.clone());
        let temb = den.timestep_embed(&mut g, ps, t, t_max)?;
        let ctx = cond.keyframe_context(&mut g, ps, slv)?;
        let feats = cond.encode_condition(&mut g, ps, slv, stv, temb, ctx)?;
        let deltas = cond.stage_deltas(&mut g, ps, &feats)?;
        let conditioning = crate::denoiser::Conditioning {
            s1: deltas[0],
            s2: deltas[1],
            mid: deltas[2],
            context: ctx,
        };
        let zv = g.leaf(z_t.clone());
        let v = den.denoise(&mut g, ps, zv, t, t_max, Some(&conditioning))?;
        Ok(g.value(v).clone())
    })?;

    let latents = z_hat.mapv(|v| v * scale as f32);
    let decoded = ae.decode_detached(ps, &latents)?;
    let mut frames = decoded
        .into_dimensionality::<ndarray::Ix4>()
        .map_err(|e| Error::shape("interpolate", e.to_string()))?;
    frames.index_axis_mut(Axis(0), 0).assign(first);
    frames.index_axis_mut(Axis(0), n - 1).assign(last);
    clipped(frames)
}

/// Decoder outputs are already in (0,1); this guards against negative-zero
/// style drift and wraps the tensor as a clip.
fn clipped(frames: Array4<f32>) -> Result<Clip> {
    Clip::new(frames.mapv(|v| v.clamp(0.0, 1.0)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_clip, SceneConfig};
    use crate::diffusion::NoiseSchedule;
    use crate::pipeline::ModelConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_checkpoint(seed: u64) -> Checkpoint {
        let model = ModelConfig::tiny();
        let (ae, den, cond) = model.build().unwrap();
        let mut params = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ae.init(&mut params, &mut rng);
        den.init(&mut params, &mut rng);
        cond.init(&mut params, &mut rng, &den).unwrap();
        let schedule = NoiseSchedule::cosine(model.timesteps).unwrap();
        Checkpoint { model, schedule, params }
    }

    fn toy_clip(seed: u64) -> Clip {
        gen_clip(&SceneConfig::default(), 5, 16, 16, seed).unwrap()
    }

    #[test]
    fn output_has_n_frames_with_exact_endpoints() {
        let ckpt = tiny_checkpoint(1);
        let clip = toy_clip(2);
        let (first, last) = clip.keyframes();
        let opts = SampleOpts { steps: 3, seed: 7, clamp: Some(4.0) };
        let out = interpolate(&ckpt, &first, &last, 5, &opts).unwrap();
        assert_eq!(out.frames.shape(), &[5, 3, 16, 16]);
        assert_eq!(out.frames.index_axis(Axis(0), 0), first);
        assert_eq!(out.frames.index_axis(Axis(0), 4), last);
        assert!(out.frames.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn sampling_is_deterministic_per_seed() {
        let ckpt = tiny_checkpoint(3);
        let clip = toy_clip(4);
        let (first, last) = clip.keyframes();
        let opts = SampleOpts { steps: 3, seed: 11, clamp: Some(4.0) };
        let a = interpolate(&ckpt, &first, &last, 4, &opts).unwrap();
        let b = interpolate(&ckpt, &first, &last, 4, &opts).unwrap();
        assert_eq!(a.frames, b.frames);

        let other = SampleOpts { steps: 3, seed: 12, clamp: Some(4.0) };
        let c = interpolate(&ckpt, &first, &last, 4, &other).unwrap();
        // Middle frames move with the seed; endpoints never do.
        assert_ne!(a.frames.index_axis(Axis(0), 1), c.frames.index_axis(Axis(0), 1));
        assert_eq!(c.frames.index_axis(Axis(0), 0), first);
    }

    #[test]
    fn condition_inputs_ignore_everything_but_the_keyframes() {
        let ckpt = tiny_checkpoint(5);
        let (ae, _den, _cond) = ckpt.model.build().unwrap();
        let clip = toy_clip(6);

        // Scramble every interior frame; the condition cannot notice.
        let mut scrambled = clip.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for i in 1..clip.n_frames() - 1 {
            scrambled
                .frames
                .index_axis_mut(Axis(0), i)
                .mapv_inplace(|_| rand::Rng::random_range(&mut rng, 0.0..1.0));
        }
        let a = condition_from_clip(&ae, &ckpt.params, &clip, 1.0).unwrap();
        let b = condition_from_clip(&ae, &ckpt.params, &scrambled, 1.0).unwrap();
        for (x, y) in a.spatial.iter().zip(b.spatial.iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        for (x, y) in a.stack.iter().zip(b.stack.iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }

        // The latent scale divides latent channels and leaves the mask.
        let scaled = condition_from_clip(&ae, &ckpt.params, &clip, 2.0).unwrap();
        let c = ckpt.model.latent_channels;
        for (i, (x, y)) in a.spatial.iter().zip(scaled.spatial.iter()).enumerate() {
            let ch = (i / (4 * 4)) % (c + 1);
            if ch == c {
                assert_eq!(x, y);
            } else {
                assert!((x * 0.5 - y).abs() <= f32::EPSILON * x.abs());
            }
        }
    }

    #[test]
    fn invalid_requests_are_rejected() {
        let ckpt = tiny_checkpoint(8);
        let clip = toy_clip(9);
        let (first, last) = clip.keyframes();
        let opts = SampleOpts { steps: 3, seed: 0, clamp: None };
        assert!(interpolate(&ckpt, &first, &last, 2, &opts).is_err());

        let odd = Array3::<f32>::zeros((3, 15, 16));
        assert!(interpolate(&ckpt, &odd, &odd, 4, &opts).is_err());

        let mismatched = Array3::<f32>::zeros((3, 32, 32));
        assert!(interpolate(&ckpt, &first, &mismatched, 4, &opts).is_err());
    }
}
