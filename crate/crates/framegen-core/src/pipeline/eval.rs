//! Held-out evaluation: interpolate each clip from its keyframes and score
//! the middle frames against ground truth, next to two reference baselines
//! (repeat the first keyframe; blend the keyframes linearly in time).

use ndarray::{Array3, Axis};
use rayon::prelude::*;

use crate::data::{psnr, ssim, Clip};
use crate::diffusion::SampleOpts;
use crate::error::{Error, Result};

use super::infer::interpolate;
use super::Checkpoint;

/// Mean PSNR (dB) and SSIM over a clip's middle frames.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FrameScores {
    pub psnr: f64,
    pub ssim: f64,
}

/// One clip's scores for the model and both baselines.
#[derive(Clone, Copy, Debug)]
pub struct ClipEval {
    pub model: FrameScores,
    pub repeat_first: FrameScores,
    pub linear_blend: FrameScores,
}

/// Per-clip scores plus their mean, in dataset order.
#[derive(Clone, Debug)]
pub struct EvalReport {
    pub per_clip: Vec<ClipEval>,
    pub mean: ClipEval,
}

/// `(1-tau) * first + tau * last`, the constant-brightness crossfade that
/// large motion defeats.
pub fn linear_blend(first: &Array3<f32>, last: &Array3<f32>, tau: f32) -> Array3<f32> {
    let mut out = first.mapv(|v| v * (1.0 - tau));
    out.zip_mut_with(last, |o, &l| *o += tau * l);
    out
}

/// Score a prediction for every middle frame (indices 1..N-1) of `truth`.
fn score_middles<F>(truth: &Clip, predict: F) -> Result<FrameScores>
where
    F: Fn(usize) -> Array3<f32>,
{
    let n = truth.n_frames();
    let mut acc = FrameScores { psnr: 0.0, ssim: 0.0 };
    for i in 1..n - 1 {
        let pred = predict(i);
        let gt = truth.frames.index_axis(Axis(0), i);
        acc.psnr += psnr(&pred.view(), &gt)?;
        acc.ssim += ssim(&pred.view(), &gt)?;
    }
    let m = (n - 2) as f64;
    Ok(FrameScores { psnr: acc.psnr / m, ssim: acc.ssim / m })
}

fn eval_clip(ckpt: &Checkpoint, clip: &Clip, steps: usize, seed: u64) -> Result<ClipEval> {
    let n = clip.n_frames();
    let (first, last) = clip.keyframes();
    let opts = SampleOpts { steps, seed, clamp: Some(4.0) };
    let out = interpolate(ckpt, &first, &last, n, &opts)?;

    let model = score_middles(clip, |i| out.frames.index_axis(Axis(0), i).to_owned())?;
    let repeat_first = score_middles(clip, |_| first.clone())?;
    let blend = score_middles(clip, |i| {
        linear_blend(&first, &last, i as f32 / (n - 1) as f32)
    })?;
    Ok(ClipEval { model, repeat_first, linear_blend: blend })
}

/// Evaluate a checkpoint on held-out clips. Deterministic for a fixed
/// (checkpoint, dataset, seed) regardless of `threads`; each clip gets its
/// own derived sampling seed.
pub fn evaluate(
    ckpt: &Checkpoint,
    clips: &[Clip],
    steps: usize,
    seed: u64,
    threads: usize,
) -> Result<EvalReport> {
    if clips.is_empty() {
        return Err(Error::Invalid("evaluation needs at least one clip".into()));
    }
    for (i, clip) in clips.iter().enumerate() {
        if clip.n_frames() < 3 {
            return Err(Error::Invalid(format!(
                "clip {i} has {} frames; interpolation scoring needs >= 3",
                clip.n_frames()
            )));
        }
    }
    let clip_seed = |i: usize| seed ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);

    let per_clip: Vec<ClipEval> = if threads > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::Invalid(format!("worker pool: {e}")))?;
        pool.install(|| {
            clips
                .par_iter()
                .enumerate()
                .map(|(i, clip)| eval_clip(ckpt, clip, steps, clip_seed(i)))
                .collect::<Result<Vec<_>>>()
        })?
    } else {
        clips
            .iter()
            .enumerate()
            .map(|(i, clip)| eval_clip(ckpt, clip, steps, clip_seed(i)))
            .collect::<Result<Vec<_>>>()?
    };

    let m = per_clip.len() as f64;
    let mut mean = ClipEval {
        model: FrameScores { psnr: 0.0, ssim: 0.0 },
        repeat_first: FrameScores { psnr: 0.0, ssim: 0.0 },
        linear_blend: FrameScores { psnr: 0.0, ssim: 0.0 },
    };
    for e in &per_clip {
        mean.model.psnr += e.model.psnr / m;
        mean.model.ssim += e.model.ssim / m;
        mean.repeat_first.psnr += e.repeat_first.psnr / m;
        mean.repeat_first.ssim += e.repeat_first.ssim / m;
        mean.linear_blend.psnr += e.linear_blend.psnr / m;
        mean.linear_blend.ssim += e.linear_blend.ssim / m;
    }
    Ok(EvalReport { per_clip, mean })
}
