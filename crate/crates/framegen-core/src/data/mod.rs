//! Synthetic clip generation, the bit-exact clip container, image export,
//! and the PSNR/SSIM metrics.

mod container;
mod gen;
mod metrics;

pub use container::{export_ppm, read_clip, read_tensor, write_clip, write_tensor};
pub use gen::{gen_clip, periodic_texture, ShapeKind, TrajectoryKind};
pub use metrics::{psnr, ssim, PSNR_CAP};

use ndarray::{Array3, Array4};

use crate::error::{Error, Result};

/// A video clip in [0,1], laid out `[N, 3, H, W]`, with optional generator
/// ground truth attached.
#[derive(Clone, Debug)]
pub struct Clip {
    pub frames: Array4<f32>,
    pub meta: Option<ClipMeta>,
}

impl Clip {
    pub fn new(frames: Array4<f32>) -> Result<Self> {
        if frames.shape()[0] < 2 || frames.shape()[1] != 3 {
            return Err(Error::Invalid(format!(
                "clips are [N>=2, 3, H, W], got {:?}",
                frames.shape()
            )));
        }
        Ok(Clip { frames, meta: None })
    }

    pub fn n_frames(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.frames.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.frames.shape()[3]
    }

    /// The two keyframes: first and last frame, as owned `[3,H,W]` tensors.
    pub fn keyframes(&self) -> (Array3<f32>, Array3<f32>) {
        let first = self.frames.index_axis(ndarray::Axis(0), 0).to_owned();
        let last = self
            .frames
            .index_axis(ndarray::Axis(0), self.n_frames() - 1)
            .to_owned();
        (first, last)
    }
}

/// Ground truth the generator knows about its own scene.
#[derive(Clone, Debug)]
pub struct ClipMeta {
    /// Per object, per frame, the integer center (x, y).
    pub positions: Vec<Vec<(i64, i64)>>,
    /// Per frame, the top-most layer index at each pixel, normalized to
    /// [0,1] with near = 1. Layer 0 is the background. Shape `[N, H, W]`.
    pub layer_depth: Array3<f32>,
    /// Analytic flow from frame 1 to frame N, `[2, H, W]`, channel 0 = dx,
    /// channel 1 = dy, in pixels.
    pub flow_fwd: Array3<f32>,
    /// Analytic flow from frame N to frame 1.
    pub flow_bwd: Array3<f32>,
}

/// Scene recipe for the synthetic generator.
#[derive(Clone, Debug)]
pub struct SceneConfig {
    /// Moving object count (the background is its own layer).
    pub objects: usize,
    /// Shape kinds, cycled per object.
    pub shapes: Vec<ShapeKind>,
    /// Total keyframe-to-keyframe displacement range, as a fraction of
    /// frame width. Each object draws from this range.
    pub velocity: (f64, f64),
    /// Trajectory kinds, cycled per object.
    pub trajectories: Vec<TrajectoryKind>,
    /// Seed for the texture hash (independent of the geometry seed).
    pub texture_seed: u64,
    /// Hard cap on the displacement fraction; must be in (0, 0.5].
    pub max_disp_frac: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            objects: 2,
            shapes: vec![ShapeKind::Rect, ShapeKind::Disc],
            velocity: (0.2, 0.25),
            trajectories: vec![TrajectoryKind::Linear, TrajectoryKind::Quadratic],
            texture_seed: 0,
            max_disp_frac: 0.25,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.objects == 0 {
            return Err(Error::Invalid("scene needs at least one object".into()));
        }
        if self.shapes.is_empty() || self.trajectories.is_empty() {
            return Err(Error::Invalid("scene needs shape and trajectory kinds".into()));
        }
        if !(self.max_disp_frac > 0.0 && self.max_disp_frac <= 0.5) {
            return Err(Error::Invalid(format!(
                "max displacement fraction must be in (0, 0.5], got {}",
                self.max_disp_frac
            )));
        }
        if !(self.velocity.0 > 0.0 && self.velocity.0 <= self.velocity.1) {
            return Err(Error::Invalid(format!(
                "velocity range ({}, {}) is not a valid range",
                self.velocity.0, self.velocity.1
            )));
        }
        Ok(())
    }
}
