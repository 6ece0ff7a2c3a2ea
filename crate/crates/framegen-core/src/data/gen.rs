//! Synthetic large-motion clip generator.
//!
//! Scenes are layered: a static textured background plus moving textured
//! objects, composited back to front. All geometry is integer-grid (no
//! transcendentals), and textures are bilinear interpolations of a hash
//! grid whose weights are dyadic fractions, so clips are bit-identical
//! across platforms for a given seed.

use ndarray::{Array3, Array4};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

use super::{Clip, ClipMeta, SceneConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Rect,
    Disc,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrajectoryKind {
    Linear,
    Quadratic,
}

/// Texture hash-grid cell size in pixels. 8 keeps textures smooth enough
/// for a small autoencoder while giving 8x8 matching blocks distinct SADs.
const TEXTURE_CELL: i64 = 8;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Deterministic hash of (seed, a, b, c) to [0, 1).
fn hash01(seed: u64, a: i64, b: i64, c: u64) -> f64 {
    let h = splitmix64(
        seed ^ splitmix64(a as u64 ^ splitmix64(b as u64 ^ splitmix64(c))),
    );
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// Bilinear hash-grid texture value in [0.05, 0.95] at integer coords.
/// `salt` separates layers and channels.
fn texture_at(seed: u64, salt: u64, x: i64, y: i64) -> f64 {
    let gx = x.div_euclid(TEXTURE_CELL);
    let gy = y.div_euclid(TEXTURE_CELL);
    let fx = x.rem_euclid(TEXTURE_CELL) as f64 / TEXTURE_CELL as f64;
    let fy = y.rem_euclid(TEXTURE_CELL) as f64 / TEXTURE_CELL as f64;
    let c00 = hash01(seed, gx, gy, salt);
    let c10 = hash01(seed, gx + 1, gy, salt);
    let c01 = hash01(seed, gx, gy + 1, salt);
    let c11 = hash01(seed, gx + 1, gy + 1, salt);
    let top = c00 * (1.0 - fx) + c10 * fx;
    let bot = c01 * (1.0 - fx) + c11 * fx;
    0.05 + 0.9 * (top * (1.0 - fy) + bot * fy)
}

/// Periodic multi-octave bilinear hash texture as a [3, H, W] frame.
///
/// Grid nodes wrap modulo the frame, so the texture tiles exactly: rolling
/// it by any integer offset is a lossless transform. Each octave's cell
/// size must divide both dimensions. Coarse octaves give structure that
/// survives downsampling; fine octaves pin exact matches, which makes this
/// the reference input for flow-recovery oracles.
pub fn periodic_texture(seed: u64, h: usize, w: usize, cells: &[usize]) -> Result<Array3<f32>> {
    if cells.is_empty() {
        return Err(Error::Invalid("periodic_texture needs at least one octave".into()));
    }
    for &c in cells {
        if c == 0 || h % c != 0 || w % c != 0 {
            return Err(Error::Invalid(format!(
                "octave cell {c} must divide the {h}x{w} frame"
            )));
        }
    }
    let mut out = Array3::<f32>::zeros((3, h, w));
    let norm = 1.0 / cells.len() as f64;
    for ch in 0..3u64 {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (oi, &c) in cells.iter().enumerate() {
                    let (ky, kx) = ((h / c) as i64, (w / c) as i64);
                    let gy = (y / c) as i64;
                    let gx = (x / c) as i64;
                    let fy = (y % c) as f64 / c as f64;
                    let fx = (x % c) as f64 / c as f64;
                    let salt = ch * 16 + oi as u64;
                    let c00 = hash01(seed, gx, gy, salt);
                    let c10 = hash01(seed, (gx + 1) % kx, gy, salt);
                    let c01 = hash01(seed, gx, (gy + 1) % ky, salt);
                    let c11 = hash01(seed, (gx + 1) % kx, (gy + 1) % ky, salt);
                    let top = c00 * (1.0 - fx) + c10 * fx;
                    let bot = c01 * (1.0 - fx) + c11 * fx;
                    acc += top * (1.0 - fy) + bot * fy;
                }
                out[[ch as usize, y, x]] = (0.05 + 0.9 * acc * norm) as f32;
            }
        }
    }
    Ok(out)
}

struct SceneObject {
    shape: ShapeKind,
    /// Half extents for rects, (radius, radius) for discs.
    half: (i64, i64),
    /// Integer center per frame, (x, y).
    centers: Vec<(i64, i64)>,
    salt: u64,
}

impl SceneObject {
    fn contains(&self, frame: usize, x: i64, y: i64) -> bool {
        let (cx, cy) = self.centers[frame];
        match self.shape {
            ShapeKind::Rect => (x - cx).abs() <= self.half.0 && (y - cy).abs() <= self.half.1,
            ShapeKind::Disc => {
                let (dx, dy) = (x - cx, y - cy);
                dx * dx + dy * dy <= self.half.0 * self.half.0
            }
        }
    }
}

/// Integer positions along a trajectory with exact endpoints: frame i maps
/// to start + round(d · w(i/(N−1))), where w is identity or the square.
fn trajectory_positions(
    start: (i64, i64),
    delta: (i64, i64),
    kind: TrajectoryKind,
    n: usize,
) -> Vec<(i64, i64)> {
    (0..n)
        .map(|i| {
            let u = i as f64 / (n - 1) as f64;
            let w = match kind {
                TrajectoryKind::Linear => u,
                TrajectoryKind::Quadratic => u * u,
            };
            (
                start.0 + (delta.0 as f64 * w).round() as i64,
                start.1 + (delta.1 as f64 * w).round() as i64,
            )
        })
        .collect()
}

/// Generate one clip with ground-truth metadata.
///
/// The dominant displacement axis of each object moves by exactly
/// `round(frac · W)` pixels between the first and last frame, with `frac`
/// drawn from `cfg.velocity` and capped at `cfg.max_disp_frac`.
pub fn gen_clip(cfg: &SceneConfig, n: usize, h: usize, w: usize, seed: u64) -> Result<Clip> {
    cfg.validate()?;
    if n < 3 {
        return Err(Error::Invalid(format!("clips need at least 3 frames, got {n}")));
    }
    if h % 4 != 0 || w % 4 != 0 || h < 16 || w < 16 {
        return Err(Error::Invalid(format!(
            "frame dims must be at least 16 and divisible by 4, got {h}x{w}"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (hi, wi) = (h as i64, w as i64);

    let mut objects = Vec::with_capacity(cfg.objects);
    for k in 0..cfg.objects {
        let shape = cfg.shapes[k % cfg.shapes.len()];
        let traj = cfg.trajectories[k % cfg.trajectories.len()];
        let half = match shape {
            ShapeKind::Rect => (
                rng.random_range(wi / 10..=wi / 5),
                rng.random_range(hi / 10..=hi / 5),
            ),
            ShapeKind::Disc => {
                let r = rng.random_range(wi / 10..=wi / 6);
                (r, r)
            }
        };

        // Total displacement: full magnitude on one axis, up to half of it
        // on the other, so the max-norm displacement is exactly the draw.
        let frac = rng
            .random_range(cfg.velocity.0..=cfg.velocity.1)
            .min(cfg.max_disp_frac);
        let d_major = (frac * w as f64).round() as i64;
        let d_minor = rng.random_range(-d_major / 2..=d_major / 2);
        let sign = if rng.random_range(0..2) == 0 { 1 } else { -1 };
        let delta = if rng.random_range(0..2) == 0 {
            (sign * d_major, d_minor)
        } else {
            (d_minor, sign * d_major)
        };

        // Start anywhere that keeps the object fully inside at both ends.
        let margin_x = half.0 + 1;
        let margin_y = half.1 + 1;
        let x_lo = margin_x + (-delta.0).max(0);
        let x_hi = wi - 1 - margin_x - delta.0.max(0);
        let y_lo = margin_y + (-delta.1).max(0);
        let y_hi = hi - 1 - margin_y - delta.1.max(0);
        if x_lo > x_hi || y_lo > y_hi {
            return Err(Error::Invalid(format!(
                "frame {w}x{h} too small for object {k} with displacement {delta:?}"
            )));
        }
        let start = (rng.random_range(x_lo..=x_hi), rng.random_range(y_lo..=y_hi));
        let centers = trajectory_positions(start, delta, traj, n);
        objects.push(SceneObject { shape, half, centers, salt: k as u64 + 1 });
    }

    let layers = cfg.objects + 1;
    let depth_of = |layer: usize| layer as f32 / (layers - 1).max(1) as f32;

    let mut frames = Array4::<f32>::zeros((n, 3, h, w));
    let mut layer_depth = Array3::<f32>::zeros((n, h, w));
    for fi in 0..n {
        for y in 0..hi {
            for x in 0..wi {
                // Top-most object wins; later objects are nearer layers.
                let mut top: Option<usize> = None;
                for (k, obj) in objects.iter().enumerate() {
                    if obj.contains(fi, x, y) {
                        top = Some(k);
                    }
                }
                let (salt, tx, ty) = match top {
                    Some(k) => {
                        let obj = &objects[k];
                        let (cx, cy) = obj.centers[fi];
                        (obj.salt, x - cx, y - cy)
                    }
                    None => (0, x, y),
                };
                for ch in 0..3u64 {
                    frames[[fi, ch as usize, y as usize, x as usize]] =
                        texture_at(cfg.texture_seed, salt * 4 + ch, tx, ty) as f32;
                }
                let layer = top.map(|k| k + 1).unwrap_or(0);
                layer_depth[[fi, y as usize, x as usize]] = depth_of(layer);
            }
        }
    }

    // Analytic keyframe flow: object pixels carry the object's total
    // displacement; background pixels are static.
    let mut flow_fwd = Array3::<f32>::zeros((2, h, w));
    let mut flow_bwd = Array3::<f32>::zeros((2, h, w));
    for y in 0..hi {
        for x in 0..wi {
            let mut top_first: Option<usize> = None;
            let mut top_last: Option<usize> = None;
            for (k, obj) in objects.iter().enumerate() {
                if obj.contains(0, x, y) {
                    top_first = Some(k);
                }
                if obj.contains(n - 1, x, y) {
                    top_last = Some(k);
                }
            }
            if let Some(k) = top_first {
                let o = &objects[k];
                let d = (
                    o.centers[n - 1].0 - o.centers[0].0,
                    o.centers[n - 1].1 - o.centers[0].1,
                );
                flow_fwd[[0, y as usize, x as usize]] = d.0 as f32;
                flow_fwd[[1, y as usize, x as usize]] = d.1 as f32;
            }
            if let Some(k) = top_last {
                let o = &objects[k];
                let d = (
                    o.centers[0].0 - o.centers[n - 1].0,
                    o.centers[0].1 - o.centers[n - 1].1,
                );
                flow_bwd[[0, y as usize, x as usize]] = d.0 as f32;
                flow_bwd[[1, y as usize, x as usize]] = d.1 as f32;
            }
        }
    }

    let positions = objects.iter().map(|o| o.centers.clone()).collect();
    Ok(Clip {
        frames,
        meta: Some(ClipMeta { positions, layer_depth, flow_fwd, flow_bwd }),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_object_cfg() -> SceneConfig {
        SceneConfig {
            objects: 1,
            shapes: vec![ShapeKind::Rect],
            velocity: (0.25, 0.25),
            trajectories: vec![TrajectoryKind::Linear],
            texture_seed: 7,
            max_disp_frac: 0.25,
        }
    }

    #[test]
    fn quarter_width_displacement_is_exact() {
        let cfg = one_object_cfg();
        let clip = gen_clip(&cfg, 9, 64, 64, 3).unwrap();
        let meta = clip.meta.unwrap();
        let pos = &meta.positions[0];
        let d = (
            (pos[8].0 - pos[0].0).abs(),
            (pos[8].1 - pos[0].1).abs(),
        );
        assert_eq!(d.0.max(d.1), 16, "0.25 of width 64 is 16 px, got {d:?}");
    }

    #[test]
    fn same_seed_is_bitwise_identical() {
        let cfg = SceneConfig::default();
        let a = gen_clip(&cfg, 9, 64, 64, 11).unwrap();
        let b = gen_clip(&cfg, 9, 64, 64, 11).unwrap();
        assert_eq!(a.frames, b.frames);
        let (ma, mb) = (a.meta.unwrap(), b.meta.unwrap());
        assert_eq!(ma.layer_depth, mb.layer_depth);
        assert_eq!(ma.flow_fwd, mb.flow_fwd);
        // And a different seed differs.
        let c = gen_clip(&cfg, 9, 64, 64, 12).unwrap();
        assert_ne!(a.frames, c.frames);
    }

    #[test]
    fn frames_stay_inside_unit_range() {
        let clip = gen_clip(&SceneConfig::default(), 9, 64, 64, 5).unwrap();
        for &v in clip.frames.iter() {
            assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn two_layer_scene_has_exactly_two_depth_values() {
        let cfg = one_object_cfg();
        let clip = gen_clip(&cfg, 9, 64, 64, 3).unwrap();
        let meta = clip.meta.unwrap();
        let mut values: Vec<f32> = meta.layer_depth.iter().cloned().collect();
        values.sort_by(f32::total_cmp);
        values.dedup();
        assert_eq!(values, vec![0.0, 1.0]);
    }

    #[test]
    fn trajectory_endpoints_are_exact_for_both_kinds() {
        for kind in [TrajectoryKind::Linear, TrajectoryKind::Quadratic] {
            let pos = trajectory_positions((10, 20), (16, -8), kind, 9);
            assert_eq!(pos[0], (10, 20));
            assert_eq!(pos[8], (26, 12));
        }
        // Quadratic front-loads less motion than linear at the midpoint.
        let lin = trajectory_positions((0, 0), (16, 0), TrajectoryKind::Linear, 9);
        let quad = trajectory_positions((0, 0), (16, 0), TrajectoryKind::Quadratic, 9);
        assert!(quad[4].0 < lin[4].0);
    }

    #[test]
    fn analytic_flow_marks_object_and_background() {
        let cfg = one_object_cfg();
        let clip = gen_clip(&cfg, 9, 64, 64, 3).unwrap();
        let meta = clip.meta.unwrap();
        let pos = &meta.positions[0];
        let d = (pos[8].0 - pos[0].0, pos[8].1 - pos[0].1);
        // At the first-frame object center the flow is the full delta.
        let (cx, cy) = (pos[0].0 as usize, pos[0].1 as usize);
        assert_eq!(meta.flow_fwd[[0, cy, cx]], d.0 as f32);
        assert_eq!(meta.flow_fwd[[1, cy, cx]], d.1 as f32);
        // A corner pixel is background and static.
        assert_eq!(meta.flow_fwd[[0, 0, 0]], 0.0);
        assert_eq!(meta.flow_bwd[[0, 0, 0]], 0.0);
    }

    #[test]
    fn invalid_dims_are_rejected() {
        let cfg = SceneConfig::default();
        assert!(gen_clip(&cfg, 9, 63, 64, 0).is_err());
        assert!(gen_clip(&cfg, 2, 64, 64, 0).is_err());
        let bad = SceneConfig { max_disp_frac: 0.75, ..SceneConfig::default() };
        assert!(gen_clip(&bad, 9, 64, 64, 0).is_err());
    }
}
