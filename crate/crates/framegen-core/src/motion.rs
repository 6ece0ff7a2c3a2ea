//! Toy stand-ins for the pre-trained flow/depth extractors: multi-scale
//! block-matching bidirectional optical flow and a depth oracle, plus the
//! temporal-branch input stack.

use ndarray::{Array2, Array3, Array4, ArrayView2, ArrayView3};

use crate::error::{Error, Result};

/// Channel count of the temporal-branch input stack.
pub const STACK_CHANNELS: usize = 7;

/// Block-matching configuration.
#[derive(Clone, Copy, Debug)]
pub struct FlowConfig {
    /// Matching block edge in pixels.
    pub block: usize,
    /// Pyramid levels (level 0 is full resolution).
    pub levels: usize,
    /// Search radius at the coarsest level, in coarsest-level pixels.
    pub coarse_radius: i64,
    /// Refinement radius at each finer level.
    pub refine_radius: i64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        FlowConfig { block: 8, levels: 3, coarse_radius: 8, refine_radius: 2 }
    }
}

impl FlowConfig {
    /// Hard cap on either flow component: the coarse search radius scaled
    /// to full resolution. Refinement corrects coarse rounding inside this
    /// cap rather than extending it.
    pub fn max_displacement(&self) -> i64 {
        self.coarse_radius << (self.levels - 1)
    }
}

fn to_gray(frame: &ArrayView3<f32>) -> Array2<f64> {
    let (c, h, w) = (frame.shape()[0], frame.shape()[1], frame.shape()[2]);
    Array2::from_shape_fn((h, w), |(y, x)| {
        let mut acc = 0.0f64;
        for ch in 0..c {
            acc += frame[[ch, y, x]] as f64;
        }
        acc / c as f64
    })
}

/// 2x2 average downsample; odd trailing row/column is dropped.
fn downsample(img: &Array2<f64>) -> Array2<f64> {
    let (h, w) = (img.shape()[0] / 2, img.shape()[1] / 2);
    Array2::from_shape_fn((h, w), |(y, x)| {
        (img[[2 * y, 2 * x]]
            + img[[2 * y, 2 * x + 1]]
            + img[[2 * y + 1, 2 * x]]
            + img[[2 * y + 1, 2 * x + 1]])
            / 4.0
    })
}

fn sad(
    a: &Array2<f64>,
    b: &Array2<f64>,
    y0: usize,
    x0: usize,
    block: usize,
    dy: i64,
    dx: i64,
) -> Option<f64> {
    let (h, w) = (b.shape()[0] as i64, b.shape()[1] as i64);
    let ty = y0 as i64 + dy;
    let tx = x0 as i64 + dx;
    if ty < 0 || tx < 0 || ty + block as i64 > h || tx + block as i64 > w {
        return None;
    }
    let mut acc = 0.0;
    for i in 0..block {
        for j in 0..block {
            acc += (a[[y0 + i, x0 + j]] - b[[(ty as usize) + i, (tx as usize) + j]]).abs();
        }
    }
    Some(acc)
}

/// Candidate ordering: lowest SAD, then smallest squared displacement,
/// then lexicographic (dy, dx). Total and deterministic.
fn better(cand: (f64, i64, i64), best: (f64, i64, i64)) -> bool {
    let key = |(s, dy, dx): (f64, i64, i64)| (s, dy * dy + dx * dx, dy, dx);
    let (ks, kb) = (key(cand), key(best));
    (ks.0, ks.1, ks.2, ks.3) < (kb.0, kb.1, kb.2, kb.3)
}

/// Per-block flow at one pyramid level. `guess` holds the upsampled flow
/// from the coarser level, (dy, dx) per block, or zeros at the coarsest.
/// Candidates beyond `cap` (this level's share of the displacement cap)
/// are skipped, so refinement corrects coarse rounding without extending
/// the search bound.
fn match_level(
    a: &Array2<f64>,
    b: &Array2<f64>,
    block: usize,
    radius: i64,
    cap: i64,
    guess: &dyn Fn(usize, usize) -> (i64, i64),
) -> Array3<i64> {
    let (h, w) = (a.shape()[0], a.shape()[1]);
    let (by, bx) = (h / block, w / block);
    let mut flow = Array3::<i64>::zeros((2, by, bx));
    for gy in 0..by {
        for gx in 0..bx {
            let (y0, x0) = (gy * block, gx * block);
            let (gy0, gx0) = guess(gy, gx);
            // (0,0) is always in range, so a best candidate always exists.
            let mut best = (sad(a, b, y0, x0, block, 0, 0).expect("zero shift in range"), 0i64, 0i64);
            for ddy in -radius..=radius {
                for ddx in -radius..=radius {
                    let (dy, dx) = (gy0 + ddy, gx0 + ddx);
                    if dy.abs() > cap || dx.abs() > cap {
                        continue;
                    }
                    if let Some(s) = sad(a, b, y0, x0, block, dy, dx) {
                        if better((s, dy, dx), best) {
                            best = (s, dy, dx);
                        }
                    }
                }
            }
            flow[[0, gy, gx]] = best.1;
            flow[[1, gy, gx]] = best.2;
        }
    }
    flow
}

/// Multi-scale block-matching flow from `a` to `b`.
///
/// Returns `[2, H, W]` with channel 0 = dx, channel 1 = dy, in pixels;
/// every pixel carries its block's displacement.
pub fn estimate_flow(
    a: &ArrayView3<f32>,
    b: &ArrayView3<f32>,
    cfg: &FlowConfig,
) -> Result<Array3<f32>> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            "estimate_flow",
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    let (h, w) = (a.shape()[1], a.shape()[2]);
    if h < cfg.block || w < cfg.block {
        return Err(Error::Invalid(format!(
            "frames {h}x{w} smaller than one {}x{} block",
            cfg.block, cfg.block
        )));
    }
    if cfg.levels == 0 || cfg.block < 2 {
        return Err(Error::Invalid("flow config needs levels >= 1 and block >= 2".into()));
    }

    // Build the grayscale pyramid, keeping only levels that still fit a block.
    let mut pyr = vec![to_gray(a)];
    let mut pyr_b = vec![to_gray(b)];
    for _ in 1..cfg.levels {
        let next = downsample(pyr.last().unwrap());
        if next.shape()[0] < cfg.block || next.shape()[1] < cfg.block {
            break;
        }
        pyr_b.push(downsample(pyr_b.last().unwrap()));
        pyr.push(next);
    }

    // Coarse-to-fine matching. Each level's cap is the full-resolution
    // displacement bound scaled to that level.
    let coarsest = pyr.len() - 1;
    let bound = cfg.coarse_radius << coarsest;
    let mut flow = match_level(
        &pyr[coarsest],
        &pyr_b[coarsest],
        cfg.block,
        cfg.coarse_radius,
        cfg.coarse_radius,
        &|_, _| (0, 0),
    );
    for level in (0..coarsest).rev() {
        let prev = flow;
        let (pby, pbx) = (prev.shape()[1] as i64, prev.shape()[2] as i64);
        let block = cfg.block;
        let guess = move |gy: usize, gx: usize| -> (i64, i64) {
            // Map this block's center into the coarser block grid.
            let cy = (gy * block + block / 2) as i64 / 2;
            let cx = (gx * block + block / 2) as i64 / 2;
            let py = (cy / block as i64).clamp(0, pby - 1);
            let px = (cx / block as i64).clamp(0, pbx - 1);
            (2 * prev[[0, py as usize, px as usize]], 2 * prev[[1, py as usize, px as usize]])
        };
        flow = match_level(
            &pyr[level],
            &pyr_b[level],
            block,
            cfg.refine_radius,
            bound >> level,
            &guess,
        );
    }

    // Expand block flow to a per-pixel field; edge remainders take the
    // nearest block.
    let (by, bx) = (flow.shape()[1], flow.shape()[2]);
    let mut out = Array3::<f32>::zeros((2, h, w));
    for y in 0..h {
        for x in 0..w {
            let gy = (y / cfg.block).min(by - 1);
            let gx = (x / cfg.block).min(bx - 1);
            out[[0, y, x]] = flow[[1, gy, gx]] as f32; // dx
            out[[1, y, x]] = flow[[0, gy, gx]] as f32; // dy
        }
    }
    Ok(out)
}

/// Forward and backward flow between the two keyframes.
pub fn bidirectional_flow(
    first: &ArrayView3<f32>,
    last: &ArrayView3<f32>,
    cfg: &FlowConfig,
) -> Result<(Array3<f32>, Array3<f32>)> {
    let fwd = estimate_flow(first, last, cfg)?;
    let bwd = estimate_flow(last, first, cfg)?;
    Ok((fwd, bwd))
}

/// Depth for one frame, `[1, H, W]` in [0,1], near = 1.
///
/// With generator metadata this is the exact normalized layer-index map.
/// Without it, the fallback is min-max normalized grayscale brightness, a
/// documented stand-in (brighter = nearer); a constant frame maps to 0.5.
pub fn depth_map(frame: &ArrayView3<f32>, meta: Option<&ArrayView2<f32>>) -> Array3<f32> {
    let (h, w) = (frame.shape()[1], frame.shape()[2]);
    if let Some(layers) = meta {
        let mut out = Array3::<f32>::zeros((1, h, w));
        out.index_axis_mut(ndarray::Axis(0), 0).assign(layers);
        return out;
    }
    let gray = to_gray(frame);
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in gray.iter() {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if hi - lo < 1e-12 {
        return Array3::from_elem((1, h, w), 0.5);
    }
    Array3::from_shape_fn((1, h, w), |(_, y, x)| ((gray[[y, x]] - lo) / (hi - lo)) as f32)
}

/// Assemble the temporal-branch input: `[N, 7, H, W]` with channels
/// (fwd dx, fwd dy, bwd dx, bwd dy, depth of I_1, depth of I_N, time),
/// flow normalized by frame width and the time channel i/(N−1). The
/// keyframe-derived fields are tiled across all N frames; only the time
/// channel distinguishes them.
pub fn build_temporal_stack(
    fwd: &Array3<f32>,
    bwd: &Array3<f32>,
    depth_first: &Array3<f32>,
    depth_last: &Array3<f32>,
    n: usize,
) -> Result<Array4<f32>> {
    if n < 3 {
        return Err(Error::Invalid(format!("temporal stack needs N >= 3, got {n}")));
    }
    let (h, w) = (fwd.shape()[1], fwd.shape()[2]);
    for (name, t, c) in [
        ("forward flow", fwd, 2usize),
        ("backward flow", bwd, 2),
        ("first depth", depth_first, 1),
        ("last depth", depth_last, 1),
    ] {
        if t.shape() != [c, h, w] {
            return Err(Error::shape(
                "build_temporal_stack",
                format!("{name}: {:?} vs [{c}, {h}, {w}]", t.shape()),
            ));
        }
    }
    let inv_w = 1.0 / w as f32;
    let mut out = Array4::<f32>::zeros((n, STACK_CHANNELS, h, w));
    for i in 0..n {
        let t = i as f32 / (n - 1) as f32;
        for y in 0..h {
            for x in 0..w {
                out[[i, 0, y, x]] = fwd[[0, y, x]] * inv_w;
                out[[i, 1, y, x]] = fwd[[1, y, x]] * inv_w;
                out[[i, 2, y, x]] = bwd[[0, y, x]] * inv_w;
                out[[i, 3, y, x]] = bwd[[1, y, x]] * inv_w;
                out[[i, 4, y, x]] = depth_first[[0, y, x]];
                out[[i, 5, y, x]] = depth_last[[0, y, x]];
                out[[i, 6, y, x]] = t;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    /// Broadband periodic texture: coarse octave for pyramid levels, fine
    /// octave for exact matches. Tiles exactly, so integer rolls are
    /// lossless.
    fn noise_frame(seed: u64, h: usize, w: usize) -> Array3<f32> {
        crate::data::periodic_texture(seed, h, w, &[16, 4]).unwrap()
    }

    /// Translate with wraparound: out[y][x] = src[y-dy][x-dx].
    fn roll(src: &Array3<f32>, dx: i64, dy: i64) -> Array3<f32> {
        let (c, h, w) = (src.shape()[0], src.shape()[1], src.shape()[2]);
        Array3::from_shape_fn((c, h, w), |(ch, y, x)| {
            let sy = (y as i64 - dy).rem_euclid(h as i64) as usize;
            let sx = (x as i64 - dx).rem_euclid(w as i64) as usize;
            src[[ch, sy, sx]]
        })
    }

    fn median_flow(flow: &Array3<f32>) -> (f32, f32) {
        let comp = |ch: usize| {
            let mut v: Vec<f32> = flow.index_axis(ndarray::Axis(0), ch).iter().cloned().collect();
            v.sort_by(f32::total_cmp);
            v[v.len() / 2]
        };
        (comp(0), comp(1))
    }

    #[test]
    fn identity_gives_zero_flow() {
        let a = noise_frame(1, 32, 32);
        let flow = estimate_flow(&a.view(), &a.view(), &FlowConfig::default()).unwrap();
        assert!(flow.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn textureless_frames_give_zero_flow_via_tie_break() {
        let a = Array3::<f32>::from_elem((3, 32, 32), 0.4);
        let flow = estimate_flow(&a.view(), &a.view(), &FlowConfig::default()).unwrap();
        assert!(flow.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn wraparound_translation_is_recovered_exactly_at_the_median() {
        let a = noise_frame(2, 64, 64);
        let b = roll(&a, 3, -2);
        let flow = estimate_flow(&a.view(), &b.view(), &FlowConfig::default()).unwrap();
        assert_eq!(median_flow(&flow), (3.0, -2.0));
    }

    #[test]
    fn large_translations_are_recovered_up_to_the_search_bound() {
        // Larger frames so interior blocks (whose true match stays inside
        // the frame) dominate the median even at big displacements.
        let a = noise_frame(9, 128, 128);
        let cfg = FlowConfig::default();
        for &(dx, dy) in &[(16i64, -12i64), (30, 25), (-32, 2), (32, -32)] {
            let b = roll(&a, dx, dy);
            let flow = estimate_flow(&a.view(), &b.view(), &cfg).unwrap();
            assert_eq!(
                median_flow(&flow),
                (dx as f32, dy as f32),
                "displacement ({dx},{dy})"
            );
        }
    }

    #[test]
    fn swapping_arguments_flips_the_sign() {
        let a = noise_frame(3, 64, 64);
        let b = roll(&a, -5, 4);
        let cfg = FlowConfig::default();
        let (fwd, bwd) = bidirectional_flow(&a.view(), &b.view(), &cfg).unwrap();
        let mf = median_flow(&fwd);
        let mb = median_flow(&bwd);
        assert_eq!(mf, (-5.0, 4.0));
        assert_eq!(mb, (5.0, -4.0));
    }

    #[test]
    fn displacement_stays_within_the_configured_bound() {
        let cfg = FlowConfig::default();
        assert_eq!(cfg.max_displacement(), 32);
        let a = noise_frame(4, 64, 64);
        let b = noise_frame(5, 64, 64); // unrelated frames: worst case
        let flow = estimate_flow(&a.view(), &b.view(), &cfg).unwrap();
        for &v in flow.iter() {
            assert!(v.abs() <= cfg.max_displacement() as f32);
        }
    }

    #[test]
    fn undersized_frames_are_rejected() {
        let a = Array3::<f32>::from_elem((3, 4, 4), 0.5);
        assert!(estimate_flow(&a.view(), &a.view(), &FlowConfig::default()).is_err());
    }

    #[test]
    fn depth_passes_metadata_through_and_normalizes_fallback() {
        // Metadata passthrough.
        let frame = noise_frame(7, 16, 16);
        let layers = ndarray::Array2::from_shape_fn((16, 16), |(y, _)| if y < 8 { 0.0 } else { 1.0 });
        let d = depth_map(&frame.view(), Some(&layers.view()));
        assert_eq!(d.shape(), [1, 16, 16]);
        assert_eq!(d[[0, 0, 0]], 0.0);
        assert_eq!(d[[0, 15, 0]], 1.0);

        // Constant frame -> constant 0.5.
        let flat = Array3::<f32>::from_elem((3, 16, 16), 0.7);
        let d = depth_map(&flat.view(), None);
        assert!(d.iter().all(|&v| v == 0.5));

        // Horizontal ramp -> normalized ramp.
        let ramp = Array3::from_shape_fn((3, 16, 16), |(_, _, x)| 0.2 + 0.5 * x as f32 / 15.0);
        let d = depth_map(&ramp.view(), None);
        for x in 0..16 {
            let want = x as f64 / 15.0;
            assert!((d[[0, 8, x]] as f64 - want).abs() < 1e-6);
        }
    }

    #[test]
    fn temporal_stack_layout_is_frozen() {
        let (h, w) = (16usize, 16usize);
        let fwd = Array3::from_shape_fn((2, h, w), |(c, y, x)| (c * 100 + y * 10 + x) as f32);
        let bwd = fwd.mapv(|v| -v);
        let d1 = Array3::from_elem((1, h, w), 0.25f32);
        let dn = Array3::from_elem((1, h, w), 0.75f32);
        let stack = build_temporal_stack(&fwd, &bwd, &d1, &dn, 9).unwrap();
        assert_eq!(stack.shape(), [9, 7, h, w]);

        // Time channel: {0, 1/8, ..., 1}, constant per frame, increasing.
        for i in 0..9 {
            let want = i as f32 / 8.0;
            let tc = stack.index_axis(ndarray::Axis(0), i);
            for y in 0..h {
                for x in 0..w {
                    assert_eq!(tc[[6, y, x]], want);
                }
            }
        }

        // Pack/unpack identity: flow channels are the inputs divided by
        // width, depth channels bit-exact.
        for y in 0..h {
            for x in 0..w {
                assert_eq!(stack[[4, 0, y, x]], fwd[[0, y, x]] / w as f32);
                assert_eq!(stack[[4, 1, y, x]], fwd[[1, y, x]] / w as f32);
                assert_eq!(stack[[4, 2, y, x]], bwd[[0, y, x]] / w as f32);
                assert_eq!(stack[[4, 3, y, x]], bwd[[1, y, x]] / w as f32);
                assert_eq!(stack[[4, 4, y, x]], 0.25);
                assert_eq!(stack[[4, 5, y, x]], 0.75);
            }
        }

        // Zero fields leave only the time channel nonzero.
        let z2 = Array3::<f32>::zeros((2, h, w));
        let z1 = Array3::<f32>::zeros((1, h, w));
        let stack = build_temporal_stack(&z2, &z2, &z1, &z1, 9).unwrap();
        for i in 0..9 {
            for c in 0..6 {
                assert!(stack.index_axis(ndarray::Axis(0), i).index_axis(ndarray::Axis(0), c).iter().all(|&v| v == 0.0));
            }
        }

        assert!(build_temporal_stack(&z2, &z2, &z1, &z1, 2).is_err());
    }

    #[test]
    fn generated_clips_keep_static_background_at_zero_flow() {
        // Cross-module check on generator keyframes: blocks far from any
        // moving object match the textured background at zero displacement,
        // and everything stays within the search bound. (Small fast objects
        // are below what coarse-to-fine matching can lock onto, so object
        // pixels are not asserted here.)
        let cfg = crate::data::SceneConfig::default();
        let flow_cfg = FlowConfig::default();
        let bound = flow_cfg.max_displacement() as f32;
        for seed in 0..4u64 {
            let clip = crate::data::gen_clip(&cfg, 9, 64, 64, seed).unwrap();
            let meta = clip.meta.as_ref().unwrap();
            let (first, last) = clip.keyframes();
            let est = estimate_flow(&first.view(), &last.view(), &flow_cfg).unwrap();
            let (h, w) = (first.shape()[1], first.shape()[2]);

            // Median agreement with the analytic flow within 1 px: the
            // static background dominates both fields.
            let me = median_flow(&est);
            let mt = median_flow(&meta.flow_fwd);
            assert!((me.0 - mt.0).abs() <= 1.0 && (me.1 - mt.1).abs() <= 1.0);

            let block = flow_cfg.block;
            let mut checked = 0;
            for gy in 0..h / block {
                for gx in 0..w / block {
                    // A block is background if the truth flow vanishes on it
                    // in both directions (object never touches it).
                    let mut is_bg = true;
                    for y in gy * block..(gy + 1) * block {
                        for x in gx * block..(gx + 1) * block {
                            for c in 0..2 {
                                if meta.flow_fwd[[c, y, x]] != 0.0 || meta.flow_bwd[[c, y, x]] != 0.0 {
                                    is_bg = false;
                                }
                            }
                        }
                    }
                    if is_bg {
                        checked += 1;
                        let (y, x) = (gy * block, gx * block);
                        assert_eq!(
                            (est[[0, y, x]], est[[1, y, x]]),
                            (0.0, 0.0),
                            "seed {seed}: background block ({gy},{gx}) moved"
                        );
                    }
                }
            }
            assert!(checked > 16, "seed {seed}: too few background blocks ({checked})");
            for &v in est.iter() {
                assert!(v.abs() <= bound);
            }
        }
    }
}
