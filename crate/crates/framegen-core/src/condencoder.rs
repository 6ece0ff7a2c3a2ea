//! The conditional encoder: a spatial branch (zero-frame insertion, frozen
//! latent encoding, binary keyframe mask), a temporal branch (conv stack
//! over the motion summary), attention fusion of the two, a replica of the
//! denoiser's down path with leading cross-frame attention sublayers, and
//! zero-initialized 1x1 injection into the base stages.

use ndarray::{concatenate, ArrayD, Axis, IxDyn};
use rand::Rng;

use crate::denoiser::{Denoiser, DenoiserConfig, EncoderPath};
use crate::error::{Error, Result};
use crate::fusion::Fusion;
use crate::latent::Autoencoder;
use crate::nn::{Conv2d, Dense, ParamStore};
use crate::real::Real;
use crate::tape::{Graph, Var};

/// Sizes of the condition branches. Everything the replica shares with the
/// base denoiser comes from [`DenoiserConfig`] instead.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CondEncoderConfig {
    /// Channel count of the motion summary consumed by the temporal branch.
    pub stack_channels: usize,
    /// Output width of the temporal branch.
    pub temporal_channels: usize,
    /// CBAM reduction for the spatial branch (latent_channels + 1 wide).
    pub r_spatial: usize,
    /// CBAM reduction for the temporal branch.
    pub r_temporal: usize,
    pub fusion_heads: usize,
    pub fusion_d_k: usize,
    /// Ablation switch: when false the temporal branch and fusion are
    /// skipped at forward time (their parameters exist but sit outside the
    /// graph) and the spatial bundle feeds the encoder directly.
    pub temporal: bool,
    /// Ablation switch: when false the replica is built without cross-frame
    /// attention sublayers (those parameters do not exist).
    pub xframe: bool,
}

impl Default for CondEncoderConfig {
    fn default() -> Self {
        CondEncoderConfig {
            stack_channels: 7,
            temporal_channels: 16,
            r_spatial: 1,
            r_temporal: 4,
            fusion_heads: 1,
            fusion_d_k: 8,
            temporal: true,
            xframe: true,
        }
    }
}

/// Insert zero images between the two keyframes, encode all N frames with
/// the frozen latent encoder, and attach the binary keyframe mask as an
/// extra channel.
///
/// Returns `(spatial_latents: [N, latent_channels+1, h, w], mask: [N,1,h,w])`;
/// the mask is 1 exactly at frames 0 and N-1 and is also the last channel
/// of the latent tensor.
pub fn build_spatial_condition<T: Real>(
    ae: &Autoencoder,
    ps: &ParamStore<T>,
    first: &ArrayD<T>,
    last: &ArrayD<T>,
    n: usize,
) -> Result<(ArrayD<T>, ArrayD<T>)> {
    if n < 3 {
        return Err(Error::Invalid(format!(
            "zero-frame insertion needs n >= 3 frames, got {n}"
        )));
    }
    if first.ndim() != 3 || first.shape()[0] != 3 {
        return Err(Error::shape(
            "build_spatial_condition",
            format!("keyframe {:?} vs expected [3,H,W]", first.shape()),
        ));
    }
    if first.shape() != last.shape() {
        return Err(Error::shape(
            "build_spatial_condition",
            format!("keyframes differ: {:?} vs {:?}", first.shape(), last.shape()),
        ));
    }
    let (fh, fw) = (first.shape()[1], first.shape()[2]);
    let mut batch = ArrayD::<T>::zeros(IxDyn(&[n, 3, fh, fw]));
    batch.index_axis_mut(Axis(0), 0).assign(first);
    batch.index_axis_mut(Axis(0), n - 1).assign(last);
    let latents = ae.encode_detached(ps, &batch)?;
    let (h, w) = (latents.shape()[2], latents.shape()[3]);
    let mut mask = ArrayD::<T>::zeros(IxDyn(&[n, 1, h, w]));
    mask.index_axis_mut(Axis(0), 0).fill(T::one());
    mask.index_axis_mut(Axis(0), n - 1).fill(T::one());
    let out = concatenate(Axis(1), &[latents.view(), mask.view()])
        .expect("latents and mask share every non-channel dim");
    Ok((out, mask))
}

/// Three-conv stack taking the motion summary from frame resolution down
/// to the latent grid (two stride-2 layers, one stride-1).
#[derive(Clone, Debug)]
pub struct TemporalBranch {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    c1: Conv2d,
    c2: Conv2d,
    c3: Conv2d,
}

impl TemporalBranch {
    pub fn new(name: impl Into<String>, in_channels: usize, out_channels: usize) -> Result<Self> {
        if in_channels == 0 || out_channels == 0 {
            return Err(Error::Config(
                "temporal branch needs in_channels and out_channels >= 1".into(),
            ));
        }
        let name = name.into();
        Ok(TemporalBranch {
            c1: Conv2d::new(format!("{name}.c1"), in_channels, out_channels, 3, 2, 1),
            c2: Conv2d::new(format!("{name}.c2"), out_channels, out_channels, 3, 2, 1),
            c3: Conv2d::new(format!("{name}.c3"), out_channels, out_channels, 3, 1, 1),
            name,
            in_channels,
            out_channels,
        })
    }

    pub fn init<T: Real, R: Rng>(&self, ps: &mut ParamStore<T>, rng: &mut R) {
        self.c1.init(ps, rng);
        self.c2.init(ps, rng);
        self.c3.init(ps, rng);
    }

    /// `[N, in_channels, H, W]` with H, W divisible by 4 down to
    /// `[N, out_channels, H/4, W/4]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, stack: Var) -> Result<Var> {
        let shape = g.value(stack).shape().to_vec();
        if shape.len() != 4 || shape[1] != self.in_channels {
            return Err(Error::shape(
                "temporal_branch",
                format!("{shape:?} vs expected [N,{},H,W]", self.in_channels),
            ));
        }
        if shape[2] % 4 != 0 || shape[3] % 4 != 0 || shape[2] < 4 || shape[3] < 4 {
            return Err(Error::Invalid(format!(
                "temporal stack dims {}x{} must be positive multiples of 4",
                shape[2], shape[3]
            )));
        }
        let x = self.c1.forward(g, ps, stack)?;
        let x = g.silu(x);
        let x = self.c2.forward(g, ps, x)?;
        let x = g.silu(x);
        self.c3.forward(g, ps, x)
    }
}

/// Raw per-stage outputs of the replicated down path, before the zero
/// convs project them onto the base stages.
#[derive(Clone, Copy, Debug)]
pub struct ConditionFeatures {
    pub s1: Var,
    pub s2: Var,
    pub mid: Var,
}

/// The conditional encoder. Parameter layout:
/// `{name}.enc.*` replica of the base encoder (stage weights bitwise-copied
/// at init, stem re-drawn for the wider input, cross-frame sublayers fresh
/// with zero output projections), `{name}.tmp.*` temporal branch,
/// `{name}.ctx.*` keyframe context MLP, `{name}.fuse.*` branch fusion, and
/// `{name}.inj.*` zero 1x1 injection convs.
#[derive(Clone, Debug)]
pub struct CondEncoder {
    pub name: String,
    pub den_cfg: DenoiserConfig,
    pub cfg: CondEncoderConfig,
    pub tmp: TemporalBranch,
    ctx1: Dense,
    ctx2: Dense,
    fusion: Fusion,
    pub(crate) enc: EncoderPath,
    inj: [Conv2d; 3],
}

impl CondEncoder {
    pub fn new(name: impl Into<String>, base: &Denoiser, cfg: CondEncoderConfig) -> Result<Self> {
        let name = name.into();
        let den_cfg = base.cfg.clone();
        if cfg.stack_channels == 0 {
            return Err(Error::Config("stack_channels must be >= 1".into()));
        }
        let cs = den_cfg.latent_channels + 1;
        let [w1, w2] = den_cfg.widths;
        Ok(CondEncoder {
            tmp: TemporalBranch::new(format!("{name}.tmp"), cfg.stack_channels, cfg.temporal_channels)?,
            ctx1: Dense::new(format!("{name}.ctx.l1"), 2 * den_cfg.latent_channels, den_cfg.ctx_dim),
            ctx2: Dense::new(format!("{name}.ctx.l2"), den_cfg.ctx_dim, den_cfg.ctx_dim),
            fusion: Fusion::new(
                format!("{name}.fuse"),
                cs,
                cfg.temporal_channels,
                cfg.r_spatial,
                cfg.r_temporal,
                cfg.fusion_heads,
                cfg.fusion_d_k,
            )?,
            enc: EncoderPath::new(&format!("{name}.enc"), cs, cfg.xframe, &den_cfg)?,
            inj: [
                Conv2d::zero(format!("{name}.inj.s1"), w1, w1),
                Conv2d::zero(format!("{name}.inj.s2"), w2, w2),
                Conv2d::zero(format!("{name}.inj.mid"), w2, w2),
            ],
            name,
            den_cfg,
            cfg,
        })
    }

    /// Initialize against an already-initialized base denoiser: stage
    /// weights are copied bit for bit, the stem is re-drawn for the wider
    /// fused input, cross-frame sublayers and branch parameters are fresh,
    /// and all injection convs start at exactly zero.
    pub fn init<T: Real, R: Rng>(
        &self,
        ps: &mut ParamStore<T>,
        rng: &mut R,
        base: &Denoiser,
    ) -> Result<()> {
        if base.cfg != self.den_cfg {
            return Err(Error::Config(
                "conditional encoder was built against a different base config".into(),
            ));
        }
        ps.copy_prefixed(&base.enc.prefix, &self.enc.prefix);
        self.enc.reinit_stem(ps, rng);
        self.enc.init_xframe_only(ps, rng);
        self.tmp.init(ps, rng);
        self.ctx1.init(ps, rng);
        self.ctx2.init(ps, rng);
        self.fusion.init(ps, rng);
        for c in &self.inj {
            c.init(ps, rng);
        }
        Ok(())
    }

    /// Single-token context summarizing the two keyframes: their latents
    /// are mean-pooled, concatenated, and passed through a 2-layer MLP.
    /// Takes the spatial condition tensor so the context provably derives
    /// from the same keyframe-only inputs.
    pub fn keyframe_context<T: Real>(
        &self,
        g: &mut Graph<T>,
        ps: &ParamStore<T>,
        spatial_latents: Var,
    ) -> Result<Var> {
        let shape = g.value(spatial_latents).shape().to_vec();
        let c = self.den_cfg.latent_channels;
        if shape.len() != 4 || shape[1] != c + 1 {
            return Err(Error::shape(
                "keyframe_context",
                format!("{shape:?} vs expected [N,{},h,w]", c + 1),
            ));
        }
        let n = shape[0];
        if n < 2 {
            return Err(Error::Invalid(format!(
                "keyframe context needs n >= 2 frames, got {n}"
            )));
        }
        let first = g.slice_axis(spatial_latents, 0, 0, 1)?;
        let last = g.slice_axis(spatial_latents, 0, n - 1, 1)?;
        let first = g.slice_axis(first, 1, 0, c)?;
        let last = g.slice_axis(last, 1, 0, c)?;
        let a = g.spatial_mean(first)?;
        let b = g.spatial_mean(last)?;
        let cat = g.concat(&[a, b], 1)?;
        let h = self.ctx1.forward(g, ps, cat)?;
        let h = g.silu(h);
        let h = self.ctx2.forward(g, ps, h)?;
        g.reshape(h, &[self.den_cfg.ctx_dim])
    }

    /// Run both branches, fuse them, and push the result through the
    /// replicated down path. Never sees the noised latent: its inputs are
    /// the keyframe-derived condition tensors and the shared timestep
    /// embedding.
    pub fn encode_condition<T: Real>(
        &self,
        g: &mut Graph<T>,
        ps: &ParamStore<T>,
        spatial_latents: Var,
        temporal_stack: Var,
        temb: Var,
        context: Var,
    ) -> Result<ConditionFeatures> {
        let ls = g.value(spatial_latents).shape().to_vec();
        let c = self.den_cfg.latent_channels;
        if ls.len() != 4 || ls[1] != c + 1 {
            return Err(Error::shape(
                "encode_condition",
                format!("spatial latents {ls:?} vs expected [N,{},h,w]", c + 1),
            ));
        }
        let (n, h, w) = (ls[0], ls[2], ls[3]);
        if n < 2 {
            return Err(Error::Invalid(format!(
                "cross-frame attention needs n >= 2 frames, got {n}"
            )));
        }
        let fused = if self.cfg.temporal {
            let ts = g.value(temporal_stack).shape().to_vec();
            if ts.len() != 4 || ts[0] != n || ts[2] != 4 * h || ts[3] != 4 * w {
                return Err(Error::shape(
                    "encode_condition",
                    format!(
                        "temporal stack {ts:?} vs expected [{n},{},{},{}] for the {h}x{w} latent grid",
                        self.cfg.stack_channels,
                        4 * h,
                        4 * w
                    ),
                ));
            }
            let f_t = self.tmp.forward(g, ps, temporal_stack)?;
            self.fusion.forward(g, ps, spatial_latents, f_t)?
        } else {
            spatial_latents
        };
        let ctx_row = g.reshape(context, &[1, self.den_cfg.ctx_dim])?;
        let ctx_tok = g.stack_n(ctx_row, n)?;
        let (s1, s2, mid) = self.enc.forward(g, ps, fused, temb, ctx_tok, None)?;
        Ok(ConditionFeatures { s1, s2, mid })
    }

    /// Project the replica's stage outputs through the zero convs; these
    /// deltas are what the base denoiser adds at its stage outputs.
    pub fn stage_deltas<T: Real>(
        &self,
        g: &mut Graph<T>,
        ps: &ParamStore<T>,
        feats: &ConditionFeatures,
    ) -> Result<[Var; 3]> {
        Ok([
            self.inj[0].forward(g, ps, feats.s1)?,
            self.inj[1].forward(g, ps, feats.s2)?,
            self.inj[2].forward(g, ps, feats.mid)?,
        ])
    }

    /// Combine base stage features with the zero-conv projection of the
    /// condition features: `base + zero_conv(condition)` per stage.
    pub fn zero_inject<T: Real>(
        &self,
        g: &mut Graph<T>,
        ps: &ParamStore<T>,
        base: &[Var; 3],
        feats: &ConditionFeatures,
    ) -> Result<[Var; 3]> {
        let deltas = self.stage_deltas(g, ps, feats)?;
        let mut out = deltas;
        for ((i, b), d) in base.iter().enumerate().zip(deltas) {
            let bs = g.value(*b).shape().to_vec();
            let ds = g.value(d).shape().to_vec();
            if bs != ds {
                return Err(Error::shape(
                    "zero_inject",
                    format!("stage {i}: base {bs:?} vs condition {ds:?}"),
                ));
            }
            out[i] = g.add(*b, d)?;
        }
        Ok(out)
    }
}
