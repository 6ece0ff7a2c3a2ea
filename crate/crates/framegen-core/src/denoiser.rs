//! The base v-prediction U-Net over latent video `[N, C, h, w]`: two
//! resolution levels with per-stage conv blocks, spatial and temporal
//! transformers, a sinusoidal timestep embedding, and additive condition
//! injection points at every encoder stage.

use ndarray::{ArrayD, IxDyn};
use rand::Rng;

use crate::attention::{map_to_tokens, tokens_to_map, Attention};
use crate::error::{Error, Result};
use crate::nn::{zeros, Conv2d, Dense, GroupNorm, LayerNorm, ParamStore};
use crate::real::Real;
use crate::tape::{Graph, Var};

/// Dimensions shared by the base denoiser and the conditional encoder's
/// replicated down path.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DenoiserConfig {
    pub latent_channels: usize,
    /// Channel widths of the two resolution levels.
    pub widths: [usize; 2],
    /// Group count for all group norms; must divide both widths.
    pub groups: usize,
    pub heads: usize,
    /// Sinusoidal timestep feature width (even).
    pub temb_dim: usize,
    /// Width of the context vector consumed by per-stage cross-attention.
    pub ctx_dim: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            latent_channels: 4,
            widths: [32, 64],
            groups: 8,
            heads: 2,
            temb_dim: 64,
            ctx_dim: 64,
        }
    }
}

impl DenoiserConfig {
    /// Smallest configuration that still exercises every block kind; used
    /// for finite-difference checks where evaluation count scales with the
    /// parameter count.
    pub fn tiny() -> Self {
        DenoiserConfig {
            latent_channels: 2,
            widths: [3, 4],
            groups: 1,
            heads: 1,
            temb_dim: 4,
            ctx_dim: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_channels == 0 {
            return Err(Error::Config("latent_channels must be >= 1".into()));
        }
        for w in self.widths {
            if w == 0 {
                return Err(Error::Config("stage widths must be >= 1".into()));
            }
            if self.heads == 0 || w % self.heads != 0 {
                return Err(Error::Config(format!(
                    "stage width {w} must be a positive multiple of heads={}",
                    self.heads
                )));
            }
            if self.groups == 0 || w % self.groups != 0 {
                return Err(Error::Config(format!(
                    "stage width {w} must be a positive multiple of groups={}",
                    self.groups
                )));
            }
        }
        if self.temb_dim < 2 || self.temb_dim % 2 != 0 {
            return Err(Error::Config(format!(
                "temb_dim must be even and >= 2, got {}",
                self.temb_dim
            )));
        }
        if self.ctx_dim == 0 {
            return Err(Error::Config("ctx_dim must be >= 1".into()));
        }
        Ok(())
    }
}

/// Raw sinusoidal timestep features: `sin(t*w_k)` for the first half,
/// `cos(t*w_k)` for the second, with frequencies log-spaced from 1 down
/// to 1/10000.
pub fn sinusoid_features(t: usize, t_max: usize, dim: usize) -> Result<Vec<f64>> {
    if t > t_max {
        return Err(Error::Invalid(format!(
            "timestep {t} outside the schedule range [0, {t_max}]"
        )));
    }
    if dim < 2 || dim % 2 != 0 {
        return Err(Error::Config(format!(
            "sinusoid dim must be even and >= 2, got {dim}"
        )));
    }
    let half = dim / 2;
    let freq = |k: usize| -> f64 {
        if half == 1 {
            1.0
        } else {
            (-(10000.0f64).ln() * k as f64 / (half - 1) as f64).exp()
        }
    };
    let tf = t as f64;
    let mut out = Vec::with_capacity(dim);
    for k in 0..half {
        out.push((tf * freq(k)).sin());
    }
    for k in 0..half {
        out.push((tf * freq(k)).cos());
    }
    Ok(out)
}

/// Conv block with a per-channel timestep bias between its two
/// convolutions and an additive skip (1x1-projected when widths differ).
#[derive(Clone, Debug)]
struct ResBlock {
    gn1: GroupNorm,
    c1: Conv2d,
    emb: Dense,
    gn2: GroupNorm,
    c2: Conv2d,
    skip: Option<Conv2d>,
    cout: usize,
}

impl ResBlock {
    fn new(name: &str, cin: usize, cout: usize, groups: usize, temb_dim: usize) -> Result<Self> {
        if cin % groups != 0 || cout % groups != 0 {
            return Err(Error::Config(format!(
                "res block {name}: groups={groups} must divide cin={cin} and cout={cout}"
            )));
        }
        Ok(ResBlock {
            gn1: GroupNorm::new(format!("{name}.gn1"), cin, groups),
            c1: Conv2d::new(format!("{name}.c1"), cin, cout, 3, 1, 1),
            emb: Dense::new(format!("{name}.emb"), temb_dim, cout),
            gn2: GroupNorm::new(format!("{name}.gn2"), cout, groups),
            c2: Conv2d::new(format!("{name}.c2"), cout, cout, 3, 1, 1),
            skip: (cin != cout).then(|| Conv2d::new(format!("{name}.skip"), cin, cout, 1, 1, 0)),
            cout,
        })
    }

    fn init<T: Real, R: Rng>(&self, ps: &mut ParamStore<T>, rng: &mut R) {
        self.gn1.init(ps);
        self.c1.init(ps, rng);
        self.emb.init(ps, rng);
        self.gn2.init(ps);
        self.c2.init(ps, rng);
        if let Some(s) = &self.skip {
            s.init(ps, rng);
        }
    }

    fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        ps: &ParamStore<T>,
        x: Var,
        temb: Var,
    ) -> Result<Var> {
        let h = self.gn1.forward(g, ps, x)?;
        let h = g.silu(h);
        let h = self.c1.forward(g, ps, h)?;
        let e = self.emb.forward(g, ps, temb)?;
        let e = g.reshape(e, &[self.cout])?;
        let h = g.add_chan(h, e)?;
        let h = self.gn2.forward(g, ps, h)?;
        let h = g.silu(h);
        let h = self.c2.forward(g, ps, h)?;
        let s = match &self.skip {
            Some(c) => c.forward(g, ps, x)?,
            None => x,
        };
        g.add(h, s)
    }
}

/// Whether a transformer block mixes tokens within a frame or across
/// frames at a fixed spatial location.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum BlockKind {
    Spatial,
    Temporal,
}

/// Pre-norm transformer block over `[N, T, C]` tokens. Sublayers in order:
/// optional cross-frame attention (the conditional encoder's addition,
/// output projection zero at init), self-attention, optional context
/// cross-attention (spatial blocks only), feed-forward.
#[derive(Clone, Debug)]
pub(crate) struct TransformerBlock {
    kind: BlockKind,
    xframe: Option<(LayerNorm, Attention)>,
    ln_attn: LayerNorm,
    attn: Attention,
    ctx: Option<(LayerNorm, Attention)>,
    ln_ff: LayerNorm,
    ff1: Dense,
    ff2: Dense,
}

impl TransformerBlock {
    pub(crate) fn new(
        name: &str,
        dim: usize,
        heads: usize,
        ctx_dim: Option<usize>,
        kind: BlockKind,
        xframe: bool,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!(
                "transformer {name}: dim={dim} must be a positive multiple of heads={heads}"
            )));
        }
        let d_k = dim / heads;
        let xframe = if xframe {
            Some((
                LayerNorm::new(format!("{name}.lnx"), dim),
                Attention::new(format!("{name}.xf"), dim, heads, d_k)?,
            ))
        } else {
            None
        };
        let ctx = match ctx_dim {
            Some(cd) => Some((
                LayerNorm::new(format!("{name}.lnc"), dim),
                Attention::new_cross(format!("{name}.ctx"), dim, cd, heads, d_k)?,
            )),
            None => None,
        };
        Ok(TransformerBlock {
            kind,
            xframe,
            ln_attn: LayerNorm::new(format!("{name}.lna"), dim),
            attn: Attention::new(format!("{name}.attn"), dim, heads, d_k)?,
            ctx,
            ln_ff: LayerNorm::new(format!("{name}.lnf"), dim),
            ff1: Dense::new(format!("{name}.ff1"), dim, 2 * dim),
            ff2: Dense::new(format!("{name}.ff2"), 2 * dim, dim),
        })
    }

    pub(crate) fn init<T: Real, R: Rng>(&self, ps: &mut ParamStore<T>, rng: &mut R) {
        if let Some((ln, att)) = &self.xframe {
            ln.init(ps);
            att.init_zero_out(ps, rng);
        }
        self.ln_attn.init(ps);
        self.attn.init(ps, rng);
        if let Some((ln, att)) = &self.ctx {
            ln.init(ps);
            att.init_zero_out(ps, rng);
        }
        self.ln_ff.init(ps);
        self.ff1.init(ps, rng);
        self.ff2.init(ps, rng);
    }

    /// `x` is `[N, T, C]` with frames on axis 0; temporal blocks attend
    /// across frames independently at every token position.
    pub(crate) fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        ps: &ParamStore<T>,
        x: Var,
        ctx_tok: Option<Var>,
    ) -> Result<Var> {
        let mut x = x;
        if let Some((ln, att)) = &self.xframe {
            let h = ln.forward(g, ps, x)?;
            let d = match self.kind {
                BlockKind::Spatial => att.cross_frame_spatial(g, ps, h)?,
                BlockKind::Temporal => att.cross_frame_temporal(g, ps, h)?,
            };
            x = g.add(x, d)?;
        }
        let h = self.ln_attn.forward(g, ps, x)?;
        let d = match self.kind {
            BlockKind::Spatial => self.attn.attend_tokens(g, ps, h, h)?,
            BlockKind::Temporal => {
                let hp = g.permute(h, &[1, 0, 2])?;
                let o = self.attn.attend_tokens(g, ps, hp, hp)?;
                g.permute(o, &[1, 0, 2])?
            }
        };
        x = g.add(x, d)?;
        if let (Some((ln, att)), Some(ct)) = (&self.ctx, ctx_tok) {
            let h = ln.forward(g, ps, x)?;
            let d = att.attend_tokens(g, ps, h, ct)?;
            x = g.add(x, d)?;
        }
        let h = self.ln_ff.forward(g, ps, x)?;
        let h = self.ff1.forward_tokens(g, ps, h)?;
        let h = g.silu(h);
        let d = self.ff2.forward_tokens(g, ps, h)?;
        g.add(x, d)
    }
}

/// One resolution stage: res block, then a spatial and a temporal
/// transformer over the stage's feature map.
#[derive(Clone, Debug)]
pub(crate) struct Stage {
    res: ResBlock,
    sp: TransformerBlock,
    tmp: TransformerBlock,
}

impl Stage {
    fn new(name: &str, cin: usize, cout: usize, cfg: &DenoiserConfig, xframe: bool) -> Result<Self> {
        Ok(Stage {
            res: ResBlock::new(name, cin, cout, cfg.groups, cfg.temb_dim)?,
            sp: TransformerBlock::new(
                &format!("{name}.sp"),
                cout,
                cfg.heads,
                Some(cfg.ctx_dim),
                BlockKind::Spatial,
                xframe,
            )?,
            tmp: TransformerBlock::new(
                &format!("{name}.tmp"),
                cout,
                cfg.heads,
                None,
                BlockKind::Temporal,
                xframe,
            )?,
        })
    }

    fn init<T: Real, R: Rng>(&self, ps: &mut ParamStore<T>, rng: &mut R) {
        self.res.init(ps, rng);
        self.sp.init(ps, rng);
        self.tmp.init(ps, rng);
    }

    fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        ps: &ParamStore<T>,
        x: Var,
        temb: Var,
        ctx_tok: Var,
    ) -> Result<Var> {
        let x = self.res.forward(g, ps, x, temb)?;
        let shape = g.value(x).shape().to_vec();
        let (h, w) = (shape[2], shape[3]);
        let t = map_to_tokens(g, x)?;
        let t = self.sp.forward(g, ps, t, Some(ctx_tok))?;
        let t = self.tmp.forward(g, ps, t, None)?;
        tokens_to_map(g, t, h, w)
    }
}

/// The down path shared (structurally) by the base denoiser and the
/// conditional encoder: stem conv, full-resolution stage, strided
/// downsampling conv, half-resolution stage, mid stage. When `xframe` is
/// set, every transformer block gains a leading cross-frame sublayer.
#[derive(Clone, Debug)]
pub(crate) struct EncoderPath {
    pub(crate) prefix: String,
    pub(crate) in_channels: usize,
    stem: Conv2d,
    s1: Stage,
    down: Conv2d,
    s2: Stage,
    mid: Stage,
}

impl EncoderPath {
    pub(crate) fn new(
        prefix: &str,
        in_channels: usize,
        xframe: bool,
        cfg: &DenoiserConfig,
    ) -> Result<Self> {
        let [w1, w2] = cfg.widths;
        Ok(EncoderPath {
            prefix: prefix.to_string(),
            in_channels,
            stem: Conv2d::new(format!("{prefix}.stem"), in_channels, w1, 3, 1, 1),
            s1: Stage::new(&format!("{prefix}.s1"), w1, w1, cfg, xframe)?,
            down: Conv2d::new(format!("{prefix}.down"), w1, w2, 3, 2, 1),
            s2: Stage::new(&format!("{prefix}.s2"), w2, w2, cfg, xframe)?,
            mid: Stage::new(&format!("{prefix}.mid"), w2, w2, cfg, xframe)?,
        })
    }

    pub(crate) fn init<T: Real, R: Rng>(&self, ps: &mut ParamStore<T>, rng: &mut R) {
        self.stem.init(ps, rng);
        self.s1.init(ps, rng);
        self.down.init(ps, rng);
        self.s2.init(ps, rng);
        self.mid.init(ps, rng);
    }

    /// Re-initialize only the stem; used after a bitwise weight copy when
    /// the replica consumes a different channel count.
    pub(crate) fn reinit_stem<T: Real, R: Rng>(&self, ps: &mut ParamStore<T>, rng: &mut R) {
        self.stem.init(ps, rng);
    }

    /// Create only the parameters the replica does not copy from the base:
    /// the cross-frame sublayers of all six transformer blocks.
    pub(crate) fn init_xframe_only<T: Real, R: Rng>(&self, ps: &mut ParamStore<T>, rng: &mut R) {
        for stage in [&self.s1, &self.s2, &self.mid] {
            for block in [&stage.sp, &stage.tmp] {
                if let Some((ln, att)) = &block.xframe {
                    ln.init(ps);
                    att.init_zero_out(ps, rng);
                }
            }
        }
    }

    pub(crate) fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        ps: &ParamStore<T>,
        x: Var,
        temb: Var,
        ctx_tok: Var,
        inject: Option<&[Var; 3]>,
    ) -> Result<(Var, Var, Var)> {
        let shape = g.value(x).shape().to_vec();
        if shape.len() != 4 || shape[1] != self.in_channels {
            return Err(Error::shape(
                "encoder_path",
                format!("{shape:?} vs expected [N,{},h,w]", self.in_channels),
            ));
        }
        let h0 = self.stem.forward(g, ps, x)?;
        self.run_stages(g, ps, h0, temb, ctx_tok, inject)
    }

    /// Tokens feeding the key/value side of the first cross-frame
    /// attention in the full-resolution spatial block: `[2T, C]`, built
    /// from frames 0 and N-1 exactly as the attention block builds them.
    /// Instrumentation for tests pinning key/value provenance.
    #[cfg(test)]
    pub(crate) fn s1_crossframe_kv<T: Real>(
        &self,
        g: &mut Graph<T>,
        ps: &ParamStore<T>,
        x: Var,
        temb: Var,
    ) -> Result<Var> {
        let h0 = self.stem.forward(g, ps, x)?;
        let s = self.s1.res.forward(g, ps, h0, temb)?;
        let tok = map_to_tokens(g, s)?;
        let (ln, _) = self.s1.sp.xframe.as_ref().ok_or_else(|| {
            Error::Invalid("this encoder path has no cross-frame sublayers".into())
        })?;
        let h = ln.forward(g, ps, tok)?;
        let shape = g.value(h).shape().to_vec();
        let (n, t, c) = (shape[0], shape[1], shape[2]);
        let first = g.slice_axis(h, 0, 0, 1)?;
        let last = g.slice_axis(h, 0, n - 1, 1)?;
        let kv = g.concat(&[first, last], 1)?;
        g.reshape(kv, &[2 * t, c])
    }

    /// Stage pipeline entered after the stem; the replica-equality tests
    /// feed both paths the same post-stem activations through here.
    pub(crate) fn run_stages<T: Real>(
        &self,
        g: &mut Graph<T>,
        ps: &ParamStore<T>,
        h0: Var,
        temb: Var,
        ctx_tok: Var,
        inject: Option<&[Var; 3]>,
    ) -> Result<(Var, Var, Var)> {
        let mut s1 = self.s1.forward(g, ps, h0, temb, ctx_tok)?;
        if let Some(d) = inject {
            s1 = g.add(s1, d[0])?;
        }
        let dn = self.down.forward(g, ps, s1)?;
        let mut s2 = self.s2.forward(g, ps, dn, temb, ctx_tok)?;
        if let Some(d) = inject {
            s2 = g.add(s2, d[1])?;
        }
        let mut mid = self.mid.forward(g, ps, s2, temb, ctx_tok)?;
        if let Some(d) = inject {
            mid = g.add(mid, d[2])?;
        }
        Ok((s1, s2, mid))
    }
}

/// Condition entering the denoiser: one additive feature map per encoder
/// stage (already projected to the stage's shape) plus the context vector
/// consumed by per-stage cross-attention.
#[derive(Clone, Copy, Debug)]
pub struct Conditioning {
    /// Delta for the full-resolution stage output, `[N, widths[0], h, w]`.
    pub s1: Var,
    /// Delta for the half-resolution stage output, `[N, widths[1], h/2, w/2]`.
    pub s2: Var,
    /// Delta for the mid stage output, `[N, widths[1], h/2, w/2]`.
    pub mid: Var,
    /// Context vector, `[ctx_dim]`.
    pub context: Var,
}

/// The base model: predicts v from a noised latent clip, a timestep, and
/// an optional condition. With no condition it runs the same graph against
/// all-zero condition tensors, so a zero-initialized condition path is
/// indistinguishable from the unconditional model.
#[derive(Clone, Debug)]
pub struct Denoiser {
    pub name: String,
    pub cfg: DenoiserConfig,
    t1: Dense,
    t2: Dense,
    pub(crate) enc: EncoderPath,
    dec2: Stage,
    up: Conv2d,
    dec1: Stage,
    head_gn: GroupNorm,
    head: Conv2d,
}

impl Denoiser {
    pub fn new(name: impl Into<String>, cfg: DenoiserConfig) -> Result<Self> {
        cfg.validate()?;
        let name = name.into();
        let [w1, w2] = cfg.widths;
        Ok(Denoiser {
            t1: Dense::new(format!("{name}.temb.l1"), cfg.temb_dim, cfg.temb_dim),
            t2: Dense::new(format!("{name}.temb.l2"), cfg.temb_dim, cfg.temb_dim),
            enc: EncoderPath::new(&format!("{name}.enc"), cfg.latent_channels, false, &cfg)?,
            dec2: Stage::new(&format!("{name}.dec.s2"), 2 * w2, w2, &cfg, false)?,
            up: Conv2d::new(format!("{name}.dec.up"), w2, w1, 3, 1, 1),
            dec1: Stage::new(&format!("{name}.dec.s1"), 2 * w1, w1, &cfg, false)?,
            head_gn: GroupNorm::new(format!("{name}.dec.head.gn"), w1, cfg.groups),
            head: Conv2d::new(format!("{name}.dec.head.c"), w1, cfg.latent_channels, 3, 1, 1),
            name,
            cfg,
        })
    }

    pub fn init<T: Real, R: Rng>(&self, ps: &mut ParamStore<T>, rng: &mut R) {
        self.t1.init(ps, rng);
        self.t2.init(ps, rng);
        self.enc.init(ps, rng);
        self.dec2.init(ps, rng);
        self.up.init(ps, rng);
        self.dec1.init(ps, rng);
        self.head_gn.init(ps);
        self.head.init(ps, rng);
    }

    /// Sinusoidal features for `t` passed through the embedding MLP;
    /// returns a `[1, temb_dim]` node.
    pub fn timestep_embed<T: Real>(
        &self,
        g: &mut Graph<T>,
        ps: &ParamStore<T>,
        t: usize,
        t_max: usize,
    ) -> Result<Var> {
        let feats = sinusoid_features(t, t_max, self.cfg.temb_dim)?;
        let arr = ArrayD::from_shape_vec(
            IxDyn(&[1, self.cfg.temb_dim]),
            feats.into_iter().map(T::of).collect(),
        )
        .expect("sinusoid length matches dim");
        let v = g.leaf(arr);
        let h = self.t1.forward(g, ps, v)?;
        let h = g.silu(h);
        self.t2.forward(g, ps, h)
    }

    /// Predict v for the noised latent clip `z_t` at timestep `t`.
    ///
    /// `cond` carries per-stage additive features plus the context vector;
    /// `None` substitutes zeros for all of them and runs the identical
    /// graph.
    pub fn denoise<T: Real>(
        &self,
        g: &mut Graph<T>,
        ps: &ParamStore<T>,
        z_t: Var,
        t: usize,
        t_max: usize,
        cond: Option<&Conditioning>,
    ) -> Result<Var> {
        let shape = g.value(z_t).shape().to_vec();
        if shape.len() != 4 || shape[1] != self.cfg.latent_channels {
            return Err(Error::shape(
                "denoise",
                format!("{shape:?} vs expected [N,{},h,w]", self.cfg.latent_channels),
            ));
        }
        let (n, h, w) = (shape[0], shape[2], shape[3]);
        if n == 0 || h < 2 || w < 2 || h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Invalid(format!(
                "denoise needs N >= 1 and even spatial dims >= 2, got [{n}, _, {h}, {w}]"
            )));
        }
        let [w1, w2] = self.cfg.widths;
        let stage_shapes = [
            ("s1", vec![n, w1, h, w]),
            ("s2", vec![n, w2, h / 2, w / 2]),
            ("mid", vec![n, w2, h / 2, w / 2]),
        ];
        let (deltas, context) = match cond {
            Some(c) => {
                for ((label, want), var) in stage_shapes.iter().zip([c.s1, c.s2, c.mid]) {
                    let got = g.value(var).shape();
                    if got != want.as_slice() {
                        return Err(Error::shape(
                            "denoise",
                            format!("condition {label}: {got:?} vs expected {want:?}"),
                        ));
                    }
                }
                let got = g.value(c.context).shape();
                if got != [self.cfg.ctx_dim] {
                    return Err(Error::shape(
                        "denoise",
                        format!("condition context: {got:?} vs expected [{}]", self.cfg.ctx_dim),
                    ));
                }
                ([c.s1, c.s2, c.mid], c.context)
            }
            None => {
                let zs: Vec<Var> = stage_shapes
                    .iter()
                    .map(|(_, s)| g.leaf(zeros::<T>(s)))
                    .collect();
                let ctx = g.leaf(zeros::<T>(&[self.cfg.ctx_dim]));
                ([zs[0], zs[1], zs[2]], ctx)
            }
        };
        let temb = self.timestep_embed(g, ps, t, t_max)?;
        let ctx_row = g.reshape(context, &[1, self.cfg.ctx_dim])?;
        let ctx_tok = g.stack_n(ctx_row, n)?;

        let (s1, s2, mid) = self
            .enc
            .forward(g, ps, z_t, temb, ctx_tok, Some(&deltas))?;
        let cat2 = g.concat(&[mid, s2], 1)?;
        let u2 = self.dec2.forward(g, ps, cat2, temb, ctx_tok)?;
        let up = g.upsample2x(u2)?;
        let up = self.up.forward(g, ps, up)?;
        let cat1 = g.concat(&[up, s1], 1)?;
        let u1 = self.dec1.forward(g, ps, cat1, temb, ctx_tok)?;
        let out = self.head_gn.forward(g, ps, u1)?;
        let out = g.silu(out);
        self.head.forward(g, ps, out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{self, NoiseSchedule};
    use crate::gradcheck::grad_check_fn_richardson;
    use crate::nn::{randn, AdamW, AdamWConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn build<T: Real>(cfg: DenoiserConfig, seed: u64) -> (Denoiser, ParamStore<T>) {
        let den = Denoiser::new("den", cfg).unwrap();
        let mut ps = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        den.init(&mut ps, &mut rng);
        (den, ps)
    }

    #[test]
    fn zero_timestep_gives_zero_sines_and_unit_cosines() {
        let f = sinusoid_features(0, 10, 8).unwrap();
        assert!(f[..4].iter().all(|&v| v == 0.0));
        assert!(f[4..].iter().all(|&v| v == 1.0));
    }

    #[test]
    fn sinusoid_features_match_the_frozen_oracle() {
        let want7 = [
            0.6569865987187891,
            0.3192246506063148,
            0.015080471170057407,
            0.0006999999428333341,
            0.7539022543433046,
            0.9476790714399449,
            0.9998862832288925,
            0.99999975500001,
        ];
        let want123 = [
            -0.45990349068959124,
            -0.543021393280414,
            0.2619048932608496,
            0.01229968985784607,
            -0.8879689066918555,
            0.8397188615481957,
            0.965093688139148,
            0.9999243559536896,
        ];
        for (t, want) in [(7usize, want7), (123, want123)] {
            let got = sinusoid_features(t, 1000, 8).unwrap();
            for (a, b) in got.iter().zip(want.iter()) {
                assert!((a - b).abs() < 1e-12, "t={t}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn distinct_timesteps_give_distinct_embeddings() {
        let t_max = 40;
        let feats: Vec<Vec<f64>> = (0..=t_max)
            .map(|t| sinusoid_features(t, t_max, 8).unwrap())
            .collect();
        for i in 0..feats.len() {
            for j in (i + 1)..feats.len() {
                let l2: f64 = feats[i]
                    .iter()
                    .zip(&feats[j])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                assert!(l2.sqrt() > 1e-12, "t={i} and t={j} collide");
            }
        }
    }

    #[test]
    fn out_of_range_timesteps_and_odd_dims_are_rejected() {
        assert!(sinusoid_features(11, 10, 8).is_err());
        assert!(sinusoid_features(10, 10, 8).is_ok());
        assert!(sinusoid_features(3, 10, 7).is_err());

        let (den, ps) = build::<f64>(DenoiserConfig::tiny(), 0);
        let mut g = Graph::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z = g.leaf(randn::<f64, _>(&mut rng, &[2, 2, 8, 8], 1.0));
        assert!(den.denoise(&mut g, &ps, z, 11, 10, None).is_err());
    }

    #[test]
    fn denoise_round_trips_the_latent_shape() {
        let (den, ps) = build::<f32>(DenoiserConfig::default(), 3);
        let mut g = Graph::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let z = g.leaf(randn::<f32, _>(&mut rng, &[9, 4, 16, 16], 1.0));
        let v = den.denoise(&mut g, &ps, z, 250, 1000, None).unwrap();
        assert_eq!(g.value(v).shape(), &[9, 4, 16, 16]);
        assert!(g.value(v).iter().all(|x| x.is_finite()));
    }

    #[test]
    fn zero_stage_condition_matches_no_condition_bitwise() {
        // The condition path is built so that zero stage deltas plus a
        // zeroed context output projection cannot move a single bit: this
        // is what a freshly initialized conditional encoder produces.
        let (den, ps) = build::<f64>(DenoiserConfig::tiny(), 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let z = randn::<f64, _>(&mut rng, &[3, 2, 8, 8], 1.0);
        let ctx = randn::<f64, _>(&mut rng, &[3], 1.0);

        let mut ga = Graph::<f64>::new();
        let za = ga.leaf(z.clone());
        let a = den.denoise(&mut ga, &ps, za, 7, 50, None).unwrap();
        let a = ga.value(a).clone();

        let mut gb = Graph::<f64>::new();
        let zb = gb.leaf(z);
        let cond = Conditioning {
            s1: gb.leaf(zeros::<f64>(&[3, 3, 8, 8])),
            s2: gb.leaf(zeros::<f64>(&[3, 4, 4, 4])),
            mid: gb.leaf(zeros::<f64>(&[3, 4, 4, 4])),
            context: gb.leaf(ctx),
        };
        let b = den.denoise(&mut gb, &ps, zb, 7, 50, Some(&cond)).unwrap();
        let b = gb.value(b).clone();

        assert_eq!(a.shape(), b.shape());
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn stage_shape_mismatches_are_named() {
        let (den, ps) = build::<f64>(DenoiserConfig::tiny(), 7);
        let mut g = Graph::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let z = g.leaf(randn::<f64, _>(&mut rng, &[2, 2, 8, 8], 1.0));
        let cond = Conditioning {
            s1: g.leaf(zeros::<f64>(&[2, 3, 8, 8])),
            s2: g.leaf(zeros::<f64>(&[2, 4, 8, 8])), // wrong resolution
            mid: g.leaf(zeros::<f64>(&[2, 4, 4, 4])),
            context: g.leaf(zeros::<f64>(&[3])),
        };
        let err = den.denoise(&mut g, &ps, z, 3, 50, Some(&cond)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("s2"), "unhelpful message: {msg}");
    }

    #[test]
    fn temporal_block_is_spatially_equivariant() {
        let tb = TransformerBlock::new("tb", 4, 2, None, BlockKind::Temporal, false).unwrap();
        let mut ps = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        tb.init(&mut ps, &mut rng);
        let x = randn::<f64, _>(&mut rng, &[3, 5, 4], 1.0);
        let perm = [4usize, 1, 3, 0, 2];

        let run = |input: &ArrayD<f64>| -> ArrayD<f64> {
            let mut g = Graph::<f64>::new();
            let xv = g.leaf(input.clone());
            let y = tb.forward(&mut g, &ps, xv, None).unwrap();
            g.value(y).clone()
        };

        let y = run(&x);
        let mut xp = x.clone();
        for (dst, &src) in perm.iter().enumerate() {
            for n in 0..3 {
                for c in 0..4 {
                    xp[[n, dst, c]] = x[[n, src, c]];
                }
            }
        }
        let yp = run(&xp);
        for (dst, &src) in perm.iter().enumerate() {
            for n in 0..3 {
                for c in 0..4 {
                    assert_eq!(yp[[n, dst, c]], y[[n, src, c]]);
                }
            }
        }
    }

    #[test]
    fn full_denoiser_passes_the_gradient_check() {
        let (den, ps) = build::<f64>(DenoiserConfig::tiny(), 10);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let z = randn::<f64, _>(&mut rng, &[2, 2, 8, 8], 1.0);
        let target = randn::<f64, _>(&mut rng, &[2, 2, 8, 8], 1.0);
        let d_s1 = randn::<f64, _>(&mut rng, &[2, 3, 8, 8], 0.5);
        let d_s2 = randn::<f64, _>(&mut rng, &[2, 4, 4, 4], 0.5);
        let d_mid = randn::<f64, _>(&mut rng, &[2, 4, 4, 4], 0.5);
        let ctx = randn::<f64, _>(&mut rng, &[3], 1.0);

        // The depth of this graph concentrates curvature on the earliest
        // weights; plain central differences fail at every single step
        // size, so the check extrapolates over two. The base step keeps
        // the eps^4 residual below roundoff.
        let report = grad_check_fn_richardson(&ps, 2e-5, |g, store| {
            let zv = g.leaf(z.clone());
            let cond = Conditioning {
                s1: g.leaf(d_s1.clone()),
                s2: g.leaf(d_s2.clone()),
                mid: g.leaf(d_mid.clone()),
                context: g.leaf(ctx.clone()),
            };
            let v = den.denoise(g, store, zv, 40, 50, Some(&cond))?;
            let t = g.leaf(target.clone());
            g.mse(v, t)
        })
        .unwrap();
        assert!(
            report.passes(1e-4),
            "max rel err {} offenders {:?}",
            report.max_err,
            report.offenders(1e-4)
        );
    }

    #[test]
    fn single_clip_overfit_crushes_the_loss() {
        let (den, mut ps) = build::<f32>(DenoiserConfig::tiny(), 12);
        let sched = NoiseSchedule::cosine(50).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let z0 = randn::<f32, _>(&mut rng, &[2, 2, 8, 8], 0.5);
        let eps = randn::<f32, _>(&mut rng, &[2, 2, 8, 8], 1.0);
        let t = 25;
        let z_t = diffusion::add_noise(&sched, &z0, &eps, t).unwrap();
        let v = diffusion::v_target(&sched, &z0, &eps, t).unwrap();

        let mut opt = AdamW::<f32>::new(AdamWConfig { lr: 1e-2, ..Default::default() });
        let mut first = None;
        let mut last = 0.0f32;
        for _ in 0..200 {
            let mut g = Graph::<f32>::new();
            let zv = g.leaf(z_t.clone());
            let pred = den.denoise(&mut g, &ps, zv, t, 50, None).unwrap();
            let tv = g.leaf(v.clone());
            let loss = g.mse(pred, tv).unwrap();
            last = g.scalar(loss);
            first.get_or_insert(last);
            let grads = g.backward(loss).unwrap();
            let pgrads = g.param_grads(&grads);
            opt.step(&mut ps, &pgrads).unwrap();
        }
        let first = first.unwrap();
        assert!(
            last < 0.1 * first,
            "loss {first} only reached {last} after 200 steps"
        );
    }
}
