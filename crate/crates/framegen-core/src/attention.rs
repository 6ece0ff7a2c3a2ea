//! Scaled dot-product attention blocks and the two cross-frame variants:
//! spatial (keys/values from the first and last frames) and temporal
//! (keys/values from the clamped previous and next frames per location).

use crate::error::{Error, Result};
use crate::nn::{kaiming_uniform, zeros, ParamStore};
use crate::real::Real;
use crate::tape::{Graph, Var};

/// A multi-head attention block with named projection weights.
///
/// Projections are bias-free: `wq: [model_dim, heads*d_k]`,
/// `wk/wv: [kv_dim, heads*d_k]` and `wo: [heads*d_k, model_dim]`. `wo` is
/// zero-initialized wherever the block feeds an additive residual at a
/// condition-injection site, so a freshly initialized block is an exact
/// no-op there.
#[derive(Clone, Debug)]
pub struct Attention {
    pub name: String,
    pub model_dim: usize,
    /// Channel count of the key/value tokens (equals model_dim for
    /// self-attention; differs for cross-branch fusion).
    pub kv_dim: usize,
    pub heads: usize,
    pub d_k: usize,
}

impl Attention {
    pub fn new(name: impl Into<String>, model_dim: usize, heads: usize, d_k: usize) -> Result<Self> {
        Self::new_cross(name, model_dim, model_dim, heads, d_k)
    }

    /// Attention whose keys/values come from a different channel width.
    pub fn new_cross(
        name: impl Into<String>,
        model_dim: usize,
        kv_dim: usize,
        heads: usize,
        d_k: usize,
    ) -> Result<Self> {
        if heads == 0 || d_k == 0 || model_dim == 0 || kv_dim == 0 {
            return Err(Error::Config(format!(
                "attention needs model_dim, kv_dim, heads, d_k >= 1, got {model_dim}/{kv_dim}/{heads}/{d_k}"
            )));
        }
        Ok(Attention { name: name.into(), model_dim, kv_dim, heads, d_k })
    }

    fn proj_dim(&self) -> usize {
        self.heads * self.d_k
    }

    fn names(&self) -> [String; 4] {
        [
            format!("{}.wq", self.name),
            format!("{}.wk", self.name),
            format!("{}.wv", self.name),
            format!("{}.wo", self.name),
        ]
    }

    /// Random init for all four projections.
    pub fn init<T: Real, R: rand::Rng>(&self, ps: &mut ParamStore<T>, rng: &mut R) {
        let [wq, wk, wv, wo] = self.names();
        let p = self.proj_dim();
        ps.insert(wq, kaiming_uniform(rng, &[self.model_dim, p], self.model_dim));
        ps.insert(wk, kaiming_uniform(rng, &[self.kv_dim, p], self.kv_dim));
        ps.insert(wv, kaiming_uniform(rng, &[self.kv_dim, p], self.kv_dim));
        ps.insert(wo, kaiming_uniform(rng, &[p, self.model_dim], p));
    }

    /// Random q/k/v, zeroed output projection: the block starts as an
    /// exact no-op on any additive-residual path.
    pub fn init_zero_out<T: Real, R: rand::Rng>(&self, ps: &mut ParamStore<T>, rng: &mut R) {
        self.init(ps, rng);
        let [.., wo] = self.names();
        ps.insert(wo, zeros::<T>(&[self.proj_dim(), self.model_dim]));
    }

    /// Identity projections, for exactness tests. Requires a single head
    /// with d_k = model_dim = kv_dim.
    pub fn init_identity<T: Real>(&self, ps: &mut ParamStore<T>) -> Result<()> {
        if self.heads != 1 || self.d_k != self.model_dim || self.kv_dim != self.model_dim {
            return Err(Error::Config(
                "identity init needs heads=1 and d_k=model_dim=kv_dim".into(),
            ));
        }
        let eye = ndarray::Array2::<T>::eye(self.model_dim).into_dyn();
        for n in self.names() {
            ps.insert(n, eye.clone());
        }
        Ok(())
    }

    /// Project token batch `[B,T,din]` through weight `w_name`.
    fn project<T: Real>(
        &self,
        g: &mut Graph<T>,
        ps: &ParamStore<T>,
        x: Var,
        w_name: &str,
        din: usize,
    ) -> Result<Var> {
        let shape = g.value(x).shape().to_vec();
        if shape.len() != 3 || shape[2] != din {
            return Err(Error::shape(
                "attention.project",
                format!("{shape:?} vs expected channel {din}"),
            ));
        }
        let w = g.param(ps, w_name)?;
        let x2 = g.reshape(x, &[shape[0] * shape[1], shape[2]])?;
        let y2 = g.matmul(x2, w)?;
        let dout = g.value(y2).shape()[1];
        g.reshape(y2, &[shape[0], shape[1], dout])
    }

    /// Multi-head attention: queries `[B,Tq,model_dim]` against keys and
    /// values drawn from `kv: [B,Tk,kv_dim]`; returns `[B,Tq,model_dim]`.
    pub fn attend_tokens<T: Real>(
        &self,
        g: &mut Graph<T>,
        ps: &ParamStore<T>,
        q_tokens: Var,
        kv_tokens: Var,
    ) -> Result<Var> {
        let [wq, wk, wv, wo] = self.names();
        let q = self.project(g, ps, q_tokens, &wq, self.model_dim)?;
        let k = self.project(g, ps, kv_tokens, &wk, self.kv_dim)?;
        let v = self.project(g, ps, kv_tokens, &wv, self.kv_dim)?;
        let scale = 1.0 / (self.d_k as f64).sqrt();
        let mut heads = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice_axis(q, 2, h * self.d_k, self.d_k)?;
            let kh = g.slice_axis(k, 2, h * self.d_k, self.d_k)?;
            let vh = g.slice_axis(v, 2, h * self.d_k, self.d_k)?;
            heads.push(g.attend(qh, kh, vh, scale)?);
        }
        let cat = if heads.len() == 1 { heads[0] } else { g.concat(&heads, 2)? };
        self.project(g, ps, cat, &wo, self.proj_dim())
    }

    /// Cross-frame spatial attention over `[N, T, C]` token grids: every
    /// frame's tokens attend to the concatenated tokens of the first and
    /// last frames (2T keys regardless of N).
    pub fn cross_frame_spatial<T: Real>(
        &self,
        g: &mut Graph<T>,
        ps: &ParamStore<T>,
        x: Var,
    ) -> Result<Var> {
        let shape = g.value(x).shape().to_vec();
        if shape.len() != 3 {
            return Err(Error::shape("cross_frame_spatial", format!("{shape:?}")));
        }
        let (n, t, c) = (shape[0], shape[1], shape[2]);
        if n < 2 {
            return Err(Error::Invalid(format!(
                "cross-frame spatial attention needs n >= 2 frames, got {n}"
            )));
        }
        let first = g.slice_axis(x, 0, 0, 1)?;
        let last = g.slice_axis(x, 0, n - 1, 1)?;
        let kv = g.concat(&[first, last], 1)?;
        let kv = g.reshape(kv, &[2 * t, c])?;
        let kv = g.stack_n(kv, n)?;
        self.attend_tokens(g, ps, x, kv)
    }

    /// Cross-frame temporal attention over `[N, T, C]`: each frame's token
    /// at a spatial location attends to the tokens of frames
    /// clamp(i-1) and clamp(i+1) at the same location.
    pub fn cross_frame_temporal<T: Real>(
        &self,
        g: &mut Graph<T>,
        ps: &ParamStore<T>,
        x: Var,
    ) -> Result<Var> {
        let shape = g.value(x).shape().to_vec();
        if shape.len() != 3 {
            return Err(Error::shape("cross_frame_temporal", format!("{shape:?}")));
        }
        let (n, t) = (shape[0], shape[1]);
        if n == 0 || t == 0 {
            return Err(Error::shape("cross_frame_temporal", format!("{shape:?}")));
        }
        let mut outs = Vec::with_capacity(n);
        for i in 0..n {
            let prev = i.saturating_sub(1);
            let next = (i + 1).min(n - 1);
            let qi = g.slice_axis(x, 0, i, 1)?;
            let qi = g.permute(qi, &[1, 0, 2])?; // [T,1,C]
            let kp = g.slice_axis(x, 0, prev, 1)?;
            let kn = g.slice_axis(x, 0, next, 1)?;
            let kv = g.concat(&[kp, kn], 0)?;
            let kv = g.permute(kv, &[1, 0, 2])?; // [T,2,C]
            let oi = self.attend_tokens(g, ps, qi, kv)?;
            outs.push(g.permute(oi, &[1, 0, 2])?); // [1,T,C]
        }
        if outs.len() == 1 {
            outs.pop().ok_or_else(|| Error::Invalid("empty attention output".into()))
        } else {
            g.concat(&outs, 0)
        }
    }
}

/// Flatten a feature map `[N,C,H,W]` into per-frame spatial tokens
/// `[N, H*W, C]`.
pub fn map_to_tokens<T: Real>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let shape = g.value(x).shape().to_vec();
    if shape.len() != 4 {
        return Err(Error::shape("map_to_tokens", format!("{shape:?}")));
    }
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let p = g.permute(x, &[0, 2, 3, 1])?;
    g.reshape(p, &[n, h * w, c])
}

/// Inverse of `map_to_tokens`: `[N, H*W, C]` back to `[N,C,H,W]`.
pub fn tokens_to_map<T: Real>(g: &mut Graph<T>, x: Var, h: usize, w: usize) -> Result<Var> {
    let shape = g.value(x).shape().to_vec();
    if shape.len() != 3 || shape[1] != h * w {
        return Err(Error::shape(
            "tokens_to_map",
            format!("{shape:?} vs {h}x{w} grid"),
        ));
    }
    let (n, c) = (shape[0], shape[2]);
    let r = g.reshape(x, &[n, h, w, c])?;
    g.permute(r, &[0, 3, 1, 2])
}

/// Reference attention for oracles: plain nested loops, no tape.
#[cfg(test)]
pub(crate) fn attend_loop_oracle(
    q: &ndarray::ArrayD<f64>,
    kv: &ndarray::ArrayD<f64>,
    ps: &ParamStore<f64>,
    att: &Attention,
) -> ndarray::ArrayD<f64> {
    let q = q.view().into_dimensionality::<ndarray::Ix3>().unwrap();
    let kv = kv.view().into_dimensionality::<ndarray::Ix3>().unwrap();
    let get2 = |n: &str| {
        ps.get(n)
            .unwrap()
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap()
            .to_owned()
    };
    let (wq, wk, wv, wo) = (
        get2(&format!("{}.wq", att.name)),
        get2(&format!("{}.wk", att.name)),
        get2(&format!("{}.wv", att.name)),
        get2(&format!("{}.wo", att.name)),
    );
    let (b, tq, c) = (q.shape()[0], q.shape()[1], q.shape()[2]);
    let (tk, ckv) = (kv.shape()[1], kv.shape()[2]);
    let p = att.heads * att.d_k;
    let mut out = ndarray::Array3::<f64>::zeros((b, tq, c));
    for bi in 0..b {
        // Projected tokens.
        let mut qp = ndarray::Array2::<f64>::zeros((tq, p));
        let mut kp = ndarray::Array2::<f64>::zeros((tk, p));
        let mut vp = ndarray::Array2::<f64>::zeros((tk, p));
        for ti in 0..tq {
            for pj in 0..p {
                for ci in 0..c {
                    qp[[ti, pj]] += q[[bi, ti, ci]] * wq[[ci, pj]];
                }
            }
        }
        for ti in 0..tk {
            for pj in 0..p {
                for ci in 0..ckv {
                    kp[[ti, pj]] += kv[[bi, ti, ci]] * wk[[ci, pj]];
                    vp[[ti, pj]] += kv[[bi, ti, ci]] * wv[[ci, pj]];
                }
            }
        }
        let mut heads = ndarray::Array2::<f64>::zeros((tq, p));
        for h in 0..att.heads {
            let off = h * att.d_k;
            for ti in 0..tq {
                let mut scores = vec![0.0f64; tk];
                for (tj, s) in scores.iter_mut().enumerate() {
                    for dj in 0..att.d_k {
                        *s += qp[[ti, off + dj]] * kp[[tj, off + dj]];
                    }
                    *s /= (att.d_k as f64).sqrt();
                }
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = scores.iter().map(|&s| (s - m).exp()).collect();
                let z: f64 = exps.iter().sum();
                for tj in 0..tk {
                    let wgt = exps[tj] / z;
                    for dj in 0..att.d_k {
                        heads[[ti, off + dj]] += wgt * vp[[tj, off + dj]];
                    }
                }
            }
        }
        for ti in 0..tq {
            for ci in 0..c {
                for pj in 0..p {
                    out[[bi, ti, ci]] += heads[[ti, pj]] * wo[[pj, ci]];
                }
            }
        }
    }
    out.into_dyn()
}
