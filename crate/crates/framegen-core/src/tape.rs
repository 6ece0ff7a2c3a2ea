//! Tape-based reverse-mode autodiff over `ndarray`.
//!
//! A [`Graph`] records one forward pass as a flat list of nodes; each node
//! stores its value and the op that produced it, with parents referenced by
//! index. Since ops only ever reference earlier nodes, the tape is already
//! topologically ordered and [`Graph::backward`] is a single reverse sweep.
//!
//! The op set is deliberately concrete: instead of general broadcasting there
//! is one variant per composite pattern the models actually use (channel
//! bias, channel/spatial gates, pooled reductions, fused attention). Every
//! backward here is exercised by finite-difference tests.

use std::collections::{BTreeMap, HashMap};

use ndarray::{s, Array2, Array3, Array4, ArrayD, ArrayView2, Axis, Ix2, Ix3, Ix4, IxDyn, Slice};

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::real::Real;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

enum Op<T: Real> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    /// 2-D matrix product `[m,k]·[k,n]`.
    Matmul(Var, Var),
    /// Batched scaled-dot-product attention; `probs` are the softmax weights
    /// kept from the forward pass for the backward sweep.
    Attend { q: Var, k: Var, v: Var, scale: f64, probs: Array3<T> },
    /// Broadcast `[s,d]` to `[n,s,d]`.
    StackN(Var),
    Concat { xs: Vec<Var>, axis: usize },
    SliceAxis { x: Var, axis: usize, start: usize, len: usize },
    Permute { x: Var, perm: Vec<usize> },
    Reshape(Var),
    Sigmoid(Var),
    Silu(Var),
    Softmax { x: Var, axis: usize },
    Conv2d { x: Var, w: Var, stride: usize, pad: usize },
    Upsample2x(Var),
    GroupNorm { x: Var, gamma: Var, beta: Var, groups: usize, eps: f64 },
    LayerNorm { x: Var, gamma: Var, beta: Var, eps: f64 },
    /// `[..., d] + [d]`.
    AddBiasLast(Var, Var),
    /// `[n,c,h,w] + [c]`.
    AddChan(Var, Var),
    /// `[n,c,h,w] ⊙ [n,c]`.
    MulChanGate(Var, Var),
    /// `[n,c,h,w] ⊙ [n,1,h,w]`.
    MulSpatGate(Var, Var),
    /// `[n,c,h,w] → [n,c]` mean over space.
    SpatialMean(Var),
    /// `[n,c,h,w] → [n,c]` max over space; flat argmax per (n,c).
    SpatialMax { x: Var, argmax: Vec<usize> },
    /// `[n,c,h,w] → [n,1,h,w]` mean over channels.
    ChanMean(Var),
    /// `[n,c,h,w] → [n,1,h,w]` max over channels; argmax per (n,h,w).
    ChanMax { x: Var, argmax: Vec<usize> },
    MeanAll(Var),
    /// Fused `mean((a-b)^2)` to a 0-d scalar.
    Mse(Var, Var),
}

struct Node<T: Real> {
    value: ArrayD<T>,
    op: Op<T>,
}

/// One forward pass worth of tape.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    params: HashMap<String, Var>,
}

/// Per-node gradients produced by [`Graph::backward`].
pub struct Gradients<T: Real> {
    slots: Vec<Option<ArrayD<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of the loss w.r.t. `v`, if `v` influenced the loss.
    pub fn get(&self, v: Var) -> Option<&ArrayD<T>> {
        self.slots.get(v.0).and_then(|g| g.as_ref())
    }
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), params: HashMap::new() }
    }

    fn push(&mut self, value: ArrayD<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Value of a node.
    pub fn value(&self, v: Var) -> &ArrayD<T> {
        &self.nodes[v.0].value
    }

    /// Value of a 0-d node as a scalar.
    pub fn scalar(&self, v: Var) -> T {
        debug_assert_eq!(self.nodes[v.0].value.len(), 1);
        *self.nodes[v.0].value.iter().next().unwrap()
    }

    /// Record an input or constant. No gradient is reported for plain
    /// leaves; use [`Graph::param`] for trainable tensors.
    pub fn leaf(&mut self, value: ArrayD<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Record a named parameter leaf, loading its value from `store`.
    /// Repeated calls with the same name return the same node, so shared
    /// parameters accumulate gradients correctly.
    pub fn param(&mut self, store: &ParamStore<T>, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let value = store.get(name)?.clone();
        let v = self.push(value, Op::Leaf);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    /// Node handle of a previously registered parameter, if any.
    pub fn param_var(&self, name: &str) -> Option<Var> {
        self.params.get(name).copied()
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.nodes[a.0].value.shape(), self.nodes[b.0].value.shape());
        if sa != sb {
            return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = &self.nodes[a.0].value + &self.nodes[b.0].value;
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let value = &self.nodes[a.0].value - &self.nodes[b.0].value;
        Ok(self.push(value, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value = &self.nodes[a.0].value * &self.nodes[b.0].value;
        Ok(self.push(value, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let value = self.nodes[x.0].value.mapv(|v| v * T::of(c));
        self.push(value, Op::Scale(x, c))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let av = as2(&self.nodes[a.0].value, "matmul")?;
        let bv = as2(&self.nodes[b.0].value, "matmul")?;
        if av.shape()[1] != bv.shape()[0] {
            return Err(Error::shape(
                "matmul",
                format!("{:?} vs {:?}", av.shape(), bv.shape()),
            ));
        }
        let value = av.dot(&bv).into_dyn();
        Ok(self.push(value, Op::Matmul(a, b)))
    }

    /// Batched scaled-dot-product attention.
    ///
    /// `q: [B,S,D]`, `k,v: [B,Skv,D]`; returns `softmax(q·kᵀ·scale)·v` of
    /// shape `[B,S,D]`. Softmax rows are computed with max subtraction.
    pub fn attend(&mut self, q: Var, k: Var, v: Var, scale: f64) -> Result<Var> {
        let qv = as3(&self.nodes[q.0].value, "attend")?;
        let kv = as3(&self.nodes[k.0].value, "attend")?;
        let vv = as3(&self.nodes[v.0].value, "attend")?;
        let (b, s, d) = (qv.shape()[0], qv.shape()[1], qv.shape()[2]);
        let skv = kv.shape()[1];
        if kv.shape() != vv.shape() || kv.shape()[0] != b || kv.shape()[2] != d {
            return Err(Error::shape(
                "attend",
                format!("q {:?}, k {:?}, v {:?}", qv.shape(), kv.shape(), vv.shape()),
            ));
        }
        let mut probs = Array3::<T>::zeros((b, s, skv));
        let mut out = Array3::<T>::zeros((b, s, d));
        for bi in 0..b {
            let qb = qv.index_axis(Axis(0), bi);
            let kb = kv.index_axis(Axis(0), bi);
            let vb = vv.index_axis(Axis(0), bi);
            let mut scores = qb.dot(&kb.t());
            scores.mapv_inplace(|x| x * T::of(scale));
            softmax_rows_inplace(&mut scores);
            out.index_axis_mut(Axis(0), bi).assign(&scores.dot(&vb));
            probs.index_axis_mut(Axis(0), bi).assign(&scores);
        }
        Ok(self.push(out.into_dyn(), Op::Attend { q, k, v, scale, probs }))
    }

    /// Attention probabilities stored by an attend node, `[B,S,Skv]`.
    /// Returns None if `v` was not produced by `attend`.
    pub fn attend_probs(&self, v: Var) -> Option<&Array3<T>> {
        match &self.nodes[v.0].op {
            Op::Attend { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Broadcast a `[s,d]` matrix to `[n,s,d]`.
    pub fn stack_n(&mut self, x: Var, n: usize) -> Result<Var> {
        let xv = as2(&self.nodes[x.0].value, "stack_n")?;
        let (s, d) = (xv.shape()[0], xv.shape()[1]);
        let value = xv
            .broadcast((n, s, d))
            .expect("broadcast [s,d] to [n,s,d]")
            .to_owned()
            .into_dyn();
        Ok(self.push(value, Op::StackN(x)))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::shape("concat", "empty input list".to_string()));
        }
        let views: Vec<_> = xs.iter().map(|v| self.nodes[v.0].value.view()).collect();
        let rank = views[0].ndim();
        for v in &views {
            if v.ndim() != rank {
                return Err(Error::shape("concat", "rank mismatch".to_string()));
            }
        }
        if axis >= rank {
            return Err(Error::shape("concat", format!("axis {axis} out of range {rank}")));
        }
        let value = ndarray::concatenate(Axis(axis), &views)
            .map_err(|e| Error::shape("concat", e.to_string()))?;
        Ok(self.push(value, Op::Concat { xs: xs.to_vec(), axis }))
    }

    pub fn slice_axis(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        if axis >= xv.ndim() || start + len > xv.shape()[axis] {
            return Err(Error::shape(
                "slice_axis",
                format!("axis {axis} range {start}..{} of {:?}", start + len, xv.shape()),
            ));
        }
        let value = xv
            .slice_axis(Axis(axis), Slice::from(start..start + len))
            .to_owned();
        Ok(self.push(value, Op::SliceAxis { x, axis, start, len }))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let rank = xv.ndim();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape("permute", format!("perm {perm:?} for rank {rank}")));
        }
        let value = xv
            .view()
            .permuted_axes(IxDyn(perm))
            .as_standard_layout()
            .to_owned();
        Ok(self.push(value, Op::Permute { x, perm: perm.to_vec() }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        if xv.len() != shape.iter().product::<usize>() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} to {shape:?}", xv.shape()),
            ));
        }
        let value = reshaped(xv, shape);
        Ok(self.push(value, Op::Reshape(x)))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.mapv(sigmoid_scalar);
        self.push(value, Op::Sigmoid(x))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.mapv(|v| v * sigmoid_scalar(v));
        self.push(value, Op::Silu(x))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        if axis >= xv.ndim() {
            return Err(Error::shape("softmax", format!("axis {axis} of {:?}", xv.shape())));
        }
        let mut value = xv.clone();
        for mut lane in value.lanes_mut(Axis(axis)) {
            let max = lane.iter().cloned().fold(T::neg_infinity(), T::max);
            lane.mapv_inplace(|v| (v - max).exp());
            let sum = lane.sum();
            lane.mapv_inplace(|v| v / sum);
        }
        Ok(self.push(value, Op::Softmax { x, axis }))
    }

    /// 2-D convolution, NCHW layout, square kernel, zero padding, floor
    /// output size. Bias is a separate [`Graph::add_chan`].
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let xv = as4(&self.nodes[x.0].value, "conv2d")?;
        let wv = as4(&self.nodes[w.0].value, "conv2d")?;
        let (n, cin, h, wd) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
        let (cout, cinw, k, k2) = (wv.shape()[0], wv.shape()[1], wv.shape()[2], wv.shape()[3]);
        if cinw != cin || k != k2 {
            return Err(Error::shape(
                "conv2d",
                format!("x {:?} vs w {:?}", xv.shape(), wv.shape()),
            ));
        }
        if h + 2 * pad < k || wd + 2 * pad < k || stride == 0 {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {k} stride {stride} pad {pad} on {h}x{wd}"),
            ));
        }
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (wd + 2 * pad - k) / stride + 1;
        let wmat = reshaped_view2(&wv.to_owned().into_dyn(), cout, cin * k * k);
        let mut out = Array4::<T>::zeros((n, cout, oh, ow));
        for i in 0..n {
            let xp = pad_hw(&xv.index_axis(Axis(0), i).to_owned(), pad);
            let cols = im2col(&xp, k, stride, oh, ow);
            let y = wmat.dot(&cols);
            out.index_axis_mut(Axis(0), i)
                .assign(&y.into_shape_with_order((cout, oh, ow)).unwrap());
        }
        Ok(self.push(out.into_dyn(), Op::Conv2d { x, w, stride, pad }))
    }

    /// Nearest-neighbour 2x upsampling of `[n,c,h,w]`.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let xv = as4(&self.nodes[x.0].value, "upsample2x")?;
        let (n, c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
        let mut out = Array4::<T>::zeros((n, c, 2 * h, 2 * w));
        for i in 0..n {
            for ci in 0..c {
                for y in 0..h {
                    for xw in 0..w {
                        let v = xv[[i, ci, y, xw]];
                        out[[i, ci, 2 * y, 2 * xw]] = v;
                        out[[i, ci, 2 * y, 2 * xw + 1]] = v;
                        out[[i, ci, 2 * y + 1, 2 * xw]] = v;
                        out[[i, ci, 2 * y + 1, 2 * xw + 1]] = v;
                    }
                }
            }
        }
        Ok(self.push(out.into_dyn(), Op::Upsample2x(x)))
    }

    /// Group normalization over `[n,c,h,w]` with per-channel affine.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize, eps: f64) -> Result<Var> {
        let xv = as4(&self.nodes[x.0].value, "group_norm")?.to_owned();
        let c = xv.shape()[1];
        if groups == 0 || c % groups != 0 {
            return Err(Error::shape("group_norm", format!("{groups} groups for {c} channels")));
        }
        let gv = &self.nodes[gamma.0].value;
        let bv = &self.nodes[beta.0].value;
        if gv.shape() != [c] || bv.shape() != [c] {
            return Err(Error::shape(
                "group_norm",
                format!("affine {:?}/{:?} for {c} channels", gv.shape(), bv.shape()),
            ));
        }
        let (out, _stats) = group_norm_forward(&xv, gv, bv, groups, T::of(eps));
        Ok(self.push(out.into_dyn(), Op::GroupNorm { x, gamma, beta, groups, eps }))
    }

    /// Layer normalization over the last axis with affine of that width.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let d = *xv.shape().last().ok_or_else(|| Error::shape("layer_norm", "0-d input".to_string()))?;
        let gv = &self.nodes[gamma.0].value;
        let bv = &self.nodes[beta.0].value;
        if gv.shape() != [d] || bv.shape() != [d] {
            return Err(Error::shape(
                "layer_norm",
                format!("affine {:?}/{:?} for width {d}", gv.shape(), bv.shape()),
            ));
        }
        let shape = xv.shape().to_vec();
        let rows = xv.len() / d;
        let x2 = reshaped(xv, &[rows, d]);
        let x2 = x2.into_dimensionality::<Ix2>().unwrap();
        let epsv = T::of(eps);
        let mut out = Array2::<T>::zeros((rows, d));
        for r in 0..rows {
            let row = x2.row(r);
            let mu = row.sum() / T::of(d as f64);
            let var = row.mapv(|v| (v - mu) * (v - mu)).sum() / T::of(d as f64);
            let inv = (var + epsv).sqrt().recip();
            for j in 0..d {
                let xhat = (row[j] - mu) * inv;
                out[[r, j]] = gv[[j]] * xhat + bv[[j]];
            }
        }
        let value = reshaped(&out.into_dyn(), &shape);
        Ok(self.push(value, Op::LayerNorm { x, gamma, beta, eps }))
    }

    /// Add a `[d]` bias to the last axis of `[..., d]`.
    pub fn add_bias_last(&mut self, x: Var, b: Var) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let bv = &self.nodes[b.0].value;
        let d = *xv.shape().last().unwrap_or(&0);
        if bv.shape() != [d] {
            return Err(Error::shape(
                "add_bias_last",
                format!("bias {:?} for {:?}", bv.shape(), xv.shape()),
            ));
        }
        let mut value = xv.clone();
        for mut lane in value.lanes_mut(Axis(xv.ndim() - 1)) {
            for (o, bi) in lane.iter_mut().zip(bv.iter()) {
                *o = *o + *bi;
            }
        }
        Ok(self.push(value, Op::AddBiasLast(x, b)))
    }

    /// Add a `[c]` bias to every (n, h, w) position of `[n,c,h,w]`.
    pub fn add_chan(&mut self, x: Var, b: Var) -> Result<Var> {
        let xv = as4(&self.nodes[x.0].value, "add_chan")?;
        let bv = &self.nodes[b.0].value;
        let c = xv.shape()[1];
        if bv.shape() != [c] {
            return Err(Error::shape(
                "add_chan",
                format!("bias {:?} for {:?}", bv.shape(), xv.shape()),
            ));
        }
        let mut value = xv.to_owned();
        for ci in 0..c {
            let bvc = bv[[ci]];
            value.slice_mut(s![.., ci, .., ..]).mapv_inplace(|v| v + bvc);
        }
        Ok(self.push(value.into_dyn(), Op::AddChan(x, b)))
    }

    /// Multiply `[n,c,h,w]` by a per-sample channel gate `[n,c]`.
    pub fn mul_chan_gate(&mut self, x: Var, g: Var) -> Result<Var> {
        let xv = as4(&self.nodes[x.0].value, "mul_chan_gate")?;
        let gv = as2(&self.nodes[g.0].value, "mul_chan_gate")?;
        let (n, c) = (xv.shape()[0], xv.shape()[1]);
        if gv.shape() != [n, c] {
            return Err(Error::shape(
                "mul_chan_gate",
                format!("gate {:?} for {:?}", gv.shape(), xv.shape()),
            ));
        }
        let mut value = xv.to_owned();
        for i in 0..n {
            for ci in 0..c {
                let gvc = gv[[i, ci]];
                value.slice_mut(s![i, ci, .., ..]).mapv_inplace(|v| v * gvc);
            }
        }
        Ok(self.push(value.into_dyn(), Op::MulChanGate(x, g)))
    }

    /// Multiply `[n,c,h,w]` by a per-sample spatial gate `[n,1,h,w]`.
    pub fn mul_spat_gate(&mut self, x: Var, g: Var) -> Result<Var> {
        let xv = as4(&self.nodes[x.0].value, "mul_spat_gate")?;
        let gv = as4(&self.nodes[g.0].value, "mul_spat_gate")?;
        let (n, _c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
        if gv.shape() != [n, 1, h, w] {
            return Err(Error::shape(
                "mul_spat_gate",
                format!("gate {:?} for {:?}", gv.shape(), xv.shape()),
            ));
        }
        let mut value = xv.to_owned();
        let c = xv.shape()[1];
        for i in 0..n {
            for ci in 0..c {
                let mut sl = value.slice_mut(s![i, ci, .., ..]);
                sl.zip_mut_with(&gv.slice(s![i, 0, .., ..]), |o, &gg| *o = *o * gg);
            }
        }
        Ok(self.push(value.into_dyn(), Op::MulSpatGate(x, g)))
    }

    /// Mean over the spatial axes: `[n,c,h,w] → [n,c]`.
    pub fn spatial_mean(&mut self, x: Var) -> Result<Var> {
        let xv = as4(&self.nodes[x.0].value, "spatial_mean")?;
        let value = xv
            .sum_axis(Axis(3))
            .sum_axis(Axis(2))
            .mapv(|v| v / T::of((xv.shape()[2] * xv.shape()[3]) as f64));
        Ok(self.push(value.into_dyn(), Op::SpatialMean(x)))
    }

    /// Max over the spatial axes: `[n,c,h,w] → [n,c]`. First maximum wins
    /// on ties, in row-major order, which keeps the backward deterministic.
    pub fn spatial_max(&mut self, x: Var) -> Result<Var> {
        let xv = as4(&self.nodes[x.0].value, "spatial_max")?;
        let (n, c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
        let mut value = Array2::<T>::zeros((n, c));
        let mut argmax = vec![0usize; n * c];
        for i in 0..n {
            for ci in 0..c {
                let mut best = xv[[i, ci, 0, 0]];
                let mut pos = 0usize;
                for y in 0..h {
                    for xw in 0..w {
                        let v = xv[[i, ci, y, xw]];
                        if v > best {
                            best = v;
                            pos = y * w + xw;
                        }
                    }
                }
                value[[i, ci]] = best;
                argmax[i * c + ci] = pos;
            }
        }
        Ok(self.push(value.into_dyn(), Op::SpatialMax { x, argmax }))
    }

    /// Mean over channels: `[n,c,h,w] → [n,1,h,w]`.
    pub fn chan_mean(&mut self, x: Var) -> Result<Var> {
        let xv = as4(&self.nodes[x.0].value, "chan_mean")?;
        let c = xv.shape()[1];
        let value = xv
            .sum_axis(Axis(1))
            .insert_axis(Axis(1))
            .mapv(|v| v / T::of(c as f64));
        Ok(self.push(value.into_dyn(), Op::ChanMean(x)))
    }

    /// Max over channels: `[n,c,h,w] → [n,1,h,w]`; first maximum wins.
    pub fn chan_max(&mut self, x: Var) -> Result<Var> {
        let xv = as4(&self.nodes[x.0].value, "chan_max")?;
        let (n, c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
        let mut value = Array4::<T>::zeros((n, 1, h, w));
        let mut argmax = vec![0usize; n * h * w];
        for i in 0..n {
            for y in 0..h {
                for xw in 0..w {
                    let mut best = xv[[i, 0, y, xw]];
                    let mut pos = 0usize;
                    for ci in 1..c {
                        let v = xv[[i, ci, y, xw]];
                        if v > best {
                            best = v;
                            pos = ci;
                        }
                    }
                    value[[i, 0, y, xw]] = best;
                    argmax[(i * h + y) * w + xw] = pos;
                }
            }
        }
        Ok(self.push(value.into_dyn(), Op::ChanMax { x, argmax }))
    }

    /// Mean of all entries, as a 0-d scalar node.
    pub fn mean_all(&mut self, x: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let m = xv.sum() / T::of(xv.len() as f64);
        let value = ArrayD::from_elem(IxDyn(&[]), m);
        self.push(value, Op::MeanAll(x))
    }

    /// Fused mean squared error between two same-shape tensors (0-d output).
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mse", a, b)?;
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let mut acc = T::zero();
        for (x, y) in av.iter().zip(bv.iter()) {
            let d = *x - *y;
            acc = acc + d * d;
        }
        let m = acc / T::of(av.len() as f64);
        let value = ArrayD::from_elem(IxDyn(&[]), m);
        Ok(self.push(value, Op::Mse(a, b)))
    }

    /// Reverse sweep from a scalar loss. Returns per-node gradients.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::shape("backward", "loss must be a scalar".to_string()));
        }
        let mut slots: Vec<Option<ArrayD<T>>> = Vec::with_capacity(self.nodes.len());
        slots.resize_with(self.nodes.len(), || None);
        slots[loss.0] = Some(ArrayD::from_elem(self.nodes[loss.0].value.raw_dim(), T::one()));

        for idx in (0..=loss.0).rev() {
            let Some(dy) = slots[idx].clone() else { continue };
            match &self.nodes[idx].op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    acc(&mut slots, *a, dy.clone());
                    acc(&mut slots, *b, dy);
                }
                Op::Sub(a, b) => {
                    acc(&mut slots, *a, dy.clone());
                    acc(&mut slots, *b, dy.mapv(|v| -v));
                }
                Op::Mul(a, b) => {
                    let ga = &dy * &self.nodes[b.0].value;
                    let gb = &dy * &self.nodes[a.0].value;
                    acc(&mut slots, *a, ga);
                    acc(&mut slots, *b, gb);
                }
                Op::Scale(x, c) => {
                    acc(&mut slots, *x, dy.mapv(|v| v * T::of(*c)));
                }
                Op::Matmul(a, b) => {
                    let dyv = as2(&dy, "matmul.bwd").unwrap();
                    let av = as2(&self.nodes[a.0].value, "matmul.bwd").unwrap();
                    let bv = as2(&self.nodes[b.0].value, "matmul.bwd").unwrap();
                    acc(&mut slots, *a, dyv.dot(&bv.t()).into_dyn());
                    acc(&mut slots, *b, av.t().dot(&dyv).into_dyn());
                }
                Op::Attend { q, k, v, scale, probs } => {
                    let dyv = dy.view().into_dimensionality::<Ix3>().unwrap();
                    let qv = self.nodes[q.0].value.view().into_dimensionality::<Ix3>().unwrap();
                    let kv = self.nodes[k.0].value.view().into_dimensionality::<Ix3>().unwrap();
                    let vv = self.nodes[v.0].value.view().into_dimensionality::<Ix3>().unwrap();
                    let (b, _s, _d) = (qv.shape()[0], qv.shape()[1], qv.shape()[2]);
                    let mut dq = Array3::<T>::zeros(qv.raw_dim());
                    let mut dk = Array3::<T>::zeros(kv.raw_dim());
                    let mut dv = Array3::<T>::zeros(vv.raw_dim());
                    let sc = T::of(*scale);
                    for bi in 0..b {
                        let dyb = dyv.index_axis(Axis(0), bi);
                        let pb = probs.index_axis(Axis(0), bi);
                        let qb = qv.index_axis(Axis(0), bi);
                        let kb = kv.index_axis(Axis(0), bi);
                        let vb = vv.index_axis(Axis(0), bi);
                        dv.index_axis_mut(Axis(0), bi).assign(&pb.t().dot(&dyb));
                        let dp = dyb.dot(&vb.t());
                        // softmax backward per row
                        let rowdot = (&dp * &pb).sum_axis(Axis(1));
                        let mut ds = Array2::<T>::zeros(dp.raw_dim());
                        for r in 0..ds.shape()[0] {
                            let rd = rowdot[r];
                            for cidx in 0..ds.shape()[1] {
                                ds[[r, cidx]] = pb[[r, cidx]] * (dp[[r, cidx]] - rd) * sc;
                            }
                        }
                        dq.index_axis_mut(Axis(0), bi).assign(&ds.dot(&kb));
                        dk.index_axis_mut(Axis(0), bi).assign(&ds.t().dot(&qb));
                    }
                    acc(&mut slots, *q, dq.into_dyn());
                    acc(&mut slots, *k, dk.into_dyn());
                    acc(&mut slots, *v, dv.into_dyn());
                }
                Op::StackN(x) => {
                    let g = dy.sum_axis(Axis(0));
                    acc(&mut slots, *x, g);
                }
                Op::Concat { xs, axis } => {
                    let mut off = 0usize;
                    for xv in xs {
                        let len = self.nodes[xv.0].value.shape()[*axis];
                        let g = dy
                            .slice_axis(Axis(*axis), Slice::from(off..off + len))
                            .to_owned();
                        acc(&mut slots, *xv, g);
                        off += len;
                    }
                }
                Op::SliceAxis { x, axis, start, len } => {
                    let mut g = ArrayD::<T>::zeros(self.nodes[x.0].value.raw_dim());
                    g.slice_axis_mut(Axis(*axis), Slice::from(*start..start + len))
                        .assign(&dy);
                    acc(&mut slots, *x, g);
                }
                Op::Permute { x, perm } => {
                    let mut inv = vec![0usize; perm.len()];
                    for (i, &p) in perm.iter().enumerate() {
                        inv[p] = i;
                    }
                    let g = dy.view().permuted_axes(IxDyn(&inv)).to_owned();
                    acc(&mut slots, *x, g);
                }
                Op::Reshape(x) => {
                    let g = reshaped(&dy, self.nodes[x.0].value.shape());
                    acc(&mut slots, *x, g);
                }
                Op::Sigmoid(x) => {
                    let y = &self.nodes[idx].value;
                    let g = ndarray::Zip::from(&dy).and(y).map_collect(|&d, &yv| d * yv * (T::one() - yv));
                    acc(&mut slots, *x, g);
                }
                Op::Silu(x) => {
                    let xv = &self.nodes[x.0].value;
                    let g = ndarray::Zip::from(&dy).and(xv).map_collect(|&d, &xi| {
                        let s = sigmoid_scalar(xi);
                        d * (s + xi * s * (T::one() - s))
                    });
                    acc(&mut slots, *x, g);
                }
                Op::Softmax { x, axis } => {
                    let y = &self.nodes[idx].value;
                    let mut g = ArrayD::<T>::zeros(y.raw_dim());
                    ndarray::Zip::from(g.lanes_mut(Axis(*axis)))
                        .and(y.lanes(Axis(*axis)))
                        .and(dy.lanes(Axis(*axis)))
                        .for_each(|mut gl, yl, dl| {
                            let dot: T = yl.iter().zip(dl.iter()).map(|(&a, &b)| a * b).sum();
                            for ((go, &yv), &dv) in gl.iter_mut().zip(yl.iter()).zip(dl.iter()) {
                                *go = yv * (dv - dot);
                            }
                        });
                    acc(&mut slots, *x, g);
                }
                Op::Conv2d { x, w, stride, pad } => {
                    let (dx, dw) = conv2d_backward(
                        &self.nodes[x.0].value,
                        &self.nodes[w.0].value,
                        &dy,
                        *stride,
                        *pad,
                    );
                    acc(&mut slots, *x, dx);
                    acc(&mut slots, *w, dw);
                }
                Op::Upsample2x(x) => {
                    let dyv = dy.view().into_dimensionality::<Ix4>().unwrap();
                    let xs = self.nodes[x.0].value.shape();
                    let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                    let mut g = Array4::<T>::zeros((n, c, h, w));
                    for i in 0..n {
                        for ci in 0..c {
                            for y in 0..h {
                                for xw in 0..w {
                                    g[[i, ci, y, xw]] = dyv[[i, ci, 2 * y, 2 * xw]]
                                        + dyv[[i, ci, 2 * y, 2 * xw + 1]]
                                        + dyv[[i, ci, 2 * y + 1, 2 * xw]]
                                        + dyv[[i, ci, 2 * y + 1, 2 * xw + 1]];
                                }
                            }
                        }
                    }
                    acc(&mut slots, *x, g.into_dyn());
                }
                Op::GroupNorm { x, gamma, beta, groups, eps } => {
                    let (dx, dg, db) = group_norm_backward(
                        &self.nodes[x.0].value,
                        &self.nodes[gamma.0].value,
                        &dy,
                        *groups,
                        T::of(*eps),
                    );
                    acc(&mut slots, *x, dx);
                    acc(&mut slots, *gamma, dg);
                    acc(&mut slots, *beta, db);
                }
                Op::LayerNorm { x, gamma, beta, eps } => {
                    let (dx, dg, db) = layer_norm_backward(
                        &self.nodes[x.0].value,
                        &self.nodes[gamma.0].value,
                        &dy,
                        T::of(*eps),
                    );
                    acc(&mut slots, *x, dx);
                    acc(&mut slots, *gamma, dg);
                    acc(&mut slots, *beta, db);
                }
                Op::AddBiasLast(x, b) => {
                    let d = self.nodes[b.0].value.shape()[0];
                    let rows = dy.len() / d;
                    let dy2 = reshaped(&dy, &[rows, d]);
                    let db = dy2.sum_axis(Axis(0));
                    acc(&mut slots, *x, dy.clone());
                    acc(&mut slots, *b, db.into_dyn());
                }
                Op::AddChan(x, b) => {
                    let dyv = dy.view().into_dimensionality::<Ix4>().unwrap();
                    let db = dyv.sum_axis(Axis(3)).sum_axis(Axis(2)).sum_axis(Axis(0));
                    acc(&mut slots, *x, dy.clone());
                    acc(&mut slots, *b, db.into_dyn());
                }
                Op::MulChanGate(x, g) => {
                    let dyv = dy.view().into_dimensionality::<Ix4>().unwrap();
                    let xv = self.nodes[x.0].value.view().into_dimensionality::<Ix4>().unwrap();
                    let gv = self.nodes[g.0].value.view().into_dimensionality::<Ix2>().unwrap();
                    let (n, c) = (gv.shape()[0], gv.shape()[1]);
                    let mut dx = dyv.to_owned();
                    let mut dg = Array2::<T>::zeros((n, c));
                    for i in 0..n {
                        for ci in 0..c {
                            let gvc = gv[[i, ci]];
                            dx.slice_mut(s![i, ci, .., ..]).mapv_inplace(|v| v * gvc);
                            let prod = (&dyv.slice(s![i, ci, .., ..]) * &xv.slice(s![i, ci, .., ..])).sum();
                            dg[[i, ci]] = prod;
                        }
                    }
                    acc(&mut slots, *x, dx.into_dyn());
                    acc(&mut slots, *g, dg.into_dyn());
                }
                Op::MulSpatGate(x, g) => {
                    let dyv = dy.view().into_dimensionality::<Ix4>().unwrap();
                    let xv = self.nodes[x.0].value.view().into_dimensionality::<Ix4>().unwrap();
                    let gv = self.nodes[g.0].value.view().into_dimensionality::<Ix4>().unwrap();
                    let (n, c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
                    let mut dx = dyv.to_owned();
                    let mut dg = Array4::<T>::zeros((n, 1, h, w));
                    for i in 0..n {
                        for ci in 0..c {
                            let mut sl = dx.slice_mut(s![i, ci, .., ..]);
                            sl.zip_mut_with(&gv.slice(s![i, 0, .., ..]), |o, &gg| *o = *o * gg);
                            let prod = &dyv.slice(s![i, ci, .., ..]) * &xv.slice(s![i, ci, .., ..]);
                            dg.slice_mut(s![i, 0, .., ..]).zip_mut_with(&prod, |o, &p| *o = *o + p);
                        }
                    }
                    acc(&mut slots, *x, dx.into_dyn());
                    acc(&mut slots, *g, dg.into_dyn());
                }
                Op::SpatialMean(x) => {
                    let xs = self.nodes[x.0].value.shape();
                    let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                    let dyv = dy.view().into_dimensionality::<Ix2>().unwrap();
                    let inv = T::of(1.0 / (h * w) as f64);
                    let mut g = Array4::<T>::zeros((n, c, h, w));
                    for i in 0..n {
                        for ci in 0..c {
                            let v = dyv[[i, ci]] * inv;
                            g.slice_mut(s![i, ci, .., ..]).fill(v);
                        }
                    }
                    acc(&mut slots, *x, g.into_dyn());
                }
                Op::SpatialMax { x, argmax } => {
                    let xs = self.nodes[x.0].value.shape();
                    let (n, c, w) = (xs[0], xs[1], xs[3]);
                    let dyv = dy.view().into_dimensionality::<Ix2>().unwrap();
                    let mut g = Array4::<T>::zeros((xs[0], xs[1], xs[2], xs[3]));
                    for i in 0..n {
                        for ci in 0..c {
                            let pos = argmax[i * c + ci];
                            g[[i, ci, pos / w, pos % w]] = dyv[[i, ci]];
                        }
                    }
                    acc(&mut slots, *x, g.into_dyn());
                }
                Op::ChanMean(x) => {
                    let xs = self.nodes[x.0].value.shape();
                    let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                    let dyv = dy.view().into_dimensionality::<Ix4>().unwrap();
                    let inv = T::of(1.0 / c as f64);
                    let mut g = Array4::<T>::zeros((n, c, h, w));
                    for i in 0..n {
                        for ci in 0..c {
                            let mut sl = g.slice_mut(s![i, ci, .., ..]);
                            sl.zip_mut_with(&dyv.slice(s![i, 0, .., ..]), |o, &d| *o = d * inv);
                        }
                    }
                    acc(&mut slots, *x, g.into_dyn());
                }
                Op::ChanMax { x, argmax } => {
                    let xs = self.nodes[x.0].value.shape();
                    let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                    let dyv = dy.view().into_dimensionality::<Ix4>().unwrap();
                    let mut g = Array4::<T>::zeros((n, c, h, w));
                    for i in 0..n {
                        for y in 0..h {
                            for xw in 0..w {
                                let ci = argmax[(i * h + y) * w + xw];
                                g[[i, ci, y, xw]] = dyv[[i, 0, y, xw]];
                            }
                        }
                    }
                    acc(&mut slots, *x, g.into_dyn());
                }
                Op::MeanAll(x) => {
                    let xv = &self.nodes[x.0].value;
                    let d = *dy.iter().next().unwrap() / T::of(xv.len() as f64);
                    acc(&mut slots, *x, ArrayD::from_elem(xv.raw_dim(), d));
                }
                Op::Mse(a, b) => {
                    let av = &self.nodes[a.0].value;
                    let bv = &self.nodes[b.0].value;
                    let d = *dy.iter().next().unwrap() * T::of(2.0 / av.len() as f64);
                    let ga = ndarray::Zip::from(av).and(bv).map_collect(|&x, &y| d * (x - y));
                    let gb = ga.mapv(|v| -v);
                    acc(&mut slots, *a, ga);
                    acc(&mut slots, *b, gb);
                }
            }
        }
        Ok(Gradients { slots })
    }

    /// Collect gradients for every registered parameter that received one.
    /// Parameters whose subgraph did not reach the loss are absent.
    pub fn param_grads(&self, grads: &Gradients<T>) -> BTreeMap<String, ArrayD<T>> {
        let mut out = BTreeMap::new();
        for (name, &var) in &self.params {
            if let Some(g) = grads.get(var) {
                out.insert(name.clone(), g.clone());
            }
        }
        out
    }
}

fn acc<T: Real>(slots: &mut [Option<ArrayD<T>>], v: Var, g: ArrayD<T>) {
    // Keep every gradient in standard layout; permuted views would otherwise
    // leak their strides into the output maps.
    let g = if g.is_standard_layout() {
        g
    } else {
        g.as_standard_layout().to_owned()
    };
    match &mut slots[v.0] {
        Some(a) => *a += &g,
        slot @ None => *slot = Some(g),
    }
}

fn as2<'a, T: Real>(a: &'a ArrayD<T>, op: &'static str) -> Result<ArrayView2<'a, T>> {
    a.view()
        .into_dimensionality::<Ix2>()
        .map_err(|_| Error::shape(op, format!("expected rank 2, got {:?}", a.shape())))
}

fn as3<'a, T: Real>(a: &'a ArrayD<T>, op: &'static str) -> Result<ndarray::ArrayView3<'a, T>> {
    a.view()
        .into_dimensionality::<Ix3>()
        .map_err(|_| Error::shape(op, format!("expected rank 3, got {:?}", a.shape())))
}

fn as4<'a, T: Real>(a: &'a ArrayD<T>, op: &'static str) -> Result<ndarray::ArrayView4<'a, T>> {
    a.view()
        .into_dimensionality::<Ix4>()
        .map_err(|_| Error::shape(op, format!("expected rank 4, got {:?}", a.shape())))
}

fn sigmoid_scalar<T: Real>(x: T) -> T {
    // Split on sign so exp never overflows.
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Copy into a new row-major array of the target shape (logical order).
fn reshaped<T: Real>(a: &ArrayD<T>, shape: &[usize]) -> ArrayD<T> {
    let flat: Vec<T> = a.iter().cloned().collect();
    ArrayD::from_shape_vec(IxDyn(shape), flat).expect("numel checked by caller")
}

fn reshaped_view2<T: Real>(a: &ArrayD<T>, r: usize, c: usize) -> Array2<T> {
    reshaped(a, &[r, c]).into_dimensionality::<Ix2>().unwrap()
}

fn softmax_rows_inplace<T: Real>(m: &mut Array2<T>) {
    for mut row in m.rows_mut() {
        let max = row.iter().cloned().fold(T::neg_infinity(), T::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

fn pad_hw<T: Real>(x: &Array3<T>, pad: usize) -> Array3<T> {
    if pad == 0 {
        return x.clone();
    }
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut out = Array3::<T>::zeros((c, h + 2 * pad, w + 2 * pad));
    out.slice_mut(s![.., pad..pad + h, pad..pad + w]).assign(x);
    out
}

fn im2col<T: Real>(xp: &Array3<T>, k: usize, stride: usize, oh: usize, ow: usize) -> Array2<T> {
    let c = xp.shape()[0];
    let mut cols = Array2::<T>::zeros((c * k * k, oh * ow));
    for ci in 0..c {
        for di in 0..k {
            for dj in 0..k {
                let row = (ci * k + di) * k + dj;
                let mut col = 0usize;
                for oy in 0..oh {
                    let iy = oy * stride + di;
                    for ox in 0..ow {
                        cols[[row, col]] = xp[[ci, iy, ox * stride + dj]];
                        col += 1;
                    }
                }
            }
        }
    }
    cols
}

fn col2im_add<T: Real>(
    dcols: &Array2<T>,
    c: usize,
    k: usize,
    stride: usize,
    oh: usize,
    ow: usize,
    dxp: &mut Array3<T>,
) {
    for ci in 0..c {
        for di in 0..k {
            for dj in 0..k {
                let row = (ci * k + di) * k + dj;
                let mut col = 0usize;
                for oy in 0..oh {
                    let iy = oy * stride + di;
                    for ox in 0..ow {
                        dxp[[ci, iy, ox * stride + dj]] =
                            dxp[[ci, iy, ox * stride + dj]] + dcols[[row, col]];
                        col += 1;
                    }
                }
            }
        }
    }
}

fn conv2d_backward<T: Real>(
    x: &ArrayD<T>,
    w: &ArrayD<T>,
    dy: &ArrayD<T>,
    stride: usize,
    pad: usize,
) -> (ArrayD<T>, ArrayD<T>) {
    let xv = x.view().into_dimensionality::<Ix4>().unwrap();
    let wv = w.view().into_dimensionality::<Ix4>().unwrap();
    let dyv = dy.view().into_dimensionality::<Ix4>().unwrap();
    let (n, cin, h, wd) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
    let (cout, _, k, _) = (wv.shape()[0], wv.shape()[1], wv.shape()[2], wv.shape()[3]);
    let (oh, ow) = (dyv.shape()[2], dyv.shape()[3]);
    let wmat = reshaped_view2(w, cout, cin * k * k);
    let mut dwmat = Array2::<T>::zeros((cout, cin * k * k));
    let mut dx = Array4::<T>::zeros((n, cin, h, wd));
    for i in 0..n {
        let xp = pad_hw(&xv.index_axis(Axis(0), i).to_owned(), pad);
        let cols = im2col(&xp, k, stride, oh, ow);
        let dyi = reshaped_view2(&dyv.index_axis(Axis(0), i).to_owned().into_dyn(), cout, oh * ow);
        dwmat = dwmat + dyi.dot(&cols.t());
        let dcols = wmat.t().dot(&dyi);
        let mut dxp = Array3::<T>::zeros((cin, h + 2 * pad, wd + 2 * pad));
        col2im_add(&dcols, cin, k, stride, oh, ow, &mut dxp);
        dx.index_axis_mut(Axis(0), i)
            .assign(&dxp.slice(s![.., pad..pad + h, pad..pad + wd]));
    }
    let dw = reshaped(&dwmat.into_dyn(), &[cout, cin, k, k]);
    (dx.into_dyn(), dw)
}

type GnStats<T> = Vec<(T, T)>;

fn group_norm_forward<T: Real>(
    x: &Array4<T>,
    gamma: &ArrayD<T>,
    beta: &ArrayD<T>,
    groups: usize,
    eps: T,
) -> (Array4<T>, GnStats<T>) {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let cg = c / groups;
    let m = T::of((cg * h * w) as f64);
    let mut out = Array4::<T>::zeros((n, c, h, w));
    let mut stats = Vec::with_capacity(n * groups);
    for i in 0..n {
        for gi in 0..groups {
            let sl = x.slice(s![i, gi * cg..(gi + 1) * cg, .., ..]);
            let mu = sl.sum() / m;
            let var = sl.fold(T::zero(), |a, &v| a + (v - mu) * (v - mu)) / m;
            let inv = (var + eps).sqrt().recip();
            stats.push((mu, inv));
            for cc in 0..cg {
                let ch = gi * cg + cc;
                let ga = gamma[[ch]];
                let be = beta[[ch]];
                let src = x.slice(s![i, ch, .., ..]);
                let mut dst = out.slice_mut(s![i, ch, .., ..]);
                dst.zip_mut_with(&src, |o, &v| *o = ga * (v - mu) * inv + be);
            }
        }
    }
    (out, stats)
}

fn group_norm_backward<T: Real>(
    x: &ArrayD<T>,
    gamma: &ArrayD<T>,
    dy: &ArrayD<T>,
    groups: usize,
    eps: T,
) -> (ArrayD<T>, ArrayD<T>, ArrayD<T>) {
    let xv = x.view().into_dimensionality::<Ix4>().unwrap();
    let dyv = dy.view().into_dimensionality::<Ix4>().unwrap();
    let (n, c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
    let cg = c / groups;
    let m = T::of((cg * h * w) as f64);
    let mut dx = Array4::<T>::zeros((n, c, h, w));
    let mut dgamma = ndarray::Array1::<T>::zeros(c);
    let mut dbeta = ndarray::Array1::<T>::zeros(c);
    for i in 0..n {
        for gi in 0..groups {
            let sl = xv.slice(s![i, gi * cg..(gi + 1) * cg, .., ..]);
            let mu = sl.sum() / m;
            let var = sl.fold(T::zero(), |a, &v| a + (v - mu) * (v - mu)) / m;
            let inv = (var + eps).sqrt().recip();
            // Accumulate the two reductions the dx formula needs.
            let mut sum_dxhat = T::zero();
            let mut sum_dxhat_xhat = T::zero();
            for cc in 0..cg {
                let ch = gi * cg + cc;
                let ga = gamma[[ch]];
                for y in 0..h {
                    for xw in 0..w {
                        let xhat = (xv[[i, ch, y, xw]] - mu) * inv;
                        let d = dyv[[i, ch, y, xw]];
                        dgamma[ch] = dgamma[ch] + d * xhat;
                        dbeta[ch] = dbeta[ch] + d;
                        let dxhat = d * ga;
                        sum_dxhat = sum_dxhat + dxhat;
                        sum_dxhat_xhat = sum_dxhat_xhat + dxhat * xhat;
                    }
                }
            }
            for cc in 0..cg {
                let ch = gi * cg + cc;
                let ga = gamma[[ch]];
                for y in 0..h {
                    for xw in 0..w {
                        let xhat = (xv[[i, ch, y, xw]] - mu) * inv;
                        let dxhat = dyv[[i, ch, y, xw]] * ga;
                        dx[[i, ch, y, xw]] =
                            inv * (dxhat - (sum_dxhat + xhat * sum_dxhat_xhat) / m);
                    }
                }
            }
        }
    }
    (dx.into_dyn(), dgamma.into_dyn(), dbeta.into_dyn())
}

fn layer_norm_backward<T: Real>(
    x: &ArrayD<T>,
    gamma: &ArrayD<T>,
    dy: &ArrayD<T>,
    eps: T,
) -> (ArrayD<T>, ArrayD<T>, ArrayD<T>) {
    let d = *x.shape().last().unwrap();
    let rows = x.len() / d;
    let x2 = reshaped(x, &[rows, d]).into_dimensionality::<Ix2>().unwrap();
    let dy2 = reshaped(dy, &[rows, d]).into_dimensionality::<Ix2>().unwrap();
    let dm = T::of(d as f64);
    let mut dx2 = Array2::<T>::zeros((rows, d));
    let mut dgamma = ndarray::Array1::<T>::zeros(d);
    let mut dbeta = ndarray::Array1::<T>::zeros(d);
    for r in 0..rows {
        let row = x2.row(r);
        let mu = row.sum() / dm;
        let var = row.fold(T::zero(), |a, &v| a + (v - mu) * (v - mu)) / dm;
        let inv = (var + eps).sqrt().recip();
        let mut sum_dxhat = T::zero();
        let mut sum_dxhat_xhat = T::zero();
        for j in 0..d {
            let xhat = (row[j] - mu) * inv;
            let dyj = dy2[[r, j]];
            dgamma[j] = dgamma[j] + dyj * xhat;
            dbeta[j] = dbeta[j] + dyj;
            let dxhat = dyj * gamma[[j]];
            sum_dxhat = sum_dxhat + dxhat;
            sum_dxhat_xhat = sum_dxhat_xhat + dxhat * xhat;
        }
        for j in 0..d {
            let xhat = (row[j] - mu) * inv;
            let dxhat = dy2[[r, j]] * gamma[[j]];
            dx2[[r, j]] = inv * (dxhat - (sum_dxhat + xhat * sum_dxhat_xhat) / dm);
        }
    }
    let dx = reshaped(&dx2.into_dyn(), x.shape());
    (dx, dgamma.into_dyn(), dbeta.into_dyn())
}
