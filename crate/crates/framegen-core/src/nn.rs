//! Parameter storage, initialization, and the small layer vocabulary the
//! models are assembled from, plus the AdamW optimizer.

use std::collections::BTreeMap;

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tape::{Graph, Var};

/// Named parameter tensors. BTreeMap keeps iteration order stable, which
/// keeps training and serialization deterministic.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T: Real> {
    map: BTreeMap<String, ArrayD<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { map: BTreeMap::new() }
    }

    pub fn get(&self, name: &str) -> Result<&ArrayD<T>> {
        self.map
            .get(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut ArrayD<T>> {
        self.map
            .get_mut(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    /// Insert or replace a tensor.
    pub fn insert(&mut self, name: impl Into<String>, value: ArrayD<T>) {
        self.map.insert(name.into(), value);
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ArrayD<T>)> {
        self.map.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    /// Total number of scalar entries across all tensors.
    pub fn scalar_count(&self) -> usize {
        self.map.values().map(|v| v.len()).sum()
    }

    /// Copy every tensor under `src.` to the same suffix under `dst.`,
    /// bit for bit. Used to replicate encoder stages.
    pub fn copy_prefixed(&mut self, src: &str, dst: &str) {
        let src_dot = format!("{src}.");
        let moved: Vec<(String, ArrayD<T>)> = self
            .map
            .range(src_dot.clone()..)
            .take_while(|(k, _)| k.starts_with(&src_dot))
            .map(|(k, v)| (format!("{dst}.{}", &k[src_dot.len()..]), v.clone()))
            .collect();
        for (k, v) in moved {
            self.map.insert(k, v);
        }
    }

    /// Elementwise cast of the whole store.
    pub fn cast<B: Real>(&self) -> ParamStore<B> {
        let mut out = ParamStore::new();
        for (k, v) in &self.map {
            out.insert(k.clone(), crate::real::cast::<T, B>(v));
        }
        out
    }
}

/// Gaussian init with the given standard deviation.
pub fn randn<T: Real, R: Rng>(rng: &mut R, shape: &[usize], std: f64) -> ArrayD<T> {
    let normal = StandardNormal;
    ArrayD::from_shape_fn(IxDyn(shape), |_| {
        let z: f64 = normal.sample(rng);
        T::of(z * std)
    })
}

/// Kaiming-style uniform init, `U(-sqrt(6/fan_in), +sqrt(6/fan_in))`.
pub fn kaiming_uniform<T: Real, R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize) -> ArrayD<T> {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).expect("valid bound");
    ArrayD::from_shape_fn(IxDyn(shape), |_| T::of(dist.sample(rng)))
}

pub fn zeros<T: Real>(shape: &[usize]) -> ArrayD<T> {
    ArrayD::zeros(IxDyn(shape))
}

pub fn ones<T: Real>(shape: &[usize]) -> ArrayD<T> {
    ArrayD::from_elem(IxDyn(shape), T::one())
}

/// 2-D convolution layer description. Parameters live in the store under
/// `{name}.w` and `{name}.b`.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub zero_init: bool,
}

impl Conv2d {
    pub fn new(name: impl Into<String>, cin: usize, cout: usize, k: usize, stride: usize, pad: usize) -> Self {
        Conv2d { name: name.into(), cin, cout, k, stride, pad, zero_init: false }
    }

    /// 1x1 convolution whose weights and bias start at exactly zero.
    pub fn zero(name: impl Into<String>, cin: usize, cout: usize) -> Self {
        Conv2d { name: name.into(), cin, cout, k: 1, stride: 1, pad: 0, zero_init: true }
    }

    pub fn init<T: Real, R: Rng>(&self, ps: &mut ParamStore<T>, rng: &mut R) {
        let wshape = [self.cout, self.cin, self.k, self.k];
        let w = if self.zero_init {
            zeros::<T>(&wshape)
        } else {
            kaiming_uniform(rng, &wshape, self.cin * self.k * self.k)
        };
        ps.insert(format!("{}.w", self.name), w);
        ps.insert(format!("{}.b", self.name), zeros::<T>(&[self.cout]));
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(ps, &format!("{}.w", self.name))?;
        let b = g.param(ps, &format!("{}.b", self.name))?;
        let y = g.conv2d(x, w, self.stride, self.pad)?;
        g.add_chan(y, b)
    }
}

/// Fully connected layer; weight is `[din, dout]` so tokens multiply from
/// the left.
#[derive(Clone, Debug)]
pub struct Dense {
    pub name: String,
    pub din: usize,
    pub dout: usize,
    pub zero_init: bool,
}

impl Dense {
    pub fn new(name: impl Into<String>, din: usize, dout: usize) -> Self {
        Dense { name: name.into(), din, dout, zero_init: false }
    }

    /// Dense layer whose weights and bias start at exactly zero.
    pub fn zero(name: impl Into<String>, din: usize, dout: usize) -> Self {
        Dense { name: name.into(), din, dout, zero_init: true }
    }

    pub fn init<T: Real, R: Rng>(&self, ps: &mut ParamStore<T>, rng: &mut R) {
        let w = if self.zero_init {
            zeros::<T>(&[self.din, self.dout])
        } else {
            kaiming_uniform(rng, &[self.din, self.dout], self.din)
        };
        ps.insert(format!("{}.w", self.name), w);
        ps.insert(format!("{}.b", self.name), zeros::<T>(&[self.dout]));
    }

    /// Forward for a 2-D `[rows, din]` input.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(ps, &format!("{}.w", self.name))?;
        let b = g.param(ps, &format!("{}.b", self.name))?;
        let y = g.matmul(x, w)?;
        g.add_bias_last(y, b)
    }

    /// Forward for a 3-D `[b, s, din]` token tensor.
    pub fn forward_tokens<T: Real>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Result<Var> {
        let shape = g.value(x).shape().to_vec();
        let (b, s) = (shape[0], shape[1]);
        let flat = g.reshape(x, &[b * s, self.din])?;
        let y = self.forward(g, ps, flat)?;
        g.reshape(y, &[b, s, self.dout])
    }
}

/// Group normalization with learned per-channel affine.
#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub name: String,
    pub channels: usize,
    pub groups: usize,
    pub eps: f64,
}

impl GroupNorm {
    pub fn new(name: impl Into<String>, channels: usize, groups: usize) -> Self {
        GroupNorm { name: name.into(), channels, groups, eps: 1e-5 }
    }

    pub fn init<T: Real>(&self, ps: &mut ParamStore<T>) {
        ps.insert(format!("{}.g", self.name), ones::<T>(&[self.channels]));
        ps.insert(format!("{}.b", self.name), zeros::<T>(&[self.channels]));
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Result<Var> {
        let gamma = g.param(ps, &format!("{}.g", self.name))?;
        let beta = g.param(ps, &format!("{}.b", self.name))?;
        g.group_norm(x, gamma, beta, self.groups, self.eps)
    }
}

/// Layer normalization over the last axis.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub name: String,
    pub dim: usize,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(name: impl Into<String>, dim: usize) -> Self {
        LayerNorm { name: name.into(), dim, eps: 1e-5 }
    }

    pub fn init<T: Real>(&self, ps: &mut ParamStore<T>) {
        ps.insert(format!("{}.g", self.name), ones::<T>(&[self.dim]));
        ps.insert(format!("{}.b", self.name), zeros::<T>(&[self.dim]));
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Result<Var> {
        let gamma = g.param(ps, &format!("{}.g", self.name))?;
        let beta = g.param(ps, &format!("{}.b", self.name))?;
        g.layer_norm(x, gamma, beta, self.eps)
    }
}

/// One layer of a plain sequential network.
#[derive(Clone, Debug)]
pub enum LayerSpec {
    Dense { name: String, din: usize, dout: usize },
    Conv2d { name: String, cin: usize, cout: usize, k: usize, stride: usize, pad: usize },
    GroupNorm { name: String, channels: usize, groups: usize },
    Sigmoid,
    Silu,
    /// Nearest-neighbor 2x spatial upsampling.
    Upsample2x,
    /// 1x1 convolution initialized to exactly zero.
    ZeroConv2d { name: String, cin: usize, cout: usize },
}

/// A sequential network over the [`LayerSpec`] vocabulary.
#[derive(Clone, Debug, Default)]
pub struct Net {
    pub layers: Vec<LayerSpec>,
}

impl Net {
    pub fn new(layers: Vec<LayerSpec>) -> Self {
        Net { layers }
    }

    /// Create all parameters for this net in `ps`.
    pub fn init<T: Real, R: Rng>(&self, ps: &mut ParamStore<T>, rng: &mut R) {
        for layer in &self.layers {
            match layer {
                LayerSpec::Dense { name, din, dout } => {
                    Dense::new(name.clone(), *din, *dout).init(ps, rng)
                }
                LayerSpec::Conv2d { name, cin, cout, k, stride, pad } => {
                    Conv2d::new(name.clone(), *cin, *cout, *k, *stride, *pad).init(ps, rng)
                }
                LayerSpec::GroupNorm { name, channels, groups } => {
                    GroupNorm::new(name.clone(), *channels, *groups).init(ps)
                }
                LayerSpec::ZeroConv2d { name, cin, cout } => {
                    Conv2d::zero(name.clone(), *cin, *cout).init(ps, rng)
                }
                LayerSpec::Sigmoid | LayerSpec::Silu | LayerSpec::Upsample2x => {}
            }
        }
    }

    /// Run the net on a recorded input node.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, mut x: Var) -> Result<Var> {
        for layer in &self.layers {
            x = match layer {
                LayerSpec::Dense { name, din, dout } => {
                    Dense::new(name.clone(), *din, *dout).forward(g, ps, x)?
                }
                LayerSpec::Conv2d { name, cin, cout, k, stride, pad } => {
                    Conv2d::new(name.clone(), *cin, *cout, *k, *stride, *pad).forward(g, ps, x)?
                }
                LayerSpec::GroupNorm { name, channels, groups } => {
                    GroupNorm::new(name.clone(), *channels, *groups).forward(g, ps, x)?
                }
                LayerSpec::ZeroConv2d { name, cin, cout } => {
                    Conv2d::zero(name.clone(), *cin, *cout).forward(g, ps, x)?
                }
                LayerSpec::Sigmoid => g.sigmoid(x),
                LayerSpec::Silu => g.silu(x),
                LayerSpec::Upsample2x => g.upsample2x(x)?,
            };
        }
        Ok(x)
    }
}

/// Output of [`forward_backward`].
pub struct FwdBwd<T: Real> {
    pub y: ArrayD<T>,
    pub grads: BTreeMap<String, ArrayD<T>>,
    pub dx: ArrayD<T>,
}

/// Run `net` forward and pull one vector-Jacobian product back through it.
///
/// `seed` is the cotangent dL/dy; `None` means all ones, i.e. gradients of
/// `sum(y)`. Returns the output, per-parameter gradients, and dL/dx.
pub fn forward_backward<T: Real>(
    net: &Net,
    ps: &ParamStore<T>,
    x: &ArrayD<T>,
    seed: Option<&ArrayD<T>>,
) -> Result<FwdBwd<T>> {
    let mut g = Graph::<T>::new();
    let xv = g.leaf(x.clone());
    let y = net.forward(&mut g, ps, xv)?;
    let yval = g.value(y).clone();
    let seed_arr = match seed {
        Some(s) => {
            if s.shape() != yval.shape() {
                return Err(Error::shape(
                    "forward_backward",
                    format!("seed {:?} vs output {:?}", s.shape(), yval.shape()),
                ));
            }
            s.clone()
        }
        None => ArrayD::from_elem(yval.raw_dim(), T::one()),
    };
    // VJP trick: sum(y ⊙ seed) is a scalar whose gradient is exactly the
    // requested cotangent pull-back.
    let sv = g.leaf(seed_arr);
    let prod = g.mul(y, sv)?;
    let mean = g.mean_all(prod);
    let loss = g.scale(mean, yval.len() as f64);
    let grads = g.backward(loss)?;
    let dx = grads
        .get(xv)
        .cloned()
        .unwrap_or_else(|| ArrayD::zeros(x.raw_dim()));
    Ok(FwdBwd { y: yval, grads: g.param_grads(&grads), dx })
}

/// AdamW configuration. Weight decay is decoupled.
#[derive(Clone, Copy, Debug)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

/// AdamW over a [`ParamStore`]. Moment tensors appear lazily the first time
/// a parameter receives a gradient.
pub struct AdamW<T: Real> {
    pub cfg: AdamWConfig,
    step: u64,
    m: BTreeMap<String, ArrayD<T>>,
    v: BTreeMap<String, ArrayD<T>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(cfg: AdamWConfig) -> Self {
        AdamW { cfg, step: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Apply one update. Parameters without a gradient entry are untouched.
    pub fn step(&mut self, ps: &mut ParamStore<T>, grads: &BTreeMap<String, ArrayD<T>>) -> Result<()> {
        self.step += 1;
        let b1 = T::of(self.cfg.beta1);
        let b2 = T::of(self.cfg.beta2);
        let lr = T::of(self.cfg.lr);
        let eps = T::of(self.cfg.eps);
        let wd = T::of(self.cfg.weight_decay);
        let bc1 = T::of(1.0 - self.cfg.beta1.powi(self.step as i32));
        let bc2 = T::of(1.0 - self.cfg.beta2.powi(self.step as i32));
        for (name, grad) in grads {
            let p = ps.get_mut(name)?;
            if p.shape() != grad.shape() {
                return Err(Error::shape(
                    "adamw",
                    format!("param {name}: {:?} vs grad {:?}", p.shape(), grad.shape()),
                ));
            }
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(grad.raw_dim()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(grad.raw_dim()));
            ndarray::Zip::from(p)
                .and(m)
                .and(v)
                .and(grad)
                .for_each(|pv, mv, vv, &gv| {
                    *mv = b1 * *mv + (T::one() - b1) * gv;
                    *vv = b2 * *vv + (T::one() - b2) * gv * gv;
                    let mhat = *mv / bc1;
                    let vhat = *vv / bc2;
                    *pv = *pv - lr * (mhat / (vhat.sqrt() + eps) + wd * *pv);
                });
        }
        Ok(())
    }
}
