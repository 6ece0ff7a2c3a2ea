//! Toy convolutional autoencoder mapping RGB frames to a factor-4
//! downsampled latent space and back. Trained once on reconstruction,
//! then frozen while the diffusion model trains on its latents.

use ndarray::ArrayD;

use crate::error::{Error, Result};
use crate::nn::{LayerSpec, Net, ParamStore};
use crate::real::Real;
use crate::tape::{Graph, Var};

/// Spatial downsampling factor between frames and latents.
pub const DOWN_FACTOR: usize = 4;

/// Encoder/decoder pair with named parameters under `{name}.enc.*` and
/// `{name}.dec.*`. The decoder ends in a sigmoid, so outputs live in
/// (0,1) and stay differentiable (no hard clamp).
#[derive(Clone, Debug)]
pub struct Autoencoder {
    pub name: String,
    pub latent_channels: usize,
    /// Channel width of the first encoder stage; the second stage doubles it.
    pub base_width: usize,
    enc: Net,
    dec: Net,
}

impl Autoencoder {
    pub fn new(name: impl Into<String>, latent_channels: usize, base_width: usize) -> Result<Self> {
        if latent_channels == 0 || base_width == 0 {
            return Err(Error::Config(
                "autoencoder needs latent_channels and base_width >= 1".into(),
            ));
        }
        let name = name.into();
        let (w1, w2) = (base_width, base_width * 2);
        let enc = Net::new(vec![
            LayerSpec::Conv2d { name: format!("{name}.enc.c1"), cin: 3, cout: w1, k: 3, stride: 2, pad: 1 },
            LayerSpec::Silu,
            LayerSpec::Conv2d { name: format!("{name}.enc.c2"), cin: w1, cout: w2, k: 3, stride: 2, pad: 1 },
            LayerSpec::Silu,
            LayerSpec::Conv2d { name: format!("{name}.enc.c3"), cin: w2, cout: latent_channels, k: 3, stride: 1, pad: 1 },
        ]);
        let dec = Net::new(vec![
            LayerSpec::Conv2d { name: format!("{name}.dec.c1"), cin: latent_channels, cout: w2, k: 3, stride: 1, pad: 1 },
            LayerSpec::Silu,
            LayerSpec::Upsample2x,
            LayerSpec::Conv2d { name: format!("{name}.dec.c2"), cin: w2, cout: w1, k: 3, stride: 1, pad: 1 },
            LayerSpec::Silu,
            LayerSpec::Upsample2x,
            LayerSpec::Conv2d { name: format!("{name}.dec.c3"), cin: w1, cout: w1, k: 3, stride: 1, pad: 1 },
            LayerSpec::Silu,
            LayerSpec::Conv2d { name: format!("{name}.dec.c4"), cin: w1, cout: 3, k: 3, stride: 1, pad: 1 },
            LayerSpec::Sigmoid,
        ]);
        Ok(Autoencoder { name, latent_channels, base_width, enc, dec })
    }

    pub fn init<T: Real, R: rand::Rng>(&self, ps: &mut ParamStore<T>, rng: &mut R) {
        self.enc.init(ps, rng);
        self.dec.init(ps, rng);
    }

    /// Encode frames `[N,3,H,W]` in [0,1] to latents `[N,C,H/4,W/4]`.
    pub fn encode<T: Real>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Result<Var> {
        let shape = g.value(x).shape().to_vec();
        if shape.len() != 4 || shape[1] != 3 {
            return Err(Error::shape("encode", format!("{shape:?} vs [N,3,H,W]")));
        }
        if shape[2] % DOWN_FACTOR != 0 || shape[3] % DOWN_FACTOR != 0 {
            return Err(Error::Invalid(format!(
                "frame dims {}x{} must be divisible by {DOWN_FACTOR}",
                shape[2], shape[3]
            )));
        }
        let eps = T::of(1e-6);
        for &v in g.value(x).iter() {
            if v < -eps || v > T::one() + eps {
                return Err(Error::Invalid(format!(
                    "encode input outside [0,1]: {}",
                    v.to_f64()
                )));
            }
        }
        self.enc.forward(g, ps, x)
    }

    /// Decode latents `[N,C,h,w]` to frames `[N,3,4h,4w]` in (0,1).
    pub fn decode<T: Real>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, z: Var) -> Result<Var> {
        let shape = g.value(z).shape().to_vec();
        if shape.len() != 4 || shape[1] != self.latent_channels {
            return Err(Error::shape(
                "decode",
                format!("{shape:?} vs [N,{},h,w]", self.latent_channels),
            ));
        }
        self.dec.forward(g, ps, z)
    }

    /// Encode without keeping a tape; for the frozen-autoencoder phase.
    pub fn encode_detached<T: Real>(&self, ps: &ParamStore<T>, x: &ArrayD<T>) -> Result<ArrayD<T>> {
        let mut g = Graph::new();
        let xv = g.leaf(x.clone());
        let z = self.encode(&mut g, ps, xv)?;
        Ok(g.value(z).clone())
    }

    /// Decode without keeping a tape.
    pub fn decode_detached<T: Real>(&self, ps: &ParamStore<T>, z: &ArrayD<T>) -> Result<ArrayD<T>> {
        let mut g = Graph::new();
        let zv = g.leaf(z.clone());
        let x = self.decode(&mut g, ps, zv)?;
        Ok(g.value(x).clone())
    }
}

/// Mean squared reconstruction error as a graph node.
pub fn recon_loss<T: Real>(g: &mut Graph<T>, x: Var, x_hat: Var) -> Result<Var> {
    g.mse(x, x_hat)
}
