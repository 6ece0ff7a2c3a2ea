//! Latent-diffusion video frame interpolation engine.
//!
//! Given two keyframes, the engine synthesizes the frames between them by
//! denoising in the latent space of a small frozen autoencoder, guided by a
//! dual-branch conditional encoder (spatial keyframe latents + temporal
//! flow/depth cues) fused by CBAM and cross-attention, with cross-frame
//! attention inside the conditioning path and zero-initialized injection
//! into the denoiser.
//!
//! Everything is CPU-only, deterministic under a fixed seed, and written
//! against a hand-rolled reverse-mode tape (see [`tape`]).

pub mod attention;
pub mod condencoder;
pub mod config;
pub mod data;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod latent;
pub mod motion;
pub mod nn;
pub mod pipeline;
pub mod real;
pub mod tape;

pub use error::{Error, FormatErrorKind, Result};
pub use real::Real;
