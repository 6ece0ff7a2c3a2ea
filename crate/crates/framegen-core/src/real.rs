use ndarray::{ArrayD, NdFloat};

/// Scalar type the whole engine is generic over.
///
/// Training runs in `f32` for speed; gradient checking and the numerically
/// sensitive diffusion identities run in `f64`. Everything that matters is
/// written once against this trait.
pub trait Real: NdFloat + std::iter::Sum {
    /// Lossy conversion from `f64` (literal and RNG plumbing).
    fn of(v: f64) -> Self;
    /// Widening conversion to `f64` for accumulation and reporting.
    fn to_f64(self) -> f64;
}

impl Real for f32 {
    fn of(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn of(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
}

/// Elementwise cast between scalar types, via `f64`.
pub fn cast<A: Real, B: Real>(x: &ArrayD<A>) -> ArrayD<B> {
    x.mapv(|v| B::of(v.to_f64()))
}
