//! PSNR and SSIM over `[3,H,W]` frames in [0,1].

use ndarray::{Array2, ArrayView3};

use crate::error::{Error, Result};

/// PSNR cap reported for identical inputs (and as an upper bound).
pub const PSNR_CAP: f64 = 99.0;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;
/// Dynamic range of our frames.
const SSIM_L: f64 = 1.0;

fn check_frames(op: &'static str, a: &ArrayView3<f32>, b: &ArrayView3<f32>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    if a.shape()[0] != 3 {
        return Err(Error::shape(op, format!("expected [3,H,W], got {:?}", a.shape())));
    }
    Ok(())
}

/// Peak signal-to-noise ratio in dB, capped at 99.0.
pub fn psnr(a: &ArrayView3<f32>, b: &ArrayView3<f32>) -> Result<f64> {
    check_frames("psnr", a, b)?;
    let mut mse = 0.0f64;
    for (&x, &y) in a.iter().zip(b.iter()) {
        let d = x as f64 - y as f64;
        mse += d * d;
    }
    mse /= a.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

fn gaussian_kernel() -> [[f64; SSIM_WINDOW]; SSIM_WINDOW] {
    let mut k = [[0.0; SSIM_WINDOW]; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, row) in k.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (di, dj) = (i as f64 - c, j as f64 - c);
            *v = (-(di * di + dj * dj) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
            sum += *v;
        }
    }
    for row in k.iter_mut() {
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    k
}

fn to_gray(a: &ArrayView3<f32>) -> Array2<f64> {
    let (h, w) = (a.shape()[1], a.shape()[2]);
    Array2::from_shape_fn((h, w), |(y, x)| {
        (a[[0, y, x]] as f64 + a[[1, y, x]] as f64 + a[[2, y, x]] as f64) / 3.0
    })
}

/// Structural similarity: 11x11 gaussian window (sigma 1.5), K1=0.01,
/// K2=0.03, L=1, channel-mean grayscale, mean over valid windows.
pub fn ssim(a: &ArrayView3<f32>, b: &ArrayView3<f32>) -> Result<f64> {
    check_frames("ssim", a, b)?;
    let (h, w) = (a.shape()[1], a.shape()[2]);
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Invalid(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    let ga = to_gray(a);
    let gb = to_gray(b);
    let kernel = gaussian_kernel();
    let c1 = (SSIM_K1 * SSIM_L) * (SSIM_K1 * SSIM_L);
    let c2 = (SSIM_K2 * SSIM_L) * (SSIM_K2 * SSIM_L);

    let mut total = 0.0;
    let mut count = 0usize;
    for y0 in 0..=(h - SSIM_WINDOW) {
        for x0 in 0..=(w - SSIM_WINDOW) {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for (i, row) in kernel.iter().enumerate() {
                for (j, &kw) in row.iter().enumerate() {
                    let va = ga[[y0 + i, x0 + j]];
                    let vb = gb[[y0 + i, x0 + j]];
                    ma += kw * va;
                    mb += kw * vb;
                    saa += kw * va * va;
                    sbb += kw * vb * vb;
                    sab += kw * va * vb;
                }
            }
            let var_a = saa - ma * ma;
            let var_b = sbb - mb * mb;
            let cov = sab - ma * mb;
            let s = ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                / ((ma * ma + mb * mb + c1) * (var_a + var_b + c2));
            total += s;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_frame(seed: u64, h: usize, w: usize) -> Array3<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array3::from_shape_fn((3, h, w), |_| rng.random_range(0.0..1.0))
    }

    #[test]
    fn identical_frames_hit_the_caps() {
        let a = random_frame(1, 16, 16);
        assert_eq!(psnr(&a.view(), &a.view()).unwrap(), 99.0);
        assert!((ssim(&a.view(), &a.view()).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn psnr_known_values() {
        let zeros = Array3::<f32>::zeros((3, 8, 8));
        let ones = Array3::<f32>::ones((3, 8, 8));
        // MSE = 1 -> 0 dB.
        assert!(psnr(&zeros.view(), &ones.view()).unwrap().abs() < 1e-12);
        // Uniform diff 0.5 -> 20*log10(2) = 6.0206 dB.
        let half = Array3::<f32>::from_elem((3, 8, 8), 0.5);
        let p = psnr(&zeros.view(), &half.view()).unwrap();
        assert!((p - 6.020599913279624).abs() < 1e-9);
    }

    #[test]
    fn psnr_and_ssim_are_symmetric() {
        let a = random_frame(2, 16, 16);
        let b = random_frame(3, 16, 16);
        assert_eq!(psnr(&a.view(), &b.view()).unwrap(), psnr(&b.view(), &a.view()).unwrap());
        let s1 = ssim(&a.view(), &b.view()).unwrap();
        let s2 = ssim(&b.view(), &a.view()).unwrap();
        assert!((s1 - s2).abs() < 1e-12);
    }

    #[test]
    fn constant_patch_ssim_matches_closed_form() {
        // Both frames constant: variances and covariance vanish, leaving
        // SSIM = C1 / (mu_a^2 + mu_b^2 + C1) with mu_a=0, mu_b=1.
        let zeros = Array3::<f32>::zeros((3, 12, 12));
        let ones = Array3::<f32>::ones((3, 12, 12));
        let s = ssim(&zeros.view(), &ones.view()).unwrap();
        let c1 = 1e-4;
        let want = c1 / (1.0 + c1);
        assert!((s - want).abs() < 1e-12, "got {s}, want {want}");
    }

    #[test]
    fn ssim_matches_a_direct_window_loop_oracle() {
        let a = random_frame(4, 14, 13);
        let b = random_frame(5, 14, 13);
        let got = ssim(&a.view(), &b.view()).unwrap();

        // Independent recomputation, straight from the definition.
        let sigma = 1.5f64;
        let mut kernel = vec![vec![0.0f64; 11]; 11];
        let mut ksum = 0.0;
        for i in 0..11 {
            for j in 0..11 {
                let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
                kernel[i][j] = (-(di * di + dj * dj) / (2.0 * sigma * sigma)).exp();
                ksum += kernel[i][j];
            }
        }
        let gray = |f: &Array3<f32>, y: usize, x: usize| -> f64 {
            (f[[0, y, x]] as f64 + f[[1, y, x]] as f64 + f[[2, y, x]] as f64) / 3.0
        };
        let (c1, c2) = (1e-4, 9e-4);
        let mut total = 0.0;
        let mut count = 0;
        for y0 in 0..=(14 - 11) {
            for x0 in 0..=(13 - 11) {
                let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in 0..11 {
                    for j in 0..11 {
                        let kw = kernel[i][j] / ksum;
                        let va = gray(&a, y0 + i, x0 + j);
                        let vb = gray(&b, y0 + i, x0 + j);
                        ma += kw * va;
                        mb += kw * vb;
                        saa += kw * va * va;
                        sbb += kw * vb * vb;
                        sab += kw * va * vb;
                    }
                }
                total += ((2.0 * ma * mb + c1) * (2.0 * (sab - ma * mb) + c2))
                    / ((ma * ma + mb * mb + c1) * ((saa - ma * ma) + (sbb - mb * mb) + c2));
                count += 1;
            }
        }
        let want = total / count as f64;
        assert!((got - want).abs() < 1e-6, "got {got}, want {want}");
    }

    #[test]
    fn undersized_images_are_rejected() {
        let a = random_frame(6, 8, 8);
        assert!(ssim(&a.view(), &a.view()).is_err());
        assert!(psnr(&a.view(), &a.view()).is_ok());
    }
}
