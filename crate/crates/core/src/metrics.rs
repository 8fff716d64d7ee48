//! Image quality metrics: PSNR and SSIM over [0,1] float images.

use crate::img::Image;
use crate::Error;

/// `10 * log10(1 / MSE)` for images in [0,1]. Identical images report +inf.
pub fn psnr(a: &Image, b: &Image) -> Result<f64, Error> {
    check_pair(a, b)?;
    let mse = a.mse(b);
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

/// SSIM with an 11x11 Gaussian window (sigma 1.5) and standard constants,
/// averaged over valid window positions and channels.
pub fn ssim(a: &Image, b: &Image) -> Result<f64, Error> {
    check_pair(a, b)?;
    if a.h < SSIM_WINDOW || a.w < SSIM_WINDOW {
        return Err(Error::Invalid(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} images, got {}x{}",
            a.h, a.w
        )));
    }
    let mut kernel = [0.0f64; SSIM_WINDOW * SSIM_WINDOW];
    let half = (SSIM_WINDOW / 2) as f64;
    let mut ksum = 0.0;
    for y in 0..SSIM_WINDOW {
        for x in 0..SSIM_WINDOW {
            let dy = y as f64 - half;
            let dx = x as f64 - half;
            let v = (-(dx * dx + dy * dy) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
            kernel[y * SSIM_WINDOW + x] = v;
            ksum += v;
        }
    }
    for v in &mut kernel {
        *v /= ksum;
    }
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..a.c {
        for wy in 0..=(a.h - SSIM_WINDOW) {
            for wx in 0..=(a.w - SSIM_WINDOW) {
                let (mut mx, mut my) = (0.0, 0.0);
                let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
                for ky in 0..SSIM_WINDOW {
                    for kx in 0..SSIM_WINDOW {
                        let w = kernel[ky * SSIM_WINDOW + kx];
                        let va = a.get(wy + ky, wx + kx, ch);
                        let vb = b.get(wy + ky, wx + kx, ch);
                        mx += w * va;
                        my += w * vb;
                        sxx += w * va * va;
                        syy += w * vb * vb;
                        sxy += w * va * vb;
                    }
                }
                let vx = sxx - mx * mx;
                let vy = syy - my * my;
                let cov = sxy - mx * my;
                let s = ((2.0 * mx * my + c1) * (2.0 * cov + c2))
                    / ((mx * mx + my * my + c1) * (vx + vy + c2));
                total += s;
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

fn check_pair(a: &Image, b: &Image) -> Result<(), Error> {
    if (a.h, a.w, a.c) != (b.h, b.w, b.c) {
        return Err(Error::Invalid(format!(
            "image dimensions differ: {}x{}x{} vs {}x{}x{}",
            a.h, a.w, a.c, b.h, b.w, b.c
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn noisy_image(seed: u64, h: usize, w: usize) -> Image {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut img = Image::new(h, w, 3);
        for v in &mut img.data {
            *v = rng.gen_range(0.0..1.0);
        }
        img
    }

    #[test]
    fn identical_images_are_perfect() {
        let a = noisy_image(1, 16, 16);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        let s = ssim(&a, &a).unwrap();
        assert!((s - 1.0).abs() < 1e-12, "ssim {}", s);
    }

    #[test]
    fn psnr_closed_form() {
        // MSE of 0.01 -> 20 dB
        let a = Image::new(8, 8, 3);
        let mut b = Image::new(8, 8, 3);
        for v in &mut b.data {
            *v = 0.1;
        }
        let p = psnr(&a, &b).unwrap();
        assert!((p - 20.0).abs() < 1e-12, "psnr {}", p);
    }

    #[test]
    fn ssim_symmetric_and_bounded() {
        let a = noisy_image(2, 20, 14);
        let b = noisy_image(3, 20, 14);
        let s1 = ssim(&a, &b).unwrap();
        let s2 = ssim(&b, &a).unwrap();
        assert!((s1 - s2).abs() < 1e-12);
        assert!(s1 < 1.0);
    }

    #[test]
    fn mismatched_sizes_rejected() {
        let a = noisy_image(4, 16, 16);
        let b = noisy_image(4, 16, 12);
        assert!(psnr(&a, &b).is_err());
        assert!(ssim(&a, &b).is_err());
    }
}
