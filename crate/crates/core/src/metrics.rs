//! Image quality metrics on [0, 1] images: PSNR and single-scale SSIM.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::patchgrid::OcclusionMask;

/// SSIM window: 11 taps, Gaussian sigma 1.5. Stabilizers K1 = 0.01,
/// K2 = 0.03 at dynamic range L = 1.
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn check_same_shape(a: &Image, b: &Image) -> Result<()> {
    if a.height() != b.height() || a.width() != b.width() || a.channels() != b.channels() {
        return Err(Error::ShapeMismatch(format!(
            "image shapes differ: {}x{}x{} vs {}x{}x{}",
            a.height(),
            a.width(),
            a.channels(),
            b.height(),
            b.width(),
            b.channels()
        )));
    }
    Ok(())
}

/// Peak signal-to-noise ratio over the full [0,1] range; identical images
/// report +infinity.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    check_same_shape(a, b)?;
    let mse: f64 = a
        .data()
        .iter()
        .zip(b.data().iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.data().len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(-10.0 * mse.log10())
}

/// PSNR restricted to the pixels of flagged patches.
pub fn masked_psnr(a: &Image, b: &Image, mask: &OcclusionMask, patch_size: usize) -> Result<f64> {
    check_same_shape(a, b)?;
    let mut sum = 0.0;
    let mut count = 0usize;
    for y in 0..a.height() {
        for x in 0..a.width() {
            let idx = (y / patch_size) * mask.cols() + x / patch_size;
            if mask.get(idx) {
                for c in 0..a.channels() {
                    let d = a.data()[[y, x, c]] - b.data()[[y, x, c]];
                    sum += d * d;
                    count += 1;
                }
            }
        }
    }
    if count == 0 {
        return Err(Error::EmptyInput("masked_psnr with an empty mask"));
    }
    let mse = sum / count as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(-10.0 * mse.log10())
}

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let mid = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - mid;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in k.iter_mut() {
        *v /= sum;
    }
    k
}

/// Horizontal then vertical valid-region Gaussian filtering.
fn blur_valid(img: &Array2<f64>) -> Array2<f64> {
    let k = gaussian_kernel();
    let (h, w) = img.dim();
    let wo = w - SSIM_WINDOW + 1;
    let ho = h - SSIM_WINDOW + 1;
    let mut tmp = Array2::zeros((h, wo));
    for y in 0..h {
        for x in 0..wo {
            let mut s = 0.0;
            for (i, kv) in k.iter().enumerate() {
                s += kv * img[[y, x + i]];
            }
            tmp[[y, x]] = s;
        }
    }
    let mut out = Array2::zeros((ho, wo));
    for y in 0..ho {
        for x in 0..wo {
            let mut s = 0.0;
            for (i, kv) in k.iter().enumerate() {
                s += kv * tmp[[y + i, x]];
            }
            out[[y, x]] = s;
        }
    }
    out
}

/// Mean single-scale SSIM over valid 11x11 windows, averaged across
/// channels. Requires both dimensions >= 11.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    check_same_shape(a, b)?;
    if a.height() < SSIM_WINDOW || a.width() < SSIM_WINDOW {
        return Err(Error::ShapeMismatch(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} images, got {}x{}",
            a.height(),
            a.width()
        )));
    }
    let c1 = (SSIM_K1 * 1.0) * (SSIM_K1 * 1.0);
    let c2 = (SSIM_K2 * 1.0) * (SSIM_K2 * 1.0);
    let (h, w) = (a.height(), a.width());
    let mut total = 0.0;
    for ch in 0..a.channels() {
        let xa = Array2::from_shape_fn((h, w), |(y, x)| a.data()[[y, x, ch]]);
        let xb = Array2::from_shape_fn((h, w), |(y, x)| b.data()[[y, x, ch]]);
        let mu_a = blur_valid(&xa);
        let mu_b = blur_valid(&xb);
        let aa = blur_valid(&(&xa * &xa));
        let bb = blur_valid(&(&xb * &xb));
        let ab = blur_valid(&(&xa * &xb));
        let mut sum = 0.0;
        for ((y, x), &ma) in mu_a.indexed_iter() {
            let mb = mu_b[[y, x]];
            let va = aa[[y, x]] - ma * ma;
            let vb = bb[[y, x]] - mb * mb;
            let cov = ab[[y, x]] - ma * mb;
            let s = ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            sum += s;
        }
        total += sum / (mu_a.len()) as f64;
    }
    Ok(total / a.channels() as f64)
}

/// (PSNR, SSIM) pair for a reconstruction against ground truth.
pub fn image_quality(z_gt: &Image, z_rec: &Image) -> Result<(f64, f64)> {
    Ok((psnr(z_gt, z_rec)?, ssim(z_gt, z_rec)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::stream_rng;
    use ndarray::Array3;
    use rand::Rng;

    fn random_image(h: usize, w: usize, seed: u64) -> Image {
        let mut rng = stream_rng(seed, "metrics-test", 0);
        Image::new(Array3::from_shape_fn((h, w, 1), |_| {
            rng.random_range(0.0..=1.0)
        }))
        .unwrap()
    }

    #[test]
    fn identical_images_hit_sentinels() {
        let img = random_image(16, 16, 1);
        let (p, s) = image_quality(&img, &img).unwrap();
        assert!(p.is_infinite() && p > 0.0);
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn uniform_offset_gives_20db() {
        let mut rng = stream_rng(2, "metrics-test", 0);
        let base = Array3::from_shape_fn((16, 16, 1), |_| rng.random_range(0.0..=0.9));
        let a = Image::new(base.clone()).unwrap();
        let b = Image::new(base.mapv(|v| v + 0.1)).unwrap();
        let p = psnr(&a, &b).unwrap();
        assert!((p - 20.0).abs() < 1e-9, "psnr {p}");
    }

    /// Independent scalar SSIM: direct 11x11 window double loop with an
    /// inline Gaussian, no separable filtering.
    fn ssim_oracle(a: &Image, b: &Image) -> f64 {
        let mut kern = [[0.0; 11]; 11];
        let mut ksum = 0.0;
        for (y, row) in kern.iter_mut().enumerate() {
            for (x, v) in row.iter_mut().enumerate() {
                let dy = y as f64 - 5.0;
                let dx = x as f64 - 5.0;
                *v = (-(dy * dy + dx * dx) / (2.0 * 1.5 * 1.5)).exp();
                ksum += *v;
            }
        }
        for row in kern.iter_mut() {
            for v in row.iter_mut() {
                *v /= ksum;
            }
        }
        let c1 = 0.01f64 * 0.01;
        let c2 = 0.03f64 * 0.03;
        let (h, w, ch) = (a.height(), a.width(), a.channels());
        let mut total = 0.0;
        for c in 0..ch {
            let mut sum = 0.0;
            let mut count = 0.0;
            for wy in 0..=(h - 11) {
                for wx in 0..=(w - 11) {
                    let (mut ma, mut mb) = (0.0, 0.0);
                    for ky in 0..11 {
                        for kx in 0..11 {
                            ma += kern[ky][kx] * a.data()[[wy + ky, wx + kx, c]];
                            mb += kern[ky][kx] * b.data()[[wy + ky, wx + kx, c]];
                        }
                    }
                    let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
                    for ky in 0..11 {
                        for kx in 0..11 {
                            let da = a.data()[[wy + ky, wx + kx, c]];
                            let db = b.data()[[wy + ky, wx + kx, c]];
                            va += kern[ky][kx] * da * da;
                            vb += kern[ky][kx] * db * db;
                            cov += kern[ky][kx] * da * db;
                        }
                    }
                    va -= ma * ma;
                    vb -= mb * mb;
                    cov -= ma * mb;
                    sum += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                        / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                    count += 1.0;
                }
            }
            total += sum / count;
        }
        total / ch as f64
    }

    #[test]
    fn ssim_matches_independent_oracle() {
        for seed in 0..4 {
            let a = random_image(20, 24, 100 + seed);
            let b = random_image(20, 24, 200 + seed);
            let got = ssim(&a, &b).unwrap();
            let want = ssim_oracle(&a, &b);
            let rel = (got - want).abs() / want.abs().max(1e-12);
            assert!(rel < 1e-6, "rel {rel}");
        }
    }

    #[test]
    fn psnr_matches_scalar_recompute() {
        let a = random_image(16, 16, 5);
        let b = random_image(16, 16, 6);
        let got = psnr(&a, &b).unwrap();
        let mut mse = 0.0;
        for y in 0..16 {
            for x in 0..16 {
                let d = a.data()[[y, x, 0]] - b.data()[[y, x, 0]];
                mse += d * d;
            }
        }
        mse /= 256.0;
        let want = 10.0 * (1.0 / mse).log10();
        assert!((got - want).abs() / want.abs() < 1e-9);
    }

    #[test]
    fn ssim_rejects_small_images() {
        let a = random_image(8, 8, 7);
        assert!(ssim(&a, &a).is_err());
    }

    #[test]
    fn masked_psnr_ignores_unmasked_error() {
        let a = random_image(32, 32, 8);
        let mut b = a.clone();
        // corrupt only patch 0 (top-left 16x16)
        for y in 0..16 {
            for x in 0..16 {
                b.data_mut()[[y, x, 0]] = (a.data()[[y, x, 0]] + 0.3).min(1.0);
            }
        }
        let mut mask = OcclusionMask::all_false(2, 2);
        mask.set(3, true); // bottom-right, untouched
        let p = masked_psnr(&a, &b, &mask, 16).unwrap();
        assert!(p.is_infinite());
        mask.set(3, false);
        mask.set(0, true);
        let p = masked_psnr(&a, &b, &mask, 16).unwrap();
        assert!(p.is_finite() && p < 30.0);
    }
}
