use crate::error::{Error, Result};
use crate::raster::{Mask, RgbImage};

/// PSNR ceiling, also used for identical images.
pub const PSNR_CAP: f64 = 100.0;

const SSIM_RADIUS: usize = 5;
const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;
const PEAK: f64 = 255.0;

fn check_pair(generated: &RgbImage, reference: &RgbImage, mask: &Mask) -> Result<()> {
    if generated.height() != reference.height() || generated.width() != reference.width() {
        return Err(Error::Dimension(format!(
            "generated {}x{} vs reference {}x{}",
            generated.height(),
            generated.width(),
            reference.height(),
            reference.width()
        )));
    }
    mask.check_dims(generated.height(), generated.width())?;
    if mask.foreground_count() == 0 {
        return Err(Error::Input("mask has no foreground".into()));
    }
    Ok(())
}

/// PSNR over foreground pixels in the 8-bit domain, capped at 100 dB.
pub fn masked_psnr(generated: &RgbImage, reference: &RgbImage, mask: &Mask) -> Result<f64> {
    check_pair(generated, reference, mask)?;
    let mut sum = 0.0;
    let mut n = 0usize;
    for (p, &fg) in mask.data().iter().enumerate() {
        if fg {
            for c in 0..3 {
                let d = (f64::from(generated.data()[p * 3 + c])
                    - f64::from(reference.data()[p * 3 + c]))
                    * PEAK;
                sum += d * d;
            }
            n += 3;
        }
    }
    let mse = sum / n as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (PEAK * PEAK / mse).log10()).min(PSNR_CAP))
}

fn gaussian_taps() -> Vec<f64> {
    let r = SSIM_RADIUS as isize;
    (-r..=r)
        .map(|i| (-((i * i) as f64) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect()
}

/// Separable Gaussian filter truncated at the borders and renormalized.
fn blur(plane: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let r = SSIM_RADIUS as isize;
    let pass = |src: &[f64], along_x: bool| -> Vec<f64> {
        let mut out = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                let (mut acc, mut norm) = (0.0, 0.0);
                for (k, &t) in taps.iter().enumerate() {
                    let off = k as isize - r;
                    let (yy, xx) = if along_x {
                        (y as isize, x as isize + off)
                    } else {
                        (y as isize + off, x as isize)
                    };
                    if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                        continue;
                    }
                    acc += t * src[yy as usize * w + xx as usize];
                    norm += t;
                }
                out[y * w + x] = acc / norm;
            }
        }
        out
    };
    pass(&pass(plane, true), false)
}

/// Mean SSIM over windows centred on foreground pixels, after zeroing the
/// background of both images; averaged over channels.
pub fn masked_ssim(generated: &RgbImage, reference: &RgbImage, mask: &Mask) -> Result<f64> {
    check_pair(generated, reference, mask)?;
    let (h, w) = (generated.height(), generated.width());
    let taps = gaussian_taps();
    let c1 = (K1 * PEAK).powi(2);
    let c2 = (K2 * PEAK).powi(2);
    let mut total = 0.0;
    for c in 0..3 {
        let plane = |img: &RgbImage| -> Vec<f64> {
            (0..h * w)
                .map(|p| {
                    if mask.data()[p] {
                        f64::from(img.data()[p * 3 + c]) * PEAK
                    } else {
                        0.0
                    }
                })
                .collect()
        };
        let x = plane(generated);
        let y = plane(reference);
        let prod =
            |a: &[f64], b: &[f64]| -> Vec<f64> { a.iter().zip(b).map(|(p, q)| p * q).collect() };
        let mx = blur(&x, h, w, &taps);
        let my = blur(&y, h, w, &taps);
        let mxx = blur(&prod(&x, &x), h, w, &taps);
        let myy = blur(&prod(&y, &y), h, w, &taps);
        let mxy = blur(&prod(&x, &y), h, w, &taps);
        let mut sum = 0.0;
        let mut n = 0usize;
        for p in 0..h * w {
            if !mask.data()[p] {
                continue;
            }
            let vx = mxx[p] - mx[p] * mx[p];
            let vy = myy[p] - my[p] * my[p];
            let cov = mxy[p] - mx[p] * my[p];
            sum += ((2.0 * mx[p] * my[p] + c1) * (2.0 * cov + c2))
                / ((mx[p] * mx[p] + my[p] * my[p] + c1) * (vx + vy + c2));
            n += 1;
        }
        total += sum / n as f64;
    }
    Ok(total / 3.0)
}

/// Foreground area strictly below `1/64` of the frame.
pub fn is_small_object(mask: &Mask) -> bool {
    mask.foreground_count() * 64 < mask.height() * mask.width()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;

    fn random(n: usize, seed: u64) -> RgbImage {
        let mut rng = Rng::new(seed);
        RgbImage::new(n, n, (0..n * n * 3).map(|_| rng.uniform() as f32).collect()).unwrap()
    }

    #[test]
    fn identical_images() {
        let a = random(16, 1);
        let m = Mask::full(16, 16);
        assert_eq!(masked_psnr(&a, &a, &m).unwrap(), PSNR_CAP);
        assert!((masked_ssim(&a, &a, &m).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn unit_mse_psnr() {
        let a = RgbImage::from_u8(2, 2, &[10; 12]).unwrap();
        let mut bytes = [10u8; 12];
        bytes[..3].copy_from_slice(&[11, 11, 11]);
        let b = RgbImage::from_u8(2, 2, &bytes).unwrap();
        let mut m = Mask::empty(2, 2);
        m.set(0, 0, true);
        let psnr = masked_psnr(&a, &b, &m).unwrap();
        assert!((psnr - 48.1308).abs() < 1e-4, "{psnr}");
    }

    #[test]
    fn negative_is_anticorrelated() {
        let a = random(16, 2);
        let neg = RgbImage::new(16, 16, a.data().iter().map(|v| 1.0 - v).collect()).unwrap();
        assert!(masked_ssim(&a, &neg, &Mask::full(16, 16)).unwrap() < 0.0);
    }

    #[test]
    fn empty_mask_is_an_input_error() {
        let a = random(8, 3);
        assert!(matches!(
            masked_psnr(&a, &a, &Mask::empty(8, 8)),
            Err(Error::Input(_))
        ));
        assert!(matches!(
            masked_ssim(&a, &a, &Mask::empty(8, 8)),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn small_object_boundary() {
        let mut m = Mask::empty(64, 64);
        for i in 0..63 {
            m.set(i / 64, i % 64, true);
        }
        assert!(is_small_object(&m));
        m.set(10, 10, true);
        assert!(!is_small_object(&m));
    }
}
