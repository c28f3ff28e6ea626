use crate::error::{Error, Result};
use crate::imageio::PlanarImage;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

fn check_pair(a: &PlanarImage, b: &PlanarImage, what: &str) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::domain(format!(
            "{what}: image sizes {}x{} and {}x{} differ",
            a.height, a.width, b.height, b.width
        )));
    }
    Ok(())
}

/// Mean absolute difference over all pixels and channels.
pub fn mean_l1(result: &PlanarImage, truth: &PlanarImage) -> Result<f64> {
    check_pair(result, truth, "mean_l1")?;
    let sum: f64 = result
        .data
        .iter()
        .zip(&truth.data)
        .map(|(a, b)| (a - b).abs())
        .sum();
    Ok(sum / result.data.len() as f64)
}

/// `10·log10(1 / MSE)` in dB for unit-range images; `+inf` when identical.
pub fn psnr(result: &PlanarImage, truth: &PlanarImage) -> Result<f64> {
    check_pair(result, truth, "psnr")?;
    let mse = result
        .data
        .iter()
        .zip(&truth.data)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / result.data.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

/// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let centre = (size as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..size)
        .map(|i| (-(i as f64 - centre).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Separable "valid" filtering of an `h × w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..k).map(|i| taps[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..k).map(|i| taps[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize, taps: &[f64]) -> f64 {
    let prod = |f: &dyn Fn(f64, f64) -> f64| -> Vec<f64> {
        a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
    };
    let mu_a = filter_valid(a, h, w, taps);
    let mu_b = filter_valid(b, h, w, taps);
    let aa = filter_valid(&prod(&|x, _| x * x), h, w, taps);
    let bb = filter_valid(&prod(&|_, y| y * y), h, w, taps);
    let ab = filter_valid(&prod(&|x, y| x * y), h, w, taps);
    let n = mu_a.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let var_a = aa[i] - ma * ma;
            let var_b = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((ma * ma + mb * mb + SSIM_C1) * (var_a + var_b + SSIM_C2))
        })
        .sum();
    total / n as f64
}

/// Mean local SSIM over all valid 11×11 Gaussian windows, per channel, then
/// averaged over the three channels.
pub fn ssim(result: &PlanarImage, truth: &PlanarImage) -> Result<f64> {
    check_pair(result, truth, "ssim")?;
    if result.height < SSIM_WINDOW || result.width < SSIM_WINDOW {
        return Err(Error::domain(format!(
            "ssim needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {}x{}",
            result.height, result.width
        )));
    }
    let taps = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA);
    let (h, w) = (result.height, result.width);
    let sum: f64 = (0..3)
        .map(|c| ssim_plane(result.plane(c), truth.plane(c), h, w, &taps))
        .sum();
    Ok(sum / 3.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(h: usize, w: usize, f: impl Fn(usize) -> f64) -> PlanarImage {
        PlanarImage::new(h, w, (0..3 * h * w).map(f).collect()).unwrap()
    }

    #[test]
    fn l1_examples() {
        let t = img(4, 4, |i| (i % 7) as f64 / 10.0);
        assert_eq!(mean_l1(&t, &t).unwrap(), 0.0);
        let r = img(4, 4, |i| (i % 7) as f64 / 10.0 + 0.0548);
        assert!((mean_l1(&r, &t).unwrap() - 0.0548).abs() < 1e-12);
        assert!(mean_l1(&t, &img(4, 5, |_| 0.0)).is_err());
    }

    #[test]
    fn psnr_closed_forms() {
        let t = img(4, 4, |_| 0.5);
        assert_eq!(psnr(&t, &t).unwrap(), f64::INFINITY);
        let r = img(4, 4, |_| 0.6);
        assert!((psnr(&r, &t).unwrap() - 20.0).abs() < 1e-9);
        let (zero, one) = (img(4, 4, |_| 0.0), img(4, 4, |_| 1.0));
        assert!(psnr(&zero, &one).unwrap().abs() < 1e-12);
    }

    #[test]
    fn ssim_degenerate_cases() {
        let t = img(16, 16, |i| ((i * 31) % 17) as f64 / 17.0);
        assert!((ssim(&t, &t).unwrap() - 1.0).abs() < 1e-12);
        let grey = img(16, 16, |_| 0.5);
        let flipped = img(16, 16, |_| 1.0 - 0.5);
        assert!((ssim(&flipped, &grey).unwrap() - 1.0).abs() < 1e-12);
        assert!(matches!(ssim(&img(10, 16, |_| 0.0), &img(10, 16, |_| 0.0)), Err(Error::Domain(_))));
    }

    #[test]
    fn taps_are_normalized_and_symmetric() {
        let t = gaussian_taps(11, 1.5);
        assert!((t.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((t[0] - t[10]).abs() < 1e-15 && t[5] > t[4]);
    }
}
