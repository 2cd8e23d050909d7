//! Image quality metrics.

use crate::error::{Error, Result};
use crate::tape::mse;
use crate::tensor::Tensor;

/// Reported in place of infinity when the images are identical.
pub const PSNR_CAP_DB: f64 = 100.0;

pub const SSIM_WINDOW: usize = 7;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

/// `10 log10(max^2 / MSE)` over all elements, capped at [`PSNR_CAP_DB`].
pub fn psnr(pred: &Tensor, target: &Tensor, max_val: f64) -> Result<f64> {
    pred.ensure_same_shape(target, "psnr")?;
    Ok(psnr_slices(pred.data(), target.data(), max_val))
}

fn psnr_slices(a: &[f64], b: &[f64], max_val: f64) -> f64 {
    let m = mse(a, b);
    if m == 0.0 {
        return PSNR_CAP_DB;
    }
    (10.0 * (max_val * max_val / m).log10()).min(PSNR_CAP_DB)
}

/// Mean of per-image PSNR over the batch axis of BCHW tensors.
pub fn mean_psnr(pred: &Tensor, target: &Tensor, max_val: f64) -> Result<f64> {
    pred.ensure_same_shape(target, "mean_psnr")?;
    let (b, c, h, w) = pred.dims4()?;
    let per = c * h * w;
    let total: f64 = (0..b)
        .map(|i| psnr_slices(&pred.data()[i * per..(i + 1) * per], &target.data()[i * per..(i + 1) * per], max_val))
        .sum();
    Ok(total / b as f64)
}

/// Mean local SSIM over 7x7 uniform windows (valid positions only), averaged
/// over images and channels. Window statistics use population moments.
pub fn ssim(pred: &Tensor, target: &Tensor) -> Result<f64> {
    pred.ensure_same_shape(target, "ssim")?;
    let (b, c, h, w) = pred.dims4()?;
    let k = SSIM_WINDOW;
    if h < k || w < k {
        return Err(Error::shape(format!("ssim needs at least {k}x{k} images, got {h}x{w}")));
    }
    let n = (k * k) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for plane in 0..b * c {
        let x = &pred.data()[plane * h * w..(plane + 1) * h * w];
        let y = &target.data()[plane * h * w..(plane + 1) * h * w];
        for oy in 0..=h - k {
            for ox in 0..=w - k {
                let (mut sx, mut sy, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for dy in 0..k {
                    let row = (oy + dy) * w + ox;
                    for i in row..row + k {
                        let (a, bb) = (x[i], y[i]);
                        sx += a;
                        sy += bb;
                        sxx += a * a;
                        syy += bb * bb;
                        sxy += a * bb;
                    }
                }
                let (mx, my) = (sx / n, sy / n);
                let vx = sxx / n - mx * mx;
                let vy = syy / n - my * my;
                let cov = sxy / n - mx * my;
                total += ((2.0 * mx * my + SSIM_C1) * (2.0 * cov + SSIM_C2))
                    / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2));
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}
