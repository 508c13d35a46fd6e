//! Image quality metrics: PSNR over the [0,1] range and windowed SSIM shared
//! with the photometric loss.

use crate::imageio::Image;
use crate::CoreError;

/// PSNR cap reported for identical images.
pub const PSNR_CAP: f64 = 99.0;

pub fn mse(a: &Image, b: &Image) -> Result<f64, CoreError> {
    if !a.same_shape(b) {
        return Err(CoreError::DimensionMismatch(
            a.width, a.height, b.width, b.height,
        ));
    }
    let n = a.data.len().max(1) as f64;
    Ok(a.data
        .iter()
        .zip(b.data.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n)
}

pub fn psnr(a: &Image, b: &Image) -> Result<f64, CoreError> {
    let m = mse(a, b)?;
    if m <= 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((-10.0 * m.log10()).min(PSNR_CAP))
}

/// (PSNR, SSIM) pair for two images.
pub fn metrics_psnr_ssim(a: &Image, b: &Image) -> Result<(f64, f64), CoreError> {
    Ok((psnr(a, b)?, crate::loss::ssim_mean(a, b)?))
}
