use crate::error::Result;
use crate::image::Image;

pub const PSNR_CAP_DB: f64 = 99.0;

/// Peak signal-to-noise ratio for `[0, 1]` intensities, capped for identical images.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    a.ensure_same_shape(b)?;
    let mse = a.squared_distance(b) / a.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB))
}
