//! Frame-prediction quality metrics. Grids are compared as integer intensity
//! images: each cell category maps to an evenly spaced level in [0, 255].

use crate::env::{Grid, CELL_CATEGORIES};
use crate::error::{Error, Result};

/// PSNR cap returned for (near-)identical inputs instead of infinity.
pub const PSNR_CAP_DB: f64 = 99.0;

pub fn grid_to_intensity(grid: &Grid) -> Vec<f64> {
    let scale = 255.0 / (CELL_CATEGORIES as f64 - 1.0);
    grid.cells
        .iter()
        .map(|&c| (c as f64 * scale).round())
        .collect()
}

/// Peak signal-to-noise ratio in dB, capped at [`PSNR_CAP_DB`].
pub fn psnr(a: &[f64], b: &[f64], max_val: f64) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::ShapeMismatch(format!(
            "psnr inputs {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let mse: f64 = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.len() as f64;
    if mse <= 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((20.0 * (max_val / mse.sqrt()).log10()).min(PSNR_CAP_DB))
}

/// Single-window SSIM over the whole frame with the standard constants
/// `C1 = (0.01 L)^2`, `C2 = (0.03 L)^2`.
pub fn ssim(a: &[f64], b: &[f64], max_val: f64) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::ShapeMismatch(format!(
            "ssim inputs {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let n = a.len() as f64;
    let mean_a = a.iter().sum::<f64>() / n;
    let mean_b = b.iter().sum::<f64>() / n;
    let var_a = a.iter().map(|&x| (x - mean_a).powi(2)).sum::<f64>() / n;
    let var_b = b.iter().map(|&x| (x - mean_b).powi(2)).sum::<f64>() / n;
    let cov = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| (x - mean_a) * (y - mean_b))
        .sum::<f64>()
        / n;
    let c1 = (0.01 * max_val).powi(2);
    let c2 = (0.03 * max_val).powi(2);
    Ok(((2.0 * mean_a * mean_b + c1) * (2.0 * cov + c2))
        / ((mean_a * mean_a + mean_b * mean_b + c1) * (var_a + var_b + c2)))
}
