//! Image agreement scores.

use alloc::vec::Vec;

use crate::data::{make_condition, ConditionKind, Image};
use crate::error::{invalid, Result};

/// Score reported for identical images.
pub const PSNR_CAP: f64 = 99.0;
pub const SSIM_WINDOW: usize = 7;
pub const SSIM_SIGMA: f64 = 1.5;

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    a.same_shape(b)?;
    if a.pixels.is_empty() {
        return invalid("empty image");
    }
    let s: f64 = a
        .pixels
        .iter()
        .zip(&b.pixels)
        .map(|(x, y)| {
            let d = *x as f64 - *y as f64;
            d * d
        })
        .sum();
    Ok(s / a.pixels.len() as f64)
}

/// `10·log10(peak² / MSE)`, capped at [`PSNR_CAP`].
pub fn psnr(a: &Image, b: &Image, peak: f64) -> Result<f64> {
    if !(peak > 0.0) {
        return invalid("peak must be positive");
    }
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * libm::log10(peak * peak / m)).min(PSNR_CAP))
}

fn ssim_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as isize;
    let g: Vec<f64> = (-r..=r)
        .map(|i| libm::exp(-((i * i) as f64) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)))
        .collect();
    let mut w = Vec::with_capacity(SSIM_WINDOW * SSIM_WINDOW);
    for gy in &g {
        for gx in &g {
            w.push(gy * gx);
        }
    }
    let s: f64 = w.iter().sum();
    w.iter().map(|v| v / s).collect()
}

/// Single-scale SSIM with peak 1.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    ssim_with_peak(a, b, 1.0)
}

/// Mean SSIM over every fully contained 7×7 Gaussian window.
pub fn ssim_with_peak(a: &Image, b: &Image, peak: f64) -> Result<f64> {
    a.same_shape(b)?;
    if a.width < SSIM_WINDOW || a.height < SSIM_WINDOW {
        return invalid("image smaller than the SSIM window");
    }
    let c1 = (0.01 * peak) * (0.01 * peak);
    let c2 = (0.03 * peak) * (0.03 * peak);
    let w = ssim_window();
    let (ow, oh) = (a.width - SSIM_WINDOW + 1, a.height - SSIM_WINDOW + 1);
    let mut total = 0.0;
    for oy in 0..oh {
        for ox in 0..ow {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for ky in 0..SSIM_WINDOW {
                for kx in 0..SSIM_WINDOW {
                    let k = w[ky * SSIM_WINDOW + kx];
                    let x = a.at(ox + kx, oy + ky) as f64;
                    let y = b.at(ox + kx, oy + ky) as f64;
                    ma += k * x;
                    mb += k * y;
                    saa += k * x * x;
                    sbb += k * y * y;
                    sab += k * x * y;
                }
            }
            let va = saa - ma * ma;
            let vb = sbb - mb * mb;
            let cov = sab - ma * mb;
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
    }
    Ok(total / (ow * oh) as f64)
}

/// Recomputes the condition from `generated` and scores it against `cond`:
/// PSNR (peak 1) for the resolution tasks, SSIM for edges.
pub fn condition_consistency(generated: &Image, cond: &Image, kind: ConditionKind) -> Result<f64> {
    generated.same_shape(cond)?;
    let recomputed = make_condition(generated, kind)?;
    match kind {
        ConditionKind::Edge => ssim(&recomputed, cond),
        ConditionKind::Sr4x | ConditionKind::BlurSr4x => psnr(&recomputed, cond, 1.0),
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> MeanStd {
    if values.is_empty() {
        return MeanStd::default();
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    MeanStd {
        mean,
        std: libm::sqrt(var),
    }
}
