//! Full-reference image quality: PSNR and Gaussian-window SSIM.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

fn check_pair(op: &'static str, a: &Tensor, b: &Tensor) -> Result<[usize; 3]> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    match *a.shape() {
        [c, h, w] => Ok([c, h, w]),
        _ => Err(Error::InvalidShape {
            op,
            msg: format!("want [C, H, W], got {:?}", a.shape()),
        }),
    }
}

/// PSNR in dB for data range `peak`. Identical images give `+∞`.
pub fn psnr(a: &Tensor, b: &Tensor, peak: f64) -> Result<f64> {
    check_pair("psnr", a, b)?;
    let mse = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.numel() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Per-window `(luminance, contrast·structure)` terms over valid windows of
/// every channel, for data range 1.
pub(crate) fn ssim_terms(a: &Tensor, b: &Tensor) -> Result<Vec<(f64, f64)>> {
    let [c, h, w] = check_pair("ssim", a, b)?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::InvalidArgument(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {h}x{w}"
        )));
    }
    let g = gaussian_window();
    let (c1, c2) = (K1 * K1, K2 * K2);
    let (ad, bd) = (a.data(), b.data());
    let mut out = Vec::with_capacity(c * (h - SSIM_WINDOW + 1) * (w - SSIM_WINDOW + 1));
    for ch in 0..c {
        let base = ch * h * w;
        for y0 in 0..=h - SSIM_WINDOW {
            for x0 in 0..=w - SSIM_WINDOW {
                let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for (dy, gy) in g.iter().enumerate() {
                    for (dx, gx) in g.iter().enumerate() {
                        let wt = gy * gx;
                        let i = base + (y0 + dy) * w + x0 + dx;
                        let (x, y) = (ad[i], bd[i]);
                        ma += wt * x;
                        mb += wt * y;
                        saa += wt * x * x;
                        sbb += wt * y * y;
                        sab += wt * x * y;
                    }
                }
                let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
                let lum = (2.0 * ma * mb + c1) / (ma * ma + mb * mb + c1);
                let cs = (2.0 * cov + c2) / (va + vb + c2);
                out.push((lum, cs));
            }
        }
    }
    Ok(out)
}

/// Mean SSIM over all valid 11×11 windows and channels, data range 1.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    let terms = ssim_terms(a, b)?;
    Ok(terms.iter().map(|(l, cs)| l * cs).sum::<f64>() / terms.len() as f64)
}
