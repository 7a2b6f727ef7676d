//! Reconstruction quality: PSNR, SSIM and the perceptual distance.
//!
//! Images are mapped from `[−1, 1]` to `[0, 1]` first. SSIM uses uniform
//! 8×8 windows at stride 1 with `C1 = 0.01²`, `C2 = 0.03²`, averaged over
//! windows and then channels.

use crate::error::{Error, Result};
use crate::image::Image;
use crate::perceptual::PerceptualNet;

pub const PSNR_CAP_DB: f64 = 99.0;
pub const SSIM_WINDOW: usize = 8;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    a.same_shape(b)?;
    let n = a.data().len() as f64;
    Ok(a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        / n)
}

/// Peak signal-to-noise ratio on the `[0, 1]` scale, capped at 99 dB.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    a.same_shape(b)?;
    let (ua, ub) = (a.to_unit(), b.to_unit());
    let m = ua.iter().zip(&ub).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / ua.len() as f64;
    if m == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / m).log10()).min(PSNR_CAP_DB))
}

/// Inclusive prefix sums with a zero border: `(h+1)×(w+1)`.
fn integral(h: usize, w: usize, f: impl Fn(usize) -> f64) -> Vec<f64> {
    let mut s = vec![0.0; (h + 1) * (w + 1)];
    for y in 0..h {
        let mut row = 0.0;
        for x in 0..w {
            row += f(y * w + x);
            s[(y + 1) * (w + 1) + x + 1] = s[y * (w + 1) + x + 1] + row;
        }
    }
    s
}

fn window_sum(s: &[f64], w: usize, y: usize, x: usize, k: usize) -> f64 {
    let stride = w + 1;
    s[(y + k) * stride + x + k] - s[y * stride + x + k] - s[(y + k) * stride + x] + s[y * stride + x]
}

/// Structural similarity averaged over all 8×8 windows and channels.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    a.same_shape(b)?;
    let (c, h, w) = (a.channels(), a.height(), a.width());
    let k = SSIM_WINDOW;
    if h < k || w < k {
        return Err(Error::Shape(format!("SSIM needs at least {k}×{k} pixels, got {h}×{w}")));
    }
    let (ua, ub) = (a.to_unit(), b.to_unit());
    let plane = h * w;
    let n = (k * k) as f64;
    let mut total = 0.0;
    for ch in 0..c {
        let pa = &ua[ch * plane..(ch + 1) * plane];
        let pb = &ub[ch * plane..(ch + 1) * plane];
        let sa = integral(h, w, |i| pa[i]);
        let sb = integral(h, w, |i| pb[i]);
        let saa = integral(h, w, |i| pa[i] * pa[i]);
        let sbb = integral(h, w, |i| pb[i] * pb[i]);
        let sab = integral(h, w, |i| pa[i] * pb[i]);
        let mut acc = 0.0;
        for y in 0..=h - k {
            for x in 0..=w - k {
                let ma = window_sum(&sa, w, y, x, k) / n;
                let mb = window_sum(&sb, w, y, x, k) / n;
                let va = (window_sum(&saa, w, y, x, k) / n - ma * ma).max(0.0);
                let vb = (window_sum(&sbb, w, y, x, k) / n - mb * mb).max(0.0);
                let cov = window_sum(&sab, w, y, x, k) / n - ma * mb;
                acc += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                    / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
            }
        }
        total += acc / ((h - k + 1) * (w - k + 1)) as f64;
    }
    Ok(total / c as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricReport {
    pub psnr_db: f64,
    pub ssim: f64,
    pub phi_dist: f64,
}

pub const METRIC_HEADER: &str = "psnr_db,ssim,phi_dist";

impl MetricReport {
    pub fn evaluate(a: &Image, b: &Image, phi: &PerceptualNet) -> Result<Self> {
        Ok(Self { psnr_db: psnr(a, b)?, ssim: ssim(a, b)?, phi_dist: phi.distance(a, b)? as f64 })
    }

    pub fn csv_row(&self) -> String {
        format!("{:.6},{:.6},{:.6e}", self.psnr_db, self.ssim, self.phi_dist)
    }
}
