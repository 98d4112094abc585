//! Image-quality metrics: MSE, PSNR and Gaussian-window SSIM.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

const WINDOW: usize = 11;
const WINDOW_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub psnr_db: f64,
    pub ssim: f64,
    pub mse: f64,
    pub data_range: f64,
}

fn check_pair(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(invalid(format!("image shapes differ: {:?} vs {:?}", a.dim(), b.dim())));
    }
    if a.is_empty() {
        return Err(invalid("images are empty"));
    }
    Ok(())
}

pub fn mse(reference: ArrayView2<'_, f64>, test: ArrayView2<'_, f64>) -> Result<f64> {
    check_pair(reference, test)?;
    let sum: f64 = reference.iter().zip(test.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(sum / reference.len() as f64)
}

/// `max - min` of the reference.
pub fn reference_range(reference: ArrayView2<'_, f64>) -> f64 {
    let (lo, hi) = reference
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    hi - lo
}

fn resolve_range(reference: ArrayView2<'_, f64>, data_range: Option<f64>) -> Result<f64> {
    let r = data_range.unwrap_or_else(|| reference_range(reference));
    if !(r > 0.0 && r.is_finite()) {
        return Err(invalid(format!("data range must be positive, got {r}")));
    }
    Ok(r)
}

/// Peak signal-to-noise ratio in dB; infinite for identical images.
pub fn psnr(reference: ArrayView2<'_, f64>, test: ArrayView2<'_, f64>, data_range: Option<f64>) -> Result<f64> {
    let m = mse(reference, test)?;
    let r = resolve_range(reference, data_range)?;
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (r * r / m).log10())
}

fn gaussian_taps() -> [f64; WINDOW] {
    let mut w = [0.0; WINDOW];
    let c = (WINDOW / 2) as f64;
    for (i, t) in w.iter_mut().enumerate() {
        let d = i as f64 - c;
        *t = (-d * d / (2.0 * WINDOW_SIGMA * WINDOW_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.map(|v| v / s)
}

/// Separable weighted local mean over every full window position.
fn filter_valid(x: &Array2<f64>, taps: &[f64; WINDOW]) -> Array2<f64> {
    let (r, c) = x.dim();
    let (vr, vc) = (r + 1 - WINDOW, c + 1 - WINDOW);
    let mut rows = Array2::<f64>::zeros((vr, c));
    for i in 0..vr {
        for j in 0..c {
            rows[[i, j]] = (0..WINDOW).map(|k| taps[k] * x[[i + k, j]]).sum();
        }
    }
    let mut out = Array2::<f64>::zeros((vr, vc));
    for i in 0..vr {
        for j in 0..vc {
            out[[i, j]] = (0..WINDOW).map(|k| taps[k] * rows[[i, j + k]]).sum();
        }
    }
    out
}

/// Mean structural similarity with an 11x11 Gaussian window (σ = 1.5),
/// evaluated at window positions lying fully inside the image.
pub fn ssim(reference: ArrayView2<'_, f64>, test: ArrayView2<'_, f64>, data_range: Option<f64>) -> Result<f64> {
    check_pair(reference, test)?;
    let (r, c) = reference.dim();
    if r < WINDOW || c < WINDOW {
        return Err(invalid(format!("ssim needs images of at least {WINDOW}x{WINDOW}, got {r}x{c}")));
    }
    let range = resolve_range(reference, data_range)?;
    let c1 = (K1 * range).powi(2);
    let c2 = (K2 * range).powi(2);
    let taps = gaussian_taps();
    let a = reference.to_owned();
    let b = test.to_owned();
    let mu_a = filter_valid(&a, &taps);
    let mu_b = filter_valid(&b, &taps);
    let aa = filter_valid(&(&a * &a), &taps);
    let bb = filter_valid(&(&b * &b), &taps);
    let ab = filter_valid(&(&a * &b), &taps);
    let mut total = 0.0;
    for idx in 0..mu_a.len() {
        let (i, j) = (idx / mu_a.ncols(), idx % mu_a.ncols());
        let (ma, mb) = (mu_a[[i, j]], mu_b[[i, j]]);
        let va = aa[[i, j]] - ma * ma;
        let vb = bb[[i, j]] - mb * mb;
        let cov = ab[[i, j]] - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    Ok(total / mu_a.len() as f64)
}

pub fn evaluate(reference: ArrayView2<'_, f64>, test: ArrayView2<'_, f64>, data_range: Option<f64>) -> Result<MetricReport> {
    let range = resolve_range(reference, data_range)?;
    Ok(MetricReport {
        psnr_db: psnr(reference, test, Some(range))?,
        ssim: ssim(reference, test, Some(range))?,
        mse: mse(reference, test)?,
        data_range: range,
    })
}
