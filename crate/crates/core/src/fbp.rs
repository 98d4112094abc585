//! Fan-beam filtered backprojection for a flat detector over a full turn.

use std::sync::Arc;

use ndarray::{Array2, Axis};
use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::phantom::{GridSpec, Image};
use crate::projector::{zero_fill, FanBeamGeometry, Sinogram, SparseSinogram};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum FilterKind {
    #[default]
    RamLak,
    SheppLoganWindow,
}

impl std::str::FromStr for FilterKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "ram-lak" => Ok(FilterKind::RamLak),
            "shepp-logan-window" | "shepp-logan" => Ok(FilterKind::SheppLoganWindow),
            other => Err(format!("unknown filter '{other}'")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterSpec {
    pub kind: FilterKind,
    /// Fraction of the Nyquist frequency kept.
    pub cutoff: f64,
}

impl Default for FilterSpec {
    fn default() -> Self {
        Self { kind: FilterKind::RamLak, cutoff: 1.0 }
    }
}

impl FilterSpec {
    pub fn new(kind: FilterKind, cutoff: f64) -> Result<Self> {
        if !(cutoff > 0.0 && cutoff <= 1.0) {
            return Err(invalid(format!("filter cutoff must lie in (0, 1], got {cutoff}")));
        }
        Ok(Self { kind, cutoff })
    }
}

/// Closed-form band-limited ramp kernel tap for integer offset `n`.
pub fn ram_lak_tap(n: i64, spacing: f64) -> f64 {
    if n == 0 {
        1.0 / (4.0 * spacing * spacing)
    } else if n % 2 == 0 {
        0.0
    } else {
        let d = std::f64::consts::PI * n as f64 * spacing;
        -1.0 / (d * d)
    }
}

/// Row filter for one detector length, evaluated by FFT on a zero-padded
/// buffer of `padded_len() ≥ 2·n` samples.
pub(crate) struct RampFilter {
    n: usize,
    response: Vec<f64>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl RampFilter {
    pub(crate) fn new(n: usize, spacing: f64, spec: FilterSpec) -> Self {
        let m = (2 * n).next_power_of_two();
        let mut planner = FftPlanner::new();
        let forward = planner.plan_fft_forward(m);
        let inverse = planner.plan_fft_inverse(m);

        let half = (m / 2) as i64;
        let mut kernel: Vec<Complex<f64>> = (0..m as i64)
            .map(|i| {
                let n = if i < half { i } else { i - m as i64 };
                Complex::new(ram_lak_tap(n, spacing), 0.0)
            })
            .collect();
        forward.process(&mut kernel);

        let fc = 0.5 * spec.cutoff;
        let response = kernel
            .iter()
            .enumerate()
            .map(|(k, h)| {
                if k == 0 {
                    return 0.0;
                }
                let f = if k <= m / 2 { k as f64 } else { (m - k) as f64 } / m as f64;
                if f > fc + 1e-12 {
                    return 0.0;
                }
                let window = match spec.kind {
                    FilterKind::RamLak => 1.0,
                    FilterKind::SheppLoganWindow => {
                        let x = std::f64::consts::PI * f / (2.0 * fc);
                        x.sin() / x
                    }
                };
                h.re * window
            })
            .collect();
        Self { n, response, forward, inverse }
    }

    pub(crate) fn padded_len(&self) -> usize {
        self.response.len()
    }

    /// Full circular output on the padded buffer.
    pub(crate) fn apply_padded(&self, row: &[f64]) -> Vec<f64> {
        let m = self.padded_len();
        let mut buf: Vec<Complex<f64>> = (0..m)
            .map(|i| Complex::new(if i < row.len() { row[i] } else { 0.0 }, 0.0))
            .collect();
        self.forward.process(&mut buf);
        for (b, h) in buf.iter_mut().zip(&self.response) {
            *b *= *h;
        }
        self.inverse.process(&mut buf);
        let scale = 1.0 / m as f64;
        buf.iter().map(|c| c.re * scale).collect()
    }

    pub(crate) fn apply(&self, row: &[f64]) -> Vec<f64> {
        debug_assert_eq!(row.len(), self.n);
        let mut out = self.apply_padded(row);
        out.truncate(self.n);
        out
    }
}

/// Convolve every view with the discrete ramp kernel at the detector's own
/// element spacing. The kernel is not multiplied by the spacing.
pub fn ramp_filter_rows(sino: &Sinogram, spec: FilterSpec) -> Result<Sinogram> {
    let n = sino.geometry.n_detectors;
    if n < 4 {
        return Err(invalid("ramp filtering needs at least 4 detector elements"));
    }
    FilterSpec::new(spec.kind, spec.cutoff)?;
    let filter = RampFilter::new(n, sino.geometry.detector_spacing(), spec);
    let mut data = sino.data.clone();
    filter_in_place(&mut data, &filter);
    Ok(Sinogram { geometry: sino.geometry.clone(), data })
}

fn filter_in_place(data: &mut Array2<f64>, filter: &RampFilter) {
    data.axis_iter_mut(Axis(0)).into_par_iter().for_each(|mut row| {
        let input: Vec<f64> = row.iter().copied().collect();
        for (o, v) in row.iter_mut().zip(filter.apply(&input)) {
            *o = v;
        }
    });
}

/// Detector samples rebinned to a virtual detector through the rotation
/// centre: `(offsets, spacing)`.
fn virtual_detector(geo: &FanBeamGeometry) -> (Vec<f64>, f64) {
    let mag = geo.source_to_center_cm / (geo.source_to_center_cm + geo.center_to_detector_cm);
    let offsets = (0..geo.n_detectors).map(|j| geo.detector_offset(j) * mag).collect();
    (offsets, geo.detector_spacing() * mag)
}

/// Cosine-weighted, ramp-filtered projections scaled by the virtual
/// detector spacing.
fn filtered_projections(sino: &Sinogram, spec: FilterSpec) -> Array2<f64> {
    let geo = &sino.geometry;
    let d = geo.source_to_center_cm;
    let (offsets, ds) = virtual_detector(geo);
    let mut weighted = sino.data.clone();
    for mut row in weighted.axis_iter_mut(Axis(0)) {
        for (v, s) in row.iter_mut().zip(&offsets) {
            *v *= d / (d * d + s * s).sqrt();
        }
    }
    let filter = RampFilter::new(geo.n_detectors, ds, spec);
    filter_in_place(&mut weighted, &filter);
    weighted.mapv_inplace(|v| v * ds);
    weighted
}

/// Distance-weighted backprojection of already filtered rows, with linear
/// interpolation along the detector.
fn weighted_backprojection(filtered: &Array2<f64>, geo: &FanBeamGeometry, grid: GridSpec) -> Image {
    let d = geo.source_to_center_cm;
    let (_, ds) = virtual_detector(geo);
    let n_det = geo.n_detectors;
    let center = 0.5 * (n_det as f64 - 1.0);
    let trig: Vec<(f64, f64)> = geo.view_angles().iter().map(|b| b.sin_cos()).collect();
    let scale = 0.5 * geo.angular_step();

    let mut data = Array2::zeros((grid.n, grid.n));
    data.axis_iter_mut(Axis(0)).into_par_iter().enumerate().for_each(|(r, mut row)| {
        let y = grid.pixel_center(r);
        for (c, out) in row.iter_mut().enumerate() {
            let x = grid.pixel_center(c);
            let mut acc = 0.0;
            for (view, &(sb, cb)) in trig.iter().enumerate() {
                let u = (d - (x * cb + y * sb)) / d;
                let s = (-x * sb + y * cb) / u;
                let pos = s / ds + center;
                if pos < 0.0 || pos > (n_det - 1) as f64 {
                    continue;
                }
                let i0 = (pos.floor() as usize).min(n_det - 2);
                let frac = pos - i0 as f64;
                let q = filtered[[view, i0]] * (1.0 - frac) + filtered[[view, i0 + 1]] * frac;
                acc += q / (u * u);
            }
            *out = acc * scale;
        }
    });
    Image { grid, data }
}

pub fn fbp_reconstruct(sino: &Sinogram, grid: GridSpec, spec: FilterSpec) -> Result<Image> {
    let geo = &sino.geometry;
    geo.validate()?;
    geo.check_grid(&grid)?;
    if sino.data.dim() != (geo.n_views, geo.n_detectors) {
        return Err(invalid("sinogram shape does not match its geometry"));
    }
    if geo.n_detectors < 4 {
        return Err(invalid("fbp needs at least 4 detector elements"));
    }
    FilterSpec::new(spec.kind, spec.cutoff)?;
    let filtered = filtered_projections(sino, spec);
    Ok(weighted_backprojection(&filtered, geo, grid))
}

/// Sparse-view FBP baseline: only the measured views contribute and the
/// angular weight is the mean spacing of those views.
pub fn fbp_sparse(
    sparse: &SparseSinogram,
    geo: &FanBeamGeometry,
    grid: GridSpec,
    spec: FilterSpec,
) -> Result<Image> {
    let filled = zero_fill(sparse, geo)?;
    let mut img = fbp_reconstruct(&filled, grid, spec)?;
    let factor = geo.n_views as f64 / sparse.mask.len() as f64;
    img.data.mapv_inplace(|v| v * factor);
    Ok(img)
}
