//! Single-level orthonormal 2-D Haar transform of sinograms and the
//! sub-band stacks built from it.
//!
//! For each 2×2 block `[[a, b], [c, d]]` (rows are views, columns are
//! detector elements):
//!
//! ```text
//! LL = (a + b + c + d) / 2
//! LH = (a - b + c - d) / 2   detail across detector elements
//! HL = (a + b - c - d) / 2   detail across views
//! HH = (a - b - c + d) / 2
//! ```

use ndarray::{s, Array2, Array3, ArrayView2, Axis};

use crate::error::{invalid, Result};
use crate::projector::{FanBeamGeometry, Sinogram};

pub const LL: usize = 0;
pub const LH: usize = 1;
pub const HL: usize = 2;
pub const HH: usize = 3;

/// Full four-band stack `{LL, LH, HL, HH}`, shape `(4, rows/2, cols/2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SubbandStack {
    pub planes: Array3<f64>,
    pub geometry: Option<FanBeamGeometry>,
}

/// Detail bands `{LH, HL, HH}`, shape `(3, rows/2, cols/2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct HighFreqStack {
    pub planes: Array3<f64>,
}

impl SubbandStack {
    pub fn new(planes: Array3<f64>, geometry: Option<FanBeamGeometry>) -> Result<Self> {
        if planes.dim().0 != 4 {
            return Err(invalid(format!("sub-band stack needs 4 planes, got {}", planes.dim().0)));
        }
        if let Some(g) = &geometry {
            if (2 * planes.dim().1, 2 * planes.dim().2) != (g.n_views, g.n_detectors) {
                return Err(invalid("sub-band planes do not match geometry"));
            }
        }
        Ok(Self { planes, geometry })
    }

    pub fn ll(&self) -> ArrayView2<'_, f64> {
        self.planes.index_axis(Axis(0), LL)
    }

    pub fn plane_shape(&self) -> (usize, usize) {
        let (_, r, c) = self.planes.dim();
        (r, c)
    }
}

impl HighFreqStack {
    pub fn new(planes: Array3<f64>) -> Result<Self> {
        if planes.dim().0 != 3 {
            return Err(invalid(format!("high-frequency stack needs 3 planes, got {}", planes.dim().0)));
        }
        Ok(Self { planes })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { planes: Array3::zeros((3, rows, cols)) }
    }

    pub fn plane_shape(&self) -> (usize, usize) {
        let (_, r, c) = self.planes.dim();
        (r, c)
    }
}

/// Haar analysis of a raw even-shaped array into `(4, rows/2, cols/2)`.
pub fn haar_analysis(x: ArrayView2<'_, f64>) -> Result<Array3<f64>> {
    let (rows, cols) = x.dim();
    if rows % 2 != 0 || cols % 2 != 0 || rows == 0 || cols == 0 {
        return Err(invalid(format!("wavelet transform needs even dimensions, got {rows}x{cols}")));
    }
    let (hr, hc) = (rows / 2, cols / 2);
    let mut out = Array3::zeros((4, hr, hc));
    for i in 0..hr {
        for j in 0..hc {
            let a = x[[2 * i, 2 * j]];
            let b = x[[2 * i, 2 * j + 1]];
            let c = x[[2 * i + 1, 2 * j]];
            let d = x[[2 * i + 1, 2 * j + 1]];
            out[[LL, i, j]] = 0.5 * ((a + b) + (c + d));
            out[[LH, i, j]] = 0.5 * ((a - b) + (c - d));
            out[[HL, i, j]] = 0.5 * ((a + b) - (c + d));
            out[[HH, i, j]] = 0.5 * ((a - b) - (c - d));
        }
    }
    Ok(out)
}

/// Exact inverse of [`haar_analysis`].
pub fn haar_synthesis(bands: &Array3<f64>) -> Array2<f64> {
    let (_, hr, hc) = bands.dim();
    let mut x = Array2::zeros((2 * hr, 2 * hc));
    for i in 0..hr {
        for j in 0..hc {
            let ll = bands[[LL, i, j]];
            let lh = bands[[LH, i, j]];
            let hl = bands[[HL, i, j]];
            let hh = bands[[HH, i, j]];
            x[[2 * i, 2 * j]] = 0.5 * ((ll + lh) + (hl + hh));
            x[[2 * i, 2 * j + 1]] = 0.5 * ((ll - lh) + (hl - hh));
            x[[2 * i + 1, 2 * j]] = 0.5 * ((ll + lh) - (hl + hh));
            x[[2 * i + 1, 2 * j + 1]] = 0.5 * ((ll - lh) - (hl - hh));
        }
    }
    x
}

pub fn dwt2(sino: &Sinogram) -> Result<SubbandStack> {
    let planes = haar_analysis(sino.data.view())?;
    Ok(SubbandStack { planes, geometry: Some(sino.geometry.clone()) })
}

/// Inverse transform. Stacks without geometry (e.g. loaded from a bare
/// stack file) cannot be turned back into a sinogram; use
/// [`haar_synthesis`] for the raw array.
pub fn idwt2(stack: &SubbandStack) -> Result<Sinogram> {
    let geometry = stack
        .geometry
        .clone()
        .ok_or_else(|| invalid("sub-band stack carries no geometry"))?;
    Ok(Sinogram { geometry, data: haar_synthesis(&stack.planes) })
}

/// `E`: the three detail planes.
pub fn extract_high(stack: &SubbandStack) -> HighFreqStack {
    HighFreqStack { planes: stack.planes.slice(s![1..4, .., ..]).to_owned() }
}

/// Rebuild a four-band stack from detail planes and an approximation plane.
pub fn embed_high(
    high: &HighFreqStack,
    ll: ArrayView2<'_, f64>,
    geometry: Option<FanBeamGeometry>,
) -> Result<SubbandStack> {
    if high.plane_shape() != ll.dim() {
        return Err(invalid(format!(
            "approximation plane {:?} does not match detail planes {:?}",
            ll.dim(),
            high.plane_shape()
        )));
    }
    let (r, c) = ll.dim();
    let mut planes = Array3::zeros((4, r, c));
    planes.index_axis_mut(Axis(0), LL).assign(&ll);
    planes.slice_mut(s![1..4, .., ..]).assign(&high.planes);
    SubbandStack::new(planes, geometry)
}
