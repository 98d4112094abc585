//! Square image grids and synthetic test phantoms.
//!
//! Grids are centred on the origin with physical units in centimetres.
//! Pixel `(row, col)` has its centre at
//! `x = -fov/2 + (col + 0.5)·pixel`, `y = -fov/2 + (row + 0.5)·pixel`,
//! so row index grows with `y`.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub n: usize,
    pub fov: f64,
}

impl GridSpec {
    pub fn new(n: usize, fov: f64) -> Result<Self> {
        if n < 8 {
            return Err(invalid(format!("grid needs at least 8 pixels per side, got {n}")));
        }
        if !(fov > 0.0) || !fov.is_finite() {
            return Err(invalid(format!("field of view must be positive, got {fov}")));
        }
        Ok(Self { n, fov })
    }

    pub fn pixel_size(&self) -> f64 {
        self.fov / self.n as f64
    }

    /// Lower edge of the grid along either axis.
    pub fn min_coord(&self) -> f64 {
        -0.5 * self.fov
    }

    pub fn pixel_center(&self, index: usize) -> f64 {
        self.min_coord() + (index as f64 + 0.5) * self.pixel_size()
    }
}

pub fn make_grid(n: usize, fov: f64) -> Result<GridSpec> {
    GridSpec::new(n, fov)
}

/// A reconstructed or ground-truth attenuation image.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub grid: GridSpec,
    pub data: Array2<f64>,
}

impl Image {
    pub fn zeros(grid: GridSpec) -> Self {
        Self { grid, data: Array2::zeros((grid.n, grid.n)) }
    }

    pub fn from_array(grid: GridSpec, data: Array2<f64>) -> Result<Self> {
        if data.dim() != (grid.n, grid.n) {
            return Err(invalid(format!(
                "image data {:?} does not match {}x{} grid",
                data.dim(),
                grid.n,
                grid.n
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(invalid("image contains non-finite values"));
        }
        Ok(Self { grid, data })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EllipseSpec {
    pub cx: f64,
    pub cy: f64,
    pub a: f64,
    pub b: f64,
    /// Counter-clockwise rotation of the `a` axis, radians.
    pub rotation: f64,
    pub intensity: f64,
}

impl EllipseSpec {
    pub fn disk(cx: f64, cy: f64, radius: f64, intensity: f64) -> Self {
        Self { cx, cy, a: radius, b: radius, rotation: 0.0, intensity }
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        let dx = x - self.cx;
        let dy = y - self.cy;
        if self.a == self.b {
            // circles are rotation-free
            return dx * dx + dy * dy <= self.a * self.a;
        }
        let (s, c) = self.rotation.sin_cos();
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        (u / self.a).powi(2) + (v / self.b).powi(2) <= 1.0
    }
}

/// Sum of ellipse indicators evaluated at pixel centres.
pub fn ellipse_phantom(grid: GridSpec, ellipses: &[EllipseSpec]) -> Result<Image> {
    if ellipses.is_empty() {
        return Err(invalid("ellipse list is empty"));
    }
    for e in ellipses {
        if !(e.a > 0.0 && e.b > 0.0) {
            return Err(invalid(format!("ellipse semi-axes must be positive: {e:?}")));
        }
    }
    let data = Array2::from_shape_fn((grid.n, grid.n), |(r, c)| {
        let x = grid.pixel_center(c);
        let y = grid.pixel_center(r);
        ellipses.iter().filter(|e| e.contains(x, y)).map(|e| e.intensity).sum()
    });
    Ok(Image { grid, data })
}

pub fn disk_phantom(grid: GridSpec, radius_cm: f64, value: f64) -> Result<Image> {
    if !(radius_cm > 0.0 && radius_cm < 0.5 * grid.fov) {
        return Err(invalid(format!(
            "disk radius {radius_cm} outside (0, {})",
            0.5 * grid.fov
        )));
    }
    ellipse_phantom(grid, &[EllipseSpec::disk(0.0, 0.0, radius_cm, value)])
}

/// The ten-ellipse Shepp-Logan head phantom (high-contrast intensities),
/// scaled so the outer skull fills the inscribed circle of the grid.
pub fn shepp_logan_ellipses(grid: GridSpec) -> Vec<EllipseSpec> {
    // (cx, cy, a, b, rotation deg, intensity) on the unit disk
    const TABLE: [(f64, f64, f64, f64, f64, f64); 10] = [
        (0.0, 0.0, 0.69, 0.92, 0.0, 1.0),
        (0.0, -0.0184, 0.6624, 0.874, 0.0, -0.8),
        (0.22, 0.0, 0.11, 0.31, -18.0, -0.2),
        (-0.22, 0.0, 0.16, 0.41, 18.0, -0.2),
        (0.0, 0.35, 0.21, 0.25, 0.0, 0.1),
        (0.0, 0.1, 0.046, 0.046, 0.0, 0.1),
        (0.0, -0.1, 0.046, 0.046, 0.0, 0.1),
        (-0.08, -0.605, 0.046, 0.023, 0.0, 0.1),
        (0.0, -0.605, 0.023, 0.023, 0.0, 0.1),
        (0.06, -0.605, 0.023, 0.046, 0.0, 0.1),
    ];
    let half = 0.5 * grid.fov;
    TABLE
        .iter()
        .map(|&(cx, cy, a, b, deg, intensity)| EllipseSpec {
            cx: cx * half,
            cy: cy * half,
            a: a * half,
            b: b * half,
            rotation: deg.to_radians(),
            intensity,
        })
        .collect()
}

pub fn shepp_logan(grid: GridSpec) -> Image {
    ellipse_phantom(grid, &shepp_logan_ellipses(grid)).expect("table ellipses are valid")
}

/// Random soft-tissue-like composite: one body ellipse with a handful of
/// inclusions, all inside the inscribed circle of the grid.
pub fn random_ellipses<R: Rng + ?Sized>(grid: GridSpec, rng: &mut R) -> Vec<EllipseSpec> {
    let half = 0.5 * grid.fov;
    let body_a = half * rng.random_range(0.6..0.9);
    let body_b = half * rng.random_range(0.5..0.9);
    let body = EllipseSpec {
        cx: half * rng.random_range(-0.05..0.05),
        cy: half * rng.random_range(-0.05..0.05),
        a: body_a,
        b: body_b,
        rotation: rng.random_range(0.0..std::f64::consts::PI),
        intensity: rng.random_range(0.8..1.2),
    };
    let inner = body_a.min(body_b);
    let mut out = vec![body];
    let count = rng.random_range(2..=6);
    for _ in 0..count {
        let r = inner * rng.random_range(0.0..0.6);
        let phi = rng.random_range(0.0..std::f64::consts::TAU);
        let a = inner * rng.random_range(0.05..0.35);
        let b = inner * rng.random_range(0.05..0.35);
        out.push(EllipseSpec {
            cx: body.cx + r * phi.cos(),
            cy: body.cy + r * phi.sin(),
            a,
            b,
            rotation: rng.random_range(0.0..std::f64::consts::PI),
            intensity: rng.random_range(-0.5..0.6),
        });
    }
    out
}
