//! Fan-beam system matrix: Siddon ray-driven forward projection, its exact
//! transpose, and sparse-view subsampling.
//!
//! Geometry convention: at view angle `β` the source sits at
//! `R_s·(cos β, sin β)` and the flat detector is centred at
//! `-R_d·(cos β, sin β)` with its elements laid out along
//! `(-sin β, cos β)`. Detector element `j` is centred at offset
//! `(j - (N-1)/2)·Δ`, `Δ = detector_width / N`.

use ndarray::{Array2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::phantom::{GridSpec, Image};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FanBeamGeometry {
    pub source_to_center_cm: f64,
    pub center_to_detector_cm: f64,
    pub detector_width_cm: f64,
    pub n_detectors: usize,
    pub n_views: usize,
}

impl Default for FanBeamGeometry {
    fn default() -> Self {
        Self {
            source_to_center_cm: 40.0,
            center_to_detector_cm: 40.0,
            detector_width_cm: 41.3,
            n_detectors: 720,
            n_views: 720,
        }
    }
}

/// Full-scale scanner: 40 cm source and detector arms, 41.3 cm flat
/// detector with 720 elements, 720 views over a full turn.
pub fn default_geometry() -> FanBeamGeometry {
    FanBeamGeometry::default()
}

impl FanBeamGeometry {
    pub fn with_counts(n_views: usize, n_detectors: usize) -> Result<Self> {
        let g = Self { n_views, n_detectors, ..Self::default() };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        let dists = [self.source_to_center_cm, self.center_to_detector_cm, self.detector_width_cm];
        if dists.iter().any(|d| !(d.is_finite() && *d > 0.0)) {
            return Err(invalid(format!("geometry distances must be positive: {self:?}")));
        }
        if self.n_views == 0 || self.n_detectors == 0 {
            return Err(invalid("geometry needs at least one view and one detector"));
        }
        Ok(())
    }

    pub fn detector_spacing(&self) -> f64 {
        self.detector_width_cm / self.n_detectors as f64
    }

    pub fn angular_step(&self) -> f64 {
        std::f64::consts::TAU / self.n_views as f64
    }

    pub fn view_angle(&self, view: usize) -> f64 {
        self.angular_step() * view as f64
    }

    pub fn view_angles(&self) -> Vec<f64> {
        (0..self.n_views).map(|k| self.view_angle(k)).collect()
    }

    /// Signed offset of a detector element centre along the detector.
    pub fn detector_offset(&self, element: usize) -> f64 {
        (element as f64 - 0.5 * (self.n_detectors as f64 - 1.0)) * self.detector_spacing()
    }

    /// Source and detector-element positions for one ray.
    pub fn ray_endpoints(&self, view: usize, element: usize) -> ([f64; 2], [f64; 2]) {
        let (s, c) = self.view_angle(view).sin_cos();
        let src = [self.source_to_center_cm * c, self.source_to_center_cm * s];
        let t = self.detector_offset(element);
        let det = [
            -self.center_to_detector_cm * c - t * s,
            -self.center_to_detector_cm * s + t * c,
        ];
        (src, det)
    }

    pub fn check_grid(&self, grid: &GridSpec) -> Result<()> {
        let radius = grid.fov * std::f64::consts::SQRT_2 / 2.0;
        if radius > self.source_to_center_cm {
            return Err(invalid(format!(
                "grid half-diagonal {radius:.3} cm exceeds source distance {} cm",
                self.source_to_center_cm
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sinogram {
    pub geometry: FanBeamGeometry,
    /// `n_views × n_detectors`
    pub data: Array2<f64>,
}

impl Sinogram {
    pub fn zeros(geometry: FanBeamGeometry) -> Self {
        let data = Array2::zeros((geometry.n_views, geometry.n_detectors));
        Self { geometry, data }
    }

    pub fn from_array(geometry: FanBeamGeometry, data: Array2<f64>) -> Result<Self> {
        check_shape(&geometry, &data)?;
        if data.iter().any(|v| !v.is_finite()) {
            return Err(invalid("sinogram contains non-finite values"));
        }
        Ok(Self { geometry, data })
    }
}

fn check_shape(geo: &FanBeamGeometry, data: &Array2<f64>) -> Result<()> {
    if data.dim() != (geo.n_views, geo.n_detectors) {
        return Err(invalid(format!(
            "sinogram data {:?} does not match geometry {}x{}",
            data.dim(),
            geo.n_views,
            geo.n_detectors
        )));
    }
    Ok(())
}

/// Siddon traversal of the segment `src → dst` through `grid`.
///
/// Appends `(flat pixel index, intersection length)` pairs to `out` in
/// traversal order. Pixels own their low edge, so a ray lying exactly on a
/// grid line is charged to the pixel above/right of it, and a ray on the
/// upper boundary misses.
pub fn trace_ray(grid: &GridSpec, src: [f64; 2], dst: [f64; 2], out: &mut Vec<(usize, f64)>) {
    let n = grid.n;
    let p = grid.pixel_size();
    let lo = grid.min_coord();
    let hi = lo + grid.fov;
    let d = [dst[0] - src[0], dst[1] - src[1]];
    let length = d[0].hypot(d[1]);
    if length == 0.0 {
        return;
    }

    let mut a_min = 0.0f64;
    let mut a_max = 1.0f64;
    for axis in 0..2 {
        if d[axis] == 0.0 {
            if !(src[axis] >= lo && src[axis] < hi) {
                return;
            }
        } else {
            let a0 = (lo - src[axis]) / d[axis];
            let a1 = (hi - src[axis]) / d[axis];
            a_min = a_min.max(a0.min(a1));
            a_max = a_max.min(a0.max(a1));
        }
    }
    if a_min >= a_max {
        return;
    }

    // Interior plane crossings per axis, each already in increasing alpha.
    let mut crossings: [Vec<f64>; 2] = [Vec::new(), Vec::new()];
    for axis in 0..2 {
        if d[axis] == 0.0 {
            continue;
        }
        let list = &mut crossings[axis];
        let planes = (0..=n).map(|i| (lo + i as f64 * p - src[axis]) / d[axis]);
        if d[axis] > 0.0 {
            list.extend(planes.filter(|&a| a > a_min && a < a_max));
        } else {
            list.extend(planes.rev().filter(|&a| a > a_min && a < a_max));
        }
    }

    let mut prev = a_min;
    let (mut ix, mut iy) = (0usize, 0usize);
    let emit = |a0: f64, a1: f64, out: &mut Vec<(usize, f64)>| {
        if a1 <= a0 {
            return;
        }
        let mid = 0.5 * (a0 + a1);
        let x = src[0] + mid * d[0];
        let y = src[1] + mid * d[1];
        let col = (((x - lo) / p).floor().max(0.0) as usize).min(n - 1);
        let row = (((y - lo) / p).floor().max(0.0) as usize).min(n - 1);
        out.push((row * n + col, (a1 - a0) * length));
    };
    let (xs, ys) = (&crossings[0], &crossings[1]);
    while ix < xs.len() || iy < ys.len() {
        let next = if iy >= ys.len() || (ix < xs.len() && xs[ix] <= ys[iy]) {
            ix += 1;
            xs[ix - 1]
        } else {
            iy += 1;
            ys[iy - 1]
        };
        emit(prev, next, out);
        prev = prev.max(next);
    }
    emit(prev, a_max, out);
}

/// `x = A·I`: line integrals of `img` along every source→element ray.
pub fn forward_project(img: &Image, geo: &FanBeamGeometry) -> Result<Sinogram> {
    geo.validate()?;
    geo.check_grid(&img.grid)?;
    let grid = img.grid;
    let flat = img.data.as_slice().map(|s| s.to_vec()).unwrap_or_else(|| img.data.iter().copied().collect());
    let mut data = Array2::zeros((geo.n_views, geo.n_detectors));
    data.axis_iter_mut(Axis(0)).into_par_iter().enumerate().for_each(|(view, mut row)| {
        let mut ray = Vec::with_capacity(4 * grid.n);
        for (element, out) in row.iter_mut().enumerate() {
            ray.clear();
            let (s, d) = geo.ray_endpoints(view, element);
            trace_ray(&grid, s, d, &mut ray);
            *out = ray.iter().map(|&(i, w)| w * flat[i]).sum();
        }
    });
    Ok(Sinogram { geometry: geo.clone(), data })
}

/// Views handled per work unit in [`back_project`]. Partial images are summed
/// in chunk order, so the result does not depend on the thread count.
const BACKPROJECT_CHUNK: usize = 8;

/// `Aᵀ·y`: scatter each sinogram entry along its ray with Siddon weights.
pub fn back_project(sino: &Sinogram, geo: &FanBeamGeometry, grid: GridSpec) -> Result<Image> {
    geo.validate()?;
    check_shape(geo, &sino.data)?;
    geo.check_grid(&grid)?;
    let npix = grid.n * grid.n;
    let views: Vec<usize> = (0..geo.n_views).collect();
    let partials: Vec<Vec<f64>> = views
        .par_chunks(BACKPROJECT_CHUNK)
        .map(|chunk| {
            let mut acc = vec![0.0; npix];
            let mut ray = Vec::with_capacity(4 * grid.n);
            for &view in chunk {
                for element in 0..geo.n_detectors {
                    let v = sino.data[[view, element]];
                    if v == 0.0 {
                        continue;
                    }
                    ray.clear();
                    let (s, d) = geo.ray_endpoints(view, element);
                    trace_ray(&grid, s, d, &mut ray);
                    for &(i, w) in &ray {
                        acc[i] += w * v;
                    }
                }
            }
            acc
        })
        .collect();
    let mut total = vec![0.0; npix];
    for part in &partials {
        for (t, p) in total.iter_mut().zip(part) {
            *t += p;
        }
    }
    let data = Array2::from_shape_vec((grid.n, grid.n), total).expect("pixel count");
    Ok(Image { grid, data })
}

/// Which projection views were actually acquired.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ViewMask {
    total_views: usize,
    kept_indices: Vec<usize>,
}

impl ViewMask {
    pub fn new(total_views: usize, kept_indices: Vec<usize>) -> Result<Self> {
        if kept_indices.is_empty() {
            return Err(invalid("view mask keeps no views"));
        }
        if kept_indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(invalid("view mask indices must be strictly increasing"));
        }
        if *kept_indices.last().unwrap() >= total_views {
            return Err(invalid(format!("view index out of range for {total_views} views")));
        }
        Ok(Self { total_views, kept_indices })
    }

    pub fn total_views(&self) -> usize {
        self.total_views
    }

    pub fn kept_indices(&self) -> &[usize] {
        &self.kept_indices
    }

    pub fn len(&self) -> usize {
        self.kept_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kept_indices.is_empty()
    }

    /// Per-view membership flags.
    pub fn measured(&self) -> Vec<bool> {
        let mut flags = vec![false; self.total_views];
        for &k in &self.kept_indices {
            flags[k] = true;
        }
        flags
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{}\n", self.total_views);
        for k in &self.kept_indices {
            s.push_str(&format!("{k}\n"));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty());
        let parse = |l: &str| {
            l.parse::<usize>().map_err(|_| crate::error::SwordError::Format(format!("bad mask line '{l}'")))
        };
        let total = parse(lines.next().ok_or_else(|| crate::error::SwordError::Format("empty mask file".into()))?)?;
        let kept = lines.map(parse).collect::<Result<Vec<_>>>()?;
        Self::new(total, kept)
    }
}

/// Evenly spaced subset of `kept` views out of `total`.
pub fn view_mask(total: usize, kept: usize) -> Result<ViewMask> {
    if total == 0 || kept == 0 {
        return Err(invalid("view counts must be positive"));
    }
    if kept > total {
        return Err(invalid(format!("cannot keep {kept} of {total} views")));
    }
    let indices = if total.is_multiple_of(kept) {
        let stride = total / kept;
        (0..kept).map(|i| i * stride).collect()
    } else {
        (0..kept).map(|i| (i as f64 * total as f64 / kept as f64).round() as usize).collect()
    };
    ViewMask::new(total, indices)
}

/// Measured views only, `|kept| × n_detectors`.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseSinogram {
    pub mask: ViewMask,
    pub data: Array2<f64>,
}

impl SparseSinogram {
    pub fn new(mask: ViewMask, data: Array2<f64>) -> Result<Self> {
        if data.nrows() != mask.len() {
            return Err(invalid(format!("{} rows for a mask of {} views", data.nrows(), mask.len())));
        }
        Ok(Self { mask, data })
    }
}

/// `y = P(Λ)·x`
pub fn subsample(sino: &Sinogram, mask: &ViewMask) -> Result<SparseSinogram> {
    if mask.total_views() != sino.data.nrows() {
        return Err(invalid(format!(
            "mask expects {} views, sinogram has {}",
            mask.total_views(),
            sino.data.nrows()
        )));
    }
    let data = sino.data.select(Axis(0), mask.kept_indices());
    Ok(SparseSinogram { mask: mask.clone(), data })
}

/// Embed measured rows into a full-view sinogram with zeros elsewhere.
pub fn zero_fill(sparse: &SparseSinogram, geo: &FanBeamGeometry) -> Result<Sinogram> {
    if sparse.mask.total_views() != geo.n_views || sparse.data.ncols() != geo.n_detectors {
        return Err(invalid("sparse sinogram does not match geometry"));
    }
    let mut out = Sinogram::zeros(geo.clone());
    for (row, &k) in sparse.mask.kept_indices().iter().enumerate() {
        out.data.row_mut(k).assign(&sparse.data.row(row));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{disk_phantom, make_grid};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_geo() -> FanBeamGeometry {
        FanBeamGeometry::with_counts(90, 90).unwrap()
    }

    fn random_image(grid: GridSpec, rng: &mut ChaCha8Rng) -> Image {
        let data = Array2::from_shape_fn((grid.n, grid.n), |_| rng.random_range(-1.0..1.0));
        Image { grid, data }
    }

    #[test]
    fn default_geometry_values() {
        let g = default_geometry();
        assert_eq!(g.source_to_center_cm, 40.0);
        assert_eq!(g.center_to_detector_cm, 40.0);
        assert_eq!(g.detector_width_cm, 41.3);
        assert_eq!(g.n_detectors, 720);
        assert_eq!(g.n_views, 720);
        let angles = g.view_angles();
        assert_eq!(angles[0], 0.0);
        for (k, a) in angles.iter().enumerate() {
            assert!((a - std::f64::consts::TAU * k as f64 / 720.0).abs() < 1e-14);
        }
        let small = FanBeamGeometry::with_counts(180, 180).unwrap();
        assert_eq!(small.source_to_center_cm, 40.0);
        assert_eq!(small.center_to_detector_cm, 40.0);
    }

    #[test]
    fn zero_image_projects_to_zero() {
        let grid = make_grid(16, 10.0).unwrap();
        let s = forward_project(&Image::zeros(grid), &small_geo()).unwrap();
        assert!(s.data.iter().all(|&v| v == 0.0));
        let b = back_project(&Sinogram::zeros(small_geo()), &small_geo(), grid).unwrap();
        assert!(b.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn oversized_grid_rejected() {
        let grid = make_grid(16, 60.0).unwrap();
        assert!(forward_project(&Image::zeros(grid), &small_geo()).is_err());
    }

    #[test]
    fn axis_aligned_ray_on_grid_line() {
        let grid = make_grid(8, 8.0).unwrap();
        let mut out = Vec::new();
        // vertical ray along x = 0, the boundary between columns 3 and 4
        trace_ray(&grid, [0.0, -10.0], [0.0, 10.0], &mut out);
        let cols: Vec<usize> = out.iter().map(|&(i, _)| i % 8).collect();
        assert_eq!(cols, vec![4; 8]);
        let total: f64 = out.iter().map(|&(_, w)| w).sum();
        assert!((total - 8.0).abs() < 1e-12);
        // upper boundary is not owned by the grid
        out.clear();
        trace_ray(&grid, [4.0, -10.0], [4.0, 10.0], &mut out);
        assert!(out.is_empty());
        // a ray missing the grid contributes nothing
        trace_ray(&grid, [-10.0, 5.0], [10.0, 6.0], &mut out);
        assert!(out.is_empty());
    }

    #[test]
    fn diagonal_ray_lengths() {
        let grid = make_grid(8, 8.0).unwrap();
        let mut out = Vec::new();
        trace_ray(&grid, [-5.0, -5.0], [5.0, 5.0], &mut out);
        let total: f64 = out.iter().map(|&(_, w)| w).sum();
        assert!((total - 8.0 * std::f64::consts::SQRT_2).abs() < 1e-12);
        for &(i, _) in &out {
            assert_eq!(i / 8, i % 8, "diagonal pixels only");
        }
    }

    #[test]
    fn adjoint_matches_forward() {
        let grid = make_grid(32, 20.0).unwrap();
        let geo = small_geo();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..3 {
            let x = random_image(grid, &mut rng);
            let y = Sinogram {
                geometry: geo.clone(),
                data: Array2::from_shape_fn((90, 90), |_| rng.random_range(-1.0..1.0)),
            };
            let ax = forward_project(&x, &geo).unwrap();
            let aty = back_project(&y, &geo, grid).unwrap();
            let lhs: f64 = (&ax.data * &y.data).sum();
            let rhs: f64 = (&x.data * &aty.data).sum();
            let scale = ax.data.iter().map(|v| v * v).sum::<f64>().sqrt()
                * y.data.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((lhs - rhs).abs() / scale <= 1e-10);
        }
    }

    #[test]
    fn one_hot_backprojection_support_is_the_ray() {
        let grid = make_grid(32, 20.0).unwrap();
        let geo = small_geo();
        let mut sino = Sinogram::zeros(geo.clone());
        sino.data[[17, 40]] = 1.0;
        let img = back_project(&sino, &geo, grid).unwrap();
        let (s, d) = geo.ray_endpoints(17, 40);
        let mut ray = Vec::new();
        trace_ray(&grid, s, d, &mut ray);
        let mut expected: Vec<usize> = ray.iter().filter(|r| r.1 > 0.0).map(|r| r.0).collect();
        expected.sort_unstable();
        let flat = img.data.as_slice().unwrap();
        let support: Vec<usize> = (0..flat.len()).filter(|&i| flat[i] != 0.0).collect();
        assert_eq!(support, expected);
    }

    #[test]
    fn centered_disk_rows_are_view_independent() {
        let grid = make_grid(64, 20.0).unwrap();
        let disk = disk_phantom(grid, 6.0, 1.0).unwrap();
        let sino = forward_project(&disk, &FanBeamGeometry::with_counts(8, 64).unwrap()).unwrap();
        // Pixelated disks are only 4-fold symmetric; compare views a quarter turn apart.
        let peak = sino.data.iter().cloned().fold(0.0, f64::max);
        for k in [2usize, 4, 6] {
            let diff = (&sino.data.row(k) - &sino.data.row(0)).mapv(f64::abs).fold(0.0f64, |a, &b| a.max(b));
            assert!(diff <= 1e-8 * peak, "view {k}: {diff}");
        }
    }

    #[test]
    fn nonnegative_image_nonnegative_sinogram() {
        let grid = make_grid(16, 10.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let img = Image { grid, data: Array2::from_shape_fn((16, 16), |_| rng.random_range(0.0..2.0)) };
        let s = forward_project(&img, &small_geo()).unwrap();
        assert!(s.data.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn masks() {
        let m = view_mask(720, 60).unwrap();
        assert_eq!(m.kept_indices(), (0..60).map(|i| 12 * i).collect::<Vec<_>>().as_slice());
        assert_eq!(view_mask(720, 720).unwrap().kept_indices(), (0..720).collect::<Vec<_>>().as_slice());
        assert!(view_mask(720, 721).is_err());
        assert!(view_mask(720, 0).is_err());
        let odd = view_mask(10, 4).unwrap();
        assert_eq!(odd.kept_indices(), &[0, 3, 5, 8]);
        let text = m.to_text();
        assert_eq!(ViewMask::from_text(&text).unwrap(), m);
        assert!(ViewMask::new(10, vec![3, 3]).is_err());
        assert!(ViewMask::new(10, vec![10]).is_err());
        assert!(ViewMask::from_text("abc").is_err());
    }

    #[test]
    fn subsample_and_zero_fill() {
        let geo = FanBeamGeometry::with_counts(12, 5).unwrap();
        let data = Array2::from_shape_fn((12, 5), |(r, c)| (r * 10 + c) as f64 + 0.25);
        let sino = Sinogram::from_array(geo.clone(), data).unwrap();

        let all = subsample(&sino, &view_mask(12, 12).unwrap()).unwrap();
        assert_eq!(all.data, sino.data);
        assert_eq!(zero_fill(&all, &geo).unwrap(), sino);

        let first = subsample(&sino, &ViewMask::new(12, vec![0]).unwrap()).unwrap();
        assert_eq!(first.data.row(0), sino.data.row(0));

        let m = view_mask(12, 4).unwrap();
        let sparse = subsample(&sino, &m).unwrap();
        assert_eq!(sparse.data.dim(), (4, 5));
        for (i, &k) in m.kept_indices().iter().enumerate() {
            assert_eq!(sparse.data.row(i), sino.data.row(k));
        }
        let filled = zero_fill(&sparse, &geo).unwrap();
        assert_eq!(subsample(&filled, &m).unwrap(), sparse);
        let twice = zero_fill(&subsample(&filled, &m).unwrap(), &geo).unwrap();
        assert_eq!(twice, filled);
        assert_eq!(filled.data.row(1).sum(), 0.0);

        assert!(subsample(&sino, &view_mask(10, 5).unwrap()).is_err());
        assert!(zero_fill(&sparse, &FanBeamGeometry::with_counts(24, 5).unwrap()).is_err());
    }
}
