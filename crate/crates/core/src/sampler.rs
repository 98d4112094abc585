//! Reverse-time reconstruction: predictor and annealed-Langevin corrector
//! steps, sinogram and detail-band data consistency, and the two-stage
//! loop that completes a sparse-view sinogram.
//!
//! Per reverse iteration `i = T-1 … 0` the full-band stack `X1` runs
//! predictor → DC → corrector×k → DC with the four-band model, then the
//! detail stack `X2` runs the same sequence with the three-band model and
//! detail consistency against `X1`, and finally `X1` takes its detail
//! planes from `X2`. After the loop the stack is pulled through one more
//! sinogram DC, inverted, and reconstructed with FBP.

use log::info;
use ndarray::{s, Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{standard_normal, NoiseSchedule, ScoreModel};
use crate::error::{invalid, Result, SwordError};
use crate::fbp::{fbp_reconstruct, fbp_sparse, FilterSpec};
use crate::phantom::{GridSpec, Image};
use crate::projector::{zero_fill, FanBeamGeometry, Sinogram, SparseSinogram};
use crate::wavelet::{
    embed_high, extract_high, haar_analysis, haar_synthesis, HighFreqStack, SubbandStack,
};

/// How measured projections are enforced on the four-band stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum DcMode {
    /// Relax measured sinogram rows toward the data; other rows untouched.
    #[default]
    SinogramRows,
    /// Relax every wavelet coefficient toward the transform of the
    /// zero-filled sinogram.
    WaveletZeroFilled,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ReconMode {
    #[default]
    Sword,
    /// Four-band model only; detail bands follow `X1`.
    WfdmOnly,
    /// Detail-band model only; `X1` is only data-consistent, starting from
    /// the zero-filled sinogram.
    WhdmOnly,
    /// Sparse-view filtered backprojection baseline.
    Fbp,
}

impl std::str::FromStr for ReconMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "sword" => Ok(ReconMode::Sword),
            "wfdm-only" => Ok(ReconMode::WfdmOnly),
            "whdm-only" => Ok(ReconMode::WhdmOnly),
            "fbp" => Ok(ReconMode::Fbp),
            other => Err(format!("unknown mode '{other}'")),
        }
    }
}

impl std::fmt::Display for ReconMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            ReconMode::Sword => "sword",
            ReconMode::WfdmOnly => "wfdm-only",
            ReconMode::WhdmOnly => "whdm-only",
            ReconMode::Fbp => "fbp",
        };
        f.write_str(name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    /// Noise ladder in raw sinogram units.
    pub schedule: NoiseSchedule,
    pub eta: f64,
    pub eta2: f64,
    pub snr: f64,
    pub corrector_steps: usize,
    pub seed: u64,
    pub dc_mode: DcMode,
    /// Weight of the detail-coupling term in the four-band DC step; off when `None`.
    pub coupling: Option<f64>,
    pub mode: ReconMode,
    pub filter: FilterSpec,
    /// Drop the noise term of the last predictor step (σ₁ → 0), returning
    /// the denoised mean instead of a sample carrying σ₁-level noise.
    pub denoise_final: bool,
    pub nan_check_every: usize,
    pub log_every: usize,
}

impl SamplerConfig {
    pub fn new(schedule: NoiseSchedule) -> Self {
        Self {
            schedule,
            eta: 1.0,
            eta2: 0.5,
            snr: 0.16,
            corrector_steps: 1,
            seed: 0,
            dc_mode: DcMode::SinogramRows,
            coupling: None,
            mode: ReconMode::Sword,
            filter: FilterSpec::default(),
            denoise_final: true,
            nan_check_every: 50,
            log_every: 100,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta <= 1.0) || !(self.eta2 > 0.0 && self.eta2 <= 1.0) {
            return Err(invalid(format!("step lengths must lie in (0, 1]: eta {}, eta2 {}", self.eta, self.eta2)));
        }
        if !(self.snr > 0.0) {
            return Err(invalid(format!("corrector snr must be positive, got {}", self.snr)));
        }
        if self.schedule.len() < 2 {
            return Err(invalid("schedule needs at least two levels"));
        }
        Ok(())
    }
}

/// Reverse-diffusion update with a given noise draw.
pub fn predictor_update<M: ScoreModel + ?Sized>(
    x: &Array3<f64>,
    model: &M,
    sigma_i: f64,
    sigma_ip1: f64,
    z: &Array3<f64>,
) -> Result<Array3<f64>> {
    if !(sigma_ip1 > sigma_i && sigma_i >= 0.0) {
        return Err(invalid(format!("predictor needs 0 <= sigma_i < sigma_i+1, got {sigma_i}, {sigma_ip1}")));
    }
    let dv = sigma_ip1 * sigma_ip1 - sigma_i * sigma_i;
    let g = model.score(x, sigma_ip1);
    Ok(x + &(g * dv) + &(z * dv.sqrt()))
}

/// `x + (σ²ᵢ₊₁ − σ²ᵢ)·s(x, σᵢ₊₁) + √(σ²ᵢ₊₁ − σ²ᵢ)·z`
pub fn predictor_step<M: ScoreModel + ?Sized, R: Rng + ?Sized>(
    x: &Array3<f64>,
    model: &M,
    sigma_i: f64,
    sigma_ip1: f64,
    rng: &mut R,
) -> Result<Array3<f64>> {
    if !(sigma_ip1 > sigma_i && sigma_i >= 0.0) {
        return Err(invalid(format!("predictor needs 0 <= sigma_i < sigma_i+1, got {sigma_i}, {sigma_ip1}")));
    }
    let z = standard_normal(x.dim(), rng);
    predictor_update(x, model, sigma_i, sigma_ip1, &z)
}

/// Langevin step size `2·(snr·‖z‖/‖g‖)²`; `None` when the score vanishes.
pub fn langevin_step_size(grad_norm: f64, noise_norm: f64, snr: f64) -> Option<f64> {
    if grad_norm == 0.0 || !grad_norm.is_finite() {
        return None;
    }
    let r = snr * noise_norm / grad_norm;
    Some(2.0 * r * r)
}

fn norm(a: &Array3<f64>) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// One annealed-Langevin update at fixed `sigma`.
pub fn corrector_step<M: ScoreModel + ?Sized, R: Rng + ?Sized>(
    x: &Array3<f64>,
    model: &M,
    sigma: f64,
    snr: f64,
    rng: &mut R,
) -> Result<Array3<f64>> {
    if !(sigma > 0.0) {
        return Err(invalid(format!("corrector needs a positive noise level, got {sigma}")));
    }
    let g = model.score(x, sigma);
    let z = standard_normal(x.dim(), rng);
    let Some(alpha) = langevin_step_size(norm(&g), norm(&z), snr) else {
        return Ok(x.clone());
    };
    Ok(x + &(g * alpha) + &(z * (2.0 * alpha).sqrt()))
}

fn predict<M: ScoreModel + ?Sized, R: Rng + ?Sized>(
    x: &Array3<f64>,
    model: &M,
    lo: f64,
    hi: f64,
    denoise: bool,
    rng: &mut R,
) -> Result<Array3<f64>> {
    if denoise && lo == 0.0 {
        predictor_update(x, model, lo, hi, &Array3::zeros(x.dim()))
    } else {
        predictor_step(x, model, lo, hi, rng)
    }
}

/// Unconditional predictor-corrector sampling from `x_init` down the whole
/// ladder. No data consistency; used to validate the sampling core. The
/// last predictor step keeps its noise term, so the output is a sample.
pub fn pc_sample<M: ScoreModel + ?Sized, R: Rng + ?Sized>(
    model: &M,
    x_init: Array3<f64>,
    schedule: &NoiseSchedule,
    snr: f64,
    corrector_steps: usize,
    rng: &mut R,
) -> Result<Array3<f64>> {
    let mut x = x_init;
    for i in (0..schedule.len()).rev() {
        let (lo, hi) = (schedule.sigma(i), schedule.sigma(i + 1));
        x = predictor_step(&x, model, lo, hi, rng)?;
        if lo > 0.0 {
            for _ in 0..corrector_steps {
                x = corrector_step(&x, model, lo, snr, rng)?;
            }
        }
    }
    Ok(x)
}

fn check_mask(planes: &Array3<f64>, y: &SparseSinogram) -> Result<()> {
    let (_, r, c) = planes.dim();
    if y.mask.total_views() != 2 * r || y.data.ncols() != 2 * c {
        return Err(invalid(format!(
            "measurements ({} views x {} elements) do not match {}x{} sub-band planes",
            y.mask.total_views(),
            y.data.ncols(),
            r,
            c
        )));
    }
    Ok(())
}

/// Sinogram-row data consistency on the four-band stack: measured rows are
/// moved a fraction `eta` toward `y`, unmeasured rows are left alone.
pub fn data_consistency_full(x1: &SubbandStack, y: &SparseSinogram, eta: f64) -> Result<SubbandStack> {
    check_mask(&x1.planes, y)?;
    if eta == 0.0 {
        return Ok(x1.clone());
    }
    let mut sino = haar_synthesis(&x1.planes);
    for (row, &k) in y.mask.kept_indices().iter().enumerate() {
        let mut target = sino.row_mut(k);
        target.zip_mut_with(&y.data.row(row), |s, &m| *s = (1.0 - eta) * *s + eta * m);
    }
    Ok(SubbandStack { planes: haar_analysis(sino.view())?, geometry: x1.geometry.clone() })
}

/// Coefficient-wise relaxation toward the transform of the zero-filled data.
pub fn data_consistency_wavelet(x1: &SubbandStack, y: &SparseSinogram, eta: f64) -> Result<SubbandStack> {
    check_mask(&x1.planes, y)?;
    let (_, r, c) = x1.planes.dim();
    let mut filled = ndarray::Array2::zeros((2 * r, 2 * c));
    for (row, &k) in y.mask.kept_indices().iter().enumerate() {
        filled.row_mut(k).assign(&y.data.row(row));
    }
    let target = haar_analysis(filled.view())?;
    let planes = &x1.planes - &((&x1.planes - &target) * eta);
    Ok(SubbandStack { planes, geometry: x1.geometry.clone() })
}

/// Gradient step on `λ·‖E(X1) − X2‖²` with step `eta`.
pub fn detail_coupling(x1: &SubbandStack, x2: &HighFreqStack, eta: f64, weight: f64) -> Result<SubbandStack> {
    if x1.plane_shape() != x2.plane_shape() {
        return Err(invalid("stack shapes differ"));
    }
    let mut out = x1.clone();
    let mut high = out.planes.slice_mut(s![1..4, .., ..]);
    let w = eta * weight;
    high.zip_mut_with(&x2.planes, |h, &t| *h = (1.0 - w) * *h + w * t);
    Ok(out)
}

/// `X2 ← X2 − η₂·(X2 − E(X1))`
pub fn data_consistency_high(x2: &HighFreqStack, x1: &SubbandStack, eta2: f64) -> Result<HighFreqStack> {
    if x1.plane_shape() != x2.plane_shape() {
        return Err(invalid(format!(
            "detail stack {:?} does not match sub-band stack {:?}",
            x2.plane_shape(),
            x1.plane_shape()
        )));
    }
    let target = x1.planes.slice(s![1..4, .., ..]);
    let mut planes = x2.planes.clone();
    planes.zip_mut_with(&target, |v, &t| *v = (1.0 - eta2) * *v + eta2 * t);
    Ok(HighFreqStack { planes })
}

/// Snapshot recorded every `log_every` iterations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationDiagnostics {
    pub iteration: usize,
    pub sigma: f64,
    /// Root-mean-square misfit on measured rows after the four-band stage.
    pub measured_residual: f64,
    /// `max |E(X1) − X2|` right after the merge.
    pub merge_gap: f64,
}

#[derive(Debug, Clone)]
pub struct Reconstruction {
    pub image: Image,
    pub sinogram: Sinogram,
    pub diagnostics: Vec<IterationDiagnostics>,
}

fn measured_residual(x1: &SubbandStack, y: &SparseSinogram) -> f64 {
    let sino = haar_synthesis(&x1.planes);
    let mut acc = 0.0;
    for (row, &k) in y.mask.kept_indices().iter().enumerate() {
        acc += (&sino.row(k) - &y.data.row(row)).mapv(|v| v * v).sum();
    }
    (acc / y.data.len() as f64).sqrt()
}

fn all_finite(a: &Array3<f64>) -> bool {
    a.iter().all(|v| v.is_finite())
}

struct FullStage<'a> {
    y: &'a SparseSinogram,
    cfg: &'a SamplerConfig,
}

impl FullStage<'_> {
    fn dc(&self, x1: &SubbandStack, x2: &HighFreqStack) -> Result<SubbandStack> {
        let mut out = match self.cfg.dc_mode {
            DcMode::SinogramRows => data_consistency_full(x1, self.y, self.cfg.eta)?,
            DcMode::WaveletZeroFilled => data_consistency_wavelet(x1, self.y, self.cfg.eta)?,
        };
        if let Some(weight) = self.cfg.coupling {
            out = detail_coupling(&out, x2, self.cfg.eta, weight)?;
        }
        Ok(out)
    }
}

/// Complete the sparse-view sinogram with the two-stage sampler and
/// reconstruct it.
pub fn sword_reconstruct<M1, M2>(
    y: &SparseSinogram,
    geo: &FanBeamGeometry,
    grid: GridSpec,
    full_model: &M1,
    high_model: &M2,
    cfg: &SamplerConfig,
) -> Result<Reconstruction>
where
    M1: ScoreModel + ?Sized,
    M2: ScoreModel + ?Sized,
{
    cfg.validate()?;
    geo.validate()?;
    if y.mask.total_views() != geo.n_views || y.data.ncols() != geo.n_detectors {
        return Err(invalid("measurements do not match the scan geometry"));
    }
    if !geo.n_views.is_multiple_of(2) || !geo.n_detectors.is_multiple_of(2) {
        return Err(invalid("view and detector counts must be even for the sub-band split"));
    }

    if cfg.mode == ReconMode::Fbp {
        let image = fbp_sparse(y, geo, grid, cfg.filter)?;
        let sinogram = zero_fill(y, geo)?;
        return Ok(Reconstruction { image, sinogram, diagnostics: Vec::new() });
    }
    if full_model.channels() != 4 || high_model.channels() != 3 {
        return Err(invalid(format!(
            "models must have 4 and 3 channels, got {} and {}",
            full_model.channels(),
            high_model.channels()
        )));
    }

    let use_full = cfg.mode != ReconMode::WhdmOnly;
    let use_high = cfg.mode != ReconMode::WfdmOnly;
    let schedule = &cfg.schedule;
    let (hr, hc) = (geo.n_views / 2, geo.n_detectors / 2);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let sigma_max = schedule.sigma_max();
    let stage = FullStage { y, cfg };

    let mut x1 = if use_full {
        SubbandStack::new(standard_normal((4, hr, hc), &mut rng) * sigma_max, Some(geo.clone()))?
    } else {
        let filled = zero_fill(y, geo)?;
        SubbandStack::new(haar_analysis(filled.data.view())?, Some(geo.clone()))?
    };
    let mut x2 = if use_high {
        HighFreqStack::new(standard_normal((3, hr, hc), &mut rng) * sigma_max)?
    } else {
        extract_high(&x1)
    };

    let t_len = schedule.len();
    let mut diagnostics = Vec::new();
    for i in (0..t_len).rev() {
        let (lo, hi) = (schedule.sigma(i), schedule.sigma(i + 1));

        if use_full {
            let planes = predict(&x1.planes, full_model, lo, hi, cfg.denoise_final, &mut rng)?;
            x1 = stage.dc(&SubbandStack { planes, geometry: x1.geometry.clone() }, &x2)?;
            if lo > 0.0 {
                for _ in 0..cfg.corrector_steps {
                    x1.planes = corrector_step(&x1.planes, full_model, lo, cfg.snr, &mut rng)?;
                }
            }
        }
        x1 = stage.dc(&x1, &x2)?;
        let residual = measured_residual(&x1, y);

        if use_high {
            let planes = predict(&x2.planes, high_model, lo, hi, cfg.denoise_final, &mut rng)?;
            x2 = data_consistency_high(&HighFreqStack { planes }, &x1, cfg.eta2)?;
            if lo > 0.0 {
                for _ in 0..cfg.corrector_steps {
                    x2.planes = corrector_step(&x2.planes, high_model, lo, cfg.snr, &mut rng)?;
                }
            }
            x2 = data_consistency_high(&x2, &x1, cfg.eta2)?;
            x1 = embed_high(&x2, x1.ll(), x1.geometry.clone())?;
        } else {
            x2 = extract_high(&x1);
        }

        let done = t_len - i;
        if cfg.nan_check_every > 0 && (done.is_multiple_of(cfg.nan_check_every) || i == 0)
            && (!all_finite(&x1.planes) || !all_finite(&x2.planes)) {
                return Err(SwordError::SamplerDiverged { iteration: i });
            }
        if cfg.log_every > 0 && (done.is_multiple_of(cfg.log_every) || i == 0) {
            let gap = (&extract_high(&x1).planes - &x2.planes)
                .iter()
                .fold(0.0f64, |m, v| m.max(v.abs()));
            info!("iteration {i:>5}  sigma {lo:.4e}  measured-row rms {residual:.4e}");
            diagnostics.push(IterationDiagnostics { iteration: i, sigma: lo, measured_residual: residual, merge_gap: gap });
        }
    }

    // Detail planes now come from X2; restore measured rows once more.
    x1 = stage.dc(&x1, &x2)?;
    if !all_finite(&x1.planes) {
        return Err(SwordError::SamplerDiverged { iteration: 0 });
    }
    let sinogram = Sinogram::from_array(geo.clone(), haar_synthesis(&x1.planes))?;
    let image = fbp_reconstruct(&sinogram, grid, cfg.filter)?;
    Ok(Reconstruction { image, sinogram, diagnostics })
}

/// Sub-band stack of a full sinogram with its detail planes.
pub fn split_stacks(sino: &Sinogram) -> Result<(SubbandStack, HighFreqStack)> {
    let x1 = crate::wavelet::dwt2(sino)?;
    let x2 = extract_high(&x1);
    Ok((x1, x2))
}

/// Plane count of a stack along the channel axis.
pub fn channel_count(a: &Array3<f64>) -> usize {
    a.len_of(Axis(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{geometric_schedule, GaussianScore, ZeroScore};
    use crate::phantom::{disk_phantom, make_grid};
    use crate::projector::{forward_project, subsample, view_mask};

    fn measured() -> (FanBeamGeometry, GridSpec, Sinogram, SparseSinogram) {
        let grid = make_grid(16, 10.0).unwrap();
        let geo = FanBeamGeometry::with_counts(24, 16).unwrap();
        let sino = forward_project(&disk_phantom(grid, 3.0, 1.0).unwrap(), &geo).unwrap();
        let y = subsample(&sino, &view_mask(24, 6).unwrap()).unwrap();
        (geo, grid, sino, y)
    }

    #[test]
    fn predictor_examples() {
        let x = Array3::from_elem((1, 1, 1), 2.0);
        let z = Array3::zeros((1, 1, 1));
        let same = predictor_update(&x, &ZeroScore { channels: 1 }, 0.3, 0.5, &z).unwrap();
        assert_eq!(same, x);
        let gauss = GaussianScore::uniform(1, 0.0, 1.0).unwrap();
        let out = predictor_update(&x, &gauss, 0.0, 1.0, &z).unwrap();
        assert!((out[[0, 0, 0]] - 1.0).abs() < 1e-15);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(predictor_step(&x, &gauss, 1.0, 0.5, &mut rng).is_err());
        assert!(predictor_step(&x, &gauss, 1.0, 1.0, &mut rng).is_err());
    }

    #[test]
    fn corrector_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = standard_normal((2, 3, 3), &mut rng);
        assert_eq!(corrector_step(&x, &ZeroScore { channels: 2 }, 0.5, 0.16, &mut rng).unwrap(), x);
        assert!(corrector_step(&x, &ZeroScore { channels: 2 }, 0.0, 0.16, &mut rng).is_err());
        let a = langevin_step_size(3.0, 5.0, 0.1).unwrap();
        let b = langevin_step_size(3.0, 5.0, 0.2).unwrap();
        assert!((b / a - 4.0).abs() < 1e-12);
        assert!(langevin_step_size(0.0, 5.0, 0.1).is_none());
    }

    #[test]
    fn corrector_keeps_gaussian_stationary() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let (mu, var, sigma) = (1.0, 0.5, 0.7);
        let total = var + sigma * sigma;
        let model = GaussianScore::uniform(1, mu, var).unwrap();
        let mut x = standard_normal((1, 1, 10_000), &mut rng) * total.sqrt() + mu;
        for _ in 0..50 {
            x = corrector_step(&x, &model, sigma, 0.16, &mut rng).unwrap();
        }
        let m = x.mean().unwrap();
        let v = x.mapv(|a| (a - m).powi(2)).mean().unwrap();
        assert!((v - total).abs() <= 0.1 * total, "variance {v} vs {total}");
    }

    #[test]
    fn full_dc_contract() {
        let (geo, _, sino, y) = measured();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x1 = SubbandStack::new(standard_normal((4, 12, 8), &mut rng), Some(geo.clone())).unwrap();

        let hard = data_consistency_full(&x1, &y, 1.0).unwrap();
        let back = haar_synthesis(&hard.planes);
        for (row, &k) in y.mask.kept_indices().iter().enumerate() {
            let err = (&back.row(k) - &y.data.row(row)).mapv(f64::abs).fold(0.0f64, |m, &v| m.max(v));
            assert!(err <= 1e-12);
        }
        // unmeasured rows untouched
        let orig = haar_synthesis(&x1.planes);
        let err = (&back.row(1) - &orig.row(1)).mapv(f64::abs).fold(0.0f64, |m, &v| m.max(v));
        assert!(err <= 1e-12);

        let twice = data_consistency_full(&hard, &y, 1.0).unwrap();
        let diff = (&twice.planes - &hard.planes).mapv(f64::abs).fold(0.0f64, |m, &v| m.max(v));
        assert!(diff <= 1e-12);
        assert_eq!(data_consistency_full(&x1, &y, 0.0).unwrap(), x1);

        let wrong = subsample(&sino, &view_mask(24, 6).unwrap()).unwrap();
        let small = SubbandStack::new(Array3::zeros((4, 6, 8)), None).unwrap();
        assert!(data_consistency_full(&small, &wrong, 1.0).is_err());
    }

    #[test]
    fn wavelet_dc_targets_zero_filled_transform() {
        let (geo, _, _, y) = measured();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x1 = SubbandStack::new(standard_normal((4, 12, 8), &mut rng), Some(geo.clone())).unwrap();
        let out = data_consistency_wavelet(&x1, &y, 1.0).unwrap();
        let filled = zero_fill(&y, &geo).unwrap();
        let expected = haar_analysis(filled.data.view()).unwrap();
        assert!((&out.planes - &expected).mapv(f64::abs).fold(0.0f64, |m, &v| m.max(v)) <= 1e-12);
    }

    #[test]
    fn high_dc_contract() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x1 = SubbandStack::new(standard_normal((4, 3, 5), &mut rng), None).unwrap();
        let x2 = HighFreqStack::new(standard_normal((3, 3, 5), &mut rng)).unwrap();
        assert_eq!(data_consistency_high(&x2, &x1, 1.0).unwrap(), extract_high(&x1));
        assert_eq!(data_consistency_high(&x2, &x1, 0.0).unwrap(), x2);
        let fixed = extract_high(&x1);
        for eta2 in [0.1, 0.5, 0.9] {
            let out = data_consistency_high(&fixed, &x1, eta2).unwrap();
            assert!((&out.planes - &fixed.planes).iter().all(|v| v.abs() <= 1e-12));
        }
        assert!(data_consistency_high(&HighFreqStack::zeros(2, 5), &x1, 0.5).is_err());
    }

    #[test]
    fn coupling_pulls_detail_planes() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x1 = SubbandStack::new(standard_normal((4, 2, 2), &mut rng), None).unwrap();
        let x2 = HighFreqStack::new(standard_normal((3, 2, 2), &mut rng)).unwrap();
        let out = detail_coupling(&x1, &x2, 1.0, 1.0).unwrap();
        assert_eq!(extract_high(&out), x2);
        assert_eq!(out.ll(), x1.ll());
    }

    #[test]
    fn degenerate_run_keeps_measurements() {
        let (geo, grid, _, y) = measured();
        let schedule = geometric_schedule(0.01, 1.0, 2).unwrap();
        let mut cfg = SamplerConfig::new(schedule);
        cfg.eta = 1.0;
        cfg.log_every = 1;
        let out = sword_reconstruct(&y, &geo, grid, &ZeroScore { channels: 4 }, &ZeroScore { channels: 3 }, &cfg)
            .unwrap();
        for (row, &k) in y.mask.kept_indices().iter().enumerate() {
            let err = (&out.sinogram.data.row(k) - &y.data.row(row)).mapv(f64::abs).fold(0.0f64, |m, &v| m.max(v));
            assert!(err <= 1e-10);
        }
        let fbp = fbp_reconstruct(&out.sinogram, grid, cfg.filter).unwrap();
        assert_eq!(fbp, out.image);
        assert_eq!(out.diagnostics.len(), 2);
        for d in &out.diagnostics {
            assert_eq!(d.merge_gap, 0.0);
        }
        let again = sword_reconstruct(&y, &geo, grid, &ZeroScore { channels: 4 }, &ZeroScore { channels: 3 }, &cfg)
            .unwrap();
        assert_eq!(again.sinogram, out.sinogram);
    }

    #[test]
    fn ablation_modes_run() {
        let (geo, grid, _, y) = measured();
        let schedule = geometric_schedule(0.01, 1.0, 4).unwrap();
        for mode in [ReconMode::WfdmOnly, ReconMode::WhdmOnly, ReconMode::Fbp] {
            let mut cfg = SamplerConfig::new(schedule.clone());
            cfg.mode = mode;
            let out = sword_reconstruct(&y, &geo, grid, &ZeroScore { channels: 4 }, &ZeroScore { channels: 3 }, &cfg)
                .unwrap();
            assert_eq!(out.image.data.dim(), (16, 16));
            assert_eq!(mode.to_string().parse::<ReconMode>().unwrap(), mode);
        }
    }

    #[test]
    fn rejects_bad_configuration() {
        let (geo, grid, _, y) = measured();
        let schedule = geometric_schedule(0.01, 1.0, 4).unwrap();
        let mut cfg = SamplerConfig::new(schedule);
        let z4 = ZeroScore { channels: 4 };
        let z3 = ZeroScore { channels: 3 };
        assert!(sword_reconstruct(&y, &geo, grid, &z3, &z3, &cfg).is_err());
        cfg.eta = 0.0;
        assert!(sword_reconstruct(&y, &geo, grid, &z4, &z3, &cfg).is_err());
        cfg.eta = 1.0;
        cfg.snr = -1.0;
        assert!(sword_reconstruct(&y, &geo, grid, &z4, &z3, &cfg).is_err());
    }

    struct Exploding;

    impl ScoreModel for Exploding {
        fn channels(&self) -> usize {
            4
        }
        fn score(&self, x: &Array3<f64>, _sigma: f64) -> Array3<f64> {
            x.mapv(|_| f64::NAN)
        }
    }

    #[test]
    fn nan_state_is_reported() {
        let (geo, grid, _, y) = measured();
        let schedule = geometric_schedule(0.01, 1.0, 60).unwrap();
        let cfg = SamplerConfig::new(schedule);
        match sword_reconstruct(&y, &geo, grid, &Exploding, &ZeroScore { channels: 3 }, &cfg) {
            Err(SwordError::SamplerDiverged { iteration }) => assert_eq!(iteration, 10),
            other => panic!("expected divergence, got {:?}", other.map(|r| r.diagnostics)),
        }
    }
}
