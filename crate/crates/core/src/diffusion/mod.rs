//! Variance-exploding diffusion on sub-band stacks: noise schedule,
//! perturbation kernel, score models and the denoising score-matching
//! objective.
//!
//! A "stack" here is any `(channels, rows, cols)` array; the four-band
//! stack feeds the full-frequency model and the three detail bands feed the
//! high-frequency model.

mod network;
mod train;

use ndarray::{Array3, Zip};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

pub use network::{NetConfig, Normalization, PatchScoreNet};
pub use train::{train_score, TrainConfig, TrainOutcome};

/// Geometric noise levels `σ_1 < … < σ_T`; `σ_0 = 0` is implied.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    sigmas: Vec<f64>,
}

pub fn geometric_schedule(sigma_min: f64, sigma_max: f64, len: usize) -> Result<NoiseSchedule> {
    if !(sigma_min > 0.0 && sigma_min < sigma_max && sigma_max.is_finite()) {
        return Err(invalid(format!("need 0 < sigma_min < sigma_max, got {sigma_min}, {sigma_max}")));
    }
    if len < 2 {
        return Err(invalid(format!("schedule needs at least 2 levels, got {len}")));
    }
    let log_min = sigma_min.ln();
    let step = (sigma_max.ln() - log_min) / (len - 1) as f64;
    let mut sigmas: Vec<f64> = (0..len).map(|k| (log_min + step * k as f64).exp()).collect();
    sigmas[0] = sigma_min;
    sigmas[len - 1] = sigma_max;
    Ok(NoiseSchedule { sigmas })
}

impl NoiseSchedule {
    pub fn len(&self) -> usize {
        self.sigmas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sigmas.is_empty()
    }

    /// `σ_1 … σ_T`, ascending.
    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }

    /// `σ_i` with the `σ_0 = 0` convention, `i ∈ 0..=T`.
    pub fn sigma(&self, i: usize) -> f64 {
        if i == 0 {
            0.0
        } else {
            self.sigmas[i - 1]
        }
    }

    pub fn sigma_min(&self) -> f64 {
        self.sigmas[0]
    }

    pub fn sigma_max(&self) -> f64 {
        *self.sigmas.last().unwrap()
    }

    pub fn median(&self) -> f64 {
        self.sigmas[self.sigmas.len() / 2]
    }

    /// The same ladder scaled by a constant factor.
    pub fn scaled(&self, factor: f64) -> NoiseSchedule {
        NoiseSchedule { sigmas: self.sigmas.iter().map(|s| s * factor).collect() }
    }
}

pub fn standard_normal<R: Rng + ?Sized>(shape: (usize, usize, usize), rng: &mut R) -> Array3<f64> {
    Array3::from_shape_simple_fn(shape, || rng.sample(StandardNormal))
}

/// VE perturbation kernel: `x0 + σ·z`.
pub fn perturb<R: Rng + ?Sized>(x0: &Array3<f64>, sigma: f64, rng: &mut R) -> Result<Array3<f64>> {
    if !(sigma >= 0.0) {
        return Err(invalid(format!("noise level must be nonnegative, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(x0.clone());
    }
    let z = standard_normal(x0.dim(), rng);
    Ok(x0 + &(z * sigma))
}

/// Estimate of `∇ₓ log p_σ(x)` for stacks with a fixed channel count.
pub trait ScoreModel: Send + Sync {
    fn channels(&self) -> usize;

    fn score(&self, x: &Array3<f64>, sigma: f64) -> Array3<f64>;
}

impl<T: ScoreModel + ?Sized> ScoreModel for &T {
    fn channels(&self) -> usize {
        (**self).channels()
    }

    fn score(&self, x: &Array3<f64>, sigma: f64) -> Array3<f64> {
        (**self).score(x, sigma)
    }
}

impl<T: ScoreModel + ?Sized> ScoreModel for Box<T> {
    fn channels(&self) -> usize {
        (**self).channels()
    }

    fn score(&self, x: &Array3<f64>, sigma: f64) -> Array3<f64> {
        (**self).score(x, sigma)
    }
}

/// Always returns zero; useful for structural tests of the sampler.
#[derive(Debug, Clone, Copy)]
pub struct ZeroScore {
    pub channels: usize,
}

impl ScoreModel for ZeroScore {
    fn channels(&self) -> usize {
        self.channels
    }

    fn score(&self, x: &Array3<f64>, _sigma: f64) -> Array3<f64> {
        Array3::zeros(x.dim())
    }
}

#[derive(Debug, Clone)]
enum GaussianParams {
    Field { mu: Array3<f64>, var: Array3<f64> },
    Uniform { mu: f64, var: f64 },
}

/// Exact score of `N(μ, diag(v))` after VE perturbation:
/// `s(x, σ) = (μ - x) / (v + σ²)` entrywise.
#[derive(Debug, Clone)]
pub struct GaussianScore {
    channels: usize,
    params: GaussianParams,
}

pub fn gaussian_analytic_score(mu: Array3<f64>, var: Array3<f64>) -> Result<GaussianScore> {
    if mu.dim() != var.dim() {
        return Err(invalid("mean and variance stacks differ in shape"));
    }
    if var.iter().any(|&v| !(v >= 0.0)) {
        return Err(invalid("variances must be nonnegative"));
    }
    Ok(GaussianScore { channels: mu.dim().0, params: GaussianParams::Field { mu, var } })
}

impl GaussianScore {
    /// Same mean and variance for every entry of any stack shape.
    pub fn uniform(channels: usize, mu: f64, var: f64) -> Result<Self> {
        if !(var >= 0.0) {
            return Err(invalid("variance must be nonnegative"));
        }
        Ok(Self { channels, params: GaussianParams::Uniform { mu, var } })
    }
}

impl ScoreModel for GaussianScore {
    fn channels(&self) -> usize {
        self.channels
    }

    fn score(&self, x: &Array3<f64>, sigma: f64) -> Array3<f64> {
        let s2 = sigma * sigma;
        match &self.params {
            GaussianParams::Uniform { mu, var } => x.mapv(|v| (mu - v) / (var + s2)),
            GaussianParams::Field { mu, var } => {
                let mut out = Array3::zeros(x.dim());
                Zip::from(&mut out).and(x).and(mu).and(var).for_each(|o, &xv, &m, &v| {
                    *o = (m - xv) / (v + s2);
                });
                out
            }
        }
    }
}

/// Monte-Carlo denoising score-matching loss with weight `λ(σ) = σ²`.
///
/// Each stack draws its own level uniformly from the schedule; the
/// per-stack term is `‖σ·s(x0 + σz, σ) + z‖²`, averaged over the batch.
pub fn dsm_loss<M: ScoreModel + ?Sized, R: Rng + ?Sized>(
    model: &M,
    batch: &[Array3<f64>],
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(invalid("empty batch"));
    }
    let mut total = 0.0;
    for x0 in batch {
        if x0.dim().0 != model.channels() {
            return Err(invalid(format!(
                "stack has {} channels, model expects {}",
                x0.dim().0,
                model.channels()
            )));
        }
        let t = rng.random_range(1..=schedule.len());
        let sigma = schedule.sigma(t);
        let z = standard_normal(x0.dim(), rng);
        let xt = x0 + &(&z * sigma);
        let s = model.score(&xt, sigma);
        total += Zip::from(&s).and(&z).fold(0.0, |acc, &sv, &zv| {
            let r = sigma * sv + zv;
            acc + r * r
        });
    }
    Ok(total / batch.len() as f64)
}
