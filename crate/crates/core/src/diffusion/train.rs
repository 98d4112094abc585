use std::f64::consts::PI;

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::network::{tiles_of, Normalization, PatchScoreNet};
use super::{geometric_schedule, ScoreModel};
use crate::error::{invalid, Result, SwordError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    /// Tiles per optimizer step.
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    /// Smallest noise level, in normalized data units.
    pub sigma_min: f64,
    /// Largest noise level in normalized units; derived from the data when unset.
    pub sigma_max: Option<f64>,
    pub schedule_len: usize,
    /// Divisor applied to raw stacks; the largest absolute entry when unset.
    pub data_scale: Option<f64>,
    /// Decay of the exponential moving average of the weights that is
    /// returned instead of the raw iterate; `0` returns the last iterate.
    pub ema_decay: f64,
    /// Anneal the learning rate to zero along a half cosine.
    pub cosine_lr: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch: 64,
            lr: 1e-3,
            seed: 0,
            sigma_min: 0.01,
            sigma_max: None,
            schedule_len: 1450,
            data_scale: None,
            ema_decay: 0.995,
            cosine_lr: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: PatchScoreNet,
    pub loss_trace: Vec<f64>,
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
    lr: f64,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(len: usize, lr: f64) -> Self {
        Self { m: vec![0.0; len], v: vec![0.0; len], t: 0, lr }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let bc1 = 1.0 - Self::BETA1.powi(self.t);
        let bc2 = 1.0 - Self::BETA2.powi(self.t);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = Self::BETA1 * self.m[i] + (1.0 - Self::BETA1) * g;
            self.v[i] = Self::BETA2 * self.v[i] + (1.0 - Self::BETA2) * g * g;
            let mh = self.m[i] / bc1;
            let vh = self.v[i] / bc2;
            params[i] -= self.lr * mh / (vh.sqrt() + Self::EPS);
        }
    }
}

/// Largest pairwise distance among (a seeded subsample of) training tiles.
fn max_pairwise_distance(tiles: &[Vec<f64>], seed: u64) -> f64 {
    const CAP: usize = 512;
    let picked: Vec<&Vec<f64>> = if tiles.len() <= CAP {
        tiles.iter().collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_d157);
        (0..CAP).map(|_| &tiles[rng.random_range(0..tiles.len())]).collect()
    };
    let mut best = 0.0f64;
    for i in 0..picked.len() {
        for j in i + 1..picked.len() {
            let d2: f64 = picked[i].iter().zip(picked[j]).map(|(a, b)| (a - b) * (a - b)).sum();
            best = best.max(d2);
        }
    }
    best.sqrt()
}

/// Fit `net` to the denoising score-matching objective on `dataset` with Adam.
///
/// Stacks are divided by a single data scale; the scale and the noise ladder
/// are stored in the returned network so it evaluates in raw units.
pub fn train_score(mut net: PatchScoreNet, dataset: &[Array3<f64>], cfg: &TrainConfig) -> Result<TrainOutcome> {
    if dataset.is_empty() {
        return Err(invalid("training set is empty"));
    }
    if cfg.batch == 0 {
        return Err(invalid("batch size must be positive"));
    }
    let shape = dataset[0].dim();
    if dataset.iter().any(|x| x.dim() != shape) {
        return Err(invalid("training stacks differ in shape"));
    }
    if shape.0 != net.channels() {
        return Err(invalid(format!("stacks have {} channels, network expects {}", shape.0, net.channels())));
    }

    let scale = match cfg.data_scale {
        Some(k) if k > 0.0 => k,
        Some(k) => return Err(invalid(format!("data scale must be positive, got {k}"))),
        None => {
            let m = dataset.iter().flat_map(|x| x.iter()).fold(0.0f64, |m, v| m.max(v.abs()));
            if m > 0.0 {
                m
            } else {
                1.0
            }
        }
    };

    let stacks: Vec<Array3<f64>> = dataset.iter().map(|x| x / scale).collect();
    let mut tiles = Vec::new();
    for x in &stacks {
        tiles.extend(tiles_of(&net, x)?.into_iter().map(|(buf, _)| buf));
    }
    let sigma_max = match cfg.sigma_max {
        Some(s) => s,
        None => max_pairwise_distance(&tiles, cfg.seed).max(10.0 * cfg.sigma_min),
    };
    let schedule = geometric_schedule(cfg.sigma_min, sigma_max, cfg.schedule_len)?;
    let per = net.config().patch_rows * net.config().patch_cols;
    let sigma_data: Vec<f64> = (0..net.channels())
        .map(|c| {
            let sq: f64 = tiles.iter().flat_map(|t| &t[c * per..(c + 1) * per]).map(|v| v * v).sum();
            let rms = (sq / (tiles.len() * per) as f64).sqrt();
            if rms > 0.0 && rms.is_finite() {
                rms
            } else {
                1.0
            }
        })
        .collect();
    let norm = Normalization {
        data_scale: scale,
        sigma_data,
        sigma_min: cfg.sigma_min,
        sigma_max,
        schedule_len: cfg.schedule_len,
    };
    net.set_normalization(norm.clone())?;

    let d = net.config().input_dim();
    let e = net.config().embed_dim();
    let n = cfg.batch;
    let mut adam = Adam::new(net.params().len(), cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut trace = Vec::with_capacity(cfg.steps);
    let mut u = Array2::zeros((n, d));
    let mut emb = Array2::zeros((n, e));
    let mut z = Array2::zeros((n, d));
    let mut x = Array2::zeros((n, d));
    let mut coef: Vec<Vec<[f64; 3]>> = vec![Vec::new(); n];
    let mut x0 = vec![0.0; d];
    let mut ema = net.params().to_vec();
    let ncfg = *net.config();
    let (_, rows, cols) = shape;
    let (row_tiles, col_tiles) = net.tile_grid(rows, cols)?;

    for step in 0..cfg.steps {
        for b in 0..n {
            let idx = rng.random_range(0..stacks.len());
            let r0 = if ncfg.row_shifts > 1 {
                rng.random_range(0..rows)
            } else {
                rng.random_range(0..row_tiles) * ncfg.patch_rows
            };
            let c0 = rng.random_range(0..col_tiles) * ncfg.patch_cols;
            let sigma = schedule.sigma(rng.random_range(1..=schedule.len()));
            coef[b] = net.tile_coefficients(sigma);
            net.gather_tile(&stacks[idx], r0, c0, &mut x0);
            for j in 0..d {
                let zv: f64 = rng.sample(StandardNormal);
                z[[b, j]] = zv;
                x[[b, j]] = x0[j] + sigma * zv;
                u[[b, j]] = coef[b][j][0] * x[[b, j]];
            }
            let pos = net.tile_position(r0, c0, rows, cols);
            net.embedding(sigma, pos, emb.row_mut(b).as_slice_mut().unwrap());
        }
        let (f, tape) = net.forward(u.clone(), emb.clone());
        // resid = a·x + b·F + z
        let mut resid = f;
        let mut d_out = Array2::zeros((n, d));
        for b in 0..n {
            for j in 0..d {
                let [_, ca, cb] = coef[b][j];
                let r = ca * x[[b, j]] + cb * resid[[b, j]] + z[[b, j]];
                resid[[b, j]] = r;
                d_out[[b, j]] = 2.0 * cb * r / n as f64;
            }
        }
        let loss = resid.iter().map(|r| r * r).sum::<f64>() / n as f64;
        if !loss.is_finite() {
            return Err(SwordError::TrainingDiverged { step });
        }
        trace.push(loss);
        let grad = net.backward(&tape, &d_out);
        if cfg.cosine_lr {
            adam.lr = 0.5 * cfg.lr * (1.0 + (PI * step as f64 / cfg.steps as f64).cos());
        }
        adam.step(net.params_mut(), &grad);
        for (a, p) in ema.iter_mut().zip(net.params()) {
            *a += (1.0 - cfg.ema_decay) * (p - *a);
        }
    }
    net.params_mut().copy_from_slice(&ema);
    if net.params().iter().any(|p| !p.is_finite()) {
        return Err(SwordError::TrainingDiverged { step: cfg.steps });
    }
    Ok(TrainOutcome { model: net, loss_trace: trace })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{standard_normal, NetConfig};

    fn gaussian_set(count: usize, seed: u64) -> Vec<Array3<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count).map(|_| standard_normal((1, 8, 8), &mut rng)).collect()
    }

    fn tiny_net() -> PatchScoreNet {
        let cfg = NetConfig { channels: 1, patch_rows: 4, patch_cols: 4, hidden: 16, blocks: 1, fourier: 2, row_shifts: 1 };
        PatchScoreNet::new(cfg, 1).unwrap()
    }

    #[test]
    fn zero_learning_rate_leaves_parameters() {
        let net = tiny_net();
        let before = net.params().to_vec();
        let cfg = TrainConfig { steps: 20, batch: 8, lr: 0.0, schedule_len: 10, ..Default::default() };
        let out = train_score(net, &gaussian_set(10, 2), &cfg).unwrap();
        assert_eq!(out.model.params(), before.as_slice());
        assert_eq!(out.loss_trace.len(), 20);
    }

    #[test]
    fn seeded_runs_repeat_exactly() {
        let cfg = TrainConfig { steps: 30, batch: 8, schedule_len: 10, seed: 5, ..Default::default() };
        let data = gaussian_set(10, 3);
        let a = train_score(tiny_net(), &data, &cfg).unwrap();
        let b = train_score(tiny_net(), &data, &cfg).unwrap();
        assert_eq!(a.loss_trace, b.loss_trace);
        assert_eq!(a.model.params(), b.model.params());
    }

    #[test]
    fn huge_learning_rate_reports_divergence_or_finishes() {
        let cfg = TrainConfig { steps: 5, batch: 4, schedule_len: 10, ..Default::default() };
        assert!(train_score(tiny_net(), &[], &cfg).is_err());
        let mixed = vec![Array3::zeros((1, 8, 8)), Array3::zeros((1, 4, 4))];
        assert!(train_score(tiny_net(), &mixed, &cfg).is_err());
        let wrong = vec![Array3::zeros((2, 8, 8))];
        assert!(train_score(tiny_net(), &wrong, &cfg).is_err());
    }

    #[test]
    fn nan_data_is_reported_as_divergence() {
        let mut data = gaussian_set(4, 1);
        data[0][[0, 0, 0]] = f64::NAN;
        let cfg = TrainConfig {
            steps: 50,
            batch: 16,
            schedule_len: 10,
            sigma_max: Some(5.0),
            data_scale: Some(1.0),
            ..Default::default()
        };
        match train_score(tiny_net(), &data, &cfg) {
            Err(SwordError::TrainingDiverged { .. }) => {}
            other => panic!("expected divergence, got {other:?}"),
        }
    }
}
