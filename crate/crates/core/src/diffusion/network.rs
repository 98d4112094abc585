//! Patch-wise residual MLP score network with hand-written gradients.
//!
//! Each plane stack is cut into non-overlapping `patch_rows × patch_cols`
//! tiles; every tile (all channels) is one sample. The network predicts
//! `σ·s(x, σ)`, i.e. the negated unit noise, from
//!
//! ```text
//! u   = x / (k·√(1 + σₙ²))              σₙ = σ / k, k = data scale
//! e   = [fourier(log σₙ), log σₙ, tile position features]
//! h   = W_in·u + W_emb·e + b_in
//! h  += W2·relu(W1·h + b1) + b2        (per residual block)
//! out = W_out·h + b_out + (W_gate·e + b_gate) ⊙ u
//! ```
//!
//! The gated skip term lets the output carry a noise-level dependent
//! linear shrinkage of the input without going through the hidden layers.

use std::f64::consts::PI;
use std::ops::Range;

use ndarray::{Array1, Array2, Array3, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::ScoreModel;
use crate::error::{invalid, Result};

const POSITION_FEATURES: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetConfig {
    pub channels: usize,
    pub patch_rows: usize,
    pub patch_cols: usize,
    pub hidden: usize,
    pub blocks: usize,
    pub fourier: usize,
    /// Number of row-shifted tilings averaged at inference. Values above one
    /// also make training draw tiles at random row offsets, wrapping around
    /// the (periodic) row axis.
    #[serde(default = "one")]
    pub row_shifts: usize,
}

fn one() -> usize {
    1
}

impl NetConfig {
    pub fn input_dim(&self) -> usize {
        self.channels * self.patch_rows * self.patch_cols
    }

    pub fn embed_dim(&self) -> usize {
        2 * self.fourier + 1 + POSITION_FEATURES
    }

    fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.patch_rows == 0 || self.patch_cols == 0 || self.hidden == 0 {
            return Err(invalid(format!("network dimensions must be positive: {self:?}")));
        }
        if self.row_shifts == 0 || self.row_shifts > self.patch_rows {
            return Err(invalid(format!("row_shifts must lie in 1..={}, got {}", self.patch_rows, self.row_shifts)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct Mat {
    offset: usize,
    rows: usize,
    cols: usize,
}

impl Mat {
    fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.rows * self.cols
    }
}

#[derive(Debug, Clone)]
struct Block {
    w1: Mat,
    b1: Mat,
    w2: Mat,
    b2: Mat,
}

/// Offsets of every tensor inside the flat parameter vector.
#[derive(Debug, Clone)]
struct Layout {
    w_in: Mat,
    w_emb: Mat,
    b_in: Mat,
    blocks: Vec<Block>,
    w_out: Mat,
    b_out: Mat,
    w_gate: Mat,
    b_gate: Mat,
    total: usize,
}

impl Layout {
    fn new(cfg: &NetConfig) -> Self {
        let mut offset = 0;
        let mut take = |rows: usize, cols: usize| {
            let m = Mat { offset, rows, cols };
            offset += rows * cols;
            m
        };
        let (d, e, h) = (cfg.input_dim(), cfg.embed_dim(), cfg.hidden);
        let w_in = take(h, d);
        let w_emb = take(h, e);
        let b_in = take(1, h);
        let blocks = (0..cfg.blocks)
            .map(|_| Block { w1: take(h, h), b1: take(1, h), w2: take(h, h), b2: take(1, h) })
            .collect();
        let w_out = take(d, h);
        let b_out = take(1, d);
        let w_gate = take(d, e);
        let b_gate = take(1, d);
        Self { w_in, w_emb, b_in, blocks, w_out, b_out, w_gate, b_gate, total: offset }
    }
}

fn view<'a>(params: &'a [f64], m: &Mat) -> ArrayView2<'a, f64> {
    ArrayView2::from_shape((m.rows, m.cols), &params[m.range()]).expect("layout")
}

fn row<'a>(params: &'a [f64], m: &Mat) -> ArrayView1<'a, f64> {
    ArrayView1::from(&params[m.range()])
}

/// Intermediate activations kept for the backward pass.
pub(crate) struct Tape {
    u: Array2<f64>,
    emb: Array2<f64>,
    /// Hidden state entering each block, then the final hidden state.
    hidden: Vec<Array2<f64>>,
    /// Pre-activation of each block's first layer.
    pre: Vec<Array2<f64>>,
}

/// Data normalization and the noise ladder a network was trained on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    /// Divisor taking raw stacks to normalized units.
    pub data_scale: f64,
    /// Per-channel root-mean-square of the normalized training data.
    pub sigma_data: Vec<f64>,
    /// Noise ladder in normalized units.
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub schedule_len: usize,
}

impl Normalization {
    pub fn unit(channels: usize) -> Self {
        Self { data_scale: 1.0, sigma_data: vec![1.0; channels], sigma_min: 0.01, sigma_max: 1.0, schedule_len: 2 }
    }

    fn validate(&self, channels: usize) -> Result<()> {
        let ok = self.data_scale > 0.0
            && self.sigma_data.len() == channels
            && self.sigma_data.iter().all(|s| *s > 0.0 && s.is_finite())
            && self.sigma_min > 0.0
            && self.sigma_max > self.sigma_min
            && self.data_scale.is_finite()
            && self.sigma_max.is_finite();
        if !ok {
            return Err(invalid(format!("invalid normalization for {channels} channels: {self:?}")));
        }
        Ok(())
    }

    /// Per-channel `[c_in, a, b]` with `u = c_in·xₙ` and `σₙ·sₙ = a·xₙ + b·F`.
    pub(crate) fn coefficients(&self, sigma_n: f64) -> Vec<[f64; 3]> {
        self.sigma_data
            .iter()
            .map(|&sd| {
                let total = sigma_n * sigma_n + sd * sd;
                let c_in = 1.0 / total.sqrt();
                [c_in, -sigma_n / total, sd * c_in]
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct PatchScoreNet {
    cfg: NetConfig,
    layout: Layout,
    params: Vec<f64>,
    norm: Normalization,
}

impl PatchScoreNet {
    /// Kaiming-initialised network.
    pub fn new(cfg: NetConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let layout = Layout::new(&cfg);
        let mut params = vec![0.0; layout.total];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut fill = |m: &Mat, std: f64, params: &mut Vec<f64>| {
            for p in &mut params[m.range()] {
                let z: f64 = rng.sample(StandardNormal);
                *p = z * std;
            }
        };
        let (d, e, h) = (cfg.input_dim() as f64, cfg.embed_dim() as f64, cfg.hidden as f64);
        fill(&layout.w_in, (2.0 / d).sqrt(), &mut params);
        fill(&layout.w_emb, (2.0 / e).sqrt(), &mut params);
        for b in &layout.blocks {
            fill(&b.w1, (2.0 / h).sqrt(), &mut params);
            fill(&b.w2, 0.1 * (2.0 / h).sqrt(), &mut params);
        }
        fill(&layout.w_out, 0.1 * (1.0 / h).sqrt(), &mut params);
        Ok(Self { cfg, layout, params, norm: Normalization::unit(cfg.channels) })
    }

    /// Rebuild from stored parts (checkpoint loading).
    pub fn from_parts(cfg: NetConfig, params: Vec<f64>, norm: Normalization) -> Result<Self> {
        cfg.validate()?;
        norm.validate(cfg.channels)?;
        let layout = Layout::new(&cfg);
        if params.len() != layout.total {
            return Err(invalid(format!("expected {} parameters, got {}", layout.total, params.len())));
        }
        Ok(Self { cfg, layout, params, norm })
    }

    pub fn config(&self) -> &NetConfig {
        &self.cfg
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn data_scale(&self) -> f64 {
        self.norm.data_scale
    }

    pub fn normalization(&self) -> &Normalization {
        &self.norm
    }

    pub(crate) fn set_normalization(&mut self, norm: Normalization) -> Result<()> {
        norm.validate(self.cfg.channels)?;
        self.norm = norm;
        Ok(())
    }

    /// `(sigma_min, sigma_max, T)` in normalized units.
    pub fn schedule_params(&self) -> (f64, f64, usize) {
        (self.norm.sigma_min, self.norm.sigma_max, self.norm.schedule_len)
    }

    /// Training schedule expressed in the units of the raw data.
    pub fn physical_schedule(&self, len: Option<usize>) -> Result<super::NoiseSchedule> {
        let n = &self.norm;
        super::geometric_schedule(n.sigma_min * n.data_scale, n.sigma_max * n.data_scale, len.unwrap_or(n.schedule_len))
    }

    pub(crate) fn tile_grid(&self, rows: usize, cols: usize) -> Result<(usize, usize)> {
        if !rows.is_multiple_of(self.cfg.patch_rows) || !cols.is_multiple_of(self.cfg.patch_cols) {
            return Err(invalid(format!(
                "{rows}x{cols} planes are not tiled by {}x{} patches",
                self.cfg.patch_rows, self.cfg.patch_cols
            )));
        }
        Ok((rows / self.cfg.patch_rows, cols / self.cfg.patch_cols))
    }

    /// Centre of the tile whose top-left entry is `(r0, c0)`: row fraction in
    /// `[0, 1)` and column in `[-1, 1]`.
    pub(crate) fn tile_position(&self, r0: usize, c0: usize, rows: usize, cols: usize) -> (f64, f64) {
        let pr = (r0 as f64 + 0.5 * self.cfg.patch_rows as f64) / rows as f64;
        let pc = 2.0 * (c0 as f64 + 0.5 * self.cfg.patch_cols as f64) / cols as f64 - 1.0;
        (pr.rem_euclid(1.0), pc)
    }

    /// Embedding row for one tile at normalized noise level `sigma_n`.
    pub(crate) fn embedding(&self, sigma_n: f64, pos: (f64, f64), out: &mut [f64]) {
        let l = sigma_n.ln() / 4.0;
        let mut k = 0;
        for j in 0..self.cfg.fourier {
            let w = (1u64 << j) as f64 * 0.5 * PI;
            out[k] = (w * l).sin();
            out[k + 1] = (w * l).cos();
            k += 2;
        }
        out[k] = l;
        k += 1;
        let (pr, pc) = pos;
        out[k] = (2.0 * PI * pr).sin();
        out[k + 1] = (2.0 * PI * pr).cos();
        out[k + 2] = pc;
        out[k + 3] = pc * pc;
        out[k + 4] = (PI * pc).cos();
        out[k + 5] = (PI * pc).sin();
    }

    /// Copy the tile at `(r0, c0)` into `out` (channel-major, row-major).
    /// Rows wrap around.
    pub(crate) fn gather_tile(&self, x: &Array3<f64>, r0: usize, c0: usize, out: &mut [f64]) {
        let (pr, pc) = (self.cfg.patch_rows, self.cfg.patch_cols);
        let rows = x.dim().1;
        let mut k = 0;
        for ch in 0..self.cfg.channels {
            for r in 0..pr {
                let i = (r0 + r) % rows;
                for c in 0..pc {
                    out[k] = x[[ch, i, c0 + c]];
                    k += 1;
                }
            }
        }
    }

    fn scatter_add_tile(&self, values: ArrayView1<'_, f64>, r0: usize, c0: usize, out: &mut Array3<f64>) {
        let (pr, pc) = (self.cfg.patch_rows, self.cfg.patch_cols);
        let rows = out.dim().1;
        let mut k = 0;
        for ch in 0..self.cfg.channels {
            for r in 0..pr {
                let i = (r0 + r) % rows;
                for c in 0..pc {
                    out[[ch, i, c0 + c]] += values[k];
                    k += 1;
                }
            }
        }
    }

    /// Per-element `[c_in, a, b]` for one tile, following the channel-major layout.
    pub(crate) fn tile_coefficients(&self, sigma_n: f64) -> Vec<[f64; 3]> {
        let per = self.cfg.patch_rows * self.cfg.patch_cols;
        self.norm.coefficients(sigma_n).into_iter().flat_map(|c| std::iter::repeat_n(c, per)).collect()
    }

    /// Trunk `F` on preconditioned inputs `u`. Returns `F` and the tape.
    pub(crate) fn forward(&self, u: Array2<f64>, emb: Array2<f64>) -> (Array2<f64>, Tape) {
        let p = &self.params;
        let l = &self.layout;
        let mut h = u.dot(&view(p, &l.w_in).t()) + emb.dot(&view(p, &l.w_emb).t());
        h += &row(p, &l.b_in);
        let mut hidden = Vec::with_capacity(l.blocks.len() + 1);
        let mut pre = Vec::with_capacity(l.blocks.len());
        for b in &l.blocks {
            let z = h.dot(&view(p, &b.w1).t()) + row(p, &b.b1);
            let a = z.mapv(|v| v.max(0.0));
            let next = &h + &a.dot(&view(p, &b.w2).t()) + row(p, &b.b2);
            hidden.push(h);
            pre.push(z);
            h = next;
        }
        let gate = emb.dot(&view(p, &l.w_gate).t()) + row(p, &l.b_gate);
        let out = h.dot(&view(p, &l.w_out).t()) + row(p, &l.b_out) + &gate * &u;
        hidden.push(h);
        (out, Tape { u, emb, hidden, pre })
    }

    /// Parameter gradient of `Σ d_out ⊙ out`, same layout as `params`.
    pub(crate) fn backward(&self, tape: &Tape, d_out: &Array2<f64>) -> Vec<f64> {
        let p = &self.params;
        let l = &self.layout;
        let mut grad = vec![0.0; l.total];
        let put = |grad: &mut Vec<f64>, m: &Mat, g: Array2<f64>| {
            let dst = &mut grad[m.range()];
            for (d, v) in dst.iter_mut().zip(g.iter()) {
                *d += v;
            }
        };
        let put_row = |grad: &mut Vec<f64>, m: &Mat, g: Array1<f64>| {
            for (d, v) in grad[m.range()].iter_mut().zip(g.iter()) {
                *d += v;
            }
        };

        let h_final = tape.hidden.last().unwrap();
        put(&mut grad, &l.w_out, d_out.t().dot(h_final));
        put_row(&mut grad, &l.b_out, d_out.sum_axis(Axis(0)));
        let d_gate = d_out * &tape.u;
        put(&mut grad, &l.w_gate, d_gate.t().dot(&tape.emb));
        put_row(&mut grad, &l.b_gate, d_gate.sum_axis(Axis(0)));

        let mut dh = d_out.dot(&view(p, &l.w_out));
        for (i, b) in l.blocks.iter().enumerate().rev() {
            let h_in = &tape.hidden[i];
            let z = &tape.pre[i];
            let a = z.mapv(|v| v.max(0.0));
            put(&mut grad, &b.w2, dh.t().dot(&a));
            put_row(&mut grad, &b.b2, dh.sum_axis(Axis(0)));
            let mut dz = dh.dot(&view(p, &b.w2));
            dz.zip_mut_with(z, |g, &zv| {
                if zv <= 0.0 {
                    *g = 0.0;
                }
            });
            put(&mut grad, &b.w1, dz.t().dot(h_in));
            put_row(&mut grad, &b.b1, dz.sum_axis(Axis(0)));
            dh = dh + dz.dot(&view(p, &b.w1));
        }
        put(&mut grad, &l.w_in, dh.t().dot(&tape.u));
        put(&mut grad, &l.w_emb, dh.t().dot(&tape.emb));
        put_row(&mut grad, &l.b_in, dh.sum_axis(Axis(0)));
        grad
    }

    /// `σₙ·sₙ` for a whole stack in normalized units.
    fn denoise_normalized(&self, x_n: &Array3<f64>, sigma_n: f64) -> Result<Array3<f64>> {
        let (ch, rows, cols) = x_n.dim();
        if ch != self.cfg.channels {
            return Err(invalid(format!("stack has {ch} channels, network expects {}", self.cfg.channels)));
        }
        let grid = self.tile_grid(rows, cols)?;
        let shifts = self.cfg.row_shifts;
        let (pr, pc) = (self.cfg.patch_rows, self.cfg.patch_cols);
        let origins: Vec<(usize, usize)> = (0..shifts)
            .flat_map(|s| {
                let off = s * pr / shifts;
                (0..grid.0).flat_map(move |ti| (0..grid.1).map(move |tj| (ti * pr + off, tj * pc)))
            })
            .collect();
        let n = origins.len();
        let (d, e) = (self.cfg.input_dim(), self.cfg.embed_dim());
        let coef = self.tile_coefficients(sigma_n);
        let mut u = Array2::zeros((n, d));
        let mut emb = Array2::zeros((n, e));
        for (k, &(r0, c0)) in origins.iter().enumerate() {
            self.gather_tile(x_n, r0, c0, u.row_mut(k).as_slice_mut().unwrap());
            let pos = self.tile_position(r0, c0, rows, cols);
            self.embedding(sigma_n, pos, emb.row_mut(k).as_slice_mut().unwrap());
        }
        let x_tiles = u.clone();
        for mut r in u.rows_mut() {
            r.iter_mut().zip(&coef).for_each(|(v, c)| *v *= c[0]);
        }
        let (mut out, _) = self.forward(u, emb);
        for (mut o, x) in out.rows_mut().into_iter().zip(x_tiles.rows()) {
            for ((o, x), c) in o.iter_mut().zip(x).zip(&coef) {
                *o = c[1] * x + c[2] * *o;
            }
        }
        let mut result = Array3::zeros(x_n.dim());
        for (k, &(r0, c0)) in origins.iter().enumerate() {
            self.scatter_add_tile(out.row(k), r0, c0, &mut result);
        }
        if shifts > 1 {
            result /= shifts as f64;
        }
        Ok(result)
    }

    pub fn try_score(&self, x: &Array3<f64>, sigma: f64) -> Result<Array3<f64>> {
        if !(sigma > 0.0) {
            return Err(invalid("score network needs a positive noise level"));
        }
        let k = self.norm.data_scale;
        let x_n = x / k;
        let out = self.denoise_normalized(&x_n, sigma / k)?;
        // s_phys(x, σ) = s_n(x/k, σ/k)/k = out/σ
        Ok(out / sigma)
    }
}

impl ScoreModel for PatchScoreNet {
    fn channels(&self) -> usize {
        self.cfg.channels
    }

    fn score(&self, x: &Array3<f64>, sigma: f64) -> Array3<f64> {
        self.try_score(x, sigma).expect("stack shape incompatible with score network")
    }
}

/// The aligned, non-overlapping tiles of a plane stack with their origins.
pub(crate) fn tiles_of(net: &PatchScoreNet, x: &Array3<f64>) -> Result<Vec<(Vec<f64>, (usize, usize))>> {
    let (_, rows, cols) = x.dim();
    let grid = net.tile_grid(rows, cols)?;
    let (pr, pc) = (net.cfg.patch_rows, net.cfg.patch_cols);
    let mut out = Vec::with_capacity(grid.0 * grid.1);
    for ti in 0..grid.0 {
        for tj in 0..grid.1 {
            let mut buf = vec![0.0; net.cfg.input_dim()];
            net.gather_tile(x, ti * pr, tj * pc, &mut buf);
            out.push((buf, (ti * pr, tj * pc)));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> PatchScoreNet {
        let cfg = NetConfig { channels: 2, patch_rows: 2, patch_cols: 3, hidden: 7, blocks: 2, fourier: 2, row_shifts: 1 };
        let mut net = PatchScoreNet::new(cfg, 3).unwrap();
        // perturb so no tensor is identically zero
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for p in net.params_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *p += 0.3 * z;
        }
        net
    }

    fn loss(net: &PatchScoreNet, u: &Array2<f64>, emb: &Array2<f64>, w: &Array2<f64>) -> f64 {
        let (out, _) = net.forward(u.clone(), emb.clone());
        (&out * w).sum()
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut net = small();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 5;
        let d = net.config().input_dim();
        let e = net.config().embed_dim();
        let u = Array2::from_shape_simple_fn((n, d), || rng.sample::<f64, _>(StandardNormal));
        let emb = Array2::from_shape_simple_fn((n, e), || rng.sample::<f64, _>(StandardNormal));
        let w = Array2::from_shape_simple_fn((n, d), || rng.sample::<f64, _>(StandardNormal));
        let (_, tape) = net.forward(u.clone(), emb.clone());
        let grad = net.backward(&tape, &w);
        let h = 1e-6;
        for i in 0..net.params().len() {
            let orig = net.params()[i];
            net.params_mut()[i] = orig + h;
            let lp = loss(&net, &u, &emb, &w);
            net.params_mut()[i] = orig - h;
            let lm = loss(&net, &u, &emb, &w);
            net.params_mut()[i] = orig;
            let fd = (lp - lm) / (2.0 * h);
            assert!((fd - grad[i]).abs() <= 1e-5 * (1.0 + fd.abs()), "param {i}: fd {fd} vs {}", grad[i]);
        }
    }

    #[test]
    fn score_shape_and_determinism() {
        let net = small();
        let x = Array3::from_shape_fn((2, 4, 6), |(a, b, c)| (a as f64 - b as f64 * 0.3 + c as f64 * 0.1).sin());
        let s1 = net.score(&x, 0.4);
        let s2 = net.score(&x, 0.4);
        assert_eq!(s1.dim(), x.dim());
        assert_eq!(s1, s2);
        assert!(net.try_score(&Array3::zeros((2, 5, 6)), 0.4).is_err());
        assert!(net.try_score(&Array3::zeros((3, 4, 6)), 0.4).is_err());
        assert!(net.try_score(&x, 0.0).is_err());
    }

    #[test]
    fn tiles_round_trip_through_scatter() {
        let net = small();
        let x = Array3::from_shape_fn((2, 4, 6), |(a, b, c)| (100 * a + 10 * b + c) as f64);
        let mut back = Array3::zeros(x.dim());
        for (buf, (r0, c0)) in tiles_of(&net, &x).unwrap() {
            net.scatter_add_tile(ArrayView1::from(&buf[..]), r0, c0, &mut back);
        }
        assert_eq!(back, x);
        // a shifted tile wraps to the top rows
        let mut buf = vec![0.0; net.config().input_dim()];
        net.gather_tile(&x, 3, 0, &mut buf);
        assert_eq!(&buf[..6], &[30.0, 31.0, 32.0, 0.0, 1.0, 2.0]);
    }

    #[test]
    fn parts_round_trip() {
        let net = small();
        let norm =
            Normalization { data_scale: 2.0, sigma_data: vec![0.5, 0.2], sigma_min: 0.01, sigma_max: 3.0, schedule_len: 10 };
        let copy = PatchScoreNet::from_parts(*net.config(), net.params().to_vec(), norm.clone()).unwrap();
        assert_eq!(copy.schedule_params(), (0.01, 3.0, 10));
        assert!(PatchScoreNet::from_parts(*net.config(), vec![0.0; 3], norm.clone()).is_err());
        let short = Normalization { sigma_data: vec![0.5], ..norm.clone() };
        assert!(PatchScoreNet::from_parts(*net.config(), net.params().to_vec(), short).is_err());
        let bad = Normalization { sigma_data: vec![0.5, 0.0], ..norm };
        assert!(PatchScoreNet::from_parts(*net.config(), net.params().to_vec(), bad).is_err());
    }

    #[test]
    fn zero_trunk_gives_gaussian_score() {
        // With F ≡ 0 the denoiser is the posterior mean of N(0, (k·σ_d)²),
        // for aligned and shift-averaged tilings alike.
        for row_shifts in [1, 2] {
            let cfg =
                NetConfig { channels: 2, patch_rows: 2, patch_cols: 3, hidden: 7, blocks: 2, fourier: 2, row_shifts };
            let total = PatchScoreNet::new(cfg, 0).unwrap().params().len();
            let norm = Normalization {
                data_scale: 3.0,
                sigma_data: vec![0.7, 0.1],
                sigma_min: 0.01,
                sigma_max: 5.0,
                schedule_len: 10,
            };
            let net = PatchScoreNet::from_parts(cfg, vec![0.0; total], norm).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(2);
            let x = Array3::from_shape_simple_fn((2, 4, 6), || rng.sample::<f64, _>(StandardNormal));
            let var = [(3.0f64 * 0.7).powi(2), (3.0f64 * 0.1).powi(2)];
            for sigma in [0.05, 1.0, 9.0] {
                let s = net.try_score(&x, sigma).unwrap();
                let expected = Array3::from_shape_fn(x.dim(), |(c, i, j)| -x[[c, i, j]] / (var[c] + sigma * sigma));
                let err = (&s - &expected).iter().fold(0.0f64, |m, v| m.max(v.abs()));
                assert!(err <= 1e-12 * (1.0 + expected.iter().fold(0.0f64, |m, v| m.max(v.abs()))));
            }
        }
    }

    #[test]
    fn shift_count_is_validated() {
        let cfg = NetConfig { channels: 1, patch_rows: 2, patch_cols: 2, hidden: 4, blocks: 1, fourier: 1, row_shifts: 3 };
        assert!(PatchScoreNet::new(cfg, 0).is_err());
        assert!(PatchScoreNet::new(NetConfig { row_shifts: 0, ..cfg }, 0).is_err());
    }
}
