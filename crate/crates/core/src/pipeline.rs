//! Configuration, corpus generation, model training and the desk-scale
//! benchmark grid.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use ndarray::Array3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffusion::{train_score, NetConfig, PatchScoreNet, ScoreModel, TrainConfig, ZeroScore};
use crate::error::{Result, SwordError};
use crate::fbp::FilterSpec;
use crate::io;
use crate::metrics::{evaluate, MetricReport};
use crate::phantom::{disk_phantom, ellipse_phantom, random_ellipses, GridSpec, Image};
use crate::projector::{forward_project, subsample, view_mask, FanBeamGeometry, Sinogram};
use crate::sampler::{sword_reconstruct, DcMode, ReconMode, SamplerConfig};
use crate::wavelet::{dwt2, extract_high, SubbandStack};

/// Environment variable that replaces `output_dir`.
pub const OUTPUT_ENV: &str = "SWORD_OUT";

/// Stream offset separating held-out test phantoms from the training corpus.
const TEST_STREAM: u64 = 1 << 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub n: usize,
    pub fov: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self { n: 64, fov: 20.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeometryConfig {
    pub source_to_center_cm: f64,
    pub center_to_detector_cm: f64,
    pub detector_width_cm: f64,
    pub n_detectors: usize,
    pub n_views: usize,
}

impl Default for GeometryConfig {
    fn default() -> Self {
        let g = FanBeamGeometry::default();
        Self {
            source_to_center_cm: g.source_to_center_cm,
            center_to_detector_cm: g.center_to_detector_cm,
            detector_width_cm: g.detector_width_cm,
            n_detectors: 96,
            n_views: 180,
        }
    }
}

impl GeometryConfig {
    pub fn build(&self) -> Result<FanBeamGeometry> {
        let g = FanBeamGeometry {
            source_to_center_cm: self.source_to_center_cm,
            center_to_detector_cm: self.center_to_detector_cm,
            detector_width_cm: self.detector_width_cm,
            n_detectors: self.n_detectors,
            n_views: self.n_views,
        };
        g.validate().map_err(config_err)?;
        Ok(g)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub full_net: NetConfig,
    pub high_net: NetConfig,
    pub train: TrainConfig,
    /// Checkpoint paths, relative to the output directory unless absolute.
    pub full_checkpoint: PathBuf,
    pub high_checkpoint: PathBuf,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let net = |channels| NetConfig { channels, patch_rows: 6, patch_cols: 8, hidden: 128, blocks: 2, fourier: 4, row_shifts: 6 };
        Self {
            full_net: net(4),
            high_net: net(3),
            train: TrainConfig { steps: 15000, batch: 64, ..TrainConfig::default() },
            full_checkpoint: PathBuf::from("models/full.swsm"),
            high_checkpoint: PathBuf::from("models/high.swsm"),
            init_seed: 17,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerParams {
    pub iterations: usize,
    pub eta: f64,
    pub eta2: f64,
    pub snr: f64,
    pub corrector_steps: usize,
    pub dc_mode: DcMode,
    pub coupling: Option<f64>,
    pub filter: FilterSpec,
    pub seed: u64,
    pub denoise_final: bool,
}

impl Default for SamplerParams {
    fn default() -> Self {
        Self {
            iterations: 300,
            eta: 1.0,
            eta2: 0.5,
            snr: 0.25,
            corrector_steps: 1,
            dc_mode: DcMode::SinogramRows,
            coupling: None,
            filter: FilterSpec::default(),
            seed: 0,
            denoise_final: true,
        }
    }
}

/// Ground truth images a benchmark row is scored on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TestSet {
    /// Centered unit disk of radius fov/4.
    Disk,
    /// Held-out random-ellipse phantoms from a stream disjoint from the corpus.
    Ellipses,
}

impl std::fmt::Display for TestSet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TestSet::Disk => "disk",
            TestSet::Ellipses => "ellipses",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub views: Vec<usize>,
    pub methods: Vec<ReconMode>,
    pub sets: Vec<TestSet>,
    /// Number of held-out random phantoms averaged per ellipse cell.
    pub test_phantoms: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            views: vec![30, 45, 60, 90],
            methods: vec![ReconMode::Fbp, ReconMode::WfdmOnly, ReconMode::WhdmOnly, ReconMode::Sword],
            sets: vec![TestSet::Disk, TestSet::Ellipses],
            test_phantoms: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub corpus_size: usize,
    pub grid: GridConfig,
    pub geometry: GeometryConfig,
    pub model: ModelConfig,
    pub sampler: SamplerParams,
    pub bench: BenchConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("sword_out"),
            corpus_size: 200,
            grid: GridConfig::default(),
            geometry: GeometryConfig::default(),
            model: ModelConfig::default(),
            sampler: SamplerParams::default(),
            bench: BenchConfig::default(),
        }
    }
}

fn config_err(e: impl std::fmt::Display) -> SwordError {
    SwordError::Config(e.to_string())
}

/// Recursive table merge; `over` wins on conflicts.
fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn load_table(path: &Path, depth: usize) -> Result<toml::Table> {
    if depth > 16 {
        return Err(config_err(format!("include chain too deep at {}", path.display())));
    }
    let bytes = io::read_bytes(path)?;
    let text = String::from_utf8(bytes).map_err(|_| config_err(format!("{} is not UTF-8", path.display())))?;
    let mut table: toml::Table =
        toml::from_str(&text).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
    let includes = match table.remove("include") {
        None => Vec::new(),
        Some(toml::Value::String(s)) => vec![s],
        Some(toml::Value::Array(items)) => items
            .into_iter()
            .map(|v| match v {
                toml::Value::String(s) => Ok(s),
                other => Err(config_err(format!("include entries must be strings, got {other}"))),
            })
            .collect::<Result<_>>()?,
        Some(other) => return Err(config_err(format!("include must be a path or list of paths, got {other}"))),
    };
    let dir = path.parent().unwrap_or(Path::new("."));
    let mut merged = toml::Table::new();
    for inc in includes {
        let p = dir.join(inc);
        let sub = load_table(&p, depth + 1).map_err(|e| match e {
            SwordError::MissingFile(m) => config_err(format!("included file {} not found", m.display())),
            other => other,
        })?;
        merge(&mut merged, sub);
    }
    merge(&mut merged, table);
    Ok(merged)
}

impl PipelineConfig {
    /// Parse a TOML document. Relative `include` paths resolve against the
    /// including file; later keys override included ones.
    pub fn load(path: &Path) -> Result<Self> {
        let table = load_table(path, 0)?;
        Self::from_table(table).map_err(|e| match e {
            SwordError::Config(m) => config_err(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Fields missing from `table`, at any depth, keep their defaults.
    fn from_table(table: toml::Table) -> Result<Self> {
        let mut base = toml::Table::try_from(PipelineConfig::default()).map_err(config_err)?;
        merge(&mut base, table);
        let mut cfg: PipelineConfig = toml::Value::Table(base).try_into().map_err(config_err)?;
        cfg.apply_env();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        Self::from_table(toml::from_str(text).map_err(config_err)?)
    }

    pub fn apply_env(&mut self) {
        if let Some(dir) = std::env::var_os(OUTPUT_ENV) {
            if !dir.is_empty() {
                self.output_dir = PathBuf::from(dir);
            }
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let grid = self.grid_spec()?;
        let geo = self.geometry()?;
        geo.check_grid(&grid).map_err(config_err)?;
        if geo.n_views % 2 != 0 || geo.n_detectors % 2 != 0 {
            return Err(config_err("view and detector counts must be even"));
        }
        for &v in &self.bench.views {
            if v == 0 || v > geo.n_views {
                return Err(config_err(format!("cannot keep {v} of {} views", geo.n_views)));
            }
        }
        if self.sampler.iterations < 2 {
            return Err(config_err("sampler needs at least two iterations"));
        }
        let (pr, pc) = (geo.n_views / 2, geo.n_detectors / 2);
        for net in [&self.model.full_net, &self.model.high_net] {
            if net.patch_rows == 0 || net.patch_cols == 0 || pr % net.patch_rows != 0 || pc % net.patch_cols != 0 {
                return Err(config_err(format!(
                    "patch {}x{} does not tile {}x{} sub-band planes",
                    net.patch_rows, net.patch_cols, pr, pc
                )));
            }
            if net.row_shifts == 0 || net.row_shifts > net.patch_rows {
                return Err(config_err(format!("row_shifts must lie in 1..={}", net.patch_rows)));
            }
        }
        if self.model.full_net.channels != 4 || self.model.high_net.channels != 3 {
            return Err(config_err("full and detail networks need 4 and 3 channels"));
        }
        self.sampler_config(1.0).map(|_| ())
    }

    pub fn grid_spec(&self) -> Result<GridSpec> {
        GridSpec::new(self.grid.n, self.grid.fov).map_err(config_err)
    }

    pub fn geometry(&self) -> Result<FanBeamGeometry> {
        self.geometry.build()
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.output_dir.join(p)
        }
    }

    /// Sampler settings on a geometric ladder of `iterations` levels ending at `sigma_max`.
    pub fn sampler_config(&self, data_scale: f64) -> Result<SamplerConfig> {
        let s = &self.sampler;
        let smax = self.model.train.sigma_max.unwrap_or(1.0);
        let schedule = crate::diffusion::geometric_schedule(
            self.model.train.sigma_min * data_scale,
            smax.max(self.model.train.sigma_min * 10.0) * data_scale,
            s.iterations,
        )
        .map_err(config_err)?;
        let mut cfg = SamplerConfig::new(schedule);
        cfg.eta = s.eta;
        cfg.eta2 = s.eta2;
        cfg.snr = s.snr;
        cfg.corrector_steps = s.corrector_steps;
        cfg.dc_mode = s.dc_mode;
        cfg.coupling = s.coupling;
        cfg.filter = s.filter;
        cfg.seed = s.seed;
        cfg.denoise_final = s.denoise_final;
        cfg.validate().map_err(config_err)?;
        Ok(cfg)
    }
}

/// One phantom with its sinogram and sub-band stacks.
#[derive(Debug, Clone)]
pub struct CorpusItem {
    pub phantom: Image,
    pub sinogram: Sinogram,
    pub full: SubbandStack,
}

fn phantom_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn make_item(cfg: &PipelineConfig, stream: u64) -> Result<CorpusItem> {
    let grid = cfg.grid_spec()?;
    let geo = cfg.geometry()?;
    let mut rng = phantom_rng(cfg.seed, stream);
    let phantom = ellipse_phantom(grid, &random_ellipses(grid, &mut rng))?;
    let sinogram = forward_project(&phantom, &geo)?;
    let full = dwt2(&sinogram)?;
    Ok(CorpusItem { phantom, sinogram, full })
}

/// Build `count` training items in memory.
pub fn build_corpus(cfg: &PipelineConfig, count: usize) -> Result<Vec<CorpusItem>> {
    if count == 0 {
        return Err(SwordError::InvalidArgument("corpus size must be at least 1".into()));
    }
    (0..count as u64).into_par_iter().map(|i| make_item(cfg, i)).collect()
}

/// Held-out phantom `index` from a stream disjoint from the corpus.
pub fn test_item(cfg: &PipelineConfig, index: usize) -> Result<CorpusItem> {
    make_item(cfg, TEST_STREAM + index as u64)
}

/// Ground truth, sinogram and stack for every image of a benchmark set.
pub fn test_images(cfg: &PipelineConfig, set: TestSet) -> Result<Vec<CorpusItem>> {
    match set {
        TestSet::Disk => {
            let grid = cfg.grid_spec()?;
            let phantom = disk_phantom(grid, grid.fov / 4.0, 1.0)?;
            let sinogram = forward_project(&phantom, &cfg.geometry()?)?;
            let full = dwt2(&sinogram)?;
            Ok(vec![CorpusItem { phantom, sinogram, full }])
        }
        TestSet::Ellipses => (0..cfg.bench.test_phantoms.max(1)).map(|i| test_item(cfg, i)).collect(),
    }
}

/// Write `count` items under `dir` as `NNNN.{swim,swsn,x1,x2}`.
pub fn generate_corpus(cfg: &PipelineConfig, count: usize, dir: &Path) -> Result<Vec<CorpusItem>> {
    let items = build_corpus(cfg, count)?;
    std::fs::create_dir_all(dir)?;
    for (i, item) in items.iter().enumerate() {
        let stem = dir.join(format!("{i:04}"));
        io::save_image(&stem.with_extension("swim"), &item.phantom)?;
        io::save_sinogram(&stem.with_extension("swsn"), &item.sinogram)?;
        io::save_full_stack(&stem.with_extension("x1"), &item.full)?;
        io::save_high_stack(&stem.with_extension("x2"), &extract_high(&item.full))?;
    }
    Ok(items)
}

/// Read the `*.x1` stacks of a corpus directory in name order.
pub fn load_corpus_stacks(dir: &Path) -> Result<Vec<Array3<f64>>> {
    let rd = std::fs::read_dir(dir).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => SwordError::MissingFile(dir.to_path_buf()),
        _ => e.into(),
    })?;
    let mut paths: Vec<PathBuf> = rd
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "x1"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(SwordError::Config(format!("no .x1 stacks in {}", dir.display())));
    }
    paths.iter().map(|p| io::load_full_stack(p).map(|s| s.planes)).collect()
}

#[derive(Debug, Clone)]
pub struct TrainedModels {
    pub full: PatchScoreNet,
    pub high: PatchScoreNet,
    pub full_loss: Vec<f64>,
    pub high_loss: Vec<f64>,
}

/// Train the four-band and detail-band models. The detail model reuses the
/// data scale and noise ceiling of the four-band model so both stages
/// share a single noise ladder at sampling time.
pub fn train_models(cfg: &PipelineConfig, full_stacks: &[Array3<f64>]) -> Result<TrainedModels> {
    let m = &cfg.model;
    let full_net = PatchScoreNet::new(m.full_net, m.init_seed)?;
    info!("training four-band model on {} stacks", full_stacks.len());
    let full = train_score(full_net, full_stacks, &m.train)?;
    let (_, smax, _) = full.model.schedule_params();

    let high_stacks: Vec<Array3<f64>> =
        full_stacks.iter().map(|x| x.slice(ndarray::s![1..4, .., ..]).to_owned()).collect();
    let high_cfg = TrainConfig {
        data_scale: Some(full.model.data_scale()),
        sigma_max: Some(smax),
        seed: m.train.seed.wrapping_add(1),
        ..m.train.clone()
    };
    let high_net = PatchScoreNet::new(m.high_net, m.init_seed.wrapping_add(1))?;
    info!("training detail-band model");
    let high = train_score(high_net, &high_stacks, &high_cfg)?;
    Ok(TrainedModels { full: full.model, high: high.model, full_loss: full.loss_trace, high_loss: high.loss_trace })
}

/// Load both checkpoints; a missing file is a configuration error naming the path.
pub fn load_models(cfg: &PipelineConfig) -> Result<(PatchScoreNet, PatchScoreNet)> {
    let load = |p: &Path| {
        let path = cfg.resolve(p);
        io::load_model(&path).map_err(|e| match e {
            SwordError::MissingFile(m) => SwordError::Config(format!("checkpoint {} not found", m.display())),
            other => other,
        })
    };
    let full = load(&cfg.model.full_checkpoint)?;
    let high = load(&cfg.model.high_checkpoint)?;
    if full.channels() != 4 || high.channels() != 3 {
        return Err(SwordError::Config("checkpoints have the wrong channel counts".into()));
    }
    Ok((full, high))
}

/// Sampler configuration on the ladder the four-band model was trained on.
pub fn sampler_for(cfg: &PipelineConfig, full: &PatchScoreNet, mode: ReconMode) -> Result<SamplerConfig> {
    let mut sc = cfg.sampler_config(1.0)?;
    sc.schedule = full.physical_schedule(Some(cfg.sampler.iterations))?;
    sc.mode = mode;
    Ok(sc)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkRecord {
    pub set: TestSet,
    pub method: ReconMode,
    pub views: usize,
    pub psnr_db: f64,
    pub ssim: f64,
    pub mse: f64,
    pub data_range: f64,
    /// Logged, not persisted, so reruns write identical files.
    #[serde(skip)]
    pub wall_seconds: f64,
}

impl BenchmarkRecord {
    pub fn report(&self) -> MetricReport {
        MetricReport { psnr_db: self.psnr_db, ssim: self.ssim, mse: self.mse, data_range: self.data_range }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchmarkMeta {
    pub grid: usize,
    pub total_views: usize,
    pub n_detectors: usize,
    pub views: Vec<usize>,
    pub sparsity_ratios: Vec<f64>,
    pub iterations: usize,
    pub sets: Vec<TestSet>,
    pub test_phantoms: usize,
}

/// Reconstruct `item` from `views` kept views with `method`.
pub fn reconstruct_cell<M1, M2>(
    cfg: &PipelineConfig,
    item: &CorpusItem,
    views: usize,
    method: ReconMode,
    full: &M1,
    high: &M2,
    schedule_source: &PatchScoreNet,
) -> Result<Image>
where
    M1: ScoreModel + ?Sized,
    M2: ScoreModel + ?Sized,
{
    let geo = cfg.geometry()?;
    let grid = cfg.grid_spec()?;
    let mask = view_mask(geo.n_views, views)?;
    let y = subsample(&item.sinogram, &mask)?;
    let sc = sampler_for(cfg, schedule_source, method)?;
    Ok(sword_reconstruct(&y, &geo, grid, full, high, &sc)?.image)
}

/// Fill the method × views grid. Cells run in parallel; every cell writes its
/// own reconstruction files, and the CSV, text table and metadata are
/// written afterwards from a single thread.
pub fn run_benchmark(
    cfg: &PipelineConfig,
    full: &PatchScoreNet,
    high: &PatchScoreNet,
    out_dir: Option<&Path>,
) -> Result<Vec<BenchmarkRecord>> {
    let mut truth: BTreeMap<TestSet, Vec<CorpusItem>> = BTreeMap::new();
    for &set in &cfg.bench.sets {
        truth.insert(set, test_images(cfg, set)?);
    }
    let cells: Vec<(TestSet, ReconMode, usize)> = truth
        .keys()
        .flat_map(|&set| {
            cfg.bench.methods.iter().flat_map(move |&m| cfg.bench.views.iter().map(move |&v| (set, m, v)))
        })
        .collect();
    let zero4 = ZeroScore { channels: 4 };
    let zero3 = ZeroScore { channels: 3 };

    let records: Vec<BenchmarkRecord> = cells
        .par_iter()
        .map(|&(set, method, views)| -> Result<BenchmarkRecord> {
            let start = Instant::now();
            let mut acc = [0.0; 4];
            let tests = &truth[&set];
            for (t, item) in tests.iter().enumerate() {
                let full_m: &dyn ScoreModel = if method == ReconMode::WhdmOnly { &zero4 } else { full };
                let high_m: &dyn ScoreModel = if method == ReconMode::WfdmOnly { &zero3 } else { high };
                let img = reconstruct_cell(cfg, item, views, method, full_m, high_m, full)?;
                if let Some(dir) = out_dir {
                    io::save_image(&dir.join("cells").join(format!("{set}_{method}_{views}_{t}.swim")), &img)?;
                }
                let r = evaluate(item.phantom.data.view(), img.data.view(), None)?;
                acc[0] += r.psnr_db;
                acc[1] += r.ssim;
                acc[2] += r.mse;
                acc[3] += r.data_range;
            }
            let k = tests.len() as f64;
            info!("cell {set} {method} @ {views} views: {:.2} dB in {:.1} s", acc[0] / k, start.elapsed().as_secs_f64());
            Ok(BenchmarkRecord {
                set,
                method,
                views,
                psnr_db: acc[0] / k,
                ssim: acc[1] / k,
                mse: acc[2] / k,
                data_range: acc[3] / k,
                wall_seconds: start.elapsed().as_secs_f64(),
            })
        })
        .collect::<Result<_>>()?;

    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        io::write_bytes(&dir.join("bench.csv"), records_to_csv(&records)?.as_bytes())?;
        io::write_bytes(&dir.join("bench.txt"), render_table(&records).as_bytes())?;
        let geo = cfg.geometry()?;
        let meta = BenchmarkMeta {
            grid: cfg.grid.n,
            total_views: geo.n_views,
            n_detectors: geo.n_detectors,
            views: cfg.bench.views.clone(),
            sparsity_ratios: cfg.bench.views.iter().map(|&v| v as f64 / geo.n_views as f64).collect(),
            iterations: cfg.sampler.iterations,
            sets: truth.keys().copied().collect(),
            test_phantoms: cfg.bench.test_phantoms,
        };
        let json = serde_json::to_string_pretty(&meta).map_err(|e| SwordError::Format(e.to_string()))?;
        io::write_bytes(&dir.join("bench_meta.json"), json.as_bytes())?;
    }
    Ok(records)
}

pub fn records_to_csv(records: &[BenchmarkRecord]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in records {
        w.serialize(r).map_err(|e| SwordError::Format(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| SwordError::Format(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

pub fn records_from_csv(text: &str) -> Result<Vec<BenchmarkRecord>> {
    csv::Reader::from_reader(text.as_bytes())
        .deserialize()
        .map(|r| r.map_err(|e| SwordError::Format(e.to_string())))
        .collect()
}

/// One block per test set: methods as rows, view counts as columns,
/// `PSNR/SSIM/MSE` per cell.
pub fn render_table(records: &[BenchmarkRecord]) -> String {
    let mut views: Vec<usize> = records.iter().map(|r| r.views).collect();
    views.sort_unstable();
    views.dedup();
    let mut methods: Vec<ReconMode> = Vec::new();
    let mut sets: Vec<TestSet> = Vec::new();
    for r in records {
        if !methods.contains(&r.method) {
            methods.push(r.method);
        }
        if !sets.contains(&r.set) {
            sets.push(r.set);
        }
    }
    let cells: BTreeMap<(TestSet, String, usize), &BenchmarkRecord> =
        records.iter().map(|r| ((r.set, r.method.to_string(), r.views), r)).collect();
    let width = 26;
    let mut out = String::new();
    for set in &sets {
        let _ = writeln!(out, "[{set}]");
        let _ = write!(out, "{:<10}", "method");
        for v in &views {
            let _ = write!(out, " | {:^width$}", format!("{v} views"));
        }
        out.push('\n');
        let _ = writeln!(out, "{}", "-".repeat(10 + views.len() * (width + 3)));
        for m in &methods {
            let _ = write!(out, "{:<10}", m.to_string());
            for v in &views {
                let cell = match cells.get(&(*set, m.to_string(), *v)) {
                    Some(r) => format!("{:.2}/{:.4}/{:.2e}", r.psnr_db, r.ssim, r.mse),
                    None => "-".to_string(),
                };
                let _ = write!(out, " | {cell:^width$}");
            }
            out.push('\n');
        }
        out.push('\n');
    }
    out.push_str("cells: PSNR (dB) / SSIM / MSE\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> PipelineConfig {
        let mut cfg = PipelineConfig::default();
        cfg.grid = GridConfig { n: 16, fov: 20.0 };
        cfg.geometry.n_views = 24;
        cfg.geometry.n_detectors = 16;
        cfg.model.full_net.patch_rows = 4;
        cfg.model.full_net.patch_cols = 4;
        cfg.model.full_net.row_shifts = 2;
        cfg.model.high_net = NetConfig { channels: 3, ..cfg.model.full_net };
        cfg.bench.views = vec![6, 12];
        cfg
    }

    #[test]
    fn partial_tables_keep_defaults() {
        let cfg = PipelineConfig::from_toml_str("[model.full_net]\nhidden = 32\n[model.train]\nsteps = 7\n").unwrap();
        assert_eq!(cfg.model.full_net.hidden, 32);
        assert_eq!(cfg.model.full_net.channels, 4);
        assert_eq!(cfg.model.train.steps, 7);
        assert_eq!(cfg.model.train.batch, 64);
        assert!(PipelineConfig::from_toml_str("[model.full_net]\nwidth = 3\n").is_err());
    }

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = PipelineConfig::default();
        cfg.validate().unwrap();
        let text = cfg.to_toml();
        let mut back: PipelineConfig = toml::from_str(&text).unwrap();
        back.output_dir = cfg.output_dir.clone();
        assert_eq!(back, cfg);
    }

    #[test]
    fn include_and_override() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("base.toml"), "seed = 5\ncorpus_size = 7\n[grid]\nn = 32\n").unwrap();
        std::fs::write(
            dir.path().join("run.toml"),
            "include = \"base.toml\"\ncorpus_size = 9\n[sampler]\niterations = 50\n",
        )
        .unwrap();
        let cfg = PipelineConfig::load(&dir.path().join("run.toml")).unwrap();
        assert_eq!(cfg.seed, 5);
        assert_eq!(cfg.corpus_size, 9);
        assert_eq!(cfg.grid.n, 32);
        assert_eq!(cfg.grid.fov, 20.0);
        assert_eq!(cfg.sampler.iterations, 50);

        std::fs::write(dir.path().join("bad.toml"), "include = \"nope.toml\"\n").unwrap();
        let err = PipelineConfig::load(&dir.path().join("bad.toml")).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        std::fs::write(dir.path().join("typo.toml"), "[grid]\nsize = 3\n").unwrap();
        assert_eq!(PipelineConfig::load(&dir.path().join("typo.toml")).unwrap_err().exit_code(), 2);
        std::fs::write(dir.path().join("odd.toml"), "[geometry]\nn_views = 181\n").unwrap();
        assert!(PipelineConfig::load(&dir.path().join("odd.toml")).is_err());
    }

    #[test]
    fn corpus_items_are_consistent_and_reproducible() {
        let cfg = small();
        let dir = tempfile::tempdir().unwrap();
        let items = generate_corpus(&cfg, 2, dir.path()).unwrap();
        let first = std::fs::read(dir.path().join("0000.x1")).unwrap();
        generate_corpus(&cfg, 2, dir.path()).unwrap();
        assert_eq!(std::fs::read(dir.path().join("0000.x1")).unwrap(), first);
        for (i, item) in items.iter().enumerate() {
            let x2 = io::load_high_stack(&dir.path().join(format!("{i:04}.x2"))).unwrap();
            assert_eq!(x2, extract_high(&item.full));
            let back = crate::wavelet::idwt2(&item.full).unwrap();
            let err = (&back.data - &item.sinogram.data).iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(err <= 1e-12);
        }
        assert_ne!(items[0].phantom, items[1].phantom);
        assert_ne!(test_item(&cfg, 0).unwrap().phantom, items[0].phantom);
        assert_eq!(load_corpus_stacks(dir.path()).unwrap().len(), 2);
        assert!(build_corpus(&cfg, 0).is_err());
    }

    #[test]
    fn csv_round_trip_and_table() {
        let records = vec![
            BenchmarkRecord {
                set: TestSet::Disk,
                method: ReconMode::Fbp,
                views: 30,
                psnr_db: 21.123456789012345,
                ssim: 0.5,
                mse: 1.0e-3 / 3.0,
                data_range: 1.7,
                wall_seconds: 0.25,
            },
            BenchmarkRecord {
                set: TestSet::Ellipses,
                method: ReconMode::Sword,
                views: 30,
                psnr_db: f64::INFINITY,
                ssim: 1.0,
                mse: 0.0,
                data_range: 1.7,
                wall_seconds: 3.5,
            },
        ];
        let text = records_to_csv(&records).unwrap();
        assert!(text.starts_with("set,method,views,psnr_db"));
        let back = records_from_csv(&text).unwrap();
        assert_eq!(back[0], BenchmarkRecord { wall_seconds: 0.0, ..records[0].clone() });
        assert_eq!(back[1], BenchmarkRecord { wall_seconds: 0.0, ..records[1].clone() });
        let table = render_table(&records);
        assert!(table.contains("30 views") && table.contains("sword") && table.contains("21.12"));
        assert!(table.contains("[disk]") && table.contains("[ellipses]"));
    }

    #[test]
    fn missing_checkpoint_is_config_error() {
        let mut cfg = small();
        cfg.output_dir = PathBuf::from("/nonexistent");
        let err = load_models(&cfg).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("full.swsm"));
    }

    #[test]
    fn tiny_benchmark_runs() {
        let mut cfg = small();
        cfg.corpus_size = 4;
        cfg.model.full_net.hidden = 8;
        cfg.model.high_net.hidden = 8;
        cfg.model.train.steps = 5;
        cfg.model.train.batch = 4;
        cfg.sampler.iterations = 3;
        cfg.bench.test_phantoms = 1;
        let stacks: Vec<_> = build_corpus(&cfg, 4).unwrap().into_iter().map(|c| c.full.planes).collect();
        let models = train_models(&cfg, &stacks).unwrap();
        assert_eq!(models.full.data_scale(), models.high.data_scale());
        assert_eq!(models.full.schedule_params().1, models.high.schedule_params().1);
        let dir = tempfile::tempdir().unwrap();
        let recs = run_benchmark(&cfg, &models.full, &models.high, Some(dir.path())).unwrap();
        assert_eq!(recs.len(), 16);
        let csv = std::fs::read_to_string(dir.path().join("bench.csv")).unwrap();
        let zeroed: Vec<_> = recs.iter().map(|r| BenchmarkRecord { wall_seconds: 0.0, ..r.clone() }).collect();
        assert_eq!(records_from_csv(&csv).unwrap(), zeroed);
        assert!(dir.path().join("cells/disk_sword_6_0.swim").exists());
    }
}
