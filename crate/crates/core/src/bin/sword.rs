#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use sword_core::diffusion::{ScoreModel, ZeroScore};
use sword_core::fbp::{fbp_reconstruct, fbp_sparse, FilterKind, FilterSpec};
use sword_core::io;
use sword_core::metrics::evaluate;
use sword_core::phantom::{disk_phantom, ellipse_phantom, random_ellipses, shepp_logan, GridSpec};
use sword_core::pipeline::{self, PipelineConfig};
use sword_core::projector::{forward_project, subsample, view_mask, FanBeamGeometry};
use sword_core::sampler::{sword_reconstruct, ReconMode};
use sword_core::{Result, SwordError};

#[derive(Parser)]
#[command(name = "sword", version, about = "Sparse-view CT reconstruction with wavelet-domain diffusion priors")]
struct Cli {
    /// Worker threads; 1 gives the single-threaded reference mode.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a phantom image.
    Phantom(PhantomArgs),
    /// Fan-beam forward projection of an image.
    Project(ProjectArgs),
    /// Evenly spaced view mask.
    Mask(MaskArgs),
    /// Training corpus of phantoms, sinograms and sub-band stacks.
    Corpus(CorpusArgs),
    /// Train the four-band and detail-band score models.
    Train(TrainArgs),
    /// Sparse-view reconstruction with the diffusion sampler.
    Reconstruct(ReconstructArgs),
    /// Filtered backprojection, optionally restricted to a view mask.
    Fbp(FbpArgs),
    /// Compare a reconstruction against a reference image.
    Evaluate(EvaluateArgs),
    /// Run the method x views benchmark grid.
    Bench(BenchArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum PhantomKind {
    SheppLogan,
    Disk,
    Random,
}

#[derive(Args)]
struct PhantomArgs {
    #[arg(long, value_enum, default_value = "shepp-logan")]
    kind: PhantomKind,
    #[arg(long, default_value_t = 64)]
    n: usize,
    /// Field of view in cm.
    #[arg(long, default_value_t = 20.0)]
    fov: f64,
    /// Disk radius in cm.
    #[arg(long, default_value_t = 5.0)]
    radius: f64,
    #[arg(long, default_value_t = 1.0)]
    value: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    png: Option<PathBuf>,
}

#[derive(Args)]
struct GeometryArgs {
    #[arg(long, default_value_t = 180)]
    views: usize,
    #[arg(long, default_value_t = 96)]
    detectors: usize,
    #[arg(long, default_value_t = 40.0)]
    source_dist: f64,
    #[arg(long, default_value_t = 40.0)]
    detector_dist: f64,
    #[arg(long, default_value_t = 41.3)]
    detector_width: f64,
}

impl GeometryArgs {
    fn build(&self) -> Result<FanBeamGeometry> {
        let g = FanBeamGeometry {
            source_to_center_cm: self.source_dist,
            center_to_detector_cm: self.detector_dist,
            detector_width_cm: self.detector_width,
            n_detectors: self.detectors,
            n_views: self.views,
        };
        g.validate()?;
        Ok(g)
    }
}

#[derive(Args)]
struct ProjectArgs {
    #[arg(long)]
    image: PathBuf,
    #[command(flatten)]
    geometry: GeometryArgs,
    /// Standard deviation of additive Gaussian noise on the line integrals.
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct MaskArgs {
    #[arg(long)]
    total: usize,
    #[arg(long)]
    kept: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ConfigArg {
    /// TOML pipeline configuration; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
}

impl ConfigArg {
    fn load(&self) -> Result<PipelineConfig> {
        match &self.config {
            Some(p) => PipelineConfig::load(p),
            None => {
                let mut cfg = PipelineConfig::default();
                cfg.apply_env();
                Ok(cfg)
            }
        }
    }
}

#[derive(Args)]
struct CorpusArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long)]
    count: Option<usize>,
    /// Output directory; `<output_dir>/corpus` by default.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Corpus directory with `.x1` stacks; generated in memory when omitted.
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    sigma_min: Option<f64>,
    #[arg(long)]
    sigma_max: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    batch: Option<usize>,
}

#[derive(Args)]
struct ReconstructArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Sinogram file; rows outside the mask are ignored.
    #[arg(long, visible_alias = "sinogram")]
    sino: PathBuf,
    #[arg(long)]
    mask: PathBuf,
    #[arg(long, default_value = "sword")]
    mode: ReconMode,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    eta2: Option<f64>,
    #[arg(long)]
    snr: Option<f64>,
    /// Four-band checkpoint; overrides the configured path.
    #[arg(long)]
    model_full: Option<PathBuf>,
    /// Detail-band checkpoint; overrides the configured path.
    #[arg(long)]
    model_high: Option<PathBuf>,
    #[arg(long, visible_alias = "out-image")]
    out: PathBuf,
    /// Also write the completed sinogram.
    #[arg(long, visible_alias = "out-sinogram")]
    out_sino: Option<PathBuf>,
    #[arg(long)]
    png: Option<PathBuf>,
}

#[derive(Args)]
struct FbpArgs {
    #[arg(long)]
    sino: PathBuf,
    #[arg(long)]
    mask: Option<PathBuf>,
    #[arg(long, default_value_t = 64)]
    n: usize,
    #[arg(long, default_value_t = 20.0)]
    fov: f64,
    #[arg(long, default_value = "ram-lak")]
    filter: FilterKind,
    #[arg(long, default_value_t = 1.0)]
    cutoff: f64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    png: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    recon: PathBuf,
    #[arg(long = "ref")]
    reference: PathBuf,
    /// Fixed data range; the reference's max - min by default.
    #[arg(long)]
    data_range: Option<f64>,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Output directory; `<output_dir>/bench` by default.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Train models in memory instead of loading checkpoints.
    #[arg(long)]
    train: bool,
}

fn phantom(a: PhantomArgs) -> Result<()> {
    let grid = GridSpec::new(a.n, a.fov)?;
    let img = match a.kind {
        PhantomKind::SheppLogan => shepp_logan(grid),
        PhantomKind::Disk => disk_phantom(grid, a.radius, a.value)?,
        PhantomKind::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
            ellipse_phantom(grid, &random_ellipses(grid, &mut rng))?
        }
    };
    io::save_image(&a.out, &img)?;
    if let Some(p) = a.png {
        io::save_png(&p, &img, None)?;
    }
    Ok(())
}

fn project(a: ProjectArgs) -> Result<()> {
    let img = io::load_image(&a.image)?;
    let geo = a.geometry.build()?;
    let mut sino = forward_project(&img, &geo)?;
    if a.noise > 0.0 {
        let normal = Normal::new(0.0, a.noise).map_err(|e| SwordError::InvalidArgument(e.to_string()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
        sino.data.mapv_inplace(|v| v + normal.sample(&mut rng));
    } else if a.noise < 0.0 {
        return Err(SwordError::InvalidArgument("noise level must be non-negative".into()));
    }
    io::save_sinogram(&a.out, &sino)
}

fn mask(a: MaskArgs) -> Result<()> {
    io::save_mask(&a.out, &view_mask(a.total, a.kept)?)
}

fn corpus(a: CorpusArgs) -> Result<()> {
    let cfg = a.config.load()?;
    let count = a.count.unwrap_or(cfg.corpus_size);
    let dir = a.out.unwrap_or_else(|| cfg.output_dir.join("corpus"));
    pipeline::generate_corpus(&cfg, count, &dir)?;
    info!("wrote {count} items to {}", dir.display());
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = a.config.load()?;
    let t = &mut cfg.model.train;
    if let Some(v) = a.sigma_min {
        t.sigma_min = v;
    }
    if a.sigma_max.is_some() {
        t.sigma_max = a.sigma_max;
    }
    if let Some(v) = a.steps {
        t.steps = v;
    }
    if let Some(v) = a.lr {
        t.lr = v;
    }
    if let Some(v) = a.seed {
        t.seed = v;
    }
    if let Some(v) = a.batch {
        t.batch = v;
    }
    if !(t.sigma_min > 0.0) || t.sigma_max.is_some_and(|s| !(s > t.sigma_min)) {
        return Err(SwordError::Config("need 0 < sigma-min < sigma-max".into()));
    }
    let stacks = match &a.corpus {
        Some(dir) => pipeline::load_corpus_stacks(dir)?,
        None => pipeline::build_corpus(&cfg, cfg.corpus_size)?.into_iter().map(|c| c.full.planes).collect(),
    };
    let models = pipeline::train_models(&cfg, &stacks)?;
    io::save_model(&cfg.resolve(&cfg.model.full_checkpoint), &models.full)?;
    io::save_model(&cfg.resolve(&cfg.model.high_checkpoint), &models.high)?;
    let last = |v: &[f64]| v.iter().rev().take(100).sum::<f64>() / v.len().clamp(1, 100) as f64;
    info!("final loss: four-band {:.4}, detail {:.4}", last(&models.full_loss), last(&models.high_loss));
    Ok(())
}

fn reconstruct(a: ReconstructArgs) -> Result<()> {
    let mut cfg = a.config.load()?;
    if let Some(v) = a.iters {
        cfg.sampler.iterations = v;
    }
    if let Some(v) = a.seed {
        cfg.sampler.seed = v;
    }
    if let Some(v) = a.eta {
        cfg.sampler.eta = v;
    }
    if let Some(v) = a.eta2 {
        cfg.sampler.eta2 = v;
    }
    if let Some(v) = a.snr {
        cfg.sampler.snr = v;
    }
    if let Some(p) = a.model_full {
        cfg.model.full_checkpoint = p;
    }
    if let Some(p) = a.model_high {
        cfg.model.high_checkpoint = p;
    }
    cfg.validate()?;
    let sino = io::load_sinogram(&a.sino)?;
    let mask = io::load_mask(&a.mask)?;
    let y = subsample(&sino, &mask)?;
    let grid = cfg.grid_spec()?;
    let out = if a.mode == ReconMode::Fbp {
        let mut sc = cfg.sampler_config(1.0)?;
        sc.mode = ReconMode::Fbp;
        sword_reconstruct(&y, &sino.geometry, grid, &ZeroScore { channels: 4 }, &ZeroScore { channels: 3 }, &sc)?
    } else {
        let (full, high) = pipeline::load_models(&cfg)?;
        let sc = pipeline::sampler_for(&cfg, &full, a.mode)?;
        let zero4 = ZeroScore { channels: 4 };
        let zero3 = ZeroScore { channels: 3 };
        let m1: &dyn ScoreModel = if a.mode == ReconMode::WhdmOnly { &zero4 } else { &full };
        let m2: &dyn ScoreModel = if a.mode == ReconMode::WfdmOnly { &zero3 } else { &high };
        sword_reconstruct(&y, &sino.geometry, grid, m1, m2, &sc)?
    };
    io::save_image(&a.out, &out.image)?;
    if let Some(p) = a.out_sino {
        io::save_sinogram(&p, &out.sinogram)?;
    }
    if let Some(p) = a.png {
        io::save_png(&p, &out.image, None)?;
    }
    Ok(())
}

fn fbp(a: FbpArgs) -> Result<()> {
    let sino = io::load_sinogram(&a.sino)?;
    let grid = GridSpec::new(a.n, a.fov)?;
    let spec = FilterSpec::new(a.filter, a.cutoff)?;
    let img = match &a.mask {
        Some(p) => fbp_sparse(&subsample(&sino, &io::load_mask(p)?)?, &sino.geometry, grid, spec)?,
        None => fbp_reconstruct(&sino, grid, spec)?,
    };
    io::save_image(&a.out, &img)?;
    if let Some(p) = a.png {
        io::save_png(&p, &img, None)?;
    }
    Ok(())
}

fn evaluate_cmd(a: EvaluateArgs) -> Result<()> {
    let recon = io::load_image(&a.recon)?;
    let reference = io::load_image(&a.reference)?;
    let r = evaluate(reference.data.view(), recon.data.view(), a.data_range)?;
    if a.json {
        let v = serde_json::json!({
            "psnr_db": r.psnr_db,
            "ssim": r.ssim,
            "mse": r.mse,
            "data_range": r.data_range,
        });
        println!("{v}");
    } else {
        println!("psnr_db {:.4}\nssim {:.6}\nmse {:.6e}\ndata_range {:.6}", r.psnr_db, r.ssim, r.mse, r.data_range);
    }
    Ok(())
}

fn bench(a: BenchArgs) -> Result<()> {
    let cfg = a.config.load()?;
    let dir = a.out.unwrap_or_else(|| cfg.output_dir.join("bench"));
    let (full, high) = if a.train {
        let stacks: Vec<_> =
            pipeline::build_corpus(&cfg, cfg.corpus_size)?.into_iter().map(|c| c.full.planes).collect();
        let m = pipeline::train_models(&cfg, &stacks)?;
        (m.full, m.high)
    } else {
        pipeline::load_models(&cfg)?
    };
    let records = pipeline::run_benchmark(&cfg, &full, &high, Some(&dir))?;
    print!("{}", pipeline::render_table(&records));
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| SwordError::Config(e.to_string()))?;
    }
    match cli.command {
        Command::Phantom(a) => phantom(a),
        Command::Project(a) => project(a),
        Command::Mask(a) => mask(a),
        Command::Corpus(a) => corpus(a),
        Command::Train(a) => train(a),
        Command::Reconstruct(a) => reconstruct(a),
        Command::Fbp(a) => fbp(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Bench(a) => bench(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("sword: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

