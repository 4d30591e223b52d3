use std::fs;
use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use synerf::checkpoint;
use synerf::config;
use synerf::data::{
    bernoulli_mask, load_blender, orbit_cameras, plaid, synthesize, uniform_times, write_blender, AnalyticScene,
    SceneDataset, Split,
};
use synerf::diff::{check_gradients, render_image, GradCheckOptions, RenderOptions, Supervision};
use synerf::loss::LossWeights;
use synerf::metrics::masked_psnr;
use synerf::optim::{evaluate, train, LogRecord, TrainConfig, TrainHooks, TrainState};
use synerf::raster::Image;
use synerf::render::{image_rays, Aabb, RaySampleBatch};
use synerf::task2d::{avg_magnitude_spectrum, fit2d, heldout_psnr, render_partial, Engagement, Regression2DConfig};
use synerf::{FieldModel, ModelConfig, SceneMode};

const EXIT_CONFIG: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

/// A computation finished but its numbers are wrong.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
struct NumericFailure(String);

#[derive(Parser)]
#[command(name = "synerf", version, about = "Train and evaluate synergistic radiance fields")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a field on a Blender-layout dataset.
    Train(TrainArgs),
    /// Render an orbit path from a checkpoint.
    Render(RenderArgs),
    /// Score a checkpoint against a dataset split.
    Eval(EvalArgs),
    /// Fit a 2D image through a single feature plane and a coordinate MLP.
    Regress2d(Regress2dArgs),
    /// Print the average log-magnitude spectrum of PNG images.
    Spectrum { images: Vec<PathBuf> },
    /// Write a synthetic scene as a Blender-layout dataset.
    MakeScene(MakeSceneArgs),
    /// Compare analytic gradients with finite differences on a tiny model.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON config file; defaults are used for missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Per-scene preset such as `static/lego` or `dynamic/trex`.
    #[arg(long, conflicts_with = "config")]
    preset: Option<String>,
    /// Shrink the config to a single-core run of this many iterations.
    #[arg(long)]
    desk: Option<usize>,
    /// Override a config key, e.g. `--set model.channels=8`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory holding `transforms_train.json`.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
    /// Train on the fixed sparse view subset.
    #[arg(long)]
    sparse: bool,
    #[arg(long, default_value_t = 1)]
    downscale: usize,
    /// Continue from a checkpoint; its stored config is used.
    #[arg(long, conflicts_with_all = ["config", "preset", "desk"])]
    resume: Option<PathBuf>,
    /// Write `checkpoint.synf` every this many iterations (0 = only at the end).
    #[arg(long, default_value_t = 0)]
    checkpoint_every: usize,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 40)]
    frames: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 4.0)]
    radius: f64,
    #[arg(long, default_value_t = 0.69)]
    fov: f64,
    /// Fixed time for dynamic fields; by default time sweeps 0 to 1.
    #[arg(long)]
    time: Option<f64>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long, default_value_t = 1)]
    downscale: usize,
    /// Write rendered views here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct Regress2dArgs {
    #[arg(long)]
    out: PathBuf,
    /// Target PNG; the built-in plaid pattern is used when absent.
    #[arg(long)]
    image: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct MakeSceneArgs {
    /// `spheres` or `moving-sphere`.
    scene: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    views: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value = "train")]
    split: String,
    #[arg(long, default_value_t = 4.0)]
    radius: f64,
    #[arg(long, default_value_t = 0.69)]
    fov: f64,
    /// Orbit phase in radians.
    #[arg(long, default_value_t = 0.0)]
    phase: f64,
    /// Quadrature samples per ray for the reference renders.
    #[arg(long, default_value_t = 256)]
    samples: usize,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    dynamic: bool,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
}

fn parse_split(name: &str) -> Result<Split> {
    match name {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        other => Err(synerf::Error::Config(format!("unknown split {other:?}; expected train, val or test")).into()),
    }
}

fn build_config(args: &ConfigArgs) -> Result<TrainConfig> {
    let mut cfg = match (&args.config, &args.preset) {
        (Some(path), _) => config::load(path)?,
        (None, Some(name)) => {
            let (mode, scene) = name
                .split_once('/')
                .ok_or_else(|| synerf::Error::Config(format!("preset {name:?} is not mode/scene")))?;
            let mode = match mode {
                "static" => SceneMode::Static3D,
                "dynamic" => SceneMode::Dynamic4D,
                other => return Err(synerf::Error::Config(format!("unknown mode {other:?}")).into()),
            };
            config::preset(mode, scene)?
        }
        (None, None) => TrainConfig::default(),
    };
    if let Some(iters) = args.desk {
        cfg = config::desk_scale(&cfg, iters)?;
    }
    let mut overrides = args.overrides.clone();
    if let Some(iters) = args.iters {
        overrides.push(format!("schedule.total_iters={iters}"));
    }
    if let Some(seed) = args.seed {
        overrides.push(format!("seed={seed}"));
    }
    Ok(config::apply_overrides(&cfg, &overrides)?)
}

fn format_log(r: &LogRecord) -> String {
    let held = r.heldout_psnr.map_or("nan".to_string(), |p| format!("{p:.4}"));
    format!(
        "iter={} loss={:.6e} photometric={:.6e} laplacian={:.6e} l1={:.6e} batch_psnr={:.4} heldout_psnr={held} res={} lr_plane={:.6e} lambda3={:.3e}",
        r.iteration, r.loss.total, r.loss.photometric, r.loss.laplacian, r.loss.l1, r.batch_psnr, r.resolution, r.lr_plane, r.lambda3
    )
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let (mut state, cfg) = match &args.resume {
        Some(_) if !args.config.overrides.is_empty() || args.config.iters.is_some() || args.config.seed.is_some() => {
            bail!(synerf::Error::Config("--resume uses the stored config; drop --set, --iters and --seed".into()))
        }
        Some(path) => checkpoint::load::<f32>(path).with_context(|| format!("loading {}", path.display()))?,
        None => {
            let cfg = build_config(&args.config)?;
            (TrainState::new(&cfg)?, cfg)
        }
    };
    let mut data = load_blender(&args.data, Split::Train, args.downscale, cfg.bbox)?;
    if args.sparse {
        data = data.sparse_protocol()?;
    }
    let heldout = if args.data.join("transforms_test.json").exists() {
        Some(load_blender(&args.data, Split::Test, args.downscale, cfg.bbox)?)
    } else {
        None
    };
    fs::create_dir_all(&args.out)?;
    fs::write(args.out.join("config.json"), config::to_json(&cfg)?)?;
    let ck_path = args.out.join("checkpoint.synf");
    let mut metrics = fs::OpenOptions::new()
        .create(true)
        .append(args.resume.is_some())
        .write(true)
        .truncate(args.resume.is_none())
        .open(args.out.join("metrics.txt"))?;
    let mut log_err = None;
    let mut on_log = |r: &LogRecord| {
        let line = format_log(r);
        println!("{line}");
        if let Err(e) = writeln!(metrics, "{line}") {
            log_err.get_or_insert(e);
        }
    };
    let mut on_checkpoint = |s: &TrainState<f32>| checkpoint::save(&ck_path, s, &cfg);
    let mut hooks = TrainHooks {
        on_log: Some(&mut on_log),
        on_checkpoint: Some(&mut on_checkpoint),
        checkpoint_every: args.checkpoint_every,
        dump_dir: Some(args.out.clone()),
        ..Default::default()
    };
    train(&mut state, &data, heldout.as_ref(), &cfg, &mut hooks)?;
    if let Some(e) = log_err {
        return Err(e).context("writing metrics.txt");
    }
    checkpoint::save(&ck_path, &state, &cfg)?;
    eprintln!("wrote {}", ck_path.display());
    Ok(())
}

fn cmd_render(args: &RenderArgs) -> Result<()> {
    let (state, cfg) = checkpoint::load::<f32>(&args.checkpoint)?;
    fs::create_dir_all(&args.out)?;
    let gamma = cfg.gamma_at(state.iteration);
    let opts = RenderOptions {
        n_samples: cfg.eval_samples,
        bbox: cfg.bbox,
        background: cfg.background,
        gamma: gamma.as_deref(),
    };
    let cams = orbit_cameras(args.frames, args.radius, args.size, args.fov, 0.0);
    let dynamic = state.model.mode() == SceneMode::Dynamic4D;
    for (i, cam) in cams.iter().enumerate() {
        let time = dynamic.then(|| {
            args.time
                .unwrap_or_else(|| if args.frames > 1 { i as f64 / (args.frames - 1) as f64 } else { 0.0 })
        });
        let out = render_image(&state.model, cam, time, &opts)?;
        out.image.save_png(&args.out.join(format!("frame_{i:03}.png")))?;
    }
    eprintln!("wrote {} frames to {}", cams.len(), args.out.display());
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let (state, cfg) = checkpoint::load::<f32>(&args.checkpoint)?;
    let data = load_blender(&args.data, parse_split(&args.split)?, args.downscale, cfg.bbox)?;
    let report = evaluate(&state.model, &data, &cfg, state.iteration)?;
    for (i, (p, s)) in report.per_view_psnr.iter().zip(&report.per_view_ssim).enumerate() {
        println!("view={i} psnr={p:.4} ssim={s:.4}");
    }
    println!(
        "mean_psnr={:.4} psnr_variance={:.4} mean_ssim={:.4}",
        report.mean_psnr, report.psnr_variance, report.mean_ssim
    );
    if let Some(dir) = &args.out {
        fs::create_dir_all(dir)?;
        let views = synerf::optim::render_views(&state.model, &data, &cfg, state.iteration, data.len())?;
        for (i, img) in views.iter().enumerate() {
            img.save_png(&dir.join(format!("view_{i:03}.png")))?;
        }
    }
    Ok(())
}

fn cmd_regress2d(args: &Regress2dArgs) -> Result<()> {
    let mut overrides = args.overrides.clone();
    if let Some(seed) = args.seed {
        overrides.push(format!("seed={seed}"));
    }
    let cfg: Regression2DConfig = config::override_fields(&Regression2DConfig::default(), &overrides)?;
    cfg.validate()?;
    let target = match &args.image {
        Some(path) => Image::load_png(path, [1.0; 3])?,
        None => plaid(cfg.plane_res),
    };
    let (w, h) = (target.width, target.height);
    let mask = bernoulli_mask(w * h, cfg.keep_fraction, cfg.seed);
    let (model, log) = fit2d::<f32>(&cfg, &target, &mask)?;
    let full = render_partial(&model, w, h, Engagement::Full)?;
    let coord = render_partial(&model, w, h, Engagement::CoordOnly)?;
    fs::create_dir_all(&args.out)?;
    target.save_png(&args.out.join("target.png"))?;
    full.save_png(&args.out.join("fitted.png"))?;
    coord.save_png(&args.out.join("coord_only.png"))?;
    let report = serde_json::json!({
        "visible_psnr": masked_psnr(&full, &target, &mask)?,
        "heldout_psnr": heldout_psnr(&full, &target, &mask)?,
        "spectrum_full": avg_magnitude_spectrum(&full)?,
        "spectrum_coord_only": avg_magnitude_spectrum(&coord)?,
        "spectrum_target": avg_magnitude_spectrum(&target)?,
        "window": log.window,
        "losses": log.losses,
        "config": cfg,
    });
    let text = serde_json::to_string_pretty(&report)?;
    fs::write(args.out.join("report.json"), &text)?;
    println!("{text}");
    Ok(())
}

fn cmd_spectrum(images: &[PathBuf]) -> Result<()> {
    if images.is_empty() {
        bail!(synerf::Error::Config("no images given".into()));
    }
    for path in images {
        let img = Image::load_png(path, [1.0; 3]).with_context(|| format!("loading {}", path.display()))?;
        println!("{} {:.6}", path.display(), avg_magnitude_spectrum(&img)?);
    }
    Ok(())
}

fn cmd_make_scene(args: &MakeSceneArgs) -> Result<()> {
    let scene = AnalyticScene::preset(&args.scene).map_err(|e| synerf::Error::Config(e.to_string()))?;
    if args.views == 0 {
        bail!(synerf::Error::Config("--views must be >= 1".into()));
    }
    let cams = orbit_cameras(args.views, args.radius, args.size, args.fov, args.phase);
    let times = scene.is_dynamic().then(|| uniform_times(args.views));
    let data: SceneDataset = synthesize(&scene, cams, times, args.samples, parse_split(&args.split)?)?;
    write_blender(&args.out, &data)?;
    eprintln!("wrote {} views to {}", data.len(), args.out.display());
    Ok(())
}

fn cmd_gradcheck(args: &GradcheckArgs) -> Result<()> {
    let mode = if args.dynamic { SceneMode::Dynamic4D } else { SceneMode::Static3D };
    let cfg = ModelConfig {
        mode,
        channels: 2,
        initial_res: 4,
        time_res: 3,
        hidden: 8,
        color_hidden: 8,
        grid_init_scale: 0.5,
        ..Default::default()
    };
    let model = FieldModel::<f64>::new(cfg, args.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let cam = orbit_cameras(1, 2.5, 2, 0.69, rng.random_range(0.0..std::f64::consts::TAU)).remove(0);
    let rays = image_rays(&cam)?;
    let n = rays.len();
    let times = args.dynamic.then(|| (0..n).map(|_| rng.random_range(0.0..1.0)).collect());
    let samples = RaySampleBatch::build(rays, times, 5, 1.0, 4.0, &Aabb::cube(1.0), true, &mut rng);
    let targets: Vec<f64> = (0..3 * n).map(|_| rng.random_range(0.0..1.0)).collect();
    let sup = Supervision {
        samples: &samples,
        targets: &targets,
        background: [1.0; 3],
        gamma: None,
        weights: LossWeights {
            lambda1: 0.05,
            lambda2: 1.5,
            lambda3: 0.01,
        },
    };
    let opts = GradCheckOptions {
        tolerance: args.tolerance,
        ..Default::default()
    };
    let report = check_gradients(&model, &sup, &opts)?;
    for g in &report.groups {
        println!(
            "{} {} entries={} max_rel_err={:.3e}",
            if g.passed { "ok  " } else { "FAIL" },
            g.name,
            g.entries,
            g.max_rel_err
        );
    }
    println!("max_rel_err={:.3e} tolerance={:.1e}", report.max_rel_err(), report.tolerance);
    if !report.passed {
        bail!(NumericFailure(format!("gradient check failed for {:?}", report.failing())));
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<NumericFailure>() {
            return EXIT_NUMERIC;
        }
        if let Some(e) = cause.downcast_ref::<synerf::Error>() {
            return match e {
                synerf::Error::Config(_) => EXIT_CONFIG,
                synerf::Error::NonFinite { .. } => EXIT_NUMERIC,
                _ => 1,
            };
        }
    }
    1
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(a) => cmd_train(&a),
        Command::Render(a) => cmd_render(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Regress2d(a) => cmd_regress2d(&a),
        Command::Spectrum { images } => cmd_spectrum(&images),
        Command::MakeScene(a) => cmd_make_scene(&a),
        Command::Gradcheck(a) => cmd_gradcheck(&a),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
