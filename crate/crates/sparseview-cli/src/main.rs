//! Command-line pipeline: synthesize toy scenes, generate pseudo-view
//! caches, train the two-stage radiance field, render checkpoints, and
//! evaluate metrics with SVG plots.
//!
//! Exit codes: 0 success, 1 usage/config, 2 data, 3 numeric failure.

mod config;
mod plot;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sparseview::augment::{
    generate_pseudo_views, load_pseudo_views, save_pseudo_views, PseudoView, SaliencyProvider,
    SourceView,
};
use sparseview::dataio::{
    self, generate_toy_scene, load_scene, psnr, save_scene, ssim, write_pfm, MetricReport, Scene,
    Split, ToySceneSpec, ViewMetrics,
};
use sparseview::field::{load_field, Mlp};
use sparseview::renderer::{render_image, RenderOptions};
use sparseview::trainer::{
    load_train_state, LogRow, TrainConfig, TrainState, Trainer, METRICS_HEADER,
};
use sparseview::{Error, Result};

use config::{
    build_augment_settings, build_field_config, build_train_config, AugmentSection, FieldSection,
    FileConfig, TrainSection,
};

#[derive(Parser)]
#[command(
    name = "sparseview",
    version,
    about = "Few-shot radiance fields: pseudo-view augmentation, two-stage training, evaluation",
    long_about = "Few-shot novel-view synthesis. A scene with a handful of posed images is \
expanded into depth-warped pseudo-views, a small radiance field is trained in two stages \
(photometric initialization on real + pseudo views, then fine-tuning with embedding-consistency \
and ray-weight regularizers on real views only), and checkpoints are rendered and scored.\n\n\
Every [train]/[field]/[augment] config-file key has a same-named flag; flags override the file. \
Unknown config keys are rejected."
)]
struct Cli {
    /// Worker threads (default: SPARSEVIEW_THREADS, else all cores). Results
    /// do not depend on this value.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate an analytic toy scene (images, exact depth, masks).
    Synth(SynthArgs),
    /// Warp input views over a pose grid into a pseudo-view cache.
    Augment(AugmentArgs),
    /// Two-stage training; writes checkpoints and a metrics CSV.
    Train(TrainArgs),
    /// Render RGB, depth (PFM), and accumulation images from a checkpoint.
    Render(RenderArgs),
    /// Per-view and mean PSNR/SSIM on a split, with optional SVG plots.
    Eval(EvalArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory for the scene.
    #[arg(long)]
    out: PathBuf,
    /// Training views to generate.
    #[arg(long, default_value_t = 4)]
    views: usize,
    /// Additional held-out test views.
    #[arg(long, default_value_t = 2)]
    test_views: usize,
    /// Square image resolution in pixels.
    #[arg(long, default_value_t = 64)]
    resolution: usize,
    #[arg(long, default_value_t = 3)]
    seed: u64,
    /// Scene preset: sphere-box | sphere.
    #[arg(long, default_value = "sphere-box")]
    preset: String,
}

#[derive(Args)]
struct AugmentArgs {
    /// Scene manifest (.toml native or transforms .json).
    #[arg(long)]
    scene: PathBuf,
    /// Cache output directory.
    #[arg(long)]
    out: PathBuf,
    /// Rotation range in degrees (config key: augment.alpha).
    #[arg(long)]
    alpha: Option<f64>,
    /// Rotation interval in degrees (augment.step).
    #[arg(long)]
    step: Option<f64>,
    /// Depth tolerance band for scatter conflicts (augment.depth_band).
    #[arg(long)]
    depth_band: Option<f64>,
    /// Minimum scattered weight for a valid pixel (augment.min_weight).
    #[arg(long)]
    min_weight: Option<f64>,
    /// Saliency rule: finite-depth | threshold:<d> | percentile:<p> | masks
    /// (augment.saliency).
    #[arg(long)]
    saliency: Option<String>,
    /// Optional TOML config file.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    scene: PathBuf,
    /// Output directory (checkpoints, metrics.csv, resolved config echo).
    #[arg(long)]
    out: PathBuf,
    /// Optional TOML config file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Pseudo-view cache directory from `augment`.
    #[arg(long, conflicts_with = "augment_inline")]
    augment_cache: Option<PathBuf>,
    /// Generate pseudo-views in memory instead of reading a cache.
    #[arg(long)]
    augment_inline: bool,
    /// Resume from a `.state` checkpoint (with its `.field` alongside).
    #[arg(long)]
    resume: Option<PathBuf>,

    // [train] section mirrors.
    #[arg(long)]
    init_iters: Option<usize>,
    #[arg(long)]
    finetune_iters: Option<usize>,
    #[arg(long)]
    rays_per_batch: Option<usize>,
    #[arg(long)]
    samples_per_ray: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    decay_floor: Option<f64>,
    #[arg(long)]
    lambda_msc: Option<f64>,
    #[arg(long)]
    lambda_ip: Option<f64>,
    #[arg(long)]
    bg_weight: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    msc_interval: Option<usize>,
    #[arg(long)]
    msc_render_size: Option<usize>,
    #[arg(long)]
    checkpoint_interval: Option<usize>,
    #[arg(long)]
    real_fraction: Option<f64>,
    #[arg(long)]
    jitter: Option<bool>,
    #[arg(long)]
    probe_view: Option<usize>,

    // [field] section mirrors.
    #[arg(long)]
    hidden_layers: Option<usize>,
    #[arg(long)]
    hidden_width: Option<usize>,
    #[arg(long)]
    skip_layer: Option<usize>,
    #[arg(long)]
    color_width: Option<usize>,
    #[arg(long)]
    position_frequencies: Option<usize>,
    #[arg(long)]
    direction_frequencies: Option<usize>,
    #[arg(long)]
    include_input: Option<bool>,

    // [augment] section mirrors (used with --augment-inline).
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    step: Option<f64>,
    #[arg(long)]
    depth_band: Option<f64>,
    #[arg(long)]
    min_weight: Option<f64>,
    #[arg(long)]
    saliency: Option<String>,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Which poses to render: train | test | all.
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long)]
    samples_per_ray: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Which frames to score: train | test | all.
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long)]
    samples_per_ray: Option<usize>,
    /// Also write SVG plots (per-view metrics; training curve when a
    /// metrics.csv sits next to the checkpoint or --train-log is given).
    #[arg(long)]
    plots: bool,
    /// Training metrics CSV for the iteration plot.
    #[arg(long)]
    train_log: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version are successful exits.
            if e.kind() == clap::error::ErrorKind::DisplayHelp
                || e.kind() == clap::error::ErrorKind::DisplayVersion
            {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            eprint!("{e}");
            return ExitCode::from(1);
        }
    };

    let threads = cli
        .threads
        .or_else(|| {
            std::env::var("SPARSEVIEW_THREADS")
                .ok()
                .and_then(|v| v.parse().ok())
        })
        .unwrap_or(0);
    if threads > 0 {
        // Results are thread-count independent; this only sizes the pool.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global();
    }

    let result = match cli.command {
        Command::Synth(args) => cmd_synth(args),
        Command::Augment(args) => cmd_augment(args),
        Command::Train(args) => cmd_train(args),
        Command::Render(args) => cmd_render(args),
        Command::Eval(args) => cmd_eval(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 1,
        Error::Contract(_) | Error::Domain(_) | Error::Data(_) | Error::Io { .. } => 2,
        Error::Numeric(_) => 3,
    }
}

fn parse_split(s: &str) -> Result<Option<Split>> {
    match s {
        "train" => Ok(Some(Split::Train)),
        "test" => Ok(Some(Split::Test)),
        "all" => Ok(None),
        other => Err(Error::Config(format!(
            "unknown split '{other}' (train | test | all)"
        ))),
    }
}

fn frames_for<'s>(scene: &'s Scene, split: Option<Split>) -> Vec<(usize, &'s dataio::Frame)> {
    scene
        .frames
        .iter()
        .enumerate()
        .filter(|(_, f)| split.is_none_or(|s| f.split == s))
        .collect()
}

fn cmd_synth(args: SynthArgs) -> Result<()> {
    let spec = match args.preset.as_str() {
        "sphere-box" => ToySceneSpec::sphere_box(),
        "sphere" => ToySceneSpec::single_sphere(0.8),
        other => {
            return Err(Error::Config(format!(
                "unknown preset '{other}' (sphere-box | sphere)"
            )))
        }
    };
    let total = args.views + args.test_views;
    let mut scene = generate_toy_scene(&spec, total, args.resolution, args.seed)?;
    for frame in scene.frames.iter_mut().skip(args.views) {
        frame.split = Split::Test;
    }
    let manifest = save_scene(&args.out, &scene)?;
    println!(
        "wrote {} ({} train + {} test views at {}x{})",
        manifest.display(),
        args.views,
        args.test_views,
        args.resolution,
        args.resolution
    );
    Ok(())
}

fn augment_sources(scene: &Scene) -> Result<Vec<SourceView>> {
    let mut sources = Vec::new();
    for frame in scene.frames_of(Split::Train) {
        let depth = frame.depth.clone().ok_or_else(|| {
            Error::Data(format!(
                "frame '{}' has no depth map; augmentation needs provided or rendered depth",
                frame.name
            ))
        })?;
        sources.push(SourceView {
            image: frame.image.clone(),
            depth,
            pose: frame.pose,
        });
    }
    if sources.is_empty() {
        return Err(Error::Data("scene has no training frames".into()));
    }
    Ok(sources)
}

fn resolve_saliency(provider: SaliencyProvider, scene: &Scene) -> Result<SaliencyProvider> {
    // The `masks` rule pulls per-frame mask files from the scene.
    if let SaliencyProvider::External(masks) = &provider {
        if masks.is_empty() {
            let collected: Result<Vec<_>> = scene
                .frames_of(Split::Train)
                .iter()
                .map(|f| {
                    f.mask.clone().ok_or_else(|| {
                        Error::Data(format!("frame '{}' has no mask file", f.name))
                    })
                })
                .collect();
            return Ok(SaliencyProvider::External(collected?));
        }
    }
    Ok(provider)
}

fn cmd_augment(args: AugmentArgs) -> Result<()> {
    let file = match &args.config {
        Some(path) => FileConfig::load(path)?,
        None => FileConfig::default(),
    };
    let flags = AugmentSection {
        alpha: args.alpha,
        step: args.step,
        depth_band: args.depth_band,
        min_weight: args.min_weight,
        saliency: args.saliency.clone(),
    };
    let settings = build_augment_settings(&file.augment, &flags)?;
    let scene = load_scene(&args.scene)?;
    let sources = augment_sources(&scene)?;
    let saliency = resolve_saliency(settings.saliency, &scene)?;
    let (mut views, stats) = generate_pseudo_views(
        &sources,
        &scene.camera,
        settings.alpha,
        settings.step,
        &saliency,
        &settings.policy,
    )?;
    // Quantize before writing so the cache is exactly what training reads.
    for v in &mut views {
        v.image.quantize_u8();
    }
    save_pseudo_views(&args.out, &views, settings.alpha, settings.step)?;
    for (i, hf) in stats.per_view_hole_fraction.iter().enumerate() {
        println!("view {i:06}: hole fraction {hf:.4}");
    }
    println!(
        "wrote {} pseudo-views to {} (mean hole fraction {:.4})",
        stats.views,
        args.out.display(),
        stats.mean_hole_fraction
    );
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let file = match &args.config {
        Some(path) => FileConfig::load(path)?,
        None => FileConfig::default(),
    };
    let train_flags = TrainSection {
        init_iters: args.init_iters,
        finetune_iters: args.finetune_iters,
        rays_per_batch: args.rays_per_batch,
        samples_per_ray: args.samples_per_ray,
        learning_rate: args.learning_rate,
        decay_floor: args.decay_floor,
        lambda_msc: args.lambda_msc,
        lambda_ip: args.lambda_ip,
        bg_weight: args.bg_weight,
        seed: args.seed,
        msc_interval: args.msc_interval,
        msc_render_size: args.msc_render_size,
        checkpoint_interval: args.checkpoint_interval,
        real_fraction: args.real_fraction,
        jitter: args.jitter,
        probe_view: args.probe_view,
    };
    let field_flags = FieldSection {
        hidden_layers: args.hidden_layers,
        hidden_width: args.hidden_width,
        skip_layer: args.skip_layer,
        color_width: args.color_width,
        position_frequencies: args.position_frequencies,
        direction_frequencies: args.direction_frequencies,
        include_input: args.include_input,
    };
    let augment_flags = AugmentSection {
        alpha: args.alpha,
        step: args.step,
        depth_band: args.depth_band,
        min_weight: args.min_weight,
        saliency: args.saliency.clone(),
    };
    let cfg = build_train_config(&file.train, &train_flags);
    cfg.validate()?;
    let field_cfg = build_field_config(&file.field, &field_flags);

    let scene = load_scene(&args.scene)?;
    let pseudo: Vec<PseudoView> = if let Some(cache) = &args.augment_cache {
        load_pseudo_views(cache)?
    } else if args.augment_inline {
        let settings = build_augment_settings(&file.augment, &augment_flags)?;
        let sources = augment_sources(&scene)?;
        let saliency = resolve_saliency(settings.saliency, &scene)?;
        let (views, stats) = generate_pseudo_views(
            &sources,
            &scene.camera,
            settings.alpha,
            settings.step,
            &saliency,
            &settings.policy,
        )?;
        eprintln!(
            "generated {} pseudo-views inline (mean hole fraction {:.4})",
            stats.views, stats.mean_hole_fraction
        );
        views
    } else if cfg.init_iterations > 0 {
        return Err(Error::Config(
            "initialization needs pseudo-views: pass --augment-cache DIR or --augment-inline"
                .into(),
        ));
    } else {
        Vec::new()
    };

    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    echo_config(&args.out, &cfg, &field_cfg)?;

    let (mut field, mut state) = match &args.resume {
        Some(state_path) => {
            let field_path = state_path.with_extension("field");
            let field = load_field(&field_path)?;
            let state = load_train_state(state_path, &field)?;
            eprintln!(
                "resuming at global iteration {} ({})",
                state.global_iteration,
                state.stage.as_str()
            );
            (field, state)
        }
        None => {
            let field = Mlp::<f32>::init(field_cfg, cfg.seed)?;
            let state = TrainState::fresh(&field, cfg.seed);
            (field, state)
        }
    };

    let mut trainer = Trainer::new(cfg, &scene, &pseudo)?;
    let report = trainer.train(&mut field, &mut state, &args.out, None)?;
    println!(
        "trained to iteration {}; final checkpoint {}",
        state.global_iteration,
        report.final_checkpoint.display()
    );
    if let Some(best) = state.best_psnr {
        println!("best probe psnr: {best:.2} dB");
    }
    Ok(())
}

/// Record the resolved configuration next to the run outputs.
fn echo_config(
    out: &Path,
    cfg: &TrainConfig,
    field_cfg: &sparseview::field::FieldConfig,
) -> Result<()> {
    let mut text = String::from("# resolved configuration\n[train]\n");
    text.push_str(&format!("init_iters = {}\n", cfg.init_iterations));
    text.push_str(&format!("finetune_iters = {}\n", cfg.finetune_iterations));
    text.push_str(&format!("rays_per_batch = {}\n", cfg.rays_per_batch));
    text.push_str(&format!("samples_per_ray = {}\n", cfg.samples_per_ray));
    text.push_str(&format!("learning_rate = {}\n", cfg.learning_rate));
    text.push_str(&format!("decay_floor = {}\n", cfg.decay_floor));
    text.push_str(&format!("lambda_msc = {}\n", cfg.lambda_msc));
    text.push_str(&format!("lambda_ip = {}\n", cfg.lambda_ip));
    text.push_str(&format!("bg_weight = {}\n", cfg.bg_weight));
    text.push_str(&format!("seed = {}\n", cfg.seed));
    text.push_str(&format!("msc_interval = {}\n", cfg.msc_interval));
    text.push_str(&format!("msc_render_size = {}\n", cfg.msc_render_size));
    text.push_str(&format!(
        "checkpoint_interval = {}\n",
        cfg.checkpoint_interval
    ));
    if let Some(f) = cfg.real_fraction {
        text.push_str(&format!("real_fraction = {f}\n"));
    }
    text.push_str(&format!("jitter = {}\n", cfg.jitter));
    if let Some(p) = cfg.probe_view {
        text.push_str(&format!("probe_view = {p}\n"));
    }
    text.push_str("\n[field]\n");
    text.push_str(&format!("hidden_layers = {}\n", field_cfg.hidden_layers));
    text.push_str(&format!("hidden_width = {}\n", field_cfg.hidden_width));
    if let Some(s) = field_cfg.skip_layer {
        text.push_str(&format!("skip_layer = {s}\n"));
    }
    text.push_str(&format!("color_width = {}\n", field_cfg.color_width));
    text.push_str(&format!(
        "position_frequencies = {}\n",
        field_cfg.encoding.position_frequencies
    ));
    text.push_str(&format!(
        "direction_frequencies = {}\n",
        field_cfg.encoding.direction_frequencies
    ));
    text.push_str(&format!(
        "include_input = {}\n",
        field_cfg.encoding.include_input
    ));
    let path = out.join("config.toml");
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

fn cmd_render(args: RenderArgs) -> Result<()> {
    let field = load_field(&args.checkpoint)?;
    let scene = load_scene(&args.scene)?;
    let split = parse_split(&args.split)?;
    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    let opts = RenderOptions {
        samples_per_ray: args.samples_per_ray.unwrap_or(64),
        near: scene.near,
        far: scene.far,
        jitter: None,
        chunk_rays: 4096,
        background: scene.background,
    };
    let frames = frames_for(&scene, split);
    if frames.is_empty() {
        return Err(Error::Data(format!("no frames in split '{}'", args.split)));
    }
    for (_, frame) in &frames {
        let rendering = render_image(&field, &scene.camera, &frame.pose, &opts)?;
        dataio::write_image(
            &args.out.join(format!("{}_rgb.png", frame.name)),
            &rendering.rgb,
        )?;
        write_pfm(
            &args.out.join(format!("{}_depth.pfm", frame.name)),
            &rendering.depth,
        )?;
        let mut acc = sparseview::raster::Image::<f32>::new(scene.camera.width, scene.camera.height);
        for (i, &a) in rendering.accumulation.iter().enumerate() {
            let (x, y) = (i % scene.camera.width, i / scene.camera.width);
            acc.set(x, y, [a, a, a]);
        }
        dataio::write_image(&args.out.join(format!("{}_acc.png", frame.name)), &acc)?;
        println!("rendered {}", frame.name);
    }
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let field = load_field(&args.checkpoint)?;
    let scene = load_scene(&args.scene)?;
    let split = parse_split(&args.split)?;
    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    let samples = args.samples_per_ray.unwrap_or(64);
    let opts = RenderOptions {
        samples_per_ray: samples,
        near: scene.near,
        far: scene.far,
        jitter: None,
        chunk_rays: 4096,
        background: scene.background,
    };
    let frames = frames_for(&scene, split);
    if frames.is_empty() {
        return Err(Error::Data(format!("split '{}' is empty", args.split)));
    }
    let mut per_view = Vec::new();
    for (_, frame) in &frames {
        let rendering = render_image(&field, &scene.camera, &frame.pose, &opts)?;
        per_view.push(ViewMetrics {
            name: frame.name.clone(),
            psnr: psnr(&rendering.rgb, &frame.image, 1.0)?,
            ssim: ssim(&rendering.rgb, &frame.image)?,
        });
    }
    let report = MetricReport {
        per_view,
        config_echo: vec![
            ("checkpoint".into(), args.checkpoint.display().to_string()),
            ("scene".into(), args.scene.display().to_string()),
            ("split".into(), args.split.clone()),
            ("samples_per_ray".into(), samples.to_string()),
        ],
    };
    let csv_path = args.out.join("eval.csv");
    report.write_csv(&csv_path)?;
    println!(
        "mean psnr {:.3} dB, mean ssim {:.4} over {} views -> {}",
        report.mean_psnr(),
        report.mean_ssim(),
        report.per_view.len(),
        csv_path.display()
    );

    if args.plots {
        let psnr_points: Vec<(f64, f64)> = report
            .per_view
            .iter()
            .enumerate()
            .map(|(i, v)| (i as f64, v.psnr))
            .collect();
        let ssim_points: Vec<(f64, f64)> = report
            .per_view
            .iter()
            .enumerate()
            .map(|(i, v)| (i as f64, v.ssim))
            .collect();
        let svg = plot::line_plot(
            "per-view metrics",
            "view index",
            "psnr (dB) / ssim",
            &[
                plot::Series {
                    label: "psnr",
                    points: psnr_points,
                },
                plot::Series {
                    label: "ssim",
                    points: ssim_points,
                },
            ],
        );
        let path = args.out.join("eval_views.svg");
        std::fs::write(&path, svg).map_err(|e| Error::io(&path, e))?;
        println!("wrote {}", path.display());

        // Training curve, when a metrics log is available.
        let train_log = args.train_log.clone().or_else(|| {
            let candidate = args.checkpoint.parent()?.join("metrics.csv");
            candidate.exists().then_some(candidate)
        });
        if let Some(log_path) = train_log {
            let text =
                std::fs::read_to_string(&log_path).map_err(|e| Error::io(&log_path, e))?;
            let rows: Vec<LogRow> = text
                .lines()
                .filter(|l| !l.starts_with(METRICS_HEADER))
                .filter_map(LogRow::parse_csv_line)
                .collect();
            let total: Vec<(f64, f64)> = rows
                .iter()
                .map(|r| (r.iter as f64, r.breakdown.total))
                .collect();
            let probe: Vec<(f64, f64)> = rows
                .iter()
                .filter_map(|r| r.psnr_probe.map(|p| (r.iter as f64, p)))
                .collect();
            let svg = plot::line_plot(
                "training metrics",
                "iteration",
                "loss / psnr (dB)",
                &[
                    plot::Series {
                        label: "total_loss",
                        points: total,
                    },
                    plot::Series {
                        label: "probe_psnr",
                        points: probe,
                    },
                ],
            );
            let path = args.out.join("train_curve.svg");
            std::fs::write(&path, svg).map_err(|e| Error::io(&path, e))?;
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}
