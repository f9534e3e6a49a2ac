use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use mvpgs_core::fixtures::{generate_scene_with, FixtureOptions, Preset};
use mvpgs_core::io::{
    decode_checkpoint, encode_checkpoint, encode_pgm, encode_ply, mask_to_bytes, read_file, read_image, write_file,
    write_image, write_json, CameraRecord,
};
use mvpgs_core::losses::LossRecord;
use mvpgs_core::metrics::evaluate;
use mvpgs_core::mvs::{consistency_masks, fuse_point_cloud};
use mvpgs_core::pipeline::{evaluate_views, prepare, render_views, run_pipeline_with};
use mvpgs_core::scene::{view_name, DepthNeeds, ImageFormat, Need, SceneDir};
use mvpgs_core::train::{train_with_callback, RunManifest, TrainInputs};
use mvpgs_core::{GaussianSet, PipelineConfig, TestView, TrainError, View};

const EXIT_VALIDATION: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

/// Few-view Gaussian splatting with MVS priors.
///
/// Set MVPGS_THREADS to cap worker threads (0 runs single-threaded).
#[derive(Parser)]
#[command(version, about)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a synthetic scene directory with exact depths.
    Fixture(FixtureArgs),
    /// Geometric consistency masks for the training views (masks/NNN.pgm).
    Filter(StageArgs),
    /// Fused point cloud (points.ply) and initial Gaussians (init.ckpt).
    Fuse(StageArgs),
    /// Forward warps of training views into sampled unseen poses.
    Warp(StageArgs),
    /// Optimize Gaussians on the training split.
    Train(StageArgs),
    /// Render a checkpoint at the cameras of a split.
    Render(RenderArgs),
    /// PSNR/SSIM of rendered test views against the scene images.
    Eval(EvalArgs),
    /// filter, fuse, warp, train, render and eval in one run.
    Pipeline(StageArgs),
}

#[derive(Args)]
struct FixtureArgs {
    #[arg(long, default_value = "three_planes")]
    preset: Preset,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = Format::Png)]
    format: Format,
    #[arg(long, default_value_t = 48)]
    width: usize,
    #[arg(long, default_value_t = 48)]
    height: usize,
    /// Corrupt the MVS depth of this view.
    #[arg(long)]
    corrupt_view: Option<usize>,
    #[arg(long, default_value_t = 0.2)]
    corrupt_fraction: f64,
    /// Corrupted depths are scaled by 1 + m or 1 / (1 + m).
    #[arg(long, default_value_t = 1.0)]
    corrupt_magnitude: f64,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Png,
    Ppm,
}

#[derive(Args)]
struct StageArgs {
    #[arg(long)]
    scene: PathBuf,
    /// Pipeline config JSON; omitted fields take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    deterministic: bool,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitSel {
    Train,
    Test,
    All,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitSel::Test)]
    split: SplitSel,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    scene: PathBuf,
    /// Directory holding NNN.png (or .ppm) for every test view.
    #[arg(long)]
    renders: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = configure_threads() {
        eprintln!("error: {e:#}");
        return ExitCode::from(EXIT_VALIDATION);
    }
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    let numeric = e
        .chain()
        .any(|c| matches!(c.downcast_ref::<TrainError>(), Some(TrainError::NonFinite { .. })));
    if numeric {
        EXIT_NUMERIC
    } else {
        EXIT_VALIDATION
    }
}

fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var("MVPGS_THREADS") else {
        return Ok(());
    };
    let n: usize = v.trim().parse().with_context(|| format!("MVPGS_THREADS={v:?} is not a thread count"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n.max(1))
        .build_global()
        .context("configuring the thread pool")?;
    Ok(())
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Fixture(a) => cmd_fixture(a),
        Cmd::Filter(a) => cmd_filter(a),
        Cmd::Fuse(a) => cmd_fuse(a),
        Cmd::Warp(a) => cmd_warp(a),
        Cmd::Train(a) => cmd_train(a),
        Cmd::Render(a) => cmd_render(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Pipeline(a) => cmd_pipeline(a),
    }
}

fn load_config(path: Option<&Path>) -> Result<PipelineConfig> {
    let cfg: PipelineConfig = match path {
        Some(p) => {
            let bytes = read_file(p)?;
            serde_json::from_slice(&bytes).with_context(|| format!("parsing config {}", p.display()))?
        }
        None => PipelineConfig::default(),
    };
    Ok(cfg)
}

fn stage_config(a: &StageArgs) -> Result<PipelineConfig> {
    let mut cfg = load_config(a.config.as_deref())?;
    if a.deterministic {
        cfg.train.deterministic = true;
    }
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    cfg.train.validate()?;
    Ok(cfg)
}

fn train_needs() -> DepthNeeds {
    DepthNeeds {
        mvs: Need::Required,
        mono: Need::Optional,
        gt: Need::Skip,
    }
}

fn load_train(scene: &SceneDir, stage: &str) -> Result<(Vec<usize>, Vec<View>)> {
    let split = scene.split().with_context(|| format!("{stage} stage"))?;
    let views = scene
        .load_views(&split.train, train_needs())
        .with_context(|| format!("{stage} stage: loading training views"))?;
    Ok((split.train, views))
}

fn load_tests(scene: &SceneDir, ids: &[usize]) -> Result<Vec<TestView>> {
    let cams = scene.cameras()?;
    ids.iter()
        .map(|&i| {
            let rec = cams.get(i).with_context(|| format!("view {i} has no camera"))?;
            let camera = mvpgs_core::Camera {
                intrinsics: rec.intrinsics().with_context(|| format!("view {i}"))?,
                pose: rec.pose().with_context(|| format!("view {i}"))?,
            };
            let image = match scene.image_path(i) {
                Ok(p) => Some(read_image(&p)?),
                Err(_) => None,
            };
            Ok(TestView { id: i, camera, image })
        })
        .collect()
}

fn cmd_fixture(a: FixtureArgs) -> Result<()> {
    let opts = FixtureOptions {
        width: a.width,
        height: a.height,
        ..FixtureOptions::default()
    };
    if opts.width == 0 || opts.height == 0 {
        bail!("fixture size must be positive");
    }
    let mut fx = generate_scene_with(a.preset, a.seed, &opts);
    if let Some(v) = a.corrupt_view {
        if v >= fx.views.len() {
            bail!("corrupt view {v} out of range ({} views)", fx.views.len());
        }
        if !(0.0..=1.0).contains(&a.corrupt_fraction) || !(a.corrupt_magnitude >= 0.0) {
            bail!("corrupt fraction must lie in [0, 1] and magnitude be non-negative");
        }
        fx.corrupt_view(v, a.corrupt_fraction, a.corrupt_magnitude, a.seed);
    }
    let format = match a.format {
        Format::Png => ImageFormat::Png,
        Format::Ppm => ImageFormat::Ppm,
    };
    SceneDir::new(&a.out).write_fixture(&fx, format)?;
    println!("{} scene, {} views, hash {}", a.preset.name(), fx.views.len(), fx.hash());
    Ok(())
}

fn cmd_filter(a: StageArgs) -> Result<()> {
    let cfg = stage_config(&a)?;
    let scene = SceneDir::new(&a.scene);
    let (ids, views) = load_train(&scene, "filter")?;
    let masks = consistency_masks(&views, &cfg.consistency_for(views.len())).context("filter stage")?;
    for ((&i, v), m) in ids.iter().zip(&views).zip(&masks) {
        let (w, h) = v.intrinsics.dims();
        let path = a.out.join("masks").join(format!("{}.pgm", view_name(i)));
        write_file(&path, &encode_pgm(w, h, &mask_to_bytes(m)))?;
        let kept = m.iter().filter(|&&b| b).count();
        println!("view {i}: kept {kept} of {} pixels", m.len());
    }
    Ok(())
}

fn cmd_fuse(a: StageArgs) -> Result<()> {
    let cfg = stage_config(&a)?;
    let scene = SceneDir::new(&a.scene);
    let (_, views) = load_train(&scene, "fuse")?;
    let cc = cfg.consistency_for(views.len());
    let masks = consistency_masks(&views, &cc).context("filter stage")?;
    let fusion = fuse_point_cloud(&views, &masks, &cc, cfg.train.seed).context("fusion stage")?;
    let init = mvpgs_core::mvs::init_gaussians(&fusion.cloud, cfg.train.sh_degree);
    write_file(&a.out.join("points.ply"), &encode_ply(&fusion.cloud))?;
    write_file(&a.out.join("init.ckpt"), &encode_checkpoint(&init))?;
    println!("{} fused points", fusion.cloud.len());
    Ok(())
}

fn cmd_warp(a: StageArgs) -> Result<()> {
    let cfg = stage_config(&a)?;
    let scene = SceneDir::new(&a.scene);
    let (ids, views) = load_train(&scene, "warp")?;
    let prepared = prepare(&views, &cfg)?;
    let cache = &prepared.warp_cache;
    let dir = a.out.join("warps");
    for e in &cache.entries {
        let Some(r) = &e.result else { continue };
        let stem = format!("u{:03}_s{}", e.unseen, view_name(ids[e.src]));
        write_image(&dir.join(format!("{stem}.png")), &r.image)?;
        let (w, h) = r.image.dims();
        write_file(&dir.join(format!("{stem}.pgm")), &encode_pgm(w, h, &mask_to_bytes(&r.coverage)))?;
    }
    let poses: Vec<CameraRecord> = cache
        .poses
        .iter()
        .map(|p| CameraRecord::from_camera(&cache.intrinsics, p))
        .collect();
    write_json(&a.out.join("unseen_cameras.json"), &poses)?;
    println!("{} of {} warps usable", cache.usable().len(), cache.entries.len());
    Ok(())
}

const TELEMETRY_HEADER: &str = "iter,kind,photo,cs,mono,fwd,total";

fn write_telemetry(path: &Path, rows: &[LossRecord]) -> Result<()> {
    let mut s = String::with_capacity(rows.len() * 48);
    s.push_str(TELEMETRY_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.csv_line());
        s.push('\n');
    }
    write_file(path, s.as_bytes())?;
    Ok(())
}

fn git_describe() -> String {
    std::process::Command::new("git")
        .args(["describe", "--always", "--dirty", "--tags"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| "unknown".to_string())
}

fn checkpoint_writer(out: &Path) -> impl FnMut(usize, &GaussianSet) + '_ {
    move |it, g| {
        let p = out.join("checkpoints").join(format!("iter_{it:06}.ckpt"));
        if let Err(e) = write_file(&p, &encode_checkpoint(g)) {
            eprintln!("warning: {e}");
        }
    }
}

fn write_manifest(out: &Path, cfg: &PipelineConfig, metrics: serde_json::Value) -> Result<()> {
    let manifest = RunManifest {
        seed: cfg.train.seed,
        config_hash: cfg.train.hash(),
        git_describe: git_describe(),
        final_metrics: metrics,
    };
    write_json(&out.join("run.json"), &manifest)?;
    write_json(&out.join("config.json"), cfg)?;
    Ok(())
}

fn write_renders(dir: &Path, tests: &[TestView], images: &[mvpgs_core::Image]) -> Result<()> {
    for (t, img) in tests.iter().zip(images) {
        write_image(&dir.join(format!("{}.png", view_name(t.id))), img)?;
    }
    Ok(())
}

fn cmd_train(a: StageArgs) -> Result<()> {
    let cfg = stage_config(&a)?;
    let scene = SceneDir::new(&a.scene);
    let (_, views) = load_train(&scene, "train")?;
    let prepared = prepare(&views, &cfg)?;
    let inputs = TrainInputs {
        views,
        masks: prepared.masks,
        init: prepared.init,
        warp_cache: Some(prepared.warp_cache),
        extent: prepared.extent,
    };
    let result = train_with_callback(&inputs, &cfg.train, checkpoint_writer(&a.out)).context("train stage")?;
    write_file(&a.out.join("gaussians.ckpt"), &encode_checkpoint(&result.gaussians))?;
    write_telemetry(&a.out.join("telemetry.csv"), &result.telemetry)?;
    let tests = load_tests(&scene, &scene.split()?.test)?;
    let renders = render_views(&result.gaussians, &tests, &cfg.train.render)?;
    let report = evaluate_views(&renders, &tests)?;
    write_manifest(&a.out, &cfg, serde_json::to_value(&report)?)?;
    println!("{} Gaussians after {} iterations", result.gaussians.len(), cfg.train.num_iters);
    Ok(())
}

fn cmd_render(a: RenderArgs) -> Result<()> {
    let cfg = load_config(a.config.as_deref())?;
    let scene = SceneDir::new(&a.scene);
    let split = scene.split()?;
    let ids = match a.split {
        SplitSel::Train => split.train,
        SplitSel::Test => split.test,
        SplitSel::All => (0..scene.cameras()?.len()).collect(),
    };
    let g = decode_checkpoint(&read_file(&a.checkpoint)?)
        .with_context(|| format!("reading {}", a.checkpoint.display()))?;
    let tests = load_tests(&scene, &ids)?;
    let images = render_views(&g, &tests, &cfg.train.render)?;
    write_renders(&a.out, &tests, &images)?;
    println!("rendered {} views", images.len());
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let scene = SceneDir::new(&a.scene);
    let ids = scene.split()?.test;
    let renders_dir = SceneDir::new(&a.renders);
    let mut renders = Vec::new();
    let mut gt = Vec::new();
    for &i in &ids {
        let base = renders_dir.root.join(view_name(i));
        let path = ["png", "ppm"]
            .iter()
            .map(|e| base.with_extension(e))
            .find(|p| p.is_file())
            .with_context(|| format!("eval stage: missing render {}", base.with_extension("png").display()))?;
        renders.push(read_image(&path)?);
        gt.push(read_image(&scene.image_path(i)?)?);
    }
    let report = evaluate(&renders, &gt, &ids).context("eval stage")?;
    write_json(&a.out, &report)?;
    println!("mean PSNR {} dB, mean SSIM {:.4}", fmt_metric(report.mean_psnr.0), report.mean_ssim);
    Ok(())
}

fn fmt_metric(v: f64) -> String {
    if v.is_infinite() {
        "inf".to_string()
    } else {
        format!("{v:.2}")
    }
}

fn cmd_pipeline(a: StageArgs) -> Result<()> {
    let cfg = stage_config(&a)?;
    let scene = SceneDir::new(&a.scene);
    let (_, views) = load_train(&scene, "filter")?;
    let tests = load_tests(&scene, &scene.split()?.test)?;
    let out = run_pipeline_with(&views, &tests, &cfg, checkpoint_writer(&a.out))?;
    write_file(&a.out.join("points.ply"), &encode_ply(&out.prepared.fusion.cloud))?;
    write_file(&a.out.join("gaussians.ckpt"), &encode_checkpoint(&out.trained.gaussians))?;
    write_telemetry(&a.out.join("telemetry.csv"), &out.trained.telemetry)?;
    write_renders(&a.out.join("renders"), &tests, &out.renders)?;
    match &out.report {
        Some(r) => {
            write_json(&a.out.join("metrics.json"), r)?;
            println!(
                "held-out mean PSNR {} dB (init {}), mean SSIM {:.4}",
                fmt_metric(r.mean_psnr.0),
                out.init_report.as_ref().map_or("n/a".into(), |i| fmt_metric(i.mean_psnr.0)),
                r.mean_ssim
            );
        }
        None => println!("no test images; metrics.json not written"),
    }
    write_manifest(&a.out, &cfg, serde_json::to_value(&out.report)?)?;
    Ok(())
}
