//! Command-line surface: scene synthesis, rendering, refinement,
//! evaluation, gradient checking, the pose-recovery experiment, discard
//! statistics, and throughput benchmarks.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::Vector3;

use crate::autodiff::{backward_frame, ghost_split, render_forward, BackwardConfig};
use crate::discard::DiscardConfig;
use crate::geometry::{CameraModel, Pose};
use crate::io::{
    load_checkpoint, load_png, load_scene, save_checkpoint, save_pfm, save_png, save_scene,
    PfmImage, SceneConfig,
};
use crate::optim::{LossKind, OptimConfig};
use crate::pipeline::{
    ghost_ablation, noise_pose, pack_checkpoint, refine, render_frame, run_config_hash,
    unpack_checkpoint, AblationConfig, Model, OptimizerState, RefineSettings,
};
use crate::raster::{render_pyramid, RasterConfig};
use crate::reconstruct::{reconstruct_hdr, ReconstructConfig};
use crate::rng::{key_uniform, Stream};
use crate::scene::{
    synth_scene, DescriptorSpace, EnvironmentMap, Exif, Frame, PointCloud, Scene, SynthShape,
    SynthSpec,
};
use crate::tonemap::{
    tonemap_backward, tonemap_forward, ResponseMode, SensorParams, Vignette, CRF_CONTROL_POINTS,
};
use crate::{Error, Result};

#[derive(Parser)]
#[command(
    name = "pointsplat",
    version,
    about = "Differentiable one-pixel point rasterization and scene refinement"
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Override the seed used by the invoked command.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Bitwise-reproducible rendering (canonical fragment order).
    #[arg(long, global = true, default_value_t = true, action = clap::ArgAction::Set)]
    deterministic: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene directory.
    Synth(SynthArgs),
    /// Render one frame of a scene to an 8-bit image.
    Render(RenderArgs),
    /// Optimize scene parameters against the manifest images.
    Refine(RefineArgs),
    /// Report per-frame image metrics against the manifest images.
    Evaluate(EvaluateArgs),
    /// Compare analytic gradients with finite differences.
    Gradcheck(GradcheckArgs),
    /// Pose-recovery comparison of ghost and direct structural gradients.
    GhostAblation(AblationArgs),
    /// Per-pixel blend counts per pyramid layer as CSV.
    DiscardStats(DiscardStatsArgs),
    /// Forward/backward throughput as CSV.
    Bench(BenchArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum ShapeArg {
    Plane,
    Sphere,
    WallPair,
    Mural,
}

#[derive(Clone, Copy, ValueEnum)]
enum SpaceArg {
    Linear,
    Log,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, value_enum, default_value = "plane")]
    shape: ShapeArg,
    /// Number of points.
    #[arg(long, default_value_t = 1000)]
    n: usize,
    #[arg(long, default_value_t = 6)]
    frames: usize,
    #[arg(long, default_value_t = 128)]
    width: u32,
    #[arg(long, default_value_t = 128)]
    height: u32,
    /// Descriptor channels per point.
    #[arg(long, default_value_t = 4)]
    dim: usize,
    #[arg(long, value_enum, default_value = "linear")]
    space: SpaceArg,
    #[arg(long, default_value_t = 16)]
    env_height: usize,
    /// Half-extent of the generated shape in world units.
    #[arg(long, default_value_t = 1.0)]
    extent: f64,
    /// Focal length in pixels (default picks a wide lens from the size).
    #[arg(long)]
    focal: Option<f64>,
    #[arg(long, default_value = "scene")]
    name: String,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Render every frame and bind the images in the manifest.
    #[arg(long, default_value_t = false)]
    bake_gt: bool,
}

#[derive(Args)]
struct RenderArgs {
    /// Scene manifest path.
    #[arg(long)]
    scene: PathBuf,
    #[arg(long, default_value_t = 0)]
    frame: usize,
    /// Output image (8-bit PNG).
    #[arg(long)]
    out: PathBuf,
    /// Also write the linear radiance image (PFM).
    #[arg(long)]
    hdr: Option<PathBuf>,
}

#[derive(Args)]
struct RefineArgs {
    #[arg(long)]
    scene: PathBuf,
    /// Override the epoch count from the manifest.
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    test_fraction: Option<f64>,
    /// Evaluate held frames every this many epochs (0: only at the end).
    #[arg(long, default_value_t = 0)]
    eval_every: usize,
    #[arg(long)]
    checkpoint_dir: Option<PathBuf>,
    /// Resume from a checkpoint produced with the same configuration.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Append per-step statistics as JSON lines.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Write the refined scene here.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Add Gaussian noise to descriptors before refining.
    #[arg(long, default_value_t = 0.0)]
    perturb_texture: f64,
    /// Add Gaussian translation noise to poses (scene units).
    #[arg(long, default_value_t = 0.0)]
    perturb_pose_t: f64,
    /// Add Gaussian rotation noise to poses (degrees).
    #[arg(long, default_value_t = 0.0)]
    perturb_pose_r: f64,
    /// Save a final checkpoint here.
    #[arg(long)]
    save_checkpoint: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    scene: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum GradModule {
    Tonemap,
    Raster,
    Reconstruct,
    All,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, value_enum, default_value = "all")]
    module: GradModule,
}

#[derive(Args)]
struct AblationArgs {
    /// Scene manifest; a synthetic scene is used when omitted.
    #[arg(long)]
    scene: Option<PathBuf>,
    /// Synthetic scene frame count.
    #[arg(long, default_value_t = 4)]
    frames: usize,
    /// Synthetic scene image size.
    #[arg(long, default_value_t = 64)]
    width: u32,
    /// Synthetic scene point count.
    #[arg(long, default_value_t = 8000)]
    count: usize,
    /// Synthetic shape half-extent, world units. The tabletop default
    /// plus the long default lens turns millimeter pose noise into a
    /// multi-pixel image displacement.
    #[arg(long, default_value_t = 0.1)]
    extent: f64,
    /// Synthetic focal length, pixels.
    #[arg(long, default_value_t = 384.0)]
    focal: f64,
    /// Translation noise, scene units.
    #[arg(long, default_value_t = 0.015)]
    sigma_t: f64,
    /// Rotation noise, degrees.
    #[arg(long, default_value_t = 1.0)]
    sigma_r: f64,
    #[arg(long, default_value_t = 300)]
    steps: usize,
    #[arg(long, default_value_t = 2e-3)]
    lr: f64,
    #[arg(long, default_value_t = 0.5)]
    dropout: f64,
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5")]
    seeds: Vec<u64>,
    /// Observation noise added to the baked ground truth.
    #[arg(long, default_value_t = 0.02)]
    gt_noise: f64,
}

#[derive(Args)]
struct DiscardStatsArgs {
    /// Scene manifest; a synthetic scene is used when omitted.
    #[arg(long)]
    scene: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    frame: usize,
    #[arg(long, default_value_t = 4)]
    layers: usize,
    /// Discard exponent.
    #[arg(long, default_value_t = 1.5)]
    gamma: f64,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, default_value_t = 1_000_000)]
    points: usize,
    /// Image size as WxH.
    #[arg(long, default_value = "1920x1080", value_parser = parse_res)]
    res: (u32, u32),
    #[arg(long, default_value_t = 1)]
    layers: usize,
}

fn parse_res(s: &str) -> std::result::Result<(u32, u32), String> {
    let (w, h) = s.split_once('x').ok_or_else(|| format!("expected WxH, got {s}"))?;
    let w = w.parse().map_err(|e| format!("bad width: {e}"))?;
    let h = h.parse().map_err(|e| format!("bad height: {e}"))?;
    if w == 0 || h == 0 {
        return Err("resolution must be positive".into());
    }
    Ok((w, h))
}

/// Parses arguments and runs a command, mapping errors to exit codes:
/// 2 for usage errors (via the parser), 1 for runtime failures with a
/// JSON diagnostic on stderr.
pub fn main() -> i32 {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            let diag = serde_json::json!({ "error": e.to_string(), "kind": kind(&e) });
            eprintln!("{diag}");
            1
        }
    }
}

/// Writes to stdout, treating a closed pipe as success so bulk output
/// can feed `head` and friends.
fn emit(s: &str) -> Result<()> {
    use std::io::Write as _;
    let mut out = std::io::stdout().lock();
    match out.write_all(s.as_bytes()).and_then(|_| out.flush()) {
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        other => Ok(other?),
    }
}

fn kind(e: &Error) -> &'static str {
    match e {
        Error::InvalidArgument(_) => "invalid_argument",
        Error::NonFinite(_) => "non_finite",
        Error::ShapeMismatch(_) => "shape_mismatch",
        Error::Convergence(_) => "convergence",
        Error::Parse(_) => "parse",
        Error::Format(_) => "format",
        Error::Io(_) => "io",
        Error::Config(_) => "config",
    }
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Synth(a) => cmd_synth(cli, a),
        Command::Render(a) => cmd_render(cli, a),
        Command::Refine(a) => cmd_refine(cli, a),
        Command::Evaluate(a) => cmd_evaluate(cli, a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::GhostAblation(a) => cmd_ablation(cli, a),
        Command::DiscardStats(a) => cmd_discard_stats(cli, a),
        Command::Bench(a) => cmd_bench(cli, a),
    }
}

fn apply_overrides(cli: &Cli, raster: &mut RasterConfig) {
    raster.deterministic = cli.deterministic;
    if let Some(seed) = cli.seed {
        raster.seed = seed;
        raster.discard.seed = seed;
    }
}

fn cmd_synth(cli: &Cli, a: &SynthArgs) -> Result<()> {
    let spec = SynthSpec {
        shape: match a.shape {
            ShapeArg::Plane => SynthShape::Plane,
            ShapeArg::Sphere => SynthShape::Sphere,
            ShapeArg::WallPair => SynthShape::WallPair,
            ShapeArg::Mural => SynthShape::Mural,
        },
        count: a.n,
        descriptor_space: match a.space {
            SpaceArg::Linear => DescriptorSpace::Linear,
            SpaceArg::Log => DescriptorSpace::Logarithmic,
        },
        descriptor_dim: a.dim,
        seed: cli.seed.unwrap_or(7),
        num_frames: a.frames,
        width: a.width,
        height: a.height,
        env_height: a.env_height,
        extent: a.extent,
        focal: a.focal,
    };
    let scene = synth_scene(&spec)?;
    let mut raster = RasterConfig::default();
    apply_overrides(cli, &mut raster);
    let optim = OptimConfig::default();

    let image_names = if a.bake_gt {
        std::fs::create_dir_all(&a.out)?;
        let model = Model::new(scene.clone())?;
        let mut names = Vec::with_capacity(scene.frames.len());
        for i in 0..scene.frames.len() {
            let fr = render_frame(&model, i, &raster, None, ResponseMode::Inference)?;
            let name = format!("frame_{i:04}.png");
            save_png(&a.out.join(&name), fr.width, fr.height, &fr.ldr)?;
            names.push(name);
        }
        Some(names)
    } else {
        None
    };
    let path = save_scene(&scene, &a.out, &a.name, &raster, &optim, image_names.as_deref())?;
    println!("{}", serde_json::json!({ "scene": path, "points": scene.cloud.len() }));
    Ok(())
}

fn cmd_render(cli: &Cli, a: &RenderArgs) -> Result<()> {
    let (scene, config) = load_scene(&a.scene)?;
    if a.frame >= scene.frames.len() {
        return Err(Error::InvalidArgument(format!(
            "frame {} out of range ({} frames)",
            a.frame,
            scene.frames.len()
        )));
    }
    let mut raster = config.raster.clone();
    apply_overrides(cli, &mut raster);
    let model = Model::new(scene)?;
    let fr = render_frame(&model, a.frame, &raster, None, ResponseMode::Inference)?;
    save_png(&a.out, fr.width, fr.height, &fr.ldr)?;
    if let Some(hdr_path) = &a.hdr {
        let img = PfmImage::new(fr.width, fr.height, 3, fr.rec.hdr.clone())?;
        save_pfm(&img, hdr_path)?;
    }
    println!(
        "{}",
        serde_json::json!({ "frame": a.frame, "width": fr.width, "height": fr.height })
    );
    Ok(())
}

/// Loads the manifest-bound images; every frame must have one.
fn load_ground_truth(scene: &Scene, config: &SceneConfig, base: &Path) -> Result<Vec<Vec<f64>>> {
    let mut gt = Vec::with_capacity(scene.frames.len());
    for (i, entry) in config.frames.iter().enumerate() {
        let name = entry.image.as_ref().ok_or_else(|| {
            Error::Config(format!("frame {i} has no image; synthesize with --bake-gt first"))
        })?;
        let cam = scene.camera_for(&scene.frames[i]);
        let (w, h, data) = load_png(&base.join(name))?;
        if (w, h) != (cam.width as usize, cam.height as usize) {
            return Err(Error::ShapeMismatch(format!(
                "frame {i} image is {w}x{h}, camera expects {}x{}",
                cam.width, cam.height
            )));
        }
        gt.push(data);
    }
    Ok(gt)
}

fn gaussian_cli(seed: u64, a: u64, b: u64) -> f64 {
    let u1 = key_uniform(seed, Stream::Noise, a, 2 * b).max(1e-300);
    let u2 = key_uniform(seed, Stream::Noise, a, 2 * b + 1);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn cmd_refine(cli: &Cli, a: &RefineArgs) -> Result<()> {
    let (scene, config) = load_scene(&a.scene)?;
    let base = a.scene.parent().unwrap_or(Path::new(".")).to_path_buf();
    let gt = load_ground_truth(&scene, &config, &base)?;
    let mut raster = config.raster.clone();
    apply_overrides(cli, &mut raster);
    let mut cfg = config.optim.clone();
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }

    let mut model = Model::new(scene)?;
    if a.perturb_texture > 0.0 {
        for (i, d) in model.scene.cloud.descriptors.iter_mut().enumerate() {
            *d += gaussian_cli(cfg.seed ^ 0x7e97, i as u64, 0) * a.perturb_texture;
        }
    }
    if a.perturb_pose_t > 0.0 || a.perturb_pose_r > 0.0 {
        for i in 0..model.scene.frames.len() {
            model.scene.frames[i].pose = noise_pose(
                &model.scene.frames[i].pose,
                a.perturb_pose_t,
                a.perturb_pose_r.to_radians(),
                cfg.seed ^ 0x905e,
                i as u64,
            )?;
        }
    }

    let mut opt = OptimizerState::new(&model);
    let mut start_epoch = 0;
    let cfg_hash = run_config_hash(&raster, &cfg);
    if let Some(path) = &a.resume {
        let ckpt = load_checkpoint(path)?;
        start_epoch = unpack_checkpoint(&ckpt, &mut model, &mut opt, &cfg_hash)?;
    }
    let settings = RefineSettings {
        test_fraction: a.test_fraction,
        eval_every: a.eval_every,
        checkpoint_dir: a.checkpoint_dir.clone(),
        log_path: a.log.clone(),
    };
    let report = refine(&mut model, &mut opt, &gt, &raster, &cfg, &settings, start_epoch)?;

    if let Some(dir) = &a.out_dir {
        let names: Vec<String> =
            config.frames.iter().filter_map(|f| f.image.clone()).collect();
        let names = (names.len() == config.frames.len()).then_some(names);
        save_scene(&model.scene, dir, &config.name, &raster, &cfg, names.as_deref())?;
        for name in names.iter().flatten() {
            std::fs::copy(base.join(name), dir.join(name))?;
        }
    }
    if let Some(path) = &a.save_checkpoint {
        let ckpt = pack_checkpoint(&model, &opt, cfg.epochs, &cfg_hash);
        save_checkpoint(&ckpt, path)?;
    }

    let epochs: Vec<serde_json::Value> = report
        .epochs
        .iter()
        .map(|e| {
            serde_json::json!({
                "epoch": e.epoch, "mean_loss": e.mean_loss, "mean_psnr": e.mean_psnr
            })
        })
        .collect();
    println!(
        "{}",
        serde_json::json!({
            "train_frames": report.train_frames,
            "test_frames": report.test_frames,
            "epochs": epochs,
            "test_history": report.test_history,
            "final_test": report.final_test,
        })
    );
    Ok(())
}

fn cmd_evaluate(cli: &Cli, a: &EvaluateArgs) -> Result<()> {
    let (scene, config) = load_scene(&a.scene)?;
    let base = a.scene.parent().unwrap_or(Path::new(".")).to_path_buf();
    let gt = load_ground_truth(&scene, &config, &base)?;
    let mut raster = config.raster.clone();
    apply_overrides(cli, &mut raster);
    let model = Model::new(scene)?;
    let frames: Vec<usize> = (0..model.scene.frames.len()).collect();
    let table = crate::pipeline::evaluate(&model, &gt, &frames, &raster)?;
    let text =
        serde_json::to_string_pretty(&table).map_err(|e| Error::Format(e.to_string()))?;
    emit(&text)?;
    emit("\n")?;
    Ok(())
}

fn cmd_ablation(cli: &Cli, a: &AblationArgs) -> Result<()> {
    let (model, mut raster) = match &a.scene {
        Some(path) => {
            let (scene, config) = load_scene(path)?;
            (Model::new(scene)?, config.raster.clone())
        }
        None => {
            let scene = synth_scene(&SynthSpec {
                count: a.count,
                num_frames: a.frames,
                width: a.width,
                height: a.width,
                seed: cli.seed.unwrap_or(7),
                env_height: 8,
                extent: a.extent,
                focal: Some(a.focal),
                ..SynthSpec::default()
            })?;
            let raster = RasterConfig {
                num_layers: 4,
                discard: DiscardConfig::disabled(),
                ..RasterConfig::default()
            };
            (Model::new(scene)?, raster)
        }
    };
    apply_overrides(cli, &mut raster);
    let cfg = AblationConfig {
        sigma_t: a.sigma_t,
        sigma_r_deg: a.sigma_r,
        steps: a.steps,
        lr_pose: a.lr,
        dropout_rate: a.dropout,
        seeds: a.seeds.clone(),
        gt_noise_sigma: a.gt_noise,
        loss: LossKind::Mse,
    };
    let report = ghost_ablation(&model, &raster, &cfg)?;
    let text =
        serde_json::to_string_pretty(&report).map_err(|e| Error::Format(e.to_string()))?;
    emit(&text)?;
    emit("\n")?;
    Ok(())
}

fn cmd_discard_stats(cli: &Cli, a: &DiscardStatsArgs) -> Result<()> {
    let (scene, mut raster) = match &a.scene {
        Some(path) => {
            let (scene, config) = load_scene(path)?;
            (scene, config.raster.clone())
        }
        None => {
            let scene = synth_scene(&SynthSpec {
                count: 20000,
                seed: cli.seed.unwrap_or(7),
                ..SynthSpec::default()
            })?;
            (scene, RasterConfig::default())
        }
    };
    raster.num_layers = a.layers;
    raster.discard = DiscardConfig { gamma: a.gamma, enabled: true, seed: 0 };
    apply_overrides(cli, &mut raster);
    let pyramid = render_pyramid(&scene, &scene.frames[a.frame], &raster)?;
    let mut out = String::from("layer,x,y,count\n");
    for (l, layer) in pyramid.layers.iter().enumerate() {
        for y in 0..layer.height {
            for x in 0..layer.width {
                out.push_str(&format!("{l},{x},{y},{}\n", layer.counts[y * layer.width + x]));
            }
        }
    }
    emit(&out)?;
    Ok(())
}

fn cmd_bench(cli: &Cli, a: &BenchArgs) -> Result<()> {
    let seed = cli.seed.unwrap_or(0);
    let scene = bench_scene(a.points, a.res.0, a.res.1, seed)?;
    let mut raster = RasterConfig {
        num_layers: a.layers,
        discard: DiscardConfig::disabled(),
        ..RasterConfig::default()
    };
    apply_overrides(cli, &mut raster);
    let (forward_ms, backward_ms) = bench_once(&scene, &raster, seed)?;
    println!("points,res,layers,forward_ms,backward_ms");
    println!(
        "{},{}x{},{},{forward_ms:.3},{backward_ms:.3}",
        a.points, a.res.0, a.res.1, a.layers
    );
    Ok(())
}

/// Uniform cloud filling the camera frustum, sized for throughput runs.
pub fn bench_scene(points: usize, width: u32, height: u32, seed: u64) -> Result<Scene> {
    let fx = width as f64 * 0.6;
    let camera = CameraModel::pinhole(
        width,
        height,
        fx,
        fx,
        width as f64 / 2.0,
        height as f64 / 2.0,
        [0.0; 4],
    )?;
    let dim = 4;
    let span_x = width as f64 / fx;
    let span_y = height as f64 / fx;
    let mut positions = Vec::with_capacity(points);
    let mut descriptors = Vec::with_capacity(points * dim);
    for i in 0..points {
        let u = key_uniform(seed, Stream::Noise, i as u64, 0);
        let v = key_uniform(seed, Stream::Noise, i as u64, 1);
        let w = key_uniform(seed, Stream::Noise, i as u64, 2);
        let z = 1.0 + 2.0 * w;
        positions.push(Vector3::new(
            (u - 0.5) * span_x * z * 0.95,
            (v - 0.5) * span_y * z * 0.95,
            z,
        ));
        for c in 0..dim {
            descriptors.push(key_uniform(seed, Stream::Noise, i as u64, 3 + c as u64));
        }
    }
    let cloud = PointCloud {
        positions,
        normals: None,
        descriptors,
        descriptor_dim: dim,
        world_radii: vec![0.01; points],
        descriptor_space: DescriptorSpace::Linear,
    };
    let env_h = 8usize;
    let texels = vec![0.2; 2 * env_h * env_h * dim];
    let env = EnvironmentMap::from_texels(env_h, dim, texels)?;
    Ok(Scene {
        cloud,
        env,
        cameras: vec![camera],
        frames: vec![Frame {
            id: 0,
            camera_id: 0,
            pose: Pose::identity(),
            exif: Exif { f_number: 2.0, exposure_time: 0.01, iso: 100.0 },
        }],
    })
}

/// Times one forward pyramid render and one full gradient pass.
pub fn bench_once(scene: &Scene, raster: &RasterConfig, seed: u64) -> Result<(f64, f64)> {
    let frame = &scene.frames[0];
    let t0 = Instant::now();
    let state = render_forward(scene, frame, raster, None)?;
    let forward_ms = t0.elapsed().as_secs_f64() * 1e3;

    let adjoint: Vec<Vec<f64>> = state
        .pyramid
        .layers
        .iter()
        .map(|l| {
            (0..l.data.len())
                .map(|i| key_uniform(seed, Stream::Noise, 1 << 40, i as u64) - 0.5)
                .collect()
        })
        .collect();
    let split = ghost_split(scene.cloud.len(), 0.25, seed)?;
    let state = render_forward(scene, frame, raster, Some(&split))?;
    let t0 = Instant::now();
    let bundle = backward_frame(
        scene,
        frame,
        raster,
        &BackwardConfig::default(),
        &state,
        &split,
        &adjoint,
    )?;
    let backward_ms = t0.elapsed().as_secs_f64() * 1e3;
    assert!(bundle.d_tau.iter().all(|v| v.is_finite()));
    Ok((forward_ms, backward_ms))
}

#[derive(serde::Serialize)]
struct GradCheckRow {
    name: String,
    analytic: f64,
    fd: f64,
    rel_err: f64,
    pass: bool,
}

struct GradReport {
    module: &'static str,
    rows: Vec<GradCheckRow>,
}

impl GradReport {
    fn new(module: &'static str) -> Self {
        GradReport { module, rows: Vec::new() }
    }

    fn check(&mut self, name: impl Into<String>, analytic: f64, fd: f64, rel_tol: f64) {
        let scale = analytic.abs().max(fd.abs());
        let abs_err = (analytic - fd).abs();
        // Absolute floor keeps near-zero gradients from failing on
        // round-off alone.
        let rel_err = if scale > 1e-7 / rel_tol { abs_err / scale } else { 0.0 };
        self.rows.push(GradCheckRow {
            name: name.into(),
            analytic,
            fd,
            rel_err,
            pass: rel_err <= rel_tol,
        });
    }

    fn finish(self) -> Result<serde_json::Value> {
        let pass = self.rows.iter().all(|r| r.pass);
        let value = serde_json::json!({
            "module": self.module,
            "checks": self.rows,
            "pass": pass,
        });
        Ok(value)
    }
}

fn cmd_gradcheck(a: &GradcheckArgs) -> Result<()> {
    let reports = match a.module {
        GradModule::Tonemap => vec![gradcheck_tonemap()?],
        GradModule::Raster => vec![gradcheck_raster()?],
        GradModule::Reconstruct => vec![gradcheck_reconstruct()?],
        GradModule::All => {
            vec![gradcheck_tonemap()?, gradcheck_raster()?, gradcheck_reconstruct()?]
        }
    };
    let pass = reports.iter().all(|r| r["pass"].as_bool().unwrap_or(false));
    let text = serde_json::to_string_pretty(&serde_json::Value::Array(reports))
        .map_err(|e| Error::Format(e.to_string()))?;
    emit(&text)?;
    emit("\n")?;
    if !pass {
        return Err(Error::Convergence("gradient check failed".into()));
    }
    Ok(())
}

pub fn gradcheck_tonemap() -> Result<serde_json::Value> {
    let (w, h) = (8usize, 8usize);
    let hdr: Vec<f64> = (0..w * h * 3)
        .map(|i| 0.05 + 1.9 * key_uniform(11, Stream::Noise, i as u64, 0))
        .collect();
    let mut p = SensorParams::identity(1, CRF_CONTROL_POINTS);
    p.ev[0] = 0.2;
    p.white_point[0] = [1.1, 1.0, 0.9];
    p.vignette = Vignette { a2: 0.08, a4: -0.02, a6: 0.01, cx: 0.52, cy: 0.47 };
    let adjoint: Vec<f64> = (0..w * h * 3)
        .map(|i| key_uniform(12, Stream::Noise, i as u64, 1) - 0.5)
        .collect();
    let mode = ResponseMode::Training;
    let scalar = |p: &SensorParams| -> Result<f64> {
        let out = tonemap_forward(&hdr, w, h, 0, p, mode)?;
        Ok(out.iter().zip(&adjoint).map(|(a, b)| a * b).sum())
    };
    let g = tonemap_backward(&hdr, w, h, 0, &p, mode, &adjoint)?;
    let mut report = GradReport::new("tonemap");
    let tol = 1e-4;
    let step = 1e-5;
    let fd = |apply: &dyn Fn(&mut SensorParams, f64)| -> Result<f64> {
        let mut hi = p.clone();
        apply(&mut hi, step);
        let mut lo = p.clone();
        apply(&mut lo, -step);
        Ok((scalar(&hi)? - scalar(&lo)?) / (2.0 * step))
    };

    report.check("ev", g.ev, fd(&|p, d| p.ev[0] += d)?, tol);
    report.check("white_r", g.white[0], fd(&|p, d| p.white_point[0][0] += d)?, tol);
    report.check("white_b", g.white[2], fd(&|p, d| p.white_point[0][2] += d)?, tol);
    let names = ["vignette_a2", "vignette_a4", "vignette_a6", "vignette_cx", "vignette_cy"];
    for (k, name) in names.iter().enumerate() {
        let apply = move |p: &mut SensorParams, d: f64| {
            let vg = &mut p.vignette;
            match k {
                0 => vg.a2 += d,
                1 => vg.a4 += d,
                2 => vg.a6 += d,
                3 => vg.cx += d,
                _ => vg.cy += d,
            }
        };
        report.check(*name, g.vignette[k], fd(&apply)?, tol);
    }
    let mut seen = 0;
    for knot in 0..CRF_CONTROL_POINTS {
        if g.crf[1][knot].abs() > 1e-6 && seen < 3 {
            seen += 1;
            let apply = move |p: &mut SensorParams, d: f64| p.crf[1].values[knot] += d;
            report.check(format!("crf_g[{knot}]"), g.crf[1][knot], fd(&apply)?, tol);
        }
    }
    for idx in [0usize, 95, 191] {
        let mut hi = hdr.clone();
        hi[idx] += step;
        let mut lo = hdr.clone();
        lo[idx] -= step;
        let sp = |hdr: &[f64]| -> Result<f64> {
            let out = tonemap_forward(hdr, w, h, 0, &p, mode)?;
            Ok(out.iter().zip(&adjoint).map(|(a, b)| a * b).sum())
        };
        let fd_val = (sp(&hi)? - sp(&lo)?) / (2.0 * step);
        report.check(format!("hdr[{idx}]"), g.hdr[idx], fd_val, tol);
    }
    report.finish()
}

pub fn gradcheck_raster() -> Result<serde_json::Value> {
    let scene = synth_scene(&SynthSpec {
        count: 60,
        width: 16,
        height: 16,
        num_frames: 1,
        env_height: 6,
        ..SynthSpec::default()
    })?;
    let raster = RasterConfig {
        num_layers: 2,
        discard: DiscardConfig::disabled(),
        ..RasterConfig::default()
    };
    let frame = &scene.frames[0];
    let split = ghost_split(scene.cloud.len(), 0.0, 0)?;
    let state = render_forward(&scene, frame, &raster, Some(&split))?;
    let adjoint: Vec<Vec<f64>> = state
        .pyramid
        .layers
        .iter()
        .enumerate()
        .map(|(l, layer)| {
            (0..layer.data.len())
                .map(|i| key_uniform(21, Stream::Noise, l as u64, i as u64) - 0.5)
                .collect()
        })
        .collect();
    let bundle = backward_frame(
        &scene,
        frame,
        &raster,
        &BackwardConfig::default(),
        &state,
        &split,
        &adjoint,
    )?;
    let scalar = |scene: &Scene| -> Result<f64> {
        let state = render_forward(scene, &scene.frames[0], &raster, Some(&split))?;
        let mut sum = 0.0;
        for (layer, adj) in state.pyramid.layers.iter().zip(&adjoint) {
            sum += layer.data.iter().zip(adj).map(|(a, b)| a * b).sum::<f64>();
        }
        Ok(sum)
    };
    let mut report = GradReport::new("raster");
    let tol = 1e-4;
    let step = 1e-5;
    let dim = scene.cloud.descriptor_dim;
    let mut taken = 0;
    for i in 0..scene.cloud.descriptors.len() {
        if bundle.d_tau[i].abs() > 1e-6 && taken < 4 {
            taken += 1;
            let mut hi = scene.clone();
            hi.cloud.descriptors[i] += step;
            let mut lo = scene.clone();
            lo.cloud.descriptors[i] -= step;
            let fd = (scalar(&hi)? - scalar(&lo)?) / (2.0 * step);
            report.check(
                format!("tau[{}][{}]", i / dim, i % dim),
                bundle.d_tau[i],
                fd,
                tol,
            );
        }
    }
    let mut taken = 0;
    for i in 0..scene.env.texels.len() {
        if bundle.d_env[i].abs() > 1e-6 && taken < 2 {
            taken += 1;
            let mut hi = scene.clone();
            hi.env.texels[i] += step;
            let mut lo = scene.clone();
            lo.env.texels[i] -= step;
            let fd = (scalar(&hi)? - scalar(&lo)?) / (2.0 * step);
            report.check(format!("env[{i}]"), bundle.d_env[i], fd, tol);
        }
    }
    report.finish()
}

pub fn gradcheck_reconstruct() -> Result<serde_json::Value> {
    use crate::scene::{ImagePyramid, PyramidLayer};
    let dim = 3;
    let mut layers = Vec::new();
    for (l, size) in [(0usize, 8usize), (1, 4)] {
        let mut layer = PyramidLayer::new(size, size, dim);
        for p in 0..size * size {
            let count = (key_uniform(31, Stream::Noise, l as u64, p as u64) * 3.0) as u32;
            layer.counts[p] = count;
            if count > 0 {
                for c in 0..dim {
                    layer.data[p * dim + c] =
                        key_uniform(32, Stream::Noise, l as u64, (p * dim + c) as u64);
                }
            }
        }
        layers.push(layer);
    }
    let pyramid = ImagePyramid { layers };
    let cfg = ReconstructConfig::new(dim);
    let rec = reconstruct_hdr(&pyramid, &cfg)?;
    let adjoint: Vec<f64> = (0..rec.hdr.len())
        .map(|i| key_uniform(33, Stream::Noise, i as u64, 0) - 0.5)
        .collect();
    let grads = rec.backward(&pyramid, &cfg, &adjoint)?;
    let scalar = |pyr: &ImagePyramid, cfg: &ReconstructConfig| -> Result<f64> {
        let rec = reconstruct_hdr(pyr, cfg)?;
        Ok(rec.hdr.iter().zip(&adjoint).map(|(a, b)| a * b).sum())
    };
    let mut report = GradReport::new("reconstruct");
    let tol = 1e-4;
    let step = 1e-5;
    let mut taken = 0;
    for l in 0..pyramid.layers.len() {
        for i in 0..pyramid.layers[l].data.len() {
            if grads.layers[l][i].abs() > 1e-6 && taken < 4 {
                taken += 1;
                let mut hi = pyramid.clone();
                hi.layers[l].data[i] += step;
                let mut lo = pyramid.clone();
                lo.layers[l].data[i] -= step;
                let fd = (scalar(&hi, &cfg)? - scalar(&lo, &cfg)?) / (2.0 * step);
                report.check(format!("layer{l}[{i}]"), grads.layers[l][i], fd, tol);
            }
        }
    }
    for (k, name) in [(0usize, "head_w[0]"), (5, "head_w[5]")] {
        let mut hi = cfg.clone();
        hi.head.weight[k] += step;
        let mut lo = cfg.clone();
        lo.head.weight[k] -= step;
        let fd = (scalar(&pyramid, &hi)? - scalar(&pyramid, &lo)?) / (2.0 * step);
        report.check(name, grads.head_weight[k], fd, tol);
    }
    {
        let mut hi = cfg.clone();
        hi.head.bias[1] += step;
        let mut lo = cfg.clone();
        lo.head.bias[1] -= step;
        let fd = (scalar(&pyramid, &hi)? - scalar(&pyramid, &lo)?) / (2.0 * step);
        report.check("head_b[1]", grads.head_bias[1], fd, tol);
    }
    report.finish()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resolution_parser_accepts_wxh_and_rejects_garbage() {
        assert_eq!(parse_res("1920x1080").unwrap(), (1920, 1080));
        assert!(parse_res("1920").is_err());
        assert!(parse_res("0x5").is_err());
        assert!(parse_res("axb").is_err());
    }

    #[test]
    fn gradcheck_suites_pass_on_shipped_defaults() {
        for report in
            [gradcheck_tonemap().unwrap(), gradcheck_raster().unwrap(), gradcheck_reconstruct().unwrap()]
        {
            assert_eq!(
                report["pass"],
                serde_json::Value::Bool(true),
                "{}",
                serde_json::to_string_pretty(&report).unwrap()
            );
            assert!(report["checks"].as_array().unwrap().len() >= 3);
        }
    }

    #[test]
    fn bench_scene_projects_mostly_in_bounds() {
        let scene = bench_scene(5000, 64, 48, 1).unwrap();
        let raster = RasterConfig { num_layers: 1, ..RasterConfig::default() };
        let prepared = crate::raster::prepare_frame(&scene, &scene.frames[0], &raster);
        let visible = prepared.visible.iter().filter(|v| **v).count();
        assert!(visible > 4000, "only {visible}/5000 points visible");
        let (f, b) = bench_once(&scene, &raster, 1).unwrap();
        assert!(f > 0.0 && b > 0.0);
    }

    #[test]
    fn cli_parses_all_subcommands() {
        for argv in [
            vec!["pointsplat", "synth", "--shape", "plane", "--n", "10", "--out", "/tmp/x"],
            vec!["pointsplat", "render", "--scene", "s.json", "--frame", "1", "--out", "o.png"],
            vec!["pointsplat", "refine", "--scene", "s.json", "--epochs", "3"],
            vec!["pointsplat", "evaluate", "--scene", "s.json"],
            vec!["pointsplat", "gradcheck", "--module", "tonemap"],
            vec!["pointsplat", "ghost-ablation", "--steps", "5", "--seeds", "1,2"],
            vec!["pointsplat", "discard-stats", "--layers", "3"],
            vec!["pointsplat", "bench", "--points", "1000", "--res", "64x64", "--layers", "2"],
            vec!["pointsplat", "--seed", "9", "--deterministic", "false", "bench"],
        ] {
            Cli::try_parse_from(&argv).unwrap_or_else(|e| panic!("{argv:?}: {e}"));
        }
        assert!(Cli::try_parse_from(["pointsplat", "bench", "--unknown-flag"]).is_err());
        assert!(Cli::try_parse_from(["pointsplat", "bench", "--res", "12"]).is_err());
    }
}
