use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use log::info;
use rayon::prelude::*;

use endomap::eval::{
    ade_rmse, ate_rmse, icp_align, AteOptions, EvalReport, IcpParams, PointCloud, Trajectory,
};
use endomap::imgcore::io::{load_image, save_image, save_mask, write_pfm};
use endomap::imgcore::{to_grayscale, BitMask, Image};
use endomap::keyframe::select_keyframes;
use endomap::pipeline::{
    compose_mosaic, list_frames, load_frames, register_frames, run_ablation, run_pipeline,
    AblationAxis, PipelineConfig,
};
use endomap::preprocess::{preprocess_frame, PreprocessConfig};
use endomap::sfs::{depth_to_pointcloud, estimate_light_params, tsai_shah_depth, LightParams};
use endomap::synth::{
    generate_sequence, pan_loop_trajectory, pan_trajectory, still_trajectory, write_sequence,
    DegradationConfig, SyntheticScene,
};

/// Environment variable capping the worker thread count.
const THREADS_ENV: &str = "ENDOMAP_THREADS";

#[derive(Parser)]
#[command(
    name = "endomap",
    version,
    about = "Endoscopic mosaicking and shape-from-shading reconstruction"
)]
struct Cli {
    /// Seed for every stochastic stage (RANSAC, synthetic noise).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Reflection suppression, undistortion and de-vignetting of frames.
    Preprocess {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Select keyframes by mean optical-flow magnitude.
    Keyframes {
        #[arg(long = "in")]
        input: PathBuf,
        /// Manifest with one frame index per line; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Frames are preprocessed as for pose estimation when given, used as-is otherwise.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long)]
        window: Option<usize>,
    },
    /// Register, bundle-adjust and blend every frame in a directory.
    Stitch {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Recover depth from a mosaic.
    Sfs {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        cloud: Option<PathBuf>,
        #[arg(long, default_value_t = 200)]
        iterations: usize,
        /// Light tilt, slant and albedo; estimated from the image when omitted.
        #[arg(long, num_args = 3, value_names = ["TILT", "SLANT", "ALBEDO"])]
        light: Option<Vec<f64>>,
        #[arg(long, default_value_t = 2)]
        stride: usize,
    },
    /// Trajectory and depth error metrics.
    Evaluate {
        #[arg(long)]
        est_traj: Option<PathBuf>,
        #[arg(long)]
        gt_traj: Option<PathBuf>,
        #[arg(long)]
        est_cloud: Option<PathBuf>,
        #[arg(long)]
        gt_cloud: Option<PathBuf>,
        /// Allow a scale in ICP before measuring depth error.
        #[arg(long)]
        icp_scale: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render a synthetic sequence with ground truth.
    Synth {
        #[arg(long, value_enum, default_value_t = SceneKind::Bumps)]
        scene: SceneKind,
        #[arg(long, value_enum, default_value_t = TrajKind::Pan)]
        traj: TrajKind,
        #[arg(long, value_enum, default_value_t = Degrade::All)]
        degrade: Degrade,
        #[arg(long, default_value_t = 30)]
        frames: usize,
        #[arg(long, default_value_t = 256)]
        size: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Full reconstruction: preprocess, keyframes, stitch, SfS, export.
    Pipeline {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Run the pipeline once per on/off combination of preprocessing switches.
    Ablate {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Comma-separated subset of rs, rsm, rud, dv.
        #[arg(long, value_delimiter = ',', default_value = "rs,rud,dv")]
        axes: Vec<String>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SceneKind {
    Flat,
    Hemisphere,
    Bumps,
}

#[derive(Clone, Copy, ValueEnum)]
enum TrajKind {
    Pan,
    Loop,
    Still,
}

#[derive(Clone, Copy, ValueEnum)]
enum Degrade {
    None,
    All,
    Specular,
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<PipelineConfig> {
    let mut cfg = match path {
        Some(p) => {
            PipelineConfig::read(p).with_context(|| format!("config: reading {}", p.display()))?
        }
        None => PipelineConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn gray(img: &Image) -> Image {
    if img.channels() == 1 {
        img.clone()
    } else {
        to_grayscale(img)
    }
}

fn frame_paths(input: &Path) -> Result<Vec<PathBuf>> {
    if input.is_file() {
        return Ok(vec![input.to_path_buf()]);
    }
    let paths = list_frames(input).with_context(|| format!("load: listing {}", input.display()))?;
    if paths.is_empty() {
        bail!("load: no frames in {}", input.display());
    }
    Ok(paths)
}

fn preprocess(input: &Path, out: &Path, cfg: &PipelineConfig) -> Result<()> {
    cfg.preprocess
        .validate(cfg.intrinsics.as_ref())
        .context("config")?;
    std::fs::create_dir_all(out)?;
    for path in frame_paths(input)? {
        let img = load_image(&path).with_context(|| format!("load: {}", path.display()))?;
        let p = preprocess_frame(&img, &cfg.preprocess, cfg.intrinsics.as_ref())
            .context("preprocess")?;
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("frame");
        save_image(&p.image, &out.join(format!("{stem}.png")))?;
        save_mask(&p.specular, &out.join(format!("{stem}_specular.png")))?;
    }
    Ok(())
}

fn keyframes(
    input: &Path,
    out: Option<&Path>,
    cfg: &PipelineConfig,
    preprocess: bool,
) -> Result<()> {
    let mut frames = load_frames(input).context("load")?;
    if preprocess {
        cfg.preprocess
            .validate(cfg.intrinsics.as_ref())
            .context("config")?;
        let pose = PreprocessConfig {
            enable_reflection_suppression: cfg.suppress_for_pose(),
            ..cfg.preprocess.clone()
        };
        frames = frames
            .par_iter()
            .map(|f| preprocess_frame(f, &pose, cfg.intrinsics.as_ref()).map(|p| p.image))
            .collect::<Result<_, _>>()
            .context("preprocess")?;
    }
    let frames: Vec<Image> = frames.iter().map(gray).collect();
    let sel = select_keyframes(
        &frames,
        cfg.keyframe.threshold,
        cfg.keyframe.fallback_window,
        &cfg.flow,
    )
    .context("keyframes")?;
    match out {
        Some(p) => std::fs::write(p, sel.to_manifest())?,
        None => print!("{}", sel.to_manifest()),
    }
    Ok(())
}

fn stitch(input: &Path, out: &Path, cfg: &PipelineConfig) -> Result<()> {
    let frames = load_frames(input).context("load")?;
    let reg = register_frames(&frames, None, cfg)?;
    let comp = compose_mosaic(&frames, &reg.transforms, None, cfg)?;
    std::fs::create_dir_all(out)?;
    save_image(&comp.mosaic, &out.join("mosaic.png"))?;
    let stamps: Vec<f64> = (0..frames.len()).map(|i| i as f64 / cfg.fps).collect();
    Trajectory::from_transforms(&stamps, &reg.transforms, cfg.units_per_px)
        .and_then(|t| t.write_tum(&out.join("poses.txt")))
        .context("export")?;
    info!(
        "transfer error {:.3} chained, {:.3} adjusted",
        reg.transfer_error_chained, reg.transfer_error_adjusted
    );
    Ok(())
}

fn sfs(
    input: &Path,
    out: &Path,
    cloud: Option<&Path>,
    iterations: usize,
    light: Option<&[f64]>,
    stride: usize,
) -> Result<()> {
    let img = gray(&load_image(input).with_context(|| format!("load: {}", input.display()))?);
    let params = match light {
        Some(&[tilt, slant, albedo]) => LightParams::new(tilt, slant, albedo).context("sfs")?,
        Some(_) => bail!("sfs: --light takes tilt, slant and albedo"),
        None => estimate_light_params(&img).context("sfs")?.params,
    };
    // Exact zeros are the empty margin of a mosaic.
    let outside = BitMask::from_fn(img.width(), img.height(), |x, y| img.get(x, y, 0) == 0.0);
    let cfg = endomap::sfs::SfsConfig {
        iterations,
        fixed_params: Some(params),
    };
    let depth = tsai_shah_depth(&img, &params, &cfg, Some(&outside)).context("sfs")?;
    write_pfm(depth.z(), out).context("export")?;
    if let Some(c) = cloud {
        let inside = outside.not();
        let pts = depth_to_pointcloud(&depth, stride, Some(&inside)).context("export")?;
        PointCloud::new(pts)
            .and_then(|pc| pc.write_ply(c))
            .context("export")?;
    }
    Ok(())
}

fn evaluate(
    est_traj: Option<&Path>,
    gt_traj: Option<&Path>,
    est_cloud: Option<&Path>,
    gt_cloud: Option<&Path>,
    icp_scale: bool,
    out: Option<&Path>,
) -> Result<()> {
    let mut report = EvalReport::default();
    match (est_traj, gt_traj) {
        (Some(e), Some(g)) => {
            let (e, g) = (
                Trajectory::read_tum(e).context("load")?,
                Trajectory::read_tum(g).context("load")?,
            );
            let sim = ate_rmse(&e, &g, &AteOptions::default()).context("evaluate")?;
            let rigid = AteOptions {
                with_scale: false,
                ..AteOptions::default()
            };
            let se = ate_rmse(&e, &g, &rigid).context("evaluate")?;
            report.ate_rmse_sim3 = Some(sim.rmse);
            report.ate_rmse_se3 = Some(se.rmse);
            report.ate_pairs = Some(se.pairs);
        }
        (None, None) => {}
        _ => bail!("evaluate: --est-traj and --gt-traj go together"),
    }
    match (est_cloud, gt_cloud) {
        (Some(e), Some(g)) => {
            let (e, g) = (
                PointCloud::read_ply(e).context("load")?,
                PointCloud::read_ply(g).context("load")?,
            );
            let params = IcpParams {
                with_scale: icp_scale,
                ..IcpParams::default()
            };
            let icp = icp_align(&e, &g, &params).context("evaluate")?;
            report.icp_residual = Some(icp.residual);
            report.ade_rmse =
                Some(ade_rmse(&e.transformed(&icp.transform), &g).context("evaluate")?);
        }
        (None, None) => {}
        _ => bail!("evaluate: --est-cloud and --gt-cloud go together"),
    }
    let json = serde_json::to_string_pretty(&report)?;
    match out {
        Some(p) => std::fs::write(p, json + "\n")?,
        None => println!("{json}"),
    }
    Ok(())
}

fn synth(
    scene: SceneKind,
    traj: TrajKind,
    degrade: Degrade,
    n: usize,
    size: usize,
    out: &Path,
    seed: u64,
) -> Result<()> {
    if n == 0 || size < 16 {
        bail!("synth: need at least one frame of at least 16 px");
    }
    let step = 5.0;
    let margin = size as f64 / 2.0;
    let (views, extent) = match traj {
        TrajKind::Pan => (
            pan_trajectory(n, [margin, margin], [step, 0.0]),
            (
                size as f64 + step * n as f64 + 2.0 * margin,
                size as f64 + 2.0 * margin,
            ),
        ),
        TrajKind::Loop => {
            let reach = size as f64 * 1.5 + step * n as f64;
            (
                pan_loop_trajectory(n, [margin, margin], step, 0.05),
                (reach + 2.0 * margin, reach + 2.0 * margin),
            )
        }
        TrajKind::Still => (
            still_trajectory(n, [margin, margin]),
            (size as f64 + 2.0 * margin, size as f64 + 2.0 * margin),
        ),
    };
    let (w, h) = (extent.0.ceil() as usize, extent.1.ceil() as usize);
    let scene = match scene {
        SceneKind::Flat => SyntheticScene::flat(w, h, seed),
        SceneKind::Hemisphere => SyntheticScene::hemisphere(w, h, 0.4, seed),
        SceneKind::Bumps => SyntheticScene::bumps(w, h, (w * h / 4000).max(4), seed),
    };
    let deg = match degrade {
        Degrade::None => DegradationConfig::default(),
        Degrade::All => DegradationConfig::all(),
        Degrade::Specular => DegradationConfig::specular_only(5),
    };
    let seq = generate_sequence(&scene, &views, &deg, (size, size), seed).context("synth")?;
    write_sequence(out, &scene, &deg, &seq, seed).context("export")?;
    let cfg = PipelineConfig {
        intrinsics: Some(deg.intrinsics(size, size)),
        units_per_px: scene.units_per_px,
        seed,
        ..PipelineConfig::default()
    };
    std::fs::write(out.join("pipeline.toml"), cfg.to_toml()?)?;
    Ok(())
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .parse()
            .with_context(|| format!("config: {THREADS_ENV}={v:?} is not a thread count"))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("config: thread pool")?;
    }
    Ok(())
}

fn require_input(path: &Path) -> Result<()> {
    if !path.exists() {
        bail!("load: {} does not exist", path.display());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    configure_threads()?;
    match &cli.command {
        Command::Preprocess { input, .. }
        | Command::Keyframes { input, .. }
        | Command::Stitch { input, .. }
        | Command::Sfs { input, .. }
        | Command::Pipeline { input, .. }
        | Command::Ablate { input, .. } => require_input(input)?,
        Command::Evaluate { .. } | Command::Synth { .. } => {}
    }
    match cli.command {
        Command::Preprocess { input, out, config } => {
            preprocess(&input, &out, &load_config(config.as_deref(), cli.seed)?)
        }
        Command::Keyframes {
            input,
            out,
            config,
            threshold,
            window,
        } => {
            let mut cfg = load_config(config.as_deref(), cli.seed)?;
            if let Some(t) = threshold {
                cfg.keyframe.threshold = t;
            }
            if let Some(w) = window {
                cfg.keyframe.fallback_window = w;
            }
            keyframes(&input, out.as_deref(), &cfg, config.is_some())
        }
        Command::Stitch { input, out, config } => {
            stitch(&input, &out, &load_config(config.as_deref(), cli.seed)?)
        }
        Command::Sfs {
            input,
            out,
            cloud,
            iterations,
            light,
            stride,
        } => sfs(
            &input,
            &out,
            cloud.as_deref(),
            iterations,
            light.as_deref(),
            stride,
        ),
        Command::Evaluate {
            est_traj,
            gt_traj,
            est_cloud,
            gt_cloud,
            icp_scale,
            out,
        } => evaluate(
            est_traj.as_deref(),
            gt_traj.as_deref(),
            est_cloud.as_deref(),
            gt_cloud.as_deref(),
            icp_scale,
            out.as_deref(),
        ),
        Command::Synth {
            scene,
            traj,
            degrade,
            frames,
            size,
            out,
        } => synth(
            scene,
            traj,
            degrade,
            frames,
            size,
            &out,
            cli.seed.unwrap_or(0),
        ),
        Command::Pipeline { input, out, config } => {
            let cfg = load_config(config.as_deref(), cli.seed)?;
            let res = run_pipeline(&cfg, &input, &out)?;
            info!(
                "{} keyframes, mosaic {}x{}",
                res.metrics.keyframes.len(),
                res.metrics.mosaic_width,
                res.metrics.mosaic_height
            );
            Ok(())
        }
        Command::Ablate {
            input,
            out,
            config,
            axes,
        } => {
            let cfg = load_config(config.as_deref(), cli.seed)?;
            let axes = axes
                .iter()
                .map(|a| AblationAxis::parse(a.trim()))
                .collect::<Result<Vec<_>, _>>()
                .context("config")?;
            std::fs::create_dir_all(&out)?;
            let report = run_ablation(&cfg, &input, &axes, &out)?;
            for r in &report.rows {
                println!(
                    "{}\tate_se3={}\tade={}",
                    r.name,
                    r.ate_rmse_se3.map_or("-".into(), |v| format!("{v:.6}")),
                    r.ade_rmse.map_or("-".into(), |v| format!("{v:.6}"))
                );
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // Stage-tagged errors already embed their source in the message.
            let mut msg = e.to_string();
            for cause in e.chain().skip(1) {
                let c = cause.to_string();
                if !msg.ends_with(&c) {
                    msg = format!("{msg}: {c}");
                }
            }
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
