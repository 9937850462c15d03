//! End-to-end reconstruction: preprocess, keyframes, pairwise registration,
//! bundle adjustment, mosaic composition, shape from shading and export,
//! plus ablation sweeps over the preprocessing switches.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{
    ade_rmse, ate_rmse, icp_align, AteOptions, EvalReport, IcpParams, PointCloud, Trajectory,
};
use crate::flow::{Correspondence, FlowParams};
use crate::imgcore::io::{load_image, read_pfm, save_image, write_pfm};
use crate::imgcore::{to_grayscale, BitMask, Image, Raster};
use crate::keyframe::{select_keyframes, DEFAULT_FALLBACK_WINDOW, DEFAULT_THRESHOLD};
use crate::preprocess::{preprocess_frame, CameraIntrinsics, PreprocessConfig, Preprocessed};
use crate::register::{
    bundle_adjust, chain_transforms, default_bands, estimate_pair, gain_compensate,
    gauss_newton_affine, multiband_blend, total_transfer_error, union_mask, warp_layers, Canvas,
    PairEstimate, PatchWeights, RegisterParams, Transform2D,
};
use crate::sfs::{
    depth_to_pointcloud, estimate_light_params, mean_abs_residual, tsai_shah_depth, DepthMap,
    LightParams, SfsConfig,
};
use crate::synth::SceneManifest;

pub const METRICS_VERSION: u32 = 1;

/// Which branch of the pipeline sees reflection-suppressed frames.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReflectionScope {
    /// Pose estimation and map (blending, shape from shading).
    #[default]
    Both,
    MapOnly,
    PoseOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KeyframeConfig {
    /// Mean flow magnitude in pixels that promotes a frame.
    pub threshold: f64,
    pub fallback_window: usize,
}

impl Default for KeyframeConfig {
    fn default() -> Self {
        Self {
            threshold: DEFAULT_THRESHOLD,
            fallback_window: DEFAULT_FALLBACK_WINDOW,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// Required when undistortion is enabled.
    pub intrinsics: Option<CameraIntrinsics>,
    pub preprocess: PreprocessConfig,
    pub reflection_scope: ReflectionScope,
    pub keyframe: KeyframeConfig,
    pub flow: FlowParams,
    pub register: RegisterParams,
    /// Non-consecutive keyframe pairs whose estimated overlap exceeds this
    /// fraction are registered too and enter bundle adjustment.
    pub pair_overlap: f64,
    /// Extra pairs whose transform moves their overlap points farther than
    /// this (mean, px) from the chained estimate are dropped.
    pub pair_gate_px: f64,
    pub sfs: SfsConfig,
    /// Sampling stride of the exported point cloud, mosaic pixels.
    pub cloud_stride: usize,
    /// Physical size of one pixel in exported poses and clouds.
    pub units_per_px: f64,
    /// Frame rate used for pose timestamps.
    pub fps: f64,
    /// Seeds every stochastic stage.
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            intrinsics: None,
            preprocess: PreprocessConfig::default(),
            reflection_scope: ReflectionScope::Both,
            keyframe: KeyframeConfig::default(),
            flow: FlowParams::default(),
            register: RegisterParams::default(),
            pair_overlap: 0.25,
            pair_gate_px: 1.0,
            sfs: SfsConfig::default(),
            cloud_stride: 2,
            units_per_px: 1.0,
            fps: 30.0,
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        fn as_config(e: Error) -> Error {
            match e {
                Error::Config(_) => e,
                other => Error::Config(other.to_string()),
            }
        }
        self.preprocess.validate(self.intrinsics.as_ref())?;
        self.flow.validate().map_err(as_config)?;
        self.sfs.validate().map_err(as_config)?;
        if let Some(l) = &self.sfs.fixed_params {
            l.validate().map_err(as_config)?;
        }
        if !(self.keyframe.threshold > 0.0) || self.keyframe.fallback_window == 0 {
            return Err(Error::Config(
                "keyframe threshold and fallback_window must be positive".into(),
            ));
        }
        if self.register.stride == 0
            || !(self.register.patch_radius > 0.0)
            || self.register.gauss_newton.max_iters == 0
        {
            return Err(Error::Config(
                "registration stride, patch_radius and iterations must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.pair_overlap) || !(self.pair_gate_px > 0.0) {
            return Err(Error::Config(
                "pair_overlap must lie in [0, 1] and pair_gate_px be positive".into(),
            ));
        }
        if self.cloud_stride == 0 || !(self.units_per_px > 0.0) || !(self.fps > 0.0) {
            return Err(Error::Config(
                "cloud_stride, units_per_px and fps must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn suppress_for_pose(&self) -> bool {
        self.preprocess.enable_reflection_suppression
            && self.reflection_scope != ReflectionScope::MapOnly
    }

    pub fn suppress_for_map(&self) -> bool {
        self.preprocess.enable_reflection_suppression
            && self.reflection_scope != ReflectionScope::PoseOnly
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LightReport {
    pub tilt: f64,
    pub slant: f64,
    pub albedo: f64,
    pub estimated: bool,
    pub degenerate: bool,
}

/// Contents of `metrics.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineMetrics {
    pub version: u32,
    pub frames: usize,
    pub keyframes: Vec<usize>,
    pub fallback_keyframes: usize,
    /// `[src, dst]` keyframe positions of every registered pair.
    pub pairs: Vec<[usize; 2]>,
    pub transfer_error_chained: f64,
    pub transfer_error_adjusted: f64,
    pub mosaic_width: usize,
    pub mosaic_height: usize,
    pub light: LightReport,
    pub sfs_mean_abs_residual: f64,
    pub cloud_points: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub evaluation: Option<EvalReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trajectory_length: Option<f64>,
    /// Wall-clock milliseconds per stage; informational only.
    pub timings_ms: BTreeMap<String, f64>,
}

/// In-memory results of a run; the same data is written to disk.
#[derive(Clone, Debug)]
pub struct PipelineOutput {
    pub metrics: PipelineMetrics,
    pub mosaic: Image,
    pub depth: DepthMap,
    pub poses: Trajectory,
    pub cloud: PointCloud,
    /// Keyframe-to-anchor transforms after bundle adjustment.
    pub transforms: Vec<Transform2D>,
    /// Registered keyframe pairs that entered bundle adjustment.
    pub pairs: Vec<PairEstimate>,
}

pub const ARTIFACTS: [&str; 5] = [
    "mosaic.png",
    "depth.pfm",
    "cloud.ply",
    "poses.txt",
    "metrics.json",
];

/// Frame files (`png`, `pgm`, `ppm`) in `dir`, sorted by name.
pub fn list_frames(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension().and_then(|e| e.to_str()).is_some_and(|e| {
                    matches!(e.to_ascii_lowercase().as_str(), "png" | "pgm" | "ppm")
                })
        })
        .collect();
    out.sort();
    Ok(out)
}

pub fn load_frames(dir: &Path) -> Result<Vec<Image>> {
    let paths = list_frames(dir)?;
    if paths.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no frames in {}",
            dir.display()
        )));
    }
    paths.iter().map(|p| load_image(p)).collect()
}

/// Ground truth shipped with a synthetic sequence.
#[derive(Clone, Debug)]
pub struct GroundTruth {
    pub trajectory: Trajectory,
    pub depth: Option<(Raster, SceneManifest)>,
}

impl GroundTruth {
    /// Reads `gt_traj.txt` and, when present, `gt_depth.pfm` with
    /// `scene.json`. Returns `None` without a trajectory file.
    pub fn load(dir: &Path) -> Result<Option<Self>> {
        let traj = dir.join("gt_traj.txt");
        if !traj.exists() {
            return Ok(None);
        }
        let trajectory = Trajectory::read_tum(&traj)?;
        let (depth_path, scene_path) = (dir.join("gt_depth.pfm"), dir.join("scene.json"));
        let depth = if depth_path.exists() && scene_path.exists() {
            Some((read_pfm(&depth_path)?, SceneManifest::read(&scene_path)?))
        } else {
            None
        };
        Ok(Some(Self { trajectory, depth }))
    }
}

fn gray(img: &Image) -> Image {
    if img.channels() == 1 {
        img.clone()
    } else {
        to_grayscale(img)
    }
}

struct Timer(BTreeMap<String, f64>, Instant);

impl Timer {
    fn new() -> Self {
        Timer(BTreeMap::new(), Instant::now())
    }

    fn lap(&mut self, stage: &str) {
        let now = Instant::now();
        self.0
            .insert(stage.to_string(), (now - self.1).as_secs_f64() * 1e3);
        self.1 = now;
    }
}

fn preprocess_all(
    frames: &[Image],
    cfg: &PreprocessConfig,
    k: Option<&CameraIntrinsics>,
) -> Result<Vec<Preprocessed>> {
    frames
        .par_iter()
        .map(|f| preprocess_frame(f, cfg, k))
        .collect()
}

/// Fraction of frame `i` that lands inside frame `j` under global
/// transforms (frame -> anchor), on a 16x16 sample grid.
fn overlap_fraction(ti: &Transform2D, tj: &Transform2D, w: usize, h: usize) -> Result<f64> {
    let m = tj.inverse()?.compose(ti);
    let n = 16;
    let mut inside = 0;
    for a in 0..n {
        for b in 0..n {
            let p = [
                (a as f64 + 0.5) * w as f64 / n as f64,
                (b as f64 + 0.5) * h as f64 / n as f64,
            ];
            let q = m.apply(p);
            if q[0] >= 0.0 && q[1] >= 0.0 && q[0] <= (w - 1) as f64 && q[1] <= (h - 1) as f64 {
                inside += 1;
            }
        }
    }
    Ok(inside as f64 / (n * n) as f64)
}

fn mask_image(m: &BitMask) -> Image {
    let (w, h) = m.dims();
    Image::from_fn(w, h, |x, y| if m.get(x, y) { 1.0 } else { 0.0 })
}

/// Mean distance between where `p` and `chained` send the pair's points.
fn overlap_disagreement(p: &PairEstimate, chained: &Transform2D) -> f64 {
    let sum: f64 = p
        .inliers
        .iter()
        .map(|c| {
            let q = chained.apply(c.p1);
            (q[0] - c.p2[0]).hypot(q[1] - c.p2[1])
        })
        .sum();
    sum / p.inliers.len().max(1) as f64
}

/// Registers `i` onto `j` by Gauss-Newton alone, starting from `init`
/// (the chained estimate), with patches on a grid over the part of `i` that
/// lands inside `j`. Used for non-consecutive pairs, whose displacement is
/// beyond what flow bridges reliably.
#[allow(clippy::too_many_arguments)]
fn estimate_from_init(
    i: usize,
    j: usize,
    fi: &Image,
    fj: &Image,
    excl_i: &BitMask,
    init: &Transform2D,
    params: &RegisterParams,
) -> Result<PairEstimate> {
    let (w, h) = fi.dims();
    let (step, r) = (params.stride.max(1), params.patch_radius);
    let mut centers = Vec::new();
    for y in (step / 2..h).step_by(step) {
        for x in (step / 2..w).step_by(step) {
            let q = init.apply([x as f64, y as f64]);
            let inside =
                q[0] >= r && q[1] >= r && q[0] <= w as f64 - 1.0 - r && q[1] <= h as f64 - 1.0 - r;
            if inside && !excl_i.get(x, y) {
                centers.push([x as f64, y as f64]);
            }
        }
    }
    if centers.len() < 4 {
        return Err(Error::InsufficientMatches {
            found: centers.len(),
        });
    }
    let weights = PatchWeights::new(centers.clone(), r)?;
    let fit = gauss_newton_affine(fi, fj, init, &weights, &params.gauss_newton)?;
    Ok(PairEstimate {
        src: i,
        dst: j,
        transform: fit.transform,
        inliers: centers
            .iter()
            .map(|&c| Correspondence::new(c, fit.transform.apply(c)))
            .collect(),
        residual: fit.residual,
        converged: fit.converged,
    })
}

/// Registers consecutive keyframes, then every other pair whose chained
/// overlap exceeds `pair_overlap`, keeping those that agree with the chain.
fn register_keyframes(
    pose: &[Image],
    excl: &[BitMask],
    cfg: &PipelineConfig,
) -> Result<Vec<PairEstimate>> {
    let n = pose.len();
    let mut params = cfg.register.clone();
    params.ransac.seed = cfg.seed;
    let mut pairs: Vec<PairEstimate> = (1..n)
        .into_par_iter()
        .map(|k| {
            estimate_pair(
                k,
                k - 1,
                &pose[k],
                &pose[k - 1],
                Some(&excl[k]),
                &cfg.flow,
                &params,
            )
        })
        .collect::<Result<_>>()?;
    if n < 3 {
        return Ok(pairs);
    }
    let chained = chain_transforms(&pairs, n, 0)?;
    let (w, h) = pose[0].dims();
    let mut candidates = Vec::new();
    for j in 0..n {
        for i in j + 2..n {
            if overlap_fraction(&chained[i], &chained[j], w, h)? > cfg.pair_overlap {
                candidates.push((i, j));
            }
        }
    }
    let extra: Vec<Option<PairEstimate>> = candidates
        .par_iter()
        .map(|&(i, j)| {
            let expected = chained[j].inverse().ok()?.compose(&chained[i]);
            match estimate_from_init(i, j, &pose[i], &pose[j], &excl[i], &expected, &params) {
                Ok(p) if overlap_disagreement(&p, &expected) <= cfg.pair_gate_px => Some(p),
                Ok(_) => {
                    info!("pair ({i}, {j}) disagrees with the chained estimate, dropped");
                    None
                }
                Err(e) => {
                    info!("pair ({i}, {j}) not registered: {e}");
                    None
                }
            }
        })
        .collect();
    pairs.extend(extra.into_iter().flatten());
    Ok(pairs)
}

/// Keyframe registration result.
#[derive(Clone, Debug)]
pub struct Registration {
    pub pairs: Vec<PairEstimate>,
    /// Keyframe-to-anchor transforms; keyframe 0 is the anchor.
    pub transforms: Vec<Transform2D>,
    pub transfer_error_chained: f64,
    pub transfer_error_adjusted: f64,
}

/// Registers keyframes pairwise and bundle-adjusts them. `exclude[i]`
/// masks pixels of keyframe `i` that must not seed correspondences.
fn register_and_adjust(
    frames: &[Image],
    exclude: &[BitMask],
    cfg: &PipelineConfig,
    mut timer: Option<&mut Timer>,
) -> Result<Registration> {
    if frames.is_empty() || frames.len() != exclude.len() {
        return Err(
            Error::InvalidArgument("one exclusion mask per keyframe required".into())
                .in_stage("register"),
        );
    }
    let gray_frames: Vec<Image> = frames.iter().map(gray).collect();
    let pairs =
        register_keyframes(&gray_frames, exclude, cfg).map_err(|e| e.in_stage("register"))?;
    if let Some(t) = timer.as_deref_mut() {
        t.lap("register");
    }
    // Bundle adjustment sees each pair through its refined transform,
    // sampled at the inlier locations, rather than through raw flow.
    let pairs: Vec<PairEstimate> = pairs
        .into_iter()
        .map(|p| PairEstimate {
            inliers: p
                .inliers
                .iter()
                .map(|c| Correspondence::new(c.p1, p.transform.apply(c.p1)))
                .collect(),
            ..p
        })
        .collect();
    let n = frames.len();
    let adjust = || -> Result<Registration> {
        let chained = chain_transforms(&pairs, n, 0)?;
        let transforms = bundle_adjust(&pairs, n, 0, &cfg.register.bundle)?;
        let (c, a) = if pairs.is_empty() {
            (0.0, 0.0)
        } else {
            (
                total_transfer_error(&pairs, &chained)?,
                total_transfer_error(&pairs, &transforms)?,
            )
        };
        Ok(Registration {
            pairs: pairs.clone(),
            transforms,
            transfer_error_chained: c,
            transfer_error_adjusted: a,
        })
    };
    let reg = adjust().map_err(|e| e.in_stage("bundle_adjust"))?;
    if let Some(t) = timer {
        t.lap("bundle_adjust");
    }
    Ok(reg)
}

/// Public entry for registering a set of keyframes (first one is the anchor).
pub fn register_frames(
    frames: &[Image],
    exclude: Option<&[BitMask]>,
    cfg: &PipelineConfig,
) -> Result<Registration> {
    let none: Vec<BitMask>;
    let exclude = match exclude {
        Some(e) => e,
        None => {
            none = frames
                .iter()
                .map(|f| BitMask::empty(f.width(), f.height()))
                .collect();
            &none
        }
    };
    register_and_adjust(frames, exclude, cfg, None)
}

/// Blended mosaic in anchor coordinates.
#[derive(Clone, Debug)]
pub struct Composite {
    pub canvas: Canvas,
    pub mosaic: Image,
    /// Canvas pixels covered by at least one frame.
    pub support: BitMask,
    /// Canvas pixels flagged as specular in any covering frame.
    pub highlights: BitMask,
}

/// Warps, gain-compensates and multi-band blends `frames` with their
/// frame-to-anchor transforms. Specular masks, when given, are carried to
/// the canvas as well.
pub fn compose_mosaic(
    frames: &[Image],
    transforms: &[Transform2D],
    specular: Option<&[BitMask]>,
    cfg: &PipelineConfig,
) -> Result<Composite> {
    let run = || -> Result<Composite> {
        let (canvas, layers) = warp_layers(frames, transforms)?;
        let layers = gain_compensate(layers)?;
        let bands = cfg.register.bands.min(default_bands(&canvas)).max(1);
        let mosaic = multiband_blend(&layers, &canvas, bands)?;
        let support = union_mask(&layers, &canvas);
        let highlights = match specular {
            Some(masks) => {
                let masks: Vec<Image> = masks.iter().map(mask_image).collect();
                let (_, layers) = warp_layers(&masks, transforms)?;
                BitMask::from_fn(canvas.width, canvas.height, |x, y| {
                    layers
                        .iter()
                        .any(|l| l.covers(x, y) && l.value(x, y, 0) > 0.5)
                })
            }
            None => BitMask::empty(canvas.width, canvas.height),
        };
        Ok(Composite {
            canvas,
            mosaic,
            support,
            highlights,
        })
    };
    run().map_err(|e| e.in_stage("compose"))
}

/// Ground-truth cloud on the same anchor-plane samples as `est`, with depth
/// looked up in the scene through the first frame's view.
fn ground_truth_cloud(
    est: &[[f64; 3]],
    depth: &Raster,
    manifest: &SceneManifest,
    units: f64,
) -> Result<PointCloud> {
    let view0 = manifest
        .view_transforms()?
        .first()
        .copied()
        .ok_or_else(|| Error::InvalidArgument("scene manifest has no views".into()))?;
    let pts = est
        .iter()
        .map(|p| {
            let (ax, ay) = (p[0] / units, p[1] / units);
            let s = view0.apply([ax, ay]);
            [p[0], p[1], depth.sample_clamped(s[0], s[1], 0) * units]
        })
        .collect();
    PointCloud::new(pts)
}

fn evaluate(
    poses: &Trajectory,
    cloud: &PointCloud,
    gt: &GroundTruth,
    units: f64,
) -> Result<(EvalReport, f64)> {
    let mut report = EvalReport::default();
    if poses.len() >= 2 {
        let sim = ate_rmse(poses, &gt.trajectory, &AteOptions::default())?;
        let se = ate_rmse(
            poses,
            &gt.trajectory,
            &AteOptions {
                with_scale: false,
                ..AteOptions::default()
            },
        )?;
        report.ate_rmse_sim3 = Some(sim.rmse);
        report.ate_rmse_se3 = Some(se.rmse);
        report.ate_pairs = Some(se.pairs);
    }
    if let Some((depth, manifest)) = &gt.depth {
        let gt_cloud = ground_truth_cloud(cloud.points(), depth, manifest, units)?;
        // Rigid: with a free scale ICP can shrink a poor cloud onto a small
        // patch of the reference and report a deceptively small error.
        let params = IcpParams {
            with_scale: false,
            ..IcpParams::default()
        };
        let icp = icp_align(cloud, &gt_cloud, &params)?;
        report.icp_residual = Some(icp.residual);
        report.ade_rmse = Some(ade_rmse(&cloud.transformed(&icp.transform), &gt_cloud)?);
    }
    Ok((report, gt.trajectory.path_length()))
}

/// Runs the full pipeline on in-memory frames. `gt` enables evaluation.
pub fn run_frames(
    frames: &[Image],
    cfg: &PipelineConfig,
    gt: Option<&GroundTruth>,
) -> Result<PipelineOutput> {
    cfg.validate().map_err(|e| e.in_stage("config"))?;
    if frames.is_empty() {
        return Err(Error::InvalidArgument("no input frames".into()).in_stage("load"));
    }
    let dims = frames[0].dims();
    if frames.iter().any(|f| f.dims() != dims) {
        return Err(Error::DimensionMismatch("frames differ in size".into()).in_stage("load"));
    }
    let mut timer = Timer::new();
    let k = cfg.intrinsics.as_ref();

    let (rs_pose, rs_map) = (cfg.suppress_for_pose(), cfg.suppress_for_map());
    let with_rs = |on: bool| PreprocessConfig {
        enable_reflection_suppression: on,
        ..cfg.preprocess.clone()
    };
    let pose_pre =
        preprocess_all(frames, &with_rs(rs_pose), k).map_err(|e| e.in_stage("preprocess"))?;
    let map_pre = if rs_pose == rs_map {
        None
    } else {
        Some(preprocess_all(frames, &with_rs(rs_map), k).map_err(|e| e.in_stage("preprocess"))?)
    };
    let map_pre = map_pre.as_ref().unwrap_or(&pose_pre);
    timer.lap("preprocess");

    let pose_frames: Vec<Image> = pose_pre.iter().map(|p| gray(&p.image)).collect();
    let sel = select_keyframes(
        &pose_frames,
        cfg.keyframe.threshold,
        cfg.keyframe.fallback_window,
        &cfg.flow,
    )
    .map_err(|e| e.in_stage("keyframes"))?;
    info!(
        "{} keyframes out of {} frames",
        sel.indices.len(),
        frames.len()
    );
    timer.lap("keyframes");

    let kf_pose: Vec<Image> = sel
        .indices
        .iter()
        .map(|&i| pose_frames[i].clone())
        .collect();
    let kf_excl: Vec<BitMask> = sel
        .indices
        .iter()
        .map(|&i| pose_pre[i].specular.or(&pose_pre[i].valid.not()))
        .collect::<Result<_>>()
        .map_err(|e| e.in_stage("register"))?;
    let reg = register_and_adjust(&kf_pose, &kf_excl, cfg, Some(&mut timer))?;

    let kf_map: Vec<Image> = sel
        .indices
        .iter()
        .map(|&i| map_pre[i].image.clone())
        .collect();
    let kf_spec: Vec<BitMask> = sel
        .indices
        .iter()
        .map(|&i| map_pre[i].specular.clone())
        .collect();
    let comp = compose_mosaic(
        &kf_map,
        &reg.transforms,
        rs_map.then_some(&kf_spec[..]),
        cfg,
    )?;
    timer.lap("compose");
    let Composite {
        canvas,
        mosaic,
        support,
        highlights,
    } = comp;
    let Registration {
        pairs,
        transforms,
        transfer_error_chained: err_chain,
        transfer_error_adjusted: err_ba,
    } = reg;

    let sfs = || -> Result<_> {
        let (light, estimated, degenerate) = match cfg.sfs.fixed_params {
            Some(l) => (l, false, false),
            None => {
                // The light travels with the camera, so any full frame
                // estimates it; the mosaic's empty margins would bias it.
                let est = estimate_light_params(&gray(&kf_map[0]))?;
                (est.params, true, est.degenerate)
            }
        };
        let g = gray(&mosaic);
        let excluded = support.not().or(&highlights)?;
        let depth = tsai_shah_depth(&g, &light, &cfg.sfs, Some(&excluded))?;
        let residual = mean_abs_residual(&g, &depth, &light, Some(&support));
        Ok((light, estimated, degenerate, depth, residual))
    };
    let (light, estimated, degenerate, depth, sfs_residual): (LightParams, bool, bool, _, f64) =
        sfs().map_err(|e| e.in_stage("sfs"))?;
    timer.lap("sfs");

    let u = cfg.units_per_px;
    let cloud_pts: Vec<[f64; 3]> = depth_to_pointcloud(&depth, cfg.cloud_stride, Some(&support))
        .map_err(|e| e.in_stage("export"))?
        .into_iter()
        .map(|p| {
            let a = canvas.to_anchor(p[0], p[1]);
            [a[0] * u, a[1] * u, p[2] * u]
        })
        .collect();
    let cloud = PointCloud::new(cloud_pts).map_err(|e| e.in_stage("export"))?;
    let stamps: Vec<f64> = sel.indices.iter().map(|&i| i as f64 / cfg.fps).collect();
    let poses =
        Trajectory::from_transforms(&stamps, &transforms, u).map_err(|e| e.in_stage("export"))?;

    let (evaluation, trajectory_length) = match gt {
        Some(g) => {
            let (r, len) = evaluate(&poses, &cloud, g, u).map_err(|e| e.in_stage("evaluate"))?;
            timer.lap("evaluate");
            (Some(r), Some(len))
        }
        None => (None, None),
    };

    let metrics = PipelineMetrics {
        version: METRICS_VERSION,
        frames: frames.len(),
        keyframes: sel.indices.clone(),
        fallback_keyframes: sel.fallback.iter().filter(|&&f| f).count(),
        pairs: pairs.iter().map(|p| [p.src, p.dst]).collect(),
        transfer_error_chained: err_chain,
        transfer_error_adjusted: err_ba,
        mosaic_width: canvas.width,
        mosaic_height: canvas.height,
        light: LightReport {
            tilt: light.tilt,
            slant: light.slant,
            albedo: light.albedo,
            estimated,
            degenerate,
        },
        sfs_mean_abs_residual: sfs_residual,
        cloud_points: cloud.len(),
        evaluation,
        trajectory_length,
        timings_ms: timer.0,
    };
    let mut out = PipelineOutput {
        metrics,
        mosaic,
        depth,
        poses,
        cloud,
        transforms,
        pairs,
    };
    let total = out.metrics.timings_ms.values().sum();
    out.metrics.timings_ms.insert("total".into(), total);
    Ok(out)
}

/// Writes the five artifacts of a run into `out_dir`.
pub fn write_artifacts(out: &PipelineOutput, out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    save_image(&out.mosaic, &out_dir.join("mosaic.png"))?;
    write_pfm(out.depth.z(), &out_dir.join("depth.pfm"))?;
    out.cloud.write_ply(&out_dir.join("cloud.ply"))?;
    out.poses.write_tum(&out_dir.join("poses.txt"))?;
    let json =
        serde_json::to_string_pretty(&out.metrics).map_err(|e| Error::Parse(e.to_string()))?;
    std::fs::write(out_dir.join("metrics.json"), json + "\n")?;
    Ok(())
}

/// Loads frames (and ground truth, when present) from `input`, runs the
/// pipeline and writes the artifacts to `out_dir`.
pub fn run_pipeline(cfg: &PipelineConfig, input: &Path, out_dir: &Path) -> Result<PipelineOutput> {
    cfg.validate().map_err(|e| e.in_stage("config"))?;
    let frames = load_frames(input).map_err(|e| e.in_stage("load"))?;
    let gt = GroundTruth::load(input).map_err(|e| e.in_stage("load"))?;
    let out = run_frames(&frames, cfg, gt.as_ref())?;
    write_artifacts(&out, out_dir).map_err(|e| e.in_stage("export"))?;
    Ok(out)
}

/// Preprocessing switch varied by an ablation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    /// Reflection suppression for pose and map together.
    Rs,
    /// Reflection suppression on the map side; the pose side follows `Rs`
    /// when that axis is listed too and is off otherwise.
    Rsm,
    Undistort,
    Devignette,
}

impl AblationAxis {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rs" => Ok(Self::Rs),
            "rsm" => Ok(Self::Rsm),
            "rud" | "undistort" => Ok(Self::Undistort),
            "dv" | "devignette" => Ok(Self::Devignette),
            other => Err(Error::Config(format!("unknown ablation axis {other:?}"))),
        }
    }

    fn tag(self) -> &'static str {
        match self {
            Self::Rs => "rs",
            Self::Rsm => "rsm",
            Self::Undistort => "rud",
            Self::Devignette => "dv",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub reflection_pose: bool,
    pub reflection_map: bool,
    pub undistort: bool,
    pub devignette: bool,
    pub ate_rmse_sim3: Option<f64>,
    pub ate_rmse_se3: Option<f64>,
    pub ade_rmse: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub version: u32,
    pub axes: Vec<AblationAxis>,
    pub rows: Vec<AblationRow>,
}

/// Config for one on/off assignment of `axes`; unlisted switches keep the
/// base setting.
pub fn ablation_config(
    base: &PipelineConfig,
    axes: &[AblationAxis],
    on: &[bool],
) -> PipelineConfig {
    let mut cfg = base.clone();
    let get = |a: AblationAxis| axes.iter().position(|&x| x == a).map(|i| on[i]);
    let (rs, rsm) = (get(AblationAxis::Rs), get(AblationAxis::Rsm));
    let pose = match (rs, rsm) {
        (Some(v), _) => v,
        (None, Some(_)) => false,
        (None, None) => base.suppress_for_pose(),
    };
    let map = match (rs, rsm) {
        (None, None) => base.suppress_for_map(),
        _ => rs.unwrap_or(false) || rsm.unwrap_or(false),
    };
    cfg.preprocess.enable_reflection_suppression = pose || map;
    cfg.reflection_scope = match (pose, map) {
        (true, false) => ReflectionScope::PoseOnly,
        (false, true) => ReflectionScope::MapOnly,
        _ => ReflectionScope::Both,
    };
    if let Some(v) = get(AblationAxis::Undistort) {
        cfg.preprocess.enable_undistort = v;
    }
    if let Some(v) = get(AblationAxis::Devignette) {
        cfg.preprocess.enable_devignette = v;
    }
    cfg
}

/// Runs every on/off combination of `axes` on the frames in `input`
/// (which must carry ground truth), writing each run under
/// `out_dir/<name>` and the comparison to `out_dir/metrics.json`.
pub fn run_ablation(
    base: &PipelineConfig,
    input: &Path,
    axes: &[AblationAxis],
    out_dir: &Path,
) -> Result<AblationReport> {
    if axes.is_empty() {
        return Err(Error::Config("no ablation axes given".into()));
    }
    if axes.iter().enumerate().any(|(i, a)| axes[..i].contains(a)) {
        return Err(Error::Config("ablation axes listed twice".into()));
    }
    base.validate().map_err(|e| e.in_stage("config"))?;
    let frames = load_frames(input).map_err(|e| e.in_stage("load"))?;
    let gt = GroundTruth::load(input)
        .map_err(|e| e.in_stage("load"))?
        .ok_or_else(|| Error::Config("ablation needs ground truth (gt_traj.txt)".into()))?;
    let combos: Vec<Vec<bool>> = (0..1usize << axes.len())
        .map(|m| {
            (0..axes.len())
                .map(|b| m >> (axes.len() - 1 - b) & 1 == 1)
                .collect()
        })
        .collect();
    let rows = combos
        .par_iter()
        .map(|on| {
            let cfg = ablation_config(base, axes, on);
            let name: Vec<String> = axes
                .iter()
                .zip(on)
                .map(|(a, &v)| format!("{}-{}", a.tag(), if v { "on" } else { "off" }))
                .collect();
            let name = name.join("_");
            let out = run_frames(&frames, &cfg, Some(&gt))?;
            write_artifacts(&out, &out_dir.join(&name)).map_err(|e| e.in_stage("export"))?;
            let ev = out.metrics.evaluation.unwrap_or_default();
            Ok(AblationRow {
                name,
                reflection_pose: cfg.suppress_for_pose(),
                reflection_map: cfg.suppress_for_map(),
                undistort: cfg.preprocess.enable_undistort,
                devignette: cfg.preprocess.enable_devignette,
                ate_rmse_sim3: ev.ate_rmse_sim3,
                ate_rmse_se3: ev.ate_rmse_se3,
                ade_rmse: ev.ade_rmse,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let report = AblationReport {
        version: METRICS_VERSION,
        axes: axes.to_vec(),
        rows,
    };
    let json = serde_json::to_string_pretty(&report).map_err(|e| Error::Parse(e.to_string()))?;
    std::fs::write(out_dir.join("metrics.json"), json + "\n")?;
    Ok(report)
}
