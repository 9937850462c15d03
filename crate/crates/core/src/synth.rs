//! Synthetic endoscopy-like sequences with exact ground truth: Lambertian
//! height fields under a camera-attached light, viewed through 2D poses, then
//! degraded by vignetting, lens distortion, specular blobs and noise.

use std::f64::consts::TAU;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::Trajectory;
use crate::imgcore::io::{save_image, write_pfm};
use crate::imgcore::{Image, Raster};
use crate::preprocess::{apply_vignette, distort, CameraIntrinsics, RadialFrame, VignetteModel};
use crate::register::Transform2D;
use crate::sfs::{reflectance, shade, DepthMap, LightParams};

/// Frame rate of synthetic timestamps.
pub const FPS: f64 = 30.0;

/// Seeded sum of plane waves with log-uniform wavelengths in `[8, 80]` px,
/// normalized to unit variance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BandNoise {
    waves: Vec<[f64; 4]>,
    norm: f64,
}

impl BandNoise {
    pub fn new(seed: u64, count: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let waves: Vec<[f64; 4]> = (0..count)
            .map(|_| {
                let wavelength = 8.0 * 10f64.powf(rng.random::<f64>());
                let angle = TAU * rng.random::<f64>();
                let k = TAU / wavelength;
                [
                    k * angle.cos(),
                    k * angle.sin(),
                    TAU * rng.random::<f64>(),
                    0.5 + rng.random::<f64>(),
                ]
            })
            .collect();
        let power: f64 = waves.iter().map(|w| 0.5 * w[3] * w[3]).sum();
        Self {
            waves,
            norm: power.sqrt().max(f64::MIN_POSITIVE),
        }
    }

    pub fn eval(&self, x: f64, y: f64) -> f64 {
        self.waves
            .iter()
            .map(|[kx, ky, ph, a]| a * (kx * x + ky * y + ph).sin())
            .sum::<f64>()
            / self.norm
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SceneShape {
    Flat,
    /// Half sphere bulging toward the camera: `Z = -sqrt(R^2 - r^2)` inside.
    Hemisphere {
        cx: f64,
        cy: f64,
        radius: f64,
    },
    /// Sum of Gaussian bumps and dents, `(cx, cy, sigma, height)` each.
    Bumps {
        bumps: Vec<[f64; 4]>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticScene {
    /// Scene extent in pixels; views must stay inside.
    pub width: usize,
    pub height: usize,
    pub shape: SceneShape,
    pub light: LightParams,
    pub base_albedo: f64,
    /// Relative standard deviation of the albedo texture.
    pub texture_amplitude: f64,
    pub texture: BandNoise,
    /// Physical size of one scene pixel, cm.
    pub units_per_px: f64,
}

impl SyntheticScene {
    fn base(width: usize, height: usize, shape: SceneShape, seed: u64) -> Self {
        Self {
            width,
            height,
            shape,
            light: LightParams {
                tilt: 1.0,
                slant: 0.3,
                albedo: 1.0,
            },
            base_albedo: 0.7,
            texture_amplitude: 0.15,
            texture: BandNoise::new(seed, 24),
            units_per_px: 0.01,
        }
    }

    pub fn flat(width: usize, height: usize, seed: u64) -> Self {
        Self::base(width, height, SceneShape::Flat, seed)
    }

    /// Hemisphere centered in the scene with radius `radius_frac` of the
    /// shorter side.
    pub fn hemisphere(width: usize, height: usize, radius_frac: f64, seed: u64) -> Self {
        let shape = SceneShape::Hemisphere {
            cx: (width as f64 - 1.0) / 2.0,
            cy: (height as f64 - 1.0) / 2.0,
            radius: radius_frac * width.min(height) as f64,
        };
        Self::base(width, height, shape, seed)
    }

    /// Seeded field of smooth bumps and dents, heights up to 12 px.
    pub fn bumps(width: usize, height: usize, count: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xB0B5);
        let bumps = (0..count)
            .map(|_| {
                [
                    rng.random_range(0.0..width as f64),
                    rng.random_range(0.0..height as f64),
                    rng.random_range(15.0..40.0),
                    rng.random_range(-12.0..12.0),
                ]
            })
            .collect();
        Self::base(width, height, SceneShape::Bumps { bumps }, seed)
    }

    pub fn validate(&self) -> Result<()> {
        self.light.validate()?;
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidArgument(
                "scene extent must be positive".into(),
            ));
        }
        if !(self.base_albedo > 0.0 && self.base_albedo <= 1.0) || !(self.texture_amplitude >= 0.0)
        {
            return Err(Error::InvalidArgument("albedo must lie in (0, 1]".into()));
        }
        if !(self.units_per_px > 0.0) {
            return Err(Error::InvalidArgument(
                "units_per_px must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Ground-truth depth at a scene position.
    pub fn depth_at(&self, x: f64, y: f64) -> f64 {
        match &self.shape {
            SceneShape::Flat => 0.0,
            SceneShape::Hemisphere { cx, cy, radius } => {
                let r2 = (x - cx).powi(2) + (y - cy).powi(2);
                -(radius * radius - r2).max(0.0).sqrt()
            }
            SceneShape::Bumps { bumps } => bumps
                .iter()
                .map(|[cx, cy, s, hgt]| {
                    -hgt * (-((x - cx).powi(2) + (y - cy).powi(2)) / (2.0 * s * s)).exp()
                })
                .sum(),
        }
    }

    /// Albedo at a scene position, clamped to `[0.01, 1]`.
    pub fn albedo_at(&self, x: f64, y: f64) -> f64 {
        (self.base_albedo * (1.0 + self.texture_amplitude * self.texture.eval(x, y)))
            .clamp(0.01, 1.0)
    }

    /// Depth over the whole scene extent.
    pub fn depth_raster(&self) -> Raster {
        Raster::from_fn(self.width, self.height, |x, y| {
            self.depth_at(x as f64, y as f64)
        })
    }

    fn contains(&self, p: [f64; 2]) -> bool {
        p[0] >= 0.0
            && p[1] >= 0.0
            && p[0] <= (self.width - 1) as f64
            && p[1] <= (self.height - 1) as f64
    }
}

/// Renders the view whose frame pixels map to scene positions through
/// `view`. Depth is sampled per frame pixel and shaded with the same
/// backward differences used for shape from shading, so each pixel equals
/// `albedo * max(0, R(p, q))` exactly.
pub fn render_lambertian(
    scene: &SyntheticScene,
    view: &Transform2D,
    dims: (usize, usize),
) -> Result<(Image, DepthMap)> {
    scene.validate()?;
    let (w, h) = dims;
    if w == 0 || h == 0 {
        return Err(Error::InvalidArgument("frame dims must be positive".into()));
    }
    let corners = [
        [0.0, 0.0],
        [(w - 1) as f64, 0.0],
        [0.0, (h - 1) as f64],
        [(w - 1) as f64, (h - 1) as f64],
    ];
    if !corners.iter().all(|&c| scene.contains(view.apply(c))) {
        return Err(Error::ViewOutOfBounds { index: 0 });
    }
    let mut z = Raster::zeros(w, h, 1);
    let mut albedo = Raster::zeros(w, h, 1);
    for y in 0..h {
        for x in 0..w {
            let [sx, sy] = view.apply([x as f64, y as f64]);
            z.set(x, y, 0, scene.depth_at(sx, sy));
            albedo.set(x, y, 0, scene.albedo_at(sx, sy));
        }
    }
    let unit = LightParams {
        albedo: 1.0,
        ..scene.light
    };
    let img = shade(&z, &albedo, &unit)?;
    Ok((img, DepthMap::from_z(z)?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DegradationConfig {
    pub vignette: VignetteModel,
    pub k1: f64,
    pub k2: f64,
    pub specular_count: usize,
    pub specular_radius: f64,
    pub specular_intensity: f64,
    pub noise_sigma: f64,
}

impl Default for DegradationConfig {
    /// Everything off.
    fn default() -> Self {
        Self {
            vignette: VignetteModel::identity(),
            k1: 0.0,
            k2: 0.0,
            specular_count: 0,
            specular_radius: 4.0,
            specular_intensity: 1.0,
            noise_sigma: 0.0,
        }
    }
}

impl DegradationConfig {
    /// All degradations on at moderate strength.
    pub fn all() -> Self {
        Self {
            vignette: VignetteModel {
                a2: -0.3,
                a4: 0.0,
                a6: 0.0,
            },
            k1: -0.08,
            k2: 0.0,
            specular_count: 3,
            specular_radius: 4.0,
            specular_intensity: 1.0,
            noise_sigma: 0.01,
        }
    }

    /// Only specular blobs.
    pub fn specular_only(count: usize) -> Self {
        Self {
            specular_count: count,
            ..Self::default()
        }
    }

    pub fn has_distortion(&self) -> bool {
        self.k1 != 0.0 || self.k2 != 0.0
    }

    /// Camera model behind the distortion: centered principal point and a
    /// focal length equal to the frame width.
    pub fn intrinsics(&self, width: usize, height: usize) -> CameraIntrinsics {
        CameraIntrinsics {
            k1: self.k1,
            k2: self.k2,
            ..CameraIntrinsics::centered(width, height, width as f64)
        }
    }
}

/// Vignette, forward lens distortion, saturated specular disks and seeded
/// Gaussian noise, in that order, clamped to `[0, 1]`.
pub fn degrade(img: &Image, cfg: &DegradationConfig, seed: u64) -> Image {
    let (w, h) = img.dims();
    let mut out = img.clone();
    if cfg.vignette != VignetteModel::identity() {
        out = apply_vignette(&out, &cfg.vignette);
    }
    if cfg.has_distortion() {
        out = distort(&out, &cfg.intrinsics(w, h));
    }
    add_artifacts(out, cfg, seed)
}

/// Specular disks and noise only.
fn add_artifacts(img: Image, cfg: &DegradationConfig, seed: u64) -> Image {
    let (w, h) = img.dims();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut r = img.into_raster();
    let ch = r.channels();
    for _ in 0..cfg.specular_count {
        let cx = rng.random_range(0.0..w as f64);
        let cy = rng.random_range(0.0..h as f64);
        let rad = cfg.specular_radius;
        let (x0, x1) = (
            (cx - rad).floor().max(0.0) as usize,
            ((cx + rad).ceil() as usize).min(w - 1),
        );
        let (y0, y1) = (
            (cy - rad).floor().max(0.0) as usize,
            ((cy + rad).ceil() as usize).min(h - 1),
        );
        for y in y0..=y1 {
            for x in x0..=x1 {
                if (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2) <= rad * rad {
                    for c in 0..ch {
                        let v = r.get(x, y, c).max(cfg.specular_intensity);
                        r.set(x, y, c, v);
                    }
                }
            }
        }
    }
    if cfg.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, cfg.noise_sigma).expect("sigma is positive");
        for v in r.data_mut() {
            *v += normal.sample(&mut rng);
        }
    }
    Image::from_raster(r)
}

/// Renders a distorted, vignetted view by evaluating the scene at each
/// pixel's ideal location, instead of resampling an ideal render. Shading
/// uses the same one-pixel backward differences as [`render_lambertian`],
/// taken in ideal frame coordinates.
pub fn render_through_lens(
    scene: &SyntheticScene,
    view: &Transform2D,
    dims: (usize, usize),
    cfg: &DegradationConfig,
) -> Result<Image> {
    scene.validate()?;
    let (w, h) = dims;
    let k = cfg.intrinsics(w, h);
    let frame = RadialFrame::for_dims(w, h);
    let unit = LightParams {
        albedo: 1.0,
        ..scene.light
    };
    let z = |u: f64, v: f64| {
        let s = view.apply([u, v]);
        scene.depth_at(s[0], s[1])
    };
    let mut out = Raster::zeros(w, h, 1);
    for y in 0..h {
        for x in 0..w {
            let (u, v) = k.undistort_pixel(x as f64, y as f64);
            let s = view.apply([u, v]);
            if !scene.contains(s) {
                return Err(Error::ViewOutOfBounds { index: 0 });
            }
            let z0 = z(u, v);
            let (p, q) = (z0 - z(u - 1.0, v), z0 - z(u, v - 1.0));
            let shade = reflectance(p, q, &unit).max(0.0);
            let gain = cfg.vignette.eval(frame.radius(u, v));
            out.set(x, y, 0, gain * scene.albedo_at(s[0], s[1]) * shade);
        }
    }
    Ok(Image::from_raster(out))
}

/// Straight pan: frame `i` has its origin at `start + i * step`.
pub fn pan_trajectory(n: usize, start: [f64; 2], step: [f64; 2]) -> Vec<Transform2D> {
    (0..n)
        .map(|i| {
            Transform2D::translation(start[0] + i as f64 * step[0], start[1] + i as f64 * step[1])
        })
        .collect()
}

/// Pan for the first half, then an arc that turns the view while moving,
/// `speed` px per frame throughout.
pub fn pan_loop_trajectory(
    n: usize,
    start: [f64; 2],
    speed: f64,
    turn_per_frame: f64,
) -> Vec<Transform2D> {
    let n_pan = n / 2;
    let mut out = Vec::with_capacity(n);
    let (mut x, mut y, mut heading) = (start[0], start[1], 0.0f64);
    for i in 0..n {
        let (s, c) = heading.sin_cos();
        out.push(Transform2D::affine([c, -s, s, c, x, y]));
        if i + 1 >= n_pan {
            heading += turn_per_frame;
        }
        x += speed * heading.cos();
        y += speed * heading.sin();
    }
    out
}

pub fn still_trajectory(n: usize, origin: [f64; 2]) -> Vec<Transform2D> {
    vec![Transform2D::translation(origin[0], origin[1]); n]
}

#[derive(Clone, Debug)]
pub struct SyntheticSequence {
    pub frames: Vec<Image>,
    pub views: Vec<Transform2D>,
    /// One pose per frame at 30 fps, in cm.
    pub poses: Trajectory,
    pub depth: Vec<DepthMap>,
}

/// Renders and degrades one frame per view; frame `i` uses noise seed
/// `seed + i`. With lens distortion on, frames come from
/// [`render_through_lens`] so they carry a single resampling.
pub fn generate_sequence(
    scene: &SyntheticScene,
    views: &[Transform2D],
    cfg: &DegradationConfig,
    dims: (usize, usize),
    seed: u64,
) -> Result<SyntheticSequence> {
    if views.is_empty() {
        return Err(Error::InvalidArgument("empty trajectory".into()));
    }
    let tag = |i: usize| {
        move |e| match e {
            Error::ViewOutOfBounds { .. } => Error::ViewOutOfBounds { index: i },
            other => other,
        }
    };
    let rendered: Vec<(Image, DepthMap)> = views
        .par_iter()
        .enumerate()
        .map(|(i, v)| {
            let (img, depth) = render_lambertian(scene, v, dims).map_err(tag(i))?;
            let frame_seed = seed.wrapping_add(i as u64);
            let frame = if cfg.has_distortion() {
                add_artifacts(
                    render_through_lens(scene, v, dims, cfg).map_err(tag(i))?,
                    cfg,
                    frame_seed,
                )
            } else {
                degrade(&img, cfg, frame_seed)
            };
            Ok((frame, depth))
        })
        .collect::<Result<_>>()?;
    let (frames, depth): (Vec<Image>, Vec<DepthMap>) = rendered.into_iter().unzip();
    let timestamps: Vec<f64> = (0..views.len()).map(|i| i as f64 / FPS).collect();
    let poses = Trajectory::from_transforms(&timestamps, views, scene.units_per_px)?;
    Ok(SyntheticSequence {
        frames,
        views: views.to_vec(),
        poses,
        depth,
    })
}

/// Contents of `scene.json` next to a written sequence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneManifest {
    pub version: u32,
    pub scene: SyntheticScene,
    pub degradation: DegradationConfig,
    pub frame_width: usize,
    pub frame_height: usize,
    pub seed: u64,
    /// Camera model of the distortion, usable for undistortion.
    pub intrinsics: CameraIntrinsics,
    /// Row-major 3x3 frame-to-scene transform per frame.
    pub views: Vec<[f64; 9]>,
    pub frames: Vec<String>,
}

impl SceneManifest {
    pub fn view_transforms(&self) -> Result<Vec<Transform2D>> {
        self.views
            .iter()
            .map(|v| Transform2D::from_row_major(*v))
            .collect()
    }

    pub fn read(path: &Path) -> Result<Self> {
        serde_json::from_str(&std::fs::read_to_string(path)?)
            .map_err(|e| Error::Parse(e.to_string()))
    }
}

/// Writes `frame_NNNN.png`, `gt_traj.txt`, `gt_depth.pfm` (scene extent) and
/// `scene.json` into `dir`.
pub fn write_sequence(
    dir: &Path,
    scene: &SyntheticScene,
    cfg: &DegradationConfig,
    seq: &SyntheticSequence,
    seed: u64,
) -> Result<SceneManifest> {
    std::fs::create_dir_all(dir)?;
    let (w, h) = seq.frames[0].dims();
    let mut names = Vec::with_capacity(seq.frames.len());
    for (i, f) in seq.frames.iter().enumerate() {
        let name = format!("frame_{i:04}.png");
        save_image(f, &dir.join(&name))?;
        names.push(name);
    }
    seq.poses.write_tum(&dir.join("gt_traj.txt"))?;
    write_pfm(&scene.depth_raster(), &dir.join("gt_depth.pfm"))?;
    let manifest = SceneManifest {
        version: 1,
        scene: scene.clone(),
        degradation: cfg.clone(),
        frame_width: w,
        frame_height: h,
        seed,
        intrinsics: cfg.intrinsics(w, h),
        views: seq.views.iter().map(Transform2D::to_row_major).collect(),
        frames: names,
    };
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Parse(e.to_string()))?;
    std::fs::write(dir.join("scene.json"), json)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::{farneback_flow, median, FlowParams};
    use crate::preprocess::devignette;

    fn plain(scene: &mut SyntheticScene) {
        scene.texture_amplitude = 0.0;
    }

    #[test]
    fn flat_frontal_plane_is_constant() {
        let mut s = SyntheticScene::flat(64, 64, 1);
        plain(&mut s);
        s.base_albedo = 0.8;
        s.light = LightParams::new(0.0, 0.0, 1.0).unwrap();
        let (img, _) = render_lambertian(&s, &Transform2D::identity(), (32, 32)).unwrap();
        assert!(img
            .as_raster()
            .data()
            .iter()
            .all(|&v| (v - 0.8).abs() < 1e-15));
    }

    #[test]
    fn hemisphere_brightest_where_normal_meets_light() {
        let mut s = SyntheticScene::hemisphere(128, 128, 0.4, 1);
        plain(&mut s);
        let (img, _) = render_lambertian(&s, &Transform2D::identity(), (128, 128)).unwrap();
        let data = img.as_raster().data();
        let max = data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let at: Vec<usize> = (0..data.len()).filter(|&i| data[i] == max).collect();
        assert_eq!(at.len(), 1);
        let (x, y) = ((at[0] % 128) as f64, (at[0] / 128) as f64);
        // N parallel to S at offset R sin(slant) toward the tilt direction.
        let SceneShape::Hemisphere { cx, cy, radius } = s.shape else {
            unreachable!()
        };
        let (ex, ey) = (
            cx + radius * 0.3f64.sin() * 1f64.cos(),
            cy + radius * 0.3f64.sin() * 1f64.sin(),
        );
        assert!(
            (x - ex).hypot(y - ey) < 2.0,
            "max at ({x}, {y}), expected ({ex:.1}, {ey:.1})"
        );
    }

    #[test]
    fn pixels_match_reflectance() {
        let mut s = SyntheticScene::bumps(160, 160, 8, 4);
        plain(&mut s);
        let view = Transform2D::affine([0.98, -0.17, 0.17, 0.98, 30.0, 20.0]);
        let (img, d) = render_lambertian(&s, &view, (96, 96)).unwrap();
        let l = LightParams {
            albedo: s.base_albedo,
            ..s.light
        };
        for y in 0..96 {
            for x in 0..96 {
                let r = reflectance(d.p().get(x, y, 0), d.q().get(x, y, 0), &l).max(0.0);
                assert!((img.as_raster().get(x, y, 0) - r).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn depth_offset_does_not_change_shading() {
        let s = SyntheticScene::bumps(96, 96, 5, 2);
        let (a, d) = render_lambertian(&s, &Transform2D::identity(), (64, 64)).unwrap();
        let shifted = d.z().map(|v| v + 37.5);
        let albedo = Raster::from_fn(64, 64, |x, y| s.albedo_at(x as f64, y as f64));
        let unit = LightParams {
            albedo: 1.0,
            ..s.light
        };
        let b = shade(&shifted, &albedo, &unit).unwrap();
        for (u, v) in a.as_raster().data().iter().zip(b.as_raster().data()) {
            assert!((u - v).abs() < 1e-9);
        }
    }

    #[test]
    fn all_off_is_identity_and_seed_is_deterministic() {
        let s = SyntheticScene::bumps(96, 96, 5, 2);
        let (img, _) = render_lambertian(&s, &Transform2D::identity(), (64, 64)).unwrap();
        assert_eq!(degrade(&img, &DegradationConfig::default(), 9), img);
        let cfg = DegradationConfig::all();
        assert_eq!(degrade(&img, &cfg, 9), degrade(&img, &cfg, 9));
        assert_ne!(degrade(&img, &cfg, 9), degrade(&img, &cfg, 10));
        assert!(degrade(&img, &cfg, 9)
            .as_raster()
            .data()
            .iter()
            .all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn vignette_round_trip() {
        let s = SyntheticScene::flat(256, 256, 3);
        let (img, _) = render_lambertian(&s, &Transform2D::identity(), (128, 128)).unwrap();
        let cfg = DegradationConfig {
            vignette: VignetteModel {
                a2: -0.3,
                a4: 0.0,
                a6: 0.0,
            },
            ..DegradationConfig::default()
        };
        let back = devignette(&degrade(&img, &cfg, 0)).image;
        let (a, b) = (img.as_raster().data(), back.as_raster().data());
        let n = a.len() as f64;
        let mean = a.iter().sum::<f64>() / n;
        let rms = (a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / n).sqrt();
        assert!(rms < 0.03 * mean, "rms {rms} vs mean {mean}");
    }

    #[test]
    fn lens_render_matches_resampled_render() {
        let s = SyntheticScene::bumps(200, 200, 6, 3);
        let view = Transform2D::translation(40.0, 40.0);
        let cfg = DegradationConfig {
            vignette: VignetteModel {
                a2: -0.3,
                a4: 0.0,
                a6: 0.0,
            },
            k1: -0.08,
            ..DegradationConfig::default()
        };
        let (ideal, _) = render_lambertian(&s, &view, (96, 96)).unwrap();
        let resampled = degrade(&ideal, &cfg, 0);
        let lens = render_through_lens(&s, &view, (96, 96), &cfg).unwrap();
        let mut worst = 0.0f64;
        for y in 4..92 {
            for x in 4..92 {
                worst = worst.max((lens.get(x, y, 0) - resampled.get(x, y, 0)).abs());
            }
        }
        assert!(worst < 0.05, "{worst}");
        let plain =
            render_through_lens(&s, &view, (96, 96), &DegradationConfig::default()).unwrap();
        for y in 1..96 {
            for x in 1..96 {
                assert!((plain.get(x, y, 0) - ideal.get(x, y, 0)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn specular_disks_saturate() {
        let img = Image::filled(64, 64, 1, 0.3);
        let out = degrade(&img, &DegradationConfig::specular_only(2), 4);
        let lit = out.as_raster().data().iter().filter(|&&v| v == 1.0).count();
        assert!((20..=2 * 81).contains(&lit), "{lit}");
    }

    #[test]
    fn single_pose_equals_degraded_render() {
        let s = SyntheticScene::bumps(96, 96, 5, 2);
        let cfg = DegradationConfig {
            k1: 0.0,
            ..DegradationConfig::all()
        };
        let v = [Transform2D::translation(5.0, 7.0)];
        let seq = generate_sequence(&s, &v, &cfg, (64, 64), 21).unwrap();
        let (img, _) = render_lambertian(&s, &v[0], (64, 64)).unwrap();
        assert_eq!(seq.frames[0], degrade(&img, &cfg, 21));
        assert_eq!(seq.poses.len(), 1);
    }

    #[test]
    fn still_sequence_without_noise_repeats() {
        let s = SyntheticScene::bumps(96, 96, 5, 2);
        let seq = generate_sequence(
            &s,
            &still_trajectory(3, [4.0, 4.0]),
            &DegradationConfig::default(),
            (64, 64),
            0,
        )
        .unwrap();
        assert_eq!(seq.frames[0], seq.frames[1]);
        assert_eq!(seq.frames[1], seq.frames[2]);
        assert!((seq.poses.poses()[1].timestamp - 1.0 / 30.0).abs() < 1e-12);
    }

    #[test]
    fn view_leaving_scene_reports_index() {
        let s = SyntheticScene::flat(100, 100, 0);
        let views = pan_trajectory(5, [0.0, 0.0], [10.0, 0.0]);
        let r = generate_sequence(&s, &views, &DegradationConfig::default(), (64, 64), 0);
        assert!(matches!(r, Err(Error::ViewOutOfBounds { index: 4 })));
    }

    #[test]
    fn pan_produces_expected_flow() {
        let s = SyntheticScene::bumps(256, 160, 6, 8);
        let views = pan_trajectory(2, [10.0, 10.0], [5.0, 0.0]);
        let seq =
            generate_sequence(&s, &views, &DegradationConfig::default(), (128, 128), 0).unwrap();
        let flow = farneback_flow(&seq.frames[0], &seq.frames[1], &FlowParams::default()).unwrap();
        // Content moves left by 5 px when the view pans right.
        let mu = median(&mut flow.u().to_vec());
        let mv = median(&mut flow.v().to_vec());
        assert!(
            (mu + 5.0).abs() < 0.3 && mv.abs() < 0.3,
            "median flow ({mu}, {mv})"
        );
    }

    #[test]
    fn pan_loop_keeps_speed() {
        let v = pan_loop_trajectory(30, [0.0, 0.0], 5.0, 0.05);
        for w in v.windows(2) {
            let (a, b) = (w[0].params(), w[1].params());
            assert!(((b[4] - a[4]).hypot(b[5] - a[5]) - 5.0).abs() < 1e-9);
        }
        assert!(v[29].params()[2] > 0.0);
    }
}
