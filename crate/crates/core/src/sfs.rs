//! Shape-from-shading by linearized Newton iteration on the Lambertian
//! reflectance equation, with statistics-based light estimation.
//!
//! Conventions: `Z` is depth along the optical axis (larger is farther), the
//! discrete gradients are backward differences `p = Z(x,y) - Z(x-1,y)` and
//! `q = Z(x,y) - Z(x,y-1)` with replicated borders, and the light direction
//! has polar angle `slant` from the optical axis and azimuth `tilt` in the
//! image plane, pointing toward the source.

use std::f64::consts::FRAC_PI_2;

use log::debug;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imgcore::{central_gradients, BitMask, Image, Raster};

/// Derivative magnitudes below this are clamped to avoid runaway steps.
pub const DERIVATIVE_FLOOR: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LightParams {
    /// Azimuth of the source in the image plane, radians.
    pub tilt: f64,
    /// Polar angle from the optical axis, radians, in `[0, pi/2)`.
    pub slant: f64,
    pub albedo: f64,
}

impl LightParams {
    pub fn new(tilt: f64, slant: f64, albedo: f64) -> Result<Self> {
        let l = Self {
            tilt,
            slant,
            albedo,
        };
        l.validate()?;
        Ok(l)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..FRAC_PI_2).contains(&self.slant) {
            return Err(Error::InvalidSlant(self.slant));
        }
        if !(self.albedo > 0.0) || !self.tilt.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "light needs a positive albedo and finite tilt, got {self:?}"
            )));
        }
        Ok(())
    }

    /// Unit vector toward the source, `(cos t sin s, sin t sin s, cos s)`.
    pub fn direction(&self) -> [f64; 3] {
        let (st, ct) = self.tilt.sin_cos();
        let (ss, cs) = self.slant.sin_cos();
        [ct * ss, st * ss, cs]
    }

    /// Illumination ratios `(i_x, i_y) = (cos t, sin t) tan s`.
    pub fn ratios(&self) -> [f64; 2] {
        let [a, b, c] = self.direction();
        [a / c, b / c]
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LightEstimate {
    pub params: LightParams,
    /// Set when the image carries no shading information and the frontal
    /// default was returned.
    pub degenerate: bool,
}

/// `rho (cos s + p cos t sin s + q sin t sin s) / sqrt(p^2 + q^2 + 1)`.
pub fn reflectance(p: f64, q: f64, light: &LightParams) -> f64 {
    let [a, b, c] = light.direction();
    light.albedo * (c + p * a + q * b) / (p * p + q * q + 1.0).sqrt()
}

/// `(dR/dp, dR/dq)`.
pub fn reflectance_gradient(p: f64, q: f64, light: &LightParams) -> (f64, f64) {
    let [a, b, c] = light.direction();
    let d2 = p * p + q * q + 1.0;
    let d = d2.sqrt();
    let n = c + p * a + q * b;
    let rp = light.albedo * (a / d - n * p / (d2 * d));
    let rq = light.albedo * (b / d - n * q / (d2 * d));
    (rp, rq)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    z: Raster,
    p: Raster,
    q: Raster,
}

impl DepthMap {
    /// Wraps a single-channel depth raster and derives its gradients.
    pub fn from_z(z: Raster) -> Result<Self> {
        if z.channels() != 1 {
            return Err(Error::InvalidArgument("depth must have one channel".into()));
        }
        let (p, q) = backward_gradients(&z);
        Ok(Self { z, p, q })
    }

    pub fn width(&self) -> usize {
        self.z.width()
    }

    pub fn height(&self) -> usize {
        self.z.height()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.z.dims()
    }

    pub fn z(&self) -> &Raster {
        &self.z
    }

    pub fn p(&self) -> &Raster {
        &self.p
    }

    pub fn q(&self) -> &Raster {
        &self.q
    }

    pub fn into_z(self) -> Raster {
        self.z
    }
}

/// Backward differences with replicated borders (zero on the first row/column).
pub fn backward_gradients(z: &Raster) -> (Raster, Raster) {
    let (w, h) = z.dims();
    let p = Raster::from_fn(w, h, |x, y| {
        if x == 0 {
            0.0
        } else {
            z.get(x, y, 0) - z.get(x - 1, y, 0)
        }
    });
    let q = Raster::from_fn(w, h, |x, y| {
        if y == 0 {
            0.0
        } else {
            z.get(x, y, 0) - z.get(x, y - 1, 0)
        }
    });
    (p, q)
}

/// Renders `rho * max(0, N.S)` for a depth raster, with `rho` per pixel.
pub fn shade(z: &Raster, albedo: &Raster, light: &LightParams) -> Result<Image> {
    z.check_same_shape(albedo)?;
    let (p, q) = backward_gradients(z);
    let unit = LightParams {
        albedo: 1.0,
        ..*light
    };
    let (w, h) = z.dims();
    Ok(Image::from_fn(w, h, |x, y| {
        albedo.get(x, y, 0) * reflectance(p.get(x, y, 0), q.get(x, y, 0), &unit).max(0.0)
    }))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SfsConfig {
    pub iterations: usize,
    /// Skip estimation and use these light parameters.
    pub fixed_params: Option<LightParams>,
}

impl Default for SfsConfig {
    fn default() -> Self {
        Self {
            iterations: 200,
            fixed_params: None,
        }
    }
}

impl SfsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::InvalidArgument(
                "sfs iterations must be at least 1".into(),
            ));
        }
        if let Some(l) = &self.fixed_params {
            l.validate()?;
        }
        Ok(())
    }
}

/// Light parameters from image statistics. Tilt is the direction of the mean
/// unit intensity gradient. Slant and albedo come from the first two
/// intensity moments over the shaded pixels (nonzero gradient), assuming
/// normals distributed like those of a sphere seen head-on:
/// `E[I] = 2/3 rho cos s`, `E[I^2] = rho^2 (1 + cos^2 s) / 4`.
pub fn estimate_light_params(img: &Image) -> Result<LightEstimate> {
    if img.channels() != 1 {
        return Err(Error::InvalidArgument(
            "light estimation needs a gray image".into(),
        ));
    }
    let r = img.as_raster();
    let (w, h) = r.dims();
    let (mean, std) = r.mean_std();
    let frontal = LightEstimate {
        params: LightParams {
            tilt: 0.0,
            slant: 0.0,
            albedo: mean.max(f64::MIN_POSITIVE),
        },
        degenerate: true,
    };
    if std <= 1e-12 || mean <= 0.0 || w < 3 || h < 3 {
        return Ok(frontal);
    }
    let (gx, gy) = central_gradients(r);
    let (mut ux, mut uy) = (0.0, 0.0);
    let (mut s1, mut s2, mut n) = (0.0, 0.0, 0usize);
    // The outermost ring only sees replicated neighbors.
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let (dx, dy) = (gx.get(x, y, 0), gy.get(x, y, 0));
            let m = dx.hypot(dy);
            if m <= 1e-12 {
                continue;
            }
            ux += dx / m;
            uy += dy / m;
            let v = r.get(x, y, 0);
            s1 += v;
            s2 += v * v;
            n += 1;
        }
    }
    if n == 0 {
        return Ok(frontal);
    }
    let tilt = if ux.hypot(uy) > 1e-12 {
        uy.atan2(ux)
    } else {
        0.0
    };
    let (e1, e2) = (s1 / n as f64, s2 / n as f64);
    if e1 <= 0.0 {
        return Ok(frontal);
    }
    // E2 / E1^2 = 9 (1 + c^2) / (16 c^2), so c^2 = 1 / (k - 1) with k = 16 E2 / (9 E1^2).
    let k = 16.0 * e2 / (9.0 * e1 * e1);
    let cos_s = if k > 2.0 {
        (1.0 / (k - 1.0)).sqrt()
    } else {
        1.0
    };
    let slant = cos_s.acos().min(FRAC_PI_2 - 1e-3);
    let albedo = 1.5 * e1 / slant.cos();
    Ok(LightEstimate {
        params: LightParams {
            tilt,
            slant,
            albedo,
        },
        degenerate: false,
    })
}

/// `f = I - R(p, q)` at one pixel.
fn residual_at(img: &Raster, z: &Raster, x: usize, y: usize, light: &LightParams) -> f64 {
    let zc = z.get(x, y, 0);
    let p = if x == 0 { 0.0 } else { zc - z.get(x - 1, y, 0) };
    let q = if y == 0 { 0.0 } else { zc - z.get(x, y - 1, 0) };
    img.get(x, y, 0) - reflectance(p, q, light)
}

/// `(f, df/dZ(x,y))` at one pixel. On the first row or column the replicated
/// neighbor moves with the pixel, so that gradient does not depend on `Z(x,y)`.
pub fn residual_and_derivative(
    img: &Raster,
    z: &Raster,
    x: usize,
    y: usize,
    light: &LightParams,
) -> (f64, f64) {
    let zc = z.get(x, y, 0);
    let p = if x == 0 { 0.0 } else { zc - z.get(x - 1, y, 0) };
    let q = if y == 0 { 0.0 } else { zc - z.get(x, y - 1, 0) };
    let f = img.get(x, y, 0) - reflectance(p, q, light);
    let (rp, rq) = reflectance_gradient(p, q, light);
    let dp = if x == 0 { 0.0 } else { 1.0 };
    let dq = if y == 0 { 0.0 } else { 1.0 };
    (f, -(rp * dp + rq * dq))
}

fn floored(d: f64) -> f64 {
    if d.abs() >= DERIVATIVE_FLOOR {
        d
    } else if d < 0.0 {
        -DERIVATIVE_FLOOR
    } else {
        DERIVATIVE_FLOOR
    }
}

/// Mean `|I - R|` over the pixels of `region` (all pixels when `None`).
pub fn mean_abs_residual(
    img: &Image,
    depth: &DepthMap,
    light: &LightParams,
    region: Option<&BitMask>,
) -> f64 {
    let (w, h) = depth.dims();
    let mut sum = 0.0;
    let mut n = 0usize;
    for y in 0..h {
        for x in 0..w {
            if region.is_some_and(|m| !m.get(x, y)) {
                continue;
            }
            sum += residual_at(img.as_raster(), depth.z(), x, y, light).abs();
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Depth from a single gray image, starting from `Z = 0` and applying
/// `Z <- Z - f / (df/dZ)` to every pixel in parallel from the previous
/// iterate. Pixels in `exclude` ignore their intensity and relax toward the
/// mean of their four neighbors instead.
pub fn tsai_shah_depth(
    img: &Image,
    light: &LightParams,
    cfg: &SfsConfig,
    exclude: Option<&BitMask>,
) -> Result<DepthMap> {
    cfg.validate()?;
    light.validate()?;
    if img.channels() != 1 {
        return Err(Error::InvalidArgument(
            "shape from shading needs a gray image".into(),
        ));
    }
    let (w, h) = img.as_raster().dims();
    if let Some(m) = exclude {
        if m.dims() != (w, h) {
            return Err(Error::DimensionMismatch("exclusion mask vs image".into()));
        }
    }
    let intensity = img.as_raster();
    let mut z = Raster::zeros(w, h, 1);
    let mut next = Raster::zeros(w, h, 1);
    for iter in 0..cfg.iterations {
        next.data_mut()
            .par_chunks_mut(w)
            .enumerate()
            .for_each(|(y, row)| {
                for (x, out) in row.iter_mut().enumerate() {
                    if exclude.is_some_and(|m| m.get(x, y)) {
                        let (xi, yi) = (x as isize, y as isize);
                        *out = 0.25
                            * (z.get_clamped(xi - 1, yi, 0)
                                + z.get_clamped(xi + 1, yi, 0)
                                + z.get_clamped(xi, yi - 1, 0)
                                + z.get_clamped(xi, yi + 1, 0));
                        continue;
                    }
                    let (f, df) = residual_and_derivative(intensity, &z, x, y, light);
                    *out = z.get(x, y, 0) - f / floored(df);
                }
            });
        std::mem::swap(&mut z, &mut next);
        if iter % 50 == 0 {
            debug!("sfs iter {iter}");
        }
    }
    DepthMap::from_z(z)
}

/// `(x, y, Z)` on the `stride` grid, skipping pixels outside `valid`.
pub fn depth_to_pointcloud(
    depth: &DepthMap,
    stride: usize,
    valid: Option<&BitMask>,
) -> Result<Vec<[f64; 3]>> {
    if stride == 0 {
        return Err(Error::InvalidArgument("stride must be at least 1".into()));
    }
    let (w, h) = depth.dims();
    if let Some(m) = valid {
        if m.dims() != (w, h) {
            return Err(Error::DimensionMismatch("validity mask vs depth".into()));
        }
    }
    let mut out = Vec::new();
    for y in (0..h).step_by(stride) {
        for x in (0..w).step_by(stride) {
            if valid.is_some_and(|m| !m.get(x, y)) {
                continue;
            }
            out.push([x as f64, y as f64, depth.z().get(x, y, 0)]);
        }
    }
    Ok(out)
}

/// Pearson correlation of two equally sized sample sets.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa <= 0.0 || sbb <= 0.0 {
        return 0.0;
    }
    sab / (saa * sbb).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn light(tilt: f64, slant: f64, albedo: f64) -> LightParams {
        LightParams::new(tilt, slant, albedo).unwrap()
    }

    /// Camera-facing unit normal of a depth surface dotted with the unit
    /// vector toward the source, both written out as 3-vectors.
    fn vector_shading(p: f64, q: f64, l: &LightParams) -> f64 {
        let d = (p * p + q * q + 1.0).sqrt();
        let n = [p / d, q / d, -1.0 / d];
        let (st, ct) = l.tilt.sin_cos();
        let (ss, cs) = l.slant.sin_cos();
        let s = [ct * ss, st * ss, -cs];
        l.albedo * (n[0] * s[0] + n[1] * s[1] + n[2] * s[2])
    }

    fn hemisphere(n: usize, radius: f64) -> Raster {
        let c = (n as f64 - 1.0) / 2.0;
        Raster::from_fn(n, n, |x, y| {
            let r2 = (x as f64 - c).powi(2) + (y as f64 - c).powi(2);
            -(radius * radius - r2).max(0.0).sqrt()
        })
    }

    #[test]
    fn flat_patch_gives_albedo_cos_slant() {
        let l = light(0.7, 0.4, 0.8);
        assert_relative_eq!(
            reflectance(0.0, 0.0, &l),
            0.8 * 0.4f64.cos(),
            epsilon = 1e-15
        );
    }

    #[test]
    fn hand_evaluated_case() {
        let l = light(0.0, std::f64::consts::FRAC_PI_4, 1.0);
        let s = std::f64::consts::FRAC_1_SQRT_2;
        assert_relative_eq!(
            reflectance(1.0, 0.0, &l),
            (s + s) / 2f64.sqrt(),
            epsilon = 1e-15
        );
        assert_relative_eq!(reflectance(1.0, 0.0, &l), 1.0, epsilon = 1e-15);
    }

    #[test]
    fn slant_out_of_range() {
        assert!(matches!(
            LightParams::new(0.0, FRAC_PI_2, 1.0),
            Err(Error::InvalidSlant(_))
        ));
        assert!(LightParams::new(0.0, -0.1, 1.0).is_err());
        assert!(LightParams::new(0.0, 0.1, 0.0).is_err());
    }

    proptest! {
        #[test]
        fn reflectance_matches_vector_form(p in -5.0..5.0f64, q in -5.0..5.0f64,
                                           t in -3.1..3.1f64, s in 0.0..1.5f64, a in 0.05..1.0f64) {
            let l = light(t, s, a);
            prop_assert!((reflectance(p, q, &l) - vector_shading(p, q, &l)).abs() < 1e-12);
        }

        #[test]
        fn reflectance_linear_in_albedo(p in -5.0..5.0f64, q in -5.0..5.0f64, k in 0.1..10.0f64) {
            let l = light(0.3, 0.5, 0.4);
            let lk = LightParams { albedo: 0.4 * k, ..l };
            prop_assert!((reflectance(p, q, &lk) - k * reflectance(p, q, &l)).abs() < 1e-12);
        }
    }

    #[test]
    fn derivative_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut worst = 0.0f64;
        for _ in 0..1000 {
            let l = light(
                rng.random_range(-3.1..3.1),
                rng.random_range(0.0..1.4),
                rng.random_range(0.1..1.0),
            );
            let z = Raster::from_fn(3, 3, |_, _| rng.random_range(-2.0..2.0));
            let img = Raster::from_fn(3, 3, |_, _| rng.random_range(0.0..1.0));
            let (x, y) = (rng.random_range(0..3), rng.random_range(0..3));
            let (_, analytic) = residual_and_derivative(&img, &z, x, y, &l);
            let h = 1e-6;
            let mut zp = z.clone();
            zp.set(x, y, 0, z.get(x, y, 0) + h);
            let mut zm = z.clone();
            zm.set(x, y, 0, z.get(x, y, 0) - h);
            let fd =
                (residual_at(&img, &zp, x, y, &l) - residual_at(&img, &zm, x, y, &l)) / (2.0 * h);
            let rel = (analytic - fd).abs() / fd.abs().max(1e-3);
            worst = worst.max(rel);
        }
        assert!(worst < 1e-4, "worst relative error {worst}");
    }

    #[test]
    fn shading_matches_reflectance_per_pixel() {
        let l = light(1.0, 0.3, 0.9);
        let z = hemisphere(48, 20.0);
        let img = shade(&z, &Raster::filled(48, 48, 1, 0.9), &l).unwrap();
        let d = DepthMap::from_z(z).unwrap();
        for y in 0..48 {
            for x in 0..48 {
                let r = reflectance(d.p().get(x, y, 0), d.q().get(x, y, 0), &l).max(0.0);
                assert!((img.as_raster().get(x, y, 0) - r).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn constant_frontal_is_fixed_point() {
        let img = Image::filled(16, 12, 1, 0.6);
        let l = light(0.0, 0.0, 0.6);
        let d = tsai_shah_depth(
            &img,
            &l,
            &SfsConfig {
                iterations: 10,
                fixed_params: None,
            },
            None,
        )
        .unwrap();
        assert!(d.z().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn first_iteration_is_scalar_newton_step() {
        let l = light(1.0, 0.3, 0.9);
        let img = Image::from_fn(8, 8, |x, y| 0.5 + 0.05 * x as f64 - 0.03 * y as f64);
        let d = tsai_shah_depth(
            &img,
            &l,
            &SfsConfig {
                iterations: 1,
                fixed_params: None,
            },
            None,
        )
        .unwrap();
        let (ss, cs) = 0.3f64.sin_cos();
        let (a, b) = (1.0f64.cos() * ss, 1.0f64.sin() * ss);
        for y in 0..8 {
            for x in 0..8 {
                let f = img.as_raster().get(x, y, 0) - 0.9 * cs;
                // At p = q = 0: dR/dp = rho a, dR/dq = rho b; borders drop the replicated term.
                let mut df = 0.0;
                if x > 0 {
                    df -= 0.9 * a;
                }
                if y > 0 {
                    df -= 0.9 * b;
                }
                let df = if df.abs() < 1e-3 { 1e-3 } else { df };
                assert_relative_eq!(d.z().get(x, y, 0), -f / df, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn depth_gradients_are_backward_differences() {
        let z = Raster::from_fn(5, 4, |x, y| (x * x) as f64 + 3.0 * y as f64);
        let d = DepthMap::from_z(z).unwrap();
        assert_eq!(d.p().get(0, 2, 0), 0.0);
        assert_eq!(d.p().get(3, 2, 0), 5.0);
        assert_eq!(d.q().get(3, 0, 0), 0.0);
        assert_eq!(d.q().get(3, 2, 0), 3.0);
    }

    #[test]
    fn translation_equivariant() {
        let l = light(1.0, 0.3, 0.9);
        let z = hemisphere(40, 14.0);
        let img = shade(&z, &Raster::filled(40, 40, 1, 0.9), &l).unwrap();
        let shifted = Image::from_fn(40, 40, |x, y| {
            img.as_raster()
                .get_clamped(x as isize - 3, y as isize - 2, 0)
        });
        let cfg = SfsConfig {
            iterations: 20,
            fixed_params: None,
        };
        let a = tsai_shah_depth(&img, &l, &cfg, None).unwrap();
        let b = tsai_shah_depth(&shifted, &l, &cfg, None).unwrap();
        // Border influence travels one pixel per iteration along +x/+y only.
        for y in 25..37 {
            for x in 25..37 {
                assert_relative_eq!(
                    b.z().get(x, y, 0),
                    a.z().get(x - 3, y - 2, 0),
                    epsilon = 1e-9
                );
            }
        }
    }

    #[test]
    fn first_iteration_reduces_residual() {
        let l = light(1.0, 0.3, 0.9);
        let z = hemisphere(64, 24.0);
        let img = shade(&z, &Raster::filled(64, 64, 1, 0.9), &l).unwrap();
        let lit = BitMask::from_fn(64, 64, |x, y| img.as_raster().get(x, y, 0) > 0.0);
        let flat = DepthMap::from_z(Raster::zeros(64, 64, 1)).unwrap();
        let before = mean_abs_residual(&img, &flat, &l, Some(&lit));
        let d = tsai_shah_depth(
            &img,
            &l,
            &SfsConfig {
                iterations: 1,
                fixed_params: None,
            },
            None,
        )
        .unwrap();
        assert!(mean_abs_residual(&img, &d, &l, Some(&lit)) < before);
    }

    #[test]
    fn excluded_pixels_relax_to_neighbors() {
        let l = light(1.0, 0.3, 0.9);
        let img = Image::from_fn(16, 16, |x, _| 0.5 + 0.01 * x as f64);
        let mask = BitMask::from_fn(16, 16, |x, y| (6..9).contains(&x) && (6..9).contains(&y));
        let cfg = SfsConfig {
            iterations: 30,
            fixed_params: None,
        };
        let d = tsai_shah_depth(&img, &l, &cfg, Some(&mask)).unwrap();
        assert!(d.z().data().iter().all(|v| v.is_finite()));
        let lo = (5..10)
            .flat_map(|y| [d.z().get(5, y, 0), d.z().get(9, y, 0)])
            .fold(f64::INFINITY, f64::min);
        let hi = (5..10)
            .flat_map(|y| [d.z().get(5, y, 0), d.z().get(9, y, 0)])
            .fold(f64::NEG_INFINITY, f64::max);
        // One-step-lagged neighbor averages stay near the ring of free pixels.
        let span = (hi - lo).max(1e-9);
        assert!(d.z().get(7, 7, 0) > lo - span && d.z().get(7, 7, 0) < hi + span);
    }

    #[test]
    fn estimates_hemisphere_light() {
        for tilt in [1.0, 2.5, -0.5] {
            let l = light(tilt, 0.3, 0.9);
            let z = hemisphere(128, 64.0);
            let img = shade(&z, &Raster::filled(128, 128, 1, 0.9), &l).unwrap();
            let e = estimate_light_params(&img).unwrap();
            assert!(!e.degenerate);
            assert!((e.params.albedo - 0.9).abs() < 0.1, "{e:?}");
            assert!((e.params.slant - 0.3).abs() < 0.15, "{e:?}");
            assert!((e.params.tilt - tilt).abs() < 0.15, "{e:?}");
        }
    }

    #[test]
    fn tilt_rotates_with_image() {
        let l = light(0.4, 0.3, 0.9);
        let z = hemisphere(96, 48.0);
        let img = shade(&z, &Raster::filled(96, 96, 1, 0.9), &l).unwrap();
        // new(x, y) = old(y, n - 1 - x) turns gradients by +90 degrees.
        let rot = Image::from_fn(96, 96, |x, y| img.as_raster().get(y, 95 - x, 0));
        let a = estimate_light_params(&img).unwrap().params.tilt;
        let b = estimate_light_params(&rot).unwrap().params.tilt;
        let d = (b - a - FRAC_PI_2).rem_euclid(2.0 * std::f64::consts::PI);
        assert!(d.min(2.0 * std::f64::consts::PI - d) < 0.1, "{a} -> {b}");
    }

    #[test]
    fn constant_image_is_degenerate() {
        let e = estimate_light_params(&Image::filled(16, 16, 1, 0.42)).unwrap();
        assert!(e.degenerate);
        assert_eq!(e.params.slant, 0.0);
        assert_eq!(e.params.tilt, 0.0);
        assert_relative_eq!(e.params.albedo, 0.42, epsilon = 1e-12);
    }

    #[test]
    fn pointcloud_grid() {
        let d = DepthMap::from_z(Raster::filled(8, 8, 1, 2.0)).unwrap();
        let c = depth_to_pointcloud(&d, 2, None).unwrap();
        assert_eq!(c.len(), 16);
        assert!(c.iter().all(|p| p[2] == 2.0));
        let mut back = Raster::zeros(8, 8, 1);
        for p in &c {
            back.set(p[0] as usize, p[1] as usize, 0, p[2]);
        }
        for y in (0..8).step_by(2) {
            for x in (0..8).step_by(2) {
                assert_eq!(back.get(x, y, 0), d.z().get(x, y, 0));
            }
        }
        let mask = BitMask::from_fn(8, 8, |x, _| x < 4);
        assert_eq!(depth_to_pointcloud(&d, 2, Some(&mask)).unwrap().len(), 8);
        assert!(depth_to_pointcloud(&d, 0, None).is_err());
    }
}
