//! De-vignetting by radial-gradient symmetry.
//!
//! On a vignette-free image the radial derivatives of log-intensity are
//! distributed symmetrically about zero at every radius: edges point inward
//! as often as outward. A radial falloff `V(r)` shifts that distribution by
//! `d/dr ln V(r)`. We estimate the shift per radius band as the median of the
//! observed radial log-gradients, fit an even polynomial to `ln V`, convert it
//! to `V(r) = 1 + a2 r^2 + a4 r^4 + a6 r^6`, and divide it out.

use log::warn;
use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::imgcore::{to_grayscale, Image, Raster};

/// Radial attenuation `V(r) = 1 + a2 r^2 + a4 r^4 + a6 r^6`, with `r`
/// normalized so the farthest image corner sits at `r = 1`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct VignetteModel {
    pub a2: f64,
    pub a4: f64,
    pub a6: f64,
}

impl VignetteModel {
    pub fn identity() -> Self {
        Self::default()
    }

    pub fn eval(&self, r: f64) -> f64 {
        let r2 = r * r;
        1.0 + r2 * (self.a2 + r2 * (self.a4 + r2 * self.a6))
    }
}

/// Optical center and corner distance used to normalize radii.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RadialFrame {
    pub cx: f64,
    pub cy: f64,
    pub rmax: f64,
}

impl RadialFrame {
    /// Centered on pixel `(w/2, h/2)` so that the center pixel has `r = 0`.
    pub fn for_dims(width: usize, height: usize) -> Self {
        let cx = (width / 2) as f64;
        let cy = (height / 2) as f64;
        let rmax = [
            (cx, cy),
            (width as f64 - 1.0 - cx, cy),
            (cx, height as f64 - 1.0 - cy),
            (width as f64 - 1.0 - cx, height as f64 - 1.0 - cy),
        ]
        .iter()
        .map(|(dx, dy)| (dx * dx + dy * dy).sqrt())
        .fold(0.0, f64::max)
        .max(1.0);
        Self { cx, cy, rmax }
    }

    pub fn radius(&self, x: f64, y: f64) -> f64 {
        ((x - self.cx).powi(2) + (y - self.cy).powi(2)).sqrt() / self.rmax
    }
}

/// Multiplies every channel by `V(r)` (used to synthesize vignetting).
pub fn apply_vignette(img: &Image, model: &VignetteModel) -> Image {
    scale_radially(img, |r| model.eval(r))
}

fn scale_radially(img: &Image, gain: impl Fn(f64) -> f64) -> Image {
    let frame = RadialFrame::for_dims(img.width(), img.height());
    let mut out = img.as_raster().clone();
    for y in 0..img.height() {
        for x in 0..img.width() {
            let g = gain(frame.radius(x as f64, y as f64));
            for c in 0..img.channels() {
                let v = out.get(x, y, c) * g;
                out.set(x, y, c, v);
            }
        }
    }
    Image::from_raster(out)
}

#[derive(Clone, Debug)]
pub struct Devignetted {
    pub image: Image,
    pub model: VignetteModel,
    /// Set when the image had too little gradient content for a fit; the
    /// input is then returned unchanged.
    pub degenerate: bool,
}

const BINS: usize = 24;
const MIN_INTENSITY: f64 = 0.02;
const MIN_GRADIENT: f64 = 1e-4;

/// Per-bin medians of the radial log-gradient, in units of `d/dr` with `r`
/// normalized to the corner distance. Returns `(r_center, median, count)`.
fn radial_gradient_medians(gray: &Raster, frame: &RadialFrame) -> (Vec<(f64, f64, usize)>, usize) {
    let (w, h) = gray.dims();
    let log = gray.map(|v| v.max(MIN_INTENSITY).ln());
    let mut bins: Vec<Vec<f64>> = vec![Vec::new(); BINS];
    let mut informative = 0usize;
    for y in 1..h.saturating_sub(1) {
        for x in 1..w.saturating_sub(1) {
            let dx = x as f64 - frame.cx;
            let dy = y as f64 - frame.cy;
            let rpx = (dx * dx + dy * dy).sqrt();
            if rpx < 2.0 {
                continue;
            }
            let neighborhood_dark = [(x - 1, y), (x + 1, y), (x, y - 1), (x, y + 1)]
                .iter()
                .any(|&(a, b)| gray.get(a, b, 0) < MIN_INTENSITY);
            if neighborhood_dark {
                continue;
            }
            let gx = 0.5 * (log.get(x + 1, y, 0) - log.get(x - 1, y, 0));
            let gy = 0.5 * (log.get(x, y + 1, 0) - log.get(x, y - 1, 0));
            if gx.abs().max(gy.abs()) > MIN_GRADIENT {
                informative += 1;
            }
            let radial = (gx * dx + gy * dy) / rpx * frame.rmax;
            let r = rpx / frame.rmax;
            let b = ((r * BINS as f64) as usize).min(BINS - 1);
            bins[b].push(radial);
        }
    }
    let medians = bins
        .into_iter()
        .enumerate()
        .filter(|(_, v)| v.len() >= 8)
        .map(|(b, mut v)| {
            v.sort_by(|a, b| a.total_cmp(b));
            let n = v.len();
            let med = if n % 2 == 1 {
                v[n / 2]
            } else {
                0.5 * (v[n / 2 - 1] + v[n / 2])
            };
            ((b as f64 + 0.5) / BINS as f64, med, n)
        })
        .collect();
    (medians, informative)
}

fn solve3(m: Matrix3<f64>, rhs: Vector3<f64>) -> Option<Vector3<f64>> {
    m.cholesky().map(|c| c.solve(&rhs))
}

/// Fits the vignetting polynomial to a grayscale raster. `None` when the
/// image carries too little gradient information.
pub fn fit_vignette(gray: &Raster) -> Option<VignetteModel> {
    let (w, h) = gray.dims();
    if w < 8 || h < 8 {
        return None;
    }
    let frame = RadialFrame::for_dims(w, h);
    let (medians, informative) = radial_gradient_medians(gray, &frame);
    if informative * 20 < w * h || medians.len() < 6 {
        return None;
    }

    // d/dr ln V = 2 b2 r + 4 b4 r^3 + 6 b6 r^5, weighted by bin population.
    let mut m = Matrix3::zeros();
    let mut rhs = Vector3::zeros();
    for &(r, med, n) in &medians {
        let basis = Vector3::new(2.0 * r, 4.0 * r.powi(3), 6.0 * r.powi(5));
        let wgt = n as f64;
        m += wgt * basis * basis.transpose();
        rhs += wgt * med * basis;
    }
    let b = solve3(m, rhs)?;

    // Convert ln V to the polynomial form by least squares on a dense grid.
    let mut m2 = Matrix3::zeros();
    let mut rhs2 = Vector3::zeros();
    for i in 1..=200 {
        let r = i as f64 / 200.0;
        let r2 = r * r;
        let ln_v = b[0] * r2 + b[1] * r2 * r2 + b[2] * r2 * r2 * r2;
        let basis = Vector3::new(r2, r2 * r2, r2 * r2 * r2);
        m2 += basis * basis.transpose();
        rhs2 += (ln_v.exp() - 1.0) * basis;
    }
    let a = solve3(m2, rhs2)?;
    Some(VignetteModel {
        a2: a[0],
        a4: a[1],
        a6: a[2],
    })
}

/// Estimates and removes radial vignetting. The fitted `V` must stay
/// positive on `[0, 1]` and must not brighten the corners; a fit that
/// brightens is treated as "no vignetting".
pub fn devignette(img: &Image) -> Devignetted {
    let gray = to_grayscale(img);
    let unchanged = |degenerate| Devignetted {
        image: img.clone(),
        model: VignetteModel::identity(),
        degenerate,
    };
    let Some(model) = fit_vignette(gray.as_raster()) else {
        warn!("de-vignetting skipped: not enough gradient content");
        return unchanged(true);
    };
    let min_v = (0..=100)
        .map(|i| model.eval(i as f64 / 100.0))
        .fold(f64::INFINITY, f64::min);
    if min_v <= 0.05 {
        warn!("de-vignetting skipped: fitted falloff is not positive");
        return unchanged(true);
    }
    if model.eval(1.0) > 1.0 {
        return unchanged(false);
    }
    Devignetted {
        image: scale_radially(img, |r| 1.0 / model.eval(r)),
        model,
        degenerate: false,
    }
}
