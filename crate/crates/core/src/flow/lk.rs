//! Pyramidal Lucas-Kanade point tracking and Shi-Tomasi corner selection.

use serde::{Deserialize, Serialize};

use super::{check_pair, Correspondence, FlowParams};
use crate::error::{Error, Result};
use crate::imgcore::{
    box_blur, central_gradients, gaussian_pyramid_raster, max_pyramid_levels, Image, Raster,
};

const MAX_ITERS: usize = 20;
const STEP_EPS: f64 = 0.01;
const MIN_EIGEN: f64 = 1e-7;
/// Mean absolute intensity residual above which a track counts as diverged.
const MAX_RESIDUAL: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrackStatus {
    Tracked,
    Lost,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackedPoint {
    pub correspondence: Correspondence,
    pub status: TrackStatus,
    /// Mean absolute intensity difference over the final window.
    pub residual: f64,
}

impl TrackedPoint {
    pub fn is_tracked(&self) -> bool {
        self.status == TrackStatus::Tracked
    }
}

struct Level {
    i1: Raster,
    i2: Raster,
    gx: Raster,
    gy: Raster,
}

fn window_inside(r: &Raster, x: f64, y: f64, radius: f64) -> bool {
    x - radius >= 0.0
        && y - radius >= 0.0
        && x + radius <= (r.width() - 1) as f64
        && y + radius <= (r.height() - 1) as f64
}

fn track_one(levels: &[Level], p: [f64; 2], radius: usize) -> TrackedPoint {
    let r = radius as isize;
    let lost = |p2: [f64; 2], residual: f64| TrackedPoint {
        correspondence: Correspondence::new(p, p2),
        status: TrackStatus::Lost,
        residual,
    };
    let base = &levels[0];
    if !window_inside(&base.i1, p[0], p[1], radius as f64) {
        return lost(p, f64::INFINITY);
    }

    let mut g = [0.0f64; 2];
    let mut nu = [0.0f64; 2];
    for (l, lv) in levels.iter().enumerate().rev() {
        let s = 0.5f64.powi(l as i32);
        let (px, py) = (p[0] * s, p[1] * s);
        let mut tmpl = Vec::with_capacity(((2 * r + 1) * (2 * r + 1)) as usize);
        let (mut a11, mut a12, mut a22) = (0.0, 0.0, 0.0);
        for oy in -r..=r {
            for ox in -r..=r {
                let (x, y) = (px + ox as f64, py + oy as f64);
                let ix = lv.gx.sample_clamped(x, y, 0);
                let iy = lv.gy.sample_clamped(x, y, 0);
                tmpl.push((ox as f64, oy as f64, lv.i1.sample_clamped(x, y, 0), ix, iy));
                a11 += ix * ix;
                a12 += ix * iy;
                a22 += iy * iy;
            }
        }
        let n = tmpl.len() as f64;
        let det = a11 * a22 - a12 * a12;
        let tr = a11 + a22;
        let min_eig = 0.5 * (tr - ((a11 - a22).powi(2) + 4.0 * a12 * a12).sqrt());
        if min_eig / n < MIN_EIGEN || det <= 0.0 {
            return lost([p[0] + g[0] / s, p[1] + g[1] / s], f64::INFINITY);
        }
        nu = [0.0, 0.0];
        for _ in 0..MAX_ITERS {
            let (mut b1, mut b2) = (0.0, 0.0);
            for &(ox, oy, v1, ix, iy) in &tmpl {
                let v2 = lv
                    .i2
                    .sample_clamped(px + ox + g[0] + nu[0], py + oy + g[1] + nu[1], 0);
                let e = v1 - v2;
                b1 += e * ix;
                b2 += e * iy;
            }
            let eta = [(a22 * b1 - a12 * b2) / det, (a11 * b2 - a12 * b1) / det];
            nu[0] += eta[0];
            nu[1] += eta[1];
            if !(nu[0].is_finite() && nu[1].is_finite()) {
                return lost(p, f64::INFINITY);
            }
            if eta[0].hypot(eta[1]) < STEP_EPS {
                break;
            }
        }
        if l > 0 {
            g = [2.0 * (g[0] + nu[0]), 2.0 * (g[1] + nu[1])];
        }
    }
    let d = [g[0] + nu[0], g[1] + nu[1]];
    let p2 = [p[0] + d[0], p[1] + d[1]];
    if !window_inside(&base.i2, p2[0], p2[1], radius as f64) {
        return lost(p2, f64::INFINITY);
    }
    let mut residual = 0.0;
    let mut count = 0.0;
    for oy in -r..=r {
        for ox in -r..=r {
            let v1 = base
                .i1
                .sample_clamped(p[0] + ox as f64, p[1] + oy as f64, 0);
            let v2 = base
                .i2
                .sample_clamped(p2[0] + ox as f64, p2[1] + oy as f64, 0);
            residual += (v1 - v2).abs();
            count += 1.0;
        }
    }
    residual /= count;
    TrackedPoint {
        correspondence: Correspondence::new(p, p2),
        status: if residual <= MAX_RESIDUAL {
            TrackStatus::Tracked
        } else {
            TrackStatus::Lost
        },
        residual,
    }
}

/// Tracks each point from `f1` into `f2`. Points whose window leaves either
/// frame, whose structure tensor is singular, or whose residual stays large
/// are reported with [`TrackStatus::Lost`].
pub fn lucas_kanade_track(
    f1: &Image,
    f2: &Image,
    points: &[[f64; 2]],
    params: &FlowParams,
) -> Result<Vec<TrackedPoint>> {
    check_pair(f1, f2)?;
    params.validate()?;
    let (w, h) = f1.dims();
    for p in points {
        if !(p[0] >= 0.0 && p[1] >= 0.0 && p[0] <= (w - 1) as f64 && p[1] <= (h - 1) as f64) {
            return Err(Error::InvalidArgument(format!(
                "point {p:?} outside frame 1"
            )));
        }
    }
    let n_levels = params.pyramid_levels.min(max_pyramid_levels(w, h));
    let p1 = gaussian_pyramid_raster(f1.as_raster(), n_levels)?;
    let p2 = gaussian_pyramid_raster(f2.as_raster(), n_levels)?;
    let levels: Vec<Level> = p1
        .into_iter()
        .zip(p2)
        .map(|(i1, i2)| {
            let (gx, gy) = central_gradients(&i1);
            Level { i1, i2, gx, gy }
        })
        .collect();
    Ok(points
        .iter()
        .map(|&p| track_one(&levels, p, params.window_radius))
        .collect())
}

/// Shi-Tomasi corners: local maxima of the minimum structure-tensor
/// eigenvalue, at least `min_distance` apart and `margin` px from the border,
/// strongest first.
pub fn good_features(
    img: &Image,
    max_points: usize,
    min_distance: f64,
    margin: usize,
) -> Vec<[f64; 2]> {
    let gray = if img.channels() == 1 {
        img.clone()
    } else {
        crate::imgcore::to_grayscale(img)
    };
    let (w, h) = gray.dims();
    if w <= 2 * margin + 2 || h <= 2 * margin + 2 {
        return Vec::new();
    }
    let (gx, gy) = central_gradients(gray.as_raster());
    let sxx = box_blur(&gx.zip_map(&gx, |a, b| a * b).expect("same dims"), 2);
    let sxy = box_blur(&gx.zip_map(&gy, |a, b| a * b).expect("same dims"), 2);
    let syy = box_blur(&gy.zip_map(&gy, |a, b| a * b).expect("same dims"), 2);
    let score = Raster::from_fn(w, h, |x, y| {
        let (a, b, c) = (sxx.get(x, y, 0), sxy.get(x, y, 0), syy.get(x, y, 0));
        0.5 * ((a + c) - ((a - c).powi(2) + 4.0 * b * b).sqrt())
    });
    let max_score = score.data().iter().cloned().fold(0.0, f64::max);
    if max_score <= 0.0 {
        return Vec::new();
    }
    let thr = 0.01 * max_score;
    let mut cands = Vec::new();
    for y in margin.max(1)..h - margin.max(1) {
        for x in margin.max(1)..w - margin.max(1) {
            let s = score.get(x, y, 0);
            if s < thr {
                continue;
            }
            let is_max = (-1isize..=1).all(|dy| {
                (-1isize..=1).all(|dx| score.get_clamped(x as isize + dx, y as isize + dy, 0) <= s)
            });
            if is_max {
                cands.push((s, x, y));
            }
        }
    }
    cands.sort_by(|a, b| b.0.total_cmp(&a.0).then((a.2, a.1).cmp(&(b.2, b.1))));
    let mut out: Vec<[f64; 2]> = Vec::new();
    let d2 = min_distance * min_distance;
    for (_, x, y) in cands {
        if out.len() >= max_points {
            break;
        }
        let p = [x as f64, y as f64];
        if out
            .iter()
            .all(|q| (q[0] - p[0]).powi(2) + (q[1] - p[1]).powi(2) >= d2)
        {
            out.push(p);
        }
    }
    out
}
