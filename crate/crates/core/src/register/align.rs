//! Patch-weighted direct affine alignment.

use std::collections::HashMap;

use nalgebra::{Matrix6, Vector6};
use serde::{Deserialize, Serialize};

use super::transform::Transform2D;
use crate::error::{Error, Result};
use crate::imgcore::{central_gradients, to_grayscale, Image, Raster};

/// Union of open disks of radius `radius` around `centers`; the weight is
/// 1 inside the union and 0 elsewhere.
#[derive(Clone, Debug)]
pub struct PatchWeights {
    centers: Vec<[f64; 2]>,
    radius: f64,
    cells: HashMap<(i64, i64), Vec<usize>>,
}

impl PatchWeights {
    pub fn new(centers: Vec<[f64; 2]>, radius: f64) -> Result<Self> {
        if !(radius > 0.0) || !radius.is_finite() {
            return Err(Error::InvalidArgument(format!("patch radius {radius}")));
        }
        if centers
            .iter()
            .any(|c| !(c[0].is_finite() && c[1].is_finite()))
        {
            return Err(Error::NonFinite);
        }
        let mut cells: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
        for (i, c) in centers.iter().enumerate() {
            cells
                .entry(Self::cell_of(c[0], c[1], radius))
                .or_default()
                .push(i);
        }
        Ok(Self {
            centers,
            radius,
            cells,
        })
    }

    /// One disk covering the whole `width x height` frame.
    pub fn full_frame(width: usize, height: usize) -> Self {
        let (cx, cy) = ((width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0);
        let r = (width as f64).hypot(height as f64);
        Self::new(vec![[cx, cy]], r).expect("positive radius")
    }

    fn cell_of(x: f64, y: f64, r: f64) -> (i64, i64) {
        ((x / r).floor() as i64, (y / r).floor() as i64)
    }

    pub fn centers(&self) -> &[[f64; 2]] {
        &self.centers
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (cx, cy) = Self::cell_of(x, y, self.radius);
        let r2 = self.radius * self.radius;
        for dy in -1..=1 {
            for dx in -1..=1 {
                if let Some(ids) = self.cells.get(&(cx + dx, cy + dy)) {
                    for &i in ids {
                        let c = self.centers[i];
                        if (c[0] - x).powi(2) + (c[1] - y).powi(2) < r2 {
                            return true;
                        }
                    }
                }
            }
        }
        false
    }

    pub fn weight(&self, x: f64, y: f64) -> f64 {
        if self.contains(x, y) {
            1.0
        } else {
            0.0
        }
    }
}

fn gray_raster(img: &Image) -> Raster {
    if img.channels() == 1 {
        img.as_raster().clone()
    } else {
        to_grayscale(img).into_raster()
    }
}

fn check_affine(a: &Transform2D) -> Result<()> {
    let m = a.matrix();
    if m[(2, 0)] != 0.0 || m[(2, 1)] != 0.0 {
        return Err(Error::InvalidArgument(
            "expected an affine transform".into(),
        ));
    }
    Ok(())
}

/// Patch-weighted mean squared intensity error of `I2(A x)` against `I1(x)`
/// over the pixels of `I1`. Targets outside `I2` contribute zero weight.
pub fn emse_cost(i1: &Image, i2: &Image, a: &Transform2D, w: &PatchWeights) -> Result<f64> {
    check_affine(a)?;
    let (g1, g2) = (gray_raster(i1), gray_raster(i2));
    emse_gray(&g1, &g2, a, w)
}

fn emse_gray(g1: &Raster, g2: &Raster, a: &Transform2D, w: &PatchWeights) -> Result<f64> {
    let (mut num, mut den) = (0.0, 0.0);
    for y in 0..g1.height() {
        for x in 0..g1.width() {
            let (xf, yf) = (x as f64, y as f64);
            if !w.contains(xf, yf) {
                continue;
            }
            let [u, v] = a.apply([xf, yf]);
            if !w.contains(u, v) {
                continue;
            }
            let Some(i2v) = g2.sample(u, v, 0) else {
                continue;
            };
            let d = i2v - g1.get(x, y, 0);
            num += d * d;
            den += 1.0;
        }
    }
    if den == 0.0 {
        return Err(Error::EmptyOverlap);
    }
    Ok(num / den)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GaussNewtonParams {
    pub max_iters: usize,
    /// Absolute e_MSE below which the fit counts as converged.
    pub tol: f64,
    /// Relative cost decrease below which iteration stops.
    pub rel_tol: f64,
}

impl Default for GaussNewtonParams {
    fn default() -> Self {
        Self {
            max_iters: 100,
            tol: 1e-9,
            rel_tol: 1e-6,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AffineFit {
    pub transform: Transform2D,
    pub residual: f64,
    pub initial_residual: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Parameters in a frame centered on `c` and scaled by `s`, so that the six
/// unknowns have comparable magnitude:
/// `b = [a1 s, a2 s, a3 s, a4 s, a1 cx + a2 cy + tx, a3 cx + a4 cy + ty]`.
struct Conditioning {
    c: [f64; 2],
    s: f64,
}

impl Conditioning {
    fn pack(&self, a: &Transform2D) -> Vector6<f64> {
        let [a1, a2, a3, a4, tx, ty] = a.params();
        let (cx, cy, s) = (self.c[0], self.c[1], self.s);
        Vector6::new(
            a1 * s,
            a2 * s,
            a3 * s,
            a4 * s,
            a1 * cx + a2 * cy + tx,
            a3 * cx + a4 * cy + ty,
        )
    }

    fn unpack(&self, b: &Vector6<f64>) -> Transform2D {
        let (cx, cy, s) = (self.c[0], self.c[1], self.s);
        let (a1, a2, a3, a4) = (b[0] / s, b[1] / s, b[2] / s, b[3] / s);
        Transform2D::affine([
            a1,
            a2,
            a3,
            a4,
            b[4] - a1 * cx - a2 * cy,
            b[5] - a3 * cx - a4 * cy,
        ])
    }
}

struct Samples {
    pts: Vec<(f64, f64, f64)>,
}

fn normal_equations(
    samples: &Samples,
    g2: &Raster,
    gx: &Raster,
    gy: &Raster,
    a: &Transform2D,
    w: &PatchWeights,
    cond: &Conditioning,
) -> Option<(Matrix6<f64>, Vector6<f64>, f64)> {
    let mut h = Matrix6::zeros();
    let mut g = Vector6::zeros();
    let (mut sse, mut n) = (0.0, 0.0);
    for &(x, y, v1) in &samples.pts {
        let [u, v] = a.apply([x, y]);
        if !w.contains(u, v) {
            continue;
        }
        let Some(v2) = g2.sample(u, v, 0) else {
            continue;
        };
        let r = v2 - v1;
        let (ix, iy) = (gx.sample_clamped(u, v, 0), gy.sample_clamped(u, v, 0));
        let (xh, yh) = ((x - cond.c[0]) / cond.s, (y - cond.c[1]) / cond.s);
        let j = Vector6::new(ix * xh, ix * yh, iy * xh, iy * yh, ix, iy);
        h += j * j.transpose();
        g += j * r;
        sse += r * r;
        n += 1.0;
    }
    if n == 0.0 {
        None
    } else {
        Some((h / n, g / n, sse / n))
    }
}

/// Minimizes the patch-weighted e_MSE over the six affine parameters by
/// Gauss-Newton, falling back to Levenberg damping when a step fails to
/// decrease the cost. Always returns the best transform seen.
pub fn gauss_newton_affine(
    i1: &Image,
    i2: &Image,
    init: &Transform2D,
    w: &PatchWeights,
    params: &GaussNewtonParams,
) -> Result<AffineFit> {
    check_affine(init)?;
    let (g1, g2) = (gray_raster(i1), gray_raster(i2));
    let (gx, gy) = central_gradients(&g2);

    let mut pts = Vec::new();
    let (mut sx, mut sy) = (0.0, 0.0);
    for y in 0..g1.height() {
        for x in 0..g1.width() {
            let (xf, yf) = (x as f64, y as f64);
            if w.contains(xf, yf) {
                pts.push((xf, yf, g1.get(x, y, 0)));
                sx += xf;
                sy += yf;
            }
        }
    }
    if pts.is_empty() {
        return Err(Error::EmptyOverlap);
    }
    let n = pts.len() as f64;
    let c = [sx / n, sy / n];
    let s = (pts
        .iter()
        .map(|p| (p.0 - c[0]).powi(2) + (p.1 - c[1]).powi(2))
        .sum::<f64>()
        / n)
        .sqrt()
        .max(1.0);
    let cond = Conditioning { c, s };
    let samples = Samples { pts };

    let mut current = *init;
    let Some((mut h, mut g, mut cost)) =
        normal_equations(&samples, &g2, &gx, &gy, &current, w, &cond)
    else {
        return Err(Error::EmptyOverlap);
    };
    let initial = cost;
    let mut iterations = 0;
    let mut converged = cost < params.tol;
    let mut mu = 0.0;
    while !converged && iterations < params.max_iters {
        iterations += 1;
        let b = cond.pack(&current);
        let mut accepted = None;
        for attempt in 0..12 {
            let mut hd = h;
            if mu > 0.0 {
                for k in 0..6 {
                    hd[(k, k)] += mu * h[(k, k)].max(1e-12);
                }
            }
            let Some(chol) = hd.cholesky() else {
                mu = if mu == 0.0 { 1e-4 } else { mu * 10.0 };
                continue;
            };
            let step = chol.solve(&(-g));
            let cand = cond.unpack(&(b + step));
            if let Some(next) = normal_equations(&samples, &g2, &gx, &gy, &cand, w, &cond) {
                if next.2 < cost {
                    accepted = Some((cand, next));
                    mu = if attempt == 0 { mu * 0.1 } else { mu };
                    if mu < 1e-8 {
                        mu = 0.0;
                    }
                    break;
                }
            }
            mu = if mu == 0.0 { 1e-4 } else { mu * 10.0 };
        }
        let Some((cand, next)) = accepted else {
            if h.cholesky().is_none() && mu > 1e6 {
                return Err(Error::Singular);
            }
            break;
        };
        let rel = (cost - next.2) / cost.max(1e-300);
        current = cand;
        (h, g, cost) = next;
        if cost < params.tol || rel < params.rel_tol {
            converged = true;
        }
    }
    Ok(AffineFit {
        transform: current,
        residual: cost,
        initial_residual: initial,
        iterations,
        converged,
    })
}
