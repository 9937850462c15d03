//! Two-frame motion estimation by quadratic polynomial expansion.
//!
//! Each neighborhood is approximated by `f(x) ~ x^T A x + b^T x + c`,
//! fitted by Gaussian-weighted least squares. A pure translation `d` maps
//! `b1` to `b2 = b1 - 2 A d`, so `d` follows from the coefficient difference;
//! the per-pixel constraints are pooled over a window and iterated
//! coarse-to-fine with the current estimate as the warp.

use nalgebra::{Matrix6, Vector6};

use super::{check_pair, FlowField, FlowParams};
use crate::error::Result;
use crate::imgcore::{expand, gaussian_pyramid_raster, max_pyramid_levels, Image, Raster};

/// Quadratic fit per pixel: `[c, bx, by, axx, ayy, axy]` for
/// `f(x0 + (dx, dy)) ~ c + bx dx + by dy + axx dx^2 + ayy dy^2 + axy dx dy`.
#[derive(Clone, Debug)]
pub struct PolyCoeffs {
    width: usize,
    height: usize,
    data: Vec<[f64; 6]>,
}

impl PolyCoeffs {
    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn at(&self, x: usize, y: usize) -> [f64; 6] {
        self.data[y * self.width + x]
    }

    /// Bilinear interpolation; `None` outside the grid.
    fn sample(&self, x: f64, y: f64) -> Option<[f64; 6]> {
        let (w, h) = (self.width, self.height);
        if !(x >= 0.0 && y >= 0.0 && x <= (w - 1) as f64 && y <= (h - 1) as f64) {
            return None;
        }
        let x0 = (x.floor() as usize).min(w.saturating_sub(2));
        let y0 = (y.floor() as usize).min(h.saturating_sub(2));
        let x1 = (x0 + 1).min(w - 1);
        let y1 = (y0 + 1).min(h - 1);
        let (fx, fy) = (x - x0 as f64, y - y0 as f64);
        let (a, b) = (self.at(x0, y0), self.at(x1, y0));
        let (c, d) = (self.at(x0, y1), self.at(x1, y1));
        let mut out = [0.0; 6];
        for k in 0..6 {
            let top = a[k] + (b[k] - a[k]) * fx;
            let bottom = c[k] + (d[k] - c[k]) * fx;
            out[k] = top + (bottom - top) * fy;
        }
        Some(out)
    }
}

fn correlate_rows(src: &[f64], w: usize, h: usize, k: &[f64]) -> Vec<f64> {
    let r = (k.len() / 2) as isize;
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        for x in 0..w {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                let sx = (x as isize + i as isize - r).clamp(0, w as isize - 1) as usize;
                acc += kv * row[sx];
            }
            out[y * w + x] = acc;
        }
    }
    out
}

fn correlate_cols(src: &[f64], w: usize, h: usize, k: &[f64]) -> Vec<f64> {
    let r = (k.len() / 2) as isize;
    let mut out = vec![0.0; w * h];
    for (i, kv) in k.iter().enumerate() {
        for y in 0..h {
            let sy = (y as isize + i as isize - r).clamp(0, h as isize - 1) as usize;
            let (dst, s) = (&mut out[y * w..(y + 1) * w], &src[sy * w..(sy + 1) * w]);
            for (o, v) in dst.iter_mut().zip(s) {
                *o += kv * v;
            }
        }
    }
    out
}

/// Gaussian-weighted least-squares quadratic fit around every pixel of a
/// single-channel raster, replicate border. The applicability width is
/// `0.3 * radius`.
pub fn polynomial_expansion(img: &Raster, radius: usize) -> PolyCoeffs {
    let (w, h) = img.dims();
    let sigma = 0.3 * radius as f64;
    let r = radius as isize;
    let offsets: Vec<f64> = (-r..=r).map(|i| i as f64).collect();
    let g: Vec<f64> = offsets
        .iter()
        .map(|o| (-o * o / (2.0 * sigma * sigma)).exp())
        .collect();
    let gx: Vec<f64> = g.iter().zip(&offsets).map(|(g, o)| g * o).collect();
    let gxx: Vec<f64> = g.iter().zip(&offsets).map(|(g, o)| g * o * o).collect();

    // Gram matrix of the basis under the applicability.
    let mut gram = Matrix6::<f64>::zeros();
    for (iy, &oy) in offsets.iter().enumerate() {
        for (ix, &ox) in offsets.iter().enumerate() {
            let b = Vector6::new(1.0, ox, oy, ox * ox, oy * oy, ox * oy);
            gram += g[ix] * g[iy] * b * b.transpose();
        }
    }
    let ginv = gram
        .try_inverse()
        .expect("polynomial basis Gram matrix is positive definite");

    let src = img.data();
    let h0 = correlate_rows(src, w, h, &g);
    let h1 = correlate_rows(src, w, h, &gx);
    let h2 = correlate_rows(src, w, h, &gxx);
    let moments = [
        correlate_cols(&h0, w, h, &g),
        correlate_cols(&h1, w, h, &g),
        correlate_cols(&h0, w, h, &gx),
        correlate_cols(&h2, w, h, &g),
        correlate_cols(&h0, w, h, &gxx),
        correlate_cols(&h1, w, h, &gx),
    ];
    let data = (0..w * h)
        .map(|i| {
            let s = Vector6::from_fn(|k, _| moments[k][i]);
            let c = ginv * s;
            [c[0], c[1], c[2], c[3], c[4], c[5]]
        })
        .collect();
    PolyCoeffs {
        width: w,
        height: h,
        data,
    }
}

/// One refinement of `(u, v)` at a single pyramid level.
fn update_flow(
    r1: &PolyCoeffs,
    r2: &PolyCoeffs,
    u: &mut [f64],
    v: &mut [f64],
    window_radius: usize,
) {
    let (w, h) = r1.dims();
    let n = w * h;
    // Per-pixel normal equations A^T A d = A^T db, stored as g11, g12, g22, h1, h2.
    let mut planes = vec![vec![0.0; n]; 5];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let (dx, dy) = (u[i], v[i]);
            let Some(c2) = r2.sample(x as f64 + dx, y as f64 + dy) else {
                continue;
            };
            let c1 = r1.at(x, y);
            let a11 = 0.5 * (c1[3] + c2[3]);
            let a22 = 0.5 * (c1[4] + c2[4]);
            let a12 = 0.25 * (c1[5] + c2[5]);
            let db1 = -0.5 * (c2[1] - c1[1]) + a11 * dx + a12 * dy;
            let db2 = -0.5 * (c2[2] - c1[2]) + a12 * dx + a22 * dy;
            planes[0][i] = a11 * a11 + a12 * a12;
            planes[1][i] = a12 * (a11 + a22);
            planes[2][i] = a12 * a12 + a22 * a22;
            planes[3][i] = a11 * db1 + a12 * db2;
            planes[4][i] = a12 * db1 + a22 * db2;
        }
    }
    let box_k = vec![1.0; 2 * window_radius + 1];
    let pooled: Vec<Vec<f64>> = planes
        .iter()
        .map(|p| correlate_cols(&correlate_rows(p, w, h, &box_k), w, h, &box_k))
        .collect();

    // A small Tikhonov pull toward the current estimate: where the pooled
    // structure vanishes (no texture) the displacement keeps the value
    // inherited from the coarser level.
    let mean_trace = (0..n).map(|i| pooled[0][i] + pooled[2][i]).sum::<f64>() / n as f64;
    let lambda = 1e-3 * mean_trace + 1e-18;
    for i in 0..n {
        let g11 = pooled[0][i] + lambda;
        let g12 = pooled[1][i];
        let g22 = pooled[2][i] + lambda;
        let h1 = pooled[3][i] + lambda * u[i];
        let h2 = pooled[4][i] + lambda * v[i];
        let det = g11 * g22 - g12 * g12;
        if det > 0.0 && det.is_finite() {
            u[i] = (g22 * h1 - g12 * h2) / det;
            v[i] = (g11 * h2 - g12 * h1) / det;
        }
    }
}

/// Dense flow from `f1` to `f2`: `f2(x + d(x)) ~ f1(x)`.
pub fn farneback_flow(f1: &Image, f2: &Image, params: &FlowParams) -> Result<FlowField> {
    check_pair(f1, f2)?;
    params.validate()?;
    let (w, h) = f1.dims();
    let levels = params.pyramid_levels.min(max_pyramid_levels(w, h));
    let p1 = gaussian_pyramid_raster(f1.as_raster(), levels)?;
    let p2 = gaussian_pyramid_raster(f2.as_raster(), levels)?;

    let (cw, ch) = p1[levels - 1].dims();
    let mut u = Raster::zeros(cw, ch, 1);
    let mut v = Raster::zeros(cw, ch, 1);
    for level in (0..levels).rev() {
        let (lw, lh) = p1[level].dims();
        if u.dims() != (lw, lh) {
            u = expand(&u, lw, lh).map(|d| 2.0 * d);
            v = expand(&v, lw, lh).map(|d| 2.0 * d);
        }
        let r1 = polynomial_expansion(&p1[level], params.poly_radius);
        let r2 = polynomial_expansion(&p2[level], params.poly_radius);
        for _ in 0..params.iterations {
            update_flow(&r1, &r2, u.data_mut(), v.data_mut(), params.window_radius);
        }
    }
    FlowField::new(w, h, u.into_data(), v.into_data())
}

#[cfg(test)]
mod tests {
    use super::super::median;
    use super::super::testutil::Waves;
    use super::*;

    #[test]
    fn expansion_exact_on_quadratic() {
        let q = |x: f64, y: f64| {
            0.3 + 0.01 * x - 0.02 * y + 0.001 * x * x + 0.002 * y * y - 0.0015 * x * y
        };
        let img = Raster::from_fn(40, 40, |x, y| q(x as f64, y as f64));
        let c = polynomial_expansion(&img, 5);
        let (x0, y0) = (20.0, 17.0);
        let got = c.at(20, 17);
        // Local-coordinate Taylor coefficients of q at (x0, y0).
        let want = [
            q(x0, y0),
            0.01 + 0.002 * x0 - 0.0015 * y0,
            -0.02 + 0.004 * y0 - 0.0015 * x0,
            0.001,
            0.002,
            -0.0015,
        ];
        for k in 0..6 {
            assert!(
                (got[k] - want[k]).abs() < 1e-10,
                "coef {k}: {} vs {}",
                got[k],
                want[k]
            );
        }
    }

    fn median_epe(flow: &FlowField, truth: impl Fn(f64, f64) -> (f64, f64), margin: usize) -> f64 {
        let (w, h) = flow.dims();
        let mut errs = Vec::new();
        for y in margin..h - margin {
            for x in margin..w - margin {
                let (u, v) = flow.at(x, y);
                let (tu, tv) = truth(x as f64, y as f64);
                errs.push(((u - tu).powi(2) + (v - tv).powi(2)).sqrt());
            }
        }
        median(&mut errs)
    }

    #[test]
    fn identical_frames_give_zero_flow() {
        let f = Waves::new(3, 40).render(96, 80, |x, y| (x, y));
        let flow = farneback_flow(&f, &f, &FlowParams::default()).unwrap();
        let mut mags = flow.magnitudes();
        assert!(median(&mut mags) < 0.05);
    }

    #[test]
    fn integer_shift_recovered() {
        let tex = Waves::new(7, 40);
        let f1 = tex.render(256, 256, |x, y| (x, y));
        let f2 = tex.render(256, 256, |x, y| (x - 3.0, y));
        let flow = farneback_flow(&f1, &f2, &FlowParams::default()).unwrap();
        let epe = median_epe(&flow, |_, _| (3.0, 0.0), 8);
        assert!(epe < 0.3, "median epe {epe}");
    }

    #[test]
    fn small_rotation_matches_rigid_field() {
        let tex = Waves::new(11, 40);
        let (c, th) = (127.5, 1f64.to_radians());
        let (cs, sn) = (th.cos(), th.sin());
        // Frame 2 is frame 1 rotated by +1 degree about the center.
        let f1 = tex.render(256, 256, |x, y| (x, y));
        let f2 = tex.render(256, 256, |x, y| {
            let (dx, dy) = (x - c, y - c);
            (c + cs * dx + sn * dy, c - sn * dx + cs * dy)
        });
        let flow = farneback_flow(&f1, &f2, &FlowParams::default()).unwrap();
        let epe = median_epe(
            &flow,
            |x, y| {
                let (dx, dy) = (x - c, y - c);
                (cs * dx - sn * dy - dx, sn * dx + cs * dy - dy)
            },
            8,
        );
        assert!(epe < 0.5, "median epe {epe}");
    }

    #[test]
    fn forward_backward_consistency() {
        let tex = Waves::new(5, 40);
        let warp = |x: f64, y: f64| (x - 2.5 - 0.01 * y, y + 1.5 - 0.008 * x);
        let f1 = tex.render(128, 128, |x, y| (x, y));
        let f2 = tex.render(128, 128, warp);
        let params = FlowParams::default();
        let fwd = farneback_flow(&f1, &f2, &params).unwrap();
        let bwd = farneback_flow(&f2, &f1, &params).unwrap();
        let mut errs = Vec::new();
        for y in 12..116 {
            for x in 12..116 {
                let (u, v) = fwd.at(x, y);
                let (bu, bv) = bwd.sample(x as f64 + u, y as f64 + v);
                errs.push(((u + bu).powi(2) + (v + bv).powi(2)).sqrt());
            }
        }
        let m = median(&mut errs);
        assert!(m < 0.5, "round trip {m}");
    }

    #[test]
    fn flat_frames_give_zero_flow() {
        let f = Image::filled(64, 64, 1, 0.4);
        let flow = farneback_flow(&f, &f, &FlowParams::default()).unwrap();
        assert!(flow.u().iter().chain(flow.v()).all(|d| *d == 0.0));
    }

    #[test]
    fn mismatched_dims_rejected() {
        let a = Image::filled(16, 16, 1, 0.5);
        let b = Image::filled(16, 17, 1, 0.5);
        assert!(farneback_flow(&a, &b, &FlowParams::default()).is_err());
    }
}
