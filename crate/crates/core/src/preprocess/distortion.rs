use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imgcore::{BitMask, Image, Raster};

/// Pinhole intrinsics with Brown-Conrady radial and tangential distortion.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    #[serde(default)]
    pub k1: f64,
    #[serde(default)]
    pub k2: f64,
    #[serde(default)]
    pub k3: f64,
    #[serde(default)]
    pub p1: f64,
    #[serde(default)]
    pub p2: f64,
}

const NEWTON_ITERS: usize = 8;
const NEWTON_TOL: f64 = 1e-8;

impl CameraIntrinsics {
    /// Distortion-free intrinsics with focal length `f` centered on a `w x h` frame.
    pub fn centered(width: usize, height: usize, focal: f64) -> Self {
        Self {
            fx: focal,
            fy: focal,
            cx: (width as f64 - 1.0) / 2.0,
            cy: (height as f64 - 1.0) / 2.0,
            k1: 0.0,
            k2: 0.0,
            k3: 0.0,
            p1: 0.0,
            p2: 0.0,
        }
    }

    pub fn validate(&self, width: usize, height: usize) -> Result<()> {
        let finite = [
            self.fx, self.fy, self.cx, self.cy, self.k1, self.k2, self.k3, self.p1, self.p2,
        ]
        .iter()
        .all(|v| v.is_finite());
        if !finite || self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(Error::Config(
                "intrinsics need finite positive focal lengths".into(),
            ));
        }
        if !(0.0..width as f64).contains(&self.cx) || !(0.0..height as f64).contains(&self.cy) {
            return Err(Error::Config(format!(
                "principal point ({}, {}) outside the {width}x{height} frame",
                self.cx, self.cy
            )));
        }
        Ok(())
    }

    pub fn has_distortion(&self) -> bool {
        [self.k1, self.k2, self.k3, self.p1, self.p2]
            .iter()
            .any(|v| *v != 0.0)
    }

    /// Forward Brown-Conrady model on normalized coordinates.
    pub fn distort_normalized(&self, x: f64, y: f64) -> (f64, f64) {
        let r2 = x * x + y * y;
        let radial = 1.0 + r2 * (self.k1 + r2 * (self.k2 + r2 * self.k3));
        let xd = x * radial + 2.0 * self.p1 * x * y + self.p2 * (r2 + 2.0 * x * x);
        let yd = y * radial + self.p1 * (r2 + 2.0 * y * y) + 2.0 * self.p2 * x * y;
        (xd, yd)
    }

    fn distort_jacobian(&self, x: f64, y: f64) -> [[f64; 2]; 2] {
        let r2 = x * x + y * y;
        let radial = 1.0 + r2 * (self.k1 + r2 * (self.k2 + r2 * self.k3));
        let dradial_dr2 = self.k1 + 2.0 * self.k2 * r2 + 3.0 * self.k3 * r2 * r2;
        let dxd_dx =
            radial + x * dradial_dr2 * 2.0 * x + 2.0 * self.p1 * y + self.p2 * (2.0 * x + 4.0 * x);
        let dxd_dy = x * dradial_dr2 * 2.0 * y + 2.0 * self.p1 * x + self.p2 * 2.0 * y;
        let dyd_dx = y * dradial_dr2 * 2.0 * x + self.p1 * 2.0 * x + 2.0 * self.p2 * y;
        let dyd_dy =
            radial + y * dradial_dr2 * 2.0 * y + self.p1 * (2.0 * y + 4.0 * y) + 2.0 * self.p2 * x;
        [[dxd_dx, dxd_dy], [dyd_dx, dyd_dy]]
    }

    /// Inverts the forward model with Newton iterations; returns the ideal
    /// normalized point whose distorted image is `(xd, yd)`.
    pub fn undistort_normalized(&self, xd: f64, yd: f64) -> (f64, f64) {
        let (mut x, mut y) = (xd, yd);
        for _ in 0..NEWTON_ITERS {
            let (fx, fy) = self.distort_normalized(x, y);
            let (ex, ey) = (fx - xd, fy - yd);
            if ex.abs().max(ey.abs()) < NEWTON_TOL {
                break;
            }
            let j = self.distort_jacobian(x, y);
            let det = j[0][0] * j[1][1] - j[0][1] * j[1][0];
            if det.abs() < 1e-12 {
                break;
            }
            x -= (j[1][1] * ex - j[0][1] * ey) / det;
            y -= (-j[1][0] * ex + j[0][0] * ey) / det;
        }
        (x, y)
    }

    pub fn pixel_to_normalized(&self, u: f64, v: f64) -> (f64, f64) {
        ((u - self.cx) / self.fx, (v - self.cy) / self.fy)
    }

    pub fn normalized_to_pixel(&self, x: f64, y: f64) -> (f64, f64) {
        (self.fx * x + self.cx, self.fy * y + self.cy)
    }

    /// Maps an ideal pixel to where it appears in the distorted image.
    pub fn distort_pixel(&self, u: f64, v: f64) -> (f64, f64) {
        let (x, y) = self.pixel_to_normalized(u, v);
        let (xd, yd) = self.distort_normalized(x, y);
        self.normalized_to_pixel(xd, yd)
    }

    /// Maps a distorted pixel to its ideal location.
    pub fn undistort_pixel(&self, u: f64, v: f64) -> (f64, f64) {
        let (xd, yd) = self.pixel_to_normalized(u, v);
        let (x, y) = self.undistort_normalized(xd, yd);
        self.normalized_to_pixel(x, y)
    }
}

/// Undistorted image plus the mask of output pixels that had input support.
#[derive(Clone, Debug)]
pub struct Undistorted {
    pub image: Image,
    pub valid: BitMask,
}

/// Inverse-warp resampling: every output (ideal) pixel is looked up at its
/// forward-distorted location in the input.
pub fn undistort(img: &Image, k: &CameraIntrinsics) -> Undistorted {
    let (w, h) = img.dims();
    let ch = img.channels();
    let mut out = Raster::zeros(w, h, ch);
    let mut valid = BitMask::empty(w, h);
    for y in 0..h {
        for x in 0..w {
            let (su, sv) = k.distort_pixel(x as f64, y as f64);
            let mut ok = true;
            for c in 0..ch {
                match img.sample(su, sv, c) {
                    Some(v) => out.set(x, y, c, v),
                    None => {
                        ok = false;
                        break;
                    }
                }
            }
            if ok {
                valid.set(x, y, true);
            } else {
                for c in 0..ch {
                    out.set(x, y, c, 0.0);
                }
            }
        }
    }
    Undistorted {
        image: Image::from_raster(out),
        valid,
    }
}

/// Forward warp used to synthesize lens distortion: every output (distorted)
/// pixel is looked up at its ideal location via Newton inversion.
pub fn distort(img: &Image, k: &CameraIntrinsics) -> Image {
    let (w, h) = img.dims();
    let ch = img.channels();
    let mut out = Raster::zeros(w, h, ch);
    for y in 0..h {
        for x in 0..w {
            let (su, sv) = k.undistort_pixel(x as f64, y as f64);
            for c in 0..ch {
                out.set(x, y, c, img.sample(su, sv, c).unwrap_or(0.0));
            }
        }
    }
    Image::from_raster(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn intrinsics(k1: f64) -> CameraIntrinsics {
        CameraIntrinsics {
            k1,
            ..CameraIntrinsics::centered(64, 64, 60.0)
        }
    }

    #[test]
    fn zero_coefficients_identity() {
        let img = Image::from_fn(17, 13, |x, y| ((x * 31 + y * 17) % 23) as f64 / 22.0);
        let k = CameraIntrinsics::centered(17, 13, 20.0);
        let u = undistort(&img, &k);
        assert_eq!(u.valid.count(), 17 * 13);
        for (a, b) in img.data().iter().zip(u.image.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn principal_point_fixed_for_radial() {
        let k = CameraIntrinsics {
            k2: -0.05,
            k3: 0.01,
            ..intrinsics(0.2)
        };
        let (u, v) = k.distort_pixel(k.cx, k.cy);
        assert_eq!((u, v), (k.cx, k.cy));
    }

    #[test]
    fn k1_displacement_and_newton_inverse() {
        let k = intrinsics(0.1);
        let (xd, yd) = k.distort_normalized(0.5, 0.0);
        assert!((xd - 0.5 - 0.0125).abs() < 1e-15);
        assert_eq!(yd, 0.0);
        let (x, y) = k.undistort_normalized(xd, yd);
        assert!((x - 0.5).abs() < 1e-8 && y.abs() < 1e-12);
    }

    #[test]
    fn tangential_jacobian_matches_finite_differences() {
        let k = CameraIntrinsics {
            k2: 0.03,
            k3: -0.01,
            p1: 0.002,
            p2: -0.003,
            ..intrinsics(-0.2)
        };
        let (x, y) = (0.3, -0.2);
        let j = k.distort_jacobian(x, y);
        let h = 1e-6;
        let fd = |dx: f64, dy: f64| {
            let a = k.distort_normalized(x + dx, y + dy);
            let b = k.distort_normalized(x - dx, y - dy);
            ((a.0 - b.0) / (2.0 * h), (a.1 - b.1) / (2.0 * h))
        };
        let (cx, cy) = fd(h, 0.0);
        let (dx, dy) = fd(0.0, h);
        assert!((j[0][0] - cx).abs() < 1e-7 && (j[1][0] - cy).abs() < 1e-7);
        assert!((j[0][1] - dx).abs() < 1e-7 && (j[1][1] - dy).abs() < 1e-7);
    }

    fn blob(w: usize, h: usize, px: f64, py: f64) -> Image {
        Image::from_fn(w, h, |x, y| {
            let d2 = (x as f64 - px).powi(2) + (y as f64 - py).powi(2);
            (-d2 / (2.0 * 2.0 * 2.0)).exp()
        })
    }

    fn centroid(img: &Image) -> (f64, f64) {
        let (mut sx, mut sy, mut s) = (0.0, 0.0, 0.0);
        for y in 0..img.height() {
            for x in 0..img.width() {
                let v = img.get(x, y, 0);
                sx += v * x as f64;
                sy += v * y as f64;
                s += v;
            }
        }
        (sx / s, sy / s)
    }

    #[test]
    fn undistort_moves_displaced_point_back() {
        // Ideal blob at normalized radius 0.5 along x; distortion pushes it out
        // by 0.0125 normalized units; undistortion must bring it back.
        let k = CameraIntrinsics {
            k1: 0.1,
            ..CameraIntrinsics::centered(64, 64, 40.0)
        };
        let (px, py) = k.normalized_to_pixel(0.5, 0.0);
        let ideal = blob(64, 64, px, py);
        let distorted = distort(&ideal, &k);
        let (dxp, _) = centroid(&distorted);
        let (expected_dx, _) = k.distort_pixel(px, py);
        assert!((dxp - expected_dx).abs() < 0.1, "{dxp} vs {expected_dx}");
        let restored = undistort(&distorted, &k).image;
        let (rx, ry) = centroid(&restored);
        assert!((rx - px).abs() < 0.1 && (ry - py).abs() < 0.1, "{rx},{ry}");
    }
}
