use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransformKind {
    Homography,
    Affine,
}

/// Planar transform as a 3x3 homogeneous matrix with `m[2][2] = 1`.
///
/// Affine parameters follow `x' = a1 x + a2 y + tx`, `y' = a3 x + a4 y + ty`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Transform2D {
    m: Matrix3<f64>,
    kind: TransformKind,
}

impl Transform2D {
    pub fn identity() -> Self {
        Self {
            m: Matrix3::identity(),
            kind: TransformKind::Affine,
        }
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        Self::affine([1.0, 0.0, 0.0, 1.0, tx, ty])
    }

    /// From `[a1, a2, a3, a4, tx, ty]`.
    pub fn affine(p: [f64; 6]) -> Self {
        Self {
            m: Matrix3::new(p[0], p[1], p[4], p[2], p[3], p[5], 0.0, 0.0, 1.0),
            kind: TransformKind::Affine,
        }
    }

    /// Normalizes so that `m[2][2] = 1`; a matrix whose bottom row is
    /// `(0, 0, 1)` after normalization is still tagged as a homography.
    pub fn homography(m: Matrix3<f64>) -> Result<Self> {
        let s = m[(2, 2)];
        if !s.is_finite() || s.abs() < 1e-12 || m.iter().any(|v| !v.is_finite()) {
            return Err(Error::Degenerate);
        }
        Ok(Self {
            m: m / s,
            kind: TransformKind::Homography,
        })
    }

    pub fn kind(&self) -> TransformKind {
        self.kind
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.m
    }

    /// `[a1, a2, a3, a4, tx, ty]` of the affine part.
    pub fn params(&self) -> [f64; 6] {
        let m = &self.m;
        [
            m[(0, 0)],
            m[(0, 1)],
            m[(1, 0)],
            m[(1, 1)],
            m[(0, 2)],
            m[(1, 2)],
        ]
    }

    /// Drops any perspective terms.
    pub fn to_affine(&self) -> Self {
        Self::affine(self.params())
    }

    pub fn apply(&self, p: [f64; 2]) -> [f64; 2] {
        let m = &self.m;
        let x = m[(0, 0)] * p[0] + m[(0, 1)] * p[1] + m[(0, 2)];
        let y = m[(1, 0)] * p[0] + m[(1, 1)] * p[1] + m[(1, 2)];
        match self.kind {
            TransformKind::Affine => [x, y],
            TransformKind::Homography => {
                let w = m[(2, 0)] * p[0] + m[(2, 1)] * p[1] + m[(2, 2)];
                [x / w, y / w]
            }
        }
    }

    pub fn inverse(&self) -> Result<Self> {
        let inv = self.m.try_inverse().ok_or(Error::Singular)?;
        match self.kind {
            TransformKind::Affine => Ok(Self::affine([
                inv[(0, 0)],
                inv[(0, 1)],
                inv[(1, 0)],
                inv[(1, 1)],
                inv[(0, 2)],
                inv[(1, 2)],
            ])),
            TransformKind::Homography => Self::homography(inv),
        }
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Transform2D) -> Self {
        let m = self.m * other.m;
        if self.kind == TransformKind::Affine && other.kind == TransformKind::Affine {
            let mut t = Self {
                m,
                kind: TransformKind::Affine,
            };
            t.m[(2, 0)] = 0.0;
            t.m[(2, 1)] = 0.0;
            t.m[(2, 2)] = 1.0;
            t
        } else {
            Self::homography(m).unwrap_or(Self {
                m,
                kind: TransformKind::Homography,
            })
        }
    }

    /// Row-major 3x3 entries.
    pub fn to_row_major(&self) -> [f64; 9] {
        let m = &self.m;
        [
            m[(0, 0)],
            m[(0, 1)],
            m[(0, 2)],
            m[(1, 0)],
            m[(1, 1)],
            m[(1, 2)],
            m[(2, 0)],
            m[(2, 1)],
            m[(2, 2)],
        ]
    }

    pub fn from_row_major(v: [f64; 9]) -> Result<Self> {
        let m = Matrix3::from_row_slice(&v);
        if v[6] == 0.0 && v[7] == 0.0 && v[8] == 1.0 {
            Ok(Self {
                m,
                kind: TransformKind::Affine,
            })
        } else {
            Self::homography(m)
        }
    }
}

impl Default for Transform2D {
    fn default() -> Self {
        Self::identity()
    }
}

/// Mean distance between where two transforms send the four corners of a
/// `width x height` frame.
pub fn mean_corner_error(a: &Transform2D, b: &Transform2D, width: usize, height: usize) -> f64 {
    let (w, h) = ((width - 1) as f64, (height - 1) as f64);
    let corners = [[0.0, 0.0], [w, 0.0], [0.0, h], [w, h]];
    corners
        .iter()
        .map(|&c| {
            let (p, q) = (a.apply(c), b.apply(c));
            (p[0] - q[0]).hypot(p[1] - q[1])
        })
        .sum::<f64>()
        / 4.0
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn affine_round_trip() {
        let t = Transform2D::affine([1.02, 0.03, -0.01, 0.98, 4.0, -2.5]);
        let inv = t.inverse().unwrap();
        let p = [13.5, -7.25];
        let q = inv.apply(t.apply(p));
        assert!((q[0] - p[0]).abs() < 1e-12 && (q[1] - p[1]).abs() < 1e-12);
        assert_eq!(t.compose(&inv).kind(), TransformKind::Affine);
        assert!(mean_corner_error(&t.compose(&inv), &Transform2D::identity(), 64, 64) < 1e-12);
    }

    #[test]
    fn compose_order() {
        let a = Transform2D::translation(1.0, 0.0);
        let b = Transform2D::affine([2.0, 0.0, 0.0, 2.0, 0.0, 0.0]);
        // a ∘ b: scale then shift.
        assert_eq!(a.compose(&b).apply([1.0, 1.0]), [3.0, 2.0]);
        assert_eq!(b.compose(&a).apply([1.0, 1.0]), [4.0, 2.0]);
    }

    #[test]
    fn homography_normalized() {
        let m = Matrix3::new(2.0, 0.0, 4.0, 0.0, 2.0, 6.0, 0.002, 0.0, 2.0);
        let h = Transform2D::homography(m).unwrap();
        assert_eq!(h.matrix()[(2, 2)], 1.0);
        let p = h.apply([10.0, 0.0]);
        let w = 0.002 * 10.0 + 2.0;
        assert!((p[0] - 24.0 / w).abs() < 1e-12 && (p[1] - 6.0 / w).abs() < 1e-12);
        assert!(Transform2D::homography(Matrix3::zeros()).is_err());
    }

    #[test]
    fn row_major_round_trip() {
        let t = Transform2D::affine([1.0, 0.1, -0.2, 0.9, 3.0, 4.0]);
        assert_eq!(Transform2D::from_row_major(t.to_row_major()).unwrap(), t);
    }
}
