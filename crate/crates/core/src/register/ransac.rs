use nalgebra::{Matrix3, SMatrix, SymmetricEigen};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::transform::Transform2D;
use crate::error::{Error, Result};
use crate::flow::Correspondence;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RansacParams {
    pub iterations: usize,
    /// Symmetric transfer error bound, pixels.
    pub inlier_tol: f64,
    pub seed: u64,
}

impl Default for RansacParams {
    fn default() -> Self {
        Self {
            iterations: 500,
            inlier_tol: 2.0,
            seed: 0,
        }
    }
}

/// Mean of forward and backward transfer distances,
/// `(|H p1 - p2| + |H^-1 p2 - p1|) / 2`.
pub fn symmetric_transfer_error(h: &Transform2D, h_inv: &Transform2D, c: &Correspondence) -> f64 {
    let f = h.apply(c.p1);
    let b = h_inv.apply(c.p2);
    let e = 0.5 * ((f[0] - c.p2[0]).hypot(f[1] - c.p2[1]) + (b[0] - c.p1[0]).hypot(b[1] - c.p1[1]));
    if e.is_finite() {
        e
    } else {
        f64::INFINITY
    }
}

/// Similarity moving the centroid to the origin with mean distance sqrt(2).
fn normalizer(pts: impl Iterator<Item = [f64; 2]> + Clone) -> Matrix3<f64> {
    let n = pts.clone().count() as f64;
    let (sx, sy) = pts
        .clone()
        .fold((0.0, 0.0), |a, p| (a.0 + p[0], a.1 + p[1]));
    let (cx, cy) = (sx / n, sy / n);
    let mean_d = pts.map(|p| (p[0] - cx).hypot(p[1] - cy)).sum::<f64>() / n;
    let s = if mean_d > 1e-12 {
        std::f64::consts::SQRT_2 / mean_d
    } else {
        1.0
    };
    Matrix3::new(s, 0.0, -s * cx, 0.0, s, -s * cy, 0.0, 0.0, 1.0)
}

/// Normalized direct linear transform over all given pairs (>= 4).
pub fn dlt_homography(pairs: &[Correspondence]) -> Result<Transform2D> {
    if pairs.len() < 4 {
        return Err(Error::InsufficientMatches { found: pairs.len() });
    }
    let t1 = normalizer(pairs.iter().map(|c| c.p1));
    let t2 = normalizer(pairs.iter().map(|c| c.p2));
    let apply = |t: &Matrix3<f64>, p: [f64; 2]| {
        [t[(0, 0)] * p[0] + t[(0, 2)], t[(1, 1)] * p[1] + t[(1, 2)]]
    };
    let mut ata = SMatrix::<f64, 9, 9>::zeros();
    for c in pairs {
        let [x, y] = apply(&t1, c.p1);
        let [u, v] = apply(&t2, c.p2);
        let r1 =
            SMatrix::<f64, 1, 9>::from_row_slice(&[-x, -y, -1.0, 0.0, 0.0, 0.0, u * x, u * y, u]);
        let r2 =
            SMatrix::<f64, 1, 9>::from_row_slice(&[0.0, 0.0, 0.0, -x, -y, -1.0, v * x, v * y, v]);
        ata += r1.transpose() * r1 + r2.transpose() * r2;
    }
    let eig = SymmetricEigen::new(ata);
    let (imin, _) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .fold(
            (0, f64::INFINITY),
            |a, (i, &v)| if v < a.1 { (i, v) } else { a },
        );
    let h = eig.eigenvectors.column(imin);
    let hn = Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], h[8]);
    let t2_inv = t2.try_inverse().ok_or(Error::Degenerate)?;
    Transform2D::homography(t2_inv * hn * t1)
}

fn cross(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

/// True when some three of the four points are (nearly) collinear.
fn has_collinear_triple(p: &[[f64; 2]; 4]) -> bool {
    let scale = p
        .iter()
        .flat_map(|a| p.iter().map(move |b| (a[0] - b[0]).hypot(a[1] - b[1])))
        .fold(0.0, f64::max)
        .max(1e-12);
    let eps = 1e-6 * scale * scale;
    [(0, 1, 2), (0, 1, 3), (0, 2, 3), (1, 2, 3)]
        .iter()
        .any(|&(i, j, k)| cross(p[i], p[j], p[k]).abs() < eps)
}

/// True when every point lies on one line (smallest covariance eigenvalue ~ 0).
fn all_collinear(pts: impl Iterator<Item = [f64; 2]> + Clone) -> bool {
    let n = pts.clone().count() as f64;
    let (sx, sy) = pts
        .clone()
        .fold((0.0, 0.0), |a, p| (a.0 + p[0], a.1 + p[1]));
    let (cx, cy) = (sx / n, sy / n);
    let (mut a, mut b, mut c) = (0.0, 0.0, 0.0);
    for p in pts {
        let (dx, dy) = (p[0] - cx, p[1] - cy);
        a += dx * dx;
        b += dx * dy;
        c += dy * dy;
    }
    let tr = a + c;
    let min_eig = 0.5 * (tr - ((a - c).powi(2) + 4.0 * b * b).sqrt());
    min_eig <= 1e-9 * tr.max(1e-300)
}

fn inliers_of(h: &Transform2D, pairs: &[Correspondence], tol: f64) -> (Vec<usize>, f64) {
    let Ok(h_inv) = h.inverse() else {
        return (Vec::new(), f64::INFINITY);
    };
    let mut idx = Vec::new();
    let mut total = 0.0;
    for (i, c) in pairs.iter().enumerate() {
        let e = symmetric_transfer_error(h, &h_inv, c);
        if e < tol {
            idx.push(i);
            total += e;
        }
    }
    (idx, total)
}

/// Robust homography: best minimal-sample hypothesis by inlier count (ties
/// broken by lower summed error), then a normalized DLT refit on its
/// inliers. Deterministic for a fixed seed.
pub fn ransac_homography(
    pairs: &[Correspondence],
    params: &RansacParams,
) -> Result<(Transform2D, Vec<Correspondence>)> {
    if pairs.len() < 4 {
        return Err(Error::InsufficientMatches { found: pairs.len() });
    }
    if all_collinear(pairs.iter().map(|c| c.p1)) || all_collinear(pairs.iter().map(|c| c.p2)) {
        return Err(Error::Degenerate);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut best: Option<(Vec<usize>, f64)> = None;
    for _ in 0..params.iterations {
        let pick = sample(&mut rng, pairs.len(), 4);
        let s: Vec<Correspondence> = pick.iter().map(|i| pairs[i]).collect();
        let q1 = [s[0].p1, s[1].p1, s[2].p1, s[3].p1];
        let q2 = [s[0].p2, s[1].p2, s[2].p2, s[3].p2];
        if has_collinear_triple(&q1) || has_collinear_triple(&q2) {
            continue;
        }
        let Ok(h) = dlt_homography(&s) else {
            continue;
        };
        let (idx, err) = inliers_of(&h, pairs, params.inlier_tol);
        let better = match &best {
            None => idx.len() >= 4,
            Some((b, be)) => idx.len() > b.len() || (idx.len() == b.len() && err < *be),
        };
        if better {
            best = Some((idx, err));
        }
    }
    let Some((idx, _)) = best else {
        return Err(Error::Degenerate);
    };

    // Refit on the consensus set; keep the refit only if it does not lose support.
    let mut inl: Vec<Correspondence> = idx.iter().map(|&i| pairs[i]).collect();
    let mut h = dlt_homography(&inl)?;
    for _ in 0..3 {
        let (idx2, _) = inliers_of(&h, pairs, params.inlier_tol);
        if idx2.len() < 4 || idx2.len() < inl.len() {
            break;
        }
        let next: Vec<Correspondence> = idx2.iter().map(|&i| pairs[i]).collect();
        let grew = next.len() > inl.len();
        inl = next;
        h = dlt_homography(&inl)?;
        if !grew {
            break;
        }
    }
    Ok((h, inl))
}

/// Least-squares affine transform with `A p1 ~ p2`.
pub fn fit_affine(pairs: &[Correspondence]) -> Result<Transform2D> {
    if pairs.len() < 3 {
        return Err(Error::InsufficientMatches { found: pairs.len() });
    }
    let mut m = Matrix3::<f64>::zeros();
    let mut bx = nalgebra::Vector3::<f64>::zeros();
    let mut by = nalgebra::Vector3::<f64>::zeros();
    for c in pairs {
        let v = nalgebra::Vector3::new(c.p1[0], c.p1[1], 1.0);
        m += v * v.transpose();
        bx += v * c.p2[0];
        by += v * c.p2[1];
    }
    let lu = m.lu();
    let sx = lu.solve(&bx).ok_or(Error::Degenerate)?;
    let sy = lu.solve(&by).ok_or(Error::Degenerate)?;
    if sx.iter().chain(sy.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Degenerate);
    }
    Ok(Transform2D::affine([
        sx[0], sx[1], sy[0], sy[1], sx[2], sy[2],
    ]))
}
