use std::num::NonZero;
use std::path::Path;

use kiddo::{ImmutableKdTree, SquaredEuclidean};
use log::debug;
use nalgebra::{Matrix3, Rotation3, SMatrix, SVector, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{umeyama, Similarity};
use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    points: Vec<[f64; 3]>,
}

impl PointCloud {
    pub fn new(points: Vec<[f64; 3]>) -> Result<Self> {
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite);
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[[f64; 3]] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn transformed(&self, s: &Similarity) -> Self {
        Self {
            points: self.points.iter().map(|p| s.apply(p)).collect(),
        }
    }

    /// ASCII PLY with vertex positions only.
    pub fn to_ply(&self) -> String {
        let mut out = format!(
            "ply\nformat ascii 1.0\nelement vertex {}\nproperty double x\nproperty double y\nproperty double z\nend_header\n",
            self.points.len()
        );
        for [x, y, z] in &self.points {
            out.push_str(&format!("{x} {y} {z}\n"));
        }
        out
    }

    /// Reads ASCII PLY; only the first three properties of each vertex are used.
    pub fn parse_ply(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some("ply") {
            return Err(Error::Parse("missing ply magic".into()));
        }
        let mut count = None;
        let mut n_props = 0usize;
        let mut in_vertex = false;
        for line in lines.by_ref() {
            let t: Vec<&str> = line.split_whitespace().collect();
            match t.as_slice() {
                ["format", fmt, ..] if *fmt != "ascii" => {
                    return Err(Error::Parse(format!("unsupported ply format {fmt}")));
                }
                ["element", "vertex", n] => {
                    count = Some(
                        n.parse::<usize>()
                            .map_err(|e| Error::Parse(e.to_string()))?,
                    );
                    in_vertex = true;
                }
                ["element", ..] => in_vertex = false,
                ["property", ..] if in_vertex => n_props += 1,
                ["end_header"] => break,
                _ => {}
            }
        }
        let count = count.ok_or_else(|| Error::Parse("no vertex element".into()))?;
        if n_props < 3 {
            return Err(Error::Parse("vertices need x, y and z".into()));
        }
        let mut points = Vec::with_capacity(count);
        for line in lines.take(count) {
            let v: Vec<f64> = line
                .split_whitespace()
                .take(3)
                .map(|t| t.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Parse(e.to_string()))?;
            if v.len() != 3 {
                return Err(Error::Parse(format!("short vertex line: {line:?}")));
            }
            points.push([v[0], v[1], v[2]]);
        }
        if points.len() != count {
            return Err(Error::Parse(format!(
                "expected {count} vertices, found {}",
                points.len()
            )));
        }
        Self::new(points)
    }

    pub fn read_ply(path: &Path) -> Result<Self> {
        Self::parse_ply(&std::fs::read_to_string(path)?)
    }

    pub fn write_ply(&self, path: &Path) -> Result<()> {
        Ok(std::fs::write(path, self.to_ply())?)
    }
}

/// Nearest-neighbour lookup over a fixed point set.
pub struct NearestIndex {
    tree: ImmutableKdTree<f64, 3>,
}

impl NearestIndex {
    pub fn new(cloud: &PointCloud) -> Result<Self> {
        if cloud.is_empty() {
            return Err(Error::InvalidArgument("empty point cloud".into()));
        }
        Ok(Self {
            tree: ImmutableKdTree::new_from_slice(cloud.points()),
        })
    }

    /// `(squared distance, index)` of the closest point.
    pub fn nearest(&self, q: &[f64; 3]) -> (f64, usize) {
        let n = self.tree.nearest_one::<SquaredEuclidean>(q);
        (n.distance, n.item as usize)
    }

    /// Indices of the `k` closest points, nearest first.
    pub fn nearest_k(&self, q: &[f64; 3], k: usize) -> Vec<usize> {
        let Some(k) = NonZero::new(k) else {
            return Vec::new();
        };
        self.tree
            .nearest_n::<SquaredEuclidean>(q, k)
            .into_iter()
            .map(|n| n.item as usize)
            .collect()
    }
}

/// Unit normals from the smallest principal axis of each point's `k`
/// nearest neighbours.
fn estimate_normals(cloud: &PointCloud, index: &NearestIndex, k: usize) -> Vec<Vector3<f64>> {
    cloud
        .points()
        .par_iter()
        .map(|p| {
            let nb = index.nearest_k(p, k);
            let n = nb.len() as f64;
            let mean = nb.iter().fold(Vector3::zeros(), |acc, &j| {
                acc + Vector3::from(cloud.points()[j])
            }) / n;
            let cov = nb.iter().fold(Matrix3::zeros(), |acc, &j| {
                let d = Vector3::from(cloud.points()[j]) - mean;
                acc + d * d.transpose()
            });
            let eig = cov.symmetric_eigen();
            eig.eigenvectors.column(eig.eigenvalues.imin()).into_owned()
        })
        .collect()
}

/// Linearized point-to-plane update composed onto `current`, or `None` when
/// the normal equations are singular.
fn point_to_plane_step(
    src: &PointCloud,
    dst: &PointCloud,
    normals: &[Vector3<f64>],
    matches: &[(usize, usize)],
    current: &Similarity,
    with_scale: bool,
) -> Option<Similarity> {
    // Unknowns: rotation vector, translation, relative scale change.
    let mut h = SMatrix::<f64, 7, 7>::zeros();
    let mut g = SVector::<f64, 7>::zeros();
    for &(i, j) in matches {
        let p = Vector3::from(current.apply(&src.points()[i]));
        let n = normals[j];
        let r = (p - Vector3::from(dst.points()[j])).dot(&n);
        let c = p.cross(&n);
        let jac = SVector::<f64, 7>::from([
            c.x,
            c.y,
            c.z,
            n.x,
            n.y,
            n.z,
            if with_scale { p.dot(&n) } else { 0.0 },
        ]);
        h += jac * jac.transpose();
        g += jac * r;
    }
    let damping = 1e-9 * h.trace().max(1e-300);
    for d in 0..7 {
        h[(d, d)] += damping;
    }
    let x = h.cholesky()?.solve(&-g);
    let inc_r = *Rotation3::new(Vector3::new(x[0], x[1], x[2])).matrix();
    let inc_s = 1.0 + x[6];
    if !(inc_s > 0.0) {
        return None;
    }
    Some(Similarity {
        rotation: inc_r * current.rotation,
        translation: inc_s * inc_r * current.translation + Vector3::new(x[3], x[4], x[5]),
        scale: inc_s * current.scale,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IcpParams {
    pub max_iters: usize,
    /// Fraction of source points, closest first, entering each update.
    /// Below 1 this is trimmed ICP for partially overlapping clouds.
    pub overlap: f64,
    pub with_scale: bool,
}

impl Default for IcpParams {
    fn default() -> Self {
        Self {
            max_iters: 50,
            overlap: 1.0,
            with_scale: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IcpResult {
    /// Maps `src` onto `dst`.
    pub transform: Similarity,
    /// RMS distance over the trimmed correspondences at `transform`.
    pub residual: f64,
    pub iterations: usize,
    /// Residual before each update, then the final value.
    pub history: Vec<f64>,
}

/// Trimmed squared distances and matches of `src` under `s`.
fn match_trimmed(
    src: &PointCloud,
    index: &NearestIndex,
    s: &Similarity,
    keep: usize,
) -> (f64, Vec<(usize, usize)>) {
    let mut m: Vec<(f64, usize, usize)> = src
        .points()
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let (d2, j) = index.nearest(&s.apply(p));
            (d2, i, j)
        })
        .collect();
    m.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    m.truncate(keep);
    let rms = (m.iter().map(|t| t.0).sum::<f64>() / keep as f64).sqrt();
    (rms, m.into_iter().map(|t| (t.1, t.2)).collect())
}

const NORMAL_NEIGHBOURS: usize = 10;

/// ICP with two candidate updates per iteration: the closed-form
/// point-to-point similarity and a linearized point-to-plane step. The one
/// with the lower re-matched residual is kept, so the residual never
/// increases. Starts from the identity or the centroid-aligning translation,
/// whichever fits better, and stops when the relative residual change drops
/// below 1e-6.
pub fn icp_align(src: &PointCloud, dst: &PointCloud, params: &IcpParams) -> Result<IcpResult> {
    if src.is_empty() || dst.is_empty() {
        return Err(Error::InvalidArgument(
            "icp needs two non-empty clouds".into(),
        ));
    }
    if !(params.overlap > 0.0 && params.overlap <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "overlap {} outside (0, 1]",
            params.overlap
        )));
    }
    let index = NearestIndex::new(dst)?;
    let keep = ((src.len() as f64 * params.overlap).round() as usize).clamp(1, src.len());
    let centroid = |c: &PointCloud| {
        let n = c.len() as f64;
        c.points()
            .iter()
            .fold(Vector3::zeros(), |acc, p| acc + Vector3::from(*p))
            / n
    };
    let shifted = Similarity {
        translation: centroid(dst) - centroid(src),
        ..Similarity::identity()
    };
    let mut current = Similarity::identity();
    let (mut residual, mut matches) = match_trimmed(src, &index, &current, keep);
    let (r, m) = match_trimmed(src, &index, &shifted, keep);
    if r < residual {
        (current, residual, matches) = (shifted, r, m);
    }
    let normals = estimate_normals(dst, &index, NORMAL_NEIGHBOURS.min(dst.len()));
    let mut history = vec![residual];
    let mut iterations = 0;
    while iterations < params.max_iters && residual > 1e-15 {
        let a: Vec<[f64; 3]> = matches.iter().map(|&(i, _)| src.points()[i]).collect();
        let b: Vec<[f64; 3]> = matches.iter().map(|&(_, j)| dst.points()[j]).collect();
        let cand = umeyama(&a, &b, params.with_scale)?;
        let (mut r, mut m) = match_trimmed(src, &index, &cand, keep);
        let mut cand = cand;
        if let Some(alt) =
            point_to_plane_step(src, dst, &normals, &matches, &current, params.with_scale)
        {
            let (ra, ma) = match_trimmed(src, &index, &alt, keep);
            if ra < r {
                (cand, r, m) = (alt, ra, ma);
            }
        }
        iterations += 1;
        if r > residual {
            break;
        }
        let rel = (residual - r) / residual;
        current = cand;
        residual = r;
        matches = m;
        history.push(r);
        debug!("icp iter {iterations}: residual {r:.6e}");
        if rel < 1e-6 {
            break;
        }
    }
    Ok(IcpResult {
        transform: current,
        residual,
        iterations,
        history,
    })
}

/// RMS distance from every estimated point to its nearest ground-truth point.
pub fn ade_rmse(est: &PointCloud, gt: &PointCloud) -> Result<f64> {
    if est.is_empty() || gt.is_empty() {
        return Err(Error::InvalidArgument(
            "ade needs two non-empty clouds".into(),
        ));
    }
    let index = NearestIndex::new(gt)?;
    let sum: f64 = est.points().par_iter().map(|p| index.nearest(p).0).sum();
    Ok((sum / est.len() as f64).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Rotation3;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    /// Asymmetric bumpy surface patch sampled on a grid, in cm.
    fn surface(x0: f64, x1: f64, n: usize) -> PointCloud {
        let mut pts = Vec::new();
        for i in 0..n {
            for j in 0..n {
                let x = x0 + (x1 - x0) * i as f64 / (n - 1) as f64;
                let y = -5.0 + 10.0 * j as f64 / (n - 1) as f64;
                let bump = |cx: f64, cy: f64, s: f64| {
                    (-((x - cx).powi(2) + (y - cy).powi(2)) / (2.0 * s * s)).exp()
                };
                let z = 3.0 * bump(1.0, -2.0, 1.5) - 2.0 * bump(-2.5, 2.0, 1.0)
                    + 1.5 * bump(3.0, 3.0, 0.8)
                    + 0.1 * x;
                pts.push([x, y, z]);
            }
        }
        PointCloud::new(pts).unwrap()
    }

    #[test]
    fn identical_clouds() {
        let c = surface(-5.0, 5.0, 20);
        let r = icp_align(&c, &c, &IcpParams::default()).unwrap();
        assert!(r.residual < 1e-9);
        assert!(
            (r.transform.rotation - nalgebra::Matrix3::identity())
                .abs()
                .max()
                < 1e-12
        );
        assert!(ade_rmse(&c, &c).unwrap() == 0.0);
    }

    #[test]
    fn recovers_rotation_and_translation() {
        let dst = surface(-5.0, 5.0, 30);
        let truth = Similarity {
            rotation: *Rotation3::from_axis_angle(&Vector3::z_axis(), 10f64.to_radians()).matrix(),
            translation: Vector3::new(1.0, 2.0, 3.0),
            scale: 1.0,
        };
        // src = truth^-1 dst, so ICP must find `truth`.
        let inv = Similarity {
            rotation: truth.rotation.transpose(),
            translation: -(truth.rotation.transpose() * truth.translation),
            scale: 1.0,
        };
        let src = dst.transformed(&inv);
        let r = icp_align(
            &src,
            &dst,
            &IcpParams {
                max_iters: 100,
                ..IcpParams::default()
            },
        )
        .unwrap();
        assert!(r.residual < 1e-6, "residual {}", r.residual);
        assert!((r.transform.rotation - truth.rotation).abs().max() < 1e-6);
        assert!((r.transform.translation - truth.translation).abs().max() < 1e-6);
        assert!(r.history.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn partial_overlap_with_noise() {
        let sigma = 0.05;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let normal = Normal::new(0.0, sigma).unwrap();
        let mut noisy = |c: PointCloud, dx: f64, dy: f64| {
            PointCloud::new(
                c.points()
                    .iter()
                    .map(|p| [p[0] + dx, p[1] + dy, p[2] + normal.sample(&mut rng)])
                    .collect(),
            )
            .unwrap()
        };
        // Both grids have 0.25 cm spacing; the source covers x in [0, 10],
        // so half of it overlaps the target.
        let dst = noisy(surface(-5.0, 5.0, 41), 0.0, 0.0);
        let src = noisy(surface(0.0, 10.0, 41), 0.2, -0.1);
        let r = icp_align(
            &src,
            &dst,
            &IcpParams {
                overlap: 0.45,
                with_scale: false,
                max_iters: 100,
            },
        )
        .unwrap();
        assert!(
            r.residual >= sigma && r.residual <= 3.0 * sigma,
            "residual {}",
            r.residual
        );
    }

    #[test]
    fn plane_offset_along_normal() {
        let mut gt = Vec::new();
        for i in 0..21 {
            for j in 0..21 {
                gt.push([i as f64 * 0.5, j as f64 * 0.5, 1.0]);
            }
        }
        let est: Vec<[f64; 3]> = gt.iter().map(|p| [p[0], p[1], p[2] + 0.5]).collect();
        let v = ade_rmse(
            &PointCloud::new(est).unwrap(),
            &PointCloud::new(gt).unwrap(),
        )
        .unwrap();
        assert!((v - 0.5).abs() < 1e-12);
    }

    #[test]
    fn low_relief_patch_slides_into_place() {
        // Gentle bumps leave point-to-point matching a tangential local minimum.
        let pts: Vec<[f64; 3]> = (0..900)
            .map(|i| {
                let (x, y) = ((i % 30) as f64 / 3.0 - 5.0, (i / 30) as f64 / 3.0 - 5.0);
                [
                    x,
                    y,
                    1.2 * (-((x + 1.0).powi(2) + (y - 2.0).powi(2)) / 3.0).exp() + 0.05 * x,
                ]
            })
            .collect();
        let dst = PointCloud::new(pts).unwrap();
        let rot = *Rotation3::from_axis_angle(&Vector3::z_axis(), 8f64.to_radians()).matrix();
        let src = dst.transformed(&Similarity {
            rotation: rot,
            translation: Vector3::new(0.5, -0.7, 0.2),
            scale: 0.9,
        });
        let r = icp_align(&src, &dst, &IcpParams::default()).unwrap();
        assert!(r.residual < 1e-9, "residual {}", r.residual);
        assert!((r.transform.scale - 1.0 / 0.9).abs() < 1e-9);
    }

    #[test]
    fn empty_inputs_rejected() {
        let c = surface(0.0, 1.0, 3);
        assert!(ade_rmse(&PointCloud::default(), &c).is_err());
        assert!(icp_align(&c, &PointCloud::default(), &IcpParams::default()).is_err());
    }

    #[test]
    fn duplicate_points_are_indexed() {
        let c = PointCloud::new(vec![[1.0, 1.0, 1.0]; 100]).unwrap();
        assert_eq!(ade_rmse(&c, &c).unwrap(), 0.0);
    }

    #[test]
    fn ply_round_trip() {
        let c = surface(-1.0, 1.0, 4);
        let back = PointCloud::parse_ply(&c.to_ply()).unwrap();
        assert_eq!(back, c);
        assert!(
            PointCloud::parse_ply("ply\nformat binary_little_endian 1.0\nend_header\n").is_err()
        );
        assert!(PointCloud::parse_ply("ply\nformat ascii 1.0\nelement vertex 2\nproperty float x\nproperty float y\nproperty float z\nend_header\n1 2 3\n").is_err());
    }

    proptest! {
        #[test]
        fn icp_residual_never_increases(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let dst = surface(-5.0, 5.0, 15);
            let motion = Similarity {
                rotation: *Rotation3::from_euler_angles(rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2), rng.random_range(-0.5..0.5)).matrix(),
                translation: Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)),
                scale: rng.random_range(0.9..1.1),
            };
            let src = dst.transformed(&motion);
            let r = icp_align(&src, &dst, &IcpParams { overlap: rng.random_range(0.5..1.0), ..IcpParams::default() }).unwrap();
            prop_assert!(r.history.windows(2).all(|w| w[1] <= w[0]));
        }
    }
}
