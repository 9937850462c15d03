use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{umeyama, Similarity};
use crate::error::{Error, Result};
use crate::register::Transform2D;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub timestamp: f64,
    pub position: [f64; 3],
    /// `(qx, qy, qz, qw)`, unit norm.
    pub orientation: [f64; 4],
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Trajectory {
    poses: Vec<Pose>,
}

const QUAT_TOL: f64 = 1e-6;

impl Trajectory {
    /// Checks strictly increasing timestamps, finite values and unit quaternions.
    pub fn new(poses: Vec<Pose>) -> Result<Self> {
        for (i, p) in poses.iter().enumerate() {
            let finite = p.timestamp.is_finite()
                && p.position.iter().all(|v| v.is_finite())
                && p.orientation.iter().all(|v| v.is_finite());
            if !finite {
                return Err(Error::NonFinite);
            }
            let norm = p.orientation.iter().map(|v| v * v).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > QUAT_TOL {
                return Err(Error::InvalidArgument(format!(
                    "pose {i}: quaternion norm {norm}"
                )));
            }
            if i > 0 && p.timestamp <= poses[i - 1].timestamp {
                return Err(Error::InvalidArgument(format!(
                    "pose {i}: timestamps not increasing"
                )));
            }
        }
        Ok(Self { poses })
    }

    /// Planar poses from frame-to-anchor transforms: position `(tx, ty, 0)`
    /// times `units_per_px`, orientation a rotation about the optical axis by
    /// the rotation part of the linear block.
    pub fn from_transforms(
        timestamps: &[f64],
        transforms: &[Transform2D],
        units_per_px: f64,
    ) -> Result<Self> {
        if timestamps.len() != transforms.len() {
            return Err(Error::DimensionMismatch("timestamps vs transforms".into()));
        }
        let poses = timestamps
            .iter()
            .zip(transforms)
            .map(|(&timestamp, t)| {
                let [a1, a2, a3, a4, tx, ty] = t.params();
                let angle = (a3 - a2).atan2(a1 + a4);
                let (s, c) = (0.5 * angle).sin_cos();
                Pose {
                    timestamp,
                    position: [tx * units_per_px, ty * units_per_px, 0.0],
                    orientation: [0.0, 0.0, s, c],
                }
            })
            .collect();
        Self::new(poses)
    }

    pub fn poses(&self) -> &[Pose] {
        &self.poses
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    /// Sum of distances between consecutive positions.
    pub fn path_length(&self) -> f64 {
        self.poses
            .windows(2)
            .map(|w| {
                let (a, b) = (w[0].position, w[1].position);
                ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
            })
            .sum()
    }

    /// Applies a similarity to every position (orientations untouched).
    pub fn transformed(&self, s: &Similarity) -> Self {
        Self {
            poses: self
                .poses
                .iter()
                .map(|p| Pose {
                    position: s.apply(&p.position),
                    ..*p
                })
                .collect(),
        }
    }

    /// `timestamp tx ty tz qx qy qz qw` per line; `#` starts a comment.
    pub fn parse_tum(text: &str) -> Result<Self> {
        let mut poses = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let v: Vec<f64> = line
                .split_whitespace()
                .map(|t| t.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Parse(format!("line {}: {e}", n + 1)))?;
            if v.len() != 8 {
                return Err(Error::Parse(format!(
                    "line {}: expected 8 fields, got {}",
                    n + 1,
                    v.len()
                )));
            }
            poses.push(Pose {
                timestamp: v[0],
                position: [v[1], v[2], v[3]],
                orientation: [v[4], v[5], v[6], v[7]],
            });
        }
        Self::new(poses)
    }

    pub fn to_tum(&self) -> String {
        let mut out = String::from("# timestamp tx ty tz qx qy qz qw\n");
        for p in &self.poses {
            let [x, y, z] = p.position;
            let [qx, qy, qz, qw] = p.orientation;
            out.push_str(&format!(
                "{:.6} {x} {y} {z} {qx} {qy} {qz} {qw}\n",
                p.timestamp
            ));
        }
        out
    }

    pub fn read_tum(path: &Path) -> Result<Self> {
        Self::parse_tum(&std::fs::read_to_string(path)?)
    }

    pub fn write_tum(&self, path: &Path) -> Result<()> {
        Ok(std::fs::write(path, self.to_tum())?)
    }
}

/// One-to-one timestamp matching, greedily by smallest time difference,
/// keeping pairs within `max_dt` seconds. Sorted by estimate index.
pub fn associate(est: &Trajectory, gt: &Trajectory, max_dt: f64) -> Vec<(usize, usize)> {
    let mut candidates = Vec::new();
    for (i, p) in est.poses.iter().enumerate() {
        // Both sides are sorted, so only a window of ground truth can match.
        let lo = gt
            .poses
            .partition_point(|g| g.timestamp < p.timestamp - max_dt);
        for (j, g) in gt.poses.iter().enumerate().skip(lo) {
            let dt = (g.timestamp - p.timestamp).abs();
            if g.timestamp > p.timestamp + max_dt {
                break;
            }
            candidates.push((dt, i, j));
        }
    }
    candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut used_e = vec![false; est.len()];
    let mut used_g = vec![false; gt.len()];
    let mut pairs = Vec::new();
    for (_, i, j) in candidates {
        if !used_e[i] && !used_g[j] {
            used_e[i] = true;
            used_g[j] = true;
            pairs.push((i, j));
        }
    }
    pairs.sort_unstable();
    pairs
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AteOptions {
    /// Align with a similarity (monocular) rather than a rigid motion.
    pub with_scale: bool,
    /// Association window in seconds.
    pub max_dt: f64,
}

impl Default for AteOptions {
    fn default() -> Self {
        Self {
            with_scale: true,
            max_dt: 0.02,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AteResult {
    pub rmse: f64,
    pub pairs: usize,
    /// Maps estimated positions onto ground truth.
    pub alignment: Similarity,
}

/// Positional RMSE after closed-form alignment of `est` onto `gt`.
pub fn ate_rmse(est: &Trajectory, gt: &Trajectory, opts: &AteOptions) -> Result<AteResult> {
    let pairs = associate(est, gt, opts.max_dt);
    if pairs.len() < 2 {
        return Err(Error::InsufficientMatches { found: pairs.len() });
    }
    let src: Vec<[f64; 3]> = pairs.iter().map(|&(i, _)| est.poses[i].position).collect();
    let dst: Vec<[f64; 3]> = pairs.iter().map(|&(_, j)| gt.poses[j].position).collect();
    let alignment = umeyama(&src, &dst, opts.with_scale)?;
    let sq: f64 = src
        .iter()
        .zip(&dst)
        .map(|(s, d)| {
            let q = alignment.apply(s);
            (q[0] - d[0]).powi(2) + (q[1] - d[1]).powi(2) + (q[2] - d[2]).powi(2)
        })
        .sum();
    Ok(AteResult {
        rmse: (sq / pairs.len() as f64).sqrt(),
        pairs: pairs.len(),
        alignment,
    })
}
