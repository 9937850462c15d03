//! Evaluation metrics: keypoint re-projection error, absolute trajectory
//! error, ICP cloud alignment and absolute depth error.

mod cloud;
mod reproject;
mod trajectory;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use cloud::{ade_rmse, icp_align, IcpParams, IcpResult, NearestIndex, PointCloud};
pub use reproject::{reprojection_error, Matcher, Reprojection, ReprojectionParams};
pub use trajectory::{associate, ate_rmse, AteOptions, AteResult, Pose, Trajectory};

/// `x -> s R x + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Similarity {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    pub scale: f64,
}

impl Similarity {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
            scale: 1.0,
        }
    }

    pub fn apply(&self, p: &[f64; 3]) -> [f64; 3] {
        let v = self.scale * (self.rotation * Vector3::from(*p)) + self.translation;
        [v[0], v[1], v[2]]
    }
}

/// Closed-form least-squares similarity (or rigid motion when `with_scale`
/// is false) taking `src[i]` onto `dst[i]`, by SVD of the cross-covariance.
pub fn umeyama(src: &[[f64; 3]], dst: &[[f64; 3]], with_scale: bool) -> Result<Similarity> {
    if src.len() != dst.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} vs {} points",
            src.len(),
            dst.len()
        )));
    }
    if src.is_empty() {
        return Err(Error::InvalidArgument("no points to align".into()));
    }
    let n = src.len() as f64;
    let mean = |pts: &[[f64; 3]]| {
        pts.iter()
            .fold(Vector3::zeros(), |acc, p| acc + Vector3::from(*p))
            / n
    };
    let (mu_s, mu_d) = (mean(src), mean(dst));
    let mut cov = Matrix3::zeros();
    let mut var_s = 0.0;
    for (s, d) in src.iter().zip(dst) {
        let (a, b) = (Vector3::from(*s) - mu_s, Vector3::from(*d) - mu_d);
        cov += b * a.transpose();
        var_s += a.norm_squared();
    }
    cov /= n;
    var_s /= n;
    let svd = cov.svd(true, true);
    let (u, v_t) = (
        svd.u.ok_or(Error::Singular)?,
        svd.v_t.ok_or(Error::Singular)?,
    );
    let mut sign = Matrix3::identity();
    if u.determinant() * v_t.determinant() < 0.0 {
        sign[(2, 2)] = -1.0;
    }
    let rotation = u * sign * v_t;
    let scale = if with_scale && var_s > 0.0 {
        (Matrix3::from_diagonal(&svd.singular_values) * sign).trace() / var_s
    } else {
        1.0
    };
    Ok(Similarity {
        rotation,
        translation: mu_d - scale * rotation * mu_s,
        scale,
    })
}

/// Metric report written by the `evaluate` command; absent metrics are skipped.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ate_rmse_sim3: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ate_rmse_se3: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ate_pairs: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub icp_residual: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ade_rmse: Option<f64>,
}
