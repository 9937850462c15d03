use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{farneback_flow, good_features, lucas_kanade_track, Correspondence, FlowParams};
use crate::imgcore::{to_grayscale, Image};
use crate::preprocess::CameraIntrinsics;
use crate::register::{flow_to_correspondences, ransac_homography, RansacParams};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Matcher {
    /// Dense polynomial-expansion flow sampled on a grid.
    Dense,
    /// Corners tracked with pyramidal Lucas-Kanade.
    Sparse,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReprojectionParams {
    pub flow: FlowParams,
    pub stride: usize,
    pub max_features: usize,
    pub min_distance: f64,
    pub ransac: RansacParams,
}

impl Default for ReprojectionParams {
    fn default() -> Self {
        Self {
            flow: FlowParams::default(),
            stride: 8,
            max_features: 400,
            min_distance: 6.0,
            ransac: RansacParams::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Reprojection {
    /// Mean distance between `H p1` and `p2` over RANSAC inliers, pixels.
    pub error: f64,
    pub matches: usize,
    pub inliers: usize,
}

fn gray(img: &Image) -> Image {
    if img.channels() == 1 {
        img.clone()
    } else {
        to_grayscale(img)
    }
}

/// Matches keypoints between two frames, fits a RANSAC homography on
/// undistorted coordinates and reports the mean re-projection distance of
/// the inliers.
pub fn reprojection_error(
    f1: &Image,
    f2: &Image,
    matcher: Matcher,
    intrinsics: Option<&CameraIntrinsics>,
    params: &ReprojectionParams,
) -> Result<Reprojection> {
    let (g1, g2) = (gray(f1), gray(f2));
    let raw = match matcher {
        Matcher::Dense => flow_to_correspondences(
            &farneback_flow(&g1, &g2, &params.flow)?,
            params.stride,
            None,
        )?,
        Matcher::Sparse => {
            let margin = params.stride / 2;
            let pts = good_features(&g1, params.max_features, params.min_distance, margin);
            let tracked: Vec<Correspondence> = lucas_kanade_track(&g1, &g2, &pts, &params.flow)?
                .into_iter()
                .filter(|t| t.is_tracked())
                .map(|t| t.correspondence)
                .collect();
            if tracked.len() < 4 {
                return Err(Error::InsufficientMatches {
                    found: tracked.len(),
                });
            }
            tracked
        }
    };
    let pairs: Vec<Correspondence> = match intrinsics {
        None => raw,
        Some(k) => raw
            .iter()
            .map(|c| {
                let (a, b) = k.undistort_pixel(c.p1[0], c.p1[1]);
                let (u, v) = k.undistort_pixel(c.p2[0], c.p2[1]);
                Correspondence::new([a, b], [u, v])
            })
            .collect(),
    };
    let (h, inliers) = ransac_homography(&pairs, &params.ransac)?;
    let error = inliers
        .iter()
        .map(|c| {
            let q = h.apply(c.p1);
            (q[0] - c.p2[0]).hypot(q[1] - c.p2[1])
        })
        .sum::<f64>()
        / inliers.len() as f64;
    Ok(Reprojection {
        error,
        matches: pairs.len(),
        inliers: inliers.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::testutil::Waves;

    fn pair(dx: f64, dy: f64) -> (Image, Image) {
        let w = Waves::new(7, 24);
        (
            w.render(96, 96, |x, y| (x, y)),
            w.render(96, 96, |x, y| (x - dx, y - dy)),
        )
    }

    #[test]
    fn identical_frames() {
        let (a, _) = pair(0.0, 0.0);
        for m in [Matcher::Dense, Matcher::Sparse] {
            let r = reprojection_error(&a, &a, m, None, &ReprojectionParams::default()).unwrap();
            assert!(r.error < 0.05, "{m:?}: {}", r.error);
        }
    }

    #[test]
    fn five_pixel_shift() {
        let (a, b) = pair(5.0, 0.0);
        let p = ReprojectionParams::default();
        let dense = reprojection_error(&a, &b, Matcher::Dense, None, &p).unwrap();
        let sparse = reprojection_error(&a, &b, Matcher::Sparse, None, &p).unwrap();
        assert!(dense.error <= 0.3, "dense {}", dense.error);
        assert!(
            sparse.error <= 2.0 * dense.error.max(0.05),
            "sparse {} dense {}",
            sparse.error,
            dense.error
        );
    }

    #[test]
    fn intrinsics_without_distortion_change_nothing() {
        let (a, b) = pair(2.0, 1.0);
        let p = ReprojectionParams::default();
        let k = CameraIntrinsics::centered(96, 96, 80.0);
        let plain = reprojection_error(&a, &b, Matcher::Dense, None, &p).unwrap();
        let with_k = reprojection_error(&a, &b, Matcher::Dense, Some(&k), &p).unwrap();
        assert!((plain.error - with_k.error).abs() < 1e-6);
    }

    #[test]
    fn flat_frames_have_no_matches() {
        let a = Image::filled(64, 64, 1, 0.5);
        assert!(matches!(
            reprojection_error(
                &a,
                &a,
                Matcher::Sparse,
                None,
                &ReprojectionParams::default()
            ),
            Err(Error::InsufficientMatches { .. })
        ));
    }
}
