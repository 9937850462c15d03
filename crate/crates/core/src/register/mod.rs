//! Pairwise registration (flow + RANSAC coarse, patch-weighted Gauss-Newton
//! fine), joint bundle adjustment and mosaic composition.

mod align;
mod bundle;
mod compose;
mod ransac;
mod transform;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{farneback_flow, Correspondence, FlowField, FlowParams};
use crate::imgcore::{to_grayscale, BitMask, Image};

pub use align::{emse_cost, gauss_newton_affine, AffineFit, GaussNewtonParams, PatchWeights};
pub use bundle::{bundle_adjust, chain_transforms, total_transfer_error, BundleParams};
pub use compose::{
    default_bands, gain_compensate, multiband_blend, overlap_statistics, union_mask, warp_layers,
    Canvas, MosaicLayer,
};
pub use ransac::{
    dlt_homography, fit_affine, ransac_homography, symmetric_transfer_error, RansacParams,
};
pub use transform::{mean_corner_error, Transform2D, TransformKind};

/// Registration of keyframe `src` onto keyframe `dst`: `p_dst = T p_src`.
#[derive(Clone, Debug, PartialEq)]
pub struct PairEstimate {
    pub src: usize,
    pub dst: usize,
    pub transform: Transform2D,
    pub inliers: Vec<Correspondence>,
    /// Final patch-weighted e_MSE.
    pub residual: f64,
    pub converged: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegisterParams {
    pub stride: usize,
    pub patch_radius: f64,
    pub ransac: RansacParams,
    pub gauss_newton: GaussNewtonParams,
    pub bundle: BundleParams,
    /// Pyramid bands for blending; capped by what the canvas allows.
    pub bands: usize,
}

impl Default for RegisterParams {
    fn default() -> Self {
        Self {
            stride: 8,
            patch_radius: 15.0,
            ransac: RansacParams::default(),
            gauss_newton: GaussNewtonParams::default(),
            bundle: BundleParams::default(),
            bands: 5,
        }
    }
}

/// One correspondence per `stride x stride` cell, taken at the cell center
/// `(x, y) -> (x + u, y + v)`. Cells whose center is excluded or whose
/// target leaves the frame are skipped.
pub fn flow_to_correspondences(
    flow: &FlowField,
    stride: usize,
    exclude: Option<&BitMask>,
) -> Result<Vec<Correspondence>> {
    if stride == 0 {
        return Err(Error::InvalidArgument("stride must be at least 1".into()));
    }
    let (w, h) = flow.dims();
    if let Some(m) = exclude {
        if m.dims() != (w, h) {
            return Err(Error::DimensionMismatch("exclusion mask vs flow".into()));
        }
    }
    let mut out = Vec::new();
    let half = stride / 2;
    for y in (half..h).step_by(stride) {
        for x in (half..w).step_by(stride) {
            if exclude.is_some_and(|m| m.get(x, y)) {
                continue;
            }
            let (u, v) = flow.at(x, y);
            let (tx, ty) = (x as f64 + u, y as f64 + v);
            if tx < 0.0 || ty < 0.0 || tx > (w - 1) as f64 || ty > (h - 1) as f64 {
                continue;
            }
            out.push(Correspondence::new([x as f64, y as f64], [tx, ty]));
        }
    }
    if out.len() < 4 {
        return Err(Error::InsufficientMatches { found: out.len() });
    }
    Ok(out)
}

fn gray(img: &Image) -> Image {
    if img.channels() == 1 {
        img.clone()
    } else {
        to_grayscale(img)
    }
}

/// Full pairwise registration: dense flow, grid correspondences, RANSAC
/// homography, affine initialization from the inliers and patch-weighted
/// Gauss-Newton refinement around the inliers.
pub fn estimate_pair(
    src: usize,
    dst: usize,
    f_src: &Image,
    f_dst: &Image,
    exclude: Option<&BitMask>,
    flow_params: &FlowParams,
    params: &RegisterParams,
) -> Result<PairEstimate> {
    let (g1, g2) = (gray(f_src), gray(f_dst));
    let flow = farneback_flow(&g1, &g2, flow_params)?;
    let pairs = flow_to_correspondences(&flow, params.stride, exclude)?;
    let (_, inliers) = ransac_homography(&pairs, &params.ransac)?;
    let init = fit_affine(&inliers)?;
    let weights = PatchWeights::new(inliers.iter().map(|c| c.p1).collect(), params.patch_radius)?;
    let fit = gauss_newton_affine(&g1, &g2, &init, &weights, &params.gauss_newton)?;
    Ok(PairEstimate {
        src,
        dst,
        transform: fit.transform,
        inliers,
        residual: fit.residual,
        converged: fit.converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_flow_gives_grid_identity() {
        let c = flow_to_correspondences(&FlowField::zeros(32, 24), 8, None).unwrap();
        assert_eq!(c.len(), 4 * 3);
        assert_eq!(c[0].p1, [4.0, 4.0]);
        assert!(c.iter().all(|c| c.p1 == c.p2));
    }

    #[test]
    fn constant_flow_offsets_pairs() {
        let c = flow_to_correspondences(&FlowField::constant(32, 32, 3.0, 0.0), 8, None).unwrap();
        assert!(c
            .iter()
            .all(|c| c.p2[0] - c.p1[0] == 3.0 && c.p2[1] == c.p1[1]));
        // Rightmost column lands at x = 31, still inside.
        assert_eq!(c.len(), 16);
    }

    #[test]
    fn mask_filters_top_half() {
        let mask = BitMask::from_fn(32, 32, |_, y| y < 16);
        let c = flow_to_correspondences(&FlowField::zeros(32, 32), 8, Some(&mask)).unwrap();
        assert!(c.iter().all(|c| c.p1[1] >= 16.0));
        assert_eq!(c.len(), 8);
    }

    #[test]
    fn too_few_survivors() {
        let r = flow_to_correspondences(&FlowField::constant(16, 16, 100.0, 0.0), 8, None);
        assert!(matches!(r, Err(Error::InsufficientMatches { found: 0 })));
    }
}
