//! Frame preprocessing: specular highlight suppression, lens undistortion and
//! de-vignetting. Each stage can be switched off independently.

mod distortion;
mod specular;
mod vignette;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imgcore::{BitMask, Image};

pub use distortion::{distort, undistort, CameraIntrinsics, Undistorted};
pub use specular::{appearance_mask, detect_specular_mask, inpaint, shape_mask};
pub use vignette::{
    apply_vignette, devignette, fit_vignette, Devignetted, RadialFrame, VignetteModel,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PreprocessStage {
    ReflectionSuppression,
    Undistort,
    Devignette,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    pub enable_reflection_suppression: bool,
    pub enable_undistort: bool,
    pub enable_devignette: bool,
    pub closing_radius: usize,
    pub inpaint_iterations: usize,
    pub order: Vec<PreprocessStage>,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            enable_reflection_suppression: true,
            enable_undistort: true,
            enable_devignette: true,
            closing_radius: 3,
            inpaint_iterations: 300,
            order: vec![
                PreprocessStage::ReflectionSuppression,
                PreprocessStage::Undistort,
                PreprocessStage::Devignette,
            ],
        }
    }
}

impl PreprocessConfig {
    /// Every stage disabled.
    pub fn disabled() -> Self {
        Self {
            enable_reflection_suppression: false,
            enable_undistort: false,
            enable_devignette: false,
            ..Self::default()
        }
    }

    pub fn validate(&self, intrinsics: Option<&CameraIntrinsics>) -> Result<()> {
        if self.closing_radius == 0 || self.inpaint_iterations == 0 {
            return Err(Error::Config(
                "closing_radius and inpaint_iterations must be positive".into(),
            ));
        }
        let mut seen = Vec::new();
        for s in &self.order {
            if seen.contains(s) {
                return Err(Error::Config(format!("stage {s:?} listed twice in order")));
            }
            seen.push(*s);
        }
        if seen.len() != 3 {
            return Err(Error::Config("order must list all three stages".into()));
        }
        if self.enable_undistort && intrinsics.is_none() {
            return Err(Error::Config(
                "undistortion enabled but no intrinsics given".into(),
            ));
        }
        Ok(())
    }
}

/// Output of [`preprocess_frame`].
#[derive(Clone, Debug)]
pub struct Preprocessed {
    pub image: Image,
    /// Detected highlights, in output (undistorted) coordinates. Empty when
    /// reflection suppression is off.
    pub specular: BitMask,
    /// Pixels with input support after undistortion.
    pub valid: BitMask,
    pub vignette: VignetteModel,
    pub vignette_degenerate: bool,
}

fn warp_mask_with(mask: &BitMask, k: &CameraIntrinsics) -> BitMask {
    let (w, h) = mask.dims();
    BitMask::from_fn(w, h, |x, y| {
        let (u, v) = k.distort_pixel(x as f64, y as f64);
        let (ui, vi) = (u.round(), v.round());
        ui >= 0.0
            && vi >= 0.0
            && (ui as usize) < w
            && (vi as usize) < h
            && mask.get(ui as usize, vi as usize)
    })
}

/// Runs the enabled stages in configured order.
pub fn preprocess_frame(
    img: &Image,
    cfg: &PreprocessConfig,
    intrinsics: Option<&CameraIntrinsics>,
) -> Result<Preprocessed> {
    cfg.validate(intrinsics)?;
    let (w, h) = img.dims();
    let mut out = Preprocessed {
        image: img.clone(),
        specular: BitMask::empty(w, h),
        valid: BitMask::full(w, h),
        vignette: VignetteModel::identity(),
        vignette_degenerate: false,
    };
    for stage in &cfg.order {
        match stage {
            PreprocessStage::ReflectionSuppression if cfg.enable_reflection_suppression => {
                let mask = detect_specular_mask(&out.image, cfg.closing_radius);
                out.image = inpaint(&out.image, &mask, cfg.inpaint_iterations)?;
                out.specular = out.specular.or(&mask)?;
            }
            PreprocessStage::Undistort if cfg.enable_undistort => {
                let k = intrinsics.expect("validated above");
                k.validate(w, h)?;
                let u = undistort(&out.image, k);
                out.image = u.image;
                out.valid = out.valid.and(&u.valid)?;
                out.specular = warp_mask_with(&out.specular, k);
            }
            PreprocessStage::Devignette if cfg.enable_devignette => {
                let d = devignette(&out.image);
                out.image = d.image;
                out.vignette = d.model;
                out.vignette_degenerate = d.degenerate;
            }
            _ => {}
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_disabled_is_identity() {
        let img = Image::from_fn(16, 16, |x, y| ((x ^ y) % 7) as f64 / 6.0);
        let out = preprocess_frame(&img, &PreprocessConfig::disabled(), None).unwrap();
        assert_eq!(out.image, img);
        assert_eq!(out.specular.count(), 0);
    }

    #[test]
    fn undistort_without_intrinsics_is_config_error() {
        let img = Image::filled(8, 8, 1, 0.5);
        let cfg = PreprocessConfig::default();
        assert!(matches!(
            preprocess_frame(&img, &cfg, None),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn duplicate_stage_rejected() {
        let cfg = PreprocessConfig {
            order: vec![
                PreprocessStage::Undistort,
                PreprocessStage::Undistort,
                PreprocessStage::Devignette,
            ],
            ..PreprocessConfig::disabled()
        };
        assert!(cfg.validate(None).is_err());
    }
}
