//! Dense (polynomial-expansion) and sparse (pyramidal Lucas-Kanade) optical flow.

mod farneback;
mod lk;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imgcore::{Image, Raster};

pub use farneback::{farneback_flow, polynomial_expansion, PolyCoeffs};
pub use lk::{good_features, lucas_kanade_track, TrackStatus, TrackedPoint};

/// Per-pixel displacement from frame 1 to frame 2.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    width: usize,
    height: usize,
    u: Vec<f64>,
    v: Vec<f64>,
}

impl FlowField {
    pub fn new(width: usize, height: usize, u: Vec<f64>, v: Vec<f64>) -> Result<Self> {
        if u.len() != width * height || v.len() != width * height {
            return Err(Error::DimensionMismatch("flow component length".into()));
        }
        if u.iter().chain(&v).any(|x| !x.is_finite()) {
            return Err(Error::NonFinite);
        }
        Ok(Self {
            width,
            height,
            u,
            v,
        })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self::constant(width, height, 0.0, 0.0)
    }

    pub fn constant(width: usize, height: usize, u: f64, v: f64) -> Self {
        Self {
            width,
            height,
            u: vec![u; width * height],
            v: vec![v; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> (f64, f64) {
        let i = y * self.width + x;
        (self.u[i], self.v[i])
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, d: (f64, f64)) {
        let i = y * self.width + x;
        self.u[i] = d.0;
        self.v[i] = d.1;
    }

    pub fn u(&self) -> &[f64] {
        &self.u
    }

    pub fn v(&self) -> &[f64] {
        &self.v
    }

    /// Bilinearly interpolated displacement, clamped to the field.
    pub fn sample(&self, x: f64, y: f64) -> (f64, f64) {
        let (w, h) = (self.width, self.height);
        let x = x.clamp(0.0, (w - 1) as f64);
        let y = y.clamp(0.0, (h - 1) as f64);
        let x0 = (x.floor() as usize).min(w.saturating_sub(2));
        let y0 = (y.floor() as usize).min(h.saturating_sub(2));
        let x1 = (x0 + 1).min(w - 1);
        let y1 = (y0 + 1).min(h - 1);
        let (fx, fy) = (x - x0 as f64, y - y0 as f64);
        let lerp = |c: &[f64]| {
            let top = c[y0 * w + x0] * (1.0 - fx) + c[y0 * w + x1] * fx;
            let bottom = c[y1 * w + x0] * (1.0 - fx) + c[y1 * w + x1] * fx;
            top * (1.0 - fy) + bottom * fy
        };
        (lerp(&self.u), lerp(&self.v))
    }

    pub fn to_rasters(&self) -> (Raster, Raster) {
        (
            Raster::new(self.width, self.height, 1, self.u.clone()).expect("flow dims"),
            Raster::new(self.width, self.height, 1, self.v.clone()).expect("flow dims"),
        )
    }

    /// Two-channel raster `(u, v)`, e.g. for PFM debug dumps.
    pub fn to_raster(&self) -> Raster {
        let (u, v) = self.to_rasters();
        Raster::from_channels(&[u, v]).expect("flow dims")
    }

    pub fn negated(&self) -> FlowField {
        FlowField {
            u: self.u.iter().map(|x| -x).collect(),
            v: self.v.iter().map(|x| -x).collect(),
            ..*self
        }
    }

    /// Per-pixel endpoint magnitudes.
    pub fn magnitudes(&self) -> Vec<f64> {
        self.u
            .iter()
            .zip(&self.v)
            .map(|(u, v)| (u * u + v * v).sqrt())
            .collect()
    }
}

/// Tuning knobs shared by the dense and sparse estimators.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlowParams {
    pub pyramid_levels: usize,
    pub window_radius: usize,
    pub iterations: usize,
    pub poly_radius: usize,
}

impl Default for FlowParams {
    fn default() -> Self {
        Self {
            pyramid_levels: 4,
            window_radius: 7,
            iterations: 3,
            poly_radius: 5,
        }
    }
}

impl FlowParams {
    pub fn validate(&self) -> Result<()> {
        if self.pyramid_levels == 0
            || self.window_radius == 0
            || self.iterations == 0
            || self.poly_radius == 0
        {
            return Err(Error::Config("flow parameters must be positive".into()));
        }
        Ok(())
    }
}

/// A matched point pair between two frames.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Correspondence {
    pub p1: [f64; 2],
    pub p2: [f64; 2],
}

impl Correspondence {
    pub fn new(p1: [f64; 2], p2: [f64; 2]) -> Self {
        Self { p1, p2 }
    }
}

/// Sum of per-pixel displacement magnitudes over the total pixel count.
pub fn mean_flow_magnitude(flow: &FlowField) -> f64 {
    let n = flow.width * flow.height;
    if n == 0 {
        return 0.0;
    }
    flow.magnitudes().iter().sum::<f64>() / n as f64
}

pub(crate) fn check_pair(f1: &Image, f2: &Image) -> Result<()> {
    if f1.dims() != f2.dims() {
        return Err(Error::DimensionMismatch(format!(
            "frames {:?} vs {:?}",
            f1.dims(),
            f2.dims()
        )));
    }
    if f1.channels() != 1 || f2.channels() != 1 {
        return Err(Error::InvalidArgument(
            "optical flow expects grayscale frames".into(),
        ));
    }
    Ok(())
}

#[cfg(test)]
pub(crate) fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}


#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn mean_magnitude_basic() {
        assert_eq!(mean_flow_magnitude(&FlowField::zeros(4, 3)), 0.0);
        assert!((mean_flow_magnitude(&FlowField::constant(5, 2, 3.0, 4.0)) - 5.0).abs() < 1e-12);
    }

    #[test]
    fn mean_magnitude_matches_naive_loop() {
        let u: Vec<f64> = (0..12).map(|i| (i as f64 * 0.7).sin() * 3.0).collect();
        let v: Vec<f64> = (0..12).map(|i| (i as f64 * 1.3).cos() * 2.0).collect();
        let f = FlowField::new(4, 3, u.clone(), v.clone()).unwrap();
        let mut naive = 0.0;
        for i in 0..12 {
            naive += (u[i] * u[i] + v[i] * v[i]).sqrt();
        }
        assert!((mean_flow_magnitude(&f) - naive / 12.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn mean_magnitude_sign_invariant(vals in proptest::collection::vec(-20.0f64..20.0, 18)) {
            let f = FlowField::new(3, 3, vals[..9].to_vec(), vals[9..].to_vec()).unwrap();
            prop_assert!((mean_flow_magnitude(&f) - mean_flow_magnitude(&f.negated())).abs() < 1e-12);
        }
    }
}
