//! Raster containers and pixel-level primitives shared by every stage.
//!
//! [`Raster`] is an unbounded float grid used for intermediate quantities
//! (pyramid bands, flow components, depth). [`Image`] wraps a raster whose
//! samples are clamped to `[0, 1]` at construction.

mod filter;
pub mod io;
mod morph;
mod pyramid;

use std::ops::Deref;

use crate::error::{Error, Result};

pub use filter::{
    box_blur, central_gradients, gaussian_blur, sobel_gradient_magnitude, to_grayscale,
    SOBEL_MAX_MAGNITUDE,
};
pub use morph::{dilate, disk_offsets, erode, morph_close};
pub(crate) use pyramid::gaussian_pyramid_raster;
pub use pyramid::{
    collapse_laplacian, expand, gaussian_pyramid, laplacian_pyramid, max_pyramid_levels, reduce,
};

/// Row-major, channel-interleaved float grid with no range restriction.
#[derive(Clone, Debug, PartialEq)]
pub struct Raster {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Raster {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 {
            return Err(Error::InvalidArgument(
                "raster needs at least one channel".into(),
            ));
        }
        if data.len() != width * height * channels {
            return Err(Error::DimensionMismatch(format!(
                "{} samples for a {width}x{height}x{channels} raster",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite);
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Self {
        Self {
            width,
            height,
            channels: channels.max(1),
            data: vec![value; width * height * channels.max(1)],
        }
    }

    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        Self::filled(width, height, channels, 0.0)
    }

    /// Builds a single-channel raster by evaluating `f(x, y)` on every pixel.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            channels: 1,
            data,
        }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[self.index(x, y, c)]
    }

    /// Reads a pixel with coordinates clamped into the raster (replicate border).
    #[inline]
    pub fn get_clamped(&self, x: isize, y: isize, c: usize) -> f64 {
        let xi = x.clamp(0, self.width as isize - 1) as usize;
        let yi = y.clamp(0, self.height as isize - 1) as usize;
        self.get(xi, yi, c)
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f64) {
        let i = self.index(x, y, c);
        self.data[i] = v;
    }

    /// Extracts one channel as a single-channel raster.
    pub fn channel(&self, c: usize) -> Raster {
        let data = self
            .data
            .iter()
            .skip(c)
            .step_by(self.channels)
            .copied()
            .collect();
        Raster {
            width: self.width,
            height: self.height,
            channels: 1,
            data,
        }
    }

    /// Interleaves single-channel rasters of equal size.
    pub fn from_channels(planes: &[Raster]) -> Result<Raster> {
        let first = planes
            .first()
            .ok_or_else(|| Error::InvalidArgument("no channels given".into()))?;
        if planes
            .iter()
            .any(|p| p.dims() != first.dims() || p.channels != 1)
        {
            return Err(Error::DimensionMismatch(
                "channel planes differ in size".into(),
            ));
        }
        let n = planes.len();
        let mut data = vec![0.0; first.len() * n];
        for (c, p) in planes.iter().enumerate() {
            for (i, v) in p.data.iter().enumerate() {
                data[i * n + c] = *v;
            }
        }
        Ok(Raster {
            width: first.width,
            height: first.height,
            channels: n,
            data,
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Raster {
        Raster {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..self.clone()
        }
    }

    pub fn zip_map(&self, other: &Raster, f: impl Fn(f64, f64) -> f64) -> Result<Raster> {
        self.check_same_shape(other)?;
        Ok(Raster {
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
            ..self.clone()
        })
    }

    pub fn check_same_shape(&self, other: &Raster) -> Result<()> {
        if self.dims() != other.dims() || self.channels != other.channels {
            return Err(Error::DimensionMismatch(format!(
                "{}x{}x{} vs {}x{}x{}",
                self.width, self.height, self.channels, other.width, other.height, other.channels
            )));
        }
        Ok(())
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// Population mean and standard deviation over all samples.
    pub fn mean_std(&self) -> (f64, f64) {
        let mean = self.mean();
        if self.data.is_empty() {
            return (0.0, 0.0);
        }
        let var = self
            .data
            .iter()
            .map(|v| (v - mean) * (v - mean))
            .sum::<f64>()
            / self.data.len() as f64;
        (mean, var.sqrt())
    }

    /// Bilinear interpolation of channel `c`; `None` outside `[0, w-1] x [0, h-1]`.
    #[inline]
    pub fn sample(&self, x: f64, y: f64, c: usize) -> Option<f64> {
        let (w, h) = (self.width, self.height);
        if w == 0 || h == 0 || !(x >= 0.0 && y >= 0.0) {
            return None;
        }
        let (xmax, ymax) = ((w - 1) as f64, (h - 1) as f64);
        if x > xmax || y > ymax {
            return None;
        }
        let x0 = (x.floor() as usize).min(w.saturating_sub(2));
        let y0 = (y.floor() as usize).min(h.saturating_sub(2));
        let x1 = (x0 + 1).min(w - 1);
        let y1 = (y0 + 1).min(h - 1);
        let fx = x - x0 as f64;
        let fy = y - y0 as f64;
        let top = self.get(x0, y0, c) * (1.0 - fx) + self.get(x1, y0, c) * fx;
        let bottom = self.get(x0, y1, c) * (1.0 - fx) + self.get(x1, y1, c) * fx;
        Some(top * (1.0 - fy) + bottom * fy)
    }

    /// Bilinear interpolation with coordinates clamped into the raster.
    #[inline]
    pub fn sample_clamped(&self, x: f64, y: f64, c: usize) -> f64 {
        let xc = x.clamp(0.0, (self.width - 1) as f64);
        let yc = y.clamp(0.0, (self.height - 1) as f64);
        self.sample(xc, yc, c).unwrap_or(0.0)
    }
}

/// Float image with every sample in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image(Raster);

impl Image {
    /// Creates an image from interleaved samples, clamping them into `[0, 1]`.
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::InvalidArgument(format!(
                "images have 1 or 3 channels, got {channels}"
            )));
        }
        Ok(Self::from_raster(Raster::new(
            width, height, channels, data,
        )?))
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Self {
        Image(Raster::filled(
            width,
            height,
            channels,
            value.clamp(0.0, 1.0),
        ))
    }

    /// Builds a grayscale image from `f(x, y)`, clamped to `[0, 1]`.
    pub fn from_fn(width: usize, height: usize, f: impl FnMut(usize, usize) -> f64) -> Self {
        Self::from_raster(Raster::from_fn(width, height, f))
    }

    /// Clamps a raster into an image. Non-finite samples become 0.
    pub fn from_raster(mut r: Raster) -> Self {
        for v in r.data.iter_mut() {
            *v = if v.is_finite() {
                v.clamp(0.0, 1.0)
            } else {
                0.0
            };
        }
        Image(r)
    }

    pub fn as_raster(&self) -> &Raster {
        &self.0
    }

    pub fn into_raster(self) -> Raster {
        self.0
    }

    /// Applies `f` to every sample and clamps the result.
    pub fn map_clamped(&self, f: impl Fn(f64) -> f64) -> Image {
        Image::from_raster(self.0.map(f))
    }

    /// Extracts channel `c` as a grayscale image.
    pub fn channel_image(&self, c: usize) -> Image {
        Image(self.0.channel(c))
    }

    /// Applies a per-plane operation to every channel and re-interleaves.
    pub fn per_channel<F>(&self, mut f: F) -> Result<Image>
    where
        F: FnMut(&Image) -> Result<Image>,
    {
        if self.channels() == 1 {
            return f(self);
        }
        let planes = (0..self.channels())
            .map(|c| f(&self.channel_image(c)).map(Image::into_raster))
            .collect::<Result<Vec<_>>>()?;
        Ok(Image(Raster::from_channels(&planes)?))
    }
}

impl Deref for Image {
    type Target = Raster;

    fn deref(&self) -> &Raster {
        &self.0
    }
}

/// Result of [`sample_bilinear`]: per-channel values, or the out-of-support flag.
#[derive(Clone, Debug, PartialEq)]
pub enum Sample {
    Valid(Vec<f64>),
    Invalid,
}

impl Sample {
    pub fn is_valid(&self) -> bool {
        matches!(self, Sample::Valid(_))
    }

    pub fn value(&self) -> Option<&[f64]> {
        match self {
            Sample::Valid(v) => Some(v),
            Sample::Invalid => None,
        }
    }
}

/// Bilinear lookup of every channel at a sub-pixel position.
pub fn sample_bilinear(img: &Raster, x: f64, y: f64) -> Sample {
    let mut out = Vec::with_capacity(img.channels());
    for c in 0..img.channels() {
        match img.sample(x, y, c) {
            Some(v) => out.push(v),
            None => return Sample::Invalid,
        }
    }
    Sample::Valid(out)
}

/// One boolean per pixel, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BitMask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl BitMask {
    pub fn new(width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != width * height {
            return Err(Error::DimensionMismatch(format!(
                "{} bits for a {width}x{height} mask",
                bits.len()
            )));
        }
        Ok(Self {
            width,
            height,
            bits,
        })
    }

    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            bits: vec![false; width * height],
        }
    }

    pub fn full(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            bits: vec![true; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                bits.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            bits,
        }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn any(&self) -> bool {
        self.bits.iter().any(|b| *b)
    }

    fn check(&self, other: &BitMask) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::DimensionMismatch(format!(
                "mask {:?} vs {:?}",
                self.dims(),
                other.dims()
            )));
        }
        Ok(())
    }

    pub fn and(&self, other: &BitMask) -> Result<BitMask> {
        self.check(other)?;
        Ok(BitMask {
            bits: self
                .bits
                .iter()
                .zip(&other.bits)
                .map(|(a, b)| *a && *b)
                .collect(),
            ..*self
        })
    }

    pub fn or(&self, other: &BitMask) -> Result<BitMask> {
        self.check(other)?;
        Ok(BitMask {
            bits: self
                .bits
                .iter()
                .zip(&other.bits)
                .map(|(a, b)| *a || *b)
                .collect(),
            ..*self
        })
    }

    pub fn not(&self) -> BitMask {
        BitMask {
            bits: self.bits.iter().map(|b| !b).collect(),
            ..*self
        }
    }

    /// True when every set bit of `self` is also set in `other`.
    pub fn is_subset_of(&self, other: &BitMask) -> bool {
        self.dims() == other.dims() && self.bits.iter().zip(&other.bits).all(|(a, b)| !a || *b)
    }

    /// Mask as a 0/1 raster.
    pub fn to_raster(&self) -> Raster {
        Raster {
            width: self.width,
            height: self.height,
            channels: 1,
            data: self
                .bits
                .iter()
                .map(|&b| if b { 1.0 } else { 0.0 })
                .collect(),
        }
    }
}
