//! Warping into anchor coordinates, gain compensation and multi-band blending.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};

use super::transform::Transform2D;
use crate::error::{Error, Result};
use crate::imgcore::{
    collapse_laplacian, gaussian_pyramid_raster, laplacian_pyramid, max_pyramid_levels, BitMask,
    Image, Raster,
};

const SIGMA_N: f64 = 10.0 / 255.0;
const SIGMA_G: f64 = 0.1;

/// Output raster geometry; `origin` is the anchor-frame position of canvas
/// pixel (0, 0).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Canvas {
    pub width: usize,
    pub height: usize,
    pub origin: [f64; 2],
}

impl Canvas {
    pub fn to_anchor(&self, x: f64, y: f64) -> [f64; 2] {
        [x + self.origin[0], y + self.origin[1]]
    }

    pub fn from_anchor(&self, p: [f64; 2]) -> [f64; 2] {
        [p[0] - self.origin[0], p[1] - self.origin[1]]
    }
}

/// One keyframe resampled onto the canvas. `image` and `valid` cover the
/// layer's bounding box starting at canvas pixel `offset`.
#[derive(Clone, Debug)]
pub struct MosaicLayer {
    pub index: usize,
    pub transform: Transform2D,
    pub offset: [usize; 2],
    pub image: Image,
    pub valid: BitMask,
    pub gain: f64,
}

impl MosaicLayer {
    fn bbox(&self) -> (usize, usize, usize, usize) {
        (
            self.offset[0],
            self.offset[1],
            self.offset[0] + self.image.width(),
            self.offset[1] + self.image.height(),
        )
    }

    /// Whether canvas pixel `(x, y)` has support in this layer.
    pub fn covers(&self, x: usize, y: usize) -> bool {
        let (x0, y0, x1, y1) = self.bbox();
        x >= x0 && y >= y0 && x < x1 && y < y1 && self.valid.get(x - x0, y - y0)
    }

    /// Channel `c` at canvas pixel `(x, y)`, assuming [`Self::covers`].
    pub fn value(&self, x: usize, y: usize, c: usize) -> f64 {
        self.image.get(x - self.offset[0], y - self.offset[1], c)
    }

    fn gray_at(&self, x: usize, y: usize) -> f64 {
        let ch = self.image.channels();
        (0..ch).map(|c| self.value(x, y, c)).sum::<f64>() / ch as f64
    }
}

fn corners(w: usize, h: usize) -> [[f64; 2]; 4] {
    let (w, h) = ((w - 1) as f64, (h - 1) as f64);
    [[0.0, 0.0], [w, 0.0], [0.0, h], [w, h]]
}

/// Canvas spanning all transformed frame corners, and each frame inverse
/// warped onto it with bilinear interpolation.
pub fn warp_layers(
    frames: &[Image],
    transforms: &[Transform2D],
) -> Result<(Canvas, Vec<MosaicLayer>)> {
    if frames.is_empty() || frames.len() != transforms.len() {
        return Err(Error::InvalidArgument(format!(
            "{} frames vs {} transforms",
            frames.len(),
            transforms.len()
        )));
    }
    let ch = frames[0].channels();
    if frames.iter().any(|f| f.channels() != ch) {
        return Err(Error::DimensionMismatch(
            "frames differ in channel count".into(),
        ));
    }
    let bounds = |f: &Image, t: &Transform2D| {
        corners(f.width(), f.height()).iter().fold(
            [
                f64::INFINITY,
                f64::INFINITY,
                f64::NEG_INFINITY,
                f64::NEG_INFINITY,
            ],
            |b, &c| {
                let p = t.apply(c);
                [
                    b[0].min(p[0]),
                    b[1].min(p[1]),
                    b[2].max(p[0]),
                    b[3].max(p[1]),
                ]
            },
        )
    };
    let all: Vec<[f64; 4]> = frames
        .iter()
        .zip(transforms)
        .map(|(f, t)| bounds(f, t))
        .collect();
    if all.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite);
    }
    let x0 = all
        .iter()
        .map(|b| b[0])
        .fold(f64::INFINITY, f64::min)
        .floor();
    let y0 = all
        .iter()
        .map(|b| b[1])
        .fold(f64::INFINITY, f64::min)
        .floor();
    let x1 = all
        .iter()
        .map(|b| b[2])
        .fold(f64::NEG_INFINITY, f64::max)
        .ceil();
    let y1 = all
        .iter()
        .map(|b| b[3])
        .fold(f64::NEG_INFINITY, f64::max)
        .ceil();
    let canvas = Canvas {
        width: (x1 - x0) as usize + 1,
        height: (y1 - y0) as usize + 1,
        origin: [x0, y0],
    };

    let mut layers = Vec::with_capacity(frames.len());
    for (i, ((frame, t), b)) in frames.iter().zip(transforms).zip(&all).enumerate() {
        let inv = t.inverse()?;
        let bx0 = (b[0].floor() - x0).max(0.0) as usize;
        let by0 = (b[1].floor() - y0).max(0.0) as usize;
        let bx1 = ((b[2].ceil() - x0) as usize).min(canvas.width - 1);
        let by1 = ((b[3].ceil() - y0) as usize).min(canvas.height - 1);
        let (lw, lh) = (bx1 - bx0 + 1, by1 - by0 + 1);
        let mut img = Raster::zeros(lw, lh, ch);
        let mut valid = BitMask::empty(lw, lh);
        for ly in 0..lh {
            for lx in 0..lw {
                let a = canvas.to_anchor((bx0 + lx) as f64, (by0 + ly) as f64);
                let p = inv.apply(a);
                if frame.sample(p[0], p[1], 0).is_none() {
                    continue;
                }
                for c in 0..ch {
                    img.set(lx, ly, c, frame.sample(p[0], p[1], c).unwrap_or(0.0));
                }
                valid.set(lx, ly, true);
            }
        }
        layers.push(MosaicLayer {
            index: i,
            transform: *t,
            offset: [bx0, by0],
            image: Image::from_raster(img),
            valid,
            gain: 1.0,
        });
    }
    Ok((canvas, layers))
}

/// `(i, j, N_ij, mean of i over the overlap, mean of j over the overlap)`
/// for every layer pair with a nonempty overlap, using channel-averaged
/// intensity.
pub fn overlap_statistics(layers: &[MosaicLayer]) -> Vec<(usize, usize, usize, f64, f64)> {
    let mut out = Vec::new();
    for i in 0..layers.len() {
        for j in i + 1..layers.len() {
            let (a, b) = (&layers[i], &layers[j]);
            let (ax0, ay0, ax1, ay1) = a.bbox();
            let (bx0, by0, bx1, by1) = b.bbox();
            let (x0, y0, x1, y1) = (ax0.max(bx0), ay0.max(by0), ax1.min(bx1), ay1.min(by1));
            let (mut n, mut si, mut sj) = (0usize, 0.0, 0.0);
            for y in y0..y1.max(y0) {
                for x in x0..x1.max(x0) {
                    if a.covers(x, y) && b.covers(x, y) {
                        n += 1;
                        si += a.gray_at(x, y);
                        sj += b.gray_at(x, y);
                    }
                }
            }
            if n > 0 {
                out.push((i, j, n, si / n as f64, sj / n as f64));
            }
        }
    }
    out
}

/// Least-squares gains equalizing overlap means, with a prior pulling each
/// gain toward 1. Overlap means are divided by their global average first,
/// which makes the gains independent of a common intensity scale.
pub fn gain_compensate(mut layers: Vec<MosaicLayer>) -> Result<Vec<MosaicLayer>> {
    if layers.is_empty() {
        return Err(Error::InvalidArgument("no layers to compensate".into()));
    }
    let stats = overlap_statistics(&layers);
    let n = layers.len();
    let norm = {
        let (s, k) = stats
            .iter()
            .fold((0.0, 0usize), |a, s| (a.0 + s.3 + s.4, a.1 + 2));
        if k > 0 && s > 0.0 {
            s / k as f64
        } else {
            1.0
        }
    };
    let mut a = DMatrix::<f64>::zeros(n, n);
    let mut b = DVector::<f64>::zeros(n);
    let sn2 = SIGMA_N * SIGMA_N;
    for &(i, j, cnt, mi, mj) in &stats {
        let (ii, jj, w) = (mi / norm, mj / norm, cnt as f64 / sn2);
        a[(i, i)] += w * ii * ii;
        a[(j, j)] += w * jj * jj;
        a[(i, j)] -= w * ii * jj;
        a[(j, i)] -= w * ii * jj;
    }
    let prior = 1.0 / (SIGMA_G * SIGMA_G);
    for i in 0..n {
        a[(i, i)] += prior;
        b[i] += prior;
    }
    let g = a.cholesky().ok_or(Error::Singular)?.solve(&b);
    let mut linked = vec![false; n];
    for s in &stats {
        linked[s.0] = true;
        linked[s.1] = true;
    }
    for ((layer, &gi), &has_overlap) in layers.iter_mut().zip(g.iter()).zip(&linked) {
        if !has_overlap {
            continue;
        }
        let gi = gi.max(1e-3);
        layer.gain = gi;
        layer.image = layer.image.map_clamped(|v| v * gi);
    }
    Ok(layers)
}

/// `min(5, largest feasible)` pyramid depth for the canvas.
pub fn default_bands(canvas: &Canvas) -> usize {
    5.min(max_pyramid_levels(canvas.width, canvas.height))
}

/// Distance (chamfer 1 / sqrt 2) from each valid pixel to the nearest
/// invalid pixel or the mask border; 0 outside the mask.
fn distance_to_border(mask: &BitMask) -> Vec<f64> {
    let (w, h) = mask.dims();
    let big = (w + h) as f64;
    let mut d: Vec<f64> = mask
        .bits()
        .iter()
        .map(|&b| if b { big } else { 0.0 })
        .collect();
    let at = |d: &Vec<f64>, x: isize, y: isize| {
        if x < 0 || y < 0 || x >= w as isize || y >= h as isize {
            0.0
        } else {
            d[y as usize * w + x as usize]
        }
    };
    let s2 = std::f64::consts::SQRT_2;
    for y in 0..h as isize {
        for x in 0..w as isize {
            let i = y as usize * w + x as usize;
            if d[i] == 0.0 {
                continue;
            }
            let v = d[i]
                .min(at(&d, x - 1, y) + 1.0)
                .min(at(&d, x, y - 1) + 1.0)
                .min(at(&d, x - 1, y - 1) + s2)
                .min(at(&d, x + 1, y - 1) + s2);
            d[i] = v;
        }
    }
    for y in (0..h as isize).rev() {
        for x in (0..w as isize).rev() {
            let i = y as usize * w + x as usize;
            if d[i] == 0.0 {
                continue;
            }
            let v = d[i]
                .min(at(&d, x + 1, y) + 1.0)
                .min(at(&d, x, y + 1) + 1.0)
                .min(at(&d, x + 1, y + 1) + s2)
                .min(at(&d, x - 1, y + 1) + s2);
            d[i] = v;
        }
    }
    d
}

/// Canvas-sized copy of the layer with every unsupported pixel set to its
/// nearest (breadth-first) supported neighbor, so pyramids see no false edges.
fn filled_layer(layer: &MosaicLayer, canvas: &Canvas) -> Raster {
    let (w, h) = (canvas.width, canvas.height);
    let ch = layer.image.channels();
    let mut out = Raster::zeros(w, h, ch);
    let mut seen = vec![false; w * h];
    let mut queue = VecDeque::new();
    for y in 0..h {
        for x in 0..w {
            if layer.covers(x, y) {
                for c in 0..ch {
                    out.set(x, y, c, layer.value(x, y, c));
                }
                seen[y * w + x] = true;
                queue.push_back((x, y));
            }
        }
    }
    while let Some((x, y)) = queue.pop_front() {
        let nb = [
            (x.wrapping_sub(1), y),
            (x + 1, y),
            (x, y.wrapping_sub(1)),
            (x, y + 1),
        ];
        for (nx, ny) in nb {
            if nx < w && ny < h && !seen[ny * w + nx] {
                seen[ny * w + nx] = true;
                for c in 0..ch {
                    let v = out.get(x, y, c);
                    out.set(nx, ny, c, v);
                }
                queue.push_back((nx, ny));
            }
        }
    }
    out
}

/// Union of all layer supports on the canvas.
pub fn union_mask(layers: &[MosaicLayer], canvas: &Canvas) -> BitMask {
    BitMask::from_fn(canvas.width, canvas.height, |x, y| {
        layers.iter().any(|l| l.covers(x, y))
    })
}

/// Laplacian-pyramid blend. Every canvas pixel is owned by the layer whose
/// support is deepest there (largest distance to its mask border, earliest
/// layer on ties); the ownership masks are smoothed by their Gaussian
/// pyramids and used as per-band weights. Pixels outside every layer are 0.
pub fn multiband_blend(layers: &[MosaicLayer], canvas: &Canvas, bands: usize) -> Result<Image> {
    if layers.is_empty() {
        return Err(Error::InvalidArgument("no layers to blend".into()));
    }
    let ch = layers[0].image.channels();
    if layers.iter().any(|l| l.image.channels() != ch) {
        return Err(Error::DimensionMismatch(
            "layers differ in channel count".into(),
        ));
    }
    let (w, h) = (canvas.width, canvas.height);
    if bands == 0 || bands > max_pyramid_levels(w, h) {
        return Err(Error::TooManyLevels {
            levels: bands,
            width: w,
            height: h,
        });
    }

    let mut best = vec![0.0f64; w * h];
    let mut owner = vec![usize::MAX; w * h];
    for (li, layer) in layers.iter().enumerate() {
        let d = distance_to_border(&layer.valid);
        let lw = layer.valid.width();
        for ly in 0..layer.valid.height() {
            for lx in 0..lw {
                let v = d[ly * lw + lx];
                let (x, y) = (layer.offset[0] + lx, layer.offset[1] + ly);
                let i = y * w + x;
                if v > 0.0 && v > best[i] {
                    best[i] = v;
                    owner[i] = li;
                }
            }
        }
    }

    let mut num: Option<Vec<Raster>> = None;
    let mut plain: Option<Vec<Raster>> = None;
    let mut den: Option<Vec<Raster>> = None;
    for (li, layer) in layers.iter().enumerate() {
        let filled = filled_layer(layer, canvas);
        let mask = Raster::new(
            w,
            h,
            1,
            owner
                .iter()
                .map(|&o| if o == li { 1.0 } else { 0.0 })
                .collect(),
        )?;
        let mp = gaussian_pyramid_raster(&mask, bands)?;
        let channel_bands: Vec<Vec<Raster>> = (0..ch)
            .map(|c| laplacian_pyramid(&filled.channel(c), bands))
            .collect::<Result<_>>()?;
        let lp: Vec<Raster> = (0..bands)
            .map(|k| {
                let planes: Vec<Raster> = channel_bands.iter().map(|b| b[k].clone()).collect();
                Raster::from_channels(&planes).expect("matching band dims")
            })
            .collect();
        let weighted: Vec<Raster> = lp
            .iter()
            .zip(&mp)
            .map(|(l, m)| {
                let mut r = l.clone();
                let (bw, bh) = l.dims();
                for y in 0..bh {
                    for x in 0..bw {
                        let mv = m.get(x, y, 0);
                        for c in 0..ch {
                            let v = r.get(x, y, c) * mv;
                            r.set(x, y, c, v);
                        }
                    }
                }
                r
            })
            .collect();
        accumulate(&mut num, weighted);
        accumulate(&mut plain, lp);
        accumulate(&mut den, mp);
    }
    let (num, plain, den) = (
        num.expect("layers"),
        plain.expect("layers"),
        den.expect("layers"),
    );
    let n_layers = layers.len() as f64;
    let blended: Vec<Raster> = (0..bands)
        .map(|k| {
            let mut r = num[k].clone();
            let (bw, bh) = r.dims();
            for y in 0..bh {
                for x in 0..bw {
                    let d = den[k].get(x, y, 0);
                    for c in 0..ch {
                        let v = if d > 1e-8 {
                            num[k].get(x, y, c) / d
                        } else {
                            plain[k].get(x, y, c) / n_layers
                        };
                        r.set(x, y, c, v);
                    }
                }
            }
            r
        })
        .collect();
    let mut out = collapse_laplacian(&blended)?;
    for y in 0..h {
        for x in 0..w {
            if owner[y * w + x] == usize::MAX {
                for c in 0..ch {
                    out.set(x, y, c, 0.0);
                }
            }
        }
    }
    Ok(Image::from_raster(out))
}

fn accumulate(acc: &mut Option<Vec<Raster>>, add: Vec<Raster>) {
    match acc {
        None => *acc = Some(add),
        Some(a) => {
            for (x, y) in a.iter_mut().zip(&add) {
                for (p, q) in x.data_mut().iter_mut().zip(y.data()) {
                    *p += q;
                }
            }
        }
    }
}
