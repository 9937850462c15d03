use super::{Image, Raster};
use crate::error::{Error, Result};

const BINOMIAL5: [f64; 5] = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];

/// Largest level count with `min(w, h) / 2^(levels-1) >= 2`.
pub fn max_pyramid_levels(width: usize, height: usize) -> usize {
    let mut n = width.min(height);
    if n < 2 {
        return 1;
    }
    let mut levels = 1;
    while n >= 4 {
        n /= 2;
        levels += 1;
    }
    levels
}

fn check_levels(width: usize, height: usize, levels: usize) -> Result<()> {
    let min = width.min(height) as f64;
    if levels == 0 || min / 2f64.powi(levels as i32 - 1) < 2.0 {
        if levels == 1 && min >= 1.0 {
            return Ok(());
        }
        return Err(Error::TooManyLevels {
            levels,
            width,
            height,
        });
    }
    Ok(())
}

fn reduce_axis(src: &Raster, horizontal: bool) -> Raster {
    let (w, h) = src.dims();
    let ch = src.channels();
    let (nw, nh) = if horizontal {
        (w.div_ceil(2), h)
    } else {
        (w, h.div_ceil(2))
    };
    let mut out = Raster::zeros(nw, nh, ch);
    for y in 0..nh {
        for x in 0..nw {
            for c in 0..ch {
                let mut acc = 0.0;
                for (k, kv) in BINOMIAL5.iter().enumerate() {
                    let off = k as isize - 2;
                    acc += kv
                        * if horizontal {
                            src.get_clamped(2 * x as isize + off, y as isize, c)
                        } else {
                            src.get_clamped(x as isize, 2 * y as isize + off, c)
                        };
                }
                out.set(x, y, c, acc);
            }
        }
    }
    out
}

/// Binomial blur followed by 2x decimation; output dims are `ceil(n / 2)`.
pub fn reduce(src: &Raster) -> Raster {
    reduce_axis(&reduce_axis(src, true), false)
}

fn expand_axis(src: &Raster, target: usize, horizontal: bool) -> Raster {
    let (w, h) = src.dims();
    let ch = src.channels();
    let (nw, nh) = if horizontal { (target, h) } else { (w, target) };
    let n_src = if horizontal { w } else { h } as isize;
    let mut out = Raster::zeros(nw, nh, ch);
    for y in 0..nh {
        for x in 0..nw {
            let i = if horizontal { x } else { y } as isize;
            for c in 0..ch {
                let mut acc = 0.0;
                // Contributions from source taps j with |i - 2j| <= 2.
                let j_lo = (i - 2 + 1).div_euclid(2);
                let j_hi = (i + 2).div_euclid(2);
                for j in j_lo..=j_hi {
                    let k = i - 2 * j;
                    if !(-2..=2).contains(&k) {
                        continue;
                    }
                    let jc = j.clamp(0, n_src - 1);
                    let v = if horizontal {
                        src.get(jc as usize, y, c)
                    } else {
                        src.get(x, jc as usize, c)
                    };
                    acc += 2.0 * BINOMIAL5[(k + 2) as usize] * v;
                }
                out.set(x, y, c, acc);
            }
        }
    }
    out
}

/// Upsamples to `width x height` with the binomial interpolation kernel.
pub fn expand(src: &Raster, width: usize, height: usize) -> Raster {
    expand_axis(&expand_axis(src, width, true), height, false)
}

/// Gaussian pyramid; level 0 is the input.
pub fn gaussian_pyramid(img: &Image, levels: usize) -> Result<Vec<Image>> {
    Ok(gaussian_pyramid_raster(img.as_raster(), levels)?
        .into_iter()
        .map(Image::from_raster)
        .collect())
}

pub(crate) fn gaussian_pyramid_raster(r: &Raster, levels: usize) -> Result<Vec<Raster>> {
    check_levels(r.width(), r.height(), levels)?;
    let mut out = Vec::with_capacity(levels);
    out.push(r.clone());
    for i in 1..levels {
        let next = reduce(&out[i - 1]);
        out.push(next);
    }
    Ok(out)
}

/// Laplacian pyramid: band `i = G[i] - expand(G[i+1])`, last band is the coarsest Gaussian.
pub fn laplacian_pyramid(r: &Raster, levels: usize) -> Result<Vec<Raster>> {
    let gauss = gaussian_pyramid_raster(r, levels)?;
    let mut bands = Vec::with_capacity(levels);
    for i in 0..levels - 1 {
        let (w, h) = gauss[i].dims();
        let up = expand(&gauss[i + 1], w, h);
        bands.push(gauss[i].zip_map(&up, |a, b| a - b)?);
    }
    bands.push(gauss[levels - 1].clone());
    Ok(bands)
}

/// Inverse of [`laplacian_pyramid`].
pub fn collapse_laplacian(bands: &[Raster]) -> Result<Raster> {
    let mut acc = bands
        .last()
        .ok_or_else(|| Error::InvalidArgument("empty pyramid".into()))?
        .clone();
    for band in bands.iter().rev().skip(1) {
        let up = expand(&acc, band.width(), band.height());
        acc = band.zip_map(&up, |a, b| a + b)?;
    }
    Ok(acc)
}
