use super::{Image, Raster};

/// Largest Sobel magnitude a `[0, 1]` image can produce: `sqrt(4^2 + 4^2)`.
pub const SOBEL_MAX_MAGNITUDE: f64 = 4.0 * std::f64::consts::SQRT_2;

/// ITU-R 601 luma. Single-channel input is returned unchanged.
pub fn to_grayscale(img: &Image) -> Image {
    if img.channels() == 1 {
        return img.clone();
    }
    let data = img
        .data()
        .chunks_exact(img.channels())
        .map(|px| 0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2])
        .collect();
    Image::from_raster(Raster {
        width: img.width(),
        height: img.height(),
        channels: 1,
        data,
    })
}

/// 3x3 Sobel gradient magnitude, replicate border, scaled into `[0, 1]`.
pub fn sobel_gradient_magnitude(img: &Image) -> Image {
    let r = img.as_raster();
    let (w, h) = r.dims();
    let out = Raster::from_fn(w, h, |x, y| {
        let (x, y) = (x as isize, y as isize);
        let p = |dx: isize, dy: isize| r.get_clamped(x + dx, y + dy, 0);
        let gx = (p(1, -1) + 2.0 * p(1, 0) + p(1, 1)) - (p(-1, -1) + 2.0 * p(-1, 0) + p(-1, 1));
        let gy = (p(-1, 1) + 2.0 * p(0, 1) + p(1, 1)) - (p(-1, -1) + 2.0 * p(0, -1) + p(1, -1));
        (gx * gx + gy * gy).sqrt() / SOBEL_MAX_MAGNITUDE
    });
    Image::from_raster(out)
}

/// Central-difference gradients of channel 0 with replicate border.
pub fn central_gradients(r: &Raster) -> (Raster, Raster) {
    let (w, h) = r.dims();
    let gx = Raster::from_fn(w, h, |x, y| {
        let (x, y) = (x as isize, y as isize);
        0.5 * (r.get_clamped(x + 1, y, 0) - r.get_clamped(x - 1, y, 0))
    });
    let gy = Raster::from_fn(w, h, |x, y| {
        let (x, y) = (x as isize, y as isize);
        0.5 * (r.get_clamped(x, y + 1, 0) - r.get_clamped(x, y - 1, 0))
    });
    (gx, gy)
}

fn convolve_separable(r: &Raster, kernel: &[f64]) -> Raster {
    let (w, h) = r.dims();
    let ch = r.channels();
    let half = (kernel.len() / 2) as isize;
    let mut tmp = Raster::zeros(w, h, ch);
    for y in 0..h {
        for x in 0..w {
            for c in 0..ch {
                let mut acc = 0.0;
                for (k, kv) in kernel.iter().enumerate() {
                    acc += kv * r.get_clamped(x as isize + k as isize - half, y as isize, c);
                }
                tmp.set(x, y, c, acc);
            }
        }
    }
    let mut out = Raster::zeros(w, h, ch);
    for y in 0..h {
        for x in 0..w {
            for c in 0..ch {
                let mut acc = 0.0;
                for (k, kv) in kernel.iter().enumerate() {
                    acc += kv * tmp.get_clamped(x as isize, y as isize + k as isize - half, c);
                }
                out.set(x, y, c, acc);
            }
        }
    }
    out
}

/// Normalized Gaussian kernel truncated at `radius`.
pub(crate) fn gaussian_kernel(sigma: f64, radius: usize) -> Vec<f64> {
    let r = radius as isize;
    let mut k: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable Gaussian blur (truncated at 3 sigma), replicate border.
pub fn gaussian_blur(r: &Raster, sigma: f64) -> Raster {
    if sigma <= 0.0 {
        return r.clone();
    }
    let radius = (3.0 * sigma).ceil().max(1.0) as usize;
    convolve_separable(r, &gaussian_kernel(sigma, radius))
}

/// Separable box average over a `(2 radius + 1)^2` window, replicate border.
pub fn box_blur(r: &Raster, radius: usize) -> Raster {
    let n = 2 * radius + 1;
    convolve_separable(r, &vec![1.0 / n as f64; n])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grayscale_weights() {
        let white = Image::new(1, 1, 3, vec![1.0, 1.0, 1.0]).unwrap();
        assert!((to_grayscale(&white).get(0, 0, 0) - 1.0).abs() < 1e-12);
        let black = Image::new(1, 1, 3, vec![0.0; 3]).unwrap();
        assert_eq!(to_grayscale(&black).get(0, 0, 0), 0.0);
        let red = Image::new(1, 1, 3, vec![1.0, 0.0, 0.0]).unwrap();
        assert!((to_grayscale(&red).get(0, 0, 0) - 0.299).abs() < 1e-12);
        let gray = Image::filled(3, 2, 1, 0.4);
        assert_eq!(to_grayscale(&gray), gray);
    }

    #[test]
    fn sobel_constant_is_zero() {
        let img = Image::filled(9, 7, 1, 0.37);
        assert!(sobel_gradient_magnitude(&img)
            .data()
            .iter()
            .all(|v| *v == 0.0));
        let one = Image::filled(1, 1, 1, 0.8);
        assert_eq!(sobel_gradient_magnitude(&one).data(), &[0.0]);
    }

    #[test]
    fn sobel_step_edge_peaks_at_edge() {
        let img = Image::from_fn(12, 6, |x, _| if x >= 6 { 1.0 } else { 0.0 });
        let g = sobel_gradient_magnitude(&img);
        for y in 0..6 {
            assert!((g.get(5, y, 0) - 1.0 / 2f64.sqrt()).abs() < 1e-12);
            assert!((g.get(6, y, 0) - 1.0 / 2f64.sqrt()).abs() < 1e-12);
            assert_eq!(g.get(0, y, 0), 0.0);
            assert_eq!(g.get(11, y, 0), 0.0);
        }
    }

    /// Brute-force 3x3 correlation used as the oracle for ramp inputs.
    fn brute_sobel(img: &Image, x: usize, y: usize) -> f64 {
        let kx = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
        let ky = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];
        let (mut gx, mut gy) = (0.0, 0.0);
        for j in 0..3 {
            for i in 0..3 {
                let v = img.get(x + i - 1, y + j - 1, 0);
                gx += kx[j][i] * v;
                gy += ky[j][i] * v;
            }
        }
        (gx * gx + gy * gy).sqrt() / SOBEL_MAX_MAGNITUDE
    }

    #[test]
    fn sobel_ramp_matches_direct_convolution() {
        let img = Image::from_fn(16, 16, |x, y| 0.03 * x as f64 + 0.01 * y as f64);
        let g = sobel_gradient_magnitude(&img);
        for y in 1..15 {
            for x in 1..15 {
                assert!((g.get(x, y, 0) - brute_sobel(&img, x, y)).abs() < 1e-12);
            }
        }
        // 8 * sqrt(0.03^2 + 0.01^2) / (4 sqrt 2)
        let expected = 8.0 * (0.03f64.powi(2) + 0.01f64.powi(2)).sqrt() / SOBEL_MAX_MAGNITUDE;
        assert!((g.get(7, 7, 0) - expected).abs() < 1e-12);
    }

    #[test]
    fn blur_preserves_constants() {
        let r = Raster::filled(7, 5, 2, 0.25);
        for v in gaussian_blur(&r, 1.3).data() {
            assert!((v - 0.25).abs() < 1e-12);
        }
        for v in box_blur(&r, 2).data() {
            assert!((v - 0.25).abs() < 1e-12);
        }
    }
}
