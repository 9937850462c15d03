use crate::error::{Error, Result};
use crate::imgcore::{morph_close, sobel_gradient_magnitude, BitMask, Image, Raster};

/// Pixels at or above `mean + std` of the gray image.
pub fn appearance_mask(gray: &Image) -> BitMask {
    let (mean, std) = gray.mean_std();
    let thr = mean + std;
    let (w, h) = gray.dims();
    BitMask::from_fn(w, h, |x, y| gray.get(x, y, 0) >= thr)
}

/// Closed mask of strong gradients: Sobel magnitude strictly above its own
/// `mean + std`, then morphologically closed to fill highlight interiors.
pub fn shape_mask(gray: &Image, closing_radius: usize) -> BitMask {
    let grad = sobel_gradient_magnitude(gray);
    let (mean, std) = grad.mean_std();
    let thr = mean + std;
    let (w, h) = gray.dims();
    let raw = BitMask::from_fn(w, h, |x, y| grad.get(x, y, 0) > thr);
    morph_close(&raw, closing_radius)
}

/// Specular highlights: the appearance threshold AND the closed gradient mask.
pub fn detect_specular_mask(gray: &Image, closing_radius: usize) -> BitMask {
    let gray = if gray.channels() == 1 {
        gray.clone()
    } else {
        crate::imgcore::to_grayscale(gray)
    };
    appearance_mask(&gray)
        .and(&shape_mask(&gray, closing_radius))
        .expect("masks share image dims")
}

const INPAINT_TOL: f64 = 1e-4;

/// Harmonic fill of the masked pixels: seeded with the mean of the unmasked
/// pixels bordering the hole, then Jacobi-relaxed on the Laplace equation.
/// Unmasked pixels are copied bit-exactly.
pub fn inpaint(img: &Image, mask: &BitMask, iterations: usize) -> Result<Image> {
    if mask.dims() != img.dims() {
        return Err(Error::DimensionMismatch(format!(
            "mask {:?} vs image {:?}",
            mask.dims(),
            img.dims()
        )));
    }
    let n_masked = mask.count();
    if n_masked == 0 {
        return Ok(img.clone());
    }
    let (w, h) = img.dims();
    if n_masked == w * h {
        return Err(Error::NothingToAnchor);
    }

    let masked: Vec<(usize, usize)> = (0..h)
        .flat_map(|y| (0..w).map(move |x| (x, y)))
        .filter(|&(x, y)| mask.get(x, y))
        .collect();
    let neighbors = |x: usize, y: usize| {
        let mut n = [(0usize, 0usize); 4];
        let mut k = 0;
        if x > 0 {
            n[k] = (x - 1, y);
            k += 1;
        }
        if x + 1 < w {
            n[k] = (x + 1, y);
            k += 1;
        }
        if y > 0 {
            n[k] = (x, y - 1);
            k += 1;
        }
        if y + 1 < h {
            n[k] = (x, y + 1);
            k += 1;
        }
        (n, k)
    };

    let mut out: Raster = img.as_raster().clone();
    for c in 0..img.channels() {
        let (mut sum, mut count) = (0.0, 0usize);
        for &(x, y) in &masked {
            let (nb, k) = neighbors(x, y);
            for &(nx, ny) in &nb[..k] {
                if !mask.get(nx, ny) {
                    sum += img.get(nx, ny, c);
                    count += 1;
                }
            }
        }
        let seed = if count > 0 {
            sum / count as f64
        } else {
            img.mean()
        };
        for &(x, y) in &masked {
            out.set(x, y, c, seed);
        }

        let mut next = vec![0.0; masked.len()];
        for _ in 0..iterations {
            let mut max_change: f64 = 0.0;
            for (i, &(x, y)) in masked.iter().enumerate() {
                let (nb, k) = neighbors(x, y);
                let avg = nb[..k]
                    .iter()
                    .map(|&(nx, ny)| out.get(nx, ny, c))
                    .sum::<f64>()
                    / k as f64;
                max_change = max_change.max((avg - out.get(x, y, c)).abs());
                next[i] = avg;
            }
            for (i, &(x, y)) in masked.iter().enumerate() {
                out.set(x, y, c, next[i]);
            }
            if max_change < INPAINT_TOL {
                break;
            }
        }
    }
    Ok(Image::from_raster(out))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_and_black_give_empty_masks() {
        for v in [0.0, 0.4, 1.0] {
            let img = Image::filled(20, 20, 1, v);
            assert_eq!(detect_specular_mask(&img, 3).count(), 0);
        }
    }

    #[test]
    fn bright_block_is_detected_exactly() {
        let inside = |x: usize, y: usize| (30..35).contains(&x) && (30..35).contains(&y);
        let img = Image::from_fn(64, 64, |x, y| if inside(x, y) { 1.0 } else { 0.1 });
        // Direct evaluation of both branches on the pixel grid.
        let app = appearance_mask(&img);
        assert_eq!(app, BitMask::from_fn(64, 64, inside));
        let shape = shape_mask(&img, 3);
        // Ring of nonzero Sobel response spans 29..=35; closing fills the hole.
        assert_eq!(
            shape,
            BitMask::from_fn(64, 64, |x, y| (29..36).contains(&x)
                && (29..36).contains(&y))
        );
        let mask = detect_specular_mask(&img, 3);
        assert_eq!(mask, BitMask::from_fn(64, 64, inside));
        assert!(mask.is_subset_of(&app) && mask.is_subset_of(&shape));
    }

    #[test]
    fn inpaint_empty_mask_is_identity() {
        let img = Image::from_fn(8, 8, |x, y| (x * y) as f64 / 49.0);
        assert_eq!(inpaint(&img, &BitMask::empty(8, 8), 10).unwrap(), img);
    }

    #[test]
    fn inpaint_full_mask_fails() {
        let img = Image::filled(4, 4, 1, 0.5);
        assert!(matches!(
            inpaint(&img, &BitMask::full(4, 4), 10),
            Err(Error::NothingToAnchor)
        ));
    }

    #[test]
    fn single_pixel_in_constant_image() {
        let img = Image::filled(9, 9, 1, 0.35);
        let mut mask = BitMask::empty(9, 9);
        mask.set(4, 4, true);
        let mut holed = img.as_raster().clone();
        holed.set(4, 4, 0, 1.0);
        let out = inpaint(&Image::from_raster(holed), &mask, 50).unwrap();
        assert!((out.get(4, 4, 0) - 0.35).abs() < 1e-12);
    }

    /// Gauss-Seidel relaxation run to machine convergence, the reference
    /// harmonic solution for the ramp test.
    fn dense_harmonic(img: &Image, mask: &BitMask) -> Raster {
        let mut r = img.as_raster().clone();
        let (w, h) = img.dims();
        for _ in 0..20_000 {
            let mut change: f64 = 0.0;
            for y in 0..h {
                for x in 0..w {
                    if !mask.get(x, y) {
                        continue;
                    }
                    let mut s = 0.0;
                    let mut k = 0.0;
                    for (dx, dy) in [(-1i32, 0i32), (1, 0), (0, -1), (0, 1)] {
                        let (nx, ny) = (x as i32 + dx, y as i32 + dy);
                        if nx >= 0 && ny >= 0 && (nx as usize) < w && (ny as usize) < h {
                            s += r.get(nx as usize, ny as usize, 0);
                            k += 1.0;
                        }
                    }
                    let v = s / k;
                    change = change.max((v - r.get(x, y, 0)).abs());
                    r.set(x, y, 0, v);
                }
            }
            if change < 1e-14 {
                break;
            }
        }
        r
    }

    #[test]
    fn disk_in_ramp_recovers_affine_field() {
        let ramp = |x: usize, y: usize| 0.2 + 0.012 * x as f64 + 0.007 * y as f64;
        let img = Image::from_fn(32, 32, ramp);
        let mask = BitMask::from_fn(32, 32, |x, y| {
            (x as f64 - 15.0).powi(2) + (y as f64 - 16.0).powi(2) <= 3.5 * 3.5
        });
        let mut corrupted = img.as_raster().clone();
        for y in 0..32 {
            for x in 0..32 {
                if mask.get(x, y) {
                    corrupted.set(x, y, 0, 1.0);
                }
            }
        }
        let corrupted = Image::from_raster(corrupted);
        let out = inpaint(&corrupted, &mask, 1000).unwrap();
        let reference = dense_harmonic(&corrupted, &mask);
        for y in 0..32 {
            for x in 0..32 {
                if mask.get(x, y) {
                    assert!((out.get(x, y, 0) - ramp(x, y)).abs() < 1e-3);
                    assert!((reference.get(x, y, 0) - ramp(x, y)).abs() < 1e-9);
                } else {
                    assert_eq!(out.get(x, y, 0).to_bits(), corrupted.get(x, y, 0).to_bits());
                }
            }
        }
    }
}
