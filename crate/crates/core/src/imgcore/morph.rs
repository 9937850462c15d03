use super::BitMask;

/// Offsets of a digital disk `dx^2 + dy^2 <= r^2`.
pub fn disk_offsets(radius: usize) -> Vec<(isize, isize)> {
    let r = radius as isize;
    let mut out = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if dx * dx + dy * dy <= r * r {
                out.push((dx, dy));
            }
        }
    }
    out
}

/// Binary dilation by a disk. Pixels outside the mask domain count as unset.
pub fn dilate(mask: &BitMask, radius: usize) -> BitMask {
    let offsets = disk_offsets(radius);
    let (w, h) = mask.dims();
    BitMask::from_fn(w, h, |x, y| {
        offsets.iter().any(|&(dx, dy)| {
            let (sx, sy) = (x as isize + dx, y as isize + dy);
            sx >= 0
                && sy >= 0
                && (sx as usize) < w
                && (sy as usize) < h
                && mask.get(sx as usize, sy as usize)
        })
    })
}

/// Binary erosion by a disk. Pixels outside the mask domain count as set,
/// which makes erosion the adjoint of [`dilate`] on the finite domain.
pub fn erode(mask: &BitMask, radius: usize) -> BitMask {
    let offsets = disk_offsets(radius);
    let (w, h) = mask.dims();
    BitMask::from_fn(w, h, |x, y| {
        offsets.iter().all(|&(dx, dy)| {
            let (sx, sy) = (x as isize + dx, y as isize + dy);
            sx < 0
                || sy < 0
                || sx as usize >= w
                || sy as usize >= h
                || mask.get(sx as usize, sy as usize)
        })
    })
}

/// Morphological closing (dilation then erosion) with a disk of `radius`.
///
/// Extensive and idempotent for every mask, since the two border
/// conventions above form an adjunction.
pub fn morph_close(mask: &BitMask, radius: usize) -> BitMask {
    let radius = radius.max(1);
    erode(&dilate(mask, radius), radius)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn disk(w: usize, h: usize, cx: f64, cy: f64, r: f64) -> BitMask {
        BitMask::from_fn(w, h, |x, y| {
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            dx * dx + dy * dy <= r * r
        })
    }

    #[test]
    fn empty_stays_empty() {
        let m = BitMask::empty(10, 8);
        assert_eq!(morph_close(&m, 3), m);
    }

    #[test]
    fn solid_disk_unchanged() {
        let m = disk(40, 40, 20.0, 20.0, 8.0);
        assert_eq!(morph_close(&m, 2), m);
        assert_eq!(morph_close(&m, 3), m);
    }

    #[test]
    fn annulus_gap_is_filled() {
        // Annulus between radii 5 and 11 with a 1-px wide radial cut on the +x axis.
        let (cx, cy) = (16.0, 16.0);
        let annulus = |x: usize, y: usize| {
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            let d2 = dx * dx + dy * dy;
            (25.0..=121.0).contains(&d2)
        };
        let gap = |x: usize, y: usize| y == 16 && x > 16;
        let m = BitMask::from_fn(32, 32, |x, y| annulus(x, y) && !gap(x, y));
        let closed = morph_close(&m, 2);
        // Oracle: explicit set semantics. Gap pixels strictly inside the ring
        // (at least the closing radius away from either rim) are recovered.
        for x in 23..=25 {
            assert!(!m.get(x, 16));
            assert!(closed.get(x, 16), "gap pixel ({x},16) not filled");
        }
        assert!(closed.is_subset_of(&dilate(&m, 2)));
        assert!(m.is_subset_of(&closed));
    }

    fn arb_mask() -> impl Strategy<Value = BitMask> {
        (3usize..14, 3usize..14).prop_flat_map(|(w, h)| {
            proptest::collection::vec(proptest::bool::weighted(0.3), w * h)
                .prop_map(move |bits| BitMask::new(w, h, bits).unwrap())
        })
    }

    proptest! {
        #[test]
        fn closing_is_extensive_and_idempotent(m in arb_mask(), r in 1usize..4) {
            let c = morph_close(&m, r);
            prop_assert!(m.is_subset_of(&c));
            prop_assert_eq!(morph_close(&c, r), c);
        }
    }
}
