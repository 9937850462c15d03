//! Joint refinement of per-frame affine transforms into anchor coordinates.

use std::collections::VecDeque;

use log::debug;
use nalgebra::{DMatrix, DVector, Matrix2, Vector2};
use serde::{Deserialize, Serialize};

use super::transform::Transform2D;
use super::PairEstimate;
use crate::error::{Error, Result};
use crate::flow::Correspondence;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BundleParams {
    pub max_iters: usize,
    /// Correspondences per pair entering the solve, evenly subsampled.
    pub max_correspondences: usize,
}

impl Default for BundleParams {
    fn default() -> Self {
        Self {
            max_iters: 50,
            max_correspondences: 200,
        }
    }
}

/// Initial transforms by breadth-first chaining of pair estimates from the
/// anchor, in pair-list order.
pub fn chain_transforms(
    pairs: &[PairEstimate],
    n_frames: usize,
    anchor: usize,
) -> Result<Vec<Transform2D>> {
    if anchor >= n_frames {
        return Err(Error::InvalidArgument(format!(
            "anchor {anchor} out of {n_frames} frames"
        )));
    }
    if let Some(p) = pairs
        .iter()
        .find(|p| p.src >= n_frames || p.dst >= n_frames)
    {
        return Err(Error::InvalidArgument(format!(
            "pair ({}, {}) out of range",
            p.src, p.dst
        )));
    }
    let mut t: Vec<Option<Transform2D>> = vec![None; n_frames];
    t[anchor] = Some(Transform2D::identity());
    let mut queue = VecDeque::from([anchor]);
    while let Some(k) = queue.pop_front() {
        let tk = t[k].expect("queued frames are solved");
        for p in pairs {
            let m = p.transform.to_affine();
            // T_src = T_dst ∘ M, so T_dst = T_src ∘ M^-1.
            if p.dst == k && t[p.src].is_none() {
                t[p.src] = Some(tk.compose(&m));
                queue.push_back(p.src);
            } else if p.src == k && t[p.dst].is_none() {
                t[p.dst] = Some(tk.compose(&m.inverse()?));
                queue.push_back(p.dst);
            }
        }
    }
    let missing: Vec<usize> = (0..n_frames).filter(|&i| t[i].is_none()).collect();
    if !missing.is_empty() {
        return Err(Error::Disconnected(missing));
    }
    Ok(t.into_iter().map(|x| x.expect("all solved")).collect())
}

fn subsample(c: &[Correspondence], max: usize) -> Vec<Correspondence> {
    if c.len() <= max || max == 0 {
        return c.to_vec();
    }
    (0..max).map(|i| c[i * c.len() / max]).collect()
}

/// `Σ_pairs Σ_inliers |T_dst^-1 T_src p1 - p2|^2`.
pub fn total_transfer_error(pairs: &[PairEstimate], transforms: &[Transform2D]) -> Result<f64> {
    let mut total = 0.0;
    for p in pairs {
        let m = transforms[p.dst].inverse()?.compose(&transforms[p.src]);
        for c in &p.inliers {
            let q = m.apply(c.p1);
            total += (q[0] - c.p2[0]).powi(2) + (q[1] - c.p2[1]).powi(2);
        }
    }
    Ok(total)
}

fn affine_parts(t: &Transform2D) -> (Matrix2<f64>, Vector2<f64>) {
    let [a1, a2, a3, a4, tx, ty] = t.params();
    (Matrix2::new(a1, a2, a3, a4), Vector2::new(tx, ty))
}

/// Jointly refines per-frame affine transforms `T_i` (frame -> anchor) by
/// Levenberg-Marquardt on correspondence transfer error, with the anchor
/// held at identity. Initialized by chaining; never returns a solution worse
/// than the initialization.
pub fn bundle_adjust(
    pairs: &[PairEstimate],
    n_frames: usize,
    anchor: usize,
    params: &BundleParams,
) -> Result<Vec<Transform2D>> {
    let init = chain_transforms(pairs, n_frames, anchor)?;
    if n_frames == 1 {
        return Ok(init);
    }
    let used: Vec<(usize, usize, Vec<Correspondence>)> = pairs
        .iter()
        .map(|p| {
            (
                p.src,
                p.dst,
                subsample(&p.inliers, params.max_correspondences),
            )
        })
        .collect();
    let reduced: Vec<PairEstimate> = pairs
        .iter()
        .zip(&used)
        .map(|(p, u)| PairEstimate {
            inliers: u.2.clone(),
            ..p.clone()
        })
        .collect();

    // Unknown block index for every non-anchor frame.
    let slot: Vec<Option<usize>> = {
        let mut k = 0;
        (0..n_frames)
            .map(|i| {
                if i == anchor {
                    None
                } else {
                    k += 1;
                    Some(k - 1)
                }
            })
            .collect()
    };
    let n_unknowns = 6 * (n_frames - 1);

    let mut current = init.clone();
    let mut cost = total_transfer_error(&reduced, &current)?;
    let init_cost = cost;
    let mut lambda = 1e-3;
    for iter in 0..params.max_iters {
        let mut jtj = DMatrix::<f64>::zeros(n_unknowns, n_unknowns);
        let mut jtr = DVector::<f64>::zeros(n_unknowns);
        for (src, dst, corr) in &used {
            let (ms, ts) = affine_parts(&current[*src]);
            let (md, td) = affine_parts(&current[*dst]);
            let Some(md_inv) = md.try_inverse() else {
                return Err(Error::Singular);
            };
            for c in corr {
                let q = ms * Vector2::new(c.p1[0], c.p1[1]) + ts;
                let z = md_inv * (q - td);
                let r = z - Vector2::new(c.p2[0], c.p2[1]);
                // d r / d(a1, a2, a3, a4, tx, ty) for source and destination.
                let mut js = [[0.0; 6]; 2];
                let mut jd = [[0.0; 6]; 2];
                let basis = [
                    (Vector2::new(c.p1[0], 0.0), Vector2::new(z[0], 0.0)),
                    (Vector2::new(c.p1[1], 0.0), Vector2::new(z[1], 0.0)),
                    (Vector2::new(0.0, c.p1[0]), Vector2::new(0.0, z[0])),
                    (Vector2::new(0.0, c.p1[1]), Vector2::new(0.0, z[1])),
                    (Vector2::new(1.0, 0.0), Vector2::new(1.0, 0.0)),
                    (Vector2::new(0.0, 1.0), Vector2::new(0.0, 1.0)),
                ];
                for (k, (ds, dd)) in basis.iter().enumerate() {
                    let a = md_inv * ds;
                    let b = -(md_inv * dd);
                    js[0][k] = a[0];
                    js[1][k] = a[1];
                    jd[0][k] = b[0];
                    jd[1][k] = b[1];
                }
                let blocks = [(slot[*src], &js), (slot[*dst], &jd)];
                for row in 0..2 {
                    for &(si, ji) in &blocks {
                        let Some(si) = si else { continue };
                        for a in 0..6 {
                            jtr[6 * si + a] += ji[row][a] * r[row];
                            for &(sj, jj) in &blocks {
                                let Some(sj) = sj else { continue };
                                for b in 0..6 {
                                    jtj[(6 * si + a, 6 * sj + b)] += ji[row][a] * jj[row][b];
                                }
                            }
                        }
                    }
                }
            }
        }

        let mut improved = false;
        for _ in 0..10 {
            let mut damped = jtj.clone();
            for k in 0..n_unknowns {
                damped[(k, k)] += lambda * jtj[(k, k)].max(1e-9);
            }
            let Some(chol) = damped.cholesky() else {
                lambda *= 10.0;
                continue;
            };
            let step = chol.solve(&(-&jtr));
            let cand: Vec<Transform2D> = (0..n_frames)
                .map(|i| match slot[i] {
                    None => Transform2D::identity(),
                    Some(s) => {
                        let p = current[i].params();
                        Transform2D::affine(std::array::from_fn(|k| p[k] + step[6 * s + k]))
                    }
                })
                .collect();
            let c = total_transfer_error(&reduced, &cand).unwrap_or(f64::INFINITY);
            if c < cost {
                let rel = (cost - c) / cost.max(1e-300);
                current = cand;
                cost = c;
                lambda = (lambda * 0.3).max(1e-9);
                improved = rel > 1e-10;
                break;
            }
            lambda *= 10.0;
        }
        debug!("bundle adjustment iter {iter}: cost {cost:.6e}");
        if !improved {
            break;
        }
    }
    if cost > init_cost {
        return Ok(init);
    }
    current[anchor] = Transform2D::identity();
    Ok(current)
}
