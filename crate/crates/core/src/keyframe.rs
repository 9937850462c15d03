//! Keyframe selection by thresholding the mean optical-flow magnitude
//! against the current reference frame.

use log::debug;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{farneback_flow, mean_flow_magnitude, FlowParams};
use crate::imgcore::{to_grayscale, Image};

pub const DEFAULT_THRESHOLD: f64 = 20.0;
pub const DEFAULT_FALLBACK_WINDOW: usize = 15;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct KeyframeSelection {
    /// Selected frame indices, strictly increasing, starting at 0.
    pub indices: Vec<usize>,
    /// Mean flow magnitude against the previous reference at the moment each
    /// keyframe was chosen (0 for frame 0).
    pub scores: Vec<f64>,
    /// Whether each keyframe came from the fallback rule.
    pub fallback: Vec<bool>,
}

impl KeyframeSelection {
    /// One index per line.
    pub fn to_manifest(&self) -> String {
        self.indices.iter().map(|i| format!("{i}\n")).collect()
    }
}

/// Scans the sequence, promoting a frame to keyframe when its mean flow
/// magnitude against the current reference reaches `threshold`. When
/// `fallback_window` consecutive candidates all fall short, the best-scoring
/// one in that window (earliest on ties) is promoted and scanning resumes
/// after the window.
pub fn select_keyframes(
    frames: &[Image],
    threshold: f64,
    fallback_window: usize,
    params: &FlowParams,
) -> Result<KeyframeSelection> {
    select_keyframes_with(
        frames.len(),
        threshold,
        fallback_window,
        |reference, candidate| {
            let a = gray(&frames[reference]);
            let b = gray(&frames[candidate]);
            Ok(mean_flow_magnitude(&farneback_flow(&a, &b, params)?))
        },
    )
}

fn gray(img: &Image) -> Image {
    if img.channels() == 1 {
        img.clone()
    } else {
        to_grayscale(img)
    }
}

/// Selection logic over an arbitrary score function `score(reference, candidate)`.
pub fn select_keyframes_with(
    n_frames: usize,
    threshold: f64,
    fallback_window: usize,
    mut score: impl FnMut(usize, usize) -> Result<f64>,
) -> Result<KeyframeSelection> {
    if n_frames == 0 {
        return Err(Error::InvalidArgument("no frames to select from".into()));
    }
    if !(threshold > 0.0) || fallback_window == 0 {
        return Err(Error::InvalidArgument(
            "threshold must be positive and fallback_window at least 1".into(),
        ));
    }
    let mut sel = KeyframeSelection {
        indices: vec![0],
        scores: vec![0.0],
        fallback: vec![false],
    };
    let mut reference = 0;
    let mut window: Vec<(usize, f64)> = Vec::with_capacity(fallback_window);
    let mut candidate = 1;
    while candidate < n_frames {
        let s = score(reference, candidate)?;
        debug!("keyframe scan: ref {reference} cand {candidate} score {s:.3}");
        if s >= threshold {
            sel.indices.push(candidate);
            sel.scores.push(s);
            sel.fallback.push(false);
            reference = candidate;
            window.clear();
        } else {
            window.push((candidate, s));
            if window.len() == fallback_window {
                let (best, best_score) =
                    window
                        .iter()
                        .copied()
                        .fold((usize::MAX, f64::NEG_INFINITY), |acc, (i, v)| {
                            if v > acc.1 {
                                (i, v)
                            } else {
                                acc
                            }
                        });
                sel.indices.push(best);
                sel.scores.push(best_score);
                sel.fallback.push(true);
                reference = best;
                window.clear();
            }
        }
        candidate += 1;
    }
    Ok(sel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::testutil::Waves;

    #[test]
    fn identical_frames_use_fallback_windows() {
        let sel = select_keyframes_with(40, 20.0, 15, |_, _| Ok(0.0)).unwrap();
        // Windows 1..=15 and 16..=30 fill up; 31..=39 is incomplete.
        assert_eq!(sel.indices, vec![0, 1, 16]);
        assert_eq!(sel.fallback, vec![false, true, true]);
        let sel = select_keyframes_with(46, 20.0, 15, |_, _| Ok(0.0)).unwrap();
        assert_eq!(sel.indices, vec![0, 1, 16, 31]);
    }

    #[test]
    fn cumulative_shift_oracle() {
        // Score is the exact accumulated shift between reference and candidate.
        let sel = select_keyframes_with(30, 20.0, 15, |r, c| Ok(5.0 * (c - r) as f64)).unwrap();
        assert_eq!(sel.indices, vec![0, 4, 8, 12, 16, 20, 24, 28]);
        let sel = select_keyframes_with(6, 20.0, 15, |r, c| Ok(25.0 * (c - r) as f64)).unwrap();
        assert_eq!(sel.indices, vec![0, 1, 2, 3, 4, 5]);
    }

    #[test]
    fn fallback_picks_best_in_window() {
        let scores = [0.0, 3.0, 7.0, 7.0, 1.0];
        let sel = select_keyframes_with(5, 20.0, 4, |_, c| Ok(scores[c])).unwrap();
        assert_eq!(sel.indices, vec![0, 2]);
        assert_eq!(sel.scores, vec![0.0, 7.0]);
    }

    #[test]
    fn single_frame_and_errors() {
        let sel = select_keyframes_with(1, 20.0, 15, |_, _| unreachable!()).unwrap();
        assert_eq!(sel.indices, vec![0]);
        assert!(select_keyframes_with(0, 20.0, 15, |_, _| Ok(0.0)).is_err());
        assert!(select_keyframes_with(3, 0.0, 15, |_, _| Ok(0.0)).is_err());
        assert!(select_keyframes_with(3, 20.0, 0, |_, _| Ok(0.0)).is_err());
    }

    #[test]
    fn gaps_bounded_by_window() {
        // A fallback pick can sit at the start of its window while the next
        // pick closes the following window, so gaps reach 2 * window - 1.
        let sel = select_keyframes_with(100, 20.0, 7, |r, c| Ok(((c * 31 + r * 17) % 13) as f64))
            .unwrap();
        for w in sel.indices.windows(2) {
            assert!(w[1] > w[0] && w[1] - w[0] < 2 * 7);
        }
    }

    #[test]
    fn panning_frames_measured_by_flow() {
        let tex = Waves::new(21, 40);
        let frames: Vec<Image> = (0..9)
            .map(|k| tex.render(128, 128, move |x, y| (x + 5.0 * k as f64, y)))
            .collect();
        let sel = select_keyframes(&frames, 20.0, 15, &FlowParams::default()).unwrap();
        assert_eq!(sel.indices, vec![0, 4, 8]);
        assert!(sel.scores[1..].iter().all(|s| *s >= 20.0));
    }
}
