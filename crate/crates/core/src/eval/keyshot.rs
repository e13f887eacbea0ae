//! Frame scores to keyshot summaries.

use serde::{Deserialize, Serialize};

use super::knapsack::knapsack;
use super::kts::{kts_segment, KtsConfig, SegmentSet};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KeyshotConfig {
    /// Maximum summary length as a fraction of the original frame count.
    pub budget_ratio: f64,
    /// Upper bound on segments is `ceil(T / frames_per_segment)`.
    pub frames_per_segment: usize,
    /// Segmentation penalty as a fraction of the total scatter of the video.
    pub penalty_ratio: f64,
    pub min_segment_len: usize,
}

impl Default for KeyshotConfig {
    fn default() -> Self {
        Self {
            budget_ratio: 0.15,
            frames_per_segment: 4,
            penalty_ratio: 1e-3,
            min_segment_len: 2,
        }
    }
}

/// Binary selection over the original frames.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeyshotSummary {
    pub binary: Vec<u8>,
    pub selected_segments: Vec<usize>,
    /// Segment ranges in original frames.
    pub segments: Vec<(usize, usize)>,
    pub budget_ratio: f64,
}

impl KeyshotSummary {
    pub fn selected_frames(&self) -> usize {
        self.binary.iter().filter(|&&b| b != 0).count()
    }

    /// Selected shots as original-frame ranges.
    pub fn shots(&self) -> Vec<(usize, usize)> {
        self.selected_segments.iter().map(|&i| self.segments[i]).collect()
    }
}

/// Original-frame range represented by each sampled frame.
pub fn frame_spans(picks: &[usize], t_original: usize) -> Result<Vec<(usize, usize)>> {
    if picks.is_empty() || picks.windows(2).any(|w| w[0] >= w[1]) || *picks.last().unwrap() >= t_original {
        return Err(Error::Domain {
            op: "frame_spans",
            msg: format!("picks must be strictly increasing and below {t_original}"),
        });
    }
    Ok((0..picks.len())
        .map(|i| {
            let start = if i == 0 { 0 } else { picks[i] };
            let end = picks.get(i + 1).copied().unwrap_or(t_original);
            (start, end)
        })
        .collect())
}

/// Min-max normalised copy; constant input maps to all zeros.
pub fn min_max(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if hi > lo {
        values.iter().map(|v| (v - lo) / (hi - lo)).collect()
    } else {
        vec![0.0; values.len()]
    }
}

/// Change-point segmentation of `features: [T×d]` under `cfg`.
pub fn segment_video(features: &Tensor, cfg: &KeyshotConfig) -> Result<SegmentSet> {
    let (t, _) = features.dims2()?;
    let all = SegmentSet::single(t);
    let total = super::kts::objective(features, &all, 0.0)?;
    let kts = KtsConfig {
        max_segments: t.div_ceil(cfg.frames_per_segment.max(1)).max(1),
        penalty: cfg.penalty_ratio * total,
        min_len: cfg.min_segment_len,
    };
    kts_segment(features, &kts)
}

/// Segment-mean knapsack selection over an existing segmentation.
pub fn keyshots_from_segments(
    scores: &[f64],
    segs: &SegmentSet,
    picks: &[usize],
    t_original: usize,
    budget_ratio: f64,
) -> Result<KeyshotSummary> {
    if scores.len() != segs.len || picks.len() != segs.len {
        return Err(Error::dim("scores_to_keyshots", &[scores.len()], &[segs.len, picks.len()]));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Domain {
            op: "scores_to_keyshots",
            msg: "scores must be finite".into(),
        });
    }
    if !(0.0..=1.0).contains(&budget_ratio) {
        return Err(Error::Config(format!("budget ratio must lie in [0, 1], got {budget_ratio}")));
    }
    let norm = min_max(scores);
    let spans = frame_spans(picks, t_original)?;
    let ranges = segs.ranges();
    let segments: Vec<(usize, usize)> = ranges.iter().map(|&(a, b)| (spans[a].0, spans[b - 1].1)).collect();
    let weights: Vec<usize> = segments.iter().map(|&(a, b)| b - a).collect();
    let means = segs.means(&norm);
    let values: Vec<f64> = means.iter().zip(&weights).map(|(m, &w)| m * w as f64).collect();
    let budget = (budget_ratio * t_original as f64).floor() as usize;
    let selected = knapsack(&values, &weights, budget);
    let mut binary = vec![0u8; t_original];
    for &i in &selected {
        let (a, b) = segments[i];
        binary[a..b].iter_mut().for_each(|v| *v = 1);
    }
    Ok(KeyshotSummary {
        binary,
        selected_segments: selected,
        segments,
        budget_ratio,
    })
}

/// Segmentation of `features`, per-segment mean scores, then knapsack packing
/// under `floor(budget_ratio · t_original)` original frames.
pub fn scores_to_keyshots(
    scores: &[f64],
    features: &Tensor,
    picks: &[usize],
    t_original: usize,
    cfg: &KeyshotConfig,
) -> Result<KeyshotSummary> {
    let segs = segment_video(features, cfg)?;
    keyshots_from_segments(scores, &segs, picks, t_original, cfg.budget_ratio)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity(t: usize) -> Vec<usize> {
        (0..t).collect()
    }

    #[test]
    fn single_high_segment_is_selected() {
        let segs = SegmentSet::from_starts(vec![0, 4, 8, 12], 20).unwrap();
        let mut scores = vec![0.0; 20];
        scores[8..12].iter_mut().for_each(|v| *v = 1.0);
        let k = keyshots_from_segments(&scores, &segs, &identity(20), 20, 0.2).unwrap();
        assert_eq!(k.selected_segments, vec![2]);
        assert_eq!(k.selected_frames(), 4);
    }

    #[test]
    fn uniform_scores_respect_budget() {
        let segs = SegmentSet::from_starts(vec![0, 3, 8, 10, 16], 20).unwrap();
        let k = keyshots_from_segments(&[0.7; 20], &segs, &identity(20), 20, 0.3).unwrap();
        assert!(k.selected_frames() <= 6);
        // Constant scores normalise to zero, so every packing ties and the lowest indices win.
        assert_eq!(k.selected_segments, vec![0, 2]);
    }

    #[test]
    fn hand_walked_thirty_frame_fixture() {
        // Three flat feature levels: frames 0..10, 10..20, 20..30.
        let mut feats = Vec::new();
        for t in 0..30 {
            feats.push(vec![(t / 10) as f64 * 4.0, 1.0]);
        }
        let features = Tensor::from_rows(&feats);
        let mut scores = vec![0.1; 30];
        scores[10..20].iter_mut().for_each(|v| *v = 0.9);
        scores[20..30].iter_mut().for_each(|v| *v = 0.5);
        let cfg = KeyshotConfig {
            budget_ratio: 0.4,
            frames_per_segment: 10,
            penalty_ratio: 1e-3,
            min_segment_len: 2,
        };
        let k = scores_to_keyshots(&scores, &features, &identity(30), 30, &cfg).unwrap();
        // Segments {0..10, 10..20, 20..30}, normalised means {0, 1, 0.5}; budget 12 frames fits one.
        assert_eq!(k.segments, vec![(0, 10), (10, 20), (20, 30)]);
        assert_eq!(k.selected_segments, vec![1]);
        assert_eq!(&k.binary[10..20], &[1u8; 10]);
        assert_eq!(k.selected_frames(), 10);
    }

    #[test]
    fn spans_follow_picks() {
        assert_eq!(frame_spans(&[0, 15, 30], 40).unwrap(), vec![(0, 15), (15, 30), (30, 40)]);
        assert!(frame_spans(&[0, 15, 15], 40).is_err());
    }

    #[test]
    fn affine_rescaling_keeps_selection() {
        let segs = SegmentSet::from_starts(vec![0, 5, 9, 14], 20).unwrap();
        let scores: Vec<f64> = (0..20).map(|i| ((i * 7) % 11) as f64 / 11.0).collect();
        let scaled: Vec<f64> = scores.iter().map(|s| 2.0 * s + 3.0).collect();
        let a = keyshots_from_segments(&scores, &segs, &identity(20), 20, 0.3).unwrap();
        let b = keyshots_from_segments(&scaled, &segs, &identity(20), 20, 0.3).unwrap();
        assert_eq!(a.selected_segments, b.selected_segments);
    }
}
