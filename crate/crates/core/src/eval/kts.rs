//! Exact change-point segmentation minimising within-segment scatter.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Disjoint, contiguous segments covering `[0, len)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SegmentSet {
    /// Start index of every segment, ascending, first is 0.
    pub starts: Vec<usize>,
    pub len: usize,
}

impl SegmentSet {
    pub fn single(len: usize) -> Self {
        Self { starts: vec![0], len }
    }

    /// Builds a set from its start indices.
    pub fn from_starts(starts: Vec<usize>, len: usize) -> Result<Self> {
        let ok = starts.first() == Some(&0) && starts.windows(2).all(|w| w[0] < w[1]) && starts.last().is_some_and(|&s| s < len);
        if !ok {
            return Err(Error::Domain {
                op: "segments",
                msg: format!("invalid segment starts {starts:?} for length {len}"),
            });
        }
        Ok(Self { starts, len })
    }

    pub fn count(&self) -> usize {
        self.starts.len()
    }

    /// Half-open `(start, end)` ranges.
    pub fn ranges(&self) -> Vec<(usize, usize)> {
        self.starts
            .iter()
            .enumerate()
            .map(|(i, &s)| (s, self.starts.get(i + 1).copied().unwrap_or(self.len)))
            .collect()
    }

    /// Interior boundaries (every start except 0).
    pub fn boundaries(&self) -> &[usize] {
        &self.starts[1..]
    }

    /// Mean of `values` over each segment.
    pub fn means(&self, values: &[f64]) -> Vec<f64> {
        self.ranges()
            .iter()
            .map(|&(a, b)| values[a..b].iter().sum::<f64>() / (b - a) as f64)
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KtsConfig {
    pub max_segments: usize,
    pub penalty: f64,
    pub min_len: usize,
}

/// Prefix sums giving the scatter `Σ‖x − mean‖²` of any range in O(d).
pub struct Scatter {
    d: usize,
    sum: Vec<f64>,
    sq: Vec<f64>,
}

impl Scatter {
    pub fn new(x: &Tensor) -> Result<Self> {
        let (t, d) = x.dims2()?;
        let mut sum = vec![0.0; (t + 1) * d];
        let mut sq = vec![0.0; t + 1];
        for i in 0..t {
            let row = x.row(i);
            for k in 0..d {
                sum[(i + 1) * d + k] = sum[i * d + k] + row[k];
            }
            sq[i + 1] = sq[i] + row.iter().map(|v| v * v).sum::<f64>();
        }
        Ok(Self { d, sum, sq })
    }

    /// Scatter of rows `a..b`.
    pub fn cost(&self, a: usize, b: usize) -> f64 {
        let n = (b - a) as f64;
        let mut s2 = 0.0;
        for k in 0..self.d {
            let s = self.sum[b * self.d + k] - self.sum[a * self.d + k];
            s2 += s * s;
        }
        (self.sq[b] - self.sq[a] - s2 / n).max(0.0)
    }
}

/// Total objective `Σ scatter + penalty·#segments` of a segmentation.
pub fn objective(x: &Tensor, segs: &SegmentSet, penalty: f64) -> Result<f64> {
    let sc = Scatter::new(x)?;
    Ok(segs.ranges().iter().map(|&(a, b)| sc.cost(a, b)).sum::<f64>() + penalty * segs.count() as f64)
}

/// Exact DP over all placements with at most `max_segments` segments, each at
/// least `min_len` long. A sequence shorter than `min_len` is one segment.
/// Ties prefer fewer segments, then earlier boundaries.
pub fn kts_segment(x: &Tensor, cfg: &KtsConfig) -> Result<SegmentSet> {
    if cfg.max_segments < 1 {
        return Err(Error::Config("max_segments must be >= 1".into()));
    }
    if !(cfg.penalty.is_finite() && cfg.penalty >= 0.0) {
        return Err(Error::Config(format!("penalty must be finite and >= 0, got {}", cfg.penalty)));
    }
    let (t, _) = x.dims2()?;
    if t == 0 {
        return Err(Error::Config("cannot segment an empty sequence".into()));
    }
    let min_len = cfg.min_len.max(1);
    if t < 2 * min_len {
        return Ok(SegmentSet::single(t));
    }
    let sc = Scatter::new(x)?;
    let kmax = cfg.max_segments.min(t / min_len);
    let inf = f64::INFINITY;
    // cost[k][e]: best scatter of rows 0..e split into k segments.
    let mut cost = vec![vec![inf; t + 1]; kmax + 1];
    let mut arg = vec![vec![0usize; t + 1]; kmax + 1];
    cost[0][0] = 0.0;
    for k in 1..=kmax {
        for e in k * min_len..=t {
            let mut best = inf;
            let mut best_s = 0;
            let lo = (k - 1) * min_len;
            for s in lo..=e - min_len {
                let prev = cost[k - 1][s];
                if prev == inf {
                    continue;
                }
                let c = prev + sc.cost(s, e);
                if c < best {
                    best = c;
                    best_s = s;
                }
            }
            cost[k][e] = best;
            arg[k][e] = best_s;
        }
    }
    let mut best_k = 1;
    let mut best = cost[1][t] + cfg.penalty;
    for k in 2..=kmax {
        let v = cost[k][t] + cfg.penalty * k as f64;
        if v < best {
            best = v;
            best_k = k;
        }
    }
    let mut starts = Vec::with_capacity(best_k);
    let mut e = t;
    for k in (1..=best_k).rev() {
        let s = arg[k][e];
        starts.push(s);
        e = s;
    }
    starts.reverse();
    SegmentSet::from_starts(starts, t)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn column(v: &[f64]) -> Tensor {
        Tensor::new(&[v.len(), 1], v.to_vec()).unwrap()
    }

    #[test]
    fn piecewise_constant_recovers_boundaries() {
        let mut v = vec![0.0; 6];
        v.extend(vec![5.0; 5]);
        v.extend(vec![-3.0; 7]);
        let cfg = KtsConfig {
            max_segments: 6,
            penalty: 0.5,
            min_len: 2,
        };
        let s = kts_segment(&column(&v), &cfg).unwrap();
        assert_eq!(s.boundaries(), &[6, 11]);
    }

    #[test]
    fn constant_signal_is_one_segment() {
        for pen in [1e-9, 0.1, 10.0] {
            let cfg = KtsConfig {
                max_segments: 5,
                penalty: pen,
                min_len: 2,
            };
            let s = kts_segment(&column(&[2.0; 12]), &cfg).unwrap();
            assert_eq!(s.count(), 1);
        }
    }

    #[test]
    fn zero_max_segments_rejected() {
        let cfg = KtsConfig {
            max_segments: 0,
            penalty: 1.0,
            min_len: 2,
        };
        assert!(matches!(kts_segment(&column(&[1.0, 2.0]), &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn scatter_matches_direct() {
        let x = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, -1.0], vec![0.5, 0.5], vec![2.0, 2.0]]);
        let sc = Scatter::new(&x).unwrap();
        let (a, b) = (1, 4);
        let n = (b - a) as f64;
        let mean: Vec<f64> = (0..2).map(|k| (a..b).map(|i| x.at2(i, k)).sum::<f64>() / n).collect();
        let direct: f64 = (a..b).map(|i| (0..2).map(|k| (x.at2(i, k) - mean[k]).powi(2)).sum::<f64>()).sum();
        assert!((sc.cost(a, b) - direct).abs() <= 1e-12);
    }

    #[test]
    fn ranges_and_means() {
        let s = SegmentSet::from_starts(vec![0, 2, 5], 7).unwrap();
        assert_eq!(s.ranges(), vec![(0, 2), (2, 5), (5, 7)]);
        assert_eq!(s.means(&[1.0, 3.0, 0.0, 0.0, 3.0, 4.0, 4.0]), vec![2.0, 1.0, 4.0]);
        assert!(SegmentSet::from_starts(vec![1, 3], 5).is_err());
    }
}
