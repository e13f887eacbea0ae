//! Per-object dominance from the final spatial graphs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dominance {
    /// `[T][N]` min-max normalised edge sums.
    pub scores: Vec<Vec<f64>>,
    /// Frames whose sums were all equal (scores set to 0.5).
    pub degenerate_frames: Vec<usize>,
}

/// `d_{t,n} = Σ_{i≠n} s_{t,n,i}` normalised to `[0,1]` within each frame.
pub fn dominance(s_final: &Tensor) -> Result<Dominance> {
    let (t, n, m) = s_final.dims3()?;
    if n != m {
        return Err(Error::dim("dominance", s_final.shape(), &[t, n, n]));
    }
    let data = s_final.data();
    let mut scores = Vec::with_capacity(t);
    let mut degenerate_frames = Vec::new();
    for f in 0..t {
        let block = &data[f * n * n..(f + 1) * n * n];
        let sums: Vec<f64> = (0..n)
            .map(|r| (0..n).filter(|&c| c != r).map(|c| block[r * n + c]).sum())
            .collect();
        let lo = sums.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = sums.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if hi > lo {
            scores.push(sums.iter().map(|s| (s - lo) / (hi - lo)).collect());
        } else {
            degenerate_frames.push(f);
            scores.push(vec![0.5; n]);
        }
    }
    Ok(Dominance {
        scores,
        degenerate_frames,
    })
}
