//! Independent oracles shared by the property and acceptance targets.
#![allow(dead_code)]

use videograph::eval::{KtsConfig, SegmentSet};
use videograph::Tensor;

/// Best total value over every subset that fits, by enumeration.
pub fn brute_knapsack(values: &[f64], weights: &[usize], capacity: usize) -> f64 {
    let k = values.len();
    let mut best = 0.0f64;
    for mask in 0u32..(1 << k) {
        let (mut w, mut v) = (0usize, 0.0);
        for i in 0..k {
            if mask >> i & 1 == 1 {
                w += weights[i];
                v += values[i];
            }
        }
        if w <= capacity && v > best {
            best = v;
        }
    }
    best
}

/// Within-segment scatter computed directly from the rows.
pub fn scatter(x: &Tensor, a: usize, b: usize) -> f64 {
    let d = x.last_dim();
    let n = (b - a) as f64;
    let mut total = 0.0;
    for j in 0..d {
        let mean = (a..b).map(|t| x.at2(t, j)).sum::<f64>() / n;
        total += (a..b).map(|t| (x.at2(t, j) - mean).powi(2)).sum::<f64>();
    }
    total
}

/// Minimum of `Σ scatter + penalty·m` over every segmentation obeying the
/// length and count limits.
pub fn exhaustive_kts(x: &Tensor, cfg: &KtsConfig) -> f64 {
    let t = x.shape()[0];
    let min_len = cfg.min_len.max(1);
    if t < 2 * min_len {
        return scatter(x, 0, t) + cfg.penalty;
    }
    fn walk(x: &Tensor, start: usize, t: usize, min_len: usize, left: usize, pen: f64, acc: f64, best: &mut f64) {
        if start == t {
            *best = best.min(acc);
            return;
        }
        if left == 0 {
            return;
        }
        for end in start + min_len..=t {
            if end < t && t - end < min_len {
                continue;
            }
            walk(x, end, t, min_len, left - 1, pen, acc + scatter(x, start, end) + pen, best);
        }
    }
    let mut best = f64::INFINITY;
    walk(x, 0, t, min_len, cfg.max_segments, cfg.penalty, 0.0, &mut best);
    best
}

/// Objective of a segmentation, evaluated with [`scatter`].
pub fn segmentation_cost(x: &Tensor, segs: &SegmentSet, penalty: f64) -> f64 {
    segs.ranges().iter().map(|&(a, b)| scatter(x, a, b)).sum::<f64>() + penalty * segs.count() as f64
}

/// Kendall τ-b by visiting every pair.
pub fn pair_tau(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len();
    let (mut conc, mut disc, mut ta, mut tb) = (0i64, 0i64, 0i64, 0i64);
    for i in 0..n {
        for j in i + 1..n {
            let da = a[i] - a[j];
            let db = b[i] - b[j];
            if da == 0.0 {
                ta += 1;
            }
            if db == 0.0 {
                tb += 1;
            }
            if da != 0.0 && db != 0.0 {
                if (da > 0.0) == (db > 0.0) {
                    conc += 1;
                } else {
                    disc += 1;
                }
            }
        }
    }
    let n0 = (n * (n - 1) / 2) as i64;
    let denom = (((n0 - ta) * (n0 - tb)) as f64).sqrt();
    if denom == 0.0 {
        0.0
    } else {
        (conc - disc) as f64 / denom
    }
}

/// Mid-ranks by counting smaller and equal entries.
pub fn count_ranks(v: &[f64]) -> Vec<f64> {
    v.iter()
        .map(|&x| {
            let less = v.iter().filter(|&&y| y < x).count() as f64;
            let equal = v.iter().filter(|&&y| y == x).count() as f64;
            less + (equal + 1.0) / 2.0
        })
        .collect()
}

/// Spearman ρ as the Pearson correlation of count-based mid-ranks.
pub fn rank_pearson(a: &[f64], b: &[f64]) -> f64 {
    let (ra, rb) = (count_ranks(a), count_ranks(b));
    let n = ra.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    if va == 0.0 || vb == 0.0 {
        0.0
    } else {
        cov / (va * vb).sqrt()
    }
}

fn pack(bits: &[u8]) -> Vec<u64> {
    let mut words = vec![0u64; bits.len().div_ceil(64)];
    for (i, &b) in bits.iter().enumerate() {
        if b != 0 {
            words[i / 64] |= 1 << (i % 64);
        }
    }
    words
}

/// Precision, recall and F from packed-word popcounts.
pub fn bitcount_prf(pred: &[u8], gt: &[u8]) -> (f64, f64, f64) {
    let (p, g) = (pack(pred), pack(gt));
    let overlap: u32 = p.iter().zip(&g).map(|(a, b)| (a & b).count_ones()).sum();
    let np: u32 = p.iter().map(|w| w.count_ones()).sum();
    let ng: u32 = g.iter().map(|w| w.count_ones()).sum();
    let prec = if np > 0 { overlap as f64 / np as f64 } else { 0.0 };
    let rec = if ng > 0 { overlap as f64 / ng as f64 } else { 0.0 };
    let f = if prec + rec > 0.0 { 2.0 * prec * rec / (prec + rec) } else { 0.0 };
    (prec, rec, f)
}
