//! Rank correlations with tie handling.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A correlation value; `degenerate` marks an undefined result (reported as 0).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub value: f64,
    pub degenerate: bool,
}

impl Correlation {
    fn undefined() -> Self {
        Self {
            value: 0.0,
            degenerate: true,
        }
    }
}

fn check(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::dim("rank correlation", &[a.len()], &[b.len()]));
    }
    if a.len() < 2 {
        return Err(Error::Domain {
            op: "rank correlation",
            msg: "need at least two observations".into(),
        });
    }
    if a.iter().chain(b).any(|v| v.is_nan()) {
        return Err(Error::Domain {
            op: "rank correlation",
            msg: "NaN input".into(),
        });
    }
    Ok(())
}

/// Number of tied pairs among runs of equal values in a sorted slice.
fn tied_pairs<T: PartialEq>(sorted: &[T]) -> u64 {
    let mut total = 0u64;
    let mut run = 1u64;
    for i in 1..=sorted.len() {
        if i < sorted.len() && sorted[i] == sorted[i - 1] {
            run += 1;
        } else {
            total += run * (run - 1) / 2;
            run = 1;
        }
    }
    total
}

/// Merge sort counting inversions (pairs out of order, strict).
fn sort_count_swaps(v: &mut [f64], buf: &mut Vec<f64>) -> u64 {
    let n = v.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut swaps = sort_count_swaps(&mut v[..mid], buf) + sort_count_swaps(&mut v[mid..], buf);
    buf.clear();
    let (mut i, mut j) = (0, mid);
    while i < mid && j < n {
        if v[j] < v[i] {
            swaps += (mid - i) as u64;
            buf.push(v[j]);
            j += 1;
        } else {
            buf.push(v[i]);
            i += 1;
        }
    }
    buf.extend_from_slice(&v[i..mid]);
    buf.extend_from_slice(&v[j..n]);
    v.copy_from_slice(buf);
    swaps
}

/// Kendall τ-b in O(n log n).
pub fn kendall_tau(a: &[f64], b: &[f64]) -> Result<Correlation> {
    check(a, b)?;
    let n = a.len();
    let mut pairs: Vec<(f64, f64)> = a.iter().cloned().zip(b.iter().cloned()).collect();
    pairs.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.total_cmp(&y.1)));
    let ties_a = tied_pairs(&pairs.iter().map(|p| p.0).collect::<Vec<_>>());
    let ties_ab = tied_pairs(&pairs);
    let mut bs: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let mut buf = Vec::with_capacity(n);
    let swaps = sort_count_swaps(&mut bs, &mut buf);
    let ties_b = tied_pairs(&bs);
    let n0 = (n * (n - 1) / 2) as u64;
    let denom = ((n0 - ties_a) as f64) * ((n0 - ties_b) as f64);
    if denom <= 0.0 {
        return Ok(Correlation::undefined());
    }
    let num = n0 as f64 - ties_a as f64 - ties_b as f64 + ties_ab as f64 - 2.0 * swaps as f64;
    Ok(Correlation {
        value: num / denom.sqrt(),
        degenerate: false,
    })
}

/// 1-based ranks with ties given their average rank.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            ranks[idx[k]] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Pearson correlation; undefined when either input is constant.
pub fn pearson(a: &[f64], b: &[f64]) -> Correlation {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa <= 0.0 || sbb <= 0.0 {
        return Correlation::undefined();
    }
    Correlation {
        value: (sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0),
        degenerate: false,
    }
}

/// Spearman ρ: Pearson correlation of average ranks.
pub fn spearman_rho(a: &[f64], b: &[f64]) -> Result<Correlation> {
    check(a, b)?;
    Ok(pearson(&average_ranks(a), &average_ranks(b)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_and_reversed() {
        let a = [0.1, 0.5, 0.3, 0.9, 0.7];
        let r: Vec<f64> = a.iter().map(|v| -v).collect();
        assert_eq!(kendall_tau(&a, &a).unwrap().value, 1.0);
        assert!((spearman_rho(&a, &a).unwrap().value - 1.0).abs() <= 1e-12);
        assert_eq!(kendall_tau(&a, &r).unwrap().value, -1.0);
        assert!((spearman_rho(&a, &r).unwrap().value + 1.0).abs() <= 1e-12);
    }

    #[test]
    fn constant_input_is_flagged() {
        let c = kendall_tau(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).unwrap();
        assert!(c.degenerate && c.value == 0.0);
        let c = spearman_rho(&[1.0, 2.0, 3.0], &[4.0, 4.0, 4.0]).unwrap();
        assert!(c.degenerate && c.value == 0.0);
        assert!(kendall_tau(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn tie_corrected_small_case() {
        // a = [1,1,2,3], b = [1,2,2,3]: concordant 4, discordant 0, ties_a 1, ties_b 1.
        let t = kendall_tau(&[1.0, 1.0, 2.0, 3.0], &[1.0, 2.0, 2.0, 3.0]).unwrap();
        assert!((t.value - 4.0 / 5.0).abs() <= 1e-12);
    }

    #[test]
    fn average_ranks_handle_ties() {
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }
}
