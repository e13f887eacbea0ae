//! 0/1 knapsack over segments.

/// Relative tolerance under which two totals count as equal.
const TIE_TOL: f64 = 1e-9;

fn better_or_equal(a: f64, b: f64) -> bool {
    a >= b - TIE_TOL * a.abs().max(b.abs()).max(1.0)
}

/// Maximises `Σ values` subject to `Σ weights ≤ capacity`.
///
/// Among optimal subsets the one taking lower indices is chosen. Returns the
/// chosen indices, ascending.
pub fn knapsack(values: &[f64], weights: &[usize], capacity: usize) -> Vec<usize> {
    let k = values.len();
    assert_eq!(k, weights.len(), "values and weights must align");
    // best[i][c]: optimum over items i.. with capacity c.
    let mut best = vec![vec![0.0f64; capacity + 1]; k + 1];
    for i in (0..k).rev() {
        for c in 0..=capacity {
            let skip = best[i + 1][c];
            best[i][c] = if weights[i] <= c {
                let take = values[i] + best[i + 1][c - weights[i]];
                take.max(skip)
            } else {
                skip
            };
        }
    }
    let mut chosen = Vec::new();
    let mut c = capacity;
    for i in 0..k {
        if weights[i] <= c {
            let take = values[i] + best[i + 1][c - weights[i]];
            if better_or_equal(take, best[i + 1][c]) {
                chosen.push(i);
                c -= weights[i];
            }
        }
    }
    chosen
}
