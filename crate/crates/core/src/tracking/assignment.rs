//! Rectangular linear assignment (Hungarian method with potentials).

use nalgebra::DMatrix;

/// Association cost at or above which two boxes may never be paired.
pub const FORBIDDEN_COST: f64 = 2.0;
const FORBIDDEN_EPS: f64 = 1e-12;

/// Minimum-cost one-to-one assignment of `min(rows, cols)` pairs.
///
/// Uses the shortest-augmenting-path form of the Hungarian algorithm,
/// `O(n²m)` for `n ≤ m`. Ties resolve to the lowest row, then lowest column.
/// Returned pairs are sorted by row.
pub fn solve_assignment(cost: &DMatrix<f64>) -> Vec<(usize, usize)> {
    let (rows, cols) = cost.shape();
    if rows == 0 || cols == 0 {
        return Vec::new();
    }
    if rows > cols {
        let mut pairs: Vec<_> = solve_assignment(&cost.transpose())
            .into_iter()
            .map(|(c, r)| (r, c))
            .collect();
        pairs.sort_unstable();
        return pairs;
    }

    let (n, m) = (rows, cols);
    // 1-based with a virtual column 0, following the classic formulation.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];

    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1, j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut pairs: Vec<(usize, usize)> = (1..=m)
        .filter(|&j| owner[j] != 0)
        .map(|j| (owner[j] - 1, j - 1))
        .collect();
    pairs.sort_unstable();
    pairs
}

/// Optimal assignment with forbidden pairs (cost ≥ 2) removed.
pub fn assign(cost: &DMatrix<f64>) -> Vec<(usize, usize)> {
    solve_assignment(cost)
        .into_iter()
        .filter(|&(r, c)| cost[(r, c)] < FORBIDDEN_COST - FORBIDDEN_EPS)
        .collect()
}
