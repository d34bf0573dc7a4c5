//! Minimum-cost rectangular assignment (Kuhn-Munkres with potentials).
//!
//! Among all optimal assignments the lexicographically smallest one is
//! returned, comparing the column chosen for row 0, then row 1, and so on,
//! with "unassigned" ordered after every column.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    /// `(row, col)` pairs in increasing row order; `min(n, m)` of them.
    pub pairs: Vec<(usize, usize)>,
    pub cost: f64,
}

/// Relative slack when deciding whether a partial choice still reaches the
/// optimum. Only breaks ties; genuinely different costs are far apart.
const TIE_TOL: f64 = 1e-10;

pub fn hungarian(cost: &[Vec<f64>]) -> Result<Assignment> {
    let n = cost.len();
    let m = cost.first().map_or(0, Vec::len);
    if n == 0 || m == 0 {
        return Err(Error::EmptyMatrix);
    }
    if cost.iter().any(|r| r.len() != m) {
        return Err(Error::shape("hungarian", "ragged cost matrix"));
    }
    if cost.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("cost matrix"));
    }

    let rows: Vec<usize> = (0..n).collect();
    let cols: Vec<usize> = (0..m).collect();
    let optimum = min_cost(cost, &rows, &cols);
    let tol = TIE_TOL * optimum.abs().max(1.0);

    // Greedy lexicographic refinement: fix rows in order, taking the smallest
    // column (or "unassigned") that keeps the remaining problem optimal.
    let mut pairs = Vec::with_capacity(n.min(m));
    let mut free_cols = cols;
    let mut spent = 0.0;
    for r in 0..n {
        let rest: Vec<usize> = (r + 1..n).collect();
        let need = n.min(m) - pairs.len();
        let mut chosen = None;
        for (idx, &c) in free_cols.iter().enumerate() {
            let remaining: Vec<usize> = free_cols.iter().copied().filter(|&x| x != c).collect();
            if need - 1 != rest.len().min(remaining.len()) {
                continue;
            }
            let total = spent + cost[r][c] + min_cost(cost, &rest, &remaining);
            if total <= optimum + tol {
                chosen = Some(idx);
                break;
            }
        }
        match chosen {
            Some(idx) => {
                let c = free_cols.remove(idx);
                spent += cost[r][c];
                pairs.push((r, c));
            }
            // leaving r unassigned is only possible when rows outnumber columns
            None => debug_assert!(need <= rest.len()),
        }
    }
    let cost_total = pairs.iter().map(|&(r, c)| cost[r][c]).sum();
    Ok(Assignment {
        pairs,
        cost: cost_total,
    })
}

/// Optimal cost of assigning `min(|rows|, |cols|)` pairs within the
/// sub-matrix. Zero when either side is empty.
fn min_cost(cost: &[Vec<f64>], rows: &[usize], cols: &[usize]) -> f64 {
    if rows.is_empty() || cols.is_empty() {
        return 0.0;
    }
    if rows.len() <= cols.len() {
        let sub: Vec<Vec<f64>> = rows
            .iter()
            .map(|&r| cols.iter().map(|&c| cost[r][c]).collect())
            .collect();
        solve(&sub).1
    } else {
        let sub: Vec<Vec<f64>> = cols
            .iter()
            .map(|&c| rows.iter().map(|&r| cost[r][c]).collect())
            .collect();
        solve(&sub).1
    }
}

/// Shortest-augmenting-path Hungarian for `n <= m`. Returns the column of
/// every row and the total cost.
fn solve(a: &[Vec<f64>]) -> (Vec<usize>, f64) {
    let n = a.len();
    let m = a[0].len();
    debug_assert!(n <= m);
    // 1-based potentials; column 0 is the virtual start.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = a[i0 - 1][j - 1] - u[i0] - v[j];
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
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut row_col = vec![0usize; n];
    for j in 1..=m {
        if p[j] != 0 {
            row_col[p[j] - 1] = j - 1;
        }
    }
    let total = row_col.iter().enumerate().map(|(r, &c)| a[r][c]).sum();
    (row_col, total)
}
