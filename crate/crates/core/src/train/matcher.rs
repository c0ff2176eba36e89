//! Bipartite matching between predictions and ground-truth masks.

use crate::error::{invalid, Result};

/// Minimum-cost assignment of every row to a distinct column.
///
/// `cost` is row-major `rows x cols` with `rows <= cols`. Returns the
/// column chosen for each row. O(rows^2 * cols) shortest augmenting paths
/// with potentials.
pub fn hungarian(cost: &[f64], rows: usize, cols: usize) -> Result<Vec<usize>> {
    if cost.len() != rows * cols {
        return invalid("hungarian", format!("{} costs for {rows}x{cols}", cost.len()));
    }
    if rows > cols {
        return invalid("hungarian", format!("{rows} targets but only {cols} predictions"));
    }
    if cost.iter().any(|c| !c.is_finite()) {
        return invalid("hungarian", "non-finite cost");
    }
    if rows == 0 {
        return Ok(Vec::new());
    }
    // 1-based arrays; column 0 is the virtual start.
    let mut u = vec![0.0; rows + 1];
    let mut v = vec![0.0; cols + 1];
    let mut owner = vec![0usize; cols + 1];
    let mut way = vec![0usize; cols + 1];
    for i in 1..=rows {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; cols + 1];
        let mut used = vec![false; cols + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=cols {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1) * cols + (j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=cols {
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
    let mut assignment = vec![0; rows];
    for j in 1..=cols {
        if owner[j] != 0 {
            assignment[owner[j] - 1] = j - 1;
        }
    }
    Ok(assignment)
}

pub fn assignment_cost(cost: &[f64], cols: usize, assignment: &[usize]) -> f64 {
    assignment.iter().enumerate().map(|(r, &c)| cost[r * cols + c]).sum()
}

/// Exhaustive minimum over all injective row-to-column maps. Exponential;
/// for checking small problems.
pub fn brute_force_assignment(cost: &[f64], rows: usize, cols: usize) -> (Vec<usize>, f64) {
    #[allow(clippy::too_many_arguments)]
    fn go(
        cost: &[f64],
        rows: usize,
        cols: usize,
        row: usize,
        used: &mut [bool],
        cur: &mut Vec<usize>,
        acc: f64,
        best: &mut (Vec<usize>, f64),
    ) {
        if row == rows {
            if acc < best.1 {
                *best = (cur.clone(), acc);
            }
            return;
        }
        for c in 0..cols {
            if !used[c] {
                used[c] = true;
                cur.push(c);
                go(cost, rows, cols, row + 1, used, cur, acc + cost[row * cols + c], best);
                cur.pop();
                used[c] = false;
            }
        }
    }
    let mut best = (Vec::new(), f64::INFINITY);
    go(cost, rows, cols, 0, &mut vec![false; cols], &mut Vec::new(), 0.0, &mut best);
    best
}
