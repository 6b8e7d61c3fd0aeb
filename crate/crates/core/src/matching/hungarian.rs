use clipseg_tensor::Tensor;

use crate::error::{CoreError, Result};

/// Row/column pairs of a minimum-cost matching.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Assignment {
    /// `(row, column)`, sorted by row.
    pub pairs: Vec<(usize, usize)>,
}

impl Assignment {
    pub fn total(&self, cost: &Tensor) -> f64 {
        self.pairs.iter().map(|&(r, c)| cost.get(&[r, c])).sum()
    }

    pub fn column_of(&self, row: usize) -> Option<usize> {
        self.pairs.iter().find(|p| p.0 == row).map(|p| p.1)
    }

    pub fn row_of(&self, col: usize) -> Option<usize> {
        self.pairs.iter().find(|p| p.1 == col).map(|p| p.0)
    }
}

/// Minimum-cost assignment of `min(R, S)` pairs for an `[R, S]` cost matrix.
///
/// Shortest augmenting paths with row/column potentials, one row at a time;
/// a tall matrix is solved on its transpose.
pub fn hungarian(cost: &Tensor) -> Result<Assignment> {
    let s = cost.shape();
    if s.len() != 2 {
        return Err(CoreError::Shape(format!("cost matrix must be 2-D, got {s:?}")));
    }
    let (rows, cols) = (s[0], s[1]);
    for r in 0..rows {
        for c in 0..cols {
            let v = cost.get(&[r, c]);
            if v.is_nan() {
                return Err(CoreError::NanCost(r, c));
            }
            if !v.is_finite() {
                return Err(CoreError::Assignment(format!("cost ({r}, {c}) is infinite")));
            }
        }
    }
    if rows == 0 || cols == 0 {
        return Ok(Assignment::default());
    }
    let transposed = rows > cols;
    let (n, m) = if transposed { (cols, rows) } else { (rows, cols) };
    let at = |i: usize, j: usize| {
        if transposed {
            cost.get(&[j, i])
        } else {
            cost.get(&[i, j])
        }
    };
    // 1-based: row 0 / column 0 are the virtual source
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = at(i0 - 1, j - 1) - u[i0] - v[j];
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
        .map(|j| {
            let (i, j) = (owner[j] - 1, j - 1);
            if transposed {
                (j, i)
            } else {
                (i, j)
            }
        })
        .collect();
    pairs.sort_unstable();
    Ok(Assignment { pairs })
}
