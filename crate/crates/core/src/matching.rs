//! Optimal one-to-one assignment between predicted and ground-truth objects.
//!
//! [`hungarian`] solves the square assignment problem with the shortest
//! augmenting path formulation (O(n³)) and then, among all optimal matchings,
//! returns the lexicographically smallest row-to-column assignment so results
//! are reproducible bit-for-bit.
//!
//! [`match_objects`] pads the smaller side with unit-cost dummies: dummy
//! prediction rows for missed ground truth, dummy ground-truth columns for
//! surplus predictions.

use crate::consolidation::pairwise_cost;
use crate::geometry::{BoxN, PointN};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MatchError {
    #[error("cost matrix is empty")]
    Empty,
    #[error("cost matrix is not square: row {row} has {len} entries, expected {expected}")]
    NotSquare {
        row: usize,
        len: usize,
        expected: usize,
    },
    #[error("cost entry ({row}, {col}) = {value} is not finite and non-negative")]
    InvalidEntry { row: usize, col: usize, value: f64 },
    #[error("ground truth must contain at least one object")]
    NoGroundTruth,
    #[error("{what} lists differ in length: {boxes} boxes vs {points} points")]
    LengthMismatch {
        what: &'static str,
        boxes: usize,
        points: usize,
    },
}

/// Square matrix of finite, non-negative costs, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    n: usize,
    entries: Vec<f64>,
}

impl CostMatrix {
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self, MatchError> {
        let n = rows.len();
        if n == 0 {
            return Err(MatchError::Empty);
        }
        let mut entries = Vec::with_capacity(n * n);
        for (r, row) in rows.into_iter().enumerate() {
            if row.len() != n {
                return Err(MatchError::NotSquare {
                    row: r,
                    len: row.len(),
                    expected: n,
                });
            }
            entries.extend(row);
        }
        Self::from_flat(n, entries)
    }

    pub fn from_flat(n: usize, entries: Vec<f64>) -> Result<Self, MatchError> {
        if n == 0 {
            return Err(MatchError::Empty);
        }
        if entries.len() != n * n {
            return Err(MatchError::NotSquare {
                row: entries.len() / n,
                len: entries.len() % n,
                expected: n,
            });
        }
        if let Some(i) = entries.iter().position(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(MatchError::InvalidEntry {
                row: i / n,
                col: i % n,
                value: entries[i],
            });
        }
        Ok(Self { n, entries })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.entries[row * self.n + col]
    }
}

/// A perfect matching over a square cost matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    /// `(row, column)` pairs sorted by row.
    pub pairs: Vec<(usize, usize)>,
    pub total_cost: f64,
    /// Rows that are padded dummy predictions.
    pub dummy_rows: Vec<usize>,
    /// Columns that are padded dummy ground-truth objects.
    pub dummy_cols: Vec<usize>,
}

impl Assignment {
    /// Column assigned to each row.
    pub fn row_to_col(&self) -> Vec<usize> {
        self.pairs.iter().map(|&(_, c)| c).collect()
    }
}

/// Minimum-cost perfect matching; ties resolve to the lexicographically
/// smallest row-to-column assignment.
pub fn hungarian(costs: &CostMatrix) -> Assignment {
    let n = costs.n;
    let (mut row_to_col, u, v) = solve(costs);

    let scale = costs.entries.iter().fold(1.0f64, |m, &c| m.max(c));
    let tol = 1e-10 * scale;
    let tight: Vec<Vec<bool>> = (0..n)
        .map(|r| {
            (0..n)
                .map(|c| costs.get(r, c) - u[r] - v[c] <= tol)
                .collect()
        })
        .collect();
    lexicographic_refine(&tight, &mut row_to_col);

    let pairs: Vec<(usize, usize)> = row_to_col.iter().copied().enumerate().collect();
    let total_cost = pairs.iter().map(|&(r, c)| costs.get(r, c)).sum();
    Assignment {
        pairs,
        total_cost,
        dummy_rows: Vec::new(),
        dummy_cols: Vec::new(),
    }
}

/// Shortest augmenting path Hungarian method. Returns the row-to-column
/// assignment and the optimal dual potentials of rows and columns.
fn solve(costs: &CostMatrix) -> (Vec<usize>, Vec<f64>, Vec<f64>) {
    let n = costs.n;
    // 1-based internals; index 0 is the virtual root column.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut col_owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];

    for row in 1..=n {
        col_owner[0] = row;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = col_owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = costs.get(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[col_owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if col_owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            col_owner[j0] = col_owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut row_to_col = vec![0usize; n];
    for j in 1..=n {
        row_to_col[col_owner[j] - 1] = j - 1;
    }
    (row_to_col, u[1..].to_vec(), v[1..].to_vec())
}

/// Every perfect matching inside the tight-edge graph of an optimal dual is
/// optimal. Starting from one such matching, fix rows in order to the
/// smallest column that still admits a perfect tight matching.
fn lexicographic_refine(tight: &[Vec<bool>], row_to_col: &mut [usize]) {
    let n = row_to_col.len();
    let mut col_to_row = vec![0usize; n];
    for (r, &c) in row_to_col.iter().enumerate() {
        col_to_row[c] = r;
    }
    let mut fixed = vec![false; n];

    for r in 0..n {
        for c in 0..n {
            if !tight[r][c] || fixed[col_to_row[c]] {
                continue;
            }
            if row_to_col[r] == c {
                break;
            }
            // Force (r, c): the displaced row must reach r's old column
            // through an alternating path among unfixed rows.
            let freed = row_to_col[r];
            let displaced = col_to_row[c];
            let mut trial_r2c = row_to_col.to_vec();
            let mut trial_c2r = col_to_row.clone();
            trial_r2c[r] = c;
            trial_c2r[c] = r;
            fixed[r] = true;
            let mut seen = vec![false; n];
            seen[c] = true;
            if augment(
                displaced,
                freed,
                tight,
                &fixed,
                &mut seen,
                &mut trial_r2c,
                &mut trial_c2r,
            ) {
                row_to_col.copy_from_slice(&trial_r2c);
                col_to_row = trial_c2r;
                break;
            }
            fixed[r] = false;
        }
        fixed[r] = true;
    }
}

fn augment(
    row: usize,
    target: usize,
    tight: &[Vec<bool>],
    fixed: &[bool],
    seen: &mut [bool],
    r2c: &mut [usize],
    c2r: &mut [usize],
) -> bool {
    let n = r2c.len();
    for c in 0..n {
        if !tight[row][c] || seen[c] {
            continue;
        }
        seen[c] = true;
        if c == target {
            r2c[row] = c;
            c2r[c] = row;
            return true;
        }
        let next = c2r[c];
        if fixed[next] {
            continue;
        }
        if augment(next, target, tight, fixed, seen, r2c, c2r) {
            r2c[row] = c;
            c2r[c] = row;
            return true;
        }
    }
    false
}

/// One matched pair after padding. `pred` is `None` for a dummy prediction
/// (missed ground truth); `gt` is `None` for a dummy ground truth (surplus
/// prediction). Dummy pairs always cost exactly 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectMatch {
    pub pred: Option<usize>,
    pub gt: Option<usize>,
    pub cost: f64,
}

impl ObjectMatch {
    pub fn is_dummy(&self) -> bool {
        self.pred.is_none() || self.gt.is_none()
    }
}

/// Builds the padded pairwise cost matrix and solves it.
///
/// Padding is symmetric: `N_x - M` dummy rows when predictions are short and
/// `M - N_x` dummy columns when they are surplus, every dummy entry at unit
/// cost. All `max(M, N_x)` pairs are returned.
pub fn match_objects(
    pred_boxes: &[BoxN],
    pred_points: &[PointN],
    gt_boxes: &[BoxN],
    gt_points: &[PointN],
) -> Result<(Assignment, Vec<ObjectMatch>), MatchError> {
    if pred_boxes.len() != pred_points.len() {
        return Err(MatchError::LengthMismatch {
            what: "prediction",
            boxes: pred_boxes.len(),
            points: pred_points.len(),
        });
    }
    if gt_boxes.len() != gt_points.len() {
        return Err(MatchError::LengthMismatch {
            what: "ground-truth",
            boxes: gt_boxes.len(),
            points: gt_points.len(),
        });
    }
    let m = pred_boxes.len();
    let nx = gt_boxes.len();
    if nx == 0 {
        return Err(MatchError::NoGroundTruth);
    }
    let n = m.max(nx);
    let mut entries = vec![1.0f64; n * n];
    for r in 0..m {
        for c in 0..nx {
            entries[r * n + c] =
                pairwise_cost(&pred_boxes[r], &pred_points[r], &gt_boxes[c], &gt_points[c]);
        }
    }
    let matrix = CostMatrix::from_flat(n, entries)?;
    let mut assignment = hungarian(&matrix);
    assignment.dummy_rows = (m..n).collect();
    assignment.dummy_cols = (nx..n).collect();

    let matches = assignment
        .pairs
        .iter()
        .map(|&(r, c)| ObjectMatch {
            pred: (r < m).then_some(r),
            gt: (c < nx).then_some(c),
            cost: matrix.get(r, c),
        })
        .collect();
    Ok((assignment, matches))
}
