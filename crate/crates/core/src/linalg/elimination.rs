use super::{LinalgError, Matrix, Result};

/// Relative pivot threshold: a candidate pivot counts as zero when its
/// magnitude is at most this times the largest initial `|entry|` of the lhs.
pub const DEFAULT_PIVOT_TOL: f64 = 1e-10;

/// Row-echelon reduction of an augmented system `[lhs | rhs]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EliminationResult {
    /// Independent rows left after elimination, `rank x lhs.cols()`.
    pub reduced_lhs: Matrix,
    /// Matching right-hand side rows, `rank x rhs.cols()`.
    pub reduced_rhs: Matrix,
    pub rank: usize,
    /// Column of the leading entry of each reduced row.
    pub pivot_cols: Vec<usize>,
    pub dropped_rows: usize,
}

/// Forward elimination with partial pivoting on `[lhs | rhs]`.
///
/// Pivot selection only looks at the lhs, so the row operations are the same
/// whatever the rhs holds. Rows that end up with no lhs entry above
/// `pivot_tol * max|lhs|` are dropped; if such a row still carries a rhs
/// residual above `sqrt(pivot_tol) * (1 + max|rhs|)` the system has no
/// solution and [`LinalgError::Inconsistent`] is returned.
///
/// Row updates are applied across the whole augmented row, so every reduced
/// row is an exact (up to rounding) linear combination of input rows.
pub fn gaussian_eliminate(lhs: &Matrix, rhs: &Matrix, pivot_tol: f64) -> Result<EliminationResult> {
    if lhs.rows() != rhs.rows() {
        return Err(LinalgError::Shape {
            op: "gaussian_eliminate",
            left: lhs.shape(),
            right: rhs.shape(),
        });
    }
    if !(pivot_tol > 0.0 && pivot_tol.is_finite()) {
        return Err(LinalgError::InvalidParameter(format!(
            "pivot_tol must be positive, got {pivot_tol}"
        )));
    }

    let rows = lhs.rows();
    let m = lhs.cols();
    let n = rhs.cols();
    let width = m + n;

    let mut work = Vec::with_capacity(rows * width);
    for i in 0..rows {
        work.extend_from_slice(lhs.row(i));
        work.extend_from_slice(rhs.row(i));
    }

    let threshold = pivot_tol * lhs.max_abs();
    let mut pivot_cols = Vec::new();
    let mut r = 0;
    for c in 0..m {
        if r == rows {
            break;
        }
        let (p, best) = (r..rows)
            .map(|i| (i, work[i * width + c].abs()))
            .fold((r, -1.0), |acc, x| if x.1 > acc.1 { x } else { acc });
        if best <= threshold || best == 0.0 {
            continue;
        }
        if p != r {
            for j in 0..width {
                work.swap(p * width + j, r * width + j);
            }
        }
        let (head, tail) = work.split_at_mut((r + 1) * width);
        let pivot_row = &head[r * width..];
        let pivot = pivot_row[c];
        for row in tail.chunks_exact_mut(width) {
            let f = row[c] / pivot;
            if f != 0.0 {
                for (x, &y) in row.iter_mut().zip(pivot_row) {
                    *x -= f * y;
                }
            }
            row[c] = 0.0;
        }
        pivot_cols.push(c);
        r += 1;
    }

    let rank = r;
    let rhs_tol = pivot_tol.sqrt() * (1.0 + rhs.max_abs());
    let residual = work[rank * width..]
        .chunks_exact(width)
        .flat_map(|row| row[m..].iter())
        .fold(0.0f64, |acc, x| acc.max(x.abs()));
    if residual > rhs_tol {
        return Err(LinalgError::Inconsistent {
            residual,
            tolerance: rhs_tol,
        });
    }

    let mut reduced_lhs = Matrix::zeros(rank, m);
    let mut reduced_rhs = Matrix::zeros(rank, n);
    for i in 0..rank {
        let row = &work[i * width..(i + 1) * width];
        reduced_lhs.row_mut(i).copy_from_slice(&row[..m]);
        reduced_rhs.row_mut(i).copy_from_slice(&row[m..]);
    }
    reduced_lhs.check_finite()?;
    reduced_rhs.check_finite()?;

    Ok(EliminationResult {
        reduced_lhs,
        reduced_rhs,
        rank,
        pivot_cols,
        dropped_rows: rows - rank,
    })
}
