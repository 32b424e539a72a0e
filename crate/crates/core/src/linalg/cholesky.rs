use super::{matmul, LinalgError, Matrix, Result};

/// Lower-triangular Cholesky factor `L` with `g = L Lᵀ`.
#[derive(Debug, Clone)]
pub struct Cholesky {
    factor: Matrix,
}

/// Factorizes a symmetric positive-definite matrix.
///
/// Symmetry is required to `‖g − gᵀ‖∞ ≤ 1e-10 ‖g‖∞`; only the lower triangle
/// is read. Fails on the first pivot that is not strictly positive.
pub fn cholesky(g: &Matrix) -> Result<Cholesky> {
    let n = g.rows();
    if g.cols() != n {
        return Err(LinalgError::NotSquare { rows: n, cols: g.cols() });
    }
    let asymmetry = g.sub(&g.transpose())?.norm_inf();
    let limit = 1e-10 * g.norm_inf();
    if asymmetry > limit {
        return Err(LinalgError::NotSymmetric { asymmetry, limit });
    }

    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut d = g.get(j, j);
        for k in 0..j {
            d -= l.get(j, k) * l.get(j, k);
        }
        if !(d > 0.0) {
            return Err(LinalgError::NotPositiveDefinite { index: j, pivot: d });
        }
        let ljj = d.sqrt();
        l.set(j, j, ljj);
        for i in j + 1..n {
            let mut s = g.get(i, j);
            for k in 0..j {
                s -= l.get(i, k) * l.get(j, k);
            }
            l.set(i, j, s / ljj);
        }
    }
    Ok(Cholesky { factor: l })
}

impl Cholesky {
    pub fn factor(&self) -> &Matrix {
        &self.factor
    }

    /// Squared diagonal of `L`, i.e. the elimination pivots of `g`.
    pub fn pivots(&self) -> Vec<f64> {
        (0..self.factor.rows())
            .map(|i| self.factor.get(i, i).powi(2))
            .collect()
    }

    /// Solves `L Lᵀ X = b` by forward then backward substitution.
    pub fn solve(&self, b: &Matrix) -> Result<Matrix> {
        let l = &self.factor;
        let n = l.rows();
        if b.rows() != n {
            return Err(LinalgError::Shape {
                op: "cholesky_solve",
                left: l.shape(),
                right: b.shape(),
            });
        }
        let mut x = b.clone();
        for c in 0..b.cols() {
            for i in 0..n {
                let mut s = x.get(i, c);
                for k in 0..i {
                    s -= l.get(i, k) * x.get(k, c);
                }
                x.set(i, c, s / l.get(i, i));
            }
            for i in (0..n).rev() {
                let mut s = x.get(i, c);
                for k in i + 1..n {
                    s -= l.get(k, i) * x.get(k, c);
                }
                x.set(i, c, s / l.get(i, i));
            }
        }
        x.check_finite()?;
        Ok(x)
    }
}

/// Solves `g X = b` for symmetric positive-definite `g`, followed by one
/// step of iterative refinement against the original `g`.
pub fn spd_solve(g: &Matrix, b: &Matrix) -> Result<Matrix> {
    let chol = cholesky(g)?;
    let x = chol.solve(b)?;
    let residual = b.sub(&matmul(g, &x)?)?;
    let correction = chol.solve(&residual)?;
    x.add(&correction)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::matmul_nt;
    use crate::linalg::test_util::random_matrix;

    /// Gauss-Jordan inverse with partial pivoting; independent of Cholesky.
    fn gauss_jordan_inverse(g: &Matrix) -> Matrix {
        let n = g.rows();
        let mut a = g.clone();
        let mut inv = Matrix::identity(n);
        for c in 0..n {
            let p = (c..n)
                .max_by(|&i, &j| a.get(i, c).abs().total_cmp(&a.get(j, c).abs()))
                .unwrap();
            for j in 0..n {
                let (x, y) = (a.get(c, j), a.get(p, j));
                a.set(c, j, y);
                a.set(p, j, x);
                let (x, y) = (inv.get(c, j), inv.get(p, j));
                inv.set(c, j, y);
                inv.set(p, j, x);
            }
            let d = a.get(c, c);
            for j in 0..n {
                a.set(c, j, a.get(c, j) / d);
                inv.set(c, j, inv.get(c, j) / d);
            }
            for i in 0..n {
                if i != c {
                    let f = a.get(i, c);
                    for j in 0..n {
                        a.set(i, j, a.get(i, j) - f * a.get(c, j));
                        inv.set(i, j, inv.get(i, j) - f * inv.get(c, j));
                    }
                }
            }
        }
        inv
    }

    #[test]
    fn identity_returns_rhs() {
        let b = random_matrix(4, 3, 1);
        let x = spd_solve(&Matrix::identity(4), &b).unwrap();
        assert_eq!(x, b);
    }

    #[test]
    fn diagonal_case() {
        let g = Matrix::from_rows(&[[1.0, 0.0], [0.0, 4.0]]).unwrap();
        let b = Matrix::from_rows(&[[2.0], [8.0]]).unwrap();
        assert_eq!(spd_solve(&g, &b).unwrap().as_slice(), &[2.0, 2.0]);
    }

    #[test]
    fn random_spd_matches_explicit_inverse() {
        let r = random_matrix(20, 20, 5);
        let mut g = matmul_nt(&r, &r).unwrap();
        for i in 0..20 {
            g.set(i, i, g.get(i, i) + 1.0);
        }
        let b = random_matrix(20, 3, 6);
        let x = spd_solve(&g, &b).unwrap();
        let oracle = matmul(&gauss_jordan_inverse(&g), &b).unwrap();
        let rel = x.sub(&oracle).unwrap().frobenius_norm() / oracle.frobenius_norm();
        assert!(rel <= 1e-9, "relative error {rel}");
        let res = matmul(&g, &x).unwrap().sub(&b).unwrap().norm_inf();
        assert!(res <= 1e-8 * (1.0 + b.norm_inf()));
    }

    #[test]
    fn ill_conditioned_residual_bound() {
        // cond = 1e8: graded diagonal in the basis of a Householder reflector.
        let n = 12;
        let u = random_matrix(n, 1, 9);
        let uu = crate::linalg::frobenius_norm_sq(&u);
        let q = Matrix::from_fn(n, n, |i, j| {
            let delta = if i == j { 1.0 } else { 0.0 };
            delta - 2.0 * u.get(i, 0) * u.get(j, 0) / uu
        });
        let mut d = Matrix::zeros(n, n);
        for i in 0..n {
            d.set(i, i, 10f64.powf(-8.0 * i as f64 / (n - 1) as f64));
        }
        let g0 = matmul(&matmul(&q, &d).unwrap(), &q.transpose()).unwrap();
        let g = g0.add(&g0.transpose()).unwrap().scale(0.5);
        let b = random_matrix(n, 2, 10);
        let x = spd_solve(&g, &b).unwrap();
        let res = matmul(&g, &x).unwrap().sub(&b).unwrap().norm_inf();
        assert!(res <= 1e-8 * (1.0 + b.norm_inf()), "residual {res}");
    }

    #[test]
    fn rejects_indefinite_and_asymmetric() {
        let g = Matrix::from_rows(&[[1.0, 2.0], [2.0, 1.0]]).unwrap();
        assert!(matches!(
            spd_solve(&g, &Matrix::zeros(2, 1)),
            Err(LinalgError::NotPositiveDefinite { index: 1, .. })
        ));
        let g = Matrix::from_rows(&[[1.0, 2.0], [0.0, 1.0]]).unwrap();
        assert!(matches!(cholesky(&g), Err(LinalgError::NotSymmetric { .. })));
        assert!(matches!(cholesky(&Matrix::zeros(2, 3)), Err(LinalgError::NotSquare { .. })));
    }
}
