use super::{dot, matmul_tn, LinalgError, Matrix, Result};

/// Minimum-Frobenius-norm solution of `a V = z` by orthonormalizing the rows
/// of `a` (modified Gram-Schmidt, two passes) and expressing `V` in that
/// row-space basis.
///
/// With `a = L Q`, `L` lower triangular and `Q` with orthonormal rows, the
/// answer is `Qᵀ L⁻¹ z`. This never forms `a aᵀ`, so it is used as an
/// independent check on the Gram/Cholesky route.
pub fn min_norm_oracle(a: &Matrix, z: &Matrix) -> Result<Matrix> {
    if a.rows() != z.rows() {
        return Err(LinalgError::Shape {
            op: "min_norm_oracle",
            left: a.shape(),
            right: z.shape(),
        });
    }
    let r = a.rows();
    let m = a.cols();
    let mut q = Matrix::zeros(r, m);
    let mut l = Matrix::zeros(r, r);

    for i in 0..r {
        let mut v = a.row(i).to_vec();
        let original = dot(&v, &v).sqrt();
        for _pass in 0..2 {
            for j in 0..i {
                let qj = q.row(j);
                let c = dot(qj, &v);
                for (x, y) in v.iter_mut().zip(qj) {
                    *x -= c * y;
                }
                l.set(i, j, l.get(i, j) + c);
            }
        }
        let norm = dot(&v, &v).sqrt();
        if original == 0.0 || norm <= 1e-10 * original {
            return Err(LinalgError::RankDeficient { row: i });
        }
        l.set(i, i, norm);
        for (dst, x) in q.row_mut(i).iter_mut().zip(&v) {
            *dst = x / norm;
        }
    }

    let mut coeffs = z.clone();
    for c in 0..z.cols() {
        for i in 0..r {
            let mut s = coeffs.get(i, c);
            for k in 0..i {
                s -= l.get(i, k) * coeffs.get(k, c);
            }
            coeffs.set(i, c, s / l.get(i, i));
        }
    }
    matmul_tn(&q, &coeffs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::test_util::random_matrix;
    use crate::linalg::{matmul, matmul_nt, spd_solve};

    #[test]
    fn coordinate_projection() {
        let a = Matrix::from_rows(&[[1.0, 0.0]]).unwrap();
        let z = Matrix::from_rows(&[[2.0]]).unwrap();
        assert_eq!(min_norm_oracle(&a, &z).unwrap().as_slice(), &[2.0, 0.0]);
    }

    #[test]
    fn symmetric_split() {
        let a = Matrix::from_rows(&[[1.0, 1.0]]).unwrap();
        let z = Matrix::from_rows(&[[2.0]]).unwrap();
        let v = min_norm_oracle(&a, &z).unwrap();
        assert!((v.get(0, 0) - 1.0).abs() < 1e-15);
        assert!((v.get(1, 0) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn agrees_with_gram_route() {
        let a = random_matrix(4, 12, 3);
        let z = random_matrix(4, 2, 4);
        let oracle = min_norm_oracle(&a, &z).unwrap();
        let g = matmul_nt(&a, &a).unwrap();
        let closed = matmul_tn(&a, &spd_solve(&g, &z).unwrap()).unwrap();
        let rel = oracle.sub(&closed).unwrap().frobenius_norm() / closed.frobenius_norm();
        assert!(rel <= 1e-9);
        assert!(matmul(&a, &oracle).unwrap().max_abs_diff(&z).unwrap() < 1e-12);
    }

    #[test]
    fn dependent_rows_rejected() {
        let a = Matrix::from_rows(&[[1.0, 2.0, 3.0], [2.0, 4.0, 6.0]]).unwrap();
        let z = Matrix::zeros(2, 1);
        assert!(matches!(
            min_norm_oracle(&a, &z),
            Err(LinalgError::RankDeficient { row: 1 })
        ));
    }
}
