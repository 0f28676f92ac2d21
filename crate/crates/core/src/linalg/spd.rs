//! Small symmetric positive-definite inverses via Cholesky.

use super::Matrix;

/// Largest absolute column sum.
pub fn norm_1(m: &Matrix) -> f64 {
    (0..m.cols())
        .map(|j| (0..m.rows()).map(|i| m.get(i, j).abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Inverse of a symmetric positive-definite matrix together with its 1-norm
/// condition number `‖S‖₁·‖S⁻¹‖₁`, which bounds the 2-norm condition number
/// from above. `None` when the Cholesky factorization breaks down.
pub fn spd_inverse(s: &Matrix) -> Option<(Matrix, f64)> {
    let n = s.rows();
    if n != s.cols() || n == 0 {
        return None;
    }
    // Lower-triangular factor, row-major.
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut sum = s.get(i, j);
            for k in 0..j {
                sum -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if sum.is_nan() || sum <= 0.0 {
                    return None;
                }
                l[i * n + i] = sum.sqrt();
            } else {
                l[i * n + j] = sum / l[j * n + j];
            }
        }
    }
    // L⁻¹ by forward substitution, then S⁻¹ = L⁻ᵀ L⁻¹.
    let mut li = vec![0.0; n * n];
    for c in 0..n {
        for i in c..n {
            let mut sum = if i == c { 1.0 } else { 0.0 };
            for k in c..i {
                sum -= l[i * n + k] * li[k * n + c];
            }
            li[i * n + c] = sum / l[i * n + i];
        }
    }
    let inv = Matrix::from_fn(n, n, |i, j| (i.max(j)..n).map(|k| li[k * n + i] * li[k * n + j]).sum());
    if !inv.is_finite() {
        return None;
    }
    let cond = norm_1(s) * norm_1(&inv);
    Some((inv, cond))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Rng;

    #[test]
    fn inverts_random_spd() {
        let mut rng = Rng::new(4);
        for n in 1..6 {
            let f = rng.gaussian_matrix(n, n + 3, 1.0);
            let s = f.matmul_t(&f).unwrap();
            let (inv, cond) = spd_inverse(&s).unwrap();
            assert!(s.matmul(&inv).unwrap().max_abs_diff(&Matrix::identity(n)) < 1e-10);
            assert!(cond >= 1.0 - 1e-12);
        }
    }

    #[test]
    fn rejects_singular_and_indefinite() {
        assert!(spd_inverse(&Matrix::zeros(3, 3)).is_none());
        let m = Matrix::from_rows(&[&[1.0, 2.0], &[2.0, 1.0]]).unwrap();
        assert!(spd_inverse(&m).is_none());
    }
}
