//! Thin SVD by one-sided (Hestenes) Jacobi rotations, plus the
//! pseudo-inverse and subspace projectors built on it.

use crate::error::{Error, Result};

use super::Matrix;

/// Default relative cutoff below which singular values count as zero.
pub const DEFAULT_RANK_TOL: f64 = 1e-12;

const MAX_SWEEPS: usize = 80;
const ORTHOGONALITY_EPS: f64 = 1e-15;

/// Thin singular value decomposition `m = u · diag(σ) · v_t`.
///
/// For an `r×c` input with `k = min(r, c)`, `u` is `r×k` and `v_t` is `k×c`.
/// Columns of `u` belonging to zero singular values are zero.
#[derive(Debug, Clone)]
pub struct SvdResult {
    pub u: Matrix,
    pub singular_values: Vec<f64>,
    pub v_t: Matrix,
    pub numerical_rank: usize,
}

impl SvdResult {
    pub fn reconstruct(&self) -> Matrix {
        let k = self.singular_values.len();
        let us = Matrix::from_fn(self.u.rows(), k, |i, j| {
            self.u.get(i, j) * self.singular_values[j]
        });
        us.matmul(&self.v_t).expect("svd factors are conformant")
    }

    /// Moore–Penrose inverse from the factors, zeroing `σ ≤ tol · σ_max`.
    pub fn pseudo_inverse(&self, tol: f64) -> Matrix {
        let (rows, cols) = (self.u.rows(), self.v_t.cols());
        let mut out = Matrix::zeros(cols, rows);
        let cutoff = tol * self.singular_values.first().copied().unwrap_or(0.0);
        for (k, &sigma) in self.singular_values.iter().enumerate() {
            if sigma <= cutoff || sigma == 0.0 {
                break;
            }
            let inv = 1.0 / sigma;
            for j in 0..cols {
                let v = self.v_t.get(k, j) * inv;
                if v == 0.0 {
                    continue;
                }
                for i in 0..rows {
                    let idx = j * rows + i;
                    out.as_mut_slice()[idx] += v * self.u.get(i, k);
                }
            }
        }
        out
    }
}

fn check_tol(tol: f64) -> Result<()> {
    if !(tol > 0.0 && tol < 1.0) {
        return Err(Error::Domain(format!(
            "rank tolerance must lie in (0, 1), got {tol}"
        )));
    }
    Ok(())
}

/// Thin SVD with `numerical_rank` counted against `tol · σ_max`.
pub fn svd(m: &Matrix, tol: f64) -> Result<SvdResult> {
    check_tol(tol)?;
    if m.rows() >= m.cols() {
        jacobi_tall(m, tol)
    } else {
        let t = jacobi_tall(&m.transpose(), tol)?;
        Ok(SvdResult {
            u: t.v_t.transpose(),
            singular_values: t.singular_values,
            v_t: t.u.transpose(),
            numerical_rank: t.numerical_rank,
        })
    }
}

/// Requires `m.rows() >= m.cols()`. Orthogonalizes the columns of `m`; a
/// strictly tall input is first reduced to its `cols×cols` triangular QR
/// factor so the rotations act on short columns.
fn jacobi_tall(m: &Matrix, tol: f64) -> Result<SvdResult> {
    let (rows, cols) = m.shape();
    // Column-major working copy so each rotation touches contiguous memory.
    let mut w = m.transpose().as_slice().to_vec();
    let v = orthogonalize_tall(&mut w, rows, cols)?;

    let norms: Vec<f64> = (0..cols)
        .map(|j| w[j * rows..(j + 1) * rows].iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    let mut order: Vec<usize> = (0..cols).collect();
    order.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]));

    let singular_values: Vec<f64> = order.iter().map(|&j| norms[j]).collect();
    let sigma_max = singular_values.first().copied().unwrap_or(0.0);
    let mut u = Matrix::zeros(rows, cols);
    let mut v_t = Matrix::zeros(cols, cols);
    for (k, &j) in order.iter().enumerate() {
        let sigma = norms[j];
        if sigma > 0.0 {
            for i in 0..rows {
                u.set(i, k, w[j * rows + i] / sigma);
            }
        }
        for i in 0..cols {
            v_t.set(k, i, v[j * cols + i]);
        }
    }
    let numerical_rank = singular_values
        .iter()
        .filter(|&&s| s > tol * sigma_max && s > 0.0)
        .count();
    Ok(SvdResult {
        u,
        singular_values,
        v_t,
        numerical_rank,
    })
}

/// Replaces the column-major `rows×cols` buffer (`rows ≥ cols`) by `U·Σ` and
/// returns `V`, both unsorted.
fn orthogonalize_tall(w: &mut Vec<f64>, rows: usize, cols: usize) -> Result<Vec<f64>> {
    if rows == cols {
        return orthogonalize(w, rows, cols);
    }
    let lead = householder_qr(w, rows, cols);
    let mut r = vec![0.0; cols * cols];
    for j in 0..cols {
        r[j * cols..j * cols + j + 1].copy_from_slice(&w[j * rows..j * rows + j + 1]);
    }
    let v = orthogonalize(&mut r, cols, cols)?;
    *w = apply_q(w, &lead, &r, rows, cols);
    Ok(v)
}

/// Rotates column pairs of the column-major `rows×cols` buffer until all
/// columns are mutually orthogonal; returns the accumulated rotation `V`.
fn orthogonalize(w: &mut [f64], rows: usize, cols: usize) -> Result<Vec<f64>> {
    let mut v = vec![0.0; cols * cols];
    for j in 0..cols {
        v[j * cols + j] = 1.0;
    }
    if cols < 2 {
        return Ok(v);
    }
    // Columns below this squared norm are roundoff; their squared norms may
    // underflow to zero, where the relative test below can never pass.
    let negligible = w.iter().map(|x| x * x).sum::<f64>() * f64::EPSILON * f64::EPSILON;
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..cols - 1 {
            for q in p + 1..cols {
                let (wp, wq) = column_pair(w, rows, p, q);
                let alpha: f64 = wp.iter().map(|x| x * x).sum();
                let beta: f64 = wq.iter().map(|x| x * x).sum();
                let gamma: f64 = wp.iter().zip(wq.iter()).map(|(a, b)| a * b).sum();
                if gamma == 0.0
                    || alpha.min(beta) <= negligible
                    || gamma.abs() <= ORTHOGONALITY_EPS * alpha.sqrt() * beta.sqrt()
                {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(wp, wq, c, s);
                let (vp, vq) = column_pair(&mut v, cols, p, q);
                rotate(vp, vq, c, s);
            }
        }
        if !rotated {
            return Ok(v);
        }
    }
    Err(Error::SvdNonConvergence {
        iterations: MAX_SWEEPS,
    })
}

/// In-place Householder QR of a column-major `rows×cols` buffer. On return the
/// upper triangle holds `R` and column `k` below the diagonal holds the unit
/// reflector `v_k` (without its leading entry, kept in the returned vector).
fn householder_qr(a: &mut [f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut lead = vec![0.0; cols];
    for k in 0..cols {
        let col = &mut a[k * rows + k..(k + 1) * rows];
        let norm = col.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            continue;
        }
        let alpha = if col[0] > 0.0 { -norm } else { norm };
        col[0] -= alpha;
        let vnorm = col.iter().map(|x| x * x).sum::<f64>().sqrt();
        col.iter_mut().for_each(|x| *x /= vnorm);
        for j in k + 1..cols {
            let (head, tail) = a.split_at_mut(j * rows);
            let vk = &head[k * rows + k..(k + 1) * rows];
            let cj = &mut tail[k..rows];
            let d = 2.0 * vk.iter().zip(cj.iter()).map(|(x, y)| x * y).sum::<f64>();
            cj.iter_mut().zip(vk).for_each(|(y, x)| *y -= d * x);
        }
        let col = &mut a[k * rows + k..(k + 1) * rows];
        lead[k] = col[0];
        col[0] = alpha;
    }
    lead
}

/// `Q·[r; 0]` for the reflectors stored by [`householder_qr`].
fn apply_q(qr: &[f64], lead: &[f64], r: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut y = vec![0.0; rows * cols];
    for j in 0..cols {
        y[j * rows..j * rows + cols].copy_from_slice(&r[j * cols..(j + 1) * cols]);
    }
    let mut vk = vec![0.0; rows];
    for k in (0..cols).rev() {
        let len = rows - k;
        vk[0] = lead[k];
        vk[1..len].copy_from_slice(&qr[k * rows + k + 1..(k + 1) * rows]);
        let vk = &vk[..len];
        if vk.iter().all(|&x| x == 0.0) {
            continue;
        }
        for j in 0..cols {
            let yj = &mut y[j * rows + k..(j + 1) * rows];
            let d = 2.0 * vk.iter().zip(yj.iter()).map(|(x, y)| x * y).sum::<f64>();
            yj.iter_mut().zip(vk).for_each(|(y, x)| *y -= d * x);
        }
    }
    y
}

fn column_pair(buf: &mut [f64], len: usize, p: usize, q: usize) -> (&mut [f64], &mut [f64]) {
    debug_assert!(p < q);
    let (head, tail) = buf.split_at_mut(q * len);
    (&mut head[p * len..(p + 1) * len], &mut tail[..len])
}

#[inline]
fn rotate(xp: &mut [f64], xq: &mut [f64], c: f64, s: f64) {
    for (a, b) in xp.iter_mut().zip(xq.iter_mut()) {
        let (ap, aq) = (*a, *b);
        *a = c * ap - s * aq;
        *b = s * ap + c * aq;
    }
}

/// Moore–Penrose pseudo-inverse; singular values `≤ tol · σ_max` are dropped.
///
/// Same cutoff as [`SvdResult::pseudo_inverse`], accumulated directly as
/// `Σ v_k (σ_k u_k)ᵀ / σ_k²` without sorting or normalizing the factors.
pub fn pseudo_inverse(m: &Matrix, tol: f64) -> Result<Matrix> {
    check_tol(tol)?;
    let (rows, cols) = m.shape();
    let wide = rows < cols;
    let (tr, tc) = if wide { (cols, rows) } else { (rows, cols) };
    // Row-major `m` is its own transpose in column-major order.
    let mut w = if wide {
        m.as_slice().to_vec()
    } else {
        m.transpose().as_slice().to_vec()
    };
    let v = orthogonalize_tall(&mut w, tr, tc)?;
    let sq: Vec<f64> = w.chunks_exact(tr).map(|c| c.iter().map(|x| x * x).sum()).collect();
    let sigma_max = sq.iter().copied().fold(0.0, f64::max).sqrt();
    let cutoff = tol * sigma_max;

    // Pseudo-inverse of the tall orientation is `tc×tr`; the answer is it or its transpose.
    let mut out = if wide { Matrix::zeros(tr, tc) } else { Matrix::zeros(tc, tr) };
    let data = out.as_mut_slice();
    for k in 0..tc {
        let sigma = sq[k].sqrt();
        if sigma <= cutoff || sigma == 0.0 {
            continue;
        }
        let inv_sq = 1.0 / sq[k];
        let wk = &w[k * tr..(k + 1) * tr];
        let vk = &v[k * tc..(k + 1) * tc];
        for i in 0..tc {
            let c = vk[i] * inv_sq;
            if c == 0.0 {
                continue;
            }
            for (j, &x) in wk.iter().enumerate() {
                if wide {
                    data[j * tc + i] += c * x;
                } else {
                    data[i * tr + j] += c * x;
                }
            }
        }
    }
    Ok(out)
}

/// Orthogonal projector `A⁺A` onto the row space of `a` (`m×m` for an `r×m` input).
pub fn row_space_projector(a: &Matrix, tol: f64) -> Result<Matrix> {
    pseudo_inverse(a, tol)?.matmul(a)
}

/// Orthogonal projector `B B⁺` onto the column space of `b` (`n×n` for an `n×r` input).
pub fn col_space_projector(b: &Matrix, tol: f64) -> Result<Matrix> {
    b.matmul(&pseudo_inverse(b, tol)?)
}
