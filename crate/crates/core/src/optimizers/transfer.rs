//! Full-gradient reconstruction from LoRA gradients and transfer of a
//! full-space perturbation onto `B`.

use crate::error::Result;
use crate::linalg::{matrixize, pseudo_inverse, spd_inverse, vectorize, Matrix};
use crate::model::{Batch, GradientSet, LoraLinear, Network};

use super::{sam_direction, DirectionVariant, DEGENERATE_NORM};

/// `Ḡ^W = ½·[(1/s)·∇B·(Aᵀ)⁺ + (1/s)·(Bᵀ)⁺·∇A]`.
pub fn reconstruct_full_gradient(
    grad_b: &Matrix,
    grad_a: &Matrix,
    a: &Matrix,
    b: &Matrix,
    s: f64,
    tol: f64,
) -> Result<Matrix> {
    let a_pinv = pseudo_inverse(a, tol)?;
    let b_pinv = pseudo_inverse(b, tol)?;
    reconstruct_with_pinvs(grad_b, grad_a, &a_pinv, &b_pinv, s)
}

/// Same as [`reconstruct_full_gradient`] given `A⁺` and `B⁺`.
/// Uses `(Aᵀ)⁺ = (A⁺)ᵀ` and `(Bᵀ)⁺ = (B⁺)ᵀ`.
pub(crate) fn reconstruct_with_pinvs(
    grad_b: &Matrix,
    grad_a: &Matrix,
    a_pinv: &Matrix,
    b_pinv: &Matrix,
    s: f64,
) -> Result<Matrix> {
    let mut g = grad_b.matmul_t(a_pinv)?;
    g.axpy(1.0, &b_pinv.t_matmul(grad_a)?)?;
    Ok(g.scaled(0.5 / s))
}

/// `E^B = (1/s)·Ē^W·A⁺`.
pub fn full_to_lowrank_perturbation(e_w_bar: &Matrix, a: &Matrix, s: f64, tol: f64) -> Result<Matrix> {
    let a_pinv = pseudo_inverse(a, tol)?;
    Ok(e_w_bar.matmul(&a_pinv)?.scaled(1.0 / s))
}

/// Per-layer full-space perturbation and its transfer onto `B`.
#[derive(Debug, Clone)]
pub struct TransferredPerturbation {
    pub e_w_bar: Vec<Matrix>,
    pub e_b: Vec<Matrix>,
    /// Layers whose reconstructed gradient vanished and got a zero perturbation.
    pub degenerate_layers: usize,
}

impl TransferredPerturbation {
    pub fn zeros(net: &Network) -> Self {
        Self {
            e_w_bar: net.layers().iter().map(|l| Matrix::zeros(l.out_dim(), l.in_dim())).collect(),
            e_b: net.layers().iter().map(|l| Matrix::zeros(l.out_dim(), l.rank())).collect(),
            degenerate_layers: 0,
        }
    }

    /// Euclidean norm over all layers' `E^B`.
    pub fn e_b_norm(&self) -> f64 {
        self.e_b.iter().map(Matrix::frobenius_norm_sq).sum::<f64>().sqrt()
    }
}

/// Builds the per-layer perturbation from gradients already taken at the
/// network's current parameters. Each layer's `Ē^W` has Frobenius norm `rho`.
pub fn perturbation_from_grads(
    net: &Network,
    grads: &GradientSet,
    rho: f64,
    variant: DirectionVariant,
    tol: f64,
) -> Result<TransferredPerturbation> {
    if rho == 0.0 {
        return Ok(TransferredPerturbation::zeros(net));
    }
    let mut out = TransferredPerturbation {
        e_w_bar: Vec::with_capacity(grads.layers.len()),
        e_b: Vec::with_capacity(grads.layers.len()),
        degenerate_layers: 0,
    };
    for (layer, g) in net.layers().iter().zip(&grads.layers) {
        let (e_w_bar, e_b, degenerate) = layer_perturbation(layer, &g.b, &g.a, rho, variant, tol)?;
        out.degenerate_layers += degenerate as usize;
        out.e_w_bar.push(e_w_bar);
        out.e_b.push(e_b);
    }
    Ok(out)
}

fn layer_perturbation(
    layer: &LoraLinear,
    grad_b: &Matrix,
    grad_a: &Matrix,
    rho: f64,
    variant: DirectionVariant,
    tol: f64,
) -> Result<(Matrix, Matrix, bool)> {
    let s = layer.scale();
    let a_pinv = pseudo_inverse(layer.a(), tol)?;
    let b_pinv = pseudo_inverse(layer.b(), tol)?;
    let g_bar = reconstruct_with_pinvs(grad_b, grad_a, &a_pinv, &b_pinv, s)?;
    let dir = sam_direction(&vectorize(&g_bar), rho, variant);
    let e_w_bar = matrixize(&dir.values, g_bar.rows(), g_bar.cols())?;
    let e_b = e_w_bar.matmul(&a_pinv)?.scaled(1.0 / s);
    Ok((e_w_bar, e_b, dir.degenerate))
}

/// Largest 1-norm condition number of a factor's Gram matrix for which the
/// Cholesky route is used; beyond it the SVD pseudo-inverse takes over.
const GRAM_COND_LIMIT: f64 = 1e5;

/// `(FᵀF)⁺` or `(FFᵀ)⁺` from the factor's Gram matrix. Cholesky is used when
/// the Gram matrix is comfortably nonsingular and no singular value of the
/// factor falls below `tol·σ_max`; otherwise `fallback` supplies the answer
/// from the SVD.
fn gram_pinv(gram: &Matrix, tol: f64, fallback: impl FnOnce() -> Result<Matrix>) -> Result<Matrix> {
    if gram.max_abs() == 0.0 {
        return Ok(Matrix::zeros(gram.rows(), gram.cols()));
    }
    // κ₂(Gram) ≤ κ₁(Gram) < 1/tol² keeps every σ_min/σ_max above tol.
    let limit = GRAM_COND_LIMIT.min(1.0 / (tol * tol));
    match spd_inverse(gram) {
        Some((inv, cond)) if cond < limit => Ok(inv),
        _ => fallback(),
    }
}

/// `E^B` for one layer without forming any `n×m` matrix.
///
/// With `K = (AAᵀ)⁺`, `H = ∇A·Aᵀ·K` and `J = (BᵀB)⁺`:
/// `Ḡ·A⁺ = (0.5/s)·(∇B·K + B·J·H)` and
/// `‖Ḡ‖² = (0.5/s)²·(⟨∇B·K, ∇B⟩ + ⟨J, ∇A·∇Aᵀ⟩ + 2⟨H, J·Bᵀ·∇B⟩)`.
fn lowrank_e_b(layer: &LoraLinear, grad_b: &Matrix, grad_a: &Matrix, rho: f64, tol: f64) -> Result<(Matrix, bool)> {
    let (a, b, s) = (layer.a(), layer.b(), layer.scale());
    let r = a.rows();
    let dot = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>();
    // Row Gram products of the r×m factors.
    let k = gram_pinv(&Matrix::from_fn(r, r, |i, j| dot(a.row(i), a.row(j))), tol, || {
        let p = pseudo_inverse(a, tol)?;
        p.t_matmul(&p)
    })?;
    let j = gram_pinv(&b.t_matmul(b)?, tol, || {
        let p = pseudo_inverse(b, tol)?;
        p.matmul_t(&p)
    })?;
    let h = Matrix::from_fn(r, r, |i, c| dot(grad_a.row(i), a.row(c))).matmul(&k)?;
    let ga_gram = Matrix::from_fn(r, r, |i, c| dot(grad_a.row(i), grad_a.row(c)));
    let x = grad_b.matmul(&k)?;
    let y = b.matmul(&j.matmul(&h)?)?;
    let cross = h.dot(&j.matmul(&b.t_matmul(grad_b)?)?)?;
    let sq = x.dot(grad_b)? + j.dot(&ga_gram)? + 2.0 * cross;
    let norm = 0.5 / s * sq.max(0.0).sqrt();
    if norm < DEGENERATE_NORM {
        return Ok((Matrix::zeros(b.rows(), b.cols()), true));
    }
    let c = rho / norm * 0.5 / (s * s);
    let mut e_b = x;
    for (e, v) in e_b.as_mut_slice().iter_mut().zip(y.as_slice()) {
        *e = c * (*e + v);
    }
    Ok((e_b, false))
}

/// `E^B` per layer for the step rules: the same perturbation as
/// [`perturbation_from_grads`] without materializing `Ē^W` when the
/// direction is [`DirectionVariant::Standard`].
pub fn b_perturbation_from_grads(
    net: &Network,
    grads: &GradientSet,
    rho: f64,
    variant: DirectionVariant,
    tol: f64,
) -> Result<(Vec<Matrix>, usize)> {
    if variant != DirectionVariant::Standard {
        let p = perturbation_from_grads(net, grads, rho, variant, tol)?;
        return Ok((p.e_b, p.degenerate_layers));
    }
    if rho == 0.0 {
        return Ok((TransferredPerturbation::zeros(net).e_b, 0));
    }
    let mut degenerate = 0;
    let e_b = net
        .layers()
        .iter()
        .zip(&grads.layers)
        .map(|(layer, g)| {
            let (e, d) = lowrank_e_b(layer, &g.b, &g.a, rho, tol)?;
            degenerate += d as usize;
            Ok(e)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((e_b, degenerate))
}

/// One backward pass at the current parameters followed by
/// [`perturbation_from_grads`].
pub fn perturbation_from_rho(
    net: &Network,
    batch: &Batch,
    rho: f64,
    variant: DirectionVariant,
    tol: f64,
) -> Result<TransferredPerturbation> {
    let grads = net.backward(batch, false)?;
    perturbation_from_grads(net, &grads, rho, variant, tol)
}
