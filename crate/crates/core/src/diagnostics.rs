//! Flatness diagnostics: full-space SAM sharpness, EMA sharpness and its gap
//! bound, empirical smoothness constants, brute-force neighborhood maxima,
//! balancedness dynamics, and the loss-match residual of the `B` transfer.
//!
//! All evaluations work on weight snapshots through
//! [`Network::forward_with_weights`], so nothing here mutates the network or
//! counts toward its backward budget.

use crate::error::{Error, Result};
use crate::linalg::{l2_norm, row_space_projector, Matrix, Rng};
use crate::model::{Batch, Network};
use crate::optimizers::{rho_at, PerturbState, DEGENERATE_NORM};

/// A sharpness value and how many layers had a vanishing gradient.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sharpness {
    pub value: f64,
    pub degenerate_layers: usize,
}

fn stacked_norm(ms: &[Matrix]) -> f64 {
    ms.iter().map(Matrix::frobenius_norm_sq).sum::<f64>().sqrt()
}

fn offset_weights(weights: &[Matrix], offsets: &[Matrix]) -> Result<Vec<Matrix>> {
    weights.iter().zip(offsets).map(|(w, e)| w.add(e)).collect()
}

/// `L(W + ε̂) − L(W)` with `ε̂ = ρ·g/‖g‖` per layer on the merged weights.
pub fn sharpness_sam(net: &Network, batch: &Batch, rho: f64) -> Result<Sharpness> {
    sharpness_sam_at(net, &net.merged_weights(), batch, rho)
}

/// [`sharpness_sam`] at an explicit weight snapshot.
pub fn sharpness_sam_at(net: &Network, weights: &[Matrix], batch: &Batch, rho: f64) -> Result<Sharpness> {
    let (eps, degenerate_layers, base) = sam_perturbation(net, weights, batch, rho)?;
    let perturbed = net.forward_with_weights(&offset_weights(weights, &eps)?, batch)?.1;
    Ok(Sharpness {
        value: perturbed - base,
        degenerate_layers,
    })
}

/// Per-layer `ρ·g/‖g‖`, the count of zero-gradient layers, and the base loss.
fn sam_perturbation(net: &Network, weights: &[Matrix], batch: &Batch, rho: f64) -> Result<(Vec<Matrix>, usize, f64)> {
    let (grads, loss) = net.weight_gradients(weights, batch)?;
    let mut degenerate = 0;
    let eps = grads
        .iter()
        .map(|g| {
            let norm = g.frobenius_norm();
            if norm < DEGENERATE_NORM {
                degenerate += 1;
                Matrix::zeros(g.rows(), g.cols())
            } else {
                g.scaled(rho / norm)
            }
        })
        .collect();
    Ok((eps, degenerate, loss))
}

/// Merged weights with the given `B` factors.
fn weights_with_b(net: &Network, bs: &[Matrix]) -> Vec<Matrix> {
    net.layers()
        .iter()
        .zip(bs)
        .map(|(l, b)| l.merged_weight_with_b(b))
        .collect()
}

/// `L(B + Ê^B, A) − L(B, A)` for the EMA perturbation held in `state`,
/// regardless of whether it is currently applied.
pub fn sharpness_ema(net: &Network, batch: &Batch, state: &PerturbState) -> Result<f64> {
    let base_b = state.unperturbed_b(net);
    let perturbed_b = base_b
        .iter()
        .zip(state.ema_e_b())
        .map(|(b, e)| b.add(e))
        .collect::<Result<Vec<_>>>()?;
    let base = net.forward_with_weights(&weights_with_b(net, &base_b), batch)?.1;
    let perturbed = net.forward_with_weights(&weights_with_b(net, &perturbed_b), batch)?.1;
    Ok(perturbed - base)
}

/// Empirical surrogates for the smoothness, gradient-bound and variance
/// constants. They are lower bounds on the true constants, measured over
/// finitely many probes.
#[derive(Debug, Clone, Copy, PartialEq, Default, serde::Serialize)]
pub struct AssumptionConstants {
    pub tau_hat: f64,
    pub g_hat: f64,
    pub sigma_hat: f64,
}

impl AssumptionConstants {
    pub fn scaled(self, k: f64) -> Self {
        Self {
            tau_hat: k * self.tau_hat,
            g_hat: k * self.g_hat,
            sigma_hat: k * self.sigma_hat,
        }
    }

    pub fn max(self, other: Self) -> Self {
        Self {
            tau_hat: self.tau_hat.max(other.tau_hat),
            g_hat: self.g_hat.max(other.g_hat),
            sigma_hat: self.sigma_hat.max(other.sigma_hat),
        }
    }
}

/// `(τ·ρ₀/√(t−1) + G + σ²)·(ρ₀/√t + ρ₀(1−β)^{t−1} + ρ₀)` for `t ≥ 2`.
pub fn theorem2_rhs(consts: &AssumptionConstants, rho0: f64, beta: f64, t: usize) -> Result<f64> {
    if t < 2 {
        return Err(Error::Domain(format!("gap bound needs t >= 2, got {t}")));
    }
    let tf = t as f64;
    let lhs = consts.tau_hat * rho0 / (tf - 1.0).sqrt() + consts.g_hat + consts.sigma_hat * consts.sigma_hat;
    let rhs = rho0 / tf.sqrt() + rho0 * (1.0 - beta).powi((t - 1) as i32) + rho0;
    Ok(lhs * rhs)
}

/// Radius of the random probe pairs used for the smoothness estimate.
const PROBE_RADIUS: f64 = 0.1;

/// Estimates the constants at the network's current merged weights from the
/// training batches.
pub fn estimate_assumption_constants(
    net: &Network,
    train: &[Batch],
    n_probes: usize,
    seed: u64,
) -> Result<AssumptionConstants> {
    if n_probes < 2 {
        return Err(Error::Domain(format!("need at least 2 probes, got {n_probes}")));
    }
    if train.is_empty() {
        return Err(Error::Domain("no training batches".into()));
    }
    let weights = net.merged_weights();
    let full = Batch::concat(train)?;
    let full_grad = net.weight_gradients(&weights, &full)?.0;

    let mut g_hat: f64 = 0.0;
    let mut var = 0.0;
    for batch in train {
        let g = net.weight_gradients(&weights, batch)?.0;
        g_hat = g_hat.max(stacked_norm(&g));
        var += g
            .iter()
            .zip(&full_grad)
            .map(|(a, b)| a.sub(b).map(|d| d.frobenius_norm_sq()))
            .sum::<Result<f64>>()?;
    }
    let sigma_hat = (var / train.len() as f64).sqrt();

    let mut rng = Rng::new(seed);
    let mut tau_hat: f64 = 0.0;
    for _ in 0..n_probes {
        let (rp, rq) = (PROBE_RADIUS * rng.uniform(), PROBE_RADIUS * rng.uniform());
        let p = offset_weights(&weights, &random_sphere(&mut rng, &weights, rp))?;
        let q = offset_weights(&weights, &random_sphere(&mut rng, &weights, rq))?;
        let gp = net.weight_gradients(&p, &full)?.0;
        let gq = net.weight_gradients(&q, &full)?.0;
        let num = stacked_diff_norm(&gp, &gq)?;
        let den = stacked_diff_norm(&p, &q)?;
        if den > 0.0 {
            tau_hat = tau_hat.max(num / den);
        }
    }
    Ok(AssumptionConstants {
        tau_hat,
        g_hat,
        sigma_hat,
    })
}

fn stacked_diff_norm(a: &[Matrix], b: &[Matrix]) -> Result<f64> {
    Ok(a.iter()
        .zip(b)
        .map(|(x, y)| x.sub(y).map(|d| d.frobenius_norm_sq()))
        .sum::<Result<f64>>()?
        .sqrt())
}

/// Gaussian direction over all layers jointly, scaled to total norm `radius`.
fn random_sphere(rng: &mut Rng, like: &[Matrix], radius: f64) -> Vec<Matrix> {
    let dirs: Vec<Matrix> = like.iter().map(|w| rng.gaussian_matrix(w.rows(), w.cols(), 1.0)).collect();
    let norm = stacked_norm(&dirs);
    dirs.into_iter().map(|d| d.scaled(radius / norm)).collect()
}

/// Brute-force lower estimate of `max L(W + E) − L(W)` over per-layer balls
/// of radius `rho`: uniform samples on each layer's sphere plus the SAM direction.
pub fn neighborhood_max_oracle(net: &Network, batch: &Batch, rho: f64, n_samples: usize, seed: u64) -> Result<f64> {
    if n_samples == 0 {
        return Err(Error::Domain("need at least one sample".into()));
    }
    let weights = net.merged_weights();
    let (sam_eps, _, base) = sam_perturbation(net, &weights, batch, rho)?;
    let mut best = net.forward_with_weights(&offset_weights(&weights, &sam_eps)?, batch)?.1;
    let mut rng = Rng::new(seed);
    for _ in 0..n_samples {
        let eps: Vec<Matrix> = weights
            .iter()
            .map(|w| {
                let d = rng.gaussian_matrix(w.rows(), w.cols(), 1.0);
                let n = d.frobenius_norm();
                d.scaled(rho / n)
            })
            .collect();
        let loss = net.forward_with_weights(&offset_weights(&weights, &eps)?, batch)?.1;
        best = best.max(loss);
    }
    Ok(best - base)
}

/// `½(‖x‖² − ‖y‖²)`.
pub fn balancedness(x: &[f64], y: &[f64]) -> f64 {
    let sq = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>();
    0.5 * (sq(x) - sq(y))
}

/// Balancedness of a whole network, with `x = vec(B)` and `y = vec(A)` over all layers.
pub fn network_balancedness(net: &Network) -> f64 {
    let (bx, ay) = net.layers().iter().fold((0.0, 0.0), |(x, y), l| {
        (x + l.b().frobenius_norm_sq(), y + l.a().frobenius_norm_sq())
    });
    0.5 * (bx - ay)
}

/// Per-step record of the scale-invariant flow experiment.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BalancednessTrace {
    /// Balancedness before each step.
    pub b: Vec<f64>,
    /// `|B_{t+1} − B_t| / η`.
    pub db_dt_abs: Vec<f64>,
    /// `|ρ·(1/s)·(1/‖y_t‖)·‖g_x̃‖|`.
    pub rhs: Vec<f64>,
}

impl BalancednessTrace {
    pub fn len(&self) -> usize {
        self.b.len()
    }

    pub fn is_empty(&self) -> bool {
        self.b.is_empty()
    }

    /// Largest `db_dt_abs / rhs` over the trace (infinite if the bound side is zero
    /// while the drift is not).
    pub fn worst_ratio(&self) -> f64 {
        self.db_dt_abs
            .iter()
            .zip(&self.rhs)
            .map(|(&d, &r)| if d == 0.0 { 0.0 } else { d / r })
            .fold(0.0, f64::max)
    }
}

/// Runs the Flat-LoRA update on `½‖x yᵀ − M*‖²_F` from a seeded Gaussian start.
pub fn run_scale_invariant_flow(
    target: &Matrix,
    rho: f64,
    s: f64,
    eta: f64,
    steps: usize,
    seed: u64,
) -> Result<BalancednessTrace> {
    let mut rng = Rng::new(seed);
    let (n, m) = target.shape();
    let x0: Vec<f64> = rng.normal_vec(n).into_iter().map(|v| v / (n as f64).sqrt()).collect();
    let y0: Vec<f64> = rng.normal_vec(m).into_iter().map(|v| v / (m as f64).sqrt()).collect();
    run_scale_invariant_flow_from(target, x0, y0, rho, s, eta, steps)
}

/// [`run_scale_invariant_flow`] from an explicit starting pair.
///
/// Each step: `G = x yᵀ − M*`, `x̃ = x + ρ(1/s)(G/‖G‖) y⁺` with `y⁺ = yᵀ/‖y‖²`,
/// `G̃ = x̃ yᵀ − M*`, then `x ← x − η G̃ y` and `y ← y − η G̃ᵀ x̃`.
pub fn run_scale_invariant_flow_from(
    target: &Matrix,
    mut x: Vec<f64>,
    mut y: Vec<f64>,
    rho: f64,
    s: f64,
    eta: f64,
    steps: usize,
) -> Result<BalancednessTrace> {
    let (n, m) = target.shape();
    if x.len() != n || y.len() != m {
        return Err(Error::Shape {
            op: "scale_invariant_flow",
            left: (n, m),
            right: (x.len(), y.len()),
        });
    }
    if !(eta > 0.0 && s > 0.0 && rho >= 0.0) {
        return Err(Error::Domain(format!("need eta > 0, s > 0, rho >= 0 (got {eta}, {s}, {rho})")));
    }
    let residual = |x: &[f64], y: &[f64]| Matrix::from_fn(n, m, |i, j| x[i] * y[j] - target.get(i, j));
    let mat_vec = |g: &Matrix, v: &[f64]| -> Vec<f64> {
        (0..n).map(|i| g.row(i).iter().zip(v).map(|(a, b)| a * b).sum()).collect()
    };
    let mat_t_vec = |g: &Matrix, v: &[f64]| -> Vec<f64> {
        (0..m).map(|j| (0..n).map(|i| g.get(i, j) * v[i]).sum()).collect()
    };

    let mut trace = BalancednessTrace::default();
    for t in 0..steps {
        let y_norm = l2_norm(&y);
        if y_norm < 1e-12 {
            return Err(Error::DegenerateFactor(format!("‖y‖ = {y_norm:e} at step {t}")));
        }
        let g = residual(&x, &y);
        let g_norm = g.frobenius_norm();
        let gy = mat_vec(&g, &y);
        let x_tilde: Vec<f64> = if g_norm < DEGENERATE_NORM || rho == 0.0 {
            x.clone()
        } else {
            let k = rho / s / g_norm / (y_norm * y_norm);
            x.iter().zip(&gy).map(|(a, b)| a + k * b).collect()
        };
        let g_tilde = residual(&x_tilde, &y);
        let g_x = mat_vec(&g_tilde, &y);
        let g_y = mat_t_vec(&g_tilde, &x_tilde);

        let before = balancedness(&x, &y);
        for (xi, gi) in x.iter_mut().zip(&g_x) {
            *xi -= eta * gi;
        }
        for (yi, gi) in y.iter_mut().zip(&g_y) {
            *yi -= eta * gi;
        }
        let after = balancedness(&x, &y);
        if !(after.is_finite()) {
            return Err(Error::Numerical {
                step: t,
                detail: "balancedness diverged".into(),
            });
        }
        trace.b.push(before);
        trace.db_dt_abs.push((after - before).abs() / eta);
        trace.rhs.push((rho / s / y_norm * l2_norm(&g_x)).abs());
    }
    Ok(trace)
}

/// How well the `B` transfer reproduces a full-space perturbation.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct LossMatch {
    /// `|L(W0 + s(B+E^B)A) − L(W0 + sBA + Ē^W A⁺A)|`.
    pub projected_diff: f64,
    /// `‖Ē^W (I − A⁺A)‖_F` over all layers: the part the transfer cannot express.
    pub unprojected_residual: f64,
}

pub fn loss_match_residual(
    net: &Network,
    batch: &Batch,
    e_w_bar: &[Matrix],
    e_b: &[Matrix],
    tol: f64,
) -> Result<LossMatch> {
    let layers = net.layers();
    if e_w_bar.len() != layers.len() || e_b.len() != layers.len() {
        return Err(Error::Domain("perturbation count does not match layer count".into()));
    }
    let mut via_b = Vec::with_capacity(layers.len());
    let mut via_projection = Vec::with_capacity(layers.len());
    let mut residual_sq = 0.0;
    for ((layer, ew), eb) in layers.iter().zip(e_w_bar).zip(e_b) {
        via_b.push(layer.merged_weight_with_b(&layer.b().add(eb)?));
        let projected = ew.matmul(&row_space_projector(layer.a(), tol)?)?;
        residual_sq += ew.sub(&projected)?.frobenius_norm_sq();
        via_projection.push(layer.merged_weight().add(&projected)?);
    }
    let l_b = net.forward_with_weights(&via_b, batch)?.1;
    let l_p = net.forward_with_weights(&via_projection, batch)?.1;
    Ok(LossMatch {
        projected_diff: (l_b - l_p).abs(),
        unprojected_residual: residual_sq.sqrt(),
    })
}

/// EMA-vs-SAM sharpness at one EFlat-LoRA step.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct SharpnessReport {
    pub step: usize,
    pub s_sam: f64,
    pub s_ema: f64,
    pub gap: f64,
    /// Gap bound from the supplied constants; `None` before step 2.
    pub bound_rhs: Option<f64>,
}

/// Compares the EMA perturbation in `state` with the full-space SAM
/// perturbation of radius `ρ_t`, both at the unperturbed weights `w_t`.
pub fn sharpness_gap(
    net: &Network,
    batch: &Batch,
    state: &PerturbState,
    consts: &AssumptionConstants,
) -> Result<SharpnessReport> {
    let t = state.step_index();
    let weights = weights_with_b(net, &state.unperturbed_b(net));
    let rho_t = rho_at(state.rho0(), t.max(1), state.schedule())?;
    let s_sam = sharpness_sam_at(net, &weights, batch, rho_t)?.value;
    let s_ema = sharpness_ema(net, batch, state)?;
    let bound_rhs = if t >= 2 {
        Some(theorem2_rhs(consts, state.rho0(), state.beta(), t)?)
    } else {
        None
    };
    Ok(SharpnessReport {
        step: t,
        s_sam,
        s_ema,
        gap: (s_ema - s_sam).abs(),
        bound_rhs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn balancedness_examples() {
        assert_eq!(balancedness(&[3.0, 4.0], &[0.0, 5.0]), 0.0);
        assert_eq!(balancedness(&[2.0, 0.0], &[1.0, 1.0]), 1.0);
        let (x, y) = ([0.3, -1.2, 2.0], [0.7, 0.1]);
        assert_eq!(balancedness(&x, &y), -balancedness(&y, &x));
    }

    #[test]
    fn gap_bound_examples() {
        let zero = AssumptionConstants::default();
        for t in 2..10 {
            assert_eq!(theorem2_rhs(&zero, 0.1, 0.9, t).unwrap(), 0.0);
        }
        let ones = AssumptionConstants {
            tau_hat: 1.0,
            g_hat: 1.0,
            sigma_hat: 1.0,
        };
        let want = 2.1 * (0.1 / 2f64.sqrt() + 0.1 * 0.1 + 0.1);
        assert!((theorem2_rhs(&ones, 0.1, 0.9, 2).unwrap() - want).abs() < 1e-15);
        assert!(theorem2_rhs(&ones, 0.1, 0.9, 1).is_err());
        let mut prev = f64::INFINITY;
        for t in 2..500 {
            let v = theorem2_rhs(&ones, 0.1, 0.9, t).unwrap();
            assert!(v <= prev);
            prev = v;
        }
    }

    #[test]
    fn flow_rejects_vanishing_factor() {
        let target = Matrix::from_rows(&[&[1.0, 0.0]]).unwrap();
        let r = run_scale_invariant_flow_from(&target, vec![1.0], vec![0.0, 0.0], 0.1, 1.0, 1e-3, 3);
        assert!(matches!(r, Err(Error::DegenerateFactor(_))));
    }

    #[test]
    fn symmetric_start_is_balanced() {
        let target = Matrix::from_rows(&[&[1.0, 2.0], &[0.5, -1.0]]).unwrap();
        let tr = run_scale_invariant_flow_from(&target, vec![0.6, 0.8], vec![1.0, 0.0], 0.1, 1.0, 1e-3, 2).unwrap();
        assert_eq!(tr.b[0], 0.0);
        assert_eq!(tr.len(), 2);
    }
}
