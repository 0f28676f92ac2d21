//! The four step rules. Every step reports how many backward passes it ran.

use std::time::{Duration, Instant};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::{Batch, Network, Perturbation};

use super::transfer::b_perturbation_from_grads;
use super::{rho_at, DirectionVariant, RhoSchedule, Sgd};

/// Outcome of one optimizer step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepStats {
    pub grad_evals: u32,
    /// Loss at the unperturbed point, when the step evaluated it.
    pub loss_original: Option<f64>,
    /// Loss at the point the update gradient was taken, for sharpness-aware steps.
    pub loss_perturbed: Option<f64>,
    /// Euclidean norm of the parameter-space perturbation applied for the update gradient.
    pub perturb_norm: f64,
    pub degenerate_layers: usize,
    pub wall_time: Duration,
}

/// Fault injection used by the `verify` mutation check.
#[doc(hidden)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    SkipRevert,
}

/// Settings shared by the sharpness-aware steps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SharpnessOptions {
    pub variant: DirectionVariant,
    pub svd_tol: f64,
    #[doc(hidden)]
    pub fault: Option<Fault>,
}

impl Default for SharpnessOptions {
    fn default() -> Self {
        Self {
            variant: DirectionVariant::Standard,
            svd_tol: crate::linalg::DEFAULT_RANK_TOL,
            fault: None,
        }
    }
}

/// Plain LoRA: one backward, one base update.
pub fn lora_step(net: &mut Network, batch: &Batch, sgd: &mut Sgd) -> Result<StepStats> {
    let start = Instant::now();
    let grads = net.backward(batch, false)?;
    sgd.apply(net, &grads)?;
    Ok(StepStats {
        grad_evals: 1,
        loss_original: Some(grads.loss),
        loss_perturbed: None,
        perturb_norm: 0.0,
        degenerate_layers: 0,
        wall_time: start.elapsed(),
    })
}

/// `ρ·M/‖M‖_F`, or zero when `M` vanishes.
fn normalized(m: &Matrix, rho: f64) -> (Matrix, bool) {
    let norm = m.frobenius_norm();
    if norm < super::DEGENERATE_NORM || rho == 0.0 {
        (Matrix::zeros(m.rows(), m.cols()), norm < super::DEGENERATE_NORM)
    } else {
        (m.scaled(rho / norm), false)
    }
}

/// Naive SAM on LoRA: independent radius-`rho` perturbations of every `B` and `A`.
pub fn lora_sam_step(net: &mut Network, batch: &Batch, rho: f64, sgd: &mut Sgd) -> Result<StepStats> {
    check_rho(rho)?;
    let start = Instant::now();
    let first = net.backward(batch, false)?;
    let mut degenerate = 0;
    let mut e_b = Vec::with_capacity(first.layers.len());
    let mut e_a = Vec::with_capacity(first.layers.len());
    for g in &first.layers {
        let (eb, db) = normalized(&g.b, rho);
        let (ea, da) = normalized(&g.a, rho);
        degenerate += db as usize + da as usize;
        e_b.push(eb);
        e_a.push(ea);
    }
    let perturb_norm = stacked_norm(&e_b).hypot(stacked_norm(&e_a));
    let handle = net.apply_perturbation(Some(&e_b), Some(&e_a))?;
    let second = net.backward(batch, false)?;
    net.revert(handle)?;
    sgd.apply(net, &second)?;
    Ok(StepStats {
        grad_evals: 2,
        loss_original: Some(first.loss),
        loss_perturbed: Some(second.loss),
        perturb_norm,
        degenerate_layers: degenerate,
        wall_time: start.elapsed(),
    })
}

/// Flat-LoRA: full-space perturbation transferred onto `B` (`A` is never
/// perturbed), gradient at the perturbed point, revert, base update.
pub fn flat_lora_step(
    net: &mut Network,
    batch: &Batch,
    rho: f64,
    sgd: &mut Sgd,
    opts: &SharpnessOptions,
) -> Result<StepStats> {
    check_rho(rho)?;
    let start = Instant::now();
    let first = net.backward(batch, false)?;
    let (e_b, degenerate_layers) = b_perturbation_from_grads(net, &first, rho, opts.variant, opts.svd_tol)?;
    let perturb_norm = stacked_norm(&e_b);
    let handle = net.apply_b_perturbation(&e_b)?;
    let second = net.backward(batch, false)?;
    if opts.fault != Some(Fault::SkipRevert) {
        net.revert(handle)?;
    }
    sgd.apply(net, &second)?;
    Ok(StepStats {
        grad_evals: 2,
        loss_original: Some(first.loss),
        loss_perturbed: Some(second.loss),
        perturb_norm,
        degenerate_layers,
        wall_time: start.elapsed(),
    })
}

fn stacked_norm(ms: &[Matrix]) -> f64 {
    ms.iter().map(Matrix::frobenius_norm_sq).sum::<f64>().sqrt()
}

fn check_rho(rho: f64) -> Result<()> {
    if !(rho >= 0.0 && rho.is_finite()) {
        return Err(Error::Domain(format!("rho must be non-negative, got {rho}")));
    }
    Ok(())
}

/// EMA perturbation state carried between EFlat-LoRA steps.
///
/// Between steps the network sits at the perturbed point `(B + Ê^B, A)`;
/// `applied` holds the exact factors to return to.
#[derive(Debug, Clone)]
pub struct PerturbState {
    ema_e_b: Vec<Matrix>,
    last_e_b: Vec<Matrix>,
    rho0: f64,
    beta: f64,
    schedule: RhoSchedule,
    step_index: usize,
    applied: Option<Perturbation>,
    degenerate_layers: usize,
}

impl PerturbState {
    /// Zero EMA, nothing applied. `beta` must lie in `(0, 1]`.
    pub fn new(net: &Network, rho0: f64, beta: f64, schedule: RhoSchedule) -> Result<Self> {
        check_rho(rho0)?;
        if !(beta > 0.0 && beta <= 1.0) {
            return Err(Error::Domain(format!("beta must lie in (0, 1], got {beta}")));
        }
        let zeros: Vec<Matrix> = net
            .layers()
            .iter()
            .map(|l| Matrix::zeros(l.b().rows(), l.b().cols()))
            .collect();
        Ok(Self {
            ema_e_b: zeros.clone(),
            last_e_b: zeros,
            rho0,
            beta,
            schedule,
            step_index: 0,
            applied: None,
            degenerate_layers: 0,
        })
    }

    pub fn ema_e_b(&self) -> &[Matrix] {
        &self.ema_e_b
    }

    pub fn last_e_b(&self) -> &[Matrix] {
        &self.last_e_b
    }

    pub fn rho0(&self) -> f64 {
        self.rho0
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn schedule(&self) -> RhoSchedule {
        self.schedule
    }

    pub fn step_index(&self) -> usize {
        self.step_index
    }

    pub fn currently_applied(&self) -> bool {
        self.applied.is_some()
    }

    /// Total count of zero-gradient layers seen so far.
    pub fn degenerate_layers(&self) -> usize {
        self.degenerate_layers
    }

    /// The unperturbed `B` of each layer.
    pub fn unperturbed_b(&self, net: &Network) -> Vec<Matrix> {
        (0..net.layers().len())
            .map(|i| match self.applied.as_ref().and_then(|h| h.original_b(i)) {
                Some(b) => b.clone(),
                None => net.layer(i).b().clone(),
            })
            .collect()
    }

    fn check_consistency(&self, net: &Network) -> Result<()> {
        if self.ema_e_b.len() != net.layers().len() {
            return Err(Error::State(format!(
                "state tracks {} layers, network has {}",
                self.ema_e_b.len(),
                net.layers().len()
            )));
        }
        match (&self.applied, self.step_index) {
            (Some(_), 0) => Err(Error::State("perturbation applied before the first step".into())),
            (None, t) if t > 0 => Err(Error::State(format!(
                "EMA perturbation of step {t} is not applied to the network"
            ))),
            (Some(handle), _) => {
                for (i, (layer, ema)) in net.layers().iter().zip(&self.ema_e_b).enumerate() {
                    let original = handle
                        .original_b(i)
                        .ok_or_else(|| Error::State(format!("layer {i} missing its saved B")))?;
                    let expected = original.add(ema)?;
                    if !layer.b().bit_eq(&expected) {
                        return Err(Error::State(format!(
                            "layer {i} B was modified outside the EFlat-LoRA loop"
                        )));
                    }
                }
                Ok(())
            }
            (None, _) => Ok(()),
        }
    }

    /// Runs `f` with the network at its unperturbed parameters, then restores
    /// the applied EMA perturbation exactly.
    pub fn with_unperturbed<R>(&mut self, net: &mut Network, f: impl FnOnce(&Network) -> R) -> Result<R> {
        self.check_consistency(net)?;
        let Some(handle) = self.applied.take() else {
            return Ok(f(net));
        };
        net.revert(handle)?;
        let out = f(net);
        self.applied = Some(net.apply_b_perturbation(&self.ema_e_b)?);
        Ok(out)
    }

    /// Leaves the network at its unperturbed parameters and ends the run.
    pub fn finish(mut self, net: &mut Network) -> Result<()> {
        self.check_consistency(net)?;
        if let Some(handle) = self.applied.take() {
            net.revert(handle)?;
        }
        Ok(())
    }
}

/// EFlat-LoRA: one backward at the currently applied perturbed point, a fresh
/// transferred perturbation from those gradients, revert, base update, EMA
/// update, and re-application of the EMA perturbation.
pub fn eflat_lora_step(
    net: &mut Network,
    batch: &Batch,
    state: &mut PerturbState,
    sgd: &mut Sgd,
    opts: &SharpnessOptions,
) -> Result<StepStats> {
    state.check_consistency(net)?;
    let t = state.step_index + 1;
    let rho = rho_at(state.rho0, t, state.schedule)?;
    let start = Instant::now();

    let grads = net.backward(batch, false)?;
    let (e_b, degenerate_layers) = b_perturbation_from_grads(net, &grads, rho, opts.variant, opts.svd_tol)?;
    let perturb_norm = stacked_norm(&state.ema_e_b);
    if let Some(handle) = state.applied.take() {
        net.revert(handle)?;
    }
    sgd.apply(net, &grads)?;

    let beta = state.beta;
    for (ema, e) in state.ema_e_b.iter_mut().zip(&e_b) {
        for (m, &x) in ema.as_mut_slice().iter_mut().zip(e.as_slice()) {
            *m = (1.0 - beta) * *m + beta * x;
        }
    }
    state.last_e_b = e_b;
    state.degenerate_layers += degenerate_layers;
    state.applied = Some(net.apply_b_perturbation(&state.ema_e_b)?);
    state.step_index = t;

    Ok(StepStats {
        grad_evals: 1,
        loss_original: None,
        loss_perturbed: Some(grads.loss),
        perturb_norm,
        degenerate_layers,
        wall_time: start.elapsed(),
    })
}
