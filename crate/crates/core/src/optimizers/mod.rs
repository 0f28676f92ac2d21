//! LoRA, naive LoRA-SAM, Flat-LoRA and EFlat-LoRA step rules, the radius
//! schedule, and the SGD base update they share.
//!
//! Perturbations are normalized per layer: each layer's full-space
//! perturbation `Ē^W` has Frobenius norm `ρ`. Only `B` is perturbed by the
//! Flat-LoRA family; the transfer `E^B = (1/s)·Ē^W·A⁺` reproduces the part of
//! `Ē^W` lying in the row space of `A`.

mod sgd;
mod steps;
mod transfer;

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::linalg::l2_norm;
use crate::model::{Batch, Network};

pub use sgd::{base_update, BaseUpdateConfig, Sgd};
#[doc(hidden)]
pub use steps::Fault;
pub use steps::{
    eflat_lora_step, flat_lora_step, lora_sam_step, lora_step, PerturbState, SharpnessOptions, StepStats,
};
pub use transfer::{
    b_perturbation_from_grads, full_to_lowrank_perturbation, perturbation_from_grads, perturbation_from_rho, reconstruct_full_gradient,
    TransferredPerturbation,
};

/// Gradient norms below this are treated as zero.
pub const DEGENERATE_NORM: f64 = 1e-20;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RhoSchedule {
    Constant,
    /// `ρ₀/√t`.
    InverseSqrt,
}

/// Radius at step `t ≥ 1`.
pub fn rho_at(rho0: f64, t: usize, schedule: RhoSchedule) -> Result<f64> {
    if t == 0 {
        return Err(Error::Domain("rho schedule is defined for t >= 1".into()));
    }
    Ok(match schedule {
        RhoSchedule::Constant => rho0,
        RhoSchedule::InverseSqrt => rho0 / (t as f64).sqrt(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DirectionVariant {
    /// `ρ·g/‖g‖`.
    Standard,
    /// `ρ·sign(g)⊙g/‖g‖ = ρ·|g|/‖g‖`.
    Signed,
}

/// A perturbation direction scaled to radius `ρ`.
#[derive(Debug, Clone, PartialEq)]
pub struct Direction {
    pub values: Vec<f64>,
    /// Set when `‖g‖` vanished; `values` is then all zeros.
    pub degenerate: bool,
}

pub fn sam_direction(g: &[f64], rho: f64, variant: DirectionVariant) -> Direction {
    let norm = l2_norm(g);
    if norm < DEGENERATE_NORM {
        return Direction {
            values: vec![0.0; g.len()],
            degenerate: true,
        };
    }
    let k = rho / norm;
    let values = match variant {
        DirectionVariant::Standard => g.iter().map(|x| k * x).collect(),
        DirectionVariant::Signed => g.iter().map(|x| k * x.abs()).collect(),
    };
    Direction {
        values,
        degenerate: false,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OptimizerKind {
    Lora,
    LoraSam,
    FlatLora,
    EflatLora,
}

impl OptimizerKind {
    pub const ALL: [OptimizerKind; 4] = [
        OptimizerKind::Lora,
        OptimizerKind::LoraSam,
        OptimizerKind::FlatLora,
        OptimizerKind::EflatLora,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OptimizerKind::Lora => "lora",
            OptimizerKind::LoraSam => "lora-sam",
            OptimizerKind::FlatLora => "flat-lora",
            OptimizerKind::EflatLora => "eflat-lora",
        }
    }

    /// Backward passes per step.
    pub fn grad_evals_per_step(self) -> u32 {
        match self {
            OptimizerKind::Lora | OptimizerKind::EflatLora => 1,
            OptimizerKind::LoraSam | OptimizerKind::FlatLora => 2,
        }
    }

    /// Extra optimizer memory as a multiple of the trainable element count.
    pub fn extra_memory_factor(self) -> f64 {
        match self {
            OptimizerKind::Lora => 0.0,
            // saved B and A plus the first-pass gradients of both
            OptimizerKind::LoraSam => 2.0,
            // saved B and A plus the gradient of A
            OptimizerKind::FlatLora => 1.5,
            // saved B and A plus the EMA perturbation
            OptimizerKind::EflatLora => 2.0,
        }
    }

    pub fn default_schedule(self) -> RhoSchedule {
        match self {
            OptimizerKind::EflatLora => RhoSchedule::InverseSqrt,
            _ => RhoSchedule::Constant,
        }
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        OptimizerKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Domain(format!("unknown optimizer `{s}`")))
    }
}

/// Element counts for trainable parameters and optimizer-specific extra memory.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct MemoryCounts {
    /// `Σ (n·r + r·m)` over layers.
    pub trainable: usize,
    pub extra_elements: f64,
}

pub fn param_and_memory_counts(net: &Network, kind: OptimizerKind) -> MemoryCounts {
    let trainable: usize = net.layers().iter().map(|l| l.out_dim() * l.rank() + l.rank() * l.in_dim()).sum();
    MemoryCounts {
        trainable,
        extra_elements: kind.extra_memory_factor() * trainable as f64,
    }
}

/// Everything needed to drive one of the four step rules.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub base: BaseUpdateConfig,
    pub rho0: f64,
    pub beta: f64,
    pub schedule: RhoSchedule,
    pub sharpness: SharpnessOptions,
}

impl OptimizerConfig {
    pub fn new(kind: OptimizerKind, base: BaseUpdateConfig, rho0: f64) -> Self {
        Self {
            kind,
            base,
            rho0,
            beta: 0.9,
            schedule: kind.default_schedule(),
            sharpness: SharpnessOptions::default(),
        }
    }
}

/// Stateful driver that dispatches to the configured step rule.
#[derive(Debug, Clone)]
pub struct Optimizer {
    cfg: OptimizerConfig,
    sgd: Sgd,
    state: Option<PerturbState>,
    steps_taken: usize,
}

impl Optimizer {
    pub fn new(cfg: OptimizerConfig, net: &Network) -> Result<Self> {
        cfg.base.validate()?;
        let state = match cfg.kind {
            OptimizerKind::EflatLora => Some(PerturbState::new(net, cfg.rho0, cfg.beta, cfg.schedule)?),
            _ => None,
        };
        Ok(Self {
            cfg,
            sgd: Sgd::new(cfg.base),
            state,
            steps_taken: 0,
        })
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.cfg
    }

    pub fn steps_taken(&self) -> usize {
        self.steps_taken
    }

    pub fn perturb_state(&self) -> Option<&PerturbState> {
        self.state.as_ref()
    }

    pub fn step(&mut self, net: &mut Network, batch: &Batch) -> Result<StepStats> {
        let t = self.steps_taken + 1;
        let stats = match self.cfg.kind {
            OptimizerKind::Lora => lora_step(net, batch, &mut self.sgd)?,
            OptimizerKind::LoraSam => {
                let rho = rho_at(self.cfg.rho0, t, self.cfg.schedule)?;
                lora_sam_step(net, batch, rho, &mut self.sgd)?
            }
            OptimizerKind::FlatLora => {
                let rho = rho_at(self.cfg.rho0, t, self.cfg.schedule)?;
                flat_lora_step(net, batch, rho, &mut self.sgd, &self.cfg.sharpness)?
            }
            OptimizerKind::EflatLora => {
                let state = self.state.as_mut().expect("eflat optimizer owns a perturbation state");
                eflat_lora_step(net, batch, state, &mut self.sgd, &self.cfg.sharpness)?
            }
        };
        self.steps_taken = t;
        Ok(stats)
    }

    /// Runs `f` at the unperturbed parameters (only EFlat-LoRA keeps a
    /// perturbation applied between steps).
    pub fn with_unperturbed<R>(&mut self, net: &mut Network, f: impl FnOnce(&Network) -> R) -> Result<R> {
        match self.state.as_mut() {
            Some(state) => state.with_unperturbed(net, f),
            None => Ok(f(net)),
        }
    }

    /// Removes any applied perturbation, leaving `net` at the trained parameters.
    pub fn finish(self, net: &mut Network) -> Result<()> {
        match self.state {
            Some(state) => state.finish(net),
            None => Ok(()),
        }
    }
}
