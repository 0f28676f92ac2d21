pub mod error;
pub mod harness;
pub mod linalg;
pub mod model;
pub mod diagnostics;
pub mod optimizers;

pub use error::{Error, Result};
pub use linalg::{Matrix, Rng};
pub use model::{Activation, Batch, GradientSet, LayerGrad, LoraLinear, LossKind, Network, Perturbation};
pub use optimizers::{Optimizer, OptimizerConfig, OptimizerKind};
