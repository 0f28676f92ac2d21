use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::{GradientSet, Network};

/// Learning rate, heavy-ball momentum and L2 coefficient of the base update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BaseUpdateConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for BaseUpdateConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            momentum: 0.9,
            weight_decay: 0.0,
        }
    }
}

impl BaseUpdateConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Domain(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Domain(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Domain(format!("weight decay must be non-negative, got {}", self.weight_decay)));
        }
        Ok(())
    }
}

/// SGD with momentum over every `B` and `A`; `W0` is never touched.
///
/// `v ← μ·v + (g + λ·p)`, then `p ← p − η·v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    cfg: BaseUpdateConfig,
    velocity: Vec<(Matrix, Matrix)>,
}

impl Sgd {
    pub fn new(cfg: BaseUpdateConfig) -> Self {
        Self {
            cfg,
            velocity: Vec::new(),
        }
    }

    pub fn config(&self) -> &BaseUpdateConfig {
        &self.cfg
    }

    /// Momentum buffers as `(v_B, v_A)` per layer; empty before the first update.
    pub fn velocity(&self) -> &[(Matrix, Matrix)] {
        &self.velocity
    }

    pub fn apply(&mut self, net: &mut Network, grads: &GradientSet) -> Result<()> {
        if grads.layers.len() != net.layers().len() {
            return Err(Error::Domain(format!(
                "gradient set has {} layers, network has {}",
                grads.layers.len(),
                net.layers().len()
            )));
        }
        if self.velocity.is_empty() {
            self.velocity = net
                .layers()
                .iter()
                .map(|l| (Matrix::zeros(l.b().rows(), l.b().cols()), Matrix::zeros(l.a().rows(), l.a().cols())))
                .collect();
        }
        let BaseUpdateConfig {
            learning_rate: eta,
            momentum: mu,
            weight_decay: lambda,
        } = self.cfg;
        for ((layer, g), (vb, va)) in net.layers_mut().iter_mut().zip(&grads.layers).zip(&mut self.velocity) {
            update(layer.b_mut(), &g.b, vb, eta, mu, lambda)?;
            update(layer.a_mut(), &g.a, va, eta, mu, lambda)?;
        }
        Ok(())
    }
}

fn update(param: &mut Matrix, grad: &Matrix, vel: &mut Matrix, eta: f64, mu: f64, lambda: f64) -> Result<()> {
    if param.shape() != grad.shape() {
        return Err(Error::Shape {
            op: "base_update",
            left: param.shape(),
            right: grad.shape(),
        });
    }
    for ((p, &g), v) in param
        .as_mut_slice()
        .iter_mut()
        .zip(grad.as_slice())
        .zip(vel.as_mut_slice())
    {
        *v = mu * *v + (g + lambda * *p);
        *p -= eta * *v;
    }
    Ok(())
}

/// Applies one base update of `sgd` to the network's factors.
pub fn base_update(net: &mut Network, grads: &GradientSet, sgd: &mut Sgd) -> Result<()> {
    sgd.apply(net, grads)
}
