//! Feed-forward networks built from LoRA-adapted linear layers.
//!
//! Each layer computes `y = (W0 + s·B·A) x`. `W0` is frozen: there is no
//! mutable accessor for it. Columns of a [`Batch`] are examples and losses are
//! averaged over them.

use std::cell::Cell;

use crate::error::{Error, Result};
use crate::linalg::{Matrix, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, z: &Matrix) -> Matrix {
        match self {
            Activation::Tanh => z.map(f64::tanh),
            Activation::Relu => z.map(|v| v.max(0.0)),
            Activation::Identity => z.clone(),
        }
    }

    /// Derivative expressed through the pre-activation `z` and the output `h`.
    fn derivative(self, z: f64, h: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - h * h,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    /// `(1/N) Σ ½‖ŷ − y‖²`.
    MeanSquaredError,
    /// `−(1/N) Σ Σₖ yₖ log softmax(ŷ)ₖ` on raw logits.
    SoftmaxCrossEntropy,
}

/// Inputs and targets, one example per column.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Matrix,
    pub targets: Matrix,
}

impl Batch {
    pub fn new(inputs: Matrix, targets: Matrix) -> Result<Self> {
        if inputs.cols() != targets.cols() {
            return Err(Error::Shape {
                op: "batch",
                left: inputs.shape(),
                right: targets.shape(),
            });
        }
        Ok(Self { inputs, targets })
    }

    pub fn size(&self) -> usize {
        self.inputs.cols()
    }

    /// Column-wise concatenation of several batches.
    pub fn concat(batches: &[Batch]) -> Result<Batch> {
        let inputs: Vec<&Matrix> = batches.iter().map(|b| &b.inputs).collect();
        let targets: Vec<&Matrix> = batches.iter().map(|b| &b.targets).collect();
        Batch::new(Matrix::hstack(&inputs)?, Matrix::hstack(&targets)?)
    }
}

/// Frozen base weight plus trainable low-rank factors.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraLinear {
    w0: Matrix,
    b: Matrix,
    a: Matrix,
    scale: f64,
}

impl LoraLinear {
    /// `w0` is `n×m`, `b` is `n×r`, `a` is `r×m`, with `r ≤ min(n, m)`.
    pub fn new(w0: Matrix, b: Matrix, a: Matrix, scale: f64) -> Result<Self> {
        let (n, m) = w0.shape();
        let r = a.rows();
        if b.shape() != (n, r) {
            return Err(Error::Shape {
                op: "lora_linear(b)",
                left: w0.shape(),
                right: b.shape(),
            });
        }
        if a.cols() != m {
            return Err(Error::Shape {
                op: "lora_linear(a)",
                left: w0.shape(),
                right: a.shape(),
            });
        }
        if r > n.min(m) {
            return Err(Error::Domain(format!(
                "rank {r} exceeds min({n}, {m})"
            )));
        }
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::Domain(format!("scale must be positive, got {scale}")));
        }
        Ok(Self { w0, b, a, scale })
    }

    /// Standard LoRA start: `B = 0`, `A ~ N(0, 2/m)`.
    pub fn init(w0: Matrix, rank: usize, scale: f64, rng: &mut Rng) -> Result<Self> {
        let (n, m) = w0.shape();
        if rank == 0 {
            return Err(Error::Domain("rank must be at least 1".into()));
        }
        let a = rng.gaussian_matrix(rank, m, (2.0 / m as f64).sqrt());
        Self::new(w0, Matrix::zeros(n, rank), a, scale)
    }

    pub fn w0(&self) -> &Matrix {
        &self.w0
    }

    pub fn b(&self) -> &Matrix {
        &self.b
    }

    pub fn a(&self) -> &Matrix {
        &self.a
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn rank(&self) -> usize {
        self.a.rows()
    }

    pub fn in_dim(&self) -> usize {
        self.w0.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.w0.rows()
    }

    pub fn set_b(&mut self, b: Matrix) -> Result<()> {
        replace_same_shape(&mut self.b, b, "set_b")
    }

    pub fn set_a(&mut self, a: Matrix) -> Result<()> {
        replace_same_shape(&mut self.a, a, "set_a")
    }

    pub(crate) fn b_mut(&mut self) -> &mut Matrix {
        &mut self.b
    }

    pub(crate) fn a_mut(&mut self) -> &mut Matrix {
        &mut self.a
    }

    /// `W0 + s·B·A`, always recomputed.
    pub fn merged_weight(&self) -> Matrix {
        self.merged_weight_with_b(&self.b)
    }

    pub(crate) fn merged_weight_with_b(&self, b: &Matrix) -> Matrix {
        let mut w = self.w0.clone();
        let ba = b.matmul(&self.a).expect("lora factors are conformant");
        w.axpy(self.scale, &ba).expect("merged weight shape");
        w
    }

    pub fn trainable_count(&self) -> usize {
        self.b.len() + self.a.len()
    }
}

fn replace_same_shape(slot: &mut Matrix, value: Matrix, op: &'static str) -> Result<()> {
    if slot.shape() != value.shape() {
        return Err(Error::Shape {
            op,
            left: slot.shape(),
            right: value.shape(),
        });
    }
    *slot = value;
    Ok(())
}

/// Gradients for one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub b: Matrix,
    pub a: Matrix,
    /// Gradient with respect to the merged weight `W0 + sBA`, when requested.
    pub w: Option<Matrix>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub layers: Vec<LayerGrad>,
    /// Loss of the forward pass the gradients were taken at.
    pub loss: f64,
}

impl GradientSet {
    /// Euclidean norm over every `B` and `A` gradient.
    pub fn lowrank_norm(&self) -> f64 {
        self.layers
            .iter()
            .map(|g| g.b.frobenius_norm_sq() + g.a.frobenius_norm_sq())
            .sum::<f64>()
            .sqrt()
    }
}

/// Saved factors that undo an applied perturbation when passed to
/// [`Network::revert`].
#[must_use = "an applied perturbation stays in the network until reverted"]
#[derive(Debug, Clone)]
pub struct Perturbation {
    original_b: Vec<Option<Matrix>>,
    original_a: Vec<Option<Matrix>>,
}

impl Perturbation {
    pub fn original_b(&self, layer: usize) -> Option<&Matrix> {
        self.original_b.get(layer).and_then(Option::as_ref)
    }

    pub fn original_a(&self, layer: usize) -> Option<&Matrix> {
        self.original_a.get(layer).and_then(Option::as_ref)
    }

    pub fn layer_count(&self) -> usize {
        self.original_b.len()
    }
}

/// Stack of LoRA layers with a shared hidden activation and a loss head.
#[derive(Debug, Clone)]
pub struct Network {
    layers: Vec<LoraLinear>,
    activation: Activation,
    loss: LossKind,
    backward_calls: Cell<u64>,
}

struct Trace {
    /// `xs[i]` feeds layer `i`; the last entry is the raw output.
    xs: Vec<Matrix>,
    zs: Vec<Matrix>,
    loss: f64,
    output_delta: Matrix,
}

impl Network {
    pub fn new(layers: Vec<LoraLinear>, activation: Activation, loss: LossKind) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Domain("network needs at least one layer".into()));
        }
        for pair in layers.windows(2) {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::Shape {
                    op: "network",
                    left: pair[0].w0().shape(),
                    right: pair[1].w0().shape(),
                });
            }
        }
        Ok(Self {
            layers,
            activation,
            loss,
            backward_calls: Cell::new(0),
        })
    }

    /// LoRA-initialized network over the given frozen weights.
    pub fn from_base_weights(
        base: Vec<Matrix>,
        rank: usize,
        scale: f64,
        activation: Activation,
        loss: LossKind,
        rng: &mut Rng,
    ) -> Result<Self> {
        let layers = base
            .into_iter()
            .map(|w0| LoraLinear::init(w0, rank, scale, rng))
            .collect::<Result<Vec<_>>>()?;
        Self::new(layers, activation, loss)
    }

    pub fn layers(&self) -> &[LoraLinear] {
        &self.layers
    }

    pub fn layer(&self, i: usize) -> &LoraLinear {
        &self.layers[i]
    }

    pub fn layer_mut(&mut self, i: usize) -> &mut LoraLinear {
        &mut self.layers[i]
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [LoraLinear] {
        &mut self.layers
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn loss_kind(&self) -> LossKind {
        self.loss
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    pub fn trainable_count(&self) -> usize {
        self.layers.iter().map(LoraLinear::trainable_count).sum()
    }

    /// Number of backward passes run on this network (clones inherit the count).
    pub fn backward_count(&self) -> u64 {
        self.backward_calls.get()
    }

    pub fn merged_weights(&self) -> Vec<Matrix> {
        self.layers.iter().map(LoraLinear::merged_weight).collect()
    }

    pub fn forward(&self, batch: &Batch) -> Result<(Matrix, f64)> {
        self.forward_with_weights(&self.merged_weights(), batch)
    }

    pub fn loss(&self, batch: &Batch) -> Result<f64> {
        Ok(self.forward(batch)?.1)
    }

    /// Evaluates the same architecture with arbitrary per-layer weights.
    pub fn forward_with_weights(&self, weights: &[Matrix], batch: &Batch) -> Result<(Matrix, f64)> {
        let mut trace = self.trace(weights, batch)?;
        let out = trace.xs.pop().expect("trace holds the output");
        Ok((out, trace.loss))
    }

    /// Gradients of the loss with respect to each layer's full weight, at `weights`.
    pub fn weight_gradients(&self, weights: &[Matrix], batch: &Batch) -> Result<(Vec<Matrix>, f64)> {
        let trace = self.trace(weights, batch)?;
        let loss = trace.loss;
        Ok((self.backprop(weights, trace)?, loss))
    }

    /// Exact gradients with respect to every `B` and `A` (and the merged `W` on request).
    pub fn backward(&self, batch: &Batch, want_grad_w: bool) -> Result<GradientSet> {
        self.backward_calls.set(self.backward_calls.get() + 1);
        let weights = self.merged_weights();
        let (grad_w, loss) = self.weight_gradients(&weights, batch)?;
        let layers = self
            .layers
            .iter()
            .zip(grad_w)
            .map(|(layer, gw)| {
                let b = gw.matmul_t(&layer.a)?.scaled(layer.scale);
                let a = layer.b.t_matmul(&gw)?.scaled(layer.scale);
                Ok(LayerGrad {
                    b,
                    a,
                    w: want_grad_w.then_some(gw),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(GradientSet { layers, loss })
    }

    fn trace(&self, weights: &[Matrix], batch: &Batch) -> Result<Trace> {
        if weights.len() != self.layers.len() {
            return Err(Error::Domain(format!(
                "expected {} weight matrices, got {}",
                self.layers.len(),
                weights.len()
            )));
        }
        for (w, layer) in weights.iter().zip(&self.layers) {
            if w.shape() != layer.w0.shape() {
                return Err(Error::Shape {
                    op: "forward(weights)",
                    left: layer.w0.shape(),
                    right: w.shape(),
                });
            }
        }
        if batch.inputs.rows() != self.input_dim() {
            return Err(Error::Shape {
                op: "forward(inputs)",
                left: weights[0].shape(),
                right: batch.inputs.shape(),
            });
        }
        if batch.targets.rows() != self.output_dim() {
            return Err(Error::Shape {
                op: "forward(targets)",
                left: weights[weights.len() - 1].shape(),
                right: batch.targets.shape(),
            });
        }

        let last = weights.len() - 1;
        let mut xs = Vec::with_capacity(weights.len() + 1);
        let mut zs = Vec::with_capacity(weights.len());
        xs.push(batch.inputs.clone());
        for (i, w) in weights.iter().enumerate() {
            let z = w.matmul(&xs[i])?;
            let h = if i == last {
                z.clone()
            } else {
                self.activation.apply(&z)
            };
            zs.push(z);
            xs.push(h);
        }
        let (loss, output_delta) = loss_and_delta(self.loss, &xs[weights.len()], &batch.targets);
        Ok(Trace {
            xs,
            zs,
            loss,
            output_delta,
        })
    }

    fn backprop(&self, weights: &[Matrix], trace: Trace) -> Result<Vec<Matrix>> {
        let Trace {
            xs,
            zs,
            output_delta,
            ..
        } = trace;
        let mut grads = vec![None; weights.len()];
        let mut delta = output_delta;
        for i in (0..weights.len()).rev() {
            grads[i] = Some(delta.matmul_t(&xs[i])?);
            if i > 0 {
                let back = weights[i].t_matmul(&delta)?;
                let (z, h) = (&zs[i - 1], &xs[i]);
                delta = Matrix::from_fn(back.rows(), back.cols(), |r, c| {
                    back.get(r, c) * self.activation.derivative(z.get(r, c), h.get(r, c))
                });
            }
        }
        Ok(grads.into_iter().map(|g| g.expect("every layer visited")).collect())
    }

    /// Adds `e_b` to every `B`. See [`Network::apply_perturbation`].
    pub fn apply_b_perturbation(&mut self, e_b: &[Matrix]) -> Result<Perturbation> {
        self.apply_perturbation(Some(e_b), None)
    }

    /// Adds the given offsets to `B` and/or `A`, returning a handle that restores
    /// the exact previous values.
    pub fn apply_perturbation(
        &mut self,
        e_b: Option<&[Matrix]>,
        e_a: Option<&[Matrix]>,
    ) -> Result<Perturbation> {
        let n = self.layers.len();
        for (offsets, is_b) in [(e_b, true), (e_a, false)] {
            let Some(offsets) = offsets else { continue };
            if offsets.len() != n {
                return Err(Error::Domain(format!(
                    "expected {n} perturbation matrices, got {}",
                    offsets.len()
                )));
            }
            for (layer, e) in self.layers.iter().zip(offsets) {
                let target = if is_b { &layer.b } else { &layer.a };
                if target.shape() != e.shape() {
                    return Err(Error::Shape {
                        op: if is_b { "apply_perturbation(b)" } else { "apply_perturbation(a)" },
                        left: target.shape(),
                        right: e.shape(),
                    });
                }
            }
        }
        let mut handle = Perturbation {
            original_b: vec![None; n],
            original_a: vec![None; n],
        };
        for (i, layer) in self.layers.iter_mut().enumerate() {
            if let Some(e_b) = e_b {
                let next = layer.b.add(&e_b[i])?;
                handle.original_b[i] = Some(std::mem::replace(&mut layer.b, next));
            }
            if let Some(e_a) = e_a {
                let next = layer.a.add(&e_a[i])?;
                handle.original_a[i] = Some(std::mem::replace(&mut layer.a, next));
            }
        }
        Ok(handle)
    }

    /// Restores the factors saved in `handle`, bit-for-bit.
    pub fn revert(&mut self, handle: Perturbation) -> Result<()> {
        if handle.layer_count() != self.layers.len() {
            return Err(Error::State(format!(
                "perturbation handle covers {} layers, network has {}",
                handle.layer_count(),
                self.layers.len()
            )));
        }
        for (i, (b, a)) in handle
            .original_b
            .into_iter()
            .zip(handle.original_a)
            .enumerate()
        {
            if let Some(b) = b {
                replace_same_shape(&mut self.layers[i].b, b, "revert(b)")?;
            }
            if let Some(a) = a {
                replace_same_shape(&mut self.layers[i].a, a, "revert(a)")?;
            }
        }
        Ok(())
    }
}

fn loss_and_delta(kind: LossKind, output: &Matrix, targets: &Matrix) -> (f64, Matrix) {
    let n = output.cols() as f64;
    match kind {
        LossKind::MeanSquaredError => {
            let diff = output.sub(targets).expect("checked shapes");
            let loss = 0.5 * diff.frobenius_norm_sq() / n;
            (loss, diff.scaled(1.0 / n))
        }
        LossKind::SoftmaxCrossEntropy => {
            let (k, cols) = output.shape();
            let mut delta = Matrix::zeros(k, cols);
            let mut total = 0.0;
            for c in 0..cols {
                let max = (0..k).map(|r| output.get(r, c)).fold(f64::NEG_INFINITY, f64::max);
                let sum_exp: f64 = (0..k).map(|r| (output.get(r, c) - max).exp()).sum();
                let log_z = max + sum_exp.ln();
                let mass: f64 = (0..k).map(|r| targets.get(r, c)).sum();
                for r in 0..k {
                    let t = targets.get(r, c);
                    let logit = output.get(r, c);
                    total += t * (log_z - logit);
                    let p = (logit - log_z).exp();
                    delta.set(r, c, (p * mass - t) / n);
                }
            }
            (total / n, delta)
        }
    }
}

/// Full-space shift `s·E^B·A` produced by perturbing `B` by `e_b`.
pub fn effective_full_perturbation(e_b: &Matrix, a: &Matrix, s: f64) -> Result<Matrix> {
    Ok(e_b.matmul(a)?.scaled(s))
}
