//! Self-check suite behind the `verify` subcommand. Each check reports its
//! observed residual against a tolerance.

use std::fmt::Write as _;

use crate::diagnostics::{
    loss_match_residual, neighborhood_max_oracle, run_scale_invariant_flow, sharpness_sam,
};
use crate::error::Result;
use crate::linalg::{col_space_projector, pseudo_inverse, row_space_projector, Matrix, Rng, DEFAULT_RANK_TOL};
use crate::model::{Activation, Batch, LoraLinear, LossKind, Network};
use crate::optimizers::{
    eflat_lora_step, flat_lora_step, lora_sam_step, lora_step, perturbation_from_grads, perturbation_from_rho,
    reconstruct_full_gradient, BaseUpdateConfig, DirectionVariant, Fault, PerturbState, RhoSchedule, Sgd,
    SharpnessOptions,
};

use super::config::ExperimentConfig;
use super::run::run_experiment;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub module: &'static str,
    pub invariant: String,
    pub residual: f64,
    pub tolerance: f64,
    /// Reported for reference only; never fails the suite.
    pub informational: bool,
    pub note: Option<String>,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.informational || self.residual <= self.tolerance
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct VerifyReport {
    pub checks: Vec<CheckResult>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(CheckResult::passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckResult> {
        self.checks.iter().filter(|c| !c.passed())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for c in &self.checks {
            let status = match (c.informational, c.passed()) {
                (true, _) => "INFO",
                (false, true) => "PASS",
                (false, false) => "FAIL",
            };
            let _ = write!(
                s,
                "{status} {}: {} (residual {:e}, tolerance {:e})",
                c.module, c.invariant, c.residual, c.tolerance
            );
            if let Some(note) = &c.note {
                let _ = write!(s, " [{note}]");
            }
            s.push('\n');
        }
        s
    }
}

/// Options for [`verify`]. `fault` deliberately breaks the Flat-LoRA step so
/// the suite can demonstrate that it notices.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct VerifyOptions {
    #[doc(hidden)]
    pub fault: Option<Fault>,
}

struct Suite {
    checks: Vec<CheckResult>,
}

impl Suite {
    fn check(&mut self, module: &'static str, invariant: &str, tolerance: f64, f: impl FnOnce() -> Result<f64>) {
        let (residual, note) = match f() {
            Ok(r) if r.is_nan() => (f64::INFINITY, Some("residual is NaN".to_string())),
            Ok(r) => (r, None),
            Err(e) => (f64::INFINITY, Some(e.to_string())),
        };
        self.checks.push(CheckResult {
            module,
            invariant: invariant.into(),
            residual,
            tolerance,
            informational: false,
            note,
        });
    }

    fn info(&mut self, module: &'static str, invariant: &str, f: impl FnOnce() -> Result<f64>) {
        self.check(module, invariant, f64::INFINITY, f);
        if let Some(last) = self.checks.last_mut() {
            last.informational = true;
        }
    }
}

/// Random factor of shape `rows × cols` and rank at most `rank`.
fn low_rank(rng: &mut Rng, rows: usize, cols: usize, rank: usize) -> Result<Matrix> {
    rng.gaussian_matrix(rows, rank, 1.0).matmul(&rng.gaussian_matrix(rank, cols, 1.0))
}

/// Network with random `W0`, `B` and `A` (so both factor gradients are nonzero).
fn random_network(rng: &mut Rng, dims: &[usize], rank: usize, activation: Activation, loss: LossKind) -> Result<Network> {
    let layers = dims
        .windows(2)
        .map(|w| {
            let (m, n) = (w[0], w[1]);
            let r = rank.min(m).min(n);
            let std = 1.0 / (m as f64).sqrt();
            LoraLinear::new(
                rng.gaussian_matrix(n, m, std),
                rng.gaussian_matrix(n, r, 0.5),
                rng.gaussian_matrix(r, m, std),
                0.5 + rng.uniform(),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Network::new(layers, activation, loss)
}

fn random_batch(rng: &mut Rng, net: &Network, size: usize) -> Result<Batch> {
    let inputs = rng.gaussian_matrix(net.input_dim(), size, 1.0);
    let targets = match net.loss_kind() {
        LossKind::MeanSquaredError => rng.gaussian_matrix(net.output_dim(), size, 1.0),
        LossKind::SoftmaxCrossEntropy => {
            let k = net.output_dim();
            let mut t = Matrix::zeros(k, size);
            for j in 0..size {
                t.set(rng.below(k), j, 1.0);
            }
            t
        }
    };
    Batch::new(inputs, targets)
}

fn random_dims(rng: &mut Rng, depth: usize, max: usize) -> Vec<usize> {
    (0..=depth).map(|_| rng.range_inclusive(1, max)).collect()
}

fn moore_penrose_residual(rng: &mut Rng, cases: usize) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let (m, n) = (rng.range_inclusive(1, 8), rng.range_inclusive(1, 8));
        let k = rng.range_inclusive(1, m.min(n));
        let a = low_rank(rng, m, n, k)?;
        let p = pseudo_inverse(&a, DEFAULT_RANK_TOL)?;
        let ap = a.matmul(&p)?;
        let pa = p.matmul(&a)?;
        let rel = |x: Matrix, target: &Matrix| -> Result<f64> {
            Ok(x.sub(target)?.frobenius_norm() / target.frobenius_norm().max(1.0))
        };
        worst = worst
            .max(rel(ap.matmul(&a)?, &a)?)
            .max(rel(pa.matmul(&p)?, &p)?)
            .max(rel(ap.transpose(), &ap)?)
            .max(rel(pa.transpose(), &pa)?);
    }
    Ok(worst)
}

fn projector_residual(rng: &mut Rng, cases: usize) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let (m, n) = (rng.range_inclusive(1, 8), rng.range_inclusive(1, 8));
        let k = rng.range_inclusive(1, m.min(n));
        let a = low_rank(rng, m, n, k)?;
        for p in [row_space_projector(&a, DEFAULT_RANK_TOL)?, col_space_projector(&a, DEFAULT_RANK_TOL)?] {
            worst = worst
                .max(p.matmul(&p)?.max_abs_diff(&p))
                .max(p.transpose().max_abs_diff(&p));
        }
    }
    Ok(worst)
}

/// Largest relative error between analytic and central-difference factor gradients.
fn finite_difference_error(rng: &mut Rng, cases: usize) -> Result<f64> {
    const H: f64 = 1e-5;
    let mut worst: f64 = 0.0;
    for case in 0..cases {
        let activation = if case % 2 == 0 { Activation::Tanh } else { Activation::Identity };
        let loss = if case % 3 == 0 { LossKind::SoftmaxCrossEntropy } else { LossKind::MeanSquaredError };
        let mut dims = random_dims(rng, 2, 5);
        if loss == LossKind::SoftmaxCrossEntropy {
            dims[2] = dims[2].max(2);
        }
        let mut net = random_network(rng, &dims, 2, activation, loss)?;
        let batch = random_batch(rng, &net, 4)?;
        let grads = net.backward(&batch, false)?;
        for li in 0..net.layers().len() {
            for which in 0..2 {
                let analytic = if which == 0 { &grads.layers[li].b } else { &grads.layers[li].a };
                for idx in 0..analytic.len() {
                    let eval = |net: &mut Network, delta: f64| -> Result<f64> {
                        let layer = net.layer_mut(li);
                        let mut p = if which == 0 { layer.b().clone() } else { layer.a().clone() };
                        p.as_mut_slice()[idx] += delta;
                        if which == 0 {
                            layer.set_b(p)?;
                        } else {
                            layer.set_a(p)?;
                        }
                        net.loss(&batch)
                    };
                    let saved = net.layer(li).clone();
                    let plus = eval(&mut net, H)?;
                    *net.layer_mut(li) = saved.clone();
                    let minus = eval(&mut net, -H)?;
                    *net.layer_mut(li) = saved;
                    let numeric = (plus - minus) / (2.0 * H);
                    let a = analytic.as_slice()[idx];
                    worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6));
                }
            }
        }
    }
    Ok(worst)
}

fn chain_identity_residual(rng: &mut Rng, cases: usize) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let dims = random_dims(rng, 2, 6);
        let net = random_network(rng, &dims, 3, Activation::Tanh, LossKind::MeanSquaredError)?;
        let batch = random_batch(rng, &net, 5)?;
        let grads = net.backward(&batch, true)?;
        for (layer, g) in net.layers().iter().zip(&grads.layers) {
            let gw = g.w.as_ref().expect("requested grad_w");
            let s = layer.scale();
            worst = worst
                .max(g.b.max_abs_diff(&gw.matmul_t(layer.a())?.scaled(s)))
                .max(g.a.max_abs_diff(&layer.b().t_matmul(gw)?.scaled(s)));
        }
    }
    Ok(worst)
}

fn reconstruction_residual(rng: &mut Rng, cases: usize) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let dims = random_dims(rng, 1, 7);
        let net = random_network(rng, &dims, 3, Activation::Identity, LossKind::MeanSquaredError)?;
        let batch = random_batch(rng, &net, 6)?;
        let grads = net.backward(&batch, true)?;
        let (layer, g) = (net.layer(0), &grads.layers[0]);
        let gw = g.w.as_ref().expect("requested grad_w");
        let got = reconstruct_full_gradient(&g.b, &g.a, layer.a(), layer.b(), layer.scale(), DEFAULT_RANK_TOL)?;
        let pa = row_space_projector(layer.a(), DEFAULT_RANK_TOL)?;
        let pb = col_space_projector(layer.b(), DEFAULT_RANK_TOL)?;
        let mut want = gw.matmul(&pa)?;
        want.axpy(1.0, &pb.matmul(gw)?)?;
        worst = worst.max(got.max_abs_diff(&want.scaled(0.5)) / gw.max_abs().max(1.0));
    }
    Ok(worst)
}

fn max_param_diff(a: &Network, b: &Network) -> f64 {
    a.layers()
        .iter()
        .zip(b.layers())
        .map(|(x, y)| x.b().max_abs_diff(y.b()).max(x.a().max_abs_diff(y.a())))
        .fold(0.0, f64::max)
}

fn degeneration_residual(rng: &mut Rng) -> Result<f64> {
    let net0 = random_network(rng, &[4, 5, 3], 2, Activation::Tanh, LossKind::MeanSquaredError)?;
    let batch = random_batch(rng, &net0, 6)?;
    let base = BaseUpdateConfig {
        learning_rate: 0.05,
        momentum: 0.9,
        weight_decay: 1e-3,
    };
    let opts = SharpnessOptions::default();
    let mut reference = net0.clone();
    let mut sgd = Sgd::new(base);
    for _ in 0..3 {
        lora_step(&mut reference, &batch, &mut sgd)?;
    }
    let mut worst: f64 = 0.0;

    let (mut net, mut sgd) = (net0.clone(), Sgd::new(base));
    for _ in 0..3 {
        lora_sam_step(&mut net, &batch, 0.0, &mut sgd)?;
    }
    worst = worst.max(max_param_diff(&net, &reference));

    let (mut net, mut sgd) = (net0.clone(), Sgd::new(base));
    for _ in 0..3 {
        flat_lora_step(&mut net, &batch, 0.0, &mut sgd, &opts)?;
    }
    worst = worst.max(max_param_diff(&net, &reference));

    let (mut net, mut sgd) = (net0.clone(), Sgd::new(base));
    let mut state = PerturbState::new(&net, 0.0, 0.9, RhoSchedule::InverseSqrt)?;
    for _ in 0..3 {
        eflat_lora_step(&mut net, &batch, &mut state, &mut sgd, &opts)?;
    }
    state.finish(&mut net)?;
    Ok(worst.max(max_param_diff(&net, &reference)))
}

fn ema_residual(rng: &mut Rng) -> Result<f64> {
    let mut net = random_network(rng, &[5, 4, 3], 2, Activation::Tanh, LossKind::MeanSquaredError)?;
    let batch = random_batch(rng, &net, 8)?;
    let beta = 0.7;
    let mut state = PerturbState::new(&net, 0.1, beta, RhoSchedule::InverseSqrt)?;
    let mut sgd = Sgd::new(BaseUpdateConfig::default());
    let mut history: Vec<Vec<Matrix>> = Vec::new();
    for _ in 0..10 {
        eflat_lora_step(&mut net, &batch, &mut state, &mut sgd, &SharpnessOptions::default())?;
        history.push(state.last_e_b().to_vec());
    }
    let t = history.len();
    let mut worst: f64 = 0.0;
    for (li, ema) in state.ema_e_b().iter().enumerate() {
        let mut want = Matrix::zeros(ema.rows(), ema.cols());
        for (k, e) in history.iter().enumerate() {
            want.axpy(beta * (1.0 - beta).powi((t - 1 - k) as i32), &e[li])?;
        }
        worst = worst.max(ema.max_abs_diff(&want));
    }
    Ok(worst)
}

/// A Flat-LoRA step must equal: gradient, transferred perturbation, gradient
/// at the perturbed point, exact restore of `B`, base update.
fn composition_residual(rng: &mut Rng, fault: Option<Fault>) -> Result<f64> {
    let net0 = random_network(rng, &[6, 5, 3], 2, Activation::Tanh, LossKind::MeanSquaredError)?;
    let batch = random_batch(rng, &net0, 8)?;
    let base = BaseUpdateConfig::default();
    let rho = 0.05;

    let mut reference = net0.clone();
    let first = reference.backward(&batch, false)?;
    let pert = perturbation_from_grads(&reference, &first, rho, DirectionVariant::Standard, DEFAULT_RANK_TOL)?;
    let saved: Vec<Matrix> = reference.layers().iter().map(|l| l.b().clone()).collect();
    for (i, e) in pert.e_b.iter().enumerate() {
        let b = saved[i].add(e)?;
        reference.layer_mut(i).set_b(b)?;
    }
    let second = reference.backward(&batch, false)?;
    for (i, b) in saved.into_iter().enumerate() {
        reference.layer_mut(i).set_b(b)?;
    }
    Sgd::new(base).apply(&mut reference, &second)?;

    let mut net = net0;
    let opts = SharpnessOptions {
        fault,
        ..SharpnessOptions::default()
    };
    flat_lora_step(&mut net, &batch, rho, &mut Sgd::new(base), &opts)?;
    Ok(max_param_diff(&net, &reference))
}

fn loss_match_worst(rng: &mut Rng, cases: usize) -> Result<(f64, f64)> {
    let (mut projected, mut unprojected): (f64, f64) = (0.0, 0.0);
    for _ in 0..cases {
        let dims = random_dims(rng, 2, 6);
        let net = random_network(rng, &dims, 3, Activation::Tanh, LossKind::MeanSquaredError)?;
        let batch = random_batch(rng, &net, 5)?;
        let pert = perturbation_from_rho(&net, &batch, 0.1, DirectionVariant::Standard, DEFAULT_RANK_TOL)?;
        let m = loss_match_residual(&net, &batch, &pert.e_w_bar, &pert.e_b, DEFAULT_RANK_TOL)?;
        projected = projected.max(m.projected_diff);
        unprojected = unprojected.max(m.unprojected_residual);
    }
    Ok((projected, unprojected))
}

fn oracle_dominance(rng: &mut Rng, cases: usize) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for seed in 0..cases as u64 {
        let dims = random_dims(rng, 2, 5);
        let net = random_network(rng, &dims, 2, Activation::Tanh, LossKind::MeanSquaredError)?;
        let batch = random_batch(rng, &net, 6)?;
        let rho = 0.05;
        let sam = sharpness_sam(&net, &batch, rho)?.value;
        let oracle = neighborhood_max_oracle(&net, &batch, rho, 20, seed)?;
        worst = worst.max(sam - oracle);
    }
    Ok(worst)
}

fn small_run_config() -> ExperimentConfig {
    ExperimentConfig {
        layer_dims: vec![6, 5, 3],
        rank: 2,
        steps: 20,
        eval_every: 5,
        train_batches: 2,
        batch_size: 8,
        eval_size: 16,
        seed: 11,
        ..ExperimentConfig::default()
    }
}

fn csv_lines(cfg: &ExperimentConfig) -> Result<Vec<String>> {
    Ok(run_experiment(cfg)?.records.iter().map(|r| r.csv_row()).collect())
}

/// Runs every check. Never panics on a failing check; the report says which.
pub fn verify(opts: VerifyOptions) -> VerifyReport {
    let mut rng = Rng::new(20_240_917);
    let mut s = Suite { checks: Vec::new() };

    s.check("linalg", "Moore-Penrose conditions", 1e-9, || moore_penrose_residual(&mut rng, 100));
    s.check("linalg", "projector idempotence and symmetry", 1e-10, || projector_residual(&mut rng, 100));
    s.check("model", "factor gradients match central differences", 1e-4, || {
        finite_difference_error(&mut rng, 6)
    });
    s.check("model", "grad_b = s grad_w a^T and grad_a = s b^T grad_w", 1e-10, || {
        chain_identity_residual(&mut rng, 20)
    });
    s.check("optimizers", "reconstruction equals 0.5 (G P_A + P_B G)", 1e-9, || {
        reconstruction_residual(&mut rng, 50)
    });
    s.check("optimizers", "rho = 0 reproduces plain LoRA steps", 1e-12, || degeneration_residual(&mut rng));
    s.check("optimizers", "EMA matches its geometric sum", 1e-10, || ema_residual(&mut rng));
    s.check("optimizers", "flat-lora step restores B before the base update", 1e-12, || {
        composition_residual(&mut rng, opts.fault)
    });

    let loss_match = loss_match_worst(&mut rng, 30);
    let (projected, unprojected) = match &loss_match {
        Ok((p, u)) => (Ok(*p), Ok(*u)),
        Err(e) => (Err(e.to_string()), Err(e.to_string())),
    };
    s.check("diagnostics", "projected loss match of the B transfer", 1e-10, || {
        projected.map_err(crate::Error::State)
    });
    s.info("diagnostics", "unprojected transfer residual", || unprojected.map_err(crate::Error::State));
    s.check("diagnostics", "neighborhood oracle dominates SAM sharpness", 0.0, || {
        oracle_dominance(&mut rng, 10)
    });
    s.check("diagnostics", "balancedness drift within 1.1x its bound", 1.1, || {
        let mut target_rng = Rng::new(3);
        let target = target_rng.gaussian_matrix(4, 3, 1.0);
        Ok(run_scale_invariant_flow(&target, 0.05, 1.0, 1e-4, 1000, 3)?.worst_ratio())
    });

    s.check("harness", "rerun reproduces identical CSV rows", 0.0, || {
        let cfg = ExperimentConfig {
            optimizer: crate::optimizers::OptimizerKind::EflatLora,
            ..small_run_config()
        };
        let a = csv_lines(&cfg)?;
        let b = csv_lines(&cfg)?;
        Ok(if a == b && !a.is_empty() { 0.0 } else { 1.0 })
    });
    s.check("harness", "lora and flat-lora at rho = 0 give identical losses", 1e-12, || {
        let lora = ExperimentConfig {
            optimizer: crate::optimizers::OptimizerKind::Lora,
            rho0: 0.0,
            ..small_run_config()
        };
        let flat = ExperimentConfig {
            optimizer: crate::optimizers::OptimizerKind::FlatLora,
            ..lora.clone()
        };
        let (a, b) = (run_experiment(&lora)?.records, run_experiment(&flat)?.records);
        Ok(a.iter()
            .zip(&b)
            .map(|(x, y)| (x.train_loss - y.train_loss).abs().max((x.eval_loss - y.eval_loss).abs()))
            .fold(if a.len() == b.len() { 0.0 } else { f64::INFINITY }, f64::max))
    });

    VerifyReport { checks: s.checks }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clean_suite_passes() {
        let report = verify(VerifyOptions::default());
        assert!(report.passed(), "{}", report.to_text());
        assert!(report.checks.iter().any(|c| c.informational));
    }

    #[test]
    fn skipped_revert_is_caught() {
        let report = verify(VerifyOptions {
            fault: Some(Fault::SkipRevert),
        });
        assert!(!report.passed());
        assert!(report.failures().any(|c| c.invariant.contains("restores B")));
    }
}
