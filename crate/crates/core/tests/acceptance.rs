//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

mod common;

use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::Instant;

use flatlora::diagnostics::{
    estimate_assumption_constants, loss_match_residual, run_scale_invariant_flow_from, sharpness_sam, theorem2_rhs,
};
use flatlora::harness::{bench, build, optimizer_set, run_experiment, ExperimentConfig};
use flatlora::linalg::{col_space_projector, pseudo_inverse, row_space_projector, DEFAULT_RANK_TOL};
use flatlora::optimizers::{
    param_and_memory_counts, perturbation_from_rho, reconstruct_full_gradient, BaseUpdateConfig, DirectionVariant,
    OptimizerConfig, RhoSchedule,
};
use flatlora::{Activation, LossKind, Matrix, Network, Optimizer, OptimizerKind, Rng};

use common::*;

type Outcome = Result<(bool, String), String>;
type Criterion = (&'static str, fn() -> Outcome);

fn rel(x: &Matrix, target: &Matrix) -> f64 {
    x.sub(target).unwrap().frobenius_norm() / target.frobenius_norm().max(1.0)
}

fn algebraic_core() -> Outcome {
    let start = Instant::now();
    let mut rng = Rng::new(1);
    let (mut mp, mut proj, mut lm): (f64, f64, f64) = (0.0, 0.0, 0.0);
    let cases = 1000;
    for case in 0..cases {
        let (n, m) = (rng.range_inclusive(1, 16), rng.range_inclusive(1, 16));
        let r = rng.range_inclusive(1, n.min(m));
        let a = low_rank(&mut rng, n, m, r);
        let p = pseudo_inverse(&a, DEFAULT_RANK_TOL).map_err(|e| e.to_string())?;
        let ap = naive_matmul(&a, &p);
        let pa = naive_matmul(&p, &a);
        mp = mp
            .max(rel(&naive_matmul(&ap, &a), &a))
            .max(rel(&naive_matmul(&pa, &p), &p))
            .max(rel(&ap.transpose(), &ap))
            .max(rel(&pa.transpose(), &pa));
        for q in [row_space_projector(&a, DEFAULT_RANK_TOL), col_space_projector(&a, DEFAULT_RANK_TOL)] {
            let q = q.map_err(|e| e.to_string())?;
            proj = proj.max(naive_matmul(&q, &q).max_abs_diff(&q)).max(q.transpose().max_abs_diff(&q));
        }

        let activation = if case % 2 == 0 { Activation::Tanh } else { Activation::Identity };
        let net = Network::new(vec![random_layer(&mut rng, m, n, r)], activation, LossKind::MeanSquaredError)
            .map_err(|e| e.to_string())?;
        let batch = random_batch(&mut rng, &net, 4);
        let pert = perturbation_from_rho(&net, &batch, 0.1, DirectionVariant::Standard, DEFAULT_RANK_TOL)
            .map_err(|e| e.to_string())?;
        let m = loss_match_residual(&net, &batch, &pert.e_w_bar, &pert.e_b, DEFAULT_RANK_TOL).map_err(|e| e.to_string())?;
        lm = lm.max(m.projected_diff);
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = mp <= 1e-9 && proj <= 1e-10 && lm <= 1e-10 && secs < 30.0;
    Ok((
        pass,
        format!("{cases} configs: Moore-Penrose {mp:.2e} (<=1e-9), projectors {proj:.2e} (<=1e-10), loss match {lm:.2e} (<=1e-10), {secs:.2} s (<30 s)"),
    ))
}

fn gradient_fidelity() -> Outcome {
    let mut rng = Rng::new(2);
    let (mut fd, mut chain): (f64, f64) = (0.0, 0.0);
    let networks = 120;
    for case in 0..networks {
        let activation = if case % 2 == 0 { Activation::Tanh } else { Activation::Identity };
        let loss = if case % 3 == 0 { LossKind::SoftmaxCrossEntropy } else { LossKind::MeanSquaredError };
        let depth = rng.range_inclusive(1, 3);
        let mut dims = random_dims(&mut rng, depth, 6);
        if loss == LossKind::SoftmaxCrossEntropy {
            dims[depth] = dims[depth].max(2);
        }
        let rank = rng.range_inclusive(1, 4);
        let net = random_network(&mut rng, &dims, rank, activation, loss);
        let batch = random_batch(&mut rng, &net, 5);
        fd = fd.max(finite_difference_error(&net, &batch));
        let grads = net.backward(&batch, true).map_err(|e| e.to_string())?;
        for (layer, g) in net.layers().iter().zip(&grads.layers) {
            let gw = g.w.as_ref().ok_or("missing grad_w")?;
            let s = layer.scale();
            let want_b = naive_matmul(gw, &layer.a().transpose()).scaled(s);
            let want_a = naive_matmul(&layer.b().transpose(), gw).scaled(s);
            chain = chain.max(g.b.max_abs_diff(&want_b)).max(g.a.max_abs_diff(&want_a));
        }
    }
    Ok((
        fd < 1e-4 && chain <= 1e-10,
        format!("{networks} networks: finite-difference relative error {fd:.2e} (<1e-4), chain identities {chain:.2e} (<=1e-10)"),
    ))
}

fn reconstruction_identity() -> Outcome {
    let mut rng = Rng::new(3);
    let (mut general, mut square): (f64, f64) = (0.0, 0.0);
    let cases = 250;
    for case in 0..cases {
        let full_square = case % 5 == 0;
        let (n, m, r) = if full_square {
            let k = rng.range_inclusive(1, 8);
            (k, k, k)
        } else {
            let (n, m) = (rng.range_inclusive(1, 10), rng.range_inclusive(1, 10));
            (n, m, rng.range_inclusive(1, n.min(m)))
        };
        let net = Network::new(vec![random_layer(&mut rng, m, n, r)], Activation::Tanh, LossKind::MeanSquaredError)
            .map_err(|e| e.to_string())?;
        let batch = random_batch(&mut rng, &net, 6);
        let grads = net.backward(&batch, true).map_err(|e| e.to_string())?;
        let (layer, g) = (net.layer(0), &grads.layers[0]);
        let gw = g.w.as_ref().ok_or("missing grad_w")?;
        let got = reconstruct_full_gradient(&g.b, &g.a, layer.a(), layer.b(), layer.scale(), DEFAULT_RANK_TOL)
            .map_err(|e| e.to_string())?;
        let scale = gw.max_abs().max(1.0);
        let mut want = naive_matmul(gw, &row_projector_oracle(layer.a()));
        want.axpy(1.0, &naive_matmul(&col_projector_oracle(layer.b()), gw)).unwrap();
        general = general.max(got.max_abs_diff(&want.scaled(0.5)) / scale);
        if full_square {
            square = square.max(got.max_abs_diff(gw) / scale);
        }
    }
    Ok((
        general <= 1e-9 && square <= 1e-9,
        format!("{cases} cases: 0.5(G P_A + P_B G) residual {general:.2e} (<=1e-9), full-rank square residual {square:.2e} (<=1e-9)"),
    ))
}

fn degeneration() -> Outcome {
    let base = BaseUpdateConfig {
        learning_rate: 0.05,
        momentum: 0.9,
        weight_decay: 1e-3,
    };
    let mut worst: f64 = 0.0;
    let seeds = 5;
    for seed in 0..seeds {
        let cfg = ExperimentConfig {
            seed,
            train_batches: 3,
            ..ExperimentConfig::default()
        };
        let (task, net0) = build(&cfg).map_err(|e| e.to_string())?;
        let run = |kind: OptimizerKind| -> Result<Network, String> {
            let mut net = net0.clone();
            let mut opt = Optimizer::new(OptimizerConfig::new(kind, base, 0.0), &net).map_err(|e| e.to_string())?;
            for t in 0..20 {
                opt.step(&mut net, task.train_batch(t)).map_err(|e| e.to_string())?;
            }
            opt.finish(&mut net).map_err(|e| e.to_string())?;
            Ok(net)
        };
        let reference = run(OptimizerKind::Lora)?;
        for kind in [OptimizerKind::LoraSam, OptimizerKind::FlatLora, OptimizerKind::EflatLora] {
            worst = worst.max(max_param_diff(&run(kind)?, &reference));
        }
    }
    Ok((
        worst <= 1e-12,
        format!("{seeds} seeds x 20 steps: max parameter difference from plain LoRA {worst:.2e} (<=1e-12)"),
    ))
}

fn ema_correctness() -> Outcome {
    let mut rng = Rng::new(5);
    let (mut closed_form, mut instantaneous): (f64, f64) = (0.0, 0.0);
    for seed in 0..5u64 {
        let net0 = random_network(&mut rng, &[6, 5, 3], 2, Activation::Tanh, LossKind::MeanSquaredError);
        let batches: Vec<_> = (0..3).map(|_| random_batch(&mut rng, &net0, 8)).collect();
        for beta in [0.3 + 0.1 * seed as f64, 1.0] {
            let mut net = net0.clone();
            let mut cfg = OptimizerConfig::new(OptimizerKind::EflatLora, BaseUpdateConfig::default(), 0.1);
            cfg.beta = beta;
            let mut opt = Optimizer::new(cfg, &net).map_err(|e| e.to_string())?;
            let mut history: Vec<Vec<Matrix>> = Vec::new();
            for t in 0..10 {
                opt.step(&mut net, &batches[t % batches.len()]).map_err(|e| e.to_string())?;
                let state = opt.perturb_state().ok_or("eflat keeps a perturbation state")?;
                history.push(state.last_e_b().to_vec());
                let t = history.len();
                for (li, ema) in state.ema_e_b().iter().enumerate() {
                    let mut want = Matrix::zeros(ema.rows(), ema.cols());
                    for (k, e) in history.iter().enumerate() {
                        want.axpy(beta * (1.0 - beta).powi((t - 1 - k) as i32), &e[li]).unwrap();
                    }
                    closed_form = closed_form.max(ema.max_abs_diff(&want));
                    if beta == 1.0 {
                        instantaneous = instantaneous.max(ema.max_abs_diff(&history[t - 1][li]));
                    }
                }
            }
        }
    }
    Ok((
        closed_form <= 1e-10 && instantaneous <= 1e-10,
        format!("5 seeds x 10 steps: geometric-sum residual {closed_form:.2e} (<=1e-10), beta = 1 vs instantaneous {instantaneous:.2e} (<=1e-10)"),
    ))
}

fn balancedness_bound() -> Outcome {
    let start = Instant::now();
    let (n, m) = (8, 6);
    let mut worst: f64 = 0.0;
    let mut steps = 0;
    for seed in 0..5u64 {
        let mut rng = Rng::new(600 + seed);
        let x_star = rng.normal_vec(n);
        let y_star = rng.normal_vec(m);
        let target = Matrix::from_fn(n, m, |i, j| x_star[i] * y_star[j]);
        let x0: Vec<f64> = rng.normal_vec(n).iter().map(|v| v / (n as f64).sqrt()).collect();
        let y0: Vec<f64> = rng.normal_vec(m).iter().map(|v| v / (m as f64).sqrt()).collect();
        let trace = run_scale_invariant_flow_from(&target, x0, y0, 0.05, 1.0, 1e-4, 1000).map_err(|e| e.to_string())?;
        steps += trace.len();
        worst = worst.max(trace.worst_ratio());
    }
    let secs = start.elapsed().as_secs_f64();
    Ok((
        worst <= 1.1 && steps == 5000 && secs < 10.0,
        format!("5 seeds x 1000 steps: max |dB/dt| / bound {worst:.3} (<=1.1), {secs:.2} s (<10 s)"),
    ))
}

fn gap_trend() -> Outcome {
    let mut decaying = 0;
    let mut worst_bound: f64 = 0.0;
    let mut means = Vec::new();
    for seed in 0..5u64 {
        let cfg = ExperimentConfig {
            optimizer: OptimizerKind::EflatLora,
            rho_schedule: Some(RhoSchedule::InverseSqrt),
            eval_every: 1,
            seed,
            ..ExperimentConfig::default()
        };
        let (task, net0) = build(&cfg).map_err(|e| e.to_string())?;
        let before = estimate_assumption_constants(&net0, &task.train, 16, seed).map_err(|e| e.to_string())?;
        let out = run_experiment(&cfg).map_err(|e| e.to_string())?;
        let after = estimate_assumption_constants(&out.network, &task.train, 16, seed).map_err(|e| e.to_string())?;
        let consts = before.max(after).scaled(10.0);

        let gaps: Vec<(usize, f64)> = out
            .records
            .iter()
            .map(|r| r.gap.map(|g| (r.step, g.abs())).ok_or("missing gap"))
            .collect::<Result<_, _>>()?;
        let k = gaps.len() / 10;
        let mean = |s: &[(usize, f64)]| s.iter().map(|g| g.1).sum::<f64>() / s.len() as f64;
        let (first, last) = (mean(&gaps[..k]), mean(&gaps[gaps.len() - k..]));
        if last < first {
            decaying += 1;
        }
        means.push(format!("{first:.1e}->{last:.1e}"));
        for &(t, gap) in gaps.iter().filter(|g| g.0 >= 2) {
            let bound = theorem2_rhs(&consts, cfg.rho0, cfg.beta, t).map_err(|e| e.to_string())?;
            worst_bound = worst_bound.max(gap / bound);
        }
    }
    Ok((
        decaying >= 4 && worst_bound <= 1.0,
        format!(
            "gap decays in {decaying}/5 seeds (>=4) [{}], max gap / bound {worst_bound:.2e} (<=1)",
            means.join(", ")
        ),
    ))
}

/// Sharpness at radius `rho0` on the full training set, sampled every 10
/// steps, together with the training loss.
fn sharpness_trace(cfg: &ExperimentConfig) -> Result<Vec<(usize, f64, f64)>, String> {
    let (task, mut net) = build(cfg).map_err(|e| e.to_string())?;
    let full = task.full_train().map_err(|e| e.to_string())?;
    let mut opt = Optimizer::new(cfg.optimizer_config(), &net).map_err(|e| e.to_string())?;
    let mut trace = Vec::new();
    for t in 1..=cfg.steps {
        opt.step(&mut net, task.train_batch(t - 1)).map_err(|e| e.to_string())?;
        if t % 10 == 0 || t == cfg.steps {
            let point = opt
                .with_unperturbed(&mut net, |n| -> flatlora::Result<(f64, f64)> {
                    Ok((n.loss(&full)?, sharpness_sam(n, &full, cfg.rho0)?.value))
                })
                .map_err(|e| e.to_string())?
                .map_err(|e| e.to_string())?;
            trace.push((t, point.0, point.1));
        }
    }
    Ok(trace)
}

fn sharpness_reduction() -> Outcome {
    let kinds = [OptimizerKind::Lora, OptimizerKind::FlatLora, OptimizerKind::EflatLora];
    let mut sums = [0.0; 3];
    let seeds = 5;
    for seed in 0..seeds {
        let traces = kinds
            .iter()
            .map(|&optimizer| {
                sharpness_trace(&ExperimentConfig {
                    optimizer,
                    seed,
                    ..ExperimentConfig::default()
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        // Match training loss: the loosest final loss among the three runs,
        // and each run's first evaluation at or below it.
        let target = traces.iter().filter_map(|t| t.last()).map(|p| p.1).fold(0.0, f64::max);
        for (sum, trace) in sums.iter_mut().zip(&traces) {
            let point = trace.iter().find(|p| p.1 <= target).ok_or("no matched point")?;
            *sum += point.2;
        }
    }
    let [lora, flat, eflat] = sums.map(|s| s / seeds as f64);
    Ok((
        flat <= lora && eflat <= 1.5 * flat,
        format!("mean sharpness at matched train loss over {seeds} seeds: lora {lora:.3e}, flat-lora {flat:.3e} (<= lora), eflat-lora {eflat:.3e} (<= 1.5 x flat-lora)"),
    ))
}

fn efficiency() -> Outcome {
    let report = bench(&optimizer_set(&ExperimentConfig::default()), 3).map_err(|e| e.to_string())?;
    let row = |k| report.row(k).ok_or_else(|| format!("missing {} row", k.name()));
    let (flat, eflat) = (row(OptimizerKind::FlatLora)?, row(OptimizerKind::EflatLora)?);
    let pass = (1.6..=2.4).contains(&flat.speed_ratio)
        && (0.95..=1.4).contains(&eflat.speed_ratio)
        && flat.grad_eval_ratio == 2.0
        && eflat.grad_eval_ratio == 1.0;
    Ok((
        pass,
        format!(
            "step time vs lora: flat-lora {:.3} (in [1.6, 2.4]), eflat-lora {:.3} (in [0.95, 1.4]); grad evals {} and {}",
            flat.speed_ratio, eflat.speed_ratio, flat.grad_eval_ratio, eflat.grad_eval_ratio
        ),
    ))
}

fn accounting() -> Outcome {
    let mut rng = Rng::new(10);
    let mut mismatches = 0;
    for _ in 0..20 {
        let depth = rng.range_inclusive(1, 4);
        let dims = random_dims(&mut rng, depth, 32);
        let max_rank = dims.windows(2).map(|w| w[0].min(w[1])).min().unwrap_or(1);
        let rank = rng.range_inclusive(1, max_rank);
        let net = random_network(&mut rng, &dims, rank, Activation::Tanh, LossKind::MeanSquaredError);
        let expected: usize = dims.windows(2).map(|w| w[1] * rank + rank * w[0]).sum();
        let counts = |k| param_and_memory_counts(&net, k);
        let ok = counts(OptimizerKind::Lora).trainable == expected
            && net.trainable_count() == expected
            && counts(OptimizerKind::Lora).extra_elements == 0.0
            && counts(OptimizerKind::FlatLora).extra_elements == 1.5 * expected as f64
            && counts(OptimizerKind::EflatLora).extra_elements == 2.0 * expected as f64;
        if !ok {
            mismatches += 1;
        }
    }
    Ok((mismatches == 0, format!("20 architectures: {mismatches} mismatches")))
}

fn cli(args: &[&str]) -> Result<std::process::Output, String> {
    Command::new(env!("CARGO_BIN_EXE_flatlora"))
        .args(args)
        .output()
        .map_err(|e| format!("cannot launch cli: {e}"))
}

fn replay_csv(config: &Path, dir: &Path) -> Result<Vec<u8>, String> {
    let out = cli(&["run", "--config", config.to_str().unwrap(), "--out", dir.to_str().unwrap()])?;
    if !out.status.success() {
        return Err(String::from_utf8_lossy(&out.stderr).into_owned());
    }
    let csv = std::fs::read_dir(dir)
        .map_err(|e| e.to_string())?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .find(|p| p.extension().is_some_and(|x| x == "csv"))
        .ok_or("run wrote no csv")?;
    std::fs::read(csv).map_err(|e| e.to_string())
}

fn determinism_and_cli() -> Outcome {
    let clean = cli(&["verify"])?.status;
    let faulty = cli(&["verify", "--inject-fault", "skip-revert"])?.status;
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut identical = 0;
    let kinds = OptimizerKind::ALL;
    for (i, kind) in kinds.into_iter().enumerate() {
        let config = tmp.path().join(format!("{}.cfg", kind.name()));
        let text = format!(
            "optimizer = {}\nsteps = 200\neval_every = 20\nseed = {}\n",
            kind.name(),
            40 + i
        );
        std::fs::write(&config, text).map_err(|e| e.to_string())?;
        let a = replay_csv(&config, &tmp.path().join(format!("{i}a")))?;
        let b = replay_csv(&config, &tmp.path().join(format!("{i}b")))?;
        if a == b && !a.is_empty() {
            identical += 1;
        }
    }
    let pass = clean.success() && !faulty.success() && identical == kinds.len();
    Ok((
        pass,
        format!(
            "verify exit {:?}, verify with skipped revert exit {:?}, bit-identical replays {identical}/{}",
            clean.code(),
            faulty.code(),
            kinds.len()
        ),
    ))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 11] = [
        ("algebraic core", algebraic_core),
        ("gradient fidelity", gradient_fidelity),
        ("reconstruction identity", reconstruction_identity),
        ("degeneration at rho = 0", degeneration),
        ("EMA correctness", ema_correctness),
        ("balancedness bound", balancedness_bound),
        ("sharpness gap trend", gap_trend),
        ("sharpness reduction", sharpness_reduction),
        ("efficiency ratios", efficiency),
        ("memory accounting", accounting),
        ("determinism and CLI contract", determinism_and_cli),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.into_iter().enumerate() {
        let start = Instant::now();
        let (pass, detail) = check().unwrap_or_else(|e| (false, format!("error: {e}")));
        println!(
            "{} {:>2} {name}: {detail} [{:.1} s]",
            if pass { "PASS" } else { "FAIL" },
            i + 1,
            start.elapsed().as_secs_f64()
        );
        if !pass {
            failed += 1;
        }
    }
    if failed == 0 {
        println!("all 11 criteria pass");
        ExitCode::SUCCESS
    } else {
        println!("{failed} of 11 criteria failed");
        ExitCode::FAILURE
    }
}
