//! Training loop, per-step metrics, CSV and JSON persistence.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::Serialize;

use crate::diagnostics::{network_balancedness, sharpness_gap, sharpness_sam, AssumptionConstants};
use crate::error::{Error, Result};
use crate::linalg::Rng;
use crate::model::Network;
use crate::optimizers::{rho_at, Optimizer, StepStats};

use super::config::{ExperimentConfig, TaskKind};
use super::tasks::{generate_task, Task, TaskSizes};

pub const CSV_HEADER: &str = "step,train_loss,eval_loss,sharpness_sam,sharpness_ema,gap,balancedness,\
grad_evals_cumulative,wall_time_ms_cumulative,perturb_norm";

/// One diagnostics row, taken at the unperturbed parameters.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub train_loss: f64,
    pub eval_loss: f64,
    pub sharpness_sam: f64,
    pub sharpness_ema: Option<f64>,
    pub gap: Option<f64>,
    pub balancedness: Option<f64>,
    pub grad_evals_cumulative: u64,
    pub wall_time_ms_cumulative: f64,
    pub perturb_norm: f64,
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x:?}")).unwrap_or_default()
}

impl MetricsRecord {
    /// CSV row in header order. Reals use Rust's shortest round-trip
    /// formatting, which is locale-independent; absent values are empty cells.
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:?},{:?},{:?},{},{},{},{},{:?},{:?}",
            self.step,
            self.train_loss,
            self.eval_loss,
            self.sharpness_sam,
            cell(self.sharpness_ema),
            cell(self.gap),
            cell(self.balancedness),
            self.grad_evals_cumulative,
            self.wall_time_ms_cumulative,
            self.perturb_norm
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub config_hash: String,
    pub seed: u64,
    pub task: String,
    pub optimizer: String,
    pub steps: usize,
    pub records: usize,
    pub final_train_loss: f64,
    pub final_eval_loss: f64,
    /// Full-space SAM sharpness at radius `rho0` on the training set.
    pub final_sharpness_sam: f64,
    /// Time spent inside optimizer steps only.
    pub total_wall_time_ms: f64,
    pub median_step_ms: f64,
    pub total_grad_evals: u64,
    /// Filled in by `bench`, which runs the matching LoRA baseline.
    pub speed_ratio_vs_lora: Option<f64>,
}

/// Everything a finished run produced.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub network: Network,
    pub task: Task,
    pub records: Vec<MetricsRecord>,
    pub summary: RunSummary,
    pub step_times: Vec<Duration>,
}

pub fn median_ms(times: &[Duration]) -> f64 {
    if times.is_empty() {
        return 0.0;
    }
    let mut ms: Vec<f64> = times.iter().map(|d| d.as_secs_f64() * 1e3).collect();
    ms.sort_by(f64::total_cmp);
    let mid = ms.len() / 2;
    if ms.len().is_multiple_of(2) {
        0.5 * (ms[mid - 1] + ms[mid])
    } else {
        ms[mid]
    }
}

/// Builds the task and a LoRA-initialized network over its base weights.
pub fn build(cfg: &ExperimentConfig) -> Result<(Task, Network)> {
    cfg.validate()?;
    let task = generate_task(cfg.task, cfg.seed, &TaskSizes::from_config(cfg))?;
    let mut rng = Rng::with_stream(cfg.seed, 3);
    let net = Network::from_base_weights(task.base.clone(), cfg.rank, cfg.scale, task.activation, task.loss, &mut rng)?;
    Ok((task, net))
}

fn check_step(step: usize, stats: &StepStats, net: &Network) -> Result<()> {
    let losses = [stats.loss_original, stats.loss_perturbed];
    if losses.iter().flatten().any(|l| !l.is_finite()) {
        return Err(Error::Numerical {
            step,
            detail: "loss is not finite".into(),
        });
    }
    if net.layers().iter().any(|l| !l.b().is_finite() || !l.a().is_finite()) {
        return Err(Error::Numerical {
            step,
            detail: "parameters are not finite".into(),
        });
    }
    Ok(())
}

/// Runs `cfg.steps` optimizer steps, handing each metrics record to
/// `on_record` as soon as it is computed.
pub fn run_experiment_with(
    cfg: &ExperimentConfig,
    mut on_record: impl FnMut(&MetricsRecord) -> Result<()>,
) -> Result<RunOutcome> {
    let (task, mut net) = build(cfg)?;
    let mut opt = Optimizer::new(cfg.optimizer_config(), &net)?;
    let full = task.full_train()?;
    let mut records = Vec::new();
    let mut step_times = Vec::with_capacity(cfg.steps);
    let mut grad_evals = 0u64;
    let mut wall = Duration::ZERO;
    let no_consts = AssumptionConstants::default();

    for t in 1..=cfg.steps {
        let stats = opt.step(&mut net, task.train_batch(t - 1))?;
        check_step(t, &stats, &net)?;
        grad_evals += u64::from(stats.grad_evals);
        wall += stats.wall_time;
        step_times.push(stats.wall_time);

        let due = cfg.eval_every > 0 && (t % cfg.eval_every == 0 || t == cfg.steps);
        if !due {
            continue;
        }
        let rho = rho_at(cfg.rho0, t, cfg.schedule())?;
        let ema = match opt.perturb_state() {
            Some(state) => Some(sharpness_gap(&net, &full, state, &no_consts)?),
            None => None,
        };
        let record = opt.with_unperturbed(&mut net, |n| -> Result<MetricsRecord> {
            Ok(MetricsRecord {
                step: t,
                train_loss: n.loss(&full)?,
                eval_loss: n.loss(&task.eval)?,
                sharpness_sam: match &ema {
                    Some(r) => r.s_sam,
                    None => sharpness_sam(n, &full, rho)?.value,
                },
                sharpness_ema: ema.map(|r| r.s_ema),
                gap: ema.map(|r| r.gap),
                balancedness: (cfg.task == TaskKind::MatrixFactorization).then(|| network_balancedness(n)),
                grad_evals_cumulative: grad_evals,
                wall_time_ms_cumulative: if cfg.record_wall_time { wall.as_secs_f64() * 1e3 } else { 0.0 },
                perturb_norm: stats.perturb_norm,
            })
        })??;
        if !(record.train_loss.is_finite() && record.eval_loss.is_finite()) {
            return Err(Error::Numerical {
                step: t,
                detail: "evaluation loss is not finite".into(),
            });
        }
        on_record(&record)?;
        records.push(record);
    }
    opt.finish(&mut net)?;

    let summary = RunSummary {
        config_hash: cfg.hash(),
        seed: cfg.seed,
        task: cfg.task.name().into(),
        optimizer: cfg.optimizer.name().into(),
        steps: cfg.steps,
        records: records.len(),
        final_train_loss: net.loss(&full)?,
        final_eval_loss: net.loss(&task.eval)?,
        final_sharpness_sam: sharpness_sam(&net, &full, cfg.rho0)?.value,
        total_wall_time_ms: wall.as_secs_f64() * 1e3,
        median_step_ms: median_ms(&step_times),
        total_grad_evals: grad_evals,
        speed_ratio_vs_lora: None,
    };
    Ok(RunOutcome {
        network: net,
        task,
        records,
        summary,
        step_times,
    })
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    run_experiment_with(cfg, |_| Ok(()))
}

/// Paths written by [`run_to_dir`].
#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub csv: PathBuf,
    pub summary_json: PathBuf,
    pub summary: RunSummary,
}

/// Runs and writes `<hash>_<seed>.csv` row by row plus `<hash>_<seed>.summary.json`.
pub fn run_to_dir(cfg: &ExperimentConfig, dir: &Path) -> Result<RunArtifacts> {
    cfg.validate()?;
    std::fs::create_dir_all(dir)?;
    let stem = cfg.file_stem();
    let csv = dir.join(format!("{stem}.csv"));
    let summary_json = dir.join(format!("{stem}.summary.json"));
    let mut out = BufWriter::new(File::create(&csv)?);
    writeln!(out, "{CSV_HEADER}")?;
    let outcome = run_experiment_with(cfg, |r| {
        writeln!(out, "{}", r.csv_row())?;
        out.flush()?;
        Ok(())
    })?;
    out.flush()?;
    write_json(&summary_json, &outcome.summary)?;
    Ok(RunArtifacts {
        csv,
        summary_json,
        summary: outcome.summary,
    })
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut f, value)?;
    writeln!(f)?;
    f.flush()?;
    Ok(())
}

/// Runs one config per seed on separate threads.
pub fn sweep(cfg: &ExperimentConfig, seeds: &[u64], dir: &Path) -> Vec<Result<RunArtifacts>> {
    std::thread::scope(|scope| {
        let handles: Vec<_> = seeds
            .iter()
            .map(|&seed| {
                let cfg = ExperimentConfig { seed, ..cfg.clone() };
                scope.spawn(move || run_to_dir(&cfg, dir))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(Error::State("sweep worker panicked".into()))))
            .collect()
    })
}
