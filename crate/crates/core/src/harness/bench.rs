//! Per-step timing of the four optimizers on one task, interleaved step by
//! step so that machine noise hits every optimizer alike.

use std::time::Duration;

use serde::Serialize;

use crate::error::{ConfigIssue, Error, Result};
use crate::optimizers::{param_and_memory_counts, Optimizer, OptimizerKind};

use super::config::ExperimentConfig;
use super::run::{build, median_ms};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub optimizer: String,
    pub median_step_ms: f64,
    /// Median step time over LoRA's median step time.
    pub speed_ratio: f64,
    pub grad_evals: u64,
    /// Backward passes over LoRA's backward passes.
    pub grad_eval_ratio: f64,
    pub trainable_elements: usize,
    pub extra_memory_elements: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub config_hash: String,
    pub task: String,
    pub seed: u64,
    pub steps: usize,
    pub repeats: usize,
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub fn row(&self, kind: OptimizerKind) -> Option<&BenchRow> {
        self.rows.iter().find(|r| r.optimizer == kind.name())
    }

    pub fn to_table(&self) -> String {
        let mut s = format!(
            "{:<12} {:>12} {:>8} {:>11} {:>10} {:>12}\n",
            "optimizer", "median_ms", "ratio", "grad_evals", "trainable", "extra_mem"
        );
        for r in &self.rows {
            s.push_str(&format!(
                "{:<12} {:>12.5} {:>8.3} {:>11} {:>10} {:>12}\n",
                r.optimizer, r.median_step_ms, r.speed_ratio, r.grad_evals, r.trainable_elements, r.extra_memory_elements
            ));
        }
        s
    }
}

/// One config per optimizer, identical otherwise, with diagnostics off.
pub fn optimizer_set(cfg: &ExperimentConfig) -> Vec<ExperimentConfig> {
    OptimizerKind::ALL
        .into_iter()
        .map(|kind| ExperimentConfig {
            optimizer: kind,
            rho_schedule: None,
            eval_every: 0,
            ..cfg.clone()
        })
        .collect()
}

fn check_comparable(configs: &[ExperimentConfig]) -> Result<()> {
    let mut issues = Vec::new();
    let Some(first) = configs.first() else {
        return Err(Error::Config(vec![ConfigIssue::new("optimizer", "no configurations to bench")]));
    };
    if !configs.iter().any(|c| c.optimizer == OptimizerKind::Lora) {
        issues.push(ConfigIssue::new("optimizer", "bench needs a lora baseline"));
    }
    for c in configs {
        if c.task != first.task {
            issues.push(ConfigIssue::new("task", "bench configs must share the task"));
        }
        if c.seed != first.seed {
            issues.push(ConfigIssue::new("seed", "bench configs must share the seed"));
        }
        if c.steps != first.steps {
            issues.push(ConfigIssue::new("steps", "bench configs must share the step count"));
        }
        if c.layer_dims != first.layer_dims {
            issues.push(ConfigIssue::new("layer_dims", "bench configs must share the architecture"));
        }
        if c.rank != first.rank {
            issues.push(ConfigIssue::new("rank", "bench configs must share the rank"));
        }
    }
    if issues.is_empty() {
        Ok(())
    } else {
        issues.dedup();
        Err(Error::Config(issues))
    }
}

/// Times `repeats` fresh runs of every config. Within a repeat the
/// optimizers take turns one step at a time, in rotating order.
pub fn bench(configs: &[ExperimentConfig], repeats: usize) -> Result<BenchReport> {
    check_comparable(configs)?;
    for c in configs {
        c.validate()?;
    }
    let repeats = repeats.max(1);
    let first = &configs[0];
    let mut times: Vec<Vec<Duration>> = vec![Vec::with_capacity(first.steps * repeats); configs.len()];
    let mut evals = vec![0u64; configs.len()];
    let mut memory = Vec::with_capacity(configs.len());

    for rep in 0..repeats {
        let mut runs = Vec::with_capacity(configs.len());
        for c in configs {
            let (task, net) = build(c)?;
            let opt = Optimizer::new(c.optimizer_config(), &net)?;
            if rep == 0 {
                memory.push(param_and_memory_counts(&net, c.optimizer));
            }
            runs.push((task, net, opt));
        }
        for t in 0..first.steps {
            for k in 0..runs.len() {
                let i = (k + t) % runs.len();
                let (task, net, opt) = &mut runs[i];
                let stats = opt.step(net, task.train_batch(t))?;
                times[i].push(stats.wall_time);
                evals[i] += u64::from(stats.grad_evals);
            }
        }
    }

    let base = configs
        .iter()
        .position(|c| c.optimizer == OptimizerKind::Lora)
        .expect("checked above");
    let base_ms = median_ms(&times[base]);
    let base_evals = evals[base].max(1) as f64;
    let rows = configs
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let ms = median_ms(&times[i]);
            BenchRow {
                optimizer: c.optimizer.name().into(),
                median_step_ms: ms,
                speed_ratio: if base_ms > 0.0 { ms / base_ms } else { f64::NAN },
                grad_evals: evals[i],
                grad_eval_ratio: evals[i] as f64 / base_evals,
                trainable_elements: memory[i].trainable,
                extra_memory_elements: memory[i].extra_elements,
            }
        })
        .collect();
    Ok(BenchReport {
        config_hash: first.hash(),
        task: first.task.name().into(),
        seed: first.seed,
        steps: first.steps,
        repeats,
        rows,
    })
}
