//! Flat `key = value` experiment configuration.
//!
//! ```text
//! # teacher-student run
//! task = teacher-student-regression
//! layer_dims = 16, 16, 4
//! optimizer = eflat-lora
//! rho0 = 0.05
//! ```
//!
//! Blank lines and `#` comments are ignored. Unknown or repeated keys are errors.

use std::fmt::{self, Write as _};
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::{ConfigIssue, Error, Result};
use crate::linalg::DEFAULT_RANK_TOL;
use crate::optimizers::{BaseUpdateConfig, DirectionVariant, OptimizerConfig, OptimizerKind, RhoSchedule, SharpnessOptions};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TaskKind {
    TeacherStudent,
    TwoCluster,
    MatrixFactorization,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::TeacherStudent => "teacher-student-regression",
            TaskKind::TwoCluster => "two-cluster-classification",
            TaskKind::MatrixFactorization => "matrix-factorization",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        [TaskKind::TeacherStudent, TaskKind::TwoCluster, TaskKind::MatrixFactorization]
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| format!("unknown task `{s}`"))
    }
}

fn schedule_name(s: RhoSchedule) -> &'static str {
    match s {
        RhoSchedule::Constant => "constant",
        RhoSchedule::InverseSqrt => "inverse-sqrt",
    }
}

fn variant_name(v: DirectionVariant) -> &'static str {
    match v {
        DirectionVariant::Standard => "standard",
        DirectionVariant::Signed => "signed",
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub task: TaskKind,
    /// Input width first, output width last.
    pub layer_dims: Vec<usize>,
    pub rank: usize,
    pub scale: f64,
    pub optimizer: OptimizerKind,
    pub rho0: f64,
    pub beta: f64,
    pub eta: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// `None` picks the optimizer's default.
    pub rho_schedule: Option<RhoSchedule>,
    pub direction_variant: DirectionVariant,
    pub batch_size: usize,
    pub steps: usize,
    /// Diagnostics cadence in steps; 0 disables metric records.
    pub eval_every: usize,
    pub seed: u64,
    pub svd_tol: f64,
    /// Number of fixed minibatches cycled through during training.
    pub train_batches: usize,
    pub eval_size: usize,
    pub noise_std: f64,
    /// Distance between two-cluster means in units of the cluster std.
    pub separation: f64,
    /// Write measured step times into the CSV. Off by default so reruns are
    /// byte-identical; summaries always carry measured times.
    pub record_wall_time: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            task: TaskKind::TeacherStudent,
            layer_dims: vec![16, 16, 4],
            rank: 4,
            scale: 1.0,
            optimizer: OptimizerKind::FlatLora,
            rho0: 0.05,
            beta: 0.9,
            eta: 0.05,
            momentum: 0.9,
            weight_decay: 0.0,
            rho_schedule: None,
            direction_variant: DirectionVariant::Standard,
            batch_size: 32,
            steps: 2000,
            eval_every: 100,
            seed: 0,
            svd_tol: DEFAULT_RANK_TOL,
            train_batches: 8,
            eval_size: 256,
            noise_std: 0.01,
            separation: 10.0,
            record_wall_time: false,
        }
    }
}

fn parse_value<T: FromStr>(value: &str) -> std::result::Result<T, String>
where
    T::Err: fmt::Display,
{
    value.parse::<T>().map_err(|e| format!("cannot parse `{value}`: {e}"))
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Parses and validates; every problem found is reported at once.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut issues = Vec::new();
        let mut seen = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                issues.push(ConfigIssue::new(format!("line {}", lineno + 1), "expected `key = value`"));
                continue;
            };
            let (key, value) = (key.trim(), value.trim());
            if seen.contains(&key) {
                issues.push(ConfigIssue::new(key, "given more than once"));
                continue;
            }
            seen.push(key);
            if let Err(message) = cfg.set(key, value) {
                issues.push(ConfigIssue::new(key, message));
            }
        }
        issues.extend(cfg.issues());
        if issues.is_empty() {
            Ok(cfg)
        } else {
            Err(Error::Config(issues))
        }
    }

    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        match key {
            "task" => self.task = parse_value(value)?,
            "layer_dims" => {
                self.layer_dims = value
                    .split(',')
                    .map(|v| parse_value::<usize>(v.trim()))
                    .collect::<std::result::Result<_, _>>()?
            }
            "rank" => self.rank = parse_value(value)?,
            "scale" => self.scale = parse_value(value)?,
            "optimizer" => self.optimizer = value.parse().map_err(|e: Error| e.to_string())?,
            "rho0" => self.rho0 = parse_value(value)?,
            "beta" => self.beta = parse_value(value)?,
            "eta" => self.eta = parse_value(value)?,
            "momentum" => self.momentum = parse_value(value)?,
            "weight_decay" => self.weight_decay = parse_value(value)?,
            "rho_schedule" => {
                self.rho_schedule = Some(match value {
                    "constant" => RhoSchedule::Constant,
                    "inverse-sqrt" => RhoSchedule::InverseSqrt,
                    _ => return Err(format!("unknown schedule `{value}`")),
                })
            }
            "direction_variant" => {
                self.direction_variant = match value {
                    "standard" => DirectionVariant::Standard,
                    "signed" => DirectionVariant::Signed,
                    _ => return Err(format!("unknown direction variant `{value}`")),
                }
            }
            "batch_size" => self.batch_size = parse_value(value)?,
            "steps" => self.steps = parse_value(value)?,
            "eval_every" => self.eval_every = parse_value(value)?,
            "seed" => self.seed = parse_value(value)?,
            "svd_tol" => self.svd_tol = parse_value(value)?,
            "train_batches" => self.train_batches = parse_value(value)?,
            "eval_size" => self.eval_size = parse_value(value)?,
            "noise_std" => self.noise_std = parse_value(value)?,
            "separation" => self.separation = parse_value(value)?,
            "record_wall_time" => self.record_wall_time = parse_value(value)?,
            _ => return Err("unknown key".into()),
        }
        Ok(())
    }

    fn issues(&self) -> Vec<ConfigIssue> {
        let mut out = Vec::new();
        let mut check = |ok: bool, field: &str, message: String| {
            if !ok {
                out.push(ConfigIssue::new(field, message));
            }
        };
        let dims = &self.layer_dims;
        check(dims.len() >= 2, "layer_dims", format!("need at least two widths, got {}", dims.len()));
        check(dims.iter().all(|&d| d > 0), "layer_dims", "widths must be positive".into());
        let min_dim = dims.iter().copied().min().unwrap_or(0);
        check(
            self.rank >= 1 && self.rank <= min_dim,
            "rank",
            format!("must lie in 1..={min_dim}, got {}", self.rank),
        );
        check(self.scale > 0.0 && self.scale.is_finite(), "scale", format!("must be positive, got {}", self.scale));
        check(self.rho0 >= 0.0 && self.rho0.is_finite(), "rho0", format!("must be non-negative, got {}", self.rho0));
        check(self.beta > 0.0 && self.beta <= 1.0, "beta", format!("must lie in (0, 1], got {}", self.beta));
        check(self.eta > 0.0 && self.eta.is_finite(), "eta", format!("must be positive, got {}", self.eta));
        check(
            (0.0..1.0).contains(&self.momentum),
            "momentum",
            format!("must lie in [0, 1), got {}", self.momentum),
        );
        check(
            self.weight_decay >= 0.0 && self.weight_decay.is_finite(),
            "weight_decay",
            format!("must be non-negative, got {}", self.weight_decay),
        );
        check(self.batch_size >= 1, "batch_size", "must be at least 1".into());
        check(self.train_batches >= 1, "train_batches", "must be at least 1".into());
        check(self.eval_size >= 1, "eval_size", "must be at least 1".into());
        check(
            self.svd_tol > 0.0 && self.svd_tol < 1.0,
            "svd_tol",
            format!("must lie in (0, 1), got {}", self.svd_tol),
        );
        check(
            self.noise_std >= 0.0 && self.noise_std.is_finite(),
            "noise_std",
            format!("must be non-negative, got {}", self.noise_std),
        );
        check(
            self.separation >= 0.0 && self.separation.is_finite(),
            "separation",
            format!("must be non-negative, got {}", self.separation),
        );
        match self.task {
            TaskKind::MatrixFactorization => {
                check(dims.len() == 2, "layer_dims", "matrix-factorization uses a single layer (two widths)".into())
            }
            TaskKind::TwoCluster => check(
                dims.last().is_some_and(|&d| d >= 2),
                "layer_dims",
                "two-cluster-classification needs at least two outputs".into(),
            ),
            TaskKind::TeacherStudent => {}
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let issues = self.issues();
        if issues.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(issues))
        }
    }

    pub fn schedule(&self) -> RhoSchedule {
        self.rho_schedule.unwrap_or_else(|| self.optimizer.default_schedule())
    }

    pub fn optimizer_config(&self) -> OptimizerConfig {
        let base = BaseUpdateConfig {
            learning_rate: self.eta,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        };
        let mut cfg = OptimizerConfig::new(self.optimizer, base, self.rho0);
        cfg.beta = self.beta;
        cfg.schedule = self.schedule();
        cfg.sharpness = SharpnessOptions {
            variant: self.direction_variant,
            svd_tol: self.svd_tol,
            ..SharpnessOptions::default()
        };
        cfg
    }

    /// Canonical text form; parsing it gives back an equal config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let dims: Vec<String> = self.layer_dims.iter().map(usize::to_string).collect();
        let _ = writeln!(s, "task = {}", self.task);
        let _ = writeln!(s, "layer_dims = {}", dims.join(","));
        let _ = writeln!(s, "rank = {}", self.rank);
        let _ = writeln!(s, "scale = {:?}", self.scale);
        let _ = writeln!(s, "optimizer = {}", self.optimizer);
        let _ = writeln!(s, "rho0 = {:?}", self.rho0);
        let _ = writeln!(s, "beta = {:?}", self.beta);
        let _ = writeln!(s, "eta = {:?}", self.eta);
        let _ = writeln!(s, "momentum = {:?}", self.momentum);
        let _ = writeln!(s, "weight_decay = {:?}", self.weight_decay);
        let _ = writeln!(s, "rho_schedule = {}", schedule_name(self.schedule()));
        let _ = writeln!(s, "direction_variant = {}", variant_name(self.direction_variant));
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "steps = {}", self.steps);
        let _ = writeln!(s, "eval_every = {}", self.eval_every);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "svd_tol = {:?}", self.svd_tol);
        let _ = writeln!(s, "train_batches = {}", self.train_batches);
        let _ = writeln!(s, "eval_size = {}", self.eval_size);
        let _ = writeln!(s, "noise_std = {:?}", self.noise_std);
        let _ = writeln!(s, "separation = {:?}", self.separation);
        let _ = writeln!(s, "record_wall_time = {}", self.record_wall_time);
        s
    }

    /// First 16 hex digits of the SHA-256 of the canonical text without the
    /// seed, so all seeds of one configuration share a hash.
    pub fn hash(&self) -> String {
        let text: String = self
            .to_text()
            .lines()
            .filter(|l| !l.starts_with("seed ="))
            .flat_map(|l| [l, "\n"])
            .collect();
        let digest = Sha256::digest(text.as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Output file stem `<hash>_<seed>`.
    pub fn file_stem(&self) -> String {
        format!("{}_{}", self.hash(), self.seed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.layer_dims, vec![16, 16, 4]);
        assert_eq!((cfg.rank, cfg.batch_size, cfg.steps), (4, 32, 2000));
    }

    #[test]
    fn parses_comments_and_keys() {
        let cfg = ExperimentConfig::parse(
            "# header\n\ntask = matrix-factorization # trailing\nlayer_dims = 8, 6\nrank = 1\noptimizer = eflat-lora\n",
        )
        .unwrap();
        assert_eq!(cfg.task, TaskKind::MatrixFactorization);
        assert_eq!(cfg.layer_dims, vec![8, 6]);
        assert_eq!(cfg.optimizer, OptimizerKind::EflatLora);
        assert_eq!(cfg.schedule(), RhoSchedule::InverseSqrt);
    }

    #[test]
    fn reports_every_bad_field() {
        let err = ExperimentConfig::parse("rank = 9\neta = -1\nbeta = 0\nbogus = 1\nrank = 2\n").unwrap_err();
        let Error::Config(issues) = err else { panic!("expected config error") };
        let fields: Vec<&str> = issues.iter().map(|i| i.field.as_str()).collect();
        for f in ["bogus", "rank", "eta", "beta"] {
            assert!(fields.contains(&f), "{f} missing from {fields:?}");
        }
    }

    #[test]
    fn text_round_trip_and_hash() {
        let mut cfg = ExperimentConfig {
            rho0: 0.1 + 0.2,
            ..ExperimentConfig::default()
        };
        let back = ExperimentConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(back, ExperimentConfig { rho_schedule: Some(cfg.schedule()), ..cfg.clone() });
        let h = cfg.hash();
        assert_eq!(h.len(), 16);
        cfg.seed = 7;
        assert_eq!(cfg.hash(), h);
        cfg.rank = 2;
        assert_ne!(cfg.hash(), h);
    }
}
