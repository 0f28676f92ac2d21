//! Seeded synthetic tasks: teacher-student regression, two Gaussian clusters,
//! and rank-one matrix factorization.

use crate::error::{Error, Result};
use crate::linalg::{Matrix, Rng};
use crate::model::{Activation, Batch, LossKind, Network};

use super::config::{ExperimentConfig, TaskKind};

/// Sizes and noise controlling [`generate_task`].
#[derive(Debug, Clone, PartialEq)]
pub struct TaskSizes {
    pub layer_dims: Vec<usize>,
    /// Rank of the teacher's shift away from the base weights.
    pub rank: usize,
    pub batch_size: usize,
    pub train_batches: usize,
    pub eval_size: usize,
    pub noise_std: f64,
    pub separation: f64,
}

impl TaskSizes {
    pub fn from_config(cfg: &ExperimentConfig) -> Self {
        Self {
            layer_dims: cfg.layer_dims.clone(),
            rank: cfg.rank,
            batch_size: cfg.batch_size,
            train_batches: cfg.train_batches,
            eval_size: cfg.eval_size,
            noise_std: cfg.noise_std,
            separation: cfg.separation,
        }
    }
}

/// A generated task: frozen base weights, the architecture, fixed training
/// minibatches (cycled in order) and a held-out batch.
#[derive(Debug, Clone)]
pub struct Task {
    pub kind: TaskKind,
    /// `W0` per layer, output width by input width.
    pub base: Vec<Matrix>,
    pub activation: Activation,
    pub loss: LossKind,
    pub train: Vec<Batch>,
    pub eval: Batch,
    /// Weights that generated the targets (teacher-student and matrix factorization).
    pub teacher: Option<Vec<Matrix>>,
}

impl Task {
    pub fn train_batch(&self, step: usize) -> &Batch {
        &self.train[step % self.train.len()]
    }

    /// All training examples as one batch.
    pub fn full_train(&self) -> Result<Batch> {
        Batch::concat(&self.train)
    }

    /// Network whose frozen weights are the teacher's, with `B = 0`.
    pub fn teacher_network(&self) -> Option<Result<Network>> {
        let weights = self.teacher.clone()?;
        let mut rng = Rng::new(0);
        Some(Network::from_base_weights(weights, 1, 1.0, self.activation, self.loss, &mut rng))
    }
}

fn base_weights(rng: &mut Rng, dims: &[usize]) -> Vec<Matrix> {
    dims.windows(2)
        .map(|w| rng.gaussian_matrix(w[1], w[0], 1.0 / (w[0] as f64).sqrt()))
        .collect()
}

/// Deterministic in `seed`.
pub fn generate_task(kind: TaskKind, seed: u64, sizes: &TaskSizes) -> Result<Task> {
    let dims = &sizes.layer_dims;
    if dims.len() < 2 || dims.contains(&0) || sizes.batch_size == 0 || sizes.train_batches == 0 || sizes.eval_size == 0 {
        return Err(Error::Domain("task sizes must be positive".into()));
    }
    match kind {
        TaskKind::TeacherStudent => teacher_student(seed, sizes),
        TaskKind::TwoCluster => two_cluster(seed, sizes),
        TaskKind::MatrixFactorization => matrix_factorization(seed, sizes),
    }
}

fn teacher_student(seed: u64, sizes: &TaskSizes) -> Result<Task> {
    let dims = &sizes.layer_dims;
    let mut rng = Rng::with_stream(seed, 1);
    let base = base_weights(&mut rng, dims);
    // Low-rank shift with entries of about half the base weights' scale.
    let r = sizes.rank.max(1);
    let teacher: Vec<Matrix> = base
        .iter()
        .map(|w0| {
            let (n, m) = w0.shape();
            let r = r.min(n).min(m);
            let p = rng.gaussian_matrix(n, r, 1.0);
            let q = rng.gaussian_matrix(r, m, (0.25 / (r * m) as f64).sqrt());
            w0.add(&p.matmul(&q)?)
        })
        .collect::<Result<_>>()?;
    let activation = Activation::Tanh;
    let loss = LossKind::MeanSquaredError;
    let mut tmp = Rng::new(0);
    let teacher_net = Network::from_base_weights(teacher.clone(), 1, 1.0, activation, loss, &mut tmp)?;

    let mut data_rng = Rng::with_stream(seed, 2);
    let mut sample = |count: usize| -> Result<Batch> {
        let inputs = data_rng.gaussian_matrix(dims[0], count, 1.0);
        let placeholder = Matrix::zeros(*dims.last().unwrap(), count);
        let (clean, _) = teacher_net.forward(&Batch::new(inputs.clone(), placeholder)?)?;
        let noise = data_rng.gaussian_matrix(clean.rows(), count, sizes.noise_std);
        Batch::new(inputs, clean.add(&noise)?)
    };
    let train = (0..sizes.train_batches)
        .map(|_| sample(sizes.batch_size))
        .collect::<Result<Vec<_>>>()?;
    let eval = sample(sizes.eval_size)?;
    Ok(Task {
        kind: TaskKind::TeacherStudent,
        base,
        activation,
        loss,
        train,
        eval,
        teacher: Some(teacher),
    })
}

fn two_cluster(seed: u64, sizes: &TaskSizes) -> Result<Task> {
    let dims = &sizes.layer_dims;
    let (m, k) = (dims[0], *dims.last().unwrap());
    if k < 2 {
        return Err(Error::Domain("two-cluster classification needs at least two outputs".into()));
    }
    let mut rng = Rng::with_stream(seed, 1);
    let base = base_weights(&mut rng, dims);
    let dir = rng.normal_vec(m);
    let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
    let half = 0.5 * sizes.separation / norm;

    let mut data_rng = Rng::with_stream(seed, 2);
    let mut sample = |count: usize| -> Result<Batch> {
        let mut inputs = data_rng.gaussian_matrix(m, count, 1.0);
        let mut targets = Matrix::zeros(k, count);
        for j in 0..count {
            let label = data_rng.below(2);
            let sign = if label == 0 { -1.0 } else { 1.0 };
            for (i, d) in dir.iter().enumerate() {
                inputs.set(i, j, inputs.get(i, j) + sign * half * d);
            }
            targets.set(label, j, 1.0);
        }
        Batch::new(inputs, targets)
    };
    let train = (0..sizes.train_batches)
        .map(|_| sample(sizes.batch_size))
        .collect::<Result<Vec<_>>>()?;
    let eval = sample(sizes.eval_size)?;
    Ok(Task {
        kind: TaskKind::TwoCluster,
        base,
        activation: Activation::Tanh,
        loss: LossKind::SoftmaxCrossEntropy,
        train,
        eval,
        teacher: None,
    })
}

/// Single linear layer with `W0 = 0` fitted to `M* = x* y*ᵀ`. The inputs are
/// `√m·I`, so the loss equals `½‖W − M*‖²_F`.
fn matrix_factorization(seed: u64, sizes: &TaskSizes) -> Result<Task> {
    let dims = &sizes.layer_dims;
    if dims.len() != 2 {
        return Err(Error::Domain("matrix factorization uses a single layer".into()));
    }
    let (m, n) = (dims[0], dims[1]);
    let mut rng = Rng::with_stream(seed, 1);
    let x = rng.normal_vec(n);
    let y = rng.normal_vec(m);
    let target = Matrix::from_fn(n, m, |i, j| x[i] * y[j]);
    let root = (m as f64).sqrt();
    let batch = Batch::new(Matrix::identity(m).scaled(root), target.scaled(root))?;
    Ok(Task {
        kind: TaskKind::MatrixFactorization,
        base: vec![Matrix::zeros(n, m)],
        activation: Activation::Identity,
        loss: LossKind::MeanSquaredError,
        train: vec![batch.clone(); sizes.train_batches],
        eval: batch,
        teacher: Some(vec![target]),
    })
}

/// Fraction of columns whose arg-max prediction matches the arg-max target.
pub fn accuracy(net: &Network, batch: &Batch) -> Result<f64> {
    let (pred, _) = net.forward(batch)?;
    let argmax = |m: &Matrix, j: usize| {
        (0..m.rows())
            .max_by(|&a, &b| m.get(a, j).total_cmp(&m.get(b, j)))
            .unwrap_or(0)
    };
    let hits = (0..batch.size())
        .filter(|&j| argmax(&pred, j) == argmax(&batch.targets, j))
        .count();
    Ok(hits as f64 / batch.size() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sizes() -> TaskSizes {
        TaskSizes::from_config(&ExperimentConfig {
            train_batches: 2,
            eval_size: 16,
            ..ExperimentConfig::default()
        })
    }

    #[test]
    fn same_seed_same_batches() {
        for kind in [TaskKind::TeacherStudent, TaskKind::TwoCluster] {
            let a = generate_task(kind, 5, &sizes()).unwrap();
            let b = generate_task(kind, 5, &sizes()).unwrap();
            assert_eq!(a.train, b.train);
            assert_eq!(a.eval, b.eval);
            let c = generate_task(kind, 6, &sizes()).unwrap();
            assert_ne!(a.eval, c.eval);
        }
    }

    #[test]
    fn noiseless_teacher_is_exact() {
        let s = TaskSizes { noise_std: 0.0, ..sizes() };
        let task = generate_task(TaskKind::TeacherStudent, 1, &s).unwrap();
        let teacher = task.teacher_network().unwrap().unwrap();
        assert!(teacher.loss(&task.eval).unwrap() <= 1e-20);
    }

    #[test]
    fn factorization_loss_is_half_squared_distance() {
        let s = TaskSizes { layer_dims: vec![5, 3], rank: 1, ..sizes() };
        let task = generate_task(TaskKind::MatrixFactorization, 2, &s).unwrap();
        let net = Network::from_base_weights(task.base.clone(), 1, 1.0, task.activation, task.loss, &mut Rng::new(0))
            .unwrap();
        let want = 0.5 * task.teacher.as_ref().unwrap()[0].frobenius_norm_sq();
        assert!((net.loss(&task.eval).unwrap() - want).abs() < 1e-12 * want.max(1.0));
    }
}
