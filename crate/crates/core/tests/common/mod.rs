//! Random fixtures and naive reference implementations shared by the
//! integration tests.

#![allow(dead_code)]

use flatlora::{Activation, Batch, LoraLinear, LossKind, Matrix, Network, Rng};

/// `rows × cols` with rank at most `rank`.
pub fn low_rank(rng: &mut Rng, rows: usize, cols: usize, rank: usize) -> Matrix {
    let left = rng.gaussian_matrix(rows, rank, 1.0);
    let right = rng.gaussian_matrix(rank, cols, 1.0);
    naive_matmul(&left, &right)
}

pub fn random_layer(rng: &mut Rng, m: usize, n: usize, r: usize) -> LoraLinear {
    let std = 1.0 / (m as f64).sqrt();
    let w0 = rng.gaussian_matrix(n, m, std);
    let b = rng.gaussian_matrix(n, r, 0.5);
    let a = rng.gaussian_matrix(r, m, std);
    let s = 0.5 + rng.uniform();
    LoraLinear::new(w0, b, a, s).unwrap()
}

/// Network over `dims` with nonzero `B` everywhere and per-layer rank
/// `min(rank, m, n)`.
pub fn random_network(rng: &mut Rng, dims: &[usize], rank: usize, activation: Activation, loss: LossKind) -> Network {
    let layers = dims
        .windows(2)
        .map(|w| random_layer(rng, w[0], w[1], rank.min(w[0]).min(w[1])))
        .collect();
    Network::new(layers, activation, loss).unwrap()
}

pub fn random_batch(rng: &mut Rng, net: &Network, size: usize) -> Batch {
    let inputs = rng.gaussian_matrix(net.input_dim(), size, 1.0);
    let targets = match net.loss_kind() {
        LossKind::MeanSquaredError => rng.gaussian_matrix(net.output_dim(), size, 1.0),
        LossKind::SoftmaxCrossEntropy => {
            let k = net.output_dim();
            let mut t = Matrix::zeros(k, size);
            for j in 0..size {
                let class = rng.below(k);
                t.set(class, j, 1.0);
            }
            t
        }
    };
    Batch::new(inputs, targets).unwrap()
}

pub fn random_dims(rng: &mut Rng, depth: usize, max: usize) -> Vec<usize> {
    (0..=depth).map(|_| rng.range_inclusive(1, max)).collect()
}

pub fn naive_matmul(a: &Matrix, b: &Matrix) -> Matrix {
    assert_eq!(a.cols(), b.rows());
    let mut out = Matrix::zeros(a.rows(), b.cols());
    for i in 0..a.rows() {
        for j in 0..b.cols() {
            let mut acc = 0.0;
            for k in 0..a.cols() {
                acc += a.get(i, k) * b.get(k, j);
            }
            out.set(i, j, acc);
        }
    }
    out
}

/// Inverse by Gauss-Jordan elimination with partial pivoting.
pub fn gauss_jordan_inverse(m: &Matrix) -> Matrix {
    let n = m.rows();
    assert_eq!(n, m.cols());
    let mut a: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let mut row: Vec<f64> = (0..n).map(|j| m.get(i, j)).collect();
            row.extend((0..n).map(|j| if i == j { 1.0 } else { 0.0 }));
            row
        })
        .collect();
    for c in 0..n {
        let p = (c..n)
            .max_by(|&x, &y| a[x][c].abs().total_cmp(&a[y][c].abs()))
            .unwrap();
        a.swap(c, p);
        let d = a[c][c];
        assert!(d != 0.0, "singular matrix");
        for v in a[c].iter_mut() {
            *v /= d;
        }
        for i in 0..n {
            if i != c {
                let f = a[i][c];
                if f != 0.0 {
                    let pivot = a[c].clone();
                    for (x, p) in a[i].iter_mut().zip(&pivot) {
                        *x -= f * p;
                    }
                }
            }
        }
    }
    Matrix::from_fn(n, n, |i, j| a[i][n + j])
}

/// `Aᵀ(AAᵀ)⁻¹A` for a full-row-rank `A`.
pub fn row_projector_oracle(a: &Matrix) -> Matrix {
    let gram = naive_matmul(a, &a.transpose());
    naive_matmul(&naive_matmul(&a.transpose(), &gauss_jordan_inverse(&gram)), a)
}

/// `B(BᵀB)⁻¹Bᵀ` for a full-column-rank `B`.
pub fn col_projector_oracle(b: &Matrix) -> Matrix {
    let gram = naive_matmul(&b.transpose(), b);
    naive_matmul(&naive_matmul(b, &gauss_jordan_inverse(&gram)), &b.transpose())
}

/// Merged weights `W0 + s·B·A` computed entry by entry.
pub fn naive_merged(layer: &LoraLinear) -> Matrix {
    let ba = naive_matmul(layer.b(), layer.a());
    Matrix::from_fn(layer.out_dim(), layer.in_dim(), |i, j| {
        layer.w0().get(i, j) + layer.scale() * ba.get(i, j)
    })
}

pub fn max_param_diff(a: &Network, b: &Network) -> f64 {
    a.layers()
        .iter()
        .zip(b.layers())
        .map(|(x, y)| x.b().max_abs_diff(y.b()).max(x.a().max_abs_diff(y.a())))
        .fold(0.0, f64::max)
}

/// Largest relative error between analytic and central-difference gradients
/// of `B`, `A` and the merged weights, with an absolute floor of `1e-6` on
/// the denominator.
pub fn finite_difference_error(net: &Network, batch: &Batch) -> f64 {
    const H: f64 = 1e-5;
    let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1e-6);
    let grads = net.backward(batch, true).unwrap();
    let mut worst: f64 = 0.0;
    for li in 0..net.layers().len() {
        for which in 0..2 {
            let analytic = if which == 0 { &grads.layers[li].b } else { &grads.layers[li].a };
            for idx in 0..analytic.len() {
                let at = |delta: f64| {
                    let mut probe = net.clone();
                    let layer = probe.layer_mut(li);
                    let mut p = if which == 0 { layer.b().clone() } else { layer.a().clone() };
                    p.as_mut_slice()[idx] += delta;
                    if which == 0 {
                        layer.set_b(p).unwrap();
                    } else {
                        layer.set_a(p).unwrap();
                    }
                    probe.loss(batch).unwrap()
                };
                let numeric = (at(H) - at(-H)) / (2.0 * H);
                worst = worst.max(rel(analytic.as_slice()[idx], numeric));
            }
        }
        let gw = grads.layers[li].w.as_ref().unwrap();
        let weights = net.merged_weights();
        for idx in 0..gw.len() {
            let at = |delta: f64| {
                let mut w = weights.clone();
                w[li].as_mut_slice()[idx] += delta;
                net.forward_with_weights(&w, batch).unwrap().1
            };
            let numeric = (at(H) - at(-H)) / (2.0 * H);
            worst = worst.max(rel(gw.as_slice()[idx], numeric));
        }
    }
    worst
}
