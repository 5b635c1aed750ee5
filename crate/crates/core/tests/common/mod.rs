//! Test-only oracles: central finite differences and brute-force helpers.
//! Nothing here calls into the analytic gradient code it is used to check.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tgl_core::gcn::GcnStack;
use tgl_core::graph::{normalize_adjacency, KnnGraph, NormalizedAdjacency};
use tgl_core::tensor::{generate_synthetic, SparseTensor};
use tgl_core::{gcn_forward, Activation, Matrix};

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Matrix<f64> {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(lo..hi))
}

/// Relative error with a floor on the magnitude so exact zeros on both
/// sides compare as equal.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(1e-6);
    (analytic - numeric).abs() / scale
}

/// Central-difference derivative of `f` with respect to every entry of
/// `param`, perturbing one entry at a time.
pub fn numeric_gradient(param: &Matrix<f64>, h: f64, mut f: impl FnMut(&Matrix<f64>) -> f64) -> Matrix<f64> {
    let mut probe = param.clone();
    let mut out = Matrix::zeros(param.rows(), param.cols());
    for i in 0..param.rows() {
        for j in 0..param.cols() {
            let original = probe[(i, j)];
            probe[(i, j)] = original + h;
            let up = f(&probe);
            probe[(i, j)] = original - h;
            let down = f(&probe);
            probe[(i, j)] = original;
            out[(i, j)] = (up - down) / (2.0 * h);
        }
    }
    out
}

pub fn max_relative_error(analytic: &Matrix<f64>, numeric: &Matrix<f64>) -> f64 {
    analytic
        .as_slice()
        .iter()
        .zip(numeric.as_slice())
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max)
}

/// Naive loss: loop over entries, recompute every product from scratch.
pub fn brute_force_loss(factors: &[Matrix<f64>], data: &SparseTensor<f64>) -> f64 {
    let rank = factors[0].cols();
    let mut total = 0.0;
    for e in 0..data.nnz() {
        let idx = data.index(e);
        let mut pred = 0.0;
        for r in 0..rank {
            pred += (0..factors.len()).map(|n| factors[n][(idx[n], r)]).product::<f64>();
        }
        total += (data.value(e) - pred).powi(2);
    }
    total
}

/// Random symmetric graph with edge probability `p`.
pub fn random_graph(rng: &mut ChaCha8Rng, n: usize, p: f64, weighted: bool) -> KnnGraph<f64> {
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if rng.random_bool(p) {
                let w = if weighted { rng.random_range(0.0..1.0) } else { 1.0 };
                edges.push((i, j, w));
            }
        }
    }
    KnnGraph::from_edges(n, edges).unwrap()
}

pub fn random_adjacency(rng: &mut ChaCha8Rng, n: usize) -> NormalizedAdjacency<f64> {
    let g = random_graph(rng, n, 0.4, false);
    normalize_adjacency(&g)
}

/// Dense reference of `D̃^{-1/2}(A + I)D̃^{-1/2}` computed with plain loops.
pub fn dense_normalized(adjacency: &Matrix<f64>) -> Matrix<f64> {
    let n = adjacency.rows();
    let tilde = Matrix::from_fn(n, n, |i, j| adjacency[(i, j)] + if i == j { 1.0 } else { 0.0 });
    let degree: Vec<f64> = (0..n).map(|i| (0..n).map(|j| tilde[(i, j)]).sum()).collect();
    Matrix::from_fn(n, n, |i, j| tilde[(i, j)] / (degree[i].sqrt() * degree[j].sqrt()))
}

/// Scalar test loss `Σ C ⊙ f(H)` for a fixed random weighting `C`.
pub fn weighted_output_sum(
    stack: &GcnStack<f64>,
    h: &Matrix<f64>,
    adj: &NormalizedAdjacency<f64>,
    c: &Matrix<f64>,
) -> f64 {
    let (out, _) = gcn_forward(stack, h, adj).unwrap();
    out.as_slice().iter().zip(c.as_slice()).map(|(a, b)| a * b).sum()
}

pub fn random_stack(
    rng: &mut ChaCha8Rng,
    dims: &[usize],
    activation: Activation,
    final_activation: Activation,
) -> GcnStack<f64> {
    let weights = dims
        .windows(2)
        .map(|d| uniform_matrix(rng, d[0], d[1], -1.0, 1.0))
        .collect();
    GcnStack::new(weights, activation, final_activation).unwrap()
}

/// Random factors plus a handful of observed entries with arbitrary values,
/// for gradient checks. Modes have 2 to 5 rows, rank 1 to 4.
pub fn random_cpd_instance(seed: u64) -> (Vec<Matrix<f64>>, SparseTensor<f64>) {
    let mut r = rng(seed);
    let shape: Vec<usize> = (0..3).map(|_| r.random_range(2..6)).collect();
    let rank = r.random_range(1..5);
    let factors: Vec<_> = shape
        .iter()
        .map(|&d| uniform_matrix(&mut r, d, rank, -1.0, 1.0))
        .collect();
    let cells: usize = shape.iter().product();
    let density = (r.random_range(4..=cells.min(20)) as f64) / cells as f64;
    let (data, _) = generate_synthetic::<f64>(&shape, 2, density, 0.0, seed).unwrap();
    let data = SparseTensor::from_flat(
        shape.clone(),
        (0..data.nnz()).flat_map(|e| data.index(e).to_vec()).collect(),
        (0..data.nnz()).map(|_| r.random_range(-1.0..1.0)).collect(),
    )
    .unwrap();
    (factors, data)
}
