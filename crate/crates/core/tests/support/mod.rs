//! Reference computations shared by the integration and acceptance tests.
//! Nothing here calls the simulator's gradient or SGD code.

#![allow(dead_code)]

use fedmeta::{Batch, Example, ModelSpec, ParamVector};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Hessian `A` and linear term `c` of the quadratic model's loss on `batch`,
/// so that `∇L(θ) = Aθ − c`. Parameter layout: weights row-major
/// (`outputs × inputs`), then biases.
pub fn quadratic_system(spec: &ModelSpec, batch: &Batch) -> (DMatrix<f64>, DVector<f64>) {
    let d = spec.input_dim();
    let k = spec.num_classes();
    let p = k * d + k;
    let n = batch.len() as f64;
    let mut a = DMatrix::zeros(p, p);
    let mut c = DVector::zeros(p);
    for ex in batch.examples() {
        let mut xt = ex.features.clone();
        xt.push(1.0);
        let idx = |o: usize, i: usize| if i < d { o * d + i } else { k * d + o };
        for o in 0..k {
            let y = if o == ex.label { 1.0 } else { 0.0 };
            for i in 0..=d {
                c[idx(o, i)] += y * xt[i] / n;
                for j in 0..=d {
                    a[(idx(o, i), idx(o, j))] += xt[i] * xt[j] / n;
                }
            }
        }
    }
    (a, c)
}

pub fn mat_pow(m: &DMatrix<f64>, k: usize) -> DMatrix<f64> {
    let mut out = DMatrix::identity(m.nrows(), m.ncols());
    for _ in 0..k {
        out = &out * m;
    }
    out
}

/// `(I−βA)^K A (I−βA)^K (θ−θ*)`: the exact MAML gradient after `K` full-batch
/// steps on a quadratic with minimizer `θ*`.
pub fn quadratic_maml(a: &DMatrix<f64>, c: &DVector<f64>, theta: &DVector<f64>, beta: f64, k: usize) -> DVector<f64> {
    let star = a.clone().lu().solve(c).expect("A is invertible");
    let m = mat_pow(&(DMatrix::identity(a.nrows(), a.ncols()) - a * beta), k);
    &m * a * &m * (theta - star)
}

/// `A (I−βA)^K (θ−θ*)`: the gradient at the adapted point.
pub fn quadratic_fomaml(a: &DMatrix<f64>, c: &DVector<f64>, theta: &DVector<f64>, beta: f64, k: usize) -> DVector<f64> {
    let star = a.clone().lu().solve(c).expect("A is invertible");
    let m = mat_pow(&(DMatrix::identity(a.nrows(), a.ncols()) - a * beta), k);
    a * &m * (theta - star)
}

/// `((I−βA)^K − I)(θ−θ*)`: the parameter change after `K` full-batch steps.
pub fn quadratic_k_step_delta(
    a: &DMatrix<f64>,
    c: &DVector<f64>,
    theta: &DVector<f64>,
    beta: f64,
    k: usize,
) -> DVector<f64> {
    let star = a.clone().lu().solve(c).expect("A is invertible");
    let id = DMatrix::identity(a.nrows(), a.ncols());
    let m = mat_pow(&(&id - a * beta), k);
    (m - id) * (theta - star)
}

/// Largest eigenvalue of a symmetric matrix.
pub fn lambda_max(a: &DMatrix<f64>) -> f64 {
    a.clone().symmetric_eigen().eigenvalues.max()
}

/// Central finite differences of `f` at `theta`.
pub fn fd_gradient(f: impl Fn(&[f64]) -> f64, theta: &[f64], h: f64) -> Vec<f64> {
    let mut probe = theta.to_vec();
    (0..theta.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let plus = f(&probe);
            probe[i] = orig - h;
            let minus = f(&probe);
            probe[i] = orig;
            (plus - minus) / (2.0 * h)
        })
        .collect()
}

/// Independent forward pass: mean loss of a dense network over `batch`.
pub fn reference_loss(spec: &ModelSpec, theta: &[f64], batch: &Batch) -> f64 {
    let dims: Vec<usize> = std::iter::once(spec.input_dim())
        .chain(spec.layer_dims().iter().copied())
        .collect();
    let act = |v: f64| match spec.activation() {
        fedmeta::Activation::Identity => v,
        fedmeta::Activation::Relu => v.max(0.0),
        fedmeta::Activation::Tanh => v.tanh(),
    };
    let mut total = 0.0;
    for ex in batch.examples() {
        let mut h = ex.features.clone();
        let mut off = 0;
        for l in 0..dims.len() - 1 {
            let (fi, fo) = (dims[l], dims[l + 1]);
            let w = &theta[off..off + fi * fo];
            let b = &theta[off + fi * fo..off + fi * fo + fo];
            off += fi * fo + fo;
            let z: Vec<f64> = (0..fo)
                .map(|o| (0..fi).map(|i| w[o * fi + i] * h[i]).sum::<f64>() + b[o])
                .collect();
            h = if l + 2 < dims.len() {
                z.into_iter().map(act).collect()
            } else {
                z
            };
        }
        total += match spec.loss() {
            fedmeta::LossKind::SoftmaxCrossEntropy => {
                let m = h.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + h.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
                lse - h[ex.label]
            }
            fedmeta::LossKind::Quadratic => {
                0.5 * h
                    .iter()
                    .enumerate()
                    .map(|(c, z)| (z - if c == ex.label { 1.0 } else { 0.0 }).powi(2))
                    .sum::<f64>()
            }
        };
    }
    total / batch.len() as f64
}

pub fn random_batch(rng: &mut ChaCha8Rng, n: usize, dim: usize, classes: usize) -> Batch {
    Batch::new(
        (0..n)
            .map(|_| {
                Example::new(
                    (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
                    rng.random_range(0..classes),
                )
            })
            .collect(),
    )
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_params(rng: &mut ChaCha8Rng, dim: usize, scale: f64) -> ParamVector {
    ParamVector::new((0..dim).map(|_| rng.random_range(-scale..scale)).collect())
}

pub fn to_dvec(p: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(p)
}

/// `max_i |a_i − b_i| / max(|a_i|, |b_i|, floor)`.
pub fn max_rel_err(a: &[f64], b: &[f64], floor: f64) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

pub fn rel_norm_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    diff / scale
}
