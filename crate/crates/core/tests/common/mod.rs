#![allow(dead_code)]

use tavlab::taskgen::{make_task_family, TaskSpec};
use tavlab::{Activation, DenseMatrix, MlpArchitecture, MlpModel, ParamVector, TaskDataset};

pub fn spec(samples: usize, input_dim: usize, classes: usize, m_x: f64) -> TaskSpec {
    TaskSpec {
        samples,
        input_dim,
        classes,
        m_x,
        separation: 8.0,
    }
}

pub fn fixture(
    dims: &[usize],
    act: Activation,
    seed: u64,
    gain: f64,
    tasks: usize,
    samples: usize,
) -> (MlpModel, Vec<TaskDataset>) {
    let arch = MlpArchitecture::new(dims.to_vec(), act).unwrap();
    let base = MlpModel::random(&arch, seed, gain);
    let family = make_task_family(seed, tasks, &spec(samples, dims[0], *dims.last().unwrap(), 4.0)).unwrap();
    (base, family)
}

fn act(a: Activation, z: f64) -> f64 {
    match a {
        Activation::Relu => {
            if z > 0.0 {
                z
            } else {
                0.0
            }
        }
        Activation::Sigmoid => 1.0 / (1.0 + (-z).exp()),
        Activation::Tanh => z.tanh(),
        Activation::Identity => z,
    }
}

/// Straight-line forward pass with explicit loops over weight rows.
pub fn oracle_logits(model: &MlpModel, x: &[f64]) -> Vec<f64> {
    let arch = model.arch();
    let depth = model.weights().len();
    let mut a = x.to_vec();
    for (l, w) in model.weights().iter().enumerate() {
        let mut z = Vec::with_capacity(w.rows());
        for i in 0..w.rows() {
            let mut s = 0.0;
            for (j, aj) in a.iter().enumerate() {
                s += w[(i, j)] * aj;
            }
            if let Some(b) = model.bias(l) {
                s += b[i];
            }
            z.push(s);
        }
        a = if l + 1 == depth {
            z
        } else {
            z.into_iter().map(|v| act(arch.activation, v)).collect()
        };
    }
    a
}

/// Mean of `−log softmax(z)_y`, written directly from the definition.
pub fn oracle_loss(model: &MlpModel, data: &TaskDataset) -> f64 {
    let mut total = 0.0;
    for (x, &y) in data.inputs.iter().zip(&data.labels) {
        let z = oracle_logits(model, x);
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = z.iter().map(|v| (v - m).exp()).sum();
        total += -((z[y] - m).exp() / denom).ln();
    }
    total / data.len() as f64
}

pub fn oracle_accuracy(model: &MlpModel, data: &TaskDataset) -> f64 {
    let mut hits = 0;
    for (x, &y) in data.inputs.iter().zip(&data.labels) {
        let z = oracle_logits(model, x);
        let best = (0..z.len()).fold(0, |b, k| if z[k] > z[b] { k } else { b });
        hits += usize::from(best == y);
    }
    hits as f64 / data.len() as f64
}

/// Central differences of [`oracle_loss`].
pub fn oracle_fd_grad(model: &MlpModel, data: &TaskDataset, eps: f64) -> ParamVector {
    let theta = model.flatten();
    let arch = model.arch();
    let out = (0..theta.len())
        .map(|i| {
            let mut p = theta.clone();
            p[i] += eps;
            let mut m = theta.clone();
            m[i] -= eps;
            let lp = oracle_loss(&MlpModel::unflatten(arch, &p).unwrap(), data);
            let lm = oracle_loss(&MlpModel::unflatten(arch, &m).unwrap(), data);
            (lp - lm) / (2.0 * eps)
        })
        .collect();
    ParamVector::new(out)
}

/// Euclidean norm with scaling and Neumaier-compensated summation.
pub fn oracle_norm(v: &[f64]) -> f64 {
    let scale = v.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
    if scale == 0.0 {
        return 0.0;
    }
    let (mut sum, mut comp) = (0.0_f64, 0.0_f64);
    for x in v {
        let term = (x / scale) * (x / scale);
        let t = sum + term;
        if sum.abs() >= term.abs() {
            comp += (sum - t) + term;
        } else {
            comp += (term - t) + sum;
        }
        sum = t;
    }
    scale * (sum + comp).sqrt()
}

/// Largest singular value by one-sided Jacobi orthogonalisation of columns.
pub fn oracle_sigma_max(m: &DenseMatrix) -> f64 {
    let (rows, cols) = (m.rows(), m.cols());
    let mut a: Vec<Vec<f64>> = (0..cols).map(|j| (0..rows).map(|i| m[(i, j)]).collect()).collect();
    for _sweep in 0..100 {
        let mut rotated = false;
        for p in 0..cols {
            for q in (p + 1)..cols {
                let alpha: f64 = a[p].iter().map(|x| x * x).sum();
                let beta: f64 = a[q].iter().map(|x| x * x).sum();
                let gamma: f64 = a[p].iter().zip(&a[q]).map(|(x, y)| x * y).sum();
                if gamma.abs() <= 1e-15 * (alpha * beta).sqrt() || gamma == 0.0 {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..rows {
                    let (x, y) = (a[p][i], a[q][i]);
                    a[p][i] = c * x - s * y;
                    a[q][i] = s * x + c * y;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    a.iter().map(|c| oracle_norm(c)).fold(0.0, f64::max)
}

pub fn to_nalgebra(m: &DenseMatrix) -> nalgebra::DMatrix<f64> {
    nalgebra::DMatrix::from_fn(m.rows(), m.cols(), |i, j| m[(i, j)])
}

pub fn max_abs_diff(a: &ParamVector, b: &ParamVector) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn rel_diff(a: &ParamVector, b: &ParamVector) -> f64 {
    let d = oracle_norm(a.sub(b).unwrap().as_slice());
    d / oracle_norm(b.as_slice()).max(f64::MIN_POSITIVE)
}

pub fn random_direction(len: usize, seed: u64) -> ParamVector {
    ParamVector::new(DenseMatrix::random_normal(len, 1, 1.0, seed).as_slice().to_vec())
}
