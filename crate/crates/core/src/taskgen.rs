//! Seeded synthetic classification tasks with a certified input-norm bound.
//!
//! Generator (version 1), all draws from one `SplitMix64` stream seeded
//! with `seed`:
//!
//! 1. For each class `k` in order: draw `d₀` standard normals, normalise to a
//!    unit vector `u_k`, and set the class mean `μ_k = (separation / 2)·u_k`.
//! 2. For each sample `i` in order: label `y_i = i mod K`, input
//!    `x_i = μ_{y_i} + ξ_i` with `ξ_i` a fresh `d₀`-vector of standard normals.
//! 3. If the largest sample norm exceeds `M_x`, every sample is multiplied by
//!    `M_x / max_i ‖x_i‖`; samples that still exceed `M_x` through rounding are
//!    shrunk by one ulp-scale factor until they do not.
//!
//! Task `t` of a family uses seed `seed + t·0x9E3779B97F4A7C15` (wrapping).

use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};
use rand_xoshiro::SplitMix64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::norm2_unchecked;

pub const GENERATOR_VERSION: u32 = 1;
const SEED_STRIDE: u64 = 0x9E37_79B9_7F4A_7C15;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskDataset {
    pub task_id: usize,
    pub m_x_bound: f64,
    pub num_classes: usize,
    pub inputs: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub seed: u64,
    pub generator_version: u32,
    /// Set when `n_t < K`, so some classes cannot be present.
    #[serde(default)]
    pub degenerate: bool,
}

/// Parameters shared by every task of a family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub samples: usize,
    pub input_dim: usize,
    pub classes: usize,
    pub m_x: f64,
    pub separation: f64,
}

impl TaskDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.first().map_or(0, Vec::len)
    }

    pub fn max_input_norm(&self) -> f64 {
        self.inputs.iter().map(|x| norm2_unchecked(x)).fold(0.0, f64::max)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &y in &self.labels {
            if y < self.num_classes {
                counts[y] += 1;
            }
        }
        counts
    }

    /// Same samples repeated `times` times (mean loss is unchanged).
    pub fn repeated(&self, times: usize) -> Self {
        let mut out = self.clone();
        out.inputs = (0..times).flat_map(|_| self.inputs.iter().cloned()).collect();
        out.labels = (0..times).flat_map(|_| self.labels.iter().copied()).collect();
        out
    }

    /// Structural and bound checks run on every dataset read from disk.
    pub fn validate(&self) -> Result<()> {
        if self.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if self.inputs.len() != self.labels.len() {
            return Err(Error::LengthMismatch {
                expected: self.labels.len(),
                actual: self.inputs.len(),
            });
        }
        let d0 = self.input_dim();
        for x in &self.inputs {
            if x.len() != d0 {
                return Err(Error::DimensionMismatch {
                    expected: d0,
                    actual: x.len(),
                });
            }
            if x.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite);
            }
        }
        for &y in &self.labels {
            if y >= self.num_classes {
                return Err(Error::LabelOutOfRange {
                    label: y,
                    classes: self.num_classes,
                });
            }
        }
        for (index, x) in self.inputs.iter().enumerate() {
            let norm = norm2_unchecked(x);
            if norm > self.m_x_bound {
                return Err(Error::BoundViolated {
                    index,
                    norm,
                    bound: self.m_x_bound,
                });
            }
        }
        if !self.degenerate && self.class_counts().contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "task {} is missing a class",
                self.task_id
            )));
        }
        Ok(())
    }
}

pub fn make_task(
    seed: u64,
    samples: usize,
    input_dim: usize,
    classes: usize,
    m_x: f64,
    separation: f64,
) -> Result<TaskDataset> {
    make_task_with_id(0, seed, samples, input_dim, classes, m_x, separation)
}

fn make_task_with_id(
    task_id: usize,
    seed: u64,
    samples: usize,
    input_dim: usize,
    classes: usize,
    m_x: f64,
    separation: f64,
) -> Result<TaskDataset> {
    if samples == 0 || input_dim == 0 {
        return Err(Error::InvalidArgument("samples and input_dim must be ≥ 1".into()));
    }
    if classes < 2 {
        return Err(Error::InvalidArgument(format!("need K ≥ 2 classes, got {classes}")));
    }
    if !(m_x > 0.0) || !m_x.is_finite() {
        return Err(Error::InvalidArgument(format!("M_x must be positive, got {m_x}")));
    }
    if !(separation >= 0.0) || !separation.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "separation must be ≥ 0, got {separation}"
        )));
    }

    let mut rng = SplitMix64::seed_from_u64(seed);
    let mut normal = || -> f64 { StandardNormal.sample(&mut rng) };

    let means: Vec<Vec<f64>> = (0..classes)
        .map(|_| {
            let u: Vec<f64> = (0..input_dim).map(|_| normal()).collect();
            let n = norm2_unchecked(&u);
            u.iter().map(|v| 0.5 * separation * v / n).collect()
        })
        .collect();

    let labels: Vec<usize> = (0..samples).map(|i| i % classes).collect();
    let mut inputs: Vec<Vec<f64>> = labels
        .iter()
        .map(|&y| means[y].iter().map(|m| m + normal()).collect())
        .collect();

    let max_norm = inputs.iter().map(|x| norm2_unchecked(x)).fold(0.0, f64::max);
    if max_norm > m_x {
        let factor = m_x / max_norm;
        for x in &mut inputs {
            x.iter_mut().for_each(|v| *v *= factor);
            while norm2_unchecked(x) > m_x {
                x.iter_mut().for_each(|v| *v *= 1.0 - f64::EPSILON);
            }
        }
    }

    Ok(TaskDataset {
        task_id,
        m_x_bound: m_x,
        num_classes: classes,
        inputs,
        labels,
        seed,
        generator_version: GENERATOR_VERSION,
        degenerate: samples < classes,
    })
}

/// Seed of task `t` within a family rooted at `seed`.
pub fn family_seed(seed: u64, t: usize) -> u64 {
    seed.wrapping_add((t as u64).wrapping_mul(SEED_STRIDE))
}

pub fn make_task_family(seed: u64, count: usize, spec: &TaskSpec) -> Result<Vec<TaskDataset>> {
    if count == 0 {
        return Err(Error::InvalidArgument("task family needs T ≥ 1".into()));
    }
    (0..count)
        .map(|t| {
            make_task_with_id(
                t,
                family_seed(seed, t),
                spec.samples,
                spec.input_dim,
                spec.classes,
                spec.m_x,
                spec.separation,
            )
        })
        .collect()
}
