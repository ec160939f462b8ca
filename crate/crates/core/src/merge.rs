//! Task vectors, the task-arithmetic merge, and the expansion terms that
//! relate a TA merge to multitask GD.
//!
//! Along a multitask trajectory `θ⁽⁰⁾, θ⁽¹⁾, …` (step `αη` on `Σ_t L̄_t`):
//!
//! * `r_t(θ) = α Σ_{t'} ∇L̄_{t'}(θ) − ∇L̄_t(θ)` is the per-step gradient mismatch,
//! * `p_t^k = Σ_{j=0}^{k} r_t(θ⁽ʲ⁾)` accumulates it,
//! * `s_t^k = Σ_{j=0}^{k} ∇²L̄_t(anchor(j)) p_t^j` weights it by curvature,
//! * `C_h = Σ_t s_t^h`.
//!
//! The anchor is `θ⁽ʲ⁾` or `θ⁽ʲ⁺¹⁾` (see [`HessianAnchor`]); the two differ at
//! third order in `η`. Hessians are only ever applied through [`hvp`].

use serde::{Deserialize, Serialize};

use crate::autodiff::{grad, hvp};
use crate::error::{Error, Result};
use crate::network::{MlpArchitecture, MlpModel};
use crate::par;
use crate::taskgen::TaskDataset;
use crate::tensor::ParamVector;
use crate::trainer::Trajectory;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskVector {
    pub task_id: usize,
    pub epochs: usize,
    pub delta: ParamVector,
}

/// Final checkpoint minus the base checkpoint.
pub fn task_vector(traj: &Trajectory) -> Result<TaskVector> {
    if traj.checkpoints.is_empty() {
        return Err(Error::InsufficientCheckpoints {
            needed: 1,
            available: 0,
        });
    }
    Ok(TaskVector {
        task_id: traj.task_ids.first().copied().unwrap_or(0),
        epochs: traj.epochs(),
        delta: traj.last().sub(traj.base())?,
    })
}

/// `Σ_t τ_t`, summed in slice order.
pub fn multitask_vector(vectors: &[TaskVector]) -> Result<ParamVector> {
    let len = vectors
        .first()
        .map(|v| v.delta.len())
        .ok_or_else(|| Error::InvalidArgument("no task vectors".into()))?;
    ParamVector::sum(len, vectors.iter().map(|v| &v.delta))
}

/// `θ_base + α Σ_t τ_t`.
pub fn merge_ta(base: &MlpModel, vectors: &[TaskVector], alpha: f64) -> Result<MlpModel> {
    let p = base.arch().param_count();
    if let Some(bad) = vectors.iter().find(|v| v.delta.len() != p) {
        return Err(Error::LengthMismatch {
            expected: p,
            actual: bad.delta.len(),
        });
    }
    let mut theta = base.flatten();
    if !vectors.is_empty() {
        theta.axpy(alpha, &multitask_vector(vectors)?)?;
    }
    MlpModel::unflatten(base.arch(), &theta)
}

/// Where the Hessian in `s_t` and `C` is evaluated for accumulation index `j`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HessianAnchor {
    /// `∇²L̄_t(θ⁽ʲ⁾)`
    MainText,
    /// `∇²L̄_t(θ⁽ʲ⁺¹⁾)`
    Appendix,
}

impl HessianAnchor {
    fn offset(self) -> usize {
        match self {
            HessianAnchor::MainText => 0,
            HessianAnchor::Appendix => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphaFactor {
    One,
    Alpha,
}

/// Coefficient of `η²` in front of the curvature term: `Half` is `η²/2`,
/// `Full` is `η²` (a first-order Taylor step of the gradient).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaylorScale {
    Half,
    Full,
}

/// One candidate convention for the second-order TA/MT gap,
/// `gap ≈ (η²/2)·factor·C` with `factor = sign · (1 | α) · (1 | 2)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurvatureTermConfig {
    pub hessian_anchor: HessianAnchor,
    pub sign_factor: i8,
    pub alpha_factor: AlphaFactor,
    pub taylor_scale: TaylorScale,
}

impl Default for CurvatureTermConfig {
    fn default() -> Self {
        Self {
            hessian_anchor: HessianAnchor::MainText,
            sign_factor: 1,
            alpha_factor: AlphaFactor::One,
            taylor_scale: TaylorScale::Half,
        }
    }
}

impl CurvatureTermConfig {
    /// Every combination of anchor, sign, α-factor and Taylor scale.
    pub fn candidates() -> Vec<Self> {
        let mut out = Vec::with_capacity(16);
        for hessian_anchor in [HessianAnchor::MainText, HessianAnchor::Appendix] {
            for sign_factor in [1, -1] {
                for alpha_factor in [AlphaFactor::One, AlphaFactor::Alpha] {
                    for taylor_scale in [TaylorScale::Half, TaylorScale::Full] {
                        out.push(Self {
                            hessian_anchor,
                            sign_factor,
                            alpha_factor,
                            taylor_scale,
                        });
                    }
                }
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.sign_factor == 1 || self.sign_factor == -1 {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "sign_factor must be ±1, got {}",
                self.sign_factor
            )))
        }
    }

    /// Multiplier applied to the raw `C`.
    pub fn factor(&self, alpha: f64) -> f64 {
        let a = match self.alpha_factor {
            AlphaFactor::One => 1.0,
            AlphaFactor::Alpha => alpha,
        };
        let t = match self.taylor_scale {
            TaylorScale::Half => 1.0,
            TaylorScale::Full => 2.0,
        };
        f64::from(self.sign_factor) * a * t
    }

    pub fn label(&self) -> String {
        format!(
            "{}|{}|{}|{}",
            match self.hessian_anchor {
                HessianAnchor::MainText => "main",
                HessianAnchor::Appendix => "appendix",
            },
            if self.sign_factor > 0 { "+" } else { "-" },
            match self.alpha_factor {
                AlphaFactor::One => "1",
                AlphaFactor::Alpha => "alpha",
            },
            match self.taylor_scale {
                TaylorScale::Half => "half",
                TaylorScale::Full => "full",
            }
        )
    }
}

/// `α Σ_{t'} g_{t'} − g_t` from precomputed per-task gradients.
pub fn residual_from_grads(t: usize, grads: &[ParamVector], alpha: f64) -> Result<ParamVector> {
    let len = grads[t].len();
    let total = ParamVector::sum(len, grads)?;
    total.scale(alpha).sub(&grads[t])
}

fn task_grads(model: &MlpModel, tasks: &[TaskDataset]) -> Result<Vec<ParamVector>> {
    par::map_collect(tasks, |task| grad(model, task)).into_iter().collect()
}

/// `r_t(θ)`.
pub fn residual_r(t: usize, theta: &MlpModel, tasks: &[TaskDataset], alpha: f64) -> Result<ParamVector> {
    check_task_index(t, tasks)?;
    residual_from_grads(t, &task_grads(theta, tasks)?, alpha)
}

fn check_task_index(t: usize, tasks: &[TaskDataset]) -> Result<()> {
    if t < tasks.len() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "task index {t} out of range for {} tasks",
            tasks.len()
        )))
    }
}

/// Per-task gradients at every checkpoint of a multitask trajectory, and
/// the `r`, `p`, `s`, `C` terms built from them.
#[derive(Debug, Clone)]
pub struct MultitaskExpansion<'a> {
    arch: &'a MlpArchitecture,
    checkpoints: &'a [ParamVector],
    tasks: &'a [TaskDataset],
    alpha: f64,
    /// `grads[j][t] = ∇L̄_t(θ⁽ʲ⁾)`
    grads: Vec<Vec<ParamVector>>,
}

impl<'a> MultitaskExpansion<'a> {
    /// Evaluates task gradients at the first `upto + 1` checkpoints.
    pub fn new(
        arch: &'a MlpArchitecture,
        checkpoints: &'a [ParamVector],
        tasks: &'a [TaskDataset],
        alpha: f64,
        upto: usize,
    ) -> Result<Self> {
        if tasks.is_empty() {
            return Err(Error::InvalidArgument("no tasks".into()));
        }
        if checkpoints.len() < upto + 1 {
            return Err(Error::InsufficientCheckpoints {
                needed: upto + 1,
                available: checkpoints.len(),
            });
        }
        let jobs: Vec<(usize, usize)> = (0..=upto).flat_map(|j| (0..tasks.len()).map(move |t| (j, t))).collect();
        let flat = par::map_collect(&jobs, |&(j, t)| {
            let m = MlpModel::unflatten(arch, &checkpoints[j])?;
            grad(&m, &tasks[t])
        });
        let mut grads = vec![Vec::with_capacity(tasks.len()); upto + 1];
        for ((j, _), g) in jobs.iter().zip(flat) {
            grads[*j].push(g?);
        }
        Ok(Self {
            arch,
            checkpoints,
            tasks,
            alpha,
            grads,
        })
    }

    pub fn task_count(&self) -> usize {
        self.tasks.len()
    }

    /// `∇L̄_t(θ⁽ʲ⁾)`
    pub fn grad(&self, t: usize, j: usize) -> &ParamVector {
        &self.grads[j][t]
    }

    pub fn residual(&self, t: usize, j: usize) -> Result<ParamVector> {
        residual_from_grads(t, &self.grads[j], self.alpha)
    }

    /// `p_t^k`
    pub fn accum(&self, t: usize, k: usize) -> Result<ParamVector> {
        self.check_index(k)?;
        let mut acc = ParamVector::zeros(self.grads[0][t].len());
        for j in 0..=k {
            acc.add_assign(&self.residual(t, j)?)?;
        }
        Ok(acc)
    }

    fn check_index(&self, k: usize) -> Result<()> {
        if k < self.grads.len() {
            Ok(())
        } else {
            Err(Error::InsufficientCheckpoints {
                needed: k + 1,
                available: self.grads.len(),
            })
        }
    }

    fn anchor_checkpoint(&self, j: usize, anchor: HessianAnchor) -> Result<&ParamVector> {
        let idx = j + anchor.offset();
        self.checkpoints.get(idx).ok_or(Error::InsufficientCheckpoints {
            needed: idx + 1,
            available: self.checkpoints.len(),
        })
    }

    /// `[p_t^0, …, p_t^k]`
    fn accum_prefixes(&self, t: usize, k: usize) -> Result<Vec<ParamVector>> {
        self.check_index(k)?;
        let mut out = Vec::with_capacity(k + 1);
        let mut acc = ParamVector::zeros(self.grads[0][t].len());
        for j in 0..=k {
            acc.add_assign(&self.residual(t, j)?)?;
            out.push(acc.clone());
        }
        Ok(out)
    }

    /// Hessian-weighted terms `∇²L̄_t(anchor(j)) p_t^j` for `j = 0..=k` and
    /// every task in `task_set`, evaluated concurrently.
    fn curvature_terms(&self, task_set: &[usize], k: usize, anchor: HessianAnchor) -> Result<Vec<Vec<ParamVector>>> {
        for j in 0..=k {
            self.anchor_checkpoint(j, anchor)?;
        }
        let prefixes = task_set
            .iter()
            .map(|&t| self.accum_prefixes(t, k))
            .collect::<Result<Vec<_>>>()?;
        let jobs: Vec<(usize, usize)> = (0..task_set.len()).flat_map(|i| (0..=k).map(move |j| (i, j))).collect();
        let flat = par::map_collect(&jobs, |&(i, j)| -> Result<ParamVector> {
            let theta = self.anchor_checkpoint(j, anchor)?;
            let model = MlpModel::unflatten(self.arch, theta)?;
            hvp(&model, &self.tasks[task_set[i]], &prefixes[i][j])
        });
        let mut out: Vec<Vec<ParamVector>> = vec![Vec::with_capacity(k + 1); task_set.len()];
        for ((i, _), v) in jobs.iter().zip(flat) {
            out[*i].push(v?);
        }
        Ok(out)
    }

    /// `s_t^k`
    pub fn curvature(&self, t: usize, k: usize, anchor: HessianAnchor) -> Result<ParamVector> {
        let terms = self.curvature_terms(&[t], k, anchor)?;
        ParamVector::sum(self.grads[0][t].len(), &terms[0])
    }

    /// `C_h = Σ_t s_t^h`, before any convention factor.
    pub fn raw_coefficient(&self, h: usize, anchor: HessianAnchor) -> Result<ParamVector> {
        let all: Vec<usize> = (0..self.tasks.len()).collect();
        let terms = self.curvature_terms(&all, h, anchor)?;
        let len = self.arch.param_count();
        let mut total = ParamVector::zeros(len);
        for per_task in &terms {
            total.add_assign(&ParamVector::sum(len, per_task)?)?;
        }
        Ok(total)
    }
}

/// `p_t^k = Σ_{j=0}^{k} r_t(θ⁽ʲ⁾)`.
pub fn accum_p(
    t: usize,
    arch: &MlpArchitecture,
    mt_checkpoints: &[ParamVector],
    tasks: &[TaskDataset],
    alpha: f64,
    k: usize,
) -> Result<ParamVector> {
    check_task_index(t, tasks)?;
    MultitaskExpansion::new(arch, mt_checkpoints, tasks, alpha, k)?.accum(t, k)
}

/// `s_t^k = Σ_{j=0}^{k} ∇²L̄_t(anchor(j)) p_t^j`.
pub fn curvature_s(
    t: usize,
    arch: &MlpArchitecture,
    mt_checkpoints: &[ParamVector],
    tasks: &[TaskDataset],
    alpha: f64,
    k: usize,
    anchor: HessianAnchor,
) -> Result<ParamVector> {
    check_task_index(t, tasks)?;
    MultitaskExpansion::new(arch, mt_checkpoints, tasks, alpha, k)?.curvature(t, k, anchor)
}

/// `factor · Σ_t Σ_{e=0}^{h} ∇²L̄_t(anchor(e)) Σ_{m=0}^{e} r_t(θ⁽ᵐ⁾)` with the
/// anchor and factor taken from `cfg`.
pub fn coefficient_c(
    arch: &MlpArchitecture,
    mt_checkpoints: &[ParamVector],
    tasks: &[TaskDataset],
    alpha: f64,
    h: usize,
    cfg: &CurvatureTermConfig,
) -> Result<ParamVector> {
    cfg.validate()?;
    let raw = MultitaskExpansion::new(arch, mt_checkpoints, tasks, alpha, h)?.raw_coefficient(h, cfg.hessian_anchor)?;
    Ok(raw.scale(cfg.factor(alpha)))
}
