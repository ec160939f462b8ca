//! Full-batch gradient descent: one epoch is exactly one step on the whole
//! dataset.

use serde::{Deserialize, Serialize};

use crate::autodiff::{loss, loss_and_grad};
use crate::error::{Error, Result};
use crate::merge::{merge_ta, task_vector};
use crate::network::MlpModel;
use crate::par;
use crate::taskgen::TaskDataset;
use crate::tensor::{norm2, ParamVector};

pub const DEFAULT_CONVERGENCE_TOL: f64 = 1e-5;
pub const DEFAULT_MAX_EPOCHS: usize = 5000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub eta: f64,
    #[serde(default = "one")]
    pub alpha: f64,
    pub epochs: usize,
    #[serde(default)]
    pub convergence_grad_tol: Option<f64>,
    #[serde(default = "default_max_epochs")]
    pub max_epochs_converged: usize,
    #[serde(default)]
    pub retain_grads: bool,
}

fn one() -> f64 {
    1.0
}

fn default_max_epochs() -> usize {
    DEFAULT_MAX_EPOCHS
}

impl TrainConfig {
    pub fn new(eta: f64, epochs: usize) -> Self {
        Self {
            eta,
            alpha: 1.0,
            epochs,
            convergence_grad_tol: None,
            max_epochs_converged: DEFAULT_MAX_EPOCHS,
            retain_grads: false,
        }
    }

    pub fn with_alpha(mut self, alpha: f64) -> Self {
        self.alpha = alpha;
        self
    }

    pub fn retaining_grads(mut self) -> Self {
        self.retain_grads = true;
        self
    }

    pub fn with_convergence(mut self, tol: f64, cap: usize) -> Self {
        self.convergence_grad_tol = Some(tol);
        self.max_epochs_converged = cap;
        self
    }

    pub fn validate(&self) -> Result<()> {
        // η = 0 is allowed: it gives the constant trajectory
        if !(self.eta >= 0.0) || !self.eta.is_finite() {
            return Err(Error::InvalidArgument(format!("eta must be ≥ 0, got {}", self.eta)));
        }
        if !self.alpha.is_finite() {
            return Err(Error::InvalidArgument("alpha must be finite".into()));
        }
        if self.epochs == 0 {
            return Err(Error::InvalidArgument("epochs must be ≥ 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Loss at the parameters the step was taken from.
    pub loss: f64,
    pub grad_norm: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grad: Option<ParamVector>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StopReason {
    /// Ran the requested number of epochs.
    Epochs,
    /// Gradient norm dropped below the tolerance.
    Tol,
    /// Hit the epoch cap before converging.
    Cap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    /// Multiplier applied to the gradient each epoch (`η`, or `αη` for multitask).
    pub step: f64,
    /// Task ids whose summed loss drives the updates.
    pub task_ids: Vec<usize>,
    pub checkpoints: Vec<ParamVector>,
    pub records: Vec<EpochRecord>,
    pub stop_reason: StopReason,
}

impl Trajectory {
    pub fn epochs(&self) -> usize {
        self.records.len()
    }

    pub fn base(&self) -> &ParamVector {
        &self.checkpoints[0]
    }

    pub fn last(&self) -> &ParamVector {
        self.checkpoints.last().expect("trajectory has a base checkpoint")
    }

    pub fn grads(&self) -> Option<Vec<&ParamVector>> {
        self.records.iter().map(|r| r.grad.as_ref()).collect()
    }
}

/// `θ − step·g`, elementwise, no fused operations.
pub fn gd_update(theta: &ParamVector, step: f64, g: &ParamVector) -> Result<ParamVector> {
    theta.sub(&g.scale(step))
}

/// Loss and gradient of `Σ_t L̄_t`, with per-task terms evaluated
/// concurrently and summed in task order.
pub fn summed_loss_and_grad(model: &MlpModel, tasks: &[&TaskDataset]) -> Result<(f64, ParamVector)> {
    let parts = par::map_collect(tasks, |t| loss_and_grad(model, t));
    let mut total_loss = 0.0;
    let mut total = ParamVector::zeros(model.arch().param_count());
    for part in parts {
        let (l, g) = part?;
        total_loss += l;
        total.add_assign(&g)?;
    }
    Ok((total_loss, total))
}

/// GD on `Σ_t L̄_t` with a fixed multiplier. Stops after `epochs` steps, or
/// earlier at `tol` when given.
fn run_gd(
    base: &MlpModel,
    tasks: &[&TaskDataset],
    step: f64,
    epochs: usize,
    tol: Option<f64>,
    retain: bool,
) -> Result<Trajectory> {
    let arch = base.arch().clone();
    let mut theta = base.flatten();
    let mut checkpoints = vec![theta.clone()];
    let mut records = Vec::new();
    let mut model = base.clone();
    let mut stop_reason = if tol.is_some() {
        StopReason::Cap
    } else {
        StopReason::Epochs
    };

    for epoch in 1..=epochs {
        let (l, g) = summed_loss_and_grad(&model, tasks)?;
        if !l.is_finite() || !g.is_finite() {
            return Err(Error::Diverged { epoch });
        }
        let grad_norm = norm2(&g)?;
        if let Some(tol) = tol {
            if grad_norm < tol {
                stop_reason = StopReason::Tol;
                break;
            }
        }
        theta = gd_update(&theta, step, &g)?;
        if !theta.is_finite() {
            return Err(Error::Diverged { epoch });
        }
        model = MlpModel::unflatten(&arch, &theta)?;
        checkpoints.push(theta.clone());
        records.push(EpochRecord {
            epoch,
            loss: l,
            grad_norm,
            grad: retain.then_some(g),
        });
    }
    Ok(Trajectory {
        step,
        task_ids: tasks.iter().map(|t| t.task_id).collect(),
        checkpoints,
        records,
        stop_reason,
    })
}

/// `cfg.epochs` GD steps of size `η` on one task.
pub fn finetune(base: &MlpModel, task: &TaskDataset, cfg: &TrainConfig) -> Result<Trajectory> {
    cfg.validate()?;
    run_gd(base, &[task], cfg.eta, cfg.epochs, None, cfg.retain_grads)
}

/// Finetunes every task from the same base, concurrently.
pub fn finetune_all(base: &MlpModel, tasks: &[TaskDataset], cfg: &TrainConfig) -> Result<Vec<Trajectory>> {
    par::map_collect(tasks, |t| finetune(base, t, cfg))
        .into_iter()
        .collect()
}

/// `cfg.epochs` GD steps of size `α·η` on `Σ_t L̄_t`.
pub fn train_multitask(base: &MlpModel, tasks: &[TaskDataset], cfg: &TrainConfig) -> Result<Trajectory> {
    cfg.validate()?;
    if tasks.is_empty() {
        return Err(Error::InvalidArgument(
            "multitask training needs at least one task".into(),
        ));
    }
    let refs: Vec<&TaskDataset> = tasks.iter().collect();
    run_gd(base, &refs, cfg.alpha * cfg.eta, cfg.epochs, None, cfg.retain_grads)
}

/// GD of size `η` until `‖∇L̄_t‖ < tol` or the epoch cap.
pub fn train_to_convergence(base: &MlpModel, task: &TaskDataset, cfg: &TrainConfig) -> Result<Trajectory> {
    cfg.validate()?;
    let tol = cfg
        .convergence_grad_tol
        .ok_or_else(|| Error::InvalidArgument("train_to_convergence needs convergence_grad_tol".into()))?;
    run_gd(
        base,
        &[task],
        cfg.eta,
        cfg.max_epochs_converged,
        Some(tol),
        cfg.retain_grads,
    )
}

/// Repeated rounds of "finetune every task for a few epochs, merge with TA,
/// use the merge as the next base". Checkpoint `r` is the base after round `r`.
pub fn iterative_ta(
    base: &MlpModel,
    tasks: &[TaskDataset],
    rounds: usize,
    epochs_per_round: usize,
    eta: f64,
    alpha: f64,
) -> Result<Trajectory> {
    if rounds == 0 {
        return Err(Error::InvalidArgument("iterative TA needs R ≥ 1".into()));
    }
    let cfg = TrainConfig::new(eta, epochs_per_round);
    let refs: Vec<&TaskDataset> = tasks.iter().collect();
    let mut current = base.clone();
    let mut checkpoints = vec![current.flatten()];
    let mut records = Vec::with_capacity(rounds);
    for round in 1..=rounds {
        let (l, g) = summed_loss_and_grad(&current, &refs)?;
        let trajectories = finetune_all(&current, tasks, &cfg)?;
        let vectors = trajectories.iter().map(task_vector).collect::<Result<Vec<_>>>()?;
        current = merge_ta(&current, &vectors, alpha)?;
        checkpoints.push(current.flatten());
        records.push(EpochRecord {
            epoch: round,
            loss: l,
            grad_norm: norm2(&g)?,
            grad: None,
        });
    }
    Ok(Trajectory {
        step: alpha * eta,
        task_ids: tasks.iter().map(|t| t.task_id).collect(),
        checkpoints,
        records,
        stop_reason: StopReason::Epochs,
    })
}

/// Fraction of samples whose arg-max logit equals the label; ties go to the
/// lower class index.
pub fn accuracy(model: &MlpModel, data: &TaskDataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut correct = 0usize;
    for (x, &y) in data.inputs.iter().zip(&data.labels) {
        let z = model.logits(x)?;
        let mut best = 0;
        for (k, v) in z.iter().enumerate() {
            if *v > z[best] {
                best = k;
            }
        }
        if best == y {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Mean loss of the single task, used for monotonicity checks.
pub fn task_loss_along(traj: &Trajectory, base: &MlpModel, task: &TaskDataset) -> Result<Vec<f64>> {
    traj.checkpoints
        .iter()
        .map(|c| loss(&MlpModel::unflatten(base.arch(), c)?, task))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad;
    use crate::network::{Activation, MlpArchitecture};
    use crate::taskgen::{make_task, make_task_family, TaskSpec};
    use crate::tensor::DenseMatrix;

    fn base() -> MlpModel {
        let arch = MlpArchitecture::new(vec![4, 6, 3], Activation::Tanh).unwrap();
        MlpModel::random(&arch, 1, 1.0)
    }

    fn tasks(n: usize) -> Vec<TaskDataset> {
        let spec = TaskSpec {
            samples: 30,
            input_dim: 4,
            classes: 3,
            m_x: 1.0,
            separation: 4.0,
        };
        make_task_family(3, n, &spec).unwrap()
    }

    #[test]
    fn one_epoch_is_one_gradient_step() {
        let b = base();
        let t = &tasks(1)[0];
        let traj = finetune(&b, t, &TrainConfig::new(0.1, 1)).unwrap();
        let expected = gd_update(&b.flatten(), 0.1, &grad(&b, t).unwrap()).unwrap();
        assert_eq!(traj.checkpoints[1], expected);
        assert_eq!(traj.stop_reason, StopReason::Epochs);
    }

    #[test]
    fn zero_step_keeps_base() {
        let b = base();
        let traj = finetune(&b, &tasks(1)[0], &TrainConfig::new(0.0, 4)).unwrap();
        assert!(traj.checkpoints.iter().all(|c| c == &b.flatten()));
    }

    #[test]
    fn replay_is_bit_exact() {
        let b = base();
        let t = &tasks(1)[0];
        let traj = finetune(&b, t, &TrainConfig::new(0.3, 2).retaining_grads()).unwrap();
        let m1 = MlpModel::unflatten(b.arch(), &traj.checkpoints[1]).unwrap();
        let g1 = grad(&m1, t).unwrap();
        assert_eq!(traj.records[1].grad.as_ref().unwrap(), &g1);
        assert_eq!(gd_update(&traj.checkpoints[1], 0.3, &g1).unwrap(), traj.checkpoints[2]);
        let again = finetune(&b, t, &TrainConfig::new(0.3, 2).retaining_grads()).unwrap();
        assert_eq!(again, traj);
    }

    #[test]
    fn multitask_single_task_equals_finetune() {
        let b = base();
        let ts = tasks(1);
        let cfg = TrainConfig::new(0.2, 3);
        let mt = train_multitask(&b, &ts, &cfg).unwrap();
        let ft = finetune(&b, &ts[0], &cfg).unwrap();
        assert_eq!(mt.checkpoints, ft.checkpoints);
    }

    #[test]
    fn multitask_identical_tasks_doubles_step() {
        let b = base();
        let t = tasks(1).remove(0);
        let ts = vec![t.clone(), t.clone()];
        let (eta, alpha) = (0.1, 0.7);
        let mt = train_multitask(&b, &ts, &TrainConfig::new(eta, 3).with_alpha(alpha)).unwrap();
        let ft = finetune(&b, &t, &TrainConfig::new(2.0 * alpha * eta, 3)).unwrap();
        for (a, c) in mt.checkpoints.iter().zip(&ft.checkpoints) {
            assert!(norm2(&a.sub(c).unwrap()).unwrap() <= 1e-14);
        }
    }

    #[test]
    fn multitask_first_step() {
        let b = base();
        let ts = tasks(3);
        let (eta, alpha) = (0.05, 0.4);
        let mt = train_multitask(&b, &ts, &TrainConfig::new(eta, 1).with_alpha(alpha)).unwrap();
        let mut sum = ParamVector::zeros(b.arch().param_count());
        for t in &ts {
            sum.add_assign(&grad(&b, t).unwrap()).unwrap();
        }
        assert_eq!(mt.checkpoints[1], gd_update(&b.flatten(), alpha * eta, &sum).unwrap());
    }

    #[test]
    fn convergence_from_converged_base_takes_no_steps() {
        let b = base();
        let cfg = TrainConfig::new(0.1, 1).with_convergence(1e6, 100);
        let traj = train_to_convergence(&b, &tasks(1)[0], &cfg).unwrap();
        assert_eq!(traj.epochs(), 0);
        assert_eq!(traj.stop_reason, StopReason::Tol);
        let cfg = TrainConfig::new(0.1, 1).with_convergence(1e-12, 3);
        let traj = train_to_convergence(&b, &tasks(1)[0], &cfg).unwrap();
        assert_eq!(traj.epochs(), 3);
        assert_eq!(traj.stop_reason, StopReason::Cap);
    }

    #[test]
    fn iterative_ta_zero_alpha_never_moves() {
        let b = base();
        let traj = iterative_ta(&b, &tasks(2), 3, 2, 0.1, 0.0).unwrap();
        assert!(traj.checkpoints.iter().all(|c| c == &b.flatten()));
        assert!(iterative_ta(&b, &tasks(2), 0, 2, 0.1, 0.5).is_err());
    }

    #[test]
    fn accuracy_examples() {
        let arch = MlpArchitecture::new(vec![4, 4], Activation::Relu).unwrap();
        let data = make_task(2, 40, 4, 4, 1.0, 3.0).unwrap();
        assert_eq!(accuracy(&MlpModel::zeros(&arch), &data).unwrap(), 0.25);
        let mut empty = data.clone();
        empty.inputs.clear();
        empty.labels.clear();
        assert!(accuracy(&MlpModel::zeros(&arch), &empty).is_err());
        // a model that scores the true class at +10 on every sample
        let one_hot = make_one_hot_task();
        let m = MlpModel::from_layers(&arch, vec![DenseMatrix::identity(4).scaled(10.0)], vec![]).unwrap();
        assert_eq!(accuracy(&m, &one_hot).unwrap(), 1.0);
    }

    fn make_one_hot_task() -> TaskDataset {
        let mut t = make_task(0, 8, 4, 4, 1.0, 1.0).unwrap();
        for (x, &y) in t.inputs.iter_mut().zip(&t.labels) {
            *x = vec![0.0; 4];
            x[y] = 1.0;
        }
        t
    }

    #[test]
    fn invalid_config_rejected() {
        assert!(TrainConfig::new(-1.0, 1).validate().is_err());
        assert!(TrainConfig::new(0.1, 0).validate().is_err());
        assert!(train_to_convergence(&base(), &tasks(1)[0], &TrainConfig::new(0.1, 1)).is_err());
    }
}
