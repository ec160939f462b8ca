mod common;

use common::*;
use tavlab::autodiff::{full_hessian, grad};
use tavlab::merge::{
    accum_p, coefficient_c, curvature_s, merge_ta, multitask_vector, residual_r, task_vector, AlphaFactor,
    CurvatureTermConfig, HessianAnchor, TaylorScale,
};
use tavlab::tensor::norm2;
use tavlab::trainer::{finetune, finetune_all, iterative_ta, train_multitask, TrainConfig};
use tavlab::{Activation, MlpModel, ParamVector};

#[test]
fn one_epoch_task_vector_is_scaled_gradient() {
    let (base, tasks) = fixture(&[8, 16, 3], Activation::Tanh, 1, 2.0, 3, 60);
    let eta = 0.3;
    for t in &tasks {
        let tau = task_vector(&finetune(&base, t, &TrainConfig::new(eta, 1)).unwrap()).unwrap();
        let want = grad(&base, t).unwrap().scale(-eta);
        assert!(max_abs_diff(&tau.delta, &want) <= 1e-13);
    }
}

#[test]
fn one_epoch_merge_equals_multitask_step() {
    for act in [Activation::Tanh, Activation::Relu, Activation::Sigmoid] {
        for t_count in [2, 3, 5] {
            let (base, tasks) = fixture(&[6, 9, 3], act, t_count as u64, 1.5, t_count, 40);
            for alpha in [1.0 / t_count as f64, 0.3, 1.0] {
                let cfg = TrainConfig::new(0.2, 1).with_alpha(alpha);
                let vectors: Vec<_> = finetune_all(&base, &tasks, &cfg)
                    .unwrap()
                    .iter()
                    .map(|tr| task_vector(tr).unwrap())
                    .collect();
                let ta = merge_ta(&base, &vectors, alpha).unwrap().flatten();
                let mt = train_multitask(&base, &tasks, &cfg).unwrap();
                let gap = norm2(&ta.sub(mt.last()).unwrap()).unwrap();
                assert!(
                    gap <= 1e-12 * (1.0 + norm2(&base.flatten()).unwrap()),
                    "{act:?} T={t_count} α={alpha}: {gap}"
                );
            }
        }
    }
}

#[test]
fn single_task_drift_after_one_epoch_is_eta_times_residual() {
    let (base, tasks) = fixture(&[6, 9, 3], Activation::Tanh, 4, 1.5, 3, 40);
    let (eta, alpha) = (0.1, 0.4);
    let cfg = TrainConfig::new(eta, 1).with_alpha(alpha);
    let mt = train_multitask(&base, &tasks, &cfg).unwrap();
    for t in 0..tasks.len() {
        let single = finetune(&base, &tasks[t], &cfg).unwrap();
        let drift = single.last().sub(mt.last()).unwrap();
        let want = residual_r(t, &base, &tasks, alpha).unwrap().scale(eta);
        assert!(max_abs_diff(&drift, &want) <= 1e-14);
    }
}

#[test]
fn residual_two_forms_agree() {
    let (base, tasks) = fixture(&[6, 9, 3], Activation::Sigmoid, 5, 1.5, 4, 40);
    let grads: Vec<ParamVector> = tasks.iter().map(|t| grad(&base, t).unwrap()).collect();
    let p = base.arch().param_count();
    for alpha in [0.25, 0.7, 1.0] {
        let mut sum_r = ParamVector::zeros(p);
        for t in 0..tasks.len() {
            let r = residual_r(t, &base, &tasks, alpha).unwrap();
            // (α − 1) g_t + α Σ_{t' ≠ t} g_t'
            let mut other = grads[t].scale(alpha - 1.0);
            for (u, g) in grads.iter().enumerate() {
                if u != t {
                    other.axpy(alpha, g).unwrap();
                }
            }
            assert!(max_abs_diff(&r, &other) <= 1e-14 * (1.0 + r.norm_inf()));
            sum_r.add_assign(&r).unwrap();
        }
        let total = ParamVector::sum(p, &grads)
            .unwrap()
            .scale(alpha * tasks.len() as f64 - 1.0);
        assert!(max_abs_diff(&sum_r, &total) <= 1e-14 * (1.0 + total.norm_inf()));
    }
}

#[test]
fn accumulated_residual_matches_recomputation() {
    let (base, tasks) = fixture(&[6, 9, 3], Activation::Tanh, 6, 1.5, 3, 40);
    let alpha = 0.5;
    let mt = train_multitask(&base, &tasks, &TrainConfig::new(0.2, 4).with_alpha(alpha)).unwrap();
    for t in 0..tasks.len() {
        let mut running = ParamVector::zeros(base.arch().param_count());
        for k in 0..=3 {
            let m = MlpModel::unflatten(base.arch(), &mt.checkpoints[k]).unwrap();
            running.add_assign(&residual_r(t, &m, &tasks, alpha).unwrap()).unwrap();
            let p = accum_p(t, base.arch(), &mt.checkpoints, &tasks, alpha, k).unwrap();
            assert!(max_abs_diff(&p, &running) <= 1e-15 * (1.0 + running.norm_inf()) * (k + 1) as f64);
        }
    }
}

#[test]
fn curvature_term_matches_dense_hessian() {
    let (base, tasks) = fixture(&[5, 7, 3], Activation::Tanh, 8, 1.5, 3, 30);
    let alpha = 1.0 / 3.0;
    let mt = train_multitask(&base, &tasks, &TrainConfig::new(0.3, 4).with_alpha(alpha)).unwrap();
    let arch = base.arch();
    for anchor in [HessianAnchor::MainText, HessianAnchor::Appendix] {
        let off = usize::from(anchor == HessianAnchor::Appendix);
        for t in 0..tasks.len() {
            let k = 2;
            let mut want = ParamVector::zeros(arch.param_count());
            for j in 0..=k {
                let m = MlpModel::unflatten(arch, &mt.checkpoints[j + off]).unwrap();
                let h = full_hessian(&m, &tasks[t]).unwrap();
                let p = accum_p(t, arch, &mt.checkpoints, &tasks, alpha, j).unwrap();
                want.add_assign(&ParamVector::new(h.matrix.matvec(p.as_slice())))
                    .unwrap();
            }
            let got = curvature_s(t, arch, &mt.checkpoints, &tasks, alpha, k, anchor).unwrap();
            assert!(rel_diff(&got, &want) <= 1e-10, "{anchor:?} t={t}");
        }
    }
}

#[test]
fn coefficient_scales_with_convention_factor() {
    let (base, tasks) = fixture(&[5, 7, 3], Activation::Tanh, 9, 1.5, 3, 30);
    let alpha = 0.5;
    let mt = train_multitask(&base, &tasks, &TrainConfig::new(0.3, 3).with_alpha(alpha)).unwrap();
    let unit = CurvatureTermConfig::default();
    let raw = coefficient_c(base.arch(), &mt.checkpoints, &tasks, alpha, 1, &unit).unwrap();
    let cfg = CurvatureTermConfig {
        hessian_anchor: HessianAnchor::MainText,
        sign_factor: -1,
        alpha_factor: AlphaFactor::Alpha,
        taylor_scale: TaylorScale::Full,
    };
    let scaled = coefficient_c(base.arch(), &mt.checkpoints, &tasks, alpha, 1, &cfg).unwrap();
    assert_eq!(scaled, raw.scale(-2.0 * alpha));
    let mut summed = ParamVector::zeros(raw.len());
    for t in 0..tasks.len() {
        summed
            .add_assign(
                &curvature_s(
                    t,
                    base.arch(),
                    &mt.checkpoints,
                    &tasks,
                    alpha,
                    1,
                    HessianAnchor::MainText,
                )
                .unwrap(),
            )
            .unwrap();
    }
    assert!(rel_diff(&raw, &summed) <= 1e-14);
}

#[test]
fn coefficient_needs_enough_checkpoints() {
    let (base, tasks) = fixture(&[5, 7, 3], Activation::Tanh, 9, 1.5, 2, 20);
    let mt = train_multitask(&base, &tasks, &TrainConfig::new(0.3, 1)).unwrap();
    let cfg = CurvatureTermConfig {
        hessian_anchor: HessianAnchor::Appendix,
        ..Default::default()
    };
    assert!(coefficient_c(base.arch(), &mt.checkpoints, &tasks, 1.0, 1, &cfg).is_err());
    assert!(coefficient_c(base.arch(), &mt.checkpoints, &tasks, 1.0, 0, &cfg).is_ok());
}

#[test]
fn iterative_one_epoch_rounds_follow_multitask_training() {
    let (base, tasks) = fixture(&[6, 9, 3], Activation::Tanh, 10, 1.5, 3, 40);
    let (eta, alpha, rounds) = (0.2, 0.6, 6);
    let it = iterative_ta(&base, &tasks, rounds, 1, eta, alpha).unwrap();
    let mt = train_multitask(&base, &tasks, &TrainConfig::new(eta, rounds).with_alpha(alpha)).unwrap();
    for (a, b) in it.checkpoints.iter().zip(&mt.checkpoints) {
        assert!(norm2(&a.sub(b).unwrap()).unwrap() <= 1e-10);
    }
}

#[test]
fn merge_is_linear_in_alpha() {
    let (base, tasks) = fixture(&[6, 9, 3], Activation::Relu, 12, 1.5, 3, 40);
    let vectors: Vec<_> = finetune_all(&base, &tasks, &TrainConfig::new(0.1, 3))
        .unwrap()
        .iter()
        .map(|t| task_vector(t).unwrap())
        .collect();
    let sum = multitask_vector(&vectors).unwrap();
    for alpha in [0.0, 0.25, 1.0, 2.0] {
        let merged = merge_ta(&base, &vectors, alpha).unwrap().flatten();
        let delta = merged.sub(&base.flatten()).unwrap();
        assert!(max_abs_diff(&delta, &sum.scale(alpha)) <= 1e-15 * (1.0 + sum.norm_inf()) * 4.0);
    }
    assert_eq!(merge_ta(&base, &[], 0.7).unwrap(), base);
}
