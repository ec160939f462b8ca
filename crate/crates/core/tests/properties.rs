mod common;

use common::*;
use proptest::prelude::*;
use tavlab::autodiff::{grad, hvp, logits_hessian, SoftmaxState};
use tavlab::taskgen::make_task;
use tavlab::tensor::{cosine, norm2, symmetric_eigen};
use tavlab::trainer::{finetune_all, train_multitask, TrainConfig};
use tavlab::{Activation, MlpArchitecture, MlpModel, ParamVector};

fn vec_strategy(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-10.0f64..10.0, len)
}

fn activation() -> impl Strategy<Value = Activation> {
    prop_oneof![
        Just(Activation::Tanh),
        Just(Activation::Sigmoid),
        Just(Activation::Relu)
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn norm_is_absolutely_homogeneous(v in vec_strategy(12), c in -1e3f64..1e3) {
        let v = ParamVector::new(v);
        let lhs = norm2(&v.scale(c)).unwrap();
        let rhs = c.abs() * norm2(&v).unwrap();
        prop_assert!((lhs - rhs).abs() <= 1e-12 * rhs.max(1e-300));
    }

    #[test]
    fn cosine_ignores_positive_scale(v in vec_strategy(8), w in vec_strategy(8), a in 0.01f64..100.0, b in 0.01f64..100.0) {
        let v = ParamVector::new(v);
        let w = ParamVector::new(w);
        prop_assume!(norm2(&v).unwrap() > 1e-6 && norm2(&w).unwrap() > 1e-6);
        let base = cosine(&v, &w).unwrap();
        prop_assert!((cosine(&v.scale(a), &w.scale(b)).unwrap() - base).abs() <= 1e-12);
        prop_assert!((cosine(&v.scale(-a), &w.scale(b)).unwrap() + base).abs() <= 1e-12);
        prop_assert!(base.abs() <= 1.0);
    }

    #[test]
    fn softmax_hessian_spectrum(z in prop::collection::vec(-30.0f64..30.0, 2..7)) {
        let state = SoftmaxState::from_logits(&z);
        let h = logits_hessian(&state);
        let p = state.probs();
        let trace: f64 = (0..p.len()).map(|i| h[(i, i)]).sum();
        let sq: f64 = p.iter().map(|x| x * x).sum();
        prop_assert!((trace - (1.0 - sq)).abs() <= 1e-14);
        let (eig, _) = symmetric_eigen(&h).unwrap();
        prop_assert!(eig[0] <= 0.5 + 1e-12);
        prop_assert!(*eig.last().unwrap() >= -1e-14);
    }

    #[test]
    fn hvp_is_symmetric(act in activation(), seed in 0u64..1000) {
        let arch = MlpArchitecture::new(vec![3, 4, 3], act).unwrap();
        let model = MlpModel::random(&arch, seed, 1.5);
        let data = make_task(seed, 12, 3, 3, 2.0, 4.0).unwrap();
        let p = arch.param_count();
        let u = random_direction(p, seed + 1);
        let v = random_direction(p, seed + 2);
        let uhv = u.dot(&hvp(&model, &data, &v).unwrap()).unwrap();
        let vhu = v.dot(&hvp(&model, &data, &u).unwrap()).unwrap();
        prop_assert!((uhv - vhu).abs() <= 1e-10 * (1.0 + uhv.abs()));
    }

    #[test]
    fn hvp_is_linear(seed in 0u64..1000, a in -3.0f64..3.0) {
        let arch = MlpArchitecture::new(vec![3, 5, 2], Activation::Tanh).unwrap();
        let model = MlpModel::random(&arch, seed, 1.0);
        let data = make_task(seed, 10, 3, 2, 2.0, 4.0).unwrap();
        let p = arch.param_count();
        let u = random_direction(p, seed);
        let v = random_direction(p, seed + 7);
        let combo = hvp(&model, &data, &u.scale(a).add(&v).unwrap()).unwrap();
        let parts = hvp(&model, &data, &u).unwrap().scale(a).add(&hvp(&model, &data, &v).unwrap()).unwrap();
        prop_assert!(max_abs_diff(&combo, &parts) <= 1e-12 * (1.0 + parts.norm_inf()));
    }

    #[test]
    fn generated_inputs_respect_bound(seed in any::<u64>(), m_x in 0.1f64..5.0, sep in 0.0f64..20.0) {
        let data = make_task(seed, 30, 4, 3, m_x, sep).unwrap();
        prop_assert!(data.max_input_norm() <= m_x * (1.0 + 1e-12));
        let counts = data.class_counts();
        let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
        prop_assert!(hi - lo <= 1);
    }

    #[test]
    fn flatten_round_trip(act in activation(), bias in any::<bool>(), seed in 0u64..500) {
        let arch = MlpArchitecture::new(vec![3, 4, 2], act).unwrap().with_bias(bias);
        let theta = random_direction(arch.param_count(), seed);
        let model = MlpModel::unflatten(&arch, &theta).unwrap();
        prop_assert_eq!(model.flatten(), theta);
    }
}

fn single_thread<R: Send>(f: impl FnOnce() -> R + Send) -> R {
    rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .unwrap()
        .install(f)
}

#[test]
fn thread_count_does_not_change_results() {
    let (base, tasks) = fixture(&[8, 16, 3], Activation::Tanh, 3, 2.0, 3, 101);
    let v = random_direction(base.arch().param_count(), 4);
    let run = || {
        let g = grad(&base, &tasks[0]).unwrap();
        let h = hvp(&base, &tasks[1], &v).unwrap();
        let cfg = TrainConfig::new(0.3, 4).with_alpha(0.5);
        let ft = finetune_all(&base, &tasks, &cfg).unwrap();
        let mt = train_multitask(&base, &tasks, &cfg).unwrap();
        (g, h, ft, mt)
    };
    let pooled = rayon::ThreadPoolBuilder::new()
        .num_threads(4)
        .build()
        .unwrap()
        .install(run);
    let serial = single_thread(run);
    assert_eq!(pooled, serial);
}
