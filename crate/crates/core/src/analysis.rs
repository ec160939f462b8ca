//! Step-size scaling fits, norm-bound certification, and trajectory
//! statistics.

use serde::{Deserialize, Serialize};

use crate::autodiff::{full_hessian, grad, logits_hessian, SoftmaxState};
use crate::error::{Error, Result};
use crate::merge::{merge_ta, task_vector, CurvatureTermConfig, HessianAnchor, MultitaskExpansion, TaskVector};
use crate::network::{Activation, MlpArchitecture, MlpModel};
use crate::par;
use crate::taskgen::TaskDataset;
use crate::tensor::{
    cosine, norm2, spectral_norm, symmetric_eigen, symmetric_spectral_norm, DenseMatrix, ParamVector,
    POWER_ITERATION_MAX_ITER, POWER_ITERATION_TOL,
};
use crate::trainer::{
    accuracy, finetune, finetune_all, train_multitask, train_to_convergence, StopReason, TrainConfig, Trajectory,
};

/// Norms at or below this are rounding noise and are left out of fits.
pub const GAP_NOISE_FLOOR: f64 = 1e-13;
/// Accepted band for an `O(η²)` slope.
pub const SECOND_ORDER_BAND: (f64, f64) = (1.9, 2.1);
/// Accepted band for an `O(η³)` slope.
pub const THIRD_ORDER_BAND: (f64, f64) = (2.6, 3.4);

/// Geometric grid `start, start·ratio, …` with `points` entries.
pub fn geometric_grid(start: f64, ratio: f64, points: usize) -> Vec<f64> {
    (0..points).map(|i| start * ratio.powi(i as i32)).collect()
}

/// Default step-size grid: 1e-2 halving down to 3.125e-4.
pub fn default_eta_grid() -> Vec<f64> {
    geometric_grid(1e-2, 0.5, 6)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
    pub used_points: usize,
    /// Indices of inputs left out (non-positive or non-finite norm).
    pub excluded: Vec<usize>,
}

impl OrderFit {
    pub fn within(&self, band: (f64, f64)) -> bool {
        self.slope >= band.0 && self.slope <= band.1
    }
}

/// Least squares of `log norm` against `log η`.
pub fn fit_order(etas: &[f64], norms: &[f64]) -> Result<OrderFit> {
    fit_order_above(etas, norms, 0.0)
}

/// [`fit_order`] that also drops norms at or below `floor`.
pub fn fit_order_above(etas: &[f64], norms: &[f64], floor: f64) -> Result<OrderFit> {
    if etas.len() != norms.len() {
        return Err(Error::LengthMismatch {
            expected: etas.len(),
            actual: norms.len(),
        });
    }
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut excluded = Vec::new();
    for (i, (&e, &n)) in etas.iter().zip(norms).enumerate() {
        if n > floor && n.is_finite() && e > 0.0 {
            xs.push(e.ln());
            ys.push(n.ln());
        } else {
            excluded.push(i);
        }
    }
    if xs.len() < 2 {
        return Err(Error::TooFewPoints(xs.len()));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my) * (y - my)).sum();
    if sxx == 0.0 {
        return Err(Error::InvalidArgument(
            "fit needs at least two distinct step sizes".into(),
        ));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| {
            let r = y - (intercept + slope * x);
            r * r
        })
        .sum();
    let r2 = if syy == 0.0 { 1.0 } else { 1.0 - ss_res / syy };
    Ok(OrderFit {
        slope,
        intercept,
        r2,
        used_points: xs.len(),
        excluded,
    })
}

/// Everything measured at one step size of a gap scan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapPoint {
    pub eta: f64,
    /// `‖θ_TA^(k) − θ_MT^(k)‖`
    pub gap_norm: f64,
    /// `‖(θ_TA^(k) − θ_base) + αη Σ_t Σ_{j<k} ∇L̄_t(θ_MT^(j))‖`
    pub first_order_residual: f64,
    /// `‖gap − (η²/2)·factor·C‖` per candidate, in [`CurvatureTermConfig::candidates`] order.
    pub corrected_residuals: Vec<f64>,
    /// `‖C‖` (raw, main-text anchor).
    pub c_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateFit {
    pub config: CurvatureTermConfig,
    pub label: String,
    pub fit: Option<OrderFit>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    pub k: usize,
    pub alpha: f64,
    pub task_count: usize,
    pub eta_grid: Vec<f64>,
    /// Step sizes whose runs diverged, with the error message.
    pub dropped: Vec<(f64, String)>,
    pub points: Vec<GapPoint>,
    pub raw_fit: Option<OrderFit>,
    pub first_order_fit: Option<OrderFit>,
    pub candidates: Vec<CandidateFit>,
    pub selected: Option<CandidateFit>,
}

impl GapReport {
    pub fn etas(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.eta).collect()
    }
}

/// Runs every finetune and the multitask trajectory at step `eta` and
/// measures the gap and its corrections.
pub fn gap_point(
    base: &MlpModel,
    tasks: &[TaskDataset],
    k: usize,
    alpha: f64,
    eta: f64,
    candidates: &[CurvatureTermConfig],
) -> Result<GapPoint> {
    if k == 0 {
        return Err(Error::InvalidArgument("gap scan needs k ≥ 1".into()));
    }
    let cfg = TrainConfig::new(eta, k).with_alpha(alpha);
    let trajectories = finetune_all(base, tasks, &cfg)?;
    let vectors = trajectories
        .iter()
        .map(task_vector)
        .collect::<Result<Vec<TaskVector>>>()?;
    let ta = merge_ta(base, &vectors, alpha)?.flatten();
    let mt = train_multitask(base, tasks, &cfg)?;
    let gap = ta.sub(mt.last())?;
    let gap_norm = norm2(&gap)?;

    let arch = base.arch();
    let expansion = MultitaskExpansion::new(arch, &mt.checkpoints, tasks, alpha, k - 1)?;
    let p = arch.param_count();
    let mut first_order = ta.sub(&base.flatten())?;
    for j in 0..k {
        for t in 0..tasks.len() {
            first_order.axpy(alpha * eta, expansion.grad(t, j))?;
        }
    }
    let first_order_residual = norm2(&first_order)?;

    let (c_main, c_appendix) = if k >= 2 {
        let h = k - 2;
        (
            expansion.raw_coefficient(h, HessianAnchor::MainText)?,
            expansion.raw_coefficient(h, HessianAnchor::Appendix)?,
        )
    } else {
        (ParamVector::zeros(p), ParamVector::zeros(p))
    };
    let corrected_residuals = candidates
        .iter()
        .map(|c| {
            let raw = match c.hessian_anchor {
                HessianAnchor::MainText => &c_main,
                HessianAnchor::Appendix => &c_appendix,
            };
            let mut r = gap.clone();
            r.axpy(-0.5 * eta * eta * c.factor(alpha), raw)?;
            norm2(&r)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(GapPoint {
        eta,
        gap_norm,
        first_order_residual,
        corrected_residuals,
        c_norm: norm2(&c_main)?,
    })
}

fn check_grid(eta_grid: &[f64], min_points: usize) -> Result<()> {
    if eta_grid.len() < min_points {
        return Err(Error::InvalidArgument(format!(
            "step-size grid needs ≥ {min_points} points, got {}",
            eta_grid.len()
        )));
    }
    if eta_grid.iter().any(|e| !(*e > 0.0)) || eta_grid.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::InvalidArgument(
            "step-size grid must be positive and strictly decreasing".into(),
        ));
    }
    Ok(())
}

/// Candidate whose fitted slope is nearest `target`. Candidates within
/// [`SELECTION_TIE_BAND`] of the best distance are tied and the lowest
/// intercept (smallest residual) wins; exact ties keep the earlier one.
fn select_nearest(candidates: &[CandidateFit], target: f64) -> Option<CandidateFit> {
    let best = candidates
        .iter()
        .filter_map(|c| c.fit.as_ref().map(|f| (f.slope - target).abs()))
        .fold(f64::INFINITY, f64::min);
    candidates
        .iter()
        .filter_map(|c| c.fit.as_ref().map(|f| (f, c)))
        .filter(|(f, _)| (f.slope - target).abs() <= best + SELECTION_TIE_BAND)
        .fold(None::<(f64, &CandidateFit)>, |acc, (f, c)| match acc {
            Some((b, _)) if b <= f.intercept => acc,
            _ => Some((f.intercept, c)),
        })
        .map(|(_, c)| c.clone())
}

/// Sweeps `eta_grid` (runs are independent and evaluated concurrently),
/// fits the log-log order of the raw gap, the first-order residual and
/// every corrected residual, and selects the correction whose residual
/// slope is nearest 3.
pub fn gap_scan(base: &MlpModel, tasks: &[TaskDataset], k: usize, alpha: f64, eta_grid: &[f64]) -> Result<GapReport> {
    check_grid(eta_grid, 5)?;
    let candidates = CurvatureTermConfig::candidates();
    let results = par::map_collect(eta_grid, |&eta| gap_point(base, tasks, k, alpha, eta, &candidates));
    let mut points = Vec::new();
    let mut dropped = Vec::new();
    for (eta, r) in eta_grid.iter().zip(results) {
        match r {
            Ok(p) if p.gap_norm.is_finite() => points.push(p),
            Ok(_) => dropped.push((*eta, "non-finite gap".to_string())),
            Err(e @ Error::Diverged { .. }) | Err(e @ Error::NonFinite) => dropped.push((*eta, e.to_string())),
            Err(e) => return Err(e),
        }
    }
    let etas: Vec<f64> = points.iter().map(|p| p.eta).collect();
    let column = |f: &dyn Fn(&GapPoint) -> f64| -> Vec<f64> { points.iter().map(f).collect() };
    let raw_fit = fit_order_above(&etas, &column(&|p| p.gap_norm), GAP_NOISE_FLOOR).ok();
    let first_order_fit = fit_order_above(&etas, &column(&|p| p.first_order_residual), GAP_NOISE_FLOOR).ok();
    let candidate_fits: Vec<CandidateFit> = candidates
        .iter()
        .enumerate()
        .map(|(i, c)| CandidateFit {
            config: *c,
            label: c.label(),
            fit: fit_order_above(&etas, &column(&|p| p.corrected_residuals[i]), GAP_NOISE_FLOOR).ok(),
        })
        .collect();
    let selected = if k >= 2 {
        select_nearest(&candidate_fits, 3.0)
    } else {
        None
    };
    Ok(GapReport {
        k,
        alpha,
        task_count: tasks.len(),
        eta_grid: eta_grid.to_vec(),
        dropped,
        points,
        raw_fit,
        first_order_fit,
        candidates: candidate_fits,
        selected,
    })
}

/// Gap scans at several α on the same base and tasks, with one correction
/// selected jointly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapSweep {
    pub reports: Vec<GapReport>,
    /// Worst `|slope − 3|` over the sweep, per candidate.
    pub worst_distance: Vec<(String, f64)>,
    pub selected: Option<CurvatureTermConfig>,
}

/// Slopes within this of the best worst-case distance count as tied.
pub const SELECTION_TIE_BAND: f64 = 0.05;

/// Joint selection: minimise the worst `|slope − 3|` across the reports
/// (a factor that only matches at one α is rejected); ties go to the lower
/// mean intercept, i.e. the smaller residual.
pub fn select_joint(reports: &[GapReport]) -> Option<CurvatureTermConfig> {
    let first = reports.first()?;
    let mut scored = Vec::new();
    for (i, cand) in first.candidates.iter().enumerate() {
        let mut worst: f64 = 0.0;
        let mut intercept = 0.0;
        let mut ok = true;
        for r in reports {
            match r.candidates.get(i).and_then(|c| c.fit.as_ref()) {
                Some(f) => {
                    worst = worst.max((f.slope - 3.0).abs());
                    intercept += f.intercept / reports.len() as f64;
                }
                None => ok = false,
            }
        }
        if ok {
            scored.push((worst, intercept, cand.config));
        }
    }
    let best = scored.iter().map(|s| s.0).fold(f64::INFINITY, f64::min);
    scored
        .into_iter()
        .filter(|s| s.0 <= best + SELECTION_TIE_BAND)
        .fold(None::<(f64, CurvatureTermConfig)>, |acc, (_, b, c)| match acc {
            Some((ab, _)) if ab <= b => acc,
            _ => Some((b, c)),
        })
        .map(|(_, c)| c)
}

pub fn gap_sweep(
    base: &MlpModel,
    tasks: &[TaskDataset],
    k: usize,
    alphas: &[f64],
    eta_grid: &[f64],
) -> Result<GapSweep> {
    let reports = alphas
        .iter()
        .map(|&a| gap_scan(base, tasks, k, a, eta_grid))
        .collect::<Result<Vec<_>>>()?;
    let worst_distance = CurvatureTermConfig::candidates()
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let w = reports
                .iter()
                .map(|r| {
                    r.candidates[i]
                        .fit
                        .as_ref()
                        .map_or(f64::INFINITY, |f| (f.slope - 3.0).abs())
                })
                .fold(0.0, f64::max);
            (c.label(), w)
        })
        .collect();
    let selected = if k >= 2 { select_joint(&reports) } else { None };
    Ok(GapSweep {
        reports,
        worst_distance,
        selected,
    })
}

impl GapSweep {
    /// Fit of the selected correction in each report.
    pub fn selected_fits(&self) -> Vec<Option<&OrderFit>> {
        let Some(sel) = self.selected else {
            return vec![None; self.reports.len()];
        };
        self.reports
            .iter()
            .map(|r| {
                r.candidates
                    .iter()
                    .find(|c| c.config == sel)
                    .and_then(|c| c.fit.as_ref())
            })
            .collect()
    }
}

/// Per-task drift `θ_t^(m+1) − θ_MT^(m+1)` against its expansion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LemmaPoint {
    pub eta: f64,
    /// `‖θ_t^(m+1) − θ_MT^(m+1) − η p_t^m‖`
    pub first_order_residual: f64,
    /// `‖θ_t^(m+1) − θ_MT^(m+1) − η p_t^m − (η²/2)·factor·s_t^(m−1)‖` per candidate.
    pub corrected_residuals: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LemmaReport {
    pub task: usize,
    pub m: usize,
    pub alpha: f64,
    pub points: Vec<LemmaPoint>,
    pub first_order_fit: Option<OrderFit>,
    pub candidates: Vec<CandidateFit>,
    pub selected: Option<CandidateFit>,
}

/// Sign, Taylor-scale and anchor candidates for the single-task expansion
/// (no α prefactor appears there).
pub fn lemma_candidates() -> Vec<CurvatureTermConfig> {
    CurvatureTermConfig::candidates()
        .into_iter()
        .filter(|c| c.alpha_factor == crate::merge::AlphaFactor::One)
        .collect()
}

pub fn lemma_scan(
    base: &MlpModel,
    tasks: &[TaskDataset],
    task: usize,
    m: usize,
    alpha: f64,
    eta_grid: &[f64],
) -> Result<LemmaReport> {
    check_grid(eta_grid, 5)?;
    if m == 0 || task >= tasks.len() {
        return Err(Error::InvalidArgument("lemma scan needs m ≥ 1 and a valid task".into()));
    }
    let candidates = lemma_candidates();
    let results = par::map_collect(eta_grid, |&eta| -> Result<LemmaPoint> {
        let cfg = TrainConfig::new(eta, m + 1).with_alpha(alpha);
        let single = finetune(base, &tasks[task], &cfg)?;
        let mt = train_multitask(base, tasks, &cfg)?;
        let drift = single.last().sub(mt.last())?;
        let expansion = MultitaskExpansion::new(base.arch(), &mt.checkpoints, tasks, alpha, m)?;
        let p = expansion.accum(task, m)?;
        let mut first = drift.clone();
        first.axpy(-eta, &p)?;
        let s_main = expansion.curvature(task, m - 1, HessianAnchor::MainText)?;
        let s_app = expansion.curvature(task, m - 1, HessianAnchor::Appendix)?;
        let corrected_residuals = candidates
            .iter()
            .map(|c| {
                let s = match c.hessian_anchor {
                    HessianAnchor::MainText => &s_main,
                    HessianAnchor::Appendix => &s_app,
                };
                let mut r = first.clone();
                r.axpy(-0.5 * eta * eta * c.factor(alpha), s)?;
                norm2(&r)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(LemmaPoint {
            eta,
            first_order_residual: norm2(&first)?,
            corrected_residuals,
        })
    });
    let points = results.into_iter().collect::<Result<Vec<_>>>()?;
    let etas: Vec<f64> = points.iter().map(|p| p.eta).collect();
    let first: Vec<f64> = points.iter().map(|p| p.first_order_residual).collect();
    let candidate_fits: Vec<CandidateFit> = candidates
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let norms: Vec<f64> = points.iter().map(|p| p.corrected_residuals[i]).collect();
            CandidateFit {
                config: *c,
                label: c.label(),
                fit: fit_order_above(&etas, &norms, GAP_NOISE_FLOOR).ok(),
            }
        })
        .collect();
    Ok(LemmaReport {
        task,
        m,
        alpha,
        first_order_fit: fit_order_above(&etas, &first, GAP_NOISE_FLOOR).ok(),
        selected: select_nearest(&candidate_fits, 3.0),
        candidates: candidate_fits,
        points,
    })
}

/// `C(n, 2)` style binomial `(h+2 choose 2) = (h+1)(h+2)/2`.
pub fn binom_h_plus_2_choose_2(h: usize) -> f64 {
    ((h + 1) * (h + 2)) as f64 / 2.0
}

/// Closed-form quantities of the uniform bounds for one architecture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoreticalBounds {
    pub beta: f64,
    pub gamma: f64,
    /// `√2 M_x Π β^{L−1}`
    pub g_max: f64,
    /// `2 γ M_x² Π² β^{2L−2}`
    pub h_max_general: f64,
    /// `½ M_x² Π² β^{2L−2}` (Gauss–Newton form with `λ_max(H_logits) ≤ ½`)
    pub h_max_relu_gauss_newton: f64,
    /// `½ √2 M_x³ Π³ β^{3L−3}` (product form stated for ReLU nets)
    pub h_max_relu_product: f64,
    pub binom: f64,
    /// Bound on `‖C‖` using `|αT − 1|`.
    pub c_bound_main: f64,
    /// Bound on `‖C‖` using `|α(T+1) − 1|`.
    pub c_bound_appendix: f64,
}

pub fn theoretical_bounds(
    activation: Activation,
    depth: usize,
    m_x: f64,
    pi: f64,
    task_count: usize,
    alpha: f64,
    h: usize,
) -> TheoreticalBounds {
    let beta = activation.beta();
    let gamma = activation.gamma();
    let l = depth as i32;
    let t = task_count as f64;
    let g_max = 2f64.sqrt() * m_x * pi * beta.powi(l - 1);
    let h_max_general = 2.0 * gamma * m_x * m_x * pi * pi * beta.powi(2 * l - 2);
    let h_max_relu_gauss_newton = 0.5 * m_x * m_x * pi * pi * beta.powi(2 * l - 2);
    let h_max_relu_product = 0.5 * 2f64.sqrt() * m_x.powi(3) * pi.powi(3) * beta.powi(3 * l - 3);
    let binom = binom_h_plus_2_choose_2(h);
    let main_coef = (alpha * t - 1.0).abs();
    let app_coef = (alpha * (t + 1.0) - 1.0).abs();
    let (c_bound_main, c_bound_appendix) = match activation {
        Activation::Relu | Activation::Identity => (
            0.5 * t * binom * main_coef * h_max_relu_product * g_max,
            t * binom * app_coef * h_max_relu_gauss_newton * g_max,
        ),
        Activation::Sigmoid | Activation::Tanh => (
            t * binom * main_coef * h_max_general * g_max,
            t * binom * app_coef * h_max_general * g_max,
        ),
    };
    TheoreticalBounds {
        beta,
        gamma,
        g_max,
        h_max_general,
        h_max_relu_gauss_newton,
        h_max_relu_product,
        binom,
        c_bound_main,
        c_bound_appendix,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasuredQuantities {
    /// `s_ℓ`: per-layer max spectral norm over visited checkpoints.
    pub layer_spectral_norms: Vec<f64>,
    pub pi: f64,
    /// Declared input bound.
    pub m_x: f64,
    /// Largest input norm actually present.
    pub m_x_observed: f64,
    pub g_emp: f64,
    pub h_emp: f64,
    /// `‖C‖` with the main-text anchor and no factor.
    pub c_norm: f64,
    /// Largest `‖r_t(θ⁽ᵐ⁾)‖` over tasks and checkpoints used by `C`.
    pub max_residual_norm: f64,
    /// Largest hidden-activation norm `‖a⁽ˡ⁾‖`, `1 ≤ ℓ < L`.
    pub max_hidden_activation_norm: f64,
    pub max_logits_hessian_eigenvalue: f64,
    pub max_hessian_asymmetry: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundCheck {
    pub name: String,
    pub measured: f64,
    pub bound: f64,
    pub ratio: f64,
    pub holds: bool,
}

impl BoundCheck {
    fn new(name: &str, measured: f64, bound: f64) -> Self {
        let ratio = if bound > 0.0 {
            measured / bound
        } else if measured == 0.0 {
            0.0
        } else {
            f64::INFINITY
        };
        Self {
            name: name.to_string(),
            measured,
            bound,
            ratio,
            holds: ratio <= 1.0 + 1e-9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub activation: Activation,
    pub depth: usize,
    pub task_count: usize,
    pub alpha: f64,
    pub h: usize,
    pub checkpoints: usize,
    pub measured: MeasuredQuantities,
    pub theoretical: TheoreticalBounds,
    /// Measured quantity against its bound.
    pub checks: Vec<BoundCheck>,
    /// Premises the bound derivation relies on, checked on the data.
    pub premises: Vec<BoundCheck>,
}

impl BoundReport {
    pub fn premises_hold(&self) -> bool {
        self.premises.iter().all(|p| p.holds)
    }

    pub fn check(&self, name: &str) -> Option<&BoundCheck> {
        self.checks.iter().find(|c| c.name == name)
    }
}

/// Measures spectral norms, gradient and Hessian maxima and `‖C‖` along
/// `visited` (a multitask trajectory) and compares them with the uniform
/// bounds. `C` uses `visited[0..=h]`.
pub fn theorem3_bounds(
    arch: &MlpArchitecture,
    visited: &[ParamVector],
    tasks: &[TaskDataset],
    alpha: f64,
    h: usize,
) -> Result<BoundReport> {
    if arch.bias {
        return Err(Error::Unsupported(
            "uniform bounds assume a weights-only network".into(),
        ));
    }
    if !arch.activation.gamma().is_finite() {
        return Err(Error::Unsupported(format!(
            "activation {} has no finite second-derivative bound",
            arch.activation.name()
        )));
    }
    if tasks.is_empty() {
        return Err(Error::InvalidArgument("no tasks".into()));
    }
    if visited.len() < h + 1 {
        return Err(Error::InsufficientCheckpoints {
            needed: h + 1,
            available: visited.len(),
        });
    }
    let depth = arch.depth();
    let models = visited
        .iter()
        .map(|c| MlpModel::unflatten(arch, c))
        .collect::<Result<Vec<_>>>()?;

    let mut layer_spectral_norms = vec![0.0_f64; depth];
    for m in &models {
        for (l, w) in m.weights().iter().enumerate() {
            let s = match spectral_norm(w, POWER_ITERATION_TOL, POWER_ITERATION_MAX_ITER) {
                Ok(s) => s,
                Err(Error::NotConverged { .. }) => {
                    let gram = w.transpose().matmul(w)?;
                    symmetric_eigen(&gram)?.0[0].max(0.0).sqrt()
                }
                Err(e) => return Err(e),
            };
            layer_spectral_norms[l] = layer_spectral_norms[l].max(s);
        }
    }
    let pi: f64 = layer_spectral_norms.iter().product();
    let m_x = tasks.iter().map(|t| t.m_x_bound).fold(0.0, f64::max);
    let m_x_observed = tasks.iter().map(|t| t.max_input_norm()).fold(0.0, f64::max);

    let jobs: Vec<(usize, usize)> = (0..models.len())
        .flat_map(|c| (0..tasks.len()).map(move |t| (c, t)))
        .collect();
    let per_job = par::map_collect(&jobs, |&(c, t)| -> Result<(f64, f64, f64)> {
        let g = norm2(&grad(&models[c], &tasks[t])?)?;
        let hess = full_hessian(&models[c], &tasks[t])?;
        let hn = symmetric_spectral_norm(&hess.matrix)?;
        Ok((g, hn, hess.raw_asymmetry))
    });
    let (mut g_emp, mut h_emp, mut asym) = (0.0_f64, 0.0_f64, 0.0_f64);
    for r in per_job {
        let (g, hn, a) = r?;
        g_emp = g_emp.max(g);
        h_emp = h_emp.max(hn);
        asym = asym.max(a);
    }

    let mut max_hidden: f64 = 0.0;
    let mut max_eig: f64 = 0.0;
    for m in &models {
        for t in tasks {
            for x in &t.inputs {
                let (z, trace) = m.forward(x)?;
                for a in &trace.act[1..depth] {
                    max_hidden = max_hidden.max(crate::tensor::norm2_unchecked(a));
                }
                let hl = logits_hessian(&SoftmaxState::from_logits(&z));
                max_eig = max_eig.max(symmetric_eigen(&hl)?.0[0]);
            }
        }
    }

    let expansion = MultitaskExpansion::new(arch, visited, tasks, alpha, h)?;
    let c_norm = norm2(&expansion.raw_coefficient(h, HessianAnchor::MainText)?)?;
    let mut max_residual: f64 = 0.0;
    for j in 0..=h {
        for t in 0..tasks.len() {
            max_residual = max_residual.max(norm2(&expansion.residual(t, j)?)?);
        }
    }

    let theoretical = theoretical_bounds(arch.activation, depth, m_x, pi, tasks.len(), alpha, h);
    let t = tasks.len() as f64;
    let smooth = matches!(arch.activation, Activation::Sigmoid | Activation::Tanh);
    let h_bound = if smooth {
        theoretical.h_max_general
    } else {
        theoretical.h_max_relu_gauss_newton
    };
    let checks = vec![
        BoundCheck::new("gradient_norm", g_emp, theoretical.g_max),
        BoundCheck::new("hessian_norm", h_emp, h_bound),
        BoundCheck::new("c_norm_main", c_norm, theoretical.c_bound_main),
        BoundCheck::new("c_norm_appendix", c_norm, theoretical.c_bound_appendix),
        BoundCheck::new(
            "c_norm_main_measured_hg",
            c_norm,
            t * theoretical.binom * (alpha * t - 1.0).abs() * h_emp * g_emp,
        ),
        BoundCheck::new(
            "c_norm_appendix_measured_hg",
            c_norm,
            t * theoretical.binom * (alpha * (t + 1.0) - 1.0).abs() * h_emp * g_emp,
        ),
        BoundCheck::new("logits_hessian_eigenvalue", max_eig, 0.5),
    ];
    let mut premises = vec![
        BoundCheck::new("input_norm", m_x_observed, m_x),
        BoundCheck::new("hidden_activation_norm", max_hidden, m_x),
        BoundCheck::new("residual_norm_main", max_residual, (alpha * t - 1.0).abs() * g_emp),
        BoundCheck::new(
            "residual_norm_appendix",
            max_residual,
            (alpha * (t + 1.0) - 1.0).abs() * g_emp,
        ),
    ];
    if !smooth {
        // ∇²_θ f vanishes only for a single linear layer
        premises.push(BoundCheck::new("network_curvature_free", depth as f64, 1.0));
    }

    Ok(BoundReport {
        activation: arch.activation,
        depth,
        task_count: tasks.len(),
        alpha,
        h,
        checkpoints: visited.len(),
        measured: MeasuredQuantities {
            layer_spectral_norms,
            pi,
            m_x,
            m_x_observed,
            g_emp,
            h_emp,
            c_norm,
            max_residual_norm: max_residual,
            max_hidden_activation_norm: max_hidden,
            max_logits_hessian_eigenvalue: max_eig,
            max_hessian_asymmetry: asym,
        },
        theoretical,
        checks,
        premises,
    })
}

/// Epoch-wise `‖∇⁽ʲ⁾‖ / Σ_j' ‖∇⁽ʲ'⁾‖`.
pub fn grad_dominance(traj: &Trajectory) -> Result<Vec<f64>> {
    let norms: Vec<f64> = traj.records.iter().map(|r| r.grad_norm).collect();
    let total: f64 = norms.iter().sum();
    if !(total > 0.0) {
        return Err(Error::InvalidArgument("all gradients are zero".into()));
    }
    Ok(norms.iter().map(|n| n / total).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CosineMatrix {
    pub matrix: DenseMatrix,
    /// Rows whose gradient is zero; their off-diagonal entries are 0.
    pub undefined_rows: Vec<usize>,
}

/// Pairwise cosine similarities; exactly symmetric with a unit diagonal.
pub fn cosine_matrix(grads: &[ParamVector]) -> Result<CosineMatrix> {
    let n = grads.len();
    let mut matrix = DenseMatrix::identity(n);
    let mut undefined_rows = Vec::new();
    for (i, g) in grads.iter().enumerate() {
        if norm2(g)? == 0.0 {
            undefined_rows.push(i);
        }
    }
    for i in 0..n {
        for j in (i + 1)..n {
            let c = match cosine(&grads[i], &grads[j]) {
                Ok(c) => c,
                Err(Error::UndefinedCosine) => 0.0,
                Err(e) => return Err(e),
            };
            matrix[(i, j)] = c;
            matrix[(j, i)] = c;
        }
    }
    Ok(CosineMatrix { matrix, undefined_rows })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaProjection {
    pub points: Vec<[f64; 2]>,
    /// Sample variance along each component.
    pub explained_variance: [f64; 2],
    /// Share of the total variance along each component.
    pub explained_variance_ratio: [f64; 2],
    /// Set when the centred checkpoints span fewer than two directions.
    pub rank_deficient: bool,
}

/// Projects checkpoints onto the top two principal directions of the
/// centred stack. Each direction is signed so its first non-negligible
/// coordinate is positive.
pub fn pca_project(checkpoints: &[ParamVector]) -> Result<PcaProjection> {
    let n = checkpoints.len();
    if n < 3 {
        return Err(Error::InvalidArgument(format!("PCA needs ≥ 3 checkpoints, got {n}")));
    }
    let p = checkpoints[0].len();
    let mean = ParamVector::sum(p, checkpoints)?.scale(1.0 / n as f64);
    let centred = checkpoints.iter().map(|c| c.sub(&mean)).collect::<Result<Vec<_>>>()?;
    let mut gram = DenseMatrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let d = centred[i].dot(&centred[j])?;
            gram[(i, j)] = d;
            gram[(j, i)] = d;
        }
    }
    let (values, vectors) = symmetric_eigen(&gram)?;
    let total: f64 = values.iter().map(|v| v.max(0.0)).sum();
    let tiny = 1e-12 * values[0].abs().max(f64::MIN_POSITIVE);

    let mut points = vec![[0.0; 2]; n];
    let mut variance = [0.0; 2];
    let mut ratio = [0.0; 2];
    let mut rank_deficient = false;
    for comp in 0..2 {
        let lambda = values.get(comp).copied().unwrap_or(0.0);
        if !(lambda > tiny) {
            rank_deficient = true;
            continue;
        }
        let u: Vec<f64> = (0..n).map(|i| vectors[(i, comp)]).collect();
        // direction in parameter space: Xᵀu / √λ
        let mut dir = vec![0.0; p];
        for (i, c) in centred.iter().enumerate() {
            for (d, x) in dir.iter_mut().zip(c.iter()) {
                *d += u[i] * x;
            }
        }
        let scale = lambda.sqrt();
        dir.iter_mut().for_each(|d| *d /= scale);
        let max_abs = dir.iter().fold(0.0_f64, |m, d| m.max(d.abs()));
        let sign = dir
            .iter()
            .find(|d| d.abs() > 1e-9 * max_abs)
            .map_or(1.0, |d| d.signum());
        for (i, c) in centred.iter().enumerate() {
            points[i][comp] = sign * crate::tensor::dot(c.as_slice(), &dir);
        }
        variance[comp] = lambda / (n - 1) as f64;
        ratio[comp] = if total > 0.0 { lambda / total } else { 0.0 };
    }
    Ok(PcaProjection {
        points,
        explained_variance: variance,
        explained_variance_ratio: ratio,
        rank_deficient,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HorizonConfig {
    pub eta: f64,
    pub convergence_tol: f64,
    pub max_epochs: usize,
    pub alpha_grid: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaRow {
    pub alpha: f64,
    pub per_task: Vec<f64>,
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HorizonArm {
    pub name: String,
    pub epochs: Vec<usize>,
    pub stop_reasons: Vec<StopReason>,
    pub sweep: Vec<AlphaRow>,
    pub best: AlphaRow,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HorizonReport {
    pub task_count: usize,
    pub one_epoch: HorizonArm,
    pub converged: HorizonArm,
}

impl HorizonReport {
    /// Best mean accuracy of one-epoch merging minus that of converged merging.
    pub fn advantage(&self) -> f64 {
        self.one_epoch.best.mean - self.converged.best.mean
    }
}

/// Sorted α grid that always contains `1/T`.
pub fn alpha_grid_with_inverse_count(grid: &[f64], task_count: usize) -> Vec<f64> {
    let mut out: Vec<f64> = grid.to_vec();
    let inv = 1.0 / task_count as f64;
    if !out.iter().any(|a| (a - inv).abs() < 1e-15) {
        out.push(inv);
    }
    out.sort_by(f64::total_cmp);
    out.dedup();
    out
}

fn sweep_arm(
    name: &str,
    base: &MlpModel,
    tasks: &[TaskDataset],
    trajectories: &[Trajectory],
    grid: &[f64],
) -> Result<HorizonArm> {
    let vectors = trajectories.iter().map(task_vector).collect::<Result<Vec<_>>>()?;
    let rows = par::map_collect(grid, |&alpha| -> Result<AlphaRow> {
        let merged = merge_ta(base, &vectors, alpha)?;
        let per_task = tasks.iter().map(|t| accuracy(&merged, t)).collect::<Result<Vec<_>>>()?;
        let mean = per_task.iter().sum::<f64>() / per_task.len() as f64;
        Ok(AlphaRow { alpha, per_task, mean })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let best = rows
        .iter()
        .fold(None::<&AlphaRow>, |best, r| match best {
            Some(b) if b.mean >= r.mean => Some(b),
            _ => Some(r),
        })
        .cloned()
        .ok_or_else(|| Error::InvalidArgument("empty α grid".into()))?;
    Ok(HorizonArm {
        name: name.to_string(),
        epochs: trajectories.iter().map(Trajectory::epochs).collect(),
        stop_reasons: trajectories.iter().map(|t| t.stop_reason).collect(),
        sweep: rows,
        best,
    })
}

/// TA accuracy from one-epoch task vectors versus converged task vectors,
/// each with its best α from the grid.
pub fn merge_horizon_experiment(base: &MlpModel, tasks: &[TaskDataset], cfg: &HorizonConfig) -> Result<HorizonReport> {
    if tasks.is_empty() {
        return Err(Error::InvalidArgument("no tasks".into()));
    }
    let grid = alpha_grid_with_inverse_count(&cfg.alpha_grid, tasks.len());
    let one = finetune_all(base, tasks, &TrainConfig::new(cfg.eta, 1))?;
    let conv_cfg = TrainConfig::new(cfg.eta, 1).with_convergence(cfg.convergence_tol, cfg.max_epochs);
    let converged = par::map_collect(tasks, |t| train_to_convergence(base, t, &conv_cfg))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    Ok(HorizonReport {
        task_count: tasks.len(),
        one_epoch: sweep_arm("one_epoch", base, tasks, &one, &grid)?,
        converged: sweep_arm("converged", base, tasks, &converged, &grid)?,
    })
}

/// Per-task gradient statistics over the first `epochs` finetuning epochs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DominanceRecord {
    pub task_id: usize,
    pub normalized_norms: Vec<f64>,
    pub cosine: CosineMatrix,
    /// Epoch-1 entry is the largest normalized norm.
    pub first_epoch_dominant: bool,
}

pub fn gradient_dominance_study(
    base: &MlpModel,
    tasks: &[TaskDataset],
    eta: f64,
    epochs: usize,
) -> Result<Vec<DominanceRecord>> {
    let cfg = TrainConfig::new(eta, epochs).retaining_grads();
    let trajectories = finetune_all(base, tasks, &cfg)?;
    trajectories
        .iter()
        .zip(tasks)
        .map(|(traj, task)| {
            let normalized_norms = grad_dominance(traj)?;
            let grads: Vec<ParamVector> = traj
                .records
                .iter()
                .map(|r| r.grad.clone().expect("gradients retained"))
                .collect();
            let first = normalized_norms[0];
            Ok(DominanceRecord {
                task_id: task.task_id,
                first_epoch_dominant: normalized_norms.iter().all(|&v| v <= first),
                normalized_norms,
                cosine: cosine_matrix(&grads)?,
            })
        })
        .collect()
}
