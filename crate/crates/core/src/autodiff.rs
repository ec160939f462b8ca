//! Mean cross-entropy loss with exact first- and second-order derivatives.
//!
//! The gradient is plain reverse mode. Hessian-vector products push a
//! directional derivative (`R{·}`) through both the forward and the backward
//! pass, so they contain the Gauss–Newton term `Jᵀ H_logits J v` as well as
//! the network-curvature term, with no finite-difference noise. Finite
//! differences live in [`fd_check`] and are only used as an oracle.
//!
//! Per-sample work is split into fixed-size chunks that may run in parallel;
//! chunk results are summed sequentially in index order.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{Activation, MlpModel};
use crate::par;
use crate::taskgen::TaskDataset;
use crate::tensor::{DenseMatrix, ParamVector};

pub const DEFAULT_HESSIAN_CAP: usize = 5000;

/// Probability vector produced by a softmax.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxState {
    p: Vec<f64>,
}

impl SoftmaxState {
    /// Max-subtracted softmax of `logits`.
    pub fn from_logits(logits: &[f64]) -> Self {
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        Self {
            p: exps.iter().map(|e| e / total).collect(),
        }
    }

    pub fn new(p: Vec<f64>) -> Result<Self> {
        if p.is_empty() || p.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
            return Err(Error::InvalidArgument("probabilities must be finite and ≥ 0".into()));
        }
        let total: f64 = p.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidArgument(format!("probabilities sum to {total}")));
        }
        Ok(Self { p })
    }

    pub fn probs(&self) -> &[f64] {
        &self.p
    }

    /// `(diag(p) − ppᵀ) v`
    pub fn hessian_apply(&self, v: &[f64]) -> Vec<f64> {
        let pv: f64 = self.p.iter().zip(v).map(|(p, v)| p * v).sum();
        self.p.iter().zip(v).map(|(p, v)| p * (v - pv)).collect()
    }
}

/// `diag(p) − ppᵀ`, the Hessian of cross-entropy with respect to the logits.
pub fn logits_hessian(state: &SoftmaxState) -> DenseMatrix {
    let p = state.probs();
    let k = p.len();
    let mut h = DenseMatrix::zeros(k, k);
    for i in 0..k {
        for j in 0..k {
            h[(i, j)] = if i == j { p[i] - p[i] * p[i] } else { -p[i] * p[j] };
        }
    }
    h
}

/// `−log softmax(z)[y]`, computed as `logsumexp(z) − z_y`.
fn cross_entropy(logits: &[f64], y: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    lse - logits[y]
}

fn check_dataset(model: &MlpModel, data: &TaskDataset) -> Result<()> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let classes = model.arch().num_classes();
    if let Some(&label) = data.labels.iter().find(|&&y| y >= classes) {
        return Err(Error::LabelOutOfRange { label, classes });
    }
    Ok(())
}

/// Sums `f(i, buf)` over all samples into a length-`dim` buffer, plus the
/// scalar results, then divides both by `n`.
fn mean_over_samples<F>(n: usize, dim: usize, f: F) -> Result<(f64, Vec<f64>)>
where
    F: Fn(usize, &mut [f64]) -> Result<f64> + Sync + Send,
{
    let chunks: Vec<(usize, usize)> = (0..n)
        .step_by(par::SAMPLE_CHUNK)
        .map(|start| (start, (start + par::SAMPLE_CHUNK).min(n)))
        .collect();
    let partials = par::map_collect(&chunks, |&(start, end)| -> Result<(f64, Vec<f64>)> {
        let mut buf = vec![0.0; dim];
        let mut scalar = 0.0;
        for i in start..end {
            scalar += f(i, &mut buf)?;
        }
        Ok((scalar, buf))
    });
    let mut scalar = 0.0;
    let mut acc = vec![0.0; dim];
    for partial in partials {
        let (s, buf) = partial?;
        scalar += s;
        acc.iter_mut().zip(&buf).for_each(|(a, b)| *a += b);
    }
    let inv = n as f64;
    acc.iter_mut().for_each(|a| *a /= inv);
    Ok((scalar / inv, acc))
}

/// Mean cross-entropy `(1/n) Σᵢ ℓ(xᵢ, yᵢ, θ)`.
pub fn loss(model: &MlpModel, data: &TaskDataset) -> Result<f64> {
    check_dataset(model, data)?;
    let (value, _) = mean_over_samples(data.len(), 0, |i, _| {
        let z = model.logits(&data.inputs[i])?;
        Ok(cross_entropy(&z, data.labels[i]))
    })?;
    Ok(value)
}

pub fn grad(model: &MlpModel, data: &TaskDataset) -> Result<ParamVector> {
    loss_and_grad(model, data).map(|(_, g)| g)
}

pub fn loss_and_grad(model: &MlpModel, data: &TaskDataset) -> Result<(f64, ParamVector)> {
    check_dataset(model, data)?;
    let arch = model.arch();
    let offsets = arch.layer_offsets();
    let (value, g) = mean_over_samples(data.len(), arch.param_count(), |i, buf| {
        sample_loss_grad(model, &offsets, &data.inputs[i], data.labels[i], buf)
    })?;
    Ok((value, ParamVector::new(g)))
}

/// Adds `δ ⊗ a` to the weight block at `offset` (and `δ` to the bias block).
fn accumulate_outer(buf: &mut [f64], offset: usize, delta: &[f64], a: &[f64], bias: bool) {
    let cols = a.len();
    for (r, d) in delta.iter().enumerate() {
        let row = &mut buf[offset + r * cols..offset + (r + 1) * cols];
        row.iter_mut().zip(a).for_each(|(g, a)| *g += d * a);
    }
    if bias {
        let b = &mut buf[offset + delta.len() * cols..offset + delta.len() * (cols + 1)];
        b.iter_mut().zip(delta).for_each(|(g, d)| *g += d);
    }
}

fn sample_loss_grad(model: &MlpModel, offsets: &[usize], x: &[f64], y: usize, buf: &mut [f64]) -> Result<f64> {
    let (z, trace) = model.forward(x)?;
    let state = SoftmaxState::from_logits(&z);
    let mut delta = state.probs().to_vec();
    delta[y] -= 1.0;
    let bias = model.arch().bias;
    backprop(model, offsets, &trace.pre, &trace.act, delta, bias, buf);
    Ok(cross_entropy(&z, y))
}

/// Plain backward pass seeded with `delta` at the logits.
fn backprop(
    model: &MlpModel,
    offsets: &[usize],
    pre: &[Vec<f64>],
    act: &[Vec<f64>],
    mut delta: Vec<f64>,
    bias: bool,
    buf: &mut [f64],
) {
    let activation = model.arch().activation;
    for l in (0..model.arch().depth()).rev() {
        accumulate_outer(buf, offsets[l], &delta, &act[l], bias);
        if l > 0 {
            let da = model.weights()[l].matvec_t(&delta);
            delta = da
                .iter()
                .zip(&pre[l - 1])
                .map(|(d, &h)| d * activation.eval(h).1)
                .collect();
        }
    }
}

/// Directional derivative of every pre-activation and activation along `dir`.
struct RForward {
    rpre: Vec<Vec<f64>>,
    ract: Vec<Vec<f64>>,
}

fn r_forward(model: &MlpModel, dir: &MlpModel, pre: &[Vec<f64>], act: &[Vec<f64>]) -> RForward {
    let depth = model.arch().depth();
    let activation = model.arch().activation;
    let mut rpre = Vec::with_capacity(depth);
    let mut ract = Vec::with_capacity(depth + 1);
    ract.push(vec![0.0; act[0].len()]);
    for l in 0..depth {
        let mut rh = dir.weights()[l].matvec(&act[l]);
        let w_ra = model.weights()[l].matvec(&ract[l]);
        rh.iter_mut().zip(&w_ra).for_each(|(r, w)| *r += w);
        if let Some(vb) = dir.bias(l) {
            rh.iter_mut().zip(vb).for_each(|(r, b)| *r += b);
        }
        let ra = if l + 1 == depth {
            rh.clone()
        } else {
            rh.iter().zip(&pre[l]).map(|(r, &h)| r * activation.eval(h).1).collect()
        };
        rpre.push(rh);
        ract.push(ra);
    }
    RForward { rpre, ract }
}

fn sample_hvp(model: &MlpModel, dir: &MlpModel, offsets: &[usize], x: &[f64], y: usize, buf: &mut [f64]) -> Result<()> {
    let (z, trace) = model.forward(x)?;
    let RForward { rpre, ract } = r_forward(model, dir, &trace.pre, &trace.act);
    let state = SoftmaxState::from_logits(&z);
    let mut delta = state.probs().to_vec();
    delta[y] -= 1.0;
    let depth = model.arch().depth();
    let mut rdelta = state.hessian_apply(&rpre[depth - 1]);
    let bias = model.arch().bias;
    let activation = model.arch().activation;

    for l in (0..depth).rev() {
        accumulate_outer(buf, offsets[l], &rdelta, &trace.act[l], bias);
        // δ ⊗ R{a}; R{a⁽⁰⁾} = 0 so the input layer skips it
        if l > 0 {
            accumulate_outer(buf, offsets[l], &delta, &ract[l], false);
        }
        if l > 0 {
            let da = model.weights()[l].matvec_t(&delta);
            let mut rda = dir.weights()[l].matvec_t(&delta);
            let w_rd = model.weights()[l].matvec_t(&rdelta);
            rda.iter_mut().zip(&w_rd).for_each(|(r, w)| *r += w);
            let mut next = Vec::with_capacity(da.len());
            let mut rnext = Vec::with_capacity(da.len());
            for j in 0..da.len() {
                let (_, d1, d2) = activation.eval(trace.pre[l - 1][j]);
                next.push(d1 * da[j]);
                rnext.push(d2 * rpre[l - 1][j] * da[j] + d1 * rda[j]);
            }
            delta = next;
            rdelta = rnext;
        }
    }
    Ok(())
}

fn sample_gauss_newton(model: &MlpModel, dir: &MlpModel, offsets: &[usize], x: &[f64], buf: &mut [f64]) -> Result<()> {
    let (z, trace) = model.forward(x)?;
    let RForward { rpre, .. } = r_forward(model, dir, &trace.pre, &trace.act);
    let state = SoftmaxState::from_logits(&z);
    let seed = state.hessian_apply(&rpre[model.arch().depth() - 1]);
    backprop(model, offsets, &trace.pre, &trace.act, seed, model.arch().bias, buf);
    Ok(())
}

fn direction_model(model: &MlpModel, v: &ParamVector) -> Result<MlpModel> {
    MlpModel::unflatten(model.arch(), v)
}

/// Exact `∇²L̄(θ) v`.
pub fn hvp(model: &MlpModel, data: &TaskDataset, v: &ParamVector) -> Result<ParamVector> {
    check_dataset(model, data)?;
    let dir = direction_model(model, v)?;
    let offsets = model.arch().layer_offsets();
    let (_, out) = mean_over_samples(data.len(), v.len(), |i, buf| {
        sample_hvp(model, &dir, &offsets, &data.inputs[i], data.labels[i], buf)?;
        Ok(0.0)
    })?;
    Ok(ParamVector::new(out))
}

/// Gauss–Newton product `(1/n) Σᵢ Jᵢᵀ H_logits,ᵢ Jᵢ v`, i.e. the Hessian
/// without the network-curvature term.
pub fn gauss_newton_vp(model: &MlpModel, data: &TaskDataset, v: &ParamVector) -> Result<ParamVector> {
    check_dataset(model, data)?;
    let dir = direction_model(model, v)?;
    let offsets = model.arch().layer_offsets();
    let (_, out) = mean_over_samples(data.len(), v.len(), |i, buf| {
        sample_gauss_newton(model, &dir, &offsets, &data.inputs[i], buf)?;
        Ok(0.0)
    })?;
    Ok(ParamVector::new(out))
}

#[derive(Debug, Clone)]
pub struct HessianAssembly {
    /// `(H + Hᵀ)/2`
    pub matrix: DenseMatrix,
    /// `‖H − Hᵀ‖_F / ‖H‖_F` of the column-assembled matrix before symmetrisation.
    pub raw_asymmetry: f64,
}

pub fn full_hessian(model: &MlpModel, data: &TaskDataset) -> Result<HessianAssembly> {
    full_hessian_capped(model, data, DEFAULT_HESSIAN_CAP)
}

/// Dense Hessian whose column `i` is `hvp(eᵢ)`.
pub fn full_hessian_capped(model: &MlpModel, data: &TaskDataset, cap: usize) -> Result<HessianAssembly> {
    let p = model.arch().param_count();
    if p > cap {
        return Err(Error::HessianTooLarge { params: p, cap });
    }
    check_dataset(model, data)?;
    let columns = par::map_range(p, |i| hvp(model, data, &ParamVector::basis(p, i)));
    let mut raw = DenseMatrix::zeros(p, p);
    for (j, col) in columns.into_iter().enumerate() {
        let col = col?;
        for i in 0..p {
            raw[(i, j)] = col[i];
        }
    }
    let diff = raw.sub(&raw.transpose())?.frobenius_norm();
    let scale = raw.frobenius_norm();
    let raw_asymmetry = if scale == 0.0 { 0.0 } else { diff / scale };
    let mut matrix = raw.clone();
    for i in 0..p {
        for j in (i + 1)..p {
            let s = 0.5 * (raw[(i, j)] + raw[(j, i)]);
            matrix[(i, j)] = s;
            matrix[(j, i)] = s;
        }
    }
    Ok(HessianAssembly { matrix, raw_asymmetry })
}

/// Which derivative [`fd_check`] compares against central differences.
#[derive(Debug, Clone)]
pub enum FdMode {
    Grad,
    /// Compare `hvp(v)` with `(∇L̄(θ+εv) − ∇L̄(θ−εv)) / 2ε`.
    Hvp(ParamVector),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FdReport {
    pub step: f64,
    pub max_rel_error: f64,
    pub worst_index: usize,
    /// Coordinates whose perturbation changed a ReLU activation pattern.
    pub kink_crossings: Vec<usize>,
}

/// Central-difference step `max(1e-5, 1e-5·‖θ‖∞)`.
pub fn fd_step(theta: &ParamVector) -> f64 {
    1e-5_f64.max(1e-5 * theta.norm_inf())
}

/// Per-coordinate error `|a − b| / max(|a|, |b|, 1e-3·‖b‖∞)`; the floor keeps
/// near-zero coordinates from turning rounding noise into large ratios.
pub fn max_relative_error(analytic: &ParamVector, reference: &ParamVector) -> (f64, usize) {
    let floor = 1e-3 * reference.norm_inf();
    let mut worst = (0.0, 0);
    for (i, (a, b)) in analytic.iter().zip(reference.iter()).enumerate() {
        let denom = a.abs().max(b.abs()).max(floor);
        let err = if denom == 0.0 { 0.0 } else { (a - b).abs() / denom };
        if err > worst.0 {
            worst = (err, i);
        }
    }
    worst
}

/// Signs of every hidden pre-activation over the dataset; only meaningful
/// for piecewise-linear activations.
pub fn activation_pattern(model: &MlpModel, data: &TaskDataset) -> Result<Vec<bool>> {
    let mut pattern = Vec::new();
    for x in &data.inputs {
        let (_, trace) = model.forward(x)?;
        let hidden = trace.pre.len() - 1;
        for h in &trace.pre[..hidden] {
            pattern.extend(h.iter().map(|&v| v > 0.0));
        }
    }
    Ok(pattern)
}

pub fn fd_check(model: &MlpModel, data: &TaskDataset, mode: FdMode) -> Result<FdReport> {
    let theta = model.flatten();
    let p = theta.len();
    let eps = fd_step(&theta);
    let arch = model.arch();
    let piecewise = arch.activation == Activation::Relu;
    let base_pattern = if piecewise {
        Some(activation_pattern(model, data)?)
    } else {
        None
    };
    let shifted = |dir: &ParamVector, sign: f64| -> Result<MlpModel> {
        let mut t = theta.clone();
        t.axpy(sign * eps, dir)?;
        MlpModel::unflatten(arch, &t)
    };
    let crosses = |m: &MlpModel| -> Result<bool> {
        match &base_pattern {
            Some(bp) => Ok(&activation_pattern(m, data)? != bp),
            None => Ok(false),
        }
    };

    let mut kink_crossings = Vec::new();
    let (analytic, reference) = match mode {
        FdMode::Grad => {
            let analytic = grad(model, data)?;
            let rows = par::map_range(p, |i| -> Result<(f64, bool)> {
                let e = ParamVector::basis(p, i);
                let plus = shifted(&e, 1.0)?;
                let minus = shifted(&e, -1.0)?;
                let d = (loss(&plus, data)? - loss(&minus, data)?) / (2.0 * eps);
                Ok((d, crosses(&plus)? || crosses(&minus)?))
            });
            let mut fd = Vec::with_capacity(p);
            for (i, row) in rows.into_iter().enumerate() {
                let (d, kink) = row?;
                fd.push(d);
                if kink {
                    kink_crossings.push(i);
                }
            }
            (analytic, ParamVector::new(fd))
        }
        FdMode::Hvp(v) => {
            let analytic = hvp(model, data, &v)?;
            let plus = shifted(&v, 1.0)?;
            let minus = shifted(&v, -1.0)?;
            if crosses(&plus)? || crosses(&minus)? {
                kink_crossings.push(0);
            }
            let diff = grad(&plus, data)?.sub(&grad(&minus, data)?)?;
            (analytic, diff.scale(1.0 / (2.0 * eps)))
        }
    };
    let (max_rel_error, worst_index) = max_relative_error(&analytic, &reference);
    Ok(FdReport {
        step: eps,
        max_rel_error,
        worst_index,
        kink_crossings,
    })
}
