//! Depth-L feed-forward classifier `a⁽ˡ⁾ = φ(W⁽ˡ⁾ a⁽ˡ⁻¹⁾)` with a linear
//! output layer producing raw logits.
//!
//! Parameter layout (frozen): layers in order `1..=L`; for each layer the
//! weight matrix row-major (`d_ℓ × d_{ℓ-1}`), followed by the bias vector
//! when biases are enabled.

use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};
use rand_xoshiro::SplitMix64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{DenseMatrix, ParamVector};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Sigmoid,
    Tanh,
    /// No nonlinearity; the whole network is linear.
    Identity,
}

impl Activation {
    /// `sup |φ'|`
    pub fn beta(self) -> f64 {
        match self {
            Activation::Relu | Activation::Tanh | Activation::Identity => 1.0,
            Activation::Sigmoid => 0.25,
        }
    }

    /// `sup |φ''|`
    pub fn gamma(self) -> f64 {
        match self {
            Activation::Relu | Activation::Identity => 0.0,
            Activation::Sigmoid => 1.0 / (6.0 * 3f64.sqrt()),
            Activation::Tanh => 4.0 / (3.0 * 3f64.sqrt()),
        }
    }

    /// `(φ(z), φ'(z), φ''(z))`. ReLU uses `φ'(0) = 0` and `φ'' ≡ 0`.
    pub fn eval(self, z: f64) -> (f64, f64, f64) {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    (z, 1.0, 0.0)
                } else {
                    (0.0, 0.0, 0.0)
                }
            }
            Activation::Sigmoid => {
                let s = sigmoid(z);
                let d1 = s * (1.0 - s);
                (s, d1, d1 * (1.0 - 2.0 * s))
            }
            Activation::Tanh => {
                let t = z.tanh();
                let d1 = 1.0 - t * t;
                (t, d1, -2.0 * t * d1)
            }
            Activation::Identity => (z, 1.0, 0.0),
        }
    }

    pub fn value(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Sigmoid => sigmoid(z),
            Activation::Tanh => z.tanh(),
            Activation::Identity => z,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Sigmoid => "sigmoid",
            Activation::Tanh => "tanh",
            Activation::Identity => "identity",
        }
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpArchitecture {
    /// `d₀, d₁, …, d_L`
    #[serde(rename = "dims")]
    pub layer_dims: Vec<usize>,
    pub activation: Activation,
    #[serde(default)]
    pub bias: bool,
}

impl MlpArchitecture {
    pub fn new(layer_dims: Vec<usize>, activation: Activation) -> Result<Self> {
        let arch = Self {
            layer_dims,
            activation,
            bias: false,
        };
        arch.validate()?;
        Ok(arch)
    }

    pub fn with_bias(mut self, bias: bool) -> Self {
        self.bias = bias;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_dims.len() < 2 {
            return Err(Error::InvalidArgument(
                "architecture needs at least input and output dims".into(),
            ));
        }
        if self.layer_dims.contains(&0) {
            return Err(Error::InvalidArgument("layer dims must be ≥ 1".into()));
        }
        Ok(())
    }

    /// Number of weight layers `L`.
    pub fn depth(&self) -> usize {
        self.layer_dims.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn num_classes(&self) -> usize {
        *self.layer_dims.last().expect("validated architecture")
    }

    fn layer_shape(&self, layer: usize) -> (usize, usize) {
        (self.layer_dims[layer + 1], self.layer_dims[layer])
    }

    /// Parameters owned by layer `layer` (0-based).
    fn layer_params(&self, layer: usize) -> usize {
        let (rows, cols) = self.layer_shape(layer);
        rows * cols + if self.bias { rows } else { 0 }
    }

    pub fn param_count(&self) -> usize {
        (0..self.depth()).map(|l| self.layer_params(l)).sum()
    }

    /// Start offset of each layer's block in the flat layout.
    pub fn layer_offsets(&self) -> Vec<usize> {
        let mut offsets = Vec::with_capacity(self.depth());
        let mut acc = 0;
        for l in 0..self.depth() {
            offsets.push(acc);
            acc += self.layer_params(l);
        }
        offsets
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    arch: MlpArchitecture,
    weights: Vec<DenseMatrix>,
    /// One vector per layer when biases are enabled, empty otherwise.
    biases: Vec<Vec<f64>>,
}

impl MlpModel {
    pub fn zeros(arch: &MlpArchitecture) -> Self {
        let weights = (0..arch.depth())
            .map(|l| {
                let (r, c) = arch.layer_shape(l);
                DenseMatrix::zeros(r, c)
            })
            .collect();
        let biases = if arch.bias {
            (0..arch.depth()).map(|l| vec![0.0; arch.layer_dims[l + 1]]).collect()
        } else {
            Vec::new()
        };
        Self {
            arch: arch.clone(),
            weights,
            biases,
        }
    }

    /// Gaussian init with entry std `gain / sqrt(fan_in)`; biases start at zero.
    pub fn random(arch: &MlpArchitecture, seed: u64, gain: f64) -> Self {
        let mut model = Self::zeros(arch);
        let mut rng = SplitMix64::seed_from_u64(seed);
        for w in &mut model.weights {
            let std = gain / (w.cols() as f64).sqrt();
            for x in w.as_mut_slice() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *x = std * z;
            }
        }
        model
    }

    pub fn from_layers(arch: &MlpArchitecture, weights: Vec<DenseMatrix>, biases: Vec<Vec<f64>>) -> Result<Self> {
        arch.validate()?;
        if weights.len() != arch.depth() {
            return Err(Error::LengthMismatch {
                expected: arch.depth(),
                actual: weights.len(),
            });
        }
        for (l, w) in weights.iter().enumerate() {
            let (r, c) = arch.layer_shape(l);
            if w.rows() != r || w.cols() != c {
                return Err(Error::InvalidArgument(format!(
                    "layer {} weight is {}x{}, expected {r}x{c}",
                    l + 1,
                    w.rows(),
                    w.cols()
                )));
            }
        }
        let expected_biases = if arch.bias { arch.depth() } else { 0 };
        if biases.len() != expected_biases {
            return Err(Error::LengthMismatch {
                expected: expected_biases,
                actual: biases.len(),
            });
        }
        for (l, b) in biases.iter().enumerate() {
            if b.len() != arch.layer_dims[l + 1] {
                return Err(Error::LengthMismatch {
                    expected: arch.layer_dims[l + 1],
                    actual: b.len(),
                });
            }
        }
        Ok(Self {
            arch: arch.clone(),
            weights,
            biases,
        })
    }

    pub fn arch(&self) -> &MlpArchitecture {
        &self.arch
    }

    pub fn weights(&self) -> &[DenseMatrix] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [DenseMatrix] {
        &mut self.weights
    }

    pub fn bias(&self, layer: usize) -> Option<&[f64]> {
        self.biases.get(layer).map(Vec::as_slice)
    }

    pub fn flatten(&self) -> ParamVector {
        let mut out = Vec::with_capacity(self.arch.param_count());
        for l in 0..self.arch.depth() {
            out.extend_from_slice(self.weights[l].as_slice());
            if let Some(b) = self.biases.get(l) {
                out.extend_from_slice(b);
            }
        }
        ParamVector::new(out)
    }

    pub fn unflatten(arch: &MlpArchitecture, params: &ParamVector) -> Result<Self> {
        arch.validate()?;
        if params.len() != arch.param_count() {
            return Err(Error::LengthMismatch {
                expected: arch.param_count(),
                actual: params.len(),
            });
        }
        let mut model = Self::zeros(arch);
        let data = params.as_slice();
        let mut at = 0;
        for l in 0..arch.depth() {
            let w = model.weights[l].as_mut_slice();
            let n = w.len();
            w.copy_from_slice(&data[at..at + n]);
            at += n;
            if let Some(b) = model.biases.get_mut(l) {
                let n = b.len();
                b.copy_from_slice(&data[at..at + n]);
                at += n;
            }
        }
        Ok(model)
    }

    /// Logits and the full layer trace for input `x`.
    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, ForwardTrace)> {
        if x.len() != self.arch.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.arch.input_dim(),
                actual: x.len(),
            });
        }
        let depth = self.arch.depth();
        let mut pre = Vec::with_capacity(depth);
        let mut act = Vec::with_capacity(depth + 1);
        act.push(x.to_vec());
        for l in 0..depth {
            let mut h = self.weights[l].matvec(&act[l]);
            if let Some(b) = self.biases.get(l) {
                h.iter_mut().zip(b).for_each(|(h, b)| *h += b);
            }
            let a = if l + 1 == depth {
                h.clone()
            } else {
                h.iter().map(|&z| self.arch.activation.value(z)).collect()
            };
            pre.push(h);
            act.push(a);
        }
        let logits = act[depth].clone();
        Ok((logits, ForwardTrace { pre, act }))
    }

    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.forward(x).map(|(z, _)| z)
    }

    pub fn to_checkpoint(&self) -> ModelCheckpoint {
        ModelCheckpoint {
            format_version: CHECKPOINT_FORMAT_VERSION,
            arch: self.arch.clone(),
            weights: self.weights.iter().map(DenseMatrix::to_rows).collect(),
            biases: if self.arch.bias {
                Some(self.biases.clone())
            } else {
                None
            },
        }
    }

    pub fn from_checkpoint(ckpt: &ModelCheckpoint) -> Result<Self> {
        if ckpt.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Unsupported(format!(
                "checkpoint format_version {}",
                ckpt.format_version
            )));
        }
        let weights = ckpt
            .weights
            .iter()
            .map(|rows| DenseMatrix::from_rows(rows))
            .collect::<Result<Vec<_>>>()?;
        Self::from_layers(&ckpt.arch, weights, ckpt.biases.clone().unwrap_or_default())
    }
}

/// Pre-activations `h⁽¹⁾..h⁽ᴸ⁾` and activations `a⁽⁰⁾..a⁽ᴸ⁾` of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub pre: Vec<Vec<f64>>,
    pub act: Vec<Vec<f64>>,
}

/// On-disk model document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelCheckpoint {
    pub format_version: u32,
    pub arch: MlpArchitecture,
    /// `weights[layer][row][col]`
    pub weights: Vec<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub biases: Option<Vec<Vec<f64>>>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn arch(dims: &[usize], act: Activation) -> MlpArchitecture {
        MlpArchitecture::new(dims.to_vec(), act).unwrap()
    }

    #[test]
    fn param_count_and_layout() {
        let a = arch(&[4, 8, 3], Activation::Relu);
        assert_eq!(a.param_count(), 56);
        assert_eq!(a.layer_offsets(), vec![0, 32]);
        let b = a.clone().with_bias(true);
        assert_eq!(b.param_count(), 56 + 8 + 3);
        assert_eq!(b.layer_offsets(), vec![0, 40]);
    }

    #[test]
    fn zero_model_flattens_to_zeros() {
        let a = arch(&[4, 8, 3], Activation::Tanh);
        let m = MlpModel::zeros(&a);
        assert_eq!(m.flatten(), ParamVector::zeros(56));
        let (z, _) = m.forward(&[1.0, -2.0, 0.5, 3.0]).unwrap();
        assert_eq!(z, vec![0.0; 3]);
    }

    #[test]
    fn flatten_round_trip_is_exact() {
        let a = arch(&[3, 5, 4, 2], Activation::Sigmoid).with_bias(true);
        let mut m = MlpModel::random(&a, 7, 1.3);
        m.biases[1][2] = 0.25;
        let back = MlpModel::unflatten(&a, &m.flatten()).unwrap();
        assert_eq!(back, m);
        assert!(MlpModel::unflatten(&a, &ParamVector::zeros(3)).is_err());
    }

    #[test]
    fn identity_single_layer() {
        let a = arch(&[2, 2], Activation::Relu);
        let m = MlpModel::from_layers(&a, vec![DenseMatrix::identity(2)], vec![]).unwrap();
        assert_eq!(m.logits(&[1.0, 2.0]).unwrap(), vec![1.0, 2.0]);
        assert!(matches!(
            m.logits(&[1.0]),
            Err(Error::DimensionMismatch { expected: 2, actual: 1 })
        ));
    }

    #[test]
    fn activation_values() {
        assert_eq!(Activation::Relu.eval(-1.0), (0.0, 0.0, 0.0));
        assert_eq!(Activation::Relu.eval(0.0), (0.0, 0.0, 0.0));
        assert_eq!(Activation::Sigmoid.eval(0.0), (0.5, 0.25, 0.0));
        for i in -200..=200 {
            let z = i as f64 * 0.05;
            let (t, d1, d2) = Activation::Tanh.eval(z);
            assert_relative_eq!(d2, -2.0 * t * d1, epsilon = 1e-12);
        }
    }

    #[test]
    fn derivative_bounds_hold_on_grid() {
        for act in [
            Activation::Relu,
            Activation::Sigmoid,
            Activation::Tanh,
            Activation::Identity,
        ] {
            let mut max1: f64 = 0.0;
            let mut max2: f64 = 0.0;
            for i in 0..=200_000 {
                let z = -50.0 + i as f64 * 5e-4;
                let (_, d1, d2) = act.eval(z);
                max1 = max1.max(d1.abs());
                max2 = max2.max(d2.abs());
            }
            assert!(max1 <= act.beta() + 1e-15, "{act:?} beta");
            assert!(max2 <= act.gamma() + 1e-15, "{act:?} gamma");
        }
        // the sup is attained (to grid resolution) for the smooth activations
        let (_, _, d2) = Activation::Tanh.eval((1.0f64 / 3.0).sqrt().atanh());
        assert_relative_eq!(d2.abs(), Activation::Tanh.gamma(), max_relative = 1e-12);
    }

    #[test]
    fn trace_is_consistent() {
        let a = arch(&[3, 6, 5, 2], Activation::Tanh);
        let m = MlpModel::random(&a, 11, 1.0);
        let (z, trace) = m.forward(&[0.3, -0.7, 1.1]).unwrap();
        assert_eq!(trace.act.len(), 4);
        assert_eq!(trace.pre.len(), 3);
        for l in 0..2 {
            let recomputed: Vec<f64> = trace.pre[l].iter().map(|&h| h.tanh()).collect();
            assert_eq!(recomputed, trace.act[l + 1]);
        }
        assert_eq!(trace.act[3], z);
        assert_eq!(trace.pre[2], z);
    }

    #[test]
    fn checkpoint_round_trip() {
        let a = arch(&[3, 4, 2], Activation::Relu);
        let m = MlpModel::random(&a, 3, 1.0);
        let json = serde_json::to_string(&m.to_checkpoint()).unwrap();
        let ckpt: ModelCheckpoint = serde_json::from_str(&json).unwrap();
        assert_eq!(MlpModel::from_checkpoint(&ckpt).unwrap(), m);
        assert!(json.contains("\"format_version\":1"));
        assert!(json.contains("\"dims\":[3,4,2]"));
    }
}
