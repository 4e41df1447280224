//! Dense masked layers with exact backpropagation and Adam.
//!
//! A [`Network`] is a stack of [`MaskedLayer`]s. Every layer optionally also
//! reads an auxiliary input block (appended after the previous layer's
//! output); the model uses it to wire the conditioning-presence bits into
//! every layer.

use ndarray::{s, concatenate, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NnError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("non-finite value produced in {0}")]
    NonFinite(&'static str),
    #[error("forward cache does not belong to this network: {0}")]
    StaleCache(String),
    #[error("invalid argument: {0}")]
    Argument(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Elu,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Elu => {
                if x > 0.0 {
                    x
                } else {
                    x.exp_m1()
                }
            }
            Activation::Identity => x,
        }
    }

    /// Derivative given the pre-activation `z`.
    #[inline]
    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Elu => {
                if z > 0.0 {
                    1.0
                } else {
                    z.exp()
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// `activation((weights ⊙ mask) · x + bias)`. Weights are stored `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedLayer {
    pub weights: Array2<f64>,
    pub mask: Array2<f64>,
    pub bias: Array1<f64>,
    pub activation: Activation,
}

impl MaskedLayer {
    pub fn new(weights: Array2<f64>, mask: Array2<f64>, bias: Array1<f64>, activation: Activation) -> Result<Self, NnError> {
        if weights.dim() != mask.dim() {
            return Err(NnError::Dimension(format!(
                "weights {:?} vs mask {:?}",
                weights.dim(),
                mask.dim()
            )));
        }
        if bias.len() != weights.nrows() {
            return Err(NnError::Dimension(format!(
                "bias {} vs {} outputs",
                bias.len(),
                weights.nrows()
            )));
        }
        if mask.iter().any(|&m| m != 0.0 && m != 1.0) {
            return Err(NnError::Argument("mask entries must be 0 or 1".into()));
        }
        Ok(Self {
            weights,
            mask,
            bias,
            activation,
        })
    }

    /// Glorot-uniform weights (drawn before masking), zero biases, all-ones mask.
    pub fn glorot<R: Rng + ?Sized>(inputs: usize, outputs: usize, activation: Activation, rng: &mut R) -> Self {
        let limit = (6.0 / (inputs + outputs) as f64).sqrt();
        let weights = Array2::from_shape_fn((outputs, inputs), |_| rng.random_range(-limit..=limit));
        Self {
            weights,
            mask: Array2::ones((outputs, inputs)),
            bias: Array1::zeros(outputs),
            activation,
        }
    }

    pub fn inputs(&self) -> usize {
        self.weights.ncols()
    }

    pub fn outputs(&self) -> usize {
        self.weights.nrows()
    }

    pub fn effective_weights(&self) -> Array2<f64> {
        &self.weights * &self.mask
    }

    pub fn forward(&self, input: ArrayView1<f64>) -> Result<Array1<f64>, NnError> {
        if input.len() != self.inputs() {
            return Err(NnError::Dimension(format!(
                "input length {} vs layer width {}",
                input.len(),
                self.inputs()
            )));
        }
        let z = self.effective_weights().dot(&input) + &self.bias;
        let out = z.mapv(|v| self.activation.apply(v));
        ensure_finite(out.iter(), "layer_forward")?;
        Ok(out)
    }

    fn pre_activation(&self, input: ArrayView2<f64>, effective: &Array2<f64>) -> Array2<f64> {
        input.dot(&effective.t()) + &self.bias
    }
}

fn ensure_finite<'a>(mut values: impl Iterator<Item = &'a f64>, what: &'static str) -> Result<(), NnError> {
    if values.all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(NnError::NonFinite(what))
    }
}

/// Per-batch activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Input seen by each layer (previous output concatenated with aux).
    layer_inputs: Vec<Array2<f64>>,
    pre_activations: Vec<Array2<f64>>,
    /// Masks and masked weights used in the pass, reused by backward.
    masks: Vec<Array2<f64>>,
    effective: Vec<Array2<f64>>,
    output: Array2<f64>,
    aux_width: usize,
}

impl ForwardCache {
    pub fn output(&self) -> &Array2<f64> {
        &self.output
    }
}

#[derive(Debug, Clone)]
pub struct Gradients {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
    pub input: Array2<f64>,
    pub aux: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub layers: Vec<MaskedLayer>,
    aux_width: usize,
}

impl Network {
    /// Every layer's width must be `previous outputs + aux_width`.
    pub fn new(layers: Vec<MaskedLayer>, aux_width: usize) -> Result<Self, NnError> {
        if layers.is_empty() {
            return Err(NnError::Argument("network needs at least one layer".into()));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[1].inputs() != pair[0].outputs() + aux_width {
                return Err(NnError::Dimension(format!(
                    "layer {} expects {} inputs, previous layer gives {} + aux {}",
                    i + 1,
                    pair[1].inputs(),
                    pair[0].outputs(),
                    aux_width
                )));
            }
        }
        if layers[0].inputs() < aux_width {
            return Err(NnError::Dimension("first layer narrower than aux block".into()));
        }
        Ok(Self { layers, aux_width })
    }

    pub fn aux_width(&self) -> usize {
        self.aux_width
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].inputs() - self.aux_width
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().map(|l| l.outputs()).unwrap_or(0)
    }

    /// Batched forward pass with each layer's own mask; rows of `input` and
    /// `aux` are examples.
    pub fn forward(&self, input: ArrayView2<f64>, aux: ArrayView2<f64>) -> Result<ForwardCache, NnError> {
        let masks: Vec<Array2<f64>> = self.layers.iter().map(|l| l.mask.clone()).collect();
        self.forward_with_masks(input, aux, masks)
    }

    /// Forward pass with externally supplied masks (one per layer, same
    /// shapes as the weights). The layers' own masks are ignored.
    pub fn forward_with_masks(
        &self,
        input: ArrayView2<f64>,
        aux: ArrayView2<f64>,
        masks: Vec<Array2<f64>>,
    ) -> Result<ForwardCache, NnError> {
        if masks.len() != self.layers.len() || masks.iter().zip(&self.layers).any(|(m, l)| m.dim() != l.weights.dim()) {
            return Err(NnError::Dimension("mask shapes do not match the layers".into()));
        }
        if input.ncols() != self.input_width() || aux.ncols() != self.aux_width || aux.nrows() != input.nrows() {
            return Err(NnError::Dimension(format!(
                "input {:?} / aux {:?} vs network widths {} / {}",
                input.dim(),
                aux.dim(),
                self.input_width(),
                self.aux_width
            )));
        }
        let mut layer_inputs = Vec::with_capacity(self.layers.len());
        let mut pre_activations = Vec::with_capacity(self.layers.len());
        let mut effective = Vec::with_capacity(self.layers.len());
        let mut current = input.to_owned();
        for (layer, mask) in self.layers.iter().zip(&masks) {
            let joined = if self.aux_width > 0 {
                concatenate(Axis(1), &[current.view(), aux]).expect("row counts checked")
            } else {
                current
            };
            let w = &layer.weights * mask;
            let z = layer.pre_activation(joined.view(), &w);
            current = z.mapv(|v| layer.activation.apply(v));
            layer_inputs.push(joined);
            pre_activations.push(z);
            effective.push(w);
        }
        ensure_finite(current.iter(), "network forward")?;
        Ok(ForwardCache {
            layer_inputs,
            pre_activations,
            masks,
            effective,
            output: current,
            aux_width: self.aux_width,
        })
    }

    /// Gradients of a scalar loss given `d_output = ∂loss/∂output`.
    /// Masked-out weight positions get exactly zero gradient.
    pub fn backward(&self, cache: &ForwardCache, d_output: ArrayView2<f64>) -> Result<Gradients, NnError> {
        if cache.layer_inputs.len() != self.layers.len() || cache.aux_width != self.aux_width {
            return Err(NnError::StaleCache(format!(
                "cache has {} layers, network has {}",
                cache.layer_inputs.len(),
                self.layers.len()
            )));
        }
        if d_output.dim() != cache.output.dim() {
            return Err(NnError::Dimension(format!(
                "upstream gradient {:?} vs output {:?}",
                d_output.dim(),
                cache.output.dim()
            )));
        }
        let n = self.layers.len();
        let rows = d_output.nrows();
        let mut weights = vec![Array2::zeros((0, 0)); n];
        let mut biases = vec![Array1::zeros(0); n];
        let mut d_aux = Array2::<f64>::zeros((rows, self.aux_width));
        let mut upstream = d_output.to_owned();
        for k in (0..n).rev() {
            let layer = &self.layers[k];
            let z = &cache.pre_activations[k];
            if z.dim() != upstream.dim() || cache.layer_inputs[k].ncols() != layer.inputs() {
                return Err(NnError::StaleCache(format!("layer {k} shape changed since forward")));
            }
            let mut dz = upstream;
            if layer.activation != Activation::Identity {
                dz.zip_mut_with(z, |g, &zv| *g *= layer.activation.derivative(zv));
            }
            let mut dw = dz.t().dot(&cache.layer_inputs[k]).as_standard_layout().into_owned();
            dw *= &cache.masks[k];
            biases[k] = dz.sum_axis(Axis(0));
            weights[k] = dw;
            let d_in = dz.dot(&cache.effective[k]);
            let prev_width = layer.inputs() - self.aux_width;
            if self.aux_width > 0 {
                d_aux += &d_in.slice(s![.., prev_width..]);
            }
            upstream = d_in.slice(s![.., ..prev_width]).to_owned();
        }
        ensure_finite(upstream.iter(), "backward")?;
        Ok(Gradients {
            weights,
            biases,
            input: upstream,
            aux: d_aux,
        })
    }
}

/// Adam moments for one parameter tensor (flattened).
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step_count: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(len: usize, lr: f64) -> Self {
        Self {
            first_moment: vec![0.0; len],
            second_moment: vec![0.0; len],
            step_count: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// One bias-corrected Adam update in place.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState) -> Result<(), NnError> {
    if params.len() != grads.len() || params.len() != state.first_moment.len() {
        return Err(NnError::Dimension(format!(
            "params {} / grads {} / state {}",
            params.len(),
            grads.len(),
            state.first_moment.len()
        )));
    }
    state.step_count += 1;
    let t = state.step_count as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    let (b1, b2, lr, eps) = (state.beta1, state.beta2, state.lr, state.epsilon);
    for (((p, &g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(state.first_moment.iter_mut())
        .zip(state.second_moment.iter_mut())
    {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Numerically stable log-softmax.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(logits);
    logits.iter().map(|v| v - lse).collect()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    log_softmax(logits).into_iter().map(f64::exp).collect()
}

pub fn erf(x: f64) -> f64 {
    libm::erf(x)
}

pub fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

pub fn std_normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// Inverse standard normal CDF: Acklam's rational approximation refined by
/// Halley steps against [`std_normal_cdf`].
pub fn std_normal_quantile(p: f64) -> Result<f64, NnError> {
    if !(p > 0.0 && p < 1.0) {
        return Err(NnError::Argument(format!("quantile probability {p} outside (0, 1)")));
    }
    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.38357751867269e+02,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    const P_LOW: f64 = 0.02425;
    let mut x = if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -(((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    };
    for _ in 0..2 {
        // Work on the smaller tail so the residual keeps relative precision.
        let e = if x < 0.0 {
            std_normal_cdf(x) - p
        } else {
            (1.0 - p) - std_normal_cdf(-x)
        };
        let u = e / std_normal_pdf(x);
        x -= u / (1.0 + 0.5 * x * u);
    }
    Ok(x)
}
