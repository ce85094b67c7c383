//! Dense MLP core: parameter vectors, batch loss, backpropagated gradients,
//! SGD trajectories and a finite-difference MAML gradient oracle.
//!
//! Parameters are stored flat, layer by layer. Each layer holds its weight
//! matrix row-major with shape `(fan_out, fan_in)` followed by its bias of
//! length `fan_out`. Hidden layers apply the spec's activation; the last
//! layer is linear and feeds the loss.
//!
//! Gradients are always the raw `∇L`. The client step size is applied where
//! an update is formed (`θ - β·∇L`), never folded into the stored gradient.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Identity => z,
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
    #[inline]
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Identity => "identity",
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "identity" => Some(Activation::Identity),
            "relu" => Some(Activation::Relu),
            "tanh" => Some(Activation::Tanh),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    SoftmaxCrossEntropy,
    /// `½‖output − onehot(label)‖²`, averaged over the batch.
    Quadratic,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::SoftmaxCrossEntropy => "softmax_cross_entropy",
            LossKind::Quadratic => "quadratic",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "softmax_cross_entropy" => Some(LossKind::SoftmaxCrossEntropy),
            "quadratic" => Some(LossKind::Quadratic),
            _ => None,
        }
    }
}

/// Architecture of a dense feed-forward classifier.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelSpec {
    input_dim: usize,
    layer_dims: Vec<usize>,
    activation: Activation,
    loss: LossKind,
}

impl ModelSpec {
    pub fn new(input_dim: usize, layer_dims: Vec<usize>, activation: Activation, loss: LossKind) -> Result<Self> {
        if input_dim == 0 {
            return Err(Error::contract("input_dim must be positive"));
        }
        if layer_dims.is_empty() || layer_dims.contains(&0) {
            return Err(Error::contract("layer_dims must be a non-empty list of positive sizes"));
        }
        if loss == LossKind::Quadratic && (activation != Activation::Identity || layer_dims.len() != 1) {
            return Err(Error::contract(
                "quadratic loss requires identity activation and a single layer",
            ));
        }
        Ok(Self {
            input_dim,
            layer_dims,
            activation,
            loss,
        })
    }

    /// Single-layer linear model with squared-error loss; its loss is an exact
    /// quadratic in the parameters.
    pub fn quadratic(input_dim: usize, outputs: usize) -> Result<Self> {
        Self::new(input_dim, vec![outputs], Activation::Identity, LossKind::Quadratic)
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn loss(&self) -> LossKind {
        self.loss
    }

    pub fn num_classes(&self) -> usize {
        *self.layer_dims.last().expect("validated non-empty")
    }

    /// `(fan_in, fan_out, offset)` for every layer.
    fn layers(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        let mut fan_in = self.input_dim;
        let mut offset = 0;
        self.layer_dims.iter().map(move |&fan_out| {
            let item = (fan_in, fan_out, offset);
            offset += (fan_in + 1) * fan_out;
            fan_in = fan_out;
            item
        })
    }

    pub fn param_count(&self) -> usize {
        self.layers().map(|(i, o, _)| (i + 1) * o).sum()
    }

    /// Uniform Glorot weights, zero biases.
    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamVector {
        let mut values = vec![0.0; self.param_count()];
        for (fan_in, fan_out, offset) in self.layers() {
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for w in &mut values[offset..offset + fan_in * fan_out] {
                *w = rng.random_range(-limit..=limit);
            }
        }
        ParamVector(values)
    }

    pub fn zeros(&self) -> ParamVector {
        ParamVector(vec![0.0; self.param_count()])
    }

    fn check_params(&self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::contract(format!(
                "parameter vector has {} entries, model expects {}",
                params.len(),
                self.param_count()
            )));
        }
        Ok(())
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        if batch.is_empty() {
            return Err(Error::contract("batch is empty"));
        }
        let classes = self.num_classes();
        for ex in &batch.examples {
            if ex.features.len() != self.input_dim {
                return Err(Error::contract(format!(
                    "example has {} features, model expects {}",
                    ex.features.len(),
                    self.input_dim
                )));
            }
            if ex.label >= classes {
                return Err(Error::contract(format!(
                    "label {} out of range for {classes} classes",
                    ex.label
                )));
            }
        }
        Ok(())
    }
}

/// Flat model parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn new(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    /// `self + scale * direction`.
    pub fn axpy(&self, scale: f64, direction: &[f64]) -> ParamVector {
        debug_assert_eq!(self.0.len(), direction.len());
        ParamVector(self.0.iter().zip(direction).map(|(p, d)| p + scale * d).collect())
    }

    /// `self - other`, elementwise.
    pub fn delta_from(&self, other: &ParamVector) -> Vec<f64> {
        self.0.iter().zip(&other.0).map(|(a, b)| a - b).collect()
    }
}

/// Raw loss gradient `∇L` with respect to a [`ParamVector`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Gradient(Vec<f64>);

impl Gradient {
    pub fn new(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        norm(&self.0)
    }
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub features: Vec<f64>,
    pub label: usize,
}

impl Example {
    pub fn new(features: Vec<f64>, label: usize) -> Self {
        Self { features, label }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Batch {
    examples: Vec<Example>,
}

impl Batch {
    pub fn new(examples: Vec<Example>) -> Self {
        Self { examples }
    }

    pub fn examples(&self) -> &[Example] {
        &self.examples
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Concatenation of several batches; the mean loss over the result equals
    /// the example-weighted mean of the parts.
    pub fn union<'a>(batches: impl IntoIterator<Item = &'a Batch>) -> Batch {
        Batch {
            examples: batches.into_iter().flat_map(|b| b.examples.iter().cloned()).collect(),
        }
    }
}

/// Per-example forward pass that keeps what backprop needs.
struct Tape {
    /// Layer inputs: `inputs[l]` feeds layer `l`.
    inputs: Vec<Vec<f64>>,
    /// Pre-activations of every layer; the last one is the logits/output.
    pre: Vec<Vec<f64>>,
}

fn forward_tape(spec: &ModelSpec, params: &[f64], x: &[f64]) -> Tape {
    let n_layers = spec.layer_dims.len();
    let mut inputs = Vec::with_capacity(n_layers);
    let mut pre = Vec::with_capacity(n_layers);
    let mut current = x.to_vec();
    for (l, (fan_in, fan_out, offset)) in spec.layers().enumerate() {
        let weights = &params[offset..offset + fan_in * fan_out];
        let bias = &params[offset + fan_in * fan_out..offset + (fan_in + 1) * fan_out];
        let z: Vec<f64> = (0..fan_out)
            .map(|o| {
                let row = &weights[o * fan_in..(o + 1) * fan_in];
                row.iter().zip(&current).map(|(w, a)| w * a).sum::<f64>() + bias[o]
            })
            .collect();
        let next = if l + 1 < n_layers {
            z.iter().map(|&v| spec.activation.apply(v)).collect()
        } else {
            Vec::new()
        };
        inputs.push(std::mem::replace(&mut current, next));
        pre.push(z);
    }
    Tape { inputs, pre }
}

fn logits(spec: &ModelSpec, params: &[f64], x: &[f64]) -> Vec<f64> {
    forward_tape(spec, params, x).pre.pop().expect("at least one layer")
}

/// Loss of one example and its derivative with respect to the output layer.
fn output_loss(loss: LossKind, out: &[f64], label: usize) -> (f64, Vec<f64>) {
    match loss {
        LossKind::SoftmaxCrossEntropy => {
            let max = out.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = out.iter().map(|z| (z - max).exp()).sum();
            let lse = max + sum.ln();
            let d = out
                .iter()
                .enumerate()
                .map(|(c, z)| (z - lse).exp() - if c == label { 1.0 } else { 0.0 })
                .collect();
            (lse - out[label], d)
        }
        LossKind::Quadratic => {
            let d: Vec<f64> = out
                .iter()
                .enumerate()
                .map(|(c, z)| z - if c == label { 1.0 } else { 0.0 })
                .collect();
            (0.5 * d.iter().map(|v| v * v).sum::<f64>(), d)
        }
    }
}

/// Mean loss of `params` over `batch`.
pub fn forward_loss(spec: &ModelSpec, params: &ParamVector, batch: &Batch) -> Result<f64> {
    spec.check_params(params.as_slice())?;
    spec.check_batch(batch)?;
    let total: f64 = batch
        .examples
        .iter()
        .map(|ex| output_loss(spec.loss, &logits(spec, params.as_slice(), &ex.features), ex.label).0)
        .sum();
    let mean = total / batch.len() as f64;
    if !mean.is_finite() {
        return Err(Error::Numeric(format!("loss evaluated to {mean}")));
    }
    Ok(mean)
}

/// Exact gradient of [`forward_loss`] by backpropagation.
pub fn gradient(spec: &ModelSpec, params: &ParamVector, batch: &Batch) -> Result<Gradient> {
    spec.check_params(params.as_slice())?;
    spec.check_batch(batch)?;
    let p = params.as_slice();
    let mut grad = vec![0.0; p.len()];
    let scale = 1.0 / batch.len() as f64;
    let layers: Vec<_> = spec.layers().collect();

    for ex in &batch.examples {
        let tape = forward_tape(spec, p, &ex.features);
        let (_, d_out) = output_loss(spec.loss, tape.pre.last().expect("non-empty"), ex.label);
        let mut delta: Vec<f64> = d_out.into_iter().map(|d| d * scale).collect();

        for l in (0..layers.len()).rev() {
            let (fan_in, fan_out, offset) = layers[l];
            let input = &tape.inputs[l];
            {
                let (gw, gb) = grad[offset..offset + (fan_in + 1) * fan_out].split_at_mut(fan_in * fan_out);
                for o in 0..fan_out {
                    let d = delta[o];
                    if d == 0.0 {
                        continue;
                    }
                    for (g, a) in gw[o * fan_in..(o + 1) * fan_in].iter_mut().zip(input) {
                        *g += d * a;
                    }
                    gb[o] += d;
                }
            }
            if l > 0 {
                let weights = &p[offset..offset + fan_in * fan_out];
                let z_prev = &tape.pre[l - 1];
                let mut prev = vec![0.0; fan_in];
                for o in 0..fan_out {
                    let d = delta[o];
                    for (acc, w) in prev.iter_mut().zip(&weights[o * fan_in..(o + 1) * fan_in]) {
                        *acc += w * d;
                    }
                }
                for (i, v) in prev.iter_mut().enumerate() {
                    *v *= spec.activation.derivative(z_prev[i], input[i]);
                }
                delta = prev;
            }
        }
    }

    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::Numeric("gradient has non-finite entries".into()));
    }
    Ok(Gradient(grad))
}

/// Sequential SGD over `batches`: `θ_j = θ_{j-1} − β·∇L(θ_{j-1}, b_j)`.
///
/// Returns the final iterate and the raw gradients in step order.
pub fn sgd_trajectory(
    spec: &ModelSpec,
    params: &ParamVector,
    batches: &[Batch],
    beta: f64,
) -> Result<(ParamVector, Vec<Gradient>)> {
    if !(beta >= 0.0 && beta.is_finite()) {
        return Err(Error::contract(format!(
            "step size must be finite and non-negative, got {beta}"
        )));
    }
    spec.check_params(params.as_slice())?;
    let mut current = params.clone();
    let mut grads = Vec::with_capacity(batches.len());
    for (step, batch) in batches.iter().enumerate() {
        let g = match gradient(spec, &current, batch) {
            Ok(g) => g,
            Err(Error::Numeric(_)) => {
                return Err(Error::Divergence {
                    step: step + 1,
                    client: None,
                })
            }
            Err(e) => return Err(e),
        };
        current = current.axpy(-beta, g.as_slice());
        if !current.is_finite() {
            return Err(Error::Divergence {
                step: step + 1,
                client: None,
            });
        }
        grads.push(g);
    }
    Ok((current, grads))
}

/// Largest parameter count accepted by [`maml_gradient_oracle`].
pub const MAML_ORACLE_MAX_DIM: usize = 2000;

/// Central finite-difference estimate of `∂/∂θ L(U_K(θ), eval)` where `U_K`
/// replays [`sgd_trajectory`] over `batches`.
///
/// `eval_batch` defaults to the union of the inner batches. With no inner
/// batches this reduces to a finite-difference gradient of the plain loss.
pub fn maml_gradient_oracle(
    spec: &ModelSpec,
    params: &ParamVector,
    batches: &[Batch],
    eval_batch: Option<&Batch>,
    beta: f64,
    fd_step: f64,
) -> Result<Gradient> {
    let dim = spec.param_count();
    if dim > MAML_ORACLE_MAX_DIM {
        return Err(Error::Capacity {
            dim,
            cap: MAML_ORACLE_MAX_DIM,
        });
    }
    if !(fd_step > 0.0 && fd_step.is_finite()) {
        return Err(Error::contract("finite-difference step must be positive"));
    }
    spec.check_params(params.as_slice())?;
    let default_eval;
    let eval = match eval_batch {
        Some(b) => b,
        None => {
            if batches.is_empty() {
                return Err(Error::contract("no inner batches and no evaluation batch"));
            }
            default_eval = Batch::union(batches);
            &default_eval
        }
    };

    let objective = |theta: &ParamVector| -> Result<f64> {
        let (adapted, _) = sgd_trajectory(spec, theta, batches, beta)?;
        forward_loss(spec, &adapted, eval)
    };

    let mut probe = params.clone();
    let mut out = Vec::with_capacity(dim);
    for i in 0..dim {
        let orig = probe.as_slice()[i];
        probe.as_mut_slice()[i] = orig + fd_step;
        let plus = objective(&probe)?;
        probe.as_mut_slice()[i] = orig - fd_step;
        let minus = objective(&probe)?;
        probe.as_mut_slice()[i] = orig;
        out.push((plus - minus) / (2.0 * fd_step));
    }
    Ok(Gradient(out))
}

/// Index of the largest logit, ties broken toward the lowest class.
pub fn predict(spec: &ModelSpec, params: &ParamVector, features: &[f64]) -> usize {
    let out = logits(spec, params.as_slice(), features);
    let mut best = 0;
    for (c, &v) in out.iter().enumerate().skip(1) {
        if v > out[best] {
            best = c;
        }
    }
    best
}
