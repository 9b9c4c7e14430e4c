//! Minimal differentiable function-approximator core.
//!
//! Fixed-topology feedforward networks over `f64`, with a cached-activation
//! tape for exact backpropagation, plain SGD updates, and hard target-network
//! synchronization. This is the substrate for every Q-network, embedding
//! table and mixing hypernetwork in the crate.
//!
//! Forward is pure; training mutates a network from a single writer.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Element-wise activation applied after the affine map of a layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
    /// |z| — used by QMix hyper-heads to keep mixing weights non-negative.
    Abs,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
            Activation::Identity => z,
            Activation::Abs => z.abs(),
        }
    }

    /// Derivative with respect to the pre-activation `z`.
    fn deriv(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
            Activation::Identity => 1.0,
            // Subgradient 0 at the kink.
            Activation::Abs => {
                if z > 0.0 {
                    1.0
                } else if z < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// One dense layer: `y = act(W x + b)`, weights row-major `(out, in)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Layer {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub activation: Activation,
    /// When false the bias stays pinned at zero (pure linear map); used for
    /// tabular-equivalent Q tables over one-hot states.
    #[serde(default = "default_bias_active")]
    pub bias_active: bool,
}

fn default_bias_active() -> bool {
    true
}

impl Layer {
    pub fn zeros(in_dim: usize, out_dim: usize, activation: Activation) -> Self {
        Layer {
            in_dim,
            out_dim,
            weights: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
            activation,
            bias_active: true,
        }
    }

    /// Pure linear map with no bias term.
    pub fn linear_no_bias(in_dim: usize, out_dim: usize) -> Self {
        let mut l = Layer::zeros(in_dim, out_dim, Activation::Identity);
        l.bias_active = false;
        l
    }
}

/// A fixed-topology feedforward network.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Approximator {
    layers: Vec<Layer>,
}

impl Approximator {
    /// Build from explicit layers, checking width compatibility.
    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Contract("network needs at least one layer".into()));
        }
        for w in layers.windows(2) {
            if w[0].out_dim != w[1].in_dim {
                return Err(Error::Dimension(format!(
                    "layer widths incompatible: {} -> {}",
                    w[0].out_dim, w[1].in_dim
                )));
            }
        }
        for l in &layers {
            if l.weights.len() != l.in_dim * l.out_dim || l.bias.len() != l.out_dim {
                return Err(Error::Dimension("layer parameter shapes inconsistent".into()));
            }
        }
        Ok(Approximator { layers })
    }

    /// Seeded init: weights and biases uniform in ±1/√fan_in; `dims` gives
    /// layer widths `[in, h1, ..., out]`, hidden layers use `hidden_act`,
    /// the last layer `out_act`.
    pub fn seeded<R: Rng>(
        dims: &[usize],
        hidden_act: Activation,
        out_act: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::Contract("need at least input and output widths".into()));
        }
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for i in 0..dims.len() - 1 {
            let (fan_in, fan_out) = (dims[i], dims[i + 1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            let act = if i == dims.len() - 2 { out_act } else { hidden_act };
            let mut l = Layer::zeros(fan_in, fan_out, act);
            for w in l.weights.iter_mut() {
                *w = rng.gen_range(-bound..bound);
            }
            for b in l.bias.iter_mut() {
                *b = rng.gen_range(-bound..bound);
            }
            layers.push(l);
        }
        Approximator::from_layers(layers)
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    fn shape_id(&self) -> Vec<(usize, usize)> {
        self.layers.iter().map(|l| (l.in_dim, l.out_dim)).collect()
    }

    /// Pure forward pass.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let mut cur = x.to_vec();
        for l in &self.layers {
            cur = affine_act(l, &cur).0;
        }
        Ok(cur)
    }

    /// Forward pass that caches per-layer inputs and pre-activations in the
    /// tape (accumulated gradients are preserved).
    pub fn forward_taped(&self, x: &[f64], tape: &mut GradientTape) -> Result<Vec<f64>> {
        self.check_input(x)?;
        tape.check(self)?;
        tape.layer_inputs.clear();
        tape.pre_acts.clear();
        let mut cur = x.to_vec();
        for l in &self.layers {
            tape.layer_inputs.push(cur.clone());
            let (out, pre) = affine_act(l, &cur);
            tape.pre_acts.push(pre);
            cur = out;
        }
        Ok(cur)
    }

    /// Backpropagate `loss_grad` (∂loss/∂output) through the cached pass,
    /// accumulating parameter gradients into the tape. Returns ∂loss/∂input.
    pub fn backward(&self, tape: &mut GradientTape, loss_grad: &[f64]) -> Result<Vec<f64>> {
        tape.check(self)?;
        if tape.layer_inputs.len() != self.layers.len() {
            return Err(Error::Contract("tape has no cached forward pass for this net".into()));
        }
        if loss_grad.len() != self.output_dim() {
            return Err(Error::Dimension(format!(
                "loss grad width {} != output width {}",
                loss_grad.len(),
                self.output_dim()
            )));
        }
        let mut upstream = loss_grad.to_vec();
        for (li, l) in self.layers.iter().enumerate().rev() {
            let pre = &tape.pre_acts[li];
            let input = &tape.layer_inputs[li];
            // dL/dz = dL/dy * act'(z)
            let dz: Vec<f64> = upstream
                .iter()
                .zip(pre.iter())
                .map(|(g, &z)| g * l.activation.deriv(z))
                .collect();
            let wg = &mut tape.w_grads[li];
            let bg = &mut tape.b_grads[li];
            for o in 0..l.out_dim {
                if l.bias_active {
                    bg[o] += dz[o];
                }
                let row = &mut wg[o * l.in_dim..(o + 1) * l.in_dim];
                for (i, r) in row.iter_mut().enumerate() {
                    *r += dz[o] * input[i];
                }
            }
            let mut down = vec![0.0; l.in_dim];
            for o in 0..l.out_dim {
                let row = &l.weights[o * l.in_dim..(o + 1) * l.in_dim];
                for i in 0..l.in_dim {
                    down[i] += dz[o] * row[i];
                }
            }
            upstream = down;
        }
        Ok(upstream)
    }

    /// θ ← θ − lr · grad, elementwise over the tape's accumulators.
    pub fn sgd_step(&mut self, tape: &GradientTape, lr: f64) -> Result<()> {
        if lr <= 0.0 {
            return Err(Error::Contract(format!("learning rate must be > 0, got {lr}")));
        }
        tape.check(self)?;
        for (li, l) in self.layers.iter_mut().enumerate() {
            for (w, g) in l.weights.iter_mut().zip(tape.w_grads[li].iter()) {
                if !g.is_finite() {
                    return Err(Error::Numeric(format!("non-finite gradient at layer {li} weights")));
                }
                *w -= lr * g;
            }
            for (b, g) in l.bias.iter_mut().zip(tape.b_grads[li].iter()) {
                if !g.is_finite() {
                    return Err(Error::Numeric(format!("non-finite gradient at layer {li} bias")));
                }
                *b -= lr * g;
            }
        }
        Ok(())
    }

    /// Hard target sync: copy all parameters of `src` into `self`.
    pub fn copy_from(&mut self, src: &Approximator) -> Result<()> {
        if self.shape_id() != src.shape_id() {
            return Err(Error::Contract("soft_copy: topology mismatch".into()));
        }
        for (d, s) in self.layers.iter_mut().zip(src.layers.iter()) {
            d.weights.copy_from_slice(&s.weights);
            d.bias.copy_from_slice(&s.bias);
            d.activation = s.activation;
            d.bias_active = s.bias_active;
        }
        Ok(())
    }

    /// Number of scalar parameters (weights then biases, per layer).
    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    /// Flat parameter access in the canonical order used by persistence:
    /// per layer, weights (row-major) then biases.
    pub fn param(&self, idx: usize) -> f64 {
        let mut i = idx;
        for l in &self.layers {
            if i < l.weights.len() {
                return l.weights[i];
            }
            i -= l.weights.len();
            if i < l.bias.len() {
                return l.bias[i];
            }
            i -= l.bias.len();
        }
        panic!("parameter index {idx} out of range");
    }

    pub fn set_param(&mut self, idx: usize, v: f64) {
        let mut i = idx;
        for l in &mut self.layers {
            if i < l.weights.len() {
                l.weights[i] = v;
                return;
            }
            i -= l.weights.len();
            if i < l.bias.len() {
                l.bias[i] = v;
                return;
            }
            i -= l.bias.len();
        }
        panic!("parameter index {idx} out of range");
    }

    /// Flat gradient read-out from a tape, same ordering as [`param`](Self::param).
    pub fn flat_grads(&self, tape: &GradientTape) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for li in 0..self.layers.len() {
            out.extend_from_slice(&tape.w_grads[li]);
            out.extend_from_slice(&tape.b_grads[li]);
        }
        out
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::Dimension(format!(
                "input width {} != declared {}",
                x.len(),
                self.input_dim()
            )));
        }
        Ok(())
    }
}

fn affine_act(l: &Layer, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut pre = l.bias.clone();
    for o in 0..l.out_dim {
        let row = &l.weights[o * l.in_dim..(o + 1) * l.in_dim];
        let mut acc = 0.0;
        for i in 0..l.in_dim {
            acc += row[i] * x[i];
        }
        pre[o] += acc;
    }
    let out = pre.iter().map(|&z| l.activation.apply(z)).collect();
    (out, pre)
}

/// Cached activations from one forward pass plus per-parameter gradient
/// accumulators. A fresh tape has all-zero accumulators.
#[derive(Debug, Clone)]
pub struct GradientTape {
    shape: Vec<(usize, usize)>,
    layer_inputs: Vec<Vec<f64>>,
    pre_acts: Vec<Vec<f64>>,
    w_grads: Vec<Vec<f64>>,
    b_grads: Vec<Vec<f64>>,
}

impl GradientTape {
    pub fn new(net: &Approximator) -> Self {
        GradientTape {
            shape: net.shape_id(),
            layer_inputs: Vec::new(),
            pre_acts: Vec::new(),
            w_grads: net.layers.iter().map(|l| vec![0.0; l.weights.len()]).collect(),
            b_grads: net.layers.iter().map(|l| vec![0.0; l.bias.len()]).collect(),
        }
    }

    /// Zero the accumulators and drop the cached pass.
    pub fn reset(&mut self) {
        self.layer_inputs.clear();
        self.pre_acts.clear();
        for g in self.w_grads.iter_mut().chain(self.b_grads.iter_mut()) {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Scale all accumulators (e.g. 1/batch for averaged minibatch grads).
    pub fn scale(&mut self, factor: f64) {
        for g in self.w_grads.iter_mut().chain(self.b_grads.iter_mut()) {
            g.iter_mut().for_each(|v| *v *= factor);
        }
    }

    fn check(&self, net: &Approximator) -> Result<()> {
        if self.shape != net.shape_id() {
            return Err(Error::Contract("tape does not match network topology".into()));
        }
        Ok(())
    }
}
