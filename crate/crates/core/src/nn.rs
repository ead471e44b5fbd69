//! Multi-layer perceptrons, timestep embeddings, and the parameter-set trait
//! shared by every learned component.

use rand::Rng;

use crate::error::{Result, UdacError};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Mish,
    Relu,
    Identity,
    Tanh,
}

impl Activation {
    pub fn apply(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::Mish => tape.mish(x),
            Activation::Relu => tape.relu(x),
            Activation::Identity => x,
            Activation::Tanh => tape.tanh(x),
        }
    }
}

/// Anything that owns a fixed, ordered list of parameter tensors.
pub trait Parameterized {
    fn params(&self) -> Vec<&Tensor>;
    fn params_mut(&mut self) -> Vec<&mut Tensor>;
    /// Names in the same order as [`Parameterized::params`].
    fn param_names(&self, prefix: &str) -> Vec<String>;

    fn num_params(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    fn named_params(&self, prefix: &str) -> Vec<(String, Tensor)> {
        self.param_names(prefix)
            .into_iter()
            .zip(self.params().into_iter().cloned())
            .collect()
    }

    /// Overwrite parameters from `(name, tensor)` records, checking shapes.
    fn load_named(&mut self, prefix: &str, records: &[(String, Tensor)]) -> Result<()> {
        let names = self.param_names(prefix);
        for (name, slot) in names.iter().zip(self.params_mut()) {
            let (_, t) = records
                .iter()
                .find(|(n, _)| n == name)
                .ok_or_else(|| UdacError::MissingParam(name.clone()))?;
            if t.shape() != slot.shape() {
                return Err(UdacError::Dimension(format!(
                    "{name}: checkpoint shape {:?}, model shape {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t.clone();
        }
        Ok(())
    }
}

/// Weights are stored `[in, out]` so a layer is `x W + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams {
    pub layer_weights: Vec<Tensor>,
    pub layer_biases: Vec<Tensor>,
    /// Applied after every layer but the last.
    pub activation: Activation,
    /// Applied after the last layer.
    pub output_activation: Activation,
}

impl MlpParams {
    /// `sizes = [in, h1, ..., out]`; weights and biases uniform in
    /// `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn init<R: Rng + ?Sized>(sizes: &[usize], activation: Activation, rng: &mut R) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs at least input and output sizes");
        let mut layer_weights = Vec::new();
        let mut layer_biases = Vec::new();
        for w in sizes.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            let wdata = (0..fan_in * fan_out).map(|_| rng.gen_range(-bound..=bound)).collect();
            let bdata = (0..fan_out).map(|_| rng.gen_range(-bound..=bound)).collect();
            layer_weights.push(Tensor::matrix(fan_in, fan_out, wdata));
            layer_biases.push(Tensor::matrix(1, fan_out, bdata));
        }
        Self {
            layer_weights,
            layer_biases,
            activation,
            output_activation: Activation::Identity,
        }
    }

    pub fn with_output_activation(mut self, act: Activation) -> Self {
        self.output_activation = act;
        self
    }

    /// Build from explicit layers, validating that adjacent shapes chain.
    pub fn from_layers(layer_weights: Vec<Tensor>, layer_biases: Vec<Tensor>, activation: Activation) -> Result<Self> {
        if layer_weights.is_empty() || layer_weights.len() != layer_biases.len() {
            return Err(UdacError::invalid(
                "need one bias per weight matrix and at least one layer",
            ));
        }
        for (k, (w, b)) in layer_weights.iter().zip(&layer_biases).enumerate() {
            if b.len() != w.cols() {
                return Err(UdacError::Dimension(format!(
                    "layer {k}: bias has {} entries, weight has {} outputs",
                    b.len(),
                    w.cols()
                )));
            }
            if let Some(next) = layer_weights.get(k + 1) {
                if next.rows() != w.cols() {
                    return Err(UdacError::Dimension(format!(
                        "layer {k} outputs {} features but layer {} expects {}",
                        w.cols(),
                        k + 1,
                        next.rows()
                    )));
                }
            }
        }
        Ok(Self {
            layer_weights,
            layer_biases,
            activation,
            output_activation: Activation::Identity,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.layer_weights[0].rows()
    }

    pub fn out_dim(&self) -> usize {
        self.layer_weights.last().map_or(0, Tensor::cols)
    }

    pub fn num_layers(&self) -> usize {
        self.layer_weights.len()
    }

    /// Put the parameters on `tape`. With `trainable = false` they are
    /// constants and receive no gradient.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundMlp {
        let mut vars = Vec::with_capacity(2 * self.num_layers());
        for (w, b) in self.layer_weights.iter().zip(&self.layer_biases) {
            for t in [w, b] {
                let v = if trainable {
                    tape.leaf(t.clone())
                } else {
                    tape.constant(t.clone())
                };
                vars.push(v);
            }
        }
        BoundMlp {
            vars,
            in_dim: self.in_dim(),
            activation: self.activation,
            output_activation: self.output_activation,
        }
    }

    /// Zero the final layer so the network outputs exactly zero.
    pub fn zero_last_layer(&mut self) {
        if let Some(w) = self.layer_weights.last_mut() {
            w.data_mut().fill(0.0);
        }
        if let Some(b) = self.layer_biases.last_mut() {
            b.data_mut().fill(0.0);
        }
    }
}

impl Parameterized for MlpParams {
    fn params(&self) -> Vec<&Tensor> {
        self.layer_weights
            .iter()
            .zip(&self.layer_biases)
            .flat_map(|(w, b)| [w, b])
            .collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layer_weights
            .iter_mut()
            .zip(self.layer_biases.iter_mut())
            .flat_map(|(w, b)| [w, b])
            .collect()
    }

    fn param_names(&self, prefix: &str) -> Vec<String> {
        (0..self.num_layers())
            .flat_map(|k| [format!("{prefix}layer{k}.weight"), format!("{prefix}layer{k}.bias")])
            .collect()
    }
}

/// An [`MlpParams`] whose tensors live on a tape.
#[derive(Clone, Debug)]
pub struct BoundMlp {
    /// `[w0, b0, w1, b1, ...]`, matching [`Parameterized::params`] order.
    pub vars: Vec<Var>,
    in_dim: usize,
    activation: Activation,
    output_activation: Activation,
}

impl BoundMlp {
    pub fn forward(&self, tape: &mut Tape, input: Var) -> Result<Var> {
        let cols = tape.value(input).cols();
        if cols != self.in_dim {
            return Err(UdacError::Shape {
                op: "forward_mlp (input features)",
                expected: vec![self.in_dim],
                actual: vec![cols],
            });
        }
        let layers = self.vars.len() / 2;
        let mut h = input;
        for k in 0..layers {
            let z = tape.matmul(h, self.vars[2 * k]);
            let z = tape.add_row(z, self.vars[2 * k + 1]);
            h = if k + 1 < layers {
                self.activation.apply(tape, z)
            } else {
                self.output_activation.apply(tape, z)
            };
        }
        Ok(h)
    }
}

/// Forward pass with the parameters bound as constants.
pub fn forward_mlp(tape: &mut Tape, params: &MlpParams, input: Var) -> Result<Var> {
    params.bind(tape, false).forward(tape, input)
}

/// Interleaved `[sin(i f_0), cos(i f_0), sin(i f_1), ...]` with frequencies
/// `f_k = 10000^(-k / (dim/2 - 1))`.
pub fn sinusoidal_embedding(step: usize, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || !dim.is_multiple_of(2) {
        return Err(UdacError::invalid(format!(
            "sinusoidal embedding dimension must be even and positive, got {dim}"
        )));
    }
    let half = dim / 2;
    let denom = (half.max(2) - 1) as f64;
    let mut out = Vec::with_capacity(dim);
    for k in 0..half {
        let freq = (-(10000f64.ln()) * k as f64 / denom).exp();
        let arg = step as f64 * freq;
        out.push(arg.sin());
        out.push(arg.cos());
    }
    Ok(out)
}
