//! MLP building blocks: layer specs, SIREN-style initialization, positional
//! encoding, and a graph-based forward pass.

use std::sync::Arc;

use rand::Rng;

use super::tape::{NodeId, Tape};
use super::tensor::Tensor;

/// Activation applied after every hidden layer; the final layer is linear.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Sine,
    Relu,
    None,
}

/// Layer widths (input, hidden..., output) plus activation.
#[derive(Debug, Clone)]
pub struct MlpSpec {
    pub widths: Vec<usize>,
    pub activation: Activation,
    /// Sine frequency; the hidden pre-activations are scaled by this.
    pub w0: f64,
}

impl MlpSpec {
    pub fn new(widths: Vec<usize>, activation: Activation, w0: f64) -> Self {
        assert!(widths.len() >= 3, "an MLP needs at least one hidden layer");
        if activation == Activation::Sine {
            assert!(w0 > 0.0, "sine activation needs w0 > 0");
        }
        MlpSpec {
            widths,
            activation,
            w0,
        }
    }

    pub fn n_layers(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.widths.last().unwrap()
    }

    /// Parameter count of layer `i` (weights + biases).
    pub fn layer_param_count(&self, i: usize) -> usize {
        self.widths[i] * self.widths[i + 1] + self.widths[i + 1]
    }

    pub fn total_param_count(&self) -> usize {
        (0..self.n_layers()).map(|i| self.layer_param_count(i)).sum()
    }
}

/// Weight and bias nodes for each layer of one MLP.
pub struct MlpParams {
    pub layers: Vec<(NodeId, NodeId)>,
}

/// Forward pass on the tape: x is n x input_width.
pub fn mlp_forward(tape: &mut Tape, spec: &MlpSpec, params: &MlpParams, x: NodeId) -> NodeId {
    assert_eq!(
        tape.value(x).cols(),
        spec.input_width(),
        "mlp input width mismatch"
    );
    assert_eq!(params.layers.len(), spec.n_layers());
    let mut h = x;
    for (i, &(w, b)) in params.layers.iter().enumerate() {
        let lin = tape.matmul(h, w);
        h = tape.add_row(lin, b);
        if i + 1 < spec.n_layers() {
            h = match spec.activation {
                Activation::Sine => {
                    let scaled = tape.mul_scalar(h, spec.w0);
                    tape.sin(scaled)
                }
                Activation::Relu => tape.relu(h),
                Activation::None => h,
            };
        }
    }
    h
}

/// Convenience non-graph forward for plain tensors.
pub fn mlp_eval(spec: &MlpSpec, weights: &[(Tensor, Tensor)], x: &Tensor) -> Tensor {
    let mut tape = Tape::new();
    let xn = tape.input(x.clone());
    let layers = weights
        .iter()
        .map(|(w, b)| {
            (
                tape.input(w.clone()),
                tape.input(b.clone()),
            )
        })
        .collect();
    let y = mlp_forward(&mut tape, spec, &MlpParams { layers }, xn);
    tape.value(y).clone()
}

/// SIREN weight initialization for a fan_in x fan_out layer.
///
/// First layer: uniform in [-1/fan_in, 1/fan_in]. Hidden/output layers:
/// uniform in +-sqrt(6/fan_in)/w0. Biases are zero (callers allocate them).
pub fn siren_init(
    fan_in: usize,
    fan_out: usize,
    w0: f64,
    is_first_layer: bool,
    rng: &mut impl Rng,
) -> Tensor {
    assert!(fan_in >= 1);
    let bound = siren_bound(fan_in, w0, is_first_layer);
    let data = (0..fan_in * fan_out)
        .map(|_| rng.gen_range(-bound..=bound))
        .collect();
    Tensor::new(vec![fan_in, fan_out], data)
}

pub fn siren_bound(fan_in: usize, w0: f64, is_first_layer: bool) -> f64 {
    if is_first_layer {
        1.0 / fan_in as f64
    } else {
        (6.0 / fan_in as f64).sqrt() / w0
    }
}

/// Plain linear/ReLU layer init: weights and biases uniform in
/// +-1/sqrt(fan_in).
pub fn linear_init(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> (Tensor, Tensor) {
    assert!(fan_in >= 1);
    let bound = 1.0 / (fan_in as f64).sqrt();
    let w = Tensor::new(
        vec![fan_in, fan_out],
        (0..fan_in * fan_out)
            .map(|_| rng.gen_range(-bound..=bound))
            .collect(),
    );
    let b = Tensor::new(
        vec![1, fan_out],
        (0..fan_out).map(|_| rng.gen_range(-bound..=bound)).collect(),
    );
    (w, b)
}

/// Initialize every layer of an MLP, picking the scheme from the activation.
/// Sine layers get SIREN init with zero biases; others get `linear_init`.
pub fn init_mlp(spec: &MlpSpec, rng: &mut impl Rng) -> Vec<(Tensor, Tensor)> {
    (0..spec.n_layers())
        .map(|i| {
            let (fi, fo) = (spec.widths[i], spec.widths[i + 1]);
            match spec.activation {
                Activation::Sine => (
                    siren_init(fi, fo, spec.w0, i == 0, rng),
                    Tensor::zeros(1, fo),
                ),
                Activation::Relu | Activation::None => linear_init(fi, fo, rng),
            }
        })
        .collect()
}

/// Sinusoidal positional encoding with the raw coordinates prepended:
/// per coordinate block, (x, sin(2^0 pi x), cos(2^0 pi x), ...,
/// sin(2^{n-1} pi x), cos(2^{n-1} pi x)). Output width d*(1+2*n_freq).
pub fn positional_encoding(x: &Tensor, n_freq: usize) -> Tensor {
    let mut tape = Tape::new();
    let xn = tape.input(x.clone());
    let y = positional_encoding_node(&mut tape, xn, n_freq);
    tape.value(y).clone()
}

/// Graph version of the positional encoding.
pub fn positional_encoding_node(tape: &mut Tape, x: NodeId, n_freq: usize) -> NodeId {
    if n_freq == 0 {
        return x;
    }
    let mut parts = vec![x];
    for j in 0..n_freq {
        let freq = std::f64::consts::PI * (1u64 << j) as f64;
        let scaled = tape.mul_scalar(x, freq);
        let s = tape.sin(scaled);
        let c = tape.cos(scaled);
        parts.push(s);
        parts.push(c);
    }
    tape.concat_cols(parts)
}

pub fn encoded_width(d: usize, n_freq: usize) -> usize {
    d * (1 + 2 * n_freq)
}

/// Build throwaway input params on a tape from plain tensors.
pub fn params_from_tensors(tape: &mut Tape, weights: &[(Arc<Tensor>, Arc<Tensor>)]) -> MlpParams {
    let layers = weights
        .iter()
        .map(|(w, b)| (tape.input_arc(Arc::clone(w)), tape.input_arc(Arc::clone(b))))
        .collect();
    MlpParams { layers }
}
