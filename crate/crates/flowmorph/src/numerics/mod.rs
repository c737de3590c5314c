//! Dense-tensor math substrate: a fully-connected network, forward-mode
//! dual numbers for exact spatial Jacobians, an op-level reverse-mode tape
//! for parameter gradients, Adam, and checkpoint serialization.
//!
//! Everything runs in 64-bit floats.

mod adam;
mod checkpoint;
mod dual;
mod tape;

pub use adam::{AdamHyper, AdamState};
pub use checkpoint::{CheckpointData, TensorEntry};
pub use dual::{jacobian_unchecked, mlp_forward_generic, spatial_jacobian, Dual3, Real};
pub use tape::{backprop_scalar, Gradients, Tape, TapedMlp, TensorId};

use ndarray::{Array1, Array2};
use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("input width {actual} does not match network input width {expected}")]
    WidthMismatch { expected: usize, actual: usize },
    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("{activation:?} is not differentiable enough for spatial derivatives; use elu or tanh")]
    NonDifferentiableActivation { activation: Activation },
    #[error("gradient tape already consumed")]
    TapeConsumed,
    #[error("backward root must be a 1x1 scalar, got {rows}x{cols}")]
    NotScalar { rows: usize, cols: usize },
    #[error("checkpoint error at {path}: {message}")]
    Checkpoint { path: String, message: String },
    #[error("checkpoint i/o error at {path}: {source}")]
    CheckpointIo {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Per-layer nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Elu,
    Tanh,
    Identity,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    x
                } else {
                    0.0
                }
            }
            Activation::Elu => {
                if x > 0.0 {
                    x
                } else {
                    x.exp() - 1.0
                }
            }
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    /// First derivative.
    pub fn d1(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Elu => {
                if x > 0.0 {
                    1.0
                } else {
                    x.exp()
                }
            }
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            Activation::Identity => 1.0,
        }
    }

    /// Second derivative (the curl training path differentiates d1).
    pub fn d2(self, x: f64) -> f64 {
        match self {
            Activation::Relu | Activation::Identity => 0.0,
            Activation::Elu => {
                if x > 0.0 {
                    0.0
                } else {
                    x.exp()
                }
            }
            Activation::Tanh => {
                let t = x.tanh();
                -2.0 * t * (1.0 - t * t)
            }
        }
    }

    /// Whether spatial derivatives through this activation are trustworthy.
    pub fn is_c1(self) -> bool {
        !matches!(self, Activation::Relu)
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Elu => "elu",
            Activation::Tanh => "tanh",
            Activation::Identity => "identity",
        }
    }

    pub fn parse(name: &str) -> Option<Activation> {
        Some(match name {
            "relu" => Activation::Relu,
            "elu" => Activation::Elu,
            "tanh" => Activation::Tanh,
            "identity" => Activation::Identity,
            _ => None?,
        })
    }
}

/// One affine layer followed by its activation. Weights are stored
/// `[input, output]` so a batch `[n, input]` maps by `x.dot(w) + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub activation: Activation,
}

/// Fully-connected network parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub layers: Vec<Layer>,
}

impl MlpParams {
    /// Glorot-uniform initialization over the given widths; hidden layers get
    /// `hidden`, the output layer is linear.
    pub fn glorot(widths: &[usize], hidden: Activation, rng: &mut impl Rng) -> MlpParams {
        assert!(widths.len() >= 2, "need at least input and output widths");
        let mut layers = Vec::with_capacity(widths.len() - 1);
        for (l, pair) in widths.windows(2).enumerate() {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let weight =
                Array2::from_shape_fn((fan_in, fan_out), |_| rng.gen_range(-bound..bound));
            let bias = Array1::zeros(fan_out);
            let activation = if l + 2 == widths.len() {
                Activation::Identity
            } else {
                hidden
            };
            layers.push(Layer {
                weight,
                bias,
                activation,
            });
        }
        MlpParams { layers }
    }

    pub fn zeros(widths: &[usize], hidden: Activation) -> MlpParams {
        let mut layers = Vec::with_capacity(widths.len() - 1);
        for (l, pair) in widths.windows(2).enumerate() {
            layers.push(Layer {
                weight: Array2::zeros((pair[0], pair[1])),
                bias: Array1::zeros(pair[1]),
                activation: if l + 2 == widths.len() {
                    Activation::Identity
                } else {
                    hidden
                },
            });
        }
        MlpParams { layers }
    }

    pub fn input_width(&self) -> usize {
        self.layers.first().map_or(0, |l| l.weight.nrows())
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().map_or(0, |l| l.weight.ncols())
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut widths = vec![self.input_width()];
        widths.extend(self.layers.iter().map(|l| l.weight.ncols()));
        widths
    }

    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    pub fn has_activation(&self, activation: Activation) -> bool {
        self.layers.iter().any(|l| l.activation == activation)
    }

    /// Zero every bias (the odd sign network requires bias-free layers).
    pub fn clear_biases(&mut self) {
        for layer in &mut self.layers {
            layer.bias.fill(0.0);
        }
    }

    /// Batched forward pass: rows are independent inputs.
    pub fn forward_batch(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut a = x.clone();
        for layer in &self.layers {
            let mut s = a.dot(&layer.weight);
            s += &layer.bias;
            a = s.mapv(|v| layer.activation.apply(v));
        }
        a
    }

    /// Batched forward-mode pass carrying three tangent channels alongside
    /// values: returns the output batch and the output tangents per seed.
    /// Tangent channel `k` of the output holds `J . seed_k` per row.
    pub fn dual_forward_batch(
        &self,
        x: &Array2<f64>,
        seeds: [&Array2<f64>; 3],
    ) -> (Array2<f64>, [Array2<f64>; 3]) {
        let mut a = x.clone();
        let mut t = [seeds[0].clone(), seeds[1].clone(), seeds[2].clone()];
        for layer in &self.layers {
            let mut s = a.dot(&layer.weight);
            s += &layer.bias;
            let st = [
                t[0].dot(&layer.weight),
                t[1].dot(&layer.weight),
                t[2].dot(&layer.weight),
            ];
            if layer.activation == Activation::Identity {
                a = s;
                t = st;
            } else {
                let d1 = s.mapv(|v| layer.activation.d1(v));
                a = s.mapv(|v| layer.activation.apply(v));
                t = [&d1 * &st[0], &d1 * &st[1], &d1 * &st[2]];
            }
        }
        (a, t)
    }
}

/// Single-input forward pass with a width check.
pub fn mlp_forward(params: &MlpParams, input: &[f64]) -> Result<Vec<f64>, NumericsError> {
    if input.len() != params.input_width() {
        return Err(NumericsError::WidthMismatch {
            expected: params.input_width(),
            actual: input.len(),
        });
    }
    Ok(mlp_forward_generic(params, input))
}
