//! Fully connected conditioner networks evaluated on a [`Tape`].

use std::f64::consts::TAU;

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::tape::{Matrix, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Swish,
    Sin,
    Tanh,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Featurizer {
    Identity,
    /// Each input `u` becomes `(cos 2πju, sin 2πju)` for `j = 1..=n_frequencies`.
    CircularCosSin { n_frequencies: usize },
}

impl Featurizer {
    pub fn width(&self, inputs: usize) -> usize {
        match *self {
            Featurizer::Identity => inputs,
            Featurizer::CircularCosSin { n_frequencies } => 2 * n_frequencies * inputs,
        }
    }

    pub fn apply<'t>(&self, x: Var<'t>) -> Var<'t> {
        match *self {
            Featurizer::Identity => x,
            Featurizer::CircularCosSin { n_frequencies } => {
                let tape = x.tape();
                let mut parts = Vec::with_capacity(2 * n_frequencies);
                for j in 1..=n_frequencies {
                    let angle = x * (TAU * j as f64);
                    parts.push(angle.cos());
                    parts.push(angle.sin());
                }
                tape.concat_cols(&parts)
            }
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetError {
    #[error("network needs at least an input and an output size")]
    TooFewLayers,
    #[error("layer {layer}: expected {expected} values, got {got}")]
    ParamSize { layer: usize, expected: usize, got: usize },
    #[error("input has {got} columns, network expects {expected}")]
    InputWidth { expected: usize, got: usize },
    #[error("expected {expected} parameters, got {got}")]
    ParamCount { expected: usize, got: usize },
}

/// Dense network `sizes[0] → … → sizes[L]` with the activation between
/// layers and a linear output.
///
/// `sizes[0]` is the raw input width; the featurizer expands it before the
/// first weight matrix. Weights of layer `l` are stored row-major with
/// shape `(fan_in, fan_out)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenseNet {
    pub sizes: Vec<usize>,
    pub activation: Activation,
    pub featurizer: Featurizer,
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

/// Tape handles for a network's parameters, weights then bias per layer.
#[derive(Debug, Clone)]
pub struct NetVars<'t> {
    pub vars: Vec<Var<'t>>,
}

impl DenseNet {
    /// Glorot-scaled Gaussian hidden weights; the output layer starts at
    /// zero weights with `output_bias`, so the initial output is constant.
    pub fn new<R: Rng + ?Sized>(
        sizes: &[usize],
        activation: Activation,
        featurizer: Featurizer,
        output_bias: &[f64],
        rng: &mut R,
    ) -> Result<Self, NetError> {
        if sizes.len() < 2 {
            return Err(NetError::TooFewLayers);
        }
        let out = *sizes.last().expect("len checked");
        if output_bias.len() != out {
            return Err(NetError::ParamSize { layer: sizes.len() - 2, expected: out, got: output_bias.len() });
        }
        let dims = Self::layer_dims(sizes, featurizer);
        let last = dims.len() - 1;
        let mut weights = Vec::with_capacity(dims.len());
        let mut biases = Vec::with_capacity(dims.len());
        for (l, &(fan_in, fan_out)) in dims.iter().enumerate() {
            if l == last {
                weights.push(vec![0.0; fan_in * fan_out]);
                biases.push(output_bias.to_vec());
            } else {
                let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
                weights.push((0..fan_in * fan_out).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect());
                biases.push(vec![0.0; fan_out]);
            }
        }
        Ok(Self { sizes: sizes.to_vec(), activation, featurizer, weights, biases })
    }

    fn layer_dims(sizes: &[usize], featurizer: Featurizer) -> Vec<(usize, usize)> {
        let mut fan_in = featurizer.width(sizes[0]);
        sizes[1..]
            .iter()
            .map(|&out| {
                let d = (fan_in, out);
                fan_in = out;
                d
            })
            .collect()
    }

    pub fn validate(&self) -> Result<(), NetError> {
        if self.sizes.len() < 2 {
            return Err(NetError::TooFewLayers);
        }
        let dims = Self::layer_dims(&self.sizes, self.featurizer);
        if self.weights.len() != dims.len() || self.biases.len() != dims.len() {
            return Err(NetError::ParamSize { layer: 0, expected: dims.len(), got: self.weights.len() });
        }
        for (l, &(i, o)) in dims.iter().enumerate() {
            if self.weights[l].len() != i * o {
                return Err(NetError::ParamSize { layer: l, expected: i * o, got: self.weights[l].len() });
            }
            if self.biases[l].len() != o {
                return Err(NetError::ParamSize { layer: l, expected: o, got: self.biases[l].len() });
            }
        }
        Ok(())
    }

    pub fn input_width(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_width(&self) -> usize {
        *self.sizes.last().expect("validated")
    }

    pub fn n_params(&self) -> usize {
        self.weights.iter().chain(&self.biases).map(Vec::len).sum()
    }

    /// Flat parameters: per layer, weights then bias.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w);
            out.extend_from_slice(b);
        }
        out
    }

    pub fn set_params(&mut self, p: &[f64]) -> Result<(), NetError> {
        if p.len() != self.n_params() {
            return Err(NetError::ParamCount { expected: self.n_params(), got: p.len() });
        }
        let mut at = 0;
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            let n = w.len();
            w.copy_from_slice(&p[at..at + n]);
            at += n;
            let n = b.len();
            b.copy_from_slice(&p[at..at + n]);
            at += n;
        }
        Ok(())
    }

    /// Record the parameters as leaves on `tape`.
    pub fn leaves<'t>(&self, tape: &'t Tape) -> NetVars<'t> {
        let dims = Self::layer_dims(&self.sizes, self.featurizer);
        let mut vars = Vec::with_capacity(2 * dims.len());
        for (l, &(i, o)) in dims.iter().enumerate() {
            vars.push(tape.leaf(Array2::from_shape_vec((i, o), self.weights[l].clone()).expect("validated shape")));
            vars.push(tape.leaf(Array2::from_shape_vec((1, o), self.biases[l].clone()).expect("validated shape")));
        }
        NetVars { vars }
    }

    /// Forward pass of an `n × sizes[0]` batch.
    pub fn forward<'t>(&self, vars: &NetVars<'t>, x: Var<'t>) -> Result<Var<'t>, NetError> {
        if x.cols() != self.input_width() {
            return Err(NetError::InputWidth { expected: self.input_width(), got: x.cols() });
        }
        let n = x.rows();
        let mut h = self.featurizer.apply(x);
        let layers = vars.vars.len() / 2;
        for l in 0..layers {
            let (w, b) = (vars.vars[2 * l], vars.vars[2 * l + 1]);
            h = h.matmul(w) + b.broadcast_rows(n);
            if l + 1 < layers {
                h = match self.activation {
                    Activation::Swish => h.swish(),
                    Activation::Sin => h.sin(),
                    Activation::Tanh => h.tanh(),
                };
            }
        }
        Ok(h)
    }

    /// Evaluate without keeping gradients.
    pub fn eval(&self, x: &Matrix) -> Result<Matrix, NetError> {
        let tape = Tape::new();
        let vars = self.leaves(&tape);
        let input = tape.leaf(x.clone());
        Ok((*self.forward(&vars, input)?.value()).clone())
    }
}
