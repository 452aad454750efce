//! Fully-connected networks under the NTK parameterization.
//!
//! Layer `l` computes `f_l = φ(f_{l−1}) W_l / √D_{l−1} + b_l` on row-batched
//! inputs, with `φ(f_0) = x` and no activation on the output. Parameters
//! live in one flat vector laid out layer by layer as `[W_1, b_1, …, W_L, b_L]`,
//! where `W_l` is stored row-major with shape `D_{l−1} × D_l`.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diff::{softplus, Array, Tape, Var};
use crate::error::{invalid, Result};
use crate::gp::FunctionBatch;
use crate::priors::{self, PriorParams};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    #[default]
    Tanh,
    Relu,
    Softplus,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    /// `[D_0 (input), D_1, …, D_L (output)]`.
    pub layer_widths: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
}

/// Location of one layer inside the flat parameter vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerLayout {
    pub fan_in: usize,
    pub fan_out: usize,
    pub weight_offset: usize,
    pub bias_offset: usize,
}

impl LayerLayout {
    pub fn weight_len(&self) -> usize {
        self.fan_in * self.fan_out
    }

    pub fn bias_len(&self) -> usize {
        self.fan_out
    }

    pub fn len(&self) -> usize {
        self.weight_len() + self.bias_len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn weights(&self) -> std::ops::Range<usize> {
        self.weight_offset..self.weight_offset + self.weight_len()
    }

    pub fn biases(&self) -> std::ops::Range<usize> {
        self.bias_offset..self.bias_offset + self.bias_len()
    }

    /// Weights and biases together.
    pub fn all(&self) -> std::ops::Range<usize> {
        self.weight_offset..self.bias_offset + self.bias_len()
    }
}

impl NetworkSpec {
    pub fn new(layer_widths: Vec<usize>, activation: Activation) -> Result<Self> {
        let spec = Self {
            layer_widths,
            activation,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Tanh MLP `[input, hidden…, output]`.
    pub fn mlp(input: usize, hidden: &[usize], output: usize) -> Self {
        let mut layer_widths = vec![input];
        layer_widths.extend_from_slice(hidden);
        layer_widths.push(output);
        Self {
            layer_widths,
            activation: Activation::Tanh,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_widths.len() < 2 {
            return invalid("a network needs at least one layer");
        }
        if self.layer_widths.contains(&0) {
            return invalid(format!(
                "layer widths must be >= 1: {:?}",
                self.layer_widths
            ));
        }
        Ok(())
    }

    pub fn num_layers(&self) -> usize {
        self.layer_widths.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.layer_widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_widths.last().unwrap()
    }

    pub fn layers(&self) -> Vec<LayerLayout> {
        let mut offset = 0;
        self.layer_widths
            .windows(2)
            .map(|w| {
                let layout = LayerLayout {
                    fan_in: w[0],
                    fan_out: w[1],
                    weight_offset: offset,
                    bias_offset: offset + w[0] * w[1],
                };
                offset += layout.len();
                layout
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layer_widths
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }
}

/// Flat parameter vector `w`; see the module docs for the layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlatParams(pub Vec<f64>);

impl FlatParams {
    pub fn zeros(spec: &NetworkSpec) -> Self {
        Self(vec![0.0; spec.param_count()])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    /// Per-layer `(weights, biases)` views.
    pub fn split<'a>(&'a self, spec: &NetworkSpec) -> Vec<(&'a [f64], &'a [f64])> {
        spec.layers()
            .iter()
            .map(|l| (&self.0[l.weights()], &self.0[l.biases()]))
            .collect()
    }

    /// Inverse of [`FlatParams::split`].
    pub fn join(parts: &[(&[f64], &[f64])]) -> Self {
        Self(
            parts
                .iter()
                .flat_map(|(w, b)| w.iter().chain(b.iter()).copied())
                .collect(),
        )
    }
}

/// Weights i.i.d. `N(0, 1)`, biases zero.
pub fn init_params<R: Rng + ?Sized>(spec: &NetworkSpec, rng: &mut R) -> FlatParams {
    let mut w = FlatParams::zeros(spec);
    for layer in spec.layers() {
        for v in &mut w.0[layer.weights()] {
            *v = rng.sample(StandardNormal);
        }
    }
    w
}

fn activate(tape: &mut Tape, act: Activation, x: Var) -> Result<Var> {
    match act {
        Activation::Tanh => tape.tanh(x),
        Activation::Relu => tape.relu(x),
        Activation::Softplus => tape.softplus(x),
    }
}

/// Records the network on `tape`.
///
/// `params` is `[P]` (one network) or `[S, P]` (S networks); `x` is
/// `[B, D_0]`. Returns `[S, B, D_L]` (S = 1 for a single vector).
pub fn forward_on_tape(tape: &mut Tape, spec: &NetworkSpec, params: Var, x: Var) -> Result<Var> {
    spec.validate()?;
    let p = spec.param_count();
    let params = match tape.shape(params) {
        [n] if *n == p => tape.reshape(params, &[1, p])?,
        [_, n] if *n == p => params,
        s => {
            return invalid(format!(
                "parameter shape {s:?} does not match network with {p} parameters"
            ))
        }
    };
    let s = tape.shape(params)[0];
    let (b, d0) = match tape.shape(x) {
        [b, d] => (*b, *d),
        other => return invalid(format!("inputs must be a matrix, got {other:?}")),
    };
    if d0 != spec.input_dim() {
        return invalid(format!(
            "input width {d0} does not match network input {}",
            spec.input_dim()
        ));
    }
    let x3 = tape.reshape(x, &[1, b, d0])?;
    let mut h = tape.broadcast_to(x3, &[s, b, d0])?;
    let layers = spec.layers();
    for (i, layer) in layers.iter().enumerate() {
        let w = tape.slice_last(params, layer.weight_offset, layer.weight_len())?;
        let w = tape.reshape(w, &[s, layer.fan_in, layer.fan_out])?;
        // Scaling the weights is cheaper than scaling the activations.
        let w = tape.scale(w, 1.0 / (layer.fan_in as f64).sqrt())?;
        let bias = tape.slice_last(params, layer.bias_offset, layer.bias_len())?;
        let bias = tape.reshape(bias, &[s, 1, layer.fan_out])?;
        let z = tape.matmul(h, w)?;
        let z = tape.add(z, bias)?;
        h = if i + 1 < layers.len() {
            activate(tape, spec.activation, z)?
        } else {
            z
        };
    }
    Ok(h)
}

/// Plain evaluation of one network: `[B, D_L]`.
pub fn forward(spec: &NetworkSpec, params: &FlatParams, x: &Array) -> Result<Array> {
    if params.len() != spec.param_count() {
        return invalid(format!(
            "{} parameters for a network with {}",
            params.len(),
            spec.param_count()
        ));
    }
    let mut tape = Tape::new();
    let w = tape.constant(Array::vector(params.0.clone()));
    let xv = tape.constant(x.clone());
    let out = forward_on_tape(&mut tape, spec, w, xv)?;
    let shape = tape.shape(out)[1..].to_vec();
    tape.value(out).clone().reshaped(shape)
}

/// Evaluates many parameter vectors at once: `[S, B, D_L]`.
pub fn forward_many(spec: &NetworkSpec, params: &[FlatParams], x: &Array) -> Result<Array> {
    let p = spec.param_count();
    if params.is_empty() {
        return invalid("no parameter vectors");
    }
    let mut flat = Vec::with_capacity(params.len() * p);
    for w in params {
        if w.len() != p {
            return invalid(format!("{} parameters for a network with {p}", w.len()));
        }
        flat.extend_from_slice(&w.0);
    }
    let out = forward_rows(spec, &Array::new(vec![params.len(), p], flat)?, x)?;
    out.reshaped(vec![params.len(), x.rows(), spec.output_dim()])
}

/// Off-tape evaluation of `[S, P]` parameter rows at `x` (`[B, D_0]`),
/// one network at a time so intermediates stay small. Returns the
/// function vectors `[S, B·D_L]`.
fn forward_rows(spec: &NetworkSpec, params: &Array, x: &Array) -> Result<Array> {
    spec.validate()?;
    let p = spec.param_count();
    if params.rank() != 2 || params.cols() != p {
        return invalid(format!(
            "parameter shape {:?} does not match network with {p} parameters",
            params.shape()
        ));
    }
    if x.rank() != 2 || x.cols() != spec.input_dim() {
        return invalid(format!(
            "inputs {:?} do not match network input {}",
            x.shape(),
            spec.input_dim()
        ));
    }
    let layers = spec.layers();
    let width = x.rows() * spec.output_dim();
    let mut out = Vec::with_capacity(params.rows() * width);
    for row in params.data().chunks(p) {
        let mut h = x.clone();
        for (i, layer) in layers.iter().enumerate() {
            let c = 1.0 / (layer.fan_in as f64).sqrt();
            let w: Vec<f64> = row[layer.weights()].iter().map(|v| v * c).collect();
            let mut z = h.matmul(&Array::matrix(layer.fan_in, layer.fan_out, w)?)?;
            let bias = &row[layer.biases()];
            let hidden = i + 1 < layers.len();
            for zr in z.data_mut().chunks_mut(layer.fan_out) {
                for (v, b) in zr.iter_mut().zip(bias) {
                    *v += b;
                    if hidden {
                        *v = match spec.activation {
                            Activation::Tanh => v.tanh(),
                            Activation::Relu => v.max(0.0),
                            Activation::Softplus => softplus(*v),
                        };
                    }
                }
            }
            h = z;
        }
        out.extend_from_slice(h.data());
    }
    Array::matrix(params.rows(), width, out)
}

/// Network outputs `[S, B, C]` flattened to function vectors `[S, B·C]`
/// (point-major: all C outputs of point 0, then point 1, …).
pub fn as_function_vectors(tape: &mut Tape, out: Var) -> Result<Var> {
    let s = tape.shape(out).to_vec();
    tape.reshape(out, &[s[0], s[1] * s[2]])
}

/// Draws `count` networks from `prior` and evaluates them at `points`
/// on `tape`; `psi` carries the prior's tunable parameters when it has any.
/// Returns `[count, M·D_L]`, differentiable with respect to `psi`.
pub fn sample_functions_on_tape<R: Rng + ?Sized>(
    tape: &mut Tape,
    spec: &NetworkSpec,
    prior: &PriorParams,
    psi: Option<Var>,
    points: Var,
    count: usize,
    rng: &mut R,
) -> Result<Var> {
    let w = priors::sample_on_tape(tape, prior, psi, spec, count, rng)?;
    let out = forward_on_tape(tape, spec, w, points)?;
    as_function_vectors(tape, out)
}

/// Functions drawn from the prior induced by `prior` on the weights.
pub fn sample_functions<R: Rng + ?Sized>(
    spec: &NetworkSpec,
    prior: &PriorParams,
    points: &Array,
    count: usize,
    rng: &mut R,
) -> Result<FunctionBatch> {
    let mut tape = Tape::new();
    let w = priors::sample_on_tape(&mut tape, prior, None, spec, count, rng)?;
    Ok(FunctionBatch {
        values: forward_rows(spec, tape.value(w), points)?,
        measurement_points: points.clone(),
    })
}
