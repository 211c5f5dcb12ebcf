//! Dense layered classifier: parameters, forward/backward passes, Adam, and
//! local training of a client.
//!
//! A layer's flat representation (used for distances, aggregation and cost
//! sizing) is its weight matrix in row-major order (`output_dim` rows of
//! `input_dim` entries) followed by its bias vector.

mod adam;
mod codec;
mod network;
mod train;

pub use adam::{adam_step, AdamState};
pub use network::{forward, forward_batch, loss_and_grads, Batch};
pub(crate) use train::derive_seed;
pub use train::{evaluate, train_episodes, ClientState, EpisodeRecord, TrainConfig};

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Softmax,
    Identity,
}

impl Activation {
    pub(crate) fn code(self) -> u8 {
        match self {
            Activation::Relu => 0,
            Activation::Softmax => 1,
            Activation::Identity => 2,
        }
    }

    pub(crate) fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Activation::Relu),
            1 => Some(Activation::Softmax),
            2 => Some(Activation::Identity),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub input_dim: usize,
    pub output_dim: usize,
    pub activation: Activation,
}

impl LayerSpec {
    pub fn new(input_dim: usize, output_dim: usize, activation: Activation) -> Self {
        Self {
            input_dim,
            output_dim,
            activation,
        }
    }

    /// Number of scalar parameters (weights plus biases).
    pub fn param_count(&self) -> usize {
        self.input_dim * self.output_dim + self.output_dim
    }
}

/// Checks that `specs` form a valid network: nonzero dimensions, chained
/// shapes, and softmax only on the last layer.
pub fn validate_specs(specs: &[LayerSpec]) -> Result<()> {
    if specs.is_empty() {
        return Err(Error::config("model needs at least one layer"));
    }
    for (l, spec) in specs.iter().enumerate() {
        if spec.input_dim == 0 || spec.output_dim == 0 {
            return Err(Error::config(format!("layer {l} has a zero dimension")));
        }
        if spec.activation == Activation::Softmax && l + 1 != specs.len() {
            return Err(Error::config(format!(
                "layer {l}: softmax is only allowed on the final layer"
            )));
        }
        if l > 0 && specs[l - 1].output_dim != spec.input_dim {
            return Err(Error::config(format!(
                "layer {l} expects input_dim {} but layer {} produces {}",
                spec.input_dim,
                l - 1,
                specs[l - 1].output_dim
            )));
        }
    }
    Ok(())
}

/// Parameters of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `output_dim x input_dim`.
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    pub activation: Activation,
}

impl Layer {
    pub fn zeros(spec: LayerSpec) -> Self {
        Self {
            weights: Array2::zeros((spec.output_dim, spec.input_dim)),
            bias: Array1::zeros(spec.output_dim),
            activation: spec.activation,
        }
    }

    pub fn spec(&self) -> LayerSpec {
        LayerSpec::new(self.input_dim(), self.output_dim(), self.activation)
    }

    pub fn input_dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.nrows()
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    /// Row-major weights followed by biases.
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        out.extend(self.weights.iter().copied());
        out.extend(self.bias.iter().copied());
        out
    }

    /// Iterates the flat representation without allocating.
    pub fn flat_iter(&self) -> impl Iterator<Item = f64> + '_ {
        self.weights
            .iter()
            .copied()
            .chain(self.bias.iter().copied())
    }

    /// Inverse of [`Layer::flat`].
    pub fn from_flat(spec: LayerSpec, flat: &[f64]) -> Result<Self> {
        if flat.len() != spec.param_count() {
            return Err(Error::input(format!(
                "flat layer has {} entries, expected {}",
                flat.len(),
                spec.param_count()
            )));
        }
        let n_weights = spec.input_dim * spec.output_dim;
        let weights = Array2::from_shape_vec(
            (spec.output_dim, spec.input_dim),
            flat[..n_weights].to_vec(),
        )
        .map_err(|e| Error::Internal(e.to_string()))?;
        Ok(Self {
            weights,
            bias: Array1::from(flat[n_weights..].to_vec()),
            activation: spec.activation,
        })
    }

    pub(crate) fn same_shape(&self, other: &Layer) -> bool {
        self.weights.dim() == other.weights.dim() && self.bias.len() == other.bias.len()
    }
}

/// Ordered per-layer parameter blocks of a network.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    layers: Vec<Layer>,
}

impl ModelParams {
    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        let specs: Vec<LayerSpec> = layers.iter().map(Layer::spec).collect();
        validate_specs(&specs)?;
        Ok(Self { layers })
    }

    pub fn zeros(specs: &[LayerSpec]) -> Result<Self> {
        validate_specs(specs)?;
        Ok(Self {
            layers: specs.iter().copied().map(Layer::zeros).collect(),
        })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(Layer::spec).collect()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].output_dim()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    /// Flat vector of layer `l` (0-based).
    pub fn flat_layer(&self, l: usize) -> Vec<f64> {
        self.layers[l].flat()
    }

    /// True when both models have identical layer shapes.
    pub fn same_structure(&self, other: &ModelParams) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.same_shape(b))
    }

    /// Overwrites layers `0..count` with the corresponding layers of `src`.
    pub fn copy_leading_layers(&mut self, src: &ModelParams, count: usize) {
        for (dst, src) in self.layers.iter_mut().zip(&src.layers).take(count) {
            dst.weights.assign(&src.weights);
            dst.bias.assign(&src.bias);
        }
    }
}

/// Glorot-uniform weights in `±sqrt(6 / (fan_in + fan_out))`, zero biases.
///
/// Weights are drawn layer by layer in row-major order from a ChaCha8 stream
/// seeded with `seed`, so the same `(specs, seed)` always yields the same bits.
pub fn init_model(specs: &[LayerSpec], seed: u64) -> Result<ModelParams> {
    validate_specs(specs)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = specs
        .iter()
        .map(|spec| {
            let limit = (6.0 / (spec.input_dim + spec.output_dim) as f64).sqrt();
            let weights = Array2::from_shape_simple_fn((spec.output_dim, spec.input_dim), || {
                rng.gen_range(-limit..=limit)
            });
            Layer {
                weights,
                bias: Array1::zeros(spec.output_dim),
                activation: spec.activation,
            }
        })
        .collect();
    Ok(ModelParams { layers })
}
