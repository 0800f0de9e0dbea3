//! Flat parameter store for a collection of dense feed-forward blocks.
//!
//! Every trainable scalar lives in one contiguous `Vec<f64>` so optimizers can
//! treat the network as a single vector. A manifest of [`LayerSpec`]s records
//! where each layer's weight matrix (row-major, `out x in`) and bias vector sit.
//! Consecutive layers sharing a `block` name form one MLP; the shape invariant
//! (`out_dim` of layer k equals `in_dim` of layer k+1) is enforced per block.

use std::fmt;
use std::ops::Range;

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Linear,
    Relu,
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Linear => z,
            Activation::Relu => z.max(0.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub block: String,
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
}

impl LayerSpec {
    pub fn param_count(&self) -> usize {
        self.out_dim * self.in_dim + self.out_dim
    }
}

#[derive(Clone, PartialEq)]
pub struct NetworkParams {
    layers: Vec<LayerSpec>,
    offsets: Vec<usize>,
    values: Vec<f64>,
}

impl fmt::Debug for NetworkParams {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("NetworkParams")
            .field("layers", &self.layers.len())
            .field("total_count", &self.values.len())
            .finish()
    }
}

fn offsets_for(layers: &[LayerSpec]) -> (Vec<usize>, usize) {
    let mut offsets = Vec::with_capacity(layers.len());
    let mut total = 0;
    for l in layers {
        offsets.push(total);
        total += l.param_count();
    }
    (offsets, total)
}

impl NetworkParams {
    pub fn builder() -> NetworkParamsBuilder {
        NetworkParamsBuilder::default()
    }

    /// Reassembles a parameter store from a manifest and a flat value vector.
    pub fn from_parts(layers: Vec<LayerSpec>, values: Vec<f64>) -> Result<Self> {
        let (offsets, total) = offsets_for(&layers);
        if total != values.len() {
            return Err(Error::shape(format!(
                "manifest describes {total} parameters but {} values were supplied",
                values.len()
            )));
        }
        let params = Self {
            layers,
            offsets,
            values,
        };
        params.validate()?;
        Ok(params)
    }

    /// Checks finiteness of every entry and per-block shape chaining.
    pub fn validate(&self) -> Result<()> {
        for pair in self.layers.windows(2) {
            if pair[0].block == pair[1].block && pair[0].out_dim != pair[1].in_dim {
                return Err(Error::shape(format!(
                    "block '{}': layer output dim {} does not match next input dim {}",
                    pair[0].block, pair[0].out_dim, pair[1].in_dim
                )));
            }
        }
        for l in &self.layers {
            if l.in_dim == 0 || l.out_dim == 0 {
                return Err(Error::shape(format!("block '{}' has a zero-sized layer", l.block)));
            }
        }
        if let Some(i) = self.values.iter().position(|v| !v.is_finite()) {
            return Err(Error::domain(format!("parameter {i} is not finite")));
        }
        Ok(())
    }

    pub fn total_count(&self) -> usize {
        self.values.len()
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn weight_range(&self, layer: usize) -> Range<usize> {
        let l = &self.layers[layer];
        let start = self.offsets[layer];
        start..start + l.out_dim * l.in_dim
    }

    pub fn bias_range(&self, layer: usize) -> Range<usize> {
        let l = &self.layers[layer];
        let start = self.offsets[layer] + l.out_dim * l.in_dim;
        start..start + l.out_dim
    }

    pub fn weights(&self, layer: usize) -> &[f64] {
        &self.values[self.weight_range(layer)]
    }

    pub fn bias(&self, layer: usize) -> &[f64] {
        &self.values[self.bias_range(layer)]
    }

    /// Layer indices belonging to the named block.
    pub fn block(&self, name: &str) -> Result<Range<usize>> {
        let start = self
            .layers
            .iter()
            .position(|l| l.block == name)
            .ok_or_else(|| Error::shape(format!("no block named '{name}'")))?;
        let len = self.layers[start..].iter().take_while(|l| l.block == name).count();
        Ok(start..start + len)
    }

    /// Names of all blocks in declaration order.
    pub fn block_names(&self) -> Vec<&str> {
        let mut names: Vec<&str> = Vec::new();
        for l in &self.layers {
            if names.last() != Some(&l.block.as_str()) {
                names.push(&l.block);
            }
        }
        names
    }

    /// Evaluates a contiguous run of layers on a single input vector.
    pub fn forward_layers(&self, layers: Range<usize>, input: &[f64]) -> Result<Vec<f64>> {
        let mut x = input.to_vec();
        for li in layers {
            let spec = &self.layers[li];
            if x.len() != spec.in_dim {
                return Err(Error::shape(format!(
                    "layer {li} expects input of length {}, got {}",
                    spec.in_dim,
                    x.len()
                )));
            }
            let w = self.weights(li);
            let b = self.bias(li);
            x = (0..spec.out_dim)
                .map(|o| {
                    let row = &w[o * spec.in_dim..(o + 1) * spec.in_dim];
                    let z = row.iter().zip(&x).map(|(a, b)| a * b).sum::<f64>() + b[o];
                    spec.activation.apply(z)
                })
                .collect();
        }
        Ok(x)
    }

    pub fn block_forward(&self, block: &str, input: &[f64]) -> Result<Vec<f64>> {
        self.forward_layers(self.block(block)?, input)
    }
}

/// Evaluates every layer of `params` in declaration order on `input`.
pub fn mlp_forward(params: &NetworkParams, input: &[f64]) -> Result<Vec<f64>> {
    params.forward_layers(0..params.layers.len(), input)
}

#[derive(Debug, Default, Clone)]
pub struct NetworkParamsBuilder {
    layers: Vec<LayerSpec>,
}

impl NetworkParamsBuilder {
    pub fn layer(mut self, block: &str, in_dim: usize, out_dim: usize, activation: Activation) -> Self {
        self.layers.push(LayerSpec {
            block: block.to_owned(),
            in_dim,
            out_dim,
            activation,
        });
        self
    }

    /// Adds an MLP through the given widths: ReLU on hidden layers, `output` on the last.
    pub fn mlp(mut self, block: &str, widths: &[usize], output: Activation) -> Self {
        let n = widths.len().saturating_sub(1);
        for i in 0..n {
            let act = if i + 1 == n { output } else { Activation::Relu };
            self = self.layer(block, widths[i], widths[i + 1], act);
        }
        self
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn zeros(self) -> Result<NetworkParams> {
        let (_, total) = offsets_for(&self.layers);
        NetworkParams::from_parts(self.layers, vec![0.0; total])
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init<R: Rng + ?Sized>(self, rng: &mut R) -> Result<NetworkParams> {
        let mut params = self.zeros()?;
        for li in 0..params.layers.len() {
            let l = &params.layers[li];
            let limit = (6.0 / (l.in_dim + l.out_dim) as f64).sqrt();
            let dist = Uniform::new_inclusive(-limit, limit).expect("finite bounds");
            let range = params.weight_range(li);
            for w in &mut params.values[range] {
                *w = dist.sample(rng);
            }
        }
        Ok(params)
    }
}
