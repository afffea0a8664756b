//! The reconstruction network: a fully connected ReLU stack trained to
//! reproduce its own (dropout-perturbed) input embeddings.
//!
//! Parameters of all layers live in one flat buffer so that gradients and
//! optimiser moments share a single layout; [`LayerView`] slices it back into
//! per-layer weight matrices (`fan_out x fan_in`, row-major) and biases.

mod adam;
mod forward;
mod loss;

use alloc::format;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub use adam::{adam_step, AdamState};
pub use forward::{forward, forward_rows, DropoutMask, ForwardTape};
pub use loss::{
    backprop, backward, cross_entropy, reconstruction_grad, reconstruction_loss, semi_backward,
    semi_loss, AffineHead, SemiGradients, SemiLoss,
};

/// Layer widths of the network. The first layer consumes `input_dim`; the
/// last layer must map back to `input_dim`. ReLU follows every layer but the
/// last.
#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ArchSpec {
    input_dim: usize,
    layer_dims: Vec<usize>,
}

impl ArchSpec {
    pub fn new(input_dim: usize, layer_dims: Vec<usize>) -> Result<Self> {
        if input_dim == 0 {
            return Err(Error::InvalidArch("input dimension must be positive".into()));
        }
        if layer_dims.len() < 2 {
            return Err(Error::InvalidArch(format!(
                "need at least 2 layers, got {}",
                layer_dims.len()
            )));
        }
        if layer_dims.contains(&0) {
            return Err(Error::InvalidArch("layer widths must be positive".into()));
        }
        if layer_dims.last() != Some(&input_dim) {
            return Err(Error::InvalidArch(format!(
                "last layer width {} must equal the embedding dimension {input_dim}",
                layer_dims[layer_dims.len() - 1]
            )));
        }
        Ok(Self {
            input_dim,
            layer_dims,
        })
    }

    /// `layers` layers of width `dim`.
    pub fn uniform(dim: usize, layers: usize) -> Result<Self> {
        Self::new(dim, alloc::vec![dim; layers])
    }

    /// Four layers of width `dim`.
    pub fn default_for(dim: usize) -> Result<Self> {
        Self::uniform(dim, 4)
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn num_layers(&self) -> usize {
        self.layer_dims.len()
    }

    /// `(fan_in, fan_out)` of every layer.
    pub fn shapes(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        core::iter::once(self.input_dim)
            .chain(self.layer_dims.iter().copied())
            .zip(self.layer_dims.iter().copied())
    }

    /// Index of the layer whose activation feeds the output layer; its
    /// activations are the representation whose LID drives early stopping.
    pub fn penultimate_layer(&self) -> usize {
        self.layer_dims.len() - 2
    }

    /// Index of the middle hidden layer (the bottleneck of an
    /// encoder/decoder shaped stack such as `256-128-256-512`).
    pub fn middle_layer(&self) -> usize {
        (self.layer_dims.len() - 1) / 2
    }

    pub fn param_count(&self) -> usize {
        self.shapes().map(|(i, o)| i * o + o).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct LayerLayout {
    pub fan_in: usize,
    pub fan_out: usize,
    pub w: usize,
    pub b: usize,
}

fn layout(arch: &ArchSpec) -> Vec<LayerLayout> {
    let mut offset = 0;
    arch.shapes()
        .map(|(fan_in, fan_out)| {
            let l = LayerLayout {
                fan_in,
                fan_out,
                w: offset,
                b: offset + fan_in * fan_out,
            };
            offset += fan_in * fan_out + fan_out;
            l
        })
        .collect()
}

/// Borrowed weights and bias of one layer.
#[derive(Debug, Clone, Copy)]
pub struct LayerView<'a> {
    pub fan_in: usize,
    pub fan_out: usize,
    /// `fan_out x fan_in`, row-major.
    pub weights: &'a [f64],
    pub bias: &'a [f64],
}

/// Parameters of a reconstruction network.
#[derive(Debug, Clone, PartialEq)]
pub struct ReconModule {
    arch: ArchSpec,
    params: Vec<f64>,
    layout: Vec<LayerLayout>,
    seed: u64,
}

impl ReconModule {
    /// Wraps an explicit parameter buffer.
    pub fn from_params(arch: ArchSpec, params: Vec<f64>, seed: u64) -> Result<Self> {
        if params.len() != arch.param_count() {
            return Err(Error::ShapeMismatch {
                expected: arch.param_count(),
                actual: params.len(),
            });
        }
        if let Some(index) = params.iter().position(|p| !p.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self {
            layout: layout(&arch),
            arch,
            params,
            seed,
        })
    }

    /// All parameters zero.
    pub fn zeros(arch: ArchSpec) -> Self {
        let params = alloc::vec![0.0; arch.param_count()];
        Self {
            layout: layout(&arch),
            arch,
            params,
            seed: 0,
        }
    }

    pub fn arch(&self) -> &ArchSpec {
        &self.arch
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_layers(&self) -> usize {
        self.layout.len()
    }

    pub fn layer(&self, l: usize) -> LayerView<'_> {
        let ly = self.layout[l];
        LayerView {
            fan_in: ly.fan_in,
            fan_out: ly.fan_out,
            weights: &self.params[ly.w..ly.b],
            bias: &self.params[ly.b..ly.b + ly.fan_out],
        }
    }

    /// Mutable weights and bias of layer `l`.
    pub fn layer_mut(&mut self, l: usize) -> (&mut [f64], &mut [f64]) {
        let ly = self.layout[l];
        let (w, rest) = self.params[ly.w..].split_at_mut(ly.fan_in * ly.fan_out);
        (w, &mut rest[..ly.fan_out])
    }

    pub(crate) fn layouts(&self) -> &[LayerLayout] {
        &self.layout
    }
}

/// Glorot-uniform weights, `U(-a, a)` with `a = sqrt(6 / (fan_in + fan_out))`,
/// and zero biases. Deterministic in `seed`.
pub fn init_glorot(arch: &ArchSpec, seed: u64) -> ReconModule {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut module = ReconModule::zeros(arch.clone());
    module.seed = seed;
    for l in 0..module.num_layers() {
        let ly = module.layout[l];
        let bound = glorot_bound(ly.fan_in, ly.fan_out);
        for w in &mut module.params[ly.w..ly.b] {
            *w = rng.random_range(-bound..bound);
        }
    }
    module
}

pub fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    crate::math::sqrt(6.0 / (fan_in + fan_out) as f64)
}

/// Flat gradient buffer with the same layout as [`ReconModule::params`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients(pub Vec<f64>);

impl Gradients {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}
