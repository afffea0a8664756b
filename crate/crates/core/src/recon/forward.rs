use alloc::vec::Vec;

use rand::Rng;

use super::ReconModule;
use crate::embed::EmbeddingSet;
use crate::error::{Error, Result};
use crate::math;

/// Inverted-dropout multipliers for a whole batch: each coordinate is `0`
/// with probability `rate` and `1 / (1 - rate)` otherwise.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMask {
    rate: f64,
    values: Vec<f64>,
}

impl DropoutMask {
    pub fn sample<R: Rng + ?Sized>(rate: f64, len: usize, rng: &mut R) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidConfig(alloc::format!(
                "dropout rate must lie in [0, 1), got {rate}"
            )));
        }
        let keep = 1.0 / (1.0 - rate);
        let values = (0..len)
            .map(|_| {
                if rate > 0.0 && rng.random::<f64>() < rate {
                    0.0
                } else {
                    keep
                }
            })
            .collect();
        Ok(Self { rate, values })
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Every layer's pre-activation and activation for one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTape {
    pub(crate) n: usize,
    /// Network input after the dropout mask, `n x input_dim`.
    pub(crate) input: Vec<f64>,
    pub(crate) pre: Vec<Vec<f64>>,
    pub(crate) post: Vec<Vec<f64>>,
    pub(crate) widths: Vec<usize>,
}

impl ForwardTape {
    pub fn batch_len(&self) -> usize {
        self.n
    }

    pub fn input(&self) -> &[f64] {
        &self.input
    }

    /// Activations of layer `l`, `n x width(l)` row-major.
    pub fn activation(&self, l: usize) -> &[f64] {
        &self.post[l]
    }

    pub fn pre_activation(&self, l: usize) -> &[f64] {
        &self.pre[l]
    }

    pub fn width(&self, l: usize) -> usize {
        self.widths[l]
    }

    pub fn output(&self) -> &[f64] {
        self.post.last().map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn output_dim(&self) -> usize {
        self.widths.last().copied().unwrap_or(0)
    }

    /// Last hidden representation (input to the output layer).
    pub fn penultimate(&self) -> &[f64] {
        &self.post[self.post.len() - 2]
    }

    pub fn penultimate_dim(&self) -> usize {
        self.widths[self.widths.len() - 2]
    }
}

/// Runs `batch` through the network. `mask`, when present, multiplies the
/// inputs only.
pub fn forward(
    module: &ReconModule,
    batch: &EmbeddingSet,
    mask: Option<&DropoutMask>,
) -> Result<ForwardTape> {
    forward_rows(module, batch.data(), batch.len(), mask, 0)
}

/// Row-major variant of [`forward`]; `iteration` only annotates overflow errors.
pub fn forward_rows(
    module: &ReconModule,
    data: &[f64],
    n: usize,
    mask: Option<&DropoutMask>,
    iteration: usize,
) -> Result<ForwardTape> {
    let in_dim = module.arch().input_dim();
    if data.len() != n * in_dim {
        return Err(Error::DimensionMismatch {
            expected: n * in_dim,
            actual: data.len(),
        });
    }
    let input: Vec<f64> = match mask {
        Some(mask) => {
            if mask.values.len() != data.len() {
                return Err(Error::ShapeMismatch {
                    expected: data.len(),
                    actual: mask.values.len(),
                });
            }
            data.iter().zip(&mask.values).map(|(x, m)| x * m).collect()
        }
        None => data.to_vec(),
    };

    let layers = module.num_layers();
    let mut pre = Vec::with_capacity(layers);
    let mut post: Vec<Vec<f64>> = Vec::with_capacity(layers);
    let mut widths = Vec::with_capacity(layers);
    for l in 0..layers {
        let layer = module.layer(l);
        let prev: &[f64] = if l == 0 { &input } else { &post[l - 1] };
        let mut z = alloc::vec![0.0; n * layer.fan_out];
        for (a, zk) in prev
            .chunks_exact(layer.fan_in)
            .zip(z.chunks_exact_mut(layer.fan_out))
        {
            for ((zo, w), b) in zk
                .iter_mut()
                .zip(layer.weights.chunks_exact(layer.fan_in))
                .zip(layer.bias)
            {
                *zo = b + math::dot(a, w);
            }
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericOverflow {
                layer: l,
                iteration,
            });
        }
        let act = if l + 1 < layers {
            z.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect()
        } else {
            z.clone()
        };
        pre.push(z);
        post.push(act);
        widths.push(layer.fan_out);
    }
    Ok(ForwardTape {
        n,
        input,
        pre,
        post,
        widths,
    })
}
