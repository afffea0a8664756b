//! Reconstruction and support cross-entropy losses with analytic gradients.
//!
//! The reconstruction loss compares each target `z` with the network output
//! after the same preprocessing the inputs received: the batch mean of the
//! outputs is subtracted and every centered output is l2-normalised,
//!
//! ```text
//! L_FR = (1/n) * sum_i [ 1 - z_i . (y_i - ybar) / |y_i - ybar| ]
//! ```
//!
//! (with `z_i` normalised too). The batch mean couples all samples, so its
//! gradient has a cross-sample term.

use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{glorot_bound, ForwardTape, Gradients, ReconModule};
use crate::embed::NORM_EPS;
use crate::error::{Error, Result};
use crate::math;

fn check_targets(tape: &ForwardTape, targets: &[f64]) -> Result<()> {
    let expected = tape.batch_len() * tape.output_dim();
    if targets.len() != expected {
        return Err(Error::ShapeMismatch {
            expected,
            actual: targets.len(),
        });
    }
    Ok(())
}

/// Reconstruction loss of `tape`'s outputs against preprocessed `targets`
/// (row-major, same shape as the output). Lies in `[0, 2]`.
pub fn reconstruction_loss(tape: &ForwardTape, targets: &[f64]) -> Result<f64> {
    check_targets(tape, targets)?;
    Ok(fr_loss_and_grad(tape.output(), targets, tape.output_dim(), false).0)
}

/// Gradient of [`reconstruction_loss`] with respect to the network output.
pub fn reconstruction_grad(tape: &ForwardTape, targets: &[f64]) -> Result<(f64, Vec<f64>)> {
    check_targets(tape, targets)?;
    let (loss, grad) = fr_loss_and_grad(tape.output(), targets, tape.output_dim(), true);
    Ok((loss, grad))
}

fn fr_loss_and_grad(output: &[f64], targets: &[f64], dim: usize, with_grad: bool) -> (f64, Vec<f64>) {
    let n = output.len() / dim;
    if n == 0 {
        return (0.0, Vec::new());
    }
    let inv_n = 1.0 / n as f64;
    let mean = math::column_mean(output, dim);

    let mut loss = 0.0;
    let mut degenerate = 0usize;
    let mut d_centered = if with_grad {
        alloc::vec![0.0; output.len()]
    } else {
        Vec::new()
    };
    let mut centered = alloc::vec![0.0; dim];
    let mut target_unit = alloc::vec![0.0; dim];
    for i in 0..n {
        let y = &output[i * dim..(i + 1) * dim];
        let z = &targets[i * dim..(i + 1) * dim];
        centered.iter_mut().zip(y).zip(&mean).for_each(|((c, y), m)| *c = y - m);
        let c_norm = math::norm(&centered);
        let c_scale = c_norm.max(NORM_EPS);
        if c_norm <= NORM_EPS {
            degenerate += 1;
        }
        let z_scale = math::norm(z).max(NORM_EPS);
        target_unit.iter_mut().zip(z).for_each(|(t, z)| *t = z / z_scale);

        let cos = math::dot(&target_unit, &centered) / c_scale;
        loss += 1.0 - cos;

        if with_grad {
            // d(-cos)/dC = -(t - cos * u) / |C| with u = C/|C|; below the clamp
            // the normalisation is a fixed scale and the projection term vanishes.
            let dc = &mut d_centered[i * dim..(i + 1) * dim];
            if c_norm > NORM_EPS {
                for ((g, t), c) in dc.iter_mut().zip(&target_unit).zip(&centered) {
                    *g = -inv_n * (t - cos * c / c_norm) / c_norm;
                }
            } else {
                for (g, t) in dc.iter_mut().zip(&target_unit) {
                    *g = -inv_n * t / c_scale;
                }
            }
        }
    }
    if degenerate > 0 {
        log::warn!("{degenerate} reconstructed outputs collapsed onto the batch mean");
    }
    if with_grad {
        // through ybar: dY_i = dC_i - mean_j dC_j
        let mean_grad = math::column_mean(&d_centered, dim);
        for row in d_centered.chunks_exact_mut(dim) {
            row.iter_mut().zip(&mean_grad).for_each(|(g, m)| *g -= m);
        }
    }
    (loss * inv_n, d_centered)
}

/// Backpropagates an output gradient `grad_output` through the network.
pub fn backprop(module: &ReconModule, tape: &ForwardTape, grad_output: &[f64]) -> Result<Gradients> {
    let layers = module.num_layers();
    if tape.post.len() != layers || tape.input.len() != tape.n * module.arch().input_dim() {
        return Err(Error::ShapeMismatch {
            expected: layers,
            actual: tape.post.len(),
        });
    }
    if grad_output.len() != tape.output().len() {
        return Err(Error::ShapeMismatch {
            expected: tape.output().len(),
            actual: grad_output.len(),
        });
    }
    let mut grads = alloc::vec![0.0; module.params().len()];
    let mut d_act = grad_output.to_vec();
    for l in (0..layers).rev() {
        let ly = module.layouts()[l];
        let layer = module.layer(l);
        let mut d_pre = d_act;
        if l + 1 < layers {
            for (g, z) in d_pre.iter_mut().zip(&tape.pre[l]) {
                if *z <= 0.0 {
                    *g = 0.0;
                }
            }
        }
        let input: &[f64] = if l == 0 { &tape.input } else { &tape.post[l - 1] };
        let (gw, gb) = grads[ly.w..ly.b + ly.fan_out].split_at_mut(ly.b - ly.w);
        for (a, dz) in input
            .chunks_exact(ly.fan_in)
            .zip(d_pre.chunks_exact(ly.fan_out))
        {
            for ((g_row, gbo), &dzo) in gw.chunks_exact_mut(ly.fan_in).zip(gb.iter_mut()).zip(dz) {
                if dzo != 0.0 {
                    math::axpy(dzo, a, g_row);
                    *gbo += dzo;
                }
            }
        }
        if l == 0 {
            break;
        }
        let mut d_prev = alloc::vec![0.0; tape.n * ly.fan_in];
        for (dp, dz) in d_prev
            .chunks_exact_mut(ly.fan_in)
            .zip(d_pre.chunks_exact(ly.fan_out))
        {
            for (w_row, &dzo) in layer.weights.chunks_exact(ly.fan_in).zip(dz) {
                if dzo != 0.0 {
                    math::axpy(dzo, w_row, dp);
                }
            }
        }
        d_act = d_prev;
    }
    Ok(Gradients(grads))
}

/// Exact gradient of [`reconstruction_loss`] with respect to every parameter.
pub fn backward(module: &ReconModule, tape: &ForwardTape, targets: &[f64]) -> Result<Gradients> {
    let (_, grad_out) = reconstruction_grad(tape, targets)?;
    backprop(module, tape, &grad_out)
}

/// Affine classifier `W y + b` over network outputs, trained jointly with the
/// network in the semi-supervised variant.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineHead {
    classes: usize,
    dim: usize,
    /// `W` (`classes x dim`, row-major) followed by `b`.
    params: Vec<f64>,
}

impl AffineHead {
    pub fn zeros(classes: usize, dim: usize) -> Self {
        Self {
            classes,
            dim,
            params: alloc::vec![0.0; classes * dim + classes],
        }
    }

    pub fn from_parts(classes: usize, dim: usize, weights: &[f64], bias: &[f64]) -> Result<Self> {
        if weights.len() != classes * dim || bias.len() != classes {
            return Err(Error::ShapeMismatch {
                expected: classes * dim + classes,
                actual: weights.len() + bias.len(),
            });
        }
        let mut params = weights.to_vec();
        params.extend_from_slice(bias);
        Ok(Self {
            classes,
            dim,
            params,
        })
    }

    /// Glorot-uniform `W`, zero `b`.
    pub fn glorot(classes: usize, dim: usize, seed: u64) -> Self {
        let mut head = Self::zeros(classes, dim);
        let bound = glorot_bound(dim, classes);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for w in &mut head.params[..classes * dim] {
            *w = rng.random_range(-bound..bound);
        }
        head
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn weights(&self) -> &[f64] {
        &self.params[..self.classes * self.dim]
    }

    pub fn bias(&self) -> &[f64] {
        &self.params[self.classes * self.dim..]
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn logits(&self, y: &[f64], out: &mut [f64]) {
        for ((o, w), b) in out.iter_mut().zip(self.weights().chunks_exact(self.dim)).zip(self.bias()) {
            *o = b + math::dot(w, y);
        }
    }
}

fn log_softmax_in_place(logits: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + math::ln(logits.iter().map(|&l| math::exp(l - max)).sum::<f64>());
    logits.iter_mut().for_each(|l| *l -= lse);
}

/// Mean negative log-softmax probability of the true labels of the first
/// `labels.len()` output rows, plus its gradients with respect to those rows
/// and to the head.
fn ce_loss_and_grad(
    output: &[f64],
    dim: usize,
    labels: &[u32],
    head: &AffineHead,
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let s = labels.len();
    if s == 0 {
        return Ok((0.0, alloc::vec![0.0; output.len()], alloc::vec![0.0; head.params.len()]));
    }
    if head.dim != dim || s * dim > output.len() {
        return Err(Error::ShapeMismatch {
            expected: head.dim,
            actual: dim,
        });
    }
    let inv_s = 1.0 / s as f64;
    let mut loss = 0.0;
    let mut d_out = alloc::vec![0.0; output.len()];
    let mut d_head = alloc::vec![0.0; head.params.len()];
    let mut logp = alloc::vec![0.0; head.classes];
    let w_len = head.classes * dim;
    for (i, &label) in labels.iter().enumerate() {
        let label = label as usize;
        if label >= head.classes {
            return Err(Error::LabelOutOfRange {
                label: label as u32,
                class_count: head.classes,
            });
        }
        let y = &output[i * dim..(i + 1) * dim];
        head.logits(y, &mut logp);
        log_softmax_in_place(&mut logp);
        loss -= logp[label];
        let dy = &mut d_out[i * dim..(i + 1) * dim];
        for (c, &lp) in logp.iter().enumerate() {
            let dlogit = inv_s * (math::exp(lp) - if c == label { 1.0 } else { 0.0 });
            math::axpy(dlogit, y, &mut d_head[c * dim..(c + 1) * dim]);
            d_head[w_len + c] += dlogit;
            math::axpy(dlogit, &head.weights()[c * dim..(c + 1) * dim], dy);
        }
    }
    Ok((loss * inv_s, d_out, d_head))
}

/// Cross-entropy of the head on the first `labels.len()` rows of `tape`'s output.
pub fn cross_entropy(tape: &ForwardTape, labels: &[u32], head: &AffineHead) -> Result<f64> {
    Ok(ce_loss_and_grad(tape.output(), tape.output_dim(), labels, head)?.0)
}

/// Components of the semi-supervised objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SemiLoss {
    pub reconstruction: f64,
    pub cross_entropy: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SemiGradients {
    pub module: Gradients,
    pub head: Vec<f64>,
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidConfig(alloc::format!(
            "lambda must be a finite non-negative number, got {lambda}"
        )));
    }
    Ok(())
}

/// `L_FR + lambda * L_CE`, where the cross-entropy covers the support rows,
/// which by convention are the first `support_labels.len()` rows of the batch.
/// At `lambda == 0` the result is exactly the reconstruction loss.
pub fn semi_loss(
    tape: &ForwardTape,
    targets: &[f64],
    support_labels: &[u32],
    head: &AffineHead,
    lambda: f64,
) -> Result<f64> {
    check_lambda(lambda)?;
    let fr = reconstruction_loss(tape, targets)?;
    if lambda == 0.0 {
        return Ok(fr);
    }
    Ok(fr + lambda * cross_entropy(tape, support_labels, head)?)
}

/// Gradients of [`semi_loss`] with respect to the network and the head.
pub fn semi_backward(
    module: &ReconModule,
    tape: &ForwardTape,
    targets: &[f64],
    support_labels: &[u32],
    head: &AffineHead,
    lambda: f64,
) -> Result<(SemiLoss, SemiGradients)> {
    check_lambda(lambda)?;
    let (fr, mut d_out) = reconstruction_grad(tape, targets)?;
    let (ce, d_head) = if lambda == 0.0 {
        (0.0, alloc::vec![0.0; head.params.len()])
    } else {
        let (ce, d_ce_out, mut d_head) =
            ce_loss_and_grad(tape.output(), tape.output_dim(), support_labels, head)?;
        math::axpy(lambda, &d_ce_out, &mut d_out);
        d_head.iter_mut().for_each(|g| *g *= lambda);
        (ce, d_head)
    };
    let total = if lambda == 0.0 { fr } else { fr + lambda * ce };
    Ok((
        SemiLoss {
            reconstruction: fr,
            cross_entropy: ce,
            total,
        },
        SemiGradients {
            module: backprop(module, tape, &d_out)?,
            head: d_head,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::recon::{forward_rows, init_glorot, ArchSpec};
    use alloc::vec;
    use approx::assert_abs_diff_eq;

    fn identity_module(dim: usize) -> ReconModule {
        let arch = ArchSpec::uniform(dim, 2).unwrap();
        let mut m = ReconModule::zeros(arch);
        // relu(x + 10) - 10 == x for x > -10
        for l in 0..2 {
            let (w, b) = m.layer_mut(l);
            for i in 0..dim {
                w[i * dim + i] = 1.0;
            }
            let shift = if l == 0 { 10.0 } else { -10.0 };
            b.iter_mut().for_each(|bi| *bi = shift);
        }
        m
    }

    #[test]
    fn identity_reconstruction_has_zero_loss() {
        // centered, unit rows
        let s = 0.5f64.sqrt();
        let targets = vec![s, s, -s, -s, 1.0, 0.0, -1.0, 0.0];
        let m = identity_module(2);
        let tape = forward_rows(&m, &targets, 4, None, 0).unwrap();
        assert_abs_diff_eq!(reconstruction_loss(&tape, &targets).unwrap(), 0.0, epsilon = 1e-12);
    }

    fn tape_with_output(output: Vec<f64>, dim: usize) -> ForwardTape {
        let n = output.len() / dim;
        ForwardTape {
            n,
            input: vec![0.0; output.len()],
            pre: vec![output.clone(), output.clone()],
            post: vec![output.clone(), output],
            widths: vec![dim, dim],
        }
    }

    #[test]
    fn orthogonal_outputs_have_unit_loss() {
        // outputs already centered, each orthogonal to its target
        let out = vec![0.0, 2.0, 0.0, -2.0];
        let targets = vec![1.0, 0.0, -1.0, 0.0];
        let tape = tape_with_output(out, 2);
        assert_abs_diff_eq!(reconstruction_loss(&tape, &targets).unwrap(), 1.0, epsilon = 1e-15);
    }

    #[test]
    fn three_sample_hand_computed() {
        // outputs (1,2),(3,2),(2,5): mean (2,3); centered (-1,-1),(1,-1),(0,2)
        // unit: (-1,-1)/√2, (1,-1)/√2, (0,1)
        // targets (1,0),(0,-1),(0.6,0.8): cos = -1/√2, 1/√2, 0.8
        let tape = tape_with_output(vec![1.0, 2.0, 3.0, 2.0, 2.0, 5.0], 2);
        let targets = vec![1.0, 0.0, 0.0, -1.0, 0.6, 0.8];
        let expected = ((1.0 + 0.5f64.sqrt()) + (1.0 - 0.5f64.sqrt()) + 0.2) / 3.0;
        assert_abs_diff_eq!(reconstruction_loss(&tape, &targets).unwrap(), expected, epsilon = 1e-15);
    }

    #[test]
    fn zero_weight_gradient_is_finite() {
        let m = ReconModule::zeros(ArchSpec::default_for(3).unwrap());
        let x = vec![0.6, 0.8, 0.0, -0.6, -0.8, 0.0];
        let tape = forward_rows(&m, &x, 2, None, 0).unwrap();
        let g = backward(&m, &tape, &x).unwrap();
        assert!(g.as_slice().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let head = AffineHead::zeros(5, 3);
        let tape = tape_with_output(vec![0.3, -0.1, 0.7, 1.0, 2.0, 3.0], 3);
        let ce = cross_entropy(&tape, &[0, 4], &head).unwrap();
        assert_abs_diff_eq!(ce, 5f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn semi_lambda_zero_is_reconstruction() {
        let arch = ArchSpec::default_for(4).unwrap();
        let m = init_glorot(&arch, 5);
        let x: Vec<f64> = (0..12).map(|i| ((i * 7 % 5) as f64 - 2.0) / 3.0).collect();
        let tape = forward_rows(&m, &x, 3, None, 0).unwrap();
        let head = AffineHead::glorot(2, 4, 1);
        let fr = reconstruction_loss(&tape, &x).unwrap();
        assert_eq!(semi_loss(&tape, &x, &[0, 1], &head, 0.0).unwrap(), fr);
        let (parts, grads) = semi_backward(&m, &tape, &x, &[0, 1], &head, 0.0).unwrap();
        assert_eq!(parts.total, fr);
        assert_eq!(grads.module, backward(&m, &tape, &x).unwrap());
        assert!(semi_loss(&tape, &x, &[0, 1], &head, -0.1).is_err());
    }

    #[test]
    fn semi_hand_computed() {
        // head W = [[1,0],[0,1]], b = 0; outputs (y rows) (2,0) and (0,1) with labels 0, 1
        // CE_1 = -ln(e^2/(e^2+1)), CE_2 = -ln(e/(1+e))
        let head = AffineHead::from_parts(2, 2, &[1.0, 0.0, 0.0, 1.0], &[0.0, 0.0]).unwrap();
        let out = vec![2.0, 0.0, 0.0, 1.0, -2.0, -1.0];
        let tape = tape_with_output(out, 2);
        let targets = vec![1.0, 0.0, 0.0, 1.0, -1.0, 0.0];
        let e = core::f64::consts::E;
        let ce = 0.5 * (-(e * e / (e * e + 1.0)).ln() - (e / (1.0 + e)).ln());
        let fr = reconstruction_loss(&tape, &targets).unwrap();
        let total = semi_loss(&tape, &targets, &[0, 1], &head, 0.4).unwrap();
        assert_abs_diff_eq!(total, fr + 0.4 * ce, epsilon = 1e-12);
    }
}
