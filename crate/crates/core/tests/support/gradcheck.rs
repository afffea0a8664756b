//! Central-difference gradient check against an independent nested-loop
//! implementation of the network and both losses. Shared with the
//! acceptance suite of `esfr-bench`.

use esfr_core::recon::{
    backward, forward_rows, init_glorot, semi_backward, AffineHead, ArchSpec, DropoutMask, ReconModule,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-5;
pub const TOL: f64 = 1e-4;
const KINK: f64 = 1e-4;

/// Plain nested-loop forward pass. Returns the outputs and the smallest
/// absolute hidden pre-activation.
fn reference_forward(module: &ReconModule, input: &[f64], n: usize) -> (Vec<f64>, f64) {
    let mut act = input.to_vec();
    let mut width = module.arch().input_dim();
    let mut min_pre = f64::INFINITY;
    let layers = module.num_layers();
    for l in 0..layers {
        let view = module.layer(l);
        let mut next = vec![0.0; n * view.fan_out];
        for r in 0..n {
            for o in 0..view.fan_out {
                let mut z = view.bias[o];
                for i in 0..width {
                    z += view.weights[o * view.fan_in + i] * act[r * width + i];
                }
                if l + 1 < layers {
                    min_pre = min_pre.min(z.abs());
                    z = z.max(0.0);
                }
                next[r * view.fan_out + o] = z;
            }
        }
        act = next;
        width = view.fan_out;
    }
    (act, min_pre)
}

/// Smallest norm of a batch-centered output row; the loss has a kink at 0.
fn min_centered_norm(y: &[f64], d: usize) -> f64 {
    let n = y.len() / d;
    let mean: Vec<f64> = (0..d).map(|k| (0..n).map(|r| y[r * d + k]).sum::<f64>() / n as f64).collect();
    (0..n)
        .map(|r| (0..d).map(|k| (y[r * d + k] - mean[k]).powi(2)).sum::<f64>().sqrt())
        .fold(f64::INFINITY, f64::min)
}

fn reference_fr(y: &[f64], z: &[f64], d: usize) -> f64 {
    let n = y.len() / d;
    let mean: Vec<f64> = (0..d).map(|k| (0..n).map(|r| y[r * d + k]).sum::<f64>() / n as f64).collect();
    let mut total = 0.0;
    for r in 0..n {
        let c: Vec<f64> = (0..d).map(|k| y[r * d + k] - mean[k]).collect();
        let t = &z[r * d..(r + 1) * d];
        let cn = c.iter().map(|v| v * v).sum::<f64>().sqrt();
        let tn = t.iter().map(|v| v * v).sum::<f64>().sqrt();
        let dot: f64 = c.iter().zip(t).map(|(a, b)| a * b).sum();
        total += 1.0 - dot / (cn * tn);
    }
    total / n as f64
}

fn reference_ce(y: &[f64], d: usize, labels: &[u32], head: &[f64], classes: usize) -> f64 {
    let (w, b) = head.split_at(classes * d);
    let mut total = 0.0;
    for (r, &label) in labels.iter().enumerate() {
        let logits: Vec<f64> = (0..classes)
            .map(|c| b[c] + (0..d).map(|k| w[c * d + k] * y[r * d + k]).sum::<f64>())
            .collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += lse - logits[label as usize];
    }
    total / labels.len() as f64
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

struct Case {
    module: ReconModule,
    input: Vec<f64>,
    targets: Vec<f64>,
    n: usize,
}

fn random_case(rng: &mut ChaCha8Rng, layers: usize) -> Case {
    loop {
        let d = rng.random_range(2..=8);
        let mut dims: Vec<usize> = (0..layers - 1).map(|_| rng.random_range(2..=8)).collect();
        dims.push(d);
        let arch = ArchSpec::new(d, dims).unwrap();
        let mut module = init_glorot(&arch, rng.random());
        for l in 0..module.num_layers() {
            let (_, b) = module.layer_mut(l);
            b.iter_mut().for_each(|v| *v = rng.random_range(-0.3..0.3));
        }
        let n = rng.random_range(3..=10);
        let raw: Vec<f64> = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let input = if rng.random_bool(0.5) {
            let mask = DropoutMask::sample(0.5, n * d, rng).unwrap();
            raw.iter().zip(mask.values()).map(|(x, m)| x * m).collect()
        } else {
            raw
        };
        let targets: Vec<f64> = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (y, min_pre) = reference_forward(&module, &input, n);
        if min_pre > KINK && min_centered_norm(&y, d) > 1e-3 {
            return Case {
                module,
                input,
                targets,
                n,
            };
        }
    }
}

fn fr_objective(case: &Case, module: &ReconModule) -> f64 {
    let (y, _) = reference_forward(module, &case.input, case.n);
    reference_fr(&y, &case.targets, module.arch().input_dim())
}

/// Checks `trials` random configurations (alternating 2 and 4 layers, all
/// widths <= 8) of the reconstruction loss. Returns the worst relative error.
pub fn check_reconstruction(seed: u64, trials: usize) -> Result<f64, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for trial in 0..trials {
        let layers = if trial % 2 == 0 { 2 } else { 4 };
        let case = random_case(&mut rng, layers);
        let tape = forward_rows(&case.module, &case.input, case.n, None, 0).map_err(|e| e.to_string())?;
        let analytic = backward(&case.module, &tape, &case.targets).map_err(|e| e.to_string())?;
        let mut probe = case.module.clone();
        for k in 0..probe.params().len() {
            let orig = probe.params()[k];
            probe.params_mut()[k] = orig + H;
            let up = fr_objective(&case, &probe);
            probe.params_mut()[k] = orig - H;
            let down = fr_objective(&case, &probe);
            probe.params_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * H);
            let a = analytic.as_slice()[k];
            let e = rel_err(a, numeric);
            if e >= TOL {
                return Err(format!("trial {trial} param {k}: analytic {a} numeric {numeric}"));
            }
            worst = worst.max(e);
        }
    }
    Ok(worst)
}

/// Same as [`check_reconstruction`] for the reconstruction plus weighted
/// support cross-entropy objective, including the head parameters.
pub fn check_semi(seed: u64, trials: usize) -> Result<f64, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for trial in 0..trials {
        let layers = if trial % 2 == 0 { 2 } else { 4 };
        let case = random_case(&mut rng, layers);
        let d = case.module.arch().input_dim();
        let classes = rng.random_range(2..=4);
        let s = rng.random_range(1..=case.n);
        let labels: Vec<u32> = (0..s).map(|_| rng.random_range(0..classes as u32)).collect();
        let head = AffineHead::glorot(classes, d, rng.random());
        let lambda = [0.1, 0.4, 1.6, 0.73][trial % 4];

        let tape = forward_rows(&case.module, &case.input, case.n, None, 0).map_err(|e| e.to_string())?;
        let (loss, grads) = semi_backward(&case.module, &tape, &case.targets, &labels, &head, lambda)
            .map_err(|e| e.to_string())?;

        let objective = |module: &ReconModule, head: &[f64]| {
            let (y, _) = reference_forward(module, &case.input, case.n);
            reference_fr(&y, &case.targets, d) + lambda * reference_ce(&y, d, &labels, head, classes)
        };
        let base = objective(&case.module, head.params());
        if (loss.total - base).abs() > 1e-12 {
            return Err(format!("trial {trial}: loss {} vs reference {base}", loss.total));
        }

        let mut probe = case.module.clone();
        for k in 0..probe.params().len() {
            let orig = probe.params()[k];
            probe.params_mut()[k] = orig + H;
            let up = objective(&probe, head.params());
            probe.params_mut()[k] = orig - H;
            let down = objective(&probe, head.params());
            probe.params_mut()[k] = orig;
            let e = rel_err(grads.module.as_slice()[k], (up - down) / (2.0 * H));
            if e >= TOL {
                return Err(format!("trial {trial} module param {k}: relative error {e}"));
            }
            worst = worst.max(e);
        }
        let mut hp = head.params().to_vec();
        for k in 0..hp.len() {
            let orig = hp[k];
            hp[k] = orig + H;
            let up = objective(&case.module, &hp);
            hp[k] = orig - H;
            let down = objective(&case.module, &hp);
            hp[k] = orig;
            let e = rel_err(grads.head[k], (up - down) / (2.0 * H));
            if e >= TOL {
                return Err(format!("trial {trial} head param {k}: relative error {e}"));
            }
            worst = worst.max(e);
        }
    }
    Ok(worst)
}
