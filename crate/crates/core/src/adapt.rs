//! Task adaptation by early-stopped feature reconstruction.
//!
//! Each ensemble member is a freshly initialised [`ReconModule`] trained with
//! full-batch Adam on `S ∪ Q` to reconstruct its dropout-perturbed inputs.
//! After every step the summed LID of the last hidden layer is measured in
//! inference mode; the first time it rises above the previous value, training
//! stops. Each member's outputs at the selected weights are l2-normalised and
//! averaged over the ensemble, then normalised again.

use alloc::format;
use alloc::string::ToString;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::classify::Method;
use crate::embed::normalize_rows;
use crate::error::{Error, Result};
use crate::lid::{module_lid_rows, LidConfig};
use crate::recon::{
    adam_step, forward_rows, init_glorot, reconstruction_grad, reconstruction_loss, semi_backward,
    AdamState, AffineHead, ArchSpec, DropoutMask, ForwardTape, Gradients, ReconModule,
};
use crate::seed;
use crate::task::{preprocess_task, score, Episode, FewShotTask};

/// The trade-off values searched by [`tune_lambda`].
pub const LAMBDA_GRID: [f64; 6] = [0.0, 0.1, 0.2, 0.4, 0.8, 1.6];

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum Mode {
    /// Reconstruction loss only.
    Esfr,
    /// Reconstruction plus `lambda` times a support cross-entropy.
    EsfrSemi { lambda: f64 },
}

/// Which weights a member keeps once its LID rises.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum StopWeights {
    /// The weights at which the increase was observed.
    #[default]
    PostIncrease,
    /// The weights one step earlier (the LID minimum).
    PreIncrease,
}

/// Representation exported (and probed) from each member.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum EmbeddingTap {
    #[default]
    Output,
    MiddleHidden,
}

/// How member outputs are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum Averaging {
    /// Normalise every member output, then average.
    #[default]
    NormalizeThenAverage,
    /// Average raw member outputs.
    AverageRaw,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EsfrConfig {
    pub ensemble_size: usize,
    pub max_iterations: usize,
    pub dropout_rate: f64,
    pub lid: LidConfig,
    pub lr: f64,
    pub mode: Mode,
    pub stop_weights: StopWeights,
    /// `None` selects four layers as wide as the embedding.
    pub arch: Option<ArchSpec>,
    pub embedding_tap: EmbeddingTap,
    /// Add the support/query shift term before centering.
    pub use_shift: bool,
    /// Dropout masks drawn per sample per iteration.
    pub mask_samples: usize,
    /// Apply dropout in the forward pass that feeds the LID estimate.
    pub lid_dropout: bool,
    pub averaging: Averaging,
    pub master_seed: u64,
}

impl Default for EsfrConfig {
    fn default() -> Self {
        Self {
            ensemble_size: 5,
            max_iterations: 200,
            dropout_rate: 0.5,
            lid: LidConfig::default(),
            lr: 1e-3,
            mode: Mode::Esfr,
            stop_weights: StopWeights::PostIncrease,
            arch: None,
            embedding_tap: EmbeddingTap::Output,
            use_shift: false,
            mask_samples: 1,
            lid_dropout: false,
            averaging: Averaging::NormalizeThenAverage,
            master_seed: 0,
        }
    }
}

impl EsfrConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: alloc::string::String| Err(Error::InvalidConfig(msg));
        if self.ensemble_size == 0 {
            return bad("ensemble size must be >= 1".into());
        }
        if self.max_iterations == 0 {
            return bad("max_iterations must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout rate {} outside [0, 1)", self.dropout_rate));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate {} must be positive", self.lr));
        }
        if self.mask_samples == 0 {
            return bad("mask_samples must be >= 1".into());
        }
        if let Mode::EsfrSemi { lambda } = self.mode {
            if !(lambda >= 0.0 && lambda.is_finite()) {
                return bad(format!("lambda {lambda} must be non-negative"));
            }
        }
        self.lid.validate()
    }

    pub fn arch_for(&self, dim: usize) -> Result<ArchSpec> {
        match &self.arch {
            Some(arch) if arch.input_dim() != dim => Err(Error::DimensionMismatch {
                expected: arch.input_dim(),
                actual: dim,
            }),
            Some(arch) => Ok(arch.clone()),
            None => ArchSpec::default_for(dim),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum StopReason {
    LidIncrease,
    MaxIterations,
}

/// Measurements at one set of weights `phi_t` (row 0 is the initialisation).
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TraceRow {
    pub iteration: usize,
    /// Inference-mode reconstruction loss.
    pub recon_loss: f64,
    pub lid_sum: f64,
    pub lid_mean: f64,
    pub probe_acc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrainingTrace {
    pub rows: Vec<TraceRow>,
    pub stop_iteration: usize,
    pub stop_reason: StopReason,
    /// Iteration whose weights were kept.
    pub selected_iteration: usize,
}

/// Where the stopping rule halts on a LID sequence `lids[t] = LID(phi_t)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StopDecision {
    pub stop_iteration: usize,
    pub reason: StopReason,
    pub selected_iteration: usize,
}

/// Smallest `t >= 1` with `lids[t] > lids[t - 1]`.
pub fn first_increase(lids: &[f64]) -> Option<usize> {
    lids.windows(2).position(|w| w[1] > w[0]).map(|i| i + 1)
}

/// Applies the stopping rule to a LID sequence covering `phi_0 ..= phi_max`.
pub fn decide_stop(lids: &[f64], max_iterations: usize, weights: StopWeights) -> StopDecision {
    let horizon = &lids[..lids.len().min(max_iterations + 1)];
    match first_increase(horizon) {
        Some(t) => StopDecision {
            stop_iteration: t,
            reason: StopReason::LidIncrease,
            selected_iteration: match weights {
                StopWeights::PostIncrease => t,
                StopWeights::PreIncrease => t - 1,
            },
        },
        None => StopDecision {
            stop_iteration: max_iterations,
            reason: StopReason::MaxIterations,
            selected_iteration: max_iterations,
        },
    }
}

/// Scoring data for probe rows of [`trace_probe`].
struct Probe<'a> {
    classifier: &'a Method,
    query_labels: &'a [u32],
    every: usize,
}

struct Batch<'a> {
    task: &'a FewShotTask,
    data: Vec<f64>,
    n: usize,
    dim: usize,
}

impl<'a> Batch<'a> {
    fn new(task: &'a FewShotTask) -> Self {
        Self {
            task,
            data: task.union_data(),
            n: task.total_len(),
            dim: task.dim(),
        }
    }
}

fn tap_rows(tape: &ForwardTape, arch: &ArchSpec, tap: EmbeddingTap) -> (Vec<f64>, usize) {
    match tap {
        EmbeddingTap::Output => (tape.output().to_vec(), tape.output_dim()),
        EmbeddingTap::MiddleHidden => {
            let l = arch.middle_layer();
            (tape.activation(l).to_vec(), tape.width(l))
        }
    }
}

struct Member {
    module: ReconModule,
    trace: TrainingTrace,
}

fn measure(
    module: &ReconModule,
    batch: &Batch<'_>,
    cfg: &EsfrConfig,
    iteration: usize,
    rng: &mut ChaCha8Rng,
    probe: Option<&Probe<'_>>,
) -> Result<TraceRow> {
    let tape = forward_rows(module, &batch.data, batch.n, None, iteration)?;
    let recon_loss = reconstruction_loss(&tape, &batch.data)?;
    let lid = if cfg.lid_dropout && cfg.dropout_rate > 0.0 {
        let mask = DropoutMask::sample(cfg.dropout_rate, batch.data.len(), rng)?;
        let noisy = forward_rows(module, &batch.data, batch.n, Some(&mask), iteration)?;
        module_lid_rows(noisy.penultimate(), noisy.penultimate_dim(), &cfg.lid)?
    } else {
        module_lid_rows(tape.penultimate(), tape.penultimate_dim(), &cfg.lid)?
    };
    let probe_acc = match probe {
        Some(p) if iteration.is_multiple_of(p.every) => {
            let (mut rows, dim) = tap_rows(&tape, module.arch(), cfg.embedding_tap);
            normalize_rows(&mut rows, dim);
            let tapped = batch.task.with_union_data(dim, rows)?;
            let pred = p.classifier.classify_prepared(&tapped)?;
            Some(score(&pred.classes, p.query_labels))
        }
        _ => None,
    };
    Ok(TraceRow {
        iteration,
        recon_loss,
        lid_sum: lid.sum,
        lid_mean: lid.mean,
        probe_acc,
    })
}

fn run_member(
    batch: &Batch<'_>,
    cfg: &EsfrConfig,
    member_seed: u64,
    early_stop: bool,
    probe: Option<&Probe<'_>>,
) -> Result<Member> {
    cfg.validate()?;
    let arch = cfg.arch_for(batch.dim)?;
    let mut module = init_glorot(&arch, member_seed);
    let mut adam = AdamState::new(module.params().len(), cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(member_seed, 1));
    let labels = batch.task.support_labels();

    let lambda = match cfg.mode {
        Mode::EsfrSemi { lambda } if lambda > 0.0 => Some(lambda),
        _ => None,
    };
    let mut head = lambda.map(|_| {
        let head = AffineHead::glorot(batch.task.n_way(), batch.dim, seed::derive(member_seed, 2));
        let state = AdamState::new(head.params().len(), cfg.lr);
        (head, state)
    });

    let mut rows = Vec::with_capacity(cfg.max_iterations + 1);
    rows.push(measure(&module, batch, cfg, 0, &mut rng, probe)?);
    let mut previous = None;
    let mut decision = None;
    let inv_samples = 1.0 / cfg.mask_samples as f64;

    for j in 0..cfg.max_iterations {
        if early_stop && cfg.stop_weights == StopWeights::PreIncrease {
            previous = Some(module.params().to_vec());
        }
        let mut grads = alloc::vec![0.0; module.params().len()];
        let mut head_grads = head.as_ref().map(|(h, _)| alloc::vec![0.0; h.params().len()]);
        for _ in 0..cfg.mask_samples {
            let mask = if cfg.dropout_rate > 0.0 {
                Some(DropoutMask::sample(cfg.dropout_rate, batch.data.len(), &mut rng)?)
            } else {
                None
            };
            let tape = forward_rows(&module, &batch.data, batch.n, mask.as_ref(), j)?;
            let sample_grads = match (&head, lambda) {
                (Some((h, _)), Some(lambda)) => {
                    let (_, g) = semi_backward(&module, &tape, &batch.data, labels, h, lambda)?;
                    if let Some(hg) = head_grads.as_mut() {
                        crate::math::axpy(inv_samples, &g.head, hg);
                    }
                    g.module
                }
                _ => {
                    let (_, d_out) = reconstruction_grad(&tape, &batch.data)?;
                    crate::recon::backprop(&module, &tape, &d_out)?
                }
            };
            if cfg.mask_samples == 1 {
                grads = sample_grads.0;
            } else {
                crate::math::axpy(inv_samples, sample_grads.as_slice(), &mut grads);
            }
        }
        adam_step(&mut module, &Gradients(grads), &mut adam)?;
        if let (Some((h, state)), Some(hg)) = (head.as_mut(), head_grads) {
            state.step(h.params_mut(), &hg)?;
        }

        let row = measure(&module, batch, cfg, j + 1, &mut rng, probe)?;
        let increased = row.lid_sum > rows[j].lid_sum;
        rows.push(row);
        if early_stop && increased {
            let t = j + 1;
            decision = Some(StopDecision {
                stop_iteration: t,
                reason: StopReason::LidIncrease,
                selected_iteration: match cfg.stop_weights {
                    StopWeights::PostIncrease => t,
                    StopWeights::PreIncrease => t - 1,
                },
            });
            if let (StopWeights::PreIncrease, Some(prev)) = (cfg.stop_weights, previous.take()) {
                module = ReconModule::from_params(arch.clone(), prev, member_seed)?;
            }
            break;
        }
    }
    let decision = decision.unwrap_or(StopDecision {
        stop_iteration: cfg.max_iterations,
        reason: StopReason::MaxIterations,
        selected_iteration: cfg.max_iterations,
    });
    Ok(Member {
        module,
        trace: TrainingTrace {
            rows,
            stop_iteration: decision.stop_iteration,
            stop_reason: decision.reason,
            selected_iteration: decision.selected_iteration,
        },
    })
}

/// Trains one member on a preprocessed task with LID early stopping.
pub fn train_member(
    task: &FewShotTask,
    cfg: &EsfrConfig,
    member_seed: u64,
) -> Result<(ReconModule, TrainingTrace)> {
    let batch = Batch::new(task);
    let m = run_member(&batch, cfg, member_seed, true, None)?;
    Ok((m.module, m.trace))
}

/// The adapted support and query embeddings of one task.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptedTask {
    pub task: FewShotTask,
    pub config: EsfrConfig,
    pub traces: Vec<TrainingTrace>,
    pub failed_members: usize,
    /// Union rows (support first) whose ensemble mean had (near) zero norm.
    pub degenerate_rows: Vec<usize>,
}

impl AdaptedTask {
    pub fn support(&self) -> &crate::EmbeddingSet {
        self.task.support()
    }

    pub fn query(&self) -> &crate::EmbeddingSet {
        self.task.query()
    }
}

/// Averages per-member outputs (`n x dim` row-major each) and l2-normalises
/// the result. Returns the combined rows and the degenerate row indices.
pub fn combine_members(outputs: &[Vec<f64>], dim: usize, averaging: Averaging) -> (Vec<f64>, Vec<usize>) {
    let len = outputs.first().map_or(0, Vec::len);
    let mut sum = alloc::vec![0.0; len];
    let mut scratch = alloc::vec![0.0; len];
    for out in outputs {
        match averaging {
            Averaging::NormalizeThenAverage => {
                scratch.copy_from_slice(out);
                normalize_rows(&mut scratch, dim);
                crate::math::axpy(1.0, &scratch, &mut sum);
            }
            Averaging::AverageRaw => crate::math::axpy(1.0, out, &mut sum),
        }
    }
    if !outputs.is_empty() {
        let inv = 1.0 / outputs.len() as f64;
        sum.iter_mut().for_each(|v| *v *= inv);
    }
    let degenerate = normalize_rows(&mut sum, dim);
    (sum, degenerate)
}

/// Preprocesses a raw task, trains the ensemble and returns the adapted task.
pub fn adapt(task: &FewShotTask, cfg: &EsfrConfig) -> Result<AdaptedTask> {
    cfg.validate()?;
    let prepared = preprocess_task(task, cfg.use_shift)?;
    let batch = Batch::new(&prepared.task);
    let arch = cfg.arch_for(batch.dim)?;

    let mut outputs = Vec::with_capacity(cfg.ensemble_size);
    let mut traces = Vec::with_capacity(cfg.ensemble_size);
    let mut failed = 0;
    let mut last_error = None;
    let mut out_dim = batch.dim;
    for i in 0..cfg.ensemble_size {
        let member = run_member(&batch, cfg, seed::member_seed(cfg.master_seed, i), true, None)
            .and_then(|m| {
                let tape = forward_rows(&m.module, &batch.data, batch.n, None, m.trace.stop_iteration)?;
                Ok((tap_rows(&tape, &arch, cfg.embedding_tap), m.trace))
            });
        match member {
            Ok(((rows, dim), trace)) => {
                out_dim = dim;
                outputs.push(rows);
                traces.push(trace);
            }
            Err(e) => {
                log::warn!("ensemble member {i} failed: {e}");
                failed += 1;
                last_error = Some(e);
            }
        }
    }
    if outputs.is_empty() {
        return Err(Error::AllMembersFailed(
            last_error.map(|e| e.to_string()).unwrap_or_default(),
        ));
    }
    let (rows, degenerate_rows) = combine_members(&outputs, out_dim, cfg.averaging);
    if !degenerate_rows.is_empty() {
        log::warn!("{} adapted embeddings cancelled to zero", degenerate_rows.len());
    }
    Ok(AdaptedTask {
        task: prepared.task.with_union_data(out_dim, rows)?,
        config: cfg.clone(),
        traces,
        failed_members: failed,
        degenerate_rows,
    })
}

/// [`adapt`] with the semi-supervised objective; `cfg.mode` must be
/// [`Mode::EsfrSemi`].
pub fn adapt_semi(task: &FewShotTask, cfg: &EsfrConfig) -> Result<AdaptedTask> {
    let Mode::EsfrSemi { lambda } = cfg.mode else {
        return Err(Error::InvalidConfig("adapt_semi requires the esfr-semi mode".into()));
    };
    if lambda < 0.0 {
        return Err(Error::InvalidConfig(format!("lambda {lambda} must be non-negative")));
    }
    if !LAMBDA_GRID.contains(&lambda) {
        log::info!("lambda {lambda} is outside the standard grid {LAMBDA_GRID:?}");
    }
    adapt(task, cfg)
}

/// Runs a single member for the full `max_iterations` without early stopping,
/// recording the probe accuracy of `classifier` on the configured tap every
/// `probe_every` iterations.
pub fn trace_probe(
    episode: &Episode,
    cfg: &EsfrConfig,
    classifier: &Method,
    probe_every: usize,
) -> Result<TrainingTrace> {
    if probe_every == 0 {
        return Err(Error::InvalidConfig("probe_every must be >= 1".into()));
    }
    let prepared = preprocess_task(&episode.task, cfg.use_shift)?;
    let batch = Batch::new(&prepared.task);
    let probe = Probe {
        classifier,
        query_labels: episode.query_labels(),
        every: probe_every,
    };
    let member = run_member(
        &batch,
        cfg,
        seed::member_seed(cfg.master_seed, 0),
        false,
        Some(&probe),
    )?;
    Ok(member.trace)
}

/// Outcome of [`tune_lambda`].
#[derive(Debug, Clone, PartialEq)]
pub struct LambdaChoice {
    pub lambda: f64,
    /// `(lambda, mean accuracy)` for every grid value, in grid order.
    pub accuracies: Vec<(f64, f64)>,
}

/// Picks the grid value whose semi-supervised adaptation gives the highest
/// mean validation accuracy; ties go to the smaller value.
pub fn tune_lambda(
    validation: &[Episode],
    cfg: &EsfrConfig,
    classifier: &Method,
    grid: &[f64],
) -> Result<LambdaChoice> {
    if validation.is_empty() {
        return Err(Error::InvalidConfig("validation task list is empty".into()));
    }
    if grid.is_empty() {
        return Err(Error::InvalidConfig("lambda grid is empty".into()));
    }
    let mut sorted: Vec<f64> = grid.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut accuracies = Vec::with_capacity(sorted.len());
    let mut best: Option<(f64, f64)> = None;
    for &lambda in &sorted {
        let mut member_cfg = cfg.clone();
        member_cfg.mode = Mode::EsfrSemi { lambda };
        let mut total = 0.0;
        for (i, ep) in validation.iter().enumerate() {
            member_cfg.master_seed = seed::derive(cfg.master_seed, i as u64);
            let adapted = adapt_semi(&ep.task, &member_cfg)?;
            let pred = classifier.classify_prepared(&adapted.task)?;
            total += ep.accuracy(&pred.classes);
        }
        let mean = total / validation.len() as f64;
        accuracies.push((lambda, mean));
        if best.is_none_or(|(_, acc)| mean > acc) {
            best = Some((lambda, mean));
        }
    }
    Ok(LambdaChoice {
        lambda: best.map(|(l, _)| l).unwrap_or(0.0),
        accuracies,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn stop_rule_on_scripted_sequences() {
        let d = decide_stop(&[10.0, 9.0, 9.5], 200, StopWeights::PostIncrease);
        assert_eq!(d.stop_iteration, 2);
        assert_eq!(d.reason, StopReason::LidIncrease);
        assert_eq!(d.selected_iteration, 2);
        let d = decide_stop(&[10.0, 9.0, 9.5], 200, StopWeights::PreIncrease);
        assert_eq!(d.selected_iteration, 1);

        let falling: Vec<f64> = (0..=5).map(|i| 10.0 - i as f64).collect();
        let d = decide_stop(&falling, 5, StopWeights::PostIncrease);
        assert_eq!(d.reason, StopReason::MaxIterations);
        assert_eq!(d.stop_iteration, 5);

        // equal values are not an increase
        assert_eq!(first_increase(&[3.0, 3.0, 3.0]), None);
        assert_eq!(first_increase(&[3.0, 2.0, 2.0, 2.5]), Some(3));
    }

    #[test]
    fn combine_single_identity_member() {
        let s = 0.5f64.sqrt();
        let rows = vec![s, s, 1.0, 0.0, 0.0, -1.0];
        let (out, degenerate) = combine_members(core::slice::from_ref(&rows), 2, Averaging::NormalizeThenAverage);
        assert!(degenerate.is_empty());
        for (a, b) in out.iter().zip(&rows) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn combine_cancelling_members() {
        let a = vec![0.3, -0.4, 1.0, 1.0];
        let b = vec![-0.3, 0.4, 2.0, 2.0];
        let (out, degenerate) = combine_members(&[a, b], 2, Averaging::NormalizeThenAverage);
        assert_eq!(degenerate, vec![0]);
        assert_eq!(&out[..2], &[0.0, 0.0]);
        let s = 0.5f64.sqrt();
        assert!((out[2] - s).abs() < 1e-15);
    }

    #[test]
    fn combine_raw_vs_normalized_differ() {
        let a = vec![1.0, 0.0];
        let b = vec![0.0, 3.0];
        let (n, _) = combine_members(&[a.clone(), b.clone()], 2, Averaging::NormalizeThenAverage);
        let (r, _) = combine_members(&[a, b], 2, Averaging::AverageRaw);
        assert!((n[0] - n[1]).abs() < 1e-15);
        assert!(r[1] > r[0]);
    }

    #[test]
    fn config_validation() {
        let mut cfg = EsfrConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.dropout_rate = 1.0;
        assert!(cfg.validate().is_err());
        let cfg = EsfrConfig {
            ensemble_size: 0,
            ..EsfrConfig::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = EsfrConfig {
            mode: Mode::EsfrSemi { lambda: -1.0 },
            ..EsfrConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
