//! Episodic evaluation with a 95% normal-approximation confidence interval.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use esfr_core::adapt::{Averaging, EmbeddingTap, Mode, StopWeights};
use esfr_core::{adapt, adapt_semi, seed, EmbeddingSet, EsfrConfig, Method, ZeroDistancePolicy};

use crate::episode::{sample_episode, ClassPool, EpisodeSpec};
use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdaptMode {
    None,
    Esfr,
    EsfrSemi,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub episodes: EpisodeSpec,
    pub method: Method,
    pub adapt: AdaptMode,
    /// Ignored when `adapt` is [`AdaptMode::None`]. Its `master_seed` is the
    /// root of the per-task seeds.
    pub esfr: EsfrConfig,
}

/// Every setting that influences a report, as one flat record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlatConfig {
    pub n_way: usize,
    pub k_shot: usize,
    pub query_profile: Vec<usize>,
    pub tasks: usize,
    pub seed: u64,
    pub method: String,
    pub linear_epochs: Option<usize>,
    pub linear_lr: Option<f64>,
    pub linear_l2: Option<f64>,
    pub rectify_temperature: Option<f64>,
    pub rectify_rounds: Option<usize>,
    pub adapt: AdaptMode,
    pub lambda: Option<f64>,
    pub ensemble: usize,
    pub dropout: f64,
    pub max_iter: usize,
    pub m: usize,
    pub lid_zero_policy: ZeroDistancePolicy,
    pub lr: f64,
    pub stop_weights: StopWeights,
    pub layer_dims: Option<Vec<usize>>,
    pub tap: EmbeddingTap,
    pub use_shift: bool,
    pub mask_samples: usize,
    pub lid_dropout: bool,
    pub averaging: Averaging,
    pub esfr_seed: u64,
}

impl EvalConfig {
    pub fn flat(&self) -> FlatConfig {
        let e = &self.esfr;
        let (linear, rectify) = match self.method {
            Method::Linear(c) => (Some(c), None),
            Method::BdCspn(c) => (None, Some(c)),
            _ => (None, None),
        };
        FlatConfig {
            n_way: self.episodes.n_way,
            k_shot: self.episodes.k_shot,
            query_profile: self.episodes.query_profile.clone(),
            tasks: self.episodes.task_count,
            seed: self.episodes.master_seed,
            method: self.method.name().to_string(),
            linear_epochs: linear.map(|c| c.epochs),
            linear_lr: linear.map(|c| c.lr),
            linear_l2: linear.map(|c| c.l2),
            rectify_temperature: rectify.map(|c| c.temperature),
            rectify_rounds: rectify.map(|c| c.rounds),
            adapt: self.adapt,
            lambda: match e.mode {
                Mode::EsfrSemi { lambda } => Some(lambda),
                Mode::Esfr => None,
            },
            ensemble: e.ensemble_size,
            dropout: e.dropout_rate,
            max_iter: e.max_iterations,
            m: e.lid.m,
            lid_zero_policy: e.lid.zero_distance_policy,
            lr: e.lr,
            stop_weights: e.stop_weights,
            layer_dims: e.arch.as_ref().map(|a| a.layer_dims().to_vec()),
            tap: e.embedding_tap,
            use_shift: e.use_shift,
            mask_samples: e.mask_samples,
            lid_dropout: e.lid_dropout,
            averaging: e.averaging,
            esfr_seed: e.master_seed,
        }
    }

    /// FNV-1a over the canonical JSON of [`EvalConfig::flat`], as 16 hex digits.
    pub fn fingerprint(&self) -> String {
        let bytes = serde_json::to_vec(&self.flat()).expect("config serialises");
        let hash = bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| {
            (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
        });
        format!("{hash:016x}")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(flatten)]
    pub config: FlatConfig,
    /// Mean accuracy over scored tasks, in percent.
    pub mean_acc: f64,
    pub ci95: f64,
    /// Number of scored tasks.
    pub task_count: usize,
    /// Tasks whose adaptation failed outright (excluded from the mean).
    pub failures: usize,
    /// Ensemble members that failed in otherwise scored tasks.
    pub member_failures: usize,
    /// Per-task accuracy in percent, `null` for failed tasks.
    pub per_task_acc: Vec<Option<f64>>,
    pub fingerprint: String,
}

impl EvalReport {
    /// Pretty JSON with a trailing newline; keys are in a fixed order.
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serialises");
        s.push('\n');
        s
    }
}

/// Mean and `1.96 * sigma / sqrt(n)` half-width, with the population
/// standard deviation.
pub fn mean_ci95(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.96 * var.sqrt() / n.sqrt())
}

/// Worker count from `ESFR_THREADS`, else the available parallelism.
pub fn worker_count() -> usize {
    std::env::var("ESFR_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

enum TaskOutcome {
    Scored { accuracy: f64, failed_members: usize },
    Failed,
}

fn run_task(pool: &ClassPool<'_>, cfg: &EvalConfig, index: usize) -> Result<TaskOutcome> {
    let sampled = sample_episode(pool, &cfg.episodes, index)?;
    let episode = &sampled.episode;
    let (prediction, failed_members) = match cfg.adapt {
        AdaptMode::None => (cfg.method.classify_raw(&episode.task)?, 0),
        AdaptMode::Esfr | AdaptMode::EsfrSemi => {
            let mut esfr = cfg.esfr.clone();
            esfr.master_seed = seed::derive(cfg.esfr.master_seed, index as u64);
            let adapted = if cfg.adapt == AdaptMode::EsfrSemi {
                adapt_semi(&episode.task, &esfr)
            } else {
                adapt(&episode.task, &esfr)
            };
            match adapted {
                Ok(a) => (cfg.method.classify_prepared(&a.task)?, a.failed_members),
                Err(e @ esfr_core::Error::AllMembersFailed(_)) => {
                    log::warn!("task {index}: {e}");
                    return Ok(TaskOutcome::Failed);
                }
                Err(e) => return Err(e.into()),
            }
        }
    };
    Ok(TaskOutcome::Scored {
        accuracy: 100.0 * episode.accuracy(&prediction.classes),
        failed_members,
    })
}

/// Samples, adapts and classifies `cfg.episodes.task_count` tasks in
/// parallel and reduces them in task-index order.
pub fn evaluate(dataset: &EmbeddingSet, cfg: &EvalConfig) -> Result<EvalReport> {
    cfg.episodes.validate(dataset.class_count())?;
    if cfg.adapt != AdaptMode::None {
        cfg.esfr.validate()?;
    }
    if cfg.adapt == AdaptMode::EsfrSemi && !matches!(cfg.esfr.mode, Mode::EsfrSemi { .. }) {
        return Err(HarnessError::Config("esfr-semi needs a lambda".into()));
    }
    let pool = ClassPool::new(dataset)?;
    let workers = rayon::ThreadPoolBuilder::new()
        .num_threads(worker_count())
        .build()
        .map_err(|e| HarnessError::Config(format!("thread pool: {e}")))?;
    let outcomes: Vec<Result<TaskOutcome>> = workers.install(|| {
        (0..cfg.episodes.task_count)
            .into_par_iter()
            .map(|i| run_task(&pool, cfg, i))
            .collect()
    });

    let mut per_task_acc = Vec::with_capacity(outcomes.len());
    let mut failures = 0;
    let mut member_failures = 0;
    for outcome in outcomes {
        match outcome? {
            TaskOutcome::Scored {
                accuracy,
                failed_members,
            } => {
                per_task_acc.push(Some(accuracy));
                member_failures += failed_members;
            }
            TaskOutcome::Failed => {
                per_task_acc.push(None);
                failures += 1;
            }
        }
    }
    let scored: Vec<f64> = per_task_acc.iter().flatten().copied().collect();
    let (mean_acc, ci95) = mean_ci95(&scored);
    Ok(EvalReport {
        config: cfg.flat(),
        mean_acc,
        ci95,
        task_count: scored.len(),
        failures,
        member_failures,
        per_task_acc,
        fingerprint: cfg.fingerprint(),
    })
}
