//! Downstream few-shot classifiers.
//!
//! All classifiers here consume an already-prepared [`FewShotTask`]; the
//! preprocessing appropriate for a *raw* task is applied by
//! [`Method::classify_raw`] (and by [`bdcspn_classify`], which owns its
//! shift/center/normalise step).

use alloc::vec::Vec;

use crate::embed::{cosine_similarity_unchecked, NORM_EPS};
use crate::error::{Error, Result};
use crate::math;
use crate::task::{preprocess_task, FewShotTask};

/// One centroid per class, `n_way x dim` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Prototypes {
    dim: usize,
    data: Vec<f64>,
}

impl Prototypes {
    /// Support centroid of every class.
    pub fn from_support(task: &FewShotTask) -> Result<Self> {
        let dim = task.dim();
        let n = task.n_way();
        let mut data = alloc::vec![0.0; n * dim];
        let mut counts = alloc::vec![0usize; n];
        for (row, &label) in task.support().rows().zip(task.support_labels()) {
            let c = label as usize;
            math::axpy(1.0, row, &mut data[c * dim..(c + 1) * dim]);
            counts[c] += 1;
        }
        if let Some(class) = counts.iter().position(|&c| c == 0) {
            return Err(Error::MissingClass { class });
        }
        for (proto, &count) in data.chunks_exact_mut(dim).zip(&counts) {
            let inv = 1.0 / count as f64;
            proto.iter_mut().for_each(|v| *v *= inv);
        }
        Ok(Self { dim, data })
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, class: usize) -> &[f64] {
        &self.data[class * self.dim..(class + 1) * self.dim]
    }

    pub fn iter(&self) -> core::slice::ChunksExact<'_, f64> {
        self.data.chunks_exact(self.dim)
    }
}

/// Predicted class per query, with optional per-class scores
/// (`n_queries x n_way`, higher is better).
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub classes: Vec<u32>,
    pub scores: Option<Vec<f64>>,
}

/// Index of the maximum, ties to the lowest index.
fn argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (i, v) in values.enumerate() {
        if v > best_v {
            best = i;
            best_v = v;
        }
    }
    best
}

fn predict_by_score(task: &FewShotTask, score: impl Fn(&[f64], usize) -> f64) -> Prediction {
    let n = task.n_way();
    let mut scores = Vec::with_capacity(task.query().len() * n);
    let classes = task
        .query()
        .rows()
        .map(|q| {
            let start = scores.len();
            scores.extend((0..n).map(|c| score(q, c)));
            argmax(scores[start..].iter().copied()) as u32
        })
        .collect();
    Prediction {
        classes,
        scores: Some(scores),
    }
}

/// Nearest support centroid under Euclidean distance.
pub fn nn_classify(task: &FewShotTask) -> Result<Prediction> {
    let protos = Prototypes::from_support(task)?;
    Ok(predict_by_score(task, |q, c| -math::sq_dist(q, protos.get(c))))
}

fn warn_degenerate(protos: &Prototypes) {
    let degenerate = protos.iter().filter(|p| math::norm(p) <= NORM_EPS).count();
    if degenerate > 0 {
        log::warn!("{degenerate} prototypes have (near) zero norm");
    }
}

/// Support centroid with the highest cosine similarity.
pub fn cspn_classify(task: &FewShotTask) -> Result<Prediction> {
    let protos = Prototypes::from_support(task)?;
    warn_degenerate(&protos);
    Ok(predict_by_score(task, |q, c| {
        cosine_similarity_unchecked(q, protos.get(c))
    }))
}

/// Settings of the prototype rectification step.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct RectifyConfig {
    /// Softmax temperature: member weights are `softmax(cos / temperature)`.
    pub temperature: f64,
    /// Number of pseudo-label / re-weight rounds; 0 reduces to cosine prototypes.
    pub rounds: usize,
}

impl Default for RectifyConfig {
    fn default() -> Self {
        Self {
            temperature: 0.1,
            rounds: 1,
        }
    }
}

/// Rectifies cosine prototypes with pseudo-labeled queries and classifies
/// by cosine similarity to the rectified prototypes. Expects prepared
/// (shifted, centered and normalised, or adapted) embeddings.
pub fn rectify_classify(task: &FewShotTask, cfg: &RectifyConfig) -> Result<Prediction> {
    if cfg.temperature.is_nan() || cfg.temperature <= 0.0 {
        return Err(Error::InvalidConfig(alloc::format!(
            "rectification temperature must be positive, got {}",
            cfg.temperature
        )));
    }
    let protos = rectify_prototypes(task, Prototypes::from_support(task)?, cfg)?;
    warn_degenerate(&protos);
    Ok(predict_by_score(task, |q, c| {
        cosine_similarity_unchecked(q, protos.get(c))
    }))
}

/// Runs `cfg.rounds` rectification rounds starting from `protos`.
pub fn rectify_prototypes(
    task: &FewShotTask,
    mut protos: Prototypes,
    cfg: &RectifyConfig,
) -> Result<Prototypes> {
    let dim = task.dim();
    let n = task.n_way();
    let mut members: Vec<&[f64]> = Vec::new();
    let mut sims: Vec<f64> = Vec::new();
    for _ in 0..cfg.rounds {
        let pseudo: Vec<usize> = task
            .query()
            .rows()
            .map(|q| argmax(protos.iter().map(|p| cosine_similarity_unchecked(q, p))))
            .collect();
        let mut next = alloc::vec![0.0; n * dim];
        for c in 0..n {
            members.clear();
            members.extend(
                task.support()
                    .rows()
                    .zip(task.support_labels())
                    .filter(|(_, &l)| l as usize == c)
                    .map(|(r, _)| r),
            );
            members.extend(
                task.query()
                    .rows()
                    .zip(&pseudo)
                    .filter(|(_, &p)| p == c)
                    .map(|(r, _)| r),
            );
            let proto = protos.get(c);
            sims.clear();
            sims.extend(
                members
                    .iter()
                    .map(|x| cosine_similarity_unchecked(x, proto) / cfg.temperature),
            );
            let max = sims.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            sims.iter_mut().for_each(|s| *s = math::exp(*s - max));
            let total: f64 = sims.iter().sum();
            let out = &mut next[c * dim..(c + 1) * dim];
            for (x, w) in members.iter().zip(&sims) {
                math::axpy(w / total, x, out);
            }
        }
        protos = Prototypes { dim, data: next };
    }
    Ok(protos)
}

/// Shift-term preprocessing followed by prototype rectification.
pub fn bdcspn_classify(task: &FewShotTask, cfg: &RectifyConfig) -> Result<Prediction> {
    let prepared = preprocess_task(task, true)?;
    rectify_classify(&prepared.task, cfg)
}

/// Multinomial logistic regression settings.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LinearConfig {
    pub epochs: usize,
    pub lr: f64,
    /// l2 penalty on weights and biases; keeps the optimum unique.
    pub l2: f64,
    /// Stop early once the gradient's max-norm drops below this.
    pub tolerance: f64,
}

impl Default for LinearConfig {
    fn default() -> Self {
        Self {
            epochs: 500,
            lr: 1.0,
            l2: 1e-4,
            tolerance: 1e-8,
        }
    }
}

/// A trained affine classifier, `W` (`classes x dim`) and `b`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    pub classes: usize,
    pub dim: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LinearModel {
    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        self.weights
            .chunks_exact(self.dim)
            .zip(&self.bias)
            .map(|(w, b)| b + math::dot(w, x))
            .collect()
    }

    /// Regularised mean cross-entropy over `(rows, labels)`.
    pub fn objective(&self, rows: &[f64], labels: &[u32], l2: f64) -> f64 {
        let mut loss = 0.0;
        for (x, &y) in rows.chunks_exact(self.dim).zip(labels) {
            let logits = self.logits(x);
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + math::ln(logits.iter().map(|l| math::exp(l - max)).sum::<f64>());
            loss += lse - logits[y as usize];
        }
        let reg: f64 = self.weights.iter().chain(&self.bias).map(|w| w * w).sum();
        loss / labels.len() as f64 + 0.5 * l2 * reg
    }
}

/// Full-batch gradient descent on the regularised support cross-entropy,
/// starting from zero parameters.
pub fn train_linear(task: &FewShotTask, cfg: &LinearConfig) -> Result<LinearModel> {
    let dim = task.dim();
    let classes = task.n_way();
    let rows = task.support().data();
    let labels = task.support_labels();
    let inv = 1.0 / labels.len() as f64;
    let mut model = LinearModel {
        classes,
        dim,
        weights: alloc::vec![0.0; classes * dim],
        bias: alloc::vec![0.0; classes],
    };
    let mut gw = alloc::vec![0.0; classes * dim];
    let mut gb = alloc::vec![0.0; classes];
    for _ in 0..cfg.epochs {
        gw.iter_mut().zip(&model.weights).for_each(|(g, w)| *g = cfg.l2 * w);
        gb.iter_mut().zip(&model.bias).for_each(|(g, b)| *g = cfg.l2 * b);
        for (x, &y) in rows.chunks_exact(dim).zip(labels) {
            let mut p = model.logits(x);
            let max = p.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            p.iter_mut().for_each(|l| *l = math::exp(*l - max));
            let total: f64 = p.iter().sum();
            for (c, pc) in p.iter().enumerate() {
                let d = inv * (pc / total - if c == y as usize { 1.0 } else { 0.0 });
                math::axpy(d, x, &mut gw[c * dim..(c + 1) * dim]);
                gb[c] += d;
            }
        }
        let gmax = gw.iter().chain(&gb).fold(0.0f64, |a, g| a.max(g.abs()));
        if gmax < cfg.tolerance {
            break;
        }
        math::axpy(-cfg.lr, &gw, &mut model.weights);
        math::axpy(-cfg.lr, &gb, &mut model.bias);
    }
    if model.weights.iter().any(|w| !w.is_finite()) {
        return Err(Error::NumericOverflow {
            layer: 0,
            iteration: cfg.epochs,
        });
    }
    Ok(model)
}

/// Affine classifier trained on the support set; queries take the argmax logit.
pub fn linear_classify(task: &FewShotTask, cfg: &LinearConfig) -> Result<Prediction> {
    Prototypes::from_support(task)?;
    let model = train_linear(task, cfg)?;
    Ok(predict_by_score(task, |q, c| {
        let w = &model.weights[c * model.dim..(c + 1) * model.dim];
        model.bias[c] + math::dot(w, q)
    }))
}

/// A downstream classifier.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum Method {
    Nn,
    Linear(LinearConfig),
    Cspn,
    BdCspn(RectifyConfig),
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Nn => "nn",
            Method::Linear(_) => "linear",
            Method::Cspn => "cspn",
            Method::BdCspn(_) => "bdcspn",
        }
    }

    /// Whether the method's preprocessing adds the shift term to queries.
    pub fn uses_shift(&self) -> bool {
        matches!(self, Method::Cspn | Method::BdCspn(_))
    }

    /// Classifies prepared embeddings (preprocessed, or adapted and normalised).
    pub fn classify_prepared(&self, task: &FewShotTask) -> Result<Prediction> {
        match self {
            Method::Nn => nn_classify(task),
            Method::Linear(cfg) => linear_classify(task, cfg),
            Method::Cspn => cspn_classify(task),
            Method::BdCspn(cfg) => rectify_classify(task, cfg),
        }
    }

    /// Applies the method's preprocessing to a raw task, then classifies.
    pub fn classify_raw(&self, task: &FewShotTask) -> Result<Prediction> {
        let prepared = preprocess_task(task, self.uses_shift())?;
        self.classify_prepared(&prepared.task)
    }
}
