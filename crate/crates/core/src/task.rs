//! Few-shot episodes and the shift / center / normalise preprocessing chain.

use alloc::format;
use alloc::vec::Vec;

use crate::embed::{normalize_rows, EmbeddingSet, EmbeddingVector};
use crate::error::{Error, Result};
use crate::math;

/// One N-way K-shot problem: a labeled support set and an unlabeled query set.
///
/// Support labels are episode-local class indices in `0..n_way`. The query set
/// never carries labels; ground truth lives in [`Episode`].
#[derive(Debug, Clone, PartialEq)]
pub struct FewShotTask {
    support: EmbeddingSet,
    query: EmbeddingSet,
    n_way: usize,
    k_shot: usize,
    query_counts: Vec<usize>,
}

impl FewShotTask {
    pub fn new(
        support: EmbeddingSet,
        query: EmbeddingSet,
        n_way: usize,
        k_shot: usize,
        query_counts: Vec<usize>,
    ) -> Result<Self> {
        if n_way == 0 || k_shot == 0 {
            return Err(Error::InvalidTask(format!(
                "n_way ({n_way}) and k_shot ({k_shot}) must be positive"
            )));
        }
        if !query.is_empty() && query.dim() != support.dim() {
            return Err(Error::DimensionMismatch {
                expected: support.dim(),
                actual: query.dim(),
            });
        }
        let labels = support
            .labels()
            .ok_or_else(|| Error::InvalidTask("support set must be labeled".into()))?;
        if support.len() != n_way * k_shot {
            return Err(Error::InvalidTask(format!(
                "support has {} vectors, expected {}",
                support.len(),
                n_way * k_shot
            )));
        }
        let mut per_class = alloc::vec![0usize; n_way];
        for &label in labels {
            let slot = per_class
                .get_mut(label as usize)
                .ok_or(Error::LabelOutOfRange {
                    label,
                    class_count: n_way,
                })?;
            *slot += 1;
        }
        if let Some(class) = per_class.iter().position(|&c| c != k_shot) {
            return Err(Error::InvalidTask(format!(
                "class {class} has {} support samples, expected {k_shot}",
                per_class[class]
            )));
        }
        if query_counts.len() != n_way {
            return Err(Error::InvalidTask(format!(
                "query_counts has {} entries, expected {n_way}",
                query_counts.len()
            )));
        }
        if query_counts.iter().sum::<usize>() != query.len() {
            return Err(Error::InvalidTask(format!(
                "query_counts sum to {}, query set has {}",
                query_counts.iter().sum::<usize>(),
                query.len()
            )));
        }
        let query = if query.labels().is_some() {
            query.without_labels()
        } else {
            query
        };
        Ok(Self {
            support,
            query,
            n_way,
            k_shot,
            query_counts,
        })
    }

    pub fn support(&self) -> &EmbeddingSet {
        &self.support
    }

    pub fn query(&self) -> &EmbeddingSet {
        &self.query
    }

    pub fn support_labels(&self) -> &[u32] {
        // checked non-None in `new`
        self.support.labels().unwrap_or(&[])
    }

    pub fn n_way(&self) -> usize {
        self.n_way
    }

    pub fn k_shot(&self) -> usize {
        self.k_shot
    }

    pub fn query_counts(&self) -> &[usize] {
        &self.query_counts
    }

    pub fn dim(&self) -> usize {
        self.support.dim()
    }

    /// Number of vectors in `S ∪ Q`.
    pub fn total_len(&self) -> usize {
        self.support.len() + self.query.len()
    }

    /// Support rows followed by query rows, row-major.
    pub fn union_data(&self) -> Vec<f64> {
        let mut data = Vec::with_capacity(self.total_len() * self.dim());
        data.extend_from_slice(self.support.data());
        data.extend_from_slice(self.query.data());
        data
    }

    /// Rebuilds the task around new union data (support rows first), keeping
    /// labels and counts. The dimension may change.
    pub fn with_union_data(&self, dim: usize, data: Vec<f64>) -> Result<Self> {
        let split = self.support.len() * dim;
        if data.len() != self.total_len() * dim {
            return Err(Error::ShapeMismatch {
                expected: self.total_len() * dim,
                actual: data.len(),
            });
        }
        let mut support = data;
        let query = support.split_off(split);
        Ok(Self {
            support: self.support.with_data(dim, support)?,
            query: EmbeddingSet::unlabeled(dim, query)?,
            n_way: self.n_way,
            k_shot: self.k_shot,
            query_counts: self.query_counts.clone(),
        })
    }
}

/// A task together with the held-back query ground truth used for scoring.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub task: FewShotTask,
    query_labels: Vec<u32>,
}

impl Episode {
    pub fn new(task: FewShotTask, query_labels: Vec<u32>) -> Result<Self> {
        if query_labels.len() != task.query().len() {
            return Err(Error::LabelCountMismatch {
                labels: query_labels.len(),
                vectors: task.query().len(),
            });
        }
        if let Some(&label) = query_labels
            .iter()
            .find(|&&l| l as usize >= task.n_way())
        {
            return Err(Error::LabelOutOfRange {
                label,
                class_count: task.n_way(),
            });
        }
        Ok(Self { task, query_labels })
    }

    pub fn query_labels(&self) -> &[u32] {
        &self.query_labels
    }

    /// Fraction of correctly classified queries, in `[0, 1]`.
    pub fn accuracy(&self, predicted: &[u32]) -> f64 {
        score(predicted, &self.query_labels)
    }
}

pub(crate) fn score(predicted: &[u32], truth: &[u32]) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    let hits = predicted.iter().zip(truth).filter(|(p, t)| p == t).count();
    hits as f64 / truth.len() as f64
}

/// Support-mean minus query-mean, added to queries to remove cross-set bias.
#[derive(Debug, Clone, PartialEq)]
pub struct ShiftTerm {
    pub delta: EmbeddingVector,
}

pub fn compute_shift(support: &EmbeddingSet, query: &EmbeddingSet) -> Result<ShiftTerm> {
    if support.dim() != query.dim() {
        return Err(Error::DimensionMismatch {
            expected: support.dim(),
            actual: query.dim(),
        });
    }
    let mut delta = support.mean()?;
    let q = query.mean()?;
    delta.iter_mut().zip(&q).for_each(|(d, q)| *d -= q);
    Ok(ShiftTerm {
        delta: EmbeddingVector::new(delta)?,
    })
}

/// Output of [`preprocess_task`].
#[derive(Debug, Clone, PartialEq)]
pub struct Preprocessed {
    pub task: FewShotTask,
    /// Union row indices (support first) whose centered norm was below the clamp.
    pub degenerate_rows: Vec<usize>,
}

/// Adds the shift term to every query (if requested) and subtracts the union
/// mean of `S ∪ Q` from every vector. Returns the centered task and the mean.
pub fn center_union(task: &FewShotTask, use_shift: bool) -> Result<(FewShotTask, Vec<f64>)> {
    let dim = task.dim();
    let mut data = task.union_data();
    if use_shift {
        let shift = compute_shift(task.support(), task.query())?;
        let split = task.support().len() * dim;
        for row in data[split..].chunks_exact_mut(dim) {
            math::axpy(1.0, shift.delta.as_slice(), row);
        }
    }
    if data.is_empty() {
        return Err(Error::EmptySet);
    }
    let mean = math::column_mean(&data, dim);
    for row in data.chunks_exact_mut(dim) {
        row.iter_mut().zip(&mean).for_each(|(x, m)| *x -= m);
    }
    Ok((task.with_union_data(dim, data)?, mean))
}

/// shift (optional) → center on the union mean → l2-normalise, in that order.
pub fn preprocess_task(task: &FewShotTask, use_shift: bool) -> Result<Preprocessed> {
    let (centered, _) = center_union(task, use_shift)?;
    let dim = centered.dim();
    let mut data = centered.union_data();
    let degenerate_rows = normalize_rows(&mut data, dim);
    if !degenerate_rows.is_empty() {
        log::warn!(
            "{} degenerate vectors after centering",
            degenerate_rows.len()
        );
    }
    Ok(Preprocessed {
        task: centered.with_union_data(dim, data)?,
        degenerate_rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn set(rows: &[&[f64]]) -> EmbeddingSet {
        EmbeddingSet::from_rows(rows, None, 0).unwrap()
    }

    fn one_shot(support: &[&[f64]], query: &[&[f64]]) -> FewShotTask {
        let n = support.len();
        let s = EmbeddingSet::from_rows(support, Some((0..n as u32).collect()), n).unwrap();
        let mut counts = vec![0; n];
        counts[0] = query.len();
        FewShotTask::new(s, set(query), n, 1, counts).unwrap()
    }

    #[test]
    fn shift_examples() {
        let s = compute_shift(&set(&[&[1.0, 0.0]]), &set(&[&[0.0, 1.0]])).unwrap();
        assert_eq!(s.delta.as_slice(), &[1.0, -1.0]);

        let same = set(&[&[0.3, 2.0], &[1.0, -4.0]]);
        let s = compute_shift(&same, &same).unwrap();
        assert_eq!(s.delta.as_slice(), &[0.0, 0.0]);

        // means (2,2) and (1,0)
        let s = compute_shift(&set(&[&[2.0, 2.0]]), &set(&[&[0.0, 0.0], &[2.0, 0.0]])).unwrap();
        assert_eq!(s.delta.as_slice(), &[1.0, 2.0]);
    }

    #[test]
    fn shift_rejects_empty() {
        assert!(matches!(
            compute_shift(&set(&[&[1.0]]), &EmbeddingSet::empty(1)),
            Err(Error::EmptySet)
        ));
    }

    #[test]
    fn preprocess_symmetric_pair() {
        let task = one_shot(&[&[1.0, 0.0]], &[&[3.0, 0.0]]);
        let out = preprocess_task(&task, false).unwrap();
        assert_eq!(out.task.support().row(0), &[-1.0, 0.0]);
        assert_eq!(out.task.query().row(0), &[1.0, 0.0]);
        assert!(out.degenerate_rows.is_empty());
    }

    #[test]
    fn preprocess_with_shift_hand_trace() {
        let task = one_shot(&[&[2.0, 2.0]], &[&[0.0, 0.0], &[2.0, 0.0]]);
        // queries -> (1,2),(3,2); union mean (2,2); centered (0,0) | (-1,0),(1,0)
        let (centered, mean) = center_union(&task, true).unwrap();
        assert_eq!(mean, vec![2.0, 2.0]);
        assert_eq!(centered.query().row(0), &[-1.0, 0.0]);
        let out = preprocess_task(&task, true).unwrap();
        assert_eq!(out.task.support().row(0), &[0.0, 0.0]);
        assert_eq!(out.task.query().row(0), &[-1.0, 0.0]);
        assert_eq!(out.task.query().row(1), &[1.0, 0.0]);
        assert_eq!(out.degenerate_rows, vec![0]);
    }

    #[test]
    fn task_validation() {
        let s = EmbeddingSet::from_rows(&[[0.0], [1.0]], Some(vec![0, 0]), 2).unwrap();
        assert!(FewShotTask::new(s, EmbeddingSet::empty(1), 2, 1, vec![0, 0]).is_err());
        let s = EmbeddingSet::from_rows(&[[0.0], [1.0]], Some(vec![0, 1]), 2).unwrap();
        assert!(FewShotTask::new(s.clone(), set(&[&[0.5]]), 2, 1, vec![0, 0]).is_err());
        assert!(FewShotTask::new(s, set(&[&[0.5]]), 2, 1, vec![1, 0]).is_ok());
    }

    fn random_task() -> impl Strategy<Value = FewShotTask> {
        (1usize..6, 1usize..4, 1usize..8).prop_flat_map(|(dim, n_way, q)| {
            let s = proptest::collection::vec(-5.0f64..5.0, dim * n_way);
            let qv = proptest::collection::vec(-5.0f64..5.0, dim * q);
            (s, qv).prop_map(move |(s, qv)| {
                let support =
                    EmbeddingSet::new(dim, s, Some((0..n_way as u32).collect()), n_way).unwrap();
                let mut counts = vec![0; n_way];
                counts[0] = q;
                FewShotTask::new(support, EmbeddingSet::unlabeled(dim, qv).unwrap(), n_way, 1, counts)
                    .unwrap()
            })
        })
    }

    proptest! {
        #[test]
        fn centering_zeroes_union_mean(task in random_task()) {
            let (centered, _) = center_union(&task, false).unwrap();
            let mean = math::column_mean(&centered.union_data(), centered.dim());
            for m in mean {
                prop_assert!(m.abs() < 1e-6);
            }
        }

        #[test]
        fn preprocessed_rows_are_unit(task in random_task(), shift in any::<bool>()) {
            let out = preprocess_task(&task, shift).unwrap();
            let data = out.task.union_data();
            for (i, row) in data.chunks_exact(out.task.dim()).enumerate() {
                if !out.degenerate_rows.contains(&i) {
                    prop_assert!((math::norm(row) - 1.0).abs() < 1e-6);
                }
            }
        }

        #[test]
        fn shift_translation_equivariant(task in random_task(), t in proptest::collection::vec(-3.0f64..3.0, 5)) {
            let dim = task.dim();
            let t = &t[..dim.min(5)];
            prop_assume!(t.len() == dim);
            let base = compute_shift(task.support(), task.query()).unwrap();
            let mut moved = task.query().data().to_vec();
            for row in moved.chunks_exact_mut(dim) {
                row.iter_mut().zip(t).for_each(|(x, ti)| *x += ti);
            }
            let moved = EmbeddingSet::unlabeled(dim, moved).unwrap();
            let shifted = compute_shift(task.support(), &moved).unwrap();
            for ((a, b), ti) in shifted.delta.as_slice().iter().zip(base.delta.as_slice()).zip(t) {
                prop_assert!((a - (b - ti)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn accuracy_scoring() {
        let task = one_shot(&[&[1.0], &[2.0]], &[&[1.0], &[2.0]]);
        let ep = Episode::new(task, vec![0, 1]).unwrap();
        assert_abs_diff_eq!(ep.accuracy(&[0, 0]), 0.5);
    }
}
