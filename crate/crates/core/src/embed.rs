//! Embedding vectors and sets, the cosine distance and l2 normalisation.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;

/// Lower clamp applied to every norm used as a divisor.
pub const NORM_EPS: f64 = 1e-12;

/// A single finite, non-empty embedding.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::EmptyVector);
        }
        check_finite(&values)?;
        Ok(Self(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl AsRef<[f64]> for EmbeddingVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// Row-major collection of same-dimension embeddings with optional labels.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    dim: usize,
    data: Vec<f64>,
    labels: Option<Vec<u32>>,
    class_count: usize,
}

impl EmbeddingSet {
    /// Builds a set from a flat row-major buffer.
    ///
    /// `class_count` is only checked against `labels`; unlabeled sets may pass 0.
    pub fn new(
        dim: usize,
        data: Vec<f64>,
        labels: Option<Vec<u32>>,
        class_count: usize,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::EmptyVector);
        }
        if !data.len().is_multiple_of(dim) {
            return Err(Error::DimensionMismatch {
                expected: dim,
                actual: data.len() % dim,
            });
        }
        check_finite(&data)?;
        let len = data.len() / dim;
        if let Some(labels) = &labels {
            if labels.len() != len {
                return Err(Error::LabelCountMismatch {
                    labels: labels.len(),
                    vectors: len,
                });
            }
            if let Some(&label) = labels.iter().find(|&&l| l as usize >= class_count) {
                return Err(Error::LabelOutOfRange { label, class_count });
            }
        }
        Ok(Self {
            dim,
            data,
            labels,
            class_count,
        })
    }

    pub fn unlabeled(dim: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(dim, data, None, 0)
    }

    /// Convenience constructor from individual rows.
    pub fn from_rows<R: AsRef<[f64]>>(
        rows: &[R],
        labels: Option<Vec<u32>>,
        class_count: usize,
    ) -> Result<Self> {
        let dim = rows.first().map(|r| r.as_ref().len()).ok_or(Error::EmptySet)?;
        let mut data = Vec::with_capacity(rows.len() * dim);
        for row in rows {
            let row = row.as_ref();
            if row.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    actual: row.len(),
                });
            }
            data.extend_from_slice(row);
        }
        Self::new(dim, data, labels, class_count)
    }

    /// An empty set of the given dimension.
    pub fn empty(dim: usize) -> Self {
        Self {
            dim: dim.max(1),
            data: Vec::new(),
            labels: None,
            class_count: 0,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> core::slice::ChunksExact<'_, f64> {
        self.data.chunks_exact(self.dim)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn labels(&self) -> Option<&[u32]> {
        self.labels.as_deref()
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn into_parts(self) -> (usize, Vec<f64>, Option<Vec<u32>>, usize) {
        (self.dim, self.data, self.labels, self.class_count)
    }

    /// Same labels, new vectors (possibly of a different dimension).
    pub(crate) fn with_data(&self, dim: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(dim, data, self.labels.clone(), self.class_count)
    }

    pub fn without_labels(&self) -> Self {
        Self {
            dim: self.dim,
            data: self.data.clone(),
            labels: None,
            class_count: 0,
        }
    }

    /// Component-wise mean of all vectors.
    pub fn mean(&self) -> Result<Vec<f64>> {
        if self.is_empty() {
            return Err(Error::EmptySet);
        }
        Ok(math::column_mean(&self.data, self.dim))
    }
}

fn check_finite(values: &[f64]) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(Error::NonFinite { index }),
        None => Ok(()),
    }
}

/// `1 - a.b / (|a| |b|)` with both norms clamped below by [`NORM_EPS`].
pub fn cosine_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            actual: b.len(),
        });
    }
    Ok(1.0 - cosine_similarity_unchecked(a, b))
}

pub(crate) fn cosine_similarity_unchecked(a: &[f64], b: &[f64]) -> f64 {
    let na = math::norm(a).max(NORM_EPS);
    let nb = math::norm(b).max(NORM_EPS);
    math::dot(a, b) / (na * nb)
}

/// Result of [`l2_normalize`]. `degenerate` is set when the input norm fell
/// below [`NORM_EPS`]; the vector is then left (near) zero rather than NaN.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalized {
    pub vector: Vec<f64>,
    pub degenerate: bool,
}

pub fn l2_normalize(v: &[f64]) -> Normalized {
    let mut vector = v.to_vec();
    let degenerate = normalize_in_place(&mut vector);
    Normalized { vector, degenerate }
}

/// Normalises `v` in place, returning `true` if it was degenerate.
pub fn normalize_in_place(v: &mut [f64]) -> bool {
    let n = math::norm(v);
    let inv = 1.0 / n.max(NORM_EPS);
    v.iter_mut().for_each(|x| *x *= inv);
    n <= NORM_EPS
}

/// Normalises every row of a row-major buffer, returning the indices of
/// degenerate rows.
pub fn normalize_rows(data: &mut [f64], dim: usize) -> Vec<usize> {
    data.chunks_exact_mut(dim)
        .enumerate()
        .filter_map(|(i, row)| normalize_in_place(row).then_some(i))
        .collect()
}
