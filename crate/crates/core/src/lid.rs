//! Local intrinsic dimensionality (LID) by maximum likelihood.
//!
//! For a point `x` with ascending neighbour distances `r_1 <= ... <= r_m`:
//!
//! ```text
//! LID(x) = -[ (1/m) * sum_i ln(r_i / r_m) ]^-1
//! ```
//!
//! Only distance ratios enter the estimate, so it is invariant to a global
//! rescaling of the point cloud. Neighbour search is brute force over the
//! full pairwise distance matrix; episodes hold at most a few hundred points.

use alloc::vec::Vec;

use crate::embed::EmbeddingSet;
use crate::error::{Error, Result};
use crate::math;

/// Distances at or below this are treated as zero under [`ZeroDistancePolicy::ClampEpsilon`].
pub const DIST_EPS: f64 = 1e-12;

/// How exact duplicates (zero distances) are handled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum ZeroDistancePolicy {
    /// Exact duplicates are never selected as neighbours.
    #[default]
    DropDuplicates,
    /// Zero distances are kept and clamped up to [`DIST_EPS`].
    ClampEpsilon,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LidConfig {
    pub m: usize,
    pub zero_distance_policy: ZeroDistancePolicy,
}

impl Default for LidConfig {
    fn default() -> Self {
        Self {
            m: 20,
            zero_distance_policy: ZeroDistancePolicy::DropDuplicates,
        }
    }
}

impl LidConfig {
    pub fn new(m: usize) -> Result<Self> {
        let cfg = Self {
            m,
            ..Self::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.m < 2 {
            return Err(Error::InvalidConfig(alloc::format!(
                "LID neighbour count must be >= 2, got {}",
                self.m
            )));
        }
        Ok(())
    }
}

/// The `m` smallest neighbour distances of one point, ascending.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborDistances {
    distances: Vec<f64>,
}

impl NeighborDistances {
    /// Wraps pre-computed distances, which must be ascending and non-negative.
    pub fn new(distances: Vec<f64>) -> Result<Self> {
        if distances.is_empty() {
            return Err(Error::TooFewNeighbors {
                needed: 1,
                available: 0,
            });
        }
        if let Some(index) = distances.iter().position(|d| !d.is_finite() || *d < 0.0) {
            return Err(Error::NonFinite { index });
        }
        if distances.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::InvalidConfig("distances must be ascending".into()));
        }
        Ok(Self { distances })
    }

    pub fn m(&self) -> usize {
        self.distances.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.distances
    }
}

/// Condensed pairwise Euclidean distances (full square matrix, row-major).
struct DistanceMatrix {
    n: usize,
    d: Vec<f64>,
}

impl DistanceMatrix {
    fn new(points: &[f64], dim: usize) -> Self {
        let n = points.len() / dim;
        let mut d = alloc::vec![0.0; n * n];
        for i in 0..n {
            let a = &points[i * dim..(i + 1) * dim];
            for j in (i + 1)..n {
                let b = &points[j * dim..(j + 1) * dim];
                let dist = math::sqrt(math::sq_dist(a, b));
                d[i * n + j] = dist;
                d[j * n + i] = dist;
            }
        }
        Self { n, d }
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.d[i * self.n..(i + 1) * self.n]
    }
}

fn select_neighbors(
    row: &[f64],
    index: usize,
    m: usize,
    policy: ZeroDistancePolicy,
    scratch: &mut Vec<(f64, usize)>,
) -> Result<NeighborDistances> {
    scratch.clear();
    let mut clamped = 0usize;
    for (j, &dist) in row.iter().enumerate() {
        if j == index {
            continue;
        }
        match policy {
            ZeroDistancePolicy::DropDuplicates if dist == 0.0 => continue,
            ZeroDistancePolicy::ClampEpsilon if dist <= DIST_EPS => {
                clamped += 1;
                scratch.push((DIST_EPS, j));
            }
            _ => scratch.push((dist, j)),
        }
    }
    if scratch.len() < m {
        return Err(Error::TooFewNeighbors {
            needed: m,
            available: scratch.len(),
        });
    }
    if clamped > 0 {
        log::warn!("point {index}: {clamped} zero neighbour distances clamped");
    }
    let by_dist_then_id = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if scratch.len() > m {
        scratch.select_nth_unstable_by(m - 1, by_dist_then_id);
        scratch.truncate(m);
    }
    scratch.sort_unstable_by(by_dist_then_id);
    Ok(NeighborDistances {
        distances: scratch.iter().map(|&(d, _)| d).collect(),
    })
}

/// The `m` smallest Euclidean distances from `points[index]` to every other
/// point, ascending. Ties are broken by lower point id; exact duplicates are
/// skipped (drop-duplicates policy).
pub fn knn_distances(index: usize, points: &EmbeddingSet, m: usize) -> Result<NeighborDistances> {
    knn_distances_with(index, points, m, ZeroDistancePolicy::DropDuplicates)
}

pub fn knn_distances_with(
    index: usize,
    points: &EmbeddingSet,
    m: usize,
    policy: ZeroDistancePolicy,
) -> Result<NeighborDistances> {
    let n = points.len();
    if n < m + 1 {
        return Err(Error::TooFewNeighbors {
            needed: m,
            available: n.saturating_sub(1),
        });
    }
    if index >= n {
        return Err(Error::InvalidConfig(alloc::format!(
            "point index {index} out of range for {n} points"
        )));
    }
    let x = points.row(index);
    let row: Vec<f64> = points
        .rows()
        .map(|p| math::sqrt(math::sq_dist(x, p)))
        .collect();
    select_neighbors(&row, index, m, policy, &mut Vec::new())
}

/// Maximum-likelihood LID estimate from ascending neighbour distances.
pub fn lid_mle(nd: &NeighborDistances) -> Result<f64> {
    let r = nd.as_slice();
    let r_max = *r.last().ok_or(Error::DivergentLid)?;
    if r[0] <= 0.0 {
        return Err(Error::TooFewNeighbors {
            needed: r.len(),
            available: r.iter().filter(|&&d| d > 0.0).count(),
        });
    }
    let mean_log = r.iter().map(|&ri| math::ln(ri / r_max)).sum::<f64>() / r.len() as f64;
    if mean_log >= 0.0 {
        return Err(Error::DivergentLid);
    }
    Ok(-1.0 / mean_log)
}

/// Summed LID over a point set, with the mean and skip count alongside.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LidSummary {
    /// Sum of per-point estimates; this is what early stopping compares.
    pub sum: f64,
    /// `sum / used`.
    pub mean: f64,
    pub used: usize,
    /// Points whose estimate diverged and were left out.
    pub skipped: usize,
}

/// Per-point LID estimates for every point of a row-major buffer, in point
/// order. `None` marks a point whose estimate diverged.
pub fn pointwise_lid(points: &[f64], dim: usize, cfg: &LidConfig) -> Result<Vec<Option<f64>>> {
    cfg.validate()?;
    let n = points.len() / dim;
    if n < cfg.m + 1 {
        return Err(Error::TooFewNeighbors {
            needed: cfg.m,
            available: n.saturating_sub(1),
        });
    }
    let dm = DistanceMatrix::new(points, dim);
    let mut scratch = Vec::with_capacity(n);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let nd = select_neighbors(dm.row(i), i, cfg.m, cfg.zero_distance_policy, &mut scratch)?;
        match lid_mle(&nd) {
            Ok(v) => out.push(Some(v)),
            Err(Error::DivergentLid) | Err(Error::TooFewNeighbors { .. }) => out.push(None),
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

/// Sum of per-point LID estimates over the rows of `points` (which for a
/// reconstruction module are its last hidden layer activations on `S ∪ Q`).
pub fn module_lid(points: &EmbeddingSet, cfg: &LidConfig) -> Result<LidSummary> {
    module_lid_rows(points.data(), points.dim(), cfg)
}

pub(crate) fn module_lid_rows(points: &[f64], dim: usize, cfg: &LidConfig) -> Result<LidSummary> {
    let per_point = pointwise_lid(points, dim, cfg)?;
    let mut sum = 0.0;
    let mut used = 0;
    for v in per_point.iter().flatten() {
        sum += v;
        used += 1;
    }
    let skipped = per_point.len() - used;
    if used == 0 {
        return Err(Error::LidFailed);
    }
    if skipped > 0 {
        log::warn!("{skipped} points skipped with divergent LID estimates");
    }
    Ok(LidSummary {
        sum,
        mean: sum / used as f64,
        used,
        skipped,
    })
}
