#![allow(dead_code)]

use esfr_core::{EmbeddingSet, Episode, FewShotTask};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Gaussian clusters: class means with unit spread in every coordinate plus
/// per-sample noise of scale `noise`. Support rows are class-major.
pub fn gaussian_episode(seed: u64, n_way: usize, k_shot: usize, query: usize, dim: usize, noise: f64) -> Episode {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = || -> f64 { StandardNormal.sample(&mut rng) };
    let means: Vec<Vec<f64>> = (0..n_way).map(|_| (0..dim).map(|_| draw()).collect()).collect();
    let mut sample = |c: usize| -> Vec<f64> { means[c].iter().map(|m| m + noise * draw()).collect() };
    let mut support = Vec::new();
    let mut labels = Vec::new();
    for c in 0..n_way {
        for _ in 0..k_shot {
            support.extend(sample(c));
            labels.push(c as u32);
        }
    }
    let mut queries = Vec::new();
    let mut query_labels = Vec::new();
    for c in 0..n_way {
        for _ in 0..query {
            queries.extend(sample(c));
            query_labels.push(c as u32);
        }
    }
    let support = EmbeddingSet::new(dim, support, Some(labels), n_way).unwrap();
    let query_set = EmbeddingSet::unlabeled(dim, queries).unwrap();
    let task = FewShotTask::new(support, query_set, n_way, k_shot, vec![query; n_way]).unwrap();
    Episode::new(task, query_labels).unwrap()
}

/// Applies `f` to every support and query row.
pub fn map_rows(task: &FewShotTask, f: impl Fn(&[f64]) -> Vec<f64>) -> FewShotTask {
    let rows: Vec<f64> = task.support().rows().chain(task.query().rows()).flat_map(&f).collect();
    let dim = rows.len() / task.total_len();
    task.with_union_data(dim, rows).unwrap()
}
