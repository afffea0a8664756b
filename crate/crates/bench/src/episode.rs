//! Deterministic N-way K-shot episode sampling.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use esfr_core::{seed, EmbeddingSet, Episode, FewShotTask};

use crate::error::{HarnessError, Result};

/// Per-class query counts of the two imbalanced protocols.
pub const PROFILE_MILD: [usize; 5] = [11, 13, 15, 17, 19];
pub const PROFILE_STRONG: [usize; 5] = [7, 11, 15, 19, 23];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeSpec {
    pub n_way: usize,
    pub k_shot: usize,
    /// Query count of each episode class, in episode-label order.
    pub query_profile: Vec<usize>,
    pub task_count: usize,
    pub master_seed: u64,
}

impl EpisodeSpec {
    /// `n_way` classes with `query` queries each.
    pub fn balanced(n_way: usize, k_shot: usize, query: usize, task_count: usize, master_seed: u64) -> Self {
        Self {
            n_way,
            k_shot,
            query_profile: vec![query; n_way],
            task_count,
            master_seed,
        }
    }

    pub fn with_profile(mut self, profile: &[usize]) -> Self {
        self.query_profile = profile.to_vec();
        self
    }

    pub fn validate(&self, class_count: usize) -> Result<()> {
        if self.n_way == 0 || self.k_shot == 0 {
            return Err(HarnessError::Config("n_way and k_shot must be positive".into()));
        }
        if self.query_profile.len() != self.n_way {
            return Err(HarnessError::Config(format!(
                "query profile has {} entries for {} classes",
                self.query_profile.len(),
                self.n_way
            )));
        }
        if self.n_way > class_count {
            return Err(HarnessError::Config(format!(
                "n_way {} exceeds the dataset's {class_count} classes",
                self.n_way
            )));
        }
        Ok(())
    }
}

/// A labeled dataset indexed by class.
#[derive(Debug, Clone)]
pub struct ClassPool<'a> {
    set: &'a EmbeddingSet,
    by_class: Vec<Vec<usize>>,
}

impl<'a> ClassPool<'a> {
    pub fn new(set: &'a EmbeddingSet) -> Result<Self> {
        let labels = set
            .labels()
            .ok_or_else(|| HarnessError::Config("dataset has no labels".into()))?;
        let mut by_class = vec![Vec::new(); set.class_count()];
        for (i, &l) in labels.iter().enumerate() {
            by_class[l as usize].push(i);
        }
        Ok(Self { set, by_class })
    }

    pub fn class_count(&self) -> usize {
        self.by_class.len()
    }

    pub fn set(&self) -> &EmbeddingSet {
        self.set
    }
}

/// A sampled episode plus the dataset indices it was drawn from.
#[derive(Debug, Clone, PartialEq)]
pub struct Sampled {
    pub episode: Episode,
    /// Dataset class of each episode label.
    pub classes: Vec<u32>,
    pub support_ids: Vec<usize>,
    pub query_ids: Vec<usize>,
}

/// Draws task `task_index` of `spec`: `n_way` distinct classes, then `k_shot`
/// support and `query_profile[i]` query samples per class, all without
/// replacement. Seeded by `(master_seed, task_index)`.
pub fn sample_episode(pool: &ClassPool<'_>, spec: &EpisodeSpec, task_index: usize) -> Result<Sampled> {
    spec.validate(pool.class_count())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(spec.master_seed, task_index as u64));
    let classes: Vec<u32> = index::sample(&mut rng, pool.class_count(), spec.n_way)
        .into_iter()
        .map(|c| c as u32)
        .collect();

    let dim = pool.set.dim();
    let mut support = Vec::with_capacity(spec.n_way * spec.k_shot * dim);
    let mut support_labels = Vec::with_capacity(spec.n_way * spec.k_shot);
    let mut support_ids = Vec::with_capacity(spec.n_way * spec.k_shot);
    let mut query = Vec::new();
    let mut query_labels = Vec::new();
    let mut query_ids = Vec::new();
    for (episode_label, (&class, &q)) in classes.iter().zip(&spec.query_profile).enumerate() {
        let members = &pool.by_class[class as usize];
        let needed = spec.k_shot + q;
        if members.len() < needed {
            return Err(HarnessError::InsufficientSamples {
                class,
                needed,
                available: members.len(),
            });
        }
        let picks = index::sample(&mut rng, members.len(), needed);
        for (j, pick) in picks.into_iter().enumerate() {
            let id = members[pick];
            if j < spec.k_shot {
                support.extend_from_slice(pool.set.row(id));
                support_labels.push(episode_label as u32);
                support_ids.push(id);
            } else {
                query.extend_from_slice(pool.set.row(id));
                query_labels.push(episode_label as u32);
                query_ids.push(id);
            }
        }
    }
    let support = EmbeddingSet::new(dim, support, Some(support_labels), spec.n_way)?;
    let query = EmbeddingSet::unlabeled(dim, query)?;
    let task = FewShotTask::new(support, query, spec.n_way, spec.k_shot, spec.query_profile.clone())?;
    Ok(Sampled {
        episode: Episode::new(task, query_labels)?,
        classes,
        support_ids,
        query_ids,
    })
}
