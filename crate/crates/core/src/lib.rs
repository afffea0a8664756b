//! Early-stage feature reconstruction (ESFR) for few-shot embedding adaptation.
//!
//! Given the support and query embeddings of one few-shot episode, a small
//! fully connected reconstruction network is trained to reproduce its own
//! dropout-perturbed inputs. Training halts as soon as the summed local
//! intrinsic dimensionality (LID) of the network's last hidden layer starts to
//! rise; the reconstructed outputs of an ensemble of such networks become the
//! new task-adapted embeddings that downstream classifiers consume.
//!
//! The crate is `no_std` (it needs `alloc`) and performs no IO. Dataset
//! formats, episode sampling and the command line live in `esfr-bench`.
//!
//! Module map:
//!
//! - [`embed`] and [`task`]: vectors, sets, distances, task preprocessing.
//! - [`lid`]: nearest-neighbour distances and the maximum-likelihood LID estimator.
//! - [`recon`]: the reconstruction network, its loss, analytic gradients and Adam.
//! - [`adapt`]: per-member training with LID early stopping and ensembling.
//! - [`classify`]: nearest-prototype, linear, cosine-prototype and rectified
//!   cosine-prototype classifiers.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod adapt;
pub mod classify;
pub mod embed;
mod error;
pub mod lid;
pub(crate) mod math;
pub mod recon;
pub mod seed;
pub mod task;

pub use adapt::{adapt, adapt_semi, train_member, AdaptedTask, EsfrConfig, TrainingTrace};
pub use classify::{Method, Prediction};
pub use embed::{EmbeddingSet, EmbeddingVector, NORM_EPS};
pub use error::{Error, Result};
pub use lid::{LidConfig, ZeroDistancePolicy};
pub use recon::{ArchSpec, ReconModule};
pub use task::{Episode, FewShotTask};
