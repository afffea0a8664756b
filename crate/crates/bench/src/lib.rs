//! Benchmark harness for `esfr-core`: embedding files, episode sampling,
//! a synthetic generator, evaluation reports and training-curve export.

pub mod calibrate;
pub mod episode;
pub mod error;
pub mod eval;
pub mod format;
pub mod synth;
pub mod trace;

pub use episode::{sample_episode, ClassPool, EpisodeSpec, Sampled};
pub use error::{FormatError, HarnessError, Result};
pub use eval::{evaluate, AdaptMode, EvalConfig, EvalReport};
pub use format::{load_embeddings, write_embeddings};
pub use synth::{generate_synthetic, SynthSpec};
pub use trace::run_trace;
