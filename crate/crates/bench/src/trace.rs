//! Training-curve export for a single episode.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use esfr_core::adapt::{trace_probe, TraceRow};
use esfr_core::{EmbeddingSet, EsfrConfig, Method};

use crate::episode::{sample_episode, ClassPool, EpisodeSpec};
use crate::error::{HarnessError, Result};

pub const TRACE_HEADER: &str = "iteration,recon_loss,lid_sum,lid_mean,probe_acc";

pub fn trace_csv(rows: &[TraceRow]) -> String {
    let mut out = String::with_capacity(64 * (rows.len() + 1));
    out.push_str(TRACE_HEADER);
    out.push('\n');
    for r in rows {
        write!(out, "{},{},{},{},", r.iteration, r.recon_loss, r.lid_sum, r.lid_mean).expect("write to String");
        if let Some(acc) = r.probe_acc {
            write!(out, "{acc}").expect("write to String");
        }
        out.push('\n');
    }
    out
}

/// `curves.csv` -> `curves.dropout0.csv`.
pub fn companion_path(out: &Path) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let name = match out.extension() {
        Some(ext) => format!("{stem}.dropout0.{}", ext.to_string_lossy()),
        None => format!("{stem}.dropout0"),
    };
    out.with_file_name(name)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TracePair {
    pub with_dropout: Vec<TraceRow>,
    pub without_dropout: Vec<TraceRow>,
}

/// Trains one member on task `task_index` for the full `max_iterations`,
/// once with `cfg.dropout_rate` and once with dropout off.
pub fn trace_pair(
    dataset: &EmbeddingSet,
    spec: &EpisodeSpec,
    cfg: &EsfrConfig,
    task_index: usize,
    probe: &Method,
    probe_every: usize,
) -> Result<TracePair> {
    let pool = ClassPool::new(dataset)?;
    let episode = sample_episode(&pool, spec, task_index)?.episode;
    let with_dropout = trace_probe(&episode, cfg, probe, probe_every)?.rows;
    let mut off = cfg.clone();
    off.dropout_rate = 0.0;
    let without_dropout = trace_probe(&episode, &off, probe, probe_every)?.rows;
    Ok(TracePair {
        with_dropout,
        without_dropout,
    })
}

/// Writes the dropout-on curve to `out` and the dropout-off curve next to it
/// (see [`companion_path`]). Returns both paths.
pub fn run_trace(
    dataset: &EmbeddingSet,
    spec: &EpisodeSpec,
    cfg: &EsfrConfig,
    task_index: usize,
    probe: &Method,
    probe_every: usize,
    out: &Path,
) -> Result<(PathBuf, PathBuf)> {
    let pair = trace_pair(dataset, spec, cfg, task_index, probe, probe_every)?;
    let companion = companion_path(out);
    fs::write(out, trace_csv(&pair.with_dropout)).map_err(|e| HarnessError::io(out, e))?;
    fs::write(&companion, trace_csv(&pair.without_dropout)).map_err(|e| HarnessError::io(&companion, e))?;
    Ok((out.to_path_buf(), companion))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_layout() {
        let rows = [
            TraceRow {
                iteration: 0,
                recon_loss: 0.5,
                lid_sum: 40.0,
                lid_mean: 4.0,
                probe_acc: Some(0.75),
            },
            TraceRow {
                iteration: 1,
                recon_loss: 0.25,
                lid_sum: 38.5,
                lid_mean: 3.85,
                probe_acc: None,
            },
        ];
        assert_eq!(
            trace_csv(&rows),
            "iteration,recon_loss,lid_sum,lid_mean,probe_acc\n0,0.5,40,4,0.75\n1,0.25,38.5,3.85,\n"
        );
    }

    #[test]
    fn companion_names() {
        assert_eq!(companion_path(Path::new("out/curves.csv")), Path::new("out/curves.dropout0.csv"));
        assert_eq!(companion_path(Path::new("curves")), Path::new("curves.dropout0"));
    }
}
