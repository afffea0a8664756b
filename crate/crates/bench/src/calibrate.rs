//! Generator calibration: find spreads that put baseline NN 5-way 1-shot
//! accuracy in a band with room for improvement.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use esfr_core::{EsfrConfig, Method};

use crate::episode::EpisodeSpec;
use crate::error::{HarnessError, Result};
use crate::eval::{evaluate, AdaptMode, EvalConfig};
use crate::synth::{generate_synthetic, SynthSpec};

pub const TARGET_BAND: (f64, f64) = (55.0, 75.0);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub noise_scale: f64,
    pub nn_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub preset: SynthSpec,
    pub nn_acc: f64,
    pub sweep: Vec<SweepPoint>,
}

/// Baseline NN accuracy (percent) of `spec` over `tasks` 5-way 1-shot tasks.
pub fn baseline_accuracy(spec: &SynthSpec, tasks: usize, seed: u64) -> Result<f64> {
    let data = generate_synthetic(spec)?;
    let cfg = EvalConfig {
        episodes: EpisodeSpec::balanced(5, 1, 15, tasks, seed),
        method: Method::Nn,
        adapt: AdaptMode::None,
        esfr: EsfrConfig::default(),
    };
    Ok(evaluate(&data, &cfg)?.mean_acc)
}

/// Tries each `noise_scale` on top of `base` and keeps the one whose
/// accuracy is closest to the middle of [`TARGET_BAND`]. Fails when no
/// candidate lands inside the band.
pub fn calibrate(base: &SynthSpec, noise_scales: &[f64], tasks: usize, seed: u64) -> Result<Calibration> {
    let target = 0.5 * (TARGET_BAND.0 + TARGET_BAND.1);
    let mut sweep = Vec::with_capacity(noise_scales.len());
    let mut best: Option<(SynthSpec, f64)> = None;
    for &noise_scale in noise_scales {
        let spec = SynthSpec {
            noise_scale,
            ..base.clone()
        };
        let nn_acc = baseline_accuracy(&spec, tasks, seed)?;
        log::info!("noise_scale {noise_scale}: NN 1-shot {nn_acc:.2}%");
        sweep.push(SweepPoint { noise_scale, nn_acc });
        let in_band = (TARGET_BAND.0..=TARGET_BAND.1).contains(&nn_acc);
        if in_band && best.as_ref().is_none_or(|(_, a)| (nn_acc - target).abs() < (a - target).abs()) {
            best = Some((spec, nn_acc));
        }
    }
    let (preset, nn_acc) = best.ok_or_else(|| {
        HarnessError::Config(format!("no noise scale put NN accuracy in {TARGET_BAND:?}"))
    })?;
    Ok(Calibration { preset, nn_acc, sweep })
}

pub fn write_preset(path: &Path, spec: &SynthSpec) -> Result<()> {
    let text = toml::to_string(spec).map_err(|e| HarnessError::Config(e.to_string()))?;
    fs::write(path, text).map_err(|e| HarnessError::io(path, e))
}

pub fn read_preset(path: &Path) -> Result<SynthSpec> {
    let text = fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
    let spec: SynthSpec = toml::from_str(&text).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
    spec.validate()?;
    Ok(spec)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("preset.toml");
        let spec = crate::synth::calibrated_preset(7);
        write_preset(&path, &spec).unwrap();
        assert_eq!(read_preset(&path).unwrap(), spec);
    }

    #[test]
    fn chance_level_without_signal() {
        let spec = SynthSpec {
            class_count: 10,
            samples_per_class: 20,
            signal_dim: 0,
            noise_dim: 4,
            cluster_spread: 1.0,
            noise_scale: 1.0,
            seed: 5,
        };
        let acc = baseline_accuracy(&spec, 400, 1).unwrap();
        assert!((acc - 20.0).abs() < 3.0, "{acc}");
    }
}
