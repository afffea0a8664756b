mod support {
    pub mod tasks;
}

use esfr_core::adapt::{
    decide_stop, trace_probe, tune_lambda, Averaging, EmbeddingTap, Mode, StopReason, StopWeights,
};
use esfr_core::recon::{forward_rows, init_glorot, ArchSpec, DropoutMask};
use esfr_core::task::preprocess_task;
use esfr_core::{adapt, adapt_semi, seed, train_member, EsfrConfig, Method};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use support::tasks::gaussian_episode;

fn small_cfg() -> EsfrConfig {
    EsfrConfig {
        ensemble_size: 3,
        max_iterations: 30,
        lr: 1e-2,
        master_seed: 7,
        ..EsfrConfig::default()
    }
}

#[test]
fn semi_with_zero_lambda_is_bit_identical() {
    let ep = gaussian_episode(1, 5, 1, 6, 12, 0.8);
    let cfg = small_cfg();
    let plain = adapt(&ep.task, &cfg).unwrap();
    let semi_cfg = EsfrConfig {
        mode: Mode::EsfrSemi { lambda: 0.0 },
        ..cfg
    };
    let semi = adapt_semi(&ep.task, &semi_cfg).unwrap();
    assert_eq!(plain.task, semi.task);
    assert_eq!(plain.traces, semi.traces);
}

#[test]
fn nonzero_lambda_changes_the_result() {
    let ep = gaussian_episode(1, 5, 1, 6, 12, 0.8);
    let cfg = EsfrConfig {
        mode: Mode::EsfrSemi { lambda: 0.4 },
        ..small_cfg()
    };
    let semi = adapt_semi(&ep.task, &cfg).unwrap();
    let plain = adapt(&ep.task, &small_cfg()).unwrap();
    assert_ne!(plain.task, semi.task);
}

#[test]
fn adapt_semi_requires_semi_mode() {
    let ep = gaussian_episode(1, 3, 1, 2, 6, 0.5);
    assert!(adapt_semi(&ep.task, &small_cfg()).is_err());
}

#[test]
fn adaptation_is_deterministic_and_seeded() {
    let ep = gaussian_episode(2, 5, 1, 5, 10, 0.8);
    let cfg = small_cfg();
    let a = adapt(&ep.task, &cfg).unwrap();
    assert_eq!(a, adapt(&ep.task, &cfg).unwrap());
    let other = adapt(&ep.task, &EsfrConfig { master_seed: 8, ..cfg }).unwrap();
    assert_ne!(a.task, other.task);
}

#[test]
fn members_do_not_depend_on_ensemble_size() {
    let ep = gaussian_episode(3, 5, 1, 5, 10, 0.8);
    let one = adapt(&ep.task, &EsfrConfig { ensemble_size: 1, ..small_cfg() }).unwrap();
    let three = adapt(&ep.task, &small_cfg()).unwrap();
    assert_eq!(one.traces[0], three.traces[0]);
    assert_eq!(three.traces.len(), 3);
}

#[test]
fn adapted_rows_are_unit_norm() {
    let ep = gaussian_episode(4, 5, 1, 5, 10, 0.8);
    for averaging in [Averaging::NormalizeThenAverage, Averaging::AverageRaw] {
        let a = adapt(&ep.task, &EsfrConfig { averaging, ..small_cfg() }).unwrap();
        for row in a.support().rows().chain(a.query().rows()) {
            let n: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn stop_is_consistent_with_recorded_lid() {
    let ep = gaussian_episode(5, 5, 1, 6, 12, 0.8);
    let prepared = preprocess_task(&ep.task, false).unwrap();
    for weights in [StopWeights::PostIncrease, StopWeights::PreIncrease] {
        let cfg = EsfrConfig {
            stop_weights: weights,
            ..small_cfg()
        };
        for member in 0..4 {
            let (_, trace) = train_member(&prepared.task, &cfg, seed::member_seed(9, member)).unwrap();
            let lids: Vec<f64> = trace.rows.iter().map(|r| r.lid_sum).collect();
            let d = decide_stop(&lids, cfg.max_iterations, weights);
            assert_eq!(trace.stop_iteration, d.stop_iteration);
            assert_eq!(trace.stop_reason, d.reason);
            assert_eq!(trace.selected_iteration, d.selected_iteration);
            assert_eq!(trace.rows.len(), trace.stop_iteration + 1);
            for (i, r) in trace.rows.iter().enumerate() {
                assert_eq!(r.iteration, i);
                let used = r.lid_sum / r.lid_mean;
                assert!((used - used.round()).abs() < 1e-9 && used.round() as usize <= ep.task.total_len());
                assert!((0.0..=2.0).contains(&r.recon_loss));
            }
        }
    }
}

#[test]
fn pre_increase_keeps_the_earlier_weights() {
    let ep = gaussian_episode(6, 5, 1, 6, 12, 0.8);
    let prepared = preprocess_task(&ep.task, false).unwrap();
    let cfg = small_cfg();
    let s = seed::member_seed(3, 0);
    let (post, t_post) = train_member(&prepared.task, &cfg, s).unwrap();
    let (pre, t_pre) = train_member(
        &prepared.task,
        &EsfrConfig {
            stop_weights: StopWeights::PreIncrease,
            ..cfg.clone()
        },
        s,
    )
    .unwrap();
    assert_eq!(t_post.stop_iteration, t_pre.stop_iteration);
    if t_post.stop_reason == StopReason::LidIncrease {
        assert_ne!(post.params(), pre.params());
        let data = prepared.task.union_data();
        let n = prepared.task.total_len();
        let tape = forward_rows(&pre, &data, n, None, 0).unwrap();
        let lid = esfr_core::lid::pointwise_lid(tape.penultimate(), tape.penultimate_dim(), &cfg.lid).unwrap();
        let sum: f64 = lid.iter().flatten().sum();
        assert!((sum - t_pre.rows[t_pre.selected_iteration].lid_sum).abs() < 1e-9 * sum);
    }
}

#[test]
fn zero_rate_mask_matches_mask_free_forward() {
    let arch = ArchSpec::uniform(6, 4).unwrap();
    let module = init_glorot(&arch, 5);
    let ep = gaussian_episode(7, 3, 2, 3, 6, 1.0);
    let data = ep.task.union_data();
    let n = ep.task.total_len();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mask = DropoutMask::sample(0.0, data.len(), &mut rng).unwrap();
    let a = forward_rows(&module, &data, n, Some(&mask), 0).unwrap();
    let b = forward_rows(&module, &data, n, None, 0).unwrap();
    assert_eq!(a.output(), b.output());
    assert_eq!(a.penultimate(), b.penultimate());
}

#[test]
fn trace_probe_records_every_iteration() {
    let ep = gaussian_episode(8, 5, 1, 4, 10, 0.8);
    let cfg = EsfrConfig {
        max_iterations: 12,
        ..small_cfg()
    };
    let trace = trace_probe(&ep, &cfg, &Method::Nn, 3).unwrap();
    assert_eq!(trace.rows.len(), 13);
    for r in &trace.rows {
        assert_eq!(r.probe_acc.is_some(), r.iteration % 3 == 0);
        if let Some(acc) = r.probe_acc {
            assert!((0.0..=1.0).contains(&acc));
        }
    }
    assert!(trace_probe(&ep, &cfg, &Method::Nn, 0).is_err());
}

#[test]
fn middle_tap_has_hidden_width() {
    let ep = gaussian_episode(9, 3, 1, 8, 6, 0.8);
    let cfg = EsfrConfig {
        arch: Some(ArchSpec::new(6, vec![6, 4, 6]).unwrap()),
        embedding_tap: EmbeddingTap::MiddleHidden,
        ..small_cfg()
    };
    assert_eq!(adapt(&ep.task, &cfg).unwrap().task.dim(), 4);
    let cfg = EsfrConfig {
        arch: Some(ArchSpec::new(6, vec![8, 3, 8, 6]).unwrap()),
        ..cfg
    };
    assert_eq!(adapt(&ep.task, &cfg).unwrap().task.dim(), 3);
}

#[test]
fn invalid_configs_are_rejected() {
    let ep = gaussian_episode(10, 3, 1, 8, 6, 0.8);
    assert!(adapt(&ep.task, &small_cfg()).is_ok());
    for cfg in [
        EsfrConfig { ensemble_size: 0, ..small_cfg() },
        EsfrConfig { dropout_rate: 1.0, ..small_cfg() },
        EsfrConfig { lr: 0.0, ..small_cfg() },
        EsfrConfig { mask_samples: 0, ..small_cfg() },
        EsfrConfig { arch: Some(ArchSpec::uniform(5, 2).unwrap()), ..small_cfg() },
    ] {
        assert!(adapt(&ep.task, &cfg).is_err());
    }
}

#[test]
fn lambda_tuning_prefers_smaller_on_ties() {
    let episodes: Vec<_> = (0..2).map(|i| gaussian_episode(20 + i, 3, 1, 7, 6, 0.01)).collect();
    let cfg = EsfrConfig {
        ensemble_size: 1,
        max_iterations: 5,
        ..small_cfg()
    };
    // well-separated clusters: every lambda scores 100%
    let choice = tune_lambda(&episodes, &cfg, &Method::Nn, &[0.8, 0.2, 0.4]).unwrap();
    assert_eq!(choice.lambda, 0.2);
    assert_eq!(choice.accuracies.iter().map(|a| a.0).collect::<Vec<_>>(), vec![0.2, 0.4, 0.8]);
    assert!(choice.accuracies.iter().all(|a| a.1 == 1.0));
    assert!(tune_lambda(&[], &cfg, &Method::Nn, &[0.1]).is_err());
}
