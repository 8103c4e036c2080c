use ndbench::datapipe::{generate_synthetic_session, preprocess, DriftConfig, PrepConfig, PreparedSession, SynthConfig};
use ndbench::harness::{
    finetune_new_session, scaling_sweep, train_multi_session, train_single_session, Checkpoint, HarnessError, Strategy,
    TrainConfig,
};
use ndbench::{ModelConfig, ModelKind};

fn sessions(days: usize, channels: usize, duration_s: f64) -> Vec<PreparedSession> {
    let mut cfg = SynthConfig::with_random_tuning(channels, duration_s, 17);
    cfg.drift = DriftConfig {
        rate_decay: 0.9,
        permutation_seed: 3,
        permute_fraction: 0.1,
    };
    (0..days)
        .map(|d| preprocess(&generate_synthetic_session(&cfg, d).unwrap(), &PrepConfig::default()).unwrap())
        .collect()
}

fn quick() -> TrainConfig {
    TrainConfig {
        epochs: 3,
        steps: 64,
        stride: 32,
        batch_size: 8,
        seed: 5,
        ..TrainConfig::single_session()
    }
}

#[test]
fn single_session_learns_and_reports() {
    let s = &sessions(1, 12, 60.0)[0];
    let mc = ModelConfig::tiny(ModelKind::Gru, 12, 16);
    let out = train_single_session(s, &mc, &TrainConfig { epochs: 6, ..quick() }).unwrap();
    let r = &out.record;
    assert_eq!(r.experiment, "single");
    assert_eq!(r.params, out.checkpoint.params.count());
    assert_eq!(r.r2_avg.unwrap(), (r.r2_x.unwrap() + r.r2_y.unwrap()) / 2.0);
    assert!(r.r2_avg.unwrap() > 0.5, "{r:?}");
    let losses = &out.log.epoch_losses;
    let down = losses.windows(2).filter(|w| w[1] <= w[0]).count();
    assert!(down * 5 >= (losses.len() - 1) * 4, "{losses:?}");
}

#[test]
fn zero_epochs_gives_untrained_scores() {
    let s = &sessions(1, 8, 30.0)[0];
    let mc = ModelConfig::tiny(ModelKind::Mamba, 8, 8);
    let out = train_single_session(s, &mc, &TrainConfig { epochs: 0, ..quick() }).unwrap();
    assert!(out.record.r2_avg.unwrap() <= 0.05);
    assert_eq!(out.log.steps, 0);
}

#[test]
fn identical_runs_are_bitwise_identical() {
    let s = &sessions(1, 8, 30.0)[0];
    for kind in ModelKind::ALL {
        let mc = ModelConfig::tiny(kind, 8, 8);
        let a = train_single_session(s, &mc, &quick()).unwrap();
        let b = train_single_session(s, &mc, &quick()).unwrap();
        assert_eq!(a.checkpoint.to_bytes().unwrap(), b.checkpoint.to_bytes().unwrap(), "{kind}");
        assert_eq!(a.record, b.record, "{kind}");
        let other = train_single_session(s, &mc, &TrainConfig { seed: 6, ..quick() }).unwrap();
        assert_ne!(a.checkpoint.params, other.checkpoint.params, "{kind}");
    }
}

#[test]
fn checkpoint_reproduces_evaluation() {
    let s = &sessions(1, 8, 30.0)[0];
    let mc = ModelConfig::tiny(ModelKind::Rwkv, 8, 8);
    let out = train_single_session(s, &mc, &quick()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    out.checkpoint.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back, out.checkpoint);
    let model = back.model().unwrap();
    let eval = ndbench::metrics::evaluate(&model, &back.norms, &s.test_windows(64).unwrap(), Default::default()).unwrap();
    assert_eq!(eval.scores, out.evaluation.scores);
}

#[test]
fn train_and_test_windows_never_share_bins() {
    for s in sessions(2, 6, 20.0) {
        let train = s.train_windows(64, 16).unwrap();
        let test = s.test_windows(64).unwrap();
        let train_end = train.samples.iter().map(|w| w.tag.start_bin + 64).max().unwrap();
        let test_start = test.samples.iter().map(|w| w.tag.start_bin).min().unwrap();
        assert!(train_end <= test_start);
    }
}

#[test]
fn multi_session_reports_pooled_and_per_session() {
    let ss = sessions(3, 8, 30.0);
    let mc = ModelConfig::tiny(ModelKind::Gru, 8, 8);
    for strategy in Strategy::ALL {
        let out = train_multi_session(&ss, &mc, &TrainConfig { strategy, ..quick() }).unwrap();
        assert_eq!(out.record.experiment, format!("multi_{strategy}"));
        assert_eq!(out.record.session, "pooled");
        assert_eq!(out.per_session.len(), 3);
        assert_eq!(out.checkpoint.norms.len(), 3);
        assert_eq!(out.checkpoint.provenance.data_hashes.len(), 3);
    }
    assert!(matches!(
        train_multi_session(&ss[..1], &mc, &quick()),
        Err(HarnessError::Config(_))
    ));
}

#[test]
fn finetune_builds_a_recovery_curve() {
    let ss = sessions(2, 8, 60.0);
    let mc = ModelConfig::tiny(ModelKind::Gru, 8, 8);
    let base = train_single_session(&ss[0], &mc, &quick()).unwrap().checkpoint;
    let cfg = TrainConfig {
        finetune_epochs: 2,
        max_increments: Some(3),
        ..quick()
    };
    let out = finetune_new_session(&base, &ss[1], &cfg).unwrap();
    let secs: Vec<f64> = out.curve.iter().map(|p| p.0).collect();
    assert_eq!(secs, [10.0, 20.0, 30.0]);
    assert_eq!(out.record.zero_shot_r2, Some(out.zero_shot.r2_avg));
    assert_eq!(out.record.r2_avg, Some(out.curve[2].1));
    assert!(out.recovery.is_some());

    let none = finetune_new_session(&base, &ss[1], &TrainConfig { max_increments: Some(0), ..cfg.clone() }).unwrap();
    assert!(none.curve.is_empty() && none.recovery.is_none());
    assert_eq!(none.record.r2_avg, Some(none.zero_shot.r2_avg));

    let short = &sessions(1, 8, 10.0)[0];
    assert!(matches!(
        finetune_new_session(&base, short, &TrainConfig { steps: 32, ..cfg }),
        Err(HarnessError::Config(_))
    ));
}

#[test]
fn scaling_rows_grow_with_depth() {
    let ss = sessions(2, 6, 20.0);
    let mc = ModelConfig::tiny(ModelKind::Mamba, 6, 8);
    let cfg = TrainConfig { epochs: 1, ..quick() };
    let rows = scaling_sweep(&mc, &[1, 2], &ss, &cfg, &[1, 2], 2).unwrap();
    assert_eq!(rows.len(), 2);
    assert!(rows[1].params > rows[0].params);
    assert!(rows.iter().all(|r| r.converged() && r.per_seed.len() == 2));
    let serial = scaling_sweep(&mc, &[1, 2], &ss, &cfg, &[1, 2], 1).unwrap();
    assert_eq!(rows, serial);
    assert!(scaling_sweep(&mc, &[2, 1], &ss, &cfg, &[1], 1).is_err());
}

#[test]
fn divergence_is_recorded_and_transformer_retries() {
    let s = &sessions(1, 6, 20.0)[0];
    let cfg = TrainConfig {
        learning_rate: 1e30,
        grad_clip: None,
        epochs: 2,
        ..quick()
    };
    let gru = train_single_session(s, &ModelConfig::tiny(ModelKind::Gru, 6, 8), &cfg).unwrap_err();
    assert!(matches!(gru, HarnessError::Diverged { .. }), "{gru}");
    let tf = train_single_session(s, &ModelConfig::tiny(ModelKind::Transformer, 6, 8), &cfg).unwrap_err();
    assert!(matches!(tf, HarnessError::NotConverged { attempts: 4, .. }), "{tf}");
    assert!(tf.is_training_failure());

    let failing = scaling_sweep(&ModelConfig::tiny(ModelKind::Gru, 6, 8), &[1], &sessions(2, 6, 20.0), &cfg, &[1], 1).unwrap();
    assert!(!failing[0].converged());
    assert_eq!(failing[0].per_seed, [None]);
}
