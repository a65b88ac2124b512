//! Gradient checks and finiteness along a short two-stage run.

use moblurf::fields::MlpSpec;
use moblurf::train::{gradcheck_dataset, gradcheck_loss, Stage, StepKind, TrainConfig, Trainer};

fn config() -> TrainConfig {
    TrainConfig {
        bri_iters: 16,
        mdd_iters: 8,
        batch_size: 6,
        n_samples: 6,
        num_latent: 2,
        mlp: MlpSpec {
            trunk_depth: 2,
            trunk_width: 16,
            rgb_width: 8,
            local_depth: 1,
            local_width: 8,
        },
        staticness_bias: 0.0,
        log_every: 1,
        ..TrainConfig::desk()
    }
}

fn check_all(t: &Trainer, label: &str) {
    let kinds: &[StepKind] = match t.state.stage {
        Stage::Bri => &[StepKind::BriEven, StepKind::BriOdd],
        Stage::Mdd => &[StepKind::Mdd],
    };
    let batch = t.batch_at(t.global_iteration()).unwrap();
    for &kind in kinds {
        let r = gradcheck_loss(&t.model, &t.config, &batch, kind, t.data.near, t.data.far, 3, 1e-6, 1e-3, 9).unwrap();
        assert!(r.passed, "{label} {kind:?}: {r:?}");
    }
}

#[test]
fn gradients_hold_along_a_run() {
    let ds = gradcheck_dataset(2).unwrap();
    let mut t = Trainer::new(config(), &ds).unwrap();
    check_all(&t, "start");
    for _ in 0..9 {
        let l = t.step().unwrap();
        assert!(l.is_finite());
    }
    check_all(&t, "mid-first-stage");
    while t.state.stage == Stage::Bri {
        t.step().unwrap();
    }
    t.step().unwrap();
    check_all(&t, "second-stage");
    while !t.is_done() {
        assert!(t.step().unwrap().is_finite());
    }
    check_all(&t, "end");
    assert!(t.model.store.iter().all(|(_, p)| p.value.data.iter().all(|x| x.is_finite())));
    assert_eq!(t.log.len(), 24);
    assert!(t.log.iter().all(|r| r.loss.is_finite()));
}

#[test]
fn losses_decrease_on_static_scene() {
    let mut s = moblurf::data::AnalyticScene::preset("static-64").unwrap();
    s.width = 16;
    s.height = 16;
    s.num_frames = 4;
    s.intrinsics = s.intrinsics.scaled(0.25);
    let ds = moblurf::data::synthesize(&s, "static-64", 0, moblurf::data::ExposureConfig::default()).unwrap();
    let cfg = TrainConfig {
        bri_iters: 300,
        mdd_iters: 0,
        batch_size: 64,
        n_samples: 16,
        mlp_lr: moblurf::train::RateRange { start: 5e-3, end: 1e-3 },
        ..config()
    };
    let mut t = Trainer::new(cfg, &ds).unwrap();
    let probe = t.batch_at(0).unwrap();
    let before = t.evaluate_loss(&probe, StepKind::BriEven).unwrap().mphoto_static;
    while !t.is_done() {
        t.step().unwrap();
    }
    let after = t.evaluate_loss(&probe, StepKind::BriEven).unwrap().mphoto_static;
    assert!(after < 0.5 * before, "masked photometric {before} -> {after}");
}
