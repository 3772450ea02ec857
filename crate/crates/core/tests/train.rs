use rpose_core::data::{make_batch, AugmentConfig, Dataset};
use rpose_core::model::{Checkpoint, ModelConfig, PoseNet, Preset};
use rpose_core::supervision::{OcclusionScenario, SkeletonSpec};
use rpose_core::train::*;
use rpose_core::Error;
use rpose_tensor::Tensor;

fn small_config() -> ModelConfig {
    ModelConfig {
        preset: Preset::Custom,
        input_size: 32,
        keypoints: 14,
        parts: 13,
        iterations: 1,
        max_iterations: 3,
        channels: vec![6; 7],
        large_kernel: 5,
        ..ModelConfig::desk()
    }
}

fn data(count: usize, seed: u64) -> Dataset {
    Dataset::synthetic_with(&SkeletonSpec::lsp14(), 32, count, 0.3, 0.0, seed).unwrap()
}

fn cfg(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 3,
        lr_start: 0.01,
        lr_end: 0.002,
        seed: 5,
        eval_every: 0,
        ..TrainConfig::desk()
    }
}

fn params(model: &PoseNet<f32>) -> Vec<Tensor<f32>> {
    model.params().into_iter().cloned().collect()
}

#[test]
fn zero_learning_rate_keeps_parameters() {
    let d = data(1, 1);
    let model = PoseNet::new(small_config(), 3).unwrap();
    let before = params(&model);
    let c = TrainConfig {
        lr_start: 0.0,
        lr_end: 0.0,
        ..cfg(1)
    };
    let (after, log) = train(model, &d, c).unwrap();
    assert_eq!(params(&after), before);
    assert_eq!(log.steps().len(), 1);
    assert!(log.steps()[0].loss > 0.0, "{:?}", log.steps());
}

#[test]
fn same_seed_gives_identical_runs() {
    let d = data(5, 2);
    let c = TrainConfig {
        augment: Some(AugmentConfig::for_size(32)),
        ..cfg(2)
    };
    let run = || {
        let mut t = Trainer::new(PoseNet::new(small_config(), 9).unwrap(), c.clone()).unwrap();
        t.fit(&d, Some(&d), None).unwrap();
        (t.log().steps_csv(), t.log().epochs_csv(), t.checkpoint(None).to_bytes().unwrap())
    };
    assert_eq!(run(), run());
}

#[test]
fn resuming_matches_an_uninterrupted_run() {
    let d = data(4, 3);
    let c = TrainConfig {
        augment: Some(AugmentConfig::for_size(32)),
        ..cfg(10)
    };
    let mut straight = Trainer::new(PoseNet::new(small_config(), 4).unwrap(), c.clone()).unwrap();
    straight.fit(&d, None, None).unwrap();

    let mut model = PoseNet::new(small_config(), 4).unwrap();
    model.input_mean = d.channel_mean().unwrap();
    let mut first = Trainer::new(model, c.clone()).unwrap();
    for _ in 0..5 {
        first.run_epoch(&d).unwrap();
    }
    let bytes = first.checkpoint(Some(&d.skeleton)).to_bytes().unwrap();
    let log = first.log().clone();
    let mut second = Trainer::resume(Checkpoint::from_bytes(&bytes).unwrap(), c, log).unwrap();
    second.fit(&d, None, None).unwrap();

    assert_eq!(second.state(), straight.state());
    assert_eq!(second.model(), straight.model());
    assert_eq!(second.log(), straight.log());
    assert_eq!(
        second.checkpoint(None).to_bytes().unwrap(),
        straight.checkpoint(None).to_bytes().unwrap()
    );
}

#[test]
fn every_head_receives_gradient() {
    let d = data(3, 4);
    let t = Trainer::new(PoseNet::new(small_config(), 5).unwrap(), cfg(1)).unwrap();
    let samples: Vec<_> = d.samples.iter().collect();
    let batch = make_batch::<rand_chacha::ChaCha8Rng>(&samples, &d.skeleton, &[0.0; 3], OcclusionScenario::Include, None).unwrap();
    let (_, grads, _) = t.loss_and_grads(&batch).unwrap();
    for (name, g) in t.model().param_names().iter().zip(&grads) {
        assert!(g.data().iter().any(|&v| v != 0.0), "{name} has an all-zero gradient");
    }
}

#[test]
fn loss_falls_on_a_fixed_batch() {
    let d = data(4, 5);
    let mut t = Trainer::new(PoseNet::new(small_config(), 6).unwrap(), cfg(1)).unwrap();
    let samples: Vec<_> = d.samples.iter().collect();
    let mean = d.channel_mean().unwrap();
    let batch = make_batch::<rand_chacha::ChaCha8Rng>(&samples, &d.skeleton, &mean, OcclusionScenario::Include, None).unwrap();
    let losses: Vec<f64> = (0..50).map(|_| t.step(&batch, 0.03).unwrap().total).collect();
    assert!(losses[49] < 0.8 * losses[0], "{} -> {}", losses[0], losses[49]);
    let falls = losses.windows(2).filter(|w| w[1] < w[0]).count();
    assert!(falls >= 40, "loss fell on only {falls} of 49 steps: {losses:?}");
}

#[test]
fn clipping_bounds_the_first_update() {
    let d = data(2, 6);
    let c = TrainConfig {
        clip_norm: Some(1e-3),
        ..cfg(1)
    };
    let model = PoseNet::new(small_config(), 7).unwrap();
    let before = params(&model);
    let (after, _) = train(model, &d, c).unwrap();
    let moved: f64 = before
        .iter()
        .zip(params(&after))
        .flat_map(|(a, b)| a.data().iter().zip(b.data().to_vec()).map(|(x, y)| ((x - y) as f64).powi(2)).collect::<Vec<_>>())
        .sum::<f64>()
        .sqrt();
    assert!(moved > 0.0 && moved <= 0.01 * 1e-3 * 1.01, "{moved}");
}

#[test]
fn max_steps_stops_training() {
    let d = data(6, 7);
    let c = TrainConfig {
        max_steps: Some(4),
        ..cfg(10)
    };
    let (_, log) = train(PoseNet::new(small_config(), 8).unwrap(), &d, c).unwrap();
    assert_eq!(log.steps().len(), 4);
    assert_eq!(log.steps().last().unwrap().epoch, 1);
}

#[test]
fn non_finite_loss_aborts_and_keeps_last_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let d = data(3, 8);
    let c = TrainConfig { eval_every: 1, ..cfg(2) };
    let mut t = Trainer::new(PoseNet::new(small_config(), 9).unwrap(), c.clone()).unwrap();
    t.fit(&d, None, Some(dir.path())).unwrap();
    let saved = std::fs::read(dir.path().join(CHECKPOINT_FILE)).unwrap();

    let mut broken = Checkpoint::from_bytes(&saved).unwrap();
    broken.model.head.weight.data_mut()[0] = f32::NAN;
    let frozen = Checkpoint::new(broken.model.clone()).to_bytes().unwrap();
    let more = TrainConfig { epochs: 4, ..c };
    let mut t = Trainer::resume(broken, more, TrainLog::default()).unwrap();
    let err = t.fit(&d, None, Some(dir.path())).unwrap_err();
    assert!(matches!(err, Error::NonFiniteLoss { step: 3 }), "{err}");
    // NaN never compares equal, so compare the serialized weights.
    assert_eq!(Checkpoint::new(t.model().clone()).to_bytes().unwrap(), frozen);
    assert_eq!(std::fs::read(dir.path().join(CHECKPOINT_FILE)).unwrap(), saved);
}

#[test]
fn skeleton_mismatch_is_a_config_error() {
    let d = Dataset::synthetic(&SkeletonSpec::mpii16(), 32, 2, 0.0, 1).unwrap();
    let mut t = Trainer::new(PoseNet::new(small_config(), 1).unwrap(), cfg(1)).unwrap();
    assert!(matches!(t.fit(&d, None, None), Err(Error::Config(_))));
    assert!(matches!(evaluate(t.model(), &d, &EvalOptions::default()), Err(Error::Config(_))));
}

#[test]
fn evaluation_is_pure_and_repeatable() {
    let d = data(5, 9);
    let (model, _) = train(PoseNet::new(small_config(), 2).unwrap(), &d, cfg(2)).unwrap();
    let snapshot = model.clone();
    let opts = EvalOptions::default();
    let a = evaluate(&model, &d, &opts).unwrap();
    let b = evaluate(&model, &d, &opts).unwrap();
    assert_eq!(a, b);
    assert_eq!(model, snapshot);
    assert_eq!(a.detections.len(), 5);
    assert_eq!(a.head_mse.len(), 3);
    assert_eq!(a.pckh_per_pass.len(), 2);
    assert_eq!(a.pckh_per_pass[1], a.pckh.overall);

    let triple = EvalOptions {
        scales: vec![1.0; 3],
        ..EvalOptions::default()
    };
    assert_eq!(evaluate(&model, &d, &triple).unwrap(), a);

    let batched = EvalOptions {
        batch_size: 2,
        ..EvalOptions::default()
    };
    let c = evaluate(&model, &d, &batched).unwrap();
    assert_eq!(c.detections, a.detections);
    assert!((c.loss.total - a.loss.total).abs() < 1e-9);

    let more = EvalOptions {
        passes: Some(3),
        ..EvalOptions::default()
    };
    assert_eq!(evaluate(&model, &d, &more).unwrap().pckh_per_pass.len(), 4);
}

#[test]
fn scale_averaging_changes_heads_only_through_resampling() {
    let d = data(2, 10);
    let model = PoseNet::<f32>::new(small_config(), 3).unwrap();
    let imgs: Vec<_> = d.samples.iter().map(|s| &s.image).collect();
    let plain = predict_heads(&model, &imgs, &[1.0], None).unwrap();
    let aug = predict_heads(&model, &imgs, &[0.9, 1.0, 1.1], None).unwrap();
    assert_eq!(plain.final_head().shape(), aug.final_head().shape());
    assert_ne!(plain.final_head(), aug.final_head());
    assert!(predict_heads(&model, &imgs, &[], None).is_err());
    assert!(predict_heads(&model, &imgs, &[0.0], None).is_err());
}
