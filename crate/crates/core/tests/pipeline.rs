use deepservo::controller::{pose_error, proportional_command, GainVector};
use deepservo::data::{generate_dataset, DatasetManifest, SamplingRange, MANIFEST_FILE};
use deepservo::harness::{run_episode, trace_csv, ControllerKind, EpisodeConfig};
use deepservo::image::ImageBuffer;
use deepservo::nn::{weights, TrainingConfig};
use deepservo::regressor::{
    evaluate, PoseNormalization, PosePredictor, PoseRegressor, RegressorArchitecture,
};
use deepservo::{Pose4, Scene};

fn small_dataset(count: usize, seed: u64) -> (tempfile::TempDir, DatasetManifest) {
    let dir = tempfile::tempdir().unwrap();
    let m = generate_dataset(&SamplingRange::default(), count, seed, &Scene::default(), dir.path()).unwrap();
    (dir, m)
}

fn regressor(seed: u64) -> PoseRegressor {
    PoseRegressor::new(
        RegressorArchitecture::desk_scale(),
        PoseNormalization::from_range(&SamplingRange::default()),
        seed,
    )
    .unwrap()
}

#[test]
fn stored_images_match_a_fresh_render() {
    let (dir, m) = small_dataset(12, 8);
    let scene = Scene::default();
    let reread = DatasetManifest::read(dir.path(), MANIFEST_FILE).unwrap();
    assert_eq!(reread, m);
    for (i, entry) in reread.entries.iter().enumerate() {
        let stored = ImageBuffer::read_pgm(&reread.image_path(dir.path(), i)).unwrap();
        let fresh = scene.render(&entry.pose).unwrap();
        assert_eq!(stored.quantized(), fresh.quantized());
    }
}

#[test]
fn one_sample_is_memorized() {
    let (dir, m) = small_dataset(1, 3);
    let samples = m.load_samples(dir.path()).unwrap();
    let mut model = regressor(1);
    let config = TrainingConfig {
        learning_rate: 0.02,
        batch_size: 1,
        epochs: 150,
        dropout_keep: 1.0,
        ..TrainingConfig::default()
    };
    let report = model.train(&samples, &config).unwrap();
    let (first, last) = (report.epoch_losses[0], *report.epoch_losses.last().unwrap());
    assert!(last < 1e-3 * first, "first {first} last {last}");
}

#[test]
fn zero_learning_rate_is_a_fixed_point() {
    let (dir, m) = small_dataset(6, 4);
    let samples = m.load_samples(dir.path()).unwrap();
    let mut model = regressor(2);
    let before = weights::encode(&model.network);
    let config = TrainingConfig {
        learning_rate: 0.0,
        epochs: 2,
        batch_size: 4,
        ..TrainingConfig::default()
    };
    model.train(&samples, &config).unwrap();
    assert_eq!(weights::encode(&model.network), before);
}

#[test]
fn equal_seeds_train_identically() {
    let (dir, m) = small_dataset(10, 5);
    let samples = m.load_samples(dir.path()).unwrap();
    let config = TrainingConfig {
        learning_rate: 0.05,
        epochs: 3,
        batch_size: 4,
        rng_seed: 9,
        ..TrainingConfig::default()
    };
    let mut a = regressor(3);
    let mut b = regressor(3);
    a.train(&samples, &config).unwrap();
    b.train(&samples, &config).unwrap();
    assert_eq!(weights::encode(&a.network), weights::encode(&b.network));
}

#[test]
fn toy_training_loss_decreases() {
    let (dir, m) = small_dataset(10, 6);
    let samples = m.load_samples(dir.path()).unwrap();
    let mut decreased = 0;
    for seed in 0..20 {
        let mut model = regressor(100 + seed);
        let config = TrainingConfig {
            learning_rate: 0.05,
            epochs: 5,
            batch_size: 5,
            rng_seed: seed,
            ..TrainingConfig::default()
        };
        let report = model.train(&samples, &config).unwrap();
        if report.epoch_losses.last().unwrap() < &report.epoch_losses[0] {
            decreased += 1;
        }
    }
    assert!(decreased >= 19, "loss decreased in {decreased}/20 runs");
}

#[test]
fn shape_and_empty_errors() {
    let mut model = regressor(4);
    let small = ImageBuffer::filled(32, 32, 0.5);
    assert!(matches!(model.predict_pose(&small), Err(deepservo::Error::ShapeMismatch(_))));
    assert!(matches!(
        model.train(&[], &TrainingConfig::default()),
        Err(deepservo::Error::EmptyDataset)
    ));
    assert!(matches!(evaluate(&model, &[]), Err(deepservo::Error::EmptyDataset)));
}

#[test]
fn untrained_predictions_are_finite_and_pure() {
    let (dir, m) = small_dataset(5, 7);
    let samples = m.load_samples(dir.path()).unwrap();
    let model = regressor(5);
    for s in &samples {
        let a = model.predict_pose(&s.image).unwrap();
        let b = model.predict_pose(&s.image).unwrap();
        assert_eq!(a, b);
        assert!(a.to_array().iter().all(|v| v.is_finite()));
    }
}

/// Predictor that returns the exact label of each dataset image.
struct Labels(Vec<(ImageBuffer, Pose4)>);

impl PosePredictor for Labels {
    fn predict_pose(&self, image: &ImageBuffer) -> deepservo::Result<Pose4> {
        Ok(self.0.iter().find(|(i, _)| i == image).expect("known image").1)
    }
}

#[test]
fn perfect_predictor_scores_zero() {
    let (dir, m) = small_dataset(8, 9);
    let samples = m.load_samples(dir.path()).unwrap();
    let oracle = Labels(samples.iter().map(|s| (s.image.clone(), s.label)).collect());
    assert_eq!(evaluate(&oracle, &samples).unwrap().0, [0.0; 4]);
}

#[test]
fn saved_model_predicts_identically() {
    let (dir, m) = small_dataset(3, 10);
    let samples = m.load_samples(dir.path()).unwrap();
    let model = regressor(6);
    let path = dir.path().join("model.vsnn");
    model.save(&path).unwrap();
    let back = PoseRegressor::load(&path).unwrap();
    assert_eq!(back, model);
    for s in &samples {
        assert_eq!(back.predict_pose(&s.image).unwrap(), model.predict_pose(&s.image).unwrap());
    }
    std::fs::write(dir.path().join("model.norm"), "input_size=64\n").unwrap();
    assert!(PoseRegressor::load(&path).is_err());
}

#[test]
fn episodes_are_reproducible() {
    let scene = Scene::default();
    let desired = Pose4::new(0.0, 0.0, 75.0, 0.0);
    let start = Pose4::new(-30.0, 22.0, 10.0, -31.0);
    for kind in [ControllerKind::Oracle, ControllerKind::Classic] {
        let mut c = EpisodeConfig::new(start, desired, kind);
        c.max_steps = 80;
        let a = trace_csv(&run_episode(&c, &scene, None).unwrap()).unwrap();
        let b = trace_csv(&run_episode(&c, &scene, None).unwrap()).unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn oracle_decoupling() {
    let desired = Pose4::new(0.0, 0.0, 75.0, 0.0);
    let gains = GainVector::uniform(0.2).unwrap();
    let base = Pose4::new(10.0, -5.0, 40.0, 12.0);
    let moved = base.offset([3.0, 0.0, 0.0, 0.0]);
    let a = proportional_command(&pose_error(&base, &desired), &gains);
    let b = proportional_command(&pose_error(&moved, &desired), &gains);
    assert_ne!(a.dx, b.dx);
    assert_eq!([a.dy, a.dz, a.drz], [b.dy, b.dz, b.drz]);
}
