//! Acceptance criteria. Each test prints one `PASS`/`FAIL` line before
//! asserting. The learned-pipeline criteria share one trained model.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::Instant;

use deepservo::controller::GainVector;
use deepservo::data::{generate_dataset, sample_poses, split_dataset, DatasetManifest, SamplingRange, MANIFEST_FILE};
use deepservo::harness::{run_episode, trace_csv, ControllerKind, EpisodeConfig};
use deepservo::nn::weights;
use deepservo::regressor::{
    desk_training_config, evaluate, AxisMae, PoseNormalization, PoseRegressor, RegressorArchitecture,
};
use deepservo::verify::{
    classic_convergence_check, gradient_check_conv, gradient_check_dense, gradient_check_dropout,
    gradient_check_maxpool, gradient_check_mse, gradient_check_relu, interaction_matrix_check,
    oracle_decay_check, reference_desired_pose, DECAY_GAINS, DECAY_TOLERANCE, GRADIENT_TOLERANCE,
    JACOBIAN_TOLERANCE,
};
use deepservo::Scene;

const DATA_SEED: u64 = 11;
const TRAIN_SEED: u64 = 5;
const EPISODE_SEED: u64 = 3;

/// Written to stderr directly so the line shows even when the harness
/// captures test output.
fn verdict(criterion: u32, ok: bool, detail: String) {
    let line = format!("{} criterion {criterion}: {detail}\n", if ok { "PASS" } else { "FAIL" });
    std::io::stderr().write_all(line.as_bytes()).expect("stderr");
}

struct Learned {
    dir: tempfile::TempDir,
    manifest_bytes: Vec<u8>,
    model: PoseRegressor,
    weights: Vec<u8>,
    mae: AxisMae,
    range: SamplingRange,
    seconds: f64,
}

fn generate(dir: &Path) -> (DatasetManifest, DatasetManifest, DatasetManifest) {
    let manifest = generate_dataset(&SamplingRange::default(), 400, DATA_SEED, &Scene::default(), dir)
        .expect("dataset generation");
    let (train, test) = split_dataset(&manifest, 20, DATA_SEED).expect("split");
    (manifest, train, test)
}

fn train(dir: &Path, train_set: &DatasetManifest) -> PoseRegressor {
    let samples = train_set.load_samples(dir).expect("load training images");
    let mut model = PoseRegressor::new(
        RegressorArchitecture::desk_scale(),
        PoseNormalization::from_range(&train_set.range),
        TRAIN_SEED,
    )
    .expect("desk profile");
    model
        .train(&samples, &desk_training_config(TRAIN_SEED))
        .expect("training");
    model
}

fn learned() -> &'static Learned {
    static CELL: OnceLock<Learned> = OnceLock::new();
    CELL.get_or_init(|| {
        let start = Instant::now();
        let dir = tempfile::tempdir().expect("temp dir");
        let (manifest, train_set, test_set) = generate(dir.path());
        assert_eq!((train_set.len(), test_set.len()), (380, 20));
        let model = train(dir.path(), &train_set);
        let mae = evaluate(&model, &test_set.load_samples(dir.path()).expect("test images")).expect("evaluate");
        Learned {
            manifest_bytes: std::fs::read(dir.path().join(MANIFEST_FILE)).expect("manifest"),
            weights: weights::encode(&model.network),
            dir,
            model,
            mae,
            range: manifest.range,
            seconds: start.elapsed().as_secs_f64(),
        }
    })
}

#[test]
fn criterion_1_gradient_correctness() {
    let start = Instant::now();
    let checks = [
        ("conv", gradient_check_conv(101, 100).unwrap()),
        ("dense", gradient_check_dense(102, 100).unwrap()),
        ("relu", gradient_check_relu(103, 100).unwrap()),
        ("maxpool", gradient_check_maxpool(104, 100).unwrap()),
        ("dropout", gradient_check_dropout(105, 100).unwrap()),
        ("mse", gradient_check_mse(106, 100).unwrap()),
    ];
    let secs = start.elapsed().as_secs_f64();
    let worst = checks.iter().map(|c| c.1).fold(0.0, f64::max);
    let ok = worst < GRADIENT_TOLERANCE && secs < 30.0;
    let detail = checks
        .iter()
        .map(|(n, e)| format!("{n}={e:.2e}"))
        .collect::<Vec<_>>()
        .join(" ");
    verdict(1, ok, format!("max rel err {worst:.2e} < {GRADIENT_TOLERANCE:e} [{detail}] in {secs:.1}s"));
    assert!(ok);
}

#[test]
fn criterion_2_interaction_matrix_oracle() {
    let start = Instant::now();
    let worst = interaction_matrix_check(&Scene::default(), 202, 100).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let ok = worst < JACOBIAN_TOLERANCE && secs < 5.0;
    verdict(2, ok, format!("max rel err {worst:.2e} < {JACOBIAN_TOLERANCE:e} over 100 poses in {secs:.2}s"));
    assert!(ok);
}

#[test]
fn criterion_3_oracle_geometric_decay() {
    let start = Instant::now();
    let worst = oracle_decay_check(&Scene::default(), &DECAY_GAINS, 10, 303).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let ok = worst < DECAY_TOLERANCE && secs < 5.0;
    verdict(
        3,
        ok,
        format!("max |e_k - (1-λ)^k e_0| = {worst:.2e} < {DECAY_TOLERANCE:e} for λ in {DECAY_GAINS:?}, 10 episodes each, {secs:.2}s"),
    );
    assert!(ok);
}

#[test]
fn criterion_4_classic_ibvs_convergence() {
    let start = Instant::now();
    let (converged, worst) = classic_convergence_check(&Scene::default(), 0.1, 20, 200, 404).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let ok = converged == 20 && secs < 10.0;
    verdict(
        4,
        ok,
        format!("{converged}/20 episodes below 1 px within 200 steps (worst best-error {worst:.2e} px), {secs:.2}s"),
    );
    assert!(ok);
}

#[test]
fn criterion_5_desk_scale_learned_pipeline() {
    let l = learned();
    let widths = l.range.widths();
    let limits = [0.05 * widths[0], 0.05 * widths[1], 0.05 * widths[2], 5.0];
    let ok_axes: Vec<bool> = (0..4).map(|a| l.mae.0[a] < limits[a]).collect();
    let ok = ok_axes.iter().all(|b| *b) && l.seconds < 15.0 * 60.0;
    verdict(
        5,
        ok,
        format!(
            "held-out MAE x={:.2} y={:.2} z={:.2} mm rz={:.2} deg, limits {:.1}/{:.1}/{:.1} mm {:.1} deg, {:.0}s",
            l.mae.x(),
            l.mae.y(),
            l.mae.z(),
            l.mae.rz(),
            limits[0],
            limits[1],
            limits[2],
            limits[3],
            l.seconds
        ),
    );
    assert!(ok);
}

fn learned_episode_config(start: deepservo::Pose4) -> EpisodeConfig {
    let mut config = EpisodeConfig::new(start, reference_desired_pose(), ControllerKind::Learned);
    config.gains = GainVector::uniform(0.2).unwrap();
    config.max_steps = 50;
    config
}

#[test]
fn criterion_6_end_to_end_learned_servo() {
    let l = learned();
    let start = Instant::now();
    let scene = Scene::default();
    let starts = sample_poses(&SamplingRange::default(), 5, EPISODE_SEED, &scene).unwrap();
    let mut reached = 0;
    let mut no_growth = true;
    let mut lines = Vec::new();
    for s in starts {
        let trace = run_episode(&learned_episode_config(s), &scene, Some(&l.model)).unwrap();
        let fin = trace.final_error().to_array();
        let within = (0..4).all(|a| fin[a].abs() < 2.0 * l.mae.0[a]);
        reached += within as usize;
        no_growth &= trace.final_error().norm() <= trace.initial_error().norm();
        lines.push(format!(
            "[{} steps {} final ({:.2}, {:.2}, {:.2}, {:.2})]",
            trace.status,
            trace.command_count(),
            fin[0],
            fin[1],
            fin[2],
            fin[3]
        ));
    }
    let secs = start.elapsed().as_secs_f64();
    let ok = reached >= 4 && no_growth && secs < 120.0;
    verdict(
        6,
        ok,
        format!(
            "{reached}/5 episodes within 2x MAE, error norm never grew: {no_growth}, {secs:.1}s {}",
            lines.join(" ")
        ),
    );
    assert!(ok);
}

#[test]
fn criterion_7_determinism_and_formats() {
    let l = learned();
    let start = Instant::now();

    let dir = tempfile::tempdir().unwrap();
    let (_, train_set, _) = generate(dir.path());
    let manifest_same = std::fs::read(dir.path().join(MANIFEST_FILE)).unwrap() == l.manifest_bytes;
    let images_same = (0..train_set.len()).all(|i| {
        let a: PathBuf = train_set.image_path(dir.path(), i);
        let b = l.dir.path().join(a.file_name().unwrap());
        std::fs::read(&a).unwrap() == std::fs::read(&b).unwrap()
    });

    let retrained = train(dir.path(), &train_set);
    let weights_same = weights::encode(&retrained.network) == l.weights;

    let scene = Scene::default();
    let s = sample_poses(&SamplingRange::default(), 1, EPISODE_SEED, &scene).unwrap()[0];
    let a = trace_csv(&run_episode(&learned_episode_config(s), &scene, Some(&l.model)).unwrap()).unwrap();
    let b = trace_csv(&run_episode(&learned_episode_config(s), &scene, Some(&retrained)).unwrap()).unwrap();
    let trace_same = a == b;

    let path = dir.path().join("model.vsnn");
    l.model.save(&path).unwrap();
    let loaded = PoseRegressor::load(&path).unwrap();
    let round_trip = weights::encode(&loaded.network) == std::fs::read(&path).unwrap()
        && std::fs::read(&path).unwrap() == l.weights;

    let secs = start.elapsed().as_secs_f64();
    let ok = manifest_same && images_same && weights_same && trace_same && round_trip && secs < 15.0 * 60.0;
    verdict(
        7,
        ok,
        format!(
            "manifest {manifest_same}, images {images_same}, weights+CRC {weights_same}, trace.csv {trace_same}, load/save round trip {round_trip}, {secs:.0}s"
        ),
    );
    assert!(ok);
}
