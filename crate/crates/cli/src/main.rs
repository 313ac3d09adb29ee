use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use deepservo::controller::{GainVector, DEFAULT_EPISODE_GAIN};
use deepservo::data::{
    generate_dataset, sample_poses, split_dataset, DatasetManifest, SamplingRange, DEFAULT_COUNT,
    DEFAULT_TEST_COUNT, MANIFEST_FILE, TEST_FILE, TRAIN_FILE,
};
use deepservo::harness::{
    convergence_step, export_trace, run_episode, ControllerKind, EpisodeConfig, EpisodeTrace, DEFAULT_MAX_STEPS,
};
use deepservo::ibvs::DEFAULT_CLASSIC_GAIN;
use deepservo::nn::TrainingConfig;
use deepservo::regressor::{
    evaluate, mean_absolute_error, PoseNormalization, PoseRegressor, RegressorArchitecture, desk_training_config,
};
use deepservo::verify::run_all;
use deepservo::{Error, Pose4, Scene};

#[derive(Parser)]
#[command(name = "deepservo", version, about = "Eye-in-hand visual servoing simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a labelled dataset and its train/test split.
    GenData(GenData),
    /// Train the pose regressor on a dataset's training split.
    Train(Train),
    /// Report per-axis mean absolute error on a dataset split.
    Eval(Eval),
    /// Run an episode with the learned two-stream controller.
    Servo(Servo),
    /// Run an episode with the point-feature IBVS baseline.
    ServoClassic(ServoClassic),
    /// Run an episode with the ground-truth pose controller.
    ServoOracle(ServoOracle),
    /// Run the gradient, interaction-matrix and decay checks.
    Check(Check),
}

#[derive(Args)]
struct RangeArgs {
    #[arg(long, default_value_t = -60.0, allow_negative_numbers = true)]
    x_min: f64,
    #[arg(long, default_value_t = 60.0, allow_negative_numbers = true)]
    x_max: f64,
    #[arg(long, default_value_t = -60.0, allow_negative_numbers = true)]
    y_min: f64,
    #[arg(long, default_value_t = 60.0, allow_negative_numbers = true)]
    y_max: f64,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    z_min: f64,
    #[arg(long, default_value_t = 150.0, allow_negative_numbers = true)]
    z_max: f64,
    #[arg(long, default_value_t = -45.0, allow_negative_numbers = true)]
    rz_min: f64,
    #[arg(long, default_value_t = 45.0, allow_negative_numbers = true)]
    rz_max: f64,
}

impl RangeArgs {
    fn range(&self) -> SamplingRange {
        SamplingRange {
            x: (self.x_min, self.x_max),
            y: (self.y_min, self.y_max),
            z: (self.z_min, self.z_max),
            rz: (self.rz_min, self.rz_max),
        }
    }
}

#[derive(Args)]
struct GenData {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_COUNT)]
    count: usize,
    /// Number of held-out test samples.
    #[arg(long = "test", default_value_t = DEFAULT_TEST_COUNT)]
    test_count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    range: RangeArgs,
}

#[derive(Args)]
struct Train {
    /// Dataset directory written by gen-data.
    #[arg(long)]
    data: PathBuf,
    /// Weights file to write; the normalization sidecar goes next to it.
    #[arg(long)]
    model: PathBuf,
    /// Defaults to the desk-scale recipe.
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    /// Dropout survival probability.
    #[arg(long)]
    dropout_keep: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct Eval {
    #[arg(long)]
    data: PathBuf,
    /// Trained weights file. Not needed with --oracle.
    #[arg(long, required_unless_present = "oracle")]
    model: Option<PathBuf>,
    /// Score the ground-truth labels instead of a model.
    #[arg(long)]
    oracle: bool,
    /// Which split to score: test, train or all.
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct EpisodeArgs {
    /// Start pose `x,y,z,rz`; drawn from the sampling range when absent.
    #[arg(long, allow_hyphen_values = true)]
    initial: Option<String>,
    /// Goal pose `x,y,z,rz`.
    #[arg(long, allow_hyphen_values = true, default_value = "0,0,75,0")]
    desired: String,
    #[arg(long, default_value_t = DEFAULT_MAX_STEPS)]
    max_steps: usize,
    /// Per-axis tolerance `x,y,z,rz` (mm, degrees).
    #[arg(long, default_value = "1,1,1,1")]
    tolerance: String,
    /// Directory for trace.csv and the error plots.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct Servo {
    #[arg(long)]
    model: PathBuf,
    /// Gain for all four axes, or `l1,l2,l3,l4`.
    #[arg(long, default_value_t = DEFAULT_EPISODE_GAIN.to_string())]
    gains: String,
    #[command(flatten)]
    episode: EpisodeArgs,
}

#[derive(Args)]
struct ServoClassic {
    #[arg(long, default_value_t = DEFAULT_CLASSIC_GAIN)]
    lambda: f64,
    #[command(flatten)]
    episode: EpisodeArgs,
}

#[derive(Args)]
struct ServoOracle {
    #[arg(long, default_value_t = DEFAULT_EPISODE_GAIN.to_string())]
    gains: String,
    #[command(flatten)]
    episode: EpisodeArgs,
}

#[derive(Args)]
struct Check {
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Failure with the exit status it maps to.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure {
            code: if e.is_config_error() { 1 } else { 2 },
            message: e.to_string(),
        }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: 1,
        message: message.into(),
    }
}

fn parse_four(text: &str, what: &str) -> Result<[f64; 4], Failure> {
    let values: Vec<f64> = text
        .split(',')
        .map(|s| s.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| usage(format!("{what}: expected four comma-separated numbers, got {text:?}")))?;
    values
        .try_into()
        .map_err(|_| usage(format!("{what}: expected four comma-separated numbers, got {text:?}")))
}

fn parse_pose(text: &str, what: &str) -> Result<Pose4, Failure> {
    let [x, y, z, rz] = parse_four(text, what)?;
    Pose4::try_new(x, y, z, rz).map_err(Failure::from)
}

fn parse_gains(text: &str) -> Result<GainVector, Failure> {
    let gains = if text.contains(',') {
        GainVector::new(parse_four(text, "--gains")?)
    } else {
        let g = text
            .trim()
            .parse::<f64>()
            .map_err(|_| usage(format!("--gains: not a number: {text:?}")))?;
        GainVector::uniform(g)
    }?;
    for w in gains.warnings() {
        eprintln!("warning: {w}");
    }
    Ok(gains)
}

fn fmt_pose(p: &[f64; 4]) -> String {
    format!("({:.6}, {:.6}, {:.6}, {:.6})", p[0], p[1], p[2], p[3])
}

fn gen_data(args: GenData) -> Result<(), Failure> {
    let scene = Scene::default();
    if args.test_count >= args.count {
        return Err(usage(format!(
            "--test {} leaves no training samples out of {}",
            args.test_count, args.count
        )));
    }
    let manifest = generate_dataset(&args.range.range(), args.count, args.seed, &scene, &args.out)?;
    let (train, test) = split_dataset(&manifest, args.test_count, args.seed)?;
    train.write(&args.out, TRAIN_FILE)?;
    test.write(&args.out, TEST_FILE)?;
    println!(
        "generated {} samples in {}: {} train / {} test",
        manifest.len(),
        args.out.display(),
        train.len(),
        test.len()
    );
    Ok(())
}

fn train(args: Train) -> Result<(), Failure> {
    let manifest = DatasetManifest::read(&args.data, TRAIN_FILE)?;
    let samples = manifest.load_samples(&args.data)?;
    let recipe = desk_training_config(args.seed);
    let config = TrainingConfig {
        learning_rate: args.lr.unwrap_or(recipe.learning_rate),
        weight_decay: args.weight_decay.unwrap_or(recipe.weight_decay),
        batch_size: args.batch.unwrap_or(recipe.batch_size),
        epochs: args.epochs.unwrap_or(recipe.epochs),
        dropout_keep: args.dropout_keep.unwrap_or(recipe.dropout_keep),
        rng_seed: args.seed,
    };
    let mut model = PoseRegressor::new(
        RegressorArchitecture::desk_scale(),
        PoseNormalization::from_range(&manifest.range),
        args.seed,
    )?;
    println!("training on {} samples, {} parameters", samples.len(), model.network.param_count());
    model.train_with(&samples, &config, |epoch, loss| println!("epoch {:>3} loss {loss:.6}", epoch + 1))?;
    model.save(&args.model)?;
    println!("wrote {}", args.model.display());
    Ok(())
}

fn eval(args: Eval) -> Result<(), Failure> {
    let csv = match args.split.as_str() {
        "test" => TEST_FILE,
        "train" => TRAIN_FILE,
        "all" => MANIFEST_FILE,
        other => return Err(usage(format!("--split must be test, train or all, got {other:?}"))),
    };
    let manifest = DatasetManifest::read(&args.data, csv)?;
    let mae = if args.oracle {
        let pairs: Vec<(Pose4, Pose4)> = manifest.entries.iter().map(|e| (e.pose, e.pose)).collect();
        mean_absolute_error(&pairs)?
    } else {
        let path = args.model.as_deref().expect("required unless --oracle");
        let model = PoseRegressor::load(path)?;
        evaluate(&model, &manifest.load_samples(&args.data)?)?
    };
    println!("samples {}", manifest.len());
    println!("MAE {} (mm, mm, mm, deg)", fmt_pose(&mae.0));
    Ok(())
}

fn episode_config(args: &EpisodeArgs, controller: ControllerKind, scene: &Scene) -> Result<EpisodeConfig, Failure> {
    let initial = match &args.initial {
        Some(text) => parse_pose(text, "--initial")?,
        None => sample_poses(&SamplingRange::default(), 1, args.seed, scene)?[0],
    };
    let desired = parse_pose(&args.desired, "--desired")?;
    let mut config = EpisodeConfig::new(initial, desired, controller);
    config.max_steps = args.max_steps;
    config.tolerance = parse_four(&args.tolerance, "--tolerance")?;
    config.validate()?;
    Ok(config)
}

fn report(trace: &EpisodeTrace, out: Option<&Path>) -> Result<(), Failure> {
    println!("status {}", trace.status);
    println!("steps {}", trace.command_count());
    println!("initial error {}", fmt_pose(&trace.initial_error().to_array()));
    println!("final error {}", fmt_pose(&trace.final_error().to_array()));
    match convergence_step(trace, &trace.tolerance) {
        Some(k) => println!("convergence step {k}"),
        None => println!("convergence step none"),
    }
    if let Some(px) = trace.steps.iter().rev().find_map(|s| s.feature_error_px) {
        println!("final feature error {px:.6} px");
    }
    if let Some(dir) = out {
        export_trace(trace, dir)?;
        println!("wrote trace to {}", dir.display());
    }
    Ok(())
}

/// Unreachable endpoints are a configuration problem, not a runtime one.
fn episode(config: &EpisodeConfig, scene: &Scene, model: Option<&PoseRegressor>) -> Result<EpisodeTrace, Failure> {
    let predictor = model.map(|m| m as &dyn deepservo::regressor::PosePredictor);
    run_episode(config, scene, predictor).map_err(|e| match e {
        Error::TargetNotVisible => usage("target is not visible from the initial or desired pose"),
        other => other.into(),
    })
}

fn servo(args: Servo) -> Result<(), Failure> {
    let scene = Scene::default();
    let mut config = episode_config(&args.episode, ControllerKind::Learned, &scene)?;
    config.gains = parse_gains(&args.gains)?;
    let model = PoseRegressor::load(&args.model)?;
    let trace = episode(&config, &scene, Some(&model))?;
    report(&trace, args.episode.out.as_deref())
}

fn servo_classic(args: ServoClassic) -> Result<(), Failure> {
    let scene = Scene::default();
    let mut config = episode_config(&args.episode, ControllerKind::Classic, &scene)?;
    config.classic_gain = args.lambda;
    config.validate()?;
    let trace = episode(&config, &scene, None)?;
    report(&trace, args.episode.out.as_deref())
}

fn servo_oracle(args: ServoOracle) -> Result<(), Failure> {
    let scene = Scene::default();
    let mut config = episode_config(&args.episode, ControllerKind::Oracle, &scene)?;
    config.gains = parse_gains(&args.gains)?;
    let trace = episode(&config, &scene, None)?;
    // steps the closed-form decay needs to bring every axis inside tolerance
    let e0 = trace.initial_error().to_array();
    let bound = (0..4)
        .map(|a| {
            let (e, t, g) = (e0[a].abs(), config.tolerance[a], config.gains.values()[a]);
            if e <= t {
                0
            } else if g == 1.0 {
                1
            } else {
                ((t / e).ln() / (1.0 - g).abs().ln()).ceil() as usize
            }
        })
        .max()
        .unwrap_or(0);
    println!("closed-form steps {bound}");
    report(&trace, args.episode.out.as_deref())
}

fn check(args: Check) -> Result<(), Failure> {
    let results = run_all(args.seed)?;
    for r in &results {
        println!("{r}");
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    if failed > 0 {
        return Err(Failure {
            code: 2,
            message: format!("{failed} of {} checks failed", results.len()),
        });
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Servo(a) => servo(a),
        Command::ServoClassic(a) => servo_classic(a),
        Command::ServoOracle(a) => servo_oracle(a),
        Command::Check(a) => check(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
