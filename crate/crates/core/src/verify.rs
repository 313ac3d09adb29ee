//! Numerical self-checks: finite-difference gradients, the interaction
//! matrix, pseudo-inverse identities and closed-loop decay laws.

use std::fmt;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::controller::GainVector;
use crate::data::{sample_poses, SamplingRange};
use crate::error::Result;
use crate::geometry::Pose4;
use crate::harness::{run_episode, ControllerKind, EpisodeConfig, EpisodeStatus};
use crate::ibvs::{
    classic_step, corner_depths, extract_point_features, integrate_camera_velocity, interaction_matrix,
    pseudo_inverse, CameraVelocity4,
};
use crate::nn::network::sample_rng;
use crate::nn::{ops, DropoutMode, LayerSpec, Network, Tensor};
use crate::render::Scene;

/// Central-difference step.
pub const FD_STEP: f64 = 1e-4;
pub const GRADIENT_TOLERANCE: f64 = 1e-4;
pub const JACOBIAN_TOLERANCE: f64 = 1e-3;
pub const PENROSE_TOLERANCE: f64 = 1e-8;
pub const DECAY_TOLERANCE: f64 = 1e-9;
pub const FEATURE_TOLERANCE_PX: f64 = 1.0;
/// Gains covered by the oracle decay check.
pub const DECAY_GAINS: [f64; 5] = [0.03, 0.1, 0.2, 0.5, 1.0];
/// Floor on the denominator of the relative error, so that entries whose
/// true gradient is zero compare on absolute round-off.
const REL_FLOOR: f64 = 1e-6;

/// Desired pose used by the closed-loop checks: the middle of the default
/// sampling range.
pub fn reference_desired_pose() -> Pose4 {
    Pose4::new(0.0, 0.0, 75.0, 0.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub measured: f64,
    pub threshold: f64,
}

impl CheckResult {
    /// Pass when `measured < threshold`.
    pub fn below(name: &'static str, measured: f64, threshold: f64) -> Self {
        CheckResult {
            name,
            passed: measured < threshold,
            measured,
            threshold,
        }
    }

    /// Pass when `measured >= threshold`.
    pub fn at_least(name: &'static str, measured: f64, threshold: f64) -> Self {
        CheckResult {
            name,
            passed: measured >= threshold,
            measured,
            threshold,
        }
    }
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {} measured={:.3e} threshold={:.3e}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.measured,
            self.threshold
        )
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("valid shape")
}

/// Values in `[-1, 1)` whose magnitude is at least `min_abs`.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], min_abs: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(min_abs..1.0);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("valid shape")
}

fn dot(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Max relative error between `analytic` and the central difference of
/// `f` with respect to every entry of `x`.
fn fd_compare(x: &Tensor, analytic: &Tensor, mut f: impl FnMut(&Tensor) -> f64) -> f64 {
    let mut worst = 0.0_f64;
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + FD_STEP;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - FD_STEP;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * FD_STEP);
        worst = worst.max(relative_error(analytic.data()[i], numeric));
    }
    worst
}

/// Convolution: input, weight and bias gradients of `⟨c, conv(x)⟩`.
pub fn gradient_check_conv(seed: u64, trials: usize) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0_f64;
    let mut done = 0;
    while done < trials {
        let (c, h, w) = (rng.gen_range(1..=3), rng.gen_range(3..=7), rng.gen_range(3..=7));
        let (f, kh, kw) = (rng.gen_range(1..=3), rng.gen_range(1..=3), rng.gen_range(1..=3));
        let (stride, padding) = (rng.gen_range(1..=2), rng.gen_range(0..=1));
        let (Some(oh), Some(ow)) = (
            ops::window_extent(h, kh, stride, padding),
            ops::window_extent(w, kw, stride, padding),
        ) else {
            continue;
        };
        let x = random_tensor(&mut rng, &[c, h, w]);
        let wt = random_tensor(&mut rng, &[f, c, kh, kw]);
        let b = random_tensor(&mut rng, &[f]);
        let proj = random_tensor(&mut rng, &[f, oh, ow]);
        let (gx, gw, gb) = ops::conv2d_backward(&x, &wt, stride, padding, &proj)?;
        let out = |x: &Tensor, wt: &Tensor, b: &Tensor| {
            dot(&proj, &ops::conv2d_forward(x, wt, b, stride, padding).expect("valid conv"))
        };
        worst = worst
            .max(fd_compare(&x, &gx, |v| out(v, &wt, &b)))
            .max(fd_compare(&wt, &gw, |v| out(&x, v, &b)))
            .max(fd_compare(&b, &gb, |v| out(&x, &wt, v)));
        done += 1;
    }
    Ok(worst)
}

pub fn gradient_check_dense(seed: u64, trials: usize) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0_f64;
    for _ in 0..trials {
        let shape = [rng.gen_range(1..=3), rng.gen_range(1..=4), rng.gen_range(1..=4)];
        let n: usize = shape.iter().product();
        let m = rng.gen_range(1..=6);
        let x = random_tensor(&mut rng, &shape);
        let wt = random_tensor(&mut rng, &[m, n]);
        let b = random_tensor(&mut rng, &[m]);
        let proj = random_tensor(&mut rng, &[m]);
        let (gx, gw, gb) = ops::dense_backward(&x, &wt, &proj)?;
        let out = |x: &Tensor, wt: &Tensor, b: &Tensor| dot(&proj, &ops::dense_forward(x, wt, b).expect("valid dense"));
        worst = worst
            .max(fd_compare(&x, &gx, |v| out(v, &wt, &b)))
            .max(fd_compare(&wt, &gw, |v| out(&x, v, &b)))
            .max(fd_compare(&b, &gb, |v| out(&x, &wt, v)));
    }
    Ok(worst)
}

/// ReLU away from its kink: inputs are at least 0.05 from zero.
pub fn gradient_check_relu(seed: u64, trials: usize) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0_f64;
    for _ in 0..trials {
        let shape = [rng.gen_range(1..=3), rng.gen_range(1..=5), rng.gen_range(1..=5)];
        let x = away_from_zero(&mut rng, &shape, 0.05);
        let proj = random_tensor(&mut rng, &shape);
        let gx = ops::relu_backward(&x, &proj)?;
        worst = worst.max(fd_compare(&x, &gx, |v| dot(&proj, &ops::relu_forward(v))));
    }
    Ok(worst)
}

/// Max pooling over inputs whose values are pairwise at least 0.01 apart,
/// so a finite-difference step never changes the winner.
pub fn gradient_check_maxpool(seed: u64, trials: usize) -> Result<f64> {
    use rand::seq::SliceRandom;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0_f64;
    let mut done = 0;
    while done < trials {
        let (c, h, w) = (rng.gen_range(1..=3), rng.gen_range(2..=7), rng.gen_range(2..=7));
        let (window, stride) = (rng.gen_range(1..=3), rng.gen_range(1..=3));
        let (Some(oh), Some(ow)) = (
            ops::window_extent(h, window, stride, 0),
            ops::window_extent(w, window, stride, 0),
        ) else {
            continue;
        };
        let n = c * h * w;
        let mut values: Vec<f64> = (0..n).map(|i| i as f64 * 0.01 - 0.5).collect();
        values.shuffle(&mut rng);
        let x = Tensor::new(vec![c, h, w], values)?;
        let proj = random_tensor(&mut rng, &[c, oh, ow]);
        let (_, arg) = ops::maxpool2d_forward(&x, window, stride)?;
        let gx = ops::maxpool2d_backward(x.shape(), &arg, &proj)?;
        worst = worst.max(fd_compare(&x, &gx, |v| {
            dot(&proj, &ops::maxpool2d_forward(v, window, stride).expect("valid pool").0)
        }));
        done += 1;
    }
    Ok(worst)
}

/// Dropout with its mask held fixed.
pub fn gradient_check_dropout(seed: u64, trials: usize) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0_f64;
    for _ in 0..trials {
        let shape = [rng.gen_range(1..=3), rng.gen_range(1..=5), rng.gen_range(1..=5)];
        let n: usize = shape.iter().product();
        let drop = rng.gen_range(0.1..0.9);
        let mask = ops::dropout_mask(n, drop, &mut rng);
        let x = random_tensor(&mut rng, &shape);
        let proj = random_tensor(&mut rng, &shape);
        let gx = ops::apply_mask(&proj, &mask)?;
        worst = worst.max(fd_compare(&x, &gx, |v| dot(&proj, &ops::apply_mask(v, &mask).expect("same length"))));
    }
    Ok(worst)
}

pub fn gradient_check_mse(seed: u64, trials: usize) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0_f64;
    for _ in 0..trials {
        let n = rng.gen_range(1..=8);
        let p = random_tensor(&mut rng, &[n]);
        let l = random_tensor(&mut rng, &[n]);
        let g = ops::mse_grad(&p, &l)?;
        worst = worst.max(fd_compare(&p, &g, |v| ops::mse_loss(v, &l).expect("same shape")));
    }
    Ok(worst)
}

/// Every parameter of a small conv/pool/dense/dropout network against the
/// finite difference of its MSE loss, with the dropout mask held fixed.
pub fn gradient_check_network(seed: u64, trials: usize) -> Result<f64> {
    let specs = vec![
        LayerSpec::Conv {
            out_channels: 3,
            kernel: (3, 3),
            stride: 1,
            padding: 1,
        },
        LayerSpec::Relu,
        LayerSpec::MaxPool { window: 2, stride: 2 },
        LayerSpec::Dense { out_features: 6 },
        LayerSpec::Relu,
        LayerSpec::Dropout { keep: 0.5 },
        LayerSpec::Dense { out_features: 4 },
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0_f64;
    for t in 0..trials {
        let mut net = Network::new(&[2, 6, 6], &specs, seed.wrapping_add(t as u64))?;
        let x = random_tensor(&mut rng, &[2, 6, 6]);
        let label = random_tensor(&mut rng, &[4]);
        let mask_seed = rng.gen::<u64>();
        let loss = |net: &Network| -> Result<f64> {
            let mut r = sample_rng(mask_seed, 0);
            let cache = net.forward_train(&x, DropoutMode::Sample { rng: &mut r, keep: None })?;
            ops::mse_loss(cache.output(), &label)
        };
        let mut r = sample_rng(mask_seed, 0);
        let cache = net.forward_train(&x, DropoutMode::Sample { rng: &mut r, keep: None })?;
        let (_, grads) = net.backward(&cache, &label)?;
        for (layer, g) in grads.layers.iter().enumerate() {
            let Some(g) = g else { continue };
            for (which, analytic) in [(0, &g.weight), (1, &g.bias)] {
                for i in 0..analytic.len() {
                    let mut nudge = |delta: f64| -> Result<f64> {
                        let p = net.params_mut()[layer].as_mut().expect("parametric layer");
                        let t = if which == 0 { &mut p.weight } else { &mut p.bias };
                        t.data_mut()[i] += delta;
                        let l = loss(&net);
                        let p = net.params_mut()[layer].as_mut().expect("parametric layer");
                        let t = if which == 0 { &mut p.weight } else { &mut p.bias };
                        t.data_mut()[i] -= delta;
                        l
                    };
                    let numeric = (nudge(FD_STEP)? - nudge(-FD_STEP)?) / (2.0 * FD_STEP);
                    worst = worst.max(relative_error(analytic.data()[i], numeric));
                }
            }
        }
    }
    Ok(worst)
}

/// Analytic interaction matrix against central differences of the
/// projected corners under each camera velocity direction. Returns the
/// worst per-column relative error.
pub fn interaction_matrix_check(scene: &Scene, seed: u64, poses: usize) -> Result<f64> {
    let samples = sample_poses(&SamplingRange::default(), poses, seed, scene)?;
    let mut worst = 0.0_f64;
    for pose in samples {
        let cam = scene.camera_pose(&pose);
        let s = extract_point_features(&cam, &scene.target)?;
        let l = interaction_matrix(&s, &corner_depths(&cam, &scene.target))?;
        for j in 0..4 {
            let mut d = [0.0; 4];
            d[j] = FD_STEP;
            let plus = extract_point_features(
                &integrate_camera_velocity(&cam, &CameraVelocity4::from_array(d)),
                &scene.target,
            )?;
            d[j] = -FD_STEP;
            let minus = extract_point_features(
                &integrate_camera_velocity(&cam, &CameraVelocity4::from_array(d)),
                &scene.target,
            )?;
            let numeric = plus.error_from(&minus)? / (2.0 * FD_STEP);
            let analytic = l.entries().column(j);
            worst = worst.max((&numeric - analytic).norm() / analytic.norm());
        }
    }
    Ok(worst)
}

/// Worst relative Frobenius residual of both Penrose identities over random
/// (partly rank-deficient) matrices.
pub fn penrose_check(seed: u64, trials: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0_f64;
    for t in 0..trials {
        let rows = 2 * rng.gen_range(1..=6);
        let mut m = DMatrix::from_fn(rows, 4, |_, _| rng.gen_range(-2.0..2.0));
        if t % 3 == 0 {
            let c = m.column(1) * 2.0;
            m.set_column(2, &c);
        }
        let p = pseudo_inverse(&m);
        let a = (&m * &p * &m - &m).norm() / m.norm();
        let b = (&p * &m * &p - &p).norm() / p.norm();
        worst = worst.max(a).max(b);
    }
    worst
}

/// Oracle-controller episodes against `e_k = (1 − λ)^k · e_0` for each gain
/// in `gains`. Returns the worst absolute deviation (mm or degrees).
pub fn oracle_decay_check(scene: &Scene, gains: &[f64], episodes: usize, seed: u64) -> Result<f64> {
    let desired = reference_desired_pose();
    let mut worst = 0.0_f64;
    for (gi, &lambda) in gains.iter().enumerate() {
        let starts = sample_poses(&SamplingRange::default(), episodes, seed.wrapping_add(gi as u64), scene)?;
        for start in starts {
            let mut config = EpisodeConfig::new(start, desired, ControllerKind::Oracle);
            config.gains = GainVector::uniform(lambda)?;
            config.max_steps = 400;
            let trace = run_episode(&config, scene, None)?;
            let e0 = trace.initial_error().to_array();
            for (k, e) in trace.true_errors().enumerate() {
                let factor = (1.0 - lambda).powi(k as i32);
                for (a, v) in e.to_array().iter().enumerate() {
                    worst = worst.max((v - factor * e0[a]).abs());
                }
            }
        }
    }
    Ok(worst)
}

/// Classic episodes from random starts; returns how many reach a feature
/// error below `FEATURE_TOLERANCE_PX` within `max_steps`, plus the worst
/// final feature error.
pub fn classic_convergence_check(
    scene: &Scene,
    lambda: f64,
    episodes: usize,
    max_steps: usize,
    seed: u64,
) -> Result<(usize, f64)> {
    let desired = reference_desired_pose();
    let starts = sample_poses(&SamplingRange::default(), episodes, seed, scene)?;
    let mut converged = 0;
    let mut worst = 0.0_f64;
    for start in starts {
        let mut config = EpisodeConfig::new(start, desired, ControllerKind::Classic);
        config.classic_gain = lambda;
        config.max_steps = max_steps;
        // run the full horizon; the pose tolerance is not the criterion here
        config.tolerance = [1e-9; 4];
        let trace = run_episode(&config, scene, None)?;
        let best = trace
            .steps
            .iter()
            .filter_map(|s| s.feature_error_px)
            .fold(f64::INFINITY, f64::min);
        if trace.status != EpisodeStatus::LostTarget && best < FEATURE_TOLERANCE_PX {
            converged += 1;
        }
        worst = worst.max(best);
    }
    Ok((converged, worst))
}

/// Near the goal, each classic step must shrink the feature error by at
/// least `1 − λ/2`. Returns the worst observed ratio over `trials` starts.
pub fn classic_decay_check(scene: &Scene, lambda: f64, trials: usize, seed: u64) -> Result<f64> {
    let desired = reference_desired_pose();
    let target = extract_point_features(&scene.camera_pose(&desired), &scene.target)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0_f64;
    for _ in 0..trials {
        let mut pose = desired.offset([
            rng.gen_range(-2.0..2.0),
            rng.gen_range(-2.0..2.0),
            rng.gen_range(-2.0..2.0),
            rng.gen_range(-1.0..1.0),
        ]);
        let mut prev = classic_step(scene, &pose, &target, lambda)?;
        for _ in 0..20 {
            pose = prev.next_pose;
            let next = classic_step(scene, &pose, &target, lambda)?;
            if prev.error.norm() > 1e-9 {
                worst = worst.max(next.error.norm() / prev.error.norm());
            }
            prev = next;
        }
    }
    Ok(worst)
}

/// The full suite at its standard sizes.
pub fn run_all(seed: u64) -> Result<Vec<CheckResult>> {
    let scene = Scene::default();
    let mut out = vec![
        CheckResult::below("gradient.conv", gradient_check_conv(seed, 100)?, GRADIENT_TOLERANCE),
        CheckResult::below("gradient.dense", gradient_check_dense(seed, 100)?, GRADIENT_TOLERANCE),
        CheckResult::below("gradient.relu", gradient_check_relu(seed, 100)?, GRADIENT_TOLERANCE),
        CheckResult::below("gradient.maxpool", gradient_check_maxpool(seed, 100)?, GRADIENT_TOLERANCE),
        CheckResult::below("gradient.dropout", gradient_check_dropout(seed, 100)?, GRADIENT_TOLERANCE),
        CheckResult::below("gradient.mse", gradient_check_mse(seed, 100)?, GRADIENT_TOLERANCE),
        CheckResult::below("gradient.network", gradient_check_network(seed, 10)?, GRADIENT_TOLERANCE),
        CheckResult::below(
            "ibvs.interaction_matrix",
            interaction_matrix_check(&scene, seed, 100)?,
            JACOBIAN_TOLERANCE,
        ),
        CheckResult::below("ibvs.penrose", penrose_check(seed, 1000), PENROSE_TOLERANCE),
        CheckResult::below(
            "oracle.geometric_decay",
            oracle_decay_check(&scene, &DECAY_GAINS, 10, seed)?,
            DECAY_TOLERANCE,
        ),
    ];
    for (lambda, name) in [
        (0.05, "ibvs.decay_ratio.l0.05"),
        (0.1, "ibvs.decay_ratio.l0.1"),
        (0.2, "ibvs.decay_ratio.l0.2"),
    ] {
        out.push(CheckResult::below(
            name,
            classic_decay_check(&scene, lambda, 20, seed)?,
            1.0 - lambda / 2.0,
        ));
    }
    let (converged, _) = classic_convergence_check(&scene, 0.1, 20, 200, seed)?;
    out.push(CheckResult::at_least("ibvs.classic_convergence", converged as f64, 20.0));
    Ok(out)
}
