//! Closed-loop episodes, convergence metrics and trace export.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::controller::{pose_error, proportional_command, ControlCommand, GainVector, PoseError, TwoStreamController};
use crate::error::{Error, Result};
use crate::geometry::{wrap_degrees, Pose4};
use crate::ibvs::{classic_step, extract_point_features, DEFAULT_CLASSIC_GAIN};
use crate::regressor::PosePredictor;
use crate::render::Scene;

pub const TRACE_FILE: &str = "trace.csv";
pub const TRACE_HEADER: [&str; 13] = [
    "step", "x", "y", "z", "rz", "ex", "ey", "ez", "erz", "dx", "dy", "dz", "drz",
];
pub const PLOT_FILES: [&str; 4] = ["error_x.svg", "error_y.svg", "error_z.svg", "error_rz.svg"];

/// 1 mm per translation axis, 1° in rotation.
pub const DEFAULT_TOLERANCE: [f64; 4] = [1.0, 1.0, 1.0, 1.0];
pub const DEFAULT_MAX_STEPS: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ControllerKind {
    /// Two-stream regressor.
    Learned,
    /// Point-feature IBVS with true depths.
    Classic,
    /// Proportional law on the true pose.
    Oracle,
}

impl std::fmt::Display for ControllerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ControllerKind::Learned => "learned",
            ControllerKind::Classic => "classic",
            ControllerKind::Oracle => "oracle",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeConfig {
    pub initial_pose: Pose4,
    pub desired_pose: Pose4,
    /// Per-axis gains of the pose-based controllers.
    pub gains: GainVector,
    /// Scalar gain of the classic feature-space law.
    pub classic_gain: f64,
    pub max_steps: usize,
    pub tolerance: [f64; 4],
    pub controller: ControllerKind,
}

impl EpisodeConfig {
    pub fn new(initial_pose: Pose4, desired_pose: Pose4, controller: ControllerKind) -> Self {
        EpisodeConfig {
            initial_pose,
            desired_pose,
            gains: GainVector::uniform(crate::controller::DEFAULT_EPISODE_GAIN).expect("positive"),
            classic_gain: DEFAULT_CLASSIC_GAIN,
            max_steps: DEFAULT_MAX_STEPS,
            tolerance: DEFAULT_TOLERANCE,
            controller,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_steps == 0 {
            return Err(Error::InvalidConfig("max_steps must be at least 1".into()));
        }
        if self.tolerance.iter().any(|t| !(*t > 0.0) || !t.is_finite()) {
            return Err(Error::InvalidConfig("tolerances must be positive".into()));
        }
        if !(self.classic_gain > 0.0) || !self.classic_gain.is_finite() {
            return Err(Error::InvalidConfig("classic gain must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EpisodeStatus {
    Converged,
    MaxSteps,
    LostTarget,
}

impl std::fmt::Display for EpisodeStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EpisodeStatus::Converged => "Converged",
            EpisodeStatus::MaxSteps => "MaxSteps",
            EpisodeStatus::LostTarget => "LostTarget",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceStep {
    pub step: usize,
    /// True pose before the command is applied.
    pub pose: Pose4,
    /// Controller's own error estimate, absent for the classic controller
    /// and when the target was lost.
    pub estimated: Option<PoseError>,
    /// Absent on the final row.
    pub command: Option<ControlCommand>,
    /// Corner-feature error in pixels, classic controller only.
    pub feature_error_px: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeTrace {
    pub desired: Pose4,
    pub tolerance: [f64; 4],
    pub steps: Vec<TraceStep>,
    pub status: EpisodeStatus,
}

impl EpisodeTrace {
    pub fn true_errors(&self) -> impl Iterator<Item = PoseError> + '_ {
        self.steps.iter().map(|s| pose_error(&s.pose, &self.desired))
    }

    pub fn final_error(&self) -> PoseError {
        self.true_errors().last().unwrap_or_default()
    }

    pub fn initial_error(&self) -> PoseError {
        self.true_errors().next().unwrap_or_default()
    }

    /// Commands actually applied.
    pub fn command_count(&self) -> usize {
        self.steps.iter().filter(|s| s.command.is_some()).count()
    }

    /// A Converged status must agree with the final true error.
    pub fn verify_status(&self) -> Result<()> {
        if self.status == EpisodeStatus::Converged && !self.final_error().within(&self.tolerance) {
            return Err(Error::format(
                "episode trace",
                format!("status Converged but final error {:?} exceeds tolerance", self.final_error()),
            ));
        }
        Ok(())
    }
}

/// Runs one episode. `predictor` is required for the learned controller
/// and ignored otherwise. Termination uses the true pose only.
pub fn run_episode(
    config: &EpisodeConfig,
    scene: &Scene,
    predictor: Option<&dyn PosePredictor>,
) -> Result<EpisodeTrace> {
    config.validate()?;
    let desired_image = scene.render(&config.desired_pose)?;
    scene.render(&config.initial_pose)?;

    let learned = match (config.controller, predictor) {
        (ControllerKind::Learned, Some(p)) => Some(TwoStreamController::new(p, &desired_image, config.gains)?),
        (ControllerKind::Learned, None) => {
            return Err(Error::InvalidConfig("learned controller needs a trained model".into()))
        }
        _ => None,
    };
    let desired_features = match config.controller {
        ControllerKind::Classic => Some(extract_point_features(
            &scene.camera_pose(&config.desired_pose),
            &scene.target,
        )?),
        _ => None,
    };

    let mut steps = Vec::new();
    let mut pose = config.initial_pose;
    for k in 0..=config.max_steps {
        let true_error = pose_error(&pose, &config.desired_pose);
        let image = match scene.render(&pose) {
            Ok(img) => img,
            Err(Error::TargetNotVisible) | Err(Error::NonPositiveDepth { .. }) => {
                steps.push(TraceStep {
                    step: k,
                    pose,
                    estimated: None,
                    command: None,
                    feature_error_px: None,
                });
                return finish(config, steps, EpisodeStatus::LostTarget);
            }
            Err(e) => return Err(e),
        };

        let (estimated, command, feature_error_px, next) = match config.controller {
            ControllerKind::Learned => {
                let (cmd, e) = learned.as_ref().expect("built above").step(&image)?;
                (Some(e), cmd, None, cmd.apply(&pose))
            }
            ControllerKind::Oracle => {
                let cmd = proportional_command(&true_error, &config.gains);
                (Some(true_error), cmd, None, cmd.apply(&pose))
            }
            ControllerKind::Classic => {
                let desired = desired_features.as_ref().expect("built above");
                match classic_step(scene, &pose, desired, config.classic_gain) {
                    Ok(s) => (None, pose_delta(&pose, &s.next_pose), Some(s.error_px), s.next_pose),
                    Err(Error::NonPositiveDepth { .. }) => {
                        steps.push(TraceStep {
                            step: k,
                            pose,
                            estimated: None,
                            command: None,
                            feature_error_px: None,
                        });
                        return finish(config, steps, EpisodeStatus::LostTarget);
                    }
                    Err(e) => return Err(e),
                }
            }
        };

        let done = if true_error.within(&config.tolerance) {
            Some(EpisodeStatus::Converged)
        } else if k == config.max_steps {
            Some(EpisodeStatus::MaxSteps)
        } else {
            None
        };
        steps.push(TraceStep {
            step: k,
            pose,
            estimated,
            command: done.is_none().then_some(command),
            feature_error_px,
        });
        if let Some(status) = done {
            return finish(config, steps, status);
        }
        pose = next;
    }
    unreachable!("loop returns at k == max_steps")
}

fn finish(config: &EpisodeConfig, steps: Vec<TraceStep>, status: EpisodeStatus) -> Result<EpisodeTrace> {
    Ok(EpisodeTrace {
        desired: config.desired_pose,
        tolerance: config.tolerance,
        steps,
        status,
    })
}

/// Base-frame pose increment from `a` to `b`.
fn pose_delta(a: &Pose4, b: &Pose4) -> ControlCommand {
    ControlCommand {
        dx: b.x() - a.x(),
        dy: b.y() - a.y(),
        dz: b.z() - a.z(),
        drz: wrap_degrees(b.rz() - a.rz()),
    }
}

/// First step after which every recorded true error stays within
/// `tolerance` to the end of the trace.
pub fn convergence_step(trace: &EpisodeTrace, tolerance: &[f64; 4]) -> Option<usize> {
    let errors: Vec<PoseError> = trace.true_errors().collect();
    let mut first = None;
    for (i, e) in errors.iter().enumerate().rev() {
        if !e.within(tolerance) {
            break;
        }
        first = Some(trace.steps[i].step);
    }
    first
}

fn cell(v: Option<f64>) -> String {
    v.map(|v| format!("{:.6}", v + 0.0)).unwrap_or_default()
}

pub fn trace_csv(trace: &EpisodeTrace) -> Result<Vec<u8>> {
    let wrap = |e: csv::Error| Error::format("trace", e.to_string());
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    w.write_record(TRACE_HEADER).map_err(wrap)?;
    for s in &trace.steps {
        let mut row = vec![s.step.to_string()];
        row.extend(s.pose.to_array().iter().map(|v| cell(Some(*v))));
        row.extend((0..4).map(|i| cell(s.estimated.map(|e| e.to_array()[i]))));
        row.extend((0..4).map(|i| cell(s.command.map(|c| c.to_array()[i]))));
        w.write_record(&row).map_err(wrap)?;
    }
    w.into_inner().map_err(|e| Error::format("trace", e.to_string()))
}

/// One parsed `trace.csv` row; empty cells become `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    pub pose: [f64; 4],
    pub estimated: Option<[f64; 4]>,
    pub command: Option<[f64; 4]>,
}

pub fn parse_trace_csv(bytes: &[u8]) -> Result<Vec<TraceRow>> {
    let bad = |m: String| Error::format("trace", m);
    let mut r = csv::ReaderBuilder::new().from_reader(bytes);
    let header = r.headers().map_err(|e| bad(e.to_string()))?;
    if header.iter().ne(TRACE_HEADER) {
        return Err(bad(format!("unexpected header {header:?}")));
    }
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        let num = |i: usize| -> Result<Option<f64>> {
            let s = rec.get(i).unwrap_or("");
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse().map(Some).map_err(|_| bad(format!("bad number {s:?}")))
            }
        };
        let group = |start: usize| -> Result<Option<[f64; 4]>> {
            let v = [num(start)?, num(start + 1)?, num(start + 2)?, num(start + 3)?];
            match v {
                [Some(a), Some(b), Some(c), Some(d)] => Ok(Some([a, b, c, d])),
                [None, None, None, None] => Ok(None),
                _ => Err(bad("partially empty column group".into())),
            }
        };
        rows.push(TraceRow {
            step: rec
                .get(0)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| bad("bad step".into()))?,
            pose: group(1)?.ok_or_else(|| bad("missing pose".into()))?,
            estimated: group(5)?,
            command: group(9)?,
        });
    }
    Ok(rows)
}

/// Line plot of one error series against the step index.
pub fn error_plot_svg(title: &str, unit: &str, series: &[f64]) -> String {
    const W: f64 = 480.0;
    const H: f64 = 300.0;
    const LEFT: f64 = 64.0;
    const RIGHT: f64 = 16.0;
    const TOP: f64 = 32.0;
    const BOTTOM: f64 = 40.0;
    let (pw, ph) = (W - LEFT - RIGHT, H - TOP - BOTTOM);
    let last = series.len().saturating_sub(1).max(1) as f64;
    let mut lo = series.iter().copied().fold(0.0_f64, f64::min);
    let mut hi = series.iter().copied().fold(0.0_f64, f64::max);
    if hi - lo < 1e-9 {
        lo -= 1.0;
        hi += 1.0;
    }
    let sx = |k: f64| LEFT + pw * k / last;
    let sy = |v: f64| TOP + ph * (hi - v) / (hi - lo);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="20" font-family="sans-serif" font-size="14" text-anchor="middle">{}</text>"#,
        W / 2.0,
        escape(title)
    );
    let _ = writeln!(
        s,
        r#"<line x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{}" stroke="black"/>"#,
        TOP + ph
    );
    let _ = writeln!(
        s,
        r#"<line x1="{LEFT}" y1="{0:.2}" x2="{1}" y2="{0:.2}" stroke="gray" stroke-dasharray="4 3"/>"#,
        sy(0.0),
        LEFT + pw
    );
    let _ = writeln!(
        s,
        r#"<line x1="{LEFT}" y1="{0}" x2="{1}" y2="{0}" stroke="black"/>"#,
        TOP + ph,
        LEFT + pw
    );
    for v in [lo, hi] {
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{:.2}" font-family="sans-serif" font-size="11" text-anchor="end">{v:.2}</text>"#,
            LEFT - 6.0,
            sy(v) + 4.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{LEFT}" y="{0}" font-family="sans-serif" font-size="11">0</text><text x="{1}" y="{0}" font-family="sans-serif" font-size="11" text-anchor="end">{2}</text>"#,
        H - 22.0,
        LEFT + pw,
        series.len().saturating_sub(1)
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" font-family="sans-serif" font-size="12" text-anchor="middle">step</text>"#,
        LEFT + pw / 2.0,
        H - 8.0
    );
    let _ = writeln!(
        s,
        r#"<text x="14" y="{0}" font-family="sans-serif" font-size="12" text-anchor="middle" transform="rotate(-90 14 {0})">error ({1})</text>"#,
        TOP + ph / 2.0,
        escape(unit)
    );
    let points: Vec<String> = series
        .iter()
        .enumerate()
        .map(|(k, v)| format!("{:.2},{:.2}", sx(k as f64), sy(*v)))
        .collect();
    let _ = writeln!(
        s,
        r#"<polyline fill="none" stroke="steelblue" stroke-width="2" points="{}"/>"#,
        points.join(" ")
    );
    s.push_str("</svg>\n");
    s
}

fn escape(t: &str) -> String {
    t.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Writes `trace.csv` and one true-error plot per axis into `out_dir`,
/// after re-checking that a Converged status is backed by the trace.
pub fn export_trace(trace: &EpisodeTrace, out_dir: &Path) -> Result<Vec<PathBuf>> {
    trace.verify_status()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written = Vec::new();
    let path = out_dir.join(TRACE_FILE);
    fs::write(&path, trace_csv(trace)?).map_err(|e| Error::io(&path, e))?;
    written.push(path);

    let errors: Vec<[f64; 4]> = trace.true_errors().map(|e| e.to_array()).collect();
    let titles = [
        ("Error in translation along x", "mm"),
        ("Error in translation along y", "mm"),
        ("Error in translation along z", "mm"),
        ("Error in rotation about z", "deg"),
    ];
    for (axis, ((title, unit), file)) in titles.iter().zip(PLOT_FILES).enumerate() {
        let series: Vec<f64> = errors.iter().map(|e| e[axis]).collect();
        let path = out_dir.join(file);
        fs::write(&path, error_plot_svg(title, unit, &series)).map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}
