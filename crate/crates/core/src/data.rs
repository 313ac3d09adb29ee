//! Pose sampling, synthetic dataset generation and train/test splits.
//!
//! A dataset directory holds `img_%05d.pgm` images, `manifest.csv` with one
//! row per image (`filename,x_mm,y_mm,z_mm,rz_deg`, six fractional digits),
//! and `dataset.meta` with the generator seed and sampling range. Splits are
//! written as further CSV files (`train.csv`, `test.csv`) in the same
//! format.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::Pose4;
use crate::image::ImageBuffer;
use crate::render::Scene;

pub const MANIFEST_FILE: &str = "manifest.csv";
pub const TRAIN_FILE: &str = "train.csv";
pub const TEST_FILE: &str = "test.csv";
pub const META_FILE: &str = "dataset.meta";
pub const DEFAULT_COUNT: usize = 400;
pub const DEFAULT_TEST_COUNT: usize = 20;
/// Draws allowed per slot before a range is declared unviable.
pub const MAX_REJECTIONS: usize = 100;

const HEADER: [&str; 5] = ["filename", "x_mm", "y_mm", "z_mm", "rz_deg"];

/// Closed per-axis intervals poses are drawn from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplingRange {
    pub x: (f64, f64),
    pub y: (f64, f64),
    pub z: (f64, f64),
    pub rz: (f64, f64),
}

impl Default for SamplingRange {
    /// ±60 mm lateral, z in [0, 150] mm (250–400 mm from the default
    /// platform), yaw ±45°.
    fn default() -> Self {
        SamplingRange {
            x: (-60.0, 60.0),
            y: (-60.0, 60.0),
            z: (0.0, 150.0),
            rz: (-45.0, 45.0),
        }
    }
}

impl SamplingRange {
    pub fn axes(&self) -> [(f64, f64); 4] {
        [self.x, self.y, self.z, self.rz]
    }

    pub fn validate(&self) -> Result<()> {
        for (name, (lo, hi)) in ["x", "y", "z", "rz"].iter().zip(self.axes()) {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(Error::InvalidConfig(format!(
                    "{name} range [{lo}, {hi}] is empty or non-finite"
                )));
            }
        }
        if self.rz.0 < -180.0 || self.rz.1 >= 180.0 {
            return Err(Error::InvalidConfig(
                "rz range must lie within [-180, 180)".into(),
            ));
        }
        Ok(())
    }

    pub fn contains(&self, pose: &Pose4) -> bool {
        pose.to_array()
            .iter()
            .zip(self.axes())
            .all(|(v, (lo, hi))| (lo..=hi).contains(v))
    }

    pub fn widths(&self) -> [f64; 4] {
        self.axes().map(|(lo, hi)| hi - lo)
    }
}

/// Rounds to the six decimals the manifest stores, so a label read back from
/// disk is bit-identical to the pose that was rendered.
fn micro(v: f64) -> f64 {
    (v * 1e6).round() / 1e6 + 0.0
}

/// Draws `count` poses uniformly per axis, rejecting (and redrawing) poses
/// from which the target is not visible.
pub fn sample_poses(range: &SamplingRange, count: usize, seed: u64, scene: &Scene) -> Result<Vec<Pose4>> {
    range.validate()?;
    if count == 0 {
        return Err(Error::InvalidConfig("pose count must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut poses = Vec::with_capacity(count);
    for _ in 0..count {
        let mut accepted = None;
        for _ in 0..MAX_REJECTIONS {
            let v = range
                .axes()
                .map(|(lo, hi)| micro(rng.gen_range(lo..=hi)).clamp(lo, hi));
            let pose = Pose4::from_array(v);
            if scene.is_visible(&pose) {
                accepted = Some(pose);
                break;
            }
        }
        poses.push(accepted.ok_or(Error::UnviableRange(MAX_REJECTIONS))?);
    }
    Ok(poses)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub filename: String,
    pub pose: Pose4,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    pub range: SamplingRange,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: ImageBuffer,
    pub label: Pose4,
}

pub fn image_filename(index: usize) -> String {
    format!("img_{index:05}.pgm")
}

/// Renders `count` samples into `out_dir` and writes `manifest.csv` plus
/// `dataset.meta`. Rendering runs in parallel; the manifest is written once
/// every image is on disk.
pub fn generate_dataset(
    range: &SamplingRange,
    count: usize,
    seed: u64,
    scene: &Scene,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    let poses = sample_poses(range, count, seed, scene)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let entries = poses
        .par_iter()
        .enumerate()
        .map(|(i, pose)| {
            let filename = image_filename(i);
            scene.render(pose)?.write_pgm(&out_dir.join(&filename))?;
            Ok(ManifestEntry {
                filename,
                pose: *pose,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = DatasetManifest {
        entries,
        range: *range,
        seed,
    };
    manifest.write(out_dir, MANIFEST_FILE)?;
    Ok(manifest)
}

/// Seeded shuffle, then the first `test_count` entries become the test set.
pub fn split_dataset(
    manifest: &DatasetManifest,
    test_count: usize,
    seed: u64,
) -> Result<(DatasetManifest, DatasetManifest)> {
    let n = manifest.entries.len();
    if test_count == 0 || test_count >= n {
        return Err(Error::InvalidSplit(format!(
            "test count {test_count} must be in 1..{n}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let pick = |idx: &[usize]| DatasetManifest {
        entries: idx.iter().map(|&i| manifest.entries[i].clone()).collect(),
        range: manifest.range,
        seed: manifest.seed,
    };
    let (test, train) = order.split_at(test_count);
    Ok((pick(train), pick(test)))
}

fn fmt6(v: f64) -> String {
    format!("{:.6}", v + 0.0)
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(Vec::new());
        let wrap = |e: csv::Error| Error::format("manifest", e.to_string());
        w.write_record(HEADER).map_err(wrap)?;
        for e in &self.entries {
            let p = e.pose.to_array();
            w.write_record([
                e.filename.clone(),
                fmt6(p[0]),
                fmt6(p[1]),
                fmt6(p[2]),
                fmt6(p[3]),
            ])
            .map_err(wrap)?;
        }
        w.into_inner()
            .map_err(|e| Error::format("manifest", e.to_string()))
    }

    pub fn parse_csv(bytes: &[u8]) -> Result<Vec<ManifestEntry>> {
        let mut r = csv::ReaderBuilder::new().from_reader(bytes);
        let wrap = |e: csv::Error| Error::format("manifest", e.to_string());
        let header = r.headers().map_err(wrap)?;
        if header.iter().ne(HEADER) {
            return Err(Error::format("manifest", format!("unexpected header {header:?}")));
        }
        r.records()
            .map(|rec| {
                let rec = rec.map_err(wrap)?;
                let num = |i: usize| -> Result<f64> {
                    rec[i]
                        .parse()
                        .map_err(|_| Error::format("manifest", format!("bad number {:?}", &rec[i])))
                };
                Ok(ManifestEntry {
                    filename: rec[0].to_string(),
                    pose: Pose4::try_new(num(1)?, num(2)?, num(3)?, num(4)?)?,
                })
            })
            .collect()
    }

    fn meta_text(&self) -> String {
        let r = &self.range;
        format!(
            "seed={}\nx_range={},{}\ny_range={},{}\nz_range={},{}\nrz_range={},{}\n",
            self.seed, r.x.0, r.x.1, r.y.0, r.y.1, r.z.0, r.z.1, r.rz.0, r.rz.1
        )
    }

    fn parse_meta(text: &str) -> Result<(u64, SamplingRange)> {
        let mut seed = None;
        let mut axes = [None; 4];
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::format("dataset meta", line.to_string()))?;
            let pair = || -> Result<(f64, f64)> {
                let (a, b) = v
                    .split_once(',')
                    .ok_or_else(|| Error::format("dataset meta", line.to_string()))?;
                let p = |s: &str| {
                    s.trim()
                        .parse::<f64>()
                        .map_err(|_| Error::format("dataset meta", line.to_string()))
                };
                Ok((p(a)?, p(b)?))
            };
            match k.trim() {
                "seed" => {
                    seed = Some(
                        v.trim()
                            .parse()
                            .map_err(|_| Error::format("dataset meta", line.to_string()))?,
                    )
                }
                "x_range" => axes[0] = Some(pair()?),
                "y_range" => axes[1] = Some(pair()?),
                "z_range" => axes[2] = Some(pair()?),
                "rz_range" => axes[3] = Some(pair()?),
                _ => {}
            }
        }
        let missing = || Error::format("dataset meta", "missing key");
        let seed = seed.ok_or_else(missing)?;
        let [Some(x), Some(y), Some(z), Some(rz)] = axes else {
            return Err(missing());
        };
        Ok((seed, SamplingRange { x, y, z, rz }))
    }

    /// Writes the entries to `dir/csv_name` and the shared `dataset.meta`.
    pub fn write(&self, dir: &Path, csv_name: &str) -> Result<()> {
        let csv_path = dir.join(csv_name);
        fs::write(&csv_path, self.to_csv()?).map_err(|e| Error::io(&csv_path, e))?;
        let meta = dir.join(META_FILE);
        fs::write(&meta, self.meta_text()).map_err(|e| Error::io(&meta, e))
    }

    pub fn read(dir: &Path, csv_name: &str) -> Result<Self> {
        let csv_path = dir.join(csv_name);
        let bytes = fs::read(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
        let entries = Self::parse_csv(&bytes)?;
        let meta = dir.join(META_FILE);
        let text = fs::read_to_string(&meta).map_err(|e| Error::io(&meta, e))?;
        let (seed, range) = Self::parse_meta(&text)?;
        Ok(DatasetManifest {
            entries,
            range,
            seed,
        })
    }

    pub fn image_path(&self, dir: &Path, index: usize) -> PathBuf {
        dir.join(&self.entries[index].filename)
    }

    /// Loads every image, checking that all exist and share one size.
    pub fn load_samples(&self, dir: &Path) -> Result<Vec<Sample>> {
        let samples = self
            .entries
            .par_iter()
            .map(|e| {
                Ok(Sample {
                    image: ImageBuffer::read_pgm(&dir.join(&e.filename))?,
                    label: e.pose,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if let Some(first) = samples.first() {
            let size = (first.image.width(), first.image.height());
            if let Some(bad) = samples
                .iter()
                .position(|s| (s.image.width(), s.image.height()) != size)
            {
                return Err(Error::ShapeMismatch(format!(
                    "{} is not {}x{}",
                    self.entries[bad].filename, size.0, size.1
                )));
            }
        }
        Ok(samples)
    }
}
