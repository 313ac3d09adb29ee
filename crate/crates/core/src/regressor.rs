//! CNN pose regressor: one grayscale image in, a 4-DOF pose out.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::{Sample, SamplingRange};
use crate::error::{Error, Result};
use crate::geometry::{wrap_degrees, Pose4};
use crate::image::ImageBuffer;
use crate::nn::network::sample_rng;
use crate::nn::{infer_shapes, weights, DropoutMode, Gradients, LayerSpec, Network, Tensor, TrainingConfig};

pub const OUTPUT_DIM: usize = 4;
pub const CONV_LAYERS: usize = 5;
pub const DENSE_LAYERS: usize = 3;

/// Learning rate for the desk profile. Labels are normalized to [-1, 1], so
/// residuals are far smaller than raw millimetre/degree targets and the
/// reference rate of 0.0005 is scaled up accordingly.
pub const DESK_LEARNING_RATE: f64 = 0.1;

fn conv(out_channels: usize, k: usize, stride: usize, padding: usize) -> LayerSpec {
    LayerSpec::Conv {
        out_channels,
        kernel: (k, k),
        stride,
        padding,
    }
}

fn pool(window: usize, stride: usize) -> LayerSpec {
    LayerSpec::MaxPool { window, stride }
}

fn dense(out_features: usize) -> LayerSpec {
    LayerSpec::Dense { out_features }
}

/// Five convolutions followed by three fully connected layers, ending in
/// the four pose outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressorArchitecture {
    pub input_size: usize,
    pub channels: usize,
    pub layer_specs: Vec<LayerSpec>,
}

impl RegressorArchitecture {
    /// 224×224 profile modelled on the classic ImageNet network: 96-256-384-
    /// 384-256 convolutions, two 4096-wide hidden layers with dropout, and a
    /// 4-output regression head. The first kernel is 12×12 so that stride 4
    /// tiles a 224 input exactly.
    pub fn paper_scale() -> Self {
        let drop = LayerSpec::Dropout { keep: 0.5 };
        RegressorArchitecture {
            input_size: 224,
            channels: 1,
            layer_specs: vec![
                conv(96, 12, 4, 2),
                LayerSpec::Relu,
                pool(3, 2),
                conv(256, 5, 1, 2),
                LayerSpec::Relu,
                pool(3, 2),
                conv(384, 3, 1, 1),
                LayerSpec::Relu,
                conv(384, 3, 1, 1),
                LayerSpec::Relu,
                conv(256, 3, 1, 1),
                LayerSpec::Relu,
                pool(3, 2),
                dense(4096),
                LayerSpec::Relu,
                drop,
                dense(4096),
                LayerSpec::Relu,
                drop,
                dense(OUTPUT_DIM),
            ],
        }
    }

    /// 64×64 profile with the same topology and far fewer channels, sized
    /// to train on a single CPU core in minutes.
    pub fn desk_scale() -> Self {
        let drop = LayerSpec::Dropout { keep: 0.5 };
        RegressorArchitecture {
            input_size: 64,
            channels: 1,
            layer_specs: vec![
                conv(16, 5, 1, 2),
                LayerSpec::Relu,
                pool(2, 2),
                conv(32, 3, 1, 1),
                LayerSpec::Relu,
                pool(2, 2),
                conv(32, 3, 1, 1),
                LayerSpec::Relu,
                conv(32, 3, 1, 1),
                LayerSpec::Relu,
                conv(32, 3, 1, 1),
                LayerSpec::Relu,
                pool(2, 2),
                dense(256),
                LayerSpec::Relu,
                drop,
                dense(256),
                LayerSpec::Relu,
                drop,
                dense(OUTPUT_DIM),
            ],
        }
    }

    pub fn input_shape(&self) -> [usize; 3] {
        [self.channels, self.input_size, self.input_size]
    }

    /// Shape algebra from the input down to four outputs.
    pub fn validate(&self) -> Result<()> {
        let shapes = infer_shapes(&self.input_shape(), &self.layer_specs)?;
        let last = self.layer_specs.len().saturating_sub(1);
        if shapes.last().map(Vec::as_slice) != Some(&[OUTPUT_DIM][..]) {
            return Err(Error::InvalidArchitecture {
                index: last,
                reason: format!("network must end in {OUTPUT_DIM} outputs"),
            });
        }
        if !matches!(self.layer_specs.last(), Some(LayerSpec::Dense { .. })) {
            return Err(Error::InvalidArchitecture {
                index: last,
                reason: "final layer must be dense".into(),
            });
        }
        Ok(())
    }

    /// True for the reference topology: five convolutions then three dense
    /// layers.
    pub fn is_reference_topology(&self) -> bool {
        let convs: Vec<usize> = self
            .layer_specs
            .iter()
            .enumerate()
            .filter(|(_, s)| matches!(s, LayerSpec::Conv { .. }))
            .map(|(i, _)| i)
            .collect();
        let denses: Vec<usize> = self
            .layer_specs
            .iter()
            .enumerate()
            .filter(|(_, s)| matches!(s, LayerSpec::Dense { .. }))
            .map(|(i, _)| i)
            .collect();
        convs.len() == CONV_LAYERS
            && denses.len() == DENSE_LAYERS
            && convs.last() < denses.first()
    }

    pub fn layers_text(&self) -> String {
        self.layer_specs
            .iter()
            .map(ToString::to_string)
            .collect::<Vec<_>>()
            .join(",")
    }
}

/// Desk-profile recipe: the reference schedule (batch 20, 100 epochs,
/// weight decay 0.001, dropout keep 0.5) with the learning rate scaled for
/// normalized labels.
pub fn desk_training_config(seed: u64) -> TrainingConfig {
    TrainingConfig {
        learning_rate: DESK_LEARNING_RATE,
        rng_seed: seed,
        ..TrainingConfig::default()
    }
}

/// Validates `arch` and initializes its network.
pub fn build_network(arch: &RegressorArchitecture, seed: u64) -> Result<Network> {
    arch.validate()?;
    Network::new(&arch.input_shape(), &arch.layer_specs, seed)
}

/// Per-axis affine map between poses and the network's output range.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseNormalization {
    pub offset: [f64; 4],
    pub scale: [f64; 4],
}

impl PoseNormalization {
    /// Maps each sampling interval onto [-1, 1]; degenerate intervals get
    /// unit scale.
    pub fn from_range(range: &SamplingRange) -> Self {
        let axes = range.axes();
        PoseNormalization {
            offset: axes.map(|(lo, hi)| (lo + hi) / 2.0),
            scale: axes.map(|(lo, hi)| if hi > lo { (hi - lo) / 2.0 } else { 1.0 }),
        }
    }

    pub fn normalize(&self, pose: &Pose4) -> [f64; 4] {
        let p = pose.to_array();
        std::array::from_fn(|i| (p[i] - self.offset[i]) / self.scale[i])
    }

    pub fn denormalize(&self, v: &[f64]) -> Pose4 {
        Pose4::from_array(std::array::from_fn(|i| v[i] * self.scale[i] + self.offset[i]))
    }

    fn to_text(&self) -> String {
        ["x", "y", "z", "rz"]
            .iter()
            .enumerate()
            .map(|(i, axis)| {
                format!(
                    "{axis}.offset={:?}\n{axis}.scale={:?}\n",
                    self.offset[i], self.scale[i]
                )
            })
            .collect()
    }
}

/// Anything that turns an image into a pose estimate.
pub trait PosePredictor {
    fn predict_pose(&self, image: &ImageBuffer) -> Result<Pose4>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingReport {
    /// Mean training-mode loss of each epoch, in normalized units.
    pub epoch_losses: Vec<f64>,
}

/// Trained (or freshly initialized) regressor with its label normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseRegressor {
    pub arch: RegressorArchitecture,
    pub network: Network,
    pub normalization: PoseNormalization,
}

pub fn image_to_tensor(image: &ImageBuffer, arch: &RegressorArchitecture) -> Result<Tensor> {
    if arch.channels != 1 || image.width() != arch.input_size || image.height() != arch.input_size {
        return Err(Error::ShapeMismatch(format!(
            "image {}x{} does not match network input {:?}",
            image.width(),
            image.height(),
            arch.input_shape()
        )));
    }
    Ok(Tensor::new(arch.input_shape().to_vec(), image.pixels().to_vec())
        .expect("shape checked above"))
}

impl PoseRegressor {
    pub fn new(arch: RegressorArchitecture, normalization: PoseNormalization, seed: u64) -> Result<Self> {
        let network = build_network(&arch, seed)?;
        Ok(PoseRegressor {
            arch,
            network,
            normalization,
        })
    }

    /// Mini-batch SGD over `dataset`, reshuffled each epoch from the config
    /// seed. Per-sample gradients are computed in parallel and summed in
    /// sample order, so results do not depend on the thread count.
    pub fn train(&mut self, dataset: &[Sample], config: &TrainingConfig) -> Result<TrainingReport> {
        self.train_with(dataset, config, |_, _| {})
    }

    /// [`Self::train`] with a callback after every epoch `(epoch, loss)`.
    pub fn train_with(
        &mut self,
        dataset: &[Sample],
        config: &TrainingConfig,
        mut on_epoch: impl FnMut(usize, f64),
    ) -> Result<TrainingReport> {
        config.validate()?;
        if dataset.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let inputs = dataset
            .iter()
            .map(|s| image_to_tensor(&s.image, &self.arch))
            .collect::<Result<Vec<_>>>()?;
        let labels: Vec<Tensor> = dataset
            .iter()
            .map(|s| Tensor::vector(self.normalization.normalize(&s.label).to_vec()))
            .collect();

        let mut order: Vec<usize> = (0..dataset.len()).collect();
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
        let mut counter = 0u64;
        let mut epoch_losses = Vec::with_capacity(config.epochs);
        for epoch in 0..config.epochs {
            order.shuffle(&mut shuffle_rng);
            let mut epoch_loss = 0.0;
            for batch in order.chunks(config.batch_size) {
                let net = &self.network;
                let results = batch
                    .par_iter()
                    .enumerate()
                    .map(|(j, &i)| {
                        let mut rng = sample_rng(config.rng_seed, counter + j as u64);
                        let cache = net.forward_train(
                            &inputs[i],
                            DropoutMode::Sample {
                                rng: &mut rng,
                                keep: Some(config.dropout_keep),
                            },
                        )?;
                        net.backward(&cache, &labels[i])
                    })
                    .collect::<Result<Vec<_>>>()?;
                counter += batch.len() as u64;
                let mut total = Gradients::zeros_like(net);
                for (loss, g) in &results {
                    epoch_loss += loss;
                    total.add_assign(g);
                }
                total.scale(1.0 / batch.len() as f64);
                self.network
                    .sgd_step(&total, config.learning_rate, config.weight_decay)?;
            }
            let mean = epoch_loss / dataset.len() as f64;
            on_epoch(epoch, mean);
            epoch_losses.push(mean);
        }
        Ok(TrainingReport { epoch_losses })
    }

    /// Writes the weights file and, next to it, the `.norm` sidecar.
    pub fn save(&self, weights_path: &Path) -> Result<()> {
        weights::save(&self.network, weights_path)?;
        let sidecar = sidecar_path(weights_path);
        let text = format!(
            "input_size={}\nchannels={}\nlayers={}\n{}",
            self.arch.input_size,
            self.arch.channels,
            self.arch.layers_text(),
            self.normalization.to_text()
        );
        fs::write(&sidecar, text).map_err(|e| Error::io(&sidecar, e))
    }

    pub fn load(weights_path: &Path) -> Result<Self> {
        let sidecar = sidecar_path(weights_path);
        let text = fs::read_to_string(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
        let (arch, normalization) = parse_sidecar(&text)?;
        arch.validate()?;
        let network = weights::load(weights_path, &arch.input_shape(), &arch.layer_specs)?;
        Ok(PoseRegressor {
            arch,
            network,
            normalization,
        })
    }
}

impl PosePredictor for PoseRegressor {
    /// Inference-mode forward pass, denormalized to mm and degrees.
    fn predict_pose(&self, image: &ImageBuffer) -> Result<Pose4> {
        let out = self.network.forward(&image_to_tensor(image, &self.arch)?)?;
        Ok(self.normalization.denormalize(out.data()))
    }
}

/// `model.vsnn` → `model.norm`.
pub fn sidecar_path(weights_path: &Path) -> PathBuf {
    weights_path.with_extension("norm")
}

fn parse_sidecar(text: &str) -> Result<(RegressorArchitecture, PoseNormalization)> {
    let bad = |m: &str| Error::format("normalization sidecar", m.to_string());
    let mut input_size = None;
    let mut channels = None;
    let mut layers = None;
    let mut offset = [None; 4];
    let mut scale = [None; 4];
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line.split_once('=').ok_or_else(|| bad(line))?;
        let num = || v.trim().parse::<f64>().map_err(|_| bad(line));
        let axis = |a: &str| ["x", "y", "z", "rz"].iter().position(|n| *n == a);
        match k.trim() {
            "input_size" => input_size = Some(v.trim().parse::<usize>().map_err(|_| bad(line))?),
            "channels" => channels = Some(v.trim().parse::<usize>().map_err(|_| bad(line))?),
            "layers" => {
                layers = Some(
                    v.split(',')
                        .map(str::parse::<LayerSpec>)
                        .collect::<Result<Vec<_>>>()?,
                )
            }
            key => {
                let (a, field) = key.split_once('.').ok_or_else(|| bad(line))?;
                let i = axis(a).ok_or_else(|| bad(line))?;
                match field {
                    "offset" => offset[i] = Some(num()?),
                    "scale" => scale[i] = Some(num()?),
                    _ => return Err(bad(line)),
                }
            }
        }
    }
    let arch = RegressorArchitecture {
        input_size: input_size.ok_or_else(|| bad("missing input_size"))?,
        channels: channels.unwrap_or(1),
        layer_specs: layers.ok_or_else(|| bad("missing layers"))?,
    };
    let pick = |v: [Option<f64>; 4]| -> Result<[f64; 4]> {
        let mut out = [0.0; 4];
        for (o, x) in out.iter_mut().zip(v) {
            *o = x.ok_or_else(|| bad("missing axis entry"))?;
        }
        Ok(out)
    };
    let normalization = PoseNormalization {
        offset: pick(offset)?,
        scale: pick(scale)?,
    };
    if normalization.scale.iter().any(|s| !(*s > 0.0)) {
        return Err(bad("scales must be positive"));
    }
    Ok((arch, normalization))
}

/// Per-axis mean absolute error: mm, mm, mm, degrees.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AxisMae(pub [f64; 4]);

impl AxisMae {
    pub fn x(&self) -> f64 {
        self.0[0]
    }
    pub fn y(&self) -> f64 {
        self.0[1]
    }
    pub fn z(&self) -> f64 {
        self.0[2]
    }
    pub fn rz(&self) -> f64 {
        self.0[3]
    }
}

/// MAE over `(prediction, label)` pairs; the rotation error is taken on the
/// wrapped difference.
pub fn mean_absolute_error(pairs: &[(Pose4, Pose4)]) -> Result<AxisMae> {
    if pairs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut sum = [0.0; 4];
    for (pred, label) in pairs {
        let (p, l) = (pred.to_array(), label.to_array());
        for i in 0..3 {
            sum[i] += (p[i] - l[i]).abs();
        }
        sum[3] += wrap_degrees(p[3] - l[3]).abs();
    }
    let n = pairs.len() as f64;
    Ok(AxisMae(sum.map(|s| s / n)))
}

/// Predicts every test image and reports per-axis MAE.
pub fn evaluate(predictor: &(impl PosePredictor + Sync), test_set: &[Sample]) -> Result<AxisMae> {
    if test_set.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let pairs = test_set
        .par_iter()
        .map(|s| Ok((predictor.predict_pose(&s.image)?, s.label)))
        .collect::<Result<Vec<_>>>()?;
    mean_absolute_error(&pairs)
}
