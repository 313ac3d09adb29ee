use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::ops;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// One layer of a sequential network.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LayerSpec {
    Conv {
        out_channels: usize,
        kernel: (usize, usize),
        stride: usize,
        padding: usize,
    },
    MaxPool {
        window: usize,
        stride: usize,
    },
    Relu,
    Dense {
        out_features: usize,
    },
    /// `keep` is the probability an activation survives, in `(0, 1]`.
    Dropout {
        keep: f64,
    },
}

impl LayerSpec {
    pub fn kind_tag(&self) -> u8 {
        match self {
            LayerSpec::Conv { .. } => 1,
            LayerSpec::MaxPool { .. } => 2,
            LayerSpec::Relu => 3,
            LayerSpec::Dense { .. } => 4,
            LayerSpec::Dropout { .. } => 5,
        }
    }

    pub fn has_params(&self) -> bool {
        matches!(self, LayerSpec::Conv { .. } | LayerSpec::Dense { .. })
    }

    /// Output shape for a given input shape, or why the layer cannot accept it.
    pub fn output_shape(&self, input: &[usize]) -> std::result::Result<Vec<usize>, String> {
        match *self {
            LayerSpec::Conv {
                out_channels,
                kernel: (kh, kw),
                stride,
                padding,
            } => {
                let [_, h, w] = *input else {
                    return Err(format!("conv needs a [C,H,W] input, got {input:?}"));
                };
                if out_channels == 0 {
                    return Err("conv needs at least one output channel".into());
                }
                match (
                    ops::window_extent(h, kh, stride, padding),
                    ops::window_extent(w, kw, stride, padding),
                ) {
                    (Some(oh), Some(ow)) => Ok(vec![out_channels, oh, ow]),
                    _ => Err(format!(
                        "{kh}x{kw} kernel, stride {stride}, padding {padding} does not tile {h}x{w}"
                    )),
                }
            }
            LayerSpec::MaxPool { window, stride } => {
                let [c, h, w] = *input else {
                    return Err(format!("maxpool needs a [C,H,W] input, got {input:?}"));
                };
                match (
                    ops::window_extent(h, window, stride, 0),
                    ops::window_extent(w, window, stride, 0),
                ) {
                    (Some(oh), Some(ow)) => Ok(vec![c, oh, ow]),
                    _ => Err(format!(
                        "{window}x{window} pool with stride {stride} does not tile {h}x{w}"
                    )),
                }
            }
            LayerSpec::Relu => Ok(input.to_vec()),
            LayerSpec::Dense { out_features } => {
                if out_features == 0 {
                    return Err("dense needs at least one output".into());
                }
                Ok(vec![out_features])
            }
            LayerSpec::Dropout { keep } => {
                if keep > 0.0 && keep <= 1.0 {
                    Ok(input.to_vec())
                } else {
                    Err(format!("dropout keep probability {keep} outside (0, 1]"))
                }
            }
        }
    }

    /// Parameter shapes `(weights, bias)` given the input shape.
    fn param_shapes(&self, input: &[usize]) -> Option<(Vec<usize>, Vec<usize>)> {
        match *self {
            LayerSpec::Conv {
                out_channels,
                kernel: (kh, kw),
                ..
            } => Some((vec![out_channels, input[0], kh, kw], vec![out_channels])),
            LayerSpec::Dense { out_features } => Some((
                vec![out_features, input.iter().product()],
                vec![out_features],
            )),
            _ => None,
        }
    }
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerSpec::Conv {
                out_channels,
                kernel: (kh, kw),
                stride,
                padding,
            } => write!(f, "conv:{out_channels}:{kh}x{kw}:s{stride}:p{padding}"),
            LayerSpec::MaxPool { window, stride } => write!(f, "maxpool:{window}:s{stride}"),
            LayerSpec::Relu => write!(f, "relu"),
            LayerSpec::Dense { out_features } => write!(f, "dense:{out_features}"),
            LayerSpec::Dropout { keep } => write!(f, "dropout:{keep:?}"),
        }
    }
}

impl FromStr for LayerSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::format("layer spec", s.to_string());
        let parts: Vec<&str> = s.trim().split(':').collect();
        let num = |p: &str, prefix: &str| -> Result<usize> {
            p.strip_prefix(prefix)
                .and_then(|v| v.parse().ok())
                .ok_or_else(bad)
        };
        match parts.as_slice() {
            ["conv", ch, k, st, pad] => {
                let (kh, kw) = k.split_once('x').ok_or_else(bad)?;
                Ok(LayerSpec::Conv {
                    out_channels: num(ch, "")?,
                    kernel: (num(kh, "")?, num(kw, "")?),
                    stride: num(st, "s")?,
                    padding: num(pad, "p")?,
                })
            }
            ["maxpool", w, st] => Ok(LayerSpec::MaxPool {
                window: num(w, "")?,
                stride: num(st, "s")?,
            }),
            ["relu"] => Ok(LayerSpec::Relu),
            ["dense", n] => Ok(LayerSpec::Dense {
                out_features: num(n, "")?,
            }),
            ["dropout", k] => Ok(LayerSpec::Dropout {
                keep: k.parse().map_err(|_| bad())?,
            }),
            _ => Err(bad()),
        }
    }
}

/// Walks the shape algebra of a layer list, returning every intermediate
/// shape (input first, output last).
pub fn infer_shapes(input: &[usize], specs: &[LayerSpec]) -> Result<Vec<Vec<usize>>> {
    if input.is_empty() || input.contains(&0) {
        return Err(Error::InvalidArchitecture {
            index: 0,
            reason: format!("input shape {input:?} has an empty extent"),
        });
    }
    let mut shapes = vec![input.to_vec()];
    for (index, spec) in specs.iter().enumerate() {
        let next = spec
            .output_shape(shapes.last().expect("non-empty"))
            .map_err(|reason| Error::InvalidArchitecture { index, reason })?;
        shapes.push(next);
    }
    Ok(shapes)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Affine {
    pub weight: Tensor,
    pub bias: Tensor,
}

static NEXT_STATE_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_state_id() -> u64 {
    NEXT_STATE_ID.fetch_add(1, Ordering::Relaxed)
}

/// Sequential network with owned parameters.
#[derive(Debug, Clone)]
pub struct Network {
    input_shape: Vec<usize>,
    specs: Vec<LayerSpec>,
    params: Vec<Option<Affine>>,
    // changes whenever parameters change; forward caches record it
    state_id: u64,
}

impl PartialEq for Network {
    fn eq(&self, other: &Self) -> bool {
        self.input_shape == other.input_shape
            && self.specs == other.specs
            && self.params == other.params
    }
}

/// Per-layer records kept by a training-mode forward pass.
#[derive(Debug, Clone)]
enum Record {
    None,
    Argmax(Vec<usize>),
    Mask(Vec<f64>),
}

/// Everything [`Network::backward`] needs from a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    state_id: u64,
    inputs: Vec<Tensor>,
    records: Vec<Record>,
    output: Tensor,
}

impl ForwardCache {
    pub fn output(&self) -> &Tensor {
        &self.output
    }
}

/// How dropout layers behave in a training-mode pass.
pub enum DropoutMode<'a> {
    /// Dropout layers are identities.
    Off,
    /// Masks are drawn from the rng; `keep` overrides each layer's own
    /// keep probability when set.
    Sample {
        rng: &'a mut dyn rand::RngCore,
        keep: Option<f64>,
    },
}

/// One gradient slot per layer; `None` for parameterless layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Option<Affine>>,
}

impl Gradients {
    pub fn zeros_like(net: &Network) -> Self {
        Gradients {
            layers: net
                .params
                .iter()
                .map(|p| {
                    p.as_ref().map(|a| Affine {
                        weight: Tensor::zeros(a.weight.shape()),
                        bias: Tensor::zeros(a.bias.shape()),
                    })
                })
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            if let (Some(a), Some(b)) = (a, b) {
                a.weight.add_assign(&b.weight);
                a.bias.add_assign(&b.bias);
            }
        }
    }

    pub fn scale(&mut self, k: f64) {
        for a in self.layers.iter_mut().flatten() {
            a.weight.scale(k);
            a.bias.scale(k);
        }
    }

    /// All gradient values, weights before bias, layer by layer.
    pub fn flatten(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flatten()
            .flat_map(|a| a.weight.data().iter().chain(a.bias.data()).copied())
            .collect()
    }
}

impl Network {
    /// Validates the architecture and initializes weights with zero-mean
    /// Gaussians of variance `2 / fan_in`; biases start at zero.
    pub fn new(input_shape: &[usize], specs: &[LayerSpec], seed: u64) -> Result<Self> {
        let shapes = infer_shapes(input_shape, specs)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = specs
            .iter()
            .zip(&shapes)
            .map(|(spec, shape)| {
                spec.param_shapes(shape).map(|(ws, bs)| {
                    let fan_in: usize = ws[1..].iter().product();
                    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt())
                        .expect("positive std-dev");
                    let n: usize = ws.iter().product();
                    let w = (0..n).map(|_| normal.sample(&mut rng)).collect();
                    Affine {
                        weight: Tensor::from_raw(ws, w),
                        bias: Tensor::zeros(&bs),
                    }
                })
            })
            .collect();
        Ok(Network {
            input_shape: input_shape.to_vec(),
            specs: specs.to_vec(),
            params,
            state_id: fresh_state_id(),
        })
    }

    /// Assembles a network from explicit parameters, checking every shape.
    pub fn from_params(
        input_shape: &[usize],
        specs: &[LayerSpec],
        params: Vec<Option<Affine>>,
    ) -> Result<Self> {
        let shapes = infer_shapes(input_shape, specs)?;
        if params.len() != specs.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} parameter slots for {} layers",
                params.len(),
                specs.len()
            )));
        }
        for (i, ((spec, shape), p)) in specs.iter().zip(&shapes).zip(&params).enumerate() {
            let expected = spec.param_shapes(shape);
            let ok = match (&expected, p) {
                (None, None) => true,
                (Some((ws, bs)), Some(a)) => a.weight.shape() == ws && a.bias.shape() == bs,
                _ => false,
            };
            if !ok {
                return Err(Error::ShapeMismatch(format!(
                    "layer {i} ({spec}) parameters do not match {expected:?}"
                )));
            }
        }
        Ok(Network {
            input_shape: input_shape.to_vec(),
            specs: specs.to_vec(),
            params,
            state_id: fresh_state_id(),
        })
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn specs(&self) -> &[LayerSpec] {
        &self.specs
    }

    pub fn params(&self) -> &[Option<Affine>] {
        &self.params
    }

    /// Mutable access to parameters; invalidates outstanding forward caches.
    pub fn params_mut(&mut self) -> &mut [Option<Affine>] {
        self.state_id = fresh_state_id();
        &mut self.params
    }

    pub fn output_shape(&self) -> Vec<usize> {
        infer_shapes(&self.input_shape, &self.specs)
            .expect("validated at construction")
            .pop()
            .expect("non-empty")
    }

    pub fn param_count(&self) -> usize {
        self.params
            .iter()
            .flatten()
            .map(|a| a.weight.len() + a.bias.len())
            .sum()
    }

    fn check_input(&self, input: &Tensor) -> Result<()> {
        if input.shape() != self.input_shape.as_slice() {
            return Err(Error::ShapeMismatch(format!(
                "network expects input {:?}, got {:?}",
                self.input_shape,
                input.shape()
            )));
        }
        Ok(())
    }

    /// Inference-mode forward pass: dropout is the identity.
    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        self.check_input(input)?;
        let mut x = input.clone();
        for (spec, p) in self.specs.iter().zip(&self.params) {
            x = match (spec, p) {
                (LayerSpec::Conv { stride, padding, .. }, Some(a)) => {
                    ops::conv2d_forward(&x, &a.weight, &a.bias, *stride, *padding)?
                }
                (LayerSpec::Dense { .. }, Some(a)) => ops::dense_forward(&x, &a.weight, &a.bias)?,
                (LayerSpec::MaxPool { window, stride }, _) => {
                    ops::maxpool2d_forward(&x, *window, *stride)?.0
                }
                (LayerSpec::Relu, _) => ops::relu_forward(&x),
                (LayerSpec::Dropout { .. }, _) => x,
                _ => unreachable!("parameters validated at construction"),
            };
        }
        Ok(x)
    }

    /// Training-mode forward pass that records what backward needs.
    pub fn forward_train(&self, input: &Tensor, mut dropout: DropoutMode<'_>) -> Result<ForwardCache> {
        self.check_input(input)?;
        let mut inputs = Vec::with_capacity(self.specs.len());
        let mut records = Vec::with_capacity(self.specs.len());
        let mut x = input.clone();
        for (spec, p) in self.specs.iter().zip(&self.params) {
            let (y, record) = match (spec, p) {
                (LayerSpec::Conv { stride, padding, .. }, Some(a)) => (
                    ops::conv2d_forward(&x, &a.weight, &a.bias, *stride, *padding)?,
                    Record::None,
                ),
                (LayerSpec::Dense { .. }, Some(a)) => {
                    (ops::dense_forward(&x, &a.weight, &a.bias)?, Record::None)
                }
                (LayerSpec::MaxPool { window, stride }, _) => {
                    let (y, arg) = ops::maxpool2d_forward(&x, *window, *stride)?;
                    (y, Record::Argmax(arg))
                }
                (LayerSpec::Relu, _) => (ops::relu_forward(&x), Record::None),
                (LayerSpec::Dropout { keep }, _) => match &mut dropout {
                    DropoutMode::Off => (x.clone(), Record::None),
                    DropoutMode::Sample { rng, keep: over } => {
                        let drop = 1.0 - over.unwrap_or(*keep);
                        if drop <= 0.0 {
                            (x.clone(), Record::None)
                        } else {
                            let mask = ops::dropout_mask(x.len(), drop, &mut **rng);
                            (ops::apply_mask(&x, &mask)?, Record::Mask(mask))
                        }
                    }
                },
                _ => unreachable!("parameters validated at construction"),
            };
            inputs.push(x);
            records.push(record);
            x = y;
        }
        Ok(ForwardCache {
            state_id: self.state_id,
            inputs,
            records,
            output: x,
        })
    }

    /// Backpropagates an output gradient through a recorded forward pass.
    pub fn backward_from(&self, cache: &ForwardCache, grad_output: Tensor) -> Result<Gradients> {
        if cache.state_id != self.state_id || cache.inputs.len() != self.specs.len() {
            return Err(Error::StaleForwardState);
        }
        if grad_output.shape() != cache.output.shape() {
            return Err(Error::ShapeMismatch("output gradient shape".into()));
        }
        let mut layers = vec![None; self.specs.len()];
        let mut g = grad_output;
        for i in (0..self.specs.len()).rev() {
            let x = &cache.inputs[i];
            g = match (&self.specs[i], &self.params[i], &cache.records[i]) {
                (LayerSpec::Conv { stride, padding, .. }, Some(a), _) => {
                    let (gx, gw, gb) = ops::conv2d_backward(x, &a.weight, *stride, *padding, &g)?;
                    layers[i] = Some(Affine {
                        weight: gw,
                        bias: gb,
                    });
                    gx
                }
                (LayerSpec::Dense { .. }, Some(a), _) => {
                    let (gx, gw, gb) = ops::dense_backward(x, &a.weight, &g)?;
                    layers[i] = Some(Affine {
                        weight: gw,
                        bias: gb,
                    });
                    gx
                }
                (LayerSpec::MaxPool { .. }, _, Record::Argmax(arg)) => {
                    ops::maxpool2d_backward(x.shape(), arg, &g)?
                }
                (LayerSpec::Relu, _, _) => ops::relu_backward(x, &g)?,
                (LayerSpec::Dropout { .. }, _, Record::Mask(mask)) => ops::apply_mask(&g, mask)?,
                (LayerSpec::Dropout { .. }, _, Record::None) => g,
                _ => return Err(Error::StaleForwardState),
            };
        }
        Ok(Gradients { layers })
    }

    /// Gradients of the mean-squared error against `label`, plus the loss.
    pub fn backward(&self, cache: &ForwardCache, label: &Tensor) -> Result<(f64, Gradients)> {
        let loss = ops::mse_loss(&cache.output, label)?;
        let g = ops::mse_grad(&cache.output, label)?;
        Ok((loss, self.backward_from(cache, g)?))
    }

    /// Plain SGD with coupled L2 weight decay on weights only:
    /// `w ← w − lr·(g + wd·w)`, `b ← b − lr·g`.
    pub fn sgd_step(&mut self, grads: &Gradients, learning_rate: f64, weight_decay: f64) -> Result<()> {
        if grads.layers.len() != self.params.len() {
            return Err(Error::ShapeMismatch("gradient layer count".into()));
        }
        for (p, g) in self.params.iter().zip(&grads.layers) {
            let ok = match (p, g) {
                (Some(p), Some(g)) => {
                    p.weight.shape() == g.weight.shape() && p.bias.shape() == g.bias.shape()
                }
                (None, None) => true,
                _ => false,
            };
            if !ok {
                return Err(Error::ShapeMismatch("gradient does not match parameters".into()));
            }
        }
        for (p, g) in self.params_mut().iter_mut().zip(&grads.layers) {
            if let (Some(p), Some(g)) = (p, g) {
                for (w, gw) in p.weight.data_mut().iter_mut().zip(g.weight.data()) {
                    *w -= learning_rate * (gw + weight_decay * *w);
                }
                for (b, gb) in p.bias.data_mut().iter_mut().zip(g.bias.data()) {
                    *b -= learning_rate * gb;
                }
            }
        }
        Ok(())
    }
}

/// Seeds a per-sample dropout stream from a run seed and a sample counter.
pub fn sample_rng(seed: u64, counter: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(counter);
    rng
}
