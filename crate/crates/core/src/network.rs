//! ANN and SNN model containers.
//!
//! Both models share [`LinearOp`] for their weighted and pooling layers; they
//! differ only in the nonlinearity. An [`AnnModel`] carries activation layers
//! parameterized by [`QcfsParams`], an [`SnnModel`] carries integrate-and-fire
//! layers with a threshold and an initial membrane potential.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeometry};
use crate::qcfs::{self, QcfsParams, DEFAULT_LAMBDA, DEFAULT_SHIFT};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationKind {
    Relu,
    Qcfs,
    QcfNoShift,
    ClipOnly,
    IfNeuron,
}

impl fmt::Display for ActivationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ActivationKind::Relu => "relu",
            ActivationKind::Qcfs => "qcfs",
            ActivationKind::QcfNoShift => "qcf_noshift",
            ActivationKind::ClipOnly => "clip_only",
            ActivationKind::IfNeuron => "if_neuron",
        };
        f.write_str(s)
    }
}

impl ActivationKind {
    /// Whether the activation owns a trainable `λ`.
    pub fn has_threshold(self) -> bool {
        matches!(
            self,
            ActivationKind::Qcfs | ActivationKind::QcfNoShift | ActivationKind::ClipOnly
        )
    }
}

/// Serializable description of one layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Dense {
        inputs: usize,
        outputs: usize,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    #[serde(rename = "avgpool2d")]
    AvgPool2d {
        size: usize,
    },
    #[serde(rename = "maxpool2d")]
    MaxPool2d {
        size: usize,
    },
    Flatten,
    Activation {
        activation: ActivationKind,
    },
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerSpec::Dense { inputs, outputs } => write!(f, "dense {inputs}→{outputs}"),
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => write!(f, "conv2d {in_channels}→{out_channels} {kernel}×{kernel}"),
            LayerSpec::AvgPool2d { size } => write!(f, "avgpool2d {size}"),
            LayerSpec::MaxPool2d { size } => write!(f, "maxpool2d {size}"),
            LayerSpec::Flatten => f.write_str("flatten"),
            LayerSpec::Activation { activation } => write!(f, "{activation}"),
        }
    }
}

/// Linear (or pooling/reshaping) operator applied per sample.
#[derive(Clone, Debug, PartialEq)]
pub enum LinearOp {
    Dense {
        weight: Tensor,
        bias: Tensor,
    },
    Conv2d {
        weight: Tensor,
        bias: Tensor,
        stride: usize,
        pad: usize,
    },
    AvgPool2d {
        size: usize,
    },
    MaxPool2d {
        size: usize,
    },
    Flatten,
}

impl LinearOp {
    pub fn dense(weight: Tensor, bias: Tensor) -> Result<Self> {
        let [o, _] = weight.dims2("dense")?;
        if bias.shape() != [o] {
            return Err(Error::dim("dense bias", bias.shape(), &[o]));
        }
        Ok(LinearOp::Dense { weight, bias })
    }

    pub fn conv2d(weight: Tensor, bias: Tensor, stride: usize, pad: usize) -> Result<Self> {
        let &[f, _, kh, kw] = weight.shape() else {
            return Err(Error::dim("conv2d", weight.shape(), &[0, 0, 0, 0]));
        };
        if kh != kw || bias.shape() != [f] {
            return Err(Error::dim("conv2d", weight.shape(), bias.shape()));
        }
        Ok(LinearOp::Conv2d {
            weight,
            bias,
            stride,
            pad,
        })
    }

    pub fn spec(&self) -> LayerSpec {
        match self {
            LinearOp::Dense { weight, .. } => LayerSpec::Dense {
                inputs: weight.shape()[1],
                outputs: weight.shape()[0],
            },
            LinearOp::Conv2d {
                weight, stride, pad, ..
            } => LayerSpec::Conv2d {
                in_channels: weight.shape()[1],
                out_channels: weight.shape()[0],
                kernel: weight.shape()[2],
                stride: *stride,
                pad: *pad,
            },
            LinearOp::AvgPool2d { size } => LayerSpec::AvgPool2d { size: *size },
            LinearOp::MaxPool2d { size } => LayerSpec::MaxPool2d { size: *size },
            LinearOp::Flatten => LayerSpec::Flatten,
        }
    }

    /// Weight and bias of a parametric layer.
    pub fn weights(&self) -> Option<(&Tensor, &Tensor)> {
        match self {
            LinearOp::Dense { weight, bias } | LinearOp::Conv2d { weight, bias, .. } => Some((weight, bias)),
            _ => None,
        }
    }

    fn weights_mut(&mut self) -> Option<(&mut Tensor, &mut Tensor)> {
        match self {
            LinearOp::Dense { weight, bias } | LinearOp::Conv2d { weight, bias, .. } => Some((weight, bias)),
            _ => None,
        }
    }

    fn conv_geometry(&self, in_shape: &[usize]) -> Result<ConvGeometry> {
        let LinearOp::Conv2d {
            weight, stride, pad, ..
        } = self
        else {
            unreachable!("conv_geometry on non-conv layer")
        };
        match *in_shape {
            [c, h, w] if c == weight.shape()[1] => {
                ConvGeometry::new((c, h, w), weight.shape()[0], weight.shape()[2], *stride, *pad)
            }
            _ => Err(Error::dim("conv2d", in_shape, weight.shape())),
        }
    }

    /// Per-sample output shape for a per-sample input shape.
    pub fn output_shape(&self, in_shape: &[usize]) -> Result<Vec<usize>> {
        match self {
            LinearOp::Dense { weight, .. } => {
                if in_shape != [weight.shape()[1]] {
                    return Err(Error::dim("dense", in_shape, weight.shape()));
                }
                Ok(vec![weight.shape()[0]])
            }
            LinearOp::Conv2d { .. } => {
                let g = self.conv_geometry(in_shape)?;
                Ok(vec![g.filters, g.out_height, g.out_width])
            }
            LinearOp::AvgPool2d { size } | LinearOp::MaxPool2d { size } => match *in_shape {
                [c, h, w] if *size > 0 && h % size == 0 && w % size == 0 => Ok(vec![c, h / size, w / size]),
                _ => Err(Error::Config(format!(
                    "pool window {size} does not fit input {in_shape:?}"
                ))),
            },
            LinearOp::Flatten => Ok(vec![in_shape.iter().product()]),
        }
    }

    /// Applies the operator to a batch (`B×…`).
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            LinearOp::Dense { weight, bias } => kernels::linear(x, weight, bias),
            LinearOp::Conv2d {
                weight,
                bias,
                stride,
                pad,
            } => kernels::conv2d_bias(x, weight, Some(bias), *stride, *pad),
            LinearOp::AvgPool2d { size } => kernels::avgpool2d(x, *size),
            LinearOp::MaxPool2d { size } => Ok(kernels::maxpool2d(x, *size)?.0),
            LinearOp::Flatten => x.reshape(&[x.batch_len(), x.sample_len()]),
        }
    }

    /// Multiply-accumulate count for one sample.
    pub fn macs(&self, in_shape: &[usize]) -> Result<u64> {
        Ok(match self {
            LinearOp::Dense { weight, .. } => weight.len() as u64,
            LinearOp::Conv2d { weight, .. } => {
                let out = self.output_shape(in_shape)?;
                let per_output = weight.shape()[1..].iter().product::<usize>();
                (out.iter().product::<usize>() * per_output) as u64
            }
            _ => 0,
        })
    }

    /// Output indices structurally connected to input element `index`
    /// (both flattened per sample).
    pub fn receivers(&self, in_shape: &[usize], index: usize) -> Result<Vec<usize>> {
        Ok(match self {
            LinearOp::Dense { weight, .. } => (0..weight.shape()[0]).collect(),
            LinearOp::Conv2d { .. } => self.conv_geometry(in_shape)?.receivers(index),
            LinearOp::AvgPool2d { size } | LinearOp::MaxPool2d { size } => {
                let [_, h, w] = *in_shape else {
                    return Err(Error::dim("pool", in_shape, &[0, 0, 0]));
                };
                let (x, y, c) = (index % w, (index / w) % h, index / (h * w));
                let (oh, ow) = (h / size, w / size);
                vec![(c * oh + y / size) * ow + x / size]
            }
            LinearOp::Flatten => vec![index],
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Linear(LinearOp),
    Activation { kind: ActivationKind, params: QcfsParams },
}

impl Layer {
    pub fn spec(&self) -> LayerSpec {
        match self {
            Layer::Linear(op) => op.spec(),
            Layer::Activation { kind, .. } => LayerSpec::Activation { activation: *kind },
        }
    }
}

/// Which kind of value a trainable parameter slice holds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    /// Activation threshold `λ`: excluded from weight decay and kept positive.
    Threshold,
}

/// Forward-pass results of an [`AnnModel`].
#[derive(Clone, Debug)]
pub struct AnnOutput {
    pub logits: Tensor,
    /// Post-activation output `aˡ` of each activation layer.
    pub activations: Vec<Tensor>,
    /// Pre-activation input `zˡ` of each activation layer.
    pub preactivations: Vec<Tensor>,
}

/// Normalizes an input to batched form; an unbatched sample becomes a
/// batch of one.
pub(crate) fn batched(input_shape: &[usize], x: &Tensor) -> Result<Tensor> {
    if x.shape() == input_shape {
        let mut shape = vec![1];
        shape.extend_from_slice(input_shape);
        return x.reshape(&shape);
    }
    if x.ndim() == input_shape.len() + 1 && &x.shape()[1..] == input_shape {
        return Ok(x.clone());
    }
    Err(Error::dim("model input", x.shape(), input_shape))
}

fn validate_chain<'a>(
    input_shape: &[usize],
    ops: impl Iterator<Item = Option<&'a LinearOp>>,
) -> Result<Vec<Vec<usize>>> {
    let mut shapes = vec![input_shape.to_vec()];
    for op in ops {
        let cur = shapes.last().unwrap().clone();
        let next = match op {
            Some(op) => op.output_shape(&cur)?,
            None => cur,
        };
        shapes.push(next);
    }
    Ok(shapes)
}

fn checksum_ops<'a>(ops: impl Iterator<Item = &'a LinearOp>) -> String {
    let mut h = Sha256::new();
    for op in ops {
        if let Some((w, b)) = op.weights() {
            h.update(w.to_le_bytes());
            h.update(b.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnnModel {
    input_shape: Vec<usize>,
    layers: Vec<Layer>,
}

impl AnnModel {
    /// Builds a model, checking that consecutive layer shapes compose and
    /// that activation parameters are valid.
    pub fn new(input_shape: Vec<usize>, layers: Vec<Layer>) -> Result<Self> {
        validate_chain(
            &input_shape,
            layers.iter().map(|l| match l {
                Layer::Linear(op) => Some(op),
                Layer::Activation { .. } => None,
            }),
        )?;
        for l in &layers {
            if let Layer::Activation { kind, params } = l {
                if *kind == ActivationKind::IfNeuron {
                    return Err(Error::Config("if_neuron layers belong in an SnnModel".into()));
                }
                params.validate()?;
            }
        }
        Ok(AnnModel { input_shape, layers })
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(Layer::spec).collect()
    }

    /// Per-sample shape entering each layer, plus the final output shape.
    pub fn shapes(&self) -> Vec<Vec<usize>> {
        validate_chain(
            &self.input_shape,
            self.layers.iter().map(|l| match l {
                Layer::Linear(op) => Some(op),
                Layer::Activation { .. } => None,
            }),
        )
        .expect("validated at construction")
    }

    /// Layer indices of the activation layers, in order.
    pub fn activation_indices(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l, Layer::Activation { .. }))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn activation_params(&self) -> Vec<(ActivationKind, QcfsParams)> {
        self.layers
            .iter()
            .filter_map(|l| match l {
                Layer::Activation { kind, params } => Some((*kind, *params)),
                _ => None,
            })
            .collect()
    }

    pub fn linear_ops(&self) -> impl Iterator<Item = &LinearOp> {
        self.layers.iter().filter_map(|l| match l {
            Layer::Linear(op) => Some(op),
            _ => None,
        })
    }

    /// SHA-256 over all weights and biases, in layer order.
    pub fn weight_checksum(&self) -> String {
        checksum_ops(self.linear_ops())
    }

    /// Multiply-accumulate count of all dense and conv layers for one sample.
    pub fn macs(&self) -> u64 {
        let shapes = self.shapes();
        self.layers
            .iter()
            .zip(&shapes)
            .map(|(l, s)| match l {
                Layer::Linear(op) => op.macs(s).expect("validated"),
                _ => 0,
            })
            .sum()
    }

    /// Trainable parameters in a fixed order: weight then bias of each
    /// parametric layer, `λ` of each thresholded activation.
    pub fn params_mut(&mut self) -> Vec<(ParamKind, &mut [f64])> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            match layer {
                Layer::Linear(op) => {
                    if let Some((w, b)) = op.weights_mut() {
                        out.push((ParamKind::Weight, w.data_mut()));
                        out.push((ParamKind::Bias, b.data_mut()));
                    }
                }
                Layer::Activation { kind, params } if kind.has_threshold() => {
                    out.push((ParamKind::Threshold, std::slice::from_mut(&mut params.lambda)));
                }
                Layer::Activation { .. } => {}
            }
        }
        out
    }

    pub(crate) fn apply_activation(kind: ActivationKind, params: &QcfsParams, z: &Tensor) -> Result<Tensor> {
        Ok(match kind {
            ActivationKind::Relu => z.map(|v| v.max(0.0)),
            ActivationKind::Qcfs => qcfs::qcfs_forward(z, params),
            ActivationKind::QcfNoShift => qcfs::qcf_forward_noshift(z, params),
            ActivationKind::ClipOnly => z.map(|v| qcfs::clip_scalar(v, params.lambda)),
            ActivationKind::IfNeuron => return Err(Error::Usage("if_neuron has no analog forward pass".into())),
        })
    }

    /// Forward pass over a batch `B×input_shape` (or one unbatched sample).
    pub fn forward(&self, x: &Tensor) -> Result<AnnOutput> {
        let mut h = batched(&self.input_shape, x)?;
        let mut activations = Vec::new();
        let mut preactivations = Vec::new();
        for layer in &self.layers {
            match layer {
                Layer::Linear(op) => h = op.forward(&h)?,
                Layer::Activation { kind, params } => {
                    let a = Self::apply_activation(*kind, params, &h)?;
                    preactivations.push(std::mem::replace(&mut h, a));
                    activations.push(h.clone());
                }
            }
        }
        h.ensure_finite("ann_forward")?;
        Ok(AnnOutput {
            logits: h,
            activations,
            preactivations,
        })
    }

    /// Forward pass returning only the logits.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = batched(&self.input_shape, x)?;
        for layer in &self.layers {
            h = match layer {
                Layer::Linear(op) => op.forward(&h)?,
                Layer::Activation { kind, params } => Self::apply_activation(*kind, params, &h)?,
            };
        }
        Ok(h)
    }

    /// Algorithm-1 structural rewrite: every ReLU becomes QCFS with fresh
    /// parameters `(L, λ=8, φ=1/2)` and every max-pool becomes an average
    /// pool of the same window. Weights are carried over unchanged.
    pub fn transform_to_qcfs(&self, levels: u32) -> Result<AnnModel> {
        let fresh = QcfsParams::new(levels, DEFAULT_LAMBDA, DEFAULT_SHIFT)?;
        let layers = self
            .layers
            .iter()
            .enumerate()
            .map(|(index, layer)| match layer {
                Layer::Activation {
                    kind: ActivationKind::Relu,
                    ..
                } => Ok(Layer::Activation {
                    kind: ActivationKind::Qcfs,
                    params: fresh,
                }),
                Layer::Activation {
                    kind: ActivationKind::Qcfs | ActivationKind::QcfNoShift,
                    ..
                } => Ok(layer.clone()),
                Layer::Activation { kind, .. } => Err(Error::Transform {
                    index,
                    kind: kind.to_string(),
                }),
                Layer::Linear(LinearOp::MaxPool2d { size }) => Ok(Layer::Linear(LinearOp::AvgPool2d { size: *size })),
                Layer::Linear(_) => Ok(layer.clone()),
            })
            .collect::<Result<Vec<_>>>()?;
        AnnModel::new(self.input_shape.clone(), layers)
    }
}

/// Kaiming-uniform initialized dense layer (`bound = √(6/fan_in)`), zero bias.
pub fn init_dense<R: Rng>(inputs: usize, outputs: usize, rng: &mut R) -> LinearOp {
    let bound = (6.0 / inputs as f64).sqrt();
    let w = (0..inputs * outputs).map(|_| rng.random_range(-bound..bound)).collect();
    LinearOp::Dense {
        weight: Tensor::new(vec![outputs, inputs], w).expect("shape"),
        bias: Tensor::zeros(&[outputs]),
    }
}

/// Kaiming-uniform initialized convolution, zero bias.
pub fn init_conv<R: Rng>(
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    rng: &mut R,
) -> LinearOp {
    let fan_in = in_channels * kernel * kernel;
    let bound = (6.0 / fan_in as f64).sqrt();
    let w = (0..out_channels * fan_in)
        .map(|_| rng.random_range(-bound..bound))
        .collect();
    LinearOp::Conv2d {
        weight: Tensor::new(vec![out_channels, in_channels, kernel, kernel], w).expect("shape"),
        bias: Tensor::zeros(&[out_channels]),
        stride,
        pad,
    }
}

/// Reference architectures.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Architecture {
    /// `input → 100 → classes`.
    Mlp,
    /// `conv 16@3×3 → pool 2 → conv 32@3×3 → pool 2 → dense classes`.
    ConvSmall,
}

impl Architecture {
    /// Builds a freshly initialized model with the given activation in every
    /// hidden position.
    pub fn build<R: Rng>(
        self,
        input_shape: &[usize],
        classes: usize,
        kind: ActivationKind,
        params: QcfsParams,
        rng: &mut R,
    ) -> Result<AnnModel> {
        let act = || Layer::Activation { kind, params };
        let layers = match self {
            Architecture::Mlp => {
                let inputs: usize = input_shape.iter().product();
                let mut layers = Vec::new();
                if input_shape.len() != 1 {
                    layers.push(Layer::Linear(LinearOp::Flatten));
                }
                layers.push(Layer::Linear(init_dense(inputs, 100, rng)));
                layers.push(act());
                layers.push(Layer::Linear(init_dense(100, classes, rng)));
                layers
            }
            Architecture::ConvSmall => {
                let &[c, h, w] = input_shape else {
                    return Err(Error::Config(format!(
                        "conv-small needs C×H×W input, got {input_shape:?}"
                    )));
                };
                if h % 4 != 0 || w % 4 != 0 {
                    return Err(Error::Config(format!(
                        "conv-small needs H and W divisible by 4, got {h}×{w}"
                    )));
                }
                vec![
                    Layer::Linear(init_conv(c, 16, 3, 1, 1, rng)),
                    act(),
                    Layer::Linear(LinearOp::AvgPool2d { size: 2 }),
                    Layer::Linear(init_conv(16, 32, 3, 1, 1, rng)),
                    act(),
                    Layer::Linear(LinearOp::AvgPool2d { size: 2 }),
                    Layer::Linear(LinearOp::Flatten),
                    Layer::Linear(init_dense(32 * (h / 4) * (w / 4), classes, rng)),
                ]
            }
        };
        AnnModel::new(input_shape.to_vec(), layers)
    }
}

/// Integrate-and-fire layer parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IfParams {
    /// Firing threshold `θ`.
    pub theta: f64,
    /// Initial membrane potential `v(0)`.
    pub v0: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum SnnLayer {
    Linear(LinearOp),
    Spiking(IfParams),
}

impl SnnLayer {
    pub fn spec(&self) -> LayerSpec {
        match self {
            SnnLayer::Linear(op) => op.spec(),
            SnnLayer::Spiking(_) => LayerSpec::Activation {
                activation: ActivationKind::IfNeuron,
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SnnModel {
    input_shape: Vec<usize>,
    layers: Vec<SnnLayer>,
}

impl SnnModel {
    pub fn new(input_shape: Vec<usize>, layers: Vec<SnnLayer>) -> Result<Self> {
        validate_chain(
            &input_shape,
            layers.iter().map(|l| match l {
                SnnLayer::Linear(op) => Some(op),
                SnnLayer::Spiking(_) => None,
            }),
        )?;
        for l in &layers {
            match l {
                SnnLayer::Spiking(p) if !(p.theta > 0.0 && p.theta.is_finite() && p.v0.is_finite()) => {
                    return Err(Error::Config(format!(
                        "spiking layer needs θ > 0 and finite v(0), got {p:?}"
                    )));
                }
                SnnLayer::Linear(LinearOp::MaxPool2d { .. }) => {
                    return Err(Error::Config("max-pooling has no spiking counterpart".into()));
                }
                _ => {}
            }
        }
        Ok(SnnModel { input_shape, layers })
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn layers(&self) -> &[SnnLayer] {
        &self.layers
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(SnnLayer::spec).collect()
    }

    pub fn shapes(&self) -> Vec<Vec<usize>> {
        validate_chain(
            &self.input_shape,
            self.layers.iter().map(|l| match l {
                SnnLayer::Linear(op) => Some(op),
                SnnLayer::Spiking(_) => None,
            }),
        )
        .expect("validated at construction")
    }

    pub fn spiking_params(&self) -> Vec<IfParams> {
        self.layers
            .iter()
            .filter_map(|l| match l {
                SnnLayer::Spiking(p) => Some(*p),
                _ => None,
            })
            .collect()
    }

    pub fn spiking_indices(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l, SnnLayer::Spiking(_)))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn linear_ops(&self) -> impl Iterator<Item = &LinearOp> {
        self.layers.iter().filter_map(|l| match l {
            SnnLayer::Linear(op) => Some(op),
            _ => None,
        })
    }

    pub fn weight_checksum(&self) -> String {
        checksum_ops(self.linear_ops())
    }

    /// Replaces the `(θ, v0)` of every spiking layer, in order.
    pub fn with_spiking_params(&self, params: &[IfParams]) -> Result<SnnModel> {
        let mut it = params.iter();
        let layers = self
            .layers
            .iter()
            .map(|l| match l {
                SnnLayer::Spiking(_) => it
                    .next()
                    .map(|p| SnnLayer::Spiking(*p))
                    .ok_or_else(|| Error::Usage("too few spiking parameters".into())),
                other => Ok(other.clone()),
            })
            .collect::<Result<Vec<_>>>()?;
        if it.next().is_some() {
            return Err(Error::Usage("too many spiking parameters".into()));
        }
        SnnModel::new(self.input_shape.clone(), layers)
    }

    /// Number of distinct downstream neurons reached by each neuron of each
    /// spiking layer, following the linear chain up to the next spiking
    /// layer or the output.
    pub fn fanouts(&self) -> Result<Vec<Vec<u64>>> {
        let shapes = self.shapes();
        let mut out = Vec::new();
        for (li, layer) in self.layers.iter().enumerate() {
            if !matches!(layer, SnnLayer::Spiking(_)) {
                continue;
            }
            let chain: Vec<(&LinearOp, &Vec<usize>)> = self.layers[li + 1..]
                .iter()
                .zip(&shapes[li + 1..])
                .map_while(|(l, s)| match l {
                    SnnLayer::Linear(op) => Some((op, s)),
                    SnnLayer::Spiking(_) => None,
                })
                .collect();
            let neurons: usize = shapes[li].iter().product();
            let mut counts = Vec::with_capacity(neurons);
            for n in 0..neurons {
                let mut frontier = vec![n];
                for (op, shape) in &chain {
                    let mut next = Vec::new();
                    for &i in &frontier {
                        next.extend(op.receivers(shape, i)?);
                    }
                    next.sort_unstable();
                    next.dedup();
                    frontier = next;
                }
                counts.push(if chain.is_empty() { 0 } else { frontier.len() as u64 });
            }
            out.push(counts);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn two_input_model(kind: ActivationKind) -> AnnModel {
        let w = Tensor::from_rows(&[&[2.0, -2.0]]).unwrap();
        AnnModel::new(
            vec![2],
            vec![
                Layer::Linear(LinearOp::dense(w, Tensor::zeros(&[1])).unwrap()),
                Layer::Activation {
                    kind,
                    params: QcfsParams::new(4, 1.0, 0.5).unwrap(),
                },
            ],
        )
        .unwrap()
    }

    #[test]
    fn forward_two_neuron_example() {
        let m = two_input_model(ActivationKind::Qcfs);
        let out = m.forward(&Tensor::vector(&[0.6, 0.4])).unwrap();
        assert!((out.preactivations[0].data()[0] - 0.4).abs() < 1e-12);
        assert_eq!(out.activations[0].data(), &[0.5]);
    }

    #[test]
    fn zero_weights_zero_activations() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut m = Architecture::Mlp
            .build(
                &[5],
                3,
                ActivationKind::Qcfs,
                QcfsParams::with_levels(4).unwrap(),
                &mut rng,
            )
            .unwrap();
        for (_, p) in m.params_mut() {
            if p.len() > 1 {
                p.fill(0.0);
            }
        }
        let x = Tensor::new(vec![2, 5], (0..10).map(f64::from).collect()).unwrap();
        let out = m.forward(&x).unwrap();
        assert!(out.activations.iter().all(|a| a.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn relu_on_negative_inputs() {
        let m = AnnModel::new(
            vec![3],
            vec![Layer::Activation {
                kind: ActivationKind::Relu,
                params: QcfsParams::with_levels(1).unwrap(),
            }],
        )
        .unwrap();
        let out = m.forward(&Tensor::vector(&[-1.0, -0.5, -3.0])).unwrap();
        assert_eq!(out.logits.data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn shape_mismatch_rejected_at_build() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = AnnModel::new(
            vec![4],
            vec![
                Layer::Linear(init_dense(4, 3, &mut rng)),
                Layer::Linear(init_dense(4, 2, &mut rng)),
            ],
        );
        assert!(matches!(err, Err(Error::Dimension { .. })));
    }

    fn relu_cnn() -> AnnModel {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let relu = || Layer::Activation {
            kind: ActivationKind::Relu,
            params: QcfsParams::with_levels(1).unwrap(),
        };
        AnnModel::new(
            vec![1, 8, 8],
            vec![
                Layer::Linear(init_conv(1, 4, 3, 1, 1, &mut rng)),
                relu(),
                Layer::Linear(LinearOp::MaxPool2d { size: 2 }),
                Layer::Linear(LinearOp::Flatten),
                Layer::Linear(init_dense(64, 10, &mut rng)),
                relu(),
                Layer::Linear(init_dense(10, 3, &mut rng)),
            ],
        )
        .unwrap()
    }

    #[test]
    fn transform_replaces_relu_and_maxpool() {
        let src = relu_cnn();
        let q = src.transform_to_qcfs(4).unwrap();
        let acts = q.activation_params();
        assert_eq!(acts.len(), 2);
        for (kind, p) in acts {
            assert_eq!(kind, ActivationKind::Qcfs);
            assert_eq!(p, QcfsParams::new(4, 8.0, 0.5).unwrap());
        }
        assert_eq!(q.specs()[2], LayerSpec::AvgPool2d { size: 2 });
        assert_eq!(q.weight_checksum(), src.weight_checksum());
    }

    #[test]
    fn transform_without_relu_keeps_topology() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = AnnModel::new(vec![3], vec![Layer::Linear(init_dense(3, 2, &mut rng))]).unwrap();
        assert_eq!(m.transform_to_qcfs(4).unwrap(), m);
    }

    #[test]
    fn transform_rejects_clip_only() {
        let m = two_input_model(ActivationKind::ClipOnly);
        assert!(matches!(m.transform_to_qcfs(4), Err(Error::Transform { index: 1, .. })));
    }

    #[test]
    fn mlp_macs() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = Architecture::Mlp
            .build(
                &[1, 28, 28],
                10,
                ActivationKind::Qcfs,
                QcfsParams::with_levels(4).unwrap(),
                &mut rng,
            )
            .unwrap();
        assert_eq!(m.macs(), 784 * 100 + 100 * 10);
    }

    #[test]
    fn conv_small_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = Architecture::ConvSmall
            .build(
                &[1, 28, 28],
                10,
                ActivationKind::Qcfs,
                QcfsParams::with_levels(4).unwrap(),
                &mut rng,
            )
            .unwrap();
        assert_eq!(m.shapes().last().unwrap(), &vec![10]);
        let x = Tensor::zeros(&[2, 1, 28, 28]);
        assert_eq!(m.logits(&x).unwrap().shape(), &[2, 10]);
    }
}
