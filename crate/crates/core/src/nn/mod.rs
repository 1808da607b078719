//! Minimal graph representation and float execution for the deployable models.
//!
//! A [`ModelGraph`] is an ordered list of [`LayerSpec`]s whose shapes are
//! checked when the graph is built. Parameters live in a [`WeightSet`] keyed by
//! layer index, one tensor per entry of [`LayerSpec::params`].
//!
//! Layouts:
//! - sequences are channel-major `[c][n]`
//! - images are `[c][h][w]`; the table-style shape `H x W x C` is what
//!   [`Shape`] displays
//! - `Reshape` flattens images in `(h, w, c)` order
//! - conv weights are `[out][in][k]` / `[out][in][kh][kw]`, dense `[out][in]`

mod container;
mod forward;
mod models;

pub use container::{
    float_container, load_model, load_weights, read_container, save_weights,
    weights_from_container, write_container, ContainerHeader, Dtype,
    LayerEntry, RawContainer, TensorData, TensorEntry, FORMAT_VERSION, MAGIC,
};
pub use forward::{forward, forward_from, forward_trace, relu, softmax};
pub(crate) use forward::{apply_layer as forward_layer, flatten_hwc};
pub use models::{
    build_cnn_mel, build_cnn_time, build_transformer_time, fire1d_counts, FireCounts, InputKind,
    ModelArch, INPUT_SAMPLES, MEL_FRAMES, TARGET_CLASS,
};

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::SplitMix64;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("missing weights for layer {layer} ({name})")]
    MissingWeights { layer: usize, name: String },
    #[error("fire module with x={0} has zero filters after the 0.3 reduction")]
    DegenerateFire(usize),
    #[error("invalid layer: {0}")]
    InvalidLayer(String),
    #[error("invalid graph: {0}")]
    InvalidGraph(String),
    #[error("not a weight container (bad magic)")]
    MagicMismatch,
    #[error("unsupported container version {0}")]
    VersionUnsupported(u32),
    #[error("payload checksum mismatch")]
    ChecksumFailure,
    #[error("container holds {found} tensors where {expected} were expected")]
    DtypeMismatch { expected: Dtype, found: Dtype },
    #[error("malformed container: {0}")]
    Malformed(String),
    #[error("I/O failure: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    Valid,
    Same,
}

/// One layer of a model graph.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv1d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: Padding,
        bias: bool,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        bias: bool,
    },
    MaxPool1d {
        size: usize,
    },
    MaxPool2d {
        size: usize,
    },
    GlobalAvgPool,
    FullyConnected {
        in_features: usize,
        out_features: usize,
        bias: bool,
    },
    Relu,
    Softmax,
    /// Identity at inference.
    Dropout {
        rate: f32,
    },
    /// Single-head self-attention block with a two-layer ReLU feed-forward and
    /// residual connections; no layer norm, no biases.
    SingleHeadTransformer {
        dim: usize,
    },
    /// Squeeze (1x1) then parallel expand 1x1 and expand 3x1 convolutions,
    /// each followed by ReLU, concatenated along channels.
    Fire1d {
        in_channels: usize,
        squeeze: usize,
        expand1: usize,
        expand3: usize,
        bias: bool,
    },
    Reshape {
        len: usize,
    },
}

/// Name and shape of one parameter tensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: &'static str,
    pub shape: Vec<usize>,
}

impl ParamSpec {
    fn new(name: &'static str, shape: Vec<usize>) -> Self {
        Self { name, shape }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

impl LayerSpec {
    /// Same-padded, stride-1 convolution without bias.
    pub fn conv1d(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        LayerSpec::Conv1d {
            in_channels,
            out_channels,
            kernel,
            stride: 1,
            padding: Padding::Same,
            bias: false,
        }
    }

    pub fn dense(in_features: usize, out_features: usize, bias: bool) -> Self {
        LayerSpec::FullyConnected {
            in_features,
            out_features,
            bias,
        }
    }

    /// Lightweight fire module for an original filter count `x`.
    pub fn fire1d(in_channels: usize, x: usize) -> Result<Self, NnError> {
        let c = fire1d_counts(x);
        if c.squeeze == 0 {
            return Err(NnError::DegenerateFire(x));
        }
        Ok(LayerSpec::Fire1d {
            in_channels,
            squeeze: c.squeeze,
            expand1: c.expand1,
            expand3: c.expand3,
            bias: true,
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            LayerSpec::Conv1d { .. } => "conv1d",
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::MaxPool1d { .. } => "max_pool1d",
            LayerSpec::MaxPool2d { .. } => "max_pool2d",
            LayerSpec::GlobalAvgPool => "global_avg_pool",
            LayerSpec::FullyConnected { .. } => "fully_connected",
            LayerSpec::Relu => "relu",
            LayerSpec::Softmax => "softmax",
            LayerSpec::Dropout { .. } => "dropout",
            LayerSpec::SingleHeadTransformer { .. } => "single_head_transformer",
            LayerSpec::Fire1d { .. } => "fire1d",
            LayerSpec::Reshape { .. } => "reshape",
        }
    }

    /// Parameter tensors in storage order.
    pub fn params(&self) -> Vec<ParamSpec> {
        let with_bias = |mut v: Vec<ParamSpec>, bias: bool, n: usize| {
            if bias {
                v.push(ParamSpec::new("bias", vec![n]));
            }
            v
        };
        match *self {
            LayerSpec::Conv1d {
                in_channels,
                out_channels,
                kernel,
                bias,
                ..
            } => with_bias(
                vec![ParamSpec::new("weight", vec![out_channels, in_channels, kernel])],
                bias,
                out_channels,
            ),
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                bias,
            } => with_bias(
                vec![ParamSpec::new(
                    "weight",
                    vec![out_channels, in_channels, kernel, kernel],
                )],
                bias,
                out_channels,
            ),
            LayerSpec::FullyConnected {
                in_features,
                out_features,
                bias,
            } => with_bias(
                vec![ParamSpec::new("weight", vec![out_features, in_features])],
                bias,
                out_features,
            ),
            LayerSpec::SingleHeadTransformer { dim } => ["wq", "wk", "wv", "wo", "ff1", "ff2"]
                .into_iter()
                .map(|n| ParamSpec::new(n, vec![dim, dim]))
                .collect(),
            LayerSpec::Fire1d {
                in_channels,
                squeeze,
                expand1,
                expand3,
                bias,
            } => {
                let mut v = vec![ParamSpec::new("squeeze.weight", vec![squeeze, in_channels, 1])];
                if bias {
                    v.push(ParamSpec::new("squeeze.bias", vec![squeeze]));
                }
                v.push(ParamSpec::new("expand1.weight", vec![expand1, squeeze, 1]));
                if bias {
                    v.push(ParamSpec::new("expand1.bias", vec![expand1]));
                }
                v.push(ParamSpec::new("expand3.weight", vec![expand3, squeeze, 3]));
                if bias {
                    v.push(ParamSpec::new("expand3.bias", vec![expand3]));
                }
                v
            }
            _ => Vec::new(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(ParamSpec::numel).sum()
    }

    /// Output shape for `input`, or why the layer cannot consume it.
    pub fn output_shape(&self, input: Shape) -> Result<Shape, NnError> {
        let mismatch = |what: &str| {
            Err(NnError::ShapeMismatch(format!(
                "{} cannot consume {input}: {what}",
                self.name()
            )))
        };
        match (*self, input) {
            (
                LayerSpec::Conv1d {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    padding,
                    ..
                },
                Shape::Seq { channels, len },
            ) => {
                if kernel == 0 || stride == 0 || in_channels == 0 || out_channels == 0 {
                    return Err(NnError::InvalidLayer(
                        "kernel, stride and channels must be >= 1".into(),
                    ));
                }
                if channels != in_channels {
                    return mismatch("channel count");
                }
                let out_len = match padding {
                    Padding::Same => {
                        if kernel % 2 == 0 {
                            return Err(NnError::InvalidLayer(
                                "same padding needs an odd kernel".into(),
                            ));
                        }
                        len.div_ceil(stride)
                    }
                    Padding::Valid => {
                        if len < kernel {
                            return mismatch("sequence shorter than kernel");
                        }
                        (len - kernel) / stride + 1
                    }
                };
                Ok(Shape::Seq {
                    channels: out_channels,
                    len: out_len,
                })
            }
            (
                LayerSpec::Conv2d {
                    in_channels,
                    out_channels,
                    kernel,
                    ..
                },
                Shape::Image {
                    height,
                    width,
                    channels,
                },
            ) => {
                if kernel == 0 || out_channels == 0 {
                    return Err(NnError::InvalidLayer("kernel and channels must be >= 1".into()));
                }
                if channels != in_channels {
                    return mismatch("channel count");
                }
                if height < kernel || width < kernel {
                    return mismatch("image smaller than kernel");
                }
                Ok(Shape::Image {
                    height: height - kernel + 1,
                    width: width - kernel + 1,
                    channels: out_channels,
                })
            }
            (LayerSpec::MaxPool1d { size }, Shape::Seq { channels, len }) => {
                if size == 0 || len < size {
                    return mismatch("pool size");
                }
                Ok(Shape::Seq {
                    channels,
                    len: len / size,
                })
            }
            (
                LayerSpec::MaxPool2d { size },
                Shape::Image {
                    height,
                    width,
                    channels,
                },
            ) => {
                if size == 0 || height < size || width < size {
                    return mismatch("pool size");
                }
                Ok(Shape::Image {
                    height: height / size,
                    width: width / size,
                    channels,
                })
            }
            (LayerSpec::GlobalAvgPool, Shape::Seq { channels, len }) if len > 0 => {
                Ok(Shape::Flat(channels))
            }
            (
                LayerSpec::GlobalAvgPool,
                Shape::Image {
                    height,
                    width,
                    channels,
                },
            ) if height * width > 0 => Ok(Shape::Flat(channels)),
            (
                LayerSpec::FullyConnected {
                    in_features,
                    out_features,
                    ..
                },
                Shape::Flat(n),
            ) => {
                if n != in_features {
                    return mismatch("feature count");
                }
                Ok(Shape::Flat(out_features))
            }
            (LayerSpec::Relu, s) | (LayerSpec::Dropout { .. }, s) => Ok(s),
            (LayerSpec::Softmax, Shape::Flat(n)) => Ok(Shape::Flat(n)),
            (LayerSpec::SingleHeadTransformer { dim }, Shape::Flat(n)) => {
                if n != dim {
                    return mismatch("embedding width");
                }
                Ok(Shape::Flat(dim))
            }
            (
                LayerSpec::Fire1d {
                    in_channels,
                    squeeze,
                    expand1,
                    expand3,
                    ..
                },
                Shape::Seq { channels, len },
            ) => {
                if squeeze == 0 || expand1 == 0 || expand3 == 0 {
                    return Err(NnError::InvalidLayer("fire module with zero filters".into()));
                }
                if channels != in_channels {
                    return mismatch("channel count");
                }
                Ok(Shape::Seq {
                    channels: expand1 + expand3,
                    len,
                })
            }
            (LayerSpec::Reshape { len }, s) => {
                if s.numel() != len {
                    return mismatch("element count");
                }
                Ok(Shape::Flat(len))
            }
            _ => mismatch("incompatible rank"),
        }
    }
}

/// Activation shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Seq { channels: usize, len: usize },
    Image { height: usize, width: usize, channels: usize },
    Flat(usize),
}

impl Shape {
    pub fn numel(&self) -> usize {
        match *self {
            Shape::Seq { channels, len } => channels * len,
            Shape::Image {
                height,
                width,
                channels,
            } => height * width * channels,
            Shape::Flat(n) => n,
        }
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Shape::Seq { channels, len } => write!(f, "{channels}x{len}"),
            Shape::Image {
                height,
                width,
                channels,
            } => write!(f, "{height}x{width}x{channels}"),
            Shape::Flat(n) => write!(f, "{n}"),
        }
    }
}

/// Dense `f32` tensor, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: Vec<usize>, v: f32) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![v; n],
        }
    }
}

/// An activation tensor tagged with its logical shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Activation {
    pub shape: Shape,
    pub data: Vec<f32>,
}

impl Activation {
    pub fn new(shape: Shape, data: Vec<f32>) -> Result<Self, NnError> {
        if shape.numel() != data.len() {
            return Err(NnError::ShapeMismatch(format!(
                "{} values for shape {shape}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    /// A single-channel waveform.
    pub fn waveform(samples: &[f32]) -> Self {
        Self {
            shape: Shape::Seq {
                channels: 1,
                len: samples.len(),
            },
            data: samples.to_vec(),
        }
    }

    /// A `frames x mels` single-channel image.
    pub fn image(height: usize, width: usize, data: Vec<f32>) -> Result<Self, NnError> {
        Self::new(
            Shape::Image {
                height,
                width,
                channels: 1,
            },
            data,
        )
    }
}

/// Ordered layers plus the shape of every boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph {
    pub name: String,
    pub layers: Vec<LayerSpec>,
    /// `shapes[0]` is the input, `shapes[i + 1]` the output of layer `i`.
    pub shapes: Vec<Shape>,
}

impl ModelGraph {
    /// Checks that consecutive shapes compose and the graph ends in a 2-way softmax.
    pub fn build(
        name: impl Into<String>,
        input: Shape,
        layers: Vec<LayerSpec>,
    ) -> Result<Self, NnError> {
        let mut shapes = Vec::with_capacity(layers.len() + 1);
        shapes.push(input);
        for (i, layer) in layers.iter().enumerate() {
            let out = layer
                .output_shape(*shapes.last().unwrap())
                .map_err(|e| match e {
                    NnError::ShapeMismatch(m) => NnError::ShapeMismatch(format!("layer {i}: {m}")),
                    other => other,
                })?;
            shapes.push(out);
        }
        match (layers.last(), shapes.last()) {
            (Some(LayerSpec::Softmax), Some(Shape::Flat(2))) => {}
            _ => {
                return Err(NnError::InvalidGraph(
                    "final layer must be a softmax over 2 classes".into(),
                ))
            }
        }
        Ok(Self {
            name: name.into(),
            layers,
            shapes,
        })
    }

    pub fn input_shape(&self) -> Shape {
        self.shapes[0]
    }

    pub fn output_shape(&self) -> Shape {
        *self.shapes.last().unwrap()
    }

    /// Total weight and bias elements.
    pub fn param_count(&self) -> usize {
        self.layers.iter().map(LayerSpec::param_count).sum()
    }

    /// Layers before the first global average pool.
    pub fn conv_prefix_len(&self) -> Option<usize> {
        self.layers
            .iter()
            .position(|l| matches!(l, LayerSpec::GlobalAvgPool))
    }
}

pub fn param_count(model: &ModelGraph) -> usize {
    model.param_count()
}

/// Tensors of one layer in [`LayerSpec::params`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub tensors: Vec<Tensor>,
}

impl LayerWeights {
    pub fn weight(&self) -> &Tensor {
        &self.tensors[0]
    }

    /// Trailing bias tensor of a single-kernel layer, if the layer has one.
    pub fn bias(&self) -> Option<&Tensor> {
        if self.tensors.len() > 1 {
            self.tensors.last()
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct WeightSet {
    pub layers: BTreeMap<usize, LayerWeights>,
}

impl WeightSet {
    pub fn layer(&self, index: usize) -> Option<&LayerWeights> {
        self.layers.get(&index)
    }

    pub fn layer_mut(&mut self, index: usize) -> Option<&mut LayerWeights> {
        self.layers.get_mut(&index)
    }

    /// All zeros, shaped for `model`.
    pub fn zeros(model: &ModelGraph) -> Self {
        Self::filled(model, 0.0)
    }

    pub fn filled(model: &ModelGraph, v: f32) -> Self {
        let mut layers = BTreeMap::new();
        for (i, l) in model.layers.iter().enumerate() {
            let params = l.params();
            if params.is_empty() {
                continue;
            }
            let tensors = params
                .into_iter()
                .map(|p| Tensor::filled(p.shape, v))
                .collect();
            layers.insert(i, LayerWeights { tensors });
        }
        Self { layers }
    }

    /// Checks presence and shape of every parameter of `model`.
    pub fn validate(&self, model: &ModelGraph) -> Result<(), NnError> {
        for (i, l) in model.layers.iter().enumerate() {
            let params = l.params();
            if params.is_empty() {
                continue;
            }
            let lw = self.layer(i).ok_or_else(|| NnError::MissingWeights {
                layer: i,
                name: l.name().into(),
            })?;
            if lw.tensors.len() != params.len() {
                return Err(NnError::MissingWeights {
                    layer: i,
                    name: format!("{} ({} of {} tensors)", l.name(), lw.tensors.len(), params.len()),
                });
            }
            for (t, p) in lw.tensors.iter().zip(&params) {
                if t.shape != p.shape || t.data.len() != p.numel() {
                    return Err(NnError::ShapeMismatch(format!(
                        "layer {i} {}: tensor {:?} expected {:?}",
                        p.name, t.shape, p.shape
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .values()
            .flat_map(|l| &l.tensors)
            .map(|t| t.data.len())
            .sum()
    }
}

/// Deterministic uniform(-0.1, 0.1) fill from [`SplitMix64`].
///
/// One generator is seeded with `seed` and drawn in layer order, then tensor
/// order, then row-major element order; each draw is `-0.1 + 0.2 * u`.
pub fn seeded_init(model: &ModelGraph, seed: u64) -> WeightSet {
    let mut rng = SplitMix64::new(seed);
    let mut layers = BTreeMap::new();
    for (i, l) in model.layers.iter().enumerate() {
        let params = l.params();
        if params.is_empty() {
            continue;
        }
        let tensors = params
            .into_iter()
            .map(|p| {
                let data = (0..p.numel())
                    .map(|_| rng.uniform(-0.1, 0.1) as f32)
                    .collect();
                Tensor::new(p.shape, data)
            })
            .collect();
        layers.insert(i, LayerWeights { tensors });
    }
    WeightSet { layers }
}
