use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{LayerSpec, ModelGraph, NnError, Shape};
use crate::dsp::N_MELS;

/// Samples in one 3 s segment at 16 kHz.
pub const INPUT_SAMPLES: usize = 48_000;
/// Index of the Target class in every model output.
pub const TARGET_CLASS: usize = 1;
/// STFT frames of one segment.
pub const MEL_FRAMES: usize = 184;

/// Filter counts of the lightweight fire module.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FireCounts {
    pub squeeze: usize,
    pub expand1: usize,
    pub expand3: usize,
}

/// `squeeze = 3 * floor(0.3 x)`, `expand = 4 * floor(0.3 x)`, in exact integers.
pub fn fire1d_counts(x: usize) -> FireCounts {
    let r = 3 * x / 10;
    FireCounts {
        squeeze: 3 * r,
        expand1: 4 * r,
        expand3: 4 * r,
    }
}

pub fn build_cnn_time() -> ModelGraph {
    ModelGraph::build(
        "cnn_time",
        Shape::Seq {
            channels: 1,
            len: INPUT_SAMPLES,
        },
        vec![
            LayerSpec::conv1d(1, 4, 3),
            LayerSpec::Relu,
            LayerSpec::MaxPool1d { size: 2 },
            LayerSpec::conv1d(4, 8, 3),
            LayerSpec::MaxPool1d { size: 2 },
            LayerSpec::Dropout { rate: 0.25 },
            LayerSpec::GlobalAvgPool,
            LayerSpec::dense(8, 64, false),
            LayerSpec::Relu,
            LayerSpec::dense(64, 2, false),
            LayerSpec::Softmax,
        ],
    )
    .expect("cnn_time graph is consistent")
}

pub fn build_transformer_time() -> ModelGraph {
    ModelGraph::build(
        "transformer_time",
        Shape::Seq {
            channels: 1,
            len: INPUT_SAMPLES,
        },
        vec![
            LayerSpec::conv1d(1, 16, 3),
            LayerSpec::Relu,
            LayerSpec::MaxPool1d { size: 2 },
            LayerSpec::Dropout { rate: 0.25 },
            LayerSpec::GlobalAvgPool,
            LayerSpec::SingleHeadTransformer { dim: 16 },
            LayerSpec::dense(16, 2, false),
            LayerSpec::Softmax,
        ],
    )
    .expect("transformer_time graph is consistent")
}

pub fn build_cnn_mel() -> ModelGraph {
    let conv = |i, o| LayerSpec::Conv2d {
        in_channels: i,
        out_channels: o,
        kernel: 3,
        bias: true,
    };
    ModelGraph::build(
        "cnn_mel",
        Shape::Image {
            height: MEL_FRAMES,
            width: N_MELS,
            channels: 1,
        },
        vec![
            conv(1, 4),
            LayerSpec::Relu,
            LayerSpec::MaxPool2d { size: 2 },
            conv(4, 4),
            LayerSpec::Relu,
            LayerSpec::MaxPool2d { size: 2 },
            LayerSpec::Reshape { len: 3168 },
            LayerSpec::dense(3168, 8, true),
            LayerSpec::Relu,
            LayerSpec::dense(8, 2, true),
            LayerSpec::Softmax,
        ],
    )
    .expect("cnn_mel graph is consistent")
}

/// What a model consumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputKind {
    /// Raw 16 kHz samples.
    Waveform,
    /// `184 x 80` log-mel spectrogram.
    LogMel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelArch {
    CnnTime,
    TransformerTime,
    CnnMel,
}

impl ModelArch {
    pub const ALL: [ModelArch; 3] = [
        ModelArch::CnnTime,
        ModelArch::TransformerTime,
        ModelArch::CnnMel,
    ];

    pub fn build(self) -> ModelGraph {
        match self {
            ModelArch::CnnTime => build_cnn_time(),
            ModelArch::TransformerTime => build_transformer_time(),
            ModelArch::CnnMel => build_cnn_mel(),
        }
    }

    pub fn input_kind(self) -> InputKind {
        match self {
            ModelArch::CnnMel => InputKind::LogMel,
            _ => InputKind::Waveform,
        }
    }

    /// Decision threshold tuned for F2 on the validation split.
    pub fn default_threshold(self) -> f64 {
        match self {
            ModelArch::CnnTime => 0.23,
            ModelArch::TransformerTime => 0.27,
            ModelArch::CnnMel => 0.27,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ModelArch::CnnTime => "cnn-time",
            ModelArch::TransformerTime => "transformer-time",
            ModelArch::CnnMel => "cnn-mel",
        }
    }

    /// Recovers the architecture from a graph name.
    pub fn from_graph_name(name: &str) -> Option<Self> {
        match name {
            "cnn_time" => Some(ModelArch::CnnTime),
            "transformer_time" => Some(ModelArch::TransformerTime),
            "cnn_mel" => Some(ModelArch::CnnMel),
            _ => None,
        }
    }
}

impl fmt::Display for ModelArch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelArch {
    type Err = NnError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "cnn-time" => Ok(ModelArch::CnnTime),
            "transformer-time" => Ok(ModelArch::TransformerTime),
            "cnn-mel" => Ok(ModelArch::CnnMel),
            other => Err(NnError::InvalidGraph(format!("unknown model {other:?}"))),
        }
    }
}
