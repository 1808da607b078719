//! Point-by-point execution of a Conv1D stack followed by global average pooling.
//!
//! Each stage keeps only what its next output needs: a convolution holds the last
//! `K` points of every input channel, a max pool holds one partial group. Points
//! leaving the last stage are folded into `f64` running means, so memory is
//! `O(C * K)` instead of `O(C * N)`.
//!
//! Same-padded convolutions see `(K - 1) / 2` virtual zeros before the first point
//! and after the last, which makes the result match a materialized forward pass
//! at the borders as well.

use serde::Serialize;
use thiserror::Error;

use crate::nn::{
    self, Activation, LayerSpec, LayerWeights, ModelGraph, NnError, Padding, Shape, Tensor, WeightSet,
};
use crate::rng::SplitMix64;

#[derive(Debug, Error)]
pub enum StreamError {
    #[error("layer not supported in a streaming prefix: {0}")]
    UnsupportedLayerInPrefix(String),
    #[error("stream expects {expected} points, got more")]
    StreamOverflow { expected: usize },
    #[error("stream finalized after {pushed} of {expected} points")]
    IncompleteStream { pushed: usize, expected: usize },
    #[error("frame has {found} channels, stream expects {expected}")]
    FrameWidth { expected: usize, found: usize },
    #[error(transparent)]
    Nn(#[from] NnError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StreamStats {
    /// Most activation values held in stage buffers at any one time.
    pub peak_buffered_values: usize,
    pub total_pushed: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StreamOutput {
    /// Channel means of the last stage.
    pub means: Vec<f64>,
    pub stats: StreamStats,
}

#[derive(Debug, Clone)]
struct ConvStage {
    c_in: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    weights: Vec<f32>,
    bias: Option<Vec<f32>>,
    /// `c_in x k`, oldest point first within each channel.
    window: Vec<f32>,
    /// Points in the window that are real or virtual, capped at `k`.
    filled: usize,
    /// Padded positions seen so far, virtual zeros included.
    seen: usize,
    received: usize,
    in_len: usize,
    emitted: usize,
    out_len: usize,
    right_pad: usize,
}

#[derive(Debug, Clone)]
struct PoolStage {
    channels: usize,
    size: usize,
    slots: Vec<f32>,
    count: usize,
    emitted: usize,
    out_len: usize,
}

#[derive(Debug, Clone)]
enum Stage {
    Conv(ConvStage),
    Pool(PoolStage),
    Relu,
    Identity,
}

/// Streaming state for one input stream.
#[derive(Debug, Clone)]
pub struct StreamState {
    stages: Vec<Stage>,
    in_channels: usize,
    input_len: usize,
    pushed: usize,
    pool_len: usize,
    sums: Vec<f64>,
    pooled: usize,
    live: usize,
    peak: usize,
}

fn prefix_input_channels(prefix: &[LayerSpec]) -> Result<usize, StreamError> {
    prefix
        .iter()
        .find_map(|l| match l {
            LayerSpec::Conv1d { in_channels, .. } => Some(*in_channels),
            _ => None,
        })
        .ok_or_else(|| StreamError::UnsupportedLayerInPrefix("prefix needs a Conv1D layer".into()))
}

/// Shapes at every boundary of `prefix` for an input of `input_len` points.
pub fn prefix_shapes(prefix: &[LayerSpec], input_len: usize) -> Result<Vec<Shape>, StreamError> {
    if prefix.is_empty() {
        return Err(StreamError::UnsupportedLayerInPrefix("empty prefix".into()));
    }
    for l in prefix {
        match l {
            LayerSpec::Conv1d { kernel, .. } if kernel % 2 == 0 => {
                return Err(StreamError::UnsupportedLayerInPrefix(format!(
                    "even kernel {kernel}"
                )))
            }
            LayerSpec::Conv1d { .. }
            | LayerSpec::Relu
            | LayerSpec::MaxPool1d { .. }
            | LayerSpec::Dropout { .. } => {}
            other => return Err(StreamError::UnsupportedLayerInPrefix(other.name().into())),
        }
    }
    let mut shapes = vec![Shape::Seq {
        channels: prefix_input_channels(prefix)?,
        len: input_len,
    }];
    for l in prefix {
        shapes.push(l.output_shape(*shapes.last().unwrap())?);
    }
    Ok(shapes)
}

fn seq(shape: Shape) -> (usize, usize) {
    match shape {
        Shape::Seq { channels, len } => (channels, len),
        _ => unreachable!("prefix shapes are sequences"),
    }
}

impl StreamState {
    /// `prefix[i]` takes its parameters from `weights.layer(i)`.
    pub fn new(
        prefix: &[LayerSpec],
        weights: &WeightSet,
        input_len: usize,
    ) -> Result<Self, StreamError> {
        let shapes = prefix_shapes(prefix, input_len)?;
        let mut stages = Vec::with_capacity(prefix.len());
        for (i, layer) in prefix.iter().enumerate() {
            let (_, in_len) = seq(shapes[i]);
            let (_, out_len) = seq(shapes[i + 1]);
            stages.push(match *layer {
                LayerSpec::Conv1d {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    padding,
                    bias,
                } => {
                    let lw = weights.layer(i).ok_or_else(|| NnError::MissingWeights {
                        layer: i,
                        name: layer.name().into(),
                    })?;
                    let w = lw.weight();
                    if w.shape != [out_channels, in_channels, kernel]
                        || (bias && lw.bias().map(|b| b.data.len()) != Some(out_channels))
                    {
                        return Err(NnError::ShapeMismatch(format!("weights of prefix layer {i}")).into());
                    }
                    let half = match padding {
                        Padding::Same => (kernel - 1) / 2,
                        Padding::Valid => 0,
                    };
                    ConvStage {
                        c_in: in_channels,
                        c_out: out_channels,
                        k: kernel,
                        stride,
                        weights: w.data.clone(),
                        bias: if bias { lw.bias().map(|b| b.data.clone()) } else { None },
                        window: vec![0.0; in_channels * kernel],
                        filled: 0,
                        seen: 0,
                        received: 0,
                        in_len,
                        emitted: 0,
                        out_len,
                        right_pad: half,
                    }
                    .with_left_pad(half)
                }
                LayerSpec::MaxPool1d { size } => {
                    let (channels, _) = seq(shapes[i]);
                    Stage::Pool(PoolStage {
                        channels,
                        size,
                        slots: vec![f32::NEG_INFINITY; channels * size],
                        count: 0,
                        emitted: 0,
                        out_len,
                    })
                }
                LayerSpec::Relu => Stage::Relu,
                _ => Stage::Identity,
            });
        }
        let (c_last, pool_len) = seq(*shapes.last().unwrap());
        let mut state = Self {
            stages,
            in_channels: seq(shapes[0]).0,
            input_len,
            pushed: 0,
            pool_len,
            sums: vec![0.0; c_last],
            pooled: 0,
            live: 0,
            peak: 0,
        };
        state.live = state
            .stages
            .iter()
            .map(|s| match s {
                Stage::Conv(c) => c.filled * c.c_in,
                _ => 0,
            })
            .sum();
        state.peak = state.live;
        Ok(state)
    }

    /// State for the layers of `model` before its global average pool.
    pub fn for_model(model: &ModelGraph, weights: &WeightSet) -> Result<Self, StreamError> {
        let gap = model.conv_prefix_len().ok_or_else(|| {
            StreamError::UnsupportedLayerInPrefix("model has no global average pool".into())
        })?;
        let (_, len) = match model.input_shape() {
            Shape::Seq { channels, len } => (channels, len),
            other => {
                return Err(StreamError::UnsupportedLayerInPrefix(format!(
                    "input shape {other}"
                )))
            }
        };
        Self::new(&model.layers[..gap], weights, len)
    }

    pub fn input_len(&self) -> usize {
        self.input_len
    }

    pub fn pushed(&self) -> usize {
        self.pushed
    }

    /// Upper bound on buffered values, fixed at construction.
    pub fn buffer_capacity(&self) -> usize {
        self.stages
            .iter()
            .map(|s| match s {
                Stage::Conv(c) => c.window.len(),
                Stage::Pool(p) => p.slots.len(),
                _ => 0,
            })
            .sum()
    }

    /// Pushes one sample of a single-channel stream.
    pub fn push(&mut self, x: f32) -> Result<(), StreamError> {
        self.push_frame(&[x])
    }

    /// Pushes one point carrying a value for every input channel.
    pub fn push_frame(&mut self, frame: &[f32]) -> Result<(), StreamError> {
        if frame.len() != self.in_channels {
            return Err(StreamError::FrameWidth {
                expected: self.in_channels,
                found: frame.len(),
            });
        }
        if self.pushed == self.input_len {
            return Err(StreamError::StreamOverflow {
                expected: self.input_len,
            });
        }
        self.pushed += 1;
        self.feed(0, frame.to_vec());
        Ok(())
    }

    pub fn push_all(&mut self, samples: &[f32]) -> Result<(), StreamError> {
        samples.iter().try_for_each(|&x| self.push(x))
    }

    fn feed(&mut self, from: usize, frame: Vec<f32>) {
        let mut pending = vec![frame];
        for idx in from..self.stages.len() {
            let mut next = Vec::new();
            for frame in pending {
                match &mut self.stages[idx] {
                    Stage::Conv(c) => {
                        c.received += 1;
                        c.insert(&frame, &mut self.live, &mut self.peak, &mut next);
                        if c.received == c.in_len {
                            while c.emitted < c.out_len && c.right_pad > 0 {
                                c.right_pad -= 1;
                                c.insert(&vec![0.0; c.c_in], &mut self.live, &mut self.peak, &mut next);
                            }
                        }
                    }
                    Stage::Pool(p) => p.insert(&frame, &mut self.live, &mut self.peak, &mut next),
                    Stage::Relu => next.push(frame.into_iter().map(nn::relu).collect()),
                    Stage::Identity => next.push(frame),
                }
            }
            pending = next;
            if pending.is_empty() {
                return;
            }
        }
        let inv = 1.0 / self.pool_len as f64;
        for frame in pending {
            for (s, &v) in self.sums.iter_mut().zip(&frame) {
                *s += v as f64 * inv;
            }
            self.pooled += 1;
        }
    }

    pub fn stats(&self) -> StreamStats {
        StreamStats {
            peak_buffered_values: self.peak,
            total_pushed: self.pushed,
        }
    }

    pub fn finalize(self) -> Result<StreamOutput, StreamError> {
        if self.pushed != self.input_len || self.pooled != self.pool_len {
            return Err(StreamError::IncompleteStream {
                pushed: self.pushed,
                expected: self.input_len,
            });
        }
        Ok(StreamOutput {
            stats: self.stats(),
            means: self.sums,
        })
    }
}

impl ConvStage {
    fn with_left_pad(mut self, half: usize) -> Stage {
        for _ in 0..half {
            self.shift_in(&vec![0.0; self.c_in]);
        }
        Stage::Conv(self)
    }

    fn shift_in(&mut self, frame: &[f32]) {
        let k = self.k;
        for (c, &v) in frame.iter().enumerate() {
            let row = &mut self.window[c * k..(c + 1) * k];
            row.copy_within(1.., 0);
            row[k - 1] = v;
        }
        self.seen += 1;
        self.filled = (self.filled + 1).min(k);
    }

    fn insert(&mut self, frame: &[f32], live: &mut usize, peak: &mut usize, out: &mut Vec<Vec<f32>>) {
        let before = self.filled;
        self.shift_in(frame);
        *live += (self.filled - before) * self.c_in;
        *peak = (*peak).max(*live);
        if self.seen < self.k || !(self.seen - self.k).is_multiple_of(self.stride) || self.emitted == self.out_len {
            return;
        }
        let (k, c_in) = (self.k, self.c_in);
        let y = (0..self.c_out)
            .map(|o| {
                let mut acc = 0.0f32;
                for i in 0..c_in {
                    let w = &self.weights[(o * c_in + i) * k..(o * c_in + i + 1) * k];
                    let x = &self.window[i * k..(i + 1) * k];
                    for t in 0..k {
                        acc += w[t] * x[t];
                    }
                }
                match &self.bias {
                    Some(b) => acc + b[o],
                    None => acc,
                }
            })
            .collect();
        self.emitted += 1;
        out.push(y);
    }
}

impl PoolStage {
    fn insert(&mut self, frame: &[f32], live: &mut usize, peak: &mut usize, out: &mut Vec<Vec<f32>>) {
        if self.emitted == self.out_len {
            return;
        }
        for (c, &v) in frame.iter().enumerate() {
            self.slots[c * self.size + self.count] = v;
        }
        self.count += 1;
        *live += self.channels;
        *peak = (*peak).max(*live);
        if self.count == self.size {
            out.push(
                (0..self.channels)
                    .map(|c| {
                        self.slots[c * self.size..(c + 1) * self.size]
                            .iter()
                            .copied()
                            .fold(f32::NEG_INFINITY, f32::max)
                    })
                    .collect(),
            );
            *live -= self.channels * self.size;
            self.count = 0;
            self.emitted += 1;
        }
    }
}

/// Streams a whole single-channel signal through `prefix` and returns the means.
pub fn stream_means(
    prefix: &[LayerSpec],
    weights: &WeightSet,
    samples: &[f32],
) -> Result<StreamOutput, StreamError> {
    let mut state = StreamState::new(prefix, weights, samples.len())?;
    state.push_all(samples)?;
    state.finalize()
}

/// Runs a time-series model with its convolutional prefix streamed and the
/// remaining layers executed on the pooled vector.
pub fn stream_forward(
    model: &ModelGraph,
    weights: &WeightSet,
    samples: &[f32],
) -> Result<([f32; 2], StreamStats), StreamError> {
    let mut state = StreamState::for_model(model, weights)?;
    state.push_all(samples)?;
    let out = state.finalize()?;
    let gap = model.conv_prefix_len().expect("checked by for_model");
    let pooled = Activation::new(
        model.shapes[gap + 1],
        out.means.iter().map(|&m| m as f32).collect(),
    )?;
    let probs = nn::forward_from(model, weights, gap + 1, pooled)?;
    Ok((probs, out.stats))
}

/// Values a layer-by-layer executor keeps alive at its worst layer: input plus
/// output of that layer, with ReLU and dropout done in place.
pub fn naive_peak_values(prefix: &[LayerSpec], input_len: usize) -> Result<usize, StreamError> {
    let shapes = prefix_shapes(prefix, input_len)?;
    Ok(prefix
        .iter()
        .enumerate()
        .map(|(i, l)| match l {
            LayerSpec::Relu | LayerSpec::Dropout { .. } => shapes[i].numel(),
            _ => shapes[i].numel() + shapes[i + 1].numel(),
        })
        .max()
        .unwrap_or(0))
}

/// Reference: materializes every intermediate channel in full, then averages.
///
/// `input` is channel-major, `channels x n`. Computation is in `f64`.
pub fn naive_conv_avgpool_oracle(
    prefix: &[LayerSpec],
    weights: &WeightSet,
    input: &[f32],
    input_len: usize,
) -> Result<Vec<f64>, StreamError> {
    prefix_shapes(prefix, input_len)?;
    let mut layer: Vec<Vec<f64>> = input
        .chunks(input_len)
        .map(|c| c.iter().map(|&v| v as f64).collect())
        .collect();
    for (i, spec) in prefix.iter().enumerate() {
        layer = match *spec {
            LayerSpec::Conv1d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
                bias,
            } => {
                let lw = weights.layer(i).ok_or_else(|| NnError::MissingWeights {
                    layer: i,
                    name: spec.name().into(),
                })?;
                let w = &lw.weight().data;
                let n = layer[0].len();
                let pad = if padding == Padding::Same { kernel / 2 } else { 0 };
                let mut padded: Vec<Vec<f64>> = Vec::new();
                for ch in &layer {
                    let mut p = vec![0.0; pad];
                    p.extend_from_slice(ch);
                    p.extend(std::iter::repeat_n(0.0, pad));
                    padded.push(p);
                }
                let out_len = if padding == Padding::Same {
                    n.div_ceil(stride)
                } else {
                    (n - kernel) / stride + 1
                };
                let mut out = vec![vec![0.0; out_len]; out_channels];
                for (o, row) in out.iter_mut().enumerate() {
                    for (j, y) in row.iter_mut().enumerate() {
                        let start = j * stride;
                        let mut s = 0.0;
                        for (c, p) in padded.iter().enumerate().take(in_channels) {
                            for t in 0..kernel {
                                s += w[(o * in_channels + c) * kernel + t] as f64 * p[start + t];
                            }
                        }
                        if bias {
                            s += lw.bias().unwrap().data[o] as f64;
                        }
                        *y = s;
                    }
                }
                out
            }
            LayerSpec::Relu => layer
                .into_iter()
                .map(|c| c.into_iter().map(|v| v.max(0.0)).collect())
                .collect(),
            LayerSpec::MaxPool1d { size } => layer
                .into_iter()
                .map(|c| {
                    c.chunks_exact(size)
                        .map(|g| g.iter().copied().fold(f64::NEG_INFINITY, f64::max))
                        .collect()
                })
                .collect(),
            _ => layer,
        };
    }
    Ok(layer
        .iter()
        .map(|c| c.iter().sum::<f64>() / c.len() as f64)
        .collect())
}

/// Tolerance of the streaming-vs-oracle comparison: `|d| <= ABS_TOL + REL_TOL * |oracle|`.
pub const REL_TOL: f64 = 1e-5;
pub const ABS_TOL: f64 = 1e-7;

/// A randomly drawn prefix and input for an equivalence check.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrialConfig {
    pub seed: u64,
    pub input_channels: usize,
    pub input_len: usize,
    pub layers: Vec<LayerSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrialReport {
    pub config: TrialConfig,
    /// `max |d| / (|oracle| + ABS_TOL / REL_TOL)`; at most `REL_TOL` exactly
    /// when every channel is within tolerance.
    pub max_rel_err: f64,
    /// `max |d| / |oracle|` without the absolute floor.
    pub max_plain_rel_err: f64,
    pub max_abs_err: f64,
    pub within_tolerance: bool,
    pub peak_values_stream: usize,
    pub peak_values_naive: usize,
    pub ratio: f64,
}

/// Draws 1 to 3 conv layers (C <= 16, K in {3, 5}, mixed padding and stride),
/// each optionally followed by ReLU, dropout and a 2-wide max pool, over
/// N in 64..=4096 points.
pub fn random_trial(seed: u64) -> (TrialConfig, WeightSet, Vec<f32>) {
    let mut rng = SplitMix64::new(seed);
    loop {
        let input_channels = 1 + rng.below(4) as usize;
        let input_len = 64 + rng.below(4096 - 64 + 1) as usize;
        let mut layers = Vec::new();
        let mut c = input_channels;
        for _ in 0..1 + rng.below(3) {
            let out = 1 + rng.below(16) as usize;
            layers.push(LayerSpec::Conv1d {
                in_channels: c,
                out_channels: out,
                kernel: if rng.bernoulli(0.5) { 3 } else { 5 },
                stride: if rng.bernoulli(0.2) { 2 } else { 1 },
                padding: if rng.bernoulli(0.7) { Padding::Same } else { Padding::Valid },
                bias: rng.bernoulli(0.5),
            });
            c = out;
            if rng.bernoulli(0.5) {
                layers.push(LayerSpec::Relu);
            }
            if rng.bernoulli(0.2) {
                layers.push(LayerSpec::Dropout { rate: 0.1 });
            }
            if rng.bernoulli(0.5) {
                layers.push(LayerSpec::MaxPool1d { size: 2 });
            }
        }
        match prefix_shapes(&layers, input_len) {
            Ok(shapes) if shapes.last().is_some_and(|s| s.numel() > 0) => {}
            _ => continue,
        }
        let mut weights = WeightSet::default();
        for (i, l) in layers.iter().enumerate() {
            let tensors: Vec<Tensor> = l
                .params()
                .into_iter()
                .map(|p| {
                    let data = (0..p.numel()).map(|_| rng.uniform(-0.5, 0.5) as f32).collect();
                    Tensor::new(p.shape, data)
                })
                .collect();
            if !tensors.is_empty() {
                weights.layers.insert(i, LayerWeights { tensors });
            }
        }
        let input = (0..input_channels * input_len)
            .map(|_| rng.uniform(-1.0, 1.0) as f32)
            .collect();
        let config = TrialConfig {
            seed,
            input_channels,
            input_len,
            layers,
        };
        return (config, weights, input);
    }
}

/// Streams `input` (channel-major) through `prefix` and compares with the oracle.
pub fn compare_with_oracle(
    config: TrialConfig,
    weights: &WeightSet,
    input: &[f32],
) -> Result<TrialReport, StreamError> {
    let n = config.input_len;
    let mut state = StreamState::new(&config.layers, weights, n)?;
    let mut frame = vec![0.0f32; config.input_channels];
    for t in 0..n {
        for (ch, v) in frame.iter_mut().enumerate() {
            *v = input[ch * n + t];
        }
        state.push_frame(&frame)?;
    }
    let out = state.finalize()?;
    let oracle = naive_conv_avgpool_oracle(&config.layers, weights, input, n)?;
    let mut max_rel_err = 0.0f64;
    let mut max_plain_rel_err = 0.0f64;
    let mut max_abs_err = 0.0f64;
    let mut within_tolerance = true;
    for (s, o) in out.means.iter().zip(&oracle) {
        let d = (s - o).abs();
        max_abs_err = max_abs_err.max(d);
        max_rel_err = max_rel_err.max(d / (o.abs() + ABS_TOL / REL_TOL));
        if o.abs() > 0.0 {
            max_plain_rel_err = max_plain_rel_err.max(d / o.abs());
        } else if d > 0.0 {
            max_plain_rel_err = f64::INFINITY;
        }
        within_tolerance &= d <= ABS_TOL + REL_TOL * o.abs();
    }
    let peak_values_naive = naive_peak_values(&config.layers, n)?;
    let peak_values_stream = out.stats.peak_buffered_values;
    Ok(TrialReport {
        config,
        max_rel_err,
        max_plain_rel_err,
        max_abs_err,
        within_tolerance,
        peak_values_stream,
        peak_values_naive,
        ratio: peak_values_naive as f64 / peak_values_stream.max(1) as f64,
    })
}

pub fn run_trial(seed: u64) -> Result<TrialReport, StreamError> {
    let (config, weights, input) = random_trial(seed);
    compare_with_oracle(config, &weights, &input)
}
