//! Post-training 8-bit affine quantization.
//!
//! `q = clamp(round(x / s) + z, -128, 127)`, `x' = s * (q - z)`, rounding half
//! away from zero. Scales are per tensor and stored as `f64`.
//!
//! Conv and dense layers run on `i32` accumulators with `i32` biases at scale
//! `s_w * s_x`, then requantize once with `M = s_w * s_x / s_out`. A ReLU right
//! after such a layer is fused into its output range. ReLU, pooling, dropout and
//! reshape keep their input parameters. The transformer block and
//! fire module dequantize, run in float and requantize. The final softmax runs in
//! float on dequantized logits.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{
    self, forward_trace, softmax, Activation, ContainerHeader, Dtype, LayerEntry, LayerSpec,
    LayerWeights, ModelGraph, NnError, Padding, RawContainer, Shape, Tensor, TensorData,
    TensorEntry, WeightSet,
};

#[derive(Debug, Error)]
pub enum QuantError {
    #[error("calibration needs at least one input")]
    EmptyCalibrationSet,
    #[error("model is not calibrated: {0}")]
    NotCalibrated(String),
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// Per-tensor affine parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    pub scale: f64,
    pub zero_point: i32,
}

impl QuantParams {
    pub const IDENTITY: QuantParams = QuantParams {
        scale: 1.0,
        zero_point: 0,
    };

    /// Parameters covering `[min, max]` widened to contain zero.
    /// A constant range (`min == max`) maps to `s = 1, z = 0`.
    pub fn from_range(min: f64, max: f64) -> Self {
        if max == min || !min.is_finite() || !max.is_finite() {
            return Self::IDENTITY;
        }
        let lo = min.min(0.0);
        let hi = max.max(0.0);
        let scale = (hi - lo) / 255.0;
        let zero_point = round_half_away(-128.0 - lo / scale).clamp(-128.0, 127.0) as i32;
        Self { scale, zero_point }
    }

    pub fn quantize(&self, x: f64) -> i8 {
        quantize_value(x, *self)
    }

    pub fn dequantize(&self, q: i8) -> f64 {
        dequantize_value(q, *self)
    }
}

pub fn round_half_away(x: f64) -> f64 {
    x.round()
}

pub fn quantize_value(x: f64, p: QuantParams) -> i8 {
    (round_half_away(x / p.scale) + p.zero_point as f64).clamp(-128.0, 127.0) as i8
}

pub fn dequantize_value(q: i8, p: QuantParams) -> f64 {
    p.scale * (q as i32 - p.zero_point) as f64
}

/// One parameter tensor of a quantized model. Biases stay in float and are
/// converted to `i32` at run time once the input scale is known.
#[derive(Debug, Clone, PartialEq)]
pub enum QTensor {
    I8 {
        shape: Vec<usize>,
        data: Vec<i8>,
        params: QuantParams,
    },
    F32(Tensor),
}

impl QTensor {
    pub fn shape(&self) -> &[usize] {
        match self {
            QTensor::I8 { shape, .. } => shape,
            QTensor::F32(t) => &t.shape,
        }
    }

    pub fn dequantized(&self) -> Tensor {
        match self {
            QTensor::I8 {
                shape,
                data,
                params,
            } => Tensor::new(
                shape.clone(),
                data.iter().map(|&q| params.dequantize(q) as f32).collect(),
            ),
            QTensor::F32(t) => t.clone(),
        }
    }

    fn int8(&self) -> (&[i8], QuantParams) {
        match self {
            QTensor::I8 { data, params, .. } => (data, *params),
            QTensor::F32(_) => unreachable!("weights are always int8"),
        }
    }

    fn float(&self) -> &[f32] {
        match self {
            QTensor::F32(t) => &t.data,
            QTensor::I8 { .. } => unreachable!("biases are always float"),
        }
    }
}

fn is_bias(name: &str) -> bool {
    name == "bias" || name.ends_with(".bias")
}

pub fn quantize_tensor(t: &Tensor) -> QTensor {
    let (min, max) = extrema(&t.data);
    let params = QuantParams::from_range(min, max);
    QTensor::I8 {
        shape: t.shape.clone(),
        data: t.data.iter().map(|&x| params.quantize(x as f64)).collect(),
        params,
    }
}

fn extrema(v: &[f32]) -> (f64, f64) {
    v.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| {
        (lo.min(x as f64), hi.max(x as f64))
    })
}

/// Observed `(min, max)` at every layer boundary over a calibration set.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationRanges {
    pub ranges: Vec<(f64, f64)>,
}

pub fn record_ranges(
    model: &ModelGraph,
    weights: &WeightSet,
    inputs: &[Activation],
) -> Result<CalibrationRanges, QuantError> {
    if inputs.is_empty() {
        return Err(QuantError::EmptyCalibrationSet);
    }
    let mut ranges = vec![(f64::INFINITY, f64::NEG_INFINITY); model.layers.len() + 1];
    for input in inputs {
        let trace = forward_trace(model, weights, input)?;
        for (r, act) in ranges.iter_mut().zip(&trace) {
            let (lo, hi) = extrema(&act.data);
            r.0 = r.0.min(lo);
            r.1 = r.1.max(hi);
        }
    }
    Ok(CalibrationRanges { ranges })
}

fn passes_params(layer: &LayerSpec) -> bool {
    matches!(
        layer,
        LayerSpec::Relu
            | LayerSpec::MaxPool1d { .. }
            | LayerSpec::MaxPool2d { .. }
            | LayerSpec::Dropout { .. }
            | LayerSpec::Reshape { .. }
    )
}

/// Quantized graph: int8 weights plus activation parameters at every boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantModel {
    pub graph: ModelGraph,
    pub layers: BTreeMap<usize, Vec<QTensor>>,
    /// `activations[i]` describes the input of layer `i`; the last entry the output.
    pub activations: Vec<QuantParams>,
}

impl QuantModel {
    pub fn from_ranges(
        model: &ModelGraph,
        weights: &WeightSet,
        ranges: &CalibrationRanges,
    ) -> Result<Self, QuantError> {
        weights.validate(model)?;
        if ranges.ranges.len() != model.layers.len() + 1 {
            return Err(QuantError::NotCalibrated(format!(
                "{} ranges for {} boundaries",
                ranges.ranges.len(),
                model.layers.len() + 1
            )));
        }
        let mut activations = Vec::with_capacity(ranges.ranges.len());
        activations.push(QuantParams::from_range(ranges.ranges[0].0, ranges.ranges[0].1));
        for (i, layer) in model.layers.iter().enumerate() {
            let p = if passes_params(layer) {
                activations[i]
            } else {
                // A following ReLU is fused: the output range starts at zero.
                let fused = matches!(model.layers.get(i + 1), Some(LayerSpec::Relu));
                let (lo, hi) = ranges.ranges[if fused { i + 2 } else { i + 1 }];
                QuantParams::from_range(lo, hi)
            };
            activations.push(p);
        }
        let mut layers = BTreeMap::new();
        for (i, spec) in model.layers.iter().enumerate() {
            let Some(lw) = weights.layer(i) else { continue };
            let tensors = spec
                .params()
                .iter()
                .zip(&lw.tensors)
                .map(|(p, t)| {
                    if is_bias(p.name) {
                        QTensor::F32(t.clone())
                    } else {
                        quantize_tensor(t)
                    }
                })
                .collect();
            layers.insert(i, tensors);
        }
        Ok(Self {
            graph: model.clone(),
            layers,
            activations,
        })
    }

    /// Float weights as the quantized model sees them.
    pub fn dequantized_weights(&self) -> WeightSet {
        WeightSet {
            layers: self
                .layers
                .iter()
                .map(|(&i, ts)| {
                    (
                        i,
                        LayerWeights {
                            tensors: ts.iter().map(QTensor::dequantized).collect(),
                        },
                    )
                })
                .collect(),
        }
    }

    fn check(&self) -> Result<(), QuantError> {
        if self.activations.len() != self.graph.layers.len() + 1 {
            return Err(QuantError::NotCalibrated(format!(
                "{} activation parameters for {} boundaries",
                self.activations.len(),
                self.graph.layers.len() + 1
            )));
        }
        for (i, spec) in self.graph.layers.iter().enumerate() {
            let params = spec.params();
            if params.is_empty() {
                continue;
            }
            let ts = self.layers.get(&i).ok_or_else(|| NnError::MissingWeights {
                layer: i,
                name: spec.name().into(),
            })?;
            if ts.len() != params.len()
                || ts
                    .iter()
                    .zip(&params)
                    .any(|(t, p)| t.shape() != p.shape.as_slice() || is_bias(p.name) != matches!(t, QTensor::F32(_)))
            {
                return Err(NnError::ShapeMismatch(format!("quantized layer {i}")).into());
            }
        }
        Ok(())
    }
}

/// Runs the float model over `inputs` and derives all quantization parameters.
pub fn calibrate(
    model: &ModelGraph,
    weights: &WeightSet,
    inputs: &[Activation],
) -> Result<QuantModel, QuantError> {
    let ranges = record_ranges(model, weights, inputs)?;
    QuantModel::from_ranges(model, weights, &ranges)
}

fn requantize(real_over_scale: f64, m: f64, z: i32) -> i8 {
    (round_half_away(real_over_scale * m) + z as f64).clamp(-128.0, 127.0) as i8
}

fn int_bias(bias: Option<&[f32]>, s: f64, n: usize) -> Vec<i32> {
    match bias {
        Some(b) => b.iter().map(|&x| round_half_away(x as f64 / s) as i32).collect(),
        None => vec![0; n],
    }
}

/// Int8 inference. Returns the class probabilities.
pub fn quantized_forward(qm: &QuantModel, input: &Activation) -> Result<[f32; 2], QuantError> {
    let logits = quantized_logits(qm, input)?;
    let p = softmax(&logits);
    Ok([p[0], p[1]])
}

/// Dequantized input of the final softmax.
pub fn quantized_logits(qm: &QuantModel, input: &Activation) -> Result<Vec<f32>, QuantError> {
    qm.check()?;
    let g = &qm.graph;
    if input.shape != g.input_shape() || input.data.len() != g.input_shape().numel() {
        return Err(NnError::ShapeMismatch(format!(
            "input {} does not match expected {}",
            input.shape,
            g.input_shape()
        ))
        .into());
    }
    let p0 = qm.activations[0];
    let mut q: Vec<i8> = input.data.iter().map(|&x| p0.quantize(x as f64)).collect();
    let last = g.layers.len() - 1;
    for i in 0..last {
        q = quantized_layer(qm, i, &q);
    }
    let pl = qm.activations[last];
    Ok(q.iter().map(|&v| pl.dequantize(v) as f32).collect())
}

fn quantized_layer(qm: &QuantModel, i: usize, x: &[i8]) -> Vec<i8> {
    let g = &qm.graph;
    let (pin, pout) = (qm.activations[i], qm.activations[i + 1]);
    let ts = qm.layers.get(&i).map(Vec::as_slice).unwrap_or(&[]);
    match (g.layers[i], g.shapes[i]) {
        (
            LayerSpec::Conv1d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
                bias,
            },
            Shape::Seq { len, .. },
        ) => {
            let (w, pw) = ts[0].int8();
            let b = int_bias(bias.then(|| ts[1].float()), pw.scale * pin.scale, out_channels);
            let (pad, out_len) = match padding {
                Padding::Same => ((kernel - 1) / 2, len.div_ceil(stride)),
                Padding::Valid => (0, (len - kernel) / stride + 1),
            };
            let m = pw.scale * pin.scale / pout.scale;
            let mut out = Vec::with_capacity(out_channels * out_len);
            for o in 0..out_channels {
                for j in 0..out_len {
                    let centre = (j * stride) as isize - pad as isize;
                    let mut acc = b[o];
                    for c in 0..in_channels {
                        for t in 0..kernel {
                            let pos = centre + t as isize;
                            if pos >= 0 && (pos as usize) < len {
                                let wv = w[(o * in_channels + c) * kernel + t] as i32 - pw.zero_point;
                                let xv = x[c * len + pos as usize] as i32 - pin.zero_point;
                                acc += wv * xv;
                            }
                        }
                    }
                    out.push(requantize(acc as f64, m, pout.zero_point));
                }
            }
            out
        }
        (
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                bias,
            },
            Shape::Image { height, width, .. },
        ) => {
            let (w, pw) = ts[0].int8();
            let b = int_bias(bias.then(|| ts[1].float()), pw.scale * pin.scale, out_channels);
            let (oh, ow) = (height - kernel + 1, width - kernel + 1);
            let m = pw.scale * pin.scale / pout.scale;
            let mut out = Vec::with_capacity(out_channels * oh * ow);
            for o in 0..out_channels {
                for r in 0..oh {
                    for col in 0..ow {
                        let mut acc = b[o];
                        for c in 0..in_channels {
                            for dr in 0..kernel {
                                for dc in 0..kernel {
                                    let wv = w[((o * in_channels + c) * kernel + dr) * kernel + dc]
                                        as i32
                                        - pw.zero_point;
                                    let xv = x[(c * height + r + dr) * width + col + dc] as i32
                                        - pin.zero_point;
                                    acc += wv * xv;
                                }
                            }
                        }
                        out.push(requantize(acc as f64, m, pout.zero_point));
                    }
                }
            }
            out
        }
        (
            LayerSpec::FullyConnected {
                in_features,
                out_features,
                bias,
            },
            _,
        ) => {
            let (w, pw) = ts[0].int8();
            let b = int_bias(bias.then(|| ts[1].float()), pw.scale * pin.scale, out_features);
            let m = pw.scale * pin.scale / pout.scale;
            (0..out_features)
                .map(|o| {
                    let row = &w[o * in_features..(o + 1) * in_features];
                    let acc = row.iter().zip(x).fold(b[o], |acc, (&wv, &xv)| {
                        acc + (wv as i32 - pw.zero_point) * (xv as i32 - pin.zero_point)
                    });
                    requantize(acc as f64, m, pout.zero_point)
                })
                .collect()
        }
        (LayerSpec::Relu, _) => {
            let z = pin.zero_point.clamp(-128, 127) as i8;
            x.iter().map(|&v| v.max(z)).collect()
        }
        (LayerSpec::MaxPool1d { size }, Shape::Seq { channels, len }) => {
            let out_len = len / size;
            let mut out = Vec::with_capacity(channels * out_len);
            for c in 0..channels {
                for j in 0..out_len {
                    let s = c * len + j * size;
                    out.push(*x[s..s + size].iter().max().unwrap());
                }
            }
            out
        }
        (
            LayerSpec::MaxPool2d { size },
            Shape::Image {
                height,
                width,
                channels,
            },
        ) => {
            let (oh, ow) = (height / size, width / size);
            let mut out = Vec::with_capacity(channels * oh * ow);
            for c in 0..channels {
                for r in 0..oh {
                    for col in 0..ow {
                        let mut m = i8::MIN;
                        for dr in 0..size {
                            for dc in 0..size {
                                m = m.max(x[(c * height + r * size + dr) * width + col * size + dc]);
                            }
                        }
                        out.push(m);
                    }
                }
            }
            out
        }
        (LayerSpec::Dropout { .. }, _) => x.to_vec(),
        (LayerSpec::Reshape { .. }, shape) => {
nn::flatten_hwc(x, shape)
        }
        (LayerSpec::GlobalAvgPool, shape) => {
            let channels = match shape {
                Shape::Seq { channels, .. } | Shape::Image { channels, .. } => channels,
                Shape::Flat(n) => n,
            };
            let per = x.len() / channels;
            let m = pin.scale / (pout.scale * per as f64);
            (0..channels)
                .map(|c| {
                    let sum: i64 = x[c * per..(c + 1) * per]
                        .iter()
                        .map(|&v| (v as i32 - pin.zero_point) as i64)
                        .sum();
                    requantize(sum as f64, m, pout.zero_point)
                })
                .collect()
        }
        (layer, shape) => {
            // Float fallback: transformer and fire blocks.
            let data: Vec<f32> = x.iter().map(|&v| pin.dequantize(v) as f32).collect();
            let act = Activation { shape, data };
            let single = ModelGraph {
                name: String::new(),
                layers: vec![layer],
                shapes: vec![shape, g.shapes[i + 1]],
            };
            let mut ws = WeightSet::default();
            ws.layers.insert(
                0,
                LayerWeights {
                    tensors: ts.iter().map(QTensor::dequantized).collect(),
                },
            );
            let y = nn::forward_layer(&single, &ws, 0, &act).expect("shapes validated at build");
            y.data.iter().map(|&v| pout.quantize(v as f64)).collect()
        }
    }
}

/// Int8 container: weights as `i8` with per-tensor parameters, biases as `f32`,
/// activation parameters in the header.
pub fn quant_container(qm: &QuantModel) -> RawContainer {
    let g = &qm.graph;
    let mut layers = Vec::with_capacity(g.layers.len());
    let mut data = Vec::with_capacity(g.layers.len());
    for (i, spec) in g.layers.iter().enumerate() {
        let mut entries = Vec::new();
        let mut blobs = Vec::new();
        if let Some(ts) = qm.layers.get(&i) {
            for (p, t) in spec.params().iter().zip(ts) {
                let (blob, quant) = match t {
                    QTensor::I8 { data, params, .. } => (TensorData::I8(data.clone()), Some(*params)),
                    QTensor::F32(t) => (TensorData::F32(t.data.clone()), None),
                };
                entries.push(TensorEntry {
                    name: p.name.into(),
                    shape: p.shape.clone(),
                    dtype: blob.dtype(),
                    offset: 0,
                    len: 0,
                    quant,
                });
                blobs.push(blob);
            }
        }
        layers.push(LayerEntry {
            index: i,
            spec: *spec,
            tensors: entries,
        });
        data.push(blobs);
    }
    RawContainer {
        header: ContainerHeader {
            model: g.name.clone(),
            input_shape: g.input_shape(),
            layers,
            activations: Some(qm.activations.clone()),
        },
        data,
    }
}

pub fn quant_model_from_container(raw: &RawContainer) -> Result<QuantModel, QuantError> {
    let graph = raw.header.graph()?;
    raw.header.check_against(&graph)?;
    let activations = raw
        .header
        .activations
        .clone()
        .ok_or_else(|| QuantError::NotCalibrated("container has no activation parameters".into()))?;
    let mut layers = BTreeMap::new();
    for (entry, blobs) in raw.header.layers.iter().zip(&raw.data) {
        if blobs.is_empty() {
            continue;
        }
        let mut ts = Vec::with_capacity(blobs.len());
        for (t, blob) in entry.tensors.iter().zip(blobs) {
            ts.push(match (blob, t.quant) {
                (TensorData::I8(v), Some(params)) => QTensor::I8 {
                    shape: t.shape.clone(),
                    data: v.clone(),
                    params,
                },
                (TensorData::I8(_), None) => {
                    return Err(NnError::Malformed(format!("int8 tensor {} lacks parameters", t.name)).into())
                }
                (TensorData::F32(v), _) if is_bias(&t.name) => {
                    QTensor::F32(Tensor::new(t.shape.clone(), v.clone()))
                }
                (TensorData::F32(_), _) => {
                    return Err(NnError::DtypeMismatch {
                        expected: Dtype::I8,
                        found: Dtype::F32,
                    }
                    .into())
                }
            });
        }
        layers.insert(entry.index, ts);
    }
    let qm = QuantModel {
        graph,
        layers,
        activations,
    };
    qm.check()?;
    Ok(qm)
}

pub fn save_quantized(qm: &QuantModel, path: impl AsRef<Path>) -> Result<usize, QuantError> {
    let raw = quant_container(qm);
    Ok(nn::write_container(BufWriter::new(File::create(path).map_err(NnError::Io)?), &raw)?)
}

pub fn load_quantized(path: impl AsRef<Path>) -> Result<QuantModel, QuantError> {
    let raw = nn::read_container(BufReader::new(File::open(path).map_err(NnError::Io)?))?;
    quant_model_from_container(&raw)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{build_cnn_mel, build_cnn_time, build_transformer_time, forward, seeded_init};
    use crate::rng::SplitMix64;

    fn seeded_waveform(seed: u64, n: usize) -> Activation {
        let mut rng = SplitMix64::new(seed);
        Activation::waveform(&(0..n).map(|_| rng.uniform(-1.0, 1.0) as f32).collect::<Vec<_>>())
    }

    #[test]
    fn scalar_examples() {
        let p = QuantParams::IDENTITY;
        assert_eq!(quantize_value(3.4, p), 3);
        assert_eq!(dequantize_value(3, p), 3.0);
        let p = QuantParams {
            scale: 0.5,
            zero_point: 10,
        };
        assert_eq!(quantize_value(-100.0, p), -128);
        assert_eq!(quantize_value(2.5, QuantParams::IDENTITY), 3);
        assert_eq!(quantize_value(-2.5, QuantParams::IDENTITY), -3);
    }

    #[test]
    fn range_examples() {
        let p = QuantParams::from_range(0.0, 255.0);
        assert_eq!(p.scale, 1.0);
        assert_eq!(p.zero_point, -128);
        assert_eq!(QuantParams::from_range(0.7, 0.7), QuantParams::IDENTITY);
    }

    #[test]
    fn roundtrip_within_half_step() {
        let mut rng = SplitMix64::new(11);
        let p = QuantParams::from_range(-0.37, 1.9);
        let (lo, hi) = (p.dequantize(-128), p.dequantize(127));
        for _ in 0..10_000 {
            let x = rng.uniform(lo, hi);
            let err = (x - p.dequantize(p.quantize(x))).abs();
            assert!(err <= p.scale / 2.0 * (1.0 + 1e-12), "{x}: {err}");
        }
    }

    #[test]
    fn dequantize_then_quantize_is_identity() {
        let p = QuantParams::from_range(-3.0, 0.25);
        for q in -128..=127i32 {
            assert_eq!(p.quantize(p.dequantize(q as i8)) as i32, q);
        }
    }

    #[test]
    fn weights_within_half_step() {
        let m = build_cnn_time();
        let w = seeded_init(&m, 5);
        let qm = QuantModel::from_ranges(&m, &w, &record_ranges(&m, &w, &[seeded_waveform(1, 48_000)]).unwrap()).unwrap();
        for (i, ts) in &qm.layers {
            for (q, f) in ts.iter().zip(&w.layer(*i).unwrap().tensors) {
                if let QTensor::I8 { params, .. } = q {
                    for (a, b) in q.dequantized().data.iter().zip(&f.data) {
                        assert!(((a - b).abs() as f64) <= params.scale / 2.0 + 1e-7);
                    }
                }
            }
        }
    }

    #[test]
    fn empty_calibration_rejected() {
        let m = build_cnn_time();
        let w = seeded_init(&m, 1);
        assert!(matches!(calibrate(&m, &w, &[]), Err(QuantError::EmptyCalibrationSet)));
    }

    #[test]
    fn zero_weights_give_even_split() {
        for m in [build_cnn_time(), build_transformer_time()] {
            let w = WeightSet::zeros(&m);
            let x = seeded_waveform(3, 48_000);
            let qm = calibrate(&m, &w, std::slice::from_ref(&x)).unwrap();
            assert_eq!(quantized_forward(&qm, &x).unwrap(), [0.5, 0.5]);
        }
    }

    #[test]
    fn uncalibrated_model_rejected() {
        let m = build_cnn_time();
        let w = seeded_init(&m, 1);
        let x = seeded_waveform(2, 48_000);
        let mut qm = calibrate(&m, &w, std::slice::from_ref(&x)).unwrap();
        qm.activations.pop();
        assert!(matches!(quantized_forward(&qm, &x), Err(QuantError::NotCalibrated(_))));
    }

    #[test]
    fn calibration_is_deterministic() {
        let m = build_cnn_time();
        let w = seeded_init(&m, 8);
        let xs: Vec<_> = (0..2).map(|s| seeded_waveform(s, 48_000)).collect();
        let a = calibrate(&m, &w, &xs).unwrap();
        let b = calibrate(&m, &w, &xs).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn container_roundtrip_and_size() {
        let m = build_cnn_time();
        let w = seeded_init(&m, 4);
        let x = seeded_waveform(9, 48_000);
        let qm = calibrate(&m, &w, std::slice::from_ref(&x)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("q.tchw");
        save_quantized(&qm, &path).unwrap();
        let back = load_quantized(&path).unwrap();
        assert_eq!(back, qm);
        assert_eq!(quantized_forward(&back, &x).unwrap(), quantized_forward(&qm, &x).unwrap());

        let qp = quant_container(&qm).payload_len();
        let fp = nn::float_container(&m, &w).unwrap().payload_len();
        let overhead = 8 * m.layers.iter().map(|l| l.params().len()).sum::<usize>();
        assert!(qp <= fp / 4 + overhead, "{qp} vs {fp}");
    }

    #[test]
    fn cnn_mel_runs_quantized() {
        let m = build_cnn_mel();
        let w = seeded_init(&m, 2);
        let mut rng = SplitMix64::new(6);
        let data: Vec<f32> = (0..184 * 80).map(|_| rng.uniform(-6.0, 1.0) as f32).collect();
        let x = Activation::image(184, 80, data).unwrap();
        let qm = calibrate(&m, &w, std::slice::from_ref(&x)).unwrap();
        let q = quantized_forward(&qm, &x).unwrap();
        let f = forward(&m, &w, &x).unwrap();
        assert!((q[0] + q[1] - 1.0).abs() < 1e-6);
        assert!((q[1] - f[1]).abs() < 0.05, "{q:?} vs {f:?}");
    }

    #[test]
    fn transformer_uses_float_fallback() {
        let m = build_transformer_time();
        let w = seeded_init(&m, 12);
        let x = seeded_waveform(13, 48_000);
        let qm = calibrate(&m, &w, std::slice::from_ref(&x)).unwrap();
        let q = quantized_forward(&qm, &x).unwrap();
        let f = forward(&m, &w, &x).unwrap();
        assert!((q[1] - f[1]).abs() < 0.02, "{q:?} vs {f:?}");
    }
}
