//! `TCHW` weight container.
//!
//! ```text
//! "TCHW" | version u32 | header_len u32 | JSON header | zero pad to 8
//! payload: tensor blobs, each 8-byte aligned, offsets relative to payload start
//! CRC32 of payload (u32)
//! ```
//!
//! All integers are little-endian. The header lists every layer of the graph so
//! a container can be checked against, or rebuilt into, a [`ModelGraph`].

use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{LayerSpec, LayerWeights, ModelGraph, NnError, Shape, Tensor, WeightSet};
use crate::quant::QuantParams;

pub const MAGIC: [u8; 4] = *b"TCHW";
pub const FORMAT_VERSION: u32 = 1;
const ALIGN: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    I8,
}

impl Dtype {
    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::I8 => 1,
        }
    }
}

impl fmt::Display for Dtype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Dtype::F32 => "f32",
            Dtype::I8 => "i8",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: Dtype,
    /// Byte offset from the payload start.
    pub offset: usize,
    /// Byte length.
    pub len: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quant: Option<QuantParams>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerEntry {
    pub index: usize,
    #[serde(flatten)]
    pub spec: LayerSpec,
    #[serde(default)]
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContainerHeader {
    pub model: String,
    pub input_shape: Shape,
    pub layers: Vec<LayerEntry>,
    /// Activation parameters at every layer boundary of a quantized model.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub activations: Option<Vec<QuantParams>>,
}

impl ContainerHeader {
    /// Rebuilds the graph the container was written from.
    pub fn graph(&self) -> Result<ModelGraph, NnError> {
        for (i, l) in self.layers.iter().enumerate() {
            if l.index != i {
                return Err(NnError::Malformed(format!(
                    "layer entry {i} carries index {}",
                    l.index
                )));
            }
        }
        ModelGraph::build(
            self.model.clone(),
            self.input_shape,
            self.layers.iter().map(|l| l.spec).collect(),
        )
    }

    /// Checks the header describes exactly `model`.
    pub fn check_against(&self, model: &ModelGraph) -> Result<(), NnError> {
        if self.layers.len() != model.layers.len() {
            return Err(NnError::ShapeMismatch(format!(
                "container has {} layers, graph has {}",
                self.layers.len(),
                model.layers.len()
            )));
        }
        if self.input_shape != model.input_shape() {
            return Err(NnError::ShapeMismatch(format!(
                "container input {} vs graph input {}",
                self.input_shape,
                model.input_shape()
            )));
        }
        for (i, (entry, spec)) in self.layers.iter().zip(&model.layers).enumerate() {
            if entry.index != i || entry.spec != *spec {
                return Err(NnError::ShapeMismatch(format!(
                    "layer {i}: container declares {:?}, graph has {:?}",
                    entry.spec, spec
                )));
            }
            let params = spec.params();
            if entry.tensors.len() != params.len() {
                return Err(NnError::ShapeMismatch(format!(
                    "layer {i}: {} tensors, expected {}",
                    entry.tensors.len(),
                    params.len()
                )));
            }
            for (t, p) in entry.tensors.iter().zip(&params) {
                if t.shape != p.shape {
                    return Err(NnError::ShapeMismatch(format!(
                        "layer {i} {}: shape {:?}, expected {:?}",
                        p.name, t.shape, p.shape
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    I8(Vec<i8>),
}

impl TensorData {
    pub fn dtype(&self) -> Dtype {
        match self {
            TensorData::F32(_) => Dtype::F32,
            TensorData::I8(_) => Dtype::I8,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::I8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn write_bytes(&self, out: &mut Vec<u8>) {
        match self {
            TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::I8(v) => out.extend(v.iter().map(|&x| x as u8)),
        }
    }

    fn from_bytes(dtype: Dtype, bytes: &[u8]) -> Self {
        match dtype {
            Dtype::F32 => TensorData::F32(
                bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect(),
            ),
            Dtype::I8 => TensorData::I8(bytes.iter().map(|&b| b as i8).collect()),
        }
    }
}

/// Header plus tensor data; `data[i][j]` belongs to `header.layers[i].tensors[j]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RawContainer {
    pub header: ContainerHeader,
    pub data: Vec<Vec<TensorData>>,
}

impl RawContainer {
    /// Payload size in bytes, alignment padding included.
    pub fn payload_len(&self) -> usize {
        self.data
            .iter()
            .flatten()
            .map(|t| padded(t.len() * t.dtype().width()))
            .sum()
    }
}

fn padded(n: usize) -> usize {
    n.div_ceil(ALIGN) * ALIGN
}

/// Serializes `raw`, recomputing dtypes, offsets and lengths from the data.
/// Returns the number of bytes written.
pub fn write_container<W: Write>(mut w: W, raw: &RawContainer) -> Result<usize, NnError> {
    if raw.data.len() != raw.header.layers.len() {
        return Err(NnError::Malformed("data does not match layer entries".into()));
    }
    let mut header = raw.header.clone();
    let mut payload = Vec::new();
    for (entry, blobs) in header.layers.iter_mut().zip(&raw.data) {
        if entry.tensors.len() != blobs.len() {
            return Err(NnError::Malformed(format!(
                "layer {} lists {} tensors but has {} blobs",
                entry.index,
                entry.tensors.len(),
                blobs.len()
            )));
        }
        for (t, blob) in entry.tensors.iter_mut().zip(blobs) {
            if t.shape.iter().product::<usize>() != blob.len() {
                return Err(NnError::ShapeMismatch(format!(
                    "tensor {} has {} values for shape {:?}",
                    t.name,
                    blob.len(),
                    t.shape
                )));
            }
            t.dtype = blob.dtype();
            t.offset = payload.len();
            blob.write_bytes(&mut payload);
            t.len = payload.len() - t.offset;
            payload.resize(padded(payload.len()), 0);
        }
    }
    let json = serde_json::to_vec(&header)
        .map_err(|e| NnError::Malformed(format!("header encoding: {e}")))?;
    let mut out = Vec::with_capacity(16 + json.len() + payload.len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.resize(padded(out.len()), 0);
    out.extend_from_slice(&payload);
    out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
    w.write_all(&out)?;
    w.flush()?;
    Ok(out.len())
}

pub fn read_container<R: Read>(mut r: R) -> Result<RawContainer, NnError> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() < 4 || bytes[..4] != MAGIC {
        return Err(NnError::MagicMismatch);
    }
    if bytes.len() < 12 {
        return Err(NnError::Malformed("truncated preamble".into()));
    }
    let u32_at = |at: usize| u32::from_le_bytes([bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]]);
    let version = u32_at(4);
    if version != FORMAT_VERSION {
        return Err(NnError::VersionUnsupported(version));
    }
    let header_len = u32_at(8) as usize;
    let payload_start = padded(12 + header_len);
    if bytes.len() < payload_start + 4 {
        return Err(NnError::Malformed("truncated header".into()));
    }
    let payload_end = bytes.len() - 4;
    let payload = &bytes[payload_start..payload_end];
    if crc32fast::hash(payload) != u32_at(payload_end) {
        return Err(NnError::ChecksumFailure);
    }
    let header: ContainerHeader = serde_json::from_slice(&bytes[12..12 + header_len])
        .map_err(|e| NnError::Malformed(format!("header: {e}")))?;
    let mut data = Vec::with_capacity(header.layers.len());
    for entry in &header.layers {
        let mut blobs = Vec::with_capacity(entry.tensors.len());
        for t in &entry.tensors {
            let numel: usize = t.shape.iter().product();
            if t.len != numel * t.dtype.width() || t.offset % ALIGN != 0 {
                return Err(NnError::Malformed(format!("tensor {} has a bad extent", t.name)));
            }
            let blob = payload
                .get(t.offset..t.offset + t.len)
                .ok_or_else(|| NnError::Malformed(format!("tensor {} outside payload", t.name)))?;
            blobs.push(TensorData::from_bytes(t.dtype, blob));
        }
        data.push(blobs);
    }
    Ok(RawContainer { header, data })
}

/// Float container for `weights`, with every layer of `model` listed.
pub fn float_container(model: &ModelGraph, weights: &WeightSet) -> Result<RawContainer, NnError> {
    weights.validate(model)?;
    let mut layers = Vec::with_capacity(model.layers.len());
    let mut data = Vec::with_capacity(model.layers.len());
    for (i, spec) in model.layers.iter().enumerate() {
        let params = spec.params();
        let (tensors, blobs) = match weights.layer(i) {
            Some(lw) if !params.is_empty() => params
                .iter()
                .zip(&lw.tensors)
                .map(|(p, t)| {
                    (
                        TensorEntry {
                            name: p.name.into(),
                            shape: p.shape.clone(),
                            dtype: Dtype::F32,
                            offset: 0,
                            len: 0,
                            quant: None,
                        },
                        TensorData::F32(t.data.clone()),
                    )
                })
                .unzip(),
            _ => (Vec::new(), Vec::new()),
        };
        layers.push(LayerEntry {
            index: i,
            spec: *spec,
            tensors,
        });
        data.push(blobs);
    }
    Ok(RawContainer {
        header: ContainerHeader {
            model: model.name.clone(),
            input_shape: model.input_shape(),
            layers,
            activations: None,
        },
        data,
    })
}

/// Float weights out of a container already checked against its graph.
pub fn weights_from_container(raw: &RawContainer) -> Result<WeightSet, NnError> {
    let mut ws = WeightSet::default();
    for (entry, blobs) in raw.header.layers.iter().zip(&raw.data) {
        if blobs.is_empty() {
            continue;
        }
        let mut tensors = Vec::with_capacity(blobs.len());
        for (t, blob) in entry.tensors.iter().zip(blobs) {
            match blob {
                TensorData::F32(v) => tensors.push(Tensor::new(t.shape.clone(), v.clone())),
                TensorData::I8(_) => {
                    return Err(NnError::DtypeMismatch {
                        expected: Dtype::F32,
                        found: Dtype::I8,
                    })
                }
            }
        }
        ws.layers.insert(entry.index, LayerWeights { tensors });
    }
    Ok(ws)
}

pub fn save_weights(
    model: &ModelGraph,
    weights: &WeightSet,
    path: impl AsRef<Path>,
) -> Result<usize, NnError> {
    let raw = float_container(model, weights)?;
    write_container(BufWriter::new(File::create(path)?), &raw)
}

pub fn load_weights(model: &ModelGraph, path: impl AsRef<Path>) -> Result<WeightSet, NnError> {
    let raw = read_container(BufReader::new(File::open(path)?))?;
    raw.header.check_against(model)?;
    let ws = weights_from_container(&raw)?;
    ws.validate(model)?;
    Ok(ws)
}

/// Loads a float container together with the graph described in its header.
pub fn load_model(path: impl AsRef<Path>) -> Result<(ModelGraph, WeightSet), NnError> {
    let raw = read_container(BufReader::new(File::open(path)?))?;
    let graph = raw.header.graph()?;
    raw.header.check_against(&graph)?;
    let ws = weights_from_container(&raw)?;
    ws.validate(&graph)?;
    Ok((graph, ws))
}
