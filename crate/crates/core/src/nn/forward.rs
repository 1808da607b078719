use super::{Activation, LayerSpec, LayerWeights, ModelGraph, NnError, Padding, Shape, WeightSet};

pub fn relu(x: f32) -> f32 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

/// Numerically stable softmax, evaluated in `f64`.
pub fn softmax(logits: &[f32]) -> Vec<f32> {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let exps: Vec<f64> = logits.iter().map(|&l| (l as f64 - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| (e / sum) as f32).collect()
}

/// Runs the whole graph and returns the class probabilities.
pub fn forward(
    model: &ModelGraph,
    weights: &WeightSet,
    input: &Activation,
) -> Result<[f32; 2], NnError> {
    forward_from(model, weights, 0, input.clone())
}

/// Runs layers `start..` on an activation already shaped like `model.shapes[start]`.
pub fn forward_from(
    model: &ModelGraph,
    weights: &WeightSet,
    start: usize,
    input: Activation,
) -> Result<[f32; 2], NnError> {
    let mut act = check_input(model, start, input)?;
    for i in start..model.layers.len() {
        act = apply_layer(model, weights, i, &act)?;
    }
    Ok(probabilities(&act))
}

/// Every boundary activation: input first, probabilities last.
pub fn forward_trace(
    model: &ModelGraph,
    weights: &WeightSet,
    input: &Activation,
) -> Result<Vec<Activation>, NnError> {
    let mut acts = vec![check_input(model, 0, input.clone())?];
    for i in 0..model.layers.len() {
        let next = apply_layer(model, weights, i, acts.last().unwrap())?;
        acts.push(next);
    }
    Ok(acts)
}

fn probabilities(act: &Activation) -> [f32; 2] {
    [act.data[0], act.data[1]]
}

fn check_input(model: &ModelGraph, start: usize, input: Activation) -> Result<Activation, NnError> {
    let expected = *model
        .shapes
        .get(start)
        .ok_or_else(|| NnError::InvalidGraph(format!("no layer {start}")))?;
    if input.shape != expected || input.data.len() != expected.numel() {
        return Err(NnError::ShapeMismatch(format!(
            "input {} does not match expected {expected}",
            input.shape
        )));
    }
    Ok(input)
}

fn layer_weights<'a>(
    model: &ModelGraph,
    weights: &'a WeightSet,
    i: usize,
) -> Result<&'a LayerWeights, NnError> {
    let lw = weights.layer(i).ok_or_else(|| NnError::MissingWeights {
        layer: i,
        name: model.layers[i].name().into(),
    })?;
    let params = model.layers[i].params();
    if lw.tensors.len() != params.len()
        || lw
            .tensors
            .iter()
            .zip(&params)
            .any(|(t, p)| t.shape != p.shape || t.data.len() != p.numel())
    {
        return Err(NnError::ShapeMismatch(format!(
            "weights of layer {i} do not match {}",
            model.layers[i].name()
        )));
    }
    Ok(lw)
}

pub(crate) fn apply_layer(
    model: &ModelGraph,
    weights: &WeightSet,
    i: usize,
    act: &Activation,
) -> Result<Activation, NnError> {
    let layer = model.layers[i];
    let out_shape = model.shapes[i + 1];
    let data = match (layer, act.shape) {
        (
            LayerSpec::Conv1d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
                ..
            },
            Shape::Seq { len, .. },
        ) => {
            let lw = layer_weights(model, weights, i)?;
            conv1d(
                &act.data,
                in_channels,
                len,
                &lw.weight().data,
                lw.bias().map(|b| b.data.as_slice()),
                out_channels,
                kernel,
                stride,
                padding,
            )
        }
        (
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            },
            Shape::Image { height, width, .. },
        ) => {
            let lw = layer_weights(model, weights, i)?;
            conv2d(
                &act.data,
                in_channels,
                height,
                width,
                &lw.weight().data,
                lw.bias().map(|b| b.data.as_slice()),
                out_channels,
                kernel,
            )
        }
        (LayerSpec::MaxPool1d { size }, Shape::Seq { channels, len }) => {
            max_pool1d(&act.data, channels, len, size)
        }
        (
            LayerSpec::MaxPool2d { size },
            Shape::Image {
                height,
                width,
                channels,
            },
        ) => max_pool2d(&act.data, channels, height, width, size),
        (LayerSpec::GlobalAvgPool, s) => {
            let channels = match s {
                Shape::Seq { channels, .. } | Shape::Image { channels, .. } => channels,
                Shape::Flat(_) => unreachable!("rejected at build"),
            };
            global_avg_pool(&act.data, channels)
        }
        (
            LayerSpec::FullyConnected {
                in_features,
                out_features,
                ..
            },
            _,
        ) => {
            let lw = layer_weights(model, weights, i)?;
            dense(
                &act.data,
                &lw.weight().data,
                lw.bias().map(|b| b.data.as_slice()),
                in_features,
                out_features,
            )
        }
        (LayerSpec::Relu, _) => act.data.iter().map(|&x| relu(x)).collect(),
        (LayerSpec::Dropout { .. }, _) => act.data.clone(),
        (LayerSpec::Softmax, _) => softmax(&act.data),
        (LayerSpec::SingleHeadTransformer { dim }, _) => {
            let lw = layer_weights(model, weights, i)?;
            let t: Vec<&[f32]> = lw.tensors.iter().map(|t| t.data.as_slice()).collect();
            transformer_block(&act.data, dim, [t[0], t[1], t[2], t[3], t[4], t[5]])
        }
        (
            LayerSpec::Fire1d {
                in_channels,
                squeeze,
                expand1,
                expand3,
                bias,
            },
            Shape::Seq { len, .. },
        ) => {
            let lw = layer_weights(model, weights, i)?;
            let t: Vec<&[f32]> = lw.tensors.iter().map(|t| t.data.as_slice()).collect();
            let (sw, sb, e1w, e1b, e3w, e3b) = if bias {
                (t[0], Some(t[1]), t[2], Some(t[3]), t[4], Some(t[5]))
            } else {
                (t[0], None, t[1], None, t[2], None)
            };
            fire1d(
                &act.data, in_channels, len, squeeze, expand1, expand3, sw, sb, e1w, e1b, e3w, e3b,
            )
        }
        (LayerSpec::Reshape { .. }, s) => flatten_hwc(&act.data, s),
        (l, s) => {
            return Err(NnError::ShapeMismatch(format!(
                "layer {i} ({}) cannot run on {s}",
                l.name()
            )))
        }
    };
    Activation::new(out_shape, data)
}

/// 1D convolution, `[c][n]` layout. Accumulates over input channels then taps.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv1d(
    x: &[f32],
    c_in: usize,
    len: usize,
    w: &[f32],
    bias: Option<&[f32]>,
    c_out: usize,
    k: usize,
    stride: usize,
    padding: Padding,
) -> Vec<f32> {
    let (pad, out_len) = match padding {
        Padding::Same => ((k - 1) / 2, len.div_ceil(stride)),
        Padding::Valid => (0, (len - k) / stride + 1),
    };
    let mut out = vec![0.0f32; c_out * out_len];
    for o in 0..c_out {
        for j in 0..out_len {
            let centre = (j * stride) as isize - pad as isize;
            let mut acc = 0.0f32;
            for i in 0..c_in {
                let xi = &x[i * len..(i + 1) * len];
                let wi = &w[(o * c_in + i) * k..(o * c_in + i + 1) * k];
                for (t, &wt) in wi.iter().enumerate() {
                    let pos = centre + t as isize;
                    if pos >= 0 && (pos as usize) < len {
                        acc += wt * xi[pos as usize];
                    }
                }
            }
            if let Some(b) = bias {
                acc += b[o];
            }
            out[o * out_len + j] = acc;
        }
    }
    out
}

/// Valid 2D convolution on `[c][h][w]`.
#[allow(clippy::too_many_arguments)]
fn conv2d(
    x: &[f32],
    c_in: usize,
    h: usize,
    wd: usize,
    w: &[f32],
    bias: Option<&[f32]>,
    c_out: usize,
    k: usize,
) -> Vec<f32> {
    let (oh, ow) = (h - k + 1, wd - k + 1);
    let mut out = vec![0.0f32; c_out * oh * ow];
    for o in 0..c_out {
        for r in 0..oh {
            for c in 0..ow {
                let mut acc = 0.0f32;
                for i in 0..c_in {
                    let xi = &x[i * h * wd..(i + 1) * h * wd];
                    let wi = &w[(o * c_in + i) * k * k..(o * c_in + i + 1) * k * k];
                    for dr in 0..k {
                        for dc in 0..k {
                            acc += wi[dr * k + dc] * xi[(r + dr) * wd + c + dc];
                        }
                    }
                }
                if let Some(b) = bias {
                    acc += b[o];
                }
                out[(o * oh + r) * ow + c] = acc;
            }
        }
    }
    out
}

pub(crate) fn max_pool1d(x: &[f32], channels: usize, len: usize, size: usize) -> Vec<f32> {
    let out_len = len / size;
    let mut out = Vec::with_capacity(channels * out_len);
    for c in 0..channels {
        let xc = &x[c * len..(c + 1) * len];
        out.extend((0..out_len).map(|j| {
            xc[j * size..(j + 1) * size]
                .iter()
                .copied()
                .fold(f32::NEG_INFINITY, f32::max)
        }));
    }
    out
}

fn max_pool2d(x: &[f32], channels: usize, h: usize, w: usize, size: usize) -> Vec<f32> {
    let (oh, ow) = (h / size, w / size);
    let mut out = Vec::with_capacity(channels * oh * ow);
    for c in 0..channels {
        let xc = &x[c * h * w..(c + 1) * h * w];
        for r in 0..oh {
            for col in 0..ow {
                let mut m = f32::NEG_INFINITY;
                for dr in 0..size {
                    for dc in 0..size {
                        m = m.max(xc[(r * size + dr) * w + col * size + dc]);
                    }
                }
                out.push(m);
            }
        }
    }
    out
}

/// Channel means, accumulated in `f64`.
pub(crate) fn global_avg_pool(x: &[f32], channels: usize) -> Vec<f32> {
    let per = x.len() / channels;
    (0..channels)
        .map(|c| {
            let sum: f64 = x[c * per..(c + 1) * per].iter().map(|&v| v as f64).sum();
            (sum / per as f64) as f32
        })
        .collect()
}

pub(crate) fn dense(
    x: &[f32],
    w: &[f32],
    bias: Option<&[f32]>,
    n_in: usize,
    n_out: usize,
) -> Vec<f32> {
    (0..n_out)
        .map(|o| {
            let row = &w[o * n_in..(o + 1) * n_in];
            let mut acc: f32 = row.iter().zip(x).map(|(a, b)| a * b).sum();
            if let Some(b) = bias {
                acc += b[o];
            }
            acc
        })
        .collect()
}

/// One token through attention + feed-forward with residuals.
///
/// `w = [wq, wk, wv, wo, ff1, ff2]`, each `dim x dim`. Attention weights are a
/// softmax over the token axis, which for a single token is exactly 1.
pub(crate) fn transformer_block(x: &[f32], dim: usize, w: [&[f32]; 6]) -> Vec<f32> {
    let tokens = x.len() / dim;
    let proj = |m: &[f32], v: &[f32]| dense(v, m, None, dim, dim);
    let qs: Vec<Vec<f32>> = x.chunks(dim).map(|t| proj(w[0], t)).collect();
    let ks: Vec<Vec<f32>> = x.chunks(dim).map(|t| proj(w[1], t)).collect();
    let vs: Vec<Vec<f32>> = x.chunks(dim).map(|t| proj(w[2], t)).collect();
    let scale = 1.0 / (dim as f32).sqrt();
    let mut out = Vec::with_capacity(x.len());
    for t in 0..tokens {
        let scores: Vec<f32> = ks
            .iter()
            .map(|k| qs[t].iter().zip(k).map(|(a, b)| a * b).sum::<f32>() * scale)
            .collect();
        let attn = softmax(&scores);
        let mut ctx = vec![0.0f32; dim];
        for (a, v) in attn.iter().zip(&vs) {
            for (c, vv) in ctx.iter_mut().zip(v) {
                *c += a * vv;
            }
        }
        let o = proj(w[3], &ctx);
        let h: Vec<f32> = x[t * dim..(t + 1) * dim]
            .iter()
            .zip(&o)
            .map(|(a, b)| a + b)
            .collect();
        let f1: Vec<f32> = proj(w[4], &h).into_iter().map(relu).collect();
        let f2 = proj(w[5], &f1);
        out.extend(h.iter().zip(&f2).map(|(a, b)| a + b));
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn fire1d(
    x: &[f32],
    c_in: usize,
    len: usize,
    squeeze: usize,
    expand1: usize,
    expand3: usize,
    sw: &[f32],
    sb: Option<&[f32]>,
    e1w: &[f32],
    e1b: Option<&[f32]>,
    e3w: &[f32],
    e3b: Option<&[f32]>,
) -> Vec<f32> {
    let s: Vec<f32> = conv1d(x, c_in, len, sw, sb, squeeze, 1, 1, Padding::Same)
        .into_iter()
        .map(relu)
        .collect();
    let mut out: Vec<f32> = conv1d(&s, squeeze, len, e1w, e1b, expand1, 1, 1, Padding::Same)
        .into_iter()
        .map(relu)
        .collect();
    out.extend(
        conv1d(&s, squeeze, len, e3w, e3b, expand3, 3, 1, Padding::Same)
            .into_iter()
            .map(relu),
    );
    out
}

/// `[c][h][w]` to a flat vector in `(h, w, c)` order.
pub(crate) fn flatten_hwc<T: Copy>(x: &[T], shape: Shape) -> Vec<T> {
    match shape {
        Shape::Image {
            height,
            width,
            channels,
        } => {
            let mut out = Vec::with_capacity(x.len());
            for r in 0..height {
                for c in 0..width {
                    for ch in 0..channels {
                        out.push(x[(ch * height + r) * width + c]);
                    }
                }
            }
            out
        }
        _ => x.to_vec(),
    }
}
