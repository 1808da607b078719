//! Every model against a plain nested-loop executor written in f64.

use tinychirp::nn::{
    build_cnn_mel, build_cnn_time, build_transformer_time, forward_trace, seeded_init, Activation,
    LayerSpec, ModelGraph, Padding, WeightSet,
};
use tinychirp::rng::SplitMix64;

#[derive(Clone, Debug)]
enum Val {
    Seq(Vec<Vec<f64>>),
    Img(Vec<Vec<Vec<f64>>>),
    Flat(Vec<f64>),
}

fn tensor(w: &WeightSet, layer: usize, i: usize) -> Vec<f64> {
    w.layer(layer).unwrap().tensors[i].data.iter().map(|&v| v as f64).collect()
}

fn matvec(m: &[f64], x: &[f64], rows: usize) -> Vec<f64> {
    let cols = x.len();
    (0..rows).map(|r| (0..cols).map(|c| m[r * cols + c] * x[c]).sum()).collect()
}

fn run(model: &ModelGraph, w: &WeightSet, input: Val) -> Vec<f64> {
    let mut v = input;
    for (li, layer) in model.layers.iter().enumerate() {
        v = match (*layer, v) {
            (LayerSpec::Conv1d { in_channels, out_channels, kernel, stride, padding, bias }, Val::Seq(x)) => {
                let n = x[0].len();
                let wt = tensor(w, li, 0);
                let b = if bias { tensor(w, li, 1) } else { vec![0.0; out_channels] };
                let pad = if padding == Padding::Same { kernel / 2 } else { 0 };
                let out_len = (n + 2 * pad - kernel) / stride + 1;
                let mut out = vec![vec![0.0; out_len]; out_channels];
                for o in 0..out_channels {
                    for t in 0..out_len {
                        let mut acc = b[o];
                        for i in 0..in_channels {
                            for k in 0..kernel {
                                let pos = (t * stride + k) as isize - pad as isize;
                                if pos >= 0 && (pos as usize) < n {
                                    acc += wt[(o * in_channels + i) * kernel + k] * x[i][pos as usize];
                                }
                            }
                        }
                        out[o][t] = acc;
                    }
                }
                Val::Seq(out)
            }
            (LayerSpec::Conv2d { in_channels, out_channels, kernel, bias }, Val::Img(x)) => {
                let (h, wd) = (x[0].len(), x[0][0].len());
                let wt = tensor(w, li, 0);
                let b = if bias { tensor(w, li, 1) } else { vec![0.0; out_channels] };
                let mut out = vec![vec![vec![0.0; wd - kernel + 1]; h - kernel + 1]; out_channels];
                for o in 0..out_channels {
                    for r in 0..h - kernel + 1 {
                        for c in 0..wd - kernel + 1 {
                            let mut acc = b[o];
                            for i in 0..in_channels {
                                for dr in 0..kernel {
                                    for dc in 0..kernel {
                                        acc += wt[((o * in_channels + i) * kernel + dr) * kernel + dc]
                                            * x[i][r + dr][c + dc];
                                    }
                                }
                            }
                            out[o][r][c] = acc;
                        }
                    }
                }
                Val::Img(out)
            }
            (LayerSpec::MaxPool1d { size }, Val::Seq(x)) => Val::Seq(
                x.iter()
                    .map(|ch| ch.chunks_exact(size).map(|g| g.iter().cloned().fold(f64::MIN, f64::max)).collect())
                    .collect(),
            ),
            (LayerSpec::MaxPool2d { size }, Val::Img(x)) => Val::Img(
                x.iter()
                    .map(|ch| {
                        (0..ch.len() / size)
                            .map(|r| {
                                (0..ch[0].len() / size)
                                    .map(|c| {
                                        let mut m = f64::MIN;
                                        for dr in 0..size {
                                            for dc in 0..size {
                                                m = m.max(ch[r * size + dr][c * size + dc]);
                                            }
                                        }
                                        m
                                    })
                                    .collect()
                            })
                            .collect()
                    })
                    .collect(),
            ),
            (LayerSpec::Relu, Val::Seq(x)) => Val::Seq(x.iter().map(|c| c.iter().map(|v| v.max(0.0)).collect()).collect()),
            (LayerSpec::Relu, Val::Img(x)) => Val::Img(
                x.iter().map(|c| c.iter().map(|r| r.iter().map(|v| v.max(0.0)).collect()).collect()).collect(),
            ),
            (LayerSpec::Relu, Val::Flat(x)) => Val::Flat(x.iter().map(|v| v.max(0.0)).collect()),
            (LayerSpec::Dropout { .. }, x) => x,
            (LayerSpec::GlobalAvgPool, Val::Seq(x)) => {
                Val::Flat(x.iter().map(|c| c.iter().sum::<f64>() / c.len() as f64).collect())
            }
            (LayerSpec::Reshape { .. }, Val::Img(x)) => {
                let mut flat = Vec::new();
                for r in 0..x[0].len() {
                    for c in 0..x[0][0].len() {
                        for ch in &x {
                            flat.push(ch[r][c]);
                        }
                    }
                }
                Val::Flat(flat)
            }
            (LayerSpec::FullyConnected { out_features, bias, .. }, Val::Flat(x)) => {
                let mut y = matvec(&tensor(w, li, 0), &x, out_features);
                if bias {
                    for (a, b) in y.iter_mut().zip(tensor(w, li, 1)) {
                        *a += b;
                    }
                }
                Val::Flat(y)
            }
            (LayerSpec::SingleHeadTransformer { dim }, Val::Flat(x)) => {
                // One token: attention weight 1, context = V x.
                let m: Vec<Vec<f64>> = (0..6).map(|i| tensor(w, li, i)).collect();
                let ctx = matvec(&m[2], &x, dim);
                let o = matvec(&m[3], &ctx, dim);
                let h: Vec<f64> = x.iter().zip(&o).map(|(a, b)| a + b).collect();
                let f1: Vec<f64> = matvec(&m[4], &h, dim).into_iter().map(|v| v.max(0.0)).collect();
                let f2 = matvec(&m[5], &f1, dim);
                Val::Flat(h.iter().zip(&f2).map(|(a, b)| a + b).collect())
            }
            (LayerSpec::Softmax, Val::Flat(x)) => {
                let mx = x.iter().cloned().fold(f64::MIN, f64::max);
                let e: Vec<f64> = x.iter().map(|v| (v - mx).exp()).collect();
                let s: f64 = e.iter().sum();
                Val::Flat(e.iter().map(|v| v / s).collect())
            }
            (l, v) => panic!("oracle has no rule for {l:?} on {v:?}"),
        };
    }
    match v {
        Val::Flat(p) => p,
        _ => panic!("model did not end flat"),
    }
}

fn logits_of(model: &ModelGraph, w: &WeightSet, input: &Activation) -> Vec<f64> {
    let trace = forward_trace(model, w, input).unwrap();
    trace[trace.len() - 2].data.iter().map(|&v| v as f64).collect()
}

fn oracle_logits(model: &ModelGraph, w: &WeightSet, input: Val) -> Vec<f64> {
    let mut head = model.clone();
    head.layers.pop();
    head.shapes.pop();
    run(&head, w, input)
}

fn assert_close(a: &[f64], b: &[f64]) {
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(b) {
        assert!((x - y).abs() <= 1e-5 * y.abs().max(1e-2), "{a:?} vs {b:?}");
    }
}

fn waveform(seed: u64) -> Vec<f32> {
    let mut r = SplitMix64::new(seed);
    (0..48_000).map(|_| r.uniform(-1.0, 1.0) as f32).collect()
}

#[test]
fn time_models_match_oracle() {
    for build in [build_cnn_time, build_transformer_time] {
        let m = build();
        for seed in 0..3 {
            let w = seeded_init(&m, seed);
            let x = waveform(100 + seed);
            let got = logits_of(&m, &w, &Activation::waveform(&x));
            let want = oracle_logits(&m, &w, Val::Seq(vec![x.iter().map(|&v| v as f64).collect()]));
            assert_close(&got, &want);
            let probs = run(&m, &w, Val::Seq(vec![x.iter().map(|&v| v as f64).collect()]));
            assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn cnn_mel_matches_oracle() {
    let m = build_cnn_mel();
    for seed in 0..2 {
        let w = seeded_init(&m, seed);
        let mut r = SplitMix64::new(seed + 7);
        let data: Vec<f32> = (0..184 * 80).map(|_| r.uniform(-10.0, 2.0) as f32).collect();
        let img: Vec<Vec<f64>> = data.chunks(80).map(|row| row.iter().map(|&v| v as f64).collect()).collect();
        let got = logits_of(&m, &w, &Activation::image(184, 80, data).unwrap());
        let want = oracle_logits(&m, &w, Val::Img(vec![img]));
        assert_close(&got, &want);
    }
}
