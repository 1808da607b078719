use tinychirp::nn::{build_cnn_time, seeded_init, LayerSpec};
use tinychirp::streaming::{
    compare_with_oracle, naive_peak_values, random_trial, run_trial, StreamState, TrialConfig,
};
use tinychirp::synth;

#[test]
fn two_hundred_random_prefixes() {
    let start = std::time::Instant::now();
    for seed in 0..200 {
        let r = run_trial(seed).unwrap();
        assert!(r.within_tolerance, "{}", serde_json::to_string(&r).unwrap());
        assert!(r.max_rel_err <= 1e-5);
    }
    assert!(start.elapsed().as_secs() < 60);
}

fn peak_at(layers: &[LayerSpec], weights: &tinychirp::nn::WeightSet, channels: usize, n: usize) -> usize {
    let mut s = StreamState::new(layers, weights, n).unwrap();
    let frame = vec![0.25f32; channels];
    for _ in 0..n {
        s.push_frame(&frame).unwrap();
    }
    s.finalize().unwrap().stats.peak_buffered_values
}

#[test]
fn peak_does_not_depend_on_length() {
    for seed in 0..50 {
        let (cfg, w, _) = random_trial(seed);
        assert_eq!(
            peak_at(&cfg.layers, &w, cfg.input_channels, 1024),
            peak_at(&cfg.layers, &w, cfg.input_channels, 4096),
            "{cfg:?}"
        );
    }
}

fn cnn_time_prefix() -> (Vec<LayerSpec>, tinychirp::nn::WeightSet) {
    let m = build_cnn_time();
    let w = seeded_init(&m, 42);
    (m.layers[..m.conv_prefix_len().unwrap()].to_vec(), w)
}

#[test]
fn cnn_time_prefix_full_length() {
    let (layers, w) = cnn_time_prefix();
    let x = synth::random_waveform(9, 48_000);
    let cfg = TrialConfig { seed: 0, input_channels: 1, input_len: 48_000, layers: layers.clone() };
    let r = compare_with_oracle(cfg, &w, &x).unwrap();
    assert!(r.within_tolerance && r.max_rel_err <= 1e-5, "{r:?}");
    assert_eq!(peak_at(&layers, &w, 1, 1024), r.peak_values_stream);
    assert!(r.ratio > 1000.0);
    assert_eq!(naive_peak_values(&layers, 48_000).unwrap(), r.peak_values_naive);
}
