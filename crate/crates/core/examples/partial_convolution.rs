//! Streams a 3 s waveform through the CNN-Time convolutional prefix one sample
//! at a time and compares the result with the whole-array forward pass.

use tinychirp::nn::{build_cnn_time, forward, seeded_init, Activation};
use tinychirp::streaming::{naive_peak_values, stream_forward, StreamState};
use tinychirp::synth;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let model = build_cnn_time();
    let weights = seeded_init(&model, 7);
    let x = synth::random_waveform(11, 48_000);

    let full = forward(&model, &weights, &Activation::waveform(&x))?;
    let (streamed, stats) = stream_forward(&model, &weights, &x)?;
    println!("whole array probs {full:?}");
    println!("streamed probs    {streamed:?}");

    let prefix = &model.layers[..model.conv_prefix_len().unwrap()];
    let naive = naive_peak_values(prefix, x.len())?;
    println!(
        "peak values held: streamed {}, layer-by-layer {}, ratio {:.0}x",
        stats.peak_buffered_values,
        naive,
        naive as f64 / stats.peak_buffered_values as f64
    );

    let mut state = StreamState::new(prefix, &weights, x.len())?;
    for (i, &v) in x.iter().enumerate() {
        state.push(v)?;
        if i + 1 == 16_000 || i + 1 == 32_000 {
            println!("after {:>5} samples: {} buffered", i + 1, state.stats().peak_buffered_values);
        }
    }
    let out = state.finalize()?;
    println!("channel means {:?}", out.means.iter().map(|m| format!("{m:.5}")).collect::<Vec<_>>());
    Ok(())
}
