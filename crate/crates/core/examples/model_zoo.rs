//! The three classifiers: layer listing, parameter counts, a forward pass and a
//! weight-file round trip.

use tinychirp::dsp::{default_mel_filterbank, log_mel_segment};
use tinychirp::nn::{forward, load_weights, save_weights, seeded_init, Activation, InputKind, ModelArch};
use tinychirp::synth;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = tempfile::tempdir()?;
    let segment = synth::segment_of(synth::random_waveform(3, 48_000));
    let mel = log_mel_segment(&segment, &default_mel_filterbank())?;

    for arch in ModelArch::ALL {
        let model = arch.build();
        println!("{} ({} params)", arch.as_str(), model.param_count());
        for (layer, shape) in model.layers.iter().zip(&model.shapes) {
            println!("  {:<24} in {:?}", layer.name(), shape);
        }

        let weights = seeded_init(&model, 1);
        let input = match arch.input_kind() {
            InputKind::Waveform => Activation::waveform(&segment.samples),
            InputKind::LogMel => Activation::image(mel.frames, mel.n_mels, mel.values.iter().map(|&v| v as f32).collect())?,
        };
        let probs = forward(&model, &weights, &input)?;
        println!("  P(target) = {:.4}", probs[1]);

        let path = dir.path().join(format!("{}.tcw", arch.as_str()));
        let bytes = save_weights(&model, &weights, &path)?;
        let back = load_weights(&model, &path)?;
        println!("  saved {bytes} bytes, reload identical: {}", back == weights);
    }
    Ok(())
}
