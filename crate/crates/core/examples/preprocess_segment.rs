//! One 3 s segment through every front-end stage: normalization, the 7 kHz
//! high-pass, power, STFT and log-mel. Writes the mel matrix next to a WAV copy.

use tinychirp::audio_io::{write_wav, AudioSegment};
use tinychirp::dsp::{
    baseline_highpass, default_mel_filterbank, filter_apply, log_mel, minmax_normalize,
    signal_power, stft_magnitude, write_matrix_file,
};
use tinychirp::synth;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let samples = synth::mixture(&[(440.0, 0.6), (7_600.0, 0.05)], 48_000, 16_000);
    let segment = AudioSegment::from_samples(samples, 16_000);

    let normalized = minmax_normalize(&segment);
    let (lo, hi) = normalized
        .samples
        .iter()
        .fold((f32::MAX, f32::MIN), |(a, b), &v| (a.min(v), b.max(v)));
    println!("normalized range [{lo:.3}, {hi:.3}]");

    let filter = baseline_highpass();
    let high_band = filter_apply(&filter, &normalized)?;
    println!("power before filter {:.3e}", signal_power(&normalized)?.p);
    println!("power after filter  {:.3e}", signal_power(&high_band)?.p);

    let spec = stft_magnitude(&segment)?;
    let mel = log_mel(&spec, &default_mel_filterbank())?;
    println!("stft {}x{}, log-mel {}x{}", spec.frames, spec.bins, mel.frames, mel.n_mels);

    let loudest = (0..spec.bins).max_by(|&a, &b| spec.get(90, a).total_cmp(&spec.get(90, b))).unwrap();
    println!("loudest bin in frame 90: {loudest} ({:.1} Hz)", loudest as f64 * 16_000.0 / 1024.0);

    let dir = tempfile::tempdir()?;
    write_wav(&segment.to_signal(), dir.path().join("segment.wav"))?;
    write_matrix_file(&mel, dir.path().join("segment.mel"))?;
    for entry in std::fs::read_dir(dir.path())? {
        let entry = entry?;
        println!("wrote {} ({} bytes)", entry.file_name().to_string_lossy(), entry.metadata()?.len());
    }
    Ok(())
}
