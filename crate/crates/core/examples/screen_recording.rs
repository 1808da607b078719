//! Screens a synthetic 30 s field recording with the full pipeline and prints
//! the per-segment decisions and the energy bill.

use tinychirp::audio_io::{write_wav, AudioSignal};
use tinychirp::dsp::baseline_highpass;
use tinychirp::nn::ModelArch;
use tinychirp::pipeline::{run_pipeline, DirSink, ModelBundle, PipelineInput, Screener, ScreeningConfig, Variant};
use tinychirp::synth;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let filter = baseline_highpass();
    let mut samples = Vec::new();
    for i in 0..10u64 {
        let seg = match i % 4 {
            0 => synth::silence(),
            1 => synth::tone_with_power(&filter, 7_400.0, 4e-6)?,
            2 => synth::tone_with_power(&filter, 7_700.0, 3e-5)?,
            _ => synth::segment_of(synth::random_waveform(i, 48_000)),
        };
        samples.extend(seg.samples);
    }
    let dir = tempfile::tempdir()?;
    let recordings = dir.path().join("recordings");
    std::fs::create_dir(&recordings)?;
    write_wav(&AudioSignal::mono(samples, 16_000), recordings.join("dawn.wav"))?;

    for variant in [Variant::BaselineOnly, Variant::Full, Variant::PowerSaving] {
        let (config, model) = if variant.uses_model() {
            let arch = ModelArch::TransformerTime;
            (ScreeningConfig::for_model(variant, arch), Some(ModelBundle::seeded(arch, 5)))
        } else {
            (ScreeningConfig::baseline_only(), None)
        };
        let screener = Screener::new(config, model)?;
        let sink = DirSink::new(dir.path().join(format!("kept-{}", variant.as_str())))?;
        let report = run_pipeline(&PipelineInput::Dir(recordings.clone()), &screener, &sink, 2)?;
        println!("{}: {} of {} stored, {:.2} mJ", variant.as_str(), report.counts.stored(), report.counts.total(), report.energy_mj_total);
        for r in &report.per_segment {
            println!("  {:>4.1} s  P = {:.2e}  {:?}", r.offset_s, r.power.unwrap_or(f64::NAN), r.verdict);
        }
    }
    Ok(())
}
