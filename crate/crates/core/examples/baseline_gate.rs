//! The cheap power gate: filter response, then where a few sounds land
//! relative to the two thresholds.

use tinychirp::dsp::{baseline_highpass, baseline_power};
use tinychirp::pipeline::{DEFAULT_T_HIGH, DEFAULT_T_LOW};
use tinychirp::synth;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let filter = baseline_highpass();
    println!("{} second-order sections, stable: {}", filter.sections.len(), filter.is_stable());
    for f in [1_000.0, 4_000.0, 6_000.0, 7_000.0, 7_500.0, 7_900.0] {
        println!("  |H({f:>6.0} Hz)| = {:.6}", filter.magnitude(f));
    }

    let cases = [
        ("silence", synth::silence()),
        ("white noise", synth::segment_of(synth::white_noise(1, 0.3, 48_000))),
        ("hum + faint 7.5 kHz", synth::tone_with_power(&filter, 7_500.0, 3e-7)?),
        ("hum + loud 7.5 kHz", synth::tone_with_power(&filter, 7_500.0, 5e-5)?),
        ("low 300 Hz tone", synth::segment_of(synth::sine(300.0, 0.8, 48_000, 16_000))),
    ];
    println!("t_low = {DEFAULT_T_LOW:e}, t_high = {DEFAULT_T_HIGH:e}");
    for (name, seg) in &cases {
        let p = baseline_power(&filter, seg)?.p;
        let zone = if p < DEFAULT_T_LOW {
            "discard"
        } else if p >= DEFAULT_T_HIGH {
            "store directly (power saving)"
        } else {
            "ask the model"
        };
        println!("  {name:<22} P = {p:.3e}  -> {zone}");
    }
    Ok(())
}
