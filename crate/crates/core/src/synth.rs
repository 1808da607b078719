//! Deterministic test signals.

use std::f64::consts::TAU;

use crate::audio_io::AudioSegment;
use crate::dsp::{baseline_power, DspError, FilterSos, SAMPLE_RATE_HZ};
use crate::nn::INPUT_SAMPLES;
use crate::rng::SplitMix64;

pub fn sine(freq_hz: f64, amplitude: f64, len: usize, sample_rate: u32) -> Vec<f32> {
    (0..len)
        .map(|i| (amplitude * (TAU * freq_hz * i as f64 / sample_rate as f64).sin()) as f32)
        .collect()
}

/// Sum of sines given as `(freq_hz, amplitude)` pairs.
pub fn mixture(components: &[(f64, f64)], len: usize, sample_rate: u32) -> Vec<f32> {
    let mut out = vec![0.0f32; len];
    for &(f, a) in components {
        for (o, s) in out.iter_mut().zip(sine(f, a, len, sample_rate)) {
            *o += s;
        }
    }
    out
}

/// Uniform noise in `[-amplitude, amplitude]`.
pub fn white_noise(seed: u64, amplitude: f64, len: usize) -> Vec<f32> {
    let mut rng = SplitMix64::new(seed);
    (0..len)
        .map(|_| rng.uniform(-amplitude, amplitude) as f32)
        .collect()
}

/// Random tone plus noise plus DC offset, one draw of every parameter per seed.
pub fn random_waveform(seed: u64, len: usize) -> Vec<f32> {
    let mut rng = SplitMix64::new(seed);
    let amp = rng.uniform(0.05, 1.0);
    let freq = rng.uniform(50.0, 7900.0);
    let noise = rng.uniform(0.0, 0.5);
    let dc = rng.uniform(-0.3, 0.3);
    (0..len)
        .map(|i| {
            let t = i as f64 / SAMPLE_RATE_HZ as f64;
            (dc + amp * (TAU * freq * t).sin() + noise * rng.uniform(-1.0, 1.0)) as f32
        })
        .collect()
}

/// A full-length 16 kHz segment.
pub fn segment_of(samples: Vec<f32>) -> AudioSegment {
    AudioSegment::from_samples(samples, SAMPLE_RATE_HZ)
}

pub fn silence() -> AudioSegment {
    segment_of(vec![0.0; INPUT_SAMPLES])
}

/// A high tone riding on a strong 100 Hz hum, scaled so the baseline chain
/// reports `target_power` to within 1e-6 relative.
///
/// Normalization rescales any lone tone to full range, so the hum is what
/// makes the high-band power adjustable.
pub fn tone_with_power(
    filter: &FilterSos,
    freq_hz: f64,
    target_power: f64,
) -> Result<AudioSegment, DspError> {
    let build = |a: f64| segment_of(mixture(&[(100.0, 1.0), (freq_hz, a)], INPUT_SAMPLES, SAMPLE_RATE_HZ));
    let power = |a: f64| baseline_power(filter, &build(a)).map(|r| r.p);
    let (mut lo, mut hi) = (0.0, 1.0);
    if power(hi)? < target_power {
        return Ok(build(hi));
    }
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        if power(mid)? < target_power {
            lo = mid;
        } else {
            hi = mid;
        }
        if (hi - lo) <= 1e-12 * hi {
            break;
        }
    }
    Ok(build(hi))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::baseline_highpass;

    #[test]
    fn tone_hits_target_power() {
        let f = baseline_highpass();
        let seg = tone_with_power(&f, 7500.0, 2e-5).unwrap();
        let p = baseline_power(&f, &seg).unwrap().p;
        assert!((p - 2e-5).abs() < 1e-6 * 2e-5, "{p}");
    }

    #[test]
    fn generators_are_deterministic() {
        assert_eq!(random_waveform(7, 100), random_waveform(7, 100));
        assert_ne!(random_waveform(7, 100), random_waveform(8, 100));
        assert_eq!(white_noise(1, 0.5, 64), white_noise(1, 0.5, 64));
        assert!(white_noise(1, 0.5, 1000).iter().all(|x| x.abs() <= 0.5));
    }
}
