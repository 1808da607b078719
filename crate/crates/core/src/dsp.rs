//! Signal processing for the screening chain and the spectral front end.
//!
//! Baseline gate: min-max normalize, 9th-order Butterworth high-pass at 7 kHz,
//! mean-square power. Spectral front end: non-centered Hann STFT (1024/256),
//! 80-band HTK mel filterbank over 80-8000 Hz, `log10` with a 1e-10 floor.
//! A 3 s, 16 kHz segment yields 184 frames x 513 bins, then 184 x 80 mel.

use std::f64::consts::PI;
use std::io::{self, Read, Write};
use std::path::Path;

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio_io::{AudioSegment, AudioSignal};

pub const SAMPLE_RATE_HZ: u32 = 16_000;
pub const HIGHPASS_ORDER: usize = 9;
pub const HIGHPASS_CUTOFF_HZ: f64 = 7_000.0;
pub const STFT_WINDOW: usize = 1024;
pub const STFT_HOP: usize = 256;
pub const N_MELS: usize = 80;
pub const MEL_FMIN_HZ: f64 = 80.0;
pub const MEL_FMAX_HZ: f64 = 8_000.0;
/// Floor applied before `log10` so silent bins map to -10 instead of -inf.
pub const LOG_FLOOR: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum DspError {
    #[error("downsampling cannot raise the rate ({src} Hz -> {dst} Hz)")]
    UpsampleRequested { src: u32, dst: u32 },
    #[error("cutoff {cutoff_hz} Hz must lie strictly between 0 and Nyquist ({nyquist_hz} Hz)")]
    InvalidCutoff { cutoff_hz: f64, nyquist_hz: f64 },
    #[error("filter order must be at least 1")]
    InvalidOrder,
    #[error("segment is {actual} Hz but the filter was designed for {expected} Hz")]
    SampleRateMismatch { expected: u32, actual: u32 },
    #[error("segment is empty")]
    EmptySegment,
    #[error("segment has {len} samples, fewer than one {window}-sample window")]
    SegmentTooShort { len: usize, window: usize },
    #[error("invalid mel range {fmin_hz}..{fmax_hz} Hz at {sample_rate_hz} Hz")]
    InvalidRange {
        fmin_hz: f64,
        fmax_hz: f64,
        sample_rate_hz: u32,
    },
    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: usize, actual: usize },
    #[error("no segments to average")]
    EmptyList,
    #[error("bad spectrogram matrix file: {0}")]
    BadMatrix(String),
    #[error("I/O failure: {0}")]
    Io(#[from] io::Error),
}

/// Affine map onto `[0, 1]`; a constant segment maps to all zeros.
pub fn minmax_normalize(segment: &AudioSegment) -> AudioSegment {
    let (min, max) = segment
        .samples
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &x| {
            (lo.min(x), hi.max(x))
        });
    let range = max as f64 - min as f64;
    let samples = if segment.samples.is_empty() || !(range > 0.0) {
        vec![0.0; segment.samples.len()]
    } else {
        segment
            .samples
            .iter()
            .map(|&x| ((x as f64 - min as f64) / range) as f32)
            .collect()
    };
    segment.with_samples(samples)
}

/// Zero-order-hold decimation: output sample `k` copies input frame
/// `floor(k * src / dst)`. No anti-alias filtering.
pub fn downsample_zoh(signal: &AudioSignal, dst_rate: u32) -> Result<AudioSignal, DspError> {
    let src = signal.sample_rate;
    if dst_rate > src || dst_rate == 0 {
        return Err(DspError::UpsampleRequested { src, dst: dst_rate });
    }
    if dst_rate == src {
        return Ok(signal.clone());
    }
    let ch = signal.channels.max(1) as usize;
    let frames = signal.frames();
    let out_frames = (frames as u64 * dst_rate as u64 / src as u64) as usize;
    let mut samples = Vec::with_capacity(out_frames * ch);
    for k in 0..out_frames {
        let idx = (k as u64 * src as u64 / dst_rate as u64) as usize;
        samples.extend_from_slice(&signal.samples[idx * ch..idx * ch + ch]);
    }
    Ok(AudioSignal {
        samples,
        sample_rate: dst_rate,
        channels: signal.channels,
    })
}

/// One biquad: `(b0 + b1 z^-1 + b2 z^-2) / (1 + a1 z^-1 + a2 z^-2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Biquad {
    pub b0: f64,
    pub b1: f64,
    pub b2: f64,
    pub a1: f64,
    pub a2: f64,
}

impl Biquad {
    /// Poles of the section (roots of `z^2 + a1 z + a2`).
    pub fn poles(&self) -> [Complex64; 2] {
        let disc = Complex64::new(self.a1 * self.a1 - 4.0 * self.a2, 0.0).sqrt();
        [(-self.a1 + disc) / 2.0, (-self.a1 - disc) / 2.0]
    }

    pub fn is_stable(&self) -> bool {
        self.poles().iter().all(|p| p.norm() < 1.0)
    }

    fn response(&self, z_inv: Complex64) -> Complex64 {
        let z_inv2 = z_inv * z_inv;
        (self.b0 + self.b1 * z_inv + self.b2 * z_inv2) / (1.0 + self.a1 * z_inv + self.a2 * z_inv2)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterKind {
    Highpass,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DesignMeta {
    pub order: usize,
    pub cutoff_hz: f64,
    pub sample_rate_hz: u32,
    pub kind: FilterKind,
}

/// Cascade of second-order sections.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterSos {
    pub sections: Vec<Biquad>,
    pub meta: DesignMeta,
}

impl FilterSos {
    /// Complex frequency response at `freq_hz`.
    pub fn response(&self, freq_hz: f64) -> Complex64 {
        let w = 2.0 * PI * freq_hz / self.meta.sample_rate_hz as f64;
        let z_inv = Complex64::from_polar(1.0, -w);
        self.sections
            .iter()
            .fold(Complex64::new(1.0, 0.0), |acc, s| acc * s.response(z_inv))
    }

    pub fn magnitude(&self, freq_hz: f64) -> f64 {
        self.response(freq_hz).norm()
    }

    pub fn is_stable(&self) -> bool {
        self.sections.iter().all(Biquad::is_stable)
    }
}

/// Digital Butterworth high-pass: analog prototype, low-to-high transform at the
/// prewarped cutoff, bilinear transform, conjugate pairs grouped into biquads.
///
/// Every section is scaled to unit gain at Nyquist, which is the pass-band of a
/// high-pass, so the cascade has unit pass-band gain.
pub fn design_butterworth_highpass(
    order: usize,
    cutoff_hz: f64,
    sample_rate_hz: u32,
) -> Result<FilterSos, DspError> {
    if order == 0 {
        return Err(DspError::InvalidOrder);
    }
    let fs = sample_rate_hz as f64;
    let nyquist_hz = fs / 2.0;
    if !(cutoff_hz > 0.0 && cutoff_hz < nyquist_hz) {
        return Err(DspError::InvalidCutoff {
            cutoff_hz,
            nyquist_hz,
        });
    }
    let warped = 2.0 * fs * (PI * cutoff_hz / fs).tan();
    let bilinear = |s: Complex64| (2.0 * fs + s) / (2.0 * fs - s);

    let mut sections = Vec::with_capacity(order.div_ceil(2));
    // Upper-half-plane prototype poles; the conjugates complete each pair.
    for k in 0..order / 2 {
        let theta = PI / 2.0 + PI * (2 * k + 1) as f64 / (2 * order) as f64;
        let proto = Complex64::from_polar(1.0, theta);
        let z = bilinear(warped / proto);
        let a1 = -2.0 * z.re;
        let a2 = z.norm_sqr();
        let g = (1.0 - a1 + a2) / 4.0;
        sections.push(Biquad {
            b0: g,
            b1: -2.0 * g,
            b2: g,
            a1,
            a2,
        });
    }
    if order % 2 == 1 {
        // Real prototype pole at s = -1.
        let z = bilinear(Complex64::new(-warped, 0.0)).re;
        let a1 = -z;
        let g = (1.0 - a1) / 2.0;
        sections.push(Biquad {
            b0: g,
            b1: -g,
            b2: 0.0,
            a1,
            a2: 0.0,
        });
    }
    Ok(FilterSos {
        sections,
        meta: DesignMeta {
            order,
            cutoff_hz,
            sample_rate_hz,
            kind: FilterKind::Highpass,
        },
    })
}

/// The baseline's 9th-order, 7 kHz high-pass at 16 kHz.
pub fn baseline_highpass() -> FilterSos {
    design_butterworth_highpass(HIGHPASS_ORDER, HIGHPASS_CUTOFF_HZ, SAMPLE_RATE_HZ)
        .expect("baseline filter parameters are valid")
}

/// Per-stream filter memory (two delay registers per section).
#[derive(Debug, Clone, PartialEq)]
pub struct FilterState {
    registers: Vec<[f64; 2]>,
}

impl FilterState {
    pub fn new(filter: &FilterSos) -> Self {
        Self {
            registers: vec![[0.0; 2]; filter.sections.len()],
        }
    }

    /// Transposed direct form II, one sample through the whole cascade.
    pub fn process(&mut self, filter: &FilterSos, x: f64) -> f64 {
        let mut v = x;
        for (s, r) in filter.sections.iter().zip(self.registers.iter_mut()) {
            let y = s.b0 * v + r[0];
            r[0] = s.b1 * v - s.a1 * y + r[1];
            r[1] = s.b2 * v - s.a2 * y;
            v = y;
        }
        v
    }
}

/// Causal filtering from zero initial state; output has the input's length.
pub fn filter_apply(filter: &FilterSos, segment: &AudioSegment) -> Result<AudioSegment, DspError> {
    if segment.sample_rate != filter.meta.sample_rate_hz {
        return Err(DspError::SampleRateMismatch {
            expected: filter.meta.sample_rate_hz,
            actual: segment.sample_rate,
        });
    }
    let mut state = FilterState::new(filter);
    let samples = segment
        .samples
        .iter()
        .map(|&x| state.process(filter, x as f64) as f32)
        .collect();
    Ok(segment.with_samples(samples))
}

/// Mean-square amplitude of a segment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerReading {
    pub p: f64,
    pub n: usize,
}

pub fn signal_power(segment: &AudioSegment) -> Result<PowerReading, DspError> {
    power_of(&segment.samples)
}

pub fn power_of(samples: &[f32]) -> Result<PowerReading, DspError> {
    if samples.is_empty() {
        return Err(DspError::EmptySegment);
    }
    let sum: f64 = samples.iter().map(|&x| (x as f64) * (x as f64)).sum();
    Ok(PowerReading {
        p: sum / samples.len() as f64,
        n: samples.len(),
    })
}

/// Baseline chain: normalize, high-pass, then mean-square power.
pub fn baseline_power(filter: &FilterSos, segment: &AudioSegment) -> Result<PowerReading, DspError> {
    if segment.is_empty() {
        return Err(DspError::EmptySegment);
    }
    let normalized = minmax_normalize(segment);
    let filtered = filter_apply(filter, &normalized)?;
    signal_power(&filtered)
}

/// Row-major `frames x bins` magnitude matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    pub values: Vec<f64>,
    pub frames: usize,
    pub bins: usize,
}

impl Spectrogram {
    pub fn zeros(frames: usize, bins: usize) -> Self {
        Self {
            values: vec![0.0; frames * bins],
            frames,
            bins,
        }
    }

    pub fn row(&self, frame: usize) -> &[f64] {
        &self.values[frame * self.bins..(frame + 1) * self.bins]
    }

    pub fn get(&self, frame: usize, bin: usize) -> f64 {
        self.values[frame * self.bins + bin]
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), DspError> {
        write_matrix_csv(&self.values, self.frames, self.bins, out)
    }

    pub fn write_matrix<W: Write>(&self, out: W) -> Result<(), DspError> {
        write_matrix_f32(&self.values, self.frames, self.bins, out)
    }
}

/// Number of non-centered frames for `len` samples.
pub fn frame_count(len: usize, window: usize, hop: usize) -> usize {
    if len < window {
        0
    } else {
        (len - window) / hop + 1
    }
}

/// Periodic Hann window.
pub fn hann_window(len: usize) -> Vec<f64> {
    (0..len)
        .map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / len as f64).cos())
        .collect()
}

/// Magnitude STFT: Hann 1024, hop 256, no padding, bins `0..=512`.
pub fn stft_magnitude(segment: &AudioSegment) -> Result<Spectrogram, DspError> {
    stft_magnitude_with(&segment.samples, STFT_WINDOW, STFT_HOP)
}

pub fn stft_magnitude_with(
    samples: &[f32],
    window: usize,
    hop: usize,
) -> Result<Spectrogram, DspError> {
    if samples.len() < window {
        return Err(DspError::SegmentTooShort {
            len: samples.len(),
            window,
        });
    }
    let frames = frame_count(samples.len(), window, hop);
    let bins = window / 2 + 1;
    let hann = hann_window(window);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(window);
    let mut buf = vec![Complex64::new(0.0, 0.0); window];
    let mut scratch = vec![Complex64::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    let mut values = Vec::with_capacity(frames * bins);
    for f in 0..frames {
        let start = f * hop;
        for (i, c) in buf.iter_mut().enumerate() {
            *c = Complex64::new(samples[start + i] as f64 * hann[i], 0.0);
        }
        fft.process_with_scratch(&mut buf, &mut scratch);
        values.extend(buf[..bins].iter().map(|c| c.norm()));
    }
    Ok(Spectrogram {
        values,
        frames,
        bins,
    })
}

/// Elementwise mean of per-segment magnitude spectrograms.
pub fn average_stft(segments: &[AudioSegment]) -> Result<Spectrogram, DspError> {
    let first = segments.first().ok_or(DspError::EmptyList)?;
    let mut acc = stft_magnitude(first)?;
    for seg in &segments[1..] {
        if seg.len() != first.len() {
            return Err(DspError::ShapeMismatch {
                expected: first.len(),
                actual: seg.len(),
            });
        }
        let s = stft_magnitude(seg)?;
        for (a, v) in acc.values.iter_mut().zip(&s.values) {
            *a += v;
        }
    }
    let n = segments.len() as f64;
    for a in &mut acc.values {
        *a /= n;
    }
    Ok(acc)
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular filters (peak 1, unnormalized) on the HTK mel scale.
#[derive(Debug, Clone, PartialEq)]
pub struct MelFilterbank {
    /// Row-major `n_mels x bins`.
    pub weights: Vec<f64>,
    pub n_mels: usize,
    pub bins: usize,
    /// `n_mels + 2` edge frequencies; filter `m` peaks at `edges_hz[m + 1]`.
    pub edges_hz: Vec<f64>,
}

impl MelFilterbank {
    pub fn row(&self, m: usize) -> &[f64] {
        &self.weights[m * self.bins..(m + 1) * self.bins]
    }

    pub fn centers_hz(&self) -> &[f64] {
        &self.edges_hz[1..self.n_mels + 1]
    }
}

pub fn mel_filterbank(
    n_mels: usize,
    fmin_hz: f64,
    fmax_hz: f64,
    sample_rate_hz: u32,
    n_fft: usize,
) -> Result<MelFilterbank, DspError> {
    if !(fmin_hz >= 0.0 && fmin_hz < fmax_hz && fmax_hz <= sample_rate_hz as f64 / 2.0)
        || n_mels == 0
        || n_fft == 0
    {
        return Err(DspError::InvalidRange {
            fmin_hz,
            fmax_hz,
            sample_rate_hz,
        });
    }
    let bins = n_fft / 2 + 1;
    let (mel_lo, mel_hi) = (hz_to_mel(fmin_hz), hz_to_mel(fmax_hz));
    let step = (mel_hi - mel_lo) / (n_mels + 1) as f64;
    let edges_hz: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(mel_lo + step * i as f64))
        .collect();
    let bin_hz = sample_rate_hz as f64 / n_fft as f64;
    let mut weights = vec![0.0; n_mels * bins];
    for m in 0..n_mels {
        let (lo, mid, hi) = (edges_hz[m], edges_hz[m + 1], edges_hz[m + 2]);
        for k in 0..bins {
            let f = k as f64 * bin_hz;
            let rising = (f - lo) / (mid - lo);
            let falling = (hi - f) / (hi - mid);
            weights[m * bins + k] = rising.min(falling).max(0.0);
        }
    }
    Ok(MelFilterbank {
        weights,
        n_mels,
        bins,
        edges_hz,
    })
}

/// The 80-band, 80-8000 Hz filterbank for 1024-point frames at 16 kHz.
pub fn default_mel_filterbank() -> MelFilterbank {
    mel_filterbank(N_MELS, MEL_FMIN_HZ, MEL_FMAX_HZ, SAMPLE_RATE_HZ, STFT_WINDOW)
        .expect("default mel parameters are valid")
}

/// Row-major `frames x n_mels` log-magnitude matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    pub values: Vec<f64>,
    pub frames: usize,
    pub n_mels: usize,
}

impl MelSpectrogram {
    pub fn get(&self, frame: usize, mel: usize) -> f64 {
        self.values[frame * self.n_mels + mel]
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.frames, self.n_mels)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), DspError> {
        write_matrix_csv(&self.values, self.frames, self.n_mels, out)
    }

    pub fn write_matrix<W: Write>(&self, out: W) -> Result<(), DspError> {
        write_matrix_f32(&self.values, self.frames, self.n_mels, out)
    }
}

/// `log10(max(fb . spec^T, 1e-10))^T`.
pub fn log_mel(spec: &Spectrogram, fb: &MelFilterbank) -> Result<MelSpectrogram, DspError> {
    if spec.bins != fb.bins {
        return Err(DspError::ShapeMismatch {
            expected: fb.bins,
            actual: spec.bins,
        });
    }
    let mut values = Vec::with_capacity(spec.frames * fb.n_mels);
    for f in 0..spec.frames {
        let row = spec.row(f);
        for m in 0..fb.n_mels {
            let e: f64 = fb.row(m).iter().zip(row).map(|(w, x)| w * x).sum();
            values.push(e.max(LOG_FLOOR).log10());
        }
    }
    Ok(MelSpectrogram {
        values,
        frames: spec.frames,
        n_mels: fb.n_mels,
    })
}

/// STFT then log-mel with the default front-end parameters.
pub fn log_mel_segment(
    segment: &AudioSegment,
    fb: &MelFilterbank,
) -> Result<MelSpectrogram, DspError> {
    log_mel(&stft_magnitude(segment)?, fb)
}

const MATRIX_MAGIC: &[u8; 4] = b"TCSP";

fn write_matrix_csv<W: Write>(values: &[f64], rows: usize, cols: usize, out: W) -> Result<(), DspError> {
    let mut w = io::BufWriter::new(out);
    for r in 0..rows {
        let line: Vec<String> = values[r * cols..(r + 1) * cols]
            .iter()
            .map(|v| v.to_string())
            .collect();
        writeln!(w, "{}", line.join(","))?;
    }
    w.flush()?;
    Ok(())
}

/// 16-byte header `{"TCSP", rows: u32, cols: u32, reserved: u32 = 0}` then
/// little-endian `f32` values, row-major.
fn write_matrix_f32<W: Write>(values: &[f64], rows: usize, cols: usize, out: W) -> Result<(), DspError> {
    let mut w = io::BufWriter::new(out);
    w.write_all(MATRIX_MAGIC)?;
    w.write_all(&(rows as u32).to_le_bytes())?;
    w.write_all(&(cols as u32).to_le_bytes())?;
    w.write_all(&0u32.to_le_bytes())?;
    for v in values {
        w.write_all(&(*v as f32).to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a `TCSP` matrix back as `(rows, cols, values)`.
pub fn read_matrix<R: Read>(mut input: R) -> Result<(usize, usize, Vec<f32>), DspError> {
    let mut header = [0u8; 16];
    input.read_exact(&mut header)?;
    if &header[..4] != MATRIX_MAGIC {
        return Err(DspError::BadMatrix("magic mismatch".into()));
    }
    let rows = u32::from_le_bytes(header[4..8].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
    let mut body = Vec::new();
    input.read_to_end(&mut body)?;
    if body.len() != rows * cols * 4 {
        return Err(DspError::BadMatrix(format!(
            "expected {} payload bytes, found {}",
            rows * cols * 4,
            body.len()
        )));
    }
    let values = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((rows, cols, values))
}

pub fn write_matrix_file(mel: &MelSpectrogram, path: impl AsRef<Path>) -> Result<(), DspError> {
    mel.write_matrix(std::fs::File::create(path)?)
}
