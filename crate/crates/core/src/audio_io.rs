//! PCM audio I/O, fixed-length segmentation and labeled dataset manifests.
//!
//! Samples are held as `f32` in nominal `[-1, 1]`. Multi-channel signals are
//! interleaved; the screening engine consumes mono, taking channel 0 unless a
//! different channel is selected.

use std::collections::HashMap;
use std::fmt;
use std::io;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AudioError {
    #[error("malformed WAV header: {0}")]
    MalformedHeader(String),
    #[error("unsupported WAV encoding: {0}")]
    UnsupportedEncoding(String),
    #[error("WAV data chunk is shorter than its declared length")]
    TruncatedData,
    #[error("signal is empty")]
    EmptySignal,
    #[error("expected a mono signal, got {0} channels")]
    NotMono(u16),
    #[error("channel {channel} out of range for a {channels}-channel signal")]
    ChannelOutOfRange { channel: u16, channels: u16 },
    #[error("segment duration must be positive, got {0}")]
    InvalidDuration(f64),
    #[error("I/O failure: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("path {path:?} appears in both {first} and {second} splits")]
    DuplicateAcrossSplits {
        path: String,
        first: Split,
        second: Split,
    },
    #[error("unknown label {0:?} (expected target or non_target)")]
    UnknownLabel(String),
    #[error("unknown split {0:?} (expected train, validation or test)")]
    UnknownSplit(String),
    #[error("manifest CSV error: {0}")]
    Csv(#[from] csv::Error),
    #[error("manifest header must be `path,label,split`, got {0:?}")]
    BadHeader(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Target,
    NonTarget,
}

impl FromStr for Label {
    type Err = ManifestError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "target" => Ok(Label::Target),
            "non_target" => Ok(Label::NonTarget),
            other => Err(ManifestError::UnknownLabel(other.to_string())),
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Target => "target",
            Label::NonTarget => "non_target",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl FromStr for Split {
    type Err = ManifestError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "train" => Ok(Split::Train),
            "validation" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            other => Err(ManifestError::UnknownSplit(other.to_string())),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        })
    }
}

/// Interleaved PCM samples with their rate and channel count.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioSignal {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
    pub channels: u16,
}

impl AudioSignal {
    pub fn mono(samples: Vec<f32>, sample_rate: u32) -> Self {
        Self {
            samples,
            sample_rate,
            channels: 1,
        }
    }

    /// Number of sample frames (samples per channel).
    pub fn frames(&self) -> usize {
        self.samples.len() / self.channels.max(1) as usize
    }

    pub fn duration_s(&self) -> f64 {
        self.frames() as f64 / self.sample_rate as f64
    }

    /// Extracts one channel as a mono signal.
    pub fn select_channel(&self, channel: u16) -> Result<AudioSignal, AudioError> {
        if channel >= self.channels {
            return Err(AudioError::ChannelOutOfRange {
                channel,
                channels: self.channels,
            });
        }
        let stride = self.channels as usize;
        let samples = self
            .samples
            .iter()
            .skip(channel as usize)
            .step_by(stride)
            .copied()
            .collect();
        Ok(AudioSignal::mono(samples, self.sample_rate))
    }

    /// Mono view of the signal: channel 0.
    pub fn to_mono(&self) -> AudioSignal {
        if self.channels <= 1 {
            return self.clone();
        }
        self.select_channel(0).expect("channel 0 always exists")
    }
}

/// A fixed-length mono window cut from a longer recording.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioSegment {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
    pub label: Option<Label>,
    pub source_id: String,
    /// Start of the window within the source, in seconds.
    pub offset_s: f64,
    /// Number of leading samples taken from the source; the rest is zero padding.
    pub valid_len: usize,
}

impl AudioSegment {
    /// Wraps raw samples as an unlabeled segment with no padding.
    pub fn from_samples(samples: Vec<f32>, sample_rate: u32) -> Self {
        let valid_len = samples.len();
        Self {
            samples,
            sample_rate,
            label: None,
            source_id: String::new(),
            offset_s: 0.0,
            valid_len,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn with_samples(&self, samples: Vec<f32>) -> Self {
        Self {
            samples,
            ..self.clone()
        }
    }

    pub fn to_signal(&self) -> AudioSignal {
        AudioSignal::mono(self.samples.clone(), self.sample_rate)
    }
}

fn map_hound(err: hound::Error) -> AudioError {
    match err {
        hound::Error::IoError(e) if e.kind() == io::ErrorKind::UnexpectedEof => {
            AudioError::TruncatedData
        }
        hound::Error::IoError(e) => AudioError::Io(e),
        hound::Error::FormatError(msg) => AudioError::MalformedHeader(msg.to_string()),
        hound::Error::Unsupported => {
            AudioError::UnsupportedEncoding("compressed or unknown sample format".into())
        }
        hound::Error::InvalidSampleFormat => {
            AudioError::UnsupportedEncoding("invalid sample format".into())
        }
        hound::Error::TooWide => AudioError::UnsupportedEncoding("sample too wide".into()),
        other => AudioError::MalformedHeader(other.to_string()),
    }
}

/// hound reports a short data chunk as a generic I/O error while iterating samples.
fn map_sample_read(err: hound::Error) -> AudioError {
    match err {
        hound::Error::IoError(_) => AudioError::TruncatedData,
        other => map_hound(other),
    }
}

/// Reads a RIFF/WAVE file (integer PCM or 32-bit float) into `[-1, 1]` amplitudes.
///
/// Integer samples are divided by `2^(bits-1)`, so int16 maps through `/ 32768`.
pub fn read_wav(path: impl AsRef<Path>) -> Result<AudioSignal, AudioError> {
    let path = path.as_ref();
    let reader = hound::WavReader::open(path).map_err(map_hound)?;
    let spec = reader.spec();
    if spec.channels == 0 {
        return Err(AudioError::MalformedHeader("zero channels".into()));
    }
    if spec.sample_rate == 0 {
        return Err(AudioError::MalformedHeader("zero sample rate".into()));
    }
    let samples: Vec<f32> = match spec.sample_format {
        hound::SampleFormat::Float => {
            if spec.bits_per_sample != 32 {
                return Err(AudioError::UnsupportedEncoding(format!(
                    "{}-bit float",
                    spec.bits_per_sample
                )));
            }
            reader
                .into_samples::<f32>()
                .collect::<Result<_, _>>()
                .map_err(map_sample_read)?
        }
        hound::SampleFormat::Int => {
            let scale = 1.0 / (1u64 << (spec.bits_per_sample - 1)) as f64;
            reader
                .into_samples::<i32>()
                .map(|s| s.map(|v| (v as f64 * scale) as f32))
                .collect::<Result<_, _>>()
                .map_err(map_sample_read)?
        }
    };
    Ok(AudioSignal {
        samples,
        sample_rate: spec.sample_rate,
        channels: spec.channels,
    })
}

/// Float to int16 with clamping (1.0 stores as 32767).
pub fn to_pcm16(x: f32) -> i16 {
    let scaled = (x as f64 * 32768.0).round();
    scaled.clamp(i16::MIN as f64, i16::MAX as f64) as i16
}

/// Writes a 16-bit PCM WAV file.
pub fn write_wav(signal: &AudioSignal, path: impl AsRef<Path>) -> Result<(), AudioError> {
    let spec = hound::WavSpec {
        channels: signal.channels.max(1),
        sample_rate: signal.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(map_hound)?;
    {
        let mut w = writer.get_i16_writer(signal.samples.len() as u32);
        for &s in &signal.samples {
            w.write_sample(to_pcm16(s));
        }
        w.flush().map_err(map_hound)?;
    }
    writer.finalize().map_err(map_hound)?;
    Ok(())
}

/// Cuts a mono signal into consecutive, non-overlapping windows of `duration_s`.
/// The final partial window is zero-padded to full length.
pub fn segment(signal: &AudioSignal, duration_s: f64) -> Result<Vec<AudioSegment>, AudioError> {
    if signal.channels != 1 {
        return Err(AudioError::NotMono(signal.channels));
    }
    if !(duration_s > 0.0) {
        return Err(AudioError::InvalidDuration(duration_s));
    }
    if signal.samples.is_empty() {
        return Err(AudioError::EmptySignal);
    }
    let seg_len = (duration_s * signal.sample_rate as f64).round() as usize;
    if seg_len == 0 {
        return Err(AudioError::InvalidDuration(duration_s));
    }
    let segments = signal
        .samples
        .chunks(seg_len)
        .enumerate()
        .map(|(i, chunk)| {
            let mut samples = Vec::with_capacity(seg_len);
            samples.extend_from_slice(chunk);
            samples.resize(seg_len, 0.0);
            AudioSegment {
                samples,
                sample_rate: signal.sample_rate,
                label: None,
                source_id: String::new(),
                offset_s: (i * seg_len) as f64 / signal.sample_rate as f64,
                valid_len: chunk.len(),
            }
        })
        .collect();
    Ok(segments)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ManifestEntry {
    pub path: String,
    pub label: Label,
    pub split: Split,
}

/// Labeled recordings with their train/validation/test assignment.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    /// Directory relative entry paths are resolved against.
    #[serde(skip)]
    pub base_dir: Option<PathBuf>,
}

impl DatasetManifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn count(&self, split: Split) -> usize {
        self.split(split).count()
    }

    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        let p = Path::new(&entry.path);
        match &self.base_dir {
            Some(base) if p.is_relative() => base.join(p),
            _ => p.to_path_buf(),
        }
    }
}

#[derive(Deserialize)]
struct ManifestRow {
    path: String,
    label: String,
    split: String,
}

/// Parses a manifest from any reader; rows keep file order.
pub fn parse_manifest<R: io::Read>(reader: R) -> Result<DatasetManifest, ManifestError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let cols: Vec<&str> = headers.iter().collect();
    if cols != ["path", "label", "split"] {
        return Err(ManifestError::BadHeader(cols.join(",")));
    }
    let mut seen: HashMap<String, Split> = HashMap::new();
    let mut entries = Vec::new();
    for row in rdr.deserialize::<ManifestRow>() {
        let row = row?;
        let label: Label = row.label.parse()?;
        let split: Split = row.split.parse()?;
        if let Some(&first) = seen.get(&row.path) {
            if first != split {
                return Err(ManifestError::DuplicateAcrossSplits {
                    path: row.path,
                    first,
                    second: split,
                });
            }
        } else {
            seen.insert(row.path.clone(), split);
        }
        entries.push(ManifestEntry {
            path: row.path,
            label,
            split,
        });
    }
    Ok(DatasetManifest {
        entries,
        base_dir: None,
    })
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest, ManifestError> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(csv::Error::from)?;
    let mut manifest = parse_manifest(file)?;
    manifest.base_dir = path.parent().map(Path::to_path_buf);
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn write_raw_pcm16(path: &Path, samples: &[i16], channels: u16, rate: u32) {
        let spec = hound::WavSpec {
            channels,
            sample_rate: rate,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(path, spec).unwrap();
        for &s in samples {
            w.write_sample(s).unwrap();
        }
        w.finalize().unwrap();
    }

    #[test]
    fn pcm16_scaling() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.wav");
        write_raw_pcm16(&p, &[0, 16384, -32768], 1, 16000);
        let sig = read_wav(&p).unwrap();
        assert_eq!(sig.samples, vec![0.0, 0.5, -1.0]);
        assert_eq!(sig.channels, 1);
        assert_eq!(sig.sample_rate, 16000);
    }

    #[test]
    fn four_channels_take_channel_zero() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("quad.wav");
        // Two frames of 4 channels.
        write_raw_pcm16(&p, &[100, 200, 300, 400, -100, -200, -300, -400], 4, 48000);
        let sig = read_wav(&p).unwrap();
        assert_eq!(sig.channels, 4);
        assert_eq!(sig.frames(), 2);
        let mono = sig.to_mono();
        assert_eq!(mono.channels, 1);
        assert_eq!(mono.samples, vec![100.0 / 32768.0, -100.0 / 32768.0]);
        let ch2 = sig.select_channel(2).unwrap();
        assert_eq!(ch2.samples, vec![300.0 / 32768.0, -300.0 / 32768.0]);
        assert!(matches!(
            sig.select_channel(4),
            Err(AudioError::ChannelOutOfRange { .. })
        ));
    }

    #[test]
    fn truncated_data_chunk() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.wav");
        write_raw_pcm16(&p, &[7i16; 100], 1, 16000);
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 10]).unwrap();
        let r = read_wav(&p);
        assert!(matches!(r, Err(AudioError::TruncatedData)), "{r:?}");
    }

    #[test]
    fn not_riff_is_malformed() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.wav");
        std::fs::write(&p, b"RIFX\0\0\0\0WAVEjunkjunkjunkjunkjunkjunkjunkjunk").unwrap();
        assert!(matches!(read_wav(&p), Err(AudioError::MalformedHeader(_))));
    }

    #[test]
    fn compressed_codec_is_unsupported() {
        // Canonical header with format tag 0x0055 (MPEG layer 3).
        let mut b = Vec::new();
        b.extend_from_slice(b"RIFF");
        b.extend_from_slice(&(36u32 + 4).to_le_bytes());
        b.extend_from_slice(b"WAVEfmt ");
        b.extend_from_slice(&16u32.to_le_bytes());
        b.extend_from_slice(&0x0055u16.to_le_bytes());
        b.extend_from_slice(&1u16.to_le_bytes());
        b.extend_from_slice(&16000u32.to_le_bytes());
        b.extend_from_slice(&32000u32.to_le_bytes());
        b.extend_from_slice(&2u16.to_le_bytes());
        b.extend_from_slice(&16u16.to_le_bytes());
        b.extend_from_slice(b"data");
        b.extend_from_slice(&4u32.to_le_bytes());
        b.extend_from_slice(&[0, 0, 0, 0]);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("mp3.wav");
        std::fs::write(&p, b).unwrap();
        assert!(matches!(
            read_wav(&p),
            Err(AudioError::UnsupportedEncoding(_))
        ));
    }

    #[test]
    fn float32_files_are_read() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.wav");
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: 16000,
            bits_per_sample: 32,
            sample_format: hound::SampleFormat::Float,
        };
        let mut w = hound::WavWriter::create(&p, spec).unwrap();
        for s in [0.25f32, -0.75] {
            w.write_sample(s).unwrap();
        }
        w.finalize().unwrap();
        assert_eq!(read_wav(&p).unwrap().samples, vec![0.25, -0.75]);
    }

    #[test]
    fn write_roundtrip_zeros_and_clamp() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("z.wav");
        write_wav(&AudioSignal::mono(vec![0.0; 48000], 16000), &p).unwrap();
        let back = read_wav(&p).unwrap();
        assert_eq!(back.samples.len(), 48000);
        assert!(back.samples.iter().all(|&s| s == 0.0));

        write_wav(&AudioSignal::mono(vec![1.0, -1.0, 2.0], 16000), &p).unwrap();
        let back = read_wav(&p).unwrap();
        assert_eq!(back.samples, vec![32767.0 / 32768.0, -1.0, 32767.0 / 32768.0]);
    }

    #[test]
    fn write_roundtrip_noise_within_one_lsb() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("n.wav");
        let mut rng = SplitMix64::new(11);
        let samples: Vec<f32> = (0..5000).map(|_| rng.uniform(-1.0, 1.0) as f32).collect();
        write_wav(&AudioSignal::mono(samples.clone(), 16000), &p).unwrap();
        let back = read_wav(&p).unwrap();
        let max_err = samples
            .iter()
            .zip(&back.samples)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(max_err <= 1.0 / 32768.0, "max_err {max_err}");
    }

    #[test]
    fn segment_counts_and_padding() {
        let sig = AudioSignal::mono(vec![0.5; 7 * 16000], 16000);
        let segs = segment(&sig, 3.0).unwrap();
        assert_eq!(segs.len(), 3);
        assert!(segs.iter().all(|s| s.samples.len() == 48000));
        assert_eq!(segs[2].valid_len, 16000);
        assert!(segs[2].samples[..16000].iter().all(|&s| s == 0.5));
        assert!(segs[2].samples[16000..].iter().all(|&s| s == 0.0));
        assert_eq!(segs[1].offset_s, 3.0);

        let exact = segment(&AudioSignal::mono(vec![0.1; 48000], 16000), 3.0).unwrap();
        assert_eq!(exact.len(), 1);
        assert_eq!(exact[0].valid_len, 48000);

        let one = segment(&AudioSignal::mono(vec![0.3], 16000), 3.0).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(one[0].valid_len, 1);
        assert_eq!(one[0].samples.iter().filter(|&&s| s == 0.0).count(), 47999);
    }

    #[test]
    fn segment_errors() {
        assert!(matches!(
            segment(&AudioSignal::mono(vec![], 16000), 3.0),
            Err(AudioError::EmptySignal)
        ));
        let stereo = AudioSignal {
            samples: vec![0.0; 4],
            sample_rate: 16000,
            channels: 2,
        };
        assert!(matches!(segment(&stereo, 3.0), Err(AudioError::NotMono(2))));
    }

    #[test]
    fn manifest_80_10_10() {
        let mut csv = String::from("path,label,split\n");
        for i in 0..8 {
            csv.push_str(&format!("a{i}.wav,target,train\n"));
        }
        csv.push_str("v.wav,non_target,validation\n");
        csv.push_str("t.wav,target,test\n");
        let m = parse_manifest(csv.as_bytes()).unwrap();
        assert_eq!(m.entries.len(), 10);
        assert_eq!(m.count(Split::Train), 8);
        assert_eq!(m.count(Split::Validation), 1);
        assert_eq!(m.count(Split::Test), 1);
        assert_eq!(m.entries[0].path, "a0.wav");
        assert_eq!(m.entries[8].label, Label::NonTarget);
    }

    #[test]
    fn manifest_rejects_leakage_and_unknowns() {
        let leak = "path,label,split\nx.wav,target,train\nx.wav,target,test\n";
        assert!(matches!(
            parse_manifest(leak.as_bytes()),
            Err(ManifestError::DuplicateAcrossSplits { .. })
        ));
        let bird = "path,label,split\nx.wav,bird,train\n";
        assert!(matches!(
            parse_manifest(bird.as_bytes()),
            Err(ManifestError::UnknownLabel(l)) if l == "bird"
        ));
        let split = "path,label,split\nx.wav,target,dev\n";
        assert!(matches!(
            parse_manifest(split.as_bytes()),
            Err(ManifestError::UnknownSplit(_))
        ));
        let header = "file,label,split\nx.wav,target,train\n";
        assert!(matches!(
            parse_manifest(header.as_bytes()),
            Err(ManifestError::BadHeader(_))
        ));
    }
}
