//! The screening decision strategy and its batch driver.
//!
//! Every 3 s segment goes through the power gate, then (depending on the
//! variant) the classifier, and ends with one of four verdicts. Stored
//! segments are handed to a [`SegmentSink`] unmodified.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Mutex;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio_io::{self, AudioError, AudioSegment, DatasetManifest, Label, ManifestError, Split};
use crate::budget::{self, BudgetError, EnergyTable, SEGMENT_S};
use crate::dsp::{self, DspError, FilterSos, MelFilterbank, PowerReading, SAMPLE_RATE_HZ};
use crate::metrics::Confusion;
use crate::nn::{self, Activation, Dtype, InputKind, ModelArch, ModelGraph, NnError, WeightSet, TARGET_CLASS};
use crate::quant::{self, QuantError, QuantModel};
use crate::streaming::{self, StreamError};

pub const DEFAULT_T_LOW: f64 = 1.0e-7;
pub const DEFAULT_T_HIGH: f64 = 1.29e-5;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("variant {0} needs a model but none was loaded")]
    ModelMissing(Variant),
    #[error("loaded model is {loaded} but the configuration asks for {configured}")]
    ModelMismatch { configured: ModelArch, loaded: ModelArch },
    #[error("could not store segment: {0}")]
    SinkFailure(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("segment has {actual} samples at {rate} Hz, expected {expected} at 16000 Hz")]
    SegmentShape { expected: usize, actual: usize, rate: u32 },
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error(transparent)]
    Dsp(#[from] DspError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Quant(#[from] QuantError),
    #[error(transparent)]
    Stream(#[from] StreamError),
    #[error(transparent)]
    Budget(#[from] BudgetError),
    #[error("I/O failure: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Power gate only; everything above `t_low` is stored.
    BaselineOnly,
    /// Model on every segment, no gate.
    SkipBaseline,
    /// Gate then model.
    Full,
    /// Gate, direct storage above `t_high`, model in between.
    PowerSaving,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::BaselineOnly,
        Variant::SkipBaseline,
        Variant::Full,
        Variant::PowerSaving,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::BaselineOnly => "baseline-only",
            Variant::SkipBaseline => "skip-baseline",
            Variant::Full => "full",
            Variant::PowerSaving => "power-saving",
        }
    }

    pub fn uses_model(self) -> bool {
        self != Variant::BaselineOnly
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.to_ascii_lowercase().replace('_', "-");
        if norm == "baseline" {
            return Ok(Variant::BaselineOnly);
        }
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == norm)
            .ok_or_else(|| PipelineError::InvalidConfig(format!("unknown variant {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    DiscardedIdle,
    DiscardedByModel,
    StoredDirect,
    StoredAfterModel,
}

impl Verdict {
    pub const ALL: [Verdict; 4] = [
        Verdict::DiscardedIdle,
        Verdict::DiscardedByModel,
        Verdict::StoredDirect,
        Verdict::StoredAfterModel,
    ];

    pub fn is_stored(self) -> bool {
        matches!(self, Verdict::StoredDirect | Verdict::StoredAfterModel)
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::DiscardedIdle => "discarded_idle",
            Verdict::DiscardedByModel => "discarded_by_model",
            Verdict::StoredDirect => "stored_direct",
            Verdict::StoredAfterModel => "stored_after_model",
        })
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerdictCounts {
    pub discarded_idle: usize,
    pub discarded_by_model: usize,
    pub stored_direct: usize,
    pub stored_after_model: usize,
}

impl VerdictCounts {
    pub fn get(&self, v: Verdict) -> usize {
        match v {
            Verdict::DiscardedIdle => self.discarded_idle,
            Verdict::DiscardedByModel => self.discarded_by_model,
            Verdict::StoredDirect => self.stored_direct,
            Verdict::StoredAfterModel => self.stored_after_model,
        }
    }

    pub fn add(&mut self, v: Verdict) {
        match v {
            Verdict::DiscardedIdle => self.discarded_idle += 1,
            Verdict::DiscardedByModel => self.discarded_by_model += 1,
            Verdict::StoredDirect => self.stored_direct += 1,
            Verdict::StoredAfterModel => self.stored_after_model += 1,
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (Verdict, usize)> + '_ {
        Verdict::ALL.into_iter().map(|v| (v, self.get(v)))
    }

    pub fn total(&self) -> usize {
        self.iter().map(|(_, n)| n).sum()
    }

    pub fn stored(&self) -> usize {
        self.stored_direct + self.stored_after_model
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScreeningConfig {
    pub t_low: f64,
    pub t_high: f64,
    pub variant: Variant,
    pub model: Option<ModelArch>,
    pub t_model: f64,
}

impl Default for ScreeningConfig {
    fn default() -> Self {
        Self::for_model(Variant::Full, ModelArch::TransformerTime)
    }
}

impl ScreeningConfig {
    pub fn baseline_only() -> Self {
        Self {
            t_low: DEFAULT_T_LOW,
            t_high: DEFAULT_T_HIGH,
            variant: Variant::BaselineOnly,
            model: None,
            t_model: 0.5,
        }
    }

    /// Default thresholds with the model's tuned decision threshold.
    pub fn for_model(variant: Variant, arch: ModelArch) -> Self {
        Self {
            t_low: DEFAULT_T_LOW,
            t_high: DEFAULT_T_HIGH,
            variant,
            model: Some(arch),
            t_model: arch.default_threshold(),
        }
    }

    pub fn power_saving(&self) -> bool {
        self.variant == Variant::PowerSaving
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::InvalidConfig(m));
        if !(self.t_low > 0.0) {
            return bad(format!("t_low must be positive, got {}", self.t_low));
        }
        if !(self.t_low <= self.t_high) {
            return bad(format!("t_low {} exceeds t_high {}", self.t_low, self.t_high));
        }
        if !(0.0..=1.0).contains(&self.t_model) {
            return bad(format!("t_model {} outside [0, 1]", self.t_model));
        }
        if self.variant.uses_model() && self.model.is_none() {
            return bad(format!("variant {} needs a model", self.variant));
        }
        Ok(())
    }

    /// Model charged by the energy table, if any stage can run one.
    fn billed_model(&self) -> Option<ModelArch> {
        if self.variant.uses_model() {
            self.model
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    PowerGate,
    Preprocess,
    Inference,
    Store,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScreeningOutcome {
    pub verdict: Verdict,
    /// Absent when the gate was skipped.
    pub power: Option<PowerReading>,
    pub model_score: Option<f64>,
    pub stage_trace: Vec<Stage>,
    pub energy_mj: f64,
    pub stored_as: Option<String>,
}

/// How the classifier is executed.
#[derive(Debug, Clone)]
pub enum ModelRuntime {
    Float(WeightSet),
    Quantized(QuantModel),
    /// Float weights with the convolutional prefix run sample by sample.
    Streaming(WeightSet),
}

#[derive(Debug, Clone)]
pub struct ModelBundle {
    pub arch: ModelArch,
    pub graph: ModelGraph,
    pub runtime: ModelRuntime,
    filterbank: Option<MelFilterbank>,
}

impl ModelBundle {
    fn assemble(arch: ModelArch, graph: ModelGraph, runtime: ModelRuntime) -> Self {
        let filterbank = match arch.input_kind() {
            InputKind::LogMel => Some(dsp::default_mel_filterbank()),
            InputKind::Waveform => None,
        };
        Self {
            arch,
            graph,
            runtime,
            filterbank,
        }
    }

    pub fn float(arch: ModelArch, weights: WeightSet) -> Result<Self, PipelineError> {
        let graph = arch.build();
        weights.validate(&graph)?;
        Ok(Self::assemble(arch, graph, ModelRuntime::Float(weights)))
    }

    pub fn streaming(arch: ModelArch, weights: WeightSet) -> Result<Self, PipelineError> {
        let graph = arch.build();
        weights.validate(&graph)?;
        if arch.input_kind() != InputKind::Waveform {
            return Err(PipelineError::InvalidConfig(format!(
                "{arch} takes a spectrogram and cannot be streamed"
            )));
        }
        streaming::StreamState::for_model(&graph, &weights)?;
        Ok(Self::assemble(arch, graph, ModelRuntime::Streaming(weights)))
    }

    pub fn quantized(model: QuantModel) -> Result<Self, PipelineError> {
        let arch = ModelArch::from_graph_name(&model.graph.name).ok_or_else(|| {
            PipelineError::InvalidConfig(format!("unknown model graph {:?}", model.graph.name))
        })?;
        Ok(Self::assemble(arch, model.graph.clone(), ModelRuntime::Quantized(model)))
    }

    /// Reproducible weights for demos and tests.
    pub fn seeded(arch: ModelArch, seed: u64) -> Self {
        let graph = arch.build();
        let weights = nn::seeded_init(&graph, seed);
        Self::assemble(arch, graph, ModelRuntime::Float(weights))
    }

    /// Loads a float or int8 container, whichever the file holds.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, PipelineError> {
        let path = path.as_ref();
        let raw = nn::read_container(std::io::BufReader::new(fs::File::open(path)?))?;
        if raw.header.activations.is_some() {
            Self::quantized(quant::quant_model_from_container(&raw)?)
        } else {
            let arch = ModelArch::from_graph_name(&raw.header.model).ok_or_else(|| {
                PipelineError::InvalidConfig(format!("unknown model graph {:?}", raw.header.model))
            })?;
            raw.header.check_against(&arch.build())?;
            Self::float(arch, nn::weights_from_container(&raw)?)
        }
    }

    pub fn dtype(&self) -> Dtype {
        match self.runtime {
            ModelRuntime::Quantized(_) => Dtype::I8,
            _ => Dtype::F32,
        }
    }

    fn input(&self, segment: &AudioSegment) -> Result<Activation, PipelineError> {
        if segment.sample_rate != SAMPLE_RATE_HZ || segment.len() != nn::INPUT_SAMPLES {
            return Err(PipelineError::SegmentShape {
                expected: nn::INPUT_SAMPLES,
                actual: segment.len(),
                rate: segment.sample_rate,
            });
        }
        match &self.filterbank {
            None => Ok(Activation::waveform(&segment.samples)),
            Some(fb) => {
                let mel = dsp::log_mel_segment(segment, fb)?;
                let (frames, mels) = mel.shape();
                Ok(Activation::image(
                    frames,
                    mels,
                    mel.values.iter().map(|&v| v as f32).collect(),
                )?)
            }
        }
    }

    /// Probability of the target class.
    pub fn score(&self, segment: &AudioSegment) -> Result<f64, PipelineError> {
        let probs = match &self.runtime {
            ModelRuntime::Float(w) => nn::forward(&self.graph, w, &self.input(segment)?)?,
            ModelRuntime::Quantized(q) => quant::quantized_forward(q, &self.input(segment)?)?,
            ModelRuntime::Streaming(w) => {
                self.input(segment)?;
                streaming::stream_forward(&self.graph, w, &segment.samples)?.0
            }
        };
        Ok(probs[TARGET_CLASS] as f64)
    }
}

/// Destination for stored segments.
pub trait SegmentSink: Send + Sync {
    /// Persists `segment` and returns the name it was stored under.
    fn store(&self, segment: &AudioSegment) -> Result<String, PipelineError>;
}

/// `<source_stem>_<offset_ms>.wav`
pub fn stored_name(segment: &AudioSegment) -> String {
    let stem = Path::new(&segment.source_id)
        .file_stem()
        .and_then(|s| s.to_str())
        .filter(|s| !s.is_empty())
        .unwrap_or("segment");
    format!("{stem}_{}.wav", (segment.offset_s * 1000.0).round() as u64)
}

/// Writes stored segments as 16-bit WAV files into a directory.
pub struct DirSink {
    dir: PathBuf,
    lock: Mutex<()>,
}

impl DirSink {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self, PipelineError> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(Self {
            dir,
            lock: Mutex::new(()),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }
}

impl SegmentSink for DirSink {
    fn store(&self, segment: &AudioSegment) -> Result<String, PipelineError> {
        let name = stored_name(segment);
        let _guard = self.lock.lock().unwrap_or_else(|e| e.into_inner());
        audio_io::write_wav(&segment.to_signal(), self.dir.join(&name))
            .map_err(|e| PipelineError::SinkFailure(format!("{name}: {e}")))?;
        Ok(name)
    }
}

/// Keeps stored segments in memory.
#[derive(Default)]
pub struct MemorySink {
    stored: Mutex<Vec<AudioSegment>>,
}

impl MemorySink {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn take(&self) -> Vec<AudioSegment> {
        std::mem::take(&mut *self.stored.lock().unwrap_or_else(|e| e.into_inner()))
    }

    pub fn len(&self) -> usize {
        self.stored.lock().unwrap_or_else(|e| e.into_inner()).len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl SegmentSink for MemorySink {
    fn store(&self, segment: &AudioSegment) -> Result<String, PipelineError> {
        let name = stored_name(segment);
        self.stored
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .push(segment.clone());
        Ok(name)
    }
}

/// Discards everything; for dry runs.
pub struct NullSink;

impl SegmentSink for NullSink {
    fn store(&self, segment: &AudioSegment) -> Result<String, PipelineError> {
        Ok(stored_name(segment))
    }
}

/// Configuration plus everything a segment decision needs.
pub struct Screener {
    pub config: ScreeningConfig,
    pub model: Option<ModelBundle>,
    pub filter: FilterSos,
    pub table: EnergyTable,
}

impl Screener {
    pub fn new(config: ScreeningConfig, model: Option<ModelBundle>) -> Result<Self, PipelineError> {
        config.validate()?;
        if config.variant.uses_model() {
            let bundle = model.as_ref().ok_or(PipelineError::ModelMissing(config.variant))?;
            let configured = config.model.expect("validated");
            if bundle.arch != configured {
                return Err(PipelineError::ModelMismatch {
                    configured,
                    loaded: bundle.arch,
                });
            }
        }
        Ok(Self {
            config,
            model,
            filter: dsp::baseline_highpass(),
            table: EnergyTable::nrf52840(),
        })
    }

    pub fn screen(
        &self,
        segment: &AudioSegment,
        sink: &dyn SegmentSink,
    ) -> Result<ScreeningOutcome, PipelineError> {
        let cfg = &self.config;
        let mut trace = Vec::with_capacity(4);
        let mut power = None;
        let mut score = None;

        let verdict = 'decide: {
            if cfg.variant != Variant::SkipBaseline {
                trace.push(Stage::PowerGate);
                let p = dsp::baseline_power(&self.filter, segment)?;
                power = Some(p);
                if p.p < cfg.t_low {
                    break 'decide Verdict::DiscardedIdle;
                }
                match cfg.variant {
                    Variant::BaselineOnly => break 'decide Verdict::StoredDirect,
                    Variant::PowerSaving if p.p >= cfg.t_high => {
                        break 'decide Verdict::StoredDirect
                    }
                    _ => {}
                }
            }
            let bundle = self
                .model
                .as_ref()
                .ok_or(PipelineError::ModelMissing(cfg.variant))?;
            if bundle.arch.input_kind() == InputKind::LogMel {
                trace.push(Stage::Preprocess);
            }
            trace.push(Stage::Inference);
            let s = bundle.score(segment)?;
            score = Some(s);
            if s < cfg.t_model {
                Verdict::DiscardedByModel
            } else {
                Verdict::StoredAfterModel
            }
        };

        let stored_as = if verdict.is_stored() {
            trace.push(Stage::Store);
            Some(sink.store(segment)?)
        } else {
            None
        };
        let energy_mj = self
            .table
            .verdict_energy(verdict, cfg.variant, cfg.billed_model())?;
        Ok(ScreeningOutcome {
            verdict,
            power,
            model_score: score,
            stage_trace: trace,
            energy_mj,
            stored_as,
        })
    }
}

/// One-shot form of [`Screener::screen`].
pub fn screen_segment(
    segment: &AudioSegment,
    config: &ScreeningConfig,
    model: Option<&ModelBundle>,
    sink: &dyn SegmentSink,
) -> Result<ScreeningOutcome, PipelineError> {
    Screener::new(*config, model.cloned())?.screen(segment, sink)
}

/// Where the batch driver reads recordings from.
#[derive(Debug, Clone)]
pub enum PipelineInput {
    /// Every `.wav` under a directory, recursively.
    Dir(PathBuf),
    /// A labeled manifest, optionally restricted to one split.
    Manifest { path: PathBuf, split: Option<Split> },
    Files(Vec<PathBuf>),
}

impl PipelineInput {
    /// A directory, a `.csv` manifest, or a single WAV.
    pub fn from_path(path: impl Into<PathBuf>) -> Self {
        let path = path.into();
        if path.is_dir() {
            PipelineInput::Dir(path)
        } else if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
            PipelineInput::Manifest { path, split: None }
        } else {
            PipelineInput::Files(vec![path])
        }
    }

    /// Recordings to process, sorted by path, with labels when known.
    pub fn resolve(&self) -> Result<Vec<(PathBuf, Option<Label>)>, PipelineError> {
        let mut items: Vec<(PathBuf, Option<Label>)> = match self {
            PipelineInput::Dir(dir) => {
                let mut files = Vec::new();
                collect_wavs(dir, &mut files)?;
                files.into_iter().map(|p| (p, None)).collect()
            }
            PipelineInput::Manifest { path, split } => {
                let manifest: DatasetManifest = audio_io::load_manifest(path)?;
                manifest
                    .entries
                    .iter()
                    .filter(|e| split.is_none_or(|s| e.split == s))
                    .map(|e| (manifest.resolve(e), Some(e.label)))
                    .collect()
            }
            PipelineInput::Files(files) => files.iter().map(|p| (p.clone(), None)).collect(),
        };
        items.sort_by(|a, b| a.0.cmp(&b.0));
        Ok(items)
    }
}

fn collect_wavs(dir: &Path, out: &mut Vec<PathBuf>) -> Result<(), PipelineError> {
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            collect_wavs(&path, out)?;
        } else if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("wav")) {
            out.push(path);
        }
    }
    Ok(())
}

/// Loads a recording as 16 kHz mono 3 s segments tagged with its path and label.
pub fn load_segments(
    path: &Path,
    label: Option<Label>,
) -> Result<Vec<AudioSegment>, PipelineError> {
    let signal = audio_io::read_wav(path)?.to_mono();
    let signal = if signal.sample_rate == SAMPLE_RATE_HZ {
        signal
    } else {
        dsp::downsample_zoh(&signal, SAMPLE_RATE_HZ)?
    };
    let source = path.to_string_lossy().into_owned();
    Ok(audio_io::segment(&signal, SEGMENT_S)?
        .into_iter()
        .map(|mut s| {
            s.source_id = source.clone();
            s.label = label;
            s
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SegmentRecord {
    pub source: String,
    pub offset_s: f64,
    pub verdict: Verdict,
    pub power: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub label: Option<Label>,
    pub energy_mj: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FileError {
    pub source: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SessionReport {
    pub config: ScreeningConfig,
    pub dtype: Option<Dtype>,
    pub files: usize,
    pub counts: VerdictCounts,
    /// Energy of the stages that ran, in mJ.
    pub energy_mj_total: f64,
    /// Idle draw over the rest of every segment window, in mJ.
    pub energy_mj_idle: f64,
    pub per_segment: Vec<SegmentRecord>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub confusion: Option<Confusion>,
    pub errors: Vec<FileError>,
}

impl SessionReport {
    /// Stored segments as `(source, offset_s)` pairs.
    pub fn stored(&self) -> Vec<(String, f64)> {
        self.per_segment
            .iter()
            .filter(|r| r.verdict.is_stored())
            .map(|r| (r.source.clone(), r.offset_s))
            .collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Screens already-loaded segments in order and aggregates the results.
pub fn screen_all(
    screener: &Screener,
    segments: &[AudioSegment],
    sink: &dyn SegmentSink,
) -> Result<SessionReport, PipelineError> {
    let mut records = Vec::with_capacity(segments.len());
    for seg in segments {
        let out = screener.screen(seg, sink)?;
        records.push(record(seg, &out));
    }
    summarize(screener, records, Vec::new(), 0)
}

fn record(seg: &AudioSegment, out: &ScreeningOutcome) -> SegmentRecord {
    SegmentRecord {
        source: seg.source_id.clone(),
        offset_s: seg.offset_s,
        verdict: out.verdict,
        power: out.power.map(|p| p.p),
        score: out.model_score,
        label: seg.label,
        energy_mj: out.energy_mj,
    }
}

fn summarize(
    screener: &Screener,
    per_segment: Vec<SegmentRecord>,
    errors: Vec<FileError>,
    files: usize,
) -> Result<SessionReport, PipelineError> {
    let cfg = screener.config;
    let mut counts = VerdictCounts::default();
    let mut confusion = Confusion::default();
    let mut labeled = 0usize;
    for r in &per_segment {
        counts.add(r.verdict);
        if let Some(l) = r.label {
            confusion.record(r.verdict.is_stored(), l);
            labeled += 1;
        }
    }
    let billed = cfg.billed_model();
    let energy_mj_total = budget::session_energy(&counts, &screener.table, cfg.variant, billed)?;
    let energy_mj_idle =
        budget::session_idle_energy(&counts, &screener.table, cfg.variant, billed, SEGMENT_S)?;
    Ok(SessionReport {
        config: cfg,
        dtype: screener.model.as_ref().map(|m| m.dtype()),
        files,
        counts,
        energy_mj_total,
        energy_mj_idle,
        per_segment,
        confusion: (labeled > 0).then_some(confusion),
        errors,
    })
}

/// Batch driver: screens every recording, isolating per-file failures.
///
/// Files are processed on `jobs` threads; the report is ordered by source path
/// then offset regardless of scheduling.
pub fn run_pipeline(
    input: &PipelineInput,
    screener: &Screener,
    sink: &dyn SegmentSink,
    jobs: usize,
) -> Result<SessionReport, PipelineError> {
    let items = input.resolve()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| PipelineError::InvalidConfig(format!("thread pool: {e}")))?;
    let results: Vec<(String, Result<Vec<SegmentRecord>, PipelineError>)> = pool.install(|| {
        items
            .par_iter()
            .map(|(path, label)| {
                let source = path.to_string_lossy().into_owned();
                let res = load_segments(path, *label).and_then(|segs| {
                    segs.iter()
                        .map(|s| screener.screen(s, sink).map(|o| record(s, &o)))
                        .collect()
                });
                (source, res)
            })
            .collect()
    });

    let mut by_source: BTreeMap<String, Vec<SegmentRecord>> = BTreeMap::new();
    let mut errors = Vec::new();
    for (source, res) in results {
        match res {
            Ok(recs) => {
                by_source.insert(source, recs);
            }
            Err(e) => errors.push(FileError {
                source,
                error: e.to_string(),
            }),
        }
    }
    let per_segment = by_source.into_values().flatten().collect();
    summarize(screener, per_segment, errors, items.len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics;
    use crate::nn::build_transformer_time;
    use crate::synth;
    use proptest::prelude::*;

    fn tone() -> AudioSegment {
        synth::tone_with_power(&dsp::baseline_highpass(), 7500.0, 2e-5).unwrap()
    }

    /// Transformer-Time whose final layer outputs logits with P(target) = `p`
    /// exactly for `segment`.
    fn pinned_model(segment: &AudioSegment, p: f64) -> ModelBundle {
        let graph = build_transformer_time();
        let mut w = nn::seeded_init(&graph, 42);
        let last = graph.layers.len() - 2;
        let trace = nn::forward_trace(&graph, &w, &Activation::waveform(&segment.samples)).unwrap();
        let h: Vec<f64> = trace[last].data.iter().map(|&v| v as f64).collect();
        let norm2: f64 = h.iter().map(|v| v * v).sum();
        let lw = w.layer_mut(last).unwrap();
        let dim = h.len();
        let c = (p / (1.0 - p)).ln();
        let wt = &mut lw.tensors[0].data;
        for j in 0..dim {
            wt[dim + j] = wt[j] + (c * h[j] / norm2) as f32;
        }
        if let Some(b) = lw.tensors.get_mut(1) {
            b.data[1] = b.data[0];
        }
        ModelBundle::float(ModelArch::TransformerTime, w).unwrap()
    }

    #[test]
    fn silence_is_discarded_without_inference() {
        let cfg = ScreeningConfig::for_model(Variant::Full, ModelArch::TransformerTime);
        let model = ModelBundle::seeded(ModelArch::TransformerTime, 1);
        let out = screen_segment(&synth::silence(), &cfg, Some(&model), &NullSink).unwrap();
        assert_eq!(out.verdict, Verdict::DiscardedIdle);
        assert_eq!(out.power.unwrap().p, 0.0);
        assert_eq!(out.model_score, None);
        assert_eq!(out.stage_trace, vec![Stage::PowerGate]);
        assert!((out.energy_mj - 2.136).abs() < 1e-12);
    }

    #[test]
    fn power_saving_bypasses_model_above_t_high() {
        let seg = tone();
        let cfg = ScreeningConfig::for_model(Variant::PowerSaving, ModelArch::TransformerTime);
        let model = pinned_model(&seg, 0.1);
        let sink = MemorySink::new();
        let out = screen_segment(&seg, &cfg, Some(&model), &sink).unwrap();
        assert_eq!(out.verdict, Verdict::StoredDirect);
        assert_eq!(out.model_score, None);
        assert_eq!(sink.take(), vec![seg]);
    }

    #[test]
    fn full_discards_low_score() {
        let seg = tone();
        let model = pinned_model(&seg, 0.1);
        assert!((model.score(&seg).unwrap() - 0.1).abs() < 1e-4);
        let cfg = ScreeningConfig::for_model(Variant::Full, ModelArch::TransformerTime);
        assert_eq!(cfg.t_model, 0.27);
        let sink = MemorySink::new();
        let out = screen_segment(&seg, &cfg, Some(&model), &sink).unwrap();
        assert_eq!(out.verdict, Verdict::DiscardedByModel);
        assert!(sink.is_empty());
        assert_eq!(out.stage_trace, vec![Stage::PowerGate, Stage::Inference]);
        assert!((out.energy_mj - 21.404).abs() < 1e-12);
    }

    #[test]
    fn high_score_is_stored_after_model() {
        let seg = tone();
        let model = pinned_model(&seg, 0.9);
        let cfg = ScreeningConfig::for_model(Variant::Full, ModelArch::TransformerTime);
        let out = screen_segment(&seg, &cfg, Some(&model), &NullSink).unwrap();
        assert_eq!(out.verdict, Verdict::StoredAfterModel);
        assert_eq!(out.stage_trace.last(), Some(&Stage::Store));
    }

    #[test]
    fn missing_model_and_bad_config() {
        let cfg = ScreeningConfig::for_model(Variant::Full, ModelArch::CnnTime);
        assert!(matches!(
            Screener::new(cfg, None),
            Err(PipelineError::ModelMissing(Variant::Full))
        ));
        let bad = ScreeningConfig {
            t_low: 1e-3,
            t_high: 1e-5,
            ..ScreeningConfig::baseline_only()
        };
        assert!(matches!(bad.validate(), Err(PipelineError::InvalidConfig(_))));
        let bad = ScreeningConfig {
            t_model: 1.5,
            ..ScreeningConfig::baseline_only()
        };
        assert!(bad.validate().is_err());
        assert!(matches!(
            Screener::new(cfg, Some(ModelBundle::seeded(ModelArch::TransformerTime, 0))),
            Err(PipelineError::ModelMismatch { .. })
        ));
    }

    struct FailingSink;
    impl SegmentSink for FailingSink {
        fn store(&self, _: &AudioSegment) -> Result<String, PipelineError> {
            Err(PipelineError::SinkFailure("disk full".into()))
        }
    }

    #[test]
    fn sink_failure_propagates() {
        let s = Screener::new(ScreeningConfig::baseline_only(), None).unwrap();
        assert!(matches!(s.screen(&tone(), &FailingSink), Err(PipelineError::SinkFailure(_))));
    }

    #[test]
    fn mel_model_preprocesses() {
        let cfg = ScreeningConfig::for_model(Variant::SkipBaseline, ModelArch::CnnMel);
        let model = ModelBundle::seeded(ModelArch::CnnMel, 3);
        let out = screen_segment(&synth::silence(), &cfg, Some(&model), &NullSink).unwrap();
        assert_eq!(out.power, None);
        assert_eq!(out.stage_trace[..2], [Stage::Preprocess, Stage::Inference]);
        assert!(out.model_score.is_some());
        assert!((out.energy_mj - 42.525).abs() < 1e-12);
    }

    #[test]
    fn streaming_runtime_matches_float() {
        let graph = ModelArch::CnnTime.build();
        let w = nn::seeded_init(&graph, 11);
        let seg = synth::segment_of(synth::random_waveform(5, nn::INPUT_SAMPLES));
        let a = ModelBundle::float(ModelArch::CnnTime, w.clone()).unwrap().score(&seg).unwrap();
        let b = ModelBundle::streaming(ModelArch::CnnTime, w).unwrap().score(&seg).unwrap();
        assert!((a - b).abs() < 1e-5);
        assert!(ModelBundle::streaming(ModelArch::CnnMel, nn::seeded_init(&ModelArch::CnnMel.build(), 0)).is_err());
    }

    #[test]
    fn stored_name_uses_stem_and_millis() {
        let mut seg = synth::silence();
        seg.source_id = "/data/site_a/rec01.wav".into();
        seg.offset_s = 6.0;
        assert_eq!(stored_name(&seg), "rec01_6000.wav");
    }

    fn corpus(n: usize, seed: u64) -> Vec<AudioSegment> {
        let mut rng = crate::rng::SplitMix64::new(seed);
        (0..n)
            .map(|i| {
                let mut seg = match rng.below(3) {
                    0 => synth::silence(),
                    1 => synth::segment_of(synth::white_noise(rng.next_u64(), rng.uniform(1e-4, 1.0), nn::INPUT_SAMPLES)),
                    _ => synth::segment_of(synth::random_waveform(rng.next_u64(), nn::INPUT_SAMPLES)),
                };
                seg.source_id = format!("c{i:03}.wav");
                seg.label = Some(if rng.bernoulli(0.3) { Label::Target } else { Label::NonTarget });
                seg
            })
            .collect()
    }

    fn run(segs: &[AudioSegment], cfg: ScreeningConfig, model: &ModelBundle) -> SessionReport {
        let m = cfg.variant.uses_model().then(|| model.clone());
        let s = Screener::new(cfg, m).unwrap();
        screen_all(&s, segs, &NullSink).unwrap()
    }

    #[test]
    fn variant_invariants_on_mixed_corpus() {
        let segs = corpus(24, 9);
        let model = ModelBundle::seeded(ModelArch::CnnTime, 4);
        let cfg = |v| ScreeningConfig {
            t_model: 0.5,
            ..ScreeningConfig::for_model(v, ModelArch::CnnTime)
        };
        let base = run(&segs, ScreeningConfig::baseline_only(), &model);
        let ps = run(&segs, cfg(Variant::PowerSaving), &model);
        let full = run(&segs, cfg(Variant::Full), &model);
        let skip = run(&segs, cfg(Variant::SkipBaseline), &model);
        assert!(base.energy_mj_total <= ps.energy_mj_total);
        assert!(ps.energy_mj_total <= full.energy_mj_total);
        assert!(full.energy_mj_total <= skip.energy_mj_total);
        let ps_stored = ps.stored();
        assert!(full.stored().iter().all(|s| ps_stored.contains(s)));
        assert_eq!(full, run(&segs, cfg(Variant::Full), &model));

        let c = full.confusion.unwrap();
        let labels: Vec<Label> = full.per_segment.iter().map(|r| r.label.unwrap()).collect();
        let stored: Vec<f64> = full.per_segment.iter().map(|r| if r.verdict.is_stored() { 1.0 } else { 0.0 }).collect();
        assert_eq!(c, metrics::confusion(&stored, &labels, 0.5).unwrap());
    }

    #[test]
    fn batch_driver_over_directory() {
        let dir = tempfile::tempdir().unwrap();
        let out = tempfile::tempdir().unwrap();
        let silent = synth::silence().to_signal();
        let mut tone_sig = tone().to_signal();
        for i in 0..10 {
            audio_io::write_wav(&silent, dir.path().join(format!("s{i:02}.wav"))).unwrap();
        }
        tone_sig.samples = tone_sig.samples.repeat(5);
        audio_io::write_wav(&tone_sig, dir.path().join("tone.wav")).unwrap();
        fs::write(dir.path().join("broken.wav"), b"RIFFnope").unwrap();

        let screener = Screener::new(ScreeningConfig::baseline_only(), None).unwrap();
        let sink = DirSink::new(out.path()).unwrap();
        let input = PipelineInput::Dir(dir.path().into());
        let rep = run_pipeline(&input, &screener, &sink, 4).unwrap();
        assert_eq!(rep.counts.discarded_idle, 10);
        assert_eq!(rep.counts.stored_direct, 5);
        assert_eq!(rep.errors.len(), 1);
        assert_eq!(rep.files, 12);
        assert_eq!(fs::read_dir(out.path()).unwrap().count(), 5);
        assert!(out.path().join("tone_12000.wav").exists());
        let again = run_pipeline(&input, &screener, &NullSink, 1).unwrap();
        assert_eq!(rep, again);

        let empty = tempfile::tempdir().unwrap();
        let rep = run_pipeline(&PipelineInput::Dir(empty.path().into()), &screener, &NullSink, 1).unwrap();
        assert_eq!(rep.counts.total(), 0);
        assert_eq!(rep.energy_mj_total, 0.0);
    }

    #[test]
    fn report_json_shape() {
        let s = Screener::new(ScreeningConfig::baseline_only(), None).unwrap();
        let rep = screen_all(&s, &[synth::silence()], &NullSink).unwrap();
        let v: serde_json::Value = serde_json::from_str(&rep.to_json()).unwrap();
        for key in ["config", "counts", "energy_mj_total", "per_segment", "errors"] {
            assert!(v.get(key).is_some(), "{key}");
        }
        assert_eq!(v["per_segment"][0]["verdict"], "discarded_idle");
        assert_eq!(v["config"]["variant"], "baseline-only");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]
        #[test]
        fn raising_t_low_discards_more(seed in 0u64..1000, a in -9.0f64..-3.0, b in -9.0f64..-3.0) {
            let segs = corpus(8, seed);
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let model = ModelBundle::seeded(ModelArch::CnnTime, 0);
            let cfg = |t: f64| ScreeningConfig { t_low: 10f64.powf(t), t_high: 1.0, ..ScreeningConfig::baseline_only() };
            let r_lo = run(&segs, cfg(lo), &model);
            let r_hi = run(&segs, cfg(hi), &model);
            prop_assert!(r_hi.counts.discarded_idle >= r_lo.counts.discarded_idle);
        }
    }
}
