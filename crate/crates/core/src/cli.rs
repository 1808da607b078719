//! Command-line front end.
//!
//! Settings resolve as flag, then `--config` file (TOML or JSON, top-level keys
//! or a table named after the subcommand), then `TINYCHIRP_<KEY>` environment
//! variables, then built-in defaults. Exit codes: 0 success, 1 data errors,
//! 2 usage errors.

use std::ffi::OsString;
use std::fmt::Display;
use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::audio_io::{self, Label, Split};
use crate::budget::{self, DeploymentProfile, IdleAccounting};
use crate::dsp::{self, SAMPLE_RATE_HZ};
use crate::metrics;
use crate::nn::{self, Activation, InputKind, ModelArch, INPUT_SAMPLES};
use crate::pipeline::{
    self, DirSink, ModelBundle, NullSink, PipelineInput, Screener, ScreeningConfig, SegmentSink,
    Variant,
};
use crate::quant;
use crate::rng::SplitMix64;
use crate::streaming;
use crate::synth;

pub const ENV_PREFIX: &str = "TINYCHIRP_";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Data(_) => 1,
        }
    }
}

fn data<E: Display>(e: E) -> CliError {
    CliError::Data(e.to_string())
}

fn usage<E: Display>(e: E) -> CliError {
    CliError::Usage(e.to_string())
}

#[derive(Debug, Parser)]
#[command(name = "tinychirp", version, about = "Two-stage bird song screening toolkit")]
pub struct Cli {
    /// TOML or JSON file with default settings.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every randomized path.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for file-level parallelism.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Cut recordings into 3 s 16 kHz segments, optionally with log-mel matrices.
    Preprocess(PreprocessArgs),
    /// Run the screening pipeline over recordings.
    Screen(ScreenArgs),
    /// ROC, AUC and F-beta threshold search over scores.
    Eval(EvalArgs),
    /// Check streaming convolution against the materialized oracle.
    Verify(VerifyArgs),
    /// Post-training int8 quantization of a model.
    Quantize(QuantizeArgs),
    /// Storage and battery lifetime estimate.
    Budget(BudgetArgs),
}

#[derive(Debug, Args)]
struct PreprocessArgs {
    /// Input directory (searched recursively) or a single WAV.
    input: PathBuf,
    /// Output directory.
    out: PathBuf,
    /// Also write a 184x80 log-mel matrix per segment.
    #[arg(long)]
    mel: bool,
    /// Matrix format: `bin` (TCSP float32) or `csv`.
    #[arg(long)]
    mel_format: Option<String>,
    /// Channel taken from multi-channel files.
    #[arg(long)]
    channel: Option<u16>,
}

#[derive(Debug, Args)]
struct ScreenArgs {
    /// Directory, manifest CSV or WAV file.
    input: PathBuf,
    /// baseline-only (or baseline), skip-baseline, full, power-saving.
    #[arg(long)]
    variant: Option<String>,
    /// cnn-time, transformer-time or cnn-mel.
    #[arg(long)]
    model: Option<String>,
    /// Float or int8 weight container. Without it, seeded weights are used.
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long)]
    t_low: Option<f64>,
    #[arg(long)]
    t_high: Option<f64>,
    #[arg(long)]
    t_model: Option<f64>,
    /// Directory for stored segments.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Report path; stdout when absent.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Manifest split to screen.
    #[arg(long)]
    split: Option<String>,
    /// Run the convolutional prefix point by point.
    #[arg(long)]
    streaming: bool,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// CSV with `score,label` columns.
    #[arg(long, conflicts_with_all = ["manifest", "weights"])]
    scores: Option<PathBuf>,
    /// Labeled manifest to score with a model.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Model name, or `baseline` to score by signal power.
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long)]
    split: Option<String>,
    #[arg(long)]
    beta: Option<f64>,
    /// Include ROC points in the output.
    #[arg(long)]
    roc: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct VerifyArgs {
    #[arg(long)]
    trials: Option<usize>,
}

#[derive(Debug, Args)]
struct QuantizeArgs {
    #[arg(long)]
    model: Option<String>,
    /// Float weight container. Without it, seeded weights are used.
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Calibration manifest, directory or WAV. Without it, seeded synthetic inputs.
    #[arg(long)]
    calib: Option<PathBuf>,
    /// Calibration segments to use.
    #[arg(long)]
    calib_count: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct BudgetArgs {
    #[arg(long)]
    battery_mwh: Option<f64>,
    #[arg(long)]
    sd_bytes: Option<f64>,
    #[arg(long)]
    record_rate: Option<f64>,
    /// Choose the record rate so that storing everything fills the card in this many days.
    #[arg(long)]
    storage_days_at_full: Option<f64>,
    #[arg(long)]
    segment_s: Option<f64>,
    #[arg(long)]
    active_fraction: Option<f64>,
    #[arg(long)]
    store_fraction: Option<f64>,
    #[arg(long)]
    bypass_fraction: Option<f64>,
    #[arg(long)]
    variant: Option<String>,
    /// Model name, or `none`.
    #[arg(long)]
    model: Option<String>,
    /// active-only or continuous.
    #[arg(long)]
    idle: Option<String>,
    /// json or table.
    #[arg(long)]
    format: Option<String>,
}

/// Config file and environment layers for one subcommand.
pub struct Settings<'a> {
    file: serde_json::Map<String, Value>,
    section: serde_json::Map<String, Value>,
    env: &'a dyn Fn(&str) -> Option<String>,
}

impl<'a> Settings<'a> {
    pub fn load(
        path: Option<&Path>,
        subcommand: &str,
        env: &'a dyn Fn(&str) -> Option<String>,
    ) -> Result<Self, CliError> {
        let root = match path {
            None => Value::Object(Default::default()),
            Some(p) => {
                let text = fs::read_to_string(p)
                    .map_err(|e| usage(format!("config {}: {e}", p.display())))?;
                let is_json = p.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
                if is_json {
                    serde_json::from_str(&text)
                        .map_err(|e| usage(format!("config {}: {e}", p.display())))?
                } else {
                    let v: toml::Value = toml::from_str(&text)
                        .map_err(|e| usage(format!("config {}: {e}", p.display())))?;
                    serde_json::to_value(v).map_err(usage)?
                }
            }
        };
        let Value::Object(mut file) = root else {
            return Err(usage("config file must hold a table"));
        };
        let section = match file.remove(subcommand) {
            Some(Value::Object(m)) => m,
            _ => Default::default(),
        };
        file.retain(|_, v| !v.is_object());
        Ok(Self { file, section, env })
    }

    fn layered(&self, key: &str) -> Option<(String, String)> {
        let norm = key.replace('-', "_");
        let from_file = |m: &serde_json::Map<String, Value>| {
            m.get(&norm).or_else(|| m.get(key)).map(|v| match v {
                Value::String(s) => s.clone(),
                other => other.to_string(),
            })
        };
        if let Some(v) = from_file(&self.section).or_else(|| from_file(&self.file)) {
            return Some(("config".into(), v));
        }
        let var = format!("{ENV_PREFIX}{}", norm.to_ascii_uppercase());
        (self.env)(&var).map(|v| (var, v))
    }

    /// Flag if given, else config, else environment.
    pub fn pick<T: FromStr>(&self, key: &str, flag: Option<T>) -> Result<Option<T>, CliError>
    where
        T::Err: Display,
    {
        if flag.is_some() {
            return Ok(flag);
        }
        match self.layered(key) {
            None => Ok(None),
            Some((origin, raw)) => raw
                .trim()
                .parse()
                .map(Some)
                .map_err(|e| usage(format!("{key} from {origin}: {e}"))),
        }
    }

    pub fn or<T: FromStr>(&self, key: &str, flag: Option<T>, default: T) -> Result<T, CliError>
    where
        T::Err: Display,
    {
        Ok(self.pick(key, flag)?.unwrap_or(default))
    }

    /// A boolean switch: set by the flag or enabled by a lower layer.
    pub fn switch(&self, key: &str, flag: bool) -> Result<bool, CliError> {
        Ok(flag || self.pick::<bool>(key, None)?.unwrap_or(false))
    }
}

/// Runs the CLI with process environment and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    run_with_env(args, &|k| std::env::var(k).ok())
}

pub fn run_with_env<I, T>(args: I, env: &dyn Fn(&str) -> Option<String>) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(cli, env) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

struct Common {
    seed: u64,
    jobs: usize,
}

fn dispatch(cli: Cli, env: &dyn Fn(&str) -> Option<String>) -> Result<i32, CliError> {
    let name = match &cli.command {
        Command::Preprocess(_) => "preprocess",
        Command::Screen(_) => "screen",
        Command::Eval(_) => "eval",
        Command::Verify(_) => "verify",
        Command::Quantize(_) => "quantize",
        Command::Budget(_) => "budget",
    };
    let s = Settings::load(cli.config.as_deref(), name, env)?;
    let common = Common {
        seed: s.or("seed", cli.seed, 0)?,
        jobs: s.or("jobs", cli.jobs, 1)?.max(1),
    };
    match cli.command {
        Command::Preprocess(a) => cmd_preprocess(a, &s, &common),
        Command::Screen(a) => cmd_screen(a, &s, &common),
        Command::Eval(a) => cmd_eval(a, &s, &common),
        Command::Verify(a) => cmd_verify(a, &s, &common),
        Command::Quantize(a) => cmd_quantize(a, &s, &common),
        Command::Budget(a) => cmd_budget(a, &s),
    }
}

fn emit(value: &impl Serialize, path: Option<&Path>) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(data)?;
    match path {
        Some(p) => fs::write(p, text + "\n").map_err(|e| data(format!("{}: {e}", p.display()))),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn parse_model(name: &str) -> Result<ModelArch, CliError> {
    name.parse().map_err(usage)
}

fn thread_pool(jobs: usize) -> Result<rayon::ThreadPool, CliError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(data)
}

#[derive(Serialize)]
struct PreprocessSummary {
    files: usize,
    segments: usize,
    mel_matrices: usize,
    errors: Vec<pipeline::FileError>,
}

fn cmd_preprocess(a: PreprocessArgs, s: &Settings, c: &Common) -> Result<i32, CliError> {
    let mel = s.switch("mel", a.mel)?;
    let csv = match s.or("mel-format", a.mel_format, "bin".to_string())?.as_str() {
        "bin" => false,
        "csv" => true,
        other => return Err(usage(format!("unknown mel format {other:?}"))),
    };
    let channel = s.or("channel", a.channel, 0u16)?;
    if !a.input.exists() {
        return Err(usage(format!("{} does not exist", a.input.display())));
    }
    let files = if a.input.is_dir() {
        PipelineInput::Dir(a.input.clone())
    } else {
        PipelineInput::Files(vec![a.input.clone()])
    }
    .resolve()
    .map_err(data)?;
    if files.is_empty() {
        eprintln!("warning: no WAV files under {}", a.input.display());
    }
    fs::create_dir_all(&a.out).map_err(data)?;
    let fb = dsp::default_mel_filterbank();

    let one = |path: &PathBuf| -> Result<(usize, usize), String> {
        let signal = audio_io::read_wav(path)
            .and_then(|sig| if sig.channels > 1 { sig.select_channel(channel) } else { Ok(sig) })
            .map_err(|e| e.to_string())?;
        let signal = if signal.sample_rate == SAMPLE_RATE_HZ {
            signal
        } else {
            dsp::downsample_zoh(&signal, SAMPLE_RATE_HZ).map_err(|e| e.to_string())?
        };
        let mut segs = audio_io::segment(&signal, budget::SEGMENT_S).map_err(|e| e.to_string())?;
        let mut mats = 0;
        for seg in &mut segs {
            seg.source_id = path.to_string_lossy().into_owned();
            let name = pipeline::stored_name(seg);
            audio_io::write_wav(&seg.to_signal(), a.out.join(&name)).map_err(|e| e.to_string())?;
            if mel {
                let m = dsp::log_mel_segment(seg, &fb).map_err(|e| e.to_string())?;
                let stem = name.trim_end_matches(".wav");
                let target = a.out.join(format!("{stem}.{}", if csv { "csv" } else { "mel" }));
                let file = fs::File::create(&target).map_err(|e| e.to_string())?;
                if csv {
                    m.write_csv(file)
                } else {
                    m.write_matrix(file)
                }
                .map_err(|e| e.to_string())?;
                mats += 1;
            }
        }
        Ok((segs.len(), mats))
    };

    let results: Vec<_> =
        thread_pool(c.jobs)?.install(|| files.par_iter().map(|(p, _)| (p, one(p))).collect());
    let mut summary = PreprocessSummary {
        files: files.len(),
        segments: 0,
        mel_matrices: 0,
        errors: Vec::new(),
    };
    for (path, r) in results {
        match r {
            Ok((n, m)) => {
                summary.segments += n;
                summary.mel_matrices += m;
            }
            Err(error) => {
                eprintln!("error: {}: {error}", path.display());
                summary.errors.push(pipeline::FileError {
                    source: path.to_string_lossy().into_owned(),
                    error,
                });
            }
        }
    }
    emit(&summary, None)?;
    Ok(if summary.errors.is_empty() { 0 } else { 1 })
}

fn load_bundle(
    weights: Option<&Path>,
    model: Option<ModelArch>,
    seed: u64,
    streaming: bool,
) -> Result<ModelBundle, CliError> {
    let bundle = match weights {
        Some(p) => ModelBundle::load(p).map_err(|e| data(format!("{}: {e}", p.display())))?,
        None => {
            let arch = model.unwrap_or(ModelArch::TransformerTime);
            eprintln!("warning: no --weights given; using untrained weights seeded with {seed}");
            ModelBundle::seeded(arch, seed)
        }
    };
    if let Some(m) = model {
        if m != bundle.arch {
            return Err(usage(format!("--model {m} but the weights hold {}", bundle.arch)));
        }
    }
    if streaming {
        let pipeline::ModelRuntime::Float(w) = bundle.runtime else {
            return Err(usage("--streaming needs float weights"));
        };
        return ModelBundle::streaming(bundle.arch, w).map_err(usage);
    }
    Ok(bundle)
}

fn parse_split(s: Option<String>) -> Result<Option<Split>, CliError> {
    s.map(|v| v.parse::<Split>().map_err(usage)).transpose()
}

fn input_for(path: &Path, split: Option<Split>) -> Result<PipelineInput, CliError> {
    if !path.exists() {
        return Err(usage(format!("{} does not exist", path.display())));
    }
    Ok(match PipelineInput::from_path(path) {
        PipelineInput::Manifest { path, .. } => PipelineInput::Manifest { path, split },
        other => other,
    })
}

fn cmd_screen(a: ScreenArgs, s: &Settings, c: &Common) -> Result<i32, CliError> {
    let variant: Variant = s
        .pick::<String>("variant", a.variant)?
        .map(|v| v.parse().map_err(usage))
        .transpose()?
        .unwrap_or(Variant::Full);
    let model = s
        .pick::<String>("model", a.model)?
        .map(|m| parse_model(&m))
        .transpose()?;
    let weights = s.pick("weights", a.weights)?;
    let streaming = s.switch("streaming", a.streaming)?;

    let bundle = if variant.uses_model() {
        Some(load_bundle(weights.as_deref(), model, c.seed, streaming)?)
    } else {
        None
    };
    let arch = bundle.as_ref().map(|b| b.arch);
    let defaults = match arch {
        Some(m) => ScreeningConfig::for_model(variant, m),
        None => ScreeningConfig::baseline_only(),
    };
    let cfg = ScreeningConfig {
        t_low: s.or("t-low", a.t_low, defaults.t_low)?,
        t_high: s.or("t-high", a.t_high, defaults.t_high)?,
        t_model: s.or("t-model", a.t_model, defaults.t_model)?,
        variant,
        model: arch,
    };
    cfg.validate().map_err(usage)?;
    let screener = Screener::new(cfg, bundle).map_err(usage)?;
    let input = input_for(&a.input, parse_split(s.pick("split", a.split)?)?)?;
    let out = s.pick::<PathBuf>("out", a.out)?;
    let sink: Box<dyn SegmentSink> = match &out {
        Some(dir) => Box::new(DirSink::new(dir).map_err(data)?),
        None => Box::new(NullSink),
    };
    let report = pipeline::run_pipeline(&input, &screener, sink.as_ref(), c.jobs).map_err(data)?;
    for e in &report.errors {
        eprintln!("error: {}: {}", e.source, e.error);
    }
    let report_path = s.pick::<PathBuf>("report", a.report)?;
    emit(&report, report_path.as_deref())?;
    Ok(if report.errors.is_empty() { 0 } else { 1 })
}

#[derive(Deserialize)]
struct ScoreRow {
    score: f64,
    label: String,
}

fn parse_label(s: &str) -> Result<Label, CliError> {
    match s.trim() {
        "1" => Ok(Label::Target),
        "0" => Ok(Label::NonTarget),
        other => other.parse().map_err(data),
    }
}

fn read_scores(path: &Path) -> Result<(Vec<f64>, Vec<Label>), CliError> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| data(format!("{}: {e}", path.display())))?;
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for row in rdr.deserialize::<ScoreRow>() {
        let row = row.map_err(|e| data(format!("{}: {e}", path.display())))?;
        scores.push(row.score);
        labels.push(parse_label(&row.label)?);
    }
    Ok((scores, labels))
}

fn cmd_eval(a: EvalArgs, s: &Settings, c: &Common) -> Result<i32, CliError> {
    let beta = s.or("beta", a.beta, 2.0)?;
    if !(beta > 0.0) {
        return Err(usage(format!("beta must be positive, got {beta}")));
    }
    let (scores, labels, scorer) = if let Some(p) = a.scores {
        let (sc, lb) = read_scores(&p)?;
        (sc, lb, "file".to_string())
    } else {
        let manifest = s
            .pick::<PathBuf>("manifest", a.manifest)?
            .ok_or_else(|| usage("eval needs --scores or --manifest"))?;
        let split = parse_split(s.pick("split", a.split)?)?;
        let items = input_for(&manifest, split)?.resolve().map_err(data)?;
        let model = s.or("model", a.model, "baseline".to_string())?;
        let segments: Vec<_> = items
            .iter()
            .map(|(p, l)| pipeline::load_segments(p, *l))
            .collect::<Result<Vec<_>, _>>()
            .map_err(data)?
            .into_iter()
            .flatten()
            .collect();
        let labels = segments
            .iter()
            .map(|sg| sg.label.ok_or_else(|| data("unlabeled segment")))
            .collect::<Result<Vec<_>, _>>()?;
        let pool = thread_pool(c.jobs)?;
        let scores: Vec<f64> = if model == "baseline" {
            let filter = dsp::baseline_highpass();
            pool.install(|| {
                segments
                    .par_iter()
                    .map(|sg| dsp::baseline_power(&filter, sg).map(|p| p.p))
                    .collect::<Result<_, _>>()
            })
            .map_err(data)?
        } else {
            let weights = s.pick::<PathBuf>("weights", a.weights)?;
            let bundle = load_bundle(weights.as_deref(), Some(parse_model(&model)?), c.seed, false)?;
            pool.install(|| segments.par_iter().map(|sg| bundle.score(sg)).collect::<Result<_, _>>())
                .map_err(data)?
        };
        (scores, labels, model)
    };
    let roc = metrics::roc_curve(&scores, &labels).map_err(data)?;
    let choice = metrics::optimize_threshold(&scores, &labels, beta).map_err(data)?;
    let mut out = json!({
        "scorer": scorer,
        "n": scores.len(),
        "positives": labels.iter().filter(|l| **l == Label::Target).count(),
        "beta": beta,
        "auc": metrics::auc(&roc),
        "t_star": choice.t_star,
        "at_t_star": choice.metrics,
    });
    if s.switch("roc", a.roc)? {
        out["roc"] = serde_json::to_value(&roc).map_err(data)?;
    }
    let path = s.pick::<PathBuf>("out", a.out)?;
    emit(&out, path.as_deref())?;
    Ok(0)
}

fn cmd_verify(a: VerifyArgs, s: &Settings, c: &Common) -> Result<i32, CliError> {
    let trials = s.or("trials", a.trials, 200)?;
    let mut seeds = SplitMix64::new(c.seed);
    let seeds: Vec<u64> = (0..trials).map(|_| seeds.next_u64()).collect();
    let reports = thread_pool(c.jobs)?
        .install(|| {
            seeds
                .par_iter()
                .map(|&t| streaming::run_trial(t))
                .collect::<Result<Vec<_>, _>>()
        })
        .map_err(data)?;
    let stdout = io::stdout();
    let mut w = BufWriter::new(stdout.lock());
    let mut failed = 0;
    for r in &reports {
        failed += usize::from(!r.within_tolerance);
        let line = serde_json::to_string(r).map_err(data)?;
        writeln!(w, "{line}").map_err(data)?;
    }
    w.flush().map_err(data)?;
    if failed > 0 {
        eprintln!("error: {failed} of {trials} trials exceeded tolerance");
        return Ok(1);
    }
    Ok(0)
}

fn cmd_quantize(a: QuantizeArgs, s: &Settings, c: &Common) -> Result<i32, CliError> {
    let model = s
        .pick::<String>("model", a.model)?
        .map(|m| parse_model(&m))
        .transpose()?;
    let weights = s.pick::<PathBuf>("weights", a.weights)?;
    let bundle = load_bundle(weights.as_deref(), model, c.seed, false)?;
    let pipeline::ModelRuntime::Float(w) = &bundle.runtime else {
        return Err(usage("quantize needs float weights"));
    };
    let count = s.or("calib-count", a.calib_count, 16usize)?.max(1);
    let calib = s.pick::<PathBuf>("calib", a.calib)?;
    let segments = match &calib {
        Some(p) => {
            let items = input_for(p, Some(Split::Train))?.resolve().map_err(data)?;
            let mut segs = Vec::new();
            for (path, label) in &items {
                segs.extend(pipeline::load_segments(path, *label).map_err(data)?);
                if segs.len() >= count {
                    break;
                }
            }
            segs.truncate(count);
            segs
        }
        None => (0..count as u64)
            .map(|i| synth::segment_of(synth::random_waveform(c.seed.wrapping_add(i), INPUT_SAMPLES)))
            .collect(),
    };
    let fb = dsp::default_mel_filterbank();
    let inputs = segments
        .iter()
        .map(|sg| match bundle.arch.input_kind() {
            InputKind::Waveform => Ok(Activation::waveform(&sg.samples)),
            InputKind::LogMel => {
                let m = dsp::log_mel_segment(sg, &fb).map_err(data)?;
                let (f, n) = m.shape();
                Activation::image(f, n, m.values.iter().map(|&v| v as f32).collect()).map_err(data)
            }
        })
        .collect::<Result<Vec<_>, _>>()?;
    let qm = quant::calibrate(&bundle.graph, w, &inputs).map_err(data)?;
    let int8_bytes = quant::save_quantized(&qm, &a.out).map_err(data)?;
    let float = nn::float_container(&bundle.graph, w).map_err(data)?;
    let float_bytes = nn::write_container(io::sink(), &float).map_err(data)?;
    emit(
        &json!({
            "model": bundle.arch,
            "out": a.out,
            "calibration_segments": inputs.len(),
            "float_bytes": float_bytes,
            "int8_bytes": int8_bytes,
        }),
        None,
    )?;
    Ok(0)
}

fn cmd_budget(a: BudgetArgs, s: &Settings) -> Result<i32, CliError> {
    let d = DeploymentProfile::default();
    let variant: Variant = s
        .pick::<String>("variant", a.variant)?
        .map(|v| v.parse().map_err(usage))
        .transpose()?
        .unwrap_or(d.variant);
    let model = match s.pick::<String>("model", a.model)? {
        Some(m) if m == "none" => None,
        Some(m) => Some(parse_model(&m)?),
        None if variant.uses_model() => d.model,
        None => None,
    };
    let idle = match s.or("idle", a.idle, "active-only".to_string())?.as_str() {
        "active-only" => IdleAccounting::ActiveOnly,
        "continuous" => IdleAccounting::Continuous,
        other => return Err(usage(format!("unknown idle accounting {other:?}"))),
    };
    let sd_bytes = s.or("sd-bytes", a.sd_bytes, d.sd_bytes)?;
    let record_rate = match s.pick::<f64>("storage-days-at-full", a.storage_days_at_full)? {
        Some(days) if days > 0.0 => DeploymentProfile::calibrated_record_rate(sd_bytes, days),
        Some(days) => return Err(usage(format!("storage days must be positive, got {days}"))),
        None => s.or("record-rate", a.record_rate, d.record_rate_bytes_per_s)?,
    };
    let profile = DeploymentProfile {
        battery_mwh: s.or("battery-mwh", a.battery_mwh, d.battery_mwh)?,
        sd_bytes,
        record_rate_bytes_per_s: record_rate,
        segment_s: s.or("segment-s", a.segment_s, d.segment_s)?,
        active_fraction: s.or("active-fraction", a.active_fraction, d.active_fraction)?,
        store_fraction: s.or("store-fraction", a.store_fraction, d.store_fraction)?,
        bypass_fraction: s.or("bypass-fraction", a.bypass_fraction, d.bypass_fraction)?,
        variant,
        model,
        idle,
        table: d.table,
    };
    let est = budget::estimate_lifetime(&profile).map_err(usage)?;
    match s.or("format", a.format, "json".to_string())?.as_str() {
        "json" => emit(&json!({ "profile": profile, "estimate": est }), None)?,
        "table" => {
            let model = profile.model.map_or("none".to_string(), |m| m.to_string());
            println!("variant          {}", profile.variant);
            println!("model            {model}");
            println!("active fraction  {:.3}", profile.active_fraction);
            println!("store fraction   {:.3}", profile.store_fraction);
            println!("energy per day   {:.1} mJ", est.daily_energy_mj);
            println!("storage          {:.1} days ({:.1} weeks)", est.storage_days, est.storage_days / 7.0);
            println!("battery          {:.1} days ({:.1} weeks)", est.battery_days, est.battery_days / 7.0);
            println!("lifetime         {:.1} days, limited by {}", est.lifetime_days, est.limiting_factor);
        }
        other => return Err(usage(format!("unknown format {other:?}"))),
    }
    Ok(0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn no_env(_: &str) -> Option<String> {
        None
    }

    #[test]
    fn precedence_flag_config_env_default() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("c.toml");
        fs::write(&cfg, "t_low = 2e-7\n[screen]\nt_high = 3e-5\n").unwrap();
        let env = |k: &str| match k {
            "TINYCHIRP_T_LOW" => Some("9e-7".to_string()),
            "TINYCHIRP_T_MODEL" => Some("0.4".to_string()),
            _ => None,
        };
        let s = Settings::load(Some(&cfg), "screen", &env).unwrap();
        assert_eq!(s.pick("t-low", Some(5e-7)).unwrap(), Some(5e-7));
        assert_eq!(s.pick::<f64>("t-low", None).unwrap(), Some(2e-7));
        assert_eq!(s.pick::<f64>("t-high", None).unwrap(), Some(3e-5));
        assert_eq!(s.pick::<f64>("t-model", None).unwrap(), Some(0.4));
        assert_eq!(s.or("beta", None, 2.0).unwrap(), 2.0);
    }

    #[test]
    fn json_config_and_bad_values() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("c.json");
        fs::write(&cfg, r#"{"jobs": 3, "verify": {"trials": "many"}}"#).unwrap();
        let s = Settings::load(Some(&cfg), "verify", &no_env).unwrap();
        assert_eq!(s.pick::<usize>("jobs", None).unwrap(), Some(3));
        assert!(matches!(s.pick::<usize>("trials", None), Err(CliError::Usage(_))));
    }

    #[test]
    fn usage_errors_exit_two() {
        assert_eq!(run_with_env(["tinychirp", "verify", "--bogus"], &no_env), 2);
        assert_eq!(run_with_env(["tinychirp"], &no_env), 2);
        assert_eq!(run_with_env(["tinychirp", "budget", "--battery-mwh", "0"], &no_env), 2);
    }

    #[test]
    fn labels_in_score_files() {
        assert_eq!(parse_label("1").unwrap(), Label::Target);
        assert_eq!(parse_label("non_target").unwrap(), Label::NonTarget);
        assert!(parse_label("maybe").is_err());
    }
}
