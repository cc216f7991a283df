//! `cspc` command-line tool.
//!
//! Every command writes into an output directory: its products, a
//! `config.toml` echo of the fully resolved configuration and a
//! `run_manifest.json` listing inputs and output digests.

pub mod commands;
pub mod config;

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use toml::Value;

pub use config::{Params, RunConfig, CONFIG_ECHO};

pub const RUN_MANIFEST: &str = "run_manifest.json";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] cspc_core::error::Error),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("output exists: {0} (pass --overwrite to replace it)")]
    OutputExists(PathBuf),

    #[error("refusing to overwrite {0}: not a cspc output directory")]
    ForeignOutput(PathBuf),

    #[error("io failure: {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "cspc",
    version,
    about = "Cross-speaker emotion transfer experiments"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus.
    GenCorpus(GenCorpusArgs),
    /// Train a model on a corpus.
    Train(TrainArgs),
    /// Synthesize a mel spectrogram from text and a reference utterance.
    Synthesize(SynthesizeArgs),
    /// Probe embeddings of one or more checkpoints and compare variants.
    EvalProbes(EvalProbesArgs),
    /// Extract ASR intermediate features from mel or wav files.
    ExtractAif(ExtractAifArgs),
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// Flat TOML file with defaults for any other flag.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Single source of randomness for the run.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Replace an existing output directory from an earlier run.
    #[arg(long)]
    pub overwrite: bool,
}

#[derive(Debug, Args)]
pub struct GenCorpusArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub n_emotions: Option<u64>,
    #[arg(long)]
    pub n_speakers: Option<u64>,
    #[arg(long)]
    pub items_per_cell: Option<u64>,
    #[arg(long)]
    pub min_frames: Option<u64>,
    #[arg(long)]
    pub max_frames: Option<u64>,
    /// Generate every (speaker, emotion) cell, including emotional speech
    /// for the target speakers.
    #[arg(long)]
    pub full_factorial: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Corpus directory or manifest file.
    #[arg(long)]
    pub corpus: Option<String>,
    #[arg(long)]
    pub ablation: Option<String>,
    #[arg(long)]
    pub max_steps: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<u64>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub grl_lambda: Option<f64>,
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
}

#[derive(Debug, Args)]
pub struct SynthesizeArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Space-separated phone tokens.
    #[arg(long)]
    pub text: Option<String>,
    /// Reference utterance (.mel or .wav) carrying the emotion.
    #[arg(long)]
    pub reference: Option<String>,
    /// Precomputed AIF for the reference; extracted with the stub provider
    /// when absent.
    #[arg(long)]
    pub reference_aif: Option<String>,
    #[arg(long)]
    pub speaker_id: Option<u64>,
    #[arg(long)]
    pub checkpoint: Option<String>,
    #[arg(long)]
    pub ablation: Option<String>,
    #[arg(long)]
    pub max_frames: Option<u64>,
    /// Also write a Griffin-Lim waveform for listening.
    #[arg(long)]
    pub wav: bool,
}

#[derive(Debug, Args)]
pub struct EvalProbesArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Comma-separated checkpoint paths, one per variant.
    #[arg(long)]
    pub checkpoints: Option<String>,
    /// Evaluation corpus directory or manifest file.
    #[arg(long)]
    pub corpus: Option<String>,
    #[arg(long)]
    pub heldout_fraction: Option<f64>,
    #[arg(long)]
    pub source_speaker: Option<u64>,
}

#[derive(Debug, Args)]
pub struct ExtractAifArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Provider name; only `stub` ships with this tool.
    #[arg(long)]
    pub provider: Option<String>,
    /// A .mel/.wav file or a directory of them.
    #[arg(long)]
    pub input: Option<String>,
}

fn put(map: &mut BTreeMap<String, Value>, key: &str, v: Option<impl Into<Value>>) {
    if let Some(v) = v {
        map.insert(key.to_string(), v.into());
    }
}

fn put_u64(map: &mut BTreeMap<String, Value>, key: &str, v: Option<u64>) {
    put(map, key, v.map(|v| v as i64));
}

fn put_flag(map: &mut BTreeMap<String, Value>, key: &str, set: bool) {
    if set {
        map.insert(key.to_string(), Value::Boolean(true));
    }
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenCorpus(_) => "gen-corpus",
            Command::Train(_) => "train",
            Command::Synthesize(_) => "synthesize",
            Command::EvalProbes(_) => "eval-probes",
            Command::ExtractAif(_) => "extract-aif",
        }
    }

    fn common(&self) -> &CommonArgs {
        match self {
            Command::GenCorpus(a) => &a.common,
            Command::Train(a) => &a.common,
            Command::Synthesize(a) => &a.common,
            Command::EvalProbes(a) => &a.common,
            Command::ExtractAif(a) => &a.common,
        }
    }

    fn overrides(&self) -> BTreeMap<String, Value> {
        let mut m = BTreeMap::new();
        match self {
            Command::GenCorpus(a) => {
                put_u64(&mut m, "n_emotions", a.n_emotions);
                put_u64(&mut m, "n_speakers", a.n_speakers);
                put_u64(&mut m, "items_per_cell", a.items_per_cell);
                put_u64(&mut m, "min_frames", a.min_frames);
                put_u64(&mut m, "max_frames", a.max_frames);
                if a.full_factorial {
                    m.insert("target_speaker_neutral_only".into(), Value::Boolean(false));
                }
            }
            Command::Train(a) => {
                put(&mut m, "corpus", a.corpus.clone());
                put(&mut m, "ablation", a.ablation.clone());
                put_u64(&mut m, "max_steps", a.max_steps);
                put_u64(&mut m, "batch_size", a.batch_size);
                put(&mut m, "learning_rate", a.learning_rate);
                put(&mut m, "alpha", a.alpha);
                put(&mut m, "grl_lambda", a.grl_lambda);
                put_u64(&mut m, "checkpoint_every", a.checkpoint_every);
            }
            Command::Synthesize(a) => {
                put(&mut m, "text", a.text.clone());
                put(&mut m, "reference", a.reference.clone());
                put(&mut m, "reference_aif", a.reference_aif.clone());
                put_u64(&mut m, "speaker_id", a.speaker_id);
                put(&mut m, "checkpoint", a.checkpoint.clone());
                put(&mut m, "ablation", a.ablation.clone());
                put_u64(&mut m, "max_frames", a.max_frames);
                put_flag(&mut m, "wav", a.wav);
            }
            Command::EvalProbes(a) => {
                put(&mut m, "checkpoints", a.checkpoints.clone());
                put(&mut m, "corpus", a.corpus.clone());
                put(&mut m, "heldout_fraction", a.heldout_fraction);
                put_u64(&mut m, "source_speaker", a.source_speaker);
            }
            Command::ExtractAif(a) => {
                put(&mut m, "provider", a.provider.clone());
                put(&mut m, "input", a.input.clone());
            }
        }
        m
    }
}

pub const DEFAULT_SEED: u64 = 13;

/// Merges the config file and flags into the raw parameter set.
fn merge(command: &Command) -> Result<(u64, PathBuf, BTreeMap<String, Value>), CliError> {
    let common = command.common();
    let mut values = match &common.config {
        Some(path) => config::read_config_file(path)?,
        None => BTreeMap::new(),
    };
    if let Some(name) = values.remove("command") {
        if name.as_str() != Some(command.name()) {
            return Err(CliError::Config(format!(
                "config file is for command {name}, not {}",
                command.name()
            )));
        }
    }
    values.extend(command.overrides());
    let seed = match (common.seed, values.remove("seed")) {
        (Some(s), _) => s,
        (None, Some(Value::Integer(s))) if s >= 0 => s as u64,
        (None, Some(other)) => {
            return Err(CliError::Config(format!(
                "seed must be a non-negative integer, got {other}"
            )))
        }
        (None, None) => DEFAULT_SEED,
    };
    let output = match (&common.output, values.remove("output")) {
        (Some(p), _) => p.clone(),
        (None, Some(Value::String(s))) => PathBuf::from(s),
        (None, Some(other)) => {
            return Err(CliError::Config(format!(
                "output must be a path, got {other}"
            )))
        }
        (None, None) => return Err(CliError::Config("missing required key output".into())),
    };
    Ok((seed, output, values))
}

/// Creates (or, with `overwrite`, recreates) the output directory.
fn prepare_output(dir: &Path, overwrite: bool) -> Result<(), CliError> {
    let occupied = dir.exists()
        && fs::read_dir(dir)
            .map_err(|e| CliError::io(dir, e))?
            .next()
            .is_some();
    if occupied {
        if !overwrite {
            return Err(CliError::OutputExists(dir.to_path_buf()));
        }
        if !dir.join(RUN_MANIFEST).exists() {
            return Err(CliError::ForeignOutput(dir.to_path_buf()));
        }
        fs::remove_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

/// Runs a parsed command. Returns the resolved configuration.
pub fn execute(command: &Command) -> Result<RunConfig, CliError> {
    let (seed, output, raw) = merge(command)?;
    let mut params = Params::new(raw);
    let job = commands::plan(command.name(), &mut params, seed)?;
    let values = params.finish()?;
    let run = RunConfig {
        command: command.name().to_string(),
        seed,
        output: output.clone(),
        values,
    };
    prepare_output(&output, command.common().overwrite)?;
    let echo = output.join(CONFIG_ECHO);
    fs::write(&echo, run.to_toml()).map_err(|e| CliError::io(&echo, e))?;
    let manifest = job.run(&output)?;
    commands::write_run_manifest(&output, &run, manifest)?;
    Ok(run)
}

/// Parses `args`, runs the command and maps the outcome to an exit code:
/// 0 on success, 1 on a failed run, 2 on a usage error.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli.command) {
        Ok(_) => 0,
        Err(e) => {
            let line = e.to_string().replace('\n', " ");
            let _ = writeln!(std::io::stderr(), "error: {line}");
            1
        }
    }
}
