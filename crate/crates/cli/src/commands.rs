//! Typed command plans built from resolved parameters.

use std::fs;
use std::io::{BufWriter, Write as _};
use std::path::{Path, PathBuf};

use serde_json::{json, Value as Json};

use cspc_core::acoustic::TextSequence;
use cspc_core::checkpoint::{load_checkpoint, load_checkpoint_for, save_checkpoint};
use cspc_core::corpus::{
    generate_corpus, ingest, load_audio, sha256_hex, Corpus, CorpusSpec, IngestOptions,
};
use cspc_core::error::Error;
use cspc_core::eval::{ablation_report, ProbeOptions, ReportOptions, Variant};
use cspc_core::frontend::{
    griffin_lim, load_aif, save_aif, save_mel, write_wav, AifProvider, AifSource, FrontendConfig,
};
use cspc_core::pipeline::{
    run_training, synthesize, Ablation, ModelConfig, TrainConfig, TrainState, LOSS_LOG_HEADER,
};

use crate::config::Params;
use crate::{CliError, RunConfig, RUN_MANIFEST};

pub const DEFAULT_AIF_SEED: u64 = 7;

#[derive(Debug, Clone)]
pub enum Job {
    GenCorpus(CorpusSpec),
    Train {
        corpus: PathBuf,
        aif_seed: u64,
        config: TrainConfig,
    },
    Synthesize {
        checkpoint: PathBuf,
        text: String,
        reference: PathBuf,
        reference_aif: Option<PathBuf>,
        aif_seed: u64,
        speaker: usize,
        ablation: Option<Ablation>,
        max_frames: usize,
        wav: bool,
        griffin_lim_iterations: usize,
        seed: u64,
    },
    EvalProbes {
        checkpoints: Vec<PathBuf>,
        corpus: PathBuf,
        aif_seed: u64,
        options: ReportOptions,
    },
    ExtractAif {
        input: PathBuf,
        aif_seed: u64,
    },
}

fn existing(key: &str, raw: String) -> Result<PathBuf, CliError> {
    let p = PathBuf::from(raw);
    if p.exists() {
        Ok(p)
    } else {
        Err(CliError::Config(format!(
            "{key}: {} does not exist",
            p.display()
        )))
    }
}

/// Resolves the parameters of `command` without touching the filesystem
/// beyond existence checks.
pub fn plan(command: &str, p: &mut Params, seed: u64) -> Result<Job, CliError> {
    Ok(match command {
        "gen-corpus" => {
            let d = CorpusSpec::default();
            let spec = CorpusSpec {
                n_emotions: p.usize("n_emotions", d.n_emotions)?,
                n_speakers: p.usize("n_speakers", d.n_speakers)?,
                items_per_cell: p.usize("items_per_cell", d.items_per_cell)?,
                min_frames: p.usize("min_frames", d.min_frames)?,
                max_frames: p.usize("max_frames", d.max_frames)?,
                frames_per_token: p.usize("frames_per_token", d.frames_per_token)?,
                n_phones: p.usize("n_phones", d.n_phones)?,
                seed,
                target_speaker_neutral_only: p
                    .bool("target_speaker_neutral_only", d.target_speaker_neutral_only)?,
                aif_seed: p.u64("aif_seed", d.aif_seed)?,
                noise_std: p.f64("noise_std", d.noise_std as f64)? as f32,
                frontend: FrontendConfig::default(),
            };
            spec.validate()?;
            Job::GenCorpus(spec)
        }
        "train" => {
            let d = TrainConfig::default();
            let corpus = p.required_path("corpus")?;
            let config = TrainConfig {
                alpha: p.f64("alpha", d.alpha)?,
                grl_lambda: p.f64("grl_lambda", d.grl_lambda)?,
                ablation: Ablation::parse(&p.string("ablation", "full")?)?,
                learning_rate: p.f64("learning_rate", d.learning_rate)?,
                batch_size: p.usize("batch_size", d.batch_size)?,
                max_steps: p.u64("max_steps", d.max_steps)?,
                seed,
                checkpoint_every: p.u64("checkpoint_every", d.checkpoint_every)?,
                max_grad_norm: p.f64("max_grad_norm", d.max_grad_norm)?,
                source_fraction: p.f64("source_fraction", d.source_fraction)?,
            };
            config.validate()?;
            Job::Train {
                corpus,
                aif_seed: p.u64("aif_seed", DEFAULT_AIF_SEED)?,
                config,
            }
        }
        "synthesize" => Job::Synthesize {
            checkpoint: p.required_path("checkpoint")?,
            text: p.required_string("text")?,
            reference: p.required_path("reference")?,
            reference_aif: p
                .opt_string("reference_aif")?
                .map(|s| existing("reference_aif", s))
                .transpose()?,
            aif_seed: p.u64("aif_seed", DEFAULT_AIF_SEED)?,
            speaker: p.required_u64("speaker_id")? as usize,
            ablation: p
                .opt_string("ablation")?
                .map(|s| Ablation::parse(&s))
                .transpose()?,
            max_frames: p.usize("max_frames", 400)?,
            wav: p.bool("wav", false)?,
            griffin_lim_iterations: p.usize("griffin_lim_iterations", 32)?,
            seed,
        },
        "eval-probes" => {
            let checkpoints = p
                .string_list("checkpoints")?
                .into_iter()
                .map(|s| existing("checkpoints", s))
                .collect::<Result<Vec<_>, _>>()?;
            if checkpoints.is_empty() {
                return Err(CliError::Config("missing required key checkpoints".into()));
            }
            let d = ReportOptions::default();
            let pd = ProbeOptions::default();
            let options = ReportOptions {
                probe: ProbeOptions {
                    heldout_fraction: p.f64("heldout_fraction", pd.heldout_fraction)?,
                    seed,
                    l2: p.f64("probe_l2", pd.l2)?,
                    iterations: p.usize("probe_iterations", pd.iterations)?,
                    learning_rate: p.f64("probe_learning_rate", pd.learning_rate)?,
                },
                source_speaker: p.usize("source_speaker", d.source_speaker)?,
                batch_size: p.usize("batch_size", d.batch_size)?,
            };
            Job::EvalProbes {
                checkpoints,
                corpus: p.required_path("corpus")?,
                aif_seed: p.u64("aif_seed", DEFAULT_AIF_SEED)?,
                options,
            }
        }
        "extract-aif" => {
            let provider = p.string("provider", "stub")?;
            if provider != "stub" {
                return Err(Error::AifUnavailable(format!("unknown provider {provider:?}")).into());
            }
            Job::ExtractAif {
                input: p.required_path("input")?,
                aif_seed: p.u64("aif_seed", DEFAULT_AIF_SEED)?,
            }
        }
        other => return Err(CliError::Config(format!("unknown command {other}"))),
    })
}

fn manifest_path(corpus: &Path) -> PathBuf {
    if corpus.is_dir() {
        corpus.join("manifest.tsv")
    } else {
        corpus.to_path_buf()
    }
}

fn load_corpus(path: &Path, aif_seed: u64) -> Result<Corpus, CliError> {
    let options = IngestOptions {
        provider: AifProvider::Stub { seed: aif_seed },
        ..IngestOptions::default()
    };
    Ok(ingest(&manifest_path(path), &options)?)
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::io(path, e)
}

impl Job {
    /// Executes the job into `out` and returns manifest details.
    pub fn run(&self, out: &Path) -> Result<Json, CliError> {
        match self {
            Job::GenCorpus(spec) => {
                let gen = generate_corpus(spec, out)?;
                println!("generated {} items in {}", gen.n_items, out.display());
                Ok(json!({ "items": gen.n_items }))
            }
            Job::Train {
                corpus,
                aif_seed,
                config,
            } => {
                let corpus = load_corpus(corpus, *aif_seed)?;
                let model = ModelConfig::for_corpus(&corpus);
                let mut state = TrainState::new(&model, config.seed)?;
                let log_path = out.join("loss_log.tsv");
                let file = fs::File::create(&log_path).map_err(io_err(&log_path))?;
                let mut log = BufWriter::new(file);
                writeln!(log, "{LOSS_LOG_HEADER}").map_err(io_err(&log_path))?;
                let ckpt_dir = out.join("checkpoints");
                let reports = run_training(&mut state, &corpus, config, |st, report| {
                    writeln!(log, "{}", report.to_tsv_row())
                        .and_then(|_| log.flush())
                        .map_err(|e| Error::io(&log_path, e))?;
                    if config.checkpoint_every > 0 && st.step() % config.checkpoint_every == 0 {
                        let path = ckpt_dir.join(format!("step_{:06}.ckpt", st.step()));
                        save_checkpoint(&path, st, config, &corpus.fingerprint)?;
                    }
                    Ok(())
                })?;
                let final_path = out.join("checkpoint.ckpt");
                save_checkpoint(&final_path, &state, config, &corpus.fingerprint)?;
                let last = reports.last().map(|r| r.total);
                println!(
                    "trained {} steps on {} items; final total loss {}",
                    state.step(),
                    corpus.items.len(),
                    last.map_or("NA".into(), |t| format!("{t:.6}"))
                );
                Ok(json!({
                    "corpus_fingerprint": corpus.fingerprint,
                    "corpus_items": corpus.items.len(),
                    "rejected_rows": corpus.report.errors.len(),
                    "steps": state.step(),
                    "final_total_loss": last,
                }))
            }
            Job::Synthesize {
                checkpoint,
                text,
                reference,
                reference_aif,
                aif_seed,
                speaker,
                ablation,
                max_frames,
                wav,
                griffin_lim_iterations,
                seed,
            } => {
                let ckpt = match ablation {
                    Some(a) => load_checkpoint_for(checkpoint, *a)?,
                    None => load_checkpoint(checkpoint)?,
                };
                let ablation = ckpt.train.ablation;
                let model = &ckpt.state.model;
                let ids = ckpt.model.vocab.encode(text)?;
                let text = TextSequence::new(ids, ckpt.model.vocab.len())?;
                let ref_mel = load_audio(reference, &FrontendConfig::default())?;
                let ref_aif = match reference_aif {
                    Some(path) => load_aif(path)?,
                    None => {
                        AifProvider::Stub { seed: *aif_seed }.extract(AifSource::Mel(&ref_mel))?
                    }
                };
                let result = synthesize(
                    model,
                    &text,
                    &ref_mel,
                    &ref_aif,
                    *speaker,
                    ablation,
                    *max_frames,
                )?;
                save_mel(&result.mel, &out.join("synthesis.mel"))?;
                if *wav {
                    let samples = griffin_lim(&result.mel, *griffin_lim_iterations, *seed)?;
                    write_wav(
                        &out.join("synthesis.wav"),
                        &samples,
                        result.mel.config().sample_rate_hz,
                    )?;
                }
                println!(
                    "synthesized {} frames{}",
                    result.mel.n_frames(),
                    if result.unterminated {
                        " (stop token never fired)"
                    } else {
                        ""
                    }
                );
                Ok(json!({
                    "checkpoint_step": ckpt.step(),
                    "ablation": ablation.label(),
                    "frames": result.mel.n_frames(),
                    "unterminated": result.unterminated,
                }))
            }
            Job::EvalProbes {
                checkpoints,
                corpus,
                aif_seed,
                options,
            } => {
                let corpus = load_corpus(corpus, *aif_seed)?;
                let loaded = checkpoints
                    .iter()
                    .map(|p| load_checkpoint(p))
                    .collect::<Result<Vec<_>, _>>()?;
                let mut labels: Vec<String> = Vec::new();
                for c in &loaded {
                    let label = c.train.ablation.label();
                    if labels.contains(&label) {
                        return Err(Error::MismatchedEvaluation(format!(
                            "two checkpoints share variant {label}"
                        ))
                        .into());
                    }
                    labels.push(label);
                }
                let variants: Vec<Variant<'_>> = loaded
                    .iter()
                    .zip(&labels)
                    .map(|(c, label)| Variant {
                        label: label.clone(),
                        ablation: c.train.ablation,
                        model: &c.state.model,
                        corpus_fingerprint: c.corpus_fingerprint.clone(),
                    })
                    .collect();
                let report = ablation_report(&variants, &corpus, options)?;
                report.write(out)?;
                print!("{}", report.table_tsv());
                Ok(json!({
                    "eval_corpus_fingerprint": corpus.fingerprint,
                    "training_corpus_fingerprint": loaded[0].corpus_fingerprint,
                    "variants": labels,
                    "checkpoint_steps": loaded.iter().map(|c| c.step()).collect::<Vec<_>>(),
                }))
            }
            Job::ExtractAif { input, aif_seed } => {
                let files = audio_files(input)?;
                let provider = AifProvider::Stub { seed: *aif_seed };
                let frontend = FrontendConfig::default();
                for f in &files {
                    let mel = load_audio(f, &frontend)?;
                    let aif = provider.extract(AifSource::Mel(&mel))?;
                    let stem = f.file_stem().unwrap_or_default().to_string_lossy();
                    save_aif(&aif, &out.join(format!("{stem}.aif")))?;
                }
                println!("extracted {} aif files", files.len());
                Ok(json!({ "provider": format!("stub:{aif_seed}"), "files": files.len() }))
            }
        }
    }
}

fn audio_files(input: &Path) -> Result<Vec<PathBuf>, CliError> {
    if input.is_file() {
        return Ok(vec![input.to_path_buf()]);
    }
    let mut files: Vec<PathBuf> = fs::read_dir(input)
        .map_err(io_err(input))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("mel" | "wav")))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(CliError::Config(format!(
            "input: no .mel or .wav files in {}",
            input.display()
        )));
    }
    Ok(files)
}

fn collect_outputs(dir: &Path, root: &Path, out: &mut Vec<Json>) -> Result<(), CliError> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    entries.sort();
    for path in entries {
        if path.is_dir() {
            collect_outputs(&path, root, out)?;
        } else if path.file_name().is_some_and(|n| n != RUN_MANIFEST) {
            let bytes = fs::read(&path).map_err(io_err(&path))?;
            let rel = path.strip_prefix(root).unwrap_or(&path);
            out.push(json!({ "path": rel.display().to_string(), "sha256": sha256_hex(&bytes) }));
        }
    }
    Ok(())
}

/// Writes `run_manifest.json`: command, tool version, seed, details from
/// the job and a digest of every file in the output directory.
pub fn write_run_manifest(out: &Path, run: &RunConfig, details: Json) -> Result<(), CliError> {
    let mut outputs = Vec::new();
    collect_outputs(out, out, &mut outputs)?;
    let manifest = json!({
        "command": run.command,
        "version": env!("CARGO_PKG_VERSION"),
        "seed": run.seed,
        "details": details,
        "outputs": outputs,
    });
    let path = out.join(RUN_MANIFEST);
    let text = serde_json::to_string_pretty(&manifest).expect("json values serialize");
    fs::write(&path, text + "\n").map_err(io_err(&path))
}
