//! Full model assembly, composite objective, training loop and synthesis.

use std::fmt;

use candle_core::{DType, Device, Tensor};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::acoustic::{
    condition, masked_taco_loss, AcousticParams, DecodeMode, Decoder, SpeakerTable, TextEncoder,
    TextSequence,
};
use crate::corpus::{Corpus, CorpusItem, Vocabulary};
use crate::error::{Error, Result};
use crate::frontend::{FeatureSequence, MelSpectrogram, AIF_DIM};
use crate::nn::{Mode, ParamStore};
use crate::optim::{adam_step, AdamState};
use crate::pcm::PcEncoder;
use crate::sdm::{orthogonality_loss, ReferenceEncoderParams, Sdm};

/// Ablation switches. All off is the full model.
#[derive(
    Debug, Clone, Copy, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize,
)]
pub struct Ablation {
    pub no_emotion_embedding: bool,
    pub no_pc_embedding: bool,
    pub no_gc_blocks: bool,
}

impl Ablation {
    pub const FULL: Self = Self {
        no_emotion_embedding: false,
        no_pc_embedding: false,
        no_gc_blocks: false,
    };
    pub const WITHOUT_EE: Self = Self {
        no_emotion_embedding: true,
        ..Self::FULL
    };
    pub const WITHOUT_PCE: Self = Self {
        no_pc_embedding: true,
        ..Self::FULL
    };
    pub const WITHOUT_GC: Self = Self {
        no_gc_blocks: true,
        ..Self::FULL
    };

    /// Accepts `full`/`none`, a variant label (`wo_ee`, `wo_pce`, `wo_gc`)
    /// or a comma-separated list of flag names.
    pub fn parse(text: &str) -> Result<Self> {
        let mut out = Self::FULL;
        for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match part {
                "full" | "none" => {}
                "no_emotion_embedding" | "wo_ee" => out.no_emotion_embedding = true,
                "no_pc_embedding" | "wo_pce" => out.no_pc_embedding = true,
                "no_gc_blocks" | "wo_gc" => out.no_gc_blocks = true,
                other => return Err(Error::InvalidConfig(format!("unknown ablation {other:?}"))),
            }
        }
        Ok(out)
    }

    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if self.no_emotion_embedding {
            parts.push("wo_ee");
        }
        if self.no_pc_embedding {
            parts.push("wo_pce");
        }
        if self.no_gc_blocks {
            parts.push("wo_gc");
        }
        if parts.is_empty() {
            "full".into()
        } else {
            parts.join(",")
        }
    }

    pub fn uses_gc(&self) -> bool {
        !self.no_gc_blocks
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab: Vocabulary,
    pub emotions: Vec<String>,
    pub n_speakers: usize,
    pub n_mels: usize,
    pub reference: ReferenceEncoderParams,
    pub acoustic: AcousticParams,
}

impl ModelConfig {
    pub fn for_corpus(corpus: &Corpus) -> Self {
        Self {
            vocab: corpus.vocab.clone(),
            emotions: corpus.emotions.clone(),
            n_speakers: corpus.n_speakers,
            n_mels: corpus.n_mels(),
            reference: ReferenceEncoderParams::default(),
            acoustic: AcousticParams::new(corpus.vocab.len(), corpus.n_mels()),
        }
    }

    pub fn n_emotions(&self) -> usize {
        self.emotions.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub alpha: f64,
    pub grl_lambda: f64,
    pub ablation: Ablation,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_steps: u64,
    pub seed: u64,
    pub checkpoint_every: u64,
    pub max_grad_norm: f64,
    /// Share of each batch drawn from source-speaker items.
    pub source_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            grl_lambda: 1.0,
            ablation: Ablation::FULL,
            learning_rate: 1e-3,
            batch_size: 16,
            max_steps: 100,
            seed: 13,
            checkpoint_every: 0,
            max_grad_norm: 1.0,
            source_fraction: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad("alpha must be finite and >= 0");
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be finite and >= 0");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(0.0..=1.0).contains(&self.source_fraction) {
            return bad("source_fraction must be in [0, 1]");
        }
        if self.max_grad_norm.is_nan() || self.max_grad_norm <= 0.0 {
            return bad("max_grad_norm must be positive");
        }
        Ok(())
    }
}

/// Loss terms of one step, before weighting.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub taco: f64,
    pub emo: f64,
    pub spk: f64,
    pub adv_emo: f64,
    pub ort: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: u64,
    pub taco: f64,
    pub emo: f64,
    pub spk: f64,
    pub adv_emo: f64,
    pub ort: f64,
    pub total: f64,
}

pub const LOSS_LOG_HEADER: &str = "step\ttaco\temo\tspk\tadv_emo\tort\ttotal";

impl LossReport {
    pub fn parts(&self) -> LossParts {
        LossParts {
            taco: self.taco,
            emo: self.emo,
            spk: self.spk,
            adv_emo: self.adv_emo,
            ort: self.ort,
        }
    }

    /// `total - (taco + emo + spk + adv_emo + alpha * ort)`.
    pub fn residual(&self, alpha: f64) -> f64 {
        self.total - (self.taco + self.emo + self.spk + self.adv_emo + alpha * self.ort)
    }

    pub fn to_tsv_row(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            self.step, self.taco, self.emo, self.spk, self.adv_emo, self.ort, self.total
        )
    }
}

/// Weighted sum of the loss terms, with `alpha` on the orthogonality term.
pub fn total_loss(parts: LossParts, alpha: f64, step: u64) -> Result<LossReport> {
    for (name, v) in [
        ("taco", parts.taco),
        ("emo", parts.emo),
        ("spk", parts.spk),
        ("adv_emo", parts.adv_emo),
        ("ort", parts.ort),
    ] {
        if !v.is_finite() {
            return Err(Error::NonFiniteLoss(name));
        }
    }
    Ok(LossReport {
        step,
        taco: parts.taco,
        emo: parts.emo,
        spk: parts.spk,
        adv_emo: parts.adv_emo,
        ort: parts.ort,
        total: parts.taco + parts.emo + parts.spk + parts.adv_emo + alpha * parts.ort,
    })
}

/// Padded, device-resident batch.
#[derive(Debug, Clone)]
pub struct Batch {
    pub ids: Vec<String>,
    pub tokens: Tensor,
    pub token_lengths: Vec<usize>,
    pub mels: Tensor,
    pub mel_lengths: Vec<usize>,
    pub aif: Tensor,
    pub aif_lengths: Vec<usize>,
    pub speakers: Vec<usize>,
    pub emotions: Vec<usize>,
}

impl Batch {
    /// Mels are padded with the log floor, tokens with the pad id and AIF
    /// with zeros.
    pub fn collate(items: &[&CorpusItem]) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::InvalidConfig("empty batch".into()));
        }
        let device = Device::Cpu;
        let b = items.len();
        let n_mels = items[0].mel.n_mels();
        let floor = items[0].mel.config().log_floor_value();
        let max_l = items.iter().map(|i| i.tokens.len()).max().unwrap();
        let max_t = items.iter().map(|i| i.mel.n_frames()).max().unwrap();
        let max_a = items.iter().map(|i| i.aif.n_frames()).max().unwrap();
        let mut tokens = vec![0u32; b * max_l];
        let mut mels = vec![floor; b * max_t * n_mels];
        let mut aif = vec![0f32; b * max_a * AIF_DIM];
        for (i, item) in items.iter().enumerate() {
            if item.mel.n_mels() != n_mels {
                return Err(Error::InvalidConfig(format!(
                    "item {} has {} mel channels, batch has {n_mels}",
                    item.id,
                    item.mel.n_mels()
                )));
            }
            tokens[i * max_l..i * max_l + item.tokens.len()].copy_from_slice(&item.tokens);
            let m = item.mel.data();
            mels[i * max_t * n_mels..i * max_t * n_mels + m.len()].copy_from_slice(m);
            let a = item.aif.data();
            aif[i * max_a * AIF_DIM..i * max_a * AIF_DIM + a.len()].copy_from_slice(a);
        }
        Ok(Self {
            ids: items.iter().map(|i| i.id.clone()).collect(),
            tokens: Tensor::from_vec(tokens, (b, max_l), &device)?,
            token_lengths: items.iter().map(|i| i.tokens.len()).collect(),
            mels: Tensor::from_vec(mels, (b, max_t, n_mels), &device)?,
            mel_lengths: items.iter().map(|i| i.mel.n_frames()).collect(),
            aif: Tensor::from_vec(aif, (b, max_a, AIF_DIM), &device)?,
            aif_lengths: items.iter().map(|i| i.aif.n_frames()).collect(),
            speakers: items.iter().map(|i| i.speaker).collect(),
            emotions: items.iter().map(|i| i.emotion).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Everything a teacher-forced pass produces.
pub struct ForwardOutput {
    pub mel_before: Tensor,
    pub mel_after: Tensor,
    pub stop_logits: Tensor,
    pub alignments: Tensor,
    pub emotion: Option<Tensor>,
    pub speaker: Tensor,
    pub compensation: Option<Tensor>,
    /// Scalar f64 loss terms, attached to the graph. `emo` and `ort` are
    /// `None` without an emotion embedding.
    pub taco: Tensor,
    pub emo: Option<Tensor>,
    pub spk: Tensor,
    pub adv_emo: Tensor,
    pub ort: Option<Tensor>,
}

impl ForwardOutput {
    /// The objective that is back-propagated, summed in f64 in the same
    /// order as [`total_loss`].
    pub fn objective(&self, alpha: f64) -> Result<Tensor> {
        let zero = || Tensor::new(0f64, self.taco.device());
        let emo = self.emo.clone().map_or_else(zero, Ok)?;
        let ort = self.ort.clone().map_or_else(zero, Ok)?;
        let sum = (((&self.taco + &emo)? + &self.spk)? + &self.adv_emo)?;
        Ok((sum + (ort * alpha)?)?)
    }

    pub fn parts(&self) -> Result<LossParts> {
        let scalar = |t: &Tensor| -> Result<f64> { Ok(t.to_scalar::<f64>()?) };
        let opt = |t: &Option<Tensor>| -> Result<f64> { t.as_ref().map_or(Ok(0.0), scalar) };
        Ok(LossParts {
            taco: scalar(&self.taco)?,
            emo: opt(&self.emo)?,
            spk: scalar(&self.spk)?,
            adv_emo: scalar(&self.adv_emo)?,
            ort: opt(&self.ort)?,
        })
    }
}

/// The acoustic model with both embedding branches.
#[derive(Clone, Debug)]
pub struct CspcModel {
    pub config: ModelConfig,
    pub text_encoder: TextEncoder,
    pub speakers: SpeakerTable,
    pub decoder: Decoder,
    pub sdm: Sdm,
    pub pcm: PcEncoder,
}

impl CspcModel {
    /// Builds the model over `store`, creating missing parameters and
    /// reusing existing ones.
    pub fn new(store: &mut ParamStore, config: &ModelConfig) -> Result<Self> {
        let mut root = store.root();
        Ok(Self {
            config: config.clone(),
            text_encoder: TextEncoder::new(&mut root.pp("text_encoder"), &config.acoustic)?,
            speakers: SpeakerTable::new(&mut root.pp("speaker_table"), config.n_speakers)?,
            decoder: Decoder::new(&mut root.pp("decoder"), &config.acoustic)?,
            sdm: Sdm::new(
                &mut root.pp("sdm"),
                &config.reference,
                config.n_mels,
                config.n_emotions(),
                config.n_speakers,
            )?,
            pcm: PcEncoder::new(&mut root.pp("pcm"), &config.reference)?,
        })
    }

    /// Teacher-forced pass with every loss term.
    pub fn forward(
        &self,
        batch: &Batch,
        ablation: Ablation,
        grl_lambda: f64,
        mode: Mode,
    ) -> Result<ForwardOutput> {
        let f64_of = |t: Tensor| -> Result<Tensor> { Ok(t.to_dtype(DType::F64)?) };
        let sdm = &self.sdm;
        let speaker = sdm
            .speaker_encoder
            .forward(&batch.mels, &batch.mel_lengths, mode, true)?;
        let spk = sdm
            .speaker_head
            .loss(&speaker, &batch.speakers, grl_lambda)?;
        let adv_emo = sdm
            .adversarial_emotion_head
            .loss(&speaker, &batch.emotions, grl_lambda)?;
        let (emotion, emo, ort) = if ablation.no_emotion_embedding {
            (None, None, None)
        } else {
            let e = sdm
                .emotion_encoder
                .forward(&batch.mels, &batch.mel_lengths, mode, true)?;
            let emo = sdm.emotion_head.loss(&e, &batch.emotions, grl_lambda)?;
            let ort = orthogonality_loss(&speaker, &e)?;
            (Some(e), Some(f64_of(emo)?), Some(f64_of(ort)?))
        };
        let compensation = if ablation.no_pc_embedding {
            None
        } else {
            Some(
                self.pcm
                    .forward(&batch.aif, &batch.aif_lengths, mode, ablation.uses_gc())?,
            )
        };
        let encoded = self
            .text_encoder
            .forward(&batch.tokens, &batch.token_lengths, mode)?;
        let memory = condition(&encoded, emotion.as_ref(), compensation.as_ref())?;
        let table_rows = self.speakers.lookup(&batch.speakers)?;
        let dec = self.decoder.forward(
            &memory,
            &batch.token_lengths,
            &table_rows,
            DecodeMode::TeacherForced(&batch.mels),
            mode,
        )?;
        let taco = masked_taco_loss(
            &dec.mel_before,
            &dec.mel_after,
            &dec.stop_logits,
            &batch.mels,
            &batch.mel_lengths,
        )?;
        Ok(ForwardOutput {
            mel_before: dec.mel_before,
            mel_after: dec.mel_after,
            stop_logits: dec.stop_logits,
            alignments: dec.alignments,
            emotion,
            speaker,
            compensation,
            taco: f64_of(taco)?,
            emo,
            spk: f64_of(spk)?,
            adv_emo: f64_of(adv_emo)?,
            ort,
        })
    }

    /// Emotion and compensation embeddings for a batch in inference mode.
    pub fn embed(
        &self,
        batch: &Batch,
        ablation: Ablation,
    ) -> Result<(Option<Tensor>, Option<Tensor>)> {
        let e = if ablation.no_emotion_embedding {
            None
        } else {
            Some(self.sdm.emotion_encoder.forward(
                &batch.mels,
                &batch.mel_lengths,
                Mode::Eval,
                true,
            )?)
        };
        let pc = if ablation.no_pc_embedding {
            None
        } else {
            Some(self.pcm.forward(
                &batch.aif,
                &batch.aif_lengths,
                Mode::Eval,
                ablation.uses_gc(),
            )?)
        };
        Ok((e, pc))
    }
}

/// Parameters, optimizer state and the model built over them.
pub struct TrainState {
    pub store: ParamStore,
    pub model: CspcModel,
    pub adam: AdamState,
}

impl TrainState {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new(seed);
        let model = CspcModel::new(&mut store, config)?;
        Ok(Self {
            store,
            model,
            adam: AdamState::new(),
        })
    }

    /// Rebuilds the model over an already populated store.
    pub fn from_parts(
        mut store: ParamStore,
        config: &ModelConfig,
        adam: AdamState,
    ) -> Result<Self> {
        let before = store.params().len() + store.buffers().len();
        let model = CspcModel::new(&mut store, config)?;
        if store.params().len() + store.buffers().len() != before {
            return Err(Error::IncompatibleCheckpoint(
                "stored tensors do not cover the model".into(),
            ));
        }
        Ok(Self { store, model, adam })
    }

    pub fn step(&self) -> u64 {
        self.adam.step
    }

    /// Independent copy: mutating one never affects the other.
    pub fn deep_clone(&self) -> Result<Self> {
        let mut store = self.store.deep_clone()?;
        let model = CspcModel::new(&mut store, &self.model.config)?;
        Ok(Self {
            store,
            model,
            adam: self.adam.deep_clone()?,
        })
    }
}

/// One joint update of every trainable parameter.
pub fn train_step(
    state: &mut TrainState,
    batch: &Batch,
    config: &TrainConfig,
) -> Result<LossReport> {
    let out = state
        .model
        .forward(batch, config.ablation, config.grl_lambda, Mode::Train)?;
    let objective = out.objective(config.alpha)?;
    let report = total_loss(out.parts()?, config.alpha, state.adam.step + 1)?;
    let optimized = objective.to_scalar::<f64>()?;
    if (optimized - report.total).abs() > 1e-6 {
        return Err(Error::LossDecomposition(format!(
            "step {}: optimized {optimized}, reported {}",
            report.step, report.total
        )));
    }
    let grads = objective.backward()?;
    adam_step(
        &state.store,
        &grads,
        &mut state.adam,
        config.learning_rate,
        config.max_grad_norm,
    )?;
    Ok(report)
}

/// Per-step batch sampler: a mix of source-speaker items and the rest,
/// drawn from a generator seeded by `(seed, step)` alone.
pub struct BatchSampler {
    source: Vec<usize>,
    target: Vec<usize>,
    seed: u64,
    batch_size: usize,
    source_fraction: f64,
}

impl BatchSampler {
    pub fn new(corpus: &Corpus, config: &TrainConfig) -> Self {
        let sources = corpus.source_speakers();
        let (mut source, mut target) = (Vec::new(), Vec::new());
        for (i, item) in corpus.items.iter().enumerate() {
            if sources.contains(&item.speaker) {
                source.push(i);
            } else {
                target.push(i);
            }
        }
        if source.is_empty() {
            std::mem::swap(&mut source, &mut target);
        }
        Self {
            source,
            target,
            seed: config.seed,
            batch_size: config.batch_size,
            source_fraction: config.source_fraction,
        }
    }

    pub fn indices(&self, step: u64) -> Vec<usize> {
        let mut rng =
            ChaCha8Rng::seed_from_u64(self.seed ^ step.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let n_source = if self.target.is_empty() {
            self.batch_size
        } else {
            (self.batch_size as f64 * self.source_fraction).round() as usize
        };
        let mut out = draw(&mut rng, &self.source, n_source);
        out.extend(draw(&mut rng, &self.target, self.batch_size - n_source));
        out
    }
}

fn draw(rng: &mut ChaCha8Rng, pool: &[usize], n: usize) -> Vec<usize> {
    if n == 0 || pool.is_empty() {
        return Vec::new();
    }
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let k = (n - out.len()).min(pool.len());
        out.extend(sample(rng, pool.len(), k).into_iter().map(|i| pool[i]));
    }
    out
}

/// Runs `config.max_steps - state.step()` further steps, calling `on_step`
/// after each one (for logging or checkpointing).
pub fn run_training(
    state: &mut TrainState,
    corpus: &Corpus,
    config: &TrainConfig,
    mut on_step: impl FnMut(&TrainState, &LossReport) -> Result<()>,
) -> Result<Vec<LossReport>> {
    config.validate()?;
    let sampler = BatchSampler::new(corpus, config);
    let mut log = Vec::new();
    while state.step() < config.max_steps {
        let picked = sampler.indices(state.step());
        let items: Vec<&CorpusItem> = picked.iter().map(|&i| &corpus.items[i]).collect();
        let batch = Batch::collate(&items)?;
        let report = train_step(state, &batch, config)?;
        on_step(state, &report)?;
        log.push(report);
    }
    Ok(log)
}

pub fn format_loss_log(log: &[LossReport]) -> String {
    let mut out = String::from(LOSS_LOG_HEADER);
    out.push('\n');
    for r in log {
        out.push_str(&r.to_tsv_row());
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone)]
pub struct Synthesis {
    pub mel: MelSpectrogram,
    pub unterminated: bool,
}

/// Emotion from `reference_mel`/`reference_aif`, timbre from the target
/// speaker's table row, free-running decode.
pub fn synthesize(
    model: &CspcModel,
    text: &TextSequence,
    reference_mel: &MelSpectrogram,
    reference_aif: &FeatureSequence,
    target_speaker: usize,
    ablation: Ablation,
    max_frames: usize,
) -> Result<Synthesis> {
    let device = Device::Cpu;
    let speaker = model.speakers.lookup(&[target_speaker])?;
    if reference_mel.n_frames() == 0 || reference_aif.n_frames() == 0 {
        return Err(Error::EmptyReference);
    }
    let mel_in = Tensor::from_vec(
        reference_mel.data().to_vec(),
        (1, reference_mel.n_frames(), reference_mel.n_mels()),
        &device,
    )?;
    let aif_in = Tensor::from_vec(
        reference_aif.data().to_vec(),
        (1, reference_aif.n_frames(), AIF_DIM),
        &device,
    )?;
    let e = if ablation.no_emotion_embedding {
        None
    } else {
        Some(model.sdm.emotion_encoder.forward(
            &mel_in,
            &[reference_mel.n_frames()],
            Mode::Eval,
            true,
        )?)
    };
    let pc = if ablation.no_pc_embedding {
        None
    } else {
        Some(model.pcm.forward(
            &aif_in,
            &[reference_aif.n_frames()],
            Mode::Eval,
            ablation.uses_gc(),
        )?)
    };
    let ids = Tensor::from_vec(text.ids().to_vec(), (1, text.len()), &device)?;
    let encoded = model
        .text_encoder
        .forward(&ids, &[text.len()], Mode::Eval)?;
    let memory = condition(&encoded, e.as_ref(), pc.as_ref())?;
    let out = model.decoder.forward(
        &memory,
        &[text.len()],
        &speaker,
        DecodeMode::FreeRunning { max_frames },
        Mode::Eval,
    )?;
    let n = out.lengths[0];
    let floor = reference_mel.config().log_floor_value();
    let frames: Vec<f32> = out
        .mel_after
        .narrow(1, 0, n)?
        .flatten_all()?
        .to_vec1::<f32>()?
        .into_iter()
        .map(|v| v.max(floor))
        .collect();
    Ok(Synthesis {
        mel: MelSpectrogram::new(frames, n, reference_mel.config().clone())?,
        unterminated: out.unterminated,
    })
}

/// Inference-mode embeddings for `items`, batched.
pub struct ItemEmbeddings {
    pub emotion: Option<Vec<Vec<f32>>>,
    pub compensation: Option<Vec<Vec<f32>>>,
}

pub fn embed_items(
    model: &CspcModel,
    items: &[&CorpusItem],
    ablation: Ablation,
    batch_size: usize,
) -> Result<ItemEmbeddings> {
    let mut emotion = (!ablation.no_emotion_embedding).then(Vec::new);
    let mut compensation = (!ablation.no_pc_embedding).then(Vec::new);
    for chunk in items.chunks(batch_size.max(1)) {
        let batch = Batch::collate(chunk)?;
        let (e, pc) = model.embed(&batch, ablation)?;
        if let (Some(dst), Some(e)) = (emotion.as_mut(), e) {
            dst.extend(e.to_vec2::<f32>()?);
        }
        if let (Some(dst), Some(pc)) = (compensation.as_mut(), pc) {
            dst.extend(pc.to_vec2::<f32>()?);
        }
    }
    Ok(ItemEmbeddings {
        emotion,
        compensation,
    })
}

/// Per-item mean squared error of the post-net output under teacher
/// forcing, over valid frames.
pub fn teacher_forced_errors(
    model: &CspcModel,
    items: &[&CorpusItem],
    ablation: Ablation,
    batch_size: usize,
) -> Result<Vec<f64>> {
    let mut errors = Vec::with_capacity(items.len());
    for chunk in items.chunks(batch_size.max(1)) {
        let batch = Batch::collate(chunk)?;
        let out = model.forward(&batch, ablation, 0.0, Mode::Eval)?;
        let pred = out.mel_after.to_vec3::<f32>()?;
        let target = batch.mels.to_vec3::<f32>()?;
        for (i, &len) in batch.mel_lengths.iter().enumerate() {
            let mut sq = 0.0f64;
            let mut n = 0usize;
            for t in 0..len {
                for (p, q) in pred[i][t].iter().zip(&target[i][t]) {
                    sq += (*p as f64 - *q as f64).powi(2);
                    n += 1;
                }
            }
            errors.push(sq / n as f64);
        }
    }
    Ok(errors)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn total_loss_arithmetic() {
        let parts = LossParts {
            taco: 1.0,
            emo: 1.0,
            spk: 1.0,
            adv_emo: 1.0,
            ort: 10.0,
        };
        assert_eq!(total_loss(parts, 0.1, 1).unwrap().total, 5.0);
        assert_eq!(total_loss(LossParts::default(), 0.1, 1).unwrap().total, 0.0);
    }

    #[test]
    fn non_finite_part_is_named() {
        let parts = LossParts {
            adv_emo: f64::NAN,
            ..LossParts::default()
        };
        let err = total_loss(parts, 0.1, 1).unwrap_err();
        assert_eq!(err.to_string(), "non-finite loss: adv_emo");
    }

    #[test]
    fn ablation_parse_and_label() {
        assert_eq!(Ablation::parse("full").unwrap(), Ablation::FULL);
        assert_eq!(Ablation::parse("wo_pce").unwrap(), Ablation::WITHOUT_PCE);
        assert_eq!(
            Ablation::parse("no_emotion_embedding").unwrap(),
            Ablation::WITHOUT_EE
        );
        let both = Ablation::parse("no_gc_blocks,no_pc_embedding").unwrap();
        assert_eq!(both.label(), "wo_pce,wo_gc");
        assert_eq!(Ablation::parse(&both.label()).unwrap(), both);
        assert!(Ablation::parse("no_decoder").is_err());
    }

    #[test]
    fn negative_alpha_is_rejected() {
        let cfg = TrainConfig {
            alpha: -0.1,
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
