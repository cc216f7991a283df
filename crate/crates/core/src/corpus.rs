//! Synthetic factorized corpus and manifest ingestion.
//!
//! Generated mels are a sum of independent parts: text content (one
//! spectral bump per token, held for a fixed number of frames), an emotion
//! term (global level, spectral tilt and a temporal contour), a per-speaker
//! spectral ripple, and small Gaussian noise. Speaker 0 is the source
//! speaker; with `target_speaker_neutral_only` every other speaker records
//! neutral speech only.
//!
//! Layout on disk: `manifest.tsv`, `vocab.txt`, `emotions.txt`,
//! `mels/ID.mel`, `aif/ID.aif`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::acoustic::PAD_TOKEN;
use crate::error::{Error, Result};
use crate::frontend::{
    compute_mel, load_aif, load_mel, save_aif, save_mel, AifProvider, AifSource, FeatureSequence,
    FrontendConfig, MelSpectrogram,
};

pub const EMOTION_NAMES: [&str; 7] = [
    "neutral", "surprise", "happy", "sadness", "angry", "disgust", "fear",
];
pub const NEUTRAL: usize = 0;
pub const PAD_SYMBOL: &str = "<pad>";
pub const MANIFEST_HEADER: &str = "id\tpath\tspeaker_id\temotion_label\ttext";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub n_emotions: usize,
    pub n_speakers: usize,
    pub items_per_cell: usize,
    pub min_frames: usize,
    pub max_frames: usize,
    pub frames_per_token: usize,
    pub n_phones: usize,
    pub seed: u64,
    pub target_speaker_neutral_only: bool,
    pub aif_seed: u64,
    pub noise_std: f32,
    pub frontend: FrontendConfig,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            n_emotions: 7,
            n_speakers: 2,
            items_per_cell: 40,
            min_frames: 24,
            max_frames: 40,
            frames_per_token: 4,
            n_phones: 12,
            seed: 13,
            target_speaker_neutral_only: true,
            aif_seed: 7,
            noise_std: 0.1,
            frontend: FrontendConfig::default(),
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.n_emotions < 2 || self.n_speakers < 2 {
            return bad("need at least 2 emotions and 2 speakers".into());
        }
        if self.items_per_cell == 0 {
            return bad("items_per_cell must be positive".into());
        }
        if self.frames_per_token == 0
            || self.min_frames < self.frames_per_token
            || self.max_frames < self.min_frames
        {
            return bad(format!(
                "frame range {}..={} incompatible with {} frames per token",
                self.min_frames, self.max_frames, self.frames_per_token
            ));
        }
        if self.n_phones < 2 {
            return bad("need at least 2 phones".into());
        }
        self.frontend.validate()
    }

    pub fn emotion_names(&self) -> Vec<String> {
        emotion_names(self.n_emotions)
    }

    pub fn vocabulary(&self) -> Vocabulary {
        let mut tokens = vec![PAD_SYMBOL.to_string()];
        tokens.extend((0..self.n_phones).map(|p| format!("p{p:02}")));
        Vocabulary { tokens }
    }

    /// `(speaker, emotion)` cells and the item count in each.
    pub fn cells(&self) -> Vec<(usize, usize, usize)> {
        let mut cells = Vec::new();
        for spk in 0..self.n_speakers {
            if spk > 0 && self.target_speaker_neutral_only {
                cells.push((spk, NEUTRAL, self.items_per_cell * self.n_emotions));
            } else {
                for emo in 0..self.n_emotions {
                    cells.push((spk, emo, self.items_per_cell));
                }
            }
        }
        cells
    }
}

pub fn emotion_names(n: usize) -> Vec<String> {
    (0..n)
        .map(|k| {
            EMOTION_NAMES
                .get(k)
                .map(|s| s.to_string())
                .unwrap_or_else(|| format!("emotion{k}"))
        })
        .collect()
}

/// Token strings; index is the model token id, index 0 is padding.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub tokens: Vec<String>,
}

impl Vocabulary {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() <= 1
    }

    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        text.split_whitespace()
            .map(|tok| {
                self.tokens
                    .iter()
                    .position(|t| t == tok)
                    .filter(|&i| i as u32 != PAD_TOKEN)
                    .map(|i| i as u32)
                    .ok_or_else(|| Error::InvalidManifest(format!("unknown token {tok:?}")))
            })
            .collect()
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .map(|&i| self.tokens[i as usize].as_str())
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Emotion term parameters: (level, tilt, contour) for class `k`.
fn emotion_shape(k: usize, tau: f32) -> (f32, f32, f32) {
    use std::f32::consts::PI;
    match k {
        0 => (0.0, 0.0, 0.0),
        1 => (0.5, 0.8, 1.2 * (tau - 0.5)),
        2 => (0.8, 0.3, 0.6 * (2.0 * PI * 2.0 * tau).sin()),
        3 => (-0.8, -0.6, -(tau - 0.5)),
        4 => (1.1, -0.3, 0.5 * (2.0 * PI * tau).sin()),
        5 => (-0.3, 0.5, 0.5 - 0.8 * (PI * tau).sin()),
        6 => (-0.5, 1.0, 0.4 * (2.0 * PI * 5.0 * tau).sin()),
        k => {
            let a = k as f32;
            (
                0.6 * a.cos(),
                0.6 * a.sin(),
                0.5 * (2.0 * PI * (a - 5.0) * tau).sin(),
            )
        }
    }
}

fn speaker_offset(speaker: usize, x: f32) -> f32 {
    use std::f32::consts::PI;
    let s = speaker as f32;
    0.7 * (PI * (3.0 + 2.0 * s) * x + s).sin()
}

/// Noise-free generator parts, exposed for tests and evaluation.
pub struct MelRecipe<'a> {
    pub spec: &'a CorpusSpec,
    pub tokens: &'a [u32],
    pub emotion: usize,
    pub speaker: usize,
    pub intensity: f32,
}

impl MelRecipe<'_> {
    pub fn n_frames(&self) -> usize {
        self.tokens.len() * self.spec.frames_per_token
    }

    /// Clean log-mel value before noise and flooring.
    pub fn value(&self, t: usize, c: usize) -> f32 {
        let spec = self.spec;
        let n = spec.frontend.n_mels;
        let x = if n > 1 {
            c as f32 / (n - 1) as f32
        } else {
            0.0
        };
        let fpt = spec.frames_per_token;
        let token = self.tokens[t / fpt] as usize;
        let j = t % fpt;
        let centre = 0.1 + 0.8 * (token - 1) as f32 / (spec.n_phones - 1) as f32;
        let envelope = 0.75 + 0.25 * (std::f32::consts::PI * (j as f32 + 0.5) / fpt as f32).sin();
        let bump = 2.5 * envelope * (-(x - centre).powi(2) / (2.0 * 0.04f32.powi(2))).exp();
        let base = -5.0 + 1.5 * (1.0 - x);
        let total = self.n_frames();
        let tau = if total > 1 {
            t as f32 / (total - 1) as f32
        } else {
            0.0
        };
        let (level, tilt, contour) = emotion_shape(self.emotion, tau);
        let emotion = self.intensity * (level + tilt * (x - 0.5) + contour);
        base + bump + emotion + speaker_offset(self.speaker, x)
    }
}

fn item_seed(seed: u64, speaker: usize, emotion: usize, index: usize) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((speaker as u64).to_le_bytes());
    h.update((emotion as u64).to_le_bytes());
    h.update((index as u64).to_le_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().unwrap())
}

/// Draws one synthetic utterance: tokens and its mel.
pub fn synthesize_item(
    spec: &CorpusSpec,
    speaker: usize,
    emotion: usize,
    index: usize,
) -> Result<(Vec<u32>, MelSpectrogram)> {
    let mut rng = ChaCha8Rng::seed_from_u64(item_seed(spec.seed, speaker, emotion, index));
    let fpt = spec.frames_per_token;
    let min_tokens = spec.min_frames.div_ceil(fpt);
    let max_tokens = (spec.max_frames / fpt).max(min_tokens);
    let n_tokens = rng.random_range(min_tokens..=max_tokens);
    let tokens: Vec<u32> = (0..n_tokens)
        .map(|_| rng.random_range(1..=spec.n_phones as u32))
        .collect();
    let intensity = rng.random_range(0.8f32..=1.2);
    let recipe = MelRecipe {
        spec,
        tokens: &tokens,
        emotion,
        speaker,
        intensity,
    };
    let n = spec.frontend.n_mels;
    let t_frames = recipe.n_frames();
    let floor = spec.frontend.log_floor_value();
    let noise = Normal::new(0.0f32, spec.noise_std.max(0.0))
        .map_err(|e| Error::InvalidConfig(format!("noise std: {e}")))?;
    let mut frames = Vec::with_capacity(t_frames * n);
    for t in 0..t_frames {
        for c in 0..n {
            let v = recipe.value(t, c) + noise.sample(&mut rng);
            frames.push(v.max(floor));
        }
    }
    Ok((
        tokens,
        MelSpectrogram::new(frames, t_frames, spec.frontend.clone())?,
    ))
}

#[derive(Debug, Clone)]
pub struct GeneratedCorpus {
    pub dir: PathBuf,
    pub manifest: PathBuf,
    pub n_items: usize,
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Materializes a synthetic corpus under `dir`.
pub fn generate_corpus(spec: &CorpusSpec, dir: &Path) -> Result<GeneratedCorpus> {
    spec.validate()?;
    create_dir(&dir.join("mels"))?;
    create_dir(&dir.join("aif"))?;
    let vocab = spec.vocabulary();
    let emotions = spec.emotion_names();
    let provider = AifProvider::Stub {
        seed: spec.aif_seed,
    };
    let mut manifest = String::from(MANIFEST_HEADER);
    manifest.push('\n');
    let mut n_items = 0;
    for (speaker, emotion, count) in spec.cells() {
        for index in 0..count {
            let id = format!("s{speaker}_e{emotion}_{index:04}");
            let (tokens, mel) = synthesize_item(spec, speaker, emotion, index)?;
            let mel_rel = format!("mels/{id}.mel");
            save_mel(&mel, &dir.join(&mel_rel))?;
            let aif = provider.extract(AifSource::Mel(&mel))?;
            save_aif(&aif, &dir.join(format!("aif/{id}.aif")))?;
            manifest.push_str(&format!(
                "{id}\t{mel_rel}\t{speaker}\t{}\t{}\n",
                emotions[emotion],
                vocab.decode(&tokens)
            ));
            n_items += 1;
        }
    }
    let manifest_path = dir.join("manifest.tsv");
    write_file(&manifest_path, &manifest)?;
    write_file(&dir.join("vocab.txt"), &(vocab.tokens.join("\n") + "\n"))?;
    write_file(&dir.join("emotions.txt"), &(emotions.join("\n") + "\n"))?;
    Ok(GeneratedCorpus {
        dir: dir.to_path_buf(),
        manifest: manifest_path,
        n_items,
    })
}

/// One training/evaluation utterance held in memory.
#[derive(Debug, Clone)]
pub struct CorpusItem {
    pub id: String,
    pub tokens: Vec<u32>,
    pub mel: MelSpectrogram,
    pub aif: FeatureSequence,
    pub aif_path: PathBuf,
    pub speaker: usize,
    pub emotion: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ItemError {
    pub line: usize,
    pub id: String,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub errors: Vec<ItemError>,
}

#[derive(Debug, Clone)]
pub struct IngestOptions {
    pub frontend: FrontendConfig,
    pub provider: AifProvider,
    /// Used when the corpus has no `emotions.txt`.
    pub emotions: Vec<String>,
    /// Persist AIF extracted for items that had none on disk.
    pub write_missing_aif: bool,
}

impl Default for IngestOptions {
    fn default() -> Self {
        Self {
            frontend: FrontendConfig::default(),
            provider: AifProvider::Stub { seed: 7 },
            emotions: emotion_names(7),
            write_missing_aif: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub root: PathBuf,
    pub items: Vec<CorpusItem>,
    pub vocab: Vocabulary,
    pub emotions: Vec<String>,
    pub n_speakers: usize,
    pub fingerprint: String,
    pub report: ValidationReport,
}

struct ManifestRow {
    line: usize,
    id: String,
    path: String,
    speaker: String,
    emotion: String,
    text: String,
}

fn parse_manifest(text: &str) -> (Vec<ManifestRow>, Vec<ItemError>) {
    let mut rows = Vec::new();
    let mut errors = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() || (i == 0 && line == MANIFEST_HEADER) {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 5 {
            errors.push(ItemError {
                line: line_no,
                id: fields.first().unwrap_or(&"").to_string(),
                message: format!("expected 5 tab-separated fields, got {}", fields.len()),
            });
            continue;
        }
        rows.push(ManifestRow {
            line: line_no,
            id: fields[0].to_string(),
            path: fields[1].to_string(),
            speaker: fields[2].to_string(),
            emotion: fields[3].to_string(),
            text: fields[4].to_string(),
        });
    }
    (rows, errors)
}

fn read_lines(path: &Path) -> Result<Option<Vec<String>>> {
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(Some(
        text.lines()
            .filter(|l| !l.is_empty())
            .map(str::to_string)
            .collect(),
    ))
}

fn read_waveform(path: &Path, config: &FrontendConfig) -> Result<Vec<f32>> {
    let mut reader = hound::WavReader::open(path)
        .map_err(|e| Error::io(path, std::io::Error::other(e.to_string())))?;
    let spec = reader.spec();
    if spec.sample_rate != config.sample_rate_hz || spec.channels != 1 {
        return Err(Error::InvalidManifest(format!(
            "{}: need mono {} Hz audio, got {} ch at {} Hz",
            path.display(),
            config.sample_rate_hz,
            spec.channels,
            spec.sample_rate
        )));
    }
    let samples: std::result::Result<Vec<f32>, _> = match spec.sample_format {
        hound::SampleFormat::Float => reader.samples::<f32>().collect(),
        hound::SampleFormat::Int => {
            let scale = (1i64 << (spec.bits_per_sample - 1)) as f32;
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| v as f32 / scale))
                .collect()
        }
    };
    samples.map_err(|e| Error::io(path, std::io::Error::other(e.to_string())))
}

/// Loads a `.mel` file, or a `.wav` file through [`compute_mel`].
pub fn load_audio(path: &Path, frontend: &FrontendConfig) -> Result<MelSpectrogram> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("mel") => load_mel(path),
        Some("wav") => compute_mel(&read_waveform(path, frontend)?, frontend),
        _ => Err(Error::InvalidManifest(format!(
            "unsupported file type {}",
            path.display()
        ))),
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Reads a manifest and everything it references. Item-level problems are
/// collected in the report; only an empty result is fatal.
pub fn ingest(manifest_path: &Path, options: &IngestOptions) -> Result<Corpus> {
    let root = manifest_path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    let manifest_bytes = fs::read(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let manifest_text = String::from_utf8(manifest_bytes.clone())
        .map_err(|_| Error::InvalidManifest("manifest is not UTF-8".into()))?;
    let (rows, mut errors) = parse_manifest(&manifest_text);

    let emotions =
        read_lines(&root.join("emotions.txt"))?.unwrap_or_else(|| options.emotions.clone());
    let vocab = match read_lines(&root.join("vocab.txt"))? {
        Some(tokens) => Vocabulary { tokens },
        None => {
            let set: BTreeSet<&str> = rows
                .iter()
                .flat_map(|r| r.text.split_whitespace())
                .collect();
            let mut tokens = vec![PAD_SYMBOL.to_string()];
            tokens.extend(set.into_iter().map(str::to_string));
            Vocabulary { tokens }
        }
    };

    let mut hasher = Sha256::new();
    hasher.update(&manifest_bytes);
    let mut items = Vec::new();
    for row in rows {
        match load_row(&row, &root, &vocab, &emotions, options) {
            Ok((item, digests)) => {
                for d in digests {
                    hasher.update(d.as_bytes());
                }
                items.push(item);
            }
            Err(e) => errors.push(ItemError {
                line: row.line,
                id: row.id.clone(),
                message: e.to_string(),
            }),
        }
    }
    errors.sort_by_key(|e| e.line);
    if items.is_empty() {
        return Err(Error::EmptyCorpus(format!(
            "{}: no valid items ({} errors)",
            manifest_path.display(),
            errors.len()
        )));
    }
    let n_speakers = items.iter().map(|i| i.speaker).max().unwrap_or(0) + 1;
    Ok(Corpus {
        root,
        items,
        vocab,
        emotions,
        n_speakers: n_speakers.max(2),
        fingerprint: hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect(),
        report: ValidationReport { errors },
    })
}

fn load_row(
    row: &ManifestRow,
    root: &Path,
    vocab: &Vocabulary,
    emotions: &[String],
    options: &IngestOptions,
) -> Result<(CorpusItem, Vec<String>)> {
    let emotion = emotions
        .iter()
        .position(|e| *e == row.emotion)
        .ok_or_else(|| Error::UnknownEmotionLabel(row.emotion.clone()))?;
    let speaker: usize = row
        .speaker
        .parse()
        .map_err(|_| Error::InvalidManifest(format!("bad speaker id {:?}", row.speaker)))?;
    let tokens = vocab.encode(&row.text)?;
    if tokens.is_empty() {
        return Err(Error::InvalidManifest("empty text".into()));
    }
    let path = root.join(&row.path);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let mut digests = vec![sha256_hex(&bytes)];
    let mel = load_audio(&path, &options.frontend)?;
    let aif_path = root.join("aif").join(format!("{}.aif", row.id));
    let aif = if aif_path.exists() {
        let bytes = fs::read(&aif_path).map_err(|e| Error::io(&aif_path, e))?;
        digests.push(sha256_hex(&bytes));
        load_aif(&aif_path)?
    } else {
        let aif = options.provider.extract(AifSource::Mel(&mel))?;
        if options.write_missing_aif {
            create_dir(aif_path.parent().unwrap())?;
            save_aif(&aif, &aif_path)?;
        }
        let raw: Vec<u8> = aif.data().iter().flat_map(|v| v.to_le_bytes()).collect();
        digests.push(sha256_hex(&raw));
        aif
    };
    Ok((
        CorpusItem {
            id: row.id.clone(),
            tokens,
            mel,
            aif,
            aif_path,
            speaker,
            emotion,
        },
        digests,
    ))
}

impl Corpus {
    pub fn n_emotions(&self) -> usize {
        self.emotions.len()
    }

    pub fn n_mels(&self) -> usize {
        self.items[0].mel.n_mels()
    }

    /// Speakers that have at least one non-neutral item.
    pub fn source_speakers(&self) -> BTreeSet<usize> {
        self.items
            .iter()
            .filter(|i| i.emotion != NEUTRAL)
            .map(|i| i.speaker)
            .collect()
    }

    /// Item counts per `(speaker, emotion)`.
    pub fn cell_counts(&self) -> BTreeMap<(usize, usize), usize> {
        let mut counts = BTreeMap::new();
        for item in &self.items {
            *counts.entry((item.speaker, item.emotion)).or_insert(0) += 1;
        }
        counts
    }

    pub fn find(&self, id: &str) -> Option<&CorpusItem> {
        self.items.iter().find(|i| i.id == id)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec(seed: u64) -> CorpusSpec {
        CorpusSpec {
            items_per_cell: 2,
            seed,
            ..CorpusSpec::default()
        }
    }

    #[test]
    fn target_speaker_is_neutral_only() {
        let dir = tempfile::tempdir().unwrap();
        let gen = generate_corpus(&small_spec(1), dir.path()).unwrap();
        assert_eq!(gen.n_items, 2 * 7 * 2);
        let corpus = ingest(&gen.manifest, &IngestOptions::default()).unwrap();
        assert!(corpus.report.errors.is_empty());
        assert!(corpus
            .items
            .iter()
            .all(|i| i.speaker != 1 || i.emotion == NEUTRAL));
        assert_eq!(corpus.source_speakers(), BTreeSet::from([0]));
    }

    #[test]
    fn full_grid_is_balanced() {
        let spec = CorpusSpec {
            target_speaker_neutral_only: false,
            ..small_spec(2)
        };
        let cells = spec.cells();
        assert_eq!(cells.len(), 14);
        assert!(cells.iter().all(|&(_, _, n)| n == 2));
    }

    #[test]
    fn same_seed_same_bytes_different_seed_different_fingerprint() {
        let (a, b, c) = (
            tempfile::tempdir().unwrap(),
            tempfile::tempdir().unwrap(),
            tempfile::tempdir().unwrap(),
        );
        let ga = generate_corpus(&small_spec(5), a.path()).unwrap();
        let gb = generate_corpus(&small_spec(5), b.path()).unwrap();
        let gc = generate_corpus(&small_spec(6), c.path()).unwrap();
        assert_eq!(
            fs::read(&ga.manifest).unwrap(),
            fs::read(&gb.manifest).unwrap()
        );
        let opts = IngestOptions::default();
        let fa = ingest(&ga.manifest, &opts).unwrap().fingerprint;
        let fb = ingest(&gb.manifest, &opts).unwrap().fingerprint;
        let fc = ingest(&gc.manifest, &opts).unwrap().fingerprint;
        assert_eq!(fa, fb);
        assert_ne!(fa, fc);
    }

    #[test]
    fn mel_values_respect_floor_and_token_timing() {
        let spec = small_spec(3);
        let (tokens, mel) = synthesize_item(&spec, 0, 2, 0).unwrap();
        assert_eq!(mel.n_frames(), tokens.len() * spec.frames_per_token);
        assert!(mel.n_frames() >= spec.min_frames && mel.n_frames() <= spec.max_frames);
        let floor = spec.frontend.log_floor_value();
        assert!(mel.data().iter().all(|&v| v >= floor));
    }

    #[test]
    fn bad_rows_are_collected_not_fatal() {
        let dir = tempfile::tempdir().unwrap();
        let gen = generate_corpus(&small_spec(4), dir.path()).unwrap();
        let text = fs::read_to_string(&gen.manifest).unwrap();
        let mut lines: Vec<String> = text.lines().map(str::to_string).collect();
        lines[1] = lines[1].replace("\tneutral\t", "\tbored\t");
        lines[2] = lines[2].replace("mels/", "missing/");
        lines.push("broken row".into());
        fs::write(&gen.manifest, lines.join("\n")).unwrap();
        let corpus = ingest(&gen.manifest, &IngestOptions::default()).unwrap();
        assert_eq!(corpus.items.len(), gen.n_items - 2);
        assert_eq!(corpus.report.errors.len(), 3);
        assert!(corpus.report.errors[0]
            .message
            .contains("unknown emotion label"));
        assert!(corpus.report.errors[1].message.contains("io failure"));
    }

    #[test]
    fn empty_corpus_is_fatal() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = dir.path().join("manifest.tsv");
        fs::write(&manifest, format!("{MANIFEST_HEADER}\n")).unwrap();
        assert!(matches!(
            ingest(&manifest, &IngestOptions::default()),
            Err(Error::EmptyCorpus(_))
        ));
    }

    #[test]
    fn missing_aif_is_extracted_and_optionally_written() {
        let dir = tempfile::tempdir().unwrap();
        let gen = generate_corpus(&small_spec(8), dir.path()).unwrap();
        let victim = dir.path().join("aif/s0_e0_0000.aif");
        let original = load_aif(&victim).unwrap();
        fs::remove_file(&victim).unwrap();
        let opts = IngestOptions {
            write_missing_aif: true,
            ..IngestOptions::default()
        };
        let corpus = ingest(&gen.manifest, &opts).unwrap();
        assert_eq!(
            corpus.find("s0_e0_0000").unwrap().aif.data(),
            original.data()
        );
        assert!(victim.exists());
    }

    #[test]
    fn vocabulary_round_trip() {
        let vocab = small_spec(0).vocabulary();
        let ids = vocab.encode("p03 p11 p00").unwrap();
        assert_eq!(ids, vec![4, 12, 1]);
        assert_eq!(vocab.decode(&ids), "p03 p11 p00");
        assert!(vocab.encode("<pad>").is_err());
        assert!(vocab.encode("zz").is_err());
    }
}
