//! Signal front-end: waveform framing, log-mel analysis, and the ASR
//! intermediate feature (AIF) boundary.
//!
//! Framing uses no center padding, so a waveform of `N >= win` samples
//! yields exactly `floor((N - win) / hop) + 1` frames.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex32;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Width of every ASR intermediate feature frame.
pub const AIF_DIM: usize = 256;

const AIF_MAGIC: &[u8; 4] = b"AIF1";
const MEL_MAGIC: &[u8; 4] = b"MEL1";
const FORMAT_VERSION: u32 = 1;

/// Moving-average width the stub AIF provider applies along time.
pub const STUB_SMOOTHING_WIDTH: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrontendConfig {
    pub sample_rate_hz: u32,
    pub frame_length_ms: f32,
    pub frame_shift_ms: f32,
    pub n_mels: usize,
    pub fmin_hz: f32,
    pub fmax_hz: f32,
    pub log_floor: f32,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        Self {
            sample_rate_hz: 16_000,
            frame_length_ms: 50.0,
            frame_shift_ms: 12.5,
            n_mels: 80,
            fmin_hz: 0.0,
            fmax_hz: 8_000.0,
            log_floor: 1e-5,
        }
    }
}

impl FrontendConfig {
    fn samples_for(&self, ms: f32) -> Result<usize> {
        let exact = self.sample_rate_hz as f64 * ms as f64 / 1000.0;
        let rounded = exact.round();
        if (exact - rounded).abs() > 1e-6 || rounded < 1.0 {
            return Err(Error::InvalidConfig(format!(
                "{ms} ms at {} Hz is not a whole number of samples",
                self.sample_rate_hz
            )));
        }
        Ok(rounded as usize)
    }

    /// Analysis window length in samples.
    pub fn win_length(&self) -> Result<usize> {
        self.samples_for(self.frame_length_ms)
    }

    /// Frame shift in samples.
    pub fn hop_length(&self) -> Result<usize> {
        self.samples_for(self.frame_shift_ms)
    }

    /// FFT size: the window length rounded up to a power of two.
    pub fn n_fft(&self) -> Result<usize> {
        Ok(self.win_length()?.next_power_of_two())
    }

    pub fn validate(&self) -> Result<()> {
        if self.frame_shift_ms > self.frame_length_ms {
            return Err(Error::InvalidConfig(
                "frame shift exceeds frame length".into(),
            ));
        }
        if self.n_mels == 0 {
            return Err(Error::InvalidConfig("n_mels must be at least 1".into()));
        }
        if self.log_floor.is_nan() || self.log_floor <= 0.0 {
            return Err(Error::InvalidConfig("log floor must be positive".into()));
        }
        if !(self.fmin_hz >= 0.0 && self.fmin_hz < self.fmax_hz)
            || self.fmax_hz > self.sample_rate_hz as f32 / 2.0
        {
            return Err(Error::InvalidConfig(format!(
                "mel band [{}, {}] Hz invalid for {} Hz audio",
                self.fmin_hz, self.fmax_hz, self.sample_rate_hz
            )));
        }
        self.win_length()?;
        self.hop_length()?;
        Ok(())
    }

    /// Number of frames produced from `n_samples`, or `None` if shorter than one window.
    pub fn frame_count(&self, n_samples: usize) -> Result<Option<usize>> {
        let win = self.win_length()?;
        let hop = self.hop_length()?;
        Ok(if n_samples < win {
            None
        } else {
            Some((n_samples - win) / hop + 1)
        })
    }

    pub fn log_floor_value(&self) -> f32 {
        self.log_floor.ln()
    }
}

/// Time-by-channel matrix of natural-log mel energies.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    frames: Vec<f32>,
    n_frames: usize,
    config: FrontendConfig,
}

impl MelSpectrogram {
    /// Wraps a row-major `[n_frames x config.n_mels]` matrix.
    pub fn new(frames: Vec<f32>, n_frames: usize, config: FrontendConfig) -> Result<Self> {
        if n_frames == 0 {
            return Err(Error::EmptyReference);
        }
        if frames.len() != n_frames * config.n_mels {
            return Err(Error::InvalidConfig(format!(
                "mel data has {} values, expected {n_frames} x {}",
                frames.len(),
                config.n_mels
            )));
        }
        Ok(Self {
            frames,
            n_frames,
            config,
        })
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn n_mels(&self) -> usize {
        self.config.n_mels
    }

    pub fn config(&self) -> &FrontendConfig {
        &self.config
    }

    pub fn data(&self) -> &[f32] {
        &self.frames
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        let n = self.config.n_mels;
        &self.frames[t * n..(t + 1) * n]
    }

    pub fn into_data(self) -> Vec<f32> {
        self.frames
    }

    /// Mean log energy per channel over time.
    pub fn channel_means(&self) -> Vec<f32> {
        let n = self.config.n_mels;
        let mut out = vec![0.0f32; n];
        for t in 0..self.n_frames {
            for (o, v) in out.iter_mut().zip(self.frame(t)) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|v| *v /= self.n_frames as f32);
        out
    }
}

/// Where an AIF sequence came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Provenance {
    FileBacked,
    Stub,
}

/// `[T_a x 256]` sequence of ASR intermediate features.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    frames: Vec<f32>,
    n_frames: usize,
    provenance: Provenance,
}

impl FeatureSequence {
    pub fn new(frames: Vec<f32>, n_frames: usize, provenance: Provenance) -> Result<Self> {
        if n_frames == 0 {
            return Err(Error::EmptyReference);
        }
        if frames.len() != n_frames * AIF_DIM {
            return Err(Error::InvalidAifShape {
                expected: AIF_DIM,
                got: frames.len() / n_frames,
            });
        }
        if let Some(i) = frames.iter().position(|v| !v.is_finite()) {
            return Err(Error::AifUnavailable(format!("non-finite value at {i}")));
        }
        Ok(Self {
            frames,
            n_frames,
            provenance,
        })
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn data(&self) -> &[f32] {
        &self.frames
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    /// Row-permuted copy; used to probe order sensitivity.
    pub fn permute_rows(&self, order: &[usize]) -> Result<Self> {
        let mut out = Vec::with_capacity(self.frames.len());
        for &r in order {
            out.extend_from_slice(&self.frames[r * AIF_DIM..(r + 1) * AIF_DIM]);
        }
        Self::new(out, order.len(), self.provenance)
    }
}

fn hann(win: usize) -> Vec<f32> {
    // periodic Hann
    (0..win)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f32::consts::PI * i as f32 / win as f32).cos())
        .collect()
}

fn hz_to_mel(hz: f32) -> f32 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

fn mel_to_hz(mel: f32) -> f32 {
    700.0 * (10f32.powf(mel / 2595.0) - 1.0)
}

/// Triangular mel filterbank, `[n_mels][n_fft / 2 + 1]`.
pub fn mel_filterbank(config: &FrontendConfig) -> Result<Vec<Vec<f32>>> {
    let n_fft = config.n_fft()?;
    let n_bins = n_fft / 2 + 1;
    let lo = hz_to_mel(config.fmin_hz);
    let hi = hz_to_mel(config.fmax_hz);
    let edges: Vec<f32> = (0..config.n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f32 / (config.n_mels + 1) as f32))
        .collect();
    let bin_hz = config.sample_rate_hz as f32 / n_fft as f32;
    let mut bank = vec![vec![0.0f32; n_bins]; config.n_mels];
    for (m, row) in bank.iter_mut().enumerate() {
        let (left, centre, right) = (edges[m], edges[m + 1], edges[m + 2]);
        for (k, w) in row.iter_mut().enumerate() {
            let f = k as f32 * bin_hz;
            let up = (f - left) / (centre - left);
            let down = (right - f) / (right - centre);
            *w = up.min(down).max(0.0);
        }
    }
    Ok(bank)
}

/// Log-mel analysis of a mono waveform sampled at `config.sample_rate_hz`.
pub fn compute_mel(waveform: &[f32], config: &FrontendConfig) -> Result<MelSpectrogram> {
    config.validate()?;
    if let Some(i) = waveform.iter().position(|v| !v.is_finite()) {
        return Err(Error::InvalidWaveform(i));
    }
    let win = config.win_length()?;
    let hop = config.hop_length()?;
    let n_frames = config
        .frame_count(waveform.len())?
        .ok_or(Error::InputTooShort {
            samples: waveform.len(),
            needed: win,
        })?;
    let n_fft = config.n_fft()?;
    let window = hann(win);
    let bank = mel_filterbank(config)?;
    let fft = FftPlanner::<f32>::new().plan_fft_forward(n_fft);
    let floor = config.log_floor;

    let mut buf = vec![Complex32::new(0.0, 0.0); n_fft];
    let mut mag = vec![0.0f32; n_fft / 2 + 1];
    let mut frames = Vec::with_capacity(n_frames * config.n_mels);
    for t in 0..n_frames {
        let start = t * hop;
        buf.iter_mut().for_each(|c| *c = Complex32::new(0.0, 0.0));
        for (i, (s, w)) in waveform[start..start + win].iter().zip(&window).enumerate() {
            buf[i].re = s * w;
        }
        fft.process(&mut buf);
        for (m, c) in mag.iter_mut().zip(&buf) {
            *m = c.norm();
        }
        for filter in &bank {
            let energy: f32 = filter.iter().zip(&mag).map(|(w, m)| w * m).sum();
            frames.push(energy.max(floor).ln());
        }
    }
    MelSpectrogram::new(frames, n_frames, config.clone())
}

/// Griffin-Lim phase reconstruction from a log-mel spectrogram.
///
/// Meant only for listening to synthesized mels; the mel-to-linear step is a
/// normalized transpose of the filterbank rather than an exact inverse.
pub fn griffin_lim(mel: &MelSpectrogram, iterations: usize, seed: u64) -> Result<Vec<f32>> {
    let config = mel.config();
    let win = config.win_length()?;
    let hop = config.hop_length()?;
    let n_fft = config.n_fft()?;
    let n_bins = n_fft / 2 + 1;
    let bank = mel_filterbank(config)?;
    let mut col_sum = vec![0.0f32; n_bins];
    for row in &bank {
        for (c, w) in col_sum.iter_mut().zip(row) {
            *c += w * w;
        }
    }
    let t_frames = mel.n_frames();
    let target: Vec<Vec<f32>> = (0..t_frames)
        .map(|t| {
            let lin: Vec<f32> = mel.frame(t).iter().map(|v| v.exp()).collect();
            (0..n_bins)
                .map(|k| {
                    if col_sum[k] <= 0.0 {
                        return 0.0;
                    }
                    let s: f32 = bank.iter().zip(&lin).map(|(row, l)| row[k] * l).sum();
                    s / col_sum[k]
                })
                .collect()
        })
        .collect();

    let mut planner = FftPlanner::<f32>::new();
    let fwd = planner.plan_fft_forward(n_fft);
    let inv = planner.plan_fft_inverse(n_fft);
    let window = hann(win);
    let n_samples = (t_frames - 1) * hop + win;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut phases: Vec<Vec<Complex32>> = (0..t_frames)
        .map(|_| {
            (0..n_bins)
                .map(|_| {
                    let a = rand::Rng::random::<f32>(&mut rng) * std::f32::consts::TAU;
                    Complex32::new(a.cos(), a.sin())
                })
                .collect()
        })
        .collect();

    let mut signal = vec![0.0f32; n_samples];
    for it in 0..=iterations {
        signal = overlap_add(&target, &phases, &window, hop, n_samples, &inv);
        if it == iterations {
            break;
        }
        phases = analyse_phases(&signal, &window, hop, t_frames, n_fft, &fwd);
    }
    Ok(signal)
}

fn overlap_add(
    mags: &[Vec<f32>],
    phases: &[Vec<Complex32>],
    window: &[f32],
    hop: usize,
    n_samples: usize,
    inv: &Arc<dyn Fft<f32>>,
) -> Vec<f32> {
    let n_fft = inv.len();
    let mut out = vec![0.0f32; n_samples];
    let mut norm = vec![0.0f32; n_samples];
    let mut buf = vec![Complex32::new(0.0, 0.0); n_fft];
    for (t, (mag, ph)) in mags.iter().zip(phases).enumerate() {
        for (k, slot) in buf.iter_mut().enumerate() {
            let bin = if k <= n_fft / 2 { k } else { n_fft - k };
            let c = ph[bin] * mag[bin];
            *slot = if k <= n_fft / 2 { c } else { c.conj() };
        }
        inv.process(&mut buf);
        let start = t * hop;
        for (i, w) in window.iter().enumerate() {
            out[start + i] += buf[i].re / n_fft as f32 * w;
            norm[start + i] += w * w;
        }
    }
    for (o, n) in out.iter_mut().zip(&norm) {
        if *n > 1e-8 {
            *o /= n;
        }
    }
    out
}

fn analyse_phases(
    signal: &[f32],
    window: &[f32],
    hop: usize,
    t_frames: usize,
    n_fft: usize,
    fwd: &Arc<dyn Fft<f32>>,
) -> Vec<Vec<Complex32>> {
    let mut buf = vec![Complex32::new(0.0, 0.0); n_fft];
    (0..t_frames)
        .map(|t| {
            buf.iter_mut().for_each(|c| *c = Complex32::new(0.0, 0.0));
            for (i, w) in window.iter().enumerate() {
                buf[i].re = signal[t * hop + i] * w;
            }
            fwd.process(&mut buf);
            buf[..n_fft / 2 + 1]
                .iter()
                .map(|c| {
                    let n = c.norm();
                    if n > 1e-12 {
                        c / n
                    } else {
                        Complex32::new(1.0, 0.0)
                    }
                })
                .collect()
        })
        .collect()
}

/// Writes 16-bit PCM mono audio, peak-normalized to 0.9.
pub fn write_wav(path: &Path, samples: &[f32], sample_rate_hz: u32) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: sample_rate_hz,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let to_io = |e: hound::Error| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::io(path, std::io::Error::other(other.to_string())),
    };
    let peak = samples.iter().fold(0.0f32, |m, v| m.max(v.abs())).max(1e-9);
    let mut writer = hound::WavWriter::create(path, spec).map_err(to_io)?;
    for s in samples {
        let v = (s / peak * 0.9 * i16::MAX as f32).round() as i16;
        writer.write_sample(v).map_err(to_io)?;
    }
    writer.finalize().map_err(to_io)
}

/// Source audio for AIF extraction.
#[derive(Debug, Clone, Copy)]
pub enum AifSource<'a> {
    Mel(&'a MelSpectrogram),
    Waveform(&'a [f32], &'a FrontendConfig),
}

/// Pluggable provider of ASR intermediate features.
#[derive(Debug, Clone, PartialEq)]
pub enum AifProvider {
    /// Reads a stored AIF1 file verbatim.
    FileBacked(PathBuf),
    /// Deterministic stand-in for a pretrained ASR encoder: a seeded random
    /// projection of each mel frame to 256 dims, then a width-5 moving
    /// average along time. Carries no learned prosody.
    Stub { seed: u64 },
}

impl AifProvider {
    pub fn extract(&self, source: AifSource<'_>) -> Result<FeatureSequence> {
        match self {
            AifProvider::FileBacked(path) => match load_aif(path) {
                Ok(seq) => Ok(seq),
                Err(e @ Error::InvalidAifShape { .. }) => Err(e),
                Err(e) => Err(Error::AifUnavailable(e.to_string())),
            },
            AifProvider::Stub { seed } => match source {
                AifSource::Mel(mel) => Ok(stub_features(mel, *seed)),
                AifSource::Waveform(wave, config) => {
                    Ok(stub_features(&compute_mel(wave, config)?, *seed))
                }
            },
        }
    }
}

/// Convenience wrapper over [`AifProvider::extract`].
pub fn extract_aif(source: AifSource<'_>, provider: &AifProvider) -> Result<FeatureSequence> {
    provider.extract(source)
}

/// The stub provider's projection matrix, `[n_mels x 256]` row-major.
pub fn stub_projection(n_mels: usize, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = 1.0 / (n_mels as f32).sqrt();
    (0..n_mels * AIF_DIM)
        .map(|_| {
            let v: f32 = StandardNormal.sample(&mut rng);
            v * scale
        })
        .collect()
}

fn stub_features(mel: &MelSpectrogram, seed: u64) -> FeatureSequence {
    let n_mels = mel.n_mels();
    let t = mel.n_frames();
    let proj = stub_projection(n_mels, seed);
    let mut projected = vec![0.0f32; t * AIF_DIM];
    for f in 0..t {
        let row = &mut projected[f * AIF_DIM..(f + 1) * AIF_DIM];
        for (m, &x) in mel.frame(f).iter().enumerate() {
            if x == 0.0 {
                continue;
            }
            let p = &proj[m * AIF_DIM..(m + 1) * AIF_DIM];
            for (r, w) in row.iter_mut().zip(p) {
                *r += x * w;
            }
        }
    }
    let half = STUB_SMOOTHING_WIDTH / 2;
    let mut smoothed = vec![0.0f32; t * AIF_DIM];
    for f in 0..t {
        let lo = f.saturating_sub(half);
        let hi = (f + half).min(t - 1);
        let n = (hi - lo + 1) as f32;
        let out = &mut smoothed[f * AIF_DIM..(f + 1) * AIF_DIM];
        for g in lo..=hi {
            for (o, v) in out
                .iter_mut()
                .zip(&projected[g * AIF_DIM..(g + 1) * AIF_DIM])
            {
                *o += v;
            }
        }
        out.iter_mut().for_each(|v| *v /= n);
    }
    FeatureSequence {
        frames: smoothed,
        n_frames: t,
        provenance: Provenance::Stub,
    }
}

fn write_matrix(
    path: &Path,
    magic: &[u8; 4],
    rows: usize,
    cols: usize,
    data: &[f32],
    trailer: &[u8],
) -> Result<()> {
    let mut bytes = Vec::with_capacity(16 + data.len() * 4 + trailer.len());
    bytes.extend_from_slice(magic);
    bytes.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(rows as u32).to_le_bytes());
    bytes.extend_from_slice(&(cols as u32).to_le_bytes());
    for v in data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    bytes.extend_from_slice(trailer);
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

struct RawMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
    trailer: Vec<u8>,
}

fn read_matrix(path: &Path, magic: &[u8; 4], kind: &'static str) -> Result<RawMatrix> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let bad = |reason: &str| Error::UnrecognizedFile {
        kind,
        reason: reason.to_string(),
    };
    if bytes.len() < 16 || &bytes[..4] != magic {
        return Err(bad("bad magic"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    if word(4) != FORMAT_VERSION {
        return Err(bad("unsupported version"));
    }
    let rows = word(8) as usize;
    let cols = word(12) as usize;
    let end = 16 + rows * cols * 4;
    if bytes.len() < end {
        return Err(bad("truncated data"));
    }
    let data = bytes[16..end]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(RawMatrix {
        rows,
        cols,
        data,
        trailer: bytes[end..].to_vec(),
    })
}

pub fn save_aif(seq: &FeatureSequence, path: &Path) -> Result<()> {
    write_matrix(path, AIF_MAGIC, seq.n_frames, AIF_DIM, &seq.frames, &[])
}

pub fn load_aif(path: &Path) -> Result<FeatureSequence> {
    let raw = read_matrix(path, AIF_MAGIC, "aif")?;
    if raw.cols != AIF_DIM {
        return Err(Error::InvalidAifShape {
            expected: AIF_DIM,
            got: raw.cols,
        });
    }
    if !raw.trailer.is_empty() {
        return Err(Error::UnrecognizedFile {
            kind: "aif",
            reason: "trailing bytes".into(),
        });
    }
    FeatureSequence::new(raw.data, raw.rows, Provenance::FileBacked)
}

pub fn save_mel(mel: &MelSpectrogram, path: &Path) -> Result<()> {
    let c = &mel.config;
    let mut trailer = Vec::with_capacity(12);
    trailer.extend_from_slice(&c.sample_rate_hz.to_le_bytes());
    trailer.extend_from_slice(&c.frame_length_ms.to_le_bytes());
    trailer.extend_from_slice(&c.frame_shift_ms.to_le_bytes());
    write_matrix(
        path,
        MEL_MAGIC,
        mel.n_frames,
        c.n_mels,
        &mel.frames,
        &trailer,
    )
}

/// Loads a MEL1 file. Band edges and floor are not stored and take defaults.
pub fn load_mel(path: &Path) -> Result<MelSpectrogram> {
    let raw = read_matrix(path, MEL_MAGIC, "mel")?;
    if raw.trailer.len() != 12 {
        return Err(Error::UnrecognizedFile {
            kind: "mel",
            reason: "missing metadata block".into(),
        });
    }
    let t = &raw.trailer;
    let config = FrontendConfig {
        sample_rate_hz: u32::from_le_bytes(t[0..4].try_into().unwrap()),
        frame_length_ms: f32::from_le_bytes(t[4..8].try_into().unwrap()),
        frame_shift_ms: f32::from_le_bytes(t[8..12].try_into().unwrap()),
        n_mels: raw.cols,
        ..FrontendConfig::default()
    };
    if raw.rows == 0 {
        return Err(Error::UnrecognizedFile {
            kind: "mel",
            reason: "zero frames".into(),
        });
    }
    MelSpectrogram::new(raw.data, raw.rows, config)
}
