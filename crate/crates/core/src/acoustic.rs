//! Text-to-mel skeleton: convolutional/recurrent text encoder, additive
//! emotion conditioning, location-sensitive attention decoder with a
//! per-frame speaker vector, and a residual post-net.

use candle_core::{CpuStorage, DType, Device, Layout, Shape, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    add_bias, add_per_sequence, bce_with_logits, contiguous_slice, matmul_last, BatchNorm, Conv1d,
    Embedding, GruCell, Linear, Mode, Real, Scope,
};
use crate::sdm::EMBED_DIM;

/// Width of a speaker look-up table row.
pub const SPEAKER_DIM: usize = 128;

/// Token id reserved for padding.
pub const PAD_TOKEN: u32 = 0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcousticParams {
    pub vocab_size: usize,
    pub n_mels: usize,
    pub embedding_dim: usize,
    pub encoder_kernel: usize,
    pub prenet_dim: usize,
    pub decoder_dim: usize,
    pub attention_dim: usize,
    pub location_filters: usize,
    pub location_kernel: usize,
    pub postnet_channels: usize,
    pub postnet_kernel: usize,
    pub max_frames: usize,
}

impl AcousticParams {
    pub fn new(vocab_size: usize, n_mels: usize) -> Self {
        Self {
            vocab_size,
            n_mels,
            embedding_dim: 128,
            encoder_kernel: 5,
            prenet_dim: 64,
            decoder_dim: 256,
            attention_dim: 128,
            location_filters: 16,
            location_kernel: 15,
            postnet_channels: 128,
            postnet_kernel: 5,
            max_frames: 1000,
        }
    }
}

/// Closed-vocabulary token sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TextSequence {
    ids: Vec<u32>,
}

impl TextSequence {
    pub fn new(ids: Vec<u32>, vocab_size: usize) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::EmptyReference);
        }
        if let Some(&bad) = ids
            .iter()
            .find(|&&t| t as usize >= vocab_size || t == PAD_TOKEN)
        {
            return Err(Error::InvalidToken {
                token: bad as usize,
                vocab: vocab_size,
            });
        }
        Ok(Self { ids })
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct TextEncoder {
    embedding: Embedding,
    convs: Vec<(Conv1d, BatchNorm)>,
    forward_gru: GruCell,
    backward_gru: GruCell,
}

impl TextEncoder {
    pub fn new(s: &mut Scope<'_>, p: &AcousticParams) -> Result<Self> {
        let embedding = Embedding::new(&mut s.pp("embedding"), p.vocab_size, p.embedding_dim)?;
        let convs = (0..3)
            .map(|i| {
                Ok((
                    Conv1d::new(
                        &mut s.pp(&format!("conv{i}")),
                        p.embedding_dim,
                        p.embedding_dim,
                        p.encoder_kernel,
                        true,
                    )?,
                    BatchNorm::new(&mut s.pp(&format!("bn{i}")), p.embedding_dim)?,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        let half = EMBED_DIM / 2;
        Ok(Self {
            embedding,
            convs,
            forward_gru: GruCell::new(&mut s.pp("gru_fwd"), p.embedding_dim, half)?,
            backward_gru: GruCell::new(&mut s.pp("gru_bwd"), p.embedding_dim, half)?,
        })
    }

    /// `[B, L]` u32 ids -> `[B, L, 256]`.
    pub fn forward(&self, tokens: &Tensor, lengths: &[usize], mode: Mode) -> Result<Tensor> {
        let mut h = self.embedding.forward(tokens)?.transpose(1, 2)?;
        for (conv, bn) in &self.convs {
            h = bn.forward(&conv.forward(&h)?, mode)?.relu()?;
        }
        let h = h.transpose(1, 2)?.contiguous()?;
        let (fwd, _) = self.forward_gru.run(&h, Some(lengths), false)?;
        let (bwd, _) = self.backward_gru.run(&h, Some(lengths), true)?;
        Ok(Tensor::cat(&[fwd, bwd], 2)?)
    }
}

/// Adds the emotion and prosody-compensation embeddings to every encoder
/// position. A missing embedding contributes nothing.
pub fn condition(
    encoder_out: &Tensor,
    emotion: Option<&Tensor>,
    compensation: Option<&Tensor>,
) -> Result<Tensor> {
    let (b, _, d) = encoder_out.dims3()?;
    let mut out = encoder_out.clone();
    for emb in [emotion, compensation].into_iter().flatten() {
        if emb.dims() != [b, d] || d != EMBED_DIM {
            return Err(Error::ConditioningDimMismatch(format!(
                "encoder output {:?} vs embedding {:?}",
                encoder_out.dims(),
                emb.dims()
            )));
        }
        out = add_per_sequence(&out, emb)?;
    }
    Ok(out)
}

/// Trainable per-speaker vectors.
#[derive(Clone, Debug)]
pub struct SpeakerTable {
    table: Embedding,
}

impl SpeakerTable {
    pub fn new(s: &mut Scope<'_>, n_speakers: usize) -> Result<Self> {
        Ok(Self {
            table: Embedding::new(s, n_speakers, SPEAKER_DIM)?,
        })
    }

    pub fn n_speakers(&self) -> usize {
        self.table.rows()
    }

    pub fn table(&self) -> &Tensor {
        self.table.table()
    }

    pub fn lookup(&self, ids: &[usize]) -> Result<Tensor> {
        let n = self.n_speakers();
        if let Some(&bad) = ids.iter().find(|&&i| i >= n) {
            return Err(Error::UnknownSpeaker {
                id: bad,
                n_speakers: n,
            });
        }
        let idx: Vec<u32> = ids.iter().map(|&i| i as u32).collect();
        let idx = Tensor::from_vec(idx, ids.len(), self.table().device())?;
        Ok(self.table().index_select(&idx, 0)?)
    }
}

#[derive(Clone, Debug)]
struct LocationAttention {
    query: Linear,
    memory: Linear,
    location_conv: Conv1d,
    location_dense: Linear,
    score: Linear,
}

impl LocationAttention {
    fn new(s: &mut Scope<'_>, p: &AcousticParams) -> Result<Self> {
        Ok(Self {
            query: Linear::new(&mut s.pp("query"), p.decoder_dim, p.attention_dim, false)?,
            memory: Linear::new(&mut s.pp("memory"), EMBED_DIM, p.attention_dim, false)?,
            location_conv: Conv1d::new(
                &mut s.pp("location_conv"),
                2,
                p.location_filters,
                p.location_kernel,
                false,
            )?,
            location_dense: Linear::new(
                &mut s.pp("location_dense"),
                p.location_filters,
                p.attention_dim,
                false,
            )?,
            score: Linear::new(&mut s.pp("score"), p.attention_dim, 1, false)?,
        })
    }

    /// Conv filters composed with the dense projection: `[2 * kernel, A]`.
    fn location_projection(&self) -> Result<Tensor> {
        Ok(self
            .location_conv
            .weight()
            .t()?
            .matmul(self.location_dense.weight())?)
    }

    /// Softmax weights `[B, L]` for one decoder step; positions at or past
    /// each row's length get exactly zero weight.
    fn weights(
        &self,
        query: &Tensor,
        processed_memory: &Tensor,
        location_projection: &Tensor,
        prev: &Tensor,
        cumulative: &Tensor,
        lengths: &[usize],
    ) -> Result<Tensor> {
        let (b, l, a) = processed_memory.dims3()?;
        let loc = Tensor::stack(&[prev, cumulative], 1)?; // [B, 2, L]
        let loc = self
            .location_conv
            .columns(&loc)?
            .matmul(location_projection)?
            .reshape((b, l, a))?;
        let pre = (processed_memory + loc)?;
        let q = self.query.forward(query)?;
        let v = self.score.weight().reshape(a)?;
        Ok(pre.apply_op3(
            &q.contiguous()?,
            &v.contiguous()?,
            AttentionSoftmax {
                lengths: lengths.to_vec(),
            },
        )?)
    }
}

/// `w[b, :] = softmax_l(Σ_a v[a] · tanh(pre[b, l, a] + q[b, a]))` over the
/// first `lengths[b]` positions, zero elsewhere.
struct AttentionSoftmax {
    lengths: Vec<usize>,
}

impl AttentionSoftmax {
    fn energies<T: Real>(
        &self,
        pre: &[T],
        q: &[T],
        v: &[T],
        l: usize,
        a: usize,
    ) -> (Vec<f64>, Vec<f64>) {
        let b = self.lengths.len();
        let mut tanh = vec![0f64; b * l * a];
        let mut weights = vec![0f64; b * l];
        for bi in 0..b {
            let n = self.lengths[bi].min(l);
            let mut max = f64::NEG_INFINITY;
            for li in 0..n {
                let mut e = 0.0;
                for ai in 0..a {
                    let idx = (bi * l + li) * a + ai;
                    let t = (pre[idx].to_f64() + q[bi * a + ai].to_f64()).tanh();
                    tanh[idx] = t;
                    e += v[ai].to_f64() * t;
                }
                weights[bi * l + li] = e;
                max = max.max(e);
            }
            let mut z = 0.0;
            for w in &mut weights[bi * l..bi * l + n] {
                *w = (*w - max).exp();
                z += *w;
            }
            weights[bi * l..bi * l + n].iter_mut().for_each(|w| *w /= z);
        }
        (tanh, weights)
    }
}

impl candle_core::CustomOp3 for AttentionSoftmax {
    fn name(&self) -> &'static str {
        "attention-softmax"
    }

    fn cpu_fwd(
        &self,
        pre: &CpuStorage,
        lp: &Layout,
        q: &CpuStorage,
        lq: &Layout,
        v: &CpuStorage,
        lv: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, l, a) = lp.shape().dims3()?;
        let out = match (pre, q, v) {
            (CpuStorage::F32(p), CpuStorage::F32(q), CpuStorage::F32(v)) => {
                let (_, w) = self.energies(
                    contiguous_slice(p, lp)?,
                    contiguous_slice(q, lq)?,
                    contiguous_slice(v, lv)?,
                    l,
                    a,
                );
                CpuStorage::F32(w.into_iter().map(|x| x as f32).collect())
            }
            (CpuStorage::F64(p), CpuStorage::F64(q), CpuStorage::F64(v)) => {
                let (_, w) = self.energies(
                    contiguous_slice(p, lp)?,
                    contiguous_slice(q, lq)?,
                    contiguous_slice(v, lv)?,
                    l,
                    a,
                );
                CpuStorage::F64(w)
            }
            _ => {
                return Err(candle_core::Error::Msg(
                    "attention supports f32 and f64 only".into(),
                ))
            }
        };
        Ok((out, Shape::from((b, l))))
    }

    fn bwd(
        &self,
        pre: &Tensor,
        q: &Tensor,
        v: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let (b, l, a) = pre.dims3()?;
        let dev = pre.device();
        macro_rules! run {
            ($t:ty) => {{
                let flat = |t: &Tensor| t.flatten_all().and_then(|t| t.to_vec1::<$t>());
                let (pv, qv, vv, g) = (flat(pre)?, flat(q)?, flat(v)?, flat(grad)?);
                let (tanh, w) = self.energies(&pv, &qv, &vv, l, a);
                let mut dpre = vec![0 as $t; b * l * a];
                let mut dq = vec![0 as $t; b * a];
                let mut dv = vec![0f64; a];
                for bi in 0..b {
                    let n = self.lengths[bi].min(l);
                    let dot: f64 = (0..n)
                        .map(|li| g[bi * l + li] as f64 * w[bi * l + li])
                        .sum();
                    for li in 0..n {
                        let de = w[bi * l + li] * (g[bi * l + li] as f64 - dot);
                        for ai in 0..a {
                            let idx = (bi * l + li) * a + ai;
                            let t = tanh[idx];
                            let d = de * vv[ai] as f64 * (1.0 - t * t);
                            dpre[idx] = d as $t;
                            dq[bi * a + ai] += d as $t;
                            dv[ai] += de * t;
                        }
                    }
                }
                (
                    Tensor::from_vec(dpre, (b, l, a), dev)?,
                    Tensor::from_vec(dq, (b, a), dev)?,
                    Tensor::from_vec(dv.into_iter().map(|x| x as $t).collect::<Vec<$t>>(), a, dev)?,
                )
            }};
        }
        let (dp, dq, dv) = match pre.dtype() {
            DType::F64 => run!(f64),
            _ => run!(f32),
        };
        Ok((Some(dp), Some(dq), Some(dv)))
    }
}

#[derive(Clone, Debug)]
pub struct Postnet {
    layers: Vec<(Conv1d, BatchNorm)>,
}

impl Postnet {
    fn new(s: &mut Scope<'_>, p: &AcousticParams) -> Result<Self> {
        let mut layers = Vec::with_capacity(5);
        for i in 0..5 {
            let c_in = if i == 0 { p.n_mels } else { p.postnet_channels };
            let c_out = if i == 4 { p.n_mels } else { p.postnet_channels };
            layers.push((
                Conv1d::new(
                    &mut s.pp(&format!("conv{i}")),
                    c_in,
                    c_out,
                    p.postnet_kernel,
                    true,
                )?,
                BatchNorm::new(&mut s.pp(&format!("bn{i}")), c_out)?,
            ));
        }
        Ok(Self { layers })
    }

    /// Residual correction for `[B, T, M]` frames.
    fn forward(&self, mel: &Tensor, mode: Mode) -> Result<Tensor> {
        let mut h = mel.transpose(1, 2)?;
        let last = self.layers.len() - 1;
        for (i, (conv, bn)) in self.layers.iter().enumerate() {
            h = bn.forward(&conv.forward(&h)?, mode)?;
            if i != last {
                h = h.tanh()?;
            }
        }
        Ok(h.transpose(1, 2)?)
    }
}

pub enum DecodeMode<'a> {
    /// `[B, T, M]` ground-truth frames fed back as decoder inputs.
    TeacherForced(&'a Tensor),
    FreeRunning {
        max_frames: usize,
    },
}

pub struct DecoderOutput {
    pub mel_before: Tensor,
    pub mel_after: Tensor,
    pub stop_logits: Tensor,
    pub alignments: Tensor,
    /// Frames each row produced before stopping (teacher forcing: all of them).
    pub lengths: Vec<usize>,
    /// Some row reached `max_frames` without a stop decision.
    pub unterminated: bool,
}

#[derive(Clone, Debug)]
pub struct Decoder {
    prenet: [Linear; 2],
    attention_rnn: GruCell,
    attention: LocationAttention,
    decoder_rnn: GruCell,
    frame_proj: Linear,
    stop_proj: Linear,
    postnet: Postnet,
    n_mels: usize,
}

impl Decoder {
    pub fn new(s: &mut Scope<'_>, p: &AcousticParams) -> Result<Self> {
        Ok(Self {
            prenet: [
                Linear::new(&mut s.pp("prenet0"), p.n_mels, p.prenet_dim, true)?,
                Linear::new(&mut s.pp("prenet1"), p.prenet_dim, p.prenet_dim, true)?,
            ],
            attention_rnn: GruCell::new(
                &mut s.pp("attention_rnn"),
                p.prenet_dim + SPEAKER_DIM + EMBED_DIM,
                p.decoder_dim,
            )?,
            attention: LocationAttention::new(&mut s.pp("attention"), p)?,
            decoder_rnn: GruCell::new(
                &mut s.pp("decoder_rnn"),
                p.decoder_dim + EMBED_DIM,
                p.decoder_dim,
            )?,
            frame_proj: Linear::new(
                &mut s.pp("frame_proj"),
                p.decoder_dim + EMBED_DIM,
                p.n_mels,
                true,
            )?,
            stop_proj: Linear::new(&mut s.pp("stop_proj"), p.decoder_dim + EMBED_DIM, 1, true)?,
            postnet: Postnet::new(&mut s.pp("postnet"), p)?,
            n_mels: p.n_mels,
        })
    }

    fn prenet(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.prenet[0].forward(x)?.relu()?;
        Ok(self.prenet[1].forward(&h)?.relu()?)
    }

    /// Runs the decoder over conditioned encoder states `[B, L, 256]`.
    pub fn forward(
        &self,
        memory: &Tensor,
        memory_lengths: &[usize],
        speaker: &Tensor,
        mode: DecodeMode<'_>,
        nn_mode: Mode,
    ) -> Result<DecoderOutput> {
        let (b, l, d) = memory.dims3()?;
        if speaker.dims() != [b, SPEAKER_DIM] {
            return Err(Error::ConditioningDimMismatch(format!(
                "speaker vectors {:?}, expected [{b}, {SPEAKER_DIM}]",
                speaker.dims()
            )));
        }
        let device = memory.device().clone();
        let processed = self.attention.memory.forward(memory)?;
        let location_projection = self.attention.location_projection()?;
        let mut h_att = self.attention_rnn.zeros(b, &device)?;
        let mut h_dec = self.decoder_rnn.zeros(b, &device)?;
        let mut context = Tensor::zeros((b, d), DType::F32, &device)?;
        let mut prev_align = Tensor::zeros((b, l), DType::F32, &device)?;
        let mut cum_align = prev_align.clone();

        let (teacher_prenet, n_steps) = match &mode {
            DecodeMode::TeacherForced(targets) => {
                let (tb, t, m) = targets.dims3()?;
                if tb != b || m != self.n_mels {
                    return Err(Error::LossShapeMismatch(format!(
                        "targets {:?} for batch {b} with {} mels",
                        targets.dims(),
                        self.n_mels
                    )));
                }
                // inputs are the targets shifted right by one (zero go-frame)
                let shifted = targets.narrow(1, 0, t - 1)?.pad_with_zeros(1, 1, 0)?;
                (Some(self.prenet(&shifted)?), t)
            }
            DecodeMode::FreeRunning { max_frames } => (None, *max_frames),
        };

        // attention-rnn input gates split by input block: [prenet | speaker | context]
        let w_ih = self.attention_rnn.input_weight();
        let pd = self.prenet[1].weight().dim(1)?;
        let w_prenet = w_ih.narrow(0, 0, pd)?;
        let w_context = w_ih.narrow(0, pd + SPEAKER_DIM, d)?;
        let speaker_gates = add_bias(
            &speaker.matmul(&w_ih.narrow(0, pd, SPEAKER_DIM)?)?,
            self.attention_rnn.input_bias(),
        )?;
        let teacher_gates = match &teacher_prenet {
            Some(tp) => Some(add_per_sequence(
                &matmul_last(tp, &w_prenet)?,
                &speaker_gates,
            )?),
            None => None,
        };

        let mut outs = Vec::new();
        let mut frames = Vec::new();
        let mut stops = Vec::new();
        let mut aligns = Vec::new();
        let mut lengths = vec![0usize; b];
        let mut done = vec![false; b];
        let mut prev_frame = Tensor::zeros((b, self.n_mels), DType::F32, &device)?;
        for step in 0..n_steps {
            let static_gates = match &teacher_gates {
                Some(g) => g.narrow(1, step, 1)?.squeeze(1)?,
                None => (self.prenet(&prev_frame)?.matmul(&w_prenet)? + &speaker_gates)?,
            };
            let gates = (static_gates + context.matmul(&w_context)?)?;
            h_att = self.attention_rnn.step_gates(&gates, &h_att)?;
            let align = self.attention.weights(
                &h_att,
                &processed,
                &location_projection,
                &prev_align,
                &cum_align,
                memory_lengths,
            )?;
            context = align.unsqueeze(1)?.matmul(memory)?.squeeze(1)?;
            let dec_in = Tensor::cat(&[&h_att, &context], 1)?;
            h_dec = self.decoder_rnn.step(&dec_in, &h_dec)?;
            let out = Tensor::cat(&[&h_dec, &context], 1)?;
            cum_align = (cum_align + &align)?;
            prev_align = align.clone();
            aligns.push(align);
            if teacher_gates.is_some() {
                outs.push(out);
                continue;
            }
            let frame = self.frame_proj.forward(&out)?;
            let stop = self.stop_proj.forward(&out)?.squeeze(1)?;
            frames.push(frame.clone());
            stops.push(stop.clone());
            let probs = candle_nn::ops::sigmoid(&stop)?.to_vec1::<f32>()?;
            for (i, prob) in probs.iter().enumerate() {
                if !done[i] {
                    lengths[i] = step + 1;
                    done[i] = *prob > 0.5;
                }
            }
            if done.iter().all(|&d| d) {
                break;
            }
            prev_frame = frame.detach();
        }
        let unterminated = teacher_gates.is_none() && done.iter().any(|&d| !d);
        let (mel_before, stop_logits) = if teacher_gates.is_some() {
            lengths = vec![n_steps; b];
            let outs = Tensor::stack(&outs, 1)?;
            (
                self.frame_proj.forward(&outs)?,
                self.stop_proj.forward(&outs)?.squeeze(2)?,
            )
        } else {
            (Tensor::stack(&frames, 1)?, Tensor::stack(&stops, 1)?)
        };
        let mel_after = (&mel_before + self.postnet.forward(&mel_before, nn_mode)?)?;
        Ok(DecoderOutput {
            mel_before,
            mel_after,
            stop_logits,
            alignments: Tensor::stack(&aligns, 1)?,
            lengths,
            unterminated,
        })
    }
}

/// `[B, T]` float mask, 1 on valid frames.
pub fn frame_mask(lengths: &[usize], t: usize, device: &Device) -> Result<Tensor> {
    let data: Vec<f32> = lengths
        .iter()
        .flat_map(|&n| (0..t).map(move |i| if i < n { 1.0 } else { 0.0 }))
        .collect();
    Ok(Tensor::from_vec(data, (lengths.len(), t), device)?)
}

/// Stop targets: 0 before the last valid frame, 1 from it onwards.
pub fn stop_targets(lengths: &[usize], t: usize, device: &Device) -> Result<Tensor> {
    let data: Vec<f32> = lengths
        .iter()
        .flat_map(|&n| (0..t).map(move |i| if i + 1 >= n { 1.0 } else { 0.0 }))
        .collect();
    Ok(Tensor::from_vec(data, (lengths.len(), t), device)?)
}

/// Mean squared error of both mel predictions plus stop-flag binary
/// cross-entropy, all unmasked.
pub fn taco_loss(
    mel_before: &Tensor,
    mel_after: &Tensor,
    stop_logits: &Tensor,
    target_mel: &Tensor,
    target_stops: &Tensor,
) -> Result<Tensor> {
    check_loss_shapes(mel_before, mel_after, stop_logits, target_mel, target_stops)?;
    let before = (mel_before - target_mel)?.sqr()?.mean_all()?;
    let after = (mel_after - target_mel)?.sqr()?.mean_all()?;
    let stop = bce_with_logits(stop_logits, target_stops)?;
    Ok(((before + after)? + stop)?)
}

/// [`taco_loss`] with mel terms averaged over valid frames only. Stop
/// targets past the end stay 1 and are kept in the stop term.
pub fn masked_taco_loss(
    mel_before: &Tensor,
    mel_after: &Tensor,
    stop_logits: &Tensor,
    target_mel: &Tensor,
    lengths: &[usize],
) -> Result<Tensor> {
    let (b, t, m) = target_mel.dims3()?;
    let device = target_mel.device();
    let targets = stop_targets(lengths, t, device)?;
    check_loss_shapes(mel_before, mel_after, stop_logits, target_mel, &targets)?;
    if lengths.len() != b {
        return Err(Error::LossShapeMismatch(format!(
            "{} lengths for batch of {b}",
            lengths.len()
        )));
    }
    let mask = frame_mask(lengths, t, device)?.unsqueeze(2)?;
    let count = (lengths.iter().sum::<usize>() * m) as f64;
    let masked_mse = |pred: &Tensor| -> Result<Tensor> {
        Ok(((pred - target_mel)?
            .broadcast_mul(&mask)?
            .sqr()?
            .sum_all()?
            / count)?)
    };
    let stop = bce_with_logits(stop_logits, &targets)?;
    Ok(((masked_mse(mel_before)? + masked_mse(mel_after)?)? + stop)?)
}

fn check_loss_shapes(
    mel_before: &Tensor,
    mel_after: &Tensor,
    stop_logits: &Tensor,
    target_mel: &Tensor,
    target_stops: &Tensor,
) -> Result<()> {
    let t = target_mel.dims();
    if mel_before.dims() != t
        || mel_after.dims() != t
        || stop_logits.dims() != target_stops.dims()
        || t.len() < 2
        || stop_logits.dims() != &t[..t.len() - 1]
    {
        return Err(Error::LossShapeMismatch(format!(
            "before {:?}, after {:?}, stop {:?}, target {:?}, stop target {:?}",
            mel_before.dims(),
            mel_after.dims(),
            stop_logits.dims(),
            t,
            target_stops.dims()
        )));
    }
    Ok(())
}
