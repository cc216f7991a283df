//! Speaker disentangling: twin reference encoders, classifier heads, the
//! gradient-reversal branch and the paired orthogonality penalty.

use candle_core::{CpuStorage, CustomOp1, Layout, Shape, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frontend::MelSpectrogram;
use crate::nn::{cross_entropy, BatchNorm, Conv2d, GruCell, Linear, Mode, Scope};
use crate::pcm::{GcBlock, GC_BOTTLENECK_RATIO};

/// Width of emotion, speaker and prosody-compensation embeddings.
pub const EMBED_DIM: usize = 256;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReferenceEncoderParams {
    pub conv_channels: [usize; 6],
    pub gru_units: usize,
}

impl Default for ReferenceEncoderParams {
    fn default() -> Self {
        Self {
            conv_channels: [32, 32, 64, 64, 128, 128],
            gru_units: 128,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EmbeddingRole {
    Emotion,
    Speaker,
    ProsodyCompensation,
}

/// A single utterance-level embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding256 {
    pub values: Vec<f32>,
    pub role: EmbeddingRole,
}

impl Embedding256 {
    pub fn new(values: Vec<f32>, role: EmbeddingRole) -> Result<Self> {
        if values.len() != EMBED_DIM {
            return Err(Error::ConditioningDimMismatch(format!(
                "embedding has {} values, expected {EMBED_DIM}",
                values.len()
            )));
        }
        Ok(Self { values, role })
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        Ok(Tensor::from_vec(
            self.values.clone(),
            (1, EMBED_DIM),
            &candle_core::Device::Cpu,
        )?)
    }

    pub(crate) fn from_row(t: &Tensor, role: EmbeddingRole) -> Result<Self> {
        Self::new(t.flatten_all()?.to_vec1::<f32>()?, role)
    }
}

/// Identity forward; the incoming gradient is multiplied by `-lambda`.
struct GradReverse {
    lambda: f64,
}

impl CustomOp1 for GradReverse {
    fn name(&self) -> &'static str {
        "grad-reverse"
    }

    fn cpu_fwd(
        &self,
        storage: &CpuStorage,
        layout: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let (start, end) = layout.contiguous_offsets().ok_or_else(|| {
            candle_core::Error::Msg("grad-reverse expects contiguous input".into())
        })?;
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(v[start..end].to_vec()),
            CpuStorage::F64(v) => CpuStorage::F64(v[start..end].to_vec()),
            _ => {
                return Err(candle_core::Error::Msg(
                    "grad-reverse supports f32 and f64 only".into(),
                ))
            }
        };
        Ok((out, layout.shape().clone()))
    }

    fn bwd(
        &self,
        _arg: &Tensor,
        _res: &Tensor,
        grad_res: &Tensor,
    ) -> candle_core::Result<Option<Tensor>> {
        Ok(Some((grad_res * (-self.lambda))?))
    }
}

/// Gradient reversal: returns `x` unchanged, but back-propagates `-lambda * g`.
pub fn grad_reverse(x: &Tensor, lambda: f64) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(GradReverse { lambda })?)
}

/// `sum_i (s_i . e_i)^2` over paired rows of two `[n, d]` batches.
pub fn orthogonality_loss(speaker: &Tensor, emotion: &Tensor) -> Result<Tensor> {
    let (ns, ne) = (speaker.dim(0)?, emotion.dim(0)?);
    if ns != ne || speaker.dims() != emotion.dims() {
        return Err(Error::UnpairedBatch {
            speakers: ns,
            emotions: ne,
        });
    }
    Ok((speaker * emotion)?.sum(1)?.sqr()?.sum_all()?)
}

/// Six strided conv layers (batch-norm, ReLU) and a GRU whose last state is
/// projected to 256 dims. Optional global-context blocks follow selected
/// conv layers; the prosody compensation encoder is this stack with three.
#[derive(Clone, Debug)]
pub struct ConvGruEncoder {
    convs: Vec<(Conv2d, BatchNorm)>,
    gc: Vec<Option<GcBlock>>,
    gru: GruCell,
    fc: Linear,
}

impl ConvGruEncoder {
    pub fn new(
        s: &mut Scope<'_>,
        params: &ReferenceEncoderParams,
        n_freq: usize,
        gc_positions: &[usize],
    ) -> Result<Self> {
        let mut convs = Vec::with_capacity(6);
        let mut gc = Vec::with_capacity(6);
        let mut c_in = 1;
        let mut freq = n_freq;
        for (i, &c_out) in params.conv_channels.iter().enumerate() {
            let conv = Conv2d::new(&mut s.pp(&format!("conv{i}")), c_in, c_out, 3, 2, 1)?;
            freq = conv.out_size(freq);
            let bn = BatchNorm::new(&mut s.pp(&format!("bn{i}")), c_out)?;
            convs.push((conv, bn));
            gc.push(if gc_positions.contains(&i) {
                Some(GcBlock::new(
                    &mut s.pp(&format!("gc{i}")),
                    c_out,
                    GC_BOTTLENECK_RATIO,
                )?)
            } else {
                None
            });
            c_in = c_out;
        }
        let gru = GruCell::new(&mut s.pp("gru"), c_in * freq, params.gru_units)?;
        let fc = Linear::new(&mut s.pp("fc"), params.gru_units, EMBED_DIM, true)?;
        Ok(Self { convs, gc, gru, fc })
    }

    pub fn gc_blocks(&self) -> impl Iterator<Item = &GcBlock> {
        self.gc.iter().flatten()
    }

    /// `[B, T, F]` padded input with per-row valid lengths -> `[B, 256]`.
    pub fn forward(
        &self,
        x: &Tensor,
        lengths: &[usize],
        mode: Mode,
        use_gc: bool,
    ) -> Result<Tensor> {
        let (b, t, _) = x.dims3()?;
        if t == 0 || lengths.contains(&0) {
            return Err(Error::EmptyReference);
        }
        let mut h = x.unsqueeze(1)?;
        let mut lens = lengths.to_vec();
        for ((conv, bn), gc) in self.convs.iter().zip(&self.gc) {
            h = bn.forward(&conv.forward(&h)?, mode)?.relu()?;
            if let (true, Some(block)) = (use_gc, gc) {
                h = block.forward(&h)?;
            }
            lens.iter_mut().for_each(|l| *l = conv.out_size(*l));
        }
        // [B, C, T', F'] -> [B, T', C * F']
        let (_, c, tq, fq) = h.dims4()?;
        let seq = h.permute((0, 2, 1, 3))?.reshape((b, tq, c * fq))?;
        let (_, last) = self.gru.run(&seq, Some(&lens), false)?;
        self.fc.forward(&last)
    }
}

/// Reference encoder over a single mel in inference mode.
pub fn reference_encode(
    encoder: &ConvGruEncoder,
    mel: &MelSpectrogram,
    role: EmbeddingRole,
) -> Result<Embedding256> {
    let x = Tensor::from_vec(
        mel.data().to_vec(),
        (1, mel.n_frames(), mel.n_mels()),
        &candle_core::Device::Cpu,
    )?;
    let e = encoder.forward(&x, &[mel.n_frames()], Mode::Eval, true)?;
    Embedding256::from_row(&e, role)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum HeadTarget {
    Emotion,
    Speaker,
}

/// Linear classifier over a 256-dim embedding.
#[derive(Clone, Debug)]
pub struct ClassifierHead {
    linear: Linear,
    n_classes: usize,
    pub target: HeadTarget,
    /// Input passes through gradient reversal first.
    pub reversed: bool,
}

impl ClassifierHead {
    pub fn new(
        s: &mut Scope<'_>,
        n_classes: usize,
        target: HeadTarget,
        reversed: bool,
    ) -> Result<Self> {
        if n_classes < 2 {
            return Err(Error::InvalidConfig(format!(
                "classifier needs at least 2 classes, got {n_classes}"
            )));
        }
        Ok(Self {
            linear: Linear::new(s, EMBED_DIM, n_classes, true)?,
            n_classes,
            target,
            reversed,
        })
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    /// `[B, 256] -> [B, n_classes]`. Reversed heads apply gradient reversal
    /// with `lambda` to the input.
    pub fn logits(&self, emb: &Tensor, lambda: f64) -> Result<Tensor> {
        if self.reversed {
            self.linear.forward(&grad_reverse(emb, lambda)?)
        } else {
            self.linear.forward(emb)
        }
    }

    pub fn loss(&self, emb: &Tensor, labels: &[usize], lambda: f64) -> Result<Tensor> {
        cross_entropy(&self.logits(emb, lambda)?, labels)
    }
}

/// Logits `W e + b` for a single embedding.
pub fn classify(embedding: &Embedding256, head: &ClassifierHead) -> Result<Vec<f32>> {
    let logits = head.linear.forward(&embedding.to_tensor()?)?;
    Ok(logits.flatten_all()?.to_vec1::<f32>()?)
}

/// Cross-entropy of a single embedding against `label`.
pub fn classification_loss(
    embedding: &Embedding256,
    head: &ClassifierHead,
    label: usize,
) -> Result<f32> {
    let loss = head.loss(&embedding.to_tensor()?, &[label], 1.0)?;
    Ok(loss.to_scalar::<f32>()?)
}

/// Emotion and speaker encoders with their three heads.
#[derive(Clone, Debug)]
pub struct Sdm {
    pub emotion_encoder: ConvGruEncoder,
    pub speaker_encoder: ConvGruEncoder,
    pub emotion_head: ClassifierHead,
    pub speaker_head: ClassifierHead,
    pub adversarial_emotion_head: ClassifierHead,
}

/// Batched SDM result. Losses are scalar tensors still attached to the graph.
pub struct SdmOutput {
    pub emotion: Tensor,
    pub speaker: Tensor,
    pub emo: Tensor,
    pub spk: Tensor,
    pub adv_emo: Tensor,
    pub ort: Tensor,
}

impl Sdm {
    pub fn new(
        s: &mut Scope<'_>,
        params: &ReferenceEncoderParams,
        n_mels: usize,
        n_emotions: usize,
        n_speakers: usize,
    ) -> Result<Self> {
        Ok(Self {
            emotion_encoder: ConvGruEncoder::new(
                &mut s.pp("emotion_encoder"),
                params,
                n_mels,
                &[],
            )?,
            speaker_encoder: ConvGruEncoder::new(
                &mut s.pp("speaker_encoder"),
                params,
                n_mels,
                &[],
            )?,
            emotion_head: ClassifierHead::new(
                &mut s.pp("emotion_head"),
                n_emotions,
                HeadTarget::Emotion,
                false,
            )?,
            speaker_head: ClassifierHead::new(
                &mut s.pp("speaker_head"),
                n_speakers,
                HeadTarget::Speaker,
                false,
            )?,
            adversarial_emotion_head: ClassifierHead::new(
                &mut s.pp("adv_emotion_head"),
                n_emotions,
                HeadTarget::Emotion,
                true,
            )?,
        })
    }

    /// Embeddings only, no losses.
    pub fn embed(&self, mels: &Tensor, lengths: &[usize], mode: Mode) -> Result<(Tensor, Tensor)> {
        let e = self.emotion_encoder.forward(mels, lengths, mode, true)?;
        let s = self.speaker_encoder.forward(mels, lengths, mode, true)?;
        Ok((e, s))
    }

    pub fn forward(
        &self,
        mels: &Tensor,
        lengths: &[usize],
        emotion_labels: &[usize],
        speaker_labels: &[usize],
        grl_lambda: f64,
        mode: Mode,
    ) -> Result<SdmOutput> {
        let (e, s) = self.embed(mels, lengths, mode)?;
        Ok(SdmOutput {
            emo: self.emotion_head.loss(&e, emotion_labels, grl_lambda)?,
            spk: self.speaker_head.loss(&s, speaker_labels, grl_lambda)?,
            adv_emo: self
                .adversarial_emotion_head
                .loss(&s, emotion_labels, grl_lambda)?,
            ort: orthogonality_loss(&s, &e)?,
            emotion: e,
            speaker: s,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frontend::FrontendConfig;
    use crate::nn::ParamStore;
    use candle_core::{DType, Device, Var};

    fn rand_matrix(n: usize, d: usize, seed: u64) -> Vec<f32> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..n * d).map(|_| rng.random_range(-1.0f32..1.0)).collect()
    }

    fn basis(i: usize) -> Vec<f32> {
        let mut v = vec![0.0; EMBED_DIM];
        v[i] = 1.0;
        v
    }

    #[test]
    fn orthogonal_pair_has_zero_loss() {
        let s = Tensor::from_vec(basis(0), (1, EMBED_DIM), &Device::Cpu).unwrap();
        let e = Tensor::from_vec(basis(1), (1, EMBED_DIM), &Device::Cpu).unwrap();
        let l = orthogonality_loss(&s, &e)
            .unwrap()
            .to_scalar::<f32>()
            .unwrap();
        assert_eq!(l, 0.0);
        let l = orthogonality_loss(&s, &s)
            .unwrap()
            .to_scalar::<f32>()
            .unwrap();
        assert_eq!(l, 1.0);
    }

    #[test]
    fn orthogonality_matches_double_loop() {
        let (s, e) = (rand_matrix(3, EMBED_DIM, 1), rand_matrix(3, EMBED_DIM, 2));
        let mut expect = 0.0f64;
        for i in 0..3 {
            let mut dot = 0.0f64;
            for k in 0..EMBED_DIM {
                dot += s[i * EMBED_DIM + k] as f64 * e[i * EMBED_DIM + k] as f64;
            }
            expect += dot * dot;
        }
        let st = Tensor::from_vec(s, (3, EMBED_DIM), &Device::Cpu).unwrap();
        let et = Tensor::from_vec(e, (3, EMBED_DIM), &Device::Cpu).unwrap();
        let got = orthogonality_loss(&st, &et)
            .unwrap()
            .to_scalar::<f32>()
            .unwrap() as f64;
        assert!((got - expect).abs() / expect < 1e-5);
    }

    #[test]
    fn unpaired_batches_are_rejected() {
        let s = Tensor::zeros((3, EMBED_DIM), DType::F32, &Device::Cpu).unwrap();
        let e = Tensor::zeros((2, EMBED_DIM), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(
            orthogonality_loss(&s, &e),
            Err(Error::UnpairedBatch {
                speakers: 3,
                emotions: 2
            })
        ));
    }

    #[test]
    fn grad_reverse_is_identity_forward_and_negates_backward() {
        let x = Var::new(&[3.5f32, -2.0], &Device::Cpu).unwrap();
        let y = grad_reverse(x.as_tensor(), 1.0).unwrap();
        assert_eq!(y.to_vec1::<f32>().unwrap(), vec![3.5, -2.0]);
        let g = Tensor::new(&[0.25f32, -4.0], &Device::Cpu).unwrap();
        let loss = (y * &g).unwrap().sum_all().unwrap();
        let grads = loss.backward().unwrap();
        assert_eq!(
            grads.get(x.as_tensor()).unwrap().to_vec1::<f32>().unwrap(),
            vec![-0.25, 4.0]
        );
    }

    #[test]
    fn grad_reverse_of_squares_is_minus_two_x() {
        let xs = [0.7f64, -1.3, 2.2];
        let x = Var::new(&xs, &Device::Cpu).unwrap();
        let f = grad_reverse(x.as_tensor(), 1.0)
            .unwrap()
            .sqr()
            .unwrap()
            .sum_all()
            .unwrap();
        let g = f
            .backward()
            .unwrap()
            .get(x.as_tensor())
            .unwrap()
            .to_vec1::<f64>()
            .unwrap();
        let h = 1e-4;
        for (i, &xi) in xs.iter().enumerate() {
            // finite differences of the identity composite, then reversed
            let fd = ((xi + h).powi(2) - (xi - h).powi(2)) / (2.0 * h);
            assert!((g[i] - (-fd)).abs() <= 1e-5 * fd.abs());
            assert!((g[i] + 2.0 * xi).abs() < 1e-12);
        }
    }

    fn small_store() -> (ParamStore, ReferenceEncoderParams) {
        (ParamStore::new(42), ReferenceEncoderParams::default())
    }

    #[test]
    fn reference_encoding_is_256_for_any_length() {
        let (mut store, params) = small_store();
        let enc = ConvGruEncoder::new(&mut store.root().pp("e"), &params, 80, &[]).unwrap();
        for t in [1usize, 5, 50, 500] {
            let data: Vec<f32> = (0..t * 80).map(|i| (i as f32 * 0.01).sin()).collect();
            let mel = MelSpectrogram::new(data, t, FrontendConfig::default()).unwrap();
            let e = reference_encode(&enc, &mel, EmbeddingRole::Emotion).unwrap();
            assert_eq!(e.values.len(), EMBED_DIM);
            let again = reference_encode(&enc, &mel, EmbeddingRole::Emotion).unwrap();
            assert_eq!(e, again);
        }
    }

    #[test]
    fn zero_parameters_encode_to_zero() {
        let (mut store, params) = small_store();
        let enc = ConvGruEncoder::new(&mut store.root(), &params, 80, &[]).unwrap();
        for var in store.params().values() {
            var.set(&var.zeros_like().unwrap()).unwrap();
        }
        let mel = MelSpectrogram::new(vec![-3.0; 20 * 80], 20, FrontendConfig::default()).unwrap();
        let e = reference_encode(&enc, &mel, EmbeddingRole::Speaker).unwrap();
        assert!(e.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn classify_zero_head_is_uniform() {
        let mut store = ParamStore::new(0);
        let head = ClassifierHead::new(&mut store.root(), 4, HeadTarget::Emotion, false).unwrap();
        for var in store.params().values() {
            var.set(&var.zeros_like().unwrap()).unwrap();
        }
        let emb = Embedding256::new(rand_matrix(1, EMBED_DIM, 9), EmbeddingRole::Emotion).unwrap();
        let logits = classify(&emb, &head).unwrap();
        assert!(logits.iter().all(|&v| v == 0.0));
        let loss = classification_loss(&emb, &head, 2).unwrap();
        assert!((loss - 4f32.ln()).abs() < 1e-6);
        assert!(matches!(
            classification_loss(&emb, &head, 4),
            Err(Error::InvalidClassLabel { .. })
        ));
    }

    #[test]
    fn saturated_head_drives_loss_to_zero() {
        let mut store = ParamStore::new(0);
        let head = ClassifierHead::new(&mut store.root(), 3, HeadTarget::Speaker, false).unwrap();
        let mut w = vec![0.0f32; EMBED_DIM * 3];
        w[5 * 3 + 1] = 100.0; // weight[in=5, out=1]
        store.params()["weight"]
            .set(&Tensor::from_vec(w, (EMBED_DIM, 3), &Device::Cpu).unwrap())
            .unwrap();
        store.params()["bias"]
            .set(&Tensor::zeros(3, DType::F32, &Device::Cpu).unwrap())
            .unwrap();
        let emb = Embedding256::new(basis(5), EmbeddingRole::Speaker).unwrap();
        assert!(classification_loss(&emb, &head, 1).unwrap() < 1e-6);
    }

    #[test]
    fn classify_matches_scalar_softmax() {
        let mut store = ParamStore::new(17);
        let head = ClassifierHead::new(&mut store.root(), 5, HeadTarget::Emotion, false).unwrap();
        let emb = Embedding256::new(rand_matrix(1, EMBED_DIM, 4), EmbeddingRole::Emotion).unwrap();
        let w = store.params()["weight"]
            .as_tensor()
            .to_vec2::<f32>()
            .unwrap();
        let b = store.params()["bias"].as_tensor().to_vec1::<f32>().unwrap();
        let logits: Vec<f64> = (0..5)
            .map(|k| {
                b[k] as f64
                    + (0..EMBED_DIM)
                        .map(|i| w[i][k] as f64 * emb.values[i] as f64)
                        .sum::<f64>()
            })
            .collect();
        let max = logits.iter().cloned().fold(f64::MIN, f64::max);
        let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
        let expect = -((logits[3] - max) - z.ln());
        let got = classification_loss(&emb, &head, 3).unwrap() as f64;
        assert!((got - expect).abs() < 1e-5);
    }
}
