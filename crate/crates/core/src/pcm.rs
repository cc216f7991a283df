//! Prosody compensation: global-context blocks and the AIF encoder built
//! from the reference-encoder stack.

use candle_core::{Device, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frontend::{FeatureSequence, AIF_DIM};
use crate::nn::{Init, LayerNorm, Linear, Mode, Scope};
use crate::sdm::{ConvGruEncoder, Embedding256, EmbeddingRole, ReferenceEncoderParams};

pub const GC_BOTTLENECK_RATIO: usize = 16;

/// Conv layers (0-based) followed by a GC block: after layers 2, 4 and 6.
pub const GC_POSITIONS: [usize; 3] = [1, 3, 5];

pub fn bottleneck_width(channels: usize, ratio: usize) -> usize {
    (channels / ratio).max(4)
}

/// Softmax attention pooling of a `[B, C, P]` map.
///
/// `attention_weight` is `[C]`; the logit at each position is its dot
/// product with that position's channel vector. Returns the `[B, C]`
/// context and the `[B, P]` weights.
pub fn global_attention_pool(x: &Tensor, attention_weight: &Tensor) -> Result<(Tensor, Tensor)> {
    let (b, c, _) = x.dims3()?;
    let w = attention_weight
        .reshape((1, 1, c))?
        .broadcast_as((b, 1, c))?;
    let logits = w.contiguous()?.matmul(&x.contiguous()?)?; // [B, 1, P]
    let weights = candle_nn::ops::softmax(&logits, D::Minus1)?;
    let context = x
        .contiguous()?
        .matmul(&weights.transpose(1, 2)?.contiguous()?)?
        .squeeze(2)?;
    Ok((context, weights.squeeze(1)?))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GcBlockParams {
    pub channels: usize,
    pub bottleneck_ratio: usize,
}

/// Global context block: attention pooling, a bottleneck transform
/// (C -> C/r -> C with layer norm and ReLU), and a broadcast residual add.
#[derive(Clone, Debug)]
pub struct GcBlock {
    attention: Tensor,
    down: Linear,
    norm: LayerNorm,
    up: Linear,
    channels: usize,
}

impl GcBlock {
    /// The final projection starts at zero, so a fresh block is the identity.
    pub fn new(s: &mut Scope<'_>, channels: usize, ratio: usize) -> Result<Self> {
        let hidden = bottleneck_width(channels, ratio);
        let bound = 1.0 / (channels as f64).sqrt();
        let attention = s.param("attention", &[channels], Init::Uniform(bound))?;
        let down = Linear::new(&mut s.pp("down"), channels, hidden, true)?;
        let norm = LayerNorm::new(&mut s.pp("norm"), hidden)?;
        let mut up_scope = s.pp("up");
        up_scope.param("weight", &[hidden, channels], Init::Zeros)?;
        up_scope.param("bias", &[channels], Init::Zeros)?;
        let up = Linear::new(&mut up_scope, hidden, channels, true)?;
        Ok(Self {
            attention,
            down,
            norm,
            up,
            channels,
        })
    }

    pub fn params(&self) -> GcBlockParams {
        GcBlockParams {
            channels: self.channels,
            bottleneck_ratio: GC_BOTTLENECK_RATIO,
        }
    }

    pub fn attention_weight(&self) -> &Tensor {
        &self.attention
    }

    pub fn down(&self) -> &Linear {
        &self.down
    }

    pub fn up(&self) -> &Linear {
        &self.up
    }

    /// The `[B, C]` vector added at every position.
    pub fn context_update(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c) = (x.dim(0)?, x.dim(1)?);
        if c != self.channels {
            return Err(Error::GcChannelMismatch {
                expected: self.channels,
                got: c,
            });
        }
        let flat = x.reshape((b, c, ()))?;
        let (context, _) = global_attention_pool(&flat, &self.attention)?;
        let hidden = self.norm.forward(&self.down.forward(&context)?)?.relu()?;
        self.up.forward(&hidden)
    }

    /// `[B, C, ...]` -> same shape.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let update = self.context_update(x)?;
        let mut shape = vec![1usize; x.rank()];
        shape[0] = x.dim(0)?;
        shape[1] = self.channels;
        Ok(x.broadcast_add(&update.reshape(shape)?)?)
    }
}

/// Reference-encoder stack over AIF maps with GC blocks at [`GC_POSITIONS`].
#[derive(Clone, Debug)]
pub struct PcEncoder {
    inner: ConvGruEncoder,
}

impl PcEncoder {
    pub fn new(s: &mut Scope<'_>, params: &ReferenceEncoderParams) -> Result<Self> {
        Ok(Self {
            inner: ConvGruEncoder::new(s, params, AIF_DIM, &GC_POSITIONS)?,
        })
    }

    pub fn gc_blocks(&self) -> impl Iterator<Item = &GcBlock> {
        self.inner.gc_blocks()
    }

    /// `[B, T_a, 256]` padded AIF -> `[B, 256]`. With `use_gc` false the GC
    /// blocks are skipped entirely.
    pub fn forward(
        &self,
        aif: &Tensor,
        lengths: &[usize],
        mode: Mode,
        use_gc: bool,
    ) -> Result<Tensor> {
        self.inner.forward(aif, lengths, mode, use_gc)
    }
}

/// Prosody compensation embedding of one AIF sequence, inference mode.
pub fn prosody_compensation_encode(
    aif: &FeatureSequence,
    encoder: &PcEncoder,
    use_gc: bool,
) -> Result<Embedding256> {
    let x = Tensor::from_vec(
        aif.data().to_vec(),
        (1, aif.n_frames(), AIF_DIM),
        &Device::Cpu,
    )?;
    let e = encoder.forward(&x, &[aif.n_frames()], Mode::Eval, use_gc)?;
    Embedding256::from_row(&e, EmbeddingRole::ProsodyCompensation)
}
