//! Channel-attention sublayers: squeeze-and-excitation for shallow levels, transposed
//! (channel-by-channel) self-attention for the bottleneck, and the gated feed-forward network.

use candle_core::Tensor;

use crate::config::{Side, LEVELS};
use crate::error::{config_bail, Result};
use crate::nn::{global_avg_pool, softmax_last, DepthwiseConv, Init, LayerNorm, Linear};

/// Channel-attention flavour used by a level.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChannelVariant {
    SqueezeExcite,
    Transposed,
}

/// Lightweight squeeze-and-excitation in shallow levels, transposed self-attention at the bottleneck.
pub fn select_channel_variant(level: usize, side: Side) -> Result<ChannelVariant> {
    match (level, side) {
        (1..=3, _) => Ok(ChannelVariant::SqueezeExcite),
        (LEVELS, Side::Encoder) => Ok(ChannelVariant::Transposed),
        (LEVELS, Side::Decoder) => config_bail!("level {LEVELS} has no decoder side"),
        _ => config_bail!("level must be in 1..={LEVELS}, got {level}"),
    }
}

#[derive(Debug, Clone)]
pub struct SqueezeExcite {
    pub norm: LayerNorm,
    pub proj_in: Linear,
    pub dw: DepthwiseConv,
    pub excite: Linear,
    pub proj_out: Linear,
}

impl SqueezeExcite {
    pub fn new(init: &mut Init, channels: usize) -> Result<Self> {
        if channels < 2 || channels % 2 != 0 {
            config_bail!("squeeze-excitation needs an even channel count, got {channels}");
        }
        let half = channels / 2;
        Ok(Self {
            norm: LayerNorm::new(init, "norm", channels)?,
            proj_in: Linear::new(init, "proj_in", channels, channels, false)?,
            dw: DepthwiseConv::new(init, "dw", channels, 3)?,
            excite: Linear::new(init, "excite", half, half, false)?,
            proj_out: Linear::output(init, "proj_out", half, channels)?,
        })
    }

    pub fn channels(&self) -> usize {
        self.proj_in.in_dim()
    }

    /// Gated features scaled by their excitation, before the output projection.
    pub fn attend(&self, z: &Tensor) -> Result<Tensor> {
        let half = self.channels() / 2;
        let v = self.dw.forward(&self.proj_in.forward(&self.norm.forward(z)?)?)?;
        let gated = (v.narrow(3, 0, half)? * v.narrow(3, half, half)?)?;
        let scale = self.excite.forward(&global_avg_pool(&gated)?)?;
        Ok(gated.broadcast_mul(&scale)?)
    }

    pub fn forward(&self, z: &Tensor) -> Result<Tensor> {
        Ok((self.proj_out.forward(&self.attend(z)?)? + z)?)
    }
}

/// Multi-head attention whose attention map is `C/heads x C/heads` per head.
#[derive(Debug, Clone)]
pub struct TransposedAttention {
    pub norm: LayerNorm,
    pub proj_q: Linear,
    pub proj_k: Linear,
    pub proj_v: Linear,
    pub dw_q: DepthwiseConv,
    pub dw_k: DepthwiseConv,
    pub dw_v: DepthwiseConv,
    /// Per-head temperature, shape `[heads]`.
    pub alpha: Tensor,
    pub proj_out: Linear,
    pub heads: usize,
}

impl TransposedAttention {
    pub fn new(init: &mut Init, channels: usize, heads: usize) -> Result<Self> {
        if heads == 0 || channels % heads != 0 {
            config_bail!("heads {heads} must divide channels {channels}");
        }
        Ok(Self {
            norm: LayerNorm::new(init, "norm", channels)?,
            proj_q: Linear::new(init, "proj_q", channels, channels, false)?,
            proj_k: Linear::new(init, "proj_k", channels, channels, false)?,
            proj_v: Linear::new(init, "proj_v", channels, channels, false)?,
            dw_q: DepthwiseConv::new(init, "dw_q", channels, 3)?,
            dw_k: DepthwiseConv::new(init, "dw_k", channels, 3)?,
            dw_v: DepthwiseConv::new(init, "dw_v", channels, 3)?,
            alpha: init.constant("alpha", &[heads], 1.0)?,
            proj_out: Linear::output(init, "proj_out", channels, channels)?,
            heads,
        })
    }

    pub fn channels(&self) -> usize {
        self.proj_q.in_dim()
    }

    /// Splits `[B, H, W, C]` into `[B, heads, HW, C/heads]`.
    fn split_heads(&self, x: &Tensor) -> Result<Tensor> {
        let (b, h, w, c) = x.dims4()?;
        Ok(x.reshape((b, h * w, self.heads, c / self.heads))?
            .transpose(1, 2)?
            .contiguous()?)
    }

    /// Softmax attention maps, shape `[B, heads, d, d]`, rows indexed by query channel.
    pub fn attention_maps(&self, z: &Tensor) -> Result<(Tensor, Tensor)> {
        let x = self.norm.forward(z)?;
        let q = self.split_heads(&self.dw_q.forward(&self.proj_q.forward(&x)?)?)?;
        let k = self.split_heads(&self.dw_k.forward(&self.proj_k.forward(&x)?)?)?;
        let v = self.split_heads(&self.dw_v.forward(&self.proj_v.forward(&x)?)?)?;
        let scores = q.transpose(2, 3)?.contiguous()?.matmul(&k)?;
        let alpha = self.alpha.reshape((1, self.heads, 1, 1))?;
        let attn = softmax_last(&scores.broadcast_div(&alpha)?)?;
        Ok((attn, v))
    }

    /// Attention output before the output projection, `[B, H, W, C]`.
    pub fn attend(&self, z: &Tensor) -> Result<Tensor> {
        let (b, h, w, c) = z.dims4()?;
        let (attn, v) = self.attention_maps(z)?;
        // Each output channel is a convex combination of value channels.
        let out = attn.matmul(&v.transpose(2, 3)?.contiguous()?)?;
        Ok(out
            .permute((0, 3, 1, 2))?
            .contiguous()?
            .reshape((b, h, w, c))?)
    }

    pub fn forward(&self, z: &Tensor) -> Result<Tensor> {
        Ok((self.proj_out.forward(&self.attend(z)?)? + z)?)
    }
}

#[derive(Debug, Clone)]
pub enum ChannelAttention {
    SqueezeExcite(SqueezeExcite),
    Transposed(TransposedAttention),
}

impl ChannelAttention {
    pub fn new(init: &mut Init, variant: ChannelVariant, channels: usize, heads: usize) -> Result<Self> {
        Ok(match variant {
            ChannelVariant::SqueezeExcite => Self::SqueezeExcite(SqueezeExcite::new(init, channels)?),
            ChannelVariant::Transposed => Self::Transposed(TransposedAttention::new(init, channels, heads)?),
        })
    }

    pub fn variant(&self) -> ChannelVariant {
        match self {
            Self::SqueezeExcite(_) => ChannelVariant::SqueezeExcite,
            Self::Transposed(_) => ChannelVariant::Transposed,
        }
    }

    pub fn forward(&self, z: &Tensor) -> Result<Tensor> {
        match self {
            Self::SqueezeExcite(b) => b.forward(z),
            Self::Transposed(b) => b.forward(z),
        }
    }
}

/// Gated depthwise feed-forward network with expansion factor 2.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub norm: LayerNorm,
    pub expand: Linear,
    pub dw: DepthwiseConv,
    pub contract: Linear,
}

impl FeedForward {
    pub const EXPANSION: usize = 2;

    pub fn new(init: &mut Init, channels: usize) -> Result<Self> {
        let hidden = channels * Self::EXPANSION;
        Ok(Self {
            norm: LayerNorm::new(init, "norm", channels)?,
            expand: Linear::new(init, "expand", channels, hidden, false)?,
            dw: DepthwiseConv::new(init, "dw", hidden, 3)?,
            contract: Linear::output(init, "contract", channels, channels)?,
        })
    }

    pub fn channels(&self) -> usize {
        self.expand.in_dim()
    }

    pub fn forward(&self, z: &Tensor) -> Result<Tensor> {
        let c = self.channels();
        let h = self.dw.forward(&self.expand.forward(&self.norm.forward(z)?)?)?;
        let gated = (h.narrow(3, 0, c)? * h.narrow(3, c, c)?)?;
        Ok((self.contract.forward(&gated)? + z)?)
    }
}
