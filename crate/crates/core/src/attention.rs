//! Channel attention, PSF-aware attention and the residual blocks built on them.
//!
//! Every residual block names its last convolution `tail`; zeroing those parameters
//! turns the block into the identity map.

use candle_core::Tensor;

use crate::error::{shape_err, Result};
use crate::nn::{Conv2d, Init, Linear, PRelu, Scope};
use crate::ops::{global_avg_pool, resize_bilinear, sigmoid};
use crate::psf::{MultiChannelPsf, PsfChannelReducer};

/// Width of the compact PSF embedding.
pub const PSF_EMBED_DIM: usize = 64;
/// Hidden width of the map from PSF embedding to modulation parameters.
pub const MODULATION_HIDDEN: usize = 128;
/// Kernel size of the spatial attention convolution.
pub const SPATIAL_ATTN_KERNEL: usize = 7;
/// Channel reduction used by the CABs of the restoration trunk.
pub const CAB_REDUCTION: usize = 4;

/// Squeeze-and-excitation gate: pool → C/r → ReLU → C → sigmoid.
#[derive(Debug, Clone)]
pub struct ChannelGate {
    down: Conv2d,
    up: Conv2d,
}

impl ChannelGate {
    pub fn new(scope: &Scope, channels: usize, reduction: usize) -> Result<Self> {
        let hidden = (channels / reduction.max(1)).max(1);
        Ok(Self {
            down: Conv2d::new(&scope.pp("down"), channels, hidden, 1, true)?,
            up: Conv2d::new(&scope.pp("up"), hidden, channels, 1, true)?,
        })
    }

    /// [B, C, H, W] → [B, C, 1, 1] gate values in (0, 1).
    pub fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let y = self.down.forward(&global_avg_pool(x)?)?.relu()?;
        sigmoid(&self.up.forward(&y)?)
    }
}

/// Residual block `x + gate(body(x)) ⊙ body(x)` with `body = conv → PReLU → conv`.
#[derive(Debug, Clone)]
pub struct ChannelAttentionBlock {
    head: Conv2d,
    act: PRelu,
    tail: Conv2d,
    gate: ChannelGate,
}

impl ChannelAttentionBlock {
    pub fn new(scope: &Scope, channels: usize, kernel: usize, reduction: usize) -> Result<Self> {
        Ok(Self {
            head: Conv2d::new(&scope.pp("head"), channels, channels, kernel, true)?,
            act: PRelu::new(&scope.pp("act"))?,
            tail: Conv2d::new(&scope.pp("tail"), channels, channels, kernel, true)?,
            gate: ChannelGate::new(&scope.pp("ca"), channels, reduction)?,
        })
    }

    pub fn body(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        self.tail.forward(&self.act.forward(&self.head.forward(x)?)?)
    }

    pub fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let res = self.body(x)?;
        let g = self.gate.forward(&res)?;
        x + res.broadcast_mul(&g)?
    }
}

/// Free-function form of [`ChannelAttentionBlock::forward`].
pub fn channel_attention_block(x: &Tensor, block: &ChannelAttentionBlock) -> Result<Tensor> {
    Ok(block.forward(x)?)
}

/// Per-channel scale and shift, each [B, C].
#[derive(Debug, Clone)]
pub struct ModulationParams {
    pub gamma: Tensor,
    pub beta: Tensor,
}

/// Spatial weights in [0, 1], shaped [B, 1, H, W].
#[derive(Debug, Clone)]
pub struct AttentionMap(pub Tensor);

/// Compact [B, D] embedding of a single-channel PSF.
#[derive(Debug, Clone)]
pub struct PsfFeatureVector(pub Tensor);

/// Two 3×3 convolutions over the K×K kernel grid followed by global pooling.
#[derive(Debug, Clone)]
pub struct PsfEncoder {
    conv1: Conv2d,
    act1: PRelu,
    conv2: Conv2d,
    act2: PRelu,
}

impl PsfEncoder {
    pub fn new(scope: &Scope, in_channels: usize) -> Result<Self> {
        Ok(Self {
            conv1: Conv2d::new(&scope.pp("conv1"), in_channels, PSF_EMBED_DIM / 2, 3, true)?,
            act1: PRelu::new(&scope.pp("act1"))?,
            conv2: Conv2d::new(&scope.pp("conv2"), PSF_EMBED_DIM / 2, PSF_EMBED_DIM, 3, true)?,
            act2: PRelu::new(&scope.pp("act2"))?,
        })
    }

    pub fn forward(&self, psf: &MultiChannelPsf) -> Result<PsfFeatureVector> {
        let x = self.act1.forward(&self.conv1.forward(psf.tensor())?)?;
        let x = self.act2.forward(&self.conv2.forward(&x)?)?;
        Ok(PsfFeatureVector(global_avg_pool(&x)?.flatten_from(1)?))
    }
}

/// Free-function form of [`PsfEncoder::forward`].
pub fn encode_psf(psf: &MultiChannelPsf, encoder: &PsfEncoder) -> Result<PsfFeatureVector> {
    encoder.forward(psf)
}

/// `x ⊙ γ + β` with γ, β broadcast over the spatial axes.
pub fn modulate(x: &Tensor, m: &ModulationParams) -> Result<Tensor> {
    let (b, c, _, _) = x.dims4()?;
    let g = m.gamma.reshape((b, c, 1, 1))?;
    let be = m.beta.reshape((b, c, 1, 1))?;
    Ok(x.broadcast_mul(&g)?.broadcast_add(&be)?)
}

/// Modulate `x` and scale the result by a spatial attention map.
pub fn modulate_and_attend(x: &Tensor, m: &ModulationParams, attn: &AttentionMap) -> Result<Tensor> {
    Ok(modulate(x, m)?.broadcast_mul(&attn.0)?)
}

/// PSF-conditioned channel modulation followed by spatial attention.
#[derive(Debug, Clone)]
pub struct PsfAwareAttention {
    reducer: Option<PsfChannelReducer>,
    encoder: PsfEncoder,
    fc_hidden: Linear,
    fc_act: PRelu,
    fc_out: Linear,
    spatial: Conv2d,
    channels: usize,
}

impl PsfAwareAttention {
    /// `psf_channels > 1` inserts a channel reducer down to one channel.
    pub fn new(scope: &Scope, channels: usize, psf_channels: usize) -> Result<Self> {
        let reducer = if psf_channels > 1 {
            Some(PsfChannelReducer::new(&scope.pp("reducer"), psf_channels, 1)?)
        } else {
            None
        };
        let encoder = PsfEncoder::new(&scope.pp("encoder"), 1)?;
        let fc_hidden = Linear::new(&scope.pp("fc_hidden"), PSF_EMBED_DIM, MODULATION_HIDDEN)?;
        let fc_act = PRelu::new(&scope.pp("fc_act"))?;
        // Zero weights with bias (1, 0) start from the identity modulation.
        let mut bias = vec![1.0; channels];
        bias.extend(std::iter::repeat_n(0.0, channels));
        let fc_out = Linear::with_init(
            &scope.pp("fc_out"),
            MODULATION_HIDDEN,
            2 * channels,
            Init::Const(0.0),
            Init::Values(bias),
        )?;
        let spatial = Conv2d::new(&scope.pp("spatial"), channels + 1, 1, SPATIAL_ATTN_KERNEL, true)?;
        Ok(Self {
            reducer,
            encoder,
            fc_hidden,
            fc_act,
            fc_out,
            spatial,
            channels,
        })
    }

    /// The single-channel PSF both branches consume.
    pub fn reduce(&self, psf: &MultiChannelPsf) -> Result<MultiChannelPsf> {
        match &self.reducer {
            Some(r) => r.forward(psf),
            None if psf.channels() == 1 => Ok(psf.clone()),
            None => Err(shape_err!(
                "attention built for a 1-channel PSF, got {} channels",
                psf.channels()
            )),
        }
    }

    pub fn modulation(&self, reduced: &MultiChannelPsf) -> Result<ModulationParams> {
        let feat = self.encoder.forward(reduced)?;
        let h = self.fc_act.forward(&self.fc_hidden.forward(&feat.0)?)?;
        let gb = self.fc_out.forward(&h)?;
        Ok(ModulationParams {
            gamma: gb.narrow(1, 0, self.channels)?,
            beta: gb.narrow(1, self.channels, self.channels)?,
        })
    }

    pub fn attention_map(&self, x_mod: &Tensor, reduced: &MultiChannelPsf) -> Result<AttentionMap> {
        let (_, _, h, w) = x_mod.dims4()?;
        let up = resize_bilinear(&reduced.tensor().to_dtype(x_mod.dtype())?, h, w)?;
        let z = Tensor::cat(&[x_mod, &up], 1)?;
        Ok(AttentionMap(sigmoid(&self.spatial.forward(&z)?)?))
    }

    pub fn forward(&self, x: &Tensor, psf: &MultiChannelPsf) -> Result<Tensor> {
        let (b, c, _, _) = x.dims4()?;
        if psf.batch() != b {
            return Err(shape_err!("PSF batch {} for feature batch {b}", psf.batch()));
        }
        if c != self.channels {
            return Err(shape_err!("attention built for {} channels, got {c}", self.channels));
        }
        let reduced = self.reduce(psf)?;
        let m = self.modulation(&reduced)?;
        let x_mod = modulate(x, &m)?;
        let attn = self.attention_map(&x_mod, &reduced)?;
        Ok(x_mod.broadcast_mul(&attn.0)?)
    }
}

/// Free-function form of [`PsfAwareAttention::forward`].
pub fn psf_aware_attention(x: &Tensor, psf: &MultiChannelPsf, attn: &PsfAwareAttention) -> Result<Tensor> {
    attn.forward(x, psf)
}

/// `x + PSFA(body(x), psf)` with `body = conv → PReLU → conv`.
#[derive(Debug, Clone)]
pub struct PsfBlock {
    head: Conv2d,
    act: PRelu,
    tail: Conv2d,
    attn: PsfAwareAttention,
}

impl PsfBlock {
    pub fn new(scope: &Scope, channels: usize, psf_channels: usize) -> Result<Self> {
        Ok(Self {
            head: Conv2d::new(&scope.pp("head"), channels, channels, 3, true)?,
            act: PRelu::new(&scope.pp("act"))?,
            tail: Conv2d::new(&scope.pp("tail"), channels, channels, 3, true)?,
            attn: PsfAwareAttention::new(&scope.pp("psfa"), channels, psf_channels)?,
        })
    }

    pub fn forward(&self, x: &Tensor, psf: &MultiChannelPsf) -> Result<Tensor> {
        let body = self.tail.forward(&self.act.forward(&self.head.forward(x)?)?)?;
        Ok((x + self.attn.forward(&body, psf)?)?)
    }
}

/// Free-function form of [`PsfBlock::forward`].
pub fn psf_block(x: &Tensor, psf: &MultiChannelPsf, block: &PsfBlock) -> Result<Tensor> {
    block.forward(x, psf)
}

/// Stage-exit module: emits the restored image and reweights features for the next
/// stage.
#[derive(Debug, Clone)]
pub struct SupervisedAttention {
    feat: Conv2d,
    tail: Conv2d,
    mask: Conv2d,
}

impl SupervisedAttention {
    pub fn new(scope: &Scope, channels: usize) -> Result<Self> {
        Ok(Self {
            feat: Conv2d::new(&scope.pp("feat"), channels, channels, 3, true)?,
            tail: Conv2d::new(&scope.pp("tail"), channels, 3, 3, true)?,
            mask: Conv2d::new(&scope.pp("mask"), 3, channels, 3, true)?,
        })
    }

    /// Returns `(restored, attended)`.
    pub fn forward(&self, features: &Tensor, img_in: &Tensor) -> Result<(Tensor, Tensor)> {
        let (_, _, h, w) = features.dims4()?;
        let (_, _, hi, wi) = img_in.dims4()?;
        if (h, w) != (hi, wi) {
            return Err(shape_err!("SAM features {h}×{w} vs image {hi}×{wi}"));
        }
        let restored = (self.tail.forward(features)? + img_in)?;
        let mask = sigmoid(&self.mask.forward(&restored)?)?;
        let attended = (self.feat.forward(features)?.mul(&mask)? + features)?;
        Ok((restored, attended))
    }
}

/// Free-function form of [`SupervisedAttention::forward`].
pub fn supervised_attention(features: &Tensor, img_in: &Tensor, sam: &SupervisedAttention) -> Result<(Tensor, Tensor)> {
    sam.forward(features, img_in)
}

/// Full-resolution refinement block: side information is added at the input, then a
/// CAB chain and a convolution run with a residual connection around them.
#[derive(Debug, Clone)]
pub struct OriginalResolutionBlock {
    cabs: Vec<ChannelAttentionBlock>,
    tail: Conv2d,
}

impl OriginalResolutionBlock {
    pub fn new(scope: &Scope, channels: usize, num_cab: usize) -> Result<Self> {
        let cabs = (0..num_cab)
            .map(|i| ChannelAttentionBlock::new(&scope.pp(format!("cab{i}")), channels, 3, CAB_REDUCTION))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            cabs,
            tail: Conv2d::new(&scope.pp("tail"), channels, channels, 3, true)?,
        })
    }

    pub fn forward(&self, features: &Tensor, side_info: Option<&Tensor>) -> Result<Tensor> {
        let x = match side_info {
            Some(s) => {
                if s.dims() != features.dims() {
                    return Err(shape_err!(
                        "ORB side info {:?} vs features {:?}",
                        s.dims(),
                        features.dims()
                    ));
                }
                (features + s)?
            }
            None => features.clone(),
        };
        let mut y = x.clone();
        for cab in &self.cabs {
            y = cab.forward(&y)?;
        }
        Ok((self.tail.forward(&y)? + x)?)
    }
}

/// Free-function form of [`OriginalResolutionBlock::forward`].
pub fn original_resolution_block(features: &Tensor, side_info: &Tensor, orb: &OriginalResolutionBlock) -> Result<Tensor> {
    orb.forward(features, Some(side_info))
}
