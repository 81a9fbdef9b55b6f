//! Gated cross-stage feature fusion.
//!
//! A gate looks at the pooled concatenation of the current and historical features and
//! produces per-channel weights `G ∈ [0, 1]`; the output is `G ⊙ current + (1 − G) ⊙ prev`.

use candle_core::Tensor;

use crate::attention::ChannelAttentionBlock;
use crate::attention::CAB_REDUCTION;
use crate::error::{shape_err, Result};
use crate::nn::{Conv2d, PRelu, Scope};
use crate::ops::{global_avg_pool, sigmoid};

/// Per-channel gate values, [B, C, 1, 1], each in [0, 1].
#[derive(Debug, Clone)]
pub struct GateWeights(pub Tensor);

/// Per-scale features handed from one stage to the next, finest first.
#[derive(Debug, Clone)]
pub struct CrossStageFeatures {
    pub per_scale: Vec<Tensor>,
}

impl CrossStageFeatures {
    pub fn new(per_scale: Vec<Tensor>) -> Self {
        Self { per_scale }
    }

    pub fn len(&self) -> usize {
        self.per_scale.len()
    }

    pub fn is_empty(&self) -> bool {
        self.per_scale.is_empty()
    }
}

/// Pool the concatenated inputs, then `2C → C/4 → C` with PReLU and sigmoid.
#[derive(Debug, Clone)]
pub struct FusionGate {
    down: Conv2d,
    act: PRelu,
    up: Conv2d,
    channels: usize,
}

impl FusionGate {
    pub fn new(scope: &Scope, channels: usize) -> Result<Self> {
        let hidden = (channels / 4).max(1);
        Ok(Self {
            down: Conv2d::new(&scope.pp("down"), 2 * channels, hidden, 1, true)?,
            act: PRelu::new(&scope.pp("act"))?,
            up: Conv2d::new(&scope.pp("up"), hidden, channels, 1, true)?,
            channels,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn weights(&self, current: &Tensor, prev: &Tensor) -> Result<GateWeights> {
        let pooled = global_avg_pool(&Tensor::cat(&[current, prev], 1)?)?;
        let z = self.up.forward(&self.act.forward(&self.down.forward(&pooled)?)?)?;
        Ok(GateWeights(sigmoid(&z)?))
    }

    pub fn forward(&self, current: &Tensor, prev: &Tensor) -> Result<Tensor> {
        gated_fuse(current, prev, self)
    }
}

/// `G ⊙ current + (1 − G) ⊙ prev`.
///
/// Evaluated as `prev + G·d` for `G ≤ ½` and `current − (1 − G)·d` otherwise, with
/// `d = current − prev`, so that both endpoints and the `current == prev` case are
/// reproduced exactly in floating point.
pub fn gated_fuse(current: &Tensor, prev: &Tensor, gate: &FusionGate) -> Result<Tensor> {
    if current.dims() != prev.dims() {
        return Err(shape_err!(
            "cannot fuse {:?} with {:?}",
            current.dims(),
            prev.dims()
        ));
    }
    if current.dims()[1] != gate.channels {
        return Err(shape_err!(
            "gate built for {} channels, features have {}",
            gate.channels,
            current.dims()[1]
        ));
    }
    let g = gate.weights(current, prev)?.0;
    blend(current, prev, &g)
}

/// Convex blend with explicit weights; see [`gated_fuse`].
pub fn blend(current: &Tensor, prev: &Tensor, g: &Tensor) -> Result<Tensor> {
    let d = (current - prev)?;
    let lo = prev.broadcast_add(&d.broadcast_mul(g)?)?;
    let one_minus = g.affine(-1.0, 1.0)?;
    let hi = current.broadcast_sub(&d.broadcast_mul(&one_minus)?)?;
    let use_lo = g.le(0.5)?.broadcast_as(current.shape())?;
    Ok(use_lo.where_cond(&lo, &hi)?)
}

/// How a fusion point combines current and historical features.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FuseMode {
    Gated,
    Additive,
    /// The historical input is ignored.
    PassThrough,
}

/// A fusion point: optional width projection of the history, then the combine rule.
#[derive(Debug, Clone)]
pub struct FusionSite {
    mode: FuseMode,
    gate: Option<FusionGate>,
    proj: Option<Conv2d>,
    enabled: bool,
}

impl FusionSite {
    /// `prev_channels != channels` adds a 1×1 projection on the historical input.
    pub fn new(scope: &Scope, channels: usize, prev_channels: usize, mode: FuseMode) -> Result<Self> {
        let gate = match mode {
            FuseMode::Gated => Some(FusionGate::new(&scope.pp("gate"), channels)?),
            _ => None,
        };
        let proj = if prev_channels != channels && mode != FuseMode::PassThrough {
            Some(Conv2d::new(&scope.pp("proj"), prev_channels, channels, 1, true)?)
        } else {
            None
        };
        Ok(Self {
            mode,
            gate,
            proj,
            enabled: true,
        })
    }

    /// Turn the site into a pass-through without removing its parameters.
    pub fn set_enabled(&mut self, enabled: bool) {
        self.enabled = enabled;
    }

    pub fn is_enabled(&self) -> bool {
        self.enabled
    }

    pub fn mode(&self) -> FuseMode {
        self.mode
    }

    pub fn gate(&self) -> Option<&FusionGate> {
        self.gate.as_ref()
    }

    pub fn forward(&self, current: &Tensor, prev: &Tensor) -> Result<Tensor> {
        if !self.enabled || self.mode == FuseMode::PassThrough {
            return Ok(current.clone());
        }
        let prev = match &self.proj {
            Some(p) => p.forward(prev)?,
            None => prev.clone(),
        };
        match (&self.gate, self.mode) {
            (Some(g), FuseMode::Gated) => gated_fuse(current, &prev, g),
            _ => {
                if current.dims() != prev.dims() {
                    return Err(shape_err!("cannot add {:?} to {:?}", prev.dims(), current.dims()));
                }
                Ok((current + prev)?)
            }
        }
    }
}

/// 3×3 conv + CAB over the input image, optionally fused with the previous stage's
/// feature map.
#[derive(Debug, Clone)]
pub struct ShallowFeatures {
    conv: Conv2d,
    cab: ChannelAttentionBlock,
    history: Option<FusionSite>,
    width: usize,
}

impl ShallowFeatures {
    /// `history = Some((h_width, mode))` builds the fusion point for `H`.
    pub fn new(scope: &Scope, width: usize, history: Option<(usize, FuseMode)>) -> Result<Self> {
        let conv = Conv2d::new(&scope.pp("conv"), 3, width, 3, true)?;
        let cab = ChannelAttentionBlock::new(&scope.pp("cab"), width, 3, CAB_REDUCTION)?;
        let history = match history {
            Some((hw, mode)) => Some(FusionSite::new(&scope.pp("fuse"), width, hw, mode)?),
            None => None,
        };
        Ok(Self {
            conv,
            cab,
            history,
            width,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn site_mut(&mut self) -> Option<&mut FusionSite> {
        self.history.as_mut()
    }

    pub fn forward(&self, img: &Tensor, h_prev: Option<&Tensor>) -> Result<Tensor> {
        let x = self.cab.forward(&self.conv.forward(img)?)?;
        match (&self.history, h_prev) {
            (Some(site), Some(h)) => site.forward(&x, h),
            _ => Ok(x),
        }
    }
}

/// Free-function form of [`ShallowFeatures::forward`].
pub fn shallow_features(img: &Tensor, h_prev: Option<&Tensor>, sf: &ShallowFeatures) -> Result<Tensor> {
    sf.forward(img, h_prev)
}

#[derive(Debug, Clone)]
enum ScaleFusion {
    /// gate(enc, dec) → conv → gate(·, history) → conv
    Enhanced {
        first: FusionSite,
        mid: Conv2d,
        second: Option<FusionSite>,
        out: Conv2d,
    },
    /// conv(enc) + conv(dec)
    Plain { enc: Conv2d, dec: Conv2d },
}

/// Produces the per-scale features a stage passes on.
#[derive(Debug, Clone)]
pub struct CrossStageFusion {
    scales: Vec<ScaleFusion>,
    enabled: bool,
}

impl CrossStageFusion {
    /// `enhanced = false` gives the plain additive form with 1×1 convolutions.
    pub fn new(
        scope: &Scope,
        widths: &[usize],
        enhanced: bool,
        with_history: bool,
        mode: FuseMode,
    ) -> Result<Self> {
        let mut scales = Vec::with_capacity(widths.len());
        for (i, &w) in widths.iter().enumerate() {
            let s = scope.pp(format!("scale{i}"));
            scales.push(if enhanced {
                ScaleFusion::Enhanced {
                    first: FusionSite::new(&s.pp("gate_ed"), w, w, mode)?,
                    mid: Conv2d::new(&s.pp("conv_mid"), w, w, 3, true)?,
                    second: if with_history {
                        Some(FusionSite::new(&s.pp("gate_hist"), w, w, mode)?)
                    } else {
                        None
                    },
                    out: Conv2d::new(&s.pp("conv_out"), w, w, 3, true)?,
                }
            } else {
                ScaleFusion::Plain {
                    enc: Conv2d::new(&s.pp("enc"), w, w, 1, true)?,
                    dec: Conv2d::new(&s.pp("dec"), w, w, 1, true)?,
                }
            });
        }
        Ok(Self {
            scales,
            enabled: true,
        })
    }

    /// Disabled fusion keeps only the encoder path: gates pass the current input through.
    pub fn set_enabled(&mut self, enabled: bool) {
        self.enabled = enabled;
        for s in &mut self.scales {
            if let ScaleFusion::Enhanced { first, second, .. } = s {
                first.set_enabled(enabled);
                if let Some(second) = second {
                    second.set_enabled(enabled);
                }
            }
        }
    }

    pub fn forward(
        &self,
        enc: &CrossStageFeatures,
        dec: &CrossStageFeatures,
        prev: Option<&CrossStageFeatures>,
    ) -> Result<CrossStageFeatures> {
        let n = self.scales.len();
        if enc.len() != n || dec.len() != n || prev.is_some_and(|p| p.len() != n) {
            return Err(shape_err!(
                "cross-stage fusion over {n} scales got enc {}, dec {}, prev {:?}",
                enc.len(),
                dec.len(),
                prev.map(|p| p.len())
            ));
        }
        let mut out = Vec::with_capacity(n);
        for (i, s) in self.scales.iter().enumerate() {
            let e = &enc.per_scale[i];
            let d = &dec.per_scale[i];
            let y = match s {
                ScaleFusion::Enhanced {
                    first,
                    mid,
                    second,
                    out,
                } => {
                    let c = mid.forward(&first.forward(e, d)?)?;
                    let g2 = match (second, prev) {
                        (Some(site), Some(p)) => site.forward(&c, &p.per_scale[i])?,
                        _ => c,
                    };
                    out.forward(&g2)?
                }
                ScaleFusion::Plain { enc: ce, dec: cd } => {
                    if self.enabled {
                        (ce.forward(e)? + cd.forward(d)?)?
                    } else {
                        ce.forward(e)?
                    }
                }
            };
            out.push(y);
        }
        Ok(CrossStageFeatures::new(out))
    }
}

/// Free-function form of [`CrossStageFusion::forward`].
pub fn enhanced_csff(
    enc: &CrossStageFeatures,
    dec: &CrossStageFeatures,
    prev: Option<&CrossStageFeatures>,
    fusion: &CrossStageFusion,
) -> Result<CrossStageFeatures> {
    fusion.forward(enc, dec, prev)
}
