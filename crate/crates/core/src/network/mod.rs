//! Stage assembly: a first encoder–decoder stage, `tau` middle stages and a final
//! full-resolution stage, with PSF-conditioned decoders and gated cross-stage wiring.

mod config;

pub use config::{ModelConfig, Pathway, PsfMode, Site, StageId, NUM_ORB, UNET_DEPTH};

use candle_core::{DType, Device, Tensor};

use crate::attention::{
    ChannelAttentionBlock, OriginalResolutionBlock, PsfBlock, SupervisedAttention, CAB_REDUCTION,
};
use crate::error::{config_err, shape_err, Result};
use crate::fusion::{CrossStageFeatures, CrossStageFusion, FuseMode, FusionSite, ShallowFeatures};
use crate::nn::{Conv2d, ParamStore, Scope};
use crate::ops::{downsample2, resize_bilinear};
use crate::psf::{MultiChannelPsf, MultiScalePsfHead};

/// Restored image plus the features a stage hands to the next one.
#[derive(Debug, Clone)]
pub struct StageOutput {
    pub restored: Tensor,
    pub h: Tensor,
    pub o: CrossStageFeatures,
}

/// Internal encoder/decoder features of a stage.
#[derive(Debug, Clone)]
pub struct EncoderDecoderState {
    pub enc_feats: CrossStageFeatures,
    pub dec_feats: CrossStageFeatures,
    pub psf: Option<MultiChannelPsf>,
}

fn fuse_mode(cfg: &ModelConfig, shallow: bool) -> FuseMode {
    match (cfg.use_gate, shallow) {
        (true, _) => FuseMode::Gated,
        (false, true) => FuseMode::PassThrough,
        (false, false) => FuseMode::Additive,
    }
}

/// Three-level encoder with CAB stacks and 2× downsampling between levels.
#[derive(Debug, Clone)]
pub struct Encoder {
    levels: Vec<Vec<ChannelAttentionBlock>>,
    down: Vec<Conv2d>,
    history: Vec<FusionSite>,
}

impl Encoder {
    pub fn new(scope: &Scope, cfg: &ModelConfig, with_history: bool) -> Result<Self> {
        let widths = cfg.unet_widths();
        let mut levels = Vec::new();
        let mut down = Vec::new();
        let mut history = Vec::new();
        for (l, &w) in widths.iter().enumerate() {
            let s = scope.pp(format!("level{l}"));
            levels.push(
                (0..cfg.level_blocks)
                    .map(|i| ChannelAttentionBlock::new(&s.pp(format!("cab{i}")), w, 3, CAB_REDUCTION))
                    .collect::<Result<Vec<_>>>()?,
            );
            if with_history {
                history.push(FusionSite::new(&s.pp("fuse"), w, w, fuse_mode(cfg, false))?);
            }
            if l + 1 < widths.len() {
                down.push(Conv2d::new(&scope.pp(format!("down{l}")), w, widths[l + 1], 1, true)?);
            }
        }
        Ok(Self { levels, down, history })
    }

    fn set_history_enabled(&mut self, enabled: bool) {
        for h in &mut self.history {
            h.set_enabled(enabled);
        }
    }

    pub fn forward(&self, x: &Tensor, prev: Option<&CrossStageFeatures>) -> Result<CrossStageFeatures> {
        if let Some(p) = prev {
            if p.len() != self.levels.len() {
                return Err(shape_err!("encoder history has {} scales, need {}", p.len(), self.levels.len()));
            }
        }
        let mut out = Vec::with_capacity(self.levels.len());
        let mut x = x.clone();
        for (l, level) in self.levels.iter().enumerate() {
            if l > 0 {
                x = self.down[l - 1].forward(&downsample2(&x)?)?;
            }
            for cab in level {
                x = cab.forward(&x)?;
            }
            if let (Some(site), Some(p)) = (self.history.get(l), prev) {
                x = site.forward(&x, &p.per_scale[l])?;
            }
            out.push(x.clone());
        }
        Ok(CrossStageFeatures::new(out))
    }
}

#[derive(Debug, Clone)]
enum DecoderBlock {
    Psf(PsfBlock),
    Cab(ChannelAttentionBlock),
}

impl DecoderBlock {
    fn forward(&self, x: &Tensor, psf: Option<&MultiChannelPsf>) -> Result<Tensor> {
        match (self, psf) {
            (Self::Psf(b), Some(p)) => b.forward(x, p),
            (Self::Psf(_), None) => Err(config_err!("PSF block evaluated without a PSF")),
            (Self::Cab(c), _) => Ok(c.forward(x)?),
        }
    }
}

/// Three-level decoder whose blocks are conditioned on the stage PSF.
#[derive(Debug, Clone)]
pub struct Decoder {
    levels: Vec<Vec<DecoderBlock>>,
    skip_attn: Vec<ChannelAttentionBlock>,
    up: Vec<Conv2d>,
}

impl Decoder {
    pub fn new(scope: &Scope, cfg: &ModelConfig) -> Result<Self> {
        let widths = cfg.unet_widths();
        let psf_channels = cfg.effective_psf_channels();
        let mut levels = Vec::new();
        for (l, &w) in widths.iter().enumerate() {
            let s = scope.pp(format!("level{l}"));
            levels.push(
                (0..cfg.level_blocks)
                    .map(|i| {
                        let bs = s.pp(format!("block{i}"));
                        Ok(match psf_channels {
                            Some(kc) => DecoderBlock::Psf(PsfBlock::new(&bs, w, kc)?),
                            None => DecoderBlock::Cab(ChannelAttentionBlock::new(&bs, w, 3, CAB_REDUCTION)?),
                        })
                    })
                    .collect::<Result<Vec<_>>>()?,
            );
        }
        let mut skip_attn = Vec::new();
        let mut up = Vec::new();
        for l in 0..widths.len() - 1 {
            skip_attn.push(ChannelAttentionBlock::new(
                &scope.pp(format!("skip{l}")),
                widths[l],
                3,
                CAB_REDUCTION,
            )?);
            up.push(Conv2d::new(&scope.pp(format!("up{l}")), widths[l + 1], widths[l], 1, true)?);
        }
        Ok(Self { levels, skip_attn, up })
    }

    pub fn forward(&self, enc: &CrossStageFeatures, psf: Option<&MultiChannelPsf>) -> Result<CrossStageFeatures> {
        let depth = self.levels.len();
        if enc.len() != depth {
            return Err(shape_err!("decoder expects {depth} scales, got {}", enc.len()));
        }
        let mut out = vec![None; depth];
        let mut x = enc.per_scale[depth - 1].clone();
        for l in (0..depth).rev() {
            if l + 1 < depth {
                let skip = self.skip_attn[l].forward(&enc.per_scale[l])?;
                let (_, _, h, w) = skip.dims4()?;
                x = (self.up[l].forward(&resize_bilinear(&x, h, w)?)? + skip)?;
            }
            for b in &self.levels[l] {
                x = b.forward(&x, psf)?;
            }
            out[l] = Some(x.clone());
        }
        Ok(CrossStageFeatures::new(out.into_iter().map(|t| t.expect("every level visited")).collect()))
    }
}

/// An encoder–decoder stage. Without history it is the first stage; with history it
/// is a middle stage.
#[derive(Debug, Clone)]
pub struct Stage {
    shallow: ShallowFeatures,
    encoder: Encoder,
    head: Option<MultiScalePsfHead>,
    decoder: Decoder,
    csff: CrossStageFusion,
    sam: SupervisedAttention,
    with_history: bool,
}

impl Stage {
    pub fn new(scope: &Scope, cfg: &ModelConfig, id: StageId) -> Result<Self> {
        let with_history = id != StageId::In;
        let widths = cfg.unet_widths();
        let mut shallow = ShallowFeatures::new(
            &scope.pp("shallow"),
            cfg.n_feat,
            with_history.then(|| (cfg.n_feat, fuse_mode(cfg, true))),
        )?;
        let mut encoder = Encoder::new(&scope.pp("encoder"), cfg, with_history && cfg.use_h_updates)?;
        let head = match cfg.effective_psf_channels() {
            Some(kc) => {
                let n = cfg.head_sizes.len();
                Some(MultiScalePsfHead::new(
                    &scope.pp("psf_head"),
                    &widths[..n],
                    &cfg.head_sizes,
                    kc,
                    cfg.psf_size,
                )?)
            }
            None => None,
        };
        let decoder = Decoder::new(&scope.pp("decoder"), cfg)?;
        let mut csff = CrossStageFusion::new(
            &scope.pp("csff"),
            &widths,
            cfg.use_enhanced_csff,
            with_history,
            fuse_mode(cfg, false),
        )?;
        let sam = SupervisedAttention::new(&scope.pp("sam"), cfg.n_feat)?;

        if cfg.is_disabled(id, Site::Shallow) {
            if let Some(site) = shallow.site_mut() {
                site.set_enabled(false);
            }
        }
        if cfg.is_disabled(id, Site::Encoder) {
            encoder.set_history_enabled(false);
        }
        if cfg.is_disabled(id, Site::Csff) {
            csff.set_enabled(false);
        }
        Ok(Self {
            shallow,
            encoder,
            head,
            decoder,
            csff,
            sam,
            with_history,
        })
    }

    pub fn forward(
        &self,
        img: &Tensor,
        history: Option<(&Tensor, &CrossStageFeatures)>,
    ) -> Result<(StageOutput, EncoderDecoderState)> {
        if self.with_history != history.is_some() {
            return Err(config_err!(
                "stage built {} history but called {}",
                if self.with_history { "with" } else { "without" },
                if history.is_some() { "with it" } else { "without it" }
            ));
        }
        let (h_prev, o_prev) = match history {
            Some((h, o)) => (Some(h), Some(o)),
            None => (None, None),
        };
        let x = self.shallow.forward(img, h_prev)?;
        let enc = self.encoder.forward(&x, o_prev)?;
        let psf = match &self.head {
            Some(head) => {
                let n = head.num_heads();
                Some(head.forward(&enc.per_scale[..n])?)
            }
            None => None,
        };
        let dec = self.decoder.forward(&enc, psf.as_ref())?;
        let o = self.csff.forward(&enc, &dec, o_prev)?;
        let (restored, h) = self.sam.forward(&dec.per_scale[0], img)?;
        Ok((
            StageOutput { restored, h, o },
            EncoderDecoderState {
                enc_feats: enc,
                dec_feats: dec,
                psf,
            },
        ))
    }
}

/// Final stage: full-resolution blocks fed with side information from the last
/// middle stage.
#[derive(Debug, Clone)]
pub struct OrStage {
    shallow: ShallowFeatures,
    orbs: Vec<OriginalResolutionBlock>,
    side: Vec<Vec<Conv2d>>,
    tail: Conv2d,
    use_side: bool,
}

impl OrStage {
    pub fn new(scope: &Scope, cfg: &ModelConfig) -> Result<Self> {
        let width = cfg.ors_width();
        let mut shallow = ShallowFeatures::new(
            &scope.pp("shallow"),
            width,
            Some((cfg.n_feat, fuse_mode(cfg, true))),
        )?;
        if cfg.is_disabled(StageId::Or, Site::Shallow) {
            if let Some(site) = shallow.site_mut() {
                site.set_enabled(false);
            }
        }
        let mut orbs = Vec::new();
        let mut side = Vec::new();
        for i in 0..NUM_ORB {
            let s = scope.pp(format!("orb{i}"));
            orbs.push(OriginalResolutionBlock::new(&s, width, cfg.num_cab)?);
            side.push(
                cfg.unet_widths()
                    .iter()
                    .enumerate()
                    .map(|(l, &w)| Conv2d::new(&s.pp(format!("side{l}")), w, width, 1, true))
                    .collect::<Result<Vec<_>>>()?,
            );
        }
        let tail = Conv2d::new(&scope.pp("tail"), width, 3, 3, true)?;
        Ok(Self {
            shallow,
            orbs,
            side,
            tail,
            use_side: !cfg.is_disabled(StageId::Or, Site::Side),
        })
    }

    /// Project every scale to the block width and resample to full resolution.
    fn side_info(&self, i: usize, o: &CrossStageFeatures, h: usize, w: usize) -> Result<Tensor> {
        let mut acc: Option<Tensor> = None;
        for (conv, f) in self.side[i].iter().zip(&o.per_scale) {
            let t = resize_bilinear(&conv.forward(f)?, h, w)?;
            acc = Some(match acc {
                Some(a) => (a + t)?,
                None => t,
            });
        }
        acc.ok_or_else(|| shape_err!("no cross-stage features"))
    }

    pub fn forward(&self, img: &Tensor, h_mid: &Tensor, o_mid: &CrossStageFeatures) -> Result<Tensor> {
        if o_mid.len() != self.side[0].len() {
            return Err(shape_err!("final stage expects {} scales, got {}", self.side[0].len(), o_mid.len()));
        }
        let (_, _, h, w) = img.dims4()?;
        let mut x = self.shallow.forward(img, Some(h_mid))?;
        for (i, orb) in self.orbs.iter().enumerate() {
            let side = if self.use_side {
                Some(self.side_info(i, o_mid, h, w)?)
            } else {
                None
            };
            x = orb.forward(&x, side.as_ref())?;
        }
        Ok((self.tail.forward(&x)? + img)?)
    }
}

/// All supervised restorations of one forward pass plus the inter-stage features.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// Final restoration.
    pub restored: Tensor,
    /// One restoration per encoder–decoder stage (`tau + 1`).
    pub intermediates: Vec<Tensor>,
    /// `H` of every encoder–decoder stage.
    pub hidden: Vec<Tensor>,
    /// `O` of every encoder–decoder stage.
    pub cross_stage: Vec<CrossStageFeatures>,
    /// PSF predicted by every encoder–decoder stage.
    pub psfs: Vec<Option<MultiChannelPsf>>,
}

impl ForwardOutput {
    /// Intermediates followed by the final restoration (`tau + 2` tensors).
    pub fn supervised(&self) -> Vec<&Tensor> {
        self.intermediates
            .iter()
            .chain(std::iter::once(&self.restored))
            .collect()
    }
}

/// The full restoration network.
#[derive(Debug, Clone)]
pub struct DerainNet {
    config: ModelConfig,
    stage_in: Stage,
    mids: Vec<Stage>,
    ors: OrStage,
}

impl DerainNet {
    pub fn new(scope: &Scope, config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let stage_in = Stage::new(&scope.pp("stage_in"), config, StageId::In)?;
        let mids = (1..=config.tau)
            .map(|i| Stage::new(&scope.pp(format!("stage_mid{i}")), config, StageId::Mid(i)))
            .collect::<Result<Vec<_>>>()?;
        let ors = OrStage::new(&scope.pp("ors"), config)?;
        Ok(Self {
            config: config.clone(),
            stage_in,
            mids,
            ors,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn stage_in(&self) -> &Stage {
        &self.stage_in
    }

    pub fn mids(&self) -> &[Stage] {
        &self.mids
    }

    pub fn or_stage(&self) -> &OrStage {
        &self.ors
    }

    pub fn forward(&self, img: &Tensor) -> Result<ForwardOutput> {
        let (_, c, h, w) = img.dims4()?;
        if c != 3 {
            return Err(shape_err!("expected a 3-channel image, got {c} channels"));
        }
        let m = self.config.size_multiple();
        if h % m != 0 || w % m != 0 {
            return Err(shape_err!(
                "image size {h}×{w} is not divisible by {m}; reflect-pad the input first"
            ));
        }
        let (first, st) = self.stage_in.forward(img, None)?;
        let mut intermediates = vec![first.restored.clone()];
        let mut hidden = vec![first.h.clone()];
        let mut cross_stage = vec![first.o.clone()];
        let mut psfs = vec![st.psf];
        let mut prev = first;
        for stage in &self.mids {
            let (out, st) = stage.forward(img, Some((&prev.h, &prev.o)))?;
            intermediates.push(out.restored.clone());
            hidden.push(out.h.clone());
            cross_stage.push(out.o.clone());
            psfs.push(st.psf);
            prev = out;
        }
        let restored = self.ors.forward(img, &prev.h, &prev.o)?;
        Ok(ForwardOutput {
            restored,
            intermediates,
            hidden,
            cross_stage,
            psfs,
        })
    }
}

/// A network together with the store that owns its parameters.
#[derive(Clone)]
pub struct DerainModel {
    pub store: ParamStore,
    pub net: DerainNet,
}

impl DerainModel {
    pub fn new(config: &ModelConfig, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        let store = ParamStore::new(seed, dtype, device);
        let net = DerainNet::new(&store.root(), config)?;
        Ok(Self { store, net })
    }

    pub fn config(&self) -> &ModelConfig {
        self.net.config()
    }

    pub fn forward(&self, img: &Tensor) -> Result<ForwardOutput> {
        self.net.forward(img)
    }

    /// Zero the last convolution of every residual branch. The network then maps
    /// each image to itself at every supervised output.
    pub fn zero_residual_tails(&self) -> Result<usize> {
        self.store.zero_where(is_tail_param)
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_scalars()
    }
}

/// Parameters belonging to the last convolution of a residual branch.
pub fn is_tail_param(name: &str) -> bool {
    name.split('.').any(|s| s == "tail")
}

/// Learnable scalar count of the assembled model.
pub fn count_parameters(config: &ModelConfig) -> Result<usize> {
    Ok(DerainModel::new(config, 0, DType::F32, &Device::Cpu)?.num_parameters())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::{seeded_uniform, to_vec_f64};

    fn small(tau: usize) -> ModelConfig {
        ModelConfig {
            tau,
            psf_channels: 2,
            psf_size: 3,
            n_feat: 4,
            scale_unet: 2,
            scale_ors: 2,
            num_cab: 1,
            level_blocks: 1,
            ..Default::default()
        }
    }

    fn img(h: usize, w: usize, seed: u64) -> Tensor {
        seeded_uniform(&[1, 3, h, w], -1.0, 1.0, seed, &Device::Cpu).unwrap()
    }

    #[test]
    fn output_count_and_shapes() {
        for tau in [0, 2] {
            let m = DerainModel::new(&small(tau), 0, DType::F64, &Device::Cpu).unwrap();
            let out = m.forward(&img(8, 12, 1)).unwrap();
            assert_eq!(out.intermediates.len(), tau + 1);
            assert_eq!(out.supervised().len(), tau + 2);
            for t in out.supervised() {
                assert_eq!(t.dims(), &[1, 3, 8, 12]);
            }
            assert_eq!(out.cross_stage.len(), tau + 1);
            assert!(out.cross_stage.iter().all(|o| o.len() == UNET_DEPTH));
            assert!(out.hidden.iter().all(|h| h.dims() == [1, 4, 8, 12]));
        }
    }

    #[test]
    fn zero_tails_give_identity() {
        let m = DerainModel::new(&small(1), 3, DType::F64, &Device::Cpu).unwrap();
        assert!(m.zero_residual_tails().unwrap() > 0);
        let x = img(8, 8, 2);
        let want = to_vec_f64(&x).unwrap();
        for t in m.forward(&x).unwrap().supervised() {
            assert_eq!(to_vec_f64(t).unwrap(), want);
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let a = DerainModel::new(&small(1), 7, DType::F64, &Device::Cpu).unwrap();
        let b = DerainModel::new(&small(1), 7, DType::F64, &Device::Cpu).unwrap();
        let x = img(8, 8, 3);
        let ya = to_vec_f64(&a.forward(&x).unwrap().restored).unwrap();
        let yb = to_vec_f64(&b.forward(&x).unwrap().restored).unwrap();
        let yc = to_vec_f64(&a.forward(&x).unwrap().restored).unwrap();
        assert_eq!(ya, yb);
        assert_eq!(ya, yc);
    }

    #[test]
    fn indivisible_size_rejected() {
        let m = DerainModel::new(&small(0), 0, DType::F64, &Device::Cpu).unwrap();
        let e = m.forward(&img(6, 8, 0)).unwrap_err();
        assert!(e.to_string().contains("pad"), "{e}");
    }

    #[test]
    fn mid_stage_with_empty_history_matches_first_stage() {
        let m = DerainModel::new(&small(1), 11, DType::F64, &Device::Cpu).unwrap();
        // Share weights, then open every history gate fully (G = 1).
        for (name, var) in m.store.vars() {
            if let Some(rest) = name.strip_prefix("stage_mid1.") {
                if let Some(src) = m.store.get(&format!("stage_in.{rest}")) {
                    var.set(src.as_tensor()).unwrap();
                } else if rest.ends_with("gate.up.bias") {
                    var.set(&var.ones_like().unwrap().affine(800.0, 0.0).unwrap()).unwrap();
                } else if rest.ends_with("gate.up.weight") {
                    var.set(&var.zeros_like().unwrap()).unwrap();
                }
            }
        }
        let x = img(8, 8, 5);
        let (first, _) = m.net.stage_in().forward(&x, None).unwrap();
        let h0 = first.h.zeros_like().unwrap();
        let o0 = CrossStageFeatures::new(first.o.per_scale.iter().map(|t| t.zeros_like().unwrap()).collect());
        let (mid, _) = m.net.mids()[0].forward(&x, Some((&h0, &o0))).unwrap();
        assert_eq!(to_vec_f64(&mid.restored).unwrap(), to_vec_f64(&first.restored).unwrap());
        assert_eq!(to_vec_f64(&mid.h).unwrap(), to_vec_f64(&first.h).unwrap());
    }

    #[test]
    fn parameters_grow_linearly_in_tau() {
        let counts: Vec<usize> = (0..4).map(|t| count_parameters(&small(t)).unwrap()).collect();
        let d = counts[1] - counts[0];
        assert!(d > 0);
        assert_eq!(counts[2] - counts[1], d);
        assert_eq!(counts[3] - counts[2], d);
    }
}
