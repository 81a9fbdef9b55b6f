//! Dynamic point-spread-function prediction.
//!
//! Encoder features are pooled and projected into one softmax-normalized kernel per
//! head size, the heads are fused by channel attention, projected to `K_c` kernels of
//! size `K × K` and spatially normalized so every kernel is a probability distribution.
//!
//! This module also holds the dictionary form of a spatially varying blur,
//! `K(x, y) = Σⱼ wⱼ(x, y)·kⱼ`, used to synthesize degraded training pairs.

use candle_core::{DType, Tensor, D};

use crate::attention::ChannelAttentionBlock;
use crate::error::{config_err, shape_err, Result};
use crate::nn::{Conv2d, Scope};
use crate::ops::{global_avg_pool, reflect_pad, softplus, to_vec_f64};

/// Slices whose mass falls below this are replaced by the uniform kernel.
pub const DEGENERATE_SUM_EPS: f64 = 1e-8;

/// Reduction ratio of the channel attention that fuses the head outputs.
pub const HEAD_FUSION_REDUCTION: usize = 16;

/// Softmax-normalized kernel from a single head, laid out as [B, k², 1, 1].
#[derive(Debug, Clone)]
pub struct FlatPsf {
    data: Tensor,
    k: usize,
}

impl FlatPsf {
    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn kernel_size(&self) -> usize {
        self.k
    }
}

/// [B, K_c, K, K] stack of nonnegative kernels, each summing to one.
#[derive(Debug, Clone)]
pub struct MultiChannelPsf(Tensor);

impl MultiChannelPsf {
    /// Wrap a tensor without checking the invariants.
    pub fn new_unchecked(t: Tensor) -> Self {
        Self(t)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn batch(&self) -> usize {
        self.0.dims()[0]
    }

    pub fn channels(&self) -> usize {
        self.0.dims()[1]
    }

    pub fn kernel_size(&self) -> usize {
        self.0.dims()[2]
    }

    /// Largest deviation of any kernel's mass from one, and the smallest entry.
    pub fn stats(&self) -> Result<(f64, f64)> {
        let (b, c, k, _) = self.0.dims4()?;
        let v = to_vec_f64(&self.0)?;
        let kk = k * k;
        let mut worst = 0.0f64;
        let mut min = f64::INFINITY;
        for s in 0..b * c {
            let slice = &v[s * kk..(s + 1) * kk];
            let sum: f64 = slice.iter().sum();
            worst = worst.max((sum - 1.0).abs());
            min = slice.iter().copied().fold(min, f64::min);
        }
        Ok((worst, min))
    }

    /// Check nonnegativity and unit mass to within `tol`.
    pub fn validate(&self, tol: f64) -> Result<()> {
        let (_, _, k, k2) = self.0.dims4()?;
        if k != k2 || k % 2 == 0 {
            return Err(shape_err!("PSF kernels must be square and odd, got {k}×{k2}"));
        }
        let (worst, min) = self.stats()?;
        if min < 0.0 || worst > tol || !worst.is_finite() {
            return Err(shape_err!(
                "PSF violates normalization: min entry {min:e}, worst mass error {worst:e}"
            ));
        }
        Ok(())
    }
}

/// Learnable kernel dictionary plus per-pixel mixing weights.
#[derive(Debug, Clone)]
pub struct PsfDictionary {
    /// [K_c, K, K]
    pub kernels: Tensor,
    /// [B, K_c, H, W]; nonnegative, summing to one over the K_c axis.
    pub weight_field: Tensor,
}

impl PsfDictionary {
    pub fn new(kernels: Tensor, weight_field: Tensor) -> Result<Self> {
        let (kc, k, k2) = kernels.dims3()?;
        let (_, wc, _, _) = weight_field.dims4()?;
        if k != k2 || k % 2 == 0 {
            return Err(shape_err!("dictionary kernels must be square and odd, got {k}×{k2}"));
        }
        if wc != kc {
            return Err(shape_err!("weight field has {wc} channels for {kc} kernels"));
        }
        Ok(Self { kernels, weight_field })
    }

    pub fn num_kernels(&self) -> usize {
        self.kernels.dims()[0]
    }

    pub fn kernel_size(&self) -> usize {
        self.kernels.dims()[1]
    }

    /// Check the simplex convention on the weight field.
    pub fn validate(&self, tol: f64) -> Result<()> {
        let (b, kc, h, w) = self.weight_field.dims4()?;
        let v = to_vec_f64(&self.weight_field)?;
        for bi in 0..b {
            for p in 0..h * w {
                let mut s = 0.0;
                for c in 0..kc {
                    let x = v[(bi * kc + c) * h * w + p];
                    if x < 0.0 {
                        return Err(shape_err!("negative mixing weight {x}"));
                    }
                    s += x;
                }
                if (s - 1.0).abs() > tol {
                    return Err(shape_err!("mixing weights sum to {s} at pixel {p}"));
                }
            }
        }
        if to_vec_f64(&self.kernels)?.iter().any(|x| !x.is_finite()) {
            return Err(shape_err!("non-finite dictionary kernel"));
        }
        Ok(())
    }
}

/// Pool → 1×1 projection to k² logits → softmax over the kernel axis.
pub fn predict_single_scale_psf(features: &Tensor, k: usize, head: &Conv2d) -> Result<FlatPsf> {
    if k % 2 == 0 {
        return Err(config_err!("head size {k} must be odd"));
    }
    let (_, c, _, _) = features.dims4()?;
    if head.in_channels() != c {
        return Err(config_err!(
            "head expects {} feature channels, got {c}",
            head.in_channels()
        ));
    }
    if head.out_channels() != k * k {
        return Err(config_err!(
            "head projects to {} values, need {} for a {k}×{k} kernel",
            head.out_channels(),
            k * k
        ));
    }
    let logits = head.forward(&global_avg_pool(features)?)?;
    let data = candle_nn::ops::softmax(&logits, 1)?;
    Ok(FlatPsf { data, k })
}

/// Clamp to nonnegative, divide each [K, K] slice by its mass, and fall back to the
/// uniform kernel where the mass is below `eps`.
pub fn spatial_normalize(raw: &Tensor, eps: f64) -> Result<MultiChannelPsf> {
    let (_, _, k, k2) = raw.dims4()?;
    if k != k2 {
        return Err(shape_err!("PSF kernels must be square, got {k}×{k2}"));
    }
    let pos = raw.relu()?;
    let mass = pos.sum_keepdim(D::Minus1)?.sum_keepdim(D::Minus2)?;
    let degenerate = mass.lt(eps)?;
    let safe = mass.clamp(eps, f64::INFINITY)?;
    let normalized = pos.broadcast_div(&safe)?;
    let uniform = normalized.ones_like()?.affine(1.0 / (k * k) as f64, 0.0)?;
    let out = degenerate
        .broadcast_as(normalized.shape())?
        .where_cond(&uniform, &normalized)?;
    Ok(MultiChannelPsf(out))
}

/// One pooled projection per head size; `features` index `i` feeds head `i`.
#[derive(Debug, Clone)]
pub struct MultiScalePsfHead {
    heads: Vec<(usize, Conv2d)>,
    fusion: ChannelAttentionBlock,
    proj: Conv2d,
    out_channels: usize,
    out_size: usize,
}

impl MultiScalePsfHead {
    /// `feature_widths[i]` is the channel count of the encoder level feeding head `i`.
    pub fn new(
        scope: &Scope,
        feature_widths: &[usize],
        head_sizes: &[usize],
        out_channels: usize,
        out_size: usize,
    ) -> Result<Self> {
        if head_sizes.is_empty() {
            return Err(config_err!("at least one PSF head is required"));
        }
        if feature_widths.len() != head_sizes.len() {
            return Err(config_err!(
                "{} head sizes for {} feature levels",
                head_sizes.len(),
                feature_widths.len()
            ));
        }
        if out_channels == 0 || out_size % 2 == 0 {
            return Err(config_err!(
                "PSF output must have ≥1 channel and odd size, got {out_channels}×{out_size}"
            ));
        }
        let mut heads = Vec::with_capacity(head_sizes.len());
        for (i, (&k, &c)) in head_sizes.iter().zip(feature_widths).enumerate() {
            if k % 2 == 0 {
                return Err(config_err!("head size {k} must be odd"));
            }
            heads.push((k, Conv2d::new(&scope.pp(format!("head{i}")), c, k * k, 1, true)?));
        }
        let concat: usize = head_sizes.iter().map(|k| k * k).sum();
        let fusion = ChannelAttentionBlock::new(&scope.pp("fusion"), concat, 3, HEAD_FUSION_REDUCTION)?;
        let proj = Conv2d::new(&scope.pp("proj"), concat, out_channels * out_size * out_size, 1, true)?;
        Ok(Self {
            heads,
            fusion,
            proj,
            out_channels,
            out_size,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn num_heads(&self) -> usize {
        self.heads.len()
    }

    pub fn out_size(&self) -> usize {
        self.out_size
    }

    pub fn predict_heads(&self, features: &[Tensor]) -> Result<Vec<FlatPsf>> {
        if features.len() != self.heads.len() {
            return Err(config_err!(
                "{} feature levels for {} heads",
                features.len(),
                self.heads.len()
            ));
        }
        self.heads
            .iter()
            .zip(features)
            .map(|((k, head), f)| predict_single_scale_psf(f, *k, head))
            .collect()
    }

    /// Concatenate head outputs, fuse with channel attention, project to
    /// `K_c·K·K`, reshape, apply softplus and normalize.
    pub fn fuse(&self, flat: &[FlatPsf]) -> Result<MultiChannelPsf> {
        if flat.len() != self.heads.len() {
            return Err(config_err!("{} PSFs for {} heads", flat.len(), self.heads.len()));
        }
        let b = flat[0].data.dims()[0];
        for (f, (k, _)) in flat.iter().zip(&self.heads) {
            if f.data.dims()[0] != b {
                return Err(shape_err!("head batch sizes differ: {} vs {b}", f.data.dims()[0]));
            }
            if f.k != *k {
                return Err(config_err!("expected a {k}×{k} head output, got {}", f.k));
            }
        }
        let parts: Vec<&Tensor> = flat.iter().map(|f| &f.data).collect();
        let concat = Tensor::cat(&parts, 1)?;
        let fused = self.fusion.forward(&concat)?;
        let refined = self.proj.forward(&fused)?;
        let raw = refined.reshape((b, self.out_channels, self.out_size, self.out_size))?;
        let psf = spatial_normalize(&softplus(&raw)?, DEGENERATE_SUM_EPS)?;
        debug_assert!(psf.validate(1e-4).is_ok());
        Ok(psf)
    }

    pub fn forward(&self, features: &[Tensor]) -> Result<MultiChannelPsf> {
        self.fuse(&self.predict_heads(features)?)
    }
}

/// Shrinks a multi-channel PSF to fewer channels with 1×1 mappings and renormalizes.
#[derive(Debug, Clone)]
pub struct PsfChannelReducer {
    steps: Vec<Conv2d>,
    in_channels: usize,
    target: usize,
}

impl PsfChannelReducer {
    /// Targets below a quarter of the input go through an intermediate width of
    /// `max(1, ⌊K_c/4⌋)`; otherwise a single direct mapping is used.
    pub fn new(scope: &Scope, in_channels: usize, target: usize) -> Result<Self> {
        if target < 1 {
            return Err(config_err!("PSF reducer target must be ≥ 1"));
        }
        if in_channels < 1 {
            return Err(config_err!("PSF reducer input must have ≥ 1 channel"));
        }
        let steps = if (target as f64) < in_channels as f64 / 4.0 {
            let mid = (in_channels / 4).max(1);
            vec![
                Conv2d::new(&scope.pp("compress"), in_channels, mid, 1, true)?,
                Conv2d::new(&scope.pp("map"), mid, target, 1, true)?,
            ]
        } else {
            vec![Conv2d::new(&scope.pp("map"), in_channels, target, 1, true)?]
        };
        Ok(Self {
            steps,
            in_channels,
            target,
        })
    }

    pub fn is_two_step(&self) -> bool {
        self.steps.len() == 2
    }

    pub fn target(&self) -> usize {
        self.target
    }

    pub fn forward(&self, psf: &MultiChannelPsf) -> Result<MultiChannelPsf> {
        if psf.channels() != self.in_channels {
            return Err(config_err!(
                "reducer expects {} PSF channels, got {}",
                self.in_channels,
                psf.channels()
            ));
        }
        let mut x = psf.tensor().clone();
        for s in &self.steps {
            x = s.forward(&x)?;
        }
        let out = spatial_normalize(&x, DEGENERATE_SUM_EPS)?;
        debug_assert!(out.validate(1e-4).is_ok());
        Ok(out)
    }
}

/// Free-function form of [`PsfChannelReducer::forward`].
pub fn reduce_psf_channels(psf: &MultiChannelPsf, reducer: &PsfChannelReducer) -> Result<MultiChannelPsf> {
    reducer.forward(psf)
}

/// Spatially varying blur: `out[b,·,x,y] = Σⱼ wⱼ(x,y)·(kⱼ ∗ image)[b,·,x,y]`, with
/// true convolution and reflection at the borders.
pub fn synthesize_degradation(image: &Tensor, dict: &PsfDictionary) -> Result<Tensor> {
    let (b, c, h, w) = image.dims4()?;
    let (wb, kc, wh, ww) = dict.weight_field.dims4()?;
    if (wh, ww) != (h, w) {
        return Err(shape_err!(
            "weight field is {wh}×{ww}, image is {h}×{w}"
        ));
    }
    if wb != b && wb != 1 {
        return Err(shape_err!("weight field batch {wb} for image batch {b}"));
    }
    let k = dict.kernel_size();
    let r = k / 2;
    let dtype = image.dtype();
    let padded = reflect_pad(image, r, r, r, r)?.reshape((b * c, 1, h + 2 * r, w + 2 * r))?;
    let flipped = dict.kernels.to_dtype(dtype)?.flip(&[1, 2])?;
    let weights = dict.weight_field.to_dtype(dtype)?;
    let mut out: Option<Tensor> = None;
    for j in 0..kc {
        let kernel = flipped.narrow(0, j, 1)?.reshape((1, 1, k, k))?;
        let blurred = padded.conv2d(&kernel, 0, 1, 1, 1)?.reshape((b, c, h, w))?;
        let wj = weights.narrow(1, j, 1)?;
        let term = blurred.broadcast_mul(&wj)?;
        out = Some(match out {
            Some(acc) => (acc + term)?,
            None => term,
        });
    }
    out.ok_or_else(|| shape_err!("empty PSF dictionary"))
}

/// Uniform kernel stack, handy as a neutral PSF.
pub fn uniform_psf(batch: usize, channels: usize, k: usize, dtype: DType, dev: &candle_core::Device) -> Result<MultiChannelPsf> {
    let t = (Tensor::ones((batch, channels, k, k), dtype, dev)? / (k * k) as f64)?;
    Ok(MultiChannelPsf(t))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use candle_core::Device;

    fn dev() -> Device {
        Device::Cpu
    }

    fn slice(t: &Tensor) -> Vec<f64> {
        to_vec_f64(t).unwrap()
    }

    #[test]
    fn zero_head_gives_uniform() {
        let s = ParamStore::new(0, DType::F64, &dev());
        let head = Conv2d::new(&s.root().pp("h"), 6, 9, 1, true).unwrap();
        s.zero_where(|_| true).unwrap();
        let f = Tensor::randn(0.0f64, 1.0, (2, 6, 5, 5), &dev()).unwrap();
        let p = predict_single_scale_psf(&f, 3, &head).unwrap();
        assert_eq!(p.tensor().dims(), &[2, 9, 1, 1]);
        for v in slice(p.tensor()) {
            assert!((v - 1.0 / 9.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_with_ln2_logit() {
        // Zero weights and a bias of [0, ln 2, 0, …] give logits independent of content.
        let s = ParamStore::new(0, DType::F64, &dev());
        let head = Conv2d::new(&s.root().pp("h"), 4, 9, 1, true).unwrap();
        s.zero_where(|_| true).unwrap();
        let mut bias = vec![0.0; 9];
        bias[1] = 2f64.ln();
        s.get("h.bias")
            .unwrap()
            .set(&Tensor::new(bias.as_slice(), &dev()).unwrap())
            .unwrap();
        let f = Tensor::randn(0.0f64, 1.0, (1, 4, 3, 3), &dev()).unwrap();
        let p = slice(predict_single_scale_psf(&f, 3, &head).unwrap().tensor());
        // exp(ln2) = 2; denominator 8·1 + 2 = 10
        assert!((p[1] - 0.2).abs() < 1e-15);
        for (i, v) in p.iter().enumerate() {
            if i != 1 {
                assert!((v - 0.1).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn head_shape_and_mismatch() {
        let s = ParamStore::new(3, DType::F64, &dev());
        let head = Conv2d::new(&s.root().pp("h"), 40, 49, 1, true).unwrap();
        let f = Tensor::randn(0.0f64, 1.0, (2, 40, 4, 4), &dev()).unwrap();
        let p = predict_single_scale_psf(&f, 7, &head).unwrap();
        assert_eq!(p.tensor().dims(), &[2, 49, 1, 1]);
        let sums = slice(&p.tensor().sum_keepdim(1).unwrap());
        for v in sums {
            assert!((v - 1.0).abs() < 1e-6);
        }
        let bad = Tensor::randn(0.0f64, 1.0, (2, 39, 4, 4), &dev()).unwrap();
        assert!(matches!(
            predict_single_scale_psf(&bad, 7, &head),
            Err(crate::Error::Config(_))
        ));
    }

    #[test]
    fn normalize_uniform_and_degenerate() {
        let ones = Tensor::ones((1, 1, 3, 3), DType::F64, &dev()).unwrap();
        for v in slice(spatial_normalize(&ones, DEGENERATE_SUM_EPS).unwrap().tensor()) {
            assert_eq!(v, 1.0 / 9.0);
        }
        let zeros = Tensor::zeros((1, 1, 3, 3), DType::F64, &dev()).unwrap();
        for v in slice(spatial_normalize(&zeros, DEGENERATE_SUM_EPS).unwrap().tensor()) {
            assert_eq!(v, 1.0 / 9.0);
        }
    }

    #[test]
    fn normalize_single_spike_is_delta() {
        for v in [1e-3, 1.0, 1e3] {
            let mut raw = vec![0.0; 9];
            raw[0] = v;
            let t = Tensor::from_vec(raw, (1, 1, 3, 3), &dev()).unwrap();
            let out = slice(spatial_normalize(&t, DEGENERATE_SUM_EPS).unwrap().tensor());
            assert_eq!(out[0], 1.0);
            assert!(out[1..].iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn fused_psf_shapes() {
        for kc in [40, 1] {
            let s = ParamStore::new(11, DType::F64, &dev());
            let head = MultiScalePsfHead::new(&s.root(), &[40, 60, 80], &[3, 5, 7], kc, 7).unwrap();
            let feats = vec![
                Tensor::randn(0.0f64, 1.0, (1, 40, 8, 8), &dev()).unwrap(),
                Tensor::randn(0.0f64, 1.0, (1, 60, 4, 4), &dev()).unwrap(),
                Tensor::randn(0.0f64, 1.0, (1, 80, 2, 2), &dev()).unwrap(),
            ];
            let p = head.forward(&feats).unwrap();
            assert_eq!(p.tensor().dims(), &[1, kc, 7, 7]);
            p.validate(1e-10).unwrap();
        }
    }

    #[test]
    fn fused_psf_constant_projection_is_uniform() {
        let s = ParamStore::new(5, DType::F64, &dev());
        let head = MultiScalePsfHead::new(&s.root(), &[4, 4, 4], &[3, 5, 7], 2, 7).unwrap();
        s.zero_where(|n| n.starts_with("proj.")).unwrap();
        let feats: Vec<Tensor> = (0..3)
            .map(|_| Tensor::randn(0.0f64, 1.0, (1, 4, 4, 4), &dev()).unwrap())
            .collect();
        let p = head.forward(&feats).unwrap();
        for v in slice(p.tensor()) {
            assert!((v - 1.0 / 49.0).abs() < 1e-15);
        }
    }

    #[test]
    fn fuse_rejects_mismatched_batches() {
        let s = ParamStore::new(5, DType::F64, &dev());
        let head = MultiScalePsfHead::new(&s.root(), &[4, 4, 4], &[3, 5, 7], 2, 7).unwrap();
        let a = vec![
            Tensor::randn(0.0f64, 1.0, (1, 4, 4, 4), &dev()).unwrap(),
            Tensor::randn(0.0f64, 1.0, (2, 4, 4, 4), &dev()).unwrap(),
            Tensor::randn(0.0f64, 1.0, (1, 4, 4, 4), &dev()).unwrap(),
        ];
        let flat = head.predict_heads(&a).unwrap();
        assert!(head.fuse(&flat).is_err());
        assert!(head.fuse(&flat[..2]).is_err());
    }

    #[test]
    fn reducer_branches() {
        let s = ParamStore::new(2, DType::F64, &dev());
        let two = PsfChannelReducer::new(&s.root().pp("a"), 40, 1).unwrap();
        assert!(two.is_two_step());
        assert_eq!(s.get("a.compress.weight").unwrap().dims(), &[10, 40, 1, 1]);
        let direct = PsfChannelReducer::new(&s.root().pp("b"), 40, 20).unwrap();
        assert!(!direct.is_two_step());
        assert!(PsfChannelReducer::new(&s.root().pp("c"), 40, 0).is_err());

        let psf = uniform_psf(2, 40, 7, DType::F64, &dev()).unwrap();
        let out = two.forward(&psf).unwrap();
        assert_eq!(out.tensor().dims(), &[2, 1, 7, 7]);
        out.validate(1e-12).unwrap();
        let out = direct.forward(&psf).unwrap();
        assert_eq!(out.tensor().dims(), &[2, 20, 7, 7]);
        out.validate(1e-12).unwrap();
    }

    #[test]
    fn reducer_identity_map() {
        let s = ParamStore::new(2, DType::F64, &dev());
        let r = PsfChannelReducer::new(&s.root(), 1, 1).unwrap();
        s.get("map.weight").unwrap().set(&Tensor::ones((1, 1, 1, 1), DType::F64, &dev()).unwrap()).unwrap();
        s.get("map.bias").unwrap().set(&Tensor::zeros(1, DType::F64, &dev()).unwrap()).unwrap();
        let raw = Tensor::rand(0.0f64, 1.0, (3, 1, 5, 5), &dev()).unwrap();
        let psf = spatial_normalize(&raw, DEGENERATE_SUM_EPS).unwrap();
        let out = r.forward(&psf).unwrap();
        let a = slice(psf.tensor());
        let b = slice(out.tensor());
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn delta_dictionary_is_identity() {
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let kernels = Tensor::from_vec(k, (1, 3, 3), &dev()).unwrap();
        let wf = Tensor::ones((1, 1, 6, 5), DType::F64, &dev()).unwrap();
        let dict = PsfDictionary::new(kernels, wf).unwrap();
        let img = Tensor::rand(0.0f64, 1.0, (1, 3, 6, 5), &dev()).unwrap();
        let out = synthesize_degradation(&img, &dict).unwrap();
        assert_eq!(slice(&out), slice(&img));
    }

    #[test]
    fn uniform_kernel_on_constant_image() {
        let kernels = (Tensor::ones((1, 3, 3), DType::F64, &dev()).unwrap() / 9.0).unwrap();
        let wf = Tensor::ones((1, 1, 5, 5), DType::F64, &dev()).unwrap();
        let dict = PsfDictionary::new(kernels, wf).unwrap();
        let img = (Tensor::ones((1, 3, 5, 5), DType::F64, &dev()).unwrap() * 0.37).unwrap();
        for v in slice(&synthesize_degradation(&img, &dict).unwrap()) {
            assert!((v - 0.37).abs() < 1e-15);
        }
    }

    #[test]
    fn degradation_spatial_mismatch() {
        let kernels = Tensor::ones((1, 3, 3), DType::F64, &dev()).unwrap();
        let wf = Tensor::ones((1, 1, 4, 4), DType::F64, &dev()).unwrap();
        let dict = PsfDictionary::new(kernels, wf).unwrap();
        let img = Tensor::ones((1, 3, 5, 5), DType::F64, &dev()).unwrap();
        assert!(synthesize_degradation(&img, &dict).is_err());
    }
}
