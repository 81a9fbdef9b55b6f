//! Differentiable tensor helpers missing from the backend: reflection padding,
//! bilinear resampling and a few activations.

use candle_core::{DType, Device, Tensor, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{shape_err, Result};

/// Mirror an out-of-range index back into `0..n` without repeating the edge sample
/// (`... 2 1 | 0 1 2 ... n-1 | n-2 n-3 ...`). A length-1 axis maps everything to 0.
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut m = i.rem_euclid(period);
    if m >= n as isize {
        m = period - m;
    }
    m as usize
}

fn reflect_indices(n: usize, before: usize, after: usize, device: &Device) -> candle_core::Result<Tensor> {
    let idx: Vec<u32> = (-(before as isize)..(n + after) as isize)
        .map(|i| reflect_index(i, n) as u32)
        .collect();
    Tensor::new(idx.as_slice(), device)
}

/// Reflection-pad the last two axes of a [B, C, H, W] tensor.
pub fn reflect_pad(x: &Tensor, top: usize, bottom: usize, left: usize, right: usize) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    let mut y = x.clone();
    if top + bottom > 0 {
        y = y.index_select(&reflect_indices(h, top, bottom, x.device())?, 2)?;
    }
    if left + right > 0 {
        y = y.index_select(&reflect_indices(w, left, right, x.device())?, 3)?;
    }
    Ok(y)
}

/// Row-major [out, inp] interpolation matrix for 1-D linear resampling with
/// half-pixel centers (`align_corners = false`).
pub fn bilinear_weights(out: usize, inp: usize) -> Vec<f64> {
    let mut m = vec![0.0; out * inp];
    let scale = inp as f64 / out as f64;
    for o in 0..out {
        let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(inp - 1);
        let i1 = if i0 + 1 < inp { i0 + 1 } else { i0 };
        let l1 = src - i0 as f64;
        m[o * inp + i0] += 1.0 - l1;
        m[o * inp + i1] += l1;
    }
    m
}

/// Bilinear resize of a [B, C, H, W] tensor to [B, C, h, w], expressed as two matrix
/// products so gradients flow through the backend's matmul.
pub fn resize_bilinear(x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (_, _, hi, wi) = x.dims4()?;
    if (hi, wi) == (h, w) {
        return Ok(x.clone());
    }
    let dev = x.device();
    let ah = Tensor::from_vec(bilinear_weights(h, hi), (h, hi), dev)?.to_dtype(x.dtype())?;
    let aw = Tensor::from_vec(bilinear_weights(w, wi), (w, wi), dev)?
        .to_dtype(x.dtype())?
        .t()?
        .contiguous()?;
    let y = ah.broadcast_matmul(&x.contiguous()?)?;
    Ok(y.broadcast_matmul(&aw)?)
}

/// Numerically stable `ln(1 + eˣ)`.
pub fn softplus(x: &Tensor) -> candle_core::Result<Tensor> {
    let tail = (x.abs()?.neg()?.exp()? + 1.0)?.log()?;
    x.relu()? + tail
}

pub fn sigmoid(x: &Tensor) -> candle_core::Result<Tensor> {
    candle_nn::ops::sigmoid(x)
}

/// Adaptive average pooling to 1×1: [B, C, H, W] → [B, C, 1, 1].
pub fn global_avg_pool(x: &Tensor) -> candle_core::Result<Tensor> {
    x.mean_keepdim(D::Minus1)?.mean_keepdim(D::Minus2)
}

/// 2× downsampling by bilinear interpolation at scale ½ (a 2×2 box filter).
pub fn downsample2(x: &Tensor) -> candle_core::Result<Tensor> {
    x.avg_pool2d(2)
}

/// Gather a [B, C, H, W] tensor into a flat `Vec<f64>` (row-major).
pub fn to_vec_f64(x: &Tensor) -> Result<Vec<f64>> {
    Ok(x.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?)
}

/// Uniform values in `[lo, hi)` from a seeded stream, as an f64 tensor.
pub fn seeded_uniform(dims: &[usize], lo: f64, hi: f64, seed: u64, device: &Device) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = dims.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Ok(Tensor::from_vec(v, dims, device)?)
}

pub fn ensure_same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(shape_err!("{what}: {:?} vs {:?}", a.dims(), b.dims()));
    }
    Ok(())
}
