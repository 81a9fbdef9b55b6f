//! Deep-supervision training loss: Charbonnier + Laplacian edge + DFT-magnitude terms.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::ops::{ensure_same_shape, reflect_pad};

/// Weights of the hybrid loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Edge term weight.
    pub alpha1: f64,
    /// Frequency term weight.
    pub alpha2: f64,
    pub charbonnier_eps: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha1: 0.05,
            alpha2: 0.01,
            charbonnier_eps: 1e-3,
        }
    }
}

/// Which restorations the loss is summed over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Supervision {
    /// Every stage output and the final restoration (`tau + 2` terms).
    #[default]
    All,
    /// Only the `tau + 1` encoder–decoder stage outputs.
    StagesOnly,
}

/// `mean(√(d² + ε²))`
pub fn charbonnier(pred: &Tensor, target: &Tensor, eps: f64) -> Result<Tensor> {
    ensure_same_shape(pred, target, "charbonnier")?;
    let d2 = (pred - target)?.sqr()?;
    Ok((d2 + eps * eps)?.sqrt()?.mean_all()?)
}

/// Per-channel 5-point Laplacian with reflected borders.
pub fn laplacian(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let k = Tensor::new(
        &[[[[0.0f64, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]]]],
        x.device(),
    )?
    .to_dtype(x.dtype())?;
    let padded = reflect_pad(x, 1, 1, 1, 1)?.reshape((b * c, 1, h + 2, w + 2))?;
    Ok(padded.conv2d(&k, 0, 1, 1, 1)?.reshape((b, c, h, w))?)
}

pub fn edge_loss(pred: &Tensor, target: &Tensor, eps: f64) -> Result<Tensor> {
    ensure_same_shape(pred, target, "edge loss")?;
    charbonnier(&laplacian(pred)?, &laplacian(target)?, eps)
}

/// Cosine and sine tables of the length-`n` DFT, each [n, n].
fn dft_tables(n: usize, dtype: DType, dev: &Device) -> Result<(Tensor, Tensor)> {
    let mut c = Vec::with_capacity(n * n);
    let mut s = Vec::with_capacity(n * n);
    for k in 0..n {
        for j in 0..n {
            // Reduce k·j mod n first so the angle stays exact for large n.
            let a = 2.0 * std::f64::consts::PI * ((k * j) % n) as f64 / n as f64;
            c.push(a.cos());
            s.push(a.sin());
        }
    }
    Ok((
        Tensor::from_vec(c, (n, n), dev)?.to_dtype(dtype)?,
        Tensor::from_vec(s, (n, n), dev)?.to_dtype(dtype)?,
    ))
}

/// Added under the square root so the magnitude stays differentiable at zero.
const MAGNITUDE_FLOOR: f64 = 1e-12;

/// Magnitude of the unnormalized 2-D DFT of every [H, W] plane.
pub fn dft_magnitude(x: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    let (ch, sh) = dft_tables(h, x.dtype(), x.device())?;
    let (cw, sw) = dft_tables(w, x.dtype(), x.device())?;
    let x = x.contiguous()?;
    // F = W_h · X · W_w with W = C − iS (both symmetric).
    let xc = x.broadcast_matmul(&cw)?;
    let xs = x.broadcast_matmul(&sw)?;
    let re = (ch.broadcast_matmul(&xc)? - sh.broadcast_matmul(&xs)?)?;
    let im = (ch.broadcast_matmul(&xs)? + sh.broadcast_matmul(&xc)?)?.neg()?;
    Ok(((re.sqr()? + im.sqr()?)? + MAGNITUDE_FLOOR)?.sqrt()?)
}

/// Mean absolute difference of DFT magnitudes.
pub fn freq_loss(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    ensure_same_shape(pred, target, "frequency loss")?;
    let d = (dft_magnitude(pred)? - dft_magnitude(target)?)?;
    Ok(d.abs()?.mean_all()?)
}

/// Loss value with its components summed over all supervised outputs.
#[derive(Debug, Clone)]
pub struct LossBreakdown {
    pub total: Tensor,
    pub charbonnier: f64,
    pub edge: f64,
    pub freq: f64,
    /// Weighted loss of each supervised output.
    pub per_output: Vec<f64>,
}

impl LossBreakdown {
    pub fn total_value(&self) -> Result<f64> {
        Ok(self.total.to_dtype(DType::F64)?.to_scalar::<f64>()?)
    }
}

/// `Σₛ charbonnier + α₁·edge + α₂·freq` over the supervised outputs.
pub fn total_loss(outputs: &[&Tensor], target: &Tensor, weights: &LossWeights) -> Result<LossBreakdown> {
    if outputs.is_empty() {
        return Err(Error::Config("loss needs at least one output".into()));
    }
    let mut total: Option<Tensor> = None;
    let (mut sc, mut se, mut sf) = (0.0, 0.0, 0.0);
    let mut per_output = Vec::with_capacity(outputs.len());
    let target = target.to_dtype(outputs[0].dtype())?;
    for out in outputs {
        if out.dims() != target.dims() {
            return Err(shape_err!("output {:?} vs target {:?}", out.dims(), target.dims()));
        }
        let c = charbonnier(out, &target, weights.charbonnier_eps)?;
        let e = edge_loss(out, &target, weights.charbonnier_eps)?;
        let f = freq_loss(out, &target)?;
        let term = ((&c + (&e * weights.alpha1)?)? + (&f * weights.alpha2)?)?;
        sc += scalar(&c)?;
        se += scalar(&e)?;
        sf += scalar(&f)?;
        per_output.push(scalar(&term)?);
        total = Some(match total {
            Some(t) => (t + term)?,
            None => term,
        });
    }
    Ok(LossBreakdown {
        total: total.expect("nonempty"),
        charbonnier: sc,
        edge: se,
        freq: sf,
        per_output,
    })
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}
