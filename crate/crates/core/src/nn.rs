//! Parameter storage and the handful of primitive layers the network is built from.
//!
//! Parameters live in a [`ParamStore`] keyed by dotted path names. Initial values are
//! drawn from a seeded ChaCha stream so that two stores built from the same seed are
//! bit-identical, which the CPU tensor backend cannot guarantee on its own.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::rc::Rc;

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{shape_err, Result};

struct StoreInner {
    vars: BTreeMap<String, Var>,
    rng: ChaCha8Rng,
}

/// Named, seeded collection of trainable tensors.
#[derive(Clone)]
pub struct ParamStore {
    inner: Rc<RefCell<StoreInner>>,
    device: Device,
    dtype: DType,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType, device: &Device) -> Self {
        Self {
            inner: Rc::new(RefCell::new(StoreInner {
                vars: BTreeMap::new(),
                rng: ChaCha8Rng::seed_from_u64(seed),
            })),
            device: device.clone(),
            dtype,
        }
    }

    pub fn root(&self) -> Scope {
        Scope {
            store: self.clone(),
            prefix: String::new(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// All variables sorted by name.
    pub fn vars(&self) -> Vec<(String, Var)> {
        self.inner
            .borrow()
            .vars
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    pub fn get(&self, name: &str) -> Option<Var> {
        self.inner.borrow().vars.get(name).cloned()
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Total number of learnable scalars.
    pub fn num_scalars(&self) -> usize {
        self.inner
            .borrow()
            .vars
            .values()
            .map(|v| v.elem_count())
            .sum()
    }

    /// Overwrite every variable whose name matches `pred` with zeros.
    pub fn zero_where(&self, pred: impl Fn(&str) -> bool) -> Result<usize> {
        let inner = self.inner.borrow();
        let mut n = 0;
        for (name, var) in inner.vars.iter() {
            if pred(name) {
                var.set(&var.zeros_like()?)?;
                n += 1;
            }
        }
        Ok(n)
    }

    /// Replace values from a name → tensor map. Every stored variable must be present
    /// with a matching shape.
    pub fn load_from(&self, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
        let inner = self.inner.borrow();
        for (name, var) in inner.vars.iter() {
            let t = tensors
                .get(name)
                .ok_or_else(|| shape_err!("missing parameter `{name}`"))?;
            if t.dims() != var.dims() {
                return Err(shape_err!(
                    "parameter `{name}` has shape {:?}, expected {:?}",
                    t.dims(),
                    var.dims()
                ));
            }
            var.set(&t.to_dtype(self.dtype)?.to_device(&self.device)?)?;
        }
        Ok(())
    }

    fn create(&self, name: String, dims: &[usize], init: Init) -> Result<Tensor> {
        let mut inner = self.inner.borrow_mut();
        if inner.vars.contains_key(&name) {
            return Err(shape_err!("parameter `{name}` registered twice"));
        }
        let n: usize = dims.iter().product();
        let values: Vec<f64> = match init {
            Init::Const(c) => vec![c; n],
            Init::Uniform(bound) => (0..n)
                .map(|_| inner.rng.random_range(-bound..=bound))
                .collect(),
            Init::Values(v) => {
                if v.len() != n {
                    return Err(shape_err!("`{name}` needs {n} initial values, got {}", v.len()));
                }
                v
            }
        };
        let t = Tensor::from_vec(values, dims, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        inner.vars.insert(name, var);
        Ok(out)
    }
}

#[derive(Debug, Clone)]
pub enum Init {
    Const(f64),
    Uniform(f64),
    Values(Vec<f64>),
}

/// A path prefix inside a [`ParamStore`].
#[derive(Clone)]
pub struct Scope {
    store: ParamStore,
    prefix: String,
}

impl Scope {
    pub fn pp(&self, name: impl AsRef<str>) -> Scope {
        let prefix = if self.prefix.is_empty() {
            name.as_ref().to_string()
        } else {
            format!("{}.{}", self.prefix, name.as_ref())
        };
        Scope {
            store: self.store.clone(),
            prefix,
        }
    }

    pub fn param(&self, name: &str, dims: &[usize], init: Init) -> Result<Tensor> {
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        self.store.create(full, dims, init)
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }
}

/// Cast a parameter to the dtype of the activation it meets. Lets reduced-precision
/// forward passes keep full-precision master weights.
fn match_dtype(p: &Tensor, like: &Tensor) -> candle_core::Result<Tensor> {
    if p.dtype() == like.dtype() {
        Ok(p.clone())
    } else {
        p.to_dtype(like.dtype())
    }
}

/// Stride-1 convolution as one matrix product over gathered taps. The backend's
/// native CPU convolution computes input gradients with a much slower transposed
/// convolution; here the backward pass is a matmul plus slice scatters.
pub fn conv2d_im2col(x: &Tensor, w: &Tensor, padding: usize) -> candle_core::Result<Tensor> {
    let (b, c, h, wd) = x.dims4()?;
    let (co, ci, kh, kw) = w.dims4()?;
    if ci != c {
        candle_core::bail!("conv expects {ci} input channels, got {c}");
    }
    let (oh, ow) = (h + 2 * padding + 1 - kh, wd + 2 * padding + 1 - kw);
    let cols = if kh == 1 && kw == 1 && padding == 0 {
        x.reshape((b, c, h * wd))?
    } else {
        let xp = x.pad_with_zeros(2, padding, padding)?.pad_with_zeros(3, padding, padding)?;
        let mut taps = Vec::with_capacity(kh * kw);
        for dy in 0..kh {
            for dx in 0..kw {
                taps.push(xp.narrow(2, dy, oh)?.narrow(3, dx, ow)?);
            }
        }
        // [B, C, kh·kw, oh, ow] matches the weight layout [Co, C, kh, kw]
        Tensor::stack(&taps, 2)?.reshape((b, c * kh * kw, oh * ow))?
    };
    let wm = w.reshape((co, ci * kh * kw))?;
    wm.broadcast_matmul(&cols)?.reshape((b, co, oh, ow))
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Option<Tensor>,
    padding: usize,
    stride: usize,
}

impl Conv2d {
    /// Square kernel, "same" zero padding for stride 1, PyTorch-style uniform init.
    pub fn new(scope: &Scope, c_in: usize, c_out: usize, k: usize, bias: bool) -> Result<Self> {
        let fan_in = (c_in * k * k) as f64;
        let bound = 1.0 / fan_in.sqrt();
        let weight = scope.param("weight", &[c_out, c_in, k, k], Init::Uniform(bound))?;
        let bias = if bias {
            Some(scope.param("bias", &[c_out], Init::Uniform(bound))?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            padding: k / 2,
            stride: 1,
        })
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> Option<&Tensor> {
        self.bias.as_ref()
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let w = match_dtype(&self.weight, x)?;
        let y = if self.stride == 1 {
            conv2d_im2col(x, &w, self.padding)?
        } else {
            x.conv2d(&w, self.padding, self.stride, 1, 1)?
        };
        match &self.bias {
            Some(b) => {
                let b = match_dtype(b, x)?.reshape((1, b.dim(0)?, 1, 1))?;
                y.broadcast_add(&b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub fn new(scope: &Scope, d_in: usize, d_out: usize) -> Result<Self> {
        let bound = 1.0 / (d_in as f64).sqrt();
        let weight = scope.param("weight", &[d_out, d_in], Init::Uniform(bound))?;
        let bias = scope.param("bias", &[d_out], Init::Uniform(bound))?;
        Ok(Self { weight, bias })
    }

    pub fn with_init(scope: &Scope, d_in: usize, d_out: usize, weight: Init, bias: Init) -> Result<Self> {
        let weight = scope.param("weight", &[d_out, d_in], weight)?;
        let bias = scope.param("bias", &[d_out], bias)?;
        Ok(Self { weight, bias })
    }

    /// `x`: [B, d_in] → [B, d_out]
    pub fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let w = match_dtype(&self.weight, x)?;
        let b = match_dtype(&self.bias, x)?;
        x.matmul(&w.t()?)?.broadcast_add(&b)
    }
}

/// PReLU with a single shared slope (initialized to 0.25).
#[derive(Debug, Clone)]
pub struct PRelu {
    alpha: Tensor,
}

impl PRelu {
    pub fn new(scope: &Scope) -> Result<Self> {
        Ok(Self {
            alpha: scope.param("alpha", &[1], Init::Const(0.25))?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let a = match_dtype(&self.alpha, x)?;
        let neg = x.neg()?.relu()?;
        x.relu()?.broadcast_sub(&neg.broadcast_mul(&a)?)
    }
}
