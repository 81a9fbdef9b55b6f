//! AdamW with decoupled weight decay and global-norm gradient clipping.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::{DType, Tensor, Var};

use crate::error::{shape_err, Result};

/// Global L2 norm over all present gradients.
pub fn grad_norm(vars: &[(String, Var)], grads: &GradStore) -> Result<f64> {
    let mut sq = 0.0;
    for (_, v) in vars {
        if let Some(g) = grads.get(v.as_tensor()) {
            sq += g.to_dtype(DType::F64)?.sqr()?.sum_all()?.to_scalar::<f64>()?;
        }
    }
    Ok(sq.sqrt())
}

/// Rescales gradients so their global norm is at most `max_norm`. Returns the norm
/// before clipping.
pub fn clip_grad_norm(vars: &[(String, Var)], grads: &mut GradStore, max_norm: f64) -> Result<f64> {
    let norm = grad_norm(vars, grads)?;
    if norm > max_norm && norm.is_finite() {
        let scale = max_norm / norm;
        for (_, v) in vars {
            if let Some(g) = grads.remove(v.as_tensor()) {
                grads.insert(v.as_tensor(), (g.detach() * scale)?);
            }
        }
    }
    Ok(norm)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWParams {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// Moment estimates are kept per parameter name so they can be checkpointed.
pub struct AdamW {
    pub params: AdamWParams,
    step: usize,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl AdamW {
    pub fn new(params: AdamWParams) -> Self {
        Self {
            params,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    pub fn step(&mut self, vars: &[(String, Var)], grads: &GradStore, lr: f64) -> Result<()> {
        self.step += 1;
        let p = self.params;
        let bc1 = 1.0 - p.beta1.powi(self.step as i32);
        let bc2 = 1.0 - p.beta2.powi(self.step as i32);
        for (name, var) in vars {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let g = g.detach().to_dtype(var.dtype())?;
            let m = match self.m.get(name) {
                Some(m) => ((m * p.beta1)? + (&g * (1.0 - p.beta1))?)?,
                None => (&g * (1.0 - p.beta1))?,
            };
            let v = match self.v.get(name) {
                Some(v) => ((v * p.beta2)? + (g.sqr()? * (1.0 - p.beta2))?)?,
                None => (g.sqr()? * (1.0 - p.beta2))?,
            };
            let update = ((&m / bc1)? / ((&v / bc2)?.sqrt()? + p.eps)?)?;
            let theta = var.as_tensor();
            let decayed = (theta * (1.0 - lr * p.weight_decay))?;
            var.set(&(decayed - (update * lr)?)?)?;
            self.m.insert(name.clone(), m);
            self.v.insert(name.clone(), v);
        }
        Ok(())
    }

    /// Moments keyed `adam.m.<name>` and `adam.v.<name>`.
    pub fn state_tensors(&self) -> Result<BTreeMap<String, Tensor>> {
        let mut out = BTreeMap::new();
        for (k, t) in &self.m {
            out.insert(format!("adam.m.{k}"), t.clone());
        }
        for (k, t) in &self.v {
            out.insert(format!("adam.v.{k}"), t.clone());
        }
        Ok(out)
    }

    pub fn load_state(&mut self, tensors: &BTreeMap<String, Tensor>, step: usize, vars: &[(String, Var)]) -> Result<()> {
        self.m.clear();
        self.v.clear();
        for (name, var) in vars {
            for (prefix, map) in [("adam.m.", &mut self.m), ("adam.v.", &mut self.v)] {
                if let Some(t) = tensors.get(&format!("{prefix}{name}")) {
                    if t.dims() != var.dims() {
                        return Err(shape_err!("optimizer state for `{name}` has shape {:?}", t.dims()));
                    }
                    map.insert(name.clone(), t.to_dtype(var.dtype())?.to_device(var.device())?);
                }
            }
        }
        self.step = step;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn setup() -> (Vec<(String, Var)>, GradStore) {
        let dev = Device::Cpu;
        let a = Var::new(&[1.0f64, 2.0], &dev).unwrap();
        let b = Var::new(&[3.0f64], &dev).unwrap();
        // gradient w.r.t. a is (6, 8), norm 10; b does not reach the loss
        let loss = ((a.as_tensor() * 6.0).unwrap().sum_all().unwrap()
            + (a.as_tensor().narrow(0, 1, 1).unwrap() * 2.0).unwrap().sum_all().unwrap())
        .unwrap();
        let grads = loss.backward().unwrap();
        (vec![("a".into(), a), ("b".into(), b)], grads)
    }

    #[test]
    fn clip_to_two() {
        let (vars, mut grads) = setup();
        let before = clip_grad_norm(&vars, &mut grads, 2.0).unwrap();
        assert!((before - 10.0).abs() < 1e-12);
        let after = grad_norm(&vars, &grads).unwrap();
        assert!((after - 2.0).abs() < 1e-12);
        // already small: untouched
        let again = clip_grad_norm(&vars, &mut grads, 2.0).unwrap();
        assert!((again - after).abs() < 1e-15);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let (vars, grads) = setup();
        let mut opt = AdamW::new(AdamWParams {
            weight_decay: 0.0,
            ..Default::default()
        });
        opt.step(&vars, &grads, 0.1).unwrap();
        let a = vars[0].1.as_tensor().to_vec1::<f64>().unwrap();
        // bias-corrected first step is lr·sign(g)
        assert!((a[0] - 0.9).abs() < 1e-6);
        assert!((a[1] - 1.9).abs() < 1e-6);
        assert_eq!(opt.step_count(), 1);
        // b got no gradient, so it is untouched and has no moments
        assert_eq!(vars[1].1.as_tensor().to_vec1::<f64>().unwrap(), vec![3.0]);
        assert_eq!(opt.state_tensors().unwrap().len(), 2);
    }

    #[test]
    fn decay_is_decoupled() {
        let dev = Device::Cpu;
        let a = Var::new(&[2.0f64], &dev).unwrap();
        let loss = a.as_tensor().sum_all().unwrap();
        let grads = loss.backward().unwrap();
        let vars = vec![("a".to_string(), a)];
        let mut opt = AdamW::new(AdamWParams {
            weight_decay: 0.5,
            ..Default::default()
        });
        opt.step(&vars, &grads, 0.1).unwrap();
        let v = vars[0].1.as_tensor().to_vec1::<f64>().unwrap()[0];
        // decay shrinks θ by lr·λ independently of the unit Adam step
        assert!((v - (2.0 * (1.0 - 0.05) - 0.1)).abs() < 1e-6);
    }
}
