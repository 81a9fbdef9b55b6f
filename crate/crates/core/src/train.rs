//! Training loop and evaluation runner.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::config::{Precision, TrainConfig};
use crate::data::{
    collate, denormalize_tensor, make_training_patch, normalize, reflect_pad_for_inference, sample_rng,
    ImagePair, PatchSample,
};
use crate::error::{config_err, Error, Result};
use crate::imageio::Planar;
use crate::losses::{total_loss, Supervision};
use crate::metrics::{psnr, MetricsReport, MetricsRow, PsnrMode};
use crate::network::DerainModel;
use crate::optim::{clip_grad_norm, AdamW, AdamWParams};
use crate::schedule::lr_schedule;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    /// Gradient norm before clipping.
    pub grad_norm: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    pub steps: Vec<StepRecord>,
    /// `(epoch, mean PSNR-Y)` on the validation set.
    pub validation: Vec<(usize, f64)>,
    pub checkpoint: Option<PathBuf>,
}

pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: DerainModel,
    opt: AdamW,
    epoch: usize,
    step: usize,
}

impl Trainer {
    /// Parameters are kept in `dtype`; tests use F64, the CLI F32.
    pub fn new(cfg: TrainConfig, dtype: DType, device: &Device) -> Result<Self> {
        cfg.validate()?;
        let model = DerainModel::new(&cfg.model, cfg.seed, dtype, device)?;
        if cfg.zero_init_tails {
            model.zero_residual_tails()?;
        }
        let opt = AdamW::new(AdamWParams {
            weight_decay: cfg.weight_decay,
            ..Default::default()
        });
        Ok(Self {
            cfg,
            model,
            opt,
            epoch: 0,
            step: 0,
        })
    }

    /// Continues from a checkpoint. The architecture in `cfg` must match the saved one;
    /// schedule and logging settings are taken from `cfg`.
    pub fn resume(cfg: TrainConfig, path: &Path, dtype: DType, device: &Device) -> Result<Self> {
        let ck = load_checkpoint(path, device)?;
        if ck.config.model != cfg.model {
            return Err(config_err!(
                "checkpoint {} was trained with a different architecture",
                path.display()
            ));
        }
        let mut t = Self::new(cfg, dtype, device)?;
        t.model.store.load_from(&ck.params)?;
        t.opt.load_state(&ck.optimizer, ck.step, &t.model.store.vars())?;
        t.epoch = ck.epoch;
        t.step = ck.step;
        Ok(t)
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn global_step(&self) -> usize {
        self.step
    }

    pub fn steps_per_epoch(&self, n_pairs: usize) -> usize {
        if self.cfg.steps_per_epoch > 0 {
            self.cfg.steps_per_epoch
        } else {
            n_pairs.div_ceil(self.cfg.batch_size).max(1)
        }
    }

    /// One optimizer step on normalized `[B, 3, H, W]` tensors.
    pub fn train_step(&mut self, x: &Tensor, y: &Tensor, lr: f64) -> Result<StepRecord> {
        let dtype = self.model.store.dtype();
        let (x, y) = match self.cfg.precision {
            Precision::Full => (x.to_dtype(dtype)?, y.to_dtype(dtype)?),
            Precision::Mixed => (x.to_dtype(DType::BF16)?, y.to_dtype(dtype)?),
        };
        let out = self.model.forward(&x)?;
        let outputs: Vec<Tensor> = match self.cfg.supervision {
            Supervision::All => out.supervised().into_iter().cloned().collect(),
            Supervision::StagesOnly => out.intermediates.clone(),
        };
        let outputs: Vec<Tensor> = outputs
            .iter()
            .map(|t| t.to_dtype(dtype))
            .collect::<candle_core::Result<_>>()?;
        let refs: Vec<&Tensor> = outputs.iter().collect();
        let loss = total_loss(&refs, &y, &self.cfg.loss)?;
        let value = loss.total_value()?;
        if !value.is_finite() {
            let snap = self
                .cfg
                .checkpoint_dir
                .join(format!("nonfinite-step{}.safetensors", self.step));
            match self.save(&snap) {
                Ok(()) => warn!("non-finite loss at step {}; state saved to {}", self.step, snap.display()),
                Err(e) => warn!("non-finite loss at step {}; snapshot failed: {e}", self.step),
            }
            return Err(Error::NonFiniteLoss {
                step: self.step,
                value,
            });
        }
        let vars = self.model.store.vars();
        let mut grads = loss.total.backward()?;
        let grad_norm = clip_grad_norm(&vars, &mut grads, self.cfg.clip_norm)?;
        self.opt.step(&vars, &grads, lr)?;
        let rec = StepRecord {
            epoch: self.epoch,
            step: self.step,
            lr,
            loss: value,
            grad_norm,
        };
        self.step += 1;
        Ok(rec)
    }

    /// Patches for one step; reproducible from (seed, epoch, position in epoch).
    pub fn batch_for(&self, pairs: &[ImagePair], order: &[usize], step_in_epoch: usize) -> Result<Vec<PatchSample>> {
        let b = self.cfg.batch_size;
        (0..b)
            .map(|j| {
                let pos = step_in_epoch * b + j;
                let pair = &pairs[order[pos % order.len()]];
                if self.cfg.augment {
                    let mut rng = sample_rng(self.cfg.seed, self.epoch, pos);
                    make_training_patch(pair, self.cfg.patch_size, &mut rng)
                } else {
                    let p = self.cfg.patch_size;
                    Ok(PatchSample {
                        input: normalize(&pair.input.crop(0, 0, p, p)?),
                        target: normalize(&pair.gt.crop(0, 0, p, p)?),
                    })
                }
            })
            .collect()
    }

    fn epoch_order(&self, n: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed ^ 0x5eed_0000_0000 ^ self.epoch as u64);
        order.shuffle(&mut rng);
        order
    }

    /// Runs the remaining epochs. Checkpoints go to `cfg.checkpoint_dir`.
    pub fn fit(&mut self, pairs: &[ImagePair], val: Option<&[ImagePair]>) -> Result<TrainReport> {
        if pairs.is_empty() {
            return Err(Error::Data("empty training set".into()));
        }
        let spe = self.steps_per_epoch(pairs.len());
        let device = self.model.store.device().clone();
        let mut report = TrainReport::default();
        while self.epoch < self.cfg.epochs {
            let order = self.epoch_order(pairs.len());
            let first = self.step - self.epoch * spe;
            for s in first..spe {
                let batch = self.batch_for(pairs, &order, s)?;
                let (x, y) = collate(&batch, self.model.store.dtype(), &device)?;
                let lr = lr_schedule(self.step, spe, &self.cfg);
                let rec = self.train_step(&x, &y, lr)?;
                if self.cfg.log_every > 0 && rec.step % self.cfg.log_every == 0 {
                    info!(
                        "epoch {} step {} lr {:.3e} loss {:.5} grad {:.3}",
                        rec.epoch, rec.step, rec.lr, rec.loss, rec.grad_norm
                    );
                }
                report.steps.push(rec);
            }
            self.epoch += 1;
            if let Some(val) = val {
                let v = validation_psnr_y(&self.model, val)?;
                info!("epoch {} validation PSNR-Y {:.3} dB", self.epoch, v);
                report.validation.push((self.epoch, v));
            }
            let every = self.cfg.checkpoint_every;
            if every > 0 && self.epoch % every == 0 && self.epoch < self.cfg.epochs {
                self.save(&self.cfg.checkpoint_dir.join(format!("epoch{:04}.safetensors", self.epoch)))?;
            }
        }
        let last = self.cfg.checkpoint_dir.join("last.safetensors");
        self.save(&last)?;
        report.checkpoint = Some(last);
        Ok(report)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let params: BTreeMap<String, Tensor> = self
            .model
            .store
            .vars()
            .into_iter()
            .map(|(k, v)| (k, v.as_tensor().clone()))
            .collect();
        save_checkpoint(
            path,
            &self.cfg,
            self.epoch,
            self.step,
            &params,
            &self.opt.state_tensors()?,
        )
    }
}

/// Restores one [0, 1] image: normalize, pad, forward, crop, de-normalize.
pub fn restore(model: &DerainModel, input: &Planar) -> Result<Planar> {
    let dtype = model.store.dtype();
    let x = normalize(input).to_tensor(dtype, model.store.device())?;
    let (padded, crop) = reflect_pad_for_inference(&x, model.config().size_multiple())?;
    let out = model.forward(&padded)?;
    let y = denormalize_tensor(&crop.apply(&out.restored)?)?;
    Planar::from_tensor(&y)
}

/// Per-image PSNR-Y / PSNR-RGB / SSIM of the model's restorations.
pub fn evaluate(model: &DerainModel, pairs: &[ImagePair]) -> Result<MetricsReport> {
    if pairs.is_empty() {
        return Err(Error::Data("empty evaluation set".into()));
    }
    let mut report = MetricsReport::default();
    for p in pairs {
        let pred = restore(model, &p.input)?;
        report.push(MetricsRow::compute(p.id.clone(), &pred, &p.gt)?);
    }
    Ok(report)
}

/// Metrics of the degraded inputs themselves.
pub fn input_baseline(pairs: &[ImagePair]) -> Result<MetricsReport> {
    let mut report = MetricsReport::default();
    for p in pairs {
        report.push(MetricsRow::compute(p.id.clone(), &p.input, &p.gt)?);
    }
    Ok(report)
}

pub fn validation_psnr_y(model: &DerainModel, pairs: &[ImagePair]) -> Result<f64> {
    let mut acc = 0.0;
    for p in pairs {
        acc += psnr(&restore(model, &p.input)?, &p.gt, PsnrMode::Y)?;
    }
    Ok(acc / pairs.len().max(1) as f64)
}

/// Rebuilds the model stored in a loaded checkpoint.
pub fn model_from_checkpoint(ck: &Checkpoint, dtype: DType, device: &Device) -> Result<DerainModel> {
    let model = DerainModel::new(&ck.config.model, ck.config.seed, dtype, device)?;
    model.store.load_from(&ck.params)?;
    Ok(model)
}

/// Rebuilds the model stored in a checkpoint file.
pub fn load_model(path: &Path, dtype: DType, device: &Device) -> Result<(DerainModel, TrainConfig)> {
    let ck = load_checkpoint(path, device)?;
    Ok((model_from_checkpoint(&ck, dtype, device)?, ck.config))
}

pub fn evaluate_checkpoint(path: &Path, pairs: &[ImagePair], device: &Device) -> Result<MetricsReport> {
    let (model, _) = load_model(path, DType::F32, device)?;
    evaluate(&model, pairs)
}
