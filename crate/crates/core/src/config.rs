//! Training configuration and its flat `key = value` file form.

use std::path::{Path, PathBuf};

use candle_core::Device;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::losses::{LossWeights, Supervision};
use crate::network::{ModelConfig, Pathway, PsfMode};

/// Environment variable naming the compute device (`cpu`, `cuda`, `cuda:N`, `metal`).
pub const DEVICE_ENV: &str = "PSFDERAIN_DEVICE";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    Full,
    /// Forward and backward in bfloat16 against full-precision master weights.
    Mixed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr_init: f64,
    pub lr_final: f64,
    pub warmup_epochs: usize,
    pub epochs: usize,
    /// Optimizer steps per epoch; 0 means one pass over the dataset.
    pub steps_per_epoch: usize,
    pub clip_norm: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub patch_size: usize,
    pub augment: bool,
    pub seed: u64,
    pub precision: Precision,
    pub loss: LossWeights,
    pub supervision: Supervision,
    /// Start from identity mappings by zeroing every residual tail.
    pub zero_init_tails: bool,
    pub checkpoint_dir: PathBuf,
    /// Checkpoint period in epochs; 0 keeps only the final checkpoint.
    pub checkpoint_every: usize,
    /// Optional `input/` + `gt/` validation root.
    pub val_data: Option<PathBuf>,
    pub log_every: usize,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_init: 1e-4,
            lr_final: 1e-6,
            warmup_epochs: 3,
            epochs: 100,
            steps_per_epoch: 0,
            clip_norm: 2.0,
            weight_decay: 1e-4,
            batch_size: 4,
            patch_size: 128,
            augment: true,
            seed: 0,
            precision: Precision::Full,
            loss: LossWeights::default(),
            supervision: Supervision::All,
            zero_init_tails: false,
            checkpoint_dir: PathBuf::from("checkpoints"),
            checkpoint_every: 10,
            val_data: None,
            log_every: 10,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_init > 0.0) || !(self.lr_final >= 0.0) || self.lr_final > self.lr_init {
            return Err(config_err!(
                "need 0 ≤ lr_final ≤ lr_init with lr_init > 0, got {} and {}",
                self.lr_final,
                self.lr_init
            ));
        }
        if self.warmup_epochs >= self.epochs {
            return Err(config_err!(
                "warmup_epochs ({}) must be smaller than epochs ({})",
                self.warmup_epochs,
                self.epochs
            ));
        }
        if !(self.clip_norm > 0.0) {
            return Err(config_err!("clip_norm must be positive"));
        }
        if self.weight_decay < 0.0 {
            return Err(config_err!("weight_decay must be ≥ 0"));
        }
        if self.batch_size == 0 || self.patch_size == 0 {
            return Err(config_err!("batch_size and patch_size must be positive"));
        }
        if self.patch_size % self.model.size_multiple() != 0 {
            return Err(config_err!(
                "patch_size must be a multiple of {}",
                self.model.size_multiple()
            ));
        }
        let l = &self.loss;
        if l.alpha1 < 0.0 || l.alpha2 < 0.0 || l.charbonnier_eps < 0.0 {
            return Err(config_err!("loss weights must be ≥ 0"));
        }
        self.model.validate()
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_err!("{}: {e}", path.display()))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => config_err!("{}: {m}", path.display()),
            other => other,
        })
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let file: ConfigFile = toml::from_str(text).map_err(|e| config_err!("{}", e.message()))?;
        let cfg = file.into_config()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(&ConfigFile::from_config(self)).expect("config serializes")
    }
}

/// On-disk form: every field optional, no nesting, unknown keys rejected.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ConfigFile {
    lr_init: f64,
    lr_final: f64,
    warmup_epochs: usize,
    epochs: usize,
    steps_per_epoch: usize,
    clip_norm: f64,
    weight_decay: f64,
    batch_size: usize,
    patch_size: usize,
    augment: bool,
    seed: u64,
    precision: Precision,
    alpha1: f64,
    alpha2: f64,
    charbonnier_eps: f64,
    supervision: Supervision,
    zero_init_tails: bool,
    checkpoint_dir: PathBuf,
    checkpoint_every: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    val_data: Option<PathBuf>,
    log_every: usize,

    tau: usize,
    psf_channels: usize,
    psf_size: usize,
    n_feat: usize,
    scale_unet: usize,
    scale_ors: usize,
    num_cab: usize,
    level_blocks: usize,
    head_sizes: Vec<usize>,
    use_gate: bool,
    use_h_updates: bool,
    use_enhanced_csff: bool,
    psf_mode: String,
    disabled_pathways: Vec<String>,
}

impl Default for ConfigFile {
    fn default() -> Self {
        Self::from_config(&TrainConfig::default())
    }
}

impl ConfigFile {
    fn from_config(c: &TrainConfig) -> Self {
        let m = &c.model;
        Self {
            lr_init: c.lr_init,
            lr_final: c.lr_final,
            warmup_epochs: c.warmup_epochs,
            epochs: c.epochs,
            steps_per_epoch: c.steps_per_epoch,
            clip_norm: c.clip_norm,
            weight_decay: c.weight_decay,
            batch_size: c.batch_size,
            patch_size: c.patch_size,
            augment: c.augment,
            seed: c.seed,
            precision: c.precision,
            alpha1: c.loss.alpha1,
            alpha2: c.loss.alpha2,
            charbonnier_eps: c.loss.charbonnier_eps,
            supervision: c.supervision,
            zero_init_tails: c.zero_init_tails,
            checkpoint_dir: c.checkpoint_dir.clone(),
            checkpoint_every: c.checkpoint_every,
            val_data: c.val_data.clone(),
            log_every: c.log_every,
            tau: m.tau,
            psf_channels: m.psf_channels,
            psf_size: m.psf_size,
            n_feat: m.n_feat,
            scale_unet: m.scale_unet,
            scale_ors: m.scale_ors,
            num_cab: m.num_cab,
            level_blocks: m.level_blocks,
            head_sizes: m.head_sizes.clone(),
            use_gate: m.use_gate,
            use_h_updates: m.use_h_updates,
            use_enhanced_csff: m.use_enhanced_csff,
            psf_mode: m.psf_mode.to_string(),
            disabled_pathways: m.disabled_pathways.iter().map(|p| p.to_string()).collect(),
        }
    }

    fn into_config(self) -> Result<TrainConfig> {
        let disabled_pathways = self
            .disabled_pathways
            .iter()
            .map(|s| s.parse::<Pathway>())
            .collect::<Result<Vec<_>>>()?;
        Ok(TrainConfig {
            lr_init: self.lr_init,
            lr_final: self.lr_final,
            warmup_epochs: self.warmup_epochs,
            epochs: self.epochs,
            steps_per_epoch: self.steps_per_epoch,
            clip_norm: self.clip_norm,
            weight_decay: self.weight_decay,
            batch_size: self.batch_size,
            patch_size: self.patch_size,
            augment: self.augment,
            seed: self.seed,
            precision: self.precision,
            loss: LossWeights {
                alpha1: self.alpha1,
                alpha2: self.alpha2,
                charbonnier_eps: self.charbonnier_eps,
            },
            supervision: self.supervision,
            zero_init_tails: self.zero_init_tails,
            checkpoint_dir: self.checkpoint_dir,
            checkpoint_every: self.checkpoint_every,
            val_data: self.val_data,
            log_every: self.log_every,
            model: ModelConfig {
                tau: self.tau,
                psf_channels: self.psf_channels,
                psf_size: self.psf_size,
                n_feat: self.n_feat,
                scale_unet: self.scale_unet,
                scale_ors: self.scale_ors,
                num_cab: self.num_cab,
                level_blocks: self.level_blocks,
                head_sizes: self.head_sizes,
                use_gate: self.use_gate,
                use_h_updates: self.use_h_updates,
                use_enhanced_csff: self.use_enhanced_csff,
                psf_mode: self.psf_mode.parse::<PsfMode>()?,
                disabled_pathways,
            },
        })
    }
}

/// Device named by [`DEVICE_ENV`], CPU when unset.
pub fn device_from_env() -> Result<Device> {
    match std::env::var(DEVICE_ENV) {
        Ok(s) => parse_device(&s),
        Err(_) => Ok(Device::Cpu),
    }
}

pub fn parse_device(s: &str) -> Result<Device> {
    let s = s.trim().to_ascii_lowercase();
    match s.as_str() {
        "" | "cpu" => Ok(Device::Cpu),
        "metal" => Ok(Device::new_metal(0)?),
        _ => {
            let ordinal = match s.strip_prefix("cuda") {
                Some("") => 0,
                Some(rest) => rest
                    .strip_prefix(':')
                    .and_then(|n| n.parse().ok())
                    .ok_or_else(|| config_err!("bad device `{s}` in {DEVICE_ENV}"))?,
                None => return Err(config_err!("unknown device `{s}` in {DEVICE_ENV}")),
            };
            Ok(Device::new_cuda(ordinal)?)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let c = TrainConfig::from_toml("").unwrap();
        assert_eq!(c, TrainConfig::default());
        assert_eq!((c.lr_init, c.lr_final, c.warmup_epochs, c.clip_norm), (1e-4, 1e-6, 3, 2.0));
        assert_eq!(c.weight_decay, 1e-4);
        assert_eq!(c.batch_size, 4);
    }

    #[test]
    fn round_trip() {
        let mut c = TrainConfig::default();
        c.model.tau = 1;
        c.model.psf_mode = PsfMode::Single;
        c.model.disabled_pathways = vec!["ors:shallow".parse().unwrap()];
        c.val_data = Some("val".into());
        c.precision = Precision::Mixed;
        c.supervision = Supervision::StagesOnly;
        let back = TrainConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn unknown_keys_rejected() {
        let e = TrainConfig::from_toml("tau = 1\nlearning_rate = 0.1\n").unwrap_err();
        assert!(e.to_string().contains("learning_rate"), "{e}");
    }

    #[test]
    fn invariants_checked() {
        assert!(TrainConfig::from_toml("lr_final = 1.0").is_err());
        assert!(TrainConfig::from_toml("epochs = 3").is_err());
        assert!(TrainConfig::from_toml("clip_norm = 0.0").is_err());
        assert!(TrainConfig::from_toml("psf_mode = \"two\"").is_err());
        assert!(TrainConfig::from_toml("patch_size = 30").is_err());
        assert!(TrainConfig::from_toml("tau = 2\ndisabled_pathways = [\"mid2:csff\", \"in:csff\"]").is_ok());
    }

    #[test]
    fn devices() {
        assert!(parse_device("cpu").unwrap().is_cpu());
        assert!(parse_device("tpu").is_err());
        assert!(parse_device("cuda:x").is_err());
    }
}
