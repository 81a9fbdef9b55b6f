use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};

/// Which PSF the decoders are conditioned on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PsfMode {
    /// No PSF head; decoders use plain channel attention blocks.
    Off,
    /// The head predicts a single kernel channel.
    Single,
    /// The head predicts `psf_channels` kernels.
    Full,
}

impl FromStr for PsfMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "off" => Ok(Self::Off),
            "1" | "single" => Ok(Self::Single),
            "full" | "kc" => Ok(Self::Full),
            _ => Err(config_err!("unknown PSF mode `{s}` (expected off, 1 or full)")),
        }
    }
}

impl fmt::Display for PsfMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Off => "off",
            Self::Single => "1",
            Self::Full => "full",
        })
    }
}

/// A stage of the pipeline: the first stage, the `i`-th middle stage (1-based), or
/// the final full-resolution stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StageId {
    In,
    Mid(usize),
    Or,
}

/// A fusion point inside a stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Site {
    /// Shallow features fused with the previous stage's `H`.
    Shallow,
    /// Encoder levels fused with the previous stage's cross-stage features.
    Encoder,
    /// Cross-stage feature fusion producing this stage's outputs.
    Csff,
    /// Side information injected into the full-resolution blocks.
    Side,
}

/// A fusion pathway that can be switched off for the pathway-disable study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Pathway {
    pub stage: StageId,
    pub site: Site,
}

impl FromStr for Pathway {
    type Err = Error;

    /// `in:csff`, `mid2:encoder`, `ors:shallow`, `ors:side`, …
    fn from_str(s: &str) -> Result<Self> {
        let (stage, site) = s
            .split_once(':')
            .ok_or_else(|| config_err!("pathway `{s}` must look like <stage>:<site>"))?;
        let stage = match stage {
            "in" => StageId::In,
            "ors" | "or" => StageId::Or,
            m if m.starts_with("mid") => {
                let i: usize = m[3..]
                    .parse()
                    .map_err(|_| config_err!("bad middle stage index in `{s}`"))?;
                if i == 0 {
                    return Err(config_err!("middle stages are numbered from 1"));
                }
                StageId::Mid(i)
            }
            _ => return Err(config_err!("unknown stage `{stage}`")),
        };
        let site = match site {
            "shallow" => Site::Shallow,
            "encoder" => Site::Encoder,
            "csff" => Site::Csff,
            "side" => Site::Side,
            _ => return Err(config_err!("unknown fusion site `{site}`")),
        };
        Ok(Self { stage, site })
    }
}

impl fmt::Display for Pathway {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.stage {
            StageId::In => write!(f, "in")?,
            StageId::Mid(i) => write!(f, "mid{i}")?,
            StageId::Or => write!(f, "ors")?,
        }
        let site = match self.site {
            Site::Shallow => "shallow",
            Site::Encoder => "encoder",
            Site::Csff => "csff",
            Site::Side => "side",
        };
        write!(f, ":{site}")
    }
}

/// Architectural hyperparameters and ablation switches.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Number of middle stages.
    pub tau: usize,
    /// Kernel count of the predicted PSF.
    pub psf_channels: usize,
    /// Spatial size of each predicted kernel.
    pub psf_size: usize,
    pub n_feat: usize,
    pub scale_unet: usize,
    pub scale_ors: usize,
    /// CABs per full-resolution block.
    pub num_cab: usize,
    /// Blocks per encoder/decoder level.
    pub level_blocks: usize,
    pub head_sizes: Vec<usize>,
    pub use_gate: bool,
    pub use_h_updates: bool,
    pub use_enhanced_csff: bool,
    pub psf_mode: PsfMode,
    pub disabled_pathways: Vec<Pathway>,
}

/// Number of encoder/decoder scales.
pub const UNET_DEPTH: usize = 3;
/// Number of blocks in the full-resolution stage.
pub const NUM_ORB: usize = 3;

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            tau: 3,
            psf_channels: 40,
            psf_size: 7,
            n_feat: 40,
            scale_unet: 20,
            scale_ors: 16,
            num_cab: 8,
            level_blocks: 2,
            head_sizes: vec![3, 5, 7],
            use_gate: true,
            use_h_updates: true,
            use_enhanced_csff: true,
            psf_mode: PsfMode::Full,
            disabled_pathways: Vec::new(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.psf_channels < 1 {
            return Err(config_err!("psf_channels must be ≥ 1"));
        }
        if self.psf_size % 2 == 0 || self.psf_size == 0 {
            return Err(config_err!("psf_size must be odd, got {}", self.psf_size));
        }
        if self.n_feat == 0 {
            return Err(config_err!("n_feat must be > 0"));
        }
        if self.level_blocks == 0 {
            return Err(config_err!("level_blocks must be > 0"));
        }
        if self.head_sizes.is_empty() {
            return Err(config_err!("head_sizes must not be empty"));
        }
        if self.head_sizes.len() > UNET_DEPTH {
            return Err(config_err!(
                "at most {UNET_DEPTH} PSF heads (one per encoder level), got {}",
                self.head_sizes.len()
            ));
        }
        if let Some(k) = self.head_sizes.iter().find(|k| **k % 2 == 0) {
            return Err(config_err!("head size {k} must be odd"));
        }
        for p in &self.disabled_pathways {
            if let StageId::Mid(i) = p.stage {
                if i > self.tau {
                    return Err(config_err!("pathway {p} refers to a missing middle stage (tau = {})", self.tau));
                }
            }
            let valid = matches!(
                (p.stage, p.site),
                (StageId::In, Site::Csff)
                    | (StageId::Mid(_), Site::Shallow | Site::Encoder | Site::Csff)
                    | (StageId::Or, Site::Shallow | Site::Side)
            );
            if !valid {
                return Err(config_err!("stage has no fusion site for pathway {p}"));
            }
        }
        Ok(())
    }

    /// Channel widths of the three encoder scales.
    pub fn unet_widths(&self) -> [usize; UNET_DEPTH] {
        [
            self.n_feat,
            self.n_feat + self.scale_unet,
            self.n_feat + 2 * self.scale_unet,
        ]
    }

    pub fn ors_width(&self) -> usize {
        self.n_feat + self.scale_ors
    }

    /// Kernel count the head actually predicts.
    pub fn effective_psf_channels(&self) -> Option<usize> {
        match self.psf_mode {
            PsfMode::Off => None,
            PsfMode::Single => Some(1),
            PsfMode::Full => Some(self.psf_channels),
        }
    }

    pub fn is_disabled(&self, stage: StageId, site: Site) -> bool {
        self.disabled_pathways.contains(&Pathway { stage, site })
    }

    /// Spatial sizes must be divisible by this.
    pub fn size_multiple(&self) -> usize {
        1 << (UNET_DEPTH - 1)
    }
}
