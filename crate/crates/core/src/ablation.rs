//! Ablation variants: the incremental component study, the stage-count sweep and
//! single switches applied to a base configuration.

use std::fmt;
use std::str::FromStr;

use candle_core::{DType, Device, Tensor};
use log::info;

use crate::config::TrainConfig;
use crate::data::ImagePair;
use crate::error::{config_err, Error, Result};
use crate::metrics::MetricsRow;
use crate::network::{DerainModel, ModelConfig, Pathway, PsfMode};
use crate::train::{evaluate, Trainer};

/// One `--toggle` argument.
#[derive(Debug, Clone, PartialEq)]
pub enum Toggle {
    /// The incremental component ladder, from the plain multi-stage baseline up to
    /// the full model.
    Components,
    /// `tau ∈ {0, 1, 2, 3}`.
    TauSweep,
    /// Turns the named switch off.
    NoGate,
    NoHUpdates,
    NoEnhancedCsff,
    PsfMode(PsfMode),
    Disable(Pathway),
}

impl FromStr for Toggle {
    type Err = Error;

    /// `components`, `tau_sweep`, `use_gate`, `use_h_updates`, `use_enhanced_csff`,
    /// `psf_channels_mode=off|1|kc`, `disable_pathway=<stage>:<site>`.
    fn from_str(s: &str) -> Result<Self> {
        if let Some((k, v)) = s.split_once('=') {
            return match k {
                "psf_channels_mode" => Ok(Self::PsfMode(v.parse()?)),
                "disable_pathway" => Ok(Self::Disable(v.parse()?)),
                _ => Err(config_err!("unknown toggle `{s}`")),
            };
        }
        match s {
            "components" => Ok(Self::Components),
            "tau_sweep" => Ok(Self::TauSweep),
            "use_gate" => Ok(Self::NoGate),
            "use_h_updates" => Ok(Self::NoHUpdates),
            "use_enhanced_csff" => Ok(Self::NoEnhancedCsff),
            _ => Err(config_err!("unknown toggle `{s}`")),
        }
    }
}

impl fmt::Display for Toggle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Components => f.write_str("components"),
            Self::TauSweep => f.write_str("tau_sweep"),
            Self::NoGate => f.write_str("use_gate"),
            Self::NoHUpdates => f.write_str("use_h_updates"),
            Self::NoEnhancedCsff => f.write_str("use_enhanced_csff"),
            Self::PsfMode(m) => write!(f, "psf_channels_mode={m}"),
            Self::Disable(p) => write!(f, "disable_pathway={p}"),
        }
    }
}

/// The incremental study, each row adding one component to the previous.
pub fn component_variants(base: &ModelConfig) -> Vec<(String, ModelConfig)> {
    let mut c = base.clone();
    c.use_gate = false;
    c.use_h_updates = false;
    c.use_enhanced_csff = false;
    c.psf_mode = PsfMode::Off;
    let mut rows = vec![("baseline".to_string(), c.clone())];
    c.use_gate = true;
    rows.push(("+ gate".into(), c.clone()));
    c.use_h_updates = true;
    rows.push(("+ H inter-stage updates".into(), c.clone()));
    c.use_enhanced_csff = true;
    rows.push(("+ enhanced CSFF".into(), c.clone()));
    c.psf_mode = PsfMode::Single;
    rows.push(("+ 1-channel PSF".into(), c.clone()));
    c.psf_mode = PsfMode::Full;
    rows.push((format!("+ {}-channel PSF", c.psf_channels), c));
    rows
}

/// Expands toggles into named model variants; the base configuration comes first.
pub fn expand_toggles(base: &ModelConfig, toggles: &[Toggle]) -> Result<Vec<(String, ModelConfig)>> {
    let mut out = vec![("base".to_string(), base.clone())];
    for t in toggles {
        match t {
            Toggle::Components => out.extend(component_variants(base)),
            Toggle::TauSweep => out.extend((0..=3).map(|tau| {
                let mut c = base.clone();
                c.tau = tau;
                c.disabled_pathways.retain(|p| match p.stage {
                    crate::network::StageId::Mid(i) => i <= tau,
                    _ => true,
                });
                (format!("tau={tau}"), c)
            })),
            _ => {
                let mut c = base.clone();
                match t {
                    Toggle::NoGate => c.use_gate = false,
                    Toggle::NoHUpdates => c.use_h_updates = false,
                    Toggle::NoEnhancedCsff => c.use_enhanced_csff = false,
                    Toggle::PsfMode(m) => c.psf_mode = *m,
                    Toggle::Disable(p) => c.disabled_pathways.push(*p),
                    Toggle::Components | Toggle::TauSweep => unreachable!(),
                }
                c.validate()?;
                out.push((t.to_string(), c));
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub name: String,
    pub params: usize,
    pub metrics: Option<MetricsRow>,
}

#[derive(Debug, Clone, Default)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl fmt::Display for AblationTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<36} {:>12} {:>10} {:>10} {:>8}", "variant", "params", "PSNR-Y", "PSNR-RGB", "SSIM")?;
        for r in &self.rows {
            match &r.metrics {
                Some(m) => writeln!(
                    f,
                    "{:<36} {:>12} {:>10.3} {:>10.3} {:>8.4}",
                    r.name, r.params, m.psnr_y, m.psnr_rgb, m.ssim_rgb
                )?,
                None => writeln!(f, "{:<36} {:>12} {:>10} {:>10} {:>8}", r.name, r.params, "-", "-", "-")?,
            }
        }
        Ok(())
    }
}

/// Side length of the input used to check that a variant runs end to end.
pub const SMOKE_SIZE: usize = 16;

/// Builds every variant, runs a forward pass and counts parameters. With `data`
/// (training pairs, evaluation pairs) each variant is also trained with `cfg`'s
/// schedule and evaluated.
pub fn run_ablation(
    cfg: &TrainConfig,
    toggles: &[Toggle],
    data: Option<(&[ImagePair], &[ImagePair])>,
    device: &Device,
) -> Result<AblationTable> {
    let mut table = AblationTable::default();
    for (name, model_cfg) in expand_toggles(&cfg.model, toggles)? {
        let row = match data {
            None => {
                let model = DerainModel::new(&model_cfg, cfg.seed, DType::F32, device)?;
                let x = Tensor::zeros((1, 3, SMOKE_SIZE, SMOKE_SIZE), DType::F32, device)?;
                model.forward(&x)?;
                AblationRow {
                    name,
                    params: model.num_parameters(),
                    metrics: None,
                }
            }
            Some((train, eval)) => {
                let mut c = cfg.clone();
                c.model = model_cfg;
                c.checkpoint_dir = cfg.checkpoint_dir.join(sanitize(&name));
                let mut t = Trainer::new(c, DType::F32, device)?;
                t.fit(train, None)?;
                let m = evaluate(&t.model, eval)?.mean();
                AblationRow {
                    name,
                    params: t.model.num_parameters(),
                    metrics: Some(m),
                }
            }
        };
        info!("{}: {} parameters", row.name, row.params);
        table.rows.push(row);
    }
    Ok(table)
}

fn sanitize(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() { c } else { '_' })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_toggles() {
        for s in [
            "components",
            "tau_sweep",
            "use_gate",
            "use_h_updates",
            "use_enhanced_csff",
            "psf_channels_mode=off",
            "psf_channels_mode=1",
            "disable_pathway=ors:shallow",
        ] {
            let t: Toggle = s.parse().unwrap();
            assert_eq!(t.to_string(), s);
        }
        assert!("use_magic".parse::<Toggle>().is_err());
        assert!("psf_channels_mode=7".parse::<Toggle>().is_err());
        assert!("bogus=1".parse::<Toggle>().is_err());
    }

    #[test]
    fn component_ladder_is_incremental() {
        let rows = component_variants(&ModelConfig::default());
        assert_eq!(rows.len(), 6);
        assert_eq!(rows.last().unwrap().1, ModelConfig::default());
        assert!(!rows[0].1.use_gate && rows[1].1.use_gate);
    }

    #[test]
    fn bad_pathway_for_tau_is_rejected() {
        let mut base = ModelConfig::default();
        base.tau = 1;
        let t = vec![Toggle::Disable("mid3:csff".parse().unwrap())];
        assert!(expand_toggles(&base, &t).is_err());
    }
}
