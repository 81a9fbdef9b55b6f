//! Checkpoints: one safetensors file holding parameters, optimizer moments and a
//! metadata header with the full configuration text, epoch and step.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{Device, Tensor};

use crate::config::TrainConfig;
use crate::error::{Error, Result};

const KEY_CONFIG: &str = "config";
const KEY_EPOCH: &str = "epoch";
const KEY_STEP: &str = "step";
const KEY_FORMAT: &str = "format";
const FORMAT: &str = "psfderain-checkpoint-1";

/// Parameter names never start with this, so optimizer state can share the file.
pub const OPTIMIZER_PREFIX: &str = "adam.";

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub epoch: usize,
    pub step: usize,
    pub params: BTreeMap<String, Tensor>,
    pub optimizer: BTreeMap<String, Tensor>,
}

pub fn save_checkpoint(
    path: &Path,
    config: &TrainConfig,
    epoch: usize,
    step: usize,
    params: &BTreeMap<String, Tensor>,
    optimizer: &BTreeMap<String, Tensor>,
) -> Result<()> {
    let mut meta = HashMap::new();
    meta.insert(KEY_FORMAT.to_string(), FORMAT.to_string());
    meta.insert(KEY_CONFIG.to_string(), config.to_toml());
    meta.insert(KEY_EPOCH.to_string(), epoch.to_string());
    meta.insert(KEY_STEP.to_string(), step.to_string());
    let tensors: Vec<(&String, &Tensor)> = params.iter().chain(optimizer.iter()).collect();
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    safetensors::serialize_to_file(tensors, Some(meta), path)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path, device: &Device) -> Result<Checkpoint> {
    let bad = |m: String| Error::Checkpoint(format!("{}: {m}", path.display()));
    let buf = std::fs::read(path)?;
    let (_, header) = safetensors::SafeTensors::read_metadata(&buf).map_err(|e| bad(e.to_string()))?;
    let meta = header
        .metadata()
        .as_ref()
        .ok_or_else(|| bad("no metadata header".into()))?;
    let get = |k: &str| meta.get(k).ok_or_else(|| bad(format!("metadata lacks `{k}`")));
    if get(KEY_FORMAT)? != FORMAT {
        return Err(bad(format!("unsupported format `{}`", get(KEY_FORMAT)?)));
    }
    let config = TrainConfig::from_toml(get(KEY_CONFIG)?)?;
    let epoch = get(KEY_EPOCH)?.parse().map_err(|_| bad("bad epoch".into()))?;
    let step = get(KEY_STEP)?.parse().map_err(|_| bad("bad step".into()))?;
    let mut params = BTreeMap::new();
    let mut optimizer = BTreeMap::new();
    for (name, t) in candle_core::safetensors::load_buffer(&buf, device)? {
        if name.starts_with(OPTIMIZER_PREFIX) {
            optimizer.insert(name, t);
        } else {
            params.insert(name, t);
        }
    }
    Ok(Checkpoint {
        config,
        epoch,
        step,
        params,
        optimizer,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.safetensors");
        let dev = Device::Cpu;
        let mut cfg = TrainConfig::default();
        cfg.model.tau = 1;
        let mut params = BTreeMap::new();
        params.insert("a.weight".to_string(), Tensor::new(&[1.5f32, -2.0], &dev).unwrap());
        let mut opt = BTreeMap::new();
        opt.insert("adam.m.a.weight".to_string(), Tensor::new(&[0.1f32, 0.2], &dev).unwrap());
        save_checkpoint(&p, &cfg, 4, 99, &params, &opt).unwrap();
        let c = load_checkpoint(&p, &dev).unwrap();
        assert_eq!(c.config, cfg);
        assert_eq!((c.epoch, c.step), (4, 99));
        assert_eq!(c.params["a.weight"].to_vec1::<f32>().unwrap(), vec![1.5, -2.0]);
        assert_eq!(c.optimizer.len(), 1);
    }

    #[test]
    fn garbage_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.safetensors");
        std::fs::write(&p, b"not a checkpoint").unwrap();
        assert!(load_checkpoint(&p, &Device::Cpu).is_err());
    }
}
