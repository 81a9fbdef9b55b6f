use std::path::PathBuf;

use anyhow::{Context, Result};
use candle_core::DType;
use clap::{Parser, Subcommand};
use log::info;

use psfderain::ablation::{run_ablation, Toggle};
use psfderain::config::{device_from_env, TrainConfig, DEVICE_ENV};
use psfderain::data::{load_pair_dataset, normalize, reflect_pad_for_inference, synthesize_directory, DictionaryFile};
use psfderain::diagnostics::dump_diagnostics;
use psfderain::imageio::Planar;
use psfderain::checkpoint::load_checkpoint;
use psfderain::train::{evaluate, input_baseline, load_model, model_from_checkpoint, Trainer};

#[derive(Parser)]
#[command(name = "psfderain", version, about = "PSF-guided multi-stage image deraining")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train on an `input/` + `gt/` dataset.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint and write per-image metrics.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "metrics.csv")]
        out: PathBuf,
    },
    /// Compare model variants. Without `--data` only builds them, runs a forward
    /// pass and counts parameters.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        /// components, tau_sweep, use_gate, use_h_updates, use_enhanced_csff,
        /// psf_channels_mode=off|1|kc, disable_pathway=<stage>:<site>
        #[arg(long, num_args = 1..)]
        toggle: Vec<String>,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Degrade clean images with a kernel dictionary, writing `out/input` and `out/gt`.
    Synth {
        #[arg(long)]
        dict: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the mean inter-stage feature activity for one image as JSON.
    Diag {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
    },
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let device = device_from_env().with_context(|| format!("selecting device from {DEVICE_ENV}"))?;
    match cli.cmd {
        Cmd::Train { config, data, resume } => {
            let cfg = TrainConfig::from_file(&config)?;
            let pairs = load_pair_dataset(&data)?.load_all()?;
            let val = match &cfg.val_data {
                Some(v) => Some(load_pair_dataset(v)?.load_all()?),
                None => None,
            };
            let mut trainer = match resume {
                Some(ck) => Trainer::resume(cfg, &ck, DType::F32, &device)?,
                None => Trainer::new(cfg, DType::F32, &device)?,
            };
            info!(
                "{} training pairs, {} parameters",
                pairs.len(),
                trainer.model.num_parameters()
            );
            let report = trainer.fit(&pairs, val.as_deref())?;
            if let Some(p) = report.checkpoint {
                println!("{}", p.display());
            }
        }
        Cmd::Eval { ckpt, data, out } => {
            let pairs = load_pair_dataset(&data)?.load_all()?;
            let (model, _) = load_model(&ckpt, DType::F32, &device)?;
            let report = evaluate(&model, &pairs)?;
            report.save_csv(&out)?;
            println!("input:    {}", input_baseline(&pairs)?.summary());
            println!("restored: {}", report.summary());
        }
        Cmd::Ablate { config, toggle, data } => {
            let cfg = TrainConfig::from_file(&config)?;
            let toggles = toggle
                .iter()
                .map(|t| t.parse::<Toggle>())
                .collect::<psfderain::Result<Vec<_>>>()?;
            let pairs = match &data {
                Some(d) => Some(load_pair_dataset(d)?.load_all()?),
                None => None,
            };
            let table = run_ablation(&cfg, &toggles, pairs.as_deref().map(|p| (p, p)), &device)?;
            print!("{table}");
        }
        Cmd::Synth { dict, input, out } => {
            let d = DictionaryFile::load(&dict)?;
            let n = synthesize_directory(&d, &input, &out)?;
            println!("wrote {n} pairs to {}", out.display());
        }
        Cmd::Diag { ckpt, image } => {
            let ck = load_checkpoint(&ckpt, &device)?;
            let model = model_from_checkpoint(&ck, DType::F32, &device)?;
            let img = Planar::load(&image)?;
            let x = normalize(&img).to_tensor(DType::F32, &device)?;
            let (x, _) = reflect_pad_for_inference(&x, model.config().size_multiple())?;
            println!("{}", dump_diagnostics(&model, &x, ck.epoch)?.to_json());
        }
    }
    Ok(())
}
