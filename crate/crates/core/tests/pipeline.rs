use std::path::Path;
use std::process::Command;

use candle_core::{DType, Device, Tensor};

use psfderain::config::TrainConfig;
use psfderain::data::{save_pairs, synthetic_pairs, DictionaryFile};
use psfderain::error::Error;
use psfderain::network::ModelConfig;
use psfderain::train::{evaluate, load_model, Trainer};

fn tiny(dir: &Path) -> TrainConfig {
    TrainConfig {
        model: ModelConfig {
            tau: 1,
            psf_channels: 2,
            psf_size: 3,
            n_feat: 4,
            scale_unet: 2,
            scale_ors: 2,
            num_cab: 1,
            level_blocks: 1,
            ..Default::default()
        },
        lr_init: 1e-3,
        lr_final: 1e-4,
        warmup_epochs: 1,
        epochs: 3,
        steps_per_epoch: 2,
        batch_size: 2,
        patch_size: 8,
        log_every: 0,
        checkpoint_every: 1,
        checkpoint_dir: dir.to_path_buf(),
        ..Default::default()
    }
}

#[test]
fn seeded_training_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let pairs = synthetic_pairs(3, 12, 2, 3, 4).unwrap();
    let run = || {
        let mut t = Trainer::new(tiny(dir.path()), DType::F64, &Device::Cpu).unwrap();
        t.fit(&pairs, None).unwrap().steps.iter().map(|s| s.loss).collect::<Vec<_>>()
    };
    let a = run();
    assert_eq!(a.len(), 6);
    assert_eq!(a, run());
}

#[test]
fn checkpoint_round_trip_and_resume() {
    let dir = tempfile::tempdir().unwrap();
    let pairs = synthetic_pairs(3, 12, 2, 3, 5).unwrap();
    let mut full = Trainer::new(tiny(dir.path()), DType::F64, &Device::Cpu).unwrap();
    let report = full.fit(&pairs, Some(&pairs[..1])).unwrap();
    assert_eq!(report.validation.len(), 3);
    let last = report.checkpoint.unwrap();
    let before = evaluate(&full.model, &pairs).unwrap();
    let (model, cfg) = load_model(&last, DType::F64, &Device::Cpu).unwrap();
    assert_eq!(cfg, tiny(dir.path()));
    let after = evaluate(&model, &pairs).unwrap();
    assert_eq!(before.rows, after.rows);

    // Resuming from the epoch-1 checkpoint replays the rest of the run exactly.
    let mut resumed = Trainer::resume(tiny(dir.path()), &dir.path().join("epoch0001.safetensors"), DType::F64, &Device::Cpu).unwrap();
    assert_eq!((resumed.epoch(), resumed.global_step()), (1, 2));
    let rest = resumed.fit(&pairs, None).unwrap();
    let tail: Vec<f64> = report.steps[2..].iter().map(|s| s.loss).collect();
    assert_eq!(rest.steps.iter().map(|s| s.loss).collect::<Vec<_>>(), tail);
}

#[test]
fn non_finite_loss_halts_with_snapshot() {
    let dir = tempfile::tempdir().unwrap();
    let mut t = Trainer::new(tiny(dir.path()), DType::F64, &Device::Cpu).unwrap();
    let x = Tensor::full(f64::NAN, (1, 3, 8, 8), &Device::Cpu).unwrap();
    let y = Tensor::zeros((1, 3, 8, 8), DType::F64, &Device::Cpu).unwrap();
    match t.train_step(&x, &y, 1e-3) {
        Err(Error::NonFiniteLoss { step: 0, .. }) => {}
        other => panic!("expected a non-finite loss error, got {other:?}"),
    }
    assert!(dir.path().join("nonfinite-step0.safetensors").exists());
}

#[test]
fn empty_evaluation_set_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let t = Trainer::new(tiny(dir.path()), DType::F64, &Device::Cpu).unwrap();
    assert!(evaluate(&t.model, &[]).is_err());
}

fn cli(args: &[&str]) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_psfderain"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn command_line_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let s = |p: &Path| p.to_str().unwrap().to_string();

    // Clean images, a dictionary, and the synthesized pairs.
    let pairs = synthetic_pairs(2, 16, 2, 3, 0).unwrap();
    let clean = root.join("clean");
    std::fs::create_dir_all(&clean).unwrap();
    for p in &pairs {
        p.gt.save(&clean.join(format!("{}.png", p.id))).unwrap();
    }
    let dict = DictionaryFile {
        kernel_size: 3,
        kernels: vec![vec![1.0 / 9.0; 9], vec![0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0]],
        seed: 1,
    };
    dict.save(&root.join("dict.json")).unwrap();
    let data = root.join("data");
    let msg = cli(&["synth", "--dict", &s(&root.join("dict.json")), "--in", &s(&clean), "--out", &s(&data)]);
    assert!(msg.contains("2 pairs"), "{msg}");

    let mut cfg = tiny(&root.join("ck"));
    cfg.epochs = 2;
    cfg.checkpoint_every = 0;
    std::fs::write(root.join("cfg.toml"), cfg.to_toml()).unwrap();
    let ckpt = cli(&["train", "--config", &s(&root.join("cfg.toml")), "--data", &s(&data)]);
    let ckpt = ckpt.trim();
    assert!(Path::new(ckpt).exists());

    let metrics = root.join("metrics.csv");
    cli(&["eval", "--ckpt", ckpt, "--data", &s(&data), "--out", &s(&metrics)]);
    let csv = std::fs::read_to_string(&metrics).unwrap();
    assert!(csv.starts_with("image_id,psnr_y,psnr_rgb,ssim_rgb"), "{csv}");
    assert_eq!(csv.lines().count(), 4);

    let diag = cli(&["diag", "--ckpt", ckpt, "--image", &s(&data.join("input").join("synth_0000.png"))]);
    let v: serde_json::Value = serde_json::from_str(&diag).unwrap();
    assert_eq!(v["h_means"].as_array().unwrap().len(), 2);
    assert_eq!(v["epoch"], 2);

    let table = cli(&["ablate", "--config", &s(&root.join("cfg.toml")), "--toggle", "use_gate", "psf_channels_mode=1"]);
    assert_eq!(table.lines().count(), 4, "{table}");

    // Unknown config keys are rejected.
    std::fs::write(root.join("bad.toml"), "tau = 1\nlearnin_rate = 3\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_psfderain"))
        .args(["train", "--config", &s(&root.join("bad.toml")), "--data", &s(&data)])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("learnin_rate"));
}

#[test]
fn saved_pairs_reload() {
    let dir = tempfile::tempdir().unwrap();
    let pairs = synthetic_pairs(2, 8, 2, 3, 2).unwrap();
    save_pairs(&pairs, dir.path()).unwrap();
    let back = psfderain::data::load_pair_dataset(dir.path()).unwrap().load_all().unwrap();
    assert_eq!(back.len(), 2);
    assert_eq!((back[0].input.height, back[0].input.width), (8, 8));
}
