//! Paired rainy/clean datasets, training patches, inference padding and synthetic pairs.
//!
//! A dataset root holds `input/` (rainy) and `gt/` (clean) with matching file stems.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::imageio::Planar;
use crate::ops::reflect_pad;
use crate::psf::{synthesize_degradation, PsfDictionary};

pub const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

pub const DEFAULT_PATCH: usize = 128;
const IMAGE_EXTS: [&str; 4] = ["png", "jpg", "jpeg", "bmp"];

pub fn normalize(img: &Planar) -> Planar {
    img.map(|c, v| (v - IMAGENET_MEAN[c]) / IMAGENET_STD[c])
}

pub fn denormalize(img: &Planar) -> Planar {
    img.map(|c, v| v * IMAGENET_STD[c] + IMAGENET_MEAN[c])
}

/// [B, 3, H, W] tensor form of [`denormalize`].
pub fn denormalize_tensor(t: &Tensor) -> Result<Tensor> {
    let std = Tensor::new(&IMAGENET_STD, t.device())?.to_dtype(t.dtype())?.reshape((1, 3, 1, 1))?;
    let mean = Tensor::new(&IMAGENET_MEAN, t.device())?.to_dtype(t.dtype())?.reshape((1, 3, 1, 1))?;
    Ok(t.broadcast_mul(&std)?.broadcast_add(&mean)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairPaths {
    pub id: String,
    pub input: PathBuf,
    pub gt: PathBuf,
}

/// A loaded rainy/clean pair, values in [0, 1].
#[derive(Debug, Clone)]
pub struct ImagePair {
    pub id: String,
    pub input: Planar,
    pub gt: Planar,
}

#[derive(Debug, Clone)]
pub struct PairDataset {
    pub root: PathBuf,
    pub pairs: Vec<PairPaths>,
}

impl PairDataset {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn load(&self, i: usize) -> Result<ImagePair> {
        let p = &self.pairs[i];
        Ok(ImagePair {
            id: p.id.clone(),
            input: Planar::load(&p.input)?,
            gt: Planar::load(&p.gt)?,
        })
    }

    pub fn load_all(&self) -> Result<Vec<ImagePair>> {
        (0..self.len()).map(|i| self.load(i)).collect()
    }
}

fn images_by_stem(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase());
        if !ext.is_some_and(|e| IMAGE_EXTS.contains(&e.as_str())) {
            continue;
        }
        if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
            out.insert(stem.to_string(), path);
        }
    }
    Ok(out)
}

/// Scans `root/input` and `root/gt`, keeping pairs whose stems match and whose sizes
/// agree. Orphans, unreadable files and size mismatches are skipped with a warning.
pub fn load_pair_dataset(root: &Path) -> Result<PairDataset> {
    let inputs = images_by_stem(&root.join("input"))
        .map_err(|e| Error::Data(format!("{}: {e}", root.join("input").display())))?;
    let gts = images_by_stem(&root.join("gt"))
        .map_err(|e| Error::Data(format!("{}: {e}", root.join("gt").display())))?;
    let mut pairs = Vec::new();
    let mut skipped = 0usize;
    for (stem, input) in &inputs {
        let Some(gt) = gts.get(stem) else {
            warn!("{}: no matching ground truth, skipped", input.display());
            skipped += 1;
            continue;
        };
        match (image::image_dimensions(input), image::image_dimensions(gt)) {
            (Ok(a), Ok(b)) if a == b => pairs.push(PairPaths {
                id: stem.clone(),
                input: input.clone(),
                gt: gt.clone(),
            }),
            (Ok(a), Ok(b)) => {
                warn!("{stem}: input is {}×{}, ground truth {}×{}, skipped", a.0, a.1, b.0, b.1);
                skipped += 1;
            }
            (Err(e), _) | (_, Err(e)) => {
                warn!("{stem}: unreadable ({e}), skipped");
                skipped += 1;
            }
        }
    }
    for (stem, gt) in &gts {
        if !inputs.contains_key(stem) {
            warn!("{}: no matching rainy input, skipped", gt.display());
            skipped += 1;
        }
    }
    if pairs.is_empty() {
        return Err(Error::Data(format!("no usable image pairs under {}", root.display())));
    }
    if skipped > 0 {
        warn!("{}: {} pairs kept, {skipped} files skipped", root.display(), pairs.len());
    }
    Ok(PairDataset {
        root: root.to_path_buf(),
        pairs,
    })
}

/// Normalized, aligned training crop.
#[derive(Debug, Clone)]
pub struct PatchSample {
    pub input: Planar,
    pub target: Planar,
}

/// Reproducible per-sample stream: the draw depends only on the base seed, the epoch
/// and the sample index, never on the order in which samples are produced.
pub fn sample_rng(base_seed: u64, epoch: usize, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(base_seed);
    rng.set_stream(((epoch as u64) << 32) | index as u64);
    rng
}

fn pad_to_at_least(img: &Planar, size: usize) -> Result<Planar> {
    if img.height >= size && img.width >= size {
        return Ok(img.clone());
    }
    let t = img.to_tensor(DType::F64, &Device::Cpu)?;
    let (ph, pw) = (size.saturating_sub(img.height), size.saturating_sub(img.width));
    Planar::from_tensor(&reflect_pad(&t, 0, ph, 0, pw)?)
}

/// Same random crop, flips and quarter turn on both images, then ImageNet normalization.
pub fn make_training_patch(pair: &ImagePair, patch: usize, rng: &mut impl Rng) -> Result<PatchSample> {
    if (pair.input.height, pair.input.width) != (pair.gt.height, pair.gt.width) {
        return Err(shape_err!("pair {} has mismatched sizes", pair.id));
    }
    let x = pad_to_at_least(&pair.input, patch)?;
    let y = pad_to_at_least(&pair.gt, patch)?;
    let top = rng.random_range(0..=x.height - patch);
    let left = rng.random_range(0..=x.width - patch);
    let hflip = rng.random_bool(0.5);
    let vflip = rng.random_bool(0.5);
    let turns = rng.random_range(0..4);
    let aug = |img: &Planar| -> Result<Planar> {
        let mut p = img.crop(top, left, patch, patch)?;
        if hflip {
            p = p.flip_h();
        }
        if vflip {
            p = p.flip_v();
        }
        for _ in 0..turns {
            p = p.rot90();
        }
        Ok(normalize(&p))
    };
    Ok(PatchSample {
        input: aug(&x)?,
        target: aug(&y)?,
    })
}

/// Stacks samples into `(input, target)` tensors of shape [B, 3, P, P].
pub fn collate(samples: &[PatchSample], dtype: DType, device: &Device) -> Result<(Tensor, Tensor)> {
    let xs: Vec<Tensor> = samples
        .iter()
        .map(|s| s.input.to_tensor(dtype, device))
        .collect::<Result<_>>()?;
    let ys: Vec<Tensor> = samples
        .iter()
        .map(|s| s.target.to_tensor(dtype, device))
        .collect::<Result<_>>()?;
    Ok((Tensor::cat(&xs, 0)?, Tensor::cat(&ys, 0)?))
}

/// Region of a padded tensor holding the original image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropBox {
    pub height: usize,
    pub width: usize,
}

impl CropBox {
    pub fn apply(&self, t: &Tensor) -> Result<Tensor> {
        Ok(t.narrow(2, 0, self.height)?.narrow(3, 0, self.width)?)
    }
}

/// Reflection-pads bottom and right of a [B, C, H, W] tensor up to the next multiple.
pub fn reflect_pad_for_inference(image: &Tensor, multiple: usize) -> Result<(Tensor, CropBox)> {
    let (_, _, h, w) = image.dims4()?;
    let up = |n: usize| n.div_ceil(multiple) * multiple;
    let padded = reflect_pad(image, 0, up(h) - h, 0, up(w) - w)?;
    Ok((padded, CropBox { height: h, width: w }))
}

/// Kernel stack for the `synth` tool, stored as JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DictionaryFile {
    pub kernel_size: usize,
    /// Row-major `kernel_size²` values per kernel.
    pub kernels: Vec<Vec<f64>>,
    /// Seed of the mixing-weight fields.
    #[serde(default)]
    pub seed: u64,
}

impl DictionaryFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let d: Self = serde_json::from_str(&text)
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        d.validate()?;
        Ok(d)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(std::io::Error::other)?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.kernel_size * self.kernel_size;
        if self.kernel_size % 2 == 0 {
            return Err(Error::Data("dictionary kernel size must be odd".into()));
        }
        if self.kernels.is_empty() {
            return Err(Error::Data("dictionary has no kernels".into()));
        }
        for (i, k) in self.kernels.iter().enumerate() {
            if k.len() != n {
                return Err(Error::Data(format!("kernel {i} has {} values, expected {n}", k.len())));
            }
            if k.iter().any(|v| *v < 0.0 || !v.is_finite()) {
                return Err(Error::Data(format!("kernel {i} has negative or non-finite entries")));
            }
            let s: f64 = k.iter().sum();
            if (s - 1.0).abs() > 1e-6 {
                return Err(Error::Data(format!("kernel {i} sums to {s}, expected 1")));
            }
        }
        Ok(())
    }

    pub fn kernels_tensor(&self, device: &Device) -> Result<Tensor> {
        let k = self.kernel_size;
        let flat: Vec<f64> = self.kernels.iter().flatten().copied().collect();
        Ok(Tensor::from_vec(flat, (self.kernels.len(), k, k), device)?)
    }
}

/// Streak-like kernels: anti-aliased line segments through the center at evenly spread
/// angles, each normalized to unit mass.
pub fn streak_kernels(count: usize, size: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let r = (size / 2) as f64;
    let base: f64 = rng.random_range(0.0..std::f64::consts::PI);
    (0..count)
        .map(|j| {
            let theta = base + std::f64::consts::PI * j as f64 / count as f64;
            let (dy, dx) = (theta.sin(), theta.cos());
            let mut k = vec![0.0; size * size];
            for y in 0..size {
                for x in 0..size {
                    let (py, px) = (y as f64 - r, x as f64 - r);
                    // distance from the line and position along it
                    let across = (px * dy - py * dx).abs();
                    let along = (px * dx + py * dy).abs();
                    if along <= r + 0.5 {
                        k[y * size + x] = (1.0 - across).max(0.0);
                    }
                }
            }
            let s: f64 = k.iter().sum();
            k.iter().map(|v| v / s).collect()
        })
        .collect()
}

/// Smooth per-pixel mixing weights on the simplex: softmax over a few random
/// low-frequency sinusoids per kernel. Returns [1, K_c, H, W].
pub fn random_weight_field(kc: usize, h: usize, w: usize, rng: &mut impl Rng, device: &Device) -> Result<Tensor> {
    let mut logits = vec![0.0; kc * h * w];
    for j in 0..kc {
        let fy: f64 = rng.random_range(0.5..2.0);
        let fx: f64 = rng.random_range(0.5..2.0);
        let ph: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let amp: f64 = rng.random_range(1.0..3.0);
        for y in 0..h {
            for x in 0..w {
                let u = std::f64::consts::TAU * (fy * y as f64 / h as f64 + fx * x as f64 / w as f64);
                logits[(j * h + y) * w + x] = amp * (u + ph).sin();
            }
        }
    }
    let t = Tensor::from_vec(logits, (1, kc, h, w), device)?;
    Ok(candle_nn::ops::softmax(&t, 1)?)
}

/// Degrades a clean image with the dictionary and a fresh weight field.
pub fn degrade(clean: &Planar, kernels: &Tensor, rng: &mut impl Rng) -> Result<Planar> {
    let dev = Device::Cpu;
    let kc = kernels.dims()[0];
    let field = random_weight_field(kc, clean.height, clean.width, rng, &dev)?;
    let dict = PsfDictionary::new(kernels.clone(), field)?;
    let out = synthesize_degradation(&clean.to_tensor(DType::F64, &dev)?, &dict)?;
    Planar::from_tensor(&out)
}

/// Procedural clean image: a smooth gradient background with random rectangles,
/// disks and stripes, so there are edges for the streak kernels to smear.
pub fn synthetic_clean_image(h: usize, w: usize, rng: &mut impl Rng) -> Planar {
    let mut data = vec![0.0; 3 * h * w];
    let bg: [[f64; 3]; 2] = [
        [rng.random(), rng.random(), rng.random()],
        [rng.random(), rng.random(), rng.random()],
    ];
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let t = (x + y) as f64 / (h + w) as f64;
                data[(c * h + y) * w + x] = bg[0][c] * (1.0 - t) + bg[1][c] * t;
            }
        }
    }
    let shapes = rng.random_range(4..9);
    for _ in 0..shapes {
        let color: [f64; 3] = [rng.random(), rng.random(), rng.random()];
        let cy = rng.random_range(0..h) as f64;
        let cx = rng.random_range(0..w) as f64;
        let sy = rng.random_range(h / 8..=h / 3).max(1) as f64;
        let sx = rng.random_range(w / 8..=w / 3).max(1) as f64;
        let kind = rng.random_range(0..3);
        let period = rng.random_range(3..7) as f64;
        for y in 0..h {
            for x in 0..w {
                let (dy, dx) = ((y as f64 - cy) / sy, (x as f64 - cx) / sx);
                let inside = match kind {
                    0 => dy.abs() <= 1.0 && dx.abs() <= 1.0,
                    1 => dy * dy + dx * dx <= 1.0,
                    _ => dy.abs() <= 1.0 && dx.abs() <= 1.0 && (x as f64 / period).floor() as i64 % 2 == 0,
                };
                if inside {
                    for c in 0..3 {
                        data[(c * h + y) * w + x] = color[c];
                    }
                }
            }
        }
    }
    Planar { height: h, width: w, data }
}

/// In-memory synthetic pairs degraded with streak kernels.
pub fn synthetic_pairs(n: usize, size: usize, kc: usize, kernel_size: usize, seed: u64) -> Result<Vec<ImagePair>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kernels = Tensor::from_vec(
        streak_kernels(kc, kernel_size, &mut rng).concat(),
        (kc, kernel_size, kernel_size),
        &Device::Cpu,
    )?;
    (0..n)
        .map(|i| {
            let gt = synthetic_clean_image(size, size, &mut rng);
            let input = degrade(&gt, &kernels, &mut rng)?;
            Ok(ImagePair {
                id: format!("synth_{i:04}"),
                input,
                gt,
            })
        })
        .collect()
}

/// Writes `out/input` and `out/gt` for every image in `input_dir`.
pub fn synthesize_directory(dict: &DictionaryFile, input_dir: &Path, out: &Path) -> Result<usize> {
    let kernels = dict.kernels_tensor(&Device::Cpu)?;
    let mut rng = ChaCha8Rng::seed_from_u64(dict.seed);
    std::fs::create_dir_all(out.join("input"))?;
    std::fs::create_dir_all(out.join("gt"))?;
    let mut n = 0;
    for (stem, path) in images_by_stem(input_dir)? {
        let clean = match Planar::load(&path) {
            Ok(c) => c,
            Err(e) => {
                warn!("{}: {e}, skipped", path.display());
                continue;
            }
        };
        let rainy = degrade(&clean, &kernels, &mut rng)?;
        clean.save(&out.join("gt").join(format!("{stem}.png")))?;
        rainy.save(&out.join("input").join(format!("{stem}.png")))?;
        n += 1;
    }
    if n == 0 {
        return Err(Error::Data(format!("no readable images in {}", input_dir.display())));
    }
    Ok(n)
}

/// Saves pairs in the dataset layout.
pub fn save_pairs(pairs: &[ImagePair], out: &Path) -> Result<()> {
    std::fs::create_dir_all(out.join("input"))?;
    std::fs::create_dir_all(out.join("gt"))?;
    for p in pairs {
        p.input.save(&out.join("input").join(format!("{}.png", p.id)))?;
        p.gt.save(&out.join("gt").join(format!("{}.png", p.id)))?;
    }
    Ok(())
}
