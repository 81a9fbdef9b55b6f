//! PSNR and SSIM on de-normalized `[0, 1]` images, plus the per-image report.

use std::io::Write;
use std::path::Path;

use log::warn;
use serde::Serialize;

use crate::error::{shape_err, Result};
use crate::imageio::Planar;

/// Reported instead of +∞ for identical images.
pub const PSNR_CAP_DB: f64 = 100.0;

/// BT.601 luma weights; they sum to one, so a common offset on all channels moves
/// Y by the same amount.
pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PsnrMode {
    Y,
    Rgb,
}

fn check_pair(pred: &Planar, target: &Planar) -> Result<()> {
    if (pred.height, pred.width) != (target.height, target.width) {
        return Err(shape_err!(
            "metric inputs {}×{} vs {}×{}",
            pred.height,
            pred.width,
            target.height,
            target.width
        ));
    }
    Ok(())
}

/// Clamps into [0, 1], warning once per image if anything was out of range.
fn clamped(img: &Planar, what: &str) -> Planar {
    let bad = img.data.iter().filter(|v| !(0.0..=1.0).contains(*v)).count();
    if bad == 0 {
        return img.clone();
    }
    warn!("{what}: {bad} samples outside [0, 1] clamped before metric evaluation");
    Planar {
        height: img.height,
        width: img.width,
        data: img
            .data
            .iter()
            .map(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) })
            .collect(),
    }
}

pub fn luma(img: &Planar) -> Vec<f64> {
    let (r, g, b) = (img.plane(0), img.plane(1), img.plane(2));
    (0..r.len())
        .map(|i| LUMA[0] * r[i] + LUMA[1] * g[i] + LUMA[2] * b[i])
        .collect()
}

fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        return PSNR_CAP_DB;
    }
    (10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB)
}

fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

/// PSNR in dB with a data range of 1.
pub fn psnr(pred: &Planar, target: &Planar, mode: PsnrMode) -> Result<f64> {
    check_pair(pred, target)?;
    let p = clamped(pred, "prediction");
    let t = clamped(target, "target");
    let m = match mode {
        PsnrMode::Rgb => mse(&p.data, &t.data),
        PsnrMode::Y => mse(&luma(&p), &luma(&t)),
    };
    Ok(psnr_from_mse(m))
}

fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable valid-mode filtering of one plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, g: &[f64]) -> (Vec<f64>, usize, usize) {
    let k = g.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..k).map(|j| g[j] * plane[y * w + x + j]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..k).map(|i| g[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    (out, oh, ow)
}

fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize, g: &[f64]) -> f64 {
    let f = |p: &[f64]| filter_valid(p, h, w, g).0;
    let prod = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(u, v)| u * v).collect::<Vec<_>>();
    let mu_a = f(a);
    let mu_b = f(b);
    let e_aa = f(&prod(a, a));
    let e_bb = f(&prod(b, b));
    let e_ab = f(&prod(a, b));
    let n = mu_a.len();
    let mut acc = 0.0;
    for i in 0..n {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = e_aa[i] - ma * ma;
        let vb = e_bb[i] - mb * mb;
        let cov = e_ab[i] - ma * mb;
        acc += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
            / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
    }
    acc / n as f64
}

/// Gaussian-window SSIM averaged over the valid window positions and the three
/// channels. Images smaller than the window use the largest odd window that fits.
pub fn ssim(pred: &Planar, target: &Planar) -> Result<f64> {
    check_pair(pred, target)?;
    if pred.data == target.data {
        return Ok(1.0);
    }
    let p = clamped(pred, "prediction");
    let t = clamped(target, "target");
    let (h, w) = (p.height, p.width);
    let mut k = SSIM_WINDOW;
    let fit = h.min(w);
    if fit < k {
        k = if fit % 2 == 1 { fit } else { fit - 1 };
        warn!("image {h}×{w} is smaller than the {SSIM_WINDOW}×{SSIM_WINDOW} SSIM window; using {k}×{k}");
    }
    let g = gaussian_window(k, SSIM_SIGMA);
    Ok((0..3).map(|c| ssim_plane(p.plane(c), t.plane(c), h, w, &g)).sum::<f64>() / 3.0)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRow {
    pub image_id: String,
    pub psnr_y: f64,
    pub psnr_rgb: f64,
    pub ssim_rgb: f64,
}

impl MetricsRow {
    pub fn compute(image_id: impl Into<String>, pred: &Planar, target: &Planar) -> Result<Self> {
        Ok(Self {
            image_id: image_id.into(),
            psnr_y: psnr(pred, target, PsnrMode::Y)?,
            psnr_rgb: psnr(pred, target, PsnrMode::Rgb)?,
            ssim_rgb: ssim(pred, target)?,
        })
    }
}

/// Per-image metrics; the CSV form ends with a `mean` row.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsReport {
    pub rows: Vec<MetricsRow>,
    /// Loss breakdown of the evaluated set, when available.
    pub loss: Option<f64>,
}

impl MetricsReport {
    pub fn push(&mut self, row: MetricsRow) {
        self.rows.push(row);
    }

    pub fn mean(&self) -> MetricsRow {
        let n = self.rows.len().max(1) as f64;
        let sum = |f: fn(&MetricsRow) -> f64| self.rows.iter().map(f).sum::<f64>() / n;
        MetricsRow {
            image_id: "mean".into(),
            psnr_y: sum(|r| r.psnr_y),
            psnr_rgb: sum(|r| r.psnr_rgb),
            ssim_rgb: sum(|r| r.ssim_rgb),
        }
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        for r in self.rows.iter().chain(std::iter::once(&self.mean())) {
            wr.serialize(r).map_err(std::io::Error::other)?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }

    pub fn summary(&self) -> String {
        let m = self.mean();
        format!(
            "{} images: PSNR-Y {:.3} dB, PSNR-RGB {:.3} dB, SSIM {:.4}",
            self.rows.len(),
            m.psnr_y,
            m.psnr_rgb,
            m.ssim_rgb
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn checker(n: usize) -> Planar {
        let mut d = Vec::new();
        for _ in 0..3 {
            for y in 0..n {
                for x in 0..n {
                    d.push(((x + y) % 2) as f64);
                }
            }
        }
        Planar::new(n, n, d).unwrap()
    }

    #[test]
    fn identical_images() {
        let a = checker(16);
        assert_eq!(psnr(&a, &a, PsnrMode::Y).unwrap(), PSNR_CAP_DB);
        assert_eq!(psnr(&a, &a, PsnrMode::Rgb).unwrap(), PSNR_CAP_DB);
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn offset_gives_20db_in_both_modes() {
        let a = Planar::filled(8, 8, 0.4);
        let b = Planar::filled(8, 8, 0.5);
        let rgb = psnr(&a, &b, PsnrMode::Rgb).unwrap();
        let y = psnr(&a, &b, PsnrMode::Y).unwrap();
        assert!((rgb - 20.0).abs() < 1e-9);
        assert!((rgb - y).abs() < 1e-9);
    }

    #[test]
    fn anticorrelated_checkerboard() {
        let a = checker(16);
        let b = Planar::new(16, 16, a.data.iter().map(|v| 1.0 - v).collect()).unwrap();
        let s = ssim(&a, &b).unwrap();
        assert!(s < 0.0, "{s}");
        assert!((s - ssim(&b, &a).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn constant_pair_closed_form() {
        let (a, b) = (0.3, 0.7);
        let s = ssim(&Planar::filled(16, 16, a), &Planar::filled(16, 16, b)).unwrap();
        let expect = (2.0 * a * b + SSIM_C1) / (a * a + b * b + SSIM_C1);
        assert!((s - expect).abs() < 1e-12);
    }

    #[test]
    fn small_images_shrink_window() {
        let a = Planar::filled(6, 9, 0.2);
        let b = Planar::filled(6, 9, 0.3);
        assert!(ssim(&a, &b).unwrap() < 1.0);
    }

    #[test]
    fn out_of_range_is_clamped() {
        let a = Planar::filled(4, 4, 1.5);
        let b = Planar::filled(4, 4, 1.0);
        assert_eq!(psnr(&a, &b, PsnrMode::Rgb).unwrap(), PSNR_CAP_DB);
    }

    #[test]
    fn csv_has_mean_row() {
        let mut r = MetricsReport::default();
        let a = Planar::filled(4, 4, 0.4);
        let b = Planar::filled(4, 4, 0.5);
        r.push(MetricsRow::compute("x", &a, &b).unwrap());
        r.push(MetricsRow::compute("y", &a, &a).unwrap());
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = s.lines().collect();
        assert_eq!(lines[0], "image_id,psnr_y,psnr_rgb,ssim_rgb");
        assert_eq!(lines.len(), 4);
        assert!(lines[3].starts_with("mean,60"));
    }
}
