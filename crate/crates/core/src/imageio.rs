//! Planar RGB images in `[0, 1]` and their conversion to and from tensors and files.

use std::path::Path;

use candle_core::{DType, Device, Tensor};

use crate::error::{shape_err, Result};

/// Three-channel image stored channel-major (`data[c * h * w + y * w + x]`).
#[derive(Debug, Clone, PartialEq)]
pub struct Planar {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Planar {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != 3 * height * width {
            return Err(shape_err!(
                "{} samples for a 3×{height}×{width} image",
                data.len()
            ));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, v: f64) -> Self {
        Self {
            height,
            width,
            data: vec![v; 3 * height * width],
        }
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path)?.to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut data = vec![0.0; 3 * h * w];
        for (x, y, p) in img.enumerate_pixels() {
            for c in 0..3 {
                data[(c * h + y as usize) * w + x as usize] = p[c] as f64 / 255.0;
            }
        }
        Self::new(h, w, data)
    }

    /// Writes an 8-bit image; the format follows the file extension.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut img = image::RgbImage::new(self.width as u32, self.height as u32);
        for (x, y, p) in img.enumerate_pixels_mut() {
            for c in 0..3 {
                let v = self.at(c, y as usize, x as usize).clamp(0.0, 1.0);
                p[c] = (v * 255.0).round() as u8;
            }
        }
        img.save(path)?;
        Ok(())
    }

    /// [1, 3, H, W] tensor.
    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        Ok(Tensor::from_vec(self.data.clone(), (1, 3, self.height, self.width), device)?.to_dtype(dtype)?)
    }

    /// Accepts [3, H, W] or [1, 3, H, W].
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let t = match t.rank() {
            4 if t.dims()[0] == 1 => t.squeeze(0)?,
            3 => t.clone(),
            _ => return Err(shape_err!("expected one RGB image, got {:?}", t.dims())),
        };
        let (c, h, w) = t.dims3()?;
        if c != 3 {
            return Err(shape_err!("expected 3 channels, got {c}"));
        }
        let data = t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
        Self::new(h, w, data)
    }

    /// Mirror left to right.
    pub fn flip_h(&self) -> Self {
        self.remap(self.height, self.width, |y, x| (y, self.width - 1 - x))
    }

    /// Mirror top to bottom.
    pub fn flip_v(&self) -> Self {
        self.remap(self.height, self.width, |y, x| (self.height - 1 - y, x))
    }

    /// Rotate by 90° counter-clockwise.
    pub fn rot90(&self) -> Self {
        self.remap(self.width, self.height, |y, x| (x, self.width - 1 - y))
    }

    /// Output pixel `(y, x)` of an `h × w` result reads source pixel `src(y, x)`.
    fn remap(&self, h: usize, w: usize, src: impl Fn(usize, usize) -> (usize, usize)) -> Self {
        let mut data = Vec::with_capacity(3 * h * w);
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    let (sy, sx) = src(y, x);
                    data.push(self.at(c, sy, sx));
                }
            }
        }
        Self {
            height: h,
            width: w,
            data,
        }
    }

    pub fn map(&self, f: impl Fn(usize, f64) -> f64) -> Self {
        let n = self.height * self.width;
        Self {
            height: self.height,
            width: self.width,
            data: self.data.iter().enumerate().map(|(i, v)| f(i / n, *v)).collect(),
        }
    }

    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Result<Self> {
        if top + h > self.height || left + w > self.width {
            return Err(shape_err!(
                "crop {h}×{w} at ({top}, {left}) outside {}×{}",
                self.height,
                self.width
            ));
        }
        let mut data = Vec::with_capacity(3 * h * w);
        for c in 0..3 {
            for y in top..top + h {
                let row = (c * self.height + y) * self.width;
                data.extend_from_slice(&self.data[row + left..row + left + w]);
            }
        }
        Self::new(h, w, data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.png");
        let data: Vec<f64> = (0..3 * 4 * 5).map(|i| (i % 256) as f64 / 255.0).collect();
        let img = Planar::new(4, 5, data).unwrap();
        img.save(&p).unwrap();
        let back = Planar::load(&p).unwrap();
        for (a, b) in img.data.iter().zip(&back.data) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn tensor_round_trip_and_crop() {
        let data: Vec<f64> = (0..3 * 4 * 6).map(|i| i as f64).collect();
        let img = Planar::new(4, 6, data).unwrap();
        let t = img.to_tensor(DType::F64, &Device::Cpu).unwrap();
        assert_eq!(Planar::from_tensor(&t).unwrap(), img);
        let c = img.crop(1, 2, 2, 3).unwrap();
        assert_eq!(c.at(1, 0, 0), img.at(1, 1, 2));
        assert_eq!(c.at(2, 1, 2), img.at(2, 2, 4));
        assert!(img.crop(3, 0, 2, 2).is_err());
        assert!(Planar::new(2, 2, vec![0.0; 11]).is_err());
    }

    #[test]
    fn geometric_ops() {
        let data: Vec<f64> = (0..3 * 2 * 3).map(|i| i as f64).collect();
        let img = Planar::new(2, 3, data).unwrap();
        let r = img.rot90();
        assert_eq!((r.height, r.width), (3, 2));
        // top-right corner moves to top-left
        assert_eq!(r.at(0, 0, 0), img.at(0, 0, 2));
        assert_eq!(r.rot90().rot90().rot90(), img);
        assert_eq!(img.flip_h().flip_h(), img);
        assert_eq!(img.flip_v().at(1, 0, 1), img.at(1, 1, 1));
        assert_eq!(img.flip_h().at(2, 1, 0), img.at(2, 1, 2));
    }
}
