//! Planar float images and bilinear resampling.

use std::path::Path;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::scalar::Scalar;

pub const CHANNELS: usize = 3;

/// Three-channel planar (CHW) image with values nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![0.0; CHANNELS * width * height] }
    }

    pub fn from_planes(width: usize, height: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), CHANNELS * width * height, "image plane size");
        Self { width, height, data }
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Self {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut data = vec![0.0; CHANNELS * w * h];
        for (x, y, px) in img.enumerate_pixels() {
            let i = y as usize * w + x as usize;
            for c in 0..CHANNELS {
                data[c * w * h + i] = f32::from(px[c]) / 255.0;
            }
        }
        Self { width: w, height: h, data }
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        image::RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let px = |c| (self.get(c, x as usize, y as usize).clamp(0.0, 1.0) * 255.0).round() as u8;
            image::Rgb([px(0), px(1), px(2)])
        })
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8()
            .save(path)
            .map_err(|e| Error::Image { path: path.to_path_buf(), message: e.to_string() })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.width * self.height;
        &self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn get(&self, c: usize, x: usize, y: usize) -> f32 {
        self.data[c * self.width * self.height + y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, x: usize, y: usize, v: f32) {
        let (w, h) = (self.width, self.height);
        self.data[c * w * h + y * w + x] = v;
    }

    pub fn channel_means(&self) -> [f32; CHANNELS] {
        let n = (self.width * self.height).max(1) as f64;
        let mut out = [0.0; CHANNELS];
        for (c, o) in out.iter_mut().enumerate() {
            *o = (self.plane(c).iter().map(|&v| f64::from(v)).sum::<f64>() / n) as f32;
        }
        out
    }

    /// Bilinear sample at continuous pixel-index coordinates, edge-clamped.
    pub fn sample(&self, c: usize, x: f64, y: f64) -> f32 {
        bilinear(self.plane(c), self.width, self.height, x, y)
    }

    /// Non-overlapping `patch×patch` patches as rows, each flattened
    /// channel-major (`c, dy, dx`).
    pub fn patchify<T: Scalar>(&self, patch: usize) -> Matrix<T> {
        assert!(self.width % patch == 0 && self.height % patch == 0, "image not divisible into patches");
        let (gw, gh) = (self.width / patch, self.height / patch);
        let dim = CHANNELS * patch * patch;
        let mut out = Matrix::zeros(gw * gh, dim);
        for gy in 0..gh {
            for gx in 0..gw {
                let row = out.row_mut(gy * gw + gx);
                let mut k = 0;
                for c in 0..CHANNELS {
                    for dy in 0..patch {
                        for dx in 0..patch {
                            row[k] = T::from_f32(self.get(c, gx * patch + dx, gy * patch + dy)).unwrap();
                            k += 1;
                        }
                    }
                }
            }
        }
        out
    }
}

fn bilinear(plane: &[f32], w: usize, h: usize, x: f64, y: f64) -> f32 {
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (ax, ay) = (x - x0 as f64, y - y0 as f64);
    let p = |xx: usize, yy: usize| f64::from(plane[yy * w + xx]);
    let top = (1.0 - ax) * p(x0, y0) + ax * p(x1, y0);
    let bottom = (1.0 - ax) * p(x0, y1) + ax * p(x1, y1);
    ((1.0 - ay) * top + ay * bottom) as f32
}

/// Half-pixel-centre bilinear resize of one plane.
pub fn resample_plane(src: &[f32], sw: usize, sh: usize, tw: usize, th: usize) -> Vec<f32> {
    let (fx, fy) = (sw as f64 / tw as f64, sh as f64 / th as f64);
    let mut out = Vec::with_capacity(tw * th);
    for ty in 0..th {
        let sy = (ty as f64 + 0.5) * fy - 0.5;
        for tx in 0..tw {
            let sx = (tx as f64 + 0.5) * fx - 0.5;
            out.push(bilinear(src, sw, sh, sx, sy));
        }
    }
    out
}
