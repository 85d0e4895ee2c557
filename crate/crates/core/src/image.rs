//! Plain image buffers and PNG I/O.

use std::io::Cursor;

use crate::error::{Error, Result};
use crate::numerics::{Element, Tensor};

/// Interleaved (HWC) RGB image with values nominally in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        RgbImage { width, height, data: vec![0.0; width * height * 3] }
    }

    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&rgb);
        }
        RgbImage { width, height, data }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Planar [3, H, W] tensor mapped from [0, 1] to the model range [-1, 1].
    pub fn to_latent<T: Element>(&self) -> Tensor<T> {
        let hw = self.width * self.height;
        let mut out = vec![T::zero(); 3 * hw];
        for p in 0..hw {
            for c in 0..3 {
                out[c * hw + p] = T::from_f64(self.data[p * 3 + c] * 2.0 - 1.0);
            }
        }
        Tensor::new(&[3, self.height, self.width], out).expect("latent shape")
    }

    /// Inverse of [`RgbImage::to_latent`], clamped to [0, 1].
    pub fn from_latent<T: Element>(t: &Tensor<T>) -> Result<Self> {
        let s = t.shape();
        if s.len() != 3 || s[0] != 3 {
            return Err(Error::Shape(format!("expected [3,H,W] latent, got {s:?}")));
        }
        let (h, w) = (s[1], s[2]);
        let hw = h * w;
        let d = t.data();
        let mut data = vec![0.0; hw * 3];
        for p in 0..hw {
            for c in 0..3 {
                data[p * 3 + c] = ((d[c * hw + p].as_f64() + 1.0) * 0.5).clamp(0.0, 1.0);
            }
        }
        Ok(RgbImage { width: w, height: h, data })
    }

    pub fn to_png(&self, alpha: Option<&[f64]>) -> Result<Vec<u8>> {
        let mut rgba = Vec::with_capacity(self.width * self.height * 4);
        for p in 0..self.width * self.height {
            for c in 0..3 {
                rgba.push(to_u8(self.data[p * 3 + c]));
            }
            rgba.push(alpha.map_or(255, |a| to_u8(a[p])));
        }
        encode_png(self.width, self.height, png::ColorType::Rgba, &rgba)
    }

    pub fn from_png(bytes: &[u8]) -> Result<Self> {
        let decoder = png::Decoder::new(Cursor::new(bytes));
        let mut reader = decoder.read_info().map_err(png_err)?;
        let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
        let info = reader.next_frame(&mut buf).map_err(png_err)?;
        if info.bit_depth != png::BitDepth::Eight {
            return Err(Error::InvalidArgument("only 8-bit PNGs are supported".into()));
        }
        let channels = match info.color_type {
            png::ColorType::Rgb => 3,
            png::ColorType::Rgba => 4,
            other => return Err(Error::InvalidArgument(format!("unsupported PNG color type {other:?}"))),
        };
        let (w, h) = (info.width as usize, info.height as usize);
        let mut img = RgbImage::new(w, h);
        for p in 0..w * h {
            for c in 0..3 {
                img.data[p * 3 + c] = buf[p * channels + c] as f64 / 255.0;
            }
        }
        Ok(img)
    }

    /// Mean absolute difference over the pixels where `select` holds.
    pub fn masked_l1(&self, other: &RgbImage, select: impl Fn(usize) -> bool) -> f64 {
        let mut sum = 0.0;
        let mut n = 0usize;
        for p in 0..self.width * self.height {
            if select(p) {
                for c in 0..3 {
                    sum += (self.data[p * 3 + c] - other.data[p * 3 + c]).abs();
                }
                n += 3;
            }
        }
        if n == 0 {
            0.0
        } else {
            sum / n as f64
        }
    }
}

/// Binary per-pixel mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize) -> Self {
        Mask { width, height, data: vec![false; width * height] }
    }

    pub fn full(width: usize, height: usize) -> Self {
        Mask { width, height, data: vec![true; width * height] }
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn to_png(&self) -> Result<Vec<u8>> {
        let px: Vec<u8> = self.data.iter().map(|&b| if b { 255 } else { 0 }).collect();
        encode_png(self.width, self.height, png::ColorType::Grayscale, &px)
    }
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn png_err(e: impl std::fmt::Display) -> Error {
    Error::InvalidArgument(format!("png: {e}"))
}

fn encode_png(width: usize, height: usize, color: png::ColorType, pixels: &[u8]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, width as u32, height as u32);
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(png_err)?;
        writer.write_image_data(pixels).map_err(png_err)?;
    }
    Ok(out)
}
