//! RGB images in `[-1, 1]` and the synthetic datasets used for training and
//! evaluation.

pub mod synth;

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Square RGB image, channel-major (`[3, size, size]`), values in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub size: usize,
    pub data: Vec<f32>,
}

fn to_u8(v: f32) -> u8 {
    (((v.clamp(-1.0, 1.0) + 1.0) * 0.5) * 255.0).round() as u8
}

fn from_u8(v: u8) -> f32 {
    v as f32 / 255.0 * 2.0 - 1.0
}

impl Image {
    pub fn filled(size: usize, rgb: [f32; 3]) -> Image {
        let mut data = Vec::with_capacity(3 * size * size);
        for c in rgb {
            data.extend(std::iter::repeat_n(c * 2.0 - 1.0, size * size));
        }
        Image { size, data }
    }

    /// Pixel in `[0, 1]` RGB.
    pub fn rgb(&self, y: usize, x: usize) -> [f32; 3] {
        let n = self.size * self.size;
        let i = y * self.size + x;
        [0, 1, 2].map(|c| (self.data[c * n + i] + 1.0) * 0.5)
    }

    pub fn set_rgb(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        let n = self.size * self.size;
        let i = y * self.size + x;
        for (c, v) in rgb.into_iter().enumerate() {
            self.data[c * n + i] = v * 2.0 - 1.0;
        }
    }

    /// 8-bit interleaved RGB, as written to PNG.
    pub fn to_rgb8(&self) -> Vec<u8> {
        let n = self.size * self.size;
        let mut out = Vec::with_capacity(3 * n);
        for i in 0..n {
            for c in 0..3 {
                out.push(to_u8(self.data[c * n + i]));
            }
        }
        out
    }

    pub fn from_rgb8(size: usize, bytes: &[u8]) -> Result<Image> {
        let n = size * size;
        if bytes.len() != 3 * n {
            return Err(Error::contract(format!("{} bytes for a {size}x{size} RGB image", bytes.len())));
        }
        let mut data = vec![0.0; 3 * n];
        for i in 0..n {
            for c in 0..3 {
                data[c * n + i] = from_u8(bytes[3 * i + c]);
            }
        }
        Ok(Image { size, data })
    }

    /// The image as it would read back from an 8-bit PNG.
    pub fn quantized(&self) -> Image {
        Image::from_rgb8(self.size, &self.to_rgb8()).expect("same size")
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let s = self.size as u32;
        image::save_buffer(path, &self.to_rgb8(), s, s, image::ExtendedColorType::Rgb8)?;
        Ok(())
    }

    pub fn load_png(path: &Path) -> Result<Image> {
        let img = image::open(path)?.to_rgb8();
        if img.width() != img.height() {
            return Err(Error::contract(format!(
                "{}: expected a square image, got {}x{}",
                path.display(),
                img.width(),
                img.height()
            )));
        }
        Image::from_rgb8(img.width() as usize, img.as_raw())
    }

    /// Stacks images into a `[n, 3, size, size]` tensor.
    pub fn batch<T: Element>(images: &[&Image]) -> Result<Tensor<T>> {
        let size = images.first().map_or(0, |i| i.size);
        if images.iter().any(|i| i.size != size) {
            return Err(Error::contract("images in a batch must share a size"));
        }
        let data = images.iter().flat_map(|i| i.data.iter().map(|v| T::from_f64(*v as f64))).collect();
        Tensor::new(data, &[images.len(), 3, size, size])
    }

    /// Image `index` of a `[n, 3, s, s]` tensor, clamped to `[-1, 1]`.
    pub fn from_tensor<T: Element>(t: &Tensor<T>, index: usize) -> Result<Image> {
        let s = t.shape();
        if s.len() != 4 || s[1] != 3 || s[2] != s[3] || index >= s[0] {
            return Err(Error::contract(format!("cannot take image {index} from tensor {s:?}")));
        }
        let n = 3 * s[2] * s[3];
        let data = t.data()[index * n..(index + 1) * n]
            .iter()
            .map(|v| (v.as_f64() as f32).clamp(-1.0, 1.0))
            .collect();
        Ok(Image { size: s[2], data })
    }
}

/// Tiles equally sized images into rows, separated by a 2-pixel gap.
pub fn grid(rows: &[Vec<Image>]) -> Result<(usize, usize, Vec<u8>)> {
    let size = rows
        .iter()
        .flatten()
        .next()
        .map(|i| i.size)
        .ok_or_else(|| Error::contract("empty grid"))?;
    let gap = 2;
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let width = cols * size + (cols + 1) * gap;
    let height = rows.len() * size + (rows.len() + 1) * gap;
    let mut buf = vec![255u8; width * height * 3];
    for (r, row) in rows.iter().enumerate() {
        for (c, img) in row.iter().enumerate() {
            if img.size != size {
                return Err(Error::contract("grid images must share a size"));
            }
            let rgb = img.to_rgb8();
            let (oy, ox) = (gap + r * (size + gap), gap + c * (size + gap));
            for y in 0..size {
                let dst = ((oy + y) * width + ox) * 3;
                buf[dst..dst + size * 3].copy_from_slice(&rgb[y * size * 3..(y + 1) * size * 3]);
            }
        }
    }
    Ok((width, height, buf))
}

pub fn save_grid(path: &Path, rows: &[Vec<Image>]) -> Result<()> {
    let (w, h, buf) = grid(rows)?;
    image::save_buffer(path, &buf, w as u32, h as u32, image::ExtendedColorType::Rgb8)?;
    Ok(())
}
