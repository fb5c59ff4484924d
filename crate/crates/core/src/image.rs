//! RGB images in `[0,1]`, binary masks, and their 8-bit PNG encoding.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::error::{Error, Result};

/// Interleaved RGB, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height * 3],
        }
    }

    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        let mut img = Self::new(width, height);
        for px in img.data.chunks_exact_mut(3) {
            px.copy_from_slice(&rgb);
        }
        img
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn same_size(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Rounds every channel to the nearest 8-bit level.
    pub fn quantized(&self) -> Image {
        Image {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| from_u8(to_u8(v))).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self.data.iter().map(|&v| to_u8(v)).collect();
        write_png(path, self.width, self.height, png::ColorType::Rgb, &bytes)
    }

    pub fn load_png(path: &Path) -> Result<Image> {
        let (w, h, color, bytes) = read_png(path)?;
        let data: Vec<f64> = match color {
            png::ColorType::Rgb => bytes.iter().map(|&b| from_u8(b)).collect(),
            png::ColorType::Rgba => bytes
                .chunks_exact(4)
                .flat_map(|c| [c[0], c[1], c[2]])
                .map(from_u8)
                .collect(),
            png::ColorType::Grayscale => bytes
                .iter()
                .flat_map(|&b| [b, b, b])
                .map(from_u8)
                .collect(),
            other => {
                return Err(Error::Png {
                    context: path.display().to_string(),
                    message: format!("unsupported color type {other:?}"),
                })
            }
        };
        Ok(Image {
            width: w,
            height: h,
            data,
        })
    }
}

#[inline]
pub fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

#[inline]
pub fn from_u8(b: u8) -> f64 {
    b as f64 / 255.0
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![false; width * height],
        }
    }

    pub fn full(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![true; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn union(&self, other: &Mask) -> Mask {
        Mask {
            width: self.width,
            height: self.height,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| a || b)
                .collect(),
        }
    }

    pub fn complement(&self) -> Mask {
        Mask {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&b| !b).collect(),
        }
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self.data.iter().map(|&b| if b { 255 } else { 0 }).collect();
        write_png(
            path,
            self.width,
            self.height,
            png::ColorType::Grayscale,
            &bytes,
        )
    }

    pub fn load_png(path: &Path) -> Result<Mask> {
        let (w, h, color, bytes) = read_png(path)?;
        let stride = match color {
            png::ColorType::Grayscale => 1,
            png::ColorType::GrayscaleAlpha => 2,
            png::ColorType::Rgb => 3,
            png::ColorType::Rgba => 4,
            other => {
                return Err(Error::Png {
                    context: path.display().to_string(),
                    message: format!("unsupported color type {other:?}"),
                })
            }
        };
        Ok(Mask {
            width: w,
            height: h,
            data: bytes.chunks_exact(stride).map(|c| c[0] >= 128).collect(),
        })
    }
}

fn write_png(path: &Path, w: usize, h: usize, color: png::ColorType, bytes: &[u8]) -> Result<()> {
    let ctx = || path.display().to_string();
    let file = File::create(path).map_err(|e| Error::io(format!("create {}", ctx()), e))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    encoder.set_color(color);
    encoder.set_depth(png::BitDepth::Eight);
    let png_err = |e: png::EncodingError| Error::Png {
        context: ctx(),
        message: e.to_string(),
    };
    let mut writer = encoder.write_header().map_err(png_err)?;
    writer.write_image_data(bytes).map_err(png_err)?;
    writer.finish().map_err(png_err)
}

fn read_png(path: &Path) -> Result<(usize, usize, png::ColorType, Vec<u8>)> {
    let ctx = || path.display().to_string();
    let file = File::open(path).map_err(|e| Error::io(format!("open {}", ctx()), e))?;
    let png_err = |e: png::DecodingError| Error::Png {
        context: ctx(),
        message: e.to_string(),
    };
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder.read_info().map_err(png_err)?;
    let mut buf = vec![0u8; reader.output_buffer_size().unwrap_or(0)];
    let info = reader.next_frame(&mut buf).map_err(png_err)?;
    buf.truncate(info.buffer_size());
    Ok((info.width as usize, info.height as usize, info.color_type, buf))
}

pub fn mse(a: &Image, b: &Image) -> f64 {
    debug_assert!(a.same_size(b));
    // Running mean: a constant difference reproduces its square exactly.
    let mut m = 0.0;
    for (k, (x, y)) in a.data.iter().zip(&b.data).enumerate() {
        m += ((x - y) * (x - y) - m) / (k + 1) as f64;
    }
    m
}

/// Peak signal-to-noise ratio for unit-range images, in dB.
pub fn psnr(a: &Image, b: &Image) -> f64 {
    let m = mse(a, b);
    if m == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * m.log10()
    }
}

/// Mean absolute channel error over the pixels selected by `mask`
/// (all pixels when `None`). Returns 0 for an empty selection.
pub fn masked_mae(a: &Image, b: &Image, mask: Option<&Mask>) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for p in 0..a.pixel_count() {
        if mask.map_or(true, |m| m.data[p]) {
            for c in 0..3 {
                sum += (a.data[p * 3 + c] - b.data[p * 3 + c]).abs();
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
