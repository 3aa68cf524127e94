//! In-memory image type and 8-bit PNG IO.
//!
//! Pixels are reals in [0, 1], stored H x W x C. PNG load divides by 255,
//! save multiplies by 255 and rounds, so a save/load round-trip is exact at
//! 8-bit precision.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use ndarray::{Array2, Array3};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    data: Array3<f64>,
}

impl Image {
    /// Validates pixel range and non-empty dimensions.
    pub fn new(data: Array3<f64>) -> Result<Self> {
        let (h, w, c) = data.dim();
        if h == 0 || w == 0 || c == 0 {
            return Err(Error::ShapeMismatch(format!(
                "image dims must be positive, got {h}x{w}x{c}"
            )));
        }
        for &v in data.iter() {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::PixelOutOfRange(v));
            }
        }
        Ok(Self { data })
    }

    /// Clamps values into [0, 1] and constructs.
    pub fn clamped(mut data: Array3<f64>) -> Self {
        data.mapv_inplace(|v| v.clamp(0.0, 1.0));
        Self { data }
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        assert!((0.0..=1.0).contains(&value));
        Self {
            data: Array3::from_elem((height, width, channels), value),
        }
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }

    pub fn channels(&self) -> usize {
        self.data.dim().2
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut Array3<f64> {
        &mut self.data
    }

    pub fn into_data(self) -> Array3<f64> {
        self.data
    }

    /// Channel-first copy for the network side.
    pub fn to_chw(&self) -> Array3<f64> {
        let (h, w, c) = self.data.dim();
        let mut out = Array3::zeros((c, h, w));
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    out[[ch, y, x]] = self.data[[y, x, ch]];
                }
            }
        }
        out
    }

    pub fn from_chw(chw: &Array3<f64>) -> Self {
        let (c, h, w) = chw.dim();
        let mut out = Array3::zeros((h, w, c));
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    out[[y, x, ch]] = chw[[ch, y, x]].clamp(0.0, 1.0);
                }
            }
        }
        Self { data: out }
    }

    /// Loads an 8-bit PNG. Grayscale maps to 1 channel, RGB to 3; an alpha
    /// channel, if present, is dropped (use [`Sprite::load_png`] to keep it).
    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let (pixels, w, h, color_channels, has_alpha) = decode_png(path)?;
        let step = color_channels + usize::from(has_alpha);
        let mut data = Array3::zeros((h, w, color_channels));
        for y in 0..h {
            for x in 0..w {
                for c in 0..color_channels {
                    data[[y, x, c]] = f64::from(pixels[(y * w + x) * step + c]) / 255.0;
                }
            }
        }
        Image::new(data)
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let (h, w, c) = self.data.dim();
        let color = match c {
            1 => png::ColorType::Grayscale,
            3 => png::ColorType::Rgb,
            _ => {
                return Err(Error::Png(format!(
                    "cannot encode {c}-channel image as png (expected 1 or 3)"
                )))
            }
        };
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut encoder = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
        encoder.set_color(color);
        encoder.set_depth(png::BitDepth::Eight);
        let mut writer = encoder
            .write_header()
            .map_err(|e| Error::Png(e.to_string()))?;
        let mut bytes = Vec::with_capacity(h * w * c);
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    bytes.push((self.data[[y, x, ch]] * 255.0).round() as u8);
                }
            }
        }
        writer
            .write_image_data(&bytes)
            .map_err(|e| Error::Png(e.to_string()))?;
        Ok(())
    }
}

/// An occluder image with an alpha channel for compositing.
#[derive(Debug, Clone)]
pub struct Sprite {
    pub color: Array3<f64>,
    pub alpha: Array2<f64>,
}

impl Sprite {
    pub fn new(color: Array3<f64>, alpha: Array2<f64>) -> Result<Self> {
        let (h, w, _) = color.dim();
        if alpha.dim() != (h, w) {
            return Err(Error::ShapeMismatch(format!(
                "sprite alpha {:?} does not match color {:?}",
                alpha.dim(),
                color.dim()
            )));
        }
        for &v in color.iter().chain(alpha.iter()) {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::PixelOutOfRange(v));
            }
        }
        Ok(Self { color, alpha })
    }

    pub fn height(&self) -> usize {
        self.color.dim().0
    }

    pub fn width(&self) -> usize {
        self.color.dim().1
    }

    pub fn channels(&self) -> usize {
        self.color.dim().2
    }

    /// Loads a PNG keeping its alpha channel; a PNG without alpha loads as
    /// fully opaque.
    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let (pixels, w, h, color_channels, has_alpha) = decode_png(path)?;
        let step = color_channels + usize::from(has_alpha);
        let mut color = Array3::zeros((h, w, color_channels));
        let mut alpha = Array2::from_elem((h, w), 1.0);
        for y in 0..h {
            for x in 0..w {
                for c in 0..color_channels {
                    color[[y, x, c]] = f64::from(pixels[(y * w + x) * step + c]) / 255.0;
                }
                if has_alpha {
                    alpha[[y, x]] =
                        f64::from(pixels[(y * w + x) * step + color_channels]) / 255.0;
                }
            }
        }
        Sprite::new(color, alpha)
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let (h, w, c) = self.color.dim();
        let colorel = match c {
            1 => png::ColorType::GrayscaleAlpha,
            3 => png::ColorType::Rgba,
            _ => {
                return Err(Error::Png(format!(
                    "cannot encode {c}-channel sprite as png (expected 1 or 3)"
                )))
            }
        };
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut encoder = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
        encoder.set_color(colorel);
        encoder.set_depth(png::BitDepth::Eight);
        let mut writer = encoder
            .write_header()
            .map_err(|e| Error::Png(e.to_string()))?;
        let mut bytes = Vec::with_capacity(h * w * (c + 1));
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    bytes.push((self.color[[y, x, ch]] * 255.0).round() as u8);
                }
                bytes.push((self.alpha[[y, x]] * 255.0).round() as u8);
            }
        }
        writer
            .write_image_data(&bytes)
            .map_err(|e| Error::Png(e.to_string()))?;
        Ok(())
    }
}

/// Returns (bytes, width, height, color_channels, has_alpha) at 8-bit depth.
fn decode_png(path: &Path) -> Result<(Vec<u8>, usize, usize, usize, bool)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let decoder = png::Decoder::new(std::io::BufReader::new(file));
    let mut reader = decoder.read_info().map_err(|e| Error::Png(e.to_string()))?;
    let mut buf = vec![0u8; reader.output_buffer_size().unwrap_or(0)];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::Png(e.to_string()))?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(Error::Png(format!(
            "only 8-bit png supported, got {:?}",
            info.bit_depth
        )));
    }
    let (color_channels, has_alpha) = match info.color_type {
        png::ColorType::Grayscale => (1, false),
        png::ColorType::GrayscaleAlpha => (1, true),
        png::ColorType::Rgb => (3, false),
        png::ColorType::Rgba => (3, true),
        other => return Err(Error::Png(format!("unsupported color type {other:?}"))),
    };
    buf.truncate(info.buffer_size());
    Ok((
        buf,
        info.width as usize,
        info.height as usize,
        color_channels,
        has_alpha,
    ))
}
