//! Row-major interleaved rasters and PNG/JPEG conversion.
//!
//! Color images are stored as `Raster<f32>` with samples nominally in `[0, 1]`.
//! Latent grids use the same container with arbitrary float values.

use std::io::Cursor;
use std::path::Path;

use image::{DynamicImage, ImageFormat};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Raster<T> {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<T>,
}

/// Color image with `f32` samples in `[0, 1]`.
pub type Image = Raster<f32>;

impl<T: Copy> Raster<T> {
    pub fn filled(width: usize, height: usize, channels: usize, value: T) -> Self {
        Raster {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    pub fn from_vec(width: usize, height: usize, channels: usize, data: Vec<T>) -> Result<Self> {
        if channels == 0 {
            return Err(Error::domain("raster needs at least one channel"));
        }
        if data.len() != width * height * channels {
            return Err(Error::domain(format!(
                "raster data has {} samples, expected {}x{}x{}",
                data.len(),
                height,
                width,
                channels
            )));
        }
        Ok(Raster {
            width,
            height,
            channels,
            data,
        })
    }

    /// Builds a raster by evaluating `f(row, col, channel)` for every sample.
    pub fn from_fn(
        width: usize,
        height: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> T,
    ) -> Self {
        let mut data = Vec::with_capacity(width * height * channels);
        for r in 0..height {
            for c in 0..width {
                for ch in 0..channels {
                    data.push(f(r, c, ch));
                }
            }
        }
        Raster {
            width,
            height,
            channels,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn index(&self, row: usize, col: usize, ch: usize) -> usize {
        (row * self.width + col) * self.channels + ch
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, ch: usize) -> T {
        self.data[self.index(row, col, ch)]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, ch: usize, value: T) {
        let idx = self.index(row, col, ch);
        self.data[idx] = value;
    }

    /// All channels of one pixel.
    pub fn pixel(&self, row: usize, col: usize) -> &[T] {
        let start = self.index(row, col, 0);
        &self.data[start..start + self.channels]
    }

    /// Copies the `height x width` sub-rectangle whose top-left sample is `(row0, col0)`.
    pub fn crop(&self, row0: usize, col0: usize, width: usize, height: usize) -> Result<Self> {
        if row0 + height > self.height || col0 + width > self.width {
            return Err(Error::domain(format!(
                "crop [{row0}+{height}, {col0}+{width}) exceeds raster {}x{}",
                self.height, self.width
            )));
        }
        let mut data = Vec::with_capacity(width * height * self.channels);
        for r in row0..row0 + height {
            let start = self.index(r, col0, 0);
            data.extend_from_slice(&self.data[start..start + width * self.channels]);
        }
        Ok(Raster {
            width,
            height,
            channels: self.channels,
            data,
        })
    }
}

impl Image {
    /// Luma conversion (Rec. 601 weights for RGB, first channel otherwise).
    pub fn to_gray(&self) -> Image {
        match self.channels {
            1 => self.clone(),
            3 | 4 => Raster::from_fn(self.width, self.height, 1, |r, c, _| {
                let p = self.pixel(r, c);
                0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]
            }),
            _ => Raster::from_fn(self.width, self.height, 1, |r, c, _| self.get(r, c, 0)),
        }
    }

    pub fn from_dynamic(img: DynamicImage) -> Image {
        match img {
            DynamicImage::ImageLuma8(g) => {
                let (w, h) = g.dimensions();
                let data = g.into_raw().into_iter().map(|v| v as f32 / 255.0).collect();
                Raster {
                    width: w as usize,
                    height: h as usize,
                    channels: 1,
                    data,
                }
            }
            other => {
                let rgb = other.to_rgb8();
                let (w, h) = rgb.dimensions();
                let data = rgb.into_raw().into_iter().map(|v| v as f32 / 255.0).collect();
                Raster {
                    width: w as usize,
                    height: h as usize,
                    channels: 3,
                    data,
                }
            }
        }
    }

    /// Quantizes to 8 bits per sample. Only 1- and 3-channel images are supported.
    pub fn to_dynamic(&self) -> Result<DynamicImage> {
        let bytes: Vec<u8> = self.data.iter().map(|&v| quantize(v)).collect();
        let (w, h) = (self.width as u32, self.height as u32);
        let img = match self.channels {
            1 => image::GrayImage::from_raw(w, h, bytes).map(DynamicImage::ImageLuma8),
            3 => image::RgbImage::from_raw(w, h, bytes).map(DynamicImage::ImageRgb8),
            n => {
                return Err(Error::Image {
                    path: None,
                    message: format!("cannot encode {n}-channel image"),
                })
            }
        };
        img.ok_or_else(|| Error::Image {
            path: None,
            message: "raster size mismatch".into(),
        })
    }

    pub fn load(path: &Path) -> Result<Image> {
        let img = image::open(path).map_err(|e| Error::Image {
            path: Some(path.to_path_buf()),
            message: e.to_string(),
        })?;
        Ok(Image::from_dynamic(img))
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes = self.encode_png()?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let mut out = Cursor::new(Vec::new());
        self.to_dynamic()?
            .write_to(&mut out, ImageFormat::Png)
            .map_err(|e| Error::Image {
                path: None,
                message: e.to_string(),
            })?;
        Ok(out.into_inner())
    }

    pub fn decode(bytes: &[u8]) -> Result<Image> {
        let img = image::load_from_memory(bytes).map_err(|e| Error::Image {
            path: None,
            message: e.to_string(),
        })?;
        Ok(Image::from_dynamic(img))
    }
}

#[inline]
pub(crate) fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}
