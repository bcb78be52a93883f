//! Circular horizontal padding for seam-free processing of panoramas, and a
//! meter for how visible the seam is.

use crate::error::{Error, Result};
use crate::raster::{Image, Raster};

pub const PIXEL_PAD: usize = 64;
pub const LATENT_PAD: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    Pixel,
    Latent,
}

impl Granularity {
    pub fn default_amount(self) -> usize {
        match self {
            Granularity::Pixel => PIXEL_PAD,
            Granularity::Latent => LATENT_PAD,
        }
    }
}

/// Columns added on each side.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct PadSpec {
    pub amount: usize,
    pub granularity: Granularity,
}

impl PadSpec {
    pub fn new(amount: usize, granularity: Granularity) -> Self {
        PadSpec { amount, granularity }
    }

    pub fn pixel() -> Self {
        Self::new(PIXEL_PAD, Granularity::Pixel)
    }

    pub fn latent() -> Self {
        Self::new(LATENT_PAD, Granularity::Latent)
    }

    fn check(&self, width: usize) -> Result<()> {
        if self.amount == 0 || 2 * self.amount >= width {
            return Err(Error::domain(format!(
                "pad amount must satisfy 0 < amount < W/2, got {} for W = {width}",
                self.amount
            )));
        }
        Ok(())
    }
}

/// `out[:, k] = in[:, (k − amount) mod W]`.
pub fn pad_circular<T: Copy>(t: &Raster<T>, spec: &PadSpec) -> Result<Raster<T>> {
    let w = t.width();
    spec.check(w)?;
    let a = spec.amount;
    let ch = t.channels();
    let mut data = Vec::with_capacity((w + 2 * a) * t.height() * ch);
    for r in 0..t.height() {
        let row = &t.data()[r * w * ch..(r + 1) * w * ch];
        data.extend_from_slice(&row[(w - a) * ch..]);
        data.extend_from_slice(row);
        data.extend_from_slice(&row[..a * ch]);
    }
    Raster::from_vec(w + 2 * a, t.height(), ch, data)
}

/// Keeps columns `[amount, amount + width)` of a grid padded from `width` columns.
pub fn unpad_center<T: Copy>(t: &Raster<T>, spec: &PadSpec, width: usize) -> Result<Raster<T>> {
    spec.check(width)?;
    if t.width() != width + 2 * spec.amount {
        return Err(Error::domain(format!(
            "padded width {} does not equal {width} + 2·{}",
            t.width(),
            spec.amount
        )));
    }
    t.crop(0, spec.amount, width, t.height())
}

/// Width of the unpadded grid implied by `spec`, for callers that do not know it.
pub fn inner_width(padded: usize, spec: &PadSpec) -> Result<usize> {
    padded
        .checked_sub(2 * spec.amount)
        .filter(|&w| w > 2 * spec.amount)
        .ok_or_else(|| Error::domain(format!("width {padded} is too narrow for padding {}", spec.amount)))
}

/// Mean |column W−1 − column 0| over mean |column j+1 − column j|. About 1
/// when the seam looks like any other column boundary; 0 when the image is
/// horizontally constant.
pub fn seam_discontinuity(img: &Image) -> f64 {
    let (w, h, ch) = (img.width(), img.height(), img.channels());
    if w < 2 || h == 0 {
        return 0.0;
    }
    let mut seam = 0.0f64;
    let mut interior = 0.0f64;
    for r in 0..h {
        for k in 0..ch {
            seam += (img.get(r, w - 1, k) as f64 - img.get(r, 0, k) as f64).abs();
            for c in 0..w - 1 {
                interior += (img.get(r, c + 1, k) as f64 - img.get(r, c, k) as f64).abs();
            }
        }
    }
    let seam = seam / (h * ch) as f64;
    let interior = interior / (h * ch * (w - 1)) as f64;
    if interior == 0.0 {
        if seam == 0.0 { 0.0 } else { f64::INFINITY }
    } else {
        seam / interior
    }
}
