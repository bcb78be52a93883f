//! Equirectangular pixel space, spherical angles and unit-sphere coordinates.
//!
//! Pixel convention is edge-anchored: continuous column `j` maps to longitude
//! `2πj/W − π` and continuous row `i` to latitude `π/2 − πi/H`. Integer pixel
//! indices therefore sit on exact multiples of the angular pitch, so the seam
//! between column `W − 1` and column `0` is one pitch wide like every other
//! horizontal neighbor pair.

use std::f64::consts::{FRAC_PI_2, PI, TAU};
use std::ops::Deref;
use std::path::Path;

use crate::error::{Error, Result};
use crate::raster::Image;

/// Longitude/latitude pair in radians, `lambda ∈ [−π, π)`, `phi ∈ [−π/2, π/2]`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SphericalCoord {
    lambda: f64,
    phi: f64,
}

impl SphericalCoord {
    /// Normalizes `lambda` into `[−π, π)`. `phi` must be a valid latitude.
    pub fn new(lambda: f64, phi: f64) -> Result<Self> {
        if !lambda.is_finite() || !phi.is_finite() {
            return Err(Error::domain("spherical coordinate must be finite"));
        }
        if phi.abs() > FRAC_PI_2 + 1e-12 {
            return Err(Error::domain(format!("latitude {phi} outside [-pi/2, pi/2]")));
        }
        Ok(SphericalCoord {
            lambda: wrap_longitude(lambda),
            phi: phi.clamp(-FRAC_PI_2, FRAC_PI_2),
        })
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn phi(&self) -> f64 {
        self.phi
    }
}

/// Wraps an angle into `[−π, π)`.
pub fn wrap_longitude(lambda: f64) -> f64 {
    let mut l = (lambda + PI).rem_euclid(TAU) - PI;
    // rem_euclid can round up to exactly TAU for inputs just below a multiple
    if l >= PI {
        l -= TAU;
    }
    l
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct UnitVector {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl UnitVector {
    /// Accepts components whose norm is within `1e−6` of one.
    pub fn new(x: f64, y: f64, z: f64) -> Result<Self> {
        let n = (x * x + y * y + z * z).sqrt();
        if !n.is_finite() || (n - 1.0).abs() > 1e-6 {
            return Err(Error::domain(format!("vector norm {n} is not unit")));
        }
        Ok(UnitVector { x, y, z })
    }

    /// Scales a non-zero vector onto the sphere.
    pub fn normalize(x: f64, y: f64, z: f64) -> Result<Self> {
        let n = (x * x + y * y + z * z).sqrt();
        if !n.is_finite() || n <= 0.0 {
            return Err(Error::domain("cannot normalize a zero or non-finite vector"));
        }
        Ok(UnitVector {
            x: x / n,
            y: y / n,
            z: z / n,
        })
    }

    pub fn norm(&self) -> f64 {
        (self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn dot(&self, other: &UnitVector) -> f64 {
        self.x * other.x + self.y * other.y + self.z * other.z
    }

    /// Great-circle angle to `other`, radians.
    pub fn angle_to(&self, other: &UnitVector) -> f64 {
        let cross = [
            self.y * other.z - self.z * other.y,
            self.z * other.x - self.x * other.z,
            self.x * other.y - self.y * other.x,
        ];
        let s = (cross[0] * cross[0] + cross[1] * cross[1] + cross[2] * cross[2]).sqrt();
        s.atan2(self.dot(other))
    }

    pub fn to_array(&self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }
}

/// Continuous ERP position `(row, col)` to longitude/latitude.
///
/// Accepts `0 ≤ i ≤ H` and `0 ≤ j ≤ W`; `j = W` wraps onto the seam at `−π`.
pub fn erp_to_spherical(i: f64, j: f64, height: usize, width: usize) -> Result<SphericalCoord> {
    if height == 0 || width == 0 {
        return Err(Error::domain("ERP dimensions must be positive"));
    }
    let (h, w) = (height as f64, width as f64);
    if !(0.0..=h).contains(&i) || !(0.0..=w).contains(&j) {
        return Err(Error::domain(format!(
            "ERP position ({i}, {j}) outside [0, {h}] x [0, {w}]"
        )));
    }
    let lambda = TAU * j / w - PI;
    let phi = FRAC_PI_2 - PI * i / h;
    SphericalCoord::new(lambda, phi)
}

/// `p = (cosφ cosλ, cosφ sinλ, sinφ)`. Exact poles return `(0, 0, ±1)`.
pub fn spherical_to_cartesian(c: SphericalCoord) -> UnitVector {
    if c.phi == FRAC_PI_2 {
        return UnitVector { x: 0.0, y: 0.0, z: 1.0 };
    }
    if c.phi == -FRAC_PI_2 {
        return UnitVector { x: 0.0, y: 0.0, z: -1.0 };
    }
    let (sl, cl) = c.lambda.sin_cos();
    let (sp, cp) = c.phi.sin_cos();
    UnitVector {
        x: cp * cl,
        y: cp * sl,
        z: sp,
    }
}

/// Inverse of the sphere mapping: returns continuous `(row, col)` with `col ∈ [0, W)`.
///
/// At the poles longitude is undefined and `col = 0` is returned.
pub fn cartesian_to_erp(p: UnitVector, height: usize, width: usize) -> Result<(f64, f64)> {
    let n = p.norm();
    if !n.is_finite() || (n - 1.0).abs() > 1e-6 {
        return Err(Error::domain(format!("vector norm {n} is not unit")));
    }
    let (h, w) = (height as f64, width as f64);
    let phi = (p.z / n).clamp(-1.0, 1.0).asin();
    let i = (FRAC_PI_2 - phi) * h / PI;
    let horiz = p.x.hypot(p.y);
    if horiz < 1e-12 {
        return Ok((i, 0.0));
    }
    let lambda = p.y.atan2(p.x);
    let mut j = (lambda + PI) * w / TAU;
    if j >= w {
        j -= w;
    }
    if j < 0.0 {
        j += w;
    }
    Ok((i, j))
}

/// Equirectangular panorama. Width is always twice the height.
#[derive(Debug, Clone, PartialEq)]
pub struct ErpImage(Image);

impl ErpImage {
    pub fn new(img: Image) -> Result<Self> {
        if img.width() != 2 * img.height() || img.height() == 0 {
            return Err(Error::domain(format!(
                "equirectangular image must be 2:1, got {}x{} (width x height)",
                img.width(),
                img.height()
            )));
        }
        Ok(ErpImage(img))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let img = Image::load(path)?;
        ErpImage::new(img).map_err(|e| Error::Image {
            path: Some(path.to_path_buf()),
            message: e.to_string(),
        })
    }

    pub fn image(&self) -> &Image {
        &self.0
    }

    pub fn into_image(self) -> Image {
        self.0
    }
}

impl Deref for ErpImage {
    type Target = Image;

    fn deref(&self) -> &Image {
        &self.0
    }
}

/// Rotates a panorama about the vertical axis by `degrees` of longitude.
///
/// Output column `k` takes input column `k − s` (mod W) with `s = W·degrees/360`.
/// Whole-column shifts copy pixels; other angles interpolate linearly with wrap.
pub fn rotate_yaw(img: &ErpImage, degrees: f64) -> Result<ErpImage> {
    if !degrees.is_finite() {
        return Err(Error::domain("rotation angle must be finite"));
    }
    let w = img.width();
    let shift = w as f64 * degrees / 360.0;
    let rounded = shift.round();
    let src = img.image();
    let ch = src.channels();
    let out = if (shift - rounded).abs() < 1e-9 {
        let s = (rounded as i64).rem_euclid(w as i64) as usize;
        Image::from_fn(w, img.height(), ch, |r, c, k| src.get(r, (c + w - s) % w, k))
    } else {
        let s = shift.rem_euclid(w as f64);
        Image::from_fn(w, img.height(), ch, |r, c, k| {
            let x = (c as f64 - s).rem_euclid(w as f64);
            let x0 = x.floor();
            let t = (x - x0) as f32;
            let c0 = x0 as usize % w;
            let c1 = (c0 + 1) % w;
            src.get(r, c0, k) * (1.0 - t) + src.get(r, c1, k) * t
        })
    };
    ErpImage::new(out)
}
