//! Gnomonic perspective views of equirectangular panoramas.
//!
//! A view pixel at continuous `(row, col)` is the ray through the pinhole at
//! camera-plane offset `(col − w/2, h/2 − row)` with focal length
//! `(w/2) / tan(fov/2)`; square pixels, so the vertical FOV follows from the
//! aspect ratio. As on the ERP side, integer indices are edge-anchored: the
//! optical axis passes through pixel `(h/2, w/2)`.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::maskops::Mask;
use crate::raster::Image;
use crate::sphere::{cartesian_to_erp, erp_to_spherical, spherical_to_cartesian, ErpImage, UnitVector};

/// Perspective camera looking out from the sphere center.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Viewport {
    /// Longitude of the optical axis, radians.
    pub yaw: f64,
    /// Latitude of the optical axis, radians.
    pub pitch: f64,
    /// Horizontal field of view, degrees.
    pub fov: f64,
    pub out_w: usize,
    pub out_h: usize,
}

impl Viewport {
    pub fn new(yaw: f64, pitch: f64, fov: f64, out_w: usize, out_h: usize) -> Result<Self> {
        let vp = Viewport {
            yaw,
            pitch,
            fov,
            out_w,
            out_h,
        };
        vp.validate()?;
        Ok(vp)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fov > 0.0 && self.fov < 180.0) {
            return Err(Error::domain(format!("fov {} must lie in (0, 180)", self.fov)));
        }
        if !self.yaw.is_finite() || self.pitch.is_nan() || self.pitch.abs() > std::f64::consts::FRAC_PI_2 {
            return Err(Error::domain(format!(
                "viewport center (yaw {}, pitch {}) invalid",
                self.yaw, self.pitch
            )));
        }
        if self.out_w == 0 || self.out_h == 0 {
            return Err(Error::domain("viewport resolution must be positive"));
        }
        Ok(())
    }

    pub fn focal_length(&self) -> f64 {
        (self.out_w as f64 / 2.0) / (self.fov.to_radians() / 2.0).tan()
    }

    /// Vertical field of view in degrees.
    pub fn vertical_fov(&self) -> f64 {
        2.0 * ((self.out_h as f64 / 2.0) / self.focal_length()).atan().to_degrees()
    }

    /// Angle between the optical axis and the farthest image corner, radians.
    pub fn corner_angle(&self) -> f64 {
        let hw = self.out_w as f64 / 2.0;
        let hh = self.out_h as f64 / 2.0;
        hw.hypot(hh).atan2(self.focal_length())
    }

    fn basis(&self) -> CameraBasis {
        let (sl, cl) = self.yaw.sin_cos();
        let (sp, cp) = self.pitch.sin_cos();
        CameraBasis {
            forward: [cp * cl, cp * sl, sp],
            right: [-sl, cl, 0.0],
            up: [-sp * cl, -sp * sl, cp],
            focal: self.focal_length(),
            half_w: self.out_w as f64 / 2.0,
            half_h: self.out_h as f64 / 2.0,
        }
    }

    /// Unit ray through continuous view position `(row, col)`.
    pub fn ray(&self, row: f64, col: f64) -> UnitVector {
        self.basis().ray(row, col)
    }

    /// Projects a sphere point into continuous view coordinates `(row, col)`.
    /// Points behind the camera yield `None`; the result may lie outside the image.
    pub fn project_point(&self, p: &UnitVector) -> Option<(f64, f64)> {
        self.basis().project(p)
    }
}

struct CameraBasis {
    forward: [f64; 3],
    right: [f64; 3],
    up: [f64; 3],
    focal: f64,
    half_w: f64,
    half_h: f64,
}

impl CameraBasis {
    fn ray(&self, row: f64, col: f64) -> UnitVector {
        let x = col - self.half_w;
        let y = self.half_h - row;
        let d: [f64; 3] =
            std::array::from_fn(|k| self.focal * self.forward[k] + x * self.right[k] + y * self.up[k]);
        // non-zero: the forward component is always `focal > 0`
        UnitVector::normalize(d[0], d[1], d[2]).expect("camera ray has positive forward component")
    }

    fn project(&self, p: &UnitVector) -> Option<(f64, f64)> {
        let v = p.to_array();
        let dot = |a: &[f64; 3]| a[0] * v[0] + a[1] * v[1] + a[2] * v[2];
        let z = dot(&self.forward);
        if z <= 1e-12 {
            return None;
        }
        let x = self.focal * dot(&self.right) / z;
        let y = self.focal * dot(&self.up) / z;
        Some((self.half_h - y, x + self.half_w))
    }
}

/// Continuous ERP source position for every view pixel, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplingGrid {
    width: usize,
    height: usize,
    coords: Vec<(f64, f64)>,
}

impl SamplingGrid {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// ERP `(row, col)` sampled by view pixel `(row, col)`; `col ∈ [0, W)`.
    pub fn at(&self, row: usize, col: usize) -> (f64, f64) {
        self.coords[row * self.width + col]
    }

    pub fn coords(&self) -> &[(f64, f64)] {
        &self.coords
    }
}

pub fn compute_sampling_grid(vp: &Viewport, height: usize, width: usize) -> Result<SamplingGrid> {
    vp.validate()?;
    if height == 0 || width == 0 {
        return Err(Error::domain("ERP dimensions must be positive"));
    }
    let basis = vp.basis();
    let mut coords = vec![(0.0, 0.0); vp.out_w * vp.out_h];
    coords
        .par_chunks_mut(vp.out_w)
        .enumerate()
        .try_for_each(|(r, row)| -> Result<()> {
            for (c, slot) in row.iter_mut().enumerate() {
                let ray = basis.ray(r as f64, c as f64);
                *slot = cartesian_to_erp(ray, height, width)?;
            }
            Ok(())
        })?;
    Ok(SamplingGrid {
        width: vp.out_w,
        height: vp.out_h,
        coords,
    })
}

/// Wrap-around bilinear sample at continuous ERP position; rows clamp at the poles.
pub fn sample_bilinear(img: &Image, i: f64, j: f64, out: &mut [f32]) {
    let (h, w) = (img.height(), img.width());
    let i = i.clamp(0.0, (h - 1) as f64);
    let i0 = i.floor() as usize;
    let i1 = (i0 + 1).min(h - 1);
    let ti = (i - i0 as f64) as f32;
    let j = j.rem_euclid(w as f64);
    let j0f = j.floor();
    let tj = (j - j0f) as f32;
    let j0 = (j0f as usize) % w;
    let j1 = (j0 + 1) % w;
    for (k, o) in out.iter_mut().enumerate() {
        let top = img.get(i0, j0, k) * (1.0 - tj) + img.get(i0, j1, k) * tj;
        let bottom = img.get(i1, j0, k) * (1.0 - tj) + img.get(i1, j1, k) * tj;
        *o = top * (1.0 - ti) + bottom * ti;
    }
}

/// Renders the perspective view of `img` seen through `vp`.
pub fn project_perspective(img: &ErpImage, vp: &Viewport) -> Result<Image> {
    let grid = compute_sampling_grid(vp, img.height(), img.width())?;
    Ok(sample_grid(img.image(), &grid))
}

/// Bilinearly samples `img` at every grid position.
pub fn sample_grid(img: &Image, grid: &SamplingGrid) -> Image {
    let ch = img.channels();
    let mut data = vec![0.0f32; grid.width * grid.height * ch];
    data.par_chunks_mut(grid.width * ch)
        .enumerate()
        .for_each(|(r, row)| {
            for c in 0..grid.width {
                let (i, j) = grid.at(r, c);
                sample_bilinear(img, i, j, &mut row[c * ch..(c + 1) * ch]);
            }
        });
    Image::from_vec(grid.width, grid.height, ch, data).expect("grid-sized buffer")
}

/// Nearest-neighbor view of an ERP-space mask.
pub fn project_mask(erp_mask: &Mask, vp: &Viewport) -> Result<Mask> {
    let (h, w) = (erp_mask.height(), erp_mask.width());
    let grid = compute_sampling_grid(vp, h, w)?;
    let mut out = Mask::new(vp.out_w, vp.out_h);
    for r in 0..vp.out_h {
        for c in 0..vp.out_w {
            let (i, j) = grid.at(r, c);
            let ii = (i.round() as usize).min(h - 1);
            let jj = (j.round() as usize) % w;
            if erp_mask.get(ii, jj) {
                out.set(r, c, true);
            }
        }
    }
    Ok(out)
}

/// Maps a view-space mask back onto the full panorama.
///
/// Every ERP pixel whose direction falls inside the view frustum takes the
/// value of the nearest view pixel; everything else is zero.
pub fn reproject_mask_to_erp(mask: &Mask, vp: &Viewport, height: usize, width: usize) -> Result<Mask> {
    vp.validate()?;
    if mask.width() != vp.out_w || mask.height() != vp.out_h {
        return Err(Error::domain(format!(
            "mask is {}x{}, viewport renders {}x{}",
            mask.width(),
            mask.height(),
            vp.out_w,
            vp.out_h
        )));
    }
    if height == 0 || width == 0 {
        return Err(Error::domain("ERP dimensions must be positive"));
    }
    let basis = vp.basis();
    let (row_lo, row_hi) = footprint_rows(vp, height);
    let mut out = Mask::new(width, height);
    let rows: Vec<(usize, Vec<bool>)> = (row_lo..=row_hi)
        .into_par_iter()
        .map(|i| {
            let mut bits = vec![false; width];
            for (j, bit) in bits.iter_mut().enumerate() {
                let p = erp_pixel_direction(i, j, height, width);
                if let Some((r, c)) = basis.project(&p) {
                    let (ri, ci) = (r.round(), c.round());
                    if ri >= 0.0 && ci >= 0.0 && (ri as usize) < vp.out_h && (ci as usize) < vp.out_w {
                        *bit = mask.get(ri as usize, ci as usize);
                    }
                }
            }
            (i, bits)
        })
        .collect();
    for (i, bits) in rows {
        for (j, b) in bits.into_iter().enumerate() {
            if b {
                out.set(i, j, true);
            }
        }
    }
    Ok(out)
}

/// ERP pixels whose nearest view pixel lies inside the viewport.
pub fn viewport_footprint(vp: &Viewport, height: usize, width: usize) -> Result<Mask> {
    let all = Mask::from_fn(vp.out_w, vp.out_h, |_, _| true);
    reproject_mask_to_erp(&all, vp, height, width)
}

fn erp_pixel_direction(i: usize, j: usize, height: usize, width: usize) -> UnitVector {
    spherical_to_cartesian(erp_to_spherical(i as f64, j as f64, height, width).expect("pixel index in range"))
}

/// Inclusive ERP row range that can intersect the frustum (one row of slack).
fn footprint_rows(vp: &Viewport, height: usize) -> (usize, usize) {
    let pitch_row = std::f64::consts::PI / height as f64;
    let reach = vp.corner_angle() + 2.0 * pitch_row;
    let phi_hi = (vp.pitch + reach).min(std::f64::consts::FRAC_PI_2);
    let phi_lo = (vp.pitch - reach).max(-std::f64::consts::FRAC_PI_2);
    let to_row = |phi: f64| (std::f64::consts::FRAC_PI_2 - phi) * height as f64 / std::f64::consts::PI;
    let lo = to_row(phi_hi).floor().max(0.0) as usize;
    let hi = (to_row(phi_lo).ceil() as usize).min(height - 1);
    (lo, hi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::Raster;
    use crate::sphere::rotate_yaw;
    use std::f64::consts::PI;

    fn vp(yaw: f64, pitch: f64, fov: f64, n: usize) -> Viewport {
        Viewport::new(yaw, pitch, fov, n, n).unwrap()
    }

    #[test]
    fn viewport_rejects_bad_fov_and_pitch() {
        assert!(Viewport::new(0.0, 0.0, 180.0, 8, 8).is_err());
        assert!(Viewport::new(0.0, 0.0, 0.0, 8, 8).is_err());
        assert!(Viewport::new(0.0, 1.6, 90.0, 8, 8).is_err());
        assert!(Viewport::new(0.0, 0.0, 90.0, 0, 8).is_err());
    }

    #[test]
    fn grid_center_hits_erp_center() {
        let g = compute_sampling_grid(&vp(0.0, 0.0, 90.0, 64), 512, 1024).unwrap();
        let (i, j) = g.at(32, 32);
        assert!((i - 256.0).abs() < 1e-9 && (j - 512.0).abs() < 1e-9);
    }

    #[test]
    fn corner_ray_angle_matches_pinhole_geometry() {
        let v = vp(0.3, -0.2, 90.0, 64);
        let axis = v.ray(32.0, 32.0);
        let corner = v.ray(0.0, 0.0);
        let expected = (2f64.sqrt() * (PI / 4.0).tan()).atan();
        assert!((axis.angle_to(&corner) - expected).abs() < 1e-12);
        assert!((expected.to_degrees() - 54.7356).abs() < 1e-4);
    }

    #[test]
    fn grid_wraps_across_seam() {
        let (h, w) = (64usize, 128usize);
        let v = vp(PI - 1e-3, 0.0, 60.0, 32);
        let g = compute_sampling_grid(&v, h, w).unwrap();
        let row: Vec<f64> = (0..32).map(|c| g.at(16, c).1).collect();
        assert!(row.iter().all(|&j| (0.0..w as f64).contains(&j)));
        // brute force: left half sees lambda < pi (right edge), right half wraps to column ~0
        for (c, &j) in row.iter().enumerate() {
            let ray = v.ray(16.0, c as f64);
            let lambda = ray.y.atan2(ray.x);
            let expected = ((lambda + PI) * w as f64 / (2.0 * PI)).rem_euclid(w as f64);
            let d = (j - expected).abs();
            assert!(d.min(w as f64 - d) < 1e-9);
        }
        assert!(row[0] > 100.0 && row[31] < 20.0);
    }

    #[test]
    fn constant_erp_gives_constant_view() {
        let erp = ErpImage::new(Raster::filled(128, 64, 3, 0.25)).unwrap();
        let view = project_perspective(&erp, &vp(1.0, 0.4, 100.0, 40)).unwrap();
        assert!(view.data().iter().all(|&v| (v - 0.25).abs() < 1e-6));
    }

    #[test]
    fn lit_center_pixel_lands_at_view_center() {
        let mut img = Raster::filled(1024, 512, 1, 0.0);
        img.set(256, 512, 0, 1.0);
        let erp = ErpImage::new(img).unwrap();
        let view = project_perspective(&erp, &vp(0.0, 0.0, 30.0, 64)).unwrap();
        assert!((view.get(32, 32, 0) - 1.0).abs() < 1e-6);
        let max_elsewhere = (0..64)
            .flat_map(|r| (0..64).map(move |c| (r, c)))
            .filter(|&(r, c)| (r, c) != (32, 32))
            .map(|(r, c)| view.get(r, c, 0))
            .fold(0.0f32, f32::max);
        assert!(max_elsewhere < 1.0);
    }

    fn smooth_erp(h: usize, w: usize) -> ErpImage {
        ErpImage::new(Raster::from_fn(w, h, 1, |r, c, _| {
            let lambda = 2.0 * PI * c as f64 / w as f64 - PI;
            let phi = PI / 2.0 - PI * r as f64 / h as f64;
            (0.5 + 0.25 * lambda.cos() + 0.1 * (2.0 * phi).sin()) as f32
        }))
        .unwrap()
    }

    #[test]
    fn yaw_equivariance() {
        let erp = smooth_erp(128, 256);
        let cols = 37;
        let deg = cols as f64 * 360.0 / 256.0;
        let rotated = rotate_yaw(&erp, deg).unwrap();
        let a = project_perspective(&erp, &vp(0.4, 0.2, 80.0, 48)).unwrap();
        let b = project_perspective(&rotated, &vp(0.4 + deg.to_radians(), 0.2, 80.0, 48)).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-4);
        }
    }

    fn max_horizontal_gradient(img: &Image) -> f32 {
        let mut m = 0.0f32;
        for r in 0..img.height() {
            for c in 0..img.width() - 1 {
                m = m.max((img.get(r, c + 1, 0) - img.get(r, c, 0)).abs());
            }
        }
        m
    }

    #[test]
    fn seam_is_transparent() {
        let erp = smooth_erp(256, 512);
        let at_seam = project_perspective(&erp, &vp(PI, 0.0, 90.0, 64)).unwrap();
        let equatorial = project_perspective(&erp, &vp(0.0, 0.0, 90.0, 64)).unwrap();
        let (gs, ge) = (max_horizontal_gradient(&at_seam), max_horizontal_gradient(&equatorial));
        assert!((gs - ge).abs() < 1e-3, "{gs} vs {ge}");
    }

    #[test]
    fn grid_is_deterministic() {
        let v = vp(2.0, -0.7, 110.0, 33);
        let a = compute_sampling_grid(&v, 100, 200).unwrap();
        let b = compute_sampling_grid(&v, 100, 200).unwrap();
        assert!(a.coords().iter().zip(b.coords()).all(|(p, q)| p.0.to_bits() == q.0.to_bits() && p.1.to_bits() == q.1.to_bits()));
    }

    #[test]
    fn empty_mask_reprojects_to_empty() {
        let v = vp(0.5, 0.1, 90.0, 32);
        let m = reproject_mask_to_erp(&Mask::new(32, 32), &v, 64, 128).unwrap();
        assert_eq!(m.area(), 0);
    }

    #[test]
    fn mask_size_must_match_viewport() {
        let v = vp(0.5, 0.1, 90.0, 32);
        assert!(reproject_mask_to_erp(&Mask::new(31, 32), &v, 64, 128).is_err());
    }

    #[test]
    fn full_mask_equals_brute_force_footprint() {
        let (h, w) = (64usize, 128usize);
        for v in [vp(0.5, 0.1, 90.0, 32), vp(-3.0, 1.2, 120.0, 40), vp(PI - 0.05, -0.9, 60.0, 24)] {
            let fp = viewport_footprint(&v, h, w).unwrap();
            let mut expected = Mask::new(w, h);
            for i in 0..h {
                for j in 0..w {
                    let p = spherical_to_cartesian(erp_to_spherical(i as f64, j as f64, h, w).unwrap());
                    if let Some((r, c)) = v.project_point(&p) {
                        let (r, c) = (r.round(), c.round());
                        if r >= 0.0 && c >= 0.0 && r < v.out_h as f64 && c < v.out_w as f64 {
                            expected.set(i, j, true);
                        }
                    }
                }
            }
            assert_eq!(fp, expected);
            // forward samples away from the view border land inside the footprint
            let g = compute_sampling_grid(&v, h, w).unwrap();
            let n = v.out_w;
            for (k, (i, j)) in g.coords().iter().enumerate() {
                let (r, c) = (k / n, k % n);
                if r < 2 || c < 2 || r + 2 >= v.out_h || c + 2 >= n {
                    continue;
                }
                let ii = (i.round() as usize).min(h - 1);
                assert!(fp.get(ii, (j.round() as usize) % w), "view ({r}, {c})");
            }
        }
    }

    fn disk(n: usize, radius: f64) -> Mask {
        let c = n as f64 / 2.0;
        Mask::from_fn(n, n, |r, col| ((r as f64 - c).powi(2) + (col as f64 - c).powi(2)).sqrt() <= radius)
    }

    #[test]
    fn high_pitch_disk_covers_more_erp_pixels() {
        let m = disk(64, 12.0);
        let eq = reproject_mask_to_erp(&m, &vp(0.0, 0.0, 90.0, 64), 256, 512).unwrap();
        let high = reproject_mask_to_erp(&m, &vp(0.0, 60f64.to_radians(), 90.0, 64), 256, 512).unwrap();
        assert!(high.area() > eq.area(), "{} vs {}", high.area(), eq.area());
    }

    #[test]
    fn mask_round_trip_keeps_iou() {
        let m = disk(64, 14.0);
        let v = vp(1.0, 0.5, 90.0, 64);
        let erp = reproject_mask_to_erp(&m, &v, 256, 512).unwrap();
        let back = project_mask(&erp, &v).unwrap();
        assert!(m.iou(&back) >= 0.95, "{}", m.iou(&back));
    }
}
