//! Adaptive perspective viewport: widen the field of view and raise the
//! camera until every detected target sits clear of the view border.

use std::f64::consts::{FRAC_PI_2, PI};

use crate::boxfusion::{BBox, Detection};
use crate::error::{Error, Result};
use crate::projection::{project_perspective, Viewport};
use crate::services::{DetectRequest, Detector};
use crate::sphere::{cartesian_to_erp, erp_to_spherical, ErpImage};

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct AdaptConfig {
    pub fov_expand_factor: f64,
    pub offset_growth_factor: f64,
    /// Pixels; a box closer than this to a view edge touches it.
    pub boundary_margin: f64,
    pub max_iterations: usize,
    pub offset_coeff_min: f64,
    pub offset_coeff_max: f64,
    /// `k` in `coeff = k / (bbox_h / img_h)`.
    pub offset_k: f64,
    /// Seed field of view as a multiple of the box's angular extent.
    pub fov_margin: f64,
    /// Degrees.
    pub fov_cap: f64,
    pub box_threshold: f64,
    pub text_threshold: f64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            fov_expand_factor: 1.15,
            offset_growth_factor: 1.1,
            boundary_margin: 30.0,
            max_iterations: 3,
            offset_coeff_min: 0.05,
            offset_coeff_max: 0.4,
            offset_k: 0.02,
            fov_margin: 1.2,
            fov_cap: 175.0,
            box_threshold: 0.25,
            text_threshold: 0.25,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.fov_expand_factor > 1.0
            && self.offset_growth_factor >= 1.0
            && self.offset_coeff_min > 0.0
            && self.offset_coeff_min <= self.offset_coeff_max
            && self.offset_coeff_max < 1.0
            && self.offset_k > 0.0
            && self.fov_margin >= 1.0
            && self.fov_cap > 0.0
            && self.fov_cap < 180.0
            && self.boundary_margin >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid adapt config {self:?}")))
        }
    }
}

/// `clamp(k / (bbox_h / img_h), min, max)`: small objects get more elevation.
pub fn vertical_offset_coeff(bbox_h: f64, img_h: f64, cfg: &AdaptConfig) -> Result<f64> {
    if !(bbox_h > 0.0 && bbox_h <= img_h) {
        return Err(Error::domain(format!("box height {bbox_h} must be in (0, {img_h}]")));
    }
    Ok((cfg.offset_k / (bbox_h / img_h)).clamp(cfg.offset_coeff_min, cfg.offset_coeff_max))
}

/// Starting viewport plus the pitch offset (radians) already folded into it.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SeedView {
    pub viewport: Viewport,
    pub pitch_offset: f64,
}

impl SeedView {
    fn base_pitch(&self) -> f64 {
        self.viewport.pitch - self.pitch_offset
    }
}

fn hfov_for_vfov(vfov: f64, out_w: usize, out_h: usize) -> f64 {
    2.0 * ((vfov / 2.0).tan() * out_w as f64 / out_h as f64).atan()
}

/// Viewport centred on an ERP box, raised by the offset coefficient times the
/// box's angular height and wide enough for its angular extent with margin.
pub fn initial_viewport(
    erp_bbox: &BBox,
    height: usize,
    width: usize,
    out_w: usize,
    out_h: usize,
    cfg: &AdaptConfig,
) -> Result<SeedView> {
    cfg.validate()?;
    if erp_bbox.x2 > width as f64 || erp_bbox.y2 > height as f64 || erp_bbox.x1 < 0.0 || erp_bbox.y1 < 0.0 {
        return Err(Error::domain(format!("box {:?} exceeds the {width}x{height} panorama", erp_bbox.to_array())));
    }
    let (cx, cy) = erp_bbox.center();
    let center = erp_to_spherical(cy, cx, height, width)?;
    let ang_w = erp_bbox.width() * 2.0 * PI / width as f64;
    let ang_h = erp_bbox.height() * PI / height as f64;
    let coeff = vertical_offset_coeff(erp_bbox.height(), height as f64, cfg)?;
    let pitch_offset = coeff * ang_h;

    let cap = cfg.fov_cap.to_radians();
    let need_w = (cfg.fov_margin * ang_w).min(cap);
    let need_h = hfov_for_vfov((cfg.fov_margin * ang_h).min(cap), out_w, out_h);
    let fov = need_w.max(need_h).min(cap).to_degrees();
    let pitch = (center.phi() + pitch_offset).clamp(-FRAC_PI_2, FRAC_PI_2);
    let viewport = Viewport::new(center.lambda(), pitch, fov, out_w, out_h)?;
    Ok(SeedView {
        viewport,
        pitch_offset: pitch - center.phi(),
    })
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdaptStep {
    pub iteration: usize,
    pub viewport: Viewport,
    pub pitch_offset: f64,
    pub boxes: Vec<BBox>,
    pub offending: Vec<BBox>,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdaptResult {
    pub final_viewport: Viewport,
    /// Number of expansions performed.
    pub iterations_used: usize,
    pub converged: bool,
    pub trace: Vec<AdaptStep>,
    /// Detections of the final pass, in view pixels.
    pub detections: Vec<Detection>,
}

fn touches(b: &BBox, w: f64, h: f64, margin: f64) -> bool {
    b.x1 < margin || b.y1 < margin || w - b.x2 < margin || h - b.y2 < margin
}

/// Longitude of the union of `boxes` as seen through `vp`.
fn recentered_yaw(vp: &Viewport, boxes: &[BBox], erp_h: usize, erp_w: usize) -> Option<f64> {
    let union = boxes.iter().copied().reduce(|a, b| a.union_box(&b))?;
    let (cx, cy) = union.center();
    let (_, j) = cartesian_to_erp(vp.ray(cy, cx), erp_h, erp_w).ok()?;
    Some(erp_to_spherical(erp_h as f64 / 2.0, j, erp_h, erp_w).ok()?.lambda())
}

pub fn adapt(
    targets: &[String],
    erp: &ErpImage,
    seed: &SeedView,
    detector: &dyn Detector,
    cfg: &AdaptConfig,
) -> Result<AdaptResult> {
    cfg.validate()?;
    seed.viewport.validate()?;
    let (out_w, out_h) = (seed.viewport.out_w, seed.viewport.out_h);
    let (ow, oh) = (out_w as f64, out_h as f64);
    let base_pitch = seed.base_pitch();
    let mut fov = seed.viewport.fov;
    let mut offset = seed.pitch_offset;
    let mut yaw = seed.viewport.yaw;
    let mut trace = Vec::new();
    let mut converged = false;
    let mut detections = Vec::new();

    for n in 0..=cfg.max_iterations {
        let pitch = (base_pitch + offset).clamp(-FRAC_PI_2, FRAC_PI_2);
        let vp = Viewport::new(yaw, pitch, fov, out_w, out_h)?;
        let view = project_perspective(erp, &vp)?;
        let stage = || format!("adapt iteration {n}");
        let png = view.encode_png().map_err(|e| e.in_stage(stage()))?;
        detections = detector
            .detect(&DetectRequest {
                image_png: png,
                queries: targets.to_vec(),
                box_threshold: cfg.box_threshold,
                text_threshold: cfg.text_threshold,
            })
            .map_err(|e| Error::from(e).in_stage(stage()))?;
        let boxes: Vec<BBox> = detections.iter().map(|d| d.bbox).collect();
        let offending: Vec<BBox> = boxes
            .iter()
            .filter(|b| touches(b, ow, oh, cfg.boundary_margin))
            .copied()
            .collect();
        let clean = offending.is_empty();
        let next_yaw = recentered_yaw(&vp, &boxes, erp.height(), erp.width());
        trace.push(AdaptStep {
            iteration: n,
            viewport: vp,
            pitch_offset: offset,
            boxes,
            offending,
        });
        if clean {
            converged = true;
            break;
        }
        if n == cfg.max_iterations {
            break;
        }
        let step = (n + 1) as i32;
        fov = (seed.viewport.fov * cfg.fov_expand_factor.powi(step)).min(cfg.fov_cap);
        offset = seed.pitch_offset * cfg.offset_growth_factor.powi(step);
        yaw = next_yaw.unwrap_or(yaw);
    }

    let last = trace.last().expect("at least one pass");
    Ok(AdaptResult {
        final_viewport: last.viewport,
        iterations_used: trace.len() - 1,
        converged,
        trace,
        detections,
    })
}
