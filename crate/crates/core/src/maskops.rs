//! Binary masks: cruciform point prompts, connected-component cleanup,
//! square dilation, and the three-round progressive segmentation driver.

use std::collections::VecDeque;
use std::path::Path;

use crate::boxfusion::BBox;
use crate::error::{Error, Result};
use crate::raster::{Image, Raster};
use crate::services::{ScoredMask, SegmentPrompt, SegmentRequest, Segmenter};

/// Default area below which a connected component counts as noise.
pub const DEFAULT_MIN_AREA: usize = 30;
/// Default side length of the square dilation kernel.
pub const DEFAULT_DILATE_KERNEL: usize = 15;

#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Mask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl std::fmt::Debug for Mask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Mask({}x{}, area {})", self.width, self.height, self.area())
    }
}

impl Mask {
    pub fn new(width: usize, height: usize) -> Self {
        Mask {
            width,
            height,
            bits: vec![false; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(width * height);
        for r in 0..height {
            for c in 0..width {
                bits.push(f(r, c));
            }
        }
        Mask { width, height, bits }
    }

    pub fn from_bits(width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != width * height {
            return Err(Error::domain(format!(
                "mask has {} bits, expected {}",
                bits.len(),
                width * height
            )));
        }
        Ok(Mask { width, height, bits })
    }

    /// Solid rectangle covering the pixels of `bbox` (half-open, clipped).
    pub fn from_box(width: usize, height: usize, bbox: &BBox) -> Self {
        let (c0, r0, c1, r1) = bbox.pixel_span(width, height);
        Mask::from_fn(width, height, |r, c| r >= r0 && r < r1 && c >= c0 && c < c1)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, v: bool) {
        self.bits[row * self.width + col] = v;
    }

    pub fn area(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    /// Inclusive bounds `(row_min, col_min, row_max, col_max)` of the set pixels.
    pub fn bounds(&self) -> Option<(usize, usize, usize, usize)> {
        let mut out: Option<(usize, usize, usize, usize)> = None;
        for r in 0..self.height {
            for c in 0..self.width {
                if self.get(r, c) {
                    out = Some(match out {
                        None => (r, c, r, c),
                        Some((r0, c0, r1, c1)) => (r0.min(r), c0.min(c), r1.max(r), c1.max(c)),
                    });
                }
            }
        }
        out
    }

    /// Bounding box of the set pixels in half-open pixel coordinates.
    pub fn bbox(&self) -> Option<BBox> {
        self.bounds().map(|(r0, c0, r1, c1)| {
            BBox::new(c0 as f64, r0 as f64, (c1 + 1) as f64, (r1 + 1) as f64)
                .expect("non-empty bounds form a valid box")
        })
    }

    pub fn union(&self, other: &Mask) -> Result<Mask> {
        self.check_same_size(other)?;
        let bits = self.bits.iter().zip(&other.bits).map(|(a, b)| *a || *b).collect();
        Ok(Mask {
            width: self.width,
            height: self.height,
            bits,
        })
    }

    pub fn intersection_area(&self, other: &Mask) -> usize {
        self.bits.iter().zip(&other.bits).filter(|(a, b)| **a && **b).count()
    }

    /// Intersection over union; two empty masks count as identical.
    pub fn iou(&self, other: &Mask) -> f64 {
        let inter = self.intersection_area(other);
        let union = self.area() + other.area() - inter;
        if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        }
    }

    pub fn is_subset_of(&self, other: &Mask) -> bool {
        self.bits.iter().zip(&other.bits).all(|(a, b)| !*a || *b)
    }

    fn check_same_size(&self, other: &Mask) -> Result<()> {
        if self.width != other.width || self.height != other.height {
            return Err(Error::domain(format!(
                "mask sizes differ: {}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            )));
        }
        Ok(())
    }

    /// Single-channel image with 0 and 1 samples.
    pub fn to_image(&self) -> Image {
        Raster::from_fn(self.width, self.height, 1, |r, c, _| if self.get(r, c) { 1.0 } else { 0.0 })
    }

    /// Thresholds the first channel at one half.
    pub fn from_image(img: &Image) -> Mask {
        Mask::from_fn(img.width(), img.height(), |r, c| img.get(r, c, 0) >= 0.5)
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        self.to_image().encode_png()
    }

    pub fn decode_png(bytes: &[u8]) -> Result<Mask> {
        Ok(Mask::from_image(&Image::decode(bytes)?))
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_image().save_png(path)
    }

    pub fn load_png(path: &Path) -> Result<Mask> {
        Ok(Mask::from_image(&Image::load(path)?))
    }

    pub fn to_rle(&self) -> RleMask {
        let mut counts = Vec::new();
        let mut current = false;
        let mut run = 0u32;
        for &b in &self.bits {
            if b == current {
                run += 1;
            } else {
                counts.push(run);
                current = b;
                run = 1;
            }
        }
        counts.push(run);
        RleMask {
            width: self.width,
            height: self.height,
            counts,
        }
    }
}

/// Run-length encoding, row-major, alternating runs that start with unset pixels.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct RleMask {
    pub width: usize,
    pub height: usize,
    pub counts: Vec<u32>,
}

impl RleMask {
    pub fn decode(&self) -> Result<Mask> {
        let total: u64 = self.counts.iter().map(|&c| c as u64).sum();
        if total != (self.width * self.height) as u64 {
            return Err(Error::parse(format!(
                "RLE runs cover {total} pixels, mask has {}",
                self.width * self.height
            )));
        }
        let mut bits = Vec::with_capacity(self.width * self.height);
        for (k, &run) in self.counts.iter().enumerate() {
            bits.extend(std::iter::repeat_n(k % 2 == 1, run as usize));
        }
        Mask::from_bits(self.width, self.height, bits)
    }
}

impl serde::Serialize for Mask {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_rle().serialize(s)
    }
}

impl<'de> serde::Deserialize<'de> for Mask {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        RleMask::deserialize(d)?.decode().map_err(serde::de::Error::custom)
    }
}

/// Positive point prompts as `(row, col)` pixel positions.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct PointPrompt {
    pub points: Vec<(usize, usize)>,
}

/// Center of the mask's bounding box, rounded half-up, snapped to the nearest
/// set pixel when it falls outside the mask (ties resolved in row-major order).
pub fn mask_center(m: &Mask) -> Option<(usize, usize)> {
    let (r0, c0, r1, c1) = m.bounds()?;
    let cr = (r0 + r1).div_ceil(2);
    let cc = (c0 + c1).div_ceil(2);
    if m.get(cr, cc) {
        return Some((cr, cc));
    }
    let mut best: Option<((usize, usize), usize)> = None;
    for r in r0..=r1 {
        for c in c0..=c1 {
            if !m.get(r, c) {
                continue;
            }
            let d = r.abs_diff(cr).pow(2) + c.abs_diff(cc).pow(2);
            if best.is_none_or(|(_, bd)| d < bd) {
                best = Some(((r, c), d));
            }
        }
    }
    best.map(|(p, _)| p)
}

/// Center point plus the extreme set pixels on the row and column through it,
/// in the order center, left, right, top, bottom, with duplicates dropped.
pub fn cruciform_points(m: &Mask) -> Result<PointPrompt> {
    let (cr, cc) = mask_center(m).ok_or_else(|| Error::domain("cannot sample points from an empty mask"))?;
    let row: Vec<usize> = (0..m.width()).filter(|&c| m.get(cr, c)).collect();
    let col: Vec<usize> = (0..m.height()).filter(|&r| m.get(r, cc)).collect();
    // both contain the center, so first/last exist
    let candidates = [
        (cr, cc),
        (cr, row[0]),
        (cr, *row.last().unwrap()),
        (col[0], cc),
        (*col.last().unwrap(), cc),
    ];
    let mut points = Vec::with_capacity(5);
    for p in candidates {
        if !points.contains(&p) {
            points.push(p);
        }
    }
    Ok(PointPrompt { points })
}

const NEIGHBORS_8: [(isize, isize); 8] = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)];

/// 8-connected component labels (0 = background) and per-label areas (index 0 unused).
pub fn label_components(m: &Mask) -> (Vec<u32>, Vec<usize>) {
    let (w, h) = (m.width(), m.height());
    let mut labels = vec![0u32; w * h];
    let mut areas = vec![0usize];
    let mut queue = VecDeque::new();
    for start in 0..w * h {
        if !m.bits[start] || labels[start] != 0 {
            continue;
        }
        let label = areas.len() as u32;
        let mut area = 0;
        labels[start] = label;
        queue.push_back(start);
        while let Some(idx) = queue.pop_front() {
            area += 1;
            let (r, c) = ((idx / w) as isize, (idx % w) as isize);
            for (dr, dc) in NEIGHBORS_8 {
                let (nr, nc) = (r + dr, c + dc);
                if nr < 0 || nc < 0 || nr >= h as isize || nc >= w as isize {
                    continue;
                }
                let n = nr as usize * w + nc as usize;
                if m.bits[n] && labels[n] == 0 {
                    labels[n] = label;
                    queue.push_back(n);
                }
            }
        }
        areas.push(area);
    }
    (labels, areas)
}

/// Clears 8-connected components whose area is strictly below `min_area`.
pub fn remove_noise(m: &Mask, min_area: usize) -> Mask {
    let (labels, areas) = label_components(m);
    let bits = labels
        .iter()
        .map(|&l| l != 0 && areas[l as usize] >= min_area)
        .collect();
    Mask {
        width: m.width,
        height: m.height,
        bits,
    }
}

/// Dilation by a `kernel × kernel` square centered on each pixel, clipped at the borders.
pub fn dilate(m: &Mask, kernel: usize) -> Result<Mask> {
    if kernel == 0 || kernel.is_multiple_of(2) {
        return Err(Error::domain(format!("dilation kernel must be odd and positive, got {kernel}")));
    }
    let radius = kernel / 2;
    let (w, h) = (m.width, m.height);
    // separable: horizontal then vertical window "any" via prefix counts
    let mut horiz = vec![false; w * h];
    let mut prefix = vec![0u32; w.max(h) + 1];
    for r in 0..h {
        for c in 0..w {
            prefix[c + 1] = prefix[c] + m.bits[r * w + c] as u32;
        }
        for c in 0..w {
            let lo = c.saturating_sub(radius);
            let hi = (c + radius + 1).min(w);
            horiz[r * w + c] = prefix[hi] > prefix[lo];
        }
    }
    let mut bits = vec![false; w * h];
    for c in 0..w {
        for r in 0..h {
            prefix[r + 1] = prefix[r] + horiz[r * w + c] as u32;
        }
        for r in 0..h {
            let lo = r.saturating_sub(radius);
            let hi = (r + radius + 1).min(h);
            bits[r * w + c] = prefix[hi] > prefix[lo];
        }
    }
    Ok(Mask { width: w, height: h, bits })
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct RefineConfig {
    pub min_area: usize,
    pub dilate_kernel: usize,
}

impl Default for RefineConfig {
    fn default() -> Self {
        RefineConfig {
            min_area: DEFAULT_MIN_AREA,
            dilate_kernel: DEFAULT_DILATE_KERNEL,
        }
    }
}

/// Intermediate and final masks of a progressive segmentation run.
#[derive(Debug, Clone, PartialEq)]
pub struct Refinement {
    /// Round 1: one box-prompted mask per target box.
    pub coarse: Vec<Mask>,
    /// Round 2: one cruciform-prompted mask per target box.
    pub refined: Vec<Mask>,
    /// Round 3: union of masks prompted by the centers of all round-2 masks.
    pub merged: Mask,
    /// `merged` after noise removal, before dilation.
    pub cleaned: Mask,
    pub final_mask: Mask,
}

fn best_mask(masks: Vec<ScoredMask>, width: usize, height: usize) -> Result<Mask> {
    let mut best: Option<ScoredMask> = None;
    for m in masks {
        if m.mask.width() != width || m.mask.height() != height {
            return Err(Error::parse(format!(
                "segmenter mask is {}x{}, image is {}x{}",
                m.mask.width(),
                m.mask.height(),
                width,
                height
            )));
        }
        if best.as_ref().is_none_or(|b| m.score > b.score) {
            best = Some(m);
        }
    }
    best.map(|m| m.mask).ok_or_else(|| Error::parse("segmenter returned no mask"))
}

/// Single-box progressive segmentation.
pub fn progressive_refine(
    bbox: &BBox,
    view: &Image,
    segmenter: &dyn Segmenter,
    cfg: &RefineConfig,
) -> Result<Refinement> {
    progressive_refine_group(std::slice::from_ref(bbox), view, segmenter, cfg)
}

/// Box prompt, then cruciform point prompt, per target; then one merged round
/// prompted with the centers of every refined mask. The merged mask is cleaned
/// of small components and dilated.
pub fn progressive_refine_group(
    boxes: &[BBox],
    view: &Image,
    segmenter: &dyn Segmenter,
    cfg: &RefineConfig,
) -> Result<Refinement> {
    if boxes.is_empty() {
        return Err(Error::domain("progressive refinement needs at least one box"));
    }
    let (w, h) = (view.width(), view.height());
    let png = view.encode_png()?;
    let ask = |prompt: SegmentPrompt, round: &str| -> Result<Vec<ScoredMask>> {
        segmenter
            .segment(&SegmentRequest {
                image_png: png.clone(),
                prompt,
            })
            .map_err(|e| Error::from(e).in_stage(round))
    };

    let mut coarse = Vec::with_capacity(boxes.len());
    for b in boxes {
        let masks = ask(SegmentPrompt::Box(*b), "segmentation round 1")?;
        coarse.push(best_mask(masks, w, h).map_err(|e| e.in_stage("segmentation round 1"))?);
    }

    let mut refined = Vec::with_capacity(boxes.len());
    for m in &coarse {
        let points = cruciform_points(m).map_err(|e| e.in_stage("segmentation round 2"))?;
        let masks = ask(SegmentPrompt::Points(points.points), "segmentation round 2")?;
        refined.push(best_mask(masks, w, h).map_err(|e| e.in_stage("segmentation round 2"))?);
    }

    let centers: Vec<(usize, usize)> = refined.iter().filter_map(mask_center).collect();
    if centers.is_empty() {
        return Err(Error::domain("all refined masks are empty").in_stage("segmentation round 3"));
    }
    let masks = ask(SegmentPrompt::Points(centers), "segmentation round 3")?;
    let mut merged = Mask::new(w, h);
    for m in masks {
        merged = merged.union(&m.mask).map_err(|e| e.in_stage("segmentation round 3"))?;
    }

    let cleaned = remove_noise(&merged, cfg.min_area);
    let final_mask = dilate(&cleaned, cfg.dilate_kernel)?;
    Ok(Refinement {
        coarse,
        refined,
        merged,
        cleaned,
        final_mask,
    })
}
