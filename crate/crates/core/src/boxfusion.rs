//! Consensus fusion of grounding boxes from a VLM anchor and two detectors,
//! plus NMS and the geometric sanity filters.

use std::cmp::Ordering;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Vlm,
    /// Open-vocabulary detector that reports confidences (Grounding DINO role).
    DetectorA,
    /// Region-captioning detector without confidences (Florence-2 role).
    DetectorB,
}

/// Axis-aligned box `[x1, y1, x2, y2]` in pixels, half-open for area arithmetic.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confidence: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<Source>,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        if !(x1.is_finite() && y1.is_finite() && x2.is_finite() && y2.is_finite()) {
            return Err(Error::domain("box coordinates must be finite"));
        }
        if !(x1 < x2 && y1 < y2) {
            return Err(Error::domain(format!("degenerate box [{x1}, {y1}, {x2}, {y2}]")));
        }
        Ok(BBox {
            x1,
            y1,
            x2,
            y2,
            confidence: None,
            source: None,
        })
    }

    pub fn with_confidence(mut self, confidence: f64) -> Self {
        self.confidence = Some(confidence);
        self
    }

    pub fn with_source(mut self, source: Source) -> Self {
        self.source = Some(source);
        self
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    pub fn intersection(&self, other: &BBox) -> f64 {
        let w = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let h = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        w * h
    }

    /// Smallest box enclosing both; confidence and source are dropped.
    pub fn union_box(&self, other: &BBox) -> BBox {
        BBox {
            x1: self.x1.min(other.x1),
            y1: self.y1.min(other.y1),
            x2: self.x2.max(other.x2),
            y2: self.y2.max(other.y2),
            confidence: None,
            source: None,
        }
    }

    /// Clips to `[0, width] × [0, height]`; `None` if nothing remains.
    pub fn clamp(&self, width: f64, height: f64) -> Option<BBox> {
        let b = BBox {
            x1: self.x1.clamp(0.0, width),
            y1: self.y1.clamp(0.0, height),
            x2: self.x2.clamp(0.0, width),
            y2: self.y2.clamp(0.0, height),
            ..*self
        };
        (b.x1 < b.x2 && b.y1 < b.y2).then_some(b)
    }

    /// Covered integer pixel span `(col0, row0, col1, row1)`, half-open and clipped.
    pub fn pixel_span(&self, width: usize, height: usize) -> (usize, usize, usize, usize) {
        let clip = |v: f64, hi: usize| v.clamp(0.0, hi as f64) as usize;
        (
            clip(self.x1.floor(), width),
            clip(self.y1.floor(), height),
            clip(self.x2.ceil(), width),
            clip(self.y2.ceil(), height),
        )
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection(b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// A grounded object: free-text description, short category, box.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Detection {
    pub description: String,
    pub category: String,
    pub bbox: BBox,
}

impl Detection {
    pub fn new(description: impl Into<String>, category: impl Into<String>, bbox: BBox) -> Result<Self> {
        let (description, category) = (description.into(), category.into());
        if description.trim().is_empty() || category.trim().is_empty() {
            return Err(Error::domain("detection needs a description and a category"));
        }
        Ok(Detection {
            description,
            category,
            bbox,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct FusionConfig {
    /// A detector box must exceed this IoU with the VLM anchor to vote for it.
    pub anchor_iou: f64,
    /// IoU that pairs detector-A and detector-B boxes for objects the VLM missed.
    pub recover_iou: f64,
    /// Minimum detector-A confidence for a recovered box.
    pub recover_min_confidence: f64,
    pub nms_iou: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            anchor_iou: 0.5,
            recover_iou: 0.5,
            recover_min_confidence: 0.35,
            nms_iou: 0.3,
        }
    }
}

/// Accepts the VLM anchor only when some detector box overlaps it with IoU
/// above `anchor_iou`; the largest such box is returned under the anchor's
/// description and category. Equal areas keep the earliest candidate.
pub fn consensus_fuse(anchor: &Detection, candidates: &[Detection], cfg: &FusionConfig) -> Option<Detection> {
    let mut best: Option<&Detection> = None;
    for c in candidates {
        if iou(&c.bbox, &anchor.bbox) <= cfg.anchor_iou {
            continue;
        }
        if best.is_none_or(|b| c.bbox.area() > b.bbox.area()) {
            best = Some(c);
        }
    }
    best.map(|c| Detection {
        description: anchor.description.clone(),
        category: anchor.category.clone(),
        bbox: c.bbox,
    })
}

/// Keeps each confident detector-A box that some detector-B box overlaps with
/// IoU above `recover_iou`. Each A box is emitted at most once. Boxes without
/// a confidence never qualify.
pub fn recover_missed(dets_a: &[Detection], dets_b: &[Detection], cfg: &FusionConfig) -> Vec<Detection> {
    dets_a
        .iter()
        .filter(|a| a.bbox.confidence.is_some_and(|c| c >= cfg.recover_min_confidence))
        .filter(|a| dets_b.iter().any(|b| iou(&a.bbox, &b.bbox) > cfg.recover_iou))
        .cloned()
        .collect()
}

/// Greedy NMS. Order: confidence descending (missing = 0), then larger area,
/// then input order. A box is suppressed by a kept box when IoU > threshold.
pub fn nms(dets: &[Detection], iou_threshold: f64) -> Result<Vec<Detection>> {
    if !(iou_threshold > 0.0 && iou_threshold <= 1.0) {
        return Err(Error::domain(format!("NMS threshold {iou_threshold} outside (0, 1]")));
    }
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&i, &j| nms_rank(&dets[i], &dets[j]).then(i.cmp(&j)));
    let mut kept: Vec<&Detection> = Vec::new();
    for i in order {
        let d = &dets[i];
        if kept.iter().all(|k| iou(&k.bbox, &d.bbox) <= iou_threshold) {
            kept.push(d);
        }
    }
    Ok(kept.into_iter().cloned().collect())
}

fn nms_rank(a: &Detection, b: &Detection) -> Ordering {
    let ca = a.bbox.confidence.unwrap_or(0.0);
    let cb = b.bbox.confidence.unwrap_or(0.0);
    cb.partial_cmp(&ca)
        .unwrap_or(Ordering::Equal)
        .then_with(|| b.bbox.area().partial_cmp(&a.bbox.area()).unwrap_or(Ordering::Equal))
}

/// Whole-image fusion for a list of `(description, category)` queries.
///
/// Detector-B boxes go through the geometric filter first. Queries the VLM
/// grounded are fused by consensus; the rest are recovered from A/B agreement.
/// The result is NMS-suppressed and sorted by `(x1, y1, description)`.
#[allow(clippy::too_many_arguments)]
pub fn fuse(
    queries: &[(String, String)],
    anchors: &[Detection],
    dets_a: &[Detection],
    dets_b: &[Detection],
    width: f64,
    height: f64,
    fusion: &FusionConfig,
    geometric: &GeometricFilterConfig,
) -> Result<Vec<Detection>> {
    let dets_b: Vec<Detection> =
        dets_b.iter().filter(|d| geometric_filter(d, width, height, geometric).is_keep()).cloned().collect();
    let mut fused = Vec::new();
    let mut missed = Vec::new();
    for (desc, cat) in queries {
        let same = |d: &&Detection| &d.description == desc;
        let Some(anchor) = anchors.iter().find(same) else {
            missed.push((desc, cat));
            continue;
        };
        let candidates: Vec<Detection> = dets_a.iter().chain(&dets_b).filter(same).cloned().collect();
        match consensus_fuse(anchor, &candidates, fusion) {
            Some(d) => fused.push(d),
            None => log::debug!("no detector agrees with `{desc}`"),
        }
    }
    for (desc, cat) in missed {
        let same = |d: &&Detection| &d.description == desc;
        let a: Vec<Detection> = dets_a.iter().filter(same).cloned().collect();
        let b: Vec<Detection> = dets_b.iter().filter(same).cloned().collect();
        fused.extend(recover_missed(&a, &b, fusion).into_iter().map(|mut d| {
            d.category = cat.clone();
            d
        }));
    }
    let mut kept = nms(&fused, fusion.nms_iou)?;
    kept.sort_by(|a, b| {
        a.bbox.x1.total_cmp(&b.bbox.x1).then(a.bbox.y1.total_cmp(&b.bbox.y1)).then(a.description.cmp(&b.description))
    });
    Ok(kept)
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct GeometricFilterConfig {
    /// Boxes closer than this to any image edge are rejected, pixels.
    pub boundary_margin: f64,
    /// Maximum longest side as a fraction of image height.
    pub max_side_frac: f64,
    pub min_area_frac: f64,
    pub max_area_frac: f64,
}

impl Default for GeometricFilterConfig {
    fn default() -> Self {
        GeometricFilterConfig {
            boundary_margin: 30.0,
            max_side_frac: 0.6,
            min_area_frac: 0.003,
            max_area_frac: 0.4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeometricReject {
    Boundary,
    LongestSide,
    TooSmall,
    TooLarge,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case", tag = "verdict", content = "reason")]
pub enum GeometricVerdict {
    Keep,
    Reject(GeometricReject),
}

impl GeometricVerdict {
    pub fn is_keep(&self) -> bool {
        matches!(self, GeometricVerdict::Keep)
    }
}

/// Checks the criteria in order boundary, longest side, too small, too large;
/// the first that fires is the reason.
pub fn geometric_filter(det: &Detection, width: f64, height: f64, cfg: &GeometricFilterConfig) -> GeometricVerdict {
    let b = &det.bbox;
    let m = cfg.boundary_margin;
    if b.x1 < m || b.y1 < m || b.x2 > width - m || b.y2 > height - m {
        return GeometricVerdict::Reject(GeometricReject::Boundary);
    }
    if b.width().max(b.height()) > cfg.max_side_frac * height {
        return GeometricVerdict::Reject(GeometricReject::LongestSide);
    }
    let image_area = width * height;
    if b.area() < cfg.min_area_frac * image_area {
        return GeometricVerdict::Reject(GeometricReject::TooSmall);
    }
    if b.area() > cfg.max_area_frac * image_area {
        return GeometricVerdict::Reject(GeometricReject::TooLarge);
    }
    GeometricVerdict::Keep
}

#[derive(serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct WireDetection {
    description: String,
    category: String,
    bbox_2d: Vec<serde_json::Number>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    score: Option<f64>,
}

/// Parses a grounding response: a JSON list of `{description, category,
/// bbox_2d: [x1, y1, x2, y2]}` objects, optionally wrapped in a ```json fence
/// or surrounded by prose. An optional `score` key becomes the confidence.
pub fn parse_detections(text: &str, source: Option<Source>) -> Result<Vec<Detection>> {
    let json = extract_json_array(text).ok_or_else(|| Error::parse("no JSON list found in grounding output"))?;
    let wire: Vec<WireDetection> =
        serde_json::from_str(json).map_err(|e| Error::parse(format!("grounding JSON: {e}")))?;
    wire.into_iter()
        .enumerate()
        .map(|(k, w)| {
            if w.bbox_2d.len() != 4 {
                return Err(Error::parse(format!(
                    "entry {k}: bbox_2d must hold exactly four numbers, got {}",
                    w.bbox_2d.len()
                )));
            }
            let v: Vec<f64> = w.bbox_2d.iter().map(|n| n.as_f64().unwrap_or(f64::NAN)).collect();
            let mut bbox = BBox::new(v[0], v[1], v[2], v[3]).map_err(|e| Error::parse(format!("entry {k}: {e}")))?;
            bbox.confidence = w.score;
            bbox.source = source;
            Detection::new(w.description, w.category, bbox).map_err(|e| Error::parse(format!("entry {k}: {e}")))
        })
        .collect()
}

/// Serializes detections in the grounding-list shape.
pub fn detections_to_json(dets: &[Detection]) -> serde_json::Value {
    let wire: Vec<WireDetection> = dets
        .iter()
        .map(|d| WireDetection {
            description: d.description.clone(),
            category: d.category.clone(),
            bbox_2d: d
                .bbox
                .to_array()
                .iter()
                .map(|&x| serde_json::Number::from_f64(x).expect("finite coordinate"))
                .collect(),
            score: d.bbox.confidence,
        })
        .collect();
    serde_json::to_value(wire).expect("plain data serializes")
}

/// Locates the outermost `[...]` span, skipping any markdown fence around it.
pub(crate) fn extract_json_array(text: &str) -> Option<&str> {
    let start = text.find('[')?;
    let end = text.rfind(']')?;
    (end > start).then(|| &text[start..=end])
}
