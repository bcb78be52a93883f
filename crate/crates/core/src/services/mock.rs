//! Deterministic in-process stand-ins for every service role.
//!
//! They read scenes produced by [`crate::synth`]: objects are flat palette
//! colours, so "recognition" is colour matching and "segmentation" is flood
//! fill. Replies follow the same text formats the real models are prompted for.

use std::collections::VecDeque;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use super::{
    DetectRequest, Detector, Editor, Eraser, FeatureExtractor, PromptRequest, ScoredMask, SegmentPrompt,
    SegmentRequest, Segmenter, ServiceError, ServiceResult, TextGenerator,
};
use crate::boxfusion::{detections_to_json, BBox, Detection, Source};
use crate::maskops::{dilate, Mask};
use crate::raster::Image;
use crate::synth::{find_blobs, label_image, palette_by_word, Blob, PALETTE};

fn bad(e: impl std::fmt::Display) -> ServiceError {
    ServiceError::BadResponse(e.to_string())
}

fn decode(png: &[u8]) -> ServiceResult<Image> {
    Image::decode(png).map_err(bad)
}

fn field<'a>(req: &'a PromptRequest, name: &str) -> ServiceResult<&'a str> {
    req.fields
        .get(name)
        .map(String::as_str)
        .ok_or_else(|| bad(format!("template `{}` needs field `{name}`", req.template)))
}

fn image(req: &PromptRequest) -> ServiceResult<&[u8]> {
    req.image_png
        .as_deref()
        .ok_or_else(|| bad(format!("template `{}` needs an image", req.template)))
}

/// Vision-language model covering object listing, grounding, affiliation,
/// recaption and localization classification.
#[derive(Debug, Clone, Copy, Default)]
pub struct MockVlm;

impl MockVlm {
    fn top_level(blobs: &[Blob]) -> Vec<Blob> {
        let mut top: Vec<Blob> = blobs
            .iter()
            .filter(|b| !blobs.iter().any(|o| o.palette != b.palette && b.rests_on(o)))
            .copied()
            .collect();
        top.sort_by(|a, b| a.center().0.total_cmp(&b.center().0).then(a.palette.cmp(&b.palette)));
        top
    }

    fn supported<'a>(blobs: &'a [Blob], base: &'a Blob) -> impl Iterator<Item = &'a Blob> + 'a {
        blobs.iter().filter(move |o| o.palette != base.palette && o.rests_on(base))
    }

    fn location(b: &Blob, top: &[Blob], width: usize) -> String {
        let cx = b.center().0;
        let neighbour = top
            .iter()
            .filter(|o| o.palette != b.palette)
            .map(|o| ((o.center().0 - cx).abs(), o))
            .filter(|(d, _)| *d < 100.0)
            .min_by(|a, b| a.0.total_cmp(&b.0));
        if let Some((_, o)) = neighbour {
            return format!("next to the {} {}", o.entry().color, o.entry().noun);
        }
        let mid = width as f64 / 2.0;
        if (cx - mid).abs() < width as f64 / 12.0 {
            "in the center of the image".into()
        } else if cx < mid {
            "on the left side of the image".into()
        } else {
            "on the right side of the image".into()
        }
    }

    fn describe(&self, req: &PromptRequest) -> ServiceResult<String> {
        let img = decode(image(req)?)?;
        let blobs = find_blobs(&img, 30);
        let top = Self::top_level(&blobs);
        let items: Vec<serde_json::Value> = top
            .iter()
            .take(8)
            .map(|b| {
                let e = b.entry();
                let mut text = format!("{} {} {}", article(e.color), e.color, e.noun);
                for s in Self::supported(&blobs, b) {
                    text.push_str(&format!(" with a {} {} on it", s.entry().color, s.entry().noun));
                }
                text.push_str(&format!(" {}.", Self::location(b, &top, img.width())));
                serde_json::json!({ "description": text, "category": e.noun })
            })
            .collect();
        let body = serde_json::to_string_pretty(&items).map_err(bad)?;
        Ok(format!("```json\n{body}\n```"))
    }

    fn ground(&self, req: &PromptRequest) -> ServiceResult<String> {
        let img = decode(image(req)?)?;
        let blobs = find_blobs(&img, 30);
        let mut out = Vec::new();
        for (description, category) in parse_pair_lines(field(req, "descriptions_categories_text")?) {
            let Some(p) = palette_by_word(&description) else { continue };
            let Some(base) = blobs.iter().find(|b| b.palette == p) else { continue };
            let mut bbox = blob_box(base, 0.0, img.width(), img.height());
            for s in Self::supported(&blobs, base) {
                bbox = bbox.union_box(&blob_box(s, 0.0, img.width(), img.height()));
            }
            out.push(Detection::new(description, category, bbox).map_err(bad)?);
        }
        Ok(format!("```json\n{}\n```", detections_to_json(&out)))
    }

    fn affiliation(&self, req: &PromptRequest) -> ServiceResult<String> {
        let img = decode(image(req)?)?;
        let blobs = find_blobs(&img, 30);
        let chosen = field(req, "chosen_item_description")?;
        let p = palette_by_word(chosen).ok_or_else(|| bad(format!("cannot find `{chosen}`")))?;
        let base = blobs
            .iter()
            .find(|b| b.palette == p)
            .ok_or_else(|| bad(format!("`{chosen}` is not in the image")))?;
        let mut lines = vec![format!("- {} (1)", base.entry().noun)];
        lines.extend(Self::supported(&blobs, base).map(|s| format!("- {} (1)", s.entry().noun)));
        Ok(lines.join("\n"))
    }

    fn recaption(&self, req: &PromptRequest) -> ServiceResult<String> {
        let category = field(req, "original_category")?;
        let original = field(req, "original_description")?;
        let color = palette_by_word(original).map(|p| PALETTE[p].color).unwrap_or("plain");
        let loc = location_phrase(original);
        let short = loc
            .replace(" of the image", "")
            .replace(" side", "")
            .split_whitespace()
            .filter(|w| !PALETTE.iter().any(|p| p.color == *w))
            .collect::<Vec<_>>()
            .join(" ");
        let a = article(color);
        Ok(format!(
            "Standard Description: {a} {color} {category} with a smooth, evenly coloured surface, {loc}.\n\
             Simple Description: {a} {color} {category} {short}."
        ))
    }

    fn classify(&self, req: &PromptRequest) -> ServiceResult<String> {
        let description = field(req, "description")?.trim();
        // Few-shot examples in the prompt take precedence.
        for line in req.prompt.lines() {
            if let Some((text, label)) = parse_example_line(line) {
                if text == description {
                    return Ok(label.to_string());
                }
            }
        }
        let lower = description.to_ascii_lowercase();
        let frame = ["of the image", "in the image", "of the room", "in the center"];
        Ok(if frame.iter().any(|f| lower.contains(f)) { "absolute" } else { "relative" }.into())
    }
}

impl TextGenerator for MockVlm {
    fn generate(&self, req: &PromptRequest) -> ServiceResult<String> {
        match req.template.as_str() {
            "object_description" => self.describe(req),
            "object_grounding" => self.ground(req),
            "affiliation" => self.affiliation(req),
            "recaption" => self.recaption(req),
            "classification" => self.classify(req),
            other => Err(bad(format!("mock VLM has no behaviour for template `{other}`"))),
        }
    }
}

fn article(word: &str) -> &'static str {
    if word.starts_with(['a', 'e', 'i', 'o', 'u']) { "An" } else { "A" }
}

/// Parses `- description: "...", category: "..."` lines.
fn parse_pair_lines(text: &str) -> Vec<(String, String)> {
    text.lines()
        .filter_map(|line| {
            let rest = line.split_once("description: \"")?.1;
            let (desc, rest) = rest.split_once("\", category: \"")?;
            let cat = rest.strip_suffix('"')?;
            Some((desc.to_string(), cat.to_string()))
        })
        .collect()
}

/// Parses `- "text" -> "label"` few-shot lines.
fn parse_example_line(line: &str) -> Option<(&str, &str)> {
    let line = line.trim().strip_prefix("- \"")?;
    let (text, label) = line.split_once("\" -> \"")?;
    Some((text, label.trim_end().strip_suffix('"')?))
}

/// Spatial part of a generated description: from the first location cue to the end.
pub fn location_phrase(description: &str) -> String {
    let d = description.trim().trim_end_matches('.');
    let cues = [" next to ", " in the ", " on the left", " on the right", " by the ", " near "];
    cues.iter()
        .filter_map(|c| d.find(c))
        .min()
        .map(|k| d[k + 1..].to_string())
        .unwrap_or_default()
}

fn blob_box(b: &Blob, grow: f64, width: usize, height: usize) -> BBox {
    let x1 = (b.x1 as f64 - grow).max(0.0);
    let y1 = (b.y1 as f64 - grow).max(0.0);
    let x2 = (b.x2 as f64 + grow).min(width as f64);
    let y2 = (b.y2 as f64 + grow).min(height as f64);
    BBox::new(x1, y1, x2, y2).expect("blob boxes are non-degenerate")
}

/// Colour-matching phrase grounder. The two fusion sources differ by a one
/// pixel jitter and by whether they report a confidence.
#[derive(Debug, Clone, Copy)]
pub struct MockDetector {
    source: Source,
    grow: f64,
    confidence: Option<f64>,
}

impl MockDetector {
    pub fn detector_a() -> Self {
        MockDetector { source: Source::DetectorA, grow: 1.0, confidence: Some(0.9) }
    }

    pub fn detector_b() -> Self {
        MockDetector { source: Source::DetectorB, grow: -1.0, confidence: None }
    }
}

impl Detector for MockDetector {
    fn detect(&self, req: &DetectRequest) -> ServiceResult<Vec<Detection>> {
        let img = decode(&req.image_png)?;
        let blobs = find_blobs(&img, 4);
        let mut out = Vec::new();
        if self.confidence.is_some_and(|c| c < req.box_threshold) {
            return Ok(out);
        }
        for q in &req.queries {
            let Some(p) = palette_by_word(q) else { continue };
            let Some(b) = blobs.iter().find(|b| b.palette == p) else { continue };
            let grow = if b.x2 - b.x1 > 4 && b.y2 - b.y1 > 4 { self.grow } else { 0.0 };
            let mut bbox = blob_box(b, grow, img.width(), img.height()).with_source(self.source);
            bbox.confidence = self.confidence;
            out.push(Detection::new(q.clone(), PALETTE[p].noun, bbox).map_err(bad)?);
        }
        Ok(out)
    }
}

/// Box prompts keep the palette pixels inside the box; point prompts flood
/// fill palette pixels (8-connected) from each point.
#[derive(Debug, Clone, Copy, Default)]
pub struct MockSegmenter;

impl Segmenter for MockSegmenter {
    fn segment(&self, req: &SegmentRequest) -> ServiceResult<Vec<ScoredMask>> {
        let img = decode(&req.image_png)?;
        let (w, h) = (img.width(), img.height());
        let labels = label_image(&img);
        match &req.prompt {
            SegmentPrompt::Box(b) => {
                let (c0, r0, c1, r1) = b.pixel_span(w, h);
                let inside = |r: usize, c: usize| r >= r0 && r < r1 && c >= c0 && c < c1;
                let fg = Mask::from_fn(w, h, |r, c| inside(r, c) && labels[r * w + c].is_some());
                let full = Mask::from_fn(w, h, inside);
                Ok(vec![ScoredMask { mask: full, score: 0.5 }, ScoredMask { mask: fg, score: 0.9 }])
            }
            SegmentPrompt::Points(points) => {
                let mut m = Mask::new(w, h);
                for &(r, c) in points {
                    if r >= h || c >= w {
                        return Err(bad(format!("point ({r}, {c}) outside {w}x{h}")));
                    }
                    flood(&labels, w, h, r, c, &mut m);
                }
                Ok(vec![ScoredMask { mask: m, score: 0.95 }])
            }
        }
    }
}

fn flood(labels: &[Option<usize>], w: usize, h: usize, r: usize, c: usize, m: &mut Mask) {
    if labels[r * w + c].is_none() {
        m.set(r, c, true);
        return;
    }
    let mut queue = VecDeque::from([(r, c)]);
    m.set(r, c, true);
    while let Some((r, c)) = queue.pop_front() {
        for dr in -1i64..=1 {
            for dc in -1i64..=1 {
                let (nr, nc) = (r as i64 + dr, c as i64 + dc);
                if nr < 0 || nc < 0 || nr >= h as i64 || nc >= w as i64 {
                    continue;
                }
                let (nr, nc) = (nr as usize, nc as usize);
                if !m.get(nr, nc) && labels[nr * w + nc].is_some() {
                    m.set(nr, nc, true);
                    queue.push_back((nr, nc));
                }
            }
        }
    }
}

/// Replaces masked pixels with the mean colour of a ring around the mask.
/// `ring` is the side of the square structuring element that defines it.
pub fn fill_from_ring(img: &mut Image, mask: &Mask, ring: usize) -> crate::error::Result<()> {
    let grown = dilate(mask, ring)?;
    let ch = img.channels();
    let mut sum = vec![0.0f64; ch];
    let mut n = 0usize;
    for r in 0..img.height() {
        for c in 0..img.width() {
            if grown.get(r, c) && !mask.get(r, c) {
                for (k, s) in sum.iter_mut().enumerate() {
                    *s += img.get(r, c, k) as f64;
                }
                n += 1;
            }
        }
    }
    let fill: Vec<f32> = sum.iter().map(|s| if n == 0 { 0.5 } else { (s / n as f64) as f32 }).collect();
    for r in 0..img.height() {
        for c in 0..img.width() {
            if mask.get(r, c) {
                for (k, v) in fill.iter().enumerate() {
                    img.set(r, c, k, *v);
                }
            }
        }
    }
    Ok(())
}

/// Inpainter: fills the mask with the mean of a 31-pixel ring around it.
#[derive(Debug, Clone, Copy, Default)]
pub struct MockEraser;

impl Eraser for MockEraser {
    fn erase(&self, erp_png: &[u8], mask_png: &[u8]) -> ServiceResult<Vec<u8>> {
        let mut img = decode(erp_png)?;
        let mask = Mask::decode_png(mask_png).map_err(bad)?;
        if mask.width() != img.width() || mask.height() != img.height() {
            return Err(bad("mask and image sizes differ"));
        }
        fill_from_ring(&mut img, &mask, 31).map_err(bad)?;
        img.encode_png().map_err(bad)
    }
}

/// Instruction editor: removes the palette object named after "remove the".
#[derive(Debug, Clone, Copy, Default)]
pub struct MockEditor;

impl Editor for MockEditor {
    fn edit(&self, image_png: &[u8], instruction: &str) -> ServiceResult<Vec<u8>> {
        let mut img = decode(image_png)?;
        let target = instruction
            .to_ascii_lowercase()
            .split_once("remove the ")
            .and_then(|(_, rest)| palette_by_word(rest))
            .ok_or_else(|| bad(format!("cannot interpret instruction `{instruction}`")))?;
        let (w, h) = (img.width(), img.height());
        let labels = label_image(&img);
        let mut mask = Mask::new(w, h);
        for (k, l) in labels.iter().enumerate() {
            if *l == Some(target) && !mask.get(k / w, k % w) {
                flood(&labels, w, h, k / w, k % w, &mut mask);
            }
        }
        fill_from_ring(&mut img, &mask, 31).map_err(bad)?;
        img.encode_png().map_err(bad)
    }
}

/// 15-wide descriptor: centred channel means over a 2×2 grid plus channel
/// standard deviations, L2-normalized.
#[derive(Debug, Clone, Copy, Default)]
pub struct PixelStatsFeatures;

pub const PIXEL_STATS_DIM: usize = 15;

pub fn pixel_stats(img: &Image) -> Vec<f32> {
    let (w, h, ch) = (img.width(), img.height(), img.channels().min(3));
    let mut v = Vec::with_capacity(PIXEL_STATS_DIM);
    for (r0, r1) in [(0, h / 2), (h / 2, h)] {
        for (c0, c1) in [(0, w / 2), (w / 2, w)] {
            for k in 0..3 {
                let k = k.min(ch - 1);
                let mut s = 0.0f64;
                let mut n = 0usize;
                for r in r0..r1.max(r0 + 1).min(h) {
                    for c in c0..c1.max(c0 + 1).min(w) {
                        s += img.get(r, c, k) as f64;
                        n += 1;
                    }
                }
                v.push(if n == 0 { 0.0 } else { (s / n as f64 - 0.5) as f32 });
            }
        }
    }
    for k in 0..3 {
        let k = k.min(ch - 1);
        let n = (w * h) as f64;
        let mean = (0..h).flat_map(|r| (0..w).map(move |c| (r, c))).map(|(r, c)| img.get(r, c, k) as f64).sum::<f64>() / n;
        let var = (0..h)
            .flat_map(|r| (0..w).map(move |c| (r, c)))
            .map(|(r, c)| (img.get(r, c, k) as f64 - mean).powi(2))
            .sum::<f64>()
            / n;
        v.push(var.sqrt() as f32);
    }
    let norm = v.iter().map(|x| x * x).sum::<f32>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    v
}

impl FeatureExtractor for PixelStatsFeatures {
    fn feature_dim(&self) -> ServiceResult<usize> {
        Ok(PIXEL_STATS_DIM)
    }

    fn embed(&self, crop_png: &[u8]) -> ServiceResult<Vec<f32>> {
        Ok(pixel_stats(&decode(crop_png)?))
    }
}

/// Feature extractor backed by a closure over the decoded crop.
pub struct FnFeatures<F> {
    dim: usize,
    f: F,
}

impl<F: Fn(&Image) -> Vec<f32> + Send + Sync> FnFeatures<F> {
    pub fn new(dim: usize, f: F) -> Self {
        FnFeatures { dim, f }
    }
}

impl<F: Fn(&Image) -> Vec<f32> + Send + Sync> FeatureExtractor for FnFeatures<F> {
    fn feature_dim(&self) -> ServiceResult<usize> {
        Ok(self.dim)
    }

    fn embed(&self, crop_png: &[u8]) -> ServiceResult<Vec<f32>> {
        Ok((self.f)(&decode(crop_png)?))
    }
}

/// Replies with queued strings in order, then repeats the last one.
pub struct ScriptedText {
    replies: Mutex<VecDeque<String>>,
    last: Mutex<Option<String>>,
}

impl ScriptedText {
    pub fn new<S: Into<String>>(replies: impl IntoIterator<Item = S>) -> Self {
        ScriptedText {
            replies: Mutex::new(replies.into_iter().map(Into::into).collect()),
            last: Mutex::new(None),
        }
    }
}

impl TextGenerator for ScriptedText {
    fn generate(&self, _req: &PromptRequest) -> ServiceResult<String> {
        let next = self.replies.lock().expect("poisoned").pop_front();
        let mut last = self.last.lock().expect("poisoned");
        if let Some(n) = next {
            *last = Some(n);
        }
        last.clone().ok_or_else(|| bad("script is empty"))
    }
}

/// Wraps a service and makes its first `failures` calls fail as unavailable.
pub struct Flaky<S> {
    inner: S,
    remaining: AtomicUsize,
    calls: AtomicUsize,
}

impl<S> Flaky<S> {
    pub fn new(inner: S, failures: usize) -> Self {
        Flaky {
            inner,
            remaining: AtomicUsize::new(failures),
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    fn gate(&self) -> ServiceResult<()> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let failed = self
            .remaining
            .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |n| n.checked_sub(1))
            .is_ok();
        if failed {
            Err(ServiceError::Unavailable("scripted outage".into()))
        } else {
            Ok(())
        }
    }
}

impl<S: TextGenerator> TextGenerator for Flaky<S> {
    fn generate(&self, req: &PromptRequest) -> ServiceResult<String> {
        self.gate()?;
        self.inner.generate(req)
    }
}

impl<S: Detector> Detector for Flaky<S> {
    fn detect(&self, req: &DetectRequest) -> ServiceResult<Vec<Detection>> {
        self.gate()?;
        self.inner.detect(req)
    }
}

impl<S: Segmenter> Segmenter for Flaky<S> {
    fn segment(&self, req: &SegmentRequest) -> ServiceResult<Vec<ScoredMask>> {
        self.gate()?;
        self.inner.segment(req)
    }
}

impl<S: Eraser> Eraser for Flaky<S> {
    fn erase(&self, erp_png: &[u8], mask_png: &[u8]) -> ServiceResult<Vec<u8>> {
        self.gate()?;
        self.inner.erase(erp_png, mask_png)
    }
}

impl<S: Editor> Editor for Flaky<S> {
    fn edit(&self, image_png: &[u8], instruction: &str) -> ServiceResult<Vec<u8>> {
        self.gate()?;
        self.inner.edit(image_png, instruction)
    }
}

impl<S: FeatureExtractor> FeatureExtractor for Flaky<S> {
    fn feature_dim(&self) -> ServiceResult<usize> {
        self.inner.feature_dim()
    }

    fn embed(&self, crop_png: &[u8]) -> ServiceResult<Vec<f32>> {
        self.gate()?;
        self.inner.embed(crop_png)
    }
}

/// Always fails with the given error.
pub struct Broken(pub ServiceError);

impl Segmenter for Broken {
    fn segment(&self, _req: &SegmentRequest) -> ServiceResult<Vec<ScoredMask>> {
        Err(self.0.clone())
    }
}

impl Detector for Broken {
    fn detect(&self, _req: &DetectRequest) -> ServiceResult<Vec<Detection>> {
        Err(self.0.clone())
    }
}

impl TextGenerator for Broken {
    fn generate(&self, _req: &PromptRequest) -> ServiceResult<String> {
        Err(self.0.clone())
    }
}
