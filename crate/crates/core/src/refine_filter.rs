//! Quality gates for instruction-edited pairs and size-stratified sampling.
//!
//! An edit survives when it is structurally different from the original
//! (SSIM not above `ssim_max`), changed what was inside the object box
//! (`masked_sim` not above `masked_sim_max`) and left the frame intact
//! (`border_sim` at least `border_sim_min`). Checks run in that order and stop
//! at the first failure.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::boxfusion::BBox;
use crate::error::{Error, Result};
use crate::raster::Image;
use crate::services::FeatureExtractor;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct FilterConfig {
    pub ssim_max: f64,
    pub masked_sim_max: f64,
    pub border_sim_min: f64,
    pub border_frac: f64,
    pub ssim_window: usize,
    pub ssim_sigma: f64,
    pub k1: f64,
    pub k2: f64,
    /// Dynamic range `L` of pixel values.
    pub data_range: f64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            ssim_max: 0.86,
            masked_sim_max: 0.9,
            border_sim_min: 0.8,
            border_frac: 0.10,
            ssim_window: 11,
            ssim_sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            data_range: 1.0,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| v > 0.0 && v < 1.0;
        if !(unit(self.ssim_max) && unit(self.masked_sim_max) && unit(self.border_sim_min)) {
            return Err(Error::Config("filter thresholds must lie in (0, 1)".into()));
        }
        if !(self.border_frac > 0.0 && self.border_frac < 0.5) {
            return Err(Error::Config(format!("border_frac must lie in (0, 0.5), got {}", self.border_frac)));
        }
        if self.ssim_window == 0 || self.ssim_window.is_multiple_of(2) || self.ssim_sigma <= 0.0 {
            return Err(Error::Config("ssim window must be odd and sigma positive".into()));
        }
        Ok(())
    }

    pub fn c1(&self) -> f64 {
        (self.k1 * self.data_range).powi(2)
    }

    pub fn c2(&self) -> f64 {
        (self.k2 * self.data_range).powi(2)
    }
}

fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let half = (size / 2) as f64;
    let g: Vec<f64> = (0..size).map(|k| (-(k as f64 - half).powi(2) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" correlation of a `w × h` plane.
fn filter_valid(plane: &[f64], w: usize, h: usize, win: &[f64]) -> (Vec<f64>, usize, usize) {
    let k = win.len();
    let (ow, oh) = (w + 1 - k, h + 1 - k);
    let mut tmp = vec![0.0; ow * h];
    for r in 0..h {
        for c in 0..ow {
            tmp[r * ow + c] = (0..k).map(|t| win[t] * plane[r * w + c + t]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for r in 0..oh {
        for c in 0..ow {
            out[r * ow + c] = (0..k).map(|t| win[t] * tmp[(r + t) * ow + c]).sum();
        }
    }
    (out, ow, oh)
}

fn gray_plane(img: &Image) -> Vec<f64> {
    img.to_gray().data().iter().map(|&v| v as f64).collect()
}

/// Mean SSIM of the grayscale images over every valid Gaussian window. The
/// window shrinks to fit images smaller than `ssim_window`.
pub fn ssim(a: &Image, b: &Image, cfg: &FilterConfig) -> Result<f64> {
    if a.width() != b.width() || a.height() != b.height() {
        return Err(Error::domain(format!(
            "ssim needs equal sizes, got {}x{} and {}x{}",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )));
    }
    let (w, h) = (a.width(), a.height());
    if w == 0 || h == 0 {
        return Err(Error::domain("ssim of an empty image"));
    }
    let mut size = cfg.ssim_window.min(w).min(h);
    if size % 2 == 0 {
        size -= 1;
    }
    let win = gaussian_window(size, cfg.ssim_sigma);
    let x = gray_plane(a);
    let y = gray_plane(b);
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
    let (mx, ow, oh) = filter_valid(&x, w, h, &win);
    let (my, ..) = filter_valid(&y, w, h, &win);
    let (exx, ..) = filter_valid(&xx, w, h, &win);
    let (eyy, ..) = filter_valid(&yy, w, h, &win);
    let (exy, ..) = filter_valid(&xy, w, h, &win);
    let (c1, c2) = (cfg.c1(), cfg.c2());
    let mut total = 0.0;
    for k in 0..ow * oh {
        let (ux, uy) = (mx[k], my[k]);
        let sxx = exx[k] - ux * ux;
        let syy = eyy[k] - uy * uy;
        let sxy = exy[k] - ux * uy;
        total += ((2.0 * ux * uy + c1) * (2.0 * sxy + c2)) / ((ux * ux + uy * uy + c1) * (sxx + syy + c2));
    }
    Ok(total / (ow * oh) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    SsimTooHigh,
    EditInsignificant,
    BorderBroken,
}

/// Scores not reached because an earlier check failed are `None`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FilterVerdict {
    pub kept: bool,
    pub ssim: Option<f64>,
    pub masked_sim: Option<f64>,
    pub border_sim: Option<f64>,
    pub reject_reason: Option<RejectReason>,
}

impl FilterVerdict {
    /// Applies the thresholds in order to whichever scores are present.
    pub fn from_scores(ssim: Option<f64>, masked_sim: Option<f64>, border_sim: Option<f64>, cfg: &FilterConfig) -> Self {
        let reason = if ssim.is_some_and(|s| s > cfg.ssim_max) {
            Some(RejectReason::SsimTooHigh)
        } else if masked_sim.is_some_and(|s| s > cfg.masked_sim_max) {
            Some(RejectReason::EditInsignificant)
        } else if border_sim.is_some_and(|s| s < cfg.border_sim_min) {
            Some(RejectReason::BorderBroken)
        } else {
            None
        };
        FilterVerdict {
            kept: reason.is_none(),
            ssim,
            masked_sim,
            border_sim,
            reject_reason: reason,
        }
    }
}

pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum();
    let na: f64 = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

struct Embedder<'a> {
    extractor: &'a dyn FeatureExtractor,
    dim: usize,
}

impl Embedder<'_> {
    fn embed(&self, img: &Image, region: (usize, usize, usize, usize)) -> Result<Vec<f32>> {
        let (c0, r0, c1, r1) = region;
        let crop = img.crop(r0, c0, c1 - c0, r1 - r0)?;
        let v = self.extractor.embed(&crop.encode_png()?)?;
        if v.len() != self.dim {
            return Err(Error::parse(format!(
                "feature service declared width {} but returned {}",
                self.dim,
                v.len()
            )));
        }
        Ok(v)
    }

    /// Area-weighted mean of the region features.
    fn pooled(&self, img: &Image, regions: &[(usize, usize, usize, usize)]) -> Result<Vec<f32>> {
        let mut acc = vec![0.0f64; self.dim];
        let mut total = 0.0f64;
        for &reg in regions {
            let area = ((reg.2 - reg.0) * (reg.3 - reg.1)) as f64;
            for (a, v) in acc.iter_mut().zip(self.embed(img, reg)?) {
                *a += area * v as f64;
            }
            total += area;
        }
        Ok(acc.into_iter().map(|a| (a / total) as f32).collect())
    }
}

/// The four frame strips `(c0, r0, c1, r1)`, each `border_frac` of a side deep.
pub fn border_regions(width: usize, height: usize, frac: f64) -> Vec<(usize, usize, usize, usize)> {
    let bw = ((width as f64 * frac).round() as usize).clamp(1, width);
    let bh = ((height as f64 * frac).round() as usize).clamp(1, height);
    vec![
        (0, 0, width, bh),
        (0, height - bh, width, height),
        (0, 0, bw, height),
        (width - bw, 0, width, height),
    ]
}

/// Feature-similarity checks inside the object box and along the frame.
pub fn region_similarity_gate(
    orig: &Image,
    edited: &Image,
    mask_bbox: &BBox,
    extractor: &dyn FeatureExtractor,
    cfg: &FilterConfig,
) -> Result<FilterVerdict> {
    let (masked, border) = region_scores(orig, edited, mask_bbox, extractor, cfg)?;
    Ok(FilterVerdict::from_scores(None, Some(masked), Some(border), cfg))
}

fn region_scores(
    orig: &Image,
    edited: &Image,
    mask_bbox: &BBox,
    extractor: &dyn FeatureExtractor,
    cfg: &FilterConfig,
) -> Result<(f64, f64)> {
    cfg.validate()?;
    let (w, h) = (orig.width(), orig.height());
    if edited.width() != w || edited.height() != h {
        return Err(Error::domain("original and edited views differ in size"));
    }
    let span = mask_bbox.pixel_span(w, h);
    if span.0 >= span.2 || span.1 >= span.3 {
        return Err(Error::domain(format!("mask box {:?} is outside the view", mask_bbox.to_array())));
    }
    let run = || -> Result<(f64, f64)> {
        let e = Embedder { extractor, dim: extractor.feature_dim()? };
        let masked = cosine(&e.embed(orig, span)?, &e.embed(edited, span)?);
        let frame = border_regions(w, h, cfg.border_frac);
        let border = cosine(&e.pooled(orig, &frame)?, &e.pooled(edited, &frame)?);
        Ok((masked, border))
    };
    run().map_err(|e| e.in_stage("region similarity"))
}

/// SSIM gate, then the region gate.
pub fn hf_filter(
    orig: &Image,
    edited: &Image,
    mask_bbox: &BBox,
    extractor: &dyn FeatureExtractor,
    cfg: &FilterConfig,
) -> Result<FilterVerdict> {
    cfg.validate()?;
    let s = ssim(orig, edited, cfg)?;
    if s > cfg.ssim_max {
        return Ok(FilterVerdict::from_scores(Some(s), None, None, cfg));
    }
    let (masked, border) = region_scores(orig, edited, mask_bbox, extractor, cfg)?;
    Ok(FilterVerdict::from_scores(Some(s), Some(masked), Some(border), cfg))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SizeClass {
    Large,
    Medium,
    Small,
}

impl SizeClass {
    pub const ALL: [SizeClass; 3] = [SizeClass::Large, SizeClass::Medium, SizeClass::Small];

    fn index(self) -> usize {
        self as usize
    }

    /// Classes that absorb this class's shortfall, in order.
    pub fn fallback(self) -> [SizeClass; 2] {
        match self {
            SizeClass::Large => [SizeClass::Medium, SizeClass::Small],
            SizeClass::Medium => [SizeClass::Large, SizeClass::Small],
            SizeClass::Small => [SizeClass::Medium, SizeClass::Large],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct SizeClassConfig {
    /// Mask area above this fraction of the panorama is large.
    pub large_min_frac: f64,
    /// Mask area below this fraction is small.
    pub small_max_frac: f64,
}

impl Default for SizeClassConfig {
    fn default() -> Self {
        SizeClassConfig { large_min_frac: 0.05, small_max_frac: 0.01 }
    }
}

pub fn size_class(mask_area: usize, erp_area: usize, cfg: &SizeClassConfig) -> SizeClass {
    let frac = mask_area as f64 / erp_area.max(1) as f64;
    if frac > cfg.large_min_frac {
        SizeClass::Large
    } else if frac < cfg.small_max_frac {
        SizeClass::Small
    } else {
        SizeClass::Medium
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct Quotas {
    pub large: f64,
    pub medium: f64,
    pub small: f64,
}

impl Default for Quotas {
    fn default() -> Self {
        Quotas { large: 0.7, medium: 0.2, small: 0.1 }
    }
}

impl Quotas {
    /// Splits `n` by largest remainder; ties favour the larger class.
    pub fn allocate(&self, n: usize) -> Result<[usize; 3]> {
        let q = [self.large, self.medium, self.small];
        let sum: f64 = q.iter().sum();
        if q.iter().any(|v| !(v.is_finite() && *v >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("quotas must be non-negative and sum to 1, got {q:?}")));
        }
        let raw: Vec<f64> = q.iter().map(|v| v * n as f64).collect();
        let mut out = [0usize; 3];
        for k in 0..3 {
            out[k] = (raw[k] + 1e-9).floor() as usize;
        }
        let mut order = [0usize, 1, 2];
        order.sort_by(|&a, &b| (raw[b] - out[b] as f64).total_cmp(&(raw[a] - out[a] as f64)).then(a.cmp(&b)));
        let mut left = n.saturating_sub(out.iter().sum());
        for &k in order.iter().cycle() {
            if left == 0 {
                break;
            }
            out[k] += 1;
            left -= 1;
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub struct Spill {
    pub from: SizeClass,
    pub to: SizeClass,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize)]
pub struct SampleReport {
    /// Indices into the input, ascending.
    pub selected: Vec<usize>,
    /// Per class, in `SizeClass::ALL` order.
    pub requested: [usize; 3],
    pub taken: [usize; 3],
    pub spills: Vec<Spill>,
    /// Requested items no class could supply.
    pub shortfall: usize,
}

/// Seeded draw of `n` items following `quotas`. A class that runs out passes
/// its remaining quota along [`SizeClass::fallback`].
pub fn stratified_sample(classes: &[SizeClass], n: usize, quotas: &Quotas, seed: u64) -> Result<SampleReport> {
    let requested = quotas.allocate(n)?;
    let mut pools: [Vec<usize>; 3] = Default::default();
    for (k, c) in classes.iter().enumerate() {
        pools[c.index()].push(k);
    }
    let mut own = [0usize; 3];
    for c in SizeClass::ALL {
        own[c.index()] = requested[c.index()].min(pools[c.index()].len());
    }
    let mut taken = own;
    let mut spills = Vec::new();
    let mut shortfall = 0;
    for c in SizeClass::ALL {
        let mut deficit = requested[c.index()] - own[c.index()];
        for t in c.fallback() {
            if deficit == 0 {
                break;
            }
            let add = deficit.min(pools[t.index()].len() - taken[t.index()]);
            if add > 0 {
                taken[t.index()] += add;
                deficit -= add;
                spills.push(Spill { from: c, to: t, count: add });
            }
        }
        shortfall += deficit;
    }
    for s in &spills {
        log::warn!("size class {:?} exhausted; {} drawn from {:?} instead", s.from, s.count, s.to);
    }
    if shortfall > 0 {
        log::warn!("stratified sample is {shortfall} short of the {n} requested");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut selected = Vec::with_capacity(n);
    for c in SizeClass::ALL {
        let pool = &mut pools[c.index()];
        pool.shuffle(&mut rng);
        selected.extend_from_slice(&pool[..taken[c.index()]]);
    }
    selected.sort_unstable();
    Ok(SampleReport { selected, requested, taken, spills, shortfall })
}
