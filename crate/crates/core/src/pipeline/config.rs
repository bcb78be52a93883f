use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::retry::RetryPolicy;
use crate::boxfusion::{FusionConfig, GeometricFilterConfig, Source};
use crate::error::{Error, Result};
use crate::maskops::RefineConfig;
use crate::refine_filter::{FilterConfig, Quotas, SizeClassConfig};
use crate::services::http::HttpService;
use crate::services::manifest::{ServiceManifest, ROLES};
use crate::services::mock::{MockDetector, MockEditor, MockEraser, MockSegmenter, MockVlm, PixelStatsFeatures};
use crate::services::{Detector, Editor, Eraser, FeatureExtractor, Segmenter, TextGenerator};
use crate::viewport_adapt::AdaptConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    #[default]
    Mock,
    Http,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServicesConfig {
    /// Endpoint manifest, required when any role uses `http`.
    pub manifest: Option<PathBuf>,
    pub backend: Backend,
    /// Per-role backend overrides.
    pub roles: BTreeMap<String, Backend>,
}

impl ServicesConfig {
    pub fn backend_for(&self, role: &str) -> Backend {
        self.roles.get(role).copied().unwrap_or(self.backend)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ViewConfig {
    pub width: usize,
    pub height: usize,
}

impl Default for ViewConfig {
    fn default() -> Self {
        ViewConfig { width: 256, height: 256 }
    }
}

/// Thresholds for the panorama-level detectors of the extraction stage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectionConfig {
    pub box_threshold: f64,
    pub text_threshold: f64,
}

impl Default for DetectionConfig {
    fn default() -> Self {
        DetectionConfig { box_threshold: 0.3, text_threshold: 0.25 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HfConfig {
    pub enabled: bool,
    /// Records to draw by size class; all records when unset.
    pub sample: Option<usize>,
}

impl Default for HfConfig {
    fn default() -> Self {
        HfConfig { enabled: true, sample: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub corpus_root: PathBuf,
    pub output_root: PathBuf,
    pub seed: u64,
    pub jobs: usize,
    pub max_objects: usize,
    pub view: ViewConfig,
    pub detection: DetectionConfig,
    pub services: ServicesConfig,
    pub retry: RetryPolicy,
    pub fusion: FusionConfig,
    pub geometric: GeometricFilterConfig,
    pub adapt: AdaptConfig,
    pub refine: RefineConfig,
    pub filter: FilterConfig,
    pub size_classes: SizeClassConfig,
    pub quotas: Quotas,
    pub hf: HfConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            corpus_root: PathBuf::from("corpus"),
            output_root: PathBuf::from("out"),
            seed: 0,
            jobs: 1,
            max_objects: 8,
            view: ViewConfig::default(),
            detection: DetectionConfig::default(),
            services: ServicesConfig::default(),
            retry: RetryPolicy::default(),
            fusion: FusionConfig::default(),
            geometric: GeometricFilterConfig::default(),
            adapt: AdaptConfig::default(),
            refine: RefineConfig::default(),
            filter: FilterConfig::default(),
            size_classes: SizeClassConfig::default(),
            quotas: Quotas::default(),
            hf: HfConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn parse_toml(text: &str) -> Result<Self> {
        let cfg: PipelineConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Relative paths in the file resolve against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::parse_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.corpus_root);
        fix(&mut self.output_root);
        if let Some(m) = self.services.manifest.as_mut() {
            fix(m);
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.jobs == 0 {
            return Err(Error::Config("jobs must be at least 1".into()));
        }
        if self.max_objects == 0 {
            return Err(Error::Config("max_objects must be at least 1".into()));
        }
        if self.view.width < 16 || self.view.height < 16 {
            return Err(Error::Config("view must be at least 16x16".into()));
        }
        if self.retry.delays_secs.iter().any(|d| !d.is_finite() || *d < 0.0) {
            return Err(Error::Config("retry delays must be finite and non-negative".into()));
        }
        for role in self.services.roles.keys() {
            if !ROLES.contains(&role.as_str()) {
                return Err(Error::Config(format!("unknown service role `{role}`")));
            }
        }
        self.adapt.validate()?;
        self.filter.validate()?;
        self.quotas.allocate(1)?;
        Ok(())
    }
}

/// One client per role.
pub struct Services {
    pub vlm: Box<dyn TextGenerator>,
    pub detector_a: Box<dyn Detector>,
    pub detector_b: Box<dyn Detector>,
    pub segmenter: Box<dyn Segmenter>,
    pub eraser: Box<dyn Eraser>,
    pub recaption: Box<dyn TextGenerator>,
    pub classifier: Box<dyn TextGenerator>,
    pub editor: Box<dyn Editor>,
    pub features: Box<dyn FeatureExtractor>,
}

impl Services {
    pub fn mock() -> Self {
        Services {
            vlm: Box::new(MockVlm),
            detector_a: Box::new(MockDetector::detector_a()),
            detector_b: Box::new(MockDetector::detector_b()),
            segmenter: Box::new(MockSegmenter),
            eraser: Box::new(MockEraser),
            recaption: Box::new(MockVlm),
            classifier: Box::new(MockVlm),
            editor: Box::new(MockEditor),
            features: Box::new(PixelStatsFeatures),
        }
    }

    pub fn from_config(cfg: &ServicesConfig) -> Result<Self> {
        let mut s = Services::mock();
        let needed: Vec<&str> = ROLES.iter().copied().filter(|r| cfg.backend_for(r) == Backend::Http).collect();
        if needed.is_empty() {
            return Ok(s);
        }
        let path = cfg
            .manifest
            .as_ref()
            .ok_or_else(|| Error::Config("services.manifest is required for http backends".into()))?;
        let manifest = ServiceManifest::load(path)?;
        let client = |role: &str| -> Result<HttpService> {
            manifest
                .get(role)
                .cloned()
                .map(HttpService::new)
                .ok_or_else(|| Error::Config(format!("manifest {} has no `{role}` service", path.display())))
        };
        for role in needed {
            match role {
                "vlm" => s.vlm = Box::new(client(role)?.with_source(Source::Vlm)),
                "detector_a" => s.detector_a = Box::new(client(role)?.with_source(Source::DetectorA)),
                "detector_b" => s.detector_b = Box::new(client(role)?.with_source(Source::DetectorB)),
                "segmenter" => s.segmenter = Box::new(client(role)?),
                "eraser" => s.eraser = Box::new(client(role)?),
                "recaption" => s.recaption = Box::new(client(role)?),
                "classifier" => s.classifier = Box::new(client(role)?),
                "editor" => s.editor = Box::new(client(role)?),
                "features" => s.features = Box::new(client(role)?),
                other => unreachable!("role {other} is listed in ROLES"),
            }
        }
        Ok(s)
    }
}
