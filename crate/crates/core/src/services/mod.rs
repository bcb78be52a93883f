//! Model-service contracts used by the pipeline stages.
//!
//! Every neural component (VLM, detectors, segmenter, inpainter, instruction
//! editor, feature backbone) sits behind one of these traits. Implementations
//! either call an HTTP/JSON endpoint declared in a [`manifest::ServiceManifest`]
//! or are deterministic in-process mocks from [`mock`].

use std::collections::BTreeMap;

use crate::boxfusion::{BBox, Detection};
use crate::maskops::Mask;

pub mod http;
pub mod manifest;
pub mod mock;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ServiceError {
    /// Transport failure, timeout or 5xx; worth retrying.
    #[error("service unavailable: {0}")]
    Unavailable(String),
    /// The service answered with something that does not fit the contract.
    #[error("bad service response: {0}")]
    BadResponse(String),
}

impl ServiceError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, ServiceError::Unavailable(_))
    }
}

pub type ServiceResult<T> = std::result::Result<T, ServiceError>;

/// Rendered prompt plus the bindings it was rendered from.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptRequest {
    /// Template name, e.g. `object_description`.
    pub template: String,
    pub prompt: String,
    pub fields: BTreeMap<String, String>,
    pub image_png: Option<Vec<u8>>,
}

/// Text-in/text-out model: the VLM roles and the localization classifier.
pub trait TextGenerator: Send + Sync {
    fn generate(&self, req: &PromptRequest) -> ServiceResult<String>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectRequest {
    pub image_png: Vec<u8>,
    pub queries: Vec<String>,
    pub box_threshold: f64,
    pub text_threshold: f64,
}

/// Phrase-grounding detector. Returned boxes are in the request image's pixels
/// and their `description` echoes the query they answer.
pub trait Detector: Send + Sync {
    fn detect(&self, req: &DetectRequest) -> ServiceResult<Vec<Detection>>;
}

#[derive(Debug, Clone, PartialEq)]
pub enum SegmentPrompt {
    Box(BBox),
    /// Positive points as `(row, col)`.
    Points(Vec<(usize, usize)>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentRequest {
    pub image_png: Vec<u8>,
    pub prompt: SegmentPrompt,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredMask {
    pub mask: Mask,
    pub score: f64,
}

pub trait Segmenter: Send + Sync {
    fn segment(&self, req: &SegmentRequest) -> ServiceResult<Vec<ScoredMask>>;
}

/// Mask-guided inpainter working on the full panorama.
pub trait Eraser: Send + Sync {
    fn erase(&self, erp_png: &[u8], mask_png: &[u8]) -> ServiceResult<Vec<u8>>;
}

/// Instruction-driven image editor.
pub trait Editor: Send + Sync {
    fn edit(&self, image_png: &[u8], instruction: &str) -> ServiceResult<Vec<u8>>;
}

/// Fixed-width image embedding; the width is declared up front.
pub trait FeatureExtractor: Send + Sync {
    fn feature_dim(&self) -> ServiceResult<usize>;
    fn embed(&self, crop_png: &[u8]) -> ServiceResult<Vec<f32>>;
}
