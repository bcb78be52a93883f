//! Retry with backoff for unavailable services, as a transparent wrapper.

use std::sync::atomic::{AtomicU32, Ordering};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::boxfusion::Detection;
use crate::services::{
    DetectRequest, Detector, Editor, Eraser, FeatureExtractor, PromptRequest, ScoredMask, SegmentRequest, Segmenter,
    ServiceResult, TextGenerator,
};

/// One retry per listed delay, in seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    pub delays_secs: Vec<f64>,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy { delays_secs: vec![1.0, 4.0, 16.0] }
    }
}

impl RetryPolicy {
    pub fn immediate(retries: usize) -> Self {
        RetryPolicy { delays_secs: vec![0.0; retries] }
    }

    pub fn max_retries(&self) -> usize {
        self.delays_secs.len()
    }
}

/// Borrows a service and counts the retries it spends.
pub struct Retrying<'a, S: ?Sized> {
    inner: &'a S,
    policy: &'a RetryPolicy,
    retries: AtomicU32,
}

impl<'a, S: ?Sized> Retrying<'a, S> {
    pub fn new(inner: &'a S, policy: &'a RetryPolicy) -> Self {
        Retrying { inner, policy, retries: AtomicU32::new(0) }
    }

    pub fn retries(&self) -> u32 {
        self.retries.load(Ordering::SeqCst)
    }

    fn call<T>(&self, mut f: impl FnMut(&S) -> ServiceResult<T>) -> ServiceResult<T> {
        let mut attempt = 0;
        loop {
            match f(self.inner) {
                Err(e) if e.is_retryable() && attempt < self.policy.max_retries() => {
                    let delay = self.policy.delays_secs[attempt];
                    log::info!("{e}; retry {} in {delay}s", attempt + 1);
                    if delay > 0.0 {
                        std::thread::sleep(Duration::from_secs_f64(delay));
                    }
                    self.retries.fetch_add(1, Ordering::SeqCst);
                    attempt += 1;
                }
                other => return other,
            }
        }
    }
}

impl<S: TextGenerator + ?Sized> TextGenerator for Retrying<'_, S> {
    fn generate(&self, req: &PromptRequest) -> ServiceResult<String> {
        self.call(|s| s.generate(req))
    }
}

impl<S: Detector + ?Sized> Detector for Retrying<'_, S> {
    fn detect(&self, req: &DetectRequest) -> ServiceResult<Vec<Detection>> {
        self.call(|s| s.detect(req))
    }
}

impl<S: Segmenter + ?Sized> Segmenter for Retrying<'_, S> {
    fn segment(&self, req: &SegmentRequest) -> ServiceResult<Vec<ScoredMask>> {
        self.call(|s| s.segment(req))
    }
}

impl<S: Eraser + ?Sized> Eraser for Retrying<'_, S> {
    fn erase(&self, erp_png: &[u8], mask_png: &[u8]) -> ServiceResult<Vec<u8>> {
        self.call(|s| s.erase(erp_png, mask_png))
    }
}

impl<S: Editor + ?Sized> Editor for Retrying<'_, S> {
    fn edit(&self, image_png: &[u8], instruction: &str) -> ServiceResult<Vec<u8>> {
        self.call(|s| s.edit(image_png, instruction))
    }
}

impl<S: FeatureExtractor + ?Sized> FeatureExtractor for Retrying<'_, S> {
    fn feature_dim(&self) -> ServiceResult<usize> {
        self.call(|s| s.feature_dim())
    }

    fn embed(&self, crop_png: &[u8]) -> ServiceResult<Vec<f32>> {
        self.call(|s| s.embed(crop_png))
    }
}
