//! Blocking HTTP/JSON clients for every service role.

use std::time::Duration;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde_json::{json, Map, Value};

use super::manifest::ServiceSpec;
use super::{
    DetectRequest, Detector, Editor, Eraser, FeatureExtractor, PromptRequest, ScoredMask, SegmentPrompt,
    SegmentRequest, Segmenter, ServiceError, ServiceResult, TextGenerator,
};
use crate::boxfusion::{detections_to_json, parse_detections, Detection, Source};
use crate::maskops::RleMask;

/// One endpoint. Implements every service trait; the manifest decides which
/// role a given instance plays.
pub struct HttpService {
    spec: ServiceSpec,
    agent: ureq::Agent,
    source: Option<Source>,
}

impl HttpService {
    pub fn new(spec: ServiceSpec) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(spec.timeout_secs)))
            .build()
            .into();
        HttpService {
            spec,
            agent,
            source: None,
        }
    }

    /// Tags detections returned by this endpoint with `source`.
    pub fn with_source(mut self, source: Source) -> Self {
        self.source = Some(source);
        self
    }

    pub fn spec(&self) -> &ServiceSpec {
        &self.spec
    }

    fn post(&self, fields: Vec<(&str, Value)>) -> ServiceResult<Value> {
        let mut body = Map::new();
        for (logical, v) in fields {
            body.insert(self.spec.request_field(logical).to_string(), v);
        }
        let mut resp = self
            .agent
            .post(&self.spec.endpoint)
            .send_json(Value::Object(body))
            .map_err(|e| match e {
                ureq::Error::StatusCode(code) if (400..500).contains(&code) => {
                    ServiceError::BadResponse(format!("{}: http status {code}", self.spec.endpoint))
                }
                other => ServiceError::Unavailable(format!("{}: {other}", self.spec.endpoint)),
            })?;
        resp.body_mut()
            .with_config()
            .limit(256 * 1024 * 1024)
            .read_json::<Value>()
            .map_err(|e| ServiceError::BadResponse(format!("{}: {e}", self.spec.endpoint)))
    }

    fn field<'v>(&self, v: &'v Value, logical: &str) -> ServiceResult<&'v Value> {
        let name = self.spec.response_field(logical);
        v.get(name)
            .ok_or_else(|| ServiceError::BadResponse(format!("response lacks `{name}`")))
    }

    fn image_field(&self, v: &Value, logical: &str) -> ServiceResult<Vec<u8>> {
        let s = self
            .field(v, logical)?
            .as_str()
            .ok_or_else(|| ServiceError::BadResponse(format!("`{logical}` is not a base64 string")))?;
        B64.decode(s)
            .map_err(|e| ServiceError::BadResponse(format!("`{logical}` base64: {e}")))
    }
}

pub fn encode_b64(bytes: &[u8]) -> Value {
    Value::String(B64.encode(bytes))
}

impl TextGenerator for HttpService {
    fn generate(&self, req: &PromptRequest) -> ServiceResult<String> {
        let mut fields = vec![
            ("template", json!(req.template)),
            ("prompt", json!(req.prompt)),
            ("fields", json!(req.fields)),
        ];
        if let Some(img) = &req.image_png {
            fields.push(("image", encode_b64(img)));
        }
        let v = self.post(fields)?;
        self.field(&v, "text")?
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| ServiceError::BadResponse("`text` is not a string".into()))
    }
}

impl Detector for HttpService {
    fn detect(&self, req: &DetectRequest) -> ServiceResult<Vec<Detection>> {
        let v = self.post(vec![
            ("image", encode_b64(&req.image_png)),
            ("queries", json!(req.queries)),
            ("box_threshold", json!(req.box_threshold)),
            ("text_threshold", json!(req.text_threshold)),
        ])?;
        let dets = self.field(&v, "detections")?;
        parse_detections(&dets.to_string(), self.source).map_err(|e| ServiceError::BadResponse(e.to_string()))
    }
}

#[derive(serde::Deserialize)]
struct WireMask {
    mask: RleMask,
    score: f64,
}

impl Segmenter for HttpService {
    fn segment(&self, req: &SegmentRequest) -> ServiceResult<Vec<ScoredMask>> {
        let prompt = match &req.prompt {
            SegmentPrompt::Box(b) => ("box", json!(b.to_array())),
            // wire order is (x, y)
            SegmentPrompt::Points(p) => ("points", json!(p.iter().map(|&(r, c)| [c, r]).collect::<Vec<_>>())),
        };
        let v = self.post(vec![("image", encode_b64(&req.image_png)), prompt])?;
        let masks: Vec<WireMask> = serde_json::from_value(self.field(&v, "masks")?.clone())
            .map_err(|e| ServiceError::BadResponse(format!("masks: {e}")))?;
        masks
            .into_iter()
            .map(|m| {
                let mask = m.mask.decode().map_err(|e| ServiceError::BadResponse(e.to_string()))?;
                Ok(ScoredMask { mask, score: m.score })
            })
            .collect()
    }
}

impl Eraser for HttpService {
    fn erase(&self, erp_png: &[u8], mask_png: &[u8]) -> ServiceResult<Vec<u8>> {
        let v = self.post(vec![("image", encode_b64(erp_png)), ("mask", encode_b64(mask_png))])?;
        self.image_field(&v, "image")
    }
}

impl Editor for HttpService {
    fn edit(&self, image_png: &[u8], instruction: &str) -> ServiceResult<Vec<u8>> {
        let v = self.post(vec![("image", encode_b64(image_png)), ("instruction", json!(instruction))])?;
        self.image_field(&v, "image")
    }
}

impl FeatureExtractor for HttpService {
    fn feature_dim(&self) -> ServiceResult<usize> {
        let v = self.post(vec![("handshake", json!(true))])?;
        self.field(&v, "dim")?
            .as_u64()
            .map(|d| d as usize)
            .ok_or_else(|| ServiceError::BadResponse("`dim` is not an integer".into()))
    }

    fn embed(&self, crop_png: &[u8]) -> ServiceResult<Vec<f32>> {
        let v = self.post(vec![("image", encode_b64(crop_png))])?;
        serde_json::from_value(self.field(&v, "features")?.clone())
            .map_err(|e| ServiceError::BadResponse(format!("features: {e}")))
    }
}

/// Response body a detection endpoint would send for `dets`.
pub fn detection_response(dets: &[Detection]) -> Value {
    json!({ "detections": detections_to_json(dets) })
}

#[cfg(test)]
pub(crate) mod test_server {
    //! Minimal single-threaded HTTP/1.1 responder for client tests.

    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;
    use std::sync::mpsc;
    use std::thread;

    use serde_json::Value;

    /// Serves `responses` in order (status, body) and reports each request body.
    pub fn serve(responses: Vec<(u16, Value)>) -> (String, mpsc::Receiver<Value>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/svc", listener.local_addr().unwrap());
        let (tx, rx) = mpsc::channel();
        thread::spawn(move || {
            for (status, body) in responses {
                let (mut stream, _) = listener.accept().unwrap();
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut len = 0usize;
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    let l = line.trim_end();
                    if l.is_empty() {
                        break;
                    }
                    if let Some(v) = l.to_ascii_lowercase().strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap();
                    }
                }
                let mut buf = vec![0u8; len];
                reader.read_exact(&mut buf).unwrap();
                tx.send(serde_json::from_slice(&buf).unwrap_or(Value::Null)).ok();
                let text = body.to_string();
                write!(
                    stream,
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{text}",
                    text.len()
                )
                .unwrap();
            }
        });
        (url, rx)
    }
}

#[cfg(test)]
mod tests {
    use super::test_server::serve;
    use super::*;
    use crate::boxfusion::BBox;
    use crate::maskops::Mask;

    #[test]
    fn text_generator_maps_fields() {
        let (url, rx) = serve(vec![(200, json!({"out": "- table (1)"}))]);
        let mut spec = ServiceSpec::new(url);
        spec.request.insert("prompt".into(), "input_text".into());
        spec.response.insert("text".into(), "out".into());
        let svc = HttpService::new(spec);
        let text = svc
            .generate(&PromptRequest {
                template: "affiliation".into(),
                prompt: "hello".into(),
                fields: Default::default(),
                image_png: Some(vec![1, 2, 3]),
            })
            .unwrap();
        assert_eq!(text, "- table (1)");
        let sent = rx.recv().unwrap();
        assert_eq!(sent["input_text"], "hello");
        assert_eq!(sent["image"], "AQID");
    }

    #[test]
    fn detector_parses_grounding_list() {
        let (url, rx) = serve(vec![(
            200,
            json!({"detections": [{"description": "red box", "category": "box", "bbox_2d": [1, 2, 3, 4], "score": 0.8}]}),
        )]);
        let svc = HttpService::new(ServiceSpec::new(url)).with_source(Source::DetectorA);
        let dets = svc
            .detect(&DetectRequest {
                image_png: vec![0],
                queries: vec!["red box".into()],
                box_threshold: 0.25,
                text_threshold: 0.25,
            })
            .unwrap();
        assert_eq!(dets[0].bbox.confidence, Some(0.8));
        assert_eq!(dets[0].bbox.source, Some(Source::DetectorA));
        assert_eq!(rx.recv().unwrap()["box_threshold"], 0.25);
    }

    #[test]
    fn segmenter_decodes_rle_and_sends_xy_points() {
        let m = Mask::from_fn(4, 2, |r, c| r == 1 && c > 0);
        let (url, rx) = serve(vec![(200, json!({"masks": [{"mask": m.to_rle(), "score": 0.7}]}))]);
        let svc = HttpService::new(ServiceSpec::new(url));
        let out = svc
            .segment(&SegmentRequest {
                image_png: vec![0],
                prompt: SegmentPrompt::Points(vec![(1, 3)]),
            })
            .unwrap();
        assert_eq!(out[0].mask, m);
        assert_eq!(rx.recv().unwrap()["points"], json!([[3, 1]]));
    }

    #[test]
    fn status_codes_classify_errors() {
        let (url, _rx) = serve(vec![(503, json!({})), (400, json!({}))]);
        let svc = HttpService::new(ServiceSpec::new(url));
        let req = SegmentRequest {
            image_png: vec![0],
            prompt: SegmentPrompt::Box(BBox::new(0.0, 0.0, 1.0, 1.0).unwrap()),
        };
        assert!(svc.segment(&req).unwrap_err().is_retryable());
        assert!(!svc.segment(&req).unwrap_err().is_retryable());
    }

    #[test]
    fn unreachable_endpoint_is_retryable() {
        let svc = HttpService::new(ServiceSpec::new("http://127.0.0.1:1/none"));
        assert!(svc.erase(&[0], &[0]).unwrap_err().is_retryable());
    }

    #[test]
    fn feature_handshake_and_embed() {
        let (url, _rx) = serve(vec![(200, json!({"dim": 3})), (200, json!({"features": [0.0, 1.0, 0.0]}))]);
        let svc = HttpService::new(ServiceSpec::new(url));
        assert_eq!(svc.feature_dim().unwrap(), 3);
        assert_eq!(svc.embed(&[1]).unwrap(), vec![0.0, 1.0, 0.0]);
    }
}
