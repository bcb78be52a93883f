//! Every role served over HTTP by a local server that wraps the mock
//! services; the pipeline output must match an in-process mock run.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::thread;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde_json::{json, Value};

use panokit::boxfusion::BBox;
use panokit::pipeline::config::ServicesConfig;
use panokit::pipeline::{Backend, Pipeline, PipelineConfig, RetryPolicy, Services};
use panokit::services::http::detection_response;
use panokit::services::manifest::ROLES;
use panokit::services::mock::{MockDetector, MockEditor, MockEraser, MockSegmenter, MockVlm, PixelStatsFeatures};
use panokit::services::{
    DetectRequest, Detector, Editor, Eraser, FeatureExtractor, PromptRequest, SegmentPrompt, SegmentRequest,
    Segmenter, TextGenerator,
};
use panokit::synth::{fixture_scenes, render};

fn b64(v: &Value, key: &str) -> Vec<u8> {
    B64.decode(v[key].as_str().unwrap()).unwrap()
}

fn enc(bytes: &[u8]) -> Value {
    Value::String(B64.encode(bytes))
}

/// The vlm role uses renamed wire fields to exercise the manifest mapping.
fn answer(role: &str, req: &Value) -> Value {
    match role {
        "vlm" | "recaption" | "classifier" => {
            let (prompt, text_key) = if role == "vlm" { ("input", "output") } else { ("prompt", "text") };
            let image_key = if role == "vlm" { "image_b64" } else { "image" };
            let r = PromptRequest {
                template: req["template"].as_str().unwrap().to_string(),
                prompt: req[prompt].as_str().unwrap().to_string(),
                fields: serde_json::from_value(req["fields"].clone()).unwrap(),
                image_png: req.get(image_key).map(|_| b64(req, image_key)),
            };
            json!({ text_key: MockVlm.generate(&r).unwrap() })
        }
        "detector_a" | "detector_b" => {
            let det = if role == "detector_a" { MockDetector::detector_a() } else { MockDetector::detector_b() };
            let r = DetectRequest {
                image_png: b64(req, "image"),
                queries: serde_json::from_value(req["queries"].clone()).unwrap(),
                box_threshold: req["box_threshold"].as_f64().unwrap(),
                text_threshold: req["text_threshold"].as_f64().unwrap(),
            };
            detection_response(&det.detect(&r).unwrap())
        }
        "segmenter" => {
            let prompt = if let Some(b) = req.get("box") {
                let b: [f64; 4] = serde_json::from_value(b.clone()).unwrap();
                SegmentPrompt::Box(BBox::new(b[0], b[1], b[2], b[3]).unwrap())
            } else {
                let pts: Vec<[usize; 2]> = serde_json::from_value(req["points"].clone()).unwrap();
                SegmentPrompt::Points(pts.iter().map(|&[x, y]| (y, x)).collect())
            };
            let masks = MockSegmenter.segment(&SegmentRequest { image_png: b64(req, "image"), prompt }).unwrap();
            let wire: Vec<Value> = masks.iter().map(|m| json!({ "mask": m.mask.to_rle(), "score": m.score })).collect();
            json!({ "masks": wire })
        }
        "eraser" => json!({ "image": enc(&MockEraser.erase(&b64(req, "image"), &b64(req, "mask")).unwrap()) }),
        "editor" => {
            let out = MockEditor.edit(&b64(req, "image"), req["instruction"].as_str().unwrap()).unwrap();
            json!({ "image": enc(&out) })
        }
        "features" if req.get("handshake").is_some() => json!({ "dim": PixelStatsFeatures.feature_dim().unwrap() }),
        "features" => json!({ "features": PixelStatsFeatures.embed(&b64(req, "image")).unwrap() }),
        other => panic!("unexpected role {other}"),
    }
}

fn handle(stream: TcpStream) {
    let mut reader = BufReader::new(stream.try_clone().unwrap());
    let mut request_line = String::new();
    reader.read_line(&mut request_line).unwrap();
    let path = request_line.split_whitespace().nth(1).unwrap().trim_start_matches('/').to_string();
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
    let body = answer(&path, &serde_json::from_slice(&buf).unwrap()).to_string();
    let mut stream = stream;
    write!(
        stream,
        "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
        body.len()
    )
    .unwrap();
}

fn serve() -> String {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let base = format!("http://{}", listener.local_addr().unwrap());
    thread::spawn(move || {
        for stream in listener.incoming() {
            let stream = stream.unwrap();
            thread::spawn(move || handle(stream));
        }
    });
    base
}

fn manifest(dir: &Path, base: &str) -> PathBuf {
    let mut text = String::new();
    for role in ROLES {
        text.push_str(&format!("[{role}]\nendpoint = \"{base}/{role}\"\ntimeout_secs = 30\n"));
    }
    text.push_str("[vlm.request]\nprompt = \"input\"\nimage = \"image_b64\"\n[vlm.response]\ntext = \"output\"\n");
    let path = dir.join("services.toml");
    std::fs::write(&path, text).unwrap();
    path
}

fn config(root: &Path) -> PipelineConfig {
    let corpus = root.join("corpus");
    std::fs::create_dir_all(&corpus).unwrap();
    for s in fixture_scenes() {
        render(&s).save_png(&corpus.join(format!("{}.png", s.name))).unwrap();
    }
    PipelineConfig {
        corpus_root: corpus,
        output_root: root.join("out"),
        seed: 7,
        jobs: 3,
        retry: RetryPolicy::immediate(3),
        ..PipelineConfig::default()
    }
}

fn snapshot(root: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(base: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
        for e in std::fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(base, &p, out);
            } else {
                out.insert(p.strip_prefix(base).unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

#[test]
fn http_backends_reproduce_the_mock_run() {
    let local = tempfile::tempdir().unwrap();
    let s_local = Pipeline::new(config(local.path()), Services::mock()).unwrap().run().unwrap();

    let remote = tempfile::tempdir().unwrap();
    let svc = ServicesConfig {
        manifest: Some(manifest(remote.path(), &serve())),
        backend: Backend::Http,
        roles: BTreeMap::new(),
    };
    let services = Services::from_config(&svc).unwrap();
    let s_remote = Pipeline::new(config(remote.path()), services).unwrap().run().unwrap();

    assert!(s_remote.clean(), "{s_remote:?}");
    assert_eq!(s_local, s_remote);
    let (a, b) = (snapshot(&local.path().join("out")), snapshot(&remote.path().join("out")));
    assert_eq!(a.keys().collect::<Vec<_>>(), b.keys().collect::<Vec<_>>());
    for (k, v) in &a {
        assert!(v == &b[k], "{k} differs");
    }
}

#[test]
fn missing_role_in_manifest_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("services.toml");
    std::fs::write(&path, "[vlm]\nendpoint = \"http://127.0.0.1:9/vlm\"\n").unwrap();
    let mut roles = BTreeMap::new();
    roles.insert("segmenter".to_string(), Backend::Http);
    let svc = ServicesConfig { manifest: Some(path), backend: Backend::Mock, roles };
    let err = Services::from_config(&svc).err().unwrap();
    assert!(err.to_string().contains("segmenter"), "{err}");
}
