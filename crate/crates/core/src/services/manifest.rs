//! Service manifest: where each model role lives and what its JSON fields are called.
//!
//! ```toml
//! [vlm]
//! endpoint = "http://127.0.0.1:8100/generate"
//! timeout_secs = 120
//! [vlm.request]
//! image = "image_b64"     # logical name -> wire name
//! [vlm.response]
//! text = "output"
//! ```
//!
//! Unlisted fields use their logical names. Logical fields per role:
//!
//! | role                              | request                                              | response     |
//! |-----------------------------------|------------------------------------------------------|--------------|
//! | `vlm`, `recaption`, `classifier`  | `template`, `prompt`, `fields`, `image`              | `text`       |
//! | `detector_a`, `detector_b`        | `image`, `queries`, `box_threshold`, `text_threshold`| `detections` |
//! | `segmenter`                       | `image`, `box` or `points`                           | `masks`      |
//! | `eraser`                          | `image`, `mask`                                      | `image`      |
//! | `editor`                          | `image`, `instruction`                               | `image`      |
//! | `features`                        | `handshake` or `image`                               | `dim`, `features` |

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};

pub const ROLES: [&str; 9] = [
    "vlm",
    "detector_a",
    "detector_b",
    "segmenter",
    "eraser",
    "recaption",
    "classifier",
    "editor",
    "features",
];

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ServiceSpec {
    pub endpoint: String,
    #[serde(default)]
    pub request: BTreeMap<String, String>,
    #[serde(default)]
    pub response: BTreeMap<String, String>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
}

fn default_timeout() -> u64 {
    60
}

impl ServiceSpec {
    pub fn new(endpoint: impl Into<String>) -> Self {
        ServiceSpec {
            endpoint: endpoint.into(),
            request: BTreeMap::new(),
            response: BTreeMap::new(),
            timeout_secs: default_timeout(),
        }
    }

    pub fn request_field<'a>(&'a self, logical: &'a str) -> &'a str {
        self.request.get(logical).map(String::as_str).unwrap_or(logical)
    }

    pub fn response_field<'a>(&'a self, logical: &'a str) -> &'a str {
        self.response.get(logical).map(String::as_str).unwrap_or(logical)
    }
}

#[derive(Debug, Clone, Default, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(transparent)]
pub struct ServiceManifest {
    pub services: BTreeMap<String, ServiceSpec>,
}

impl ServiceManifest {
    pub fn parse_toml(text: &str) -> Result<Self> {
        let m: ServiceManifest = toml::from_str(text).map_err(|e| Error::Config(format!("service manifest: {e}")))?;
        m.validate()?;
        Ok(m)
    }

    /// Reads TOML, or JSON when the extension is `.json`.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        if path.extension().is_some_and(|e| e == "json") {
            let m: ServiceManifest =
                serde_json::from_str(&text).map_err(|e| Error::Config(format!("service manifest: {e}")))?;
            m.validate()?;
            Ok(m)
        } else {
            Self::parse_toml(&text)
        }
    }

    fn validate(&self) -> Result<()> {
        for (role, spec) in &self.services {
            if !ROLES.contains(&role.as_str()) {
                return Err(Error::Config(format!("unknown service role `{role}`")));
            }
            if !(spec.endpoint.starts_with("http://") || spec.endpoint.starts_with("https://")) {
                return Err(Error::Config(format!("{role}: endpoint must be an http(s) URL")));
            }
        }
        Ok(())
    }

    pub fn get(&self, role: &str) -> Option<&ServiceSpec> {
        self.services.get(role)
    }
}
