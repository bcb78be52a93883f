//! On-disk layout of a run:
//!
//! ```text
//! records/<id>.json        one document per object record
//! images/<id>/*.png        view, masks, erased panorama, refinement edit
//! panoramas/<name>         copy of each processed source panorama
//! batch_index.jsonl        append-only event log
//! triplets.json            training manifest
//! ```

use std::collections::BTreeSet;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::record::{ObjectRecord, Stage, StageState};
use super::triplets::TripletManifest;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum IndexEvent {
    /// A panorama went through extraction and produced these records.
    Extracted { panorama: String, records: Vec<String> },
    StageDone { record: String, stage: Stage, state: StageState },
    Quarantined { record: String, stage: Stage, error: String },
}

pub struct RecordStore {
    root: PathBuf,
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

impl RecordStore {
    pub fn open(root: &Path) -> Result<Self> {
        for sub in ["records", "images", "panoramas"] {
            let d = root.join(sub);
            fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
        Ok(RecordStore { root: root.to_path_buf() })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn record_path(&self, id: &str) -> PathBuf {
        self.root.join("records").join(format!("{id}.json"))
    }

    /// `images/<id>/<name>`, relative to the root.
    pub fn image_rel(id: &str, name: &str) -> String {
        format!("images/{id}/{name}")
    }

    pub fn abs(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    /// Creates the image directory of a record and returns the absolute path.
    pub fn image_path(&self, id: &str, name: &str) -> Result<(String, PathBuf)> {
        let rel = Self::image_rel(id, name);
        let abs = self.abs(&rel);
        if let Some(dir) = abs.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        Ok((rel, abs))
    }

    pub fn save(&self, rec: &ObjectRecord) -> Result<()> {
        let mut text = serde_json::to_string_pretty(rec)?;
        text.push('\n');
        write_atomic(&self.record_path(&rec.id), text.as_bytes())
    }

    pub fn load(&self, id: &str) -> Result<ObjectRecord> {
        let path = self.record_path(id);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::parse(format!("{}: {e}", path.display())))
    }

    /// All records, ordered by id.
    pub fn load_all(&self) -> Result<Vec<ObjectRecord>> {
        let dir = self.root.join("records");
        let mut ids = Vec::new();
        for entry in fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
            let path = entry.map_err(|e| Error::io(&dir, e))?.path();
            if path.extension().is_some_and(|x| x == "json") {
                if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                    ids.push(stem.to_string());
                }
            }
        }
        ids.sort();
        ids.iter().map(|id| self.load(id)).collect()
    }

    pub fn put_panorama(&self, name: &str, bytes: &[u8]) -> Result<()> {
        write_atomic(&self.root.join("panoramas").join(name), bytes)
    }

    fn index_path(&self) -> PathBuf {
        self.root.join("batch_index.jsonl")
    }

    pub fn append_index(&self, events: &[IndexEvent]) -> Result<()> {
        if events.is_empty() {
            return Ok(());
        }
        let path = self.index_path();
        let mut text = String::new();
        for e in events {
            text.push_str(&serde_json::to_string(e)?);
            text.push('\n');
        }
        let mut f = OpenOptions::new().create(true).append(true).open(&path).map_err(|e| Error::io(&path, e))?;
        f.write_all(text.as_bytes()).map_err(|e| Error::io(&path, e))
    }

    pub fn read_index(&self) -> Result<Vec<IndexEvent>> {
        let path = self.index_path();
        if !path.exists() {
            return Ok(Vec::new());
        }
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .enumerate()
            .map(|(k, l)| {
                serde_json::from_str(l).map_err(|e| Error::parse(format!("{} line {}: {e}", path.display(), k + 1)))
            })
            .collect()
    }

    pub fn extracted_panoramas(&self) -> Result<BTreeSet<String>> {
        Ok(self
            .read_index()?
            .into_iter()
            .filter_map(|e| match e {
                IndexEvent::Extracted { panorama, .. } => Some(panorama),
                _ => None,
            })
            .collect())
    }

    pub fn write_triplets(&self, manifest: &TripletManifest) -> Result<PathBuf> {
        let path = self.root.join("triplets.json");
        let mut text = serde_json::to_string_pretty(manifest)?;
        text.push('\n');
        write_atomic(&path, text.as_bytes())?;
        Ok(path)
    }
}
