use serde::{Deserialize, Serialize};

use super::augment::augment_rotation;
use super::record::ObjectRecord;
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Addition,
    Removal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InstructionDetail {
    Standard,
    Brief,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Triplet {
    pub record_id: String,
    pub task: Task,
    pub instruction_detail: InstructionDetail,
    /// Paths relative to the output root.
    pub source_image: String,
    pub edited_image: String,
    pub instruction: String,
    pub rotation_deg: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TripletManifest {
    pub triplets: Vec<Triplet>,
}

impl TripletManifest {
    pub fn len(&self) -> usize {
        self.triplets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triplets.is_empty()
    }
}

fn lower_first(s: &str) -> String {
    let s = s.trim();
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_lowercase().chain(c).collect(),
        None => String::new(),
    }
}

/// Four entries per fully processed record: removal and addition, each with
/// the standard and the brief description. Removal edits the panorama into
/// the erased panorama; addition is the reverse.
pub fn emit_triplets(records: &[ObjectRecord], seed: u64) -> Result<TripletManifest> {
    let mut triplets = Vec::new();
    for r in records {
        let (Some(standard), Some(brief), Some(erased)) =
            (&r.standard_description, &r.brief_description, &r.files.erased)
        else {
            continue;
        };
        if !r.core_complete() {
            continue;
        }
        let rotation_deg = augment_rotation(r, seed)?;
        let original = format!("panoramas/{}", r.panorama);
        for task in [Task::Removal, Task::Addition] {
            for (detail, text) in [(InstructionDetail::Standard, standard), (InstructionDetail::Brief, brief)] {
                let (verb, source_image, edited_image) = match task {
                    Task::Removal => ("Remove", original.clone(), erased.clone()),
                    Task::Addition => ("Add", erased.clone(), original.clone()),
                };
                triplets.push(Triplet {
                    record_id: r.id.clone(),
                    task,
                    instruction_detail: detail,
                    source_image,
                    edited_image,
                    instruction: format!("{verb} {}", lower_first(text)),
                    rotation_deg,
                });
            }
        }
    }
    Ok(TripletManifest { triplets })
}
