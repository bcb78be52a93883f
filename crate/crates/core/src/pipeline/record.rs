use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::boxfusion::BBox;
use crate::error::{Error, Result};
use crate::projection::Viewport;
use crate::refine_filter::{FilterVerdict, SizeClass};

/// JSON Schema every persisted record satisfies.
pub const RECORD_SCHEMA: &str = include_str!("../../assets/record.schema.json");

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Extraction,
    Affiliation,
    Projection,
    Erasing,
    Recaption,
    /// Optional high-fidelity pass run after the five core stages.
    Refinement,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::Extraction,
        Stage::Affiliation,
        Stage::Projection,
        Stage::Erasing,
        Stage::Recaption,
        Stage::Refinement,
    ];

    pub fn previous(self) -> Option<Stage> {
        let k = Stage::ALL.iter().position(|s| *s == self).expect("listed");
        k.checked_sub(1).map(|k| Stage::ALL[k])
    }

    pub fn name(self) -> &'static str {
        match self {
            Stage::Extraction => "extraction",
            Stage::Affiliation => "affiliation",
            Stage::Projection => "projection",
            Stage::Erasing => "erasing",
            Stage::Recaption => "recaption",
            Stage::Refinement => "refinement",
        }
    }

    pub fn parse(name: &str) -> Result<Stage> {
        Stage::ALL
            .into_iter()
            .find(|s| s.name() == name)
            .ok_or_else(|| Error::Config(format!("unknown stage `{name}`")))
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageState {
    Pending,
    Complete,
    /// Not applicable to this record (e.g. left out of the refinement sample).
    Skipped,
    Failed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LocalizationKind {
    Absolute,
    Relative,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AffiliatedItem {
    pub name: String,
    pub quantity: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Quarantine {
    pub stage: Stage,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptSummary {
    pub iterations_used: usize,
    pub converged: bool,
    pub fov_trace: Vec<f64>,
    pub offset_trace: Vec<f64>,
}

/// Image paths are relative to the output root, `/`-separated.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordFiles {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub view: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub view_mask: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub erp_mask: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub erased: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hf_edited: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectRecord {
    pub id: String,
    /// File name of the source panorama, relative to the corpus root.
    pub panorama: String,
    pub description: String,
    pub category: String,
    pub erp_bbox: BBox,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub standard_description: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub brief_description: Option<String>,
    #[serde(default)]
    pub affiliated_items: Vec<AffiliatedItem>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub viewport: Option<Viewport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adapt: Option<AdaptSummary>,
    #[serde(default)]
    pub view_boxes: Vec<BBox>,
    #[serde(default)]
    pub files: RecordFiles,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_area: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub size_class: Option<SizeClass>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub localization_kind: Option<LocalizationKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hf_instruction: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hf_verdict: Option<FilterVerdict>,
    pub stage_status: BTreeMap<Stage, StageState>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quarantine: Option<Quarantine>,
    /// Retries spent per stage.
    #[serde(default)]
    pub retries: BTreeMap<Stage, u32>,
}

impl ObjectRecord {
    pub fn new(id: String, panorama: String, description: String, category: String, erp_bbox: BBox) -> Self {
        let mut stage_status: BTreeMap<Stage, StageState> = Stage::ALL.iter().map(|s| (*s, StageState::Pending)).collect();
        stage_status.insert(Stage::Extraction, StageState::Complete);
        ObjectRecord {
            id,
            panorama,
            description,
            category,
            erp_bbox,
            standard_description: None,
            brief_description: None,
            affiliated_items: Vec::new(),
            viewport: None,
            adapt: None,
            view_boxes: Vec::new(),
            files: RecordFiles::default(),
            mask_area: None,
            size_class: None,
            localization_kind: None,
            hf_instruction: None,
            hf_verdict: None,
            stage_status,
            quarantine: None,
            retries: BTreeMap::new(),
        }
    }

    pub fn state(&self, stage: Stage) -> StageState {
        self.stage_status.get(&stage).copied().unwrap_or(StageState::Pending)
    }

    pub fn is_complete(&self, stage: Stage) -> bool {
        self.state(stage) == StageState::Complete
    }

    pub fn is_quarantined(&self) -> bool {
        self.quarantine.is_some()
    }

    /// Completed stages never change state again.
    pub fn set_state(&mut self, stage: Stage, state: StageState) -> Result<()> {
        let current = self.state(stage);
        if current == state {
            return Ok(());
        }
        if current == StageState::Complete {
            return Err(Error::Precondition(format!(
                "record {}: stage {stage} is complete and cannot become {state:?}",
                self.id
            )));
        }
        self.stage_status.insert(stage, state);
        Ok(())
    }

    pub fn quarantine(&mut self, stage: Stage, error: &Error) {
        log::warn!("quarantining {} at {stage}: {error}", self.id);
        // Failed is reachable from any state except Complete, which this stage cannot be yet.
        let _ = self.set_state(stage, StageState::Failed);
        self.quarantine = Some(Quarantine { stage, error: error.to_string() });
    }

    /// Every stage of the core run is complete.
    pub fn core_complete(&self) -> bool {
        !self.is_quarantined() && Stage::ALL[..5].iter().all(|s| self.is_complete(*s))
    }

    pub fn add_retries(&mut self, stage: Stage, n: u32) {
        if n > 0 {
            *self.retries.entry(stage).or_insert(0) += n;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec() -> ObjectRecord {
        ObjectRecord::new("p-00".into(), "p.png".into(), "A red armchair.".into(), "armchair".into(), BBox::new(1.0, 2.0, 30.0, 40.0).unwrap())
    }

    #[test]
    fn stage_order() {
        assert_eq!(Stage::Extraction.previous(), None);
        assert_eq!(Stage::Projection.previous(), Some(Stage::Affiliation));
        assert_eq!(Stage::parse("erasing").unwrap(), Stage::Erasing);
        assert!(Stage::parse("stage9").is_err());
    }

    #[test]
    fn complete_never_regresses() {
        let mut r = rec();
        r.set_state(Stage::Affiliation, StageState::Complete).unwrap();
        assert!(r.set_state(Stage::Affiliation, StageState::Pending).is_err());
        assert!(r.set_state(Stage::Affiliation, StageState::Failed).is_err());
        r.set_state(Stage::Affiliation, StageState::Complete).unwrap();
        assert!(r.is_complete(Stage::Affiliation));
    }

    #[test]
    fn quarantine_marks_failed() {
        let mut r = rec();
        r.quarantine(Stage::Projection, &Error::Parse("no boxes".into()));
        assert_eq!(r.state(Stage::Projection), StageState::Failed);
        assert!(r.quarantine.as_ref().unwrap().error.contains("no boxes"));
        assert!(!r.core_complete());
    }

    #[test]
    fn json_round_trip() {
        let mut r = rec();
        r.add_retries(Stage::Erasing, 2);
        r.localization_kind = Some(LocalizationKind::Relative);
        let text = serde_json::to_string(&r).unwrap();
        assert!(text.contains("\"erasing\":2"));
        assert!(text.contains("\"relative\""));
        let back: ObjectRecord = serde_json::from_str(&text).unwrap();
        assert_eq!(back, r);
    }
}
