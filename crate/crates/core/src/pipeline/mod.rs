//! Staged dataset pipeline: object extraction, physical affiliation,
//! adaptive projection, erasing, recaption, and an optional high-fidelity
//! refinement pass. Each record moves through the stages independently and
//! is persisted after every stage, so runs resume where they stopped.

pub mod augment;
pub mod config;
pub mod parse;
pub mod prompts;
pub mod record;
pub mod retry;
pub mod stages;
pub mod store;
pub mod triplets;

pub use augment::augment_rotation;
pub use config::{Backend, PipelineConfig, Services};
pub use parse::{classify_localization, parse_affiliation, parse_localization, parse_object_list, parse_recaption};
pub use record::{LocalizationKind, ObjectRecord, Stage, StageState};
pub use retry::RetryPolicy;
pub use stages::{Pipeline, RunSummary, StageReport};
pub use store::RecordStore;
pub use triplets::{emit_triplets, TripletManifest};
