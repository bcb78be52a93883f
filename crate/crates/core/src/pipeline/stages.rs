use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use super::config::{PipelineConfig, Services};
use super::parse::{classify_localization, parse_affiliation, parse_object_list, parse_recaption, ObjectDescription};
use super::prompts::{bindings, AFFILIATION, OBJECT_DESCRIPTION, OBJECT_GROUNDING, RECAPTION};
use super::record::{AdaptSummary, ObjectRecord, Stage, StageState};
use super::retry::Retrying;
use super::store::{IndexEvent, RecordStore};
use super::triplets::{emit_triplets, TripletManifest};
use crate::boxfusion::{fuse, parse_detections, Detection, Source};
use crate::error::{Error, Result};
use crate::maskops::{progressive_refine_group, Mask};
use crate::projection::{project_perspective, reproject_mask_to_erp};
use crate::raster::Image;
use crate::refine_filter::{hf_filter, size_class, stratified_sample};
use crate::services::{DetectRequest, Detector, Editor, Eraser, TextGenerator};
use crate::sphere::ErpImage;
use crate::viewport_adapt::{adapt, initial_viewport};

const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PanoramaFailure {
    pub panorama: String,
    pub error: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct StageReport {
    pub completed: usize,
    pub quarantined: usize,
    pub skipped: usize,
    /// Already done before this call.
    pub unchanged: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QuarantineSummary {
    pub record: String,
    pub stage: Stage,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub panoramas: usize,
    pub failed_panoramas: Vec<PanoramaFailure>,
    pub records: usize,
    pub complete: usize,
    pub quarantined: Vec<QuarantineSummary>,
    pub stages: BTreeMap<Stage, StageReport>,
    pub hf_kept: usize,
    pub hf_rejected: usize,
    pub triplets: usize,
}

impl RunSummary {
    pub fn clean(&self) -> bool {
        self.failed_panoramas.is_empty() && self.quarantined.is_empty()
    }
}

pub struct Pipeline {
    cfg: PipelineConfig,
    services: Services,
    store: RecordStore,
    pool: rayon::ThreadPool,
}

fn stem(name: &str) -> &str {
    Path::new(name).file_stem().and_then(|s| s.to_str()).unwrap_or(name)
}

fn load_view(store: &RecordStore, rel: Option<&String>, what: &str) -> Result<Image> {
    let rel = rel.ok_or_else(|| Error::Precondition(format!("record has no {what} image")))?;
    Image::load(&store.abs(rel))
}

/// `- description: "...", category: "..."` lines for the grounding prompt.
pub fn descriptions_categories_text(items: &[ObjectDescription]) -> String {
    items
        .iter()
        .map(|o| format!("- description: \"{}\", category: \"{}\"", o.description, o.category))
        .collect::<Vec<_>>()
        .join("\n")
}

const LOCATION_WORDS: [&str; 12] =
    ["in", "on", "at", "by", "near", "next", "beside", "behind", "under", "above", "against", "between"];

/// `remove the {category} {location}`, the location taken from the brief
/// description after its category word, or from its first spatial word.
pub fn hf_instruction(category: &str, brief: &str) -> String {
    let brief = brief.trim().trim_end_matches('.');
    let lower = brief.to_lowercase();
    let cat = category.trim().to_lowercase();
    let rest = match lower.find(&cat) {
        Some(k) if !cat.is_empty() => brief[k + cat.len()..].trim().to_string(),
        _ => {
            let words: Vec<&str> = brief.split_whitespace().collect();
            let k = words.iter().position(|w| LOCATION_WORDS.contains(&w.to_lowercase().as_str()));
            k.map(|k| words[k..].join(" ")).unwrap_or_default()
        }
    };
    if rest.is_empty() {
        format!("remove the {cat}")
    } else {
        format!("remove the {cat} {rest}")
    }
}

impl Pipeline {
    pub fn new(cfg: PipelineConfig, services: Services) -> Result<Self> {
        cfg.validate()?;
        let store = RecordStore::open(&cfg.output_root)?;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.jobs)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        Ok(Pipeline { cfg, services, store, pool })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn store(&self) -> &RecordStore {
        &self.store
    }

    /// Image files directly under the corpus root, sorted by name.
    pub fn list_corpus(&self) -> Result<Vec<String>> {
        let root = &self.cfg.corpus_root;
        let mut out = Vec::new();
        for entry in std::fs::read_dir(root).map_err(|e| Error::io(root, e))? {
            let path = entry.map_err(|e| Error::io(root, e))?.path();
            let ext = path.extension().and_then(|x| x.to_str()).map(str::to_ascii_lowercase);
            if path.is_file() && ext.is_some_and(|x| IMAGE_EXTENSIONS.contains(&x.as_str())) {
                if let Some(name) = path.file_name().and_then(|n| n.to_str()) {
                    out.push(name.to_string());
                }
            }
        }
        out.sort();
        Ok(out)
    }

    fn stored_erp(&self, rec: &ObjectRecord) -> Result<ErpImage> {
        ErpImage::load(&self.store.abs(&format!("panoramas/{}", rec.panorama)))
    }

    fn extract_one(&self, name: &str) -> Result<Vec<ObjectRecord>> {
        let cfg = &self.cfg;
        let src = cfg.corpus_root.join(name);
        let bytes = std::fs::read(&src).map_err(|e| Error::io(&src, e))?;
        let erp = ErpImage::new(Image::decode(&bytes).map_err(|e| match e {
            Error::Image { message, .. } => Error::Image { path: Some(src.clone()), message },
            other => other,
        })?)?;
        let png = erp.encode_png()?;
        let (w, h) = (erp.width() as f64, erp.height() as f64);
        let vlm = Retrying::new(&*self.services.vlm, &cfg.retry);

        let listing_req = OBJECT_DESCRIPTION.request(BTreeMap::new(), Some(png.clone()))?;
        let listing = parse_object_list(&vlm.generate(&listing_req)?, cfg.max_objects)
            .map_err(|e| e.in_stage("object listing"))?;
        let mut kept: Vec<Detection> = Vec::new();
        if !listing.is_empty() {
            let ground_req = OBJECT_GROUNDING.request(
                bindings([("descriptions_categories_text", &descriptions_categories_text(&listing))]),
                Some(png.clone()),
            )?;
            let anchors = parse_detections(&vlm.generate(&ground_req)?, Some(Source::Vlm))
                .map_err(|e| e.in_stage("grounding"))?;
            let detect = |d: &dyn Detector| -> Result<Vec<Detection>> {
                Ok(Retrying::new(d, &cfg.retry).detect(&DetectRequest {
                    image_png: png.clone(),
                    queries: listing.iter().map(|o| o.description.clone()).collect(),
                    box_threshold: cfg.detection.box_threshold,
                    text_threshold: cfg.detection.text_threshold,
                })?)
            };
            let dets_a = detect(&*self.services.detector_a)?;
            let dets_b = detect(&*self.services.detector_b)?;
            let queries: Vec<(String, String)> =
                listing.iter().map(|o| (o.description.clone(), o.category.clone())).collect();
            kept = fuse(&queries, &anchors, &dets_a, &dets_b, w, h, &cfg.fusion, &cfg.geometric)?;
        }
        self.store.put_panorama(name, &png)?;
        let retries = vlm.retries();
        Ok(kept
            .into_iter()
            .enumerate()
            .map(|(k, d)| {
                let mut r = ObjectRecord::new(format!("{}-{k:02}", stem(name)), name.to_string(), d.description, d.category, d.bbox);
                r.add_retries(Stage::Extraction, retries);
                r
            })
            .collect())
    }

    /// Extraction for panoramas not yet in the batch index.
    pub fn extract(&self, panoramas: &[String]) -> Result<(Vec<ObjectRecord>, Vec<PanoramaFailure>)> {
        let done = self.store.extracted_panoramas()?;
        let todo: Vec<&String> = panoramas.iter().filter(|p| !done.contains(*p)).collect();
        let results: Vec<(String, Result<Vec<ObjectRecord>>)> = self
            .pool
            .install(|| todo.par_iter().map(|p| (p.to_string(), self.extract_one(p))).collect());
        let mut records = Vec::new();
        let mut failures = Vec::new();
        let mut events = Vec::new();
        for (panorama, res) in results {
            match res {
                Ok(recs) => {
                    for r in &recs {
                        self.store.save(r)?;
                    }
                    events.push(IndexEvent::Extracted { panorama, records: recs.iter().map(|r| r.id.clone()).collect() });
                    records.extend(recs);
                }
                Err(e) => {
                    log::warn!("extraction of {panorama} failed: {e}");
                    failures.push(PanoramaFailure { panorama, error: e.to_string() });
                }
            }
        }
        self.store.append_index(&events)?;
        Ok((records, failures))
    }

    fn affiliation(&self, rec: &mut ObjectRecord, spent: &mut u32) -> Result<()> {
        let erp = self.stored_erp(rec)?;
        let vlm = Retrying::new(&*self.services.vlm, &self.cfg.retry);
        let req = AFFILIATION.request(bindings([("chosen_item_description", &rec.description)]), Some(erp.encode_png()?))?;
        let out = vlm.generate(&req);
        *spent = vlm.retries();
        rec.affiliated_items = parse_affiliation(&out?)?;
        Ok(())
    }

    fn projection(&self, rec: &mut ObjectRecord, spent: &mut u32) -> Result<()> {
        let cfg = &self.cfg;
        let erp = self.stored_erp(rec)?;
        let seed = initial_viewport(&rec.erp_bbox, erp.height(), erp.width(), cfg.view.width, cfg.view.height, &cfg.adapt)?;
        let mut targets: Vec<String> = rec.affiliated_items.iter().map(|a| a.name.clone()).collect();
        if targets.is_empty() {
            targets.push(rec.category.clone());
        }
        let det = Retrying::new(&*self.services.detector_a, &cfg.retry);
        let res = adapt(&targets, &erp, &seed, &det, &cfg.adapt);
        *spent = det.retries();
        let res = res?;
        if res.detections.is_empty() {
            return Err(Error::Precondition(format!("no target of {targets:?} detected in the final view")));
        }
        let view = project_perspective(&erp, &res.final_viewport)?;
        let (rel, abs) = self.store.image_path(&rec.id, "view.png")?;
        view.save_png(&abs)?;
        rec.files.view = Some(rel);
        rec.viewport = Some(res.final_viewport);
        rec.view_boxes = res.detections.iter().map(|d| d.bbox).collect();
        rec.adapt = Some(AdaptSummary {
            iterations_used: res.iterations_used,
            converged: res.converged,
            fov_trace: res.trace.iter().map(|s| s.viewport.fov).collect(),
            offset_trace: res.trace.iter().map(|s| s.pitch_offset).collect(),
        });
        Ok(())
    }

    fn erasing(&self, rec: &mut ObjectRecord, spent: &mut u32) -> Result<()> {
        let cfg = &self.cfg;
        let erp = self.stored_erp(rec)?;
        let view = load_view(&self.store, rec.files.view.as_ref(), "view")?;
        let vp = rec.viewport.ok_or_else(|| Error::Precondition("record has no viewport".into()))?;
        let seg = Retrying::new(&*self.services.segmenter, &cfg.retry);
        let eraser = Retrying::new(&*self.services.eraser, &cfg.retry);
        let run = || -> Result<(Mask, Mask, Vec<u8>)> {
            let refinement = progressive_refine_group(&rec.view_boxes, &view, &seg, &cfg.refine)?;
            let view_mask = refinement.final_mask;
            if view_mask.is_empty() {
                return Err(Error::Precondition("refined mask is empty".into()));
            }
            let erp_mask = reproject_mask_to_erp(&view_mask, &vp, erp.height(), erp.width())?;
            let erased_png = eraser
                .erase(&erp.encode_png()?, &erp_mask.encode_png()?)
                .map_err(|e| Error::from(e).in_stage("erase"))?;
            Ok((view_mask, erp_mask, erased_png))
        };
        let out = run();
        *spent = seg.retries() + eraser.retries();
        let (view_mask, erp_mask, erased_png) = out?;
        let erased = ErpImage::new(Image::decode(&erased_png)?)?;
        if erased.width() != erp.width() || erased.height() != erp.height() {
            return Err(Error::Service(crate::services::ServiceError::BadResponse(
                "erased panorama differs in size from the input".into(),
            )));
        }
        let (rel, abs) = self.store.image_path(&rec.id, "view_mask.png")?;
        view_mask.save_png(&abs)?;
        rec.files.view_mask = Some(rel);
        let (rel, abs) = self.store.image_path(&rec.id, "mask.png")?;
        erp_mask.save_png(&abs)?;
        rec.files.erp_mask = Some(rel);
        let (rel, abs) = self.store.image_path(&rec.id, "erased.png")?;
        erased.save_png(&abs)?;
        rec.files.erased = Some(rel);
        rec.mask_area = Some(erp_mask.area());
        rec.size_class = Some(size_class(erp_mask.area(), erp.width() * erp.height(), &cfg.size_classes));
        Ok(())
    }

    fn recaption(&self, rec: &mut ObjectRecord, spent: &mut u32) -> Result<()> {
        let view = load_view(&self.store, rec.files.view.as_ref(), "view")?;
        let recap = Retrying::new(&*self.services.recaption, &self.cfg.retry);
        let classifier = Retrying::new(&*self.services.classifier, &self.cfg.retry);
        let run = || -> Result<_> {
            let req = RECAPTION.request(
                bindings([("original_category", &rec.category), ("original_description", &rec.description)]),
                Some(view.encode_png()?),
            )?;
            let (standard, brief) = parse_recaption(&recap.generate(&req)?)?;
            let kind = classify_localization(&standard, &classifier).map_err(|e| e.in_stage("localization"))?;
            Ok((standard, brief, kind))
        };
        let out = run();
        *spent = recap.retries() + classifier.retries();
        let (standard, brief, kind) = out?;
        rec.standard_description = Some(standard);
        rec.brief_description = Some(brief);
        rec.localization_kind = Some(kind);
        Ok(())
    }

    fn refinement(&self, rec: &mut ObjectRecord, spent: &mut u32) -> Result<()> {
        let cfg = &self.cfg;
        let view = load_view(&self.store, rec.files.view.as_ref(), "view")?;
        let rel = rec.files.view_mask.as_ref().ok_or_else(|| Error::Precondition("record has no view mask".into()))?;
        let mask = Mask::load_png(&self.store.abs(rel))?;
        let bbox = mask.bbox().ok_or_else(|| Error::Precondition("view mask is empty".into()))?;
        let brief = rec.brief_description.as_deref().unwrap_or(&rec.description);
        let instruction = hf_instruction(&rec.category, brief);
        let editor = Retrying::new(&*self.services.editor, &cfg.retry);
        let features = Retrying::new(&*self.services.features, &cfg.retry);
        let run = || -> Result<_> {
            let edited_png = editor.edit(&view.encode_png()?, &instruction).map_err(|e| Error::from(e).in_stage("edit"))?;
            let edited = Image::decode(&edited_png)?;
            let verdict = hf_filter(&view, &edited, &bbox, &features, &cfg.filter)?;
            Ok((edited, verdict))
        };
        let out = run();
        *spent = editor.retries() + features.retries();
        let (edited, verdict) = out?;
        let (rel, abs) = self.store.image_path(&rec.id, "hf_edited.png")?;
        edited.save_png(&abs)?;
        rec.files.hf_edited = Some(rel);
        rec.hf_instruction = Some(instruction);
        rec.hf_verdict = Some(verdict);
        Ok(())
    }

    fn apply(&self, stage: Stage, rec: &mut ObjectRecord, spent: &mut u32) -> Result<()> {
        match stage {
            Stage::Extraction => Err(Error::Precondition("extraction runs per panorama".into())),
            Stage::Affiliation => self.affiliation(rec, spent),
            Stage::Projection => self.projection(rec, spent),
            Stage::Erasing => self.erasing(rec, spent),
            Stage::Recaption => self.recaption(rec, spent),
            Stage::Refinement => self.refinement(rec, spent),
        }
    }

    /// Runs one stage over `records`. Every live record must have completed
    /// the previous stage. Failures quarantine the record; the call itself
    /// only fails on precondition or storage errors.
    pub fn run_stage(&self, records: &mut [ObjectRecord], stage: Stage) -> Result<StageReport> {
        let prev = stage
            .previous()
            .ok_or_else(|| Error::Precondition("extraction runs per panorama, not per record".into()))?;
        if let Some(r) = records.iter().find(|r| !r.is_quarantined() && !r.is_complete(prev)) {
            return Err(Error::Precondition(format!(
                "record {} has not completed {prev}; cannot run {stage}",
                r.id
            )));
        }
        let mut report = StageReport::default();
        let outcomes: Vec<Option<bool>> = self.pool.install(|| {
            records
                .par_iter_mut()
                .map(|rec| {
                    if rec.is_quarantined() || rec.state(stage) != StageState::Pending {
                        return None;
                    }
                    let mut work = rec.clone();
                    let mut spent = 0;
                    let res = self.apply(stage, &mut work, &mut spent);
                    match res {
                        Ok(()) => {
                            work.add_retries(stage, spent);
                            work.set_state(stage, StageState::Complete).expect("pending stage");
                            *rec = work;
                            Some(true)
                        }
                        Err(e) => {
                            rec.add_retries(stage, spent);
                            rec.quarantine(stage, &e);
                            Some(false)
                        }
                    }
                })
                .collect()
        });
        let mut events = Vec::new();
        for (rec, out) in records.iter().zip(outcomes) {
            match out {
                None => {
                    if rec.state(stage) == StageState::Skipped {
                        report.skipped += 1;
                    } else {
                        report.unchanged += 1;
                    }
                }
                Some(ok) => {
                    self.store.save(rec)?;
                    if ok {
                        report.completed += 1;
                        events.push(IndexEvent::StageDone { record: rec.id.clone(), stage, state: StageState::Complete });
                    } else {
                        report.quarantined += 1;
                        let q = rec.quarantine.as_ref().expect("just quarantined");
                        events.push(IndexEvent::Quarantined { record: rec.id.clone(), stage, error: q.error.clone() });
                    }
                }
            }
        }
        self.store.append_index(&events)?;
        Ok(report)
    }

    /// Marks records outside the size-stratified sample as skipped for the
    /// refinement pass.
    pub fn select_for_refinement(&self, records: &mut [ObjectRecord]) -> Result<()> {
        let eligible: Vec<usize> = (0..records.len())
            .filter(|&k| records[k].core_complete() && records[k].state(Stage::Refinement) == StageState::Pending)
            .collect();
        let keep: Vec<usize> = match self.cfg.hf.sample {
            None => eligible.clone(),
            Some(n) => {
                let classes: Vec<_> = eligible
                    .iter()
                    .map(|&k| records[k].size_class.ok_or_else(|| Error::Precondition(format!("record {} has no size class", records[k].id))))
                    .collect::<Result<_>>()?;
                let report = stratified_sample(&classes, n, &self.cfg.quotas, self.cfg.seed)?;
                report.selected.iter().map(|&s| eligible[s]).collect()
            }
        };
        let mut events = Vec::new();
        for k in eligible {
            if !keep.contains(&k) {
                records[k].set_state(Stage::Refinement, StageState::Skipped)?;
                self.store.save(&records[k])?;
                events.push(IndexEvent::StageDone { record: records[k].id.clone(), stage: Stage::Refinement, state: StageState::Skipped });
            }
        }
        self.store.append_index(&events)
    }

    pub fn triplets(&self, records: &[ObjectRecord]) -> Result<TripletManifest> {
        let manifest = emit_triplets(records, self.cfg.seed)?;
        self.store.write_triplets(&manifest)?;
        Ok(manifest)
    }

    /// Full run over the corpus; resumes from whatever the output root holds.
    pub fn run(&self) -> Result<RunSummary> {
        let panoramas = self.list_corpus()?;
        let (_, failed_panoramas) = self.extract(&panoramas)?;
        let mut records = self.store.load_all()?;
        let mut stages = BTreeMap::new();
        for stage in [Stage::Affiliation, Stage::Projection, Stage::Erasing, Stage::Recaption] {
            stages.insert(stage, self.run_stage(&mut records, stage)?);
        }
        if self.cfg.hf.enabled {
            self.select_for_refinement(&mut records)?;
            stages.insert(Stage::Refinement, self.run_stage(&mut records, Stage::Refinement)?);
        }
        let manifest = self.triplets(&records)?;
        let verdicts: Vec<bool> = records.iter().filter_map(|r| r.hf_verdict.map(|v| v.kept)).collect();
        Ok(RunSummary {
            panoramas: panoramas.len(),
            failed_panoramas,
            records: records.len(),
            complete: records.iter().filter(|r| r.core_complete()).count(),
            quarantined: records
                .iter()
                .filter_map(|r| {
                    r.quarantine.as_ref().map(|q| QuarantineSummary { record: r.id.clone(), stage: q.stage, error: q.error.clone() })
                })
                .collect(),
            stages,
            hf_kept: verdicts.iter().filter(|k| **k).count(),
            hf_rejected: verdicts.iter().filter(|k| !**k).count(),
            triplets: manifest.len(),
        })
    }
}
