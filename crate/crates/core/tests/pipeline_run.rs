use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use panokit::pipeline::record::RECORD_SCHEMA;
use panokit::pipeline::{LocalizationKind, Pipeline, PipelineConfig, RetryPolicy, Services, Stage, StageState};
use panokit::services::mock::{Broken, Flaky, MockSegmenter};
use panokit::services::ServiceError;
use panokit::synth::{fixture_scenes, render};

fn corpus(dir: &Path) {
    std::fs::create_dir_all(dir).unwrap();
    for s in fixture_scenes() {
        render(&s).save_png(&dir.join(format!("{}.png", s.name))).unwrap();
    }
}

fn config(root: &Path, jobs: usize) -> PipelineConfig {
    corpus(&root.join("corpus"));
    PipelineConfig {
        corpus_root: root.join("corpus"),
        output_root: root.join("out"),
        seed: 7,
        jobs,
        retry: RetryPolicy::immediate(3),
        ..PipelineConfig::default()
    }
}

fn snapshot(root: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(base: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
        let mut entries: Vec<PathBuf> = std::fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
        entries.sort();
        for p in entries {
            if p.is_dir() {
                walk(base, &p, out);
            } else {
                let rel = p.strip_prefix(base).unwrap().to_string_lossy().replace('\\', "/");
                out.insert(rel, std::fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

fn mock_run(jobs: usize) -> (tempfile::TempDir, panokit::pipeline::RunSummary) {
    let dir = tempfile::tempdir().unwrap();
    let p = Pipeline::new(config(dir.path(), jobs), Services::mock()).unwrap();
    let s = p.run().unwrap();
    (dir, s)
}

#[test]
fn mock_corpus_completes() {
    let (dir, s) = mock_run(2);
    assert_eq!((s.panoramas, s.records, s.complete), (3, 7, 7));
    assert!(s.clean(), "{s:?}");
    assert_eq!(s.triplets, 4 * s.complete);
    let store = panokit::pipeline::RecordStore::open(&dir.path().join("out")).unwrap();
    let recs = store.load_all().unwrap();
    let kinds: Vec<(&str, LocalizationKind)> = recs.iter().map(|r| (r.id.as_str(), r.localization_kind.unwrap())).collect();
    let relative: Vec<&str> = kinds.iter().filter(|k| k.1 == LocalizationKind::Relative).map(|k| k.0).collect();
    assert_eq!(relative, ["living-01", "living-02"]);
    for r in &recs {
        assert!(r.stage_status.values().all(|s| *s == StageState::Complete), "{}", r.id);
        for f in [&r.files.view, &r.files.view_mask, &r.files.erp_mask, &r.files.erased] {
            assert!(dir.path().join("out").join(f.as_ref().unwrap()).is_file());
        }
    }
    let table = recs.iter().find(|r| r.id == "living-01").unwrap();
    let names: Vec<&str> = table.affiliated_items.iter().map(|a| a.name.as_str()).collect();
    assert_eq!(names, ["table", "vase"]);
}

#[test]
fn runs_are_byte_identical_across_job_counts() {
    let (a, _) = mock_run(1);
    let (b, _) = mock_run(4);
    let (sa, sb) = (snapshot(&a.path().join("out")), snapshot(&b.path().join("out")));
    assert_eq!(sa.keys().collect::<Vec<_>>(), sb.keys().collect::<Vec<_>>());
    for (k, v) in &sa {
        assert!(v == &sb[k], "{k} differs");
    }
}

#[test]
fn records_validate_against_schema() {
    let (dir, _) = mock_run(2);
    let schema: serde_json::Value = serde_json::from_str(RECORD_SCHEMA).unwrap();
    let validator = jsonschema::validator_for(&schema).unwrap();
    let records = dir.path().join("out/records");
    let mut n = 0;
    for e in std::fs::read_dir(&records).unwrap() {
        let v: serde_json::Value = serde_json::from_slice(&std::fs::read(e.unwrap().path()).unwrap()).unwrap();
        let errors: Vec<String> = validator.iter_errors(&v).map(|e| e.to_string()).collect();
        assert!(errors.is_empty(), "{errors:?}");
        n += 1;
    }
    assert_eq!(n, 7);
    let mut bad: serde_json::Value = serde_json::from_slice(&std::fs::read(records.join("hall-00.json")).unwrap()).unwrap();
    bad["localization_kind"] = "sideways".into();
    assert!(!validator.is_valid(&bad));
}

#[test]
fn rerun_is_a_no_op() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), 2);
    let first = Pipeline::new(cfg.clone(), Services::mock()).unwrap().run().unwrap();
    let before = snapshot(&dir.path().join("out"));
    let second = Pipeline::new(cfg, Services::mock()).unwrap().run().unwrap();
    assert_eq!(snapshot(&dir.path().join("out")), before);
    assert_eq!(second.records, first.records);
    assert!(second.stages.values().all(|r| r.completed == 0 && r.unchanged == 7));
}

#[test]
fn flaky_segmenter_costs_one_retry() {
    let dir = tempfile::tempdir().unwrap();
    let mut services = Services::mock();
    services.segmenter = Box::new(Flaky::new(MockSegmenter, 1));
    let p = Pipeline::new(config(dir.path(), 1), services).unwrap();
    let s = p.run().unwrap();
    assert!(s.clean());
    let recs = p.store().load_all().unwrap();
    let retried: Vec<(&str, u32)> = recs
        .iter()
        .filter_map(|r| r.retries.get(&Stage::Erasing).map(|n| (r.id.as_str(), *n)))
        .collect();
    // records are processed in id order with one job
    assert_eq!(retried, [("hall-00", 1)]);
    assert!(recs[0].core_complete());
}

#[test]
fn dead_segmenter_quarantines_without_aborting() {
    let dir = tempfile::tempdir().unwrap();
    let mut services = Services::mock();
    services.segmenter = Box::new(Broken(ServiceError::Unavailable("connection refused".into())));
    let p = Pipeline::new(config(dir.path(), 3), services).unwrap();
    let s = p.run().unwrap();
    assert_eq!(s.records, 7);
    assert_eq!(s.quarantined.len(), 7);
    assert_eq!(s.triplets, 0);
    for q in &s.quarantined {
        assert_eq!(q.stage, Stage::Erasing);
        assert!(q.error.contains("segmentation round 1"), "{}", q.error);
    }
    for r in p.store().load_all().unwrap() {
        assert_eq!(r.retries[&Stage::Erasing], 3);
        assert_eq!(r.state(Stage::Erasing), StageState::Failed);
        assert!(r.is_complete(Stage::Projection));
        assert_eq!(r.state(Stage::Recaption), StageState::Pending);
    }
}

#[test]
fn stage_out_of_order_is_a_precondition_error() {
    let dir = tempfile::tempdir().unwrap();
    let p = Pipeline::new(config(dir.path(), 1), Services::mock()).unwrap();
    let names = p.list_corpus().unwrap();
    let (mut recs, failures) = p.extract(&names).unwrap();
    assert!(failures.is_empty());
    let err = p.run_stage(&mut recs, Stage::Projection).unwrap_err();
    assert!(matches!(err, panokit::Error::Precondition(_)), "{err}");
    assert!(recs.iter().all(|r| r.state(Stage::Projection) == StageState::Pending));
    p.run_stage(&mut recs, Stage::Affiliation).unwrap();
    assert!(p.run_stage(&mut recs, Stage::Projection).is_ok());
}

#[test]
fn refinement_sample_skips_the_rest() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(dir.path(), 2);
    cfg.hf.sample = Some(3);
    let p = Pipeline::new(cfg, Services::mock()).unwrap();
    let s = p.run().unwrap();
    let report = &s.stages[&Stage::Refinement];
    assert_eq!((report.completed, report.skipped), (3, 4));
    let recs = p.store().load_all().unwrap();
    assert_eq!(recs.iter().filter(|r| r.hf_verdict.is_some()).count(), 3);
    // skipping refinement does not cost triplets
    assert_eq!(s.triplets, 28);
}

fn golden_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden/mock_run")
}

#[test]
fn mock_run_matches_golden_tree() {
    let (dir, _) = mock_run(2);
    let out = dir.path().join("out");
    let tree: BTreeMap<String, Vec<u8>> = snapshot(&out)
        .into_iter()
        .filter(|(k, _)| k.starts_with("records/") || k == "triplets.json" || k == "batch_index.jsonl")
        .collect();
    let golden = golden_dir();
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        let _ = std::fs::remove_dir_all(&golden);
        for (k, v) in &tree {
            let p = golden.join(k);
            std::fs::create_dir_all(p.parent().unwrap()).unwrap();
            std::fs::write(p, v).unwrap();
        }
    }
    let expected = snapshot(&golden);
    assert_eq!(expected.keys().collect::<Vec<_>>(), tree.keys().collect::<Vec<_>>());
    for (k, v) in &tree {
        assert!(
            &expected[k] == v,
            "{k} differs from golden; rerun with UPDATE_GOLDEN=1 if the change is intended\n{}",
            String::from_utf8_lossy(v)
        );
    }
}
