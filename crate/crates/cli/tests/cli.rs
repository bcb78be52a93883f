use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn panokit(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_panokit"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "error")
        .output()
        .expect("binary runs")
}

fn summary(out: &Output) -> Value {
    let text = String::from_utf8_lossy(&out.stdout);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 1, "one JSON object expected, got {text:?}");
    serde_json::from_str(lines[0]).unwrap()
}

fn ok(args: &[&str], cwd: &Path) -> Value {
    let out = panokit(args, cwd);
    assert!(out.status.success(), "{args:?}: {}\n{}", String::from_utf8_lossy(&out.stdout), String::from_utf8_lossy(&out.stderr));
    summary(&out)
}

fn scene(dir: &Path) -> PathBuf {
    let p = dir.join("hall.png");
    let scenes = panokit::synth::fixture_scenes();
    panokit::synth::render(scenes.iter().find(|s| s.name == "hall").unwrap()).save_png(&p).unwrap();
    p
}

#[test]
fn pad_adds_both_margins() {
    let dir = tempfile::tempdir().unwrap();
    scene(dir.path());
    let s = ok(&["pad", "--amount", "64", "--in", "hall.png", "--out", "padded.png"], dir.path());
    assert_eq!(s["out_width"].as_u64().unwrap(), s["in_width"].as_u64().unwrap() + 128);
    let s = ok(&["unpad", "--in", "padded.png", "--out", "back.png"], dir.path());
    assert_eq!(s["out_width"], 512);
    let a = panokit::raster::Image::load(&dir.path().join("hall.png")).unwrap();
    let b = panokit::raster::Image::load(&dir.path().join("back.png")).unwrap();
    assert_eq!(a, b);
    let s = ok(&["seam-score", "--in", "hall.png", "--pad", "64"], dir.path());
    assert_eq!(s["round_trip_identical"], true);
    assert!(s["score"].as_f64().unwrap() > 0.0);
}

#[test]
fn spe_table_size_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let s = ok(&["spe-table", "--H", "4", "--W", "8", "--dim", "6", "--out", "t.bin"], dir.path());
    assert_eq!(s["values"], 4 * 8 * 6);
    let bytes = std::fs::read(dir.path().join("t.bin")).unwrap();
    assert_eq!(bytes.len(), panokit::tensorfile::HEADER_BYTES + 4 * 8 * 6 * 4);
    let (h, grid) = panokit::tensorfile::read(&dir.path().join("t.bin")).unwrap();
    assert_eq!((h.height, h.width, h.depth), (4, 8, 6));
    assert_eq!(grid.data().len(), 192);
    ok(&["spe-table", "--H", "4", "--W", "8", "--dim", "6", "--out", "u.bin"], dir.path());
    assert_eq!(bytes, std::fs::read(dir.path().join("u.bin")).unwrap());
}

#[test]
fn usage_and_module_errors_have_distinct_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(panokit(&["pad", "--amount", "64"], dir.path()).status.code(), Some(2));
    assert_eq!(panokit(&["no-such-command"], dir.path()).status.code(), Some(2));
    assert_eq!(panokit(&["spe-table", "--H", "x", "--W", "8", "--dim", "6", "--out", "t"], dir.path()).status.code(), Some(2));
    let out = panokit(&["spe-table", "--H", "4", "--W", "8", "--dim", "7", "--out", "t.bin"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(summary(&out)["error"].as_str().unwrap().contains("multiple of 6"));
    scene(dir.path());
    let out = panokit(&["pad", "--amount", "300", "--in", "hall.png", "--out", "p.png"], dir.path());
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn help_shows_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let help = |cmd: &str| String::from_utf8(panokit(&[cmd, "--help"], dir.path()).stdout).unwrap();
    let h = help("filter-hf");
    for d in ["0.86", "0.9", "0.8", "0.1", "11", "1.5"] {
        assert!(h.contains(&format!("[default: {d}]")), "filter-hf help lacks {d}:\n{h}");
    }
    let h = help("fuse-boxes");
    for d in ["0.5", "0.35", "0.3", "30", "0.6", "0.003", "0.4"] {
        assert!(h.contains(&format!("[default: {d}]")), "fuse-boxes help lacks {d}:\n{h}");
    }
    let h = help("adapt");
    for d in ["1.15", "1.1", "3", "0.25"] {
        assert!(h.contains(&format!("[default: {d}]")), "adapt help lacks {d}:\n{h}");
    }
    assert!(help("refine-mask").contains("[default: 30]"));
    assert!(help("refine-mask").contains("[default: 15]"));
    assert!(help("pad").contains("[default: 64]"));
}

#[test]
fn project_then_reproject_mask() {
    let dir = tempfile::tempdir().unwrap();
    scene(dir.path());
    let mask = panokit::maskops::Mask::from_fn(512, 256, |r, c| (100..140).contains(&r) && (240..290).contains(&c));
    mask.save_png(&dir.path().join("m.png")).unwrap();
    let view = ["--yaw", "0", "--pitch", "-5", "--fov", "90", "--out-w", "128", "--out-h", "128"];
    let mut args = vec!["project", "--in", "hall.png", "--out", "v.png", "--mask", "m.png", "--mask-out", "vm.png"];
    args.extend(view);
    let s = ok(&args, dir.path());
    assert!(s["mask"]["area"].as_u64().unwrap() > 100);
    let mut args = vec!["reproject-mask", "--mask", "vm.png", "--out", "back.png", "--erp-w", "512", "--erp-h", "256"];
    args.extend(view);
    let s = ok(&args, dir.path());
    let back = panokit::maskops::Mask::load_png(&dir.path().join("back.png")).unwrap();
    assert_eq!(s["mask"]["area"].as_u64().unwrap() as usize, back.area());
    assert!(back.iou(&mask) > 0.8, "iou {}", back.iou(&mask));
}

#[test]
fn fuse_boxes_from_files() {
    let dir = tempfile::tempdir().unwrap();
    let write = |name: &str, text: &str| std::fs::write(dir.path().join(name), text).unwrap();
    write("vlm.json", r#"[{"description": "A red armchair.", "category": "armchair", "bbox_2d": [100, 100, 200, 200]}]"#);
    write(
        "a.json",
        r#"```json
[{"description": "A red armchair.", "category": "armchair", "bbox_2d": [105, 100, 210, 205], "score": 0.8},
 {"description": "A green plant.", "category": "plant", "bbox_2d": [400, 150, 450, 220], "score": 0.6}]
```"#,
    );
    write(
        "b.json",
        r#"[{"description": "A red armchair.", "category": "armchair", "bbox_2d": [95, 95, 215, 210]},
 {"description": "A green plant.", "category": "plant", "bbox_2d": [402, 152, 452, 221]}]"#,
    );
    let s = ok(
        &["fuse-boxes", "--vlm", "vlm.json", "--detector-a", "a.json", "--detector-b", "b.json", "--width", "1024", "--height", "512", "--out", "f.json"],
        dir.path(),
    );
    assert_eq!(s["count"], 2);
    let det = &s["detections"][0];
    assert_eq!(det["description"], "A red armchair.");
    // the detector-B box is the largest agreeing box
    assert_eq!(det["bbox_2d"], serde_json::json!([95.0, 95.0, 215.0, 210.0]));
    assert_eq!(s["detections"][1]["category"], "plant");
    let text = std::fs::read_to_string(dir.path().join("f.json")).unwrap();
    assert_eq!(panokit::boxfusion::parse_detections(&text, None).unwrap().len(), 2);
}

#[test]
fn refine_mask_with_mock_segmenter() {
    let dir = tempfile::tempdir().unwrap();
    let red = panokit::synth::PALETTE[0].rgb;
    let img = panokit::raster::Image::from_fn(128, 96, 3, |r, c, ch| {
        if (30..50).contains(&r) && (40..60).contains(&c) { red[ch] } else { 0.5 }
    });
    img.save_png(&dir.path().join("v.png")).unwrap();
    let s = ok(&["refine-mask", "--in", "v.png", "--bbox", "40,30,60,50", "--out", "m.png"], dir.path());
    let m = panokit::maskops::Mask::load_png(&dir.path().join("m.png")).unwrap();
    assert_eq!(s["mask"]["area"].as_u64().unwrap() as usize, m.area());
    // 20x20 box dilated by a 15x15 kernel
    assert_eq!(m.area(), 34 * 34);
}

#[test]
fn adapt_on_fixture_scene() {
    let dir = tempfile::tempdir().unwrap();
    scene(dir.path());
    let recs = panokit::synth::fixture_scenes();
    let hall = recs.iter().find(|s| s.name == "hall").unwrap();
    let obj = &hall.objects[0];
    let [x1, y1, x2, y2] = obj.rect;
    let bbox = format!("{x1},{y1},{x2},{y2}");
    let target = panokit::synth::PALETTE[obj.palette].noun;
    let s = ok(&["adapt", "--in", "hall.png", "--bbox", &bbox, "--target", target, "--out", "view.png"], dir.path());
    let fovs: Vec<f64> = s["fov_trace"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
    assert!(!fovs.is_empty() && fovs.len() <= 4);
    for (n, f) in fovs.iter().enumerate() {
        let expected = (fovs[0] * 1.15f64.powi(n as i32)).min(175.0);
        assert!((f - expected).abs() < 1e-9, "{fovs:?}");
    }
    assert_eq!(s["iterations_used"].as_u64().unwrap() as usize, fovs.len() - 1);
    assert!(dir.path().join("view.png").is_file());
}

#[test]
fn filter_hf_identical_edit_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let img = panokit::raster::Image::from_fn(64, 64, 3, |r, c, ch| ((r * 7 + c * 3 + ch * 11) % 17) as f32 / 17.0);
    img.save_png(&dir.path().join("a.png")).unwrap();
    let s = ok(&["filter-hf", "--orig", "a.png", "--edited", "a.png", "--bbox", "10,10,40,40"], dir.path());
    assert_eq!(s["verdict"]["kept"], false);
    assert_eq!(s["verdict"]["reject_reason"], "ssim_too_high");
    assert_eq!(s["verdict"]["ssim"], 1.0);
}

fn tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(base: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
        for e in std::fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(base, &p, out);
            } else {
                out.insert(p.strip_prefix(base).unwrap().to_string_lossy().replace('\\', "/"), std::fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

#[test]
fn pipeline_run_reproduces_golden_records() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/mock.toml");
    let config = std::fs::read_to_string(cfg).unwrap().replace("../target/mock/", "");
    std::fs::write(dir.path().join("mock.toml"), config).unwrap();
    let s = ok(&["pipeline-run", "--config", "mock.toml", "--fixtures"], dir.path());
    assert_eq!((s["records"].as_u64(), s["complete"].as_u64(), s["triplets"].as_u64()), (Some(7), Some(7), Some(28)));
    let golden = Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/golden/mock_run");
    let got = tree(&dir.path().join("out"));
    for (k, v) in tree(&golden) {
        assert!(got.get(&k) == Some(&v), "{k} differs from the golden run");
    }

    std::fs::remove_file(dir.path().join("out/triplets.json")).unwrap();
    let s = ok(&["emit-triplets", "--output", "out", "--seed", "7"], dir.path());
    assert_eq!(s["triplets"], 28);
    assert_eq!(got["triplets.json"], std::fs::read(dir.path().join("out/triplets.json")).unwrap());
}

#[test]
fn pipeline_run_with_dead_service_exits_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    std::fs::write(dir.path().join("services.toml"), format!("[segmenter]\nendpoint = \"http://127.0.0.1:{port}/segment\"\ntimeout_secs = 2\n")).unwrap();
    std::fs::write(
        dir.path().join("run.toml"),
        "corpus_root = \"corpus\"\noutput_root = \"out\"\n[retry]\ndelays_secs = [0.0]\n[services]\nmanifest = \"services.toml\"\nroles = { segmenter = \"http\" }\n",
    )
    .unwrap();
    let out = panokit(&["pipeline-run", "--config", "run.toml", "--fixtures", "--jobs", "3"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    let s = summary(&out);
    assert_eq!(s["records"], 7);
    let q = s["quarantined"].as_array().unwrap();
    assert_eq!(q.len(), 7);
    assert!(q.iter().all(|e| e["stage"] == "erasing"));
    assert_eq!(s["triplets"], 0);
}
