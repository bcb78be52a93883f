use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use panokit::boxfusion::{
    detections_to_json, fuse, parse_detections, BBox, Detection, FusionConfig, GeometricFilterConfig, Source,
};
use panokit::maskops::{progressive_refine, Mask, RefineConfig, DEFAULT_DILATE_KERNEL, DEFAULT_MIN_AREA};
use panokit::pipeline::{emit_triplets, Pipeline, PipelineConfig, RecordStore, Services};
use panokit::projection::{project_mask, project_perspective, reproject_mask_to_erp, Viewport};
use panokit::raster::Image;
use panokit::refine_filter::{hf_filter, FilterConfig};
use panokit::seam::{inner_width, pad_circular, seam_discontinuity, unpad_center, Granularity, PadSpec, PIXEL_PAD};
use panokit::services::http::HttpService;
use panokit::services::manifest::ServiceManifest;
use panokit::services::mock::{MockDetector, MockSegmenter, PixelStatsFeatures};
use panokit::services::{Detector, FeatureExtractor, Segmenter};
use panokit::spe::{build_table, SpeConfig, DEFAULT_BASE};
use panokit::sphere::ErpImage;
use panokit::synth::{fixture_scenes, render};
use panokit::viewport_adapt::{adapt, initial_viewport, AdaptConfig};

/// Panorama geometry kernels and the object-editing dataset pipeline.
#[derive(Parser)]
#[command(name = "panokit", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Extract a perspective view (and optionally a mask) from a panorama.
    Project(ProjectArgs),
    /// Map a perspective-view mask back onto the panorama grid.
    ReprojectMask(ReprojectArgs),
    /// Fuse VLM, detector-A and detector-B grounding lists.
    FuseBoxes(FuseArgs),
    /// Adaptive viewport search around a panorama box.
    Adapt(AdaptArgs),
    /// Progressive box/point segmentation, noise removal and dilation.
    RefineMask(RefineArgs),
    /// Write a spherical positional embedding table.
    SpeTable(SpeArgs),
    /// Circularly pad a panorama horizontally.
    Pad(PadArgs),
    /// Crop the centre of a padded panorama.
    Unpad(UnpadArgs),
    /// Report how visible the left/right seam of a panorama is.
    SeamScore(SeamArgs),
    /// Run the SSIM and feature-similarity gates on an edit.
    FilterHf(FilterArgs),
    /// Run the dataset pipeline over a corpus.
    PipelineRun(RunArgs),
    /// Rebuild the triplet manifest of an output root.
    EmitTriplets(TripletArgs),
}

#[derive(Args, Clone)]
struct ViewArgs {
    /// Camera yaw, degrees.
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    yaw: f64,
    /// Camera pitch, degrees.
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    pitch: f64,
    /// Horizontal field of view, degrees.
    #[arg(long, default_value_t = 90.0)]
    fov: f64,
    #[arg(long, default_value_t = 512)]
    out_w: usize,
    #[arg(long, default_value_t = 512)]
    out_h: usize,
}

impl ViewArgs {
    fn viewport(&self) -> panokit::Result<Viewport> {
        Viewport::new(self.yaw.to_radians(), self.pitch.to_radians(), self.fov, self.out_w, self.out_h)
    }
}

#[derive(Args)]
struct ProjectArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    view: ViewArgs,
    /// Panorama-sized mask to project alongside the image.
    #[arg(long)]
    mask: Option<PathBuf>,
    #[arg(long, requires = "mask")]
    mask_out: Option<PathBuf>,
}

#[derive(Args)]
struct ReprojectArgs {
    #[arg(long)]
    mask: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    view: ViewArgs,
    #[arg(long)]
    erp_w: usize,
    #[arg(long)]
    erp_h: usize,
}

#[derive(Args)]
struct FuseArgs {
    /// Grounding list from the VLM.
    #[arg(long)]
    vlm: PathBuf,
    #[arg(long)]
    detector_a: PathBuf,
    #[arg(long)]
    detector_b: PathBuf,
    /// Image width, pixels.
    #[arg(long)]
    width: f64,
    /// Image height, pixels.
    #[arg(long)]
    height: f64,
    #[arg(long, default_value_t = 0.5)]
    anchor_iou: f64,
    #[arg(long, default_value_t = 0.5)]
    recover_iou: f64,
    #[arg(long, default_value_t = 0.35)]
    recover_min_confidence: f64,
    #[arg(long, default_value_t = 0.3)]
    nms_iou: f64,
    /// Detector-B boxes closer than this to an edge are dropped, pixels.
    #[arg(long, default_value_t = 30.0)]
    boundary_margin: f64,
    #[arg(long, default_value_t = 0.6)]
    max_side_frac: f64,
    #[arg(long, default_value_t = 0.003)]
    min_area_frac: f64,
    #[arg(long, default_value_t = 0.4)]
    max_area_frac: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ServiceArgs {
    /// Endpoint manifest; the built-in mocks are used when absent.
    #[arg(long)]
    manifest: Option<PathBuf>,
}

impl ServiceArgs {
    fn http(&self, role: &str) -> anyhow::Result<Option<HttpService>> {
        let Some(path) = &self.manifest else { return Ok(None) };
        let manifest = ServiceManifest::load(path)?;
        let spec = manifest.get(role).with_context(|| format!("{} has no `{role}` service", path.display()))?;
        Ok(Some(HttpService::new(spec.clone())))
    }
}

#[derive(Args)]
struct AdaptArgs {
    #[arg(long = "in")]
    input: PathBuf,
    /// Panorama box `x1,y1,x2,y2`.
    #[arg(long, value_parser = parse_bbox)]
    bbox: BBox,
    /// Detector query; repeat for several targets.
    #[arg(long = "target", required = true)]
    targets: Vec<String>,
    #[arg(long, default_value_t = 256)]
    out_w: usize,
    #[arg(long, default_value_t = 256)]
    out_h: usize,
    #[arg(long, default_value_t = 1.15)]
    fov_expand_factor: f64,
    #[arg(long, default_value_t = 1.1)]
    offset_growth_factor: f64,
    #[arg(long, default_value_t = 3)]
    max_iterations: usize,
    #[arg(long, default_value_t = 0.25)]
    box_threshold: f64,
    #[arg(long, default_value_t = 0.25)]
    text_threshold: f64,
    /// Where to write the final view.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    services: ServiceArgs,
}

#[derive(Args)]
struct RefineArgs {
    /// Perspective view.
    #[arg(long = "in")]
    input: PathBuf,
    /// View box `x1,y1,x2,y2`.
    #[arg(long, value_parser = parse_bbox)]
    bbox: BBox,
    #[arg(long, default_value_t = DEFAULT_MIN_AREA)]
    min_area: usize,
    #[arg(long, default_value_t = DEFAULT_DILATE_KERNEL)]
    kernel: usize,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    services: ServiceArgs,
}

#[derive(Args)]
struct SpeArgs {
    /// Token rows.
    #[arg(long = "H")]
    height: usize,
    /// Token columns.
    #[arg(long = "W")]
    width: usize,
    /// Embedding width, a multiple of 6.
    #[arg(long)]
    dim: usize,
    #[arg(long, default_value_t = DEFAULT_BASE)]
    base: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PadArgs {
    /// Columns added on each side.
    #[arg(long, default_value_t = PIXEL_PAD)]
    amount: usize,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct UnpadArgs {
    #[arg(long, default_value_t = PIXEL_PAD)]
    amount: usize,
    /// Width before padding; defaults to the padded width minus both pads.
    #[arg(long)]
    width: Option<usize>,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SeamArgs {
    #[arg(long = "in")]
    input: PathBuf,
    /// Also score after padding by this many columns and cropping back.
    #[arg(long)]
    pad: Option<usize>,
}

#[derive(Args)]
struct FilterArgs {
    #[arg(long)]
    orig: PathBuf,
    #[arg(long)]
    edited: PathBuf,
    /// Box of the edited object in view pixels `x1,y1,x2,y2`.
    #[arg(long, value_parser = parse_bbox)]
    bbox: BBox,
    #[arg(long, default_value_t = 0.86)]
    ssim_max: f64,
    #[arg(long, default_value_t = 0.9)]
    masked_sim_max: f64,
    #[arg(long, default_value_t = 0.8)]
    border_sim_min: f64,
    #[arg(long, default_value_t = 0.1)]
    border_frac: f64,
    #[arg(long, default_value_t = 11)]
    ssim_window: usize,
    #[arg(long, default_value_t = 1.5)]
    ssim_sigma: f64,
    #[command(flatten)]
    services: ServiceArgs,
}

#[derive(Args)]
struct RunArgs {
    /// TOML run configuration; all defaults when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Render the built-in synthetic scenes into the corpus root first.
    #[arg(long)]
    fixtures: bool,
}

#[derive(Args)]
struct TripletArgs {
    #[arg(long)]
    output: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn parse_bbox(s: &str) -> Result<BBox, String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|x| x.trim().parse::<f64>().map_err(|e| format!("`{x}`: {e}")))
        .collect::<Result<_, _>>()?;
    if v.len() != 4 {
        return Err(format!("expected x1,y1,x2,y2, got {} values", v.len()));
    }
    BBox::new(v[0], v[1], v[2], v[3]).map_err(|e| e.to_string())
}

fn read_detections(path: &Path, source: Source) -> anyhow::Result<Vec<Detection>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    parse_detections(&text, Some(source)).with_context(|| path.display().to_string())
}

fn mask_summary(m: &Mask) -> Value {
    json!({ "width": m.width(), "height": m.height(), "area": m.area(), "bbox": m.bbox().map(|b| b.to_array()) })
}

fn run(cli: Cli) -> anyhow::Result<(Value, bool)> {
    let summary = match cli.command {
        Command::Project(a) => {
            let erp = ErpImage::load(&a.input)?;
            let vp = a.view.viewport()?;
            project_perspective(&erp, &vp)?.save_png(&a.out)?;
            let mut s = json!({ "command": "project", "viewport": vp, "out": a.out });
            if let (Some(mask), Some(out)) = (&a.mask, &a.mask_out) {
                let m = project_mask(&Mask::load_png(mask)?, &vp)?;
                m.save_png(out)?;
                s["mask"] = mask_summary(&m);
            }
            s
        }
        Command::ReprojectMask(a) => {
            let vp = a.view.viewport()?;
            let m = reproject_mask_to_erp(&Mask::load_png(&a.mask)?, &vp, a.erp_h, a.erp_w)?;
            m.save_png(&a.out)?;
            json!({ "command": "reproject-mask", "viewport": vp, "mask": mask_summary(&m), "out": a.out })
        }
        Command::FuseBoxes(a) => {
            let anchors = read_detections(&a.vlm, Source::Vlm)?;
            let dets_a = read_detections(&a.detector_a, Source::DetectorA)?;
            let dets_b = read_detections(&a.detector_b, Source::DetectorB)?;
            let mut queries: Vec<(String, String)> = Vec::new();
            for d in anchors.iter().chain(&dets_a) {
                if !queries.iter().any(|q| q.0 == d.description) {
                    queries.push((d.description.clone(), d.category.clone()));
                }
            }
            let fusion = FusionConfig {
                anchor_iou: a.anchor_iou,
                recover_iou: a.recover_iou,
                recover_min_confidence: a.recover_min_confidence,
                nms_iou: a.nms_iou,
            };
            let geometric = GeometricFilterConfig {
                boundary_margin: a.boundary_margin,
                max_side_frac: a.max_side_frac,
                min_area_frac: a.min_area_frac,
                max_area_frac: a.max_area_frac,
            };
            let fused = fuse(&queries, &anchors, &dets_a, &dets_b, a.width, a.height, &fusion, &geometric)?;
            let list = detections_to_json(&fused);
            if let Some(out) = &a.out {
                std::fs::write(out, serde_json::to_string_pretty(&list)? + "\n")?;
            }
            json!({ "command": "fuse-boxes", "count": fused.len(), "detections": list })
        }
        Command::Adapt(a) => {
            let erp = ErpImage::load(&a.input)?;
            let cfg = AdaptConfig {
                fov_expand_factor: a.fov_expand_factor,
                offset_growth_factor: a.offset_growth_factor,
                max_iterations: a.max_iterations,
                box_threshold: a.box_threshold,
                text_threshold: a.text_threshold,
                ..AdaptConfig::default()
            };
            let seed = initial_viewport(&a.bbox, erp.height(), erp.width(), a.out_w, a.out_h, &cfg)?;
            let detector: Box<dyn Detector> = match a.services.http("detector_a")? {
                Some(h) => Box::new(h.with_source(Source::DetectorA)),
                None => Box::new(MockDetector::detector_a()),
            };
            let res = adapt(&a.targets, &erp, &seed, &*detector, &cfg)?;
            if let Some(out) = &a.out {
                project_perspective(&erp, &res.final_viewport)?.save_png(out)?;
            }
            json!({
                "command": "adapt",
                "seed": seed,
                "final_viewport": res.final_viewport,
                "iterations_used": res.iterations_used,
                "converged": res.converged,
                "fov_trace": res.trace.iter().map(|s| s.viewport.fov).collect::<Vec<_>>(),
                "offset_trace": res.trace.iter().map(|s| s.pitch_offset).collect::<Vec<_>>(),
                "detections": detections_to_json(&res.detections),
            })
        }
        Command::RefineMask(a) => {
            let view = Image::load(&a.input)?;
            let seg: Box<dyn Segmenter> = match a.services.http("segmenter")? {
                Some(h) => Box::new(h),
                None => Box::new(MockSegmenter),
            };
            let cfg = RefineConfig { min_area: a.min_area, dilate_kernel: a.kernel };
            let r = progressive_refine(&a.bbox, &view, &*seg, &cfg)?;
            r.final_mask.save_png(&a.out)?;
            json!({
                "command": "refine-mask",
                "coarse_area": r.coarse.iter().map(Mask::area).sum::<usize>(),
                "refined_area": r.refined.iter().map(Mask::area).sum::<usize>(),
                "merged_area": r.merged.area(),
                "cleaned_area": r.cleaned.area(),
                "mask": mask_summary(&r.final_mask),
                "out": a.out,
            })
        }
        Command::SpeTable(a) => {
            let cfg = SpeConfig { dim: a.dim, base: a.base, height: a.height, width: a.width };
            let table = build_table(&cfg)?;
            panokit::tensorfile::write(&a.out, &table.to_grid(), a.base as f32)?;
            json!({ "command": "spe-table", "height": a.height, "width": a.width, "dim": a.dim, "base": a.base, "values": table.data.len(), "out": a.out })
        }
        Command::Pad(a) => {
            let img = Image::load(&a.input)?;
            let spec = PadSpec::new(a.amount, Granularity::Pixel);
            let padded = pad_circular(&img, &spec)?;
            padded.save_png(&a.out)?;
            json!({ "command": "pad", "amount": a.amount, "in_width": img.width(), "out_width": padded.width(), "height": padded.height(), "out": a.out })
        }
        Command::Unpad(a) => {
            let img = Image::load(&a.input)?;
            let spec = PadSpec::new(a.amount, Granularity::Pixel);
            let width = match a.width {
                Some(w) => w,
                None => inner_width(img.width(), &spec)?,
            };
            let out = unpad_center(&img, &spec, width)?;
            out.save_png(&a.out)?;
            json!({ "command": "unpad", "amount": a.amount, "in_width": img.width(), "out_width": out.width(), "height": out.height(), "out": a.out })
        }
        Command::SeamScore(a) => {
            let img = Image::load(&a.input)?;
            let mut s = json!({ "command": "seam-score", "width": img.width(), "height": img.height(), "score": seam_discontinuity(&img) });
            if let Some(amount) = a.pad {
                let spec = PadSpec::new(amount, Granularity::Pixel);
                let back = unpad_center(&pad_circular(&img, &spec)?, &spec, img.width())?;
                s["round_trip_identical"] = json!(back == img);
            }
            s
        }
        Command::FilterHf(a) => {
            let orig = Image::load(&a.orig)?;
            let edited = Image::load(&a.edited)?;
            let cfg = FilterConfig {
                ssim_max: a.ssim_max,
                masked_sim_max: a.masked_sim_max,
                border_sim_min: a.border_sim_min,
                border_frac: a.border_frac,
                ssim_window: a.ssim_window,
                ssim_sigma: a.ssim_sigma,
                ..FilterConfig::default()
            };
            let features: Box<dyn FeatureExtractor> = match a.services.http("features")? {
                Some(h) => Box::new(h),
                None => Box::new(PixelStatsFeatures),
            };
            let v = hf_filter(&orig, &edited, &a.bbox, &*features, &cfg)?;
            json!({ "command": "filter-hf", "verdict": v })
        }
        Command::PipelineRun(a) => {
            let mut cfg = match &a.config {
                Some(p) => PipelineConfig::load(p)?,
                None => PipelineConfig::default(),
            };
            if let Some(j) = a.jobs {
                cfg.jobs = j;
            }
            if let Some(c) = a.corpus {
                cfg.corpus_root = c;
            }
            if let Some(o) = a.output {
                cfg.output_root = o;
            }
            if let Some(s) = a.seed {
                cfg.seed = s;
            }
            cfg.validate()?;
            if a.fixtures {
                std::fs::create_dir_all(&cfg.corpus_root)?;
                for scene in fixture_scenes() {
                    render(&scene).save_png(&cfg.corpus_root.join(format!("{}.png", scene.name)))?;
                }
            }
            if !cfg.corpus_root.is_dir() {
                bail!("corpus root {} is not a directory", cfg.corpus_root.display());
            }
            let services = Services::from_config(&cfg.services)?;
            let p = Pipeline::new(cfg, services)?;
            let summary = p.run()?;
            let clean = summary.clean();
            let mut s = serde_json::to_value(&summary)?;
            s["command"] = json!("pipeline-run");
            s["output"] = json!(p.config().output_root);
            return Ok((s, clean));
        }
        Command::EmitTriplets(a) => {
            let store = RecordStore::open(&a.output)?;
            let records = store.load_all()?;
            let manifest = emit_triplets(&records, a.seed)?;
            let path = store.write_triplets(&manifest)?;
            let quarantined = records.iter().filter(|r| r.is_quarantined()).count();
            let s = json!({
                "command": "emit-triplets",
                "records": records.len(),
                "quarantined": quarantined,
                "triplets": manifest.len(),
                "out": path,
            });
            return Ok((s, quarantined == 0));
        }
    };
    Ok((summary, true))
}

/// The error chain, leaving out causes already spelled out by their parent.
fn error_text(e: &anyhow::Error) -> String {
    let mut text = String::new();
    for cause in e.chain() {
        let msg = cause.to_string();
        if !text.contains(&msg) {
            if !text.is_empty() {
                text.push_str(": ");
            }
            text.push_str(&msg);
        }
    }
    text
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok((summary, clean)) => {
            println!("{summary}");
            if clean {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
        Err(e) => {
            println!("{}", json!({ "error": error_text(&e) }));
            ExitCode::from(1)
        }
    }
}
