//! The `bbe` command-line tool.
//!
//! Exit codes: 0 on success, 1 when a file cannot be read or written, 2 when
//! arguments or file contents are invalid (clap also uses 2 for bad flags).

use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bench::{run_sweep, write_csv, SweepConfig};
use crate::eval::{evaluate, predictions_from_grouping, EvalParams, PredictionRecord, ThresholdAp};
use crate::geometry::AnchorConfig;
use crate::grouping::{assign_pixels_excluding, select_global_boxes, GroupingConfig};
use crate::maps::{BinaryMask, DtenMap, InstanceLabelMap, MapError, OffsetMap, ProbMap};
use crate::synth::{oracle_outputs, NoiseSpec, Scene, SceneGenerator, ShapeKind};
use crate::targets::{build_targets, AnnotationDocument};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Io(String),
    #[error("{0}")]
    Invalid(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Io(_) => 1,
            CliError::Invalid(_) => 2,
        }
    }

    fn io(path: &Path, err: impl std::fmt::Display) -> Self {
        CliError::Io(format!("{}: {err}", path.display()))
    }

    fn invalid(path: &Path, err: impl std::fmt::Display) -> Self {
        CliError::Invalid(format!("{}: {err}", path.display()))
    }

    fn map(path: &Path, err: MapError) -> Self {
        match err {
            MapError::Io(e) => Self::io(path, e),
            other => Self::invalid(path, other),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "bbe", version, about = "Bounding-box embedding instance grouping")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Group probability and offset maps into instances.
    Group(GroupArgs),
    /// Generate a synthetic scene and the maps a perfect network would emit.
    Synth(SynthArgs),
    /// Build training targets for an annotated scene.
    Targets(TargetsArgs),
    /// Score predicted instances against a ground-truth scene.
    Eval(EvalArgs),
    /// Render a label map as a color PPM image.
    Overlay(OverlayArgs),
    /// Time pixel assignment over a sweep of map sizes and instance counts.
    Bench(BenchArgs),
}

fn unit_interval(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if (0.0..=1.0).contains(&v) {
        Ok(v)
    } else {
        Err(format!("{v} is outside [0, 1]"))
    }
}

fn positive(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if v.is_finite() && v > 0.0 {
        Ok(v)
    } else {
        Err(format!("{v} must be a positive finite number"))
    }
}

fn non_negative(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if v.is_finite() && v >= 0.0 {
        Ok(v)
    } else {
        Err(format!("{v} must be a non-negative finite number"))
    }
}

#[derive(Debug, Clone, Args)]
pub struct AnchorArgs {
    #[arg(long, default_value_t = 96.0, value_parser = positive)]
    pub anchor_scale: f64,
    /// Height / width ratio of the anchor.
    #[arg(long, default_value_t = 1.5, value_parser = positive)]
    pub anchor_aspect: f64,
}

impl AnchorArgs {
    fn config(&self) -> Result<AnchorConfig, CliError> {
        AnchorConfig::new(self.anchor_scale, self.anchor_aspect).map_err(|e| CliError::Invalid(e.to_string()))
    }
}

#[derive(Debug, Clone, Args)]
pub struct GroupArgs {
    #[arg(long)]
    pub prob: PathBuf,
    #[arg(long)]
    pub offsets: PathBuf,
    #[arg(long)]
    pub out_json: PathBuf,
    #[arg(long)]
    pub out_labels: PathBuf,
    /// Peak confidence threshold.
    #[arg(long, default_value_t = 0.6, value_parser = unit_interval)]
    pub tc: f64,
    #[arg(long, default_value_t = 0.4, value_parser = unit_interval)]
    pub nms_iou: f64,
    /// Minimum IoU between a pixel's box and its global box.
    #[arg(long, default_value_t = 0.5, value_parser = unit_interval)]
    pub tiou: f64,
    #[arg(long, default_value_t = 0.5, value_parser = unit_interval)]
    pub seg_threshold: f64,
    #[arg(long, default_value_t = 20, value_parser = clap::value_parser!(u32).range(1..))]
    pub max_det: u32,
    #[command(flatten)]
    pub anchor: AnchorArgs,
    /// Long side, in pixels, of the network input the maps were computed
    /// from. The anchor is rescaled to map resolution accordingly.
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..))]
    pub resize_long_side: Option<u32>,
    /// u8 DTEN mask of pixels to leave unassigned (e.g. crowd regions).
    #[arg(long)]
    pub exclude: Option<PathBuf>,
    #[arg(long)]
    pub parallel: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ShapeArg {
    Rectangle,
    Ellipse,
}

impl From<ShapeArg> for ShapeKind {
    fn from(s: ShapeArg) -> Self {
        match s {
            ShapeArg::Rectangle => ShapeKind::Rectangle,
            ShapeArg::Ellipse => ShapeKind::Ellipse,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub height: usize,
    #[arg(long)]
    pub width: usize,
    #[arg(long)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = ShapeArg::Ellipse)]
    pub shape: ShapeArg,
    #[arg(long, default_value_t = 0.0, value_parser = non_negative)]
    pub prob_noise: f64,
    #[arg(long, default_value_t = 0.0, value_parser = non_negative)]
    pub offset_noise: f64,
    #[arg(long, default_value_t = 0.0, value_parser = unit_interval)]
    pub flip_rate: f64,
    /// Keep this many background pixels between instances.
    #[arg(long)]
    pub min_separation: Option<usize>,
    /// Reject scenes with a pair of boxes at or above this IoU.
    #[arg(long, value_parser = unit_interval)]
    pub max_box_iou: Option<f64>,
    #[command(flatten)]
    pub anchor: AnchorArgs,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct TargetsArgs {
    #[arg(long)]
    pub scene: PathBuf,
    #[command(flatten)]
    pub anchor: AnchorArgs,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub instances: PathBuf,
    #[arg(long)]
    pub scene: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct OverlayArgs {
    #[arg(long)]
    pub labels: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct BenchArgs {
    #[arg(long, value_delimiter = ',', default_values_t = [128usize, 256, 384, 512])]
    pub sizes: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = [16usize, 48, 128])]
    pub instances: Vec<usize>,
    #[arg(long, default_value_t = 7, value_parser = clap::value_parser!(u32).range(5..))]
    pub repeats: u32,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub parallel: bool,
    /// CSV destination; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// One detection in `instances.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub id: u32,
    pub pixel_count: usize,
    #[serde(flatten)]
    pub prediction: PredictionRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstancesDocument {
    pub height: usize,
    pub width: usize,
    pub instances: Vec<InstanceRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Metrics {
    #[serde(rename = "AP")]
    pub ap: f64,
    #[serde(rename = "AP50")]
    pub ap50: f64,
    #[serde(rename = "AP75")]
    pub ap75: f64,
    #[serde(rename = "AR1")]
    pub ar1: f64,
    #[serde(rename = "AR10")]
    pub ar10: f64,
    #[serde(rename = "AR100")]
    pub ar100: f64,
    pub per_threshold: Vec<ThresholdAp>,
}

pub fn run(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Group(a) => cmd_group(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Targets(a) => cmd_targets(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Overlay(a) => cmd_overlay(a),
        Command::Bench(a) => cmd_bench(a),
    }
}

fn check_input(path: &Path) -> Result<(), CliError> {
    match fs::metadata(path) {
        Ok(m) if m.is_file() => Ok(()),
        Ok(_) => Err(CliError::io(path, "not a regular file")),
        Err(e) => Err(CliError::io(path, e)),
    }
}

fn check_output(path: &Path) -> Result<(), CliError> {
    let parent = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    if !parent.is_dir() {
        return Err(CliError::io(path, "parent directory does not exist"));
    }
    if path.is_dir() {
        return Err(CliError::io(path, "is a directory"));
    }
    Ok(())
}

fn prepare_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn load<M: DtenMap>(path: &Path) -> Result<M, CliError> {
    M::load(path).map_err(|e| CliError::map(path, e))
}

fn save<M: DtenMap>(map: &M, path: &Path) -> Result<(), CliError> {
    map.save(path).map_err(|e| CliError::map(path, e))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| CliError::invalid(path, e))
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<(), CliError> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| CliError::invalid(path, e))?;
    bytes.push(b'\n');
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

fn read_scene(path: &Path) -> Result<Scene, CliError> {
    let doc: AnnotationDocument = read_json(path)?;
    Scene::from_document(&doc).map_err(|e| CliError::invalid(path, e))
}

fn cmd_group(a: &GroupArgs) -> Result<(), CliError> {
    check_input(&a.prob)?;
    check_input(&a.offsets)?;
    if let Some(ex) = &a.exclude {
        check_input(ex)?;
    }
    check_output(&a.out_json)?;
    check_output(&a.out_labels)?;

    let prob: ProbMap = load(&a.prob)?;
    let offsets: OffsetMap = load(&a.offsets)?;
    let exclude: Option<BinaryMask> = a.exclude.as_deref().map(load).transpose()?;

    let mut anchor = a.anchor.config()?;
    if let Some(n) = a.resize_long_side {
        let long = prob.height().max(prob.width()) as f64;
        anchor = AnchorConfig::new(anchor.scale() * long / n as f64, anchor.aspect())
            .map_err(|e| CliError::Invalid(e.to_string()))?;
    }
    let cfg = GroupingConfig {
        t_c: a.tc,
        nms_iou: a.nms_iou,
        t_iou: a.tiou,
        seg_threshold: a.seg_threshold,
        max_detections: a.max_det as usize,
        anchor,
        parallel: a.parallel,
    };
    let invalid = |e: crate::grouping::GroupingError| CliError::Invalid(e.to_string());
    let global: Vec<_> = select_global_boxes(&prob, &offsets, &cfg)
        .map_err(invalid)?
        .into_iter()
        .map(|(b, _)| b)
        .collect();
    let result = assign_pixels_excluding(&prob, &offsets, &global, &cfg, exclude.as_ref()).map_err(invalid)?;

    let instances = result
        .detections
        .iter()
        .zip(predictions_from_grouping(&result))
        .map(|(d, p)| InstanceRecord { id: d.instance_id, pixel_count: d.pixel_count, prediction: (&p).into() })
        .collect();
    let doc = InstancesDocument { height: prob.height(), width: prob.width(), instances };
    write_json(&doc, &a.out_json)?;
    save(&result.labels, &a.out_labels)
}

fn cmd_synth(a: &SynthArgs) -> Result<(), CliError> {
    prepare_dir(&a.out_dir)?;
    let anchor = a.anchor.config()?;
    let generator = SceneGenerator {
        min_separation: a.min_separation,
        max_box_iou: a.max_box_iou,
        ..SceneGenerator::for_canvas(a.height, a.width)
    };
    let invalid = |e: crate::synth::SynthError| CliError::Invalid(e.to_string());
    let scene = generator.generate(a.height, a.width, a.n, a.shape.into(), a.seed).map_err(invalid)?;
    let noise = NoiseSpec { prob_noise_sd: a.prob_noise, offset_noise_sd: a.offset_noise, flip_rate: a.flip_rate };
    // Separate stream for the noise so it does not replay the placement draws.
    let noise_seed = a.seed ^ 0x9E37_79B9_7F4A_7C15;
    let (prob, offsets) = oracle_outputs(&scene, &noise, &anchor, noise_seed).map_err(invalid)?;

    write_json(&scene.to_document(), &a.out_dir.join("scene.json"))?;
    save(&prob, &a.out_dir.join("prob.dten"))?;
    save(&offsets, &a.out_dir.join("offsets.dten"))
}

fn cmd_targets(a: &TargetsArgs) -> Result<(), CliError> {
    check_input(&a.scene)?;
    prepare_dir(&a.out_dir)?;
    let anchor = a.anchor.config()?;
    let scene = read_scene(&a.scene)?;
    let t = build_targets(&scene.instances, scene.height, scene.width, &anchor)
        .map_err(|e| CliError::invalid(&a.scene, e))?;
    save(&t.seg, &a.out_dir.join("seg.dten"))?;
    save(&t.offsets, &a.out_dir.join("offsets.dten"))?;
    save(&t.offset_mask, &a.out_dir.join("mask.dten"))
}

fn cmd_eval(a: &EvalArgs) -> Result<(), CliError> {
    check_input(&a.instances)?;
    check_input(&a.scene)?;
    check_output(&a.out)?;
    let scene = read_scene(&a.scene)?;
    let doc: InstancesDocument = read_json(&a.instances)?;
    if (doc.height, doc.width) != (scene.height, scene.width) {
        return Err(CliError::invalid(
            &a.instances,
            format!("{}x{} does not match scene {}x{}", doc.height, doc.width, scene.height, scene.width),
        ));
    }
    let predictions = doc
        .instances
        .into_iter()
        .map(|r| r.prediction.into_prediction(doc.height, doc.width))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| CliError::invalid(&a.instances, e))?;
    let params = EvalParams::default();
    let res = evaluate(&predictions, &scene, &params).map_err(|e| CliError::invalid(&a.scene, e))?;
    let metric = |v: Option<f64>| v.unwrap_or(f64::NAN);
    let metrics = Metrics {
        ap: res.ap_mean,
        ap50: metric(res.ap_at(0.5)),
        ap75: metric(res.ap_at(0.75)),
        ar1: metric(res.ar_at(1)),
        ar10: metric(res.ar_at(10)),
        ar100: metric(res.ar_at(100)),
        per_threshold: res.ap,
    };
    write_json(&metrics, &a.out)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Overlay color of instance `id`; black is reserved for background.
pub fn instance_color(id: u32) -> [u8; 3] {
    if id == 0 {
        return [0, 0, 0];
    }
    let h = splitmix64(id as u64).to_le_bytes();
    [h[0] | 0x40, h[1] | 0x40, h[2] | 0x40]
}

/// Binary PPM (P6) rendering of a label map.
pub fn render_ppm(labels: &InstanceLabelMap) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", labels.width(), labels.height()).into_bytes();
    out.reserve(labels.data().len() * 3);
    for &id in labels.data() {
        out.extend_from_slice(&instance_color(id));
    }
    out
}

fn cmd_overlay(a: &OverlayArgs) -> Result<(), CliError> {
    check_input(&a.labels)?;
    check_output(&a.out)?;
    let labels: InstanceLabelMap = load(&a.labels)?;
    fs::write(&a.out, render_ppm(&labels)).map_err(|e| CliError::io(&a.out, e))
}

fn cmd_bench(a: &BenchArgs) -> Result<(), CliError> {
    if let Some(out) = &a.out {
        check_output(out)?;
    }
    let sweep = SweepConfig {
        sizes: a.sizes.clone(),
        instance_counts: a.instances.clone(),
        repeats: a.repeats as usize,
        seed: a.seed,
        parallel: a.parallel,
        ..SweepConfig::default()
    };
    let (records, fit) = run_sweep(&sweep).map_err(|e| CliError::Invalid(e.to_string()))?;
    match &a.out {
        Some(path) => {
            let file = fs::File::create(path).map_err(|e| CliError::io(path, e))?;
            write_csv(&records, BufWriter::new(file)).map_err(|e| CliError::io(path, e))?;
        }
        None => write_csv(&records, io::stdout().lock()).map_err(|e| CliError::Io(e.to_string()))?,
    }
    let mut err = io::stderr().lock();
    // Diagnostics only; a closed stderr is not worth failing over.
    let _ = writeln!(
        err,
        "fit: time = {:.3e} * Np*M + {:.3e} s, R^2 = {:.4} over {} points",
        fit.slope, fit.intercept, fit.r_squared, fit.points
    );
    Ok(())
}
