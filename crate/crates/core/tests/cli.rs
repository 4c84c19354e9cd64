use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use bbe_core::cli::InstancesDocument;
use bbe_core::maps::{DtenMap, InstanceLabelMap, ProbMap};
use bbe_core::synth::Scene;
use bbe_core::targets::AnnotationDocument;
use tempfile::TempDir;

fn bbe(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bbe")).args(args).output().expect("spawn bbe")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth(dir: &Path, extra: &[&str]) {
    let mut args = vec!["synth", "--height", "120", "--width", "160", "--n", "5", "--seed", "9", "--out-dir", s(dir)];
    args.extend_from_slice(extra);
    let out = bbe(&args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

fn group(dir: &Path, extra: &[&str]) -> (Output, PathBuf, PathBuf) {
    let (json, labels) = (dir.join("instances.json"), dir.join("labels.dten"));
    let (prob, offsets) = (dir.join("prob.dten"), dir.join("offsets.dten"));
    let mut args = vec![
        "group", "--prob", s(&prob), "--offsets", s(&offsets), "--out-json", s(&json), "--out-labels", s(&labels),
    ];
    args.extend_from_slice(extra);
    (bbe(&args), json, labels)
}

fn read_scene(path: &Path) -> Scene {
    let doc: AnnotationDocument = serde_json::from_slice(&fs::read(path).unwrap()).unwrap();
    Scene::from_document(&doc).unwrap()
}

#[test]
fn separated_oracle_scene_is_recovered() {
    let dir = TempDir::new().unwrap();
    synth(dir.path(), &["--min-separation", "1", "--max-box-iou", "0.35"]);
    let (out, json, labels) = group(dir.path(), &[]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let scene = read_scene(&dir.path().join("scene.json"));
    let labels = InstanceLabelMap::load(&labels).unwrap();
    assert_eq!(labels.num_instances() as usize, scene.instances.len());
    for inst in &scene.instances {
        assert!((1..=labels.num_instances()).any(|id| labels.instance_mask(id) == *inst.mask()));
    }
    let doc: InstancesDocument = serde_json::from_slice(&fs::read(json).unwrap()).unwrap();
    assert_eq!((doc.height, doc.width), (120, 160));
    let ids: Vec<u32> = doc.instances.iter().map(|r| r.id).collect();
    assert_eq!(ids, (1..=scene.instances.len() as u32).collect::<Vec<_>>());
    assert!(doc.instances.windows(2).all(|w| w[0].prediction.score >= w[1].prediction.score));

    let metrics = dir.path().join("metrics.json");
    let out = bbe(&[
        "eval", "--instances", s(&dir.path().join("instances.json")), "--scene", s(&dir.path().join("scene.json")),
        "--out", s(&metrics),
    ]);
    assert!(out.status.success());
    let m: serde_json::Value = serde_json::from_slice(&fs::read(metrics).unwrap()).unwrap();
    for key in ["AP", "AP50", "AP75", "AR100"] {
        assert_eq!(m[key], 1.0, "{key}");
    }
}

#[test]
fn outputs_are_byte_identical_across_runs() {
    let dirs: Vec<TempDir> = (0..2).map(|_| TempDir::new().unwrap()).collect();
    for d in &dirs {
        synth(d.path(), &["--prob-noise", "0.1", "--offset-noise", "0.05", "--flip-rate", "0.01"]);
        assert!(group(d.path(), &[]).0.status.success());
    }
    for f in ["scene.json", "prob.dten", "offsets.dten", "instances.json", "labels.dten"] {
        assert_eq!(fs::read(dirs[0].path().join(f)).unwrap(), fs::read(dirs[1].path().join(f)).unwrap(), "{f}");
    }
}

#[test]
fn parallel_flag_does_not_change_output() {
    let dir = TempDir::new().unwrap();
    synth(dir.path(), &["--offset-noise", "0.02"]);
    let (_, json, labels) = group(dir.path(), &[]);
    let (serial_json, serial_labels) = (fs::read(&json).unwrap(), fs::read(&labels).unwrap());
    let (out, json, labels) = group(dir.path(), &["--parallel"]);
    assert!(out.status.success());
    assert_eq!(fs::read(json).unwrap(), serial_json);
    assert_eq!(fs::read(labels).unwrap(), serial_labels);
}

#[test]
fn resize_long_side_rescales_the_anchor() {
    let dir = TempDir::new().unwrap();
    // Maps encoded against a 48-pixel anchor read like a 96-pixel anchor on
    // an input twice as large as the maps.
    synth(dir.path(), &["--min-separation", "1", "--max-box-iou", "0.35", "--anchor-scale", "48"]);
    let scene = read_scene(&dir.path().join("scene.json"));
    let (out, _, labels) = group(dir.path(), &["--resize-long-side", "320"]);
    assert!(out.status.success());
    let labels = InstanceLabelMap::load(&labels).unwrap();
    for inst in &scene.instances {
        assert!((1..=labels.num_instances()).any(|id| labels.instance_mask(id) == *inst.mask()));
    }
}

#[test]
fn tc_out_of_range_exits_2() {
    let dir = TempDir::new().unwrap();
    synth(dir.path(), &[]);
    let (out, json, _) = group(dir.path(), &["--tc", "1.1"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!json.exists());
}

#[test]
fn missing_input_exits_1() {
    let dir = TempDir::new().unwrap();
    let (out, _, _) = group(dir.path(), &[]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn corrupt_dten_exits_2() {
    let dir = TempDir::new().unwrap();
    synth(dir.path(), &[]);
    let prob = dir.path().join("prob.dten");
    let mut bytes = fs::read(&prob).unwrap();
    bytes[0] = b'X';
    fs::write(&prob, bytes).unwrap();
    let (out, _, _) = group(dir.path(), &[]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn offsets_shape_mismatch_exits_2() {
    let dir = TempDir::new().unwrap();
    synth(dir.path(), &[]);
    ProbMap::zeros(10, 10).save(&dir.path().join("prob.dten")).unwrap();
    let (out, _, _) = group(dir.path(), &[]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn zero_detections_is_success() {
    let dir = TempDir::new().unwrap();
    let out = bbe(&["synth", "--height", "40", "--width", "40", "--n", "0", "--out-dir", s(dir.path())]);
    assert!(out.status.success());
    let (out, json, labels) = group(dir.path(), &[]);
    assert!(out.status.success());
    let doc: InstancesDocument = serde_json::from_slice(&fs::read(json).unwrap()).unwrap();
    assert!(doc.instances.is_empty());
    assert_eq!(InstanceLabelMap::load(&labels).unwrap().num_instances(), 0);
}

#[test]
fn exclude_mask_leaves_pixels_unassigned() {
    let dir = TempDir::new().unwrap();
    synth(dir.path(), &["--min-separation", "1", "--max-box-iou", "0.35"]);
    let out = bbe(&["targets", "--scene", s(&dir.path().join("scene.json")), "--out-dir", s(&dir.path().join("t"))]);
    assert!(out.status.success());
    // Excluding every foreground pixel empties the result.
    let (out, _, labels) = group(dir.path(), &["--exclude", s(&dir.path().join("t/mask.dten"))]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(InstanceLabelMap::load(&labels).unwrap().num_instances(), 0);
}

#[test]
fn targets_match_synth_outputs() {
    let dir = TempDir::new().unwrap();
    synth(dir.path(), &[]);
    let t = dir.path().join("t");
    let out = bbe(&["targets", "--scene", s(&dir.path().join("scene.json")), "--out-dir", s(&t)]);
    assert!(out.status.success());
    assert_eq!(fs::read(t.join("seg.dten")).unwrap(), fs::read(dir.path().join("prob.dten")).unwrap());
    assert_eq!(fs::read(t.join("offsets.dten")).unwrap(), fs::read(dir.path().join("offsets.dten")).unwrap());
}

fn overlay(labels: &InstanceLabelMap, dir: &Path) -> Vec<u8> {
    let (input, output) = (dir.join("labels.dten"), dir.join("out.ppm"));
    labels.save(&input).unwrap();
    let out = bbe(&["overlay", "--labels", s(&input), "--out", s(&output)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    fs::read(output).unwrap()
}

fn ppm_colors(ppm: &[u8], width: usize, height: usize) -> HashSet<[u8; 3]> {
    let header = format!("P6\n{width} {height}\n255\n");
    assert!(ppm.starts_with(header.as_bytes()));
    let pixels = &ppm[header.len()..];
    assert_eq!(pixels.len(), width * height * 3);
    pixels.chunks(3).map(|c| [c[0], c[1], c[2]]).collect()
}

#[test]
fn overlay_all_zero_is_black() {
    let dir = TempDir::new().unwrap();
    let ppm = overlay(&InstanceLabelMap::new(4, 5, vec![0; 20]).unwrap(), dir.path());
    assert_eq!(ppm_colors(&ppm, 5, 4), HashSet::from([[0, 0, 0]]));
}

#[test]
fn overlay_two_instances_three_colors_deterministic() {
    let dir = TempDir::new().unwrap();
    let labels = InstanceLabelMap::new(3, 4, vec![0, 1, 1, 0, 0, 2, 2, 0, 0, 0, 1, 2]).unwrap();
    let first = overlay(&labels, dir.path());
    assert_eq!(ppm_colors(&first, 4, 3).len(), 3);
    assert_eq!(overlay(&labels, dir.path()), first);
}

#[test]
fn overlay_rejects_non_contiguous_labels() {
    let dir = TempDir::new().unwrap();
    let input = dir.path().join("labels.dten");
    // Hand-built u32 tensor with ids {0, 2}: id 1 missing.
    let mut bytes = b"DTEN".to_vec();
    bytes.extend_from_slice(&[1, 2]);
    bytes.extend_from_slice(&2u16.to_le_bytes());
    bytes.extend_from_slice(&1u32.to_le_bytes());
    bytes.extend_from_slice(&2u32.to_le_bytes());
    bytes.extend_from_slice(&0u32.to_le_bytes());
    bytes.extend_from_slice(&2u32.to_le_bytes());
    fs::write(&input, bytes).unwrap();
    let out = bbe(&["overlay", "--labels", s(&input), "--out", s(&dir.path().join("o.ppm"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn eval_dimension_mismatch_exits_2() {
    let dir = TempDir::new().unwrap();
    synth(dir.path(), &[]);
    assert!(group(dir.path(), &[]).0.status.success());
    let other = TempDir::new().unwrap();
    let out = bbe(&["synth", "--height", "50", "--width", "50", "--n", "1", "--out-dir", s(other.path())]);
    assert!(out.status.success());
    let out = bbe(&[
        "eval", "--instances", s(&dir.path().join("instances.json")), "--scene", s(&other.path().join("scene.json")),
        "--out", s(&dir.path().join("m.json")),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn bench_writes_csv() {
    let dir = TempDir::new().unwrap();
    let csv = dir.path().join("bench.csv");
    let out = bbe(&["bench", "--sizes", "64,96", "--instances", "2,4", "--repeats", "5", "--out", s(&csv)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "height,width,n_instances,n_person_pixels,wall_time,repeats");
    assert_eq!(lines.len(), 5);
    assert!(String::from_utf8_lossy(&out.stderr).contains("R^2"));
}

#[test]
fn bench_rejects_too_few_repeats() {
    assert_eq!(bbe(&["bench", "--repeats", "3"]).status.code(), Some(2));
}
