//! Timing harness for the pixel-assignment kernel.
//!
//! Each sweep point builds an oracle scene, hands the ground-truth boxes to
//! [`assign_pixels`] as the global boxes, and records the median wall time
//! over `repeats` runs after one discarded warm-up. Scene generation and map
//! construction are outside the timed region. A least-squares line
//! `time = slope * (N_p * M) + intercept` summarizes the sweep.

use std::io::Write;
use std::time::Instant;

use thiserror::Error;

use crate::geometry::BBox;
use crate::grouping::{assign_pixels, GroupingConfig, GroupingError};
use crate::maps::{OffsetMap, ProbMap};
use crate::synth::{oracle_outputs, NoiseSpec, SceneGenerator, ShapeKind, SynthError};

pub const CSV_HEADER: &str = "height,width,n_instances,n_person_pixels,wall_time,repeats";

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("at least 5 repeats are required, got {0}")]
    TooFewRepeats(usize),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Grouping(#[from] GroupingError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRecord {
    pub height: usize,
    pub width: usize,
    pub n_instances: usize,
    pub n_person_pixels: usize,
    /// Median seconds over `repeats`.
    pub wall_time: f64,
    pub repeats: usize,
}

impl BenchRecord {
    /// `N_p * M`, the regressor of the complexity fit.
    pub fn work(&self) -> f64 {
        (self.n_person_pixels * self.n_instances) as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitReport {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub points: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    /// Square canvas sides.
    pub sizes: Vec<usize>,
    pub instance_counts: Vec<usize>,
    pub repeats: usize,
    pub seed: u64,
    /// Fraction of the canvas the instances should roughly cover.
    pub coverage: f64,
    pub parallel: bool,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            sizes: vec![128, 256, 384, 512],
            instance_counts: vec![16, 48, 128],
            repeats: 7,
            seed: 0,
            coverage: 0.25,
            parallel: false,
        }
    }
}

/// Ordinary least squares of `ys` on `xs`.
pub fn fit_linear(xs: &[f64], ys: &[f64]) -> FitReport {
    let n = xs.len().min(ys.len());
    let nf = n as f64;
    let mx = xs[..n].iter().sum::<f64>() / nf;
    let my = ys[..n].iter().sum::<f64>() / nf;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for i in 0..n {
        let (dx, dy) = (xs[i] - mx, ys[i] - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let intercept = my - slope * mx;
    let ss_res: f64 = (0..n).map(|i| (ys[i] - (slope * xs[i] + intercept)).powi(2)).sum();
    let r_squared = if syy > 0.0 { 1.0 - ss_res / syy } else { 1.0 };
    FitReport { slope, intercept, r_squared, points: n }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Median seconds of `assign_pixels` over `repeats` runs, after a warm-up.
pub fn time_assignment(
    prob: &ProbMap,
    offsets: &OffsetMap,
    global: &[BBox],
    cfg: &GroupingConfig,
    repeats: usize,
) -> Result<f64, BenchError> {
    if repeats < 5 {
        return Err(BenchError::TooFewRepeats(repeats));
    }
    std::hint::black_box(assign_pixels(prob, offsets, global, cfg)?);
    let mut times = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let start = Instant::now();
        let res = assign_pixels(prob, offsets, global, cfg)?;
        times.push(start.elapsed().as_secs_f64());
        std::hint::black_box(res);
    }
    Ok(median(times))
}

/// Oracle maps for a `size x size` scene with `n` rectangles covering
/// roughly `coverage` of the canvas, plus the ground-truth boxes.
pub fn bench_scene(
    size: usize,
    n: usize,
    coverage: f64,
    seed: u64,
    cfg: &GroupingConfig,
) -> Result<(ProbMap, OffsetMap, Vec<BBox>), BenchError> {
    let mean_area = coverage * (size * size) as f64 / n.max(1) as f64;
    let w = (mean_area / 1.5).sqrt();
    let lo = ((w * 0.8).round() as usize).clamp(2, size);
    let hi = ((w * 1.2).round() as usize).clamp(lo, size);
    let gen = SceneGenerator {
        width_range: (lo, hi),
        aspect_range: (1.3, 1.7),
        min_visible: 0.3,
        max_retries: 2000,
        ..SceneGenerator::for_canvas(size, size)
    };
    let scene = gen.generate(size, size, n, ShapeKind::Rectangle, seed)?;
    let (prob, offsets) = oracle_outputs(&scene, &NoiseSpec::NONE, &cfg.anchor, seed)?;
    let boxes = scene.instances.iter().map(|a| *a.bbox()).collect();
    Ok((prob, offsets, boxes))
}

pub fn run_sweep(sweep: &SweepConfig) -> Result<(Vec<BenchRecord>, FitReport), BenchError> {
    let cfg = GroupingConfig { parallel: sweep.parallel, ..Default::default() };
    let mut records = Vec::new();
    for (i, &size) in sweep.sizes.iter().enumerate() {
        for (j, &m) in sweep.instance_counts.iter().enumerate() {
            let seed = sweep.seed.wrapping_add((i * sweep.instance_counts.len() + j) as u64);
            let (prob, offsets, boxes) = bench_scene(size, m, sweep.coverage, seed, &cfg)?;
            let n_person_pixels = prob.data().iter().filter(|&&p| p as f64 >= cfg.seg_threshold).count();
            let wall_time = time_assignment(&prob, &offsets, &boxes, &cfg, sweep.repeats)?;
            records.push(BenchRecord {
                height: size,
                width: size,
                n_instances: m,
                n_person_pixels,
                wall_time,
                repeats: sweep.repeats,
            });
        }
    }
    let xs: Vec<f64> = records.iter().map(BenchRecord::work).collect();
    let ys: Vec<f64> = records.iter().map(|r| r.wall_time).collect();
    let fit = fit_linear(&xs, &ys);
    Ok((records, fit))
}

/// Assignment time against the first `m` and then all `2m` ground-truth boxes
/// of one `size x size` scene, so `N_p` is identical for both timings.
pub fn box_doubling(size: usize, m: usize, seed: u64, repeats: usize) -> Result<(f64, f64), BenchError> {
    let cfg = GroupingConfig::default();
    let (prob, offsets, boxes) = bench_scene(size, 2 * m, 0.25, seed, &cfg)?;
    let single = time_assignment(&prob, &offsets, &boxes[..m], &cfg, repeats)?;
    let double = time_assignment(&prob, &offsets, &boxes, &cfg, repeats)?;
    Ok((single, double))
}

pub fn write_csv<W: Write>(records: &[BenchRecord], mut out: W) -> std::io::Result<()> {
    writeln!(out, "{CSV_HEADER}")?;
    for r in records {
        writeln!(
            out,
            "{},{},{},{},{:.9},{}",
            r.height, r.width, r.n_instances, r.n_person_pixels, r.wall_time, r.repeats
        )?;
    }
    out.flush()
}
