use bbe_core::eval::{evaluate, predictions_from_grouping, EvalParams};
use bbe_core::grouping::{group, GroupingConfig, GroupingResult};
use bbe_core::maps::BinaryMask;
use bbe_core::synth::{generate_scene, oracle_outputs, NoiseSpec, Scene, ShapeKind};
use bbe_core::targets::InstanceAnnotation;

fn noisy_run(cfg: &GroupingConfig) -> GroupingResult {
    let scene = generate_scene(200, 240, 8, ShapeKind::Ellipse, 21).unwrap();
    let noise = NoiseSpec { prob_noise_sd: 0.1, offset_noise_sd: 0.03, flip_rate: 0.0 };
    let (prob, off) = oracle_outputs(&scene, &noise, &cfg.anchor, 4).unwrap();
    group(&prob, &off, cfg).unwrap()
}

#[test]
fn result_independent_of_thread_count() {
    let serial = noisy_run(&GroupingConfig::default());
    let parallel_cfg = GroupingConfig { parallel: true, ..GroupingConfig::default() };
    for threads in [1, 2, 3, 8] {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        let res = pool.install(|| noisy_run(&parallel_cfg));
        assert_eq!(res, serial, "{threads} threads");
    }
}

#[test]
fn crowd_regions_are_ignored_in_evaluation() {
    // A perfectly recovered person next to a crowd blob: the detection that
    // covers the crowd must not count as a false positive.
    let (h, w) = (80, 120);
    let person = BinaryMask::from_fn(h, w, |r, c| (10..50).contains(&r) && (10..30).contains(&c));
    let crowd = BinaryMask::from_fn(h, w, |r, c| (20..70).contains(&r) && (60..110).contains(&c));
    let scene = Scene {
        height: h,
        width: w,
        instances: vec![
            InstanceAnnotation::new(1, person, false).unwrap(),
            InstanceAnnotation::new(2, crowd, true).unwrap(),
        ],
        seed: 0,
    };
    let cfg = GroupingConfig::default();
    let (prob, off) = oracle_outputs(&scene, &NoiseSpec::NONE, &cfg.anchor, 0).unwrap();
    let res = group(&prob, &off, &cfg).unwrap();
    assert_eq!(res.detections.len(), 2);
    let ev = evaluate(&predictions_from_grouping(&res), &scene, &EvalParams::default()).unwrap();
    assert_eq!(ev.ap_mean, 1.0);
}

#[test]
fn touching_flat_instances_can_merge() {
    // Two adjacent rectangles form one flat plateau with a single peak, so
    // only one of them can be proposed.
    let (h, w) = (60, 80);
    let left = BinaryMask::from_fn(h, w, |r, c| (10..50).contains(&r) && (10..30).contains(&c));
    let right = BinaryMask::from_fn(h, w, |r, c| (10..50).contains(&r) && (30..50).contains(&c));
    let scene = Scene {
        height: h,
        width: w,
        instances: vec![InstanceAnnotation::new(1, left, false).unwrap(), InstanceAnnotation::new(2, right, false).unwrap()],
        seed: 0,
    };
    let cfg = GroupingConfig::default();
    let (prob, off) = oracle_outputs(&scene, &NoiseSpec::NONE, &cfg.anchor, 0).unwrap();
    let res = group(&prob, &off, &cfg).unwrap();
    assert_eq!(res.detections.len(), 1);
    let ev = evaluate(&predictions_from_grouping(&res), &scene, &EvalParams::default()).unwrap();
    assert!(ev.ap_mean < 1.0);
}
