use std::path::Path;

use endomap::eval::{PointCloud, Trajectory};
use endomap::imgcore::io::{load_image, read_pfm};
use endomap::pipeline::*;
use endomap::synth::*;

fn write_pan(dir: &Path, n: usize, deg: &DegradationConfig) -> SyntheticScene {
    let scene = SyntheticScene::bumps(320, 200, 8, 3);
    let views = pan_trajectory(n, [10.0, 20.0], [5.0, 0.0]);
    let seq = generate_sequence(&scene, &views, deg, (96, 96), 5).unwrap();
    write_sequence(dir, &scene, deg, &seq, 5).unwrap();
    scene
}

fn config(scene: &SyntheticScene, deg: &DegradationConfig) -> PipelineConfig {
    PipelineConfig {
        intrinsics: Some(deg.intrinsics(96, 96)),
        units_per_px: scene.units_per_px,
        ..PipelineConfig::default()
    }
}

#[test]
fn pan_sequence_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let deg = DegradationConfig::all();
    let scene = write_pan(dir.path(), 30, &deg);
    let out_dir = dir.path().join("out");
    let out = run_pipeline(&config(&scene, &deg), dir.path(), &out_dir).unwrap();
    for name in ARTIFACTS {
        assert!(out_dir.join(name).is_file(), "{name} missing");
    }
    let mosaic = load_image(&out_dir.join("mosaic.png")).unwrap();
    assert_eq!(
        mosaic.dims(),
        (out.metrics.mosaic_width, out.metrics.mosaic_height)
    );
    let depth = read_pfm(&out_dir.join("depth.pfm")).unwrap();
    assert_eq!(depth.dims(), mosaic.dims());
    let cloud = PointCloud::read_ply(&out_dir.join("cloud.ply")).unwrap();
    assert_eq!(cloud.len(), out.metrics.cloud_points);
    let poses = Trajectory::read_tum(&out_dir.join("poses.txt")).unwrap();
    assert_eq!(poses.len(), out.metrics.keyframes.len());
    assert!(
        out.metrics.keyframes.len() >= 5,
        "{:?}",
        out.metrics.keyframes
    );
    let text = std::fs::read_to_string(out_dir.join("metrics.json")).unwrap();
    let parsed: PipelineMetrics = serde_json::from_str(&text).unwrap();
    assert_eq!(parsed.version, METRICS_VERSION);
    let ev = parsed.evaluation.expect("ground truth was present");
    assert!(ev.ate_rmse_se3.unwrap() < 0.02 * parsed.trajectory_length.unwrap());
    assert!(ev.ade_rmse.unwrap().is_finite());
    for stage in [
        "preprocess",
        "keyframes",
        "register",
        "bundle_adjust",
        "compose",
        "sfs",
        "total",
    ] {
        assert!(parsed.timings_ms.contains_key(stage), "{stage}");
    }
    assert!(parsed.transfer_error_adjusted <= parsed.transfer_error_chained + 1e-9);
}

#[test]
fn identical_runs_give_identical_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let deg = DegradationConfig::all();
    let scene = write_pan(dir.path(), 12, &deg);
    let cfg = config(&scene, &deg);
    let strip = |p: &Path| {
        let mut v: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap();
        v.as_object_mut().unwrap().remove("timings_ms");
        v
    };
    run_pipeline(&cfg, dir.path(), &dir.path().join("a")).unwrap();
    run_pipeline(&cfg, dir.path(), &dir.path().join("b")).unwrap();
    assert_eq!(
        strip(&dir.path().join("a/metrics.json")),
        strip(&dir.path().join("b/metrics.json"))
    );
    assert_eq!(
        std::fs::read(dir.path().join("a/cloud.ply")).unwrap(),
        std::fs::read(dir.path().join("b/cloud.ply")).unwrap()
    );
}

#[test]
fn ablation_runs_every_combination() {
    let dir = tempfile::tempdir().unwrap();
    let deg = DegradationConfig::all();
    let scene = write_pan(dir.path(), 6, &deg);
    let cfg = config(&scene, &deg);
    let two = run_ablation(
        &cfg,
        dir.path(),
        &[AblationAxis::Rs],
        &dir.path().join("abl1"),
    )
    .unwrap();
    assert_eq!(two.rows.len(), 2);
    assert!(two
        .rows
        .iter()
        .all(|r| r.ate_rmse_se3.is_some() && r.ade_rmse.is_some()));
    let axes = [
        AblationAxis::Rs,
        AblationAxis::Undistort,
        AblationAxis::Devignette,
    ];
    let eight = run_ablation(&cfg, dir.path(), &axes, &dir.path().join("abl3")).unwrap();
    assert_eq!(eight.rows.len(), 8);
    let mut names: Vec<&str> = eight.rows.iter().map(|r| r.name.as_str()).collect();
    names.sort();
    names.dedup();
    assert_eq!(names.len(), 8);
    for r in &eight.rows {
        assert!(dir
            .path()
            .join("abl3")
            .join(&r.name)
            .join("metrics.json")
            .is_file());
    }
    assert!(dir.path().join("abl3/metrics.json").is_file());
}

#[test]
fn ablation_needs_ground_truth() {
    let dir = tempfile::tempdir().unwrap();
    let deg = DegradationConfig::default();
    let scene = write_pan(dir.path(), 3, &deg);
    std::fs::remove_file(dir.path().join("gt_traj.txt")).unwrap();
    let cfg = PipelineConfig {
        preprocess: endomap::preprocess::PreprocessConfig::disabled(),
        units_per_px: scene.units_per_px,
        ..PipelineConfig::default()
    };
    assert!(run_ablation(&cfg, dir.path(), &[AblationAxis::Rs], &dir.path().join("x")).is_err());
    let out = run_pipeline(&cfg, dir.path(), &dir.path().join("y")).unwrap();
    assert!(out.metrics.evaluation.is_none());
}
