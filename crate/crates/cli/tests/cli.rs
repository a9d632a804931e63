use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dinoreg_core::camera::CameraModel;
use dinoreg_core::dataset::{write_depth_png, DepthImage, FrameRecord, SceneEntry, SceneManifest, Split};
use dinoreg_core::features::{save_feature_map, FeatureProvider, SyntheticVisualProvider};
use dinoreg_core::geometry::io::{write_ply, PlyFormat};
use dinoreg_core::geometry::RigidTransform;
use dinoreg_core::synthetic::{synthetic_pair, SceneParams};
use serde_json::Value;

fn dinoreg(args: &[&str], dir: &Path, workers: usize) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dinoreg"))
        .args(args)
        .current_dir(dir)
        .env("DINOREG_WORKERS", workers.to_string())
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn assert_ok(o: &Output) {
    assert_eq!(code(o), 0, "stderr: {}", String::from_utf8_lossy(&o.stderr));
}

/// Synthetic config and identity-reduction weights in a fresh directory.
fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("cfg.json"), r#"{"profile": "synthetic"}"#).unwrap();
    let o = dinoreg(
        &["weights", "init", "--config", "cfg.json", "--mode", "identity-reduction", "--seed", "3", "--out", "w.bin"],
        dir.path(),
        1,
    );
    assert_ok(&o);
    dir
}

fn synthetic_pairs(dir: &Path, seeds: &[u64]) {
    let text: String = seeds.iter().map(|s| format!("{{\"synthetic\": {{\"seed\": {s}}}}}\n")).collect();
    std::fs::write(dir.join("pairs.jsonl"), text).unwrap();
}

fn bench(dir: &Path, out: &str, workers: usize, extra: &[&str]) -> Output {
    let mut args = vec!["benchmark", "--pairs", "pairs.jsonl", "--config", "cfg.json", "--weights", "w.bin", "--out", out];
    args.extend_from_slice(extra);
    dinoreg(&args, dir, workers)
}

fn json(path: PathBuf) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn weights_init_is_reproducible_across_processes() {
    let dir = workspace();
    let o = dinoreg(&["weights", "init", "--profile", "synthetic", "--mode", "identity-reduction", "--seed", "3", "--out", "again.bin"], dir.path(), 1);
    assert_ok(&o);
    let a = std::fs::read(dir.path().join("w.bin")).unwrap();
    let b = std::fs::read(dir.path().join("again.bin")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn benchmark_reports_are_byte_identical_across_runs() {
    let dir = workspace();
    synthetic_pairs(dir.path(), &[0, 1]);
    assert_ok(&bench(dir.path(), "a.json", 1, &[]));
    assert_ok(&bench(dir.path(), "b.json", 1, &[]));
    let a = std::fs::read(dir.path().join("a.json")).unwrap();
    let b = std::fs::read(dir.path().join("b.json")).unwrap();
    assert_eq!(a, b);
    assert_eq!(std::fs::read(dir.path().join("a.csv")).unwrap(), std::fs::read(dir.path().join("b.csv")).unwrap());

    // two workers: same floating aggregates within 1e-6
    assert_ok(&bench(dir.path(), "c.json", 2, &[]));
    let (ra, rc) = (json(dir.path().join("a.json")), json(dir.path().join("c.json")));
    for key in ["pir", "ir", "fmr", "rr", "rre_deg", "rte_m", "pose_recall"] {
        let x = ra["sections"][0]["summary"][key].as_f64().unwrap();
        let y = rc["sections"][0]["summary"][key].as_f64().unwrap();
        assert!((x - y).abs() <= 1e-6, "{key}: {x} vs {y}");
    }

    let report = ra;
    assert_eq!(report["sections"][0]["pairs"].as_array().unwrap().len(), 2);
    assert_eq!(report["config_hash"].as_str().unwrap().len(), 64);
    assert_eq!(report["weights_hash"].as_str().unwrap().len(), 64);
    let timing = json(dir.path().join("a.timing.json"));
    assert!(timing["sections"][0]["per_pair"][0]["total"].as_f64().unwrap() > 0.0);
    assert!(!String::from_utf8(a).unwrap().contains("\"timing\""));
}

#[test]
fn sigma_sweep_writes_one_section_per_level() {
    let dir = workspace();
    synthetic_pairs(dir.path(), &[2]);
    assert_ok(&bench(dir.path(), "sweep.json", 1, &["--noise-sigma", "0,5,10"]));
    assert_ok(&bench(dir.path(), "plain.json", 1, &[]));
    let sweep = json(dir.path().join("sweep.json"));
    let plain = json(dir.path().join("plain.json"));
    let sections = sweep["sections"].as_array().unwrap();
    let sigmas: Vec<f64> = sections.iter().map(|s| s["noise_sigma"].as_f64().unwrap()).collect();
    assert_eq!(sigmas, vec![0.0, 5.0, 10.0]);
    assert_eq!(sections[0]["pairs"], plain["sections"][0]["pairs"]);
    assert_eq!(sections[0]["summary"], plain["sections"][0]["summary"]);
    let csv = std::fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
}

#[test]
fn config_errors_exit_2() {
    let dir = workspace();
    synthetic_pairs(dir.path(), &[0]);
    std::fs::write(dir.path().join("bad.json"), r#"{"voxel_size": -1.0}"#).unwrap();
    let o = dinoreg(&["benchmark", "--pairs", "pairs.jsonl", "--config", "bad.json", "--weights", "w.bin", "--out", "r.json"], dir.path(), 1);
    assert_eq!(code(&o), 2);

    // standard-profile config against synthetic-sized weights
    std::fs::write(dir.path().join("std.json"), "{}").unwrap();
    let o = dinoreg(&["benchmark", "--pairs", "pairs.jsonl", "--config", "std.json", "--weights", "w.bin", "--out", "r.json"], dir.path(), 1);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("fusion."), "{}", String::from_utf8_lossy(&o.stderr));

    let o = bench(dir.path(), "r.json", 0, &[]);
    assert_eq!(code(&o), 2);
    let o = dinoreg(&["benchmark", "--pairs", "pairs.jsonl"], dir.path(), 1);
    assert_eq!(code(&o), 2);
}

#[test]
fn data_errors_exit_3() {
    let dir = workspace();
    std::fs::write(dir.path().join("pairs.jsonl"), "\n").unwrap();
    assert_eq!(code(&bench(dir.path(), "r.json", 1, &[])), 3);
    std::fs::write(dir.path().join("pairs.jsonl"), "not json\n").unwrap();
    assert_eq!(code(&bench(dir.path(), "r.json", 1, &[])), 3);
    std::fs::remove_file(dir.path().join("pairs.jsonl")).unwrap();
    assert_eq!(code(&bench(dir.path(), "r.json", 1, &[])), 3);
}

#[test]
fn majority_failure_exits_4_and_still_writes_report() {
    let dir = workspace();
    let missing = r#"{"source_cloud": "none.ply", "target_cloud": "none.ply", "camera_a": "c.json", "camera_b": "c.json"}"#;
    let text = format!("{{\"synthetic\": {{\"seed\": 0}}}}\n{missing}\n{missing}\n");
    std::fs::write(dir.path().join("pairs.jsonl"), text).unwrap();
    let o = bench(dir.path(), "r.json", 1, &[]);
    assert_eq!(code(&o), 4);
    let r = json(dir.path().join("r.json"));
    let pairs = r["sections"][0]["pairs"].as_array().unwrap();
    assert!(pairs[0]["result"].is_object());
    assert!(pairs[1]["error"].as_str().unwrap().contains("none.ply"));
}

#[test]
fn register_from_files_recovers_the_pose_deterministically() {
    let dir = workspace();
    let d = dir.path();
    std::fs::write(d.join("file.json"), r#"{"profile": "synthetic", "visual_provider": {"kind": "file"}}"#).unwrap();
    let pair = synthetic_pair(5, &SceneParams::default()).unwrap();
    let provider = SyntheticVisualProvider::new(64, 0.3, 0).unwrap();
    for (name, frame) in [("a", &pair.source), ("b", &pair.target)] {
        write_ply(d.join(format!("{name}.ply")), &frame.cloud, PlyFormat::BinaryLittleEndian).unwrap();
        frame.camera.save(d.join(format!("cam_{name}.json"))).unwrap();
        save_feature_map(d.join(format!("{name}.drfm")), &provider.visual_map(frame).unwrap()).unwrap();
    }
    std::fs::write(d.join("gt.json"), serde_json::to_string(&pair.gt).unwrap()).unwrap();
    let args = |out: &'static str| {
        vec![
            "register", "--source-cloud", "a.ply", "--target-cloud", "b.ply", "--source-vfeat", "a.drfm", "--target-vfeat", "b.drfm",
            "--camera-a", "cam_a.json", "--camera-b", "cam_b.json", "--gt", "gt.json", "--weights", "w.bin", "--config", "file.json",
            "--out", out,
        ]
    };
    assert_ok(&dinoreg(&args("r1.json"), d, 1));
    assert_ok(&dinoreg(&args("r2.json"), d, 1));
    let r1 = std::fs::read(d.join("r1.json")).unwrap();
    assert_eq!(r1, std::fs::read(d.join("r2.json")).unwrap());
    let r: Value = serde_json::from_slice(&r1).unwrap();
    assert_eq!(r["metrics"]["registered"], Value::Bool(true));
    assert!(r["metrics"]["pose"]["rre_deg"].as_f64().unwrap() < 1.0);
    assert!(d.join("r1.timing.json").exists());

    // the file provider without feature files is a per-pair data error
    let o = dinoreg(
        &["register", "--source-cloud", "a.ply", "--target-cloud", "b.ply", "--camera-a", "cam_a.json", "--camera-b", "cam_b.json",
          "--weights", "w.bin", "--config", "file.json", "--out", "r3.json"],
        d,
        1,
    );
    assert_ne!(code(&o), 0);
}

#[test]
fn dataset_build_writes_pair_records() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let camera = CameraModel::pinhole(50.0, 50.0, 32.0, 24.0, 64, 48).unwrap();
    let depth = DepthImage::new(64, 48, vec![1500; 64 * 48]).unwrap();
    let frames: Vec<FrameRecord> = (0..3)
        .map(|i| {
            let name = format!("d{i}.png");
            write_depth_png(d.join(&name), &depth).unwrap();
            FrameRecord {
                index: i,
                depth: name.into(),
                image: None,
                pose: RigidTransform::identity(),
            }
        })
        .collect();
    let manifest = SceneManifest {
        scenes: vec![SceneEntry {
            scene: "flat".into(),
            split: Split::Train,
            camera,
            stride: None,
            group_size: None,
            frames,
        }],
    };
    std::fs::write(d.join("scenes.json"), serde_json::to_string(&manifest).unwrap()).unwrap();
    let o = dinoreg(&["dataset", "build", "--manifest", "scenes.json", "--stride", "1", "--out", "pairs.jsonl"], d, 1);
    assert_ok(&o);
    let text = std::fs::read_to_string(d.join("pairs.jsonl")).unwrap();
    let records: Vec<Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    let ab: Vec<(u64, u64)> = records.iter().map(|r| (r["a"].as_u64().unwrap(), r["b"].as_u64().unwrap())).collect();
    assert_eq!(ab, vec![(0, 1), (0, 2), (1, 2)]);
    assert!(records.iter().all(|r| r["overlap"].as_f64().unwrap() > 0.99 && r["bin"] == "train"));

    let o = dinoreg(&["dataset", "build", "--manifest", "scenes.json", "--bins", "0.3,0.1,0.7", "--out", "x.jsonl"], d, 1);
    assert_eq!(code(&o), 2);
}
