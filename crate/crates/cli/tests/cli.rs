use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn drn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_drn"))
        .args(args)
        .env("DRN_THREADS", "2")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Vec<Value> {
    let out = drn(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).expect("stdout is JSON lines"))
        .collect()
}

fn path(dir: &Path, name: &str) -> String {
    dir.join(name).to_str().unwrap().to_string()
}

#[test]
fn build_then_rf_matches_resnet18() {
    let d = tempfile::tempdir().unwrap();
    let m = path(d.path(), "m.drnw");
    let built = ok(&["build", "--arch", "drn-a", "--depth", "18", "--width", "1", "--out", &m]);
    assert_eq!(built[0]["params"], 11_689_512);
    assert_eq!(built[0]["output_stride"], 8);
    let from_model = ok(&["rf", "--model", &m, "--level", "6"]);
    let resnet = ok(&["rf", "--arch", "resnet", "--depth", "18", "--level", "6"]);
    assert_eq!(from_model[0]["rf"], serde_json::json!([435, 435]));
    assert_eq!(from_model[0]["rf"], resnet[0]["rf"]);
}

#[test]
fn empirical_rf_agrees() {
    let out = ok(&["rf", "--arch", "drn-c", "--depth", "26", "--width", "1/8", "--level", "4", "--empirical"]);
    assert_eq!(out[0]["rf"], out[0]["empirical"]["rf"]);
    assert_eq!(out[0]["jump"], out[0]["empirical"]["jump"]);
}

#[test]
fn usage_errors_exit_2() {
    let d = tempfile::tempdir().unwrap();
    let m = path(d.path(), "m.drnw");
    let out = drn(&["build", "--arch", "vgg", "--depth", "16", "--out", &m]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("vgg"));
    assert_eq!(drn(&["build", "--depth", "18", "--out", &m]).status.code(), Some(2));
    assert_eq!(drn(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(drn(&["build", "--arch", "resnet", "--depth", "19", "--out", &m]).status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_1() {
    let d = tempfile::tempdir().unwrap();
    let out = drn(&["rf", "--model", &path(d.path(), "absent.drnw"), "--level", "1"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn synth_is_deterministic_and_validated() {
    let d = tempfile::tempdir().unwrap();
    let (a, b) = (path(d.path(), "a"), path(d.path(), "b"));
    for dir in [&a, &b] {
        ok(&["synth", "--task", "localize", "--n", "6", "--extent", "32", "--classes", "3", "--seed", "5", "--out", dir]);
    }
    for rel in ["dataset.json", "labels.csv", "images/005.ppm"] {
        let read = |root: &str| std::fs::read(Path::new(root).join(rel)).unwrap();
        assert_eq!(read(&a), read(&b), "{rel}");
    }
    std::fs::remove_file(Path::new(&a).join("images/003.ppm")).unwrap();
    let m = path(d.path(), "m.drnw");
    ok(&["build", "--arch", "drn-c", "--depth", "26", "--width", "1/8", "--classes", "3", "--out", &m]);
    let out = drn(&["localize", "--model", &m, "--data", &a]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("images/003.ppm"));
}

#[test]
fn cam_writes_heatmap_at_image_resolution() {
    let d = tempfile::tempdir().unwrap();
    let data = path(d.path(), "data");
    ok(&["synth", "--n", "1", "--extent", "64", "--out", &data]);
    let m = path(d.path(), "m.drnw");
    ok(&["build", "--arch", "drn-a", "--depth", "18", "--width", "1/8", "--classes", "4", "--out", &m]);
    let heat = path(d.path(), "heat.pgm");
    let image = format!("{data}/images/000.ppm");
    let out = ok(&["cam", "--model", &m, "--image", &image, "--class", "3", "--out", &heat]);
    assert_eq!(out[0]["map"], serde_json::json!([8, 8]));
    let bytes = std::fs::read(&heat).unwrap();
    assert!(bytes.starts_with(b"P5\n64 64\n255\n"));
    let raster = &bytes[bytes.len() - 64 * 64..];
    // each map cell covers an 8x8 block of identical pixels
    for y in 0..64 {
        for x in 0..64 {
            assert_eq!(raster[y * 64 + x], raster[(y / 8 * 8) * 64 + x / 8 * 8]);
        }
    }
    assert!(raster.contains(&0) && raster.contains(&255));
    let side: Value = serde_json::from_str(&std::fs::read_to_string(format!("{heat}.json")).unwrap()).unwrap();
    assert!(side["min"].as_f64().unwrap() < side["max"].as_f64().unwrap());
    assert_eq!(drn(&["cam", "--model", &m, "--image", &image, "--class", "4", "--out", &heat]).status.code(), Some(2));
}

#[test]
fn grid_emits_one_report_per_model() {
    let d = tempfile::tempdir().unwrap();
    let (a, c) = (path(d.path(), "a.drnw"), path(d.path(), "c.drnw"));
    ok(&["build", "--arch", "drn-a", "--depth", "18", "--width", "1/8", "--classes", "4", "--out", &a]);
    ok(&["build", "--arch", "drn-c", "--depth", "26", "--width", "1/8", "--classes", "4", "--out", &c]);
    let out = ok(&["grid", "--models", &a, &c, "--impulse"]);
    assert_eq!(out.len(), 2);
    for r in &out {
        assert_eq!(r["period"], 4);
        let ratio = r["ratio"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&ratio));
    }
}

#[test]
fn train_eval_localize_segment_round() {
    let d = tempfile::tempdir().unwrap();
    let data = path(d.path(), "data");
    ok(&["synth", "--task", "localize", "--n", "8", "--extent", "32", "--classes", "2", "--out", &data]);
    let m = path(d.path(), "m.drnw");
    ok(&["build", "--arch", "drn-c", "--depth", "26", "--width", "1/8", "--classes", "2", "--out", &m]);
    let cfg = path(d.path(), "train.cfg");
    std::fs::write(&cfg, "epochs = 2\nbatch_size = 4\nlr0 = 0.01\n").unwrap();
    let (t1, t2) = (path(d.path(), "t1.drnw"), path(d.path(), "t2.drnw"));
    let metrics = path(d.path(), "metrics.jsonl");
    let log = ok(&["train", "--model", &m, "--data", &data, "--config", &cfg, "--out", &t1, "--metrics", &metrics]);
    assert_eq!(log.len(), 2);
    assert_eq!(std::fs::read_to_string(&metrics).unwrap().lines().count(), 2);
    ok(&["train", "--model", &m, "--data", &data, "--config", &cfg, "--out", &t2]);
    assert_eq!(std::fs::read(&t1).unwrap(), std::fs::read(&t2).unwrap());

    let ev = ok(&["eval", "--model", &t1, "--data", &data, "--protocol", "10crop"]);
    assert_eq!(ev[0]["crop"], 24);
    assert_eq!(ev[0]["n"], 8);
    let loc = ok(&["localize", "--model", &t1, "--data", &data, "--t", "0.25"]);
    assert_eq!(loc.len(), 9);
    assert_eq!(loc[8]["summary"], true);
    assert!(loc[0]["path"].is_string() && loc[0]["hit"].is_boolean());

    let seg = path(d.path(), "seg");
    ok(&["synth", "--task", "segment", "--n", "4", "--extent", "32", "--classes", "2", "--out", &seg]);
    let s = path(d.path(), "s.drnw");
    ok(&["train", "--model", &t1, "--data", &seg, "--config", &cfg, "--out", &s]);
    let report = ok(&["segment", "--model", &s, "--data", &seg]);
    assert_eq!(report[0]["per_class_iou"].as_array().unwrap().len(), 2);
    let mask = path(d.path(), "mask.pgm");
    ok(&["segment", "--model", &s, "--image", &format!("{seg}/images/000.ppm"), "--out", &mask]);
    assert!(std::fs::read(&mask).unwrap().starts_with(b"P5\n32 32\n255\n"));
}
