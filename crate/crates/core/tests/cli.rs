//! End-to-end runs of the `snetdet` binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use snetdet::detector::random_detector_weights;
use snetdet::head::HeadConfig;
use snetdet::model_io::{load_weights, save_weights};
use snetdet::snet::SnetVariant;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_snetdet"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout_json(o: &Output) -> Value {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    serde_json::from_slice(&o.stdout).expect("json on stdout")
}

fn schema(name: &str) -> jsonschema::Validator {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../docs/schemas").join(name);
    let s: Value = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    jsonschema::validator_for(&s).unwrap()
}

fn assert_valid(v: &jsonschema::Validator, doc: &Value) {
    let errors: Vec<String> = v.iter_errors(doc).map(|e| e.to_string()).collect();
    assert!(errors.is_empty(), "{errors:?}");
}

fn write_png(dir: &Path, w: u32, h: u32) -> PathBuf {
    let img = image::RgbImage::from_fn(w, h, |x, y| {
        image::Rgb([(x * 255 / w) as u8, (y * 255 / h) as u8, ((x ^ y) & 0xff) as u8])
    });
    let path = dir.join("scene.png");
    img.save(&path).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn detect_png_output_is_well_formed() {
    let dir = tempfile::tempdir().unwrap();
    let png = write_png(dir.path(), 200, 150);
    let o = run(&["detect", "--model", "snet49", "--classes", "voc", "--random-seed", "7", "--input", s(&png)]);
    let doc = stdout_json(&o);
    assert_valid(&schema("detections.schema.json"), &doc);
    let entries = doc.as_array().unwrap();
    assert_eq!(entries.len(), 1);
    assert_eq!(entries[0]["image_id"], "scene.png");
    assert!(entries[0].get("timing").is_none());
    let dets = entries[0]["detections"].as_array().unwrap();
    assert!(dets.len() <= 100);
    let mut prev = f64::INFINITY;
    for d in dets {
        let b: Vec<f64> = d["bbox"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect();
        assert!(b[0] >= 0.0 && b[1] >= 0.0 && b[2] > 0.0 && b[3] > 0.0, "{b:?}");
        assert!(b[0] + b[2] <= 200.0 + 1e-3 && b[1] + b[3] <= 150.0 + 1e-3, "{b:?}");
        let score = d["score"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&score));
        assert!(score <= prev);
        prev = score;
        let c = d["category_id"].as_u64().unwrap();
        assert!((1..=20).contains(&c));
    }
}

#[test]
fn detect_writes_file_with_timing() {
    let dir = tempfile::tempdir().unwrap();
    let png = write_png(dir.path(), 64, 64);
    let out = dir.path().join("dets.json");
    let o = run(&[
        "detect", "--model", "snet49", "--random-seed", "1", "--input", s(&png), s(&png), "--out", s(&out), "--timing",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let doc: Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert_valid(&schema("detections.schema.json"), &doc);
    assert_eq!(doc.as_array().unwrap().len(), 2);
    assert!(doc[1]["timing"]["backbone_ms"].as_f64().unwrap() > 0.0);
}

#[test]
fn classifier_width_follows_class_regime() {
    let width = |classes: &str| {
        let o = run(&["analyze", "--model", "snet49", "--classes", classes, "--format", "json"]);
        let doc = stdout_json(&o);
        assert_valid(&schema("cost_report.schema.json"), &doc);
        let row = doc["rows"].as_array().unwrap().iter().find(|r| r["name"] == "rcnn.cls").unwrap().clone();
        row["shape"][1].as_u64().unwrap()
    };
    assert_eq!(width("voc"), 21);
    assert_eq!(width("coco"), 81);
    assert_eq!(width("5"), 6);
}

#[test]
fn backbone_analysis_validates() {
    let o = run(&["analyze", "--model", "snet146", "--classification-tail", "--input-res", "224", "--format", "json"]);
    let doc = stdout_json(&o);
    assert_valid(&schema("cost_report.schema.json"), &doc);
    assert!(doc.get("groups").is_none());
}

#[test]
fn no_proposals_gives_empty_detections() {
    let dir = tempfile::tempdir().unwrap();
    let head = HeadConfig::voc();
    let mut ws = random_detector_weights(SnetVariant::Snet49, &head, 5).unwrap();
    ws.get_mut("rpn.reg.weight").unwrap().data_mut().fill(0.0);
    for (i, v) in ws.get_mut("rpn.reg.bias").unwrap().data_mut().iter_mut().enumerate() {
        // dw and dh so negative that every proposal shrinks below min_size.
        *v = if i % 4 >= 2 { -30.0 } else { 0.0 };
    }
    let weights = dir.path().join("w.tnrt");
    save_weights(&ws, &weights).unwrap();
    let png = write_png(dir.path(), 80, 60);
    let o = run(&["detect", "--model", "snet49", "--classes", "voc", "--weights", s(&weights), "--input", s(&png)]);
    let doc = stdout_json(&o);
    assert_eq!(doc[0]["detections"], Value::Array(vec![]));
}

#[test]
fn weight_errors_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let weights = dir.path().join("w49.tnrt");
    let o = run(&["init-weights", "--model", "snet49", "--classes", "voc", "--seed", "3", "--out", s(&weights)]);
    assert!(o.status.success());
    assert_eq!(load_weights(&weights).unwrap().len(), {
        random_detector_weights(SnetVariant::Snet49, &HeadConfig::voc(), 3).unwrap().len()
    });
    let png = write_png(dir.path(), 32, 32);

    let o = run(&["detect", "--model", "snet146", "--classes", "voc", "--weights", s(&weights), "--input", s(&png)]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));

    let bytes = std::fs::read(&weights).unwrap();
    let cut = dir.path().join("cut.tnrt");
    std::fs::write(&cut, &bytes[..bytes.len() / 3]).unwrap();
    let o = run(&["detect", "--model", "snet49", "--classes", "voc", "--weights", s(&cut), "--input", s(&png)]);
    assert_eq!(o.status.code(), Some(2));

    let o = run(&["detect", "--model", "snet49", "--random-seed", "1", "--input", s(&dir.path().join("missing.png"))]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(run(&["detect", "--model", "snet49"]).status.code(), Some(1));
    assert_eq!(run(&["analyze", "--model", "snet999"]).status.code(), Some(1));
    assert_eq!(run(&["bench", "--model", "snet49", "--iters", "0"]).status.code(), Some(1));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}

#[test]
fn bench_json_reports_consistent_fps() {
    let o = run(&["bench", "--model", "snet49", "--iters", "2", "--warmup", "0", "--format", "json"]);
    let doc = stdout_json(&o);
    let mean = doc["mean_ms"].as_f64().unwrap();
    let fps = doc["fps"].as_f64().unwrap();
    assert!(mean > 0.0);
    assert!((fps - 1000.0 / mean).abs() <= 1e-6 * fps.max(1.0));
    assert!(doc["min_ms"].as_f64().unwrap() <= doc["median_ms"].as_f64().unwrap());
    assert!(doc["median_ms"].as_f64().unwrap() <= doc["max_ms"].as_f64().unwrap());
    assert_eq!(doc["iters"], 2);
}

#[test]
fn rf_json_reports_strides() {
    let o = run(&["rf", "--model", "snet146", "--format", "json"]);
    let doc = stdout_json(&o);
    let rows = doc.as_array().unwrap();
    assert_eq!(rows.len(), 2);
    for r in rows {
        assert_eq!(r["c4_jump"], 16.0);
        assert_eq!(r["c5_jump"], 32.0);
    }
    assert!(rows[0]["c4_rf"].as_f64() > rows[1]["c4_rf"].as_f64());
    assert!(rows[0]["c5_rf"].as_f64() > rows[1]["c5_rf"].as_f64());
}

#[test]
fn export_arch_round_trips_through_library() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("arch.json");
    let o = run(&["export-arch", "--model", "snet146", "--part", "detector", "--out", s(&path)]);
    assert!(o.status.success());
    let text = std::fs::read_to_string(&path).unwrap();
    let g = snetdet::model_io::import_arch(&path).unwrap();
    let built = snetdet::head::build_detector_graph(SnetVariant::Snet146, &HeadConfig::coco()).unwrap();
    assert_eq!(g.len(), built.len());
    assert_eq!(snetdet::model_io::export_arch_string(&g), text);
}

#[test]
fn shipped_config_matches_defaults() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/detector.json");
    let cfg = snetdet::detector::DetectorConfig::load(path).unwrap();
    assert_eq!(cfg, snetdet::detector::DetectorConfig::default());
}
