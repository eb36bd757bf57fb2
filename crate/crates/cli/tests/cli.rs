use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use vole_core::ingestion::save_mask;
use vole_core::Mask;

fn volest(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_volest"))
        .args(args)
        .output()
        .expect("spawn volest")
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn assert_error_line(o: &Output, code: i32) {
    assert_eq!(o.status.code(), Some(code), "{}", stderr(o));
    let err = stderr(o);
    let lines: Vec<&str> = err.lines().collect();
    assert_eq!(lines.len(), 1, "{err}");
    assert!(lines[0].starts_with("error: "), "{err}");
}

fn synth(dir: &Path, views: &str, size: &str, extra: &[&str]) -> PathBuf {
    let mut args = vec![
        "synth",
        "--kind",
        "sphere",
        "--views",
        views,
        "--image-size",
        size,
        "--out",
        s(dir),
    ];
    args.extend_from_slice(extra);
    let o = volest(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    let manifest = dir.join("manifest.json");
    assert!(manifest.is_file());
    manifest
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

#[test]
fn synth_then_run_recovers_the_volume() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = synth(&tmp.path().join("scene"), "24", "256x256", &["--gauge-scale", "0.4"]);
    let out = tmp.path().join("out");
    let o = volest(&["run", s(&manifest), "--out", s(&out), "--resolution", "64"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    for f in [
        "aligned_cloud.ply",
        "masked_cloud.ply",
        "mesh.ply",
        "mesh_refined.ply",
        "report.json",
        "report.txt",
    ] {
        assert!(out.join(f).is_file(), "{f}");
    }
    let report = read_json(&out.join("report.json"));
    let err = report["error_pct"].as_f64().unwrap();
    assert!(err < 3.0, "{err}");
    assert_eq!(report["watertight"], Value::Bool(true));
    assert_eq!(report["euler_characteristic"], 2);
    assert!((report["alignment_scale"].as_f64().unwrap() - 2.5).abs() < 1e-9);
    assert!(stdout(&o).contains("error (%)"));

    let v = volest(&["volume", s(&out.join("mesh_refined.ply"))]);
    let printed = format!("volume (ml): {:.3}", report["volume_ml"].as_f64().unwrap());
    assert!(stdout(&v).contains(&printed), "{}", stdout(&v));
}

#[test]
fn rerun_is_byte_identical_across_thread_counts() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = synth(&tmp.path().join("scene"), "24", "256x256", &[]);
    let run = |name: &str, threads: &str| {
        let out = tmp.path().join(name);
        let o = volest(&[
            "run",
            s(&manifest),
            "--out",
            s(&out),
            "--resolution",
            "48",
            "--threads",
            threads,
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        out
    };
    let a = run("a", "1");
    let b = run("b", "3");
    let c = run("c", "1");
    for f in [
        "report.json",
        "report.txt",
        "mesh.ply",
        "mesh_refined.ply",
        "masked_cloud.ply",
    ] {
        let x = fs::read(a.join(f)).unwrap();
        assert_eq!(x, fs::read(b.join(f)).unwrap(), "{f}");
        assert_eq!(x, fs::read(c.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn missing_masks_name_the_field() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = synth(&tmp.path().join("scene"), "6", "64x64", &[]);
    let mut doc = read_json(&manifest);
    for img in doc["images"].as_array_mut().unwrap() {
        img.as_object_mut().unwrap().remove("mask");
    }
    let bad = tmp.path().join("scene/nomask.json");
    fs::write(&bad, doc.to_string()).unwrap();
    let out = tmp.path().join("out");
    let o = volest(&["run", s(&bad), "--out", s(&out)]);
    assert_error_line(&o, 2);
    assert!(stderr(&o).contains("images[].mask"), "{}", stderr(&o));
    assert!(!out.exists());
}

#[test]
fn carving_failure_exits_3_without_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("scene");
    let manifest = synth(&dir, "6", "64x64", &[]);
    // a blank mask makes every point fail that view
    save_mask(&Mask::filled(64, 64, false), &dir.join("masks/0000.png")).unwrap();
    let out = tmp.path().join("out");
    let o = volest(&["run", s(&manifest), "--out", s(&out), "--resolution", "32"]);
    assert_error_line(&o, 3);
    assert!(!out.exists());
}

#[test]
fn cube_fixture_volume() {
    let tmp = tempfile::tempdir().unwrap();
    let report = tmp.path().join("v.json");
    let o = volest(&["volume", s(&fixture("cube.ply")), "--out", s(&report)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("volume (ml): 1000.000"), "{}", stdout(&o));
    let v = read_json(&report)["volume_ml"].as_f64().unwrap();
    assert!((v - 1000.0).abs() <= 1e-9 * 1000.0, "{v}");
}

#[test]
fn reference_fixture_evaluation() {
    let tmp = tempfile::tempdir().unwrap();
    let report = tmp.path().join("eval.json");
    let o = volest(&[
        "evaluate",
        "--predictions",
        s(&fixture("reference_eval/predictions")),
        "--gt",
        s(&fixture("reference_eval/gt.json")),
        "--out",
        s(&report),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("MAPE 3.08  S.D. 2.63"), "{}", stdout(&o));
    assert!(stdout(&o).contains("CD sum 0.0577  CD mean 0.0044"), "{}", stdout(&o));
    let r = read_json(&report);
    assert_eq!(r["per_item"].as_array().unwrap().len(), 13);
}

#[test]
fn evaluate_samples_chamfer_from_meshes() {
    let tmp = tempfile::tempdir().unwrap();
    let preds = tmp.path().join("preds");
    fs::create_dir(&preds).unwrap();
    fs::copy(fixture("cube.ply"), preds.join("cube.ply")).unwrap();
    fs::copy(fixture("cube.ply"), tmp.path().join("gt_cube.ply")).unwrap();
    fs::write(preds.join("cube.json"), r#"{"volume_ml": 990.0, "mesh": "cube.ply"}"#).unwrap();
    let gt = tmp.path().join("gt.json");
    fs::write(
        &gt,
        r#"{"items": [{"name": "cube", "volume_ml": 1000.0, "mesh": "gt_cube.ply"}]}"#,
    )
    .unwrap();
    let o = volest(&[
        "evaluate",
        "--predictions",
        s(&preds),
        "--gt",
        s(&gt),
        "--chamfer-samples",
        "2000",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("MAPE 1.00"), "{out}");
    assert!(out.contains("CD sum "), "{out}");
}

#[test]
fn skip_five_of_1005_frames() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("scene");
    let manifest = synth(&dir, "4", "16x16", &[]);
    let mut doc = read_json(&manifest);
    let mut entry = doc["images"][0].clone();
    entry.as_object_mut().unwrap().remove("mask");
    entry.as_object_mut().unwrap().remove("ar_center");
    doc["images"] = Value::Array(vec![entry; 1005]);
    doc.as_object_mut().unwrap().remove("point_cloud");
    let long = dir.join("long.json");
    fs::write(&long, doc.to_string()).unwrap();
    let out = tmp.path().join("sel");
    let o = volest(&["select-frames", s(&long), "--skip", "5", "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("kept 201 of 1005 frames\n"), "{}", stdout(&o));
    let kept = read_json(&out.join("manifest.json"));
    let images = kept["images"].as_array().unwrap();
    assert_eq!(images.len(), 201);
    assert!(Path::new(images[0]["image"].as_str().unwrap()).is_absolute());
}

#[test]
fn hamming_selection_writes_a_loadable_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = synth(&tmp.path().join("scene"), "12", "64x64", &[]);
    let mut counts = Vec::new();
    for t in ["1", "4", "8", "16"] {
        let out = tmp.path().join(format!("sel{t}"));
        let o = volest(&["select-frames", s(&manifest), "--hamming", t, "--out", s(&out)]);
        assert!(o.status.success(), "{}", stderr(&o));
        let kept = read_json(&out.join("manifest.json"));
        counts.push(kept["images"].as_array().unwrap().len());
        if *counts.last().unwrap() < 3 {
            continue;
        }
        let m = volest(&[
            "mask",
            s(&out.join("manifest.json")),
            "--out",
            s(&tmp.path().join(format!("m{t}.ply"))),
        ]);
        assert!(m.status.success(), "{}", stderr(&m));
    }
    assert!(counts.windows(2).all(|w| w[1] <= w[0]), "{counts:?}");
    assert!(counts[0] >= 1);
}

#[test]
fn stage_commands_compose() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = synth(&tmp.path().join("scene"), "16", "128x128", &[]);
    let cloud = tmp.path().join("masked.vpc");
    let raw = tmp.path().join("raw.ply");
    let smooth = tmp.path().join("smooth.ply");
    let o = volest(&["mask", s(&manifest), "--out", s(&cloud)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("kept 20000 of 20000 points"), "{}", stdout(&o));
    let o = volest(&[
        "reconstruct",
        s(&manifest),
        "--cloud",
        s(&cloud),
        "--out",
        s(&raw),
        "--resolution",
        "40",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("watertight true"));
    let o = volest(&["refine", s(&raw), "--out", s(&smooth), "--simplify-cell", "0.004"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("watertight true"), "{}", stdout(&o));
}

#[test]
fn invalid_input_gives_one_error_line() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("missing");
    let m = s(&missing);
    let out = s(tmp.path());
    let cases: Vec<Vec<&str>> = vec![
        vec!["run", m, "--out", out],
        vec!["mask", m, "--out", out],
        vec!["reconstruct", m, "--out", out],
        vec!["refine", m, "--out", out],
        vec!["volume", m],
        vec!["evaluate", "--predictions", out, "--gt", m],
        vec!["select-frames", m, "--skip", "2", "--out", out],
        vec!["synth", "--kind", "sphere", "--radius=-1", "--out", out],
        vec!["synth", "--kind", "box", "--views", "2", "--out", out],
    ];
    let cases = cases.into_iter().chain([
        vec!["frobnicate"],
        vec!["volume"],
        vec!["select-frames", m, "--out", out],
        vec!["synth", "--kind", "cone", "--out", out],
    ]);
    for args in cases {
        let o = volest(&args);
        assert_error_line(&o, 2);
    }
    let garbage = tmp.path().join("garbage.json");
    fs::write(&garbage, "{\"scene_name\": 3").unwrap();
    let o = volest(&["run", s(&garbage), "--out", out]);
    assert_error_line(&o, 2);
    let o = volest(&["volume", s(&fixture("reference_eval/gt.json"))]);
    assert_error_line(&o, 2);
}

#[test]
fn quota_and_skip_are_validated() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = synth(&tmp.path().join("scene"), "4", "32x32", &[]);
    let out = tmp.path().join("out");
    for q in ["0", "1.5", "nan"] {
        let o = volest(&["run", s(&manifest), "--out", s(&out), "--quota", q]);
        assert_error_line(&o, 2);
    }
    let o = volest(&["select-frames", s(&manifest), "--skip", "0", "--out", s(&out)]);
    assert_error_line(&o, 2);
}
