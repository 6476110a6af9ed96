use std::path::Path;
use std::process::Command;

use deflecto::eye_model::{base_shape, EyePose};
use deflecto::harness::{stream_rng, Simulator};
use deflecto::patterns::{DecodeConfig, Raster};
use deflecto::scene::default_scene;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_deflecto"))
}

fn run(cmd: &mut Command) -> String {
    let out = cmd.output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn write(path: &Path, text: &str) {
    std::fs::write(path, text).unwrap();
}

#[test]
fn render_writes_images_and_buffers() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    default_scene().with_resolution(48, 40).save(&d.join("scene.toml")).unwrap();
    write(&d.join("pattern.toml"), "kind = \"sinusoid\"\nfrequency = 16.0\norientation = \"horizontal\"\nmean = 0.3\namplitude = 0.3\n");
    write(&d.join("pose.toml"), "rotation = [0.0, 0.05, 0.0]\ntranslation = [0.0, 0.0, 0.0]\n");
    run(bin().args(["render", "--scene"]).arg(d.join("scene.toml")).arg("--pose").arg(d.join("pose.toml")).arg("--pattern").arg(d.join("pattern.toml")).arg("--out").arg(d.join("out")));
    for f in ["image.png", "image_0.f32", "uv_u.f32", "uv_v.f32", "mask.png"] {
        assert!(d.join("out").join(f).exists(), "{f}");
    }
    let u = Raster::load(&d.join("out/uv_u.f32")).unwrap();
    assert_eq!((u.width, u.height), (48, 40));
    assert!(u.data.iter().any(|v| v.is_finite()));
}

#[test]
fn solve_recovers_gaze_from_correspondence_file() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let scene = default_scene().with_resolution(96, 96);
    scene.save(&d.join("scene.toml")).unwrap();
    let sim = Simulator::new(&scene, &base_shape(), DecodeConfig::default(), 0.3, 0.3, 0.0).unwrap();
    let set = sim.correspondences(&EyePose::from_gaze_angles(2.0, -3.0), &mut stream_rng(0, 0)).unwrap();
    set.save_csv(&d.join("obs.csv")).unwrap();
    let stdout = run(bin()
        .args(["solve", "--mode", "correspondence", "--scene"])
        .arg(d.join("scene.toml"))
        .arg("--observation")
        .arg(d.join("obs.csv"))
        .arg("--out")
        .arg(d.join("res/result.toml")));
    assert!(stdout.contains("gaze elevation"));
    let doc: toml::Value = toml::from_str(&std::fs::read_to_string(d.join("res/result.toml")).unwrap()).unwrap();
    let gaze: Vec<f64> = doc["gaze"].as_array().unwrap().iter().map(|v| v.as_float().unwrap()).collect();
    let truth = deflecto::eye_model::gaze_direction(&EyePose::from_gaze_angles(2.0, -3.0));
    let cos = gaze[0] * truth.x + gaze[1] * truth.y + gaze[2] * truth.z;
    assert!(cos.min(1.0).acos().to_degrees() < 0.1);
    let trace = std::fs::read_to_string(d.join("res/result.trace.csv")).unwrap();
    assert!(trace.lines().count() > 1);
}

#[test]
fn photometric_solve_needs_a_pattern() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args(["solve", "--mode", "photometric", "--observation"])
        .arg(dir.path().join("missing.png"))
        .arg("--out")
        .arg(dir.path().join("r.toml"))
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}

#[test]
fn baseline_estimates_each_pose() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    default_scene().with_resolution(256, 256).save(&d.join("scene.toml")).unwrap();
    write(&d.join("poses.csv"), "elevation,azimuth\n1.0,-2.0\n-3.0,2.5\n");
    run(bin()
        .args(["baseline", "--calibrate-grid", "3", "--scene"])
        .arg(d.join("scene.toml"))
        .arg("--poses")
        .arg(d.join("poses.csv"))
        .arg("--out")
        .arg(d.join("est.csv")));
    let mut rd = csv::Reader::from_path(d.join("est.csv")).unwrap();
    let rows: Vec<csv::StringRecord> = rd.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 2);
    for r in &rows {
        assert_eq!(&r[6], "ok");
        assert!(r[4].parse::<f64>().unwrap() < 1.0);
    }
}

#[test]
fn experiment_writes_report_files() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write(
        &d.join("spec.toml"),
        "kind = \"rotation_sweep\"\nresolution = [48, 48]\npositions = [0.0, 2.0]\nrepeats = 2\n",
    );
    let stdout = run(bin().args(["experiment", "--seed", "9", "--jobs", "1", "--spec"]).arg(d.join("spec.toml")).arg("--out").arg(d.join("out")));
    assert_eq!(stdout.lines().count(), 5);
    let manifest = std::fs::read_to_string(d.join("out/manifest.txt")).unwrap();
    assert!(manifest.contains("seed = 9"));
    let raw = std::fs::read_to_string(d.join("out/raw.csv")).unwrap();
    assert_eq!(raw.lines().count(), 1 + 4);
}

#[test]
fn invalid_experiment_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    write(&dir.path().join("spec.toml"), "kind = \"rotation_sweep\"\nrepeats = 0\n");
    let out = bin().args(["experiment", "--spec"]).arg(dir.path().join("spec.toml")).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("repeat"));
}
