use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use circlecal_core::{rotation_error, translation_error, Circle3D, Pixel, RigidTransform};
use serde_json::Value;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

fn circlecal(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_circlecal"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn json_of(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| {
        panic!("{e}: {}", String::from_utf8_lossy(&out.stderr));
    })
}

fn read(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

fn assert_schema(schema: &str, doc: &Value) {
    let schema = read(&Path::new(env!("CARGO_MANIFEST_DIR")).join("schemas").join(schema));
    let v = jsonschema::validator_for(&schema).unwrap();
    let errors: Vec<String> = v.iter_errors(doc).map(|e| e.to_string()).collect();
    assert!(errors.is_empty(), "{errors:?}");
}

fn pixel(v: &Value) -> Pixel {
    serde_json::from_value(v.clone()).unwrap()
}

#[test]
fn ring_fit_is_exact_from_csv_and_ply() {
    let gt: Circle3D = serde_json::from_value(read(&fixture("ring_gt.json"))).unwrap();
    for name in ["ring.csv", "ring.ply"] {
        let out = circlecal(&["fit-circle3d", path(&fixture(name))]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        let j = json_of(&out);
        assert_schema("circle_fit.schema.json", &j);
        let c: Circle3D = serde_json::from_value(j.clone()).unwrap();
        assert!((c.center - gt.center).norm() < 1e-8);
        assert!((c.radius - gt.radius).abs() < 1e-8);
        assert!(1.0 - c.normal.dot(&gt.normal).abs() < 1e-8);
        assert_eq!(j["inlier_count"], 64);
    }
}

#[test]
fn outlier_cloud_recovers_recorded_mask() {
    let gt = read(&fixture("ring_outliers_gt.json"));
    let out = circlecal(&["fit-circle3d", path(&fixture("ring_outliers.csv")), "--seed", "3"]);
    assert!(out.status.success());
    let j = json_of(&out);
    assert_eq!(j["inlier_count"], gt["inlier_count"]);
    let expected: Vec<usize> = gt["inlier_mask"]
        .as_array()
        .unwrap()
        .iter()
        .enumerate()
        .filter(|(_, m)| m.as_bool().unwrap())
        .map(|(i, _)| i)
        .collect();
    let got: Vec<usize> = serde_json::from_value(j["inliers"].clone()).unwrap();
    assert_eq!(got, expected);
}

#[test]
fn empty_cloud_is_an_input_error() {
    let out = circlecal(&["fit-circle3d", path(&fixture("empty.csv"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("empty file"));
    let out = circlecal(&["fit-circle3d", "/nonexistent/cloud.csv"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn oblique_pair_selects_true_center() {
    let gt = read(&fixture("oblique_gt.json"));
    let ratio = gt["ratio"].as_f64().unwrap().to_string();
    let out = circlecal(&[
        "refine-center2d",
        path(&fixture("oblique.json")),
        "--intrinsics",
        path(&fixture("intrinsics.json")),
        "--radius",
        "0.5",
        "--coplanar",
        path(&fixture("oblique_secondary.json")),
        "--ratio",
        &ratio,
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let j = json_of(&out);
    assert_schema("center_hypotheses.schema.json", &j);
    assert_eq!(j["hypotheses"].as_array().unwrap().len(), 2);
    let selected = pixel(&j["selected"]);
    assert!(selected.distance(&pixel(&gt["center"])) < 2.0);
    // the ellipse center is measurably biased on this view
    assert!(pixel(&j["ellipse_center"]).distance(&pixel(&gt["center"])) > 5.0);
}

#[test]
fn fronto_parallel_has_one_hypothesis() {
    let out = circlecal(&[
        "refine-center2d",
        path(&fixture("fronto.json")),
        "--intrinsics",
        path(&fixture("intrinsics.json")),
        "--radius",
        "0.5",
    ]);
    assert!(out.status.success());
    let j = json_of(&out);
    assert_schema("center_hypotheses.schema.json", &j);
    let h = j["hypotheses"].as_array().unwrap();
    assert_eq!(h.len(), 1);
    assert!(pixel(&h[0]["center"]).distance(&pixel(&j["ellipse_center"])) < 1.0);
    assert!(j["selected"].is_null());
}

#[test]
fn refine_input_errors() {
    let out = circlecal(&[
        "refine-center2d",
        path(&fixture("fronto.json")),
        "--intrinsics",
        "/nonexistent/k.json",
    ]);
    assert_eq!(out.status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    let hyperbola = dir.path().join("h.json");
    std::fs::write(&hyperbola, r#"{"Q": [[1,0,0],[0,-1,0],[0,0,-1]]}"#).unwrap();
    let out = circlecal(&[
        "refine-center2d",
        path(&hyperbola),
        "--intrinsics",
        path(&fixture("intrinsics.json")),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn failed_disambiguation_still_reports_hypotheses() {
    // a secondary ellipse crossing the primary's vanishing line cannot be
    // rectified to a circle under either hypothesis
    let dir = tempfile::tempdir().unwrap();
    let huge = dir.path().join("huge.json");
    std::fs::write(&huge, r#"{"cx": 712, "cy": 432, "a": 5000, "b": 4000, "theta": 0.3}"#).unwrap();
    let out = circlecal(&[
        "refine-center2d",
        path(&fixture("oblique.json")),
        "--intrinsics",
        path(&fixture("intrinsics.json")),
        "--radius",
        "0.5",
        "--coplanar",
        path(&huge),
        "--ratio",
        "1.5",
    ]);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
    let j = json_of(&out);
    assert_eq!(j["hypotheses"].as_array().unwrap().len(), 2);
    assert!(j["selected"].is_null());
}

#[test]
fn field_dump_is_a_grid() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("field.csv");
    let out = circlecal(&[
        "refine-center2d",
        path(&fixture("fronto.json")),
        "--intrinsics",
        path(&fixture("intrinsics.json")),
        "--dump-field",
        path(&csv),
    ]);
    assert!(out.status.success());
    let text = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().next(), Some("u,v,loss"));
    // the fronto-parallel ellipse has radius 100 px
    let n = text.lines().count() - 1;
    assert!((n as f64 - std::f64::consts::PI * 1e4).abs() < 200.0, "{n}");
}

fn calibrate(extra: &[&str]) -> (Value, f64, f64) {
    let job = fixture("calib/job.json");
    let mut args = vec!["calibrate", path(&job)];
    args.extend_from_slice(extra);
    let out = circlecal(&args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let j = json_of(&out);
    let est: RigidTransform = serde_json::from_value(serde_json::json!({"T": j["T"]})).unwrap();
    let gt: RigidTransform = serde_json::from_value(read(&fixture("calib/gt_pose.json"))).unwrap();
    let rot = rotation_error(&est.rotation, &gt.rotation);
    let trans = translation_error(&est.translation, &gt.translation);
    (j, rot, trans)
}

#[test]
fn calibrate_fixture_recovers_pose() {
    assert_schema("calibration_job.schema.json", &read(&fixture("calib/job.json")));
    let (j, rot, trans) = calibrate(&[]);
    assert_schema("calibration_report.schema.json", &j);
    assert!(rot < 5e-3, "rotation error {rot}");
    assert!(trans < 0.02, "translation error {trans}");
    let corr = j["correspondences"].as_array().unwrap();
    assert_eq!(corr.len(), 20);
    assert!(corr.iter().all(|c| c["resolution"] != "paired"));
}

#[test]
fn homography_and_paired_modes_agree() {
    let (_, rot_h, trans_h) = calibrate(&["--mode", "homography"]);
    let (j, rot_p, trans_p) = calibrate(&["--mode", "paired"]);
    assert_eq!(j["mode"], "paired");
    for (a, b) in [(rot_h, rot_p), (trans_h, trans_p)] {
        assert!(a <= 2.0 * b && b <= 2.0 * a, "{a} vs {b}");
    }
}

#[test]
fn three_circles_are_insufficient() {
    let out = circlecal(&["calibrate", path(&fixture("calib/job_three.json"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("insufficient"));
}

fn bench(args: &[&str], dir: &Path) -> (Output, String, Value) {
    let mut all = vec!["bench", "--out", path(dir)];
    all.extend_from_slice(args);
    let out = circlecal(&all);
    if !out.status.success() {
        return (out, String::new(), Value::Null);
    }
    let csv = std::fs::read_to_string(dir.join("results.csv")).unwrap();
    let summary = read(&dir.join("summary.json"));
    (out, csv, summary)
}

#[test]
fn bench_outlier_scenario_lands_in_band() {
    let dir = tempfile::tempdir().unwrap();
    let args = ["--scenario", "outlier", "--p", "0.2", "--trials", "100", "--seed", "7"];
    let (out, csv, summary) = bench(&args, dir.path());
    assert!(out.status.success());
    assert_schema("bench_summary.schema.json", &summary);
    assert_eq!(json_of(&out), summary);
    let cga = summary["cga_ransac"]["e_center_m"]["mean"].as_f64().unwrap();
    assert!((0.017..=0.072).contains(&cga), "{cga}");
    let again = tempfile::tempdir().unwrap();
    let (_, csv2, _) = bench(&args, again.path());
    assert_eq!(csv, csv2);
}

#[test]
fn bench_noise_free_trial_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let (out, csv, _) = bench(&["--scenario", "A", "--trials", "1", "--sigma", "0"], dir.path());
    assert!(out.status.success());
    let mut lines = csv.lines();
    assert_eq!(
        lines.next(),
        Some("trial,method,e_center_m,e_radius_m,e_2d_px,e_reproj_px,e_rot_rad,e_trans_m,failed")
    );
    for row in lines {
        let f: Vec<&str> = row.split(',').collect();
        assert_eq!(f[8], "0");
        for v in &f[2..4] {
            assert!(v.parse::<f64>().unwrap() < 1e-8, "{row}");
        }
    }
}

#[test]
fn bench_rejects_unknown_scenario() {
    let dir = tempfile::tempdir().unwrap();
    let (out, _, _) = bench(&["--scenario", "Z"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}
