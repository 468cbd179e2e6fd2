use std::path::Path;
use std::process::{Command, Output};

fn raypos(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_raypos"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn write(dir: &Path, name: &str, text: &str) {
    std::fs::write(dir.join(name), text).unwrap();
}

const CONFIG: &str = r#"{
  "scene": {"file": "room.json"},
  "drops": 3,
  "n_rays": 200,
  "estimators": ["gmm_online", "square"],
  "truth": {"n_polar": 200, "n_azimuth": 400}
}"#;

#[test]
fn scene_gen_then_validate() {
    let dir = tempfile::tempdir().unwrap();
    let out = raypos(&["scene", "gen", "--clutter", "3", "--out", "room.json"], dir.path());
    assert!(out.status.success());
    let out = raypos(&["scene", "validate", "room.json"], dir.path());
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("ok: 48 triangles"));
}

#[test]
fn broken_inputs_exit_with_validation_code() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert!(raypos(&["scene", "gen", "--clutter", "0", "--out", "room.json"], d).status.success());
    let mut scene: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("room.json")).unwrap()).unwrap();
    let t = scene["triangles"][3].as_array_mut().unwrap();
    for i in 6..9 {
        t[i] = t[i - 3].clone();
    }
    write(d, "bad_scene.json", &scene.to_string());
    let out = raypos(&["scene", "validate", "bad_scene.json"], d);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("triangle 3"));

    write(d, "zero_drops.json", r#"{"drops": 0}"#);
    assert_eq!(raypos(&["run", "--config", "zero_drops.json"], d).status.code(), Some(2));
    write(d, "typo.json", r#"{"dropz": 5}"#);
    assert_eq!(raypos(&["run", "--config", "typo.json"], d).status.code(), Some(2));
}

#[test]
fn run_cdf_and_locate() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert!(raypos(&["scene", "gen", "--clutter", "0", "--out", "room.json"], d).status.success());
    write(d, "cfg.json", CONFIG);
    let out = raypos(&["run", "--config", "cfg.json", "--out", "report.json", "--timings", "t.json"], d);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["drops"].as_array().unwrap().len(), 3);
    let times: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("t.json")).unwrap()).unwrap();
    assert!(times["fit_s"].as_f64().unwrap() >= 0.0);

    let out = raypos(&["cdf", "--report", "report.json", "--estimator", "square"], d);
    assert!(out.status.success());
    let csv = String::from_utf8(out.stdout).unwrap();
    assert!(csv.starts_with("error_m,cum_frac\n"));
    assert!(csv.trim_end().ends_with(",1"));

    // Re-locating drop 0 from its recorded measurements reproduces the run.
    let drop = &report["drops"][0];
    let ms: Vec<serde_json::Value> = drop["stations"]
        .as_array()
        .unwrap()
        .iter()
        .map(|m| {
            serde_json::json!({
                "station_id": m["station_id"],
                "azimuth_deg": m["measured"]["azimuth"].as_f64().unwrap().to_degrees(),
                "polar_deg": m["measured"]["polar"].as_f64().unwrap().to_degrees(),
            })
        })
        .collect();
    write(d, "m.json", &serde_json::to_string(&ms).unwrap());
    let out = raypos(&["locate", "--config", "cfg.json", "--measurements", "m.json"], d);
    assert!(out.status.success());
    let got: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let want = drop["outcomes"].as_array().unwrap().iter().find(|o| o["estimator"] == "gmm_online").unwrap();
    assert_eq!(got["cell"], want["cell"]);

    write(d, "one.json", r#"[{"station_id": 0, "azimuth_deg": 10.0, "polar_deg": 100.0}]"#);
    let out = raypos(&["locate", "--config", "cfg.json", "--measurements", "one.json"], d);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn table_build_and_inspect() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert!(raypos(&["scene", "gen", "--clutter", "0", "--out", "room.json"], d).status.success());
    write(
        d,
        "cfg.json",
        r#"{"scene": {"file": "room.json"}, "table": {"az_step_deg": 30, "polar_step_deg": 30, "n_rays": 50}}"#,
    );
    let out = raypos(&["table", "build", "--config", "cfg.json", "--out", "t.pdft"], d);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let out = raypos(&["table", "inspect", "t.pdft", "--scene", "room.json"], d);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.matches("station ").count(), 4);
    assert!(text.contains("grid 12x6 (72 cells)"));

    assert!(raypos(&["scene", "gen", "--clutter", "1", "--out", "other.json"], d).status.success());
    let out = raypos(&["table", "inspect", "t.pdft", "--scene", "other.json"], d);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn bench_writes_timing_csv() {
    let dir = tempfile::tempdir().unwrap();
    let out = raypos(&["bench", "--clutter", "0,2", "--n", "50,100", "--b", "1", "--repeats", "1"], dir.path());
    assert!(out.status.success());
    let csv = String::from_utf8(out.stdout).unwrap();
    assert!(csv.starts_with("t,n,b,seconds\n12,50,1,"));
    assert_eq!(csv.lines().count(), 5);
}
