use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const EXAMPLE_ONE: &str = r#"{
  "version": 1,
  "L": 20, "r": 4, "B": 3, "T": 36,
  "uniform": { "M": 21, "A": 0.01, "R0": 2 }
}
"#;

fn patrol(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_patrol"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("config.json");
    fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

fn summary(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(dir.join("summary.json")).unwrap()).unwrap()
}

fn error_json(out: &Output) -> serde_json::Value {
    serde_json::from_slice(&out.stderr).expect("stderr is JSON")
}

#[test]
fn simulate_writes_all_files() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), EXAMPLE_ONE);
    let out_dir = tmp.path().join("out");
    let out = patrol(&[
        "simulate",
        "--config",
        &cfg,
        "--theta",
        "17.81,1.29",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let s = summary(&out_dir);
    assert!((s["J"].as_f64().unwrap() - 10.24).abs() < 0.01);
    assert_eq!(s["N"], 2);
    assert!(s.get("J_history").is_none());

    let csv = fs::read_to_string(out_dir.join("trajectory.csv")).unwrap();
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(header.len(), 2 + 21);
    assert_eq!(&header[..3], &["t", "s", "R_1"]);
    let times: Vec<f64> = lines
        .map(|l| l.split(',').next().unwrap().parse().unwrap())
        .collect();
    assert!(times.windows(2).all(|w| w[1] > w[0]));
    assert_eq!(times[0], 0.0);
    assert_eq!(*times.last().unwrap(), 36.0);

    let events = fs::read_to_string(out_dir.join("events.csv")).unwrap();
    assert!(events.starts_with("t,kind,detail\n"));
    assert!(events.contains(",switching_point,theta_1\n"));
    assert!(events.contains(",switching_point,theta_2\n"));
}

#[test]
fn repeated_runs_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), EXAMPLE_ONE);
    for sub in ["simulate", "rh"] {
        let a = tmp.path().join(format!("{sub}_a"));
        let b = tmp.path().join(format!("{sub}_b"));
        for dir in [&a, &b] {
            let out = patrol(&[
                sub,
                "--config",
                &cfg,
                "--theta",
                "12",
                "--out",
                dir.to_str().unwrap(),
            ]);
            assert!(out.status.success());
        }
        for file in ["trajectory.csv", "events.csv", "summary.json"] {
            assert_eq!(
                fs::read(a.join(file)).unwrap(),
                fs::read(b.join(file)).unwrap(),
                "{sub}/{file}"
            );
        }
    }
}

#[test]
fn optimize_reports_history() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), EXAMPLE_ONE);
    let out_dir = tmp.path().join("opt");
    let out = patrol(&[
        "optimize",
        "--config",
        &cfg,
        "--theta",
        "12",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let s = summary(&out_dir);
    assert!((s["J"].as_f64().unwrap() - 10.24).abs() < 0.1);
    assert_eq!(s["N"], 2);
    let history: Vec<f64> = s["J_history"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_f64().unwrap())
        .collect();
    assert!(history.len() > 1);
    assert_eq!(s["N_history"], serde_json::json!([1, 2]));
    assert_eq!(s["settings"]["optimizer"]["eps"], 2e-10);
}

#[test]
fn rh_uses_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), EXAMPLE_ONE);
    let out_dir = tmp.path().join("rh");
    let out = patrol(&[
        "rh",
        "--config",
        &cfg,
        "--horizon",
        "6",
        "--action",
        "2",
        "--binary-control",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let s = summary(&out_dir);
    assert_eq!(s["settings"]["H"], 6.0);
    assert_eq!(s["settings"]["h"], 2.0);
    assert_eq!(s["settings"]["search"], "binary");
    assert_eq!(s["controls"].as_array().unwrap().len(), 18);
    let events = fs::read_to_string(out_dir.join("events.csv")).unwrap();
    assert_eq!(events.matches(",control_update,").count(), 18);
}

#[test]
fn gradcheck_table_agrees() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), EXAMPLE_ONE);
    for (extra, name) in [
        (vec!["--theta", "12,4,16"], "given"),
        (vec!["--seed", "11"], "sampled"),
    ] {
        let out_dir = tmp.path().join(name);
        let mut args = vec![
            "gradcheck",
            "--config",
            &cfg,
            "--out",
            out_dir.to_str().unwrap(),
        ];
        args.extend(extra);
        let out = patrol(&args);
        assert!(
            out.status.success(),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
        let s = summary(&out_dir);
        let rows = s["gradient"].as_array().unwrap();
        assert!(!rows.is_empty());
        for row in rows {
            assert!(
                row.get("ipa").is_some() && row.get("fd").is_some() && row.get("rel_err").is_some()
            );
        }
        assert!(s["max_rel_err"].as_f64().unwrap() <= 1e-4);
    }
}

#[test]
fn config_errors_are_machine_readable() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = EXAMPLE_ONE.replace("\"A\": 0.01", "\"A\": 3");
    let cfg = write_config(tmp.path(), &bad);
    let out = patrol(&["simulate", "--config", &cfg, "--theta", "12"]);
    assert!(!out.status.success());
    let err = error_json(&out);
    assert_eq!(err["error"]["code"], "inflow_not_below_service");
    assert_eq!(err["error"]["line"], 4);

    let cfg = write_config(tmp.path(), "{ \"version\": 1,\n  \"L\": 20 ");
    let err = error_json(&patrol(&["simulate", "--config", &cfg, "--theta", "12"]));
    assert_eq!(err["error"]["code"], "syntax");
    assert_eq!(err["error"]["line"], 2);
}

#[test]
fn usage_errors_are_machine_readable() {
    let out = patrol(&["simulate"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_json(&out)["error"]["code"], "usage");

    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), EXAMPLE_ONE);
    let out = patrol(&["simulate", "--config", &cfg, "--theta", "4,12"]);
    assert!(!out.status.success());
    assert_eq!(error_json(&out)["error"]["code"], "invalid_theta");

    let out = patrol(&["simulate", "--config", &cfg]);
    assert_eq!(error_json(&out)["error"]["code"], "missing_theta");

    let out = patrol(&[
        "simulate",
        "--config",
        &cfg,
        "--theta",
        "12",
        "--sample-dt",
        "0",
    ]);
    assert_eq!(error_json(&out)["error"]["code"], "manifest");
}
