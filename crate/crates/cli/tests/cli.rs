use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_chromapulse"));
    c.env_remove("CHROMAPULSE_SEED");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn json(o: &Output) -> serde_json::Value {
    serde_json::from_slice(&o.stdout).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&o.stderr)))
}

#[test]
fn dump_defaults_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("defaults.toml");
    let first = run(&["dump-defaults", "-o", path.to_str().unwrap()]);
    assert!(first.status.success());
    let second = run(&["--config", path.to_str().unwrap(), "dump-defaults"]);
    assert_eq!(stdout(&second), std::fs::read_to_string(&path).unwrap());
    let reloaded = run(&["--config", path.to_str().unwrap(), "pairs", "--no-colors"]);
    assert!(reloaded.status.success());
}

#[test]
fn pairs_exit_codes() {
    let o = run(&["pairs"]);
    assert_eq!(o.status.code(), Some(0));
    let v = json(&o);
    let feasible = v.as_array().unwrap().iter().filter(|e| e["c1"].is_array()).count();
    assert!(feasible >= 27, "{feasible}");

    let o = run(&["pairs", "--no-colors"]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(json(&o), serde_json::json!([]));

    let o = run(&["pairs", "--color", "255,255,255"]);
    assert_eq!(o.status.code(), Some(2));

    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[palette]\ncolors = [[300, 0, 0]]\n").unwrap();
    let o = run(&["--config", cfg.to_str().unwrap(), "pairs"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn repro_targets() {
    let o = run(&["repro", "thresholds"]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.contains("110.64") && text.contains("112.33"), "{text}");

    let o = run(&["repro", "table1", "--trials", "500"]);
    assert!(o.status.success(), "{}", stdout(&o));
    let text = stdout(&o);
    assert!(text.contains("59.5") && text.contains("46.5"));
    assert!(text.contains("DEVIATION") && !text.contains("FAIL"));

    let o = run(&["repro", "table2"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("possible values"));
}

fn encode_stimulus(dir: &Path) {
    let o = run(&[
        "encode",
        "--stimulus",
        "--duration",
        "1.5",
        "--map-out",
        dir.join("map.json").to_str().unwrap(),
        "-o",
        dir.join("s.cvf").to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn encode_then_simulate_trajectory() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    encode_stimulus(d);
    let cvf = std::fs::read(d.join("s.cvf")).unwrap();
    assert_eq!(&cvf[..4], b"CVF1");
    assert_eq!(cvf.len(), 21 + 90 * 150 * 70 * 3);
    std::fs::write(
        d.join("traj.json"),
        r#"{"waypoints":[{"t_s":0.2,"x_mm":30,"y_mm":35},{"t_s":0.9,"x_mm":135,"y_mm":35}]}"#,
    )
    .unwrap();
    let sim = |out: &str, jobs: &str| {
        let o = run(&[
            "--jobs",
            jobs,
            "simulate",
            "--stream",
            d.join("s.cvf").to_str().unwrap(),
            "--map",
            d.join("map.json").to_str().unwrap(),
            "--trajectory",
            d.join("traj.json").to_str().unwrap(),
            "--receiver",
            "ideal",
            "-o",
            d.join(out).to_str().unwrap(),
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    };
    sim("a", "1");
    sim("b", "4");
    for f in ["report.json", "records.csv", "events.csv", "timeline.csv"] {
        let a = std::fs::read(d.join("a").join(f)).unwrap();
        assert_eq!(a, std::fs::read(d.join("b").join(f)).unwrap(), "{f}");
    }
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(d.join("a/report.json")).unwrap()).unwrap();
    let rec = &report["records"][0];
    assert_eq!(rec["direction"], "TURN_ON");
    assert!((rec["t_boundary_s"].as_f64().unwrap() - 0.5).abs() < 1e-12);
    let total = rec["t_total_s"].as_f64().unwrap();
    assert!((0.0428 - 1e-9..=0.0595 + 1e-4).contains(&total), "{total}");
}

#[test]
fn simulate_needs_inputs() {
    let o = run(&["simulate"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn seed_precedence() {
    let preset = ["simulate", "--preset", "table1", "--trials", "20"];
    let with_env = |seed: &str, extra: &[&str]| {
        let o = bin().env("CHROMAPULSE_SEED", seed).args(extra).args(preset).output().unwrap();
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        o.stdout
    };
    let a = with_env("5", &[]);
    assert_eq!(a, with_env("5", &[]));
    assert_ne!(a, with_env("6", &[]));
    assert_eq!(a, with_env("6", &["--seed", "5"]));
    let o = bin().env("CHROMAPULSE_SEED", "x").args(preset).output().unwrap();
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn sweep_preset_reaches_delays() {
    let o = run(&["simulate", "--preset", "sweep", "--trials", "50"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rows = json(&o);
    let rows = rows.as_array().unwrap();
    assert_eq!(rows.len(), 16);
    for r in rows {
        let d = r["delay_ms"].as_f64().unwrap();
        assert!(r["realized_ms"]["max"].as_f64().unwrap() <= d + 1e-6);
    }
}

#[test]
fn fit_recovers_model_threshold() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("r.csv");
    let (k, x0) = (0.0316, 110.64);
    let n = 100_000u32;
    let mut text = String::from("latency_ms,positives,trials\n");
    for x in [60.0, 80.0, 90.0, 100.0, 110.0, 120.0, 130.0, 150.0] {
        let p = 1.0 / (1.0 + f64::exp(-k * (x - x0)));
        text.push_str(&format!("{x},{},{n}\n", (p * n as f64).round()));
    }
    std::fs::write(&csv, text).unwrap();
    for method in ["least-squares", "max-likelihood"] {
        let o = run(&["fit", csv.to_str().unwrap(), "--method", method]);
        assert!(o.status.success());
        let v = json(&o);
        assert!((v["x0"].as_f64().unwrap() - x0).abs() < 0.05, "{v}");
        assert_eq!(v["n_points"], 8);
    }
    std::fs::write(&csv, "latency_ms,positives,trials\n60,5,3\n").unwrap();
    assert_eq!(run(&["fit", csv.to_str().unwrap()]).status.code(), Some(1));
}
