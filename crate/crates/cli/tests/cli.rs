use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

const GEOM: [&str; 6] = ["--n", "24", "--m", "2", "--spacing", "0.25"];

fn nearfield(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nearfield"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn run_ok(args: &[&str]) -> String {
    let out = nearfield(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn json(text: &str) -> serde_json::Value {
    serde_json::from_str(text).expect("JSON output")
}

fn with_geom<'a>(head: &[&'a str], tail: &[&'a str]) -> Vec<&'a str> {
    head.iter().chain(GEOM.iter()).chain(tail).copied().collect()
}

fn simulate(dir: &Path, snr: &str) -> (String, serde_json::Value) {
    let path = dir.join("snap.bin").to_string_lossy().into_owned();
    let truth = run_ok(&with_geom(
        &["simulate"],
        &["--r", "3", "--snr-db", snr, "--seed", "11", "--out", &path],
    ));
    (path, json(&truth))
}

fn distance(est: &serde_json::Value, truth: &serde_json::Value) -> f64 {
    ["x", "y", "z"]
        .iter()
        .map(|k| (est[k].as_f64().unwrap() - truth[k].as_f64().unwrap()).powi(2))
        .sum::<f64>()
        .sqrt()
}

#[test]
fn estimators_locate_a_simulated_snapshot() {
    let dir = TempDir::new().unwrap();
    let (snap, truth) = simulate(dir.path(), "40");
    assert_eq!(std::fs::metadata(&snap).unwrap().len(), 16 + 24 * 24 * 16);

    let aple = json(&run_ok(&with_geom(&["aple"], &["--snapshot", &snap])));
    assert!(distance(&aple, &truth) < 0.1, "{aple}");

    let eaple = json(&run_ok(&with_geom(&["eaple"], &["--snapshot", &snap])));
    assert!(distance(&eaple, &truth) < 0.01, "{eaple}");

    let around = format!(
        "{},{},{}",
        truth["r"].as_f64().unwrap(),
        truth["omega"].as_f64().unwrap(),
        truth["phi"].as_f64().unwrap()
    );
    let omp = json(&run_ok(&with_geom(
        &["omp"],
        &["--snapshot", &snap, "--around", &around, "--window", "0.3,0.06"],
    )));
    assert!(distance(&omp, &truth) < 0.1, "{omp}");
    assert!(omp["grid_nodes"].as_u64().unwrap() > 0);
}

#[test]
fn verbose_traces_have_five_columns() {
    let dir = TempDir::new().unwrap();
    let (snap, _) = simulate(dir.path(), "20");
    for cmd in ["aple", "eaple"] {
        let out = nearfield(&with_geom(&[cmd], &["--snapshot", &snap, "--verbose"]));
        assert!(out.status.success());
        let trace = String::from_utf8(out.stderr).unwrap();
        let lines: Vec<&str> = trace.lines().collect();
        assert!(!lines.is_empty(), "{cmd}");
        for (i, line) in lines.iter().enumerate() {
            let cells: Vec<&str> = line.split(", ").collect();
            assert_eq!(cells.len(), 5, "{cmd}: {line}");
            assert_eq!(cells[0].parse::<usize>().unwrap(), i);
            assert!(cells[1..].iter().all(|c| c.parse::<f64>().unwrap().is_finite()));
        }
    }
}

#[test]
fn flags_override_the_config_file() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"geometry": {"n_x": 16, "n_y": 16, "spacing": {"wavelengths": 0.5}, "frequency_hz": 1e10}}"#)
        .unwrap();
    let snap = dir.path().join("s.bin");
    let cfg = cfg.to_string_lossy();
    let snap_s = snap.to_string_lossy();
    run_ok(&["simulate", "--config", &cfg, "--out", &snap_s]);
    assert_eq!(std::fs::metadata(&snap).unwrap().len(), 16 + 256 * 16);
    run_ok(&["simulate", "--config", &cfg, "--n", "20", "--out", &snap_s]);
    assert_eq!(std::fs::metadata(&snap).unwrap().len(), 16 + 400 * 16);
}

#[test]
fn bounds_emit_one_row_per_draw() {
    let csv = run_ok(&with_geom(&["bounds"], &["--r", "3", "--trials", "4", "--seed", "2"]));
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "seed,r,omega,phi,crb_pos,mcrb_pos");
    assert_eq!(lines.len(), 5);
    for line in &lines[1..] {
        let cells: Vec<f64> = line.split(',').map(|c| c.parse().unwrap()).collect();
        assert_eq!(cells[1], 3.0);
        assert!(cells[5] >= cells[4] * 0.999, "{line}");
    }
    let crb_only = run_ok(&with_geom(&["bounds"], &["--r", "3", "--trials", "2", "--crb-only"]));
    assert!(crb_only.lines().nth(1).unwrap().ends_with(','));
}

fn sweep_args(out: &str) -> Vec<&str> {
    with_geom(
        &["sweep"],
        &[
            "--r", "3", "--seed", "9", "--trials", "6", "--out", out, "--values", "10,20", "--methods", "aple,eaple",
            "--no-runtime",
        ],
    )
}

#[test]
fn sweeps_are_byte_reproducible_and_render_reports() {
    let dir = TempDir::new().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    run_ok(&sweep_args(&a.to_string_lossy()));
    run_ok(&sweep_args(&b.to_string_lossy()));
    for name in ["summary.csv", "trials_snr_db_10.csv", "trials_snr_db_20.csv"] {
        let x = std::fs::read(a.join(name)).unwrap();
        assert_eq!(x, std::fs::read(b.join(name)).unwrap(), "{name}");
        assert!(!x.is_empty());
    }
    assert!(a.join("metadata.json").exists());

    let summary = std::fs::read_to_string(a.join("summary.csv")).unwrap();
    assert!(summary.starts_with("sweep_axis,sweep_value,method,rmse_m,trials_ok,trials_flagged,mean_runtime_s,crb_m,mcrb_m"));
    let trials = std::fs::read_to_string(a.join("trials_snr_db_20.csv")).unwrap();
    assert!(trials.starts_with("trial,seed,snr_db,r,omega,phi,method,x_hat,y_hat,z_hat,err_m,runtime_s,flags"));
    assert_eq!(trials.lines().count(), 1 + 6 * 2);

    let label = format!("24x24={}", a.join("summary.csv").display());
    let md = run_ok(&["report", "--summary", &label]);
    let rows: Vec<&str> = md.lines().collect();
    assert_eq!(rows.len(), 3);
    assert!(rows[0].contains("APLE snr_db=10") && rows[0].contains("CRB snr_db=20"));
    let mut reader = csv::Reader::from_reader(summary.as_bytes());
    let first = reader.records().next().unwrap().unwrap();
    let rmse: f64 = first[3].parse().unwrap();
    let cell: f64 = rows[2].split('|').nth(2).unwrap().trim().parse().unwrap();
    assert!((cell - rmse).abs() < 5e-5);
}

#[test]
fn exit_codes() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("o").to_string_lossy().into_owned();

    // Mandatory sweep flags.
    assert_eq!(nearfield(&["sweep", "--trials", "2", "--out", &out]).status.code(), Some(2));
    // Inconsistent partition.
    assert_eq!(
        nearfield(&["sweep", "--n", "24", "--m", "7", "--seed", "1", "--trials", "2", "--out", &out]).status.code(),
        Some(2)
    );
    // Malformed config file.
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{not json").unwrap();
    assert_eq!(nearfield(&["bounds", "--config", &bad.to_string_lossy()]).status.code(), Some(2));
    // Unknown estimator.
    assert_eq!(
        nearfield(&["sweep", "--methods", "music", "--seed", "1", "--trials", "2", "--out", &out]).status.code(),
        Some(2)
    );

    // A search window that misses the range bracket makes every grid empty.
    let cfg = dir.path().join("omp.json");
    std::fs::write(
        &cfg,
        r#"{"omp": {"r_range": [5, 6], "window": {"r_half_width": 0.2, "angle_half_width": 0.1}},
            "methods": ["omp"], "max_failure_fraction": 0.5}"#,
    )
    .unwrap();
    let cfg = cfg.to_string_lossy();
    let run = nearfield(&with_geom(
        &["sweep", "--config", &cfg],
        &["--r", "3", "--seed", "1", "--trials", "3", "--out", &out],
    ));
    assert_eq!(run.status.code(), Some(3));
    assert!(Path::new(&out).join("summary.csv").exists());
    let trials = std::fs::read_to_string(Path::new(&out).join("trials_snr_db_20.csv")).unwrap();
    assert!(trials.contains("failed: configuration error: polar grid is empty"));
}
