use std::path::Path;
use std::process::{Command, Output};

use extattr::cli::{read_maps_csv, MAP_COLUMNS};

fn extattr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_extattr"))
        .args(args)
        .env("RUST_LOG", "warn")
        .env("EXTATTR_THREADS", "2")
        .output()
        .expect("binary runs")
}

fn small_config(dir: &Path) -> String {
    let p = dir.join("run.json");
    std::fs::write(
        &p,
        r#"{
  "output_dir": "out",
  "simulate": {"nx": 3, "ny": 3, "start_year": 1900, "end_year": 1999},
  "schedule": {"iters": 1200, "burnin": 200, "thin": 1},
  "chains": 2,
  "hotspot": {"thresholds": [0.35]}
}"#,
    )
    .unwrap();
    p.to_str().unwrap().to_string()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn pipeline_rerun_is_up_to_date_and_exports_maps() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());

    let first = extattr(&["pipeline", "-c", &cfg]);
    assert_eq!(first.status.code(), Some(0), "{}", stderr(&first));
    assert!(stdout(&first).contains("smooth: done"));
    let out = dir.path().join("out");
    for f in ["draws/chain0.draws", "causal/delta_1900-1999.csv", "hotspot/hotspot_u0.35.csv", "diagnostics/rhat.csv"] {
        assert!(out.join(f).is_file(), "missing {f}");
    }

    let second = extattr(&["pipeline", "-c", &cfg]);
    assert_eq!(second.status.code(), Some(0));
    let s = stdout(&second);
    for stage in ["simulate", "max", "smooth", "causal", "hotspot", "diagnose"] {
        assert!(s.contains(&format!("{stage}: up to date")), "{s}");
    }

    // touching an input invalidates the stages downstream of it
    let summary = out.join("causal/delta_1900-1999.csv");
    let text = std::fs::read_to_string(&summary).unwrap();
    std::fs::write(&summary, text + "\n").unwrap();
    let third = extattr(&["pipeline", "-c", &cfg]);
    let s = stdout(&third);
    assert!(s.contains("smooth: up to date") && s.contains("causal: done"), "{s}");

    let exported = extattr(&["export-maps", "-c", &cfg]);
    assert_eq!(exported.status.code(), Some(0), "{}", stderr(&exported));
    let rows = read_maps_csv(&out.join("maps/maps.csv")).unwrap();
    assert!(rows.iter().any(|r| r.field.starts_with("delta")));
    let regions: Vec<_> = rows.iter().filter(|r| r.in_region.is_some()).collect();
    assert_eq!(regions.len(), 9);
    let header = std::fs::read_to_string(out.join("maps/maps.csv")).unwrap();
    assert_eq!(header.lines().next().unwrap(), MAP_COLUMNS.join(","));
}

#[test]
fn missing_panel_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = dir.path().join("out");
    let cov = dir.path().join("cov.csv");
    std::fs::write(&cov, "cell_id,lon,lat\na,0,0\n").unwrap();
    let r = extattr(&[
        "max",
        "--panel",
        "no-such-panel.csv",
        "--covariates",
        cov.to_str().unwrap(),
        "-o",
        o.to_str().unwrap(),
    ]);
    assert_eq!(r.status.code(), Some(2));
    assert!(stderr(&r).contains("no-such-panel.csv"), "{}", stderr(&r));
}

#[test]
fn bad_schedule_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let r = extattr(&["pipeline", "-c", &cfg, "--iters", "100", "--burnin", "200"]);
    assert_eq!(r.status.code(), Some(2), "{}", stderr(&r));
}

#[test]
fn unknown_config_field_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.json");
    std::fs::write(&p, r#"{"panel": "p.csv", "chians": 3}"#).unwrap();
    let r = extattr(&["max", "-c", p.to_str().unwrap()]);
    assert_eq!(r.status.code(), Some(2));
    assert!(stderr(&r).contains("chians"), "{}", stderr(&r));
}

#[test]
fn unknown_subcommand_exits_2() {
    assert_eq!(extattr(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(extattr(&["--version"]).status.code(), Some(0));
}

#[test]
fn simulate_writes_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let o = dir.path().join("sim");
    let r = extattr(&["simulate", "-o", o.to_str().unwrap(), "--nx", "2", "--ny", "2", "--seed", "5"]);
    assert_eq!(r.status.code(), Some(0), "{}", stderr(&r));
    for f in ["panel.csv", "covariates.csv", "truth.json"] {
        assert!(o.join("data").join(f).is_file(), "missing {f}");
    }
}
