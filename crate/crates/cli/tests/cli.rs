use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn freeflyer(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_freeflyer"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn plan_writes_round_trippable_files() {
    let dir = tempfile::tempdir().unwrap();
    let o = freeflyer(&["--out", s(dir.path()), "--seed", "3", "plan"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for f in ["raw.csv", "smoothed.csv", "plan.json", "manifest.json", "timing.json"] {
        assert!(dir.path().join(f).is_file(), "missing {f}");
    }
    let text = fs::read_to_string(dir.path().join("smoothed.csv")).unwrap();
    let traj = freeflyer::io::trajectory_from_csv(&text).unwrap();
    assert_eq!(freeflyer::io::trajectory_to_csv(&traj), text);
    let plan: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("plan.json")).unwrap()).unwrap();
    assert!(plan["smoothed_cost"].as_f64().unwrap() <= plan["raw_cost"].as_f64().unwrap());
}

#[test]
fn malformed_config_exits_1_with_position() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "seed = 1\n[planner]\ngamma = \"wide\"\n").unwrap();
    let o = freeflyer(&["--config", s(&cfg), "--out", s(dir.path()), "plan"]);
    assert_eq!(code(&o), 1);
    let err = stderr(&o);
    assert!(err.contains("line 3"), "{err}");
    assert!(err.contains("gamma"), "{err}");
}

#[test]
fn unknown_config_key_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "[world]\nsafty_factor = 2.0\n").unwrap();
    let o = freeflyer(&["--config", s(&cfg), "--out", s(dir.path()), "plan"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("safty_factor"));
}

#[test]
fn boxed_in_goal_exits_2() {
    // a slab spanning the whole workspace separates the assembly area from the printer
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("walled.toml");
    fs::write(
        &cfg,
        "[planner]\nmax_iterations = 150\n\n[[world.obstacles]]\ncenter = [1.5, 1.5, 1.0]\nsemi_axes = [0.2, 10.0, 10.0]\n",
    )
    .unwrap();
    let o = freeflyer(&["--config", s(&cfg), "--out", s(dir.path()), "plan"]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    assert!(stderr(&o).contains("planning failed"));
    assert!(!dir.path().join("raw.csv").exists());
}

#[test]
fn missing_output_directory_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope");
    let o = freeflyer(&["--out", s(&missing), "pipeline", "--segment", "1"]);
    assert_eq!(code(&o), 1);
}

#[test]
fn bad_flag_exits_1() {
    let o = freeflyer(&["pipeline", "--segment", "4"]);
    assert_eq!(code(&o), 1);
}

#[test]
fn empty_run_directory_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let o = freeflyer(&["export-plots", s(dir.path())]);
    assert_eq!(code(&o), 1);
}

#[test]
fn default_config_parses_back() {
    let o = freeflyer(&["default-config"]);
    assert_eq!(code(&o), 0);
    let text = String::from_utf8(o.stdout).unwrap();
    let file = freeflyer::config::ScenarioFile::from_toml_str(&text).unwrap();
    assert_eq!(file, freeflyer::config::ScenarioFile::default());
}

#[test]
fn pipeline_is_reproducible_and_exports() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        let o = freeflyer(&["--out", s(d.path()), "--seed", "11", "pipeline"]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    for f in [
        "summary.json",
        "segment1/executed.csv",
        "segment2/executed.csv",
        "segment2/estimation.json",
        "segment3/executed.csv",
        "segment3/report.json",
        "segment3/ablation1.csv",
    ] {
        let x = fs::read(a.path().join(f)).unwrap();
        let y = fs::read(b.path().join(f)).unwrap();
        assert!(x == y, "{f} differs between runs");
    }
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(a.path().join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["completed"], true);
    let scenario = fs::read_to_string(a.path().join("scenario.toml")).unwrap();
    assert!(scenario.contains("seed = 11"));

    let o = freeflyer(&["export-plots", s(a.path())]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let plots = a.path().join("plots");
    let pos = fs::read_to_string(plots.join("segment1_executed_position.csv")).unwrap();
    assert_eq!(pos.lines().next().unwrap(), "t,rx,ry,rz,vx,vy,vz");
    let est = fs::read_to_string(plots.join("segment2_estimates.csv")).unwrap();
    assert!(est.starts_with("iteration,cost,mass,Ixx,Iyy,Izz,var_mass"));
    assert!(est.lines().count() > 2);

    let only = tempfile::tempdir().unwrap();
    let o = freeflyer(&["export-plots", s(a.path()), "--out", s(only.path()), "--export", "summary"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let names: Vec<_> = fs::read_dir(only.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(names, vec![std::ffi::OsString::from("summary.csv")]);
}
