use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bundled(name: &str) -> String {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("scenarios").join(format!("{name}.toml"));
    std::fs::read_to_string(path).unwrap()
}

/// Bundled scenario shortened to `t_final` and renamed; the decay check is
/// dropped since it needs the full horizon.
fn write_short(dir: &Path, name: &str, new_name: &str, t_final: &str) -> PathBuf {
    let text = bundled(name)
        .replace("t_final = 5.0", &format!("t_final = {t_final}"))
        .replace("decay_ratio = 1e-3\n", "")
        .replace(&format!("name = \"{name}\""), &format!("name = \"{new_name}\""));
    let path = dir.join(format!("{new_name}.toml"));
    std::fs::write(&path, text).unwrap();
    path
}

fn pdecbf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pdecbf")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn run_writes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_short(dir.path(), "case1_openloop", "open", "2.0");
    let out = dir.path().join("out");
    let o = pdecbf(&["run", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--stride", "100"]);
    assert!(o.status.success(), "{}{}", stdout(&o), stderr(&o));
    assert!(stdout(&o).contains("PASS open"));
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["config"]["name"], "open");
    assert_eq!(report["pass"], true);
    let traj = std::fs::read_to_string(out.join("trajectory.csv")).unwrap();
    assert!(traj.starts_with("t,y1,y2,u0,u1_boundary,U,h,h1,h2,lambda_hat,b_hat\n"));
    assert_eq!(traj.lines().count(), 2002);
    let field = std::fs::read_to_string(out.join("field.csv")).unwrap();
    assert_eq!(field.lines().count(), 1 + 21);
}

#[test]
fn failing_check_exits_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    // the open loop does not decay
    let text = bundled("case1_openloop")
        .replace("growth_from = 1.0", "growth_from = 1.0\ndecay_ratio = 1e-3")
        .replace("t_final = 5.0", "t_final = 1.5");
    let cfg = dir.path().join("wrong.toml");
    std::fs::write(&cfg, text).unwrap();
    let o = pdecbf(&["run", cfg.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1), "{}", stdout(&o));
    assert!(stdout(&o).contains("FAIL"));
}

#[test]
fn period_not_multiple_of_dt_is_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, bundled("case1_safe").replace("period = 0.5", "period = 0.5005")).unwrap();
    let out = dir.path().join("never");
    let o = pdecbf(&["run", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("config error"), "{}", stderr(&o));
    assert!(!out.exists());
}

#[test]
fn unknown_field_reports_location() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("typo.toml");
    std::fs::write(&cfg, bundled("case1_safe").replace("window_periods = 12", "window_period = 12")).unwrap();
    let o = pdecbf(&["run", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("window_period") && err.contains("line"), "{err}");
}

#[test]
fn sweep_runs_in_parallel_and_merges() {
    let dir = tempfile::tempdir().unwrap();
    write_short(dir.path(), "case1_openloop", "a", "1.5");
    write_short(dir.path(), "case1_nominal_unsafe", "b", "1.5");
    let out = dir.path().join("out");
    let pattern = format!("{}/*.toml", dir.path().display());
    let o = pdecbf(&["sweep", &pattern, "--jobs", "2", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}{}", stdout(&o), stderr(&o));
    assert!(stdout(&o).contains("2/2 scenarios passed"));
    let rows: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("sweep.json")).unwrap()).unwrap();
    assert_eq!(rows.as_array().unwrap().len(), 2);
    assert!(out.join("a/report.json").exists() && out.join("b/report.json").exists());
}

#[test]
fn sweep_empty_glob_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let pattern = format!("{}/*.toml", dir.path().display());
    let o = pdecbf(&["sweep", &pattern]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("no scenario"));
}

#[test]
fn sweep_output_collision() {
    let dir = tempfile::tempdir().unwrap();
    write_short(dir.path(), "case1_openloop", "same", "0.5");
    let text = std::fs::read_to_string(dir.path().join("same.toml")).unwrap();
    std::fs::write(dir.path().join("copy.toml"), text).unwrap();
    let pattern = format!("{}/*.toml", dir.path().display());
    let o = pdecbf(&["sweep", &pattern, "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("collision"), "{}", stderr(&o));
}

#[test]
fn strict_turns_warnings_into_failures() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_short(dir.path(), "case1_nominal_unsafe", "strict", "1.0");
    let lenient = pdecbf(&["run", cfg.to_str().unwrap(), "--out", dir.path().join("a").to_str().unwrap()]);
    assert!(lenient.status.success());
    assert!(stdout(&lenient).contains("WARN amplitude_condition"));
    let strict = pdecbf(&["run", cfg.to_str().unwrap(), "--strict", "--out", dir.path().join("b").to_str().unwrap()]);
    assert_eq!(strict.status.code(), Some(1));
}
