use std::path::Path;
use std::process::Command;

use insenskit::config::ScenarioConfig;
use insenskit::scenario::{run_scenario, verify_control_file, write_outputs, RunOptions, Subcommand};
use insenskit::Error;

const SMALL: &str = r#"
[domain]
nx = 9
ny = 9
omega = { shape = "rect", x0 = 0.55, x1 = 0.9, y0 = 0.1, y1 = 0.9 }
theta = { shape = "disk", cx = 0.3, cy = 0.5, r = 0.2 }

[time]
nt = 8
"#;

const BUMP: &str = r#"
[source]
kind = "gaussian_bump"
cx = 0.45
cy = 0.5
s = 0.1
"#;

fn cfg(text: &str) -> ScenarioConfig {
    ScenarioConfig::from_str_in(text, Path::new(".")).unwrap()
}

#[test]
fn zero_source_approx_meets_with_zero_kernels() {
    let art = run_scenario(&cfg(SMALL), Subcommand::RunApprox, RunOptions::default()).unwrap();
    assert_eq!(art.report.exit_code(), 0);
    assert_eq!(art.report.results["kernel_l1_before"], 0.0);
    assert_eq!(art.report.results["kernel_l1_after"], 0.0);
}

#[test]
fn empty_directions_are_rejected() {
    let e = ScenarioConfig::from_str_in(&format!("{SMALL}[directions]\nfields = []\n"), Path::new(".")).unwrap_err();
    assert!(matches!(e, Error::Validation(_)));
    let e = run_scenario(&cfg(SMALL), Subcommand::RunExactFd, RunOptions::default()).unwrap_err();
    assert!(matches!(e.root(), Error::Validation(_)), "{e}");
}

#[test]
fn reports_are_deterministic() {
    let c = cfg(&format!("{SMALL}{BUMP}[control]\nepsilon_relative = 0.1\nalpha_end = 1e-6\n"));
    let a = run_scenario(&c, Subcommand::RunApprox, RunOptions { seed: 3, parallel: false }).unwrap();
    let b = run_scenario(&c, Subcommand::RunApprox, RunOptions { seed: 3, parallel: false }).unwrap();
    assert_eq!(a.report.results, b.report.results);
    assert_eq!(a.report.run_id, b.report.run_id);
    assert_eq!(a.summary_csv, b.summary_csv);
    assert_eq!(a.kernel_dat, b.kernel_dat);
    let other = run_scenario(&c, Subcommand::RunApprox, RunOptions { seed: 4, parallel: false }).unwrap();
    assert_ne!(other.report.run_id, a.report.run_id);
}

#[test]
fn persisted_control_reproduces_the_report() {
    let c = cfg(&format!("{SMALL}{BUMP}[control]\nepsilon_relative = 0.1\nalpha_end = 1e-6\n[output]\nsvg = true\n"));
    let art = run_scenario(&c, Subcommand::RunApprox, RunOptions::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let files = write_outputs(&art, dir.path(), true).unwrap();
    for name in ["report.json", "summary.csv", "kernel.dat", "schedule.dat", "kernel.svg", "schedule.svg", "control.iskc"] {
        assert!(files.iter().any(|p| p.ends_with(name)), "{name} missing");
    }
    let reported = art.report.results["kernel_l1_after"].as_f64().unwrap();
    let replayed = verify_control_file(&c, &dir.path().join("control.iskc")).unwrap();
    assert!((replayed - reported).abs() <= 1e-12 * reported.abs().max(1e-300), "{replayed} vs {reported}");
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(json["results"]["kernel_l1_after"].as_f64().unwrap(), reported);
    assert_eq!(json["config"]["time"]["nt"], 8);
}

#[test]
fn exact_fd_on_a_small_grid() {
    let text = format!(
        "{SMALL}{BUMP}[directions]\nfields = [{{ type = \"face_dilation\", face = \"right\" }}]\nepsilon_relative = 0.5\nalpha_end = 1e-5\n"
    );
    let art = run_scenario(&cfg(&text), Subcommand::RunExactFd, RunOptions::default()).unwrap();
    let r = &art.report.results;
    assert_eq!(r["m"], 1);
    assert!(art.summary_csv.starts_with("k,U_k,c_k,lambda_k\n"));
    assert_eq!(r["replay_relative_difference"], 0.0);
}

#[test]
fn verify_summary_has_the_documented_columns() {
    let text = format!("{SMALL}[domain.omega]\n");
    // Table redefinition is a parse error, not a panic.
    assert!(matches!(ScenarioConfig::from_str_in(&text, Path::new(".")), Err(Error::Parse(_))));
    let c = cfg(&(SMALL.replace("r = 0.2", "r = 0.15").replace("nt = 8", "nt = 16") + BUMP));
    let art = run_scenario(&c, Subcommand::VerifyShapeDerivative, RunOptions::default()).unwrap();
    let mut lines = art.summary_csv.lines();
    assert_eq!(lines.next(), Some("tau,J_plus,J_minus,fd_value,formula_value,rel_err"));
    assert_eq!(lines.count(), 3);
}

fn cli(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_insenskit")).args(args).output().unwrap()
}

#[test]
fn cli_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let good = dir.path().join("good.toml");
    std::fs::write(&good, SMALL).unwrap();
    let o = cli(&["run", "approx", "--config", good.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("report.json").exists() && out.join("control.iskc").exists());

    let o = cli(&["run", "approx", "--config", dir.path().join("missing.toml").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));

    let typo = dir.path().join("typo.toml");
    std::fs::write(&typo, format!("{SMALL}[control]\nalpah = 1\n")).unwrap();
    let o = cli(&["run", "approx", "--config", typo.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("alpah") && err.contains("line"), "{err}");

    // A budget too small for the requested accuracy is best effort, not an error.
    let tight = dir.path().join("tight.toml");
    std::fs::write(&tight, format!("{SMALL}{BUMP}[control]\nepsilon_relative = 1e-9\nalpha_start = 1e-2\nalpha_end = 1e-3\n")).unwrap();
    let o = cli(&["run", "approx", "--config", tight.to_str().unwrap(), "--out", out.to_str().unwrap(), "--seed", "7"]);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));

    let no_section = dir.path().join("plain.toml");
    std::fs::write(&no_section, SMALL).unwrap();
    let o = cli(&["run", "constructive", "--config", no_section.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("[constructive]"));
}
