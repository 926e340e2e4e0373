use std::process::{Command, Output};

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cloudcond")).args(args).output().unwrap()
}

fn error_line(o: &Output) -> String {
    let stderr = String::from_utf8_lossy(&o.stderr);
    stderr.lines().last().unwrap_or_default().to_string()
}

#[test]
fn show_config_applies_overrides() {
    let o = cli(&["--seed", "17", "--out", "elsewhere", "show-config"]);
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    let cfg = cloudcond::config::RunConfig::from_toml(&text).unwrap();
    assert_eq!(cfg.seed, 17);
    assert_eq!(cfg.out_dir, std::path::PathBuf::from("elsewhere"));
}

#[test]
fn failures_print_one_categorised_line_and_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let out = out.to_str().unwrap();

    let o = cli(&["--out", out, "train-expert"]);
    assert!(!o.status.success());
    assert!(error_line(&o).starts_with("error[missing-prerequisite]: "), "{}", error_line(&o));

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[expert]\nlayers = 3\n").unwrap();
    let o = cli(&["--config", bad.to_str().unwrap(), "gen-data"]);
    assert!(!o.status.success());
    assert!(error_line(&o).starts_with("error[config]: "), "{}", error_line(&o));

    let o = cli(&["--config", "/nonexistent/run.toml", "gen-data"]);
    assert!(error_line(&o).starts_with("error[config]: "), "{}", error_line(&o));

    let o = cli(&["--out", out, "eval", "--arms", "pointnet"]);
    assert!(error_line(&o).starts_with("error[config]: "), "{}", error_line(&o));
}

#[test]
fn existing_output_needs_force() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    assert!(cli(&["--out", out, "report"]).status.success());
    let o = cli(&["--out", out, "report"]);
    assert!(error_line(&o).starts_with("error[exists]: "), "{}", error_line(&o));
    let o = cli(&["--out", out, "--force", "report"]);
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stdout).contains("absent"));
}
