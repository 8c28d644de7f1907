mod common;

use std::path::Path;
use std::process::{Command, Output};

fn dci(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dci")).args(args).output().unwrap()
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

#[test]
fn subcommands_write_their_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = common::small_config(dir.path());
    cfg.iterate.steps = vec![2.5];
    let config = dir.path().join("run.toml");
    std::fs::write(&config, cfg.to_toml().unwrap()).unwrap();
    let c = config.to_str().unwrap();
    let out_dir = |name: &str| dir.path().join(name).to_str().unwrap().to_string();

    ok(&dci(&["simulate", "--config", c]));
    assert!(cfg.data.observed.is_file());

    let filtered = out_dir("filtered");
    ok(&dci(&["filter", "--config", c, "--out", &filtered]));
    assert!(Path::new(&filtered).join("filtered_predicted.csv").is_file());
    assert!(Path::new(&filtered).join("filtered_observed.csv").is_file());

    let learned = out_dir("learned");
    ok(&dci(&["learn", "--config", c, "--out", &learned]));
    let state = Path::new(&learned).join("state.msgpack");
    assert!(state.is_file());
    assert!(!Path::new(&learned).join("diagnostics.csv").exists());

    let applied = out_dir("applied");
    let text = ok(&dci(&[
        "apply-obs",
        "--state",
        state.to_str().unwrap(),
        "--observed",
        cfg.data.observed.to_str().unwrap(),
        "--reference",
        cfg.data.reference.as_ref().unwrap().to_str().unwrap(),
        "--out",
        &applied,
    ]));
    assert!(text.contains("diagnostic"));
    assert!(Path::new(&applied).join("diagnostics.csv").is_file());

    let inverted = out_dir("inverted");
    ok(&dci(&["invert", "--config", c, "--out", &inverted, "--seed", "5"]));
    let diag = std::fs::read_to_string(Path::new(&inverted).join("diagnostics.csv")).unwrap();
    assert!(diag.lines().any(|l| l.starts_with("all,")));
    assert!(!Path::new(&inverted).join("iterations.csv").exists());

    let exported = out_dir("exported");
    ok(&dci(&["export-densities", "--state", Path::new(&inverted).join("state.msgpack").to_str().unwrap(), "--out", &exported]));
    assert!(Path::new(&exported).join("density_joint.csv").is_file());

    let iterated = out_dir("iterated");
    ok(&dci(&["iterate", "--config", c, "--out", &iterated]));
    assert!(Path::new(&iterated).join("iterations.csv").is_file());
}

#[test]
fn errors_exit_nonzero_with_a_message() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("absent.toml");
    let out = dci(&["invert", "--config", missing.to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));

    let bad = dci(&["apply-obs", "--state", "s", "--observed", "o", "--layout", "columns"]);
    assert!(!bad.status.success());
}
