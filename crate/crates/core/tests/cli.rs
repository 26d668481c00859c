//! Black-box checks of the ldctsim binary: exit codes, the single-line
//! error contract, and a desk-size run of every verb.

use std::path::Path;
use std::process::{Command, Output};

fn ldctsim(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ldctsim"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn stderr_line(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).trim_end().to_string()
}

const TINY_CONFIG: &str = r#"
seed = 33

[simulate]
phantoms = 2
test_count = 1
doses_ma = [90.0, 30.0]
geometry = { n_views = 24, n_bins = 24, det_spacing = 0.1, n = 16, pixel_spacing = 0.1, filter = "hann" }

[train]
epochs = 2
batch = 2
patch = 16
lr_flat = 1
lr_decay = 1
base_width = 2
res_blocks = 1
disc_layers = 2
disc_width = 2

[evaluate]
realizations = 3
nps_patch = 16
roi = 1.0
"#;

#[test]
fn every_verb_succeeds_on_a_tiny_run() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.toml"), TINY_CONFIG).unwrap();

    let sim = ldctsim(&["--config", "run.toml", "simulate", "--out", "data"], dir.path());
    assert!(sim.status.success(), "{}", stderr_line(&sim));
    assert!(dir.path().join("data/manifest.toml").is_file());
    let stdout = String::from_utf8_lossy(&sim.stdout).to_string();
    assert!(stdout.contains("2 dose levels"), "{stdout}");

    let train = ldctsim(
        &["--config", "run.toml", "train", "--manifest", "data/manifest.toml", "--out", "run"],
        dir.path(),
    );
    assert!(train.status.success(), "{}", stderr_line(&train));
    assert!(dir.path().join("run/checkpoint.ldct").is_file());
    assert!(dir.path().join("run/loss_log.tsv").is_file());

    let gen = ldctsim(
        &[
            "--config", "run.toml", "generate",
            "--manifest", "data/manifest.toml",
            "--checkpoint", "run/checkpoint.ldct",
            "--out", "gen", "--k", "0", "--k", "3.0",
        ],
        dir.path(),
    );
    assert!(gen.status.success(), "{}", stderr_line(&gen));
    let stdout = String::from_utf8_lossy(&gen.stdout).to_string();
    assert!(stdout.contains("images/second"), "{stdout}");
    assert!(dir.path().join("gen/s000_k0.ldct").is_file());
    assert!(dir.path().join("gen/s002_k3.ldct").is_file());

    let eval = ldctsim(
        &[
            "--config", "run.toml", "evaluate",
            "--manifest", "data/manifest.toml",
            "--checkpoint", "run/checkpoint.ldct",
            "--out", "report",
        ],
        dir.path(),
    );
    assert!(eval.status.success(), "{}", stderr_line(&eval));
    let report = std::fs::read_to_string(dir.path().join("report/report.tsv")).unwrap();
    assert_eq!(report.lines().count(), 1 + 2, "header plus one row per level");
}

#[test]
fn failures_exit_nonzero_with_one_categorized_line() {
    let dir = tempfile::tempdir().unwrap();

    // no seed from any source
    let out = ldctsim(&["simulate"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    let line = stderr_line(&out);
    assert!(line.starts_with("error: config: "), "{line}");
    assert_eq!(line.lines().count(), 1);

    // unreadable manifest
    let out = ldctsim(
        &["--seed", "1", "train", "--manifest", "nowhere.toml"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr_line(&out).starts_with("error: io: "), "{}", stderr_line(&out));

    // config typo
    std::fs::write(dir.path().join("bad.toml"), "seed = 1\n[train]\nepoch = 2\n").unwrap();
    let out = ldctsim(&["--config", "bad.toml", "simulate"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr_line(&out).starts_with("error: config: "), "{}", stderr_line(&out));

    // unknown verb is a usage error
    let out = ldctsim(&["transmogrify"], dir.path());
    assert!(!out.status.success());
}
