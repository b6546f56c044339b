use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
seed = 5
[data]
train = 64
val = 32
[teacher]
epochs = 1
[student]
betas = [0.01]
stage1_epochs = 1
stage2_epochs = 1
[end2end]
betas = [0.05]
epochs = 1
[crbq]
epochs = 1
[heads]
tasks = ["parity"]
epochs = 1
[split]
samples = 8
"#;

fn esplit(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_esplit")).args(args).env("ESPLIT_RUN_ROOT", root).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn tiny(root: &Path) -> String {
    let p = root.join("tiny.toml");
    std::fs::write(&p, TINY).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let root = tempfile::tempdir().unwrap();
    let o = esplit(root.path(), &["train-teacher", "--bogus"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).starts_with("error[usage]"), "{}", stderr(&o));
    let o = esplit(root.path(), &["train-student", "--stage", "3"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn bad_config_exits_3() {
    let root = tempfile::tempdir().unwrap();
    let cfg = root.path().join("bad.toml");
    std::fs::write(&cfg, "[student]\nbetaz = [1.0]\n").unwrap();
    let o = esplit(root.path(), &["--config", cfg.to_str().unwrap(), "train-teacher"]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).starts_with("error[config]"));
    let o = esplit(root.path(), &["train-student", "--stage", "1", "--beta=-0.5"]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn missing_inputs_exit_4() {
    let root = tempfile::tempdir().unwrap();
    let cfg = tiny(root.path());
    let o = esplit(root.path(), &["--config", &cfg, "run-split"]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
    assert!(stderr(&o).contains("two_stage-b0.ckpt"));
    let o = esplit(root.path(), &["--config", "/nonexistent/x.toml", "sweep"]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
}

#[test]
fn corrupt_checkpoint_exits_5() {
    let root = tempfile::tempdir().unwrap();
    let cfg = tiny(root.path());
    let run = root.path().join("r");
    std::fs::create_dir_all(&run).unwrap();
    std::fs::write(run.join("teacher.ckpt"), b"not a checkpoint").unwrap();
    let o = esplit(root.path(), &["--config", &cfg, "--run", "r", "train-student", "--stage", "1"]);
    assert_eq!(o.status.code(), Some(5), "{}", stderr(&o));
}

#[test]
fn command_chain_produces_tables() {
    let root = tempfile::tempdir().unwrap();
    let cfg = tiny(root.path());
    let steps: &[&[&str]] = &[
        &["train-teacher"],
        &["train-student", "--stage", "1"],
        &["train-student", "--stage", "2"],
        &["train-baseline", "--kind", "end2end"],
        &["train-baseline", "--kind", "crbq"],
        &["finetune-head", "--task", "parity"],
        &["eval-rd"],
        &["run-split", "--transport", "socket", "--rate-bps", "1000"],
        &["latency-sim"],
        &["export", "--format", "dat", "--out", "again.dat"],
    ];
    for step in steps {
        let mut args = vec!["--config", cfg.as_str(), "--run", "chain"];
        args.extend_from_slice(step);
        let o = esplit(root.path(), &args);
        assert!(o.status.success(), "{step:?}: {}", stderr(&o));
    }
    let dir = root.path().join("chain");
    for f in ["teacher.ckpt", "two_stage-b0.ckpt", "end2end-b0.ckpt", "crbq.ckpt", "head-parity.ckpt", "rd.csv", "scenarios.csv", "latency-two_stage-b0.csv"] {
        assert!(dir.join(f).is_file(), "{f} missing");
    }
    let rd = std::fs::read_to_string(dir.join("rd.csv")).unwrap();
    assert!(rd.starts_with("#schema=esplit.rd.v1"));
    assert_eq!(rd.lines().count(), 2 + 3);
    assert_eq!(std::fs::read(dir.join("rd.dat")).unwrap(), std::fs::read(dir.join("again.dat")).unwrap());
    let m = std::fs::read_to_string(dir.join("manifest-export.json")).unwrap();
    assert!(m.contains("\"rd.csv\""));

    // the exported table is checked against its schema on the way in
    std::fs::write(dir.join("broken.csv"), "#schema=other\nx\n").unwrap();
    let o = esplit(root.path(), &["--config", &cfg, "--run", "chain", "export", "--format", "csv", "--input", "broken.csv"]);
    assert_eq!(o.status.code(), Some(5), "{}", stderr(&o));

    // replaying the split run reproduces its CSV; a tampered input is refused
    let manifest = dir.join("manifest-run-split.json");
    let o = esplit(root.path(), &["--run", "replay", "rerun", "--manifest", manifest.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    std::fs::write(dir.join("two_stage-b0.ckpt"), b"tampered").unwrap();
    let o = esplit(root.path(), &["--run", "replay2", "rerun", "--manifest", manifest.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(8), "{}", stderr(&o));
}

#[test]
fn readme_config_block_is_the_default() {
    let readme = include_str!("../../../README.md");
    let start = readme.find("```toml\n").expect("toml block") + "```toml\n".len();
    let block = &readme[start..start + readme[start..].find("```").unwrap()];
    let parsed = esplit_cli::ExperimentConfig::from_toml(block).unwrap();
    assert_eq!(parsed, esplit_cli::ExperimentConfig::default());
}
