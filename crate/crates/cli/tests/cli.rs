use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "seed = 3\n\
    data.n_train = 48\n\
    data.n_test = 24\n\
    data.height = 8\n\
    data.width = 8\n\
    train.epochs = 1\n\
    train.batch_size = 16\n\
    attack.steps = 2\n\
    eval.pgd_steps = [2]\n";

fn igam(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_igam")).args(args).current_dir(dir).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn help_lists_every_subcommand() {
    let dir = tempfile::tempdir().unwrap();
    let o = igam(&["--help"], dir.path());
    assert!(o.status.success());
    let text = String::from_utf8_lossy(&o.stdout);
    for cmd in [
        "train-standard",
        "train-at",
        "finetune-teacher",
        "train-igam",
        "evaluate",
        "export-gradients",
        "landscape",
        "report",
    ] {
        assert!(text.contains(cmd), "{cmd} missing from help");
    }
}

#[test]
fn training_writes_outputs_and_snapshot() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.toml"), TINY).unwrap();
    let o = igam(&["train-standard", "--config", "c.toml", "--out", "run", "--seed", "11"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let run = dir.path().join("run");
    for f in ["model.ckpt", "runlog.csv", "eval.csv", "resolved.toml"] {
        assert!(run.join(f).is_file(), "{f} missing");
    }
    let snapshot = fs::read_to_string(run.join("resolved.toml")).unwrap();
    assert!(snapshot.lines().any(|l| l == "seed = 11"), "{snapshot}");
    let eval = fs::read_to_string(run.join("eval.csv")).unwrap();
    assert!(eval.starts_with("model,clean,fgsm,pgd2,cos_sim,alignment\nstandard,"), "{eval}");

    let o = igam(&["evaluate", "--config", "c.toml", "--out", "ev"], dir.path());
    assert!(!o.status.success());
    let err = stderr(&o);
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with("ERROR config"), "{err}");
}

#[test]
fn config_errors_are_one_line_and_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.toml"), "train.lr_student = -1\nmystery = 2\ndata.height = 0\n").unwrap();
    let o = igam(&["train-standard", "--config", "bad.toml"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with("ERROR config"), "{err}");
    assert!(err.contains("mystery") && err.contains("lr_student"), "{err}");
    assert!(!dir.path().join("out").exists());
}

#[test]
fn missing_config_file_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let o = igam(&["report", "--config", "nowhere.toml"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("ERROR "));
}

#[test]
fn report_merges_evaluation_tables() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    fs::write(p.join("c.toml"), TINY).unwrap();
    assert!(igam(&["train-standard", "--config", "c.toml", "--out", "s"], p).status.success());
    assert!(igam(&["train-at", "--config", "c.toml", "--out", "a"], p).status.success());
    fs::write(p.join("r.toml"), "report.inputs = [\"s/eval.csv\", \"a/eval.csv\"]\n").unwrap();
    let o = igam(&["report", "--config", "r.toml", "--out", "r"], p);
    assert!(o.status.success(), "{}", stderr(&o));
    let merged = fs::read_to_string(p.join("r/report.csv")).unwrap();
    let rows: Vec<&str> = merged.lines().collect();
    assert_eq!(rows.len(), 3, "{merged}");
    assert!(rows[1].starts_with("standard,") && rows[2].starts_with("adversarial,"));
}
