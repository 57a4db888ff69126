use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn hsseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hsseg")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn bad_flags_exit_with_usage_code() {
    let o = hsseg(&["train", "--bogus"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("Usage"));
    assert_eq!(hsseg(&[]).status.code(), Some(1));
}

#[test]
fn help_lists_defaults() {
    let o = hsseg(&["train", "--help"]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    for key in ["iterations (8000)", "mode (adaptive)", "w_appearance (5)", "tiou (0.5, 0.2)"] {
        assert!(text.contains(key), "missing {key}");
    }
}

#[test]
fn missing_files_name_the_path() {
    let o = hsseg(&["eval", "--checkpoint", "/nonexistent/model.ckpt", "--data", "/nonexistent/data"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("/nonexistent/"));
}

#[test]
fn config_errors_report_line_and_column() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert!(hsseg(&["gen-data", "--out", path(&data), "--n", "10", "--seed", "1"]).status.success());
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "iterations = 5\n\n[switch]\nwarmup = soon\n").unwrap();
    let o = hsseg(&["train", "--data", path(&data), "--config", path(&cfg), "--out", path(&dir.path().join("run"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 4, column 10"), "{}", stderr(&o));
}

#[test]
fn workflow_from_data_to_reports() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    let o = hsseg(&["gen-data", "--out", path(&data), "--n", "20", "--seed", "4", "--classes", "3"]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["images/0000.ppm", "masks/0000.pgm", "labels.csv", "boxes.csv"] {
        assert!(data.join(f).exists(), "{f}");
    }
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "iterations = 12\nsnapshot_every = 6\ncheckpoint_every = 6\n").unwrap();
    let o = hsseg(&["train", "--data", path(&data), "--config", path(&cfg), "--out", path(&run)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("# iterations = 12") || stdout(&o).contains("#   iterations = 12"));
    let log = fs::read_to_string(run.join("loss.csv")).unwrap();
    assert!(log.starts_with("iteration,seg_loss,cls1,cls2,chosen_loss,foreground_count,lr"));
    assert_eq!(log.lines().count(), 13);
    assert!(run.join("checkpoints/iter_000006.ckpt").exists());
    assert!(run.join("snapshots/iter_000006_mask.pgm").exists());

    let ckpt = run.join("model.ckpt");
    let mask = dir.path().join("mask.pgm");
    let o = hsseg(&["infer", "--checkpoint", path(&ckpt), "--image", path(&data.join("images/0000.ppm")), "--out", path(&mask)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let pgm = hsseg::synthdata::read_pgm(&mask).unwrap();
    assert_eq!((pgm.width(), pgm.height()), (64, 64));

    let report = dir.path().join("eval.csv");
    let o = hsseg(&["eval", "--checkpoint", path(&ckpt), "--data", path(&data), "--report", path(&report)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(fs::read_to_string(&report).unwrap().contains("miou"));

    let o = hsseg(&["wsol", "--checkpoint", path(&ckpt), "--data", path(&data), "--tiou", "0.5,0.2"]);
    assert!(o.status.success(), "{}", stderr(&o));

    let o = hsseg(&["audit", "--log", path(&run.join("loss.csv")), "--config", path(&cfg)]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
}

#[test]
fn ablate_emits_a_comparison_table() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert!(hsseg(&["gen-data", "--out", path(&data), "--n", "10", "--seed", "2", "--classes", "2"]).status.success());
    let suite = dir.path().join("s.suite");
    fs::write(&suite, "iterations = 4\n\n[variant.base]\n\n[variant.mid]\nbackbone.gap_tap = mid\n").unwrap();
    let out = dir.path().join("abl");
    let o = hsseg(&["ablate", "--data", path(&data), "--suite", path(&suite), "--out", path(&out), "--seed", "3"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let table = fs::read_to_string(out.join("ablation.csv")).unwrap();
    assert!(table.lines().any(|l| l.starts_with("base,")));
    assert!(table.lines().any(|l| l.starts_with("mid,")));
    assert!(out.join("base/loss.csv").exists());
}
