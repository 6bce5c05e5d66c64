use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "\
synth.classes = 4
synth.frames = 6
synth.side = 20
synth.window_min = 2
synth.window_max = 4
synth.confusable = 0:1
synth.translation = 1
synth.distractor_pool = 3
synth.train_per_class = 4
synth.test_per_class = 2
model.frames = 6
model.input_size = 20
model.classes = 4
model.conv3d_channels = 3
model.blocks = 3:1,4:2
model.hidden = 3
model.head_hidden = 3
model.lmim_hidden = 4
model.gmim_hidden = 4
train.epochs = 1
train.batch_size = 8
train.lr_start = 1e-3
train.lr_floor = 1e-4
";

fn mimseq(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mimseq")).args(args).output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Generates the tiny dataset and trains one model of `variant` in `dir`.
fn setup(dir: &Path, variant: &str) {
    let cfg = dir.join("tiny.cfg");
    fs::write(&cfg, TINY).unwrap();
    let data = dir.join("data");
    let o = mimseq(&["gen", "--out", p(&data), "--config", p(&cfg)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = dir.join(variant);
    let o = mimseq(&["train", "--data", p(&data), "--out", p(&out), "--config", p(&cfg), "--variant", variant]);
    assert!(o.status.success(), "{}", stderr(&o));
}

fn assert_category(o: &Output, code: i32, category: &str) {
    assert_eq!(o.status.code(), Some(code), "{}", stderr(o));
    let err = stderr(o);
    let line = err.lines().last().unwrap_or_default();
    assert!(line.starts_with(&format!("error: {category}: ")), "unexpected stderr: {err}");
}

#[test]
fn gen_train_eval_and_exports() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    setup(d, "glmim");
    for f in ["train.bin", "val.bin", "test.bin", "synth.cfg"] {
        assert!(d.join("data").join(f).exists(), "{f}");
    }
    let run = d.join("glmim");
    let metrics = fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("epoch,phase,split,accuracy"));
    assert_eq!(metrics.lines().count(), 4);
    assert!(run.join("timing.csv").exists() && run.join("config.cfg").exists());

    let ckpt = run.join("checkpoint.bin");
    let test = d.join("data/test.bin");
    let preds = d.join("preds.csv");
    let o = mimseq(&["eval", "--checkpoint", p(&ckpt), "--data", p(&test), "--predictions", p(&preds)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("accuracy="));
    assert_eq!(fs::read_to_string(&preds).unwrap().lines().count(), 1 + 8);

    let beta = d.join("beta.csv");
    let o = mimseq(&["export-beta", "--checkpoint", p(&ckpt), "--data", p(&test), "--out", p(&beta)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(&beta).unwrap();
    assert!(text.lines().all(|l| l.split(',').count() == 6 + 3));

    let pca = d.join("pca.csv");
    let o = mimseq(&[
        "export-pca", "--checkpoint", p(&ckpt), "--data", p(&test), "--out", p(&pca), "--classes", "3", "--per-class", "2",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read_to_string(&pca).unwrap().lines().count(), 1 + 6);
}

#[test]
fn export_beta_rejects_a_baseline_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    setup(d, "baseline");
    let o = mimseq(&[
        "export-beta",
        "--checkpoint",
        p(&d.join("baseline/checkpoint.bin")),
        "--data",
        p(&d.join("data/test.bin")),
        "--out",
        p(&d.join("beta.csv")),
    ]);
    assert_category(&o, 1, "usage");
    assert!(stderr(&o).contains("frame-weight head"));
}

#[test]
fn error_categories() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();

    assert_category(&mimseq(&["train", "--bogus"]), 2, "usage");
    assert_category(&mimseq(&["gen", "--out", p(d), "--set", "synth.nonsense=1"]), 1, "config");
    assert_category(&mimseq(&["gen", "--out", p(d), "--set", "weird.key=1"]), 1, "config");
    assert_category(&mimseq(&["gen", "--out", p(d), "--window-min", "9", "--window-max", "3"]), 1, "config");

    let missing = d.join("nope.bin");
    assert_category(&mimseq(&["eval", "--checkpoint", p(&missing), "--data", p(&missing)]), 1, "io");

    let junk = d.join("junk.bin");
    fs::write(&junk, b"definitely not a checkpoint").unwrap();
    assert_category(&mimseq(&["eval", "--checkpoint", p(&junk), "--data", p(&junk)]), 1, "checkpoint");

    setup(d, "baseline");
    let test = d.join("data/test.bin");
    let mut bytes = fs::read(&test).unwrap();
    bytes.truncate(bytes.len() - 5);
    let cut = d.join("cut.bin");
    fs::write(&cut, &bytes).unwrap();
    let ckpt = d.join("baseline/checkpoint.bin");
    let o = mimseq(&["eval", "--checkpoint", p(&ckpt), "--data", p(&cut)]);
    assert_category(&o, 1, "data");
    assert!(stderr(&o).contains("truncated at byte"));
}

#[test]
fn mi_oracle_and_help() {
    let o = mimseq(&["mi-oracle"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o).lines().count(), 1 + 5);
    let o = mimseq(&["--help"]);
    assert!(o.status.success());
    for cmd in ["gen", "train", "eval", "ablate", "export-beta", "export-pca", "gradcheck", "mi-oracle"] {
        assert!(stdout(&o).contains(cmd), "{cmd}");
    }
}
