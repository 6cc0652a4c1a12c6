use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sepsiswarn")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn error_json(out: &Output) -> serde_json::Value {
    let text = String::from_utf8_lossy(&out.stderr);
    serde_json::from_str(text.lines().last().unwrap()).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Small cohort and fast training settings.
fn setup(dir: &Path) -> (String, String) {
    let gen = dir.join("gen.json");
    fs::write(&gen, r#"{"n_positive": 30, "n_negative": 30}"#).unwrap();
    let cohort = dir.join("cohort");
    ok(&["cohort", "gen", "--config", p(&gen), "--seed", "3", "--out", p(&cohort), "--split", "0.6,0.2,0.2"]);
    let cfg = dir.join("run.json");
    fs::write(
        &cfg,
        r#"{"train": {"stage1": {"epochs": 1}, "stage2": {"epochs": 20, "patience": 5}}}"#,
    )
    .unwrap();
    (p(&cohort).to_string(), p(&cfg).to_string())
}

#[test]
fn usage_errors_exit_1_with_json() {
    let out = run(&["train", "--cohort"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_json(&out)["error"]["kind"], "usage");
    let out = run(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(run(&["--help"]).status.success());
}

#[test]
fn missing_cohort_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["train", "--cohort", p(&dir.path().join("nope")), "--out", p(&dir.path().join("run"))]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_json(&out)["error"]["kind"], "data");
}

#[test]
fn cohort_gen_refuses_to_clobber() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("c");
    let gen = dir.path().join("gen.json");
    fs::write(&gen, r#"{"n_positive": 4, "n_negative": 4}"#).unwrap();
    let args = ["cohort", "gen", "--config", p(&gen), "--seed", "1", "--out", p(&out_dir)];
    ok(&args);
    let again = run(&args);
    assert_eq!(again.status.code(), Some(1));
    let mut forced = args.to_vec();
    forced.push("--overwrite");
    ok(&forced);
    // A foreign directory is never removed, even with --overwrite.
    let foreign = dir.path().join("foreign");
    fs::create_dir(&foreign).unwrap();
    fs::write(foreign.join("keep.txt"), "x").unwrap();
    let out = run(&["cohort", "gen", "--config", p(&gen), "--out", p(&foreign), "--overwrite"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(foreign.join("keep.txt").exists());
}

#[test]
fn score_writes_one_row_per_hour() {
    let dir = tempfile::tempdir().unwrap();
    let gen = dir.path().join("gen.json");
    fs::write(&gen, r#"{"n_positive": 2, "n_negative": 2}"#).unwrap();
    let cohort = dir.path().join("c");
    ok(&["cohort", "gen", "--config", p(&gen), "--out", p(&cohort), "--split", "0.5,0.25,0.25"]);
    let record = fs::read_dir(cohort.join("train")).unwrap().next().unwrap().unwrap().path();
    let out = dir.path().join("scores.csv");
    ok(&["score", "--record", p(&record), "--out", p(&out)]);
    let text = fs::read_to_string(&out).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("hour,sofa,sirs,qsofa,mews"));
    assert_eq!(lines.count(), 31);
}

#[test]
fn train_eval_and_drift_detection() {
    let dir = tempfile::tempdir().unwrap();
    let (cohort, cfg) = setup(dir.path());
    let run_dir = dir.path().join("run");
    ok(&["train", "--cohort", &cohort, "--config", &cfg, "--task-offsets", "6,4", "--seed", "1", "--out", p(&run_dir)]);
    assert!(run_dir.join("models/k6h1/model.json").exists());
    assert!(run_dir.join("manifest.json").exists());

    for (report, header) in [
        ("metrics", "offset,horizon,n,auc,tpr,fpr,f1"),
        ("roc", "offset,horizon,threshold,fpr,tpr"),
        ("mse", "offset,horizon,"),
        ("saliency", "variable,h"),
    ] {
        let out = dir.path().join(format!("{report}.csv"));
        ok(&["eval", "--run", p(&run_dir), "--report", report, "--out", p(&out), "--verify"]);
        let text = fs::read_to_string(&out).unwrap();
        assert!(text.starts_with(header), "{report}: {}", text.lines().next().unwrap());
    }
    let metrics = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 3);

    // Touch one cohort file: --verify now fails with a data error.
    let record = fs::read_dir(Path::new(&cohort).join("test")).unwrap().next().unwrap().unwrap().path();
    let mut text = fs::read_to_string(&record).unwrap();
    text.push('\n');
    fs::write(&record, text).unwrap();
    let out = run(&["eval", "--run", p(&run_dir), "--report", "metrics", "--out", p(&dir.path().join("m2.csv")), "--verify"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(error_json(&out)["error"]["message"].as_str().unwrap().contains("changed"));
}
