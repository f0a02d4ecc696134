use std::fs;
use std::path::Path;
use std::process::Command;

use segdg::eval::{MetricsReport, PerfectSegmenter};
use segdg::manifest::load_manifest;
use segdg::types::Task;
use segdg_cli::commands::{cmd_eval, cmd_generate, cmd_run, cmd_table, eval_with_segmenter, RunManifest};
use segdg_cli::table::{Split, Table};
use segdg_cli::FileConfig;

const SMALL: &str = r#"{
    "preset": "desk",
    "data": {"samples_per_domain": 4, "n_seen_domains": 2, "n_unseen_domains": 1, "patch_size": [24, 24]},
    "model": {"preset": "tiny"},
    "train": {"epochs": 2, "train_resolution": [16, 16], "batch_size": 4},
    "strategy": {"k": 2}
}"#;

fn small() -> FileConfig {
    serde_json::from_str(SMALL).unwrap()
}

fn generate_and_run(root: &Path) -> std::path::PathBuf {
    let cfg = small();
    cmd_generate(&cfg, &root.join("data"), None).unwrap();
    let run = root.join("run");
    cmd_run(&cfg.experiment(None, None).unwrap(), &root.join("data"), &run, 1, false).unwrap();
    run
}

fn manifest(root: &Path, task: Task, split: &str) -> std::path::PathBuf {
    root.join("data").join(task.as_str()).join(format!("{split}.json"))
}

#[test]
fn generate_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = FileConfig::default();
    let a = cmd_generate(&cfg, &dir.path().join("a"), Some(3)).unwrap();
    let b = cmd_generate(&cfg, &dir.path().join("b"), Some(3)).unwrap();
    assert_eq!(a.len(), 2);
    for (ma, mb) in a.iter().zip(&b) {
        for (pa, pb) in [(&ma.train, &mb.train), (&ma.seen_test, &mb.seen_test), (&ma.unseen_test, &mb.unseen_test)] {
            assert!(pa.exists());
            assert_eq!(fs::read(pa).unwrap(), fs::read(pb).unwrap());
        }
    }
    let again = cmd_generate(&cfg, &dir.path().join("a"), Some(3)).unwrap();
    assert_eq!(fs::read(&again[0].train).unwrap(), fs::read(&b[0].train).unwrap());
}

#[test]
fn zero_unseen_domains_gives_empty_unseen_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg: FileConfig = serde_json::from_str(r#"{"data": {"n_unseen_domains": 0}}"#).unwrap();
    let m = cmd_generate(&cfg, dir.path(), None).unwrap();
    for task in &m {
        assert_eq!(load_manifest(&task.unseen_test).unwrap().len(), 0);
        assert!(!load_manifest(&task.train).unwrap().is_empty());
    }
}

#[test]
fn run_eval_table_round() {
    let dir = tempfile::tempdir().unwrap();
    let run = generate_and_run(dir.path());
    let rm = RunManifest::read(&run).unwrap();
    assert_eq!(rm.runs.len(), 6);
    assert!(rm.missing_paths(&run).is_empty(), "{:?}", rm.missing_paths(&run));

    let unseen = manifest(dir.path(), Task::CrossOrgan, "unseen_test");
    let written = cmd_eval(&run, &unseen).unwrap();
    assert_eq!(written.len(), 3);
    let n = load_manifest(&unseen).unwrap().len();
    for p in &written {
        let r = MetricsReport::read_json(p).unwrap();
        assert_eq!(r.per_image.len(), n);
        assert!(r.per_image.iter().all(|s| !s.seen));
        assert!(r.seen.is_none() && r.unseen.is_some());
    }
    let rm = RunManifest::read(&run).unwrap();
    assert!(rm.missing_paths(&run).is_empty());
    assert_eq!(rm.eval_reports.len(), 3);

    let out = cmd_table(&run).unwrap();
    assert_eq!(out.table.rows.len(), 6);
    assert!(out.table.cell(Task::CrossOrgan, Split::UnseenTest, segdg::types::Strategy::Union).is_some());
    assert!(out.table.cell(Task::CrossScanner, Split::UnseenTest, segdg::types::Strategy::Union).is_none());
    assert!(out.text.contains("n/a"));
    assert_eq!(out.trend.len(), 2);
    let csv = fs::read(run.join("table.csv")).unwrap();
    assert_eq!(Table::read_csv(csv.as_slice()).unwrap(), out.table);
}

#[test]
fn perfect_stub_scores_one_hundred() {
    let dir = tempfile::tempdir().unwrap();
    let run = generate_and_run(dir.path());
    let train = manifest(dir.path(), Task::CrossScanner, "train");
    let written = eval_with_segmenter(&run, &train, |_| Box::new(PerfectSegmenter)).unwrap();
    for p in written {
        let r = MetricsReport::read_json(p).unwrap();
        assert_eq!(r.aggregate.to_string(), "100.00 ± 0.00");
        assert_eq!(r.per_image.len(), load_manifest(&train).unwrap().len());
    }
}

#[test]
fn eval_needs_a_complete_run_dir() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small();
    cmd_generate(&cfg, &dir.path().join("data"), None).unwrap();
    let err = cmd_eval(&dir.path().join("nothing"), &manifest(dir.path(), Task::CrossOrgan, "seen_test")).unwrap_err();
    assert_eq!(err.kind(), segdg::ErrorKind::Data);
}

fn segdg(args: &[&str], cwd: &Path) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_segdg"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "off")
        .output()
        .unwrap();
    (out.status.code().unwrap(), String::from_utf8(out.stderr).unwrap())
}

#[test]
fn binary_exit_codes_and_error_json() {
    let dir = tempfile::tempdir().unwrap();
    let (code, err) = segdg(&["run", "--out", "r", "--data", "missing"], dir.path());
    assert_eq!(code, 3);
    let v: serde_json::Value = serde_json::from_str(err.trim()).unwrap();
    assert_eq!(v["error_kind"], "data");
    assert!(v["message"].as_str().unwrap().contains("missing/cross_organ/train.json"));
    assert_eq!(v["context"]["command"], "run");

    fs::write(dir.path().join("bad.json"), r#"{"train": {"epochs": 0}}"#).unwrap();
    let (code, err) = segdg(&["run", "--config", "bad.json", "--out", "r"], dir.path());
    assert_eq!(code, 2);
    let v: serde_json::Value = serde_json::from_str(err.trim()).unwrap();
    assert_eq!(v["error_kind"], "config");

    fs::write(dir.path().join("small.json"), SMALL).unwrap();
    assert_eq!(segdg(&["generate", "--config", "small.json", "--out", "data"], dir.path()).0, 0);
    assert_eq!(segdg(&["table", "nowhere"], dir.path()).0, 3);
}
