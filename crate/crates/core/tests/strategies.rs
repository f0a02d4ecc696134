use std::collections::BTreeSet;

use segdg::model::ModelConfig;
use segdg::strategies::{run_cross_task, run_matrix, run_name, run_standard, run_union, RunOptions, StrategyRun};
use segdg::synth::{generate_task, GeneratorConfig};
use segdg::types::{ExperimentConfig, Strategy, Task, TaskDataset};
use segdg::Error;

fn data(task: Task) -> TaskDataset {
    let g = GeneratorConfig {
        samples_per_domain: 5,
        n_unseen_domains: 0,
        patch_size: (24, 24),
        ..Default::default()
    };
    generate_task(&g, task).unwrap().train
}

fn config() -> ExperimentConfig {
    let mut c = ExperimentConfig::desk(Strategy::Standard, Task::CrossOrgan);
    c.model = ModelConfig::tiny();
    c.model_preset = "tiny".into();
    c.train_resolution = (16, 16);
    c.epochs = 2;
    c.batch_size = 4;
    c.k = 3;
    c
}

fn ids(ds: &TaskDataset) -> BTreeSet<String> {
    ds.ids().into_iter().collect()
}

fn assert_pure(run: &StrategyRun) {
    for f in &run.folds {
        let train: BTreeSet<&String> = f.train_ids.iter().collect();
        assert!(f.val_ids.iter().all(|id| !train.contains(id)), "{} fold {}", run.name(), f.fold);
    }
}

#[test]
fn standard_run_contract() {
    let t1 = data(Task::CrossOrgan);
    let run = run_standard(&t1, &config(), &RunOptions::default()).unwrap();
    assert_eq!(run.fold_checkpoints.len(), 3);
    for (i, c) in run.fold_checkpoints.iter().enumerate() {
        assert_eq!((c.meta.strategy, c.meta.task, c.meta.fold), (Strategy::Standard, Task::CrossOrgan, i));
    }
    assert_eq!(run.cv_report.per_image.len(), t1.len());
    let scored: BTreeSet<String> = run.cv_report.per_image.iter().map(|s| s.id.clone()).collect();
    assert_eq!(scored, ids(&t1));
    assert_pure(&run);
    assert_eq!(run_standard(&t1, &config(), &RunOptions::default()).unwrap(), run);
}

#[test]
fn fold_parallelism_does_not_change_results() {
    let t2 = data(Task::CrossScanner);
    let serial = run_standard(&t2, &config(), &RunOptions::default()).unwrap();
    let parallel = run_standard(
        &t2,
        &config(),
        &RunOptions {
            workers: 3,
            ..Default::default()
        },
    )
    .unwrap();
    assert_eq!(serial, parallel);
}

#[test]
fn cross_task_pairs_folds_by_index() {
    let (t1, t2) = (data(Task::CrossOrgan), data(Task::CrossScanner));
    let source = run_standard(&t1, &config(), &RunOptions::default()).unwrap();
    let run = run_cross_task(&source, &t2, &config(), &RunOptions::default()).unwrap();
    assert_eq!((run.strategy, run.target_task), (Strategy::CrossTask, Task::CrossScanner));
    for (rec, src) in run.folds.iter().zip(&source.fold_checkpoints) {
        assert_eq!(rec.initial_digest, src.params.digest());
    }
    for (a, b) in run.fold_checkpoints.iter().zip(&source.fold_checkpoints) {
        assert_ne!(a.params, b.params);
    }
    assert_pure(&run);

    let mut k2 = config();
    k2.k = 2;
    assert!(matches!(
        run_cross_task(&source, &t2, &k2, &RunOptions::default()),
        Err(Error::FoldCountMismatch { source_k: 3, target_k: 2 })
    ));
    let mut wide = config();
    wide.model = ModelConfig::desk();
    assert!(matches!(
        run_cross_task(&source, &t2, &wide, &RunOptions::default()),
        Err(Error::FingerprintMismatch { .. })
    ));
    assert!(matches!(
        run_cross_task(&source, &t1, &config(), &RunOptions::default()),
        Err(Error::Strategy(_))
    ));
}

#[test]
fn union_trains_on_both_and_validates_on_target() {
    let (t1, t2) = (data(Task::CrossOrgan), data(Task::CrossScanner));
    for target in Task::ALL {
        let run = run_union(&t1, &t2, target, &config(), &RunOptions::default()).unwrap();
        let (own, other) = if target == Task::CrossOrgan { (&t1, &t2) } else { (&t2, &t1) };
        for (i, f) in run.folds.iter().enumerate() {
            assert_eq!(f.train_ids.len(), own.len() - run.split.folds[i].len() + other.len());
            assert!(f.val_ids.iter().all(|id| ids(own).contains(id)));
        }
        let scored: BTreeSet<String> = run.cv_report.per_image.iter().map(|s| s.id.clone()).collect();
        assert_eq!(scored, ids(own));
        assert_pure(&run);
    }
    assert!(matches!(
        run_union(&t1, &t1, Task::CrossOrgan, &config(), &RunOptions::default()),
        Err(Error::Strategy(_))
    ));
}

#[test]
fn matrix_persists_and_resumes() {
    let (t1, t2) = (data(Task::CrossOrgan), data(Task::CrossScanner));
    let dir = tempfile::tempdir().unwrap();
    let opts = RunOptions {
        workers: 1,
        out: Some(dir.path().to_path_buf()),
        resume: false,
    };
    let runs = run_matrix(&t1, &t2, &config(), &opts).unwrap();
    let labels: Vec<(Strategy, Task)> = runs.iter().map(|r| (r.strategy, r.target_task)).collect();
    assert_eq!(
        labels,
        vec![
            (Strategy::Standard, Task::CrossOrgan),
            (Strategy::Standard, Task::CrossScanner),
            (Strategy::CrossTask, Task::CrossScanner),
            (Strategy::CrossTask, Task::CrossOrgan),
            (Strategy::Union, Task::CrossOrgan),
            (Strategy::Union, Task::CrossScanner),
        ]
    );
    assert_eq!(runs[2].folds[0].initial_digest, runs[0].fold_checkpoints[0].params.digest());
    for r in &runs {
        assert_eq!(&StrategyRun::load(dir.path().join(r.name())).unwrap(), r);
    }

    // A resumed run reuses the stored folds instead of retraining.
    let fold0 = dir.path().join(run_name(Strategy::Standard, Task::CrossOrgan)).join("fold_0");
    let stamp = std::fs::metadata(fold0.join("metadata.json")).unwrap().modified().unwrap();
    std::fs::remove_file(dir.path().join("standard_t1").join("cv_report.json")).unwrap();
    let resumed = run_matrix(&t1, &t2, &config(), &RunOptions { resume: true, ..opts.clone() }).unwrap();
    assert_eq!(resumed, runs);
    assert_eq!(std::fs::metadata(fold0.join("metadata.json")).unwrap().modified().unwrap(), stamp);

    let mut other = config();
    other.epochs = 3;
    let err = run_matrix(&t1, &t2, &other, &RunOptions { resume: true, ..opts }).unwrap_err();
    assert_eq!(err.kind(), segdg::ErrorKind::Config);
}
