//! The experiment matrix: standard training, cross-task initialization and
//! dataset union, each cross-validated into a k-fold ensemble.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::eval::{evaluate_samples, ImageScore, MetricsReport, ModelEnsemble};
use crate::model::{fingerprint, SegmentationModel};
use crate::rng;
use crate::train::{train_with, TrainHistory, TrainOptions};
use crate::types::{ExperimentConfig, Sample, SplitPlan, Strategy, Task, TaskDataset};

pub const CONFIG_FILE: &str = "config.json";
pub const SPLIT_FILE: &str = "split.json";
pub const CV_REPORT_FILE: &str = "cv_report.json";
pub const FOLD_FILE: &str = "fold.json";

/// Seeded k-fold partition stratified by domain.
///
/// Ids of each domain (domains in sorted order) are shuffled and the
/// concatenation is dealt round-robin, so fold sizes and per-domain counts
/// each differ by at most one.
pub fn make_folds(dataset: &TaskDataset, k: usize, seed: u64) -> Result<SplitPlan> {
    if k == 0 || dataset.len() < k {
        return Err(Error::TooFewSamples { size: dataset.len(), k });
    }
    let mut dealt = Vec::with_capacity(dataset.len());
    for domain in dataset.domains() {
        let mut ids: Vec<String> = dataset
            .samples
            .iter()
            .filter(|s| s.domain.domain_name == domain)
            .map(|s| s.id().to_string())
            .collect();
        ids.sort();
        ids.shuffle(&mut rng::stream(rng::derive(seed, &domain)));
        dealt.extend(ids);
    }
    let mut folds = vec![Vec::new(); k];
    for (i, id) in dealt.into_iter().enumerate() {
        folds[i % k].push(id);
    }
    Ok(SplitPlan { k, seed, folds })
}

/// What happened in one fold beyond its checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldRecord {
    pub fold: usize,
    pub train_ids: Vec<String>,
    pub val_ids: Vec<String>,
    /// Digest of the parameters at step 0.
    pub initial_digest: String,
    pub history: TrainHistory,
}

/// A cross-validated strategy on one target task.
#[derive(Debug, Clone, PartialEq)]
pub struct StrategyRun {
    pub strategy: Strategy,
    pub target_task: Task,
    pub config: ExperimentConfig,
    pub split: SplitPlan,
    pub folds: Vec<FoldRecord>,
    pub fold_checkpoints: Vec<Checkpoint>,
    pub cv_report: MetricsReport,
}

impl StrategyRun {
    pub fn name(&self) -> String {
        run_name(self.strategy, self.target_task)
    }

    pub fn models(&self) -> Result<Vec<SegmentationModel>> {
        self.fold_checkpoints.iter().map(SegmentationModel::from_checkpoint).collect()
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        write_json(&dir.join(CONFIG_FILE), &self.config)?;
        write_json(&dir.join(SPLIT_FILE), &self.split)?;
        for (rec, ckpt) in self.folds.iter().zip(&self.fold_checkpoints) {
            save_fold(dir, rec, ckpt)?;
        }
        self.cv_report.write_json(dir.join(CV_REPORT_FILE))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let config: ExperimentConfig = read_json(&dir.join(CONFIG_FILE))?;
        let split: SplitPlan = read_json(&dir.join(SPLIT_FILE))?;
        let mut folds = Vec::with_capacity(split.k);
        let mut fold_checkpoints = Vec::with_capacity(split.k);
        for i in 0..split.k {
            let fdir = fold_dir(dir, i);
            folds.push(read_json(&fdir.join(FOLD_FILE))?);
            fold_checkpoints.push(Checkpoint::load(&fdir)?);
        }
        Ok(StrategyRun {
            strategy: config.strategy,
            target_task: config.target_task,
            cv_report: MetricsReport::read_json(dir.join(CV_REPORT_FILE))?,
            config,
            split,
            folds,
            fold_checkpoints,
        })
    }
}

/// Directory name of a run, e.g. `cross_task_t2`.
pub fn run_name(strategy: Strategy, task: Task) -> String {
    format!("{}_{}", strategy.as_str(), task.short().to_lowercase())
}

pub fn fold_dir(run_dir: &Path, fold: usize) -> PathBuf {
    run_dir.join(format!("fold_{fold}"))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })
}

fn save_fold(run_dir: &Path, rec: &FoldRecord, ckpt: &Checkpoint) -> Result<()> {
    let fdir = fold_dir(run_dir, rec.fold);
    ckpt.save(&fdir)?;
    write_json(&fdir.join(FOLD_FILE), rec)
}

/// Execution settings shared by every strategy.
#[derive(Debug, Clone)]
pub struct RunOptions {
    /// Folds trained concurrently.
    pub workers: usize,
    /// Root directory; each run persists to `out/<run name>/`.
    pub out: Option<PathBuf>,
    /// Reuse completed folds and runs found under `out`.
    pub resume: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            workers: 1,
            out: None,
            resume: false,
        }
    }
}

/// Train/validation membership of one fold plus its optional init.
struct FoldPlan<'a> {
    train: Vec<&'a Sample>,
    val: Vec<&'a Sample>,
    init: Option<&'a Checkpoint>,
}

fn run_folds<'a>(
    config: &ExperimentConfig,
    split: SplitPlan,
    plans: Vec<FoldPlan<'a>>,
    opts: &RunOptions,
) -> Result<StrategyRun> {
    config.validate()?;
    let run_dir = opts.out.as_ref().map(|o| o.join(run_name(config.strategy, config.target_task)));
    if let Some(dir) = &run_dir {
        if opts.resume && dir.join(CONFIG_FILE).exists() {
            let stored: ExperimentConfig = read_json(&dir.join(CONFIG_FILE))?;
            if &stored != config {
                return Err(Error::config(
                    "resume",
                    format!("{} was produced by a different configuration", dir.display()),
                ));
            }
            if dir.join(CV_REPORT_FILE).exists() {
                let run = StrategyRun::load(dir)?;
                if run.split == split {
                    log::info!("reusing completed run {}", dir.display());
                    return Ok(run);
                }
            }
        }
        write_json(&dir.join(CONFIG_FILE), config)?;
        write_json(&dir.join(SPLIT_FILE), &split)?;
    }

    let writer = Mutex::new(());
    let fold_job = |(i, plan): (usize, &FoldPlan<'a>)| -> Result<(FoldRecord, Checkpoint, Vec<ImageScore>)> {
        let train_ids: Vec<String> = plan.train.iter().map(|s| s.id().to_string()).collect();
        let val_ids: Vec<String> = plan.val.iter().map(|s| s.id().to_string()).collect();
        let resumed = match &run_dir {
            Some(dir) if opts.resume => load_fold(dir, i, &train_ids, &val_ids),
            _ => None,
        };
        let (rec, ckpt) = match resumed {
            Some(done) => {
                log::info!("reusing fold {i} of {}", run_name(config.strategy, config.target_task));
                done
            }
            None => {
                let mut fold_config = config.clone();
                fold_config.seed = rng::derive_index(config.seed, "fold", i);
                let outcome = train_with(
                    &plan.train,
                    &plan.val,
                    &fold_config,
                    plan.init,
                    TrainOptions {
                        fold: i,
                        ..Default::default()
                    },
                )?;
                let rec = FoldRecord {
                    fold: i,
                    train_ids,
                    val_ids,
                    initial_digest: outcome.initial_digest,
                    history: outcome.history,
                };
                if let Some(dir) = &run_dir {
                    let _guard = writer.lock().unwrap_or_else(|p| p.into_inner());
                    save_fold(dir, &rec, &outcome.checkpoint)?;
                }
                (rec, outcome.checkpoint)
            }
        };
        let model = SegmentationModel::from_checkpoint(&ckpt)?;
        let report = evaluate_samples(
            &ModelEnsemble {
                models: std::slice::from_ref(&model),
                resolution: config.train_resolution,
            },
            plan.val.iter().copied(),
            config.threshold,
        )?;
        Ok((rec, ckpt, report.per_image))
    };

    let results: Vec<_> = if opts.workers <= 1 {
        plans.iter().enumerate().map(fold_job).collect::<Result<_>>()?
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(opts.workers)
            .build()
            .map_err(|e| Error::config("workers", e.to_string()))?;
        pool.install(|| plans.par_iter().enumerate().map(fold_job).collect::<Result<_>>())?
    };

    let mut folds = Vec::with_capacity(results.len());
    let mut fold_checkpoints = Vec::with_capacity(results.len());
    let mut scores = Vec::new();
    for (rec, ckpt, s) in results {
        folds.push(rec);
        fold_checkpoints.push(ckpt);
        scores.extend(s);
    }
    let run = StrategyRun {
        strategy: config.strategy,
        target_task: config.target_task,
        config: config.clone(),
        split,
        folds,
        fold_checkpoints,
        cv_report: MetricsReport::from_scores(scores)?,
    };
    if let Some(dir) = &run_dir {
        run.cv_report.write_json(dir.join(CV_REPORT_FILE))?;
    }
    Ok(run)
}

fn load_fold(dir: &Path, i: usize, train_ids: &[String], val_ids: &[String]) -> Option<(FoldRecord, Checkpoint)> {
    let fdir = fold_dir(dir, i);
    let rec: FoldRecord = read_json(&fdir.join(FOLD_FILE)).ok()?;
    if rec.train_ids != train_ids || rec.val_ids != val_ids {
        return None;
    }
    Checkpoint::load(&fdir).ok().map(|c| (rec, c))
}

fn fold_plans<'a>(data: &'a TaskDataset, split: &SplitPlan) -> Vec<FoldPlan<'a>> {
    (0..split.k)
        .map(|i| FoldPlan {
            train: data.select(&split.train_ids(i)),
            val: data.select(&split.folds[i]),
            init: None,
        })
        .collect()
}

fn split_for(data: &TaskDataset, config: &ExperimentConfig) -> Result<SplitPlan> {
    make_folds(data, config.k, rng::derive(config.seed, "folds"))
}

/// Trains each fold from scratch on the other folds of `data`.
pub fn run_standard(data: &TaskDataset, config: &ExperimentConfig, opts: &RunOptions) -> Result<StrategyRun> {
    let config = config.with_strategy(Strategy::Standard, data.task);
    let split = split_for(data, &config)?;
    let plans = fold_plans(data, &split);
    run_folds(&config, split, plans, opts)
}

/// Fine-tunes fold i on `target` starting from fold i of `source`.
pub fn run_cross_task(
    source: &StrategyRun,
    target: &TaskDataset,
    config: &ExperimentConfig,
    opts: &RunOptions,
) -> Result<StrategyRun> {
    if source.target_task == target.task {
        return Err(Error::Strategy(format!(
            "cross-task source and target are both {}",
            target.task.as_str()
        )));
    }
    if source.fold_checkpoints.len() != config.k {
        return Err(Error::FoldCountMismatch {
            source_k: source.fold_checkpoints.len(),
            target_k: config.k,
        });
    }
    let expected = fingerprint(&config.model);
    if let Some(bad) = source.fold_checkpoints.iter().find(|c| c.meta.fingerprint != expected) {
        return Err(Error::FingerprintMismatch {
            model: expected.to_string(),
            checkpoint: bad.meta.fingerprint.to_string(),
        });
    }
    let config = config.with_strategy(Strategy::CrossTask, target.task);
    let split = split_for(target, &config)?;
    let mut plans = fold_plans(target, &split);
    for (plan, ckpt) in plans.iter_mut().zip(&source.fold_checkpoints) {
        plan.init = Some(ckpt);
    }
    run_folds(&config, split, plans, opts)
}

/// Folds come from the target task; every fold also trains on all of the
/// other task's samples and validates on target samples only.
pub fn run_union(
    task_a: &TaskDataset,
    task_b: &TaskDataset,
    target_task: Task,
    config: &ExperimentConfig,
    opts: &RunOptions,
) -> Result<StrategyRun> {
    if task_a.task == task_b.task {
        return Err(Error::Strategy(format!("union needs two tasks, got {} twice", task_a.task.as_str())));
    }
    let (target, other) = if task_a.task == target_task {
        (task_a, task_b)
    } else if task_b.task == target_task {
        (task_b, task_a)
    } else {
        unreachable!("two distinct tasks cover both values")
    };
    let config = config.with_strategy(Strategy::Union, target_task);
    let split = split_for(target, &config)?;
    let mut plans = fold_plans(target, &split);
    for plan in &mut plans {
        plan.train.extend(other.samples.iter());
    }
    run_folds(&config, split, plans, opts)
}

/// All six runs: standard T1 and T2, cross-task into T2 and into T1, union
/// targeting T1 and T2.
pub fn run_matrix(t1: &TaskDataset, t2: &TaskDataset, config: &ExperimentConfig, opts: &RunOptions) -> Result<Vec<StrategyRun>> {
    if t1.task != Task::CrossOrgan || t2.task != Task::CrossScanner {
        return Err(Error::Strategy(format!(
            "expected {} then {} datasets, got {} and {}",
            Task::CrossOrgan.as_str(),
            Task::CrossScanner.as_str(),
            t1.task.as_str(),
            t2.task.as_str()
        )));
    }
    let std1 = run_standard(t1, config, opts)?;
    let std2 = run_standard(t2, config, opts)?;
    let cross2 = run_cross_task(&std1, t2, config, opts)?;
    let cross1 = run_cross_task(&std2, t1, config, opts)?;
    let union1 = run_union(t1, t2, Task::CrossOrgan, config, opts)?;
    let union2 = run_union(t1, t2, Task::CrossScanner, config, opts)?;
    Ok(vec![std1, std2, cross2, cross1, union1, union2])
}
