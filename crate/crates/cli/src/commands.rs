use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use segdg::eval::{evaluate, evaluate_models, MetricsReport, Segmenter};
use segdg::manifest::load_manifest;
use segdg::strategies::{fold_dir, run_matrix, RunOptions, StrategyRun, CV_REPORT_FILE};
use segdg::synth::{write_task, TaskManifests};
use segdg::types::{ExperimentConfig, Strategy, Task};
use segdg::{Error, Result};

use crate::config::FileConfig;
use crate::table::{render_trend, Table, TrendEntry};

pub const RUN_MANIFEST_FILE: &str = "run_manifest.json";
pub const EXPERIMENT_FILE: &str = "experiment.json";

/// Layout of a run directory. Paths are relative to the directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub experiment: PathBuf,
    /// Training manifest per task name.
    pub data: BTreeMap<String, PathBuf>,
    pub runs: Vec<RunEntry>,
    /// Report files written by `eval`, per run name.
    #[serde(default)]
    pub eval_reports: BTreeMap<String, Vec<PathBuf>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunEntry {
    pub name: String,
    pub strategy: Strategy,
    pub task: Task,
    pub dir: PathBuf,
    pub cv_report: PathBuf,
    pub folds: Vec<PathBuf>,
}

impl RunManifest {
    pub fn read(run_dir: &Path) -> Result<Self> {
        let path = run_dir.join(RUN_MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::Io { path: path.clone(), source: e })?;
        serde_json::from_str(&text).map_err(|e| Error::Json { path, source: e })
    }

    pub fn write(&self, run_dir: &Path) -> Result<()> {
        write_json(&run_dir.join(RUN_MANIFEST_FILE), self)
    }

    /// Every path the manifest mentions that is not on disk.
    pub fn missing_paths(&self, run_dir: &Path) -> Vec<PathBuf> {
        let mut paths = vec![self.experiment.clone()];
        for r in &self.runs {
            paths.push(r.dir.clone());
            paths.push(r.cv_report.clone());
            paths.extend(r.folds.iter().cloned());
        }
        paths.extend(self.eval_reports.values().flatten().cloned());
        let mut missing: Vec<PathBuf> = paths.into_iter().filter(|p| !run_dir.join(p).exists()).collect();
        missing.extend(self.data.values().filter(|p| !p.exists()).cloned());
        missing
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::Io {
            path: parent.to_path_buf(),
            source: e,
        })?;
    }
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })?;
    fs::write(path, text + "\n").map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Writes the synthetic benchmark for both tasks under `out`.
pub fn cmd_generate(config: &FileConfig, out: &Path, seed: Option<u64>) -> Result<Vec<TaskManifests>> {
    let g = config.generator(seed)?;
    if g.n_unseen_domains == 0 {
        log::warn!("no unseen domains requested; unseen-test manifests will be empty");
    }
    Task::ALL
        .iter()
        .map(|&task| {
            let m = write_task(&g, task, out)?;
            log::info!("wrote {} manifests under {}", task.as_str(), out.join(task.as_str()).display());
            Ok(m)
        })
        .collect()
}

/// Training manifest of `task` under a dataset root.
pub fn train_manifest(data_root: &Path, task: Task) -> PathBuf {
    data_root.join(task.as_str()).join("train.json")
}

/// Runs the six-run strategy matrix into `out` and writes its manifest.
pub fn cmd_run(
    experiment: &ExperimentConfig,
    data_root: &Path,
    out: &Path,
    workers: usize,
    resume: bool,
) -> Result<RunManifest> {
    experiment.validate()?;
    let t1_path = train_manifest(data_root, Task::CrossOrgan);
    let t2_path = train_manifest(data_root, Task::CrossScanner);
    let t1 = load_manifest(&t1_path)?;
    let t2 = load_manifest(&t2_path)?;
    write_json(&out.join(EXPERIMENT_FILE), experiment)?;
    let opts = RunOptions {
        workers,
        out: Some(out.join("runs")),
        resume,
    };
    let runs = run_matrix(&t1, &t2, experiment, &opts)?;
    let entries = runs
        .iter()
        .map(|r| {
            let dir = PathBuf::from("runs").join(r.name());
            RunEntry {
                name: r.name(),
                strategy: r.strategy,
                task: r.target_task,
                cv_report: dir.join(CV_REPORT_FILE),
                folds: (0..r.split.k).map(|i| fold_dir(&dir, i)).collect(),
                dir,
            }
        })
        .collect();
    let previous = RunManifest::read(out).ok().filter(|_| resume);
    let manifest = RunManifest {
        experiment: PathBuf::from(EXPERIMENT_FILE),
        data: BTreeMap::from([
            (Task::CrossOrgan.as_str().to_string(), absolute(&t1_path)),
            (Task::CrossScanner.as_str().to_string(), absolute(&t2_path)),
        ]),
        runs: entries,
        eval_reports: previous.map(|p| p.eval_reports).unwrap_or_default(),
    };
    manifest.write(out)?;
    for r in &runs {
        log::info!("{} cross-validation Dice {}", r.name(), r.cv_report.aggregate);
    }
    Ok(manifest)
}

fn absolute(p: &Path) -> PathBuf {
    std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf())
}

/// Evaluates every run targeting the manifest's task with its k-fold
/// ensemble and writes `eval/<run>/<manifest stem>.{json,csv}`.
pub fn cmd_eval(run_dir: &Path, manifest_path: &Path) -> Result<Vec<PathBuf>> {
    eval_with(run_dir, manifest_path, |run, data| {
        let models = run.models()?;
        evaluate_models(&models, data, &run.config)
    })
}

/// `cmd_eval` with a caller-chosen predictor per run.
pub fn eval_with_segmenter(
    run_dir: &Path,
    manifest_path: &Path,
    make: impl Fn(&StrategyRun) -> Box<dyn Segmenter>,
) -> Result<Vec<PathBuf>> {
    eval_with(run_dir, manifest_path, |run, data| {
        evaluate(make(run).as_ref(), data, run.config.threshold)
    })
}

fn eval_with(
    run_dir: &Path,
    manifest_path: &Path,
    score: impl Fn(&StrategyRun, &segdg::types::TaskDataset) -> Result<MetricsReport>,
) -> Result<Vec<PathBuf>> {
    let mut manifest = RunManifest::read(run_dir)?;
    let data = load_manifest(manifest_path)?;
    let stem = manifest_path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::Strategy(format!("cannot name a report after {}", manifest_path.display())))?
        .to_string();
    if data.is_empty() {
        log::warn!("{} has no samples; nothing to evaluate", manifest_path.display());
        return Ok(Vec::new());
    }
    let mut written = Vec::new();
    for entry in manifest.runs.iter().filter(|r| r.task == data.task) {
        let run = StrategyRun::load(run_dir.join(&entry.dir))?;
        let report = score(&run, &data)?;
        let rel = PathBuf::from("eval").join(&entry.name).join(format!("{stem}.json"));
        let path = run_dir.join(&rel);
        let dir = path.parent().expect("eval/<run>/");
        fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
        report.write_json(&path)?;
        let csv_rel = rel.with_extension("csv");
        let file = fs::File::create(run_dir.join(&csv_rel)).map_err(|e| Error::Io {
            path: run_dir.join(&csv_rel),
            source: e,
        })?;
        report.write_csv(file)?;
        log::info!("{} on {stem}: Dice {}", entry.name, report.aggregate);
        let list = manifest.eval_reports.entry(entry.name.clone()).or_default();
        for p in [rel.clone(), csv_rel] {
            if !list.contains(&p) {
                list.push(p);
            }
        }
        written.push(path);
    }
    if written.is_empty() {
        return Err(Error::Strategy(format!(
            "no run in {} targets {}",
            run_dir.display(),
            data.task.as_str()
        )));
    }
    manifest.write(run_dir)?;
    Ok(written)
}

#[derive(Debug, Clone)]
pub struct TableOutput {
    pub table: Table,
    pub trend: Vec<TrendEntry>,
    pub text: String,
}

/// Renders the comparison table and trend report from persisted reports and
/// writes `table.txt`, `table.csv` and `trend.json` into the run directory.
pub fn cmd_table(run_dir: &Path) -> Result<TableOutput> {
    if !run_dir.is_dir() {
        return Err(Error::Io {
            path: run_dir.to_path_buf(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "run directory not found"),
        });
    }
    let table = Table::from_run_dir(run_dir)?;
    let trend = table.trend();
    for t in &trend {
        log::info!(
            "{} {} unseen Dice {:+.2} points vs Conventional",
            t.task.short(),
            t.strategy.title(),
            100.0 * t.delta
        );
    }
    let text = format!("{}\n{}", table.render(), render_trend(&trend));
    write_text(&run_dir.join("table.txt"), &text)?;
    let csv_path = run_dir.join("table.csv");
    let file = fs::File::create(&csv_path).map_err(|e| Error::Io { path: csv_path, source: e })?;
    table.write_csv(file)?;
    write_json(&run_dir.join("trend.json"), &trend)?;
    Ok(TableOutput { table, trend, text })
}

