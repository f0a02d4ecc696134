//! Shared domain types.
//!
//! All rasters are stored row-major. Images are channel-planar (`[3, h, w]`),
//! masks are single-plane (`[h, w]`). Values are kept at native resolution;
//! resizing only happens inside training and inference.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;

/// Native patch size of the real challenge data.
pub const NATIVE_PATCH_SIZE: (usize, usize) = (1500, 1500);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    CrossOrgan,
    CrossScanner,
}

impl Task {
    pub const ALL: [Task; 2] = [Task::CrossOrgan, Task::CrossScanner];

    pub fn as_str(self) -> &'static str {
        match self {
            Task::CrossOrgan => "cross_organ",
            Task::CrossScanner => "cross_scanner",
        }
    }

    /// Short label used in tables and run directory names.
    pub fn short(self) -> &'static str {
        match self {
            Task::CrossOrgan => "T1",
            Task::CrossScanner => "T2",
        }
    }

    pub fn other(self) -> Task {
        match self {
            Task::CrossOrgan => Task::CrossScanner,
            Task::CrossScanner => Task::CrossOrgan,
        }
    }

    pub fn parse(s: &str) -> Option<Task> {
        match s.to_ascii_lowercase().as_str() {
            "cross_organ" | "t1" => Some(Task::CrossOrgan),
            "cross_scanner" | "t2" => Some(Task::CrossScanner),
            _ => None,
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Standard,
    CrossTask,
    Union,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Standard, Strategy::CrossTask, Strategy::Union];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Standard => "standard",
            Strategy::CrossTask => "cross_task",
            Strategy::Union => "union",
        }
    }

    /// Column heading in the comparison table.
    pub fn title(self) -> &'static str {
        match self {
            Strategy::Standard => "Conventional",
            Strategy::CrossTask => "Crossed Pre-Training",
            Strategy::Union => "Dataset Union",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A 3-channel image with values in `[0, 1]`, stored as `[3, h, w]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePatch {
    pub id: String,
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f32>,
}

impl ImagePatch {
    pub fn new(id: impl Into<String>, height: usize, width: usize, pixels: Vec<f32>) -> Self {
        ImagePatch {
            id: id.into(),
            height,
            width,
            pixels,
        }
    }

    /// Patches are stored unresized, so the native size is the raster size.
    pub fn native_size(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let plane = self.height * self.width;
        &self.pixels[c * plane..(c + 1) * plane]
    }
}

/// A single-channel mask. Well-formed masks hold only `0.0` and `1.0`; the
/// float storage lets ingestion and validation see non-binary sources.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMask {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f32>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, values: Vec<f32>) -> Self {
        BinaryMask {
            height,
            width,
            values,
        }
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        BinaryMask::new(height, width, vec![0.0; height * width])
    }

    pub fn from_bools(height: usize, width: usize, bits: impl IntoIterator<Item = bool>) -> Self {
        let values: Vec<f32> = bits.into_iter().map(|b| if b { 1.0 } else { 0.0 }).collect();
        BinaryMask::new(height, width, values)
    }

    pub fn is_binary(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    pub fn foreground(&self) -> usize {
        self.values.iter().filter(|&&v| v == 1.0).count()
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.values[y * self.width + x] == 1.0
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DomainLabel {
    pub task: Task,
    pub domain_name: String,
    pub seen: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub patch: ImagePatch,
    pub mask: BinaryMask,
    pub domain: DomainLabel,
}

impl Sample {
    pub fn id(&self) -> &str {
        &self.patch.id
    }
}

/// Lists every invariant violation of `sample`. An empty list means the
/// sample is well formed.
pub fn validate_sample(sample: &Sample) -> Vec<String> {
    let mut violations = Vec::new();
    let patch = &sample.patch;
    if patch.height == 0 || patch.width == 0 {
        violations.push("image has zero size".to_string());
    }
    if patch.pixels.len() != 3 * patch.height * patch.width {
        violations.push(format!(
            "image holds {} values, expected 3x{}x{}",
            patch.pixels.len(),
            patch.height,
            patch.width
        ));
    }
    if patch.pixels.iter().any(|v| !v.is_finite()) {
        violations.push("pixel not finite".to_string());
    } else if patch.pixels.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        violations.push("pixel out of range".to_string());
    }
    let mask = &sample.mask;
    if mask.values.len() != mask.height * mask.width {
        violations.push(format!(
            "mask holds {} values, expected {}x{}",
            mask.values.len(),
            mask.height,
            mask.width
        ));
    }
    if !mask.is_binary() {
        violations.push("mask not binary".to_string());
    }
    if (mask.height, mask.width) != (patch.height, patch.width) {
        violations.push(format!(
            "mask is {}x{} but image is {}x{}",
            mask.height, mask.width, patch.height, patch.width
        ));
    }
    if sample.domain.domain_name.is_empty() {
        violations.push("empty domain name".to_string());
    }
    violations
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskDataset {
    pub task: Task,
    pub samples: Vec<Sample>,
    pub manifest_path: PathBuf,
}

impl TaskDataset {
    /// Builds a dataset, rejecting duplicate ids, foreign tasks, malformed
    /// samples and domains whose seen flag is inconsistent.
    pub fn new(task: Task, samples: Vec<Sample>, manifest_path: impl Into<PathBuf>) -> Result<Self> {
        let mut ids = HashSet::new();
        let mut seen_flags: BTreeMap<&str, bool> = BTreeMap::new();
        for sample in &samples {
            if !ids.insert(sample.id()) {
                return Err(Error::DuplicateId(sample.id().to_string()));
            }
            let mut violations = validate_sample(sample);
            if sample.domain.task != task {
                violations.push(format!(
                    "task {} differs from dataset task {}",
                    sample.domain.task, task
                ));
            }
            match seen_flags.insert(&sample.domain.domain_name, sample.domain.seen) {
                Some(prev) if prev != sample.domain.seen => violations.push(format!(
                    "domain {:?} has inconsistent seen flags",
                    sample.domain.domain_name
                )),
                _ => {}
            }
            if !violations.is_empty() {
                return Err(Error::InvalidSample {
                    id: sample.id().to_string(),
                    violations,
                });
            }
        }
        Ok(TaskDataset {
            task,
            samples,
            manifest_path: manifest_path.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn ids(&self) -> Vec<String> {
        self.samples.iter().map(|s| s.id().to_string()).collect()
    }

    pub fn domains(&self) -> BTreeSet<String> {
        self.samples
            .iter()
            .map(|s| s.domain.domain_name.clone())
            .collect()
    }

    pub fn get(&self, id: &str) -> Option<&Sample> {
        self.samples.iter().find(|s| s.id() == id)
    }

    /// Samples whose ids are in `ids`, in dataset order.
    pub fn select<'a>(&'a self, ids: &[String]) -> Vec<&'a Sample> {
        let wanted: HashSet<&str> = ids.iter().map(String::as_str).collect();
        self.samples
            .iter()
            .filter(|s| wanted.contains(s.id()))
            .collect()
    }
}

/// A seeded k-fold partition of sample ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub k: usize,
    pub seed: u64,
    pub folds: Vec<Vec<String>>,
}

impl SplitPlan {
    /// Checks the partition laws against `ids`: k folds, pairwise disjoint,
    /// union equal to `ids`, sizes within one of each other.
    pub fn check_partition(&self, ids: &[String]) -> std::result::Result<(), String> {
        if self.folds.len() != self.k {
            return Err(format!("{} folds for k = {}", self.folds.len(), self.k));
        }
        let mut union = BTreeSet::new();
        for (i, fold) in self.folds.iter().enumerate() {
            for id in fold {
                if !union.insert(id.as_str()) {
                    return Err(format!("id {id:?} appears twice (fold {i})"));
                }
            }
        }
        let expected: BTreeSet<&str> = ids.iter().map(String::as_str).collect();
        if union != expected {
            return Err("fold union differs from the dataset id set".to_string());
        }
        let min = self.folds.iter().map(Vec::len).min().unwrap_or(0);
        let max = self.folds.iter().map(Vec::len).max().unwrap_or(0);
        if max - min > 1 {
            return Err(format!("fold sizes range from {min} to {max}"));
        }
        Ok(())
    }

    /// Ids outside fold `i`, in fold order.
    pub fn train_ids(&self, i: usize) -> Vec<String> {
        self.folds
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != i)
            .flat_map(|(_, f)| f.iter().cloned())
            .collect()
    }
}

/// One experiment: a strategy applied to a target task, with the training
/// recipe constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub strategy: Strategy,
    pub target_task: Task,
    pub base_lr: f64,
    pub epochs: usize,
    /// Number of cosine cycles over `epochs`.
    pub cycles: usize,
    pub batch_size: usize,
    pub train_resolution: (usize, usize),
    pub k: usize,
    pub seed: u64,
    pub model_preset: String,
    pub model: ModelConfig,
    pub threshold: f64,
    /// Random flips and, for square inputs, quarter turns of training batches.
    pub augment: bool,
}

impl ExperimentConfig {
    /// Full-scale recipe: 1024x1024 inputs, 30 epochs, lr 1e-4, five folds.
    pub fn paper(strategy: Strategy, target_task: Task) -> Self {
        ExperimentConfig {
            strategy,
            target_task,
            base_lr: 1e-4,
            epochs: 30,
            cycles: 1,
            batch_size: 4,
            train_resolution: (1024, 1024),
            k: 5,
            seed: 0,
            model_preset: "paper".to_string(),
            model: ModelConfig::paper(),
            threshold: 0.5,
            augment: false,
        }
    }

    /// CPU-sized recipe used by tests and the synthetic benchmark.
    pub fn desk(strategy: Strategy, target_task: Task) -> Self {
        ExperimentConfig {
            strategy,
            target_task,
            base_lr: DESK_LR,
            epochs: 8,
            cycles: 1,
            batch_size: 8,
            train_resolution: (64, 64),
            k: 5,
            seed: 0,
            model_preset: "desk".to_string(),
            model: ModelConfig::desk(),
            threshold: 0.5,
            augment: false,
        }
    }

    pub fn preset(name: &str, strategy: Strategy, target_task: Task) -> Result<Self> {
        match name {
            "paper" => Ok(Self::paper(strategy, target_task)),
            "desk" => Ok(Self::desk(strategy, target_task)),
            other => Err(Error::config("preset", format!("unknown preset {other:?}"))),
        }
    }

    pub fn with_strategy(&self, strategy: Strategy, target_task: Task) -> Self {
        ExperimentConfig {
            strategy,
            target_task,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr.is_finite() && self.base_lr > 0.0) {
            return Err(Error::config("base_lr", "must be a positive number"));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs", "must be positive"));
        }
        if self.cycles == 0 {
            return Err(Error::config("cycles", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        if self.k == 0 {
            return Err(Error::config("k", "must be positive"));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::config("threshold", "must lie in (0, 1)"));
        }
        let (h, w) = self.train_resolution;
        let div = self.model.divisor();
        if h == 0 || w == 0 || h % div != 0 || w % div != 0 {
            return Err(Error::config(
                "train_resolution",
                format!("{h}x{w} must be positive multiples of {div}"),
            ));
        }
        self.model.validate()
    }
}

/// Learning rate of the desk preset. The tiny CPU model gets only a few
/// dozen steps per fold, so the full-scale 1e-4 would leave it untrained.
pub const DESK_LR: f64 = 3e-3;

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(id: &str, h: usize, w: usize) -> Sample {
        Sample {
            patch: ImagePatch::new(id, h, w, vec![0.5; 3 * h * w]),
            mask: BinaryMask::zeros(h, w),
            domain: DomainLabel {
                task: Task::CrossOrgan,
                domain_name: "organ-0".into(),
                seen: true,
            },
        }
    }

    #[test]
    fn well_formed_sample_has_no_violations() {
        assert!(validate_sample(&sample("a", 4, 4)).is_empty());
    }

    #[test]
    fn half_valued_mask_is_reported() {
        let mut s = sample("a", 4, 4);
        s.mask.values[3] = 0.5;
        let before = s.clone();
        assert_eq!(validate_sample(&s), vec!["mask not binary".to_string()]);
        assert_eq!(s, before);
    }

    #[test]
    fn out_of_range_pixel_is_reported() {
        let mut s = sample("a", 4, 4);
        s.patch.pixels[0] = 1.5;
        assert_eq!(validate_sample(&s), vec!["pixel out of range".to_string()]);
    }

    #[test]
    fn dataset_rejects_duplicates_and_inconsistent_seen() {
        let err = TaskDataset::new(Task::CrossOrgan, vec![sample("s1", 2, 2), sample("s1", 2, 2)], "m")
            .unwrap_err();
        assert!(matches!(err, Error::DuplicateId(ref id) if id == "s1"));

        let mut b = sample("s2", 2, 2);
        b.domain.seen = false;
        let err = TaskDataset::new(Task::CrossOrgan, vec![sample("s1", 2, 2), b], "m").unwrap_err();
        assert!(matches!(err, Error::InvalidSample { ref id, .. } if id == "s2"));
    }

    #[test]
    fn partition_check_catches_overlap_and_imbalance() {
        let ids: Vec<String> = (0..4).map(|i| i.to_string()).collect();
        let ok = SplitPlan {
            k: 2,
            seed: 0,
            folds: vec![vec!["0".into(), "1".into()], vec!["2".into(), "3".into()]],
        };
        assert!(ok.check_partition(&ids).is_ok());
        let skewed = SplitPlan {
            k: 2,
            seed: 0,
            folds: vec![vec!["0".into(), "1".into(), "2".into()], vec!["3".into()]],
        };
        assert!(skewed.check_partition(&ids).is_err());
        let overlap = SplitPlan {
            k: 2,
            seed: 0,
            folds: vec![vec!["0".into(), "1".into()], vec!["1".into(), "2".into(), "3".into()]],
        };
        assert!(overlap.check_partition(&ids).is_err());
    }

    #[test]
    fn presets_validate() {
        ExperimentConfig::paper(Strategy::Standard, Task::CrossOrgan).validate().unwrap();
        ExperimentConfig::desk(Strategy::Union, Task::CrossScanner).validate().unwrap();
        let mut bad = ExperimentConfig::desk(Strategy::Standard, Task::CrossOrgan);
        bad.train_resolution = (60, 60);
        assert!(bad.validate().is_err());
    }
}
