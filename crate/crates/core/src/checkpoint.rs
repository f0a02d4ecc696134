//! Checkpoint containers: a directory with one `.npy` array per parameter
//! and a `metadata.json` sidecar.

use std::fs;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use ndarray_npy::{read_npy, write_npy};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Fingerprint, ModelConfig, ParameterSet, SegmentationModel};
use crate::nn::Tensor;
use crate::types::{Strategy, Task};

pub const METADATA_FILE: &str = "metadata.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub fingerprint: Fingerprint,
    pub config: ModelConfig,
    pub strategy: Strategy,
    pub task: Task,
    pub fold: usize,
    pub epoch: usize,
    pub best_val_dice: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: ParameterSet,
}

impl Checkpoint {
    pub fn from_model(model: &SegmentationModel, strategy: Strategy, task: Task, fold: usize, seed: u64) -> Self {
        Checkpoint {
            meta: CheckpointMeta {
                fingerprint: model.fingerprint().clone(),
                config: model.config().clone(),
                strategy,
                task,
                fold,
                epoch: 0,
                best_val_dice: 0.0,
                seed,
            },
            params: model.params().clone(),
        }
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, t) in self.params.iter() {
            let path = dir.join(format!("{name}.npy"));
            let arr = ArrayD::from_shape_vec(IxDyn(&t.shape), t.data.clone()).expect("tensor shape is consistent");
            write_npy(&path, &arr).map_err(|e| Error::Checkpoint {
                path: path.clone(),
                message: e.to_string(),
            })?;
        }
        let path = dir.join(METADATA_FILE);
        let text = serde_json::to_string_pretty(&self.meta).expect("metadata serializes");
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let meta_path = dir.join(METADATA_FILE);
        let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: CheckpointMeta = serde_json::from_str(&text).map_err(|e| Error::Json {
            path: meta_path.clone(),
            source: e,
        })?;
        let mut files: Vec<_> = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "npy"))
            .collect();
        files.sort();
        let mut params = ParameterSet::new();
        for path in files {
            let name = path
                .file_stem()
                .and_then(|s| s.to_str())
                .ok_or_else(|| Error::Checkpoint {
                    path: path.clone(),
                    message: "non-utf8 file name".into(),
                })?
                .to_string();
            let arr: ArrayD<f64> = read_npy(&path).map_err(|e| Error::Checkpoint {
                path: path.clone(),
                message: e.to_string(),
            })?;
            let shape = arr.shape().to_vec();
            let data = arr.as_standard_layout().iter().copied().collect();
            params.insert(name, Tensor::new(shape, data));
        }
        Ok(Checkpoint { meta, params })
    }

    /// Whether `dir` holds a readable checkpoint sidecar.
    pub fn exists(dir: impl AsRef<Path>) -> bool {
        dir.as_ref().join(METADATA_FILE).is_file()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::build_model;

    #[test]
    fn save_load_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let model = build_model(&ModelConfig::tiny(), 11, None).unwrap();
        let ckpt = Checkpoint::from_model(&model, Strategy::Standard, Task::CrossOrgan, 2, 11);
        ckpt.save(dir.path()).unwrap();
        let back = Checkpoint::load(dir.path()).unwrap();
        assert_eq!(back, ckpt);

        let mut other = build_model(&ModelConfig::tiny(), 99, None).unwrap();
        other.load_parameters(&back, true).unwrap();
        assert_eq!(other.params(), model.params());
    }

    #[test]
    fn strict_load_across_widths_fails() {
        let model = build_model(&ModelConfig::tiny(), 1, None).unwrap();
        let ckpt = Checkpoint::from_model(&model, Strategy::Standard, Task::CrossOrgan, 0, 1);
        let mut cfg = ModelConfig::tiny();
        cfg.stage_widths = vec![2, 3, 5];
        let mut wide = build_model(&cfg, 1, None).unwrap();
        assert!(matches!(wide.load_parameters(&ckpt, true), Err(Error::FingerprintMismatch { .. })));
        // non-strict still refuses same-name arrays with different shapes
        assert!(matches!(wide.load_parameters(&ckpt, false), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn non_strict_load_reports_renamed_head() {
        let model = build_model(&ModelConfig::tiny(), 1, None).unwrap();
        let mut ckpt = Checkpoint::from_model(&model, Strategy::Standard, Task::CrossOrgan, 0, 1);
        let head = ckpt.params.remove("head.weight").unwrap();
        ckpt.params.insert("seg_head.weight".into(), head);

        let mut target = build_model(&ModelConfig::tiny(), 2, None).unwrap();
        let before = target.params().get("head.weight").unwrap().clone();
        let report = target.load_parameters(&ckpt, false).unwrap();
        assert_eq!(report.missing, vec!["head.weight".to_string()]);
        assert_eq!(report.unexpected, vec!["seg_head.weight".to_string()]);
        assert_eq!(target.params().get("head.weight").unwrap(), &before);
        assert_eq!(target.params().get("head.bias"), model.params().get("head.bias"));
    }
}
