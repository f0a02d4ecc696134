//! The experiment file: one JSON document with `data`, `model`, `train`,
//! `strategy` and `eval` sections. Keys left out fall back to the chosen
//! preset, which is `paper` unless the file or the command line says
//! otherwise.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use segdg::model::ModelConfig;
use segdg::synth::GeneratorConfig;
use segdg::types::{ExperimentConfig, Strategy, Task};
use segdg::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub preset: Option<String>,
    pub data: DataSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub strategy: StrategySection,
    pub eval: EvalSection,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataSection {
    /// Dataset root holding `<task>/{train,seen_test,unseen_test}.json`.
    /// Relative paths are taken from the config file's directory.
    pub root: Option<PathBuf>,
    #[serde(flatten)]
    pub generator: GeneratorConfig,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub preset: Option<String>,
    /// Full architecture; wins over `preset`.
    pub config: Option<ModelConfig>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub base_lr: Option<f64>,
    pub epochs: Option<usize>,
    pub cycles: Option<usize>,
    pub batch_size: Option<usize>,
    pub train_resolution: Option<(usize, usize)>,
    pub seed: Option<u64>,
    pub augment: Option<bool>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StrategySection {
    pub k: Option<usize>,
    pub workers: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub threshold: Option<f64>,
}

fn invalid(field: &str, message: impl Into<String>) -> Error {
    Error::InvalidConfig {
        field: field.to_string(),
        message: message.into(),
    }
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| invalid("config", format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| invalid("config", format!("{}: {e}", path.display())))
    }

    /// Reads `path` when given, otherwise the all-defaults document. The
    /// second value is the directory relative data paths resolve against.
    pub fn load_or_default(path: Option<&Path>) -> Result<(Self, PathBuf)> {
        match path {
            Some(p) => {
                let dir = p.parent().map(Path::to_path_buf).unwrap_or_default();
                Ok((Self::load(p)?, dir))
            }
            None => Ok((Self::default(), PathBuf::new())),
        }
    }

    pub fn generator(&self, seed: Option<u64>) -> Result<GeneratorConfig> {
        let mut g = self.data.generator.clone();
        if let Some(s) = seed {
            g.seed = s;
        }
        g.validate()?;
        Ok(g)
    }

    pub fn data_root(&self, base: &Path) -> PathBuf {
        let root = self.data.root.clone().unwrap_or_else(|| PathBuf::from("data"));
        if root.is_absolute() {
            root
        } else {
            base.join(root)
        }
    }

    pub fn workers(&self) -> usize {
        self.strategy.workers.unwrap_or(1)
    }

    /// Experiment settings: preset defaults overlaid with every key the
    /// file sets, then the command-line overrides.
    pub fn experiment(&self, preset: Option<&str>, seed: Option<u64>) -> Result<ExperimentConfig> {
        let name = preset.or(self.preset.as_deref()).unwrap_or("paper");
        let mut c = ExperimentConfig::preset(name, Strategy::Standard, Task::CrossOrgan)?;
        if let Some(cfg) = &self.model.config {
            c.model = cfg.clone();
            c.model_preset = "custom".to_string();
        } else if let Some(p) = &self.model.preset {
            c.model = ModelConfig::preset(p)?;
            c.model_preset = p.clone();
        }
        let t = &self.train;
        if let Some(v) = t.base_lr {
            c.base_lr = v;
        }
        if let Some(v) = t.epochs {
            c.epochs = v;
        }
        if let Some(v) = t.cycles {
            c.cycles = v;
        }
        if let Some(v) = t.batch_size {
            c.batch_size = v;
        }
        if let Some(v) = t.train_resolution {
            c.train_resolution = v;
        }
        if let Some(v) = t.augment {
            c.augment = v;
        }
        if let Some(v) = t.seed {
            c.seed = v;
        }
        if let Some(v) = self.strategy.k {
            c.k = v;
        }
        if let Some(v) = self.eval.threshold {
            c.threshold = v;
        }
        if let Some(s) = seed {
            c.seed = s;
        }
        if self.workers() == 0 {
            return Err(invalid("strategy.workers", "must be positive"));
        }
        c.validate()?;
        Ok(c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_paper_recipe() {
        let c: FileConfig = serde_json::from_str("{}").unwrap();
        let e = c.experiment(None, None).unwrap();
        assert_eq!(e, ExperimentConfig::paper(Strategy::Standard, Task::CrossOrgan));
        assert_eq!((e.base_lr, e.epochs, e.k, e.train_resolution), (1e-4, 30, 5, (1024, 1024)));
    }

    #[test]
    fn keys_override_preset_and_flags_override_keys() {
        let c: FileConfig = serde_json::from_str(
            r#"{"preset": "desk", "train": {"epochs": 3, "seed": 4}, "strategy": {"k": 3}, "data": {"n_unseen_domains": 0}}"#,
        )
        .unwrap();
        let e = c.experiment(None, Some(9)).unwrap();
        assert_eq!((e.epochs, e.k, e.seed, e.train_resolution), (3, 3, 9, (64, 64)));
        assert_eq!(c.generator(None).unwrap().n_unseen_domains, 0);
        assert_eq!(c.experiment(Some("paper"), None).unwrap().train_resolution, (1024, 1024));
    }

    #[test]
    fn unknown_keys_and_bad_values_are_config_errors() {
        assert!(serde_json::from_str::<FileConfig>(r#"{"train": {"lr": 1}}"#).is_err());
        let c: FileConfig = serde_json::from_str(r#"{"eval": {"threshold": 1.5}}"#).unwrap();
        assert_eq!(c.experiment(None, None).unwrap_err().kind(), segdg::ErrorKind::Config);
        let c: FileConfig = serde_json::from_str(r#"{"model": {"preset": "huge"}}"#).unwrap();
        assert!(c.experiment(None, None).is_err());
    }
}
