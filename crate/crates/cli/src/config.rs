//! Run configuration: one TOML file merging model, training, data, and
//! evaluation settings plus paths and the root seed. Flags override file
//! values; the resolved config is archived into every output directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use kvfuse_core::data::DistractorStyle;
use kvfuse_core::eval::EvalMode;
use kvfuse_core::model::ModelConfig;
use kvfuse_core::rng::derive_seed;
use kvfuse_core::train::TrainConfig;
use kvfuse_core::Error;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PathsConfig {
    /// Directory the synth command writes datasets into and the other
    /// commands read them from.
    pub data_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            data_dir: PathBuf::from("data"),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DataSection {
    pub train_count: usize,
    pub dev_count: usize,
    pub test_count: usize,
    pub n_passages: usize,
    pub unanswerable_rate: f64,
    pub distractor_style: DistractorStyle,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            train_count: 2000,
            dev_count: 600,
            test_count: 600,
            n_passages: 5,
            unanswerable_rate: 0.1,
            distractor_style: DistractorStyle::Confusable,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSection {
    pub mode: EvalMode,
    /// Gold positions swept by the sweep command.
    pub positions: Vec<usize>,
    /// Defaults to a value derived from the root seed when absent.
    pub shuffle_seed: Option<u64>,
    pub max_new: usize,
    pub limit: Option<usize>,
    /// Dataset file; relative paths resolve against `paths.data_dir`.
    pub dataset: PathBuf,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            mode: EvalMode::Fusion,
            // Every alternate location for the default five passages.
            positions: vec![0, 2, 4],
            shuffle_seed: None,
            max_new: 48,
            limit: None,
            dataset: PathBuf::from("dev.jsonl"),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Root seed; every subsystem derives its own stream from it.
    pub seed: u64,
    pub paths: PathsConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataSection,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 42,
            paths: PathsConfig::default(),
            model: ModelConfig::desk_scale(),
            train: TrainConfig::desk_scale(),
            data: DataSection::default(),
            eval: EvalSection::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, Error> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Seeds derived for each subsystem.
    pub fn model_seed(&self) -> u64 {
        derive_seed(self.seed, "model/init")
    }

    pub fn synth_seed(&self, split: &str) -> u64 {
        derive_seed(self.seed, &format!("synth/{split}"))
    }

    pub fn shuffle_seed(&self) -> u64 {
        self.eval
            .shuffle_seed
            .unwrap_or_else(|| derive_seed(self.seed, "eval/shuffle"))
    }

    /// Training seed flows from the root seed so one knob controls the run.
    pub fn resolved_train(&self) -> TrainConfig {
        TrainConfig {
            seed: derive_seed(self.seed, "train"),
            ..self.train.clone()
        }
    }

    pub fn dataset_path(&self, file: &Path) -> PathBuf {
        if file.is_absolute() {
            file.to_path_buf()
        } else {
            self.paths.data_dir.join(file)
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serialization")
    }

    /// Write the fully resolved config into an output directory.
    pub fn archive(&self, out_dir: &Path) -> Result<(), Error> {
        std::fs::create_dir_all(out_dir)?;
        std::fs::write(out_dir.join("config.toml"), self.to_toml())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_roundtrips_through_toml() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml();
        let parsed: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(parsed.seed, cfg.seed);
        assert_eq!(parsed.model, cfg.model);
        assert_eq!(parsed.train.total_steps, cfg.train.total_steps);
        assert_eq!(parsed.eval.positions, cfg.eval.positions);
    }

    #[test]
    fn partial_file_fills_defaults() {
        let parsed: RunConfig = toml::from_str("seed = 7\n[train]\ntotal_steps = 10\n").unwrap();
        assert_eq!(parsed.seed, 7);
        assert_eq!(parsed.train.total_steps, 10);
        assert_eq!(parsed.model, ModelConfig::desk_scale());
    }

    #[test]
    fn derived_seeds_differ_by_subsystem() {
        let cfg = RunConfig::default();
        assert_ne!(cfg.model_seed(), cfg.synth_seed("train"));
        assert_ne!(cfg.synth_seed("train"), cfg.synth_seed("dev"));
    }
}
