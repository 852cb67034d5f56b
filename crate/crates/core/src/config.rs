//! One hierarchical TOML file drives every pipeline stage. CLI flags
//! override file keys, file keys override defaults; unknown keys are
//! rejected by name.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attack::AttackConfig;
use crate::data::{synthetic, DatasetId, DatasetSplit};
use crate::error::{Error, Result};
use crate::models::{config_digest, FeatureSpec, ResNetConfig, UNetConfig};
use crate::scalar::Scalar;
use crate::training::TrainConfig;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            out_dir: PathBuf::from("runs/experiment"),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub dataset: DatasetId,
    pub root: PathBuf,
    pub split_seed: u64,
    /// 0 keeps the full split; otherwise a deterministic prefix subset.
    pub train_limit: usize,
    pub val_limit: usize,
    pub test_limit: usize,
    /// Generate a synthetic CIFAR-layout archive when none is present
    /// (offline runs and tests).
    pub synthesize_if_missing: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            dataset: DatasetId::Cifar10,
            root: PathBuf::from("./data"),
            split_seed: 1,
            train_limit: 0,
            val_limit: 0,
            test_limit: 0,
            synthesize_if_missing: false,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub transform: UNetConfig,
    pub classifier: ResNetConfig,
    pub inverse: UNetConfig,
    pub feature: FeatureSpec,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            transform: UNetConfig::default(),
            classifier: ResNetConfig::default(),
            inverse: UNetConfig::default(),
            feature: FeatureSpec::default(),
            init_seed: 1,
        }
    }
}

impl ModelConfig {
    pub fn transform_seed(&self) -> u64 {
        self.init_seed
    }

    pub fn classifier_seed(&self) -> u64 {
        self.init_seed ^ 0x517c_c1b7_2722_0a95
    }

    pub fn inverse_seed(&self) -> u64 {
        self.init_seed ^ 0x2545_f491_4f6c_dd1d
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub psnr_peak: f64,
    /// Columns in exported image grids.
    pub grid_examples: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            psnr_peak: 1.0,
            grid_examples: 10,
        }
    }
}

/// Everything one experiment needs, mirroring the pipeline stages.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub run: RunConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub attack: AttackConfig,
    pub model: ModelConfig,
    pub eval: EvalConfig,
    /// When non-empty, `train` runs once per alpha value.
    pub alpha_sweep: Vec<f64>,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::File(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: ExperimentConfig = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        // the dataset id lives in [data]; keep the training config in sync
        cfg.train.dataset = cfg.data.dataset;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.attack.validate()?;
        self.model.transform.validate()?;
        self.model.classifier.validate()?;
        self.model.inverse.validate()?;
        if self.model.classifier.num_classes != self.data.dataset.classes() {
            return Err(Error::Config(format!(
                "model.classifier.num_classes = {} does not match data.dataset {} ({} classes)",
                self.model.classifier.num_classes,
                self.data.dataset.name(),
                self.data.dataset.classes()
            )));
        }
        if self.eval.psnr_peak <= 0.0 {
            return Err(Error::Config("eval.psnr_peak must be positive".into()));
        }
        if self.alpha_sweep.iter().any(|&a| a < 0.0) {
            return Err(Error::Config("alpha_sweep values must be nonnegative".into()));
        }
        Ok(())
    }

    /// Flag overrides: flags > file > defaults.
    pub fn apply_overrides(&mut self, seed: Option<u64>, out_dir: Option<PathBuf>) {
        if let Some(seed) = seed {
            self.train.seed = seed;
            self.attack.seed = seed;
            self.model.init_seed = seed;
        }
        if let Some(out) = out_dir {
            self.run.out_dir = out;
        }
    }

    pub fn digest(&self) -> String {
        config_digest(self)
    }

    /// Load (optionally synthesizing) the dataset and apply subset limits.
    /// Returns the split and whether a synthetic archive was generated.
    pub fn load_split<T: Scalar>(&self) -> Result<(DatasetSplit<T>, bool)> {
        let synthesized = if self.data.synthesize_if_missing {
            std::fs::create_dir_all(&self.data.root)?;
            synthetic::ensure_archive(self.data.dataset, &self.data.root, self.data.split_seed)?
        } else {
            false
        };
        let full = crate::data::load_dataset(self.data.dataset, &self.data.root, self.data.split_seed)?;
        let split = if self.data.train_limit > 0 || self.data.val_limit > 0 || self.data.test_limit > 0
        {
            let t = if self.data.train_limit > 0 { self.data.train_limit } else { full.train.len() };
            let v = if self.data.val_limit > 0 { self.data.val_limit } else { full.val.len() };
            let s = if self.data.test_limit > 0 { self.data.test_limit } else { full.test.len() };
            full.subset(t, v, s)?
        } else {
            full
        };
        Ok((split, synthesized))
    }
}
