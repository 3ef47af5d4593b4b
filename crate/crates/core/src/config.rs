//! Experiment configuration files: TOML with one section per subsystem.
//! Unknown keys are rejected; omitted keys take their defaults.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::SceneSpec;
use crate::error::{Error, Result};
use crate::select::SelectionSchedule;
use crate::smooth::SmoothingParams;
use crate::train::{TrainConfig, TrainMode, TransferConfig};

pub const RESOLVED_NAME: &str = "config.resolved";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub base_width: usize,
    pub depth: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        ModelSection {
            base_width: t.base_width,
            depth: t.depth,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub mode: String,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub crop: usize,
    pub plateau_patience: usize,
    pub plateau_factor: f64,
    pub consistency_weight: f64,
    pub seed: u64,
    /// Write a checkpoint every this many epochs; 0 writes only the last.
    pub checkpoint_every: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            mode: t.mode.to_string(),
            lr: t.lr,
            batch_size: t.batch_size,
            epochs: t.epochs,
            crop: t.crop,
            plateau_patience: t.plateau_patience,
            plateau_factor: t.plateau_factor,
            consistency_weight: t.consistency_weight,
            seed: t.seed,
            checkpoint_every: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransferSection {
    pub frozen: bool,
    /// `pretrained` or `random`.
    pub init: String,
    /// Modality of the pretrained model whose encoder is reused (1-based).
    pub source_modality: usize,
    /// Downstream data modality (1-based).
    pub modality: usize,
    /// Old class to new class; empty keeps the alphabet.
    pub class_map: Vec<u8>,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub crop: usize,
    pub plateau_patience: usize,
    pub plateau_factor: f64,
    pub seed: u64,
}

impl Default for TransferSection {
    fn default() -> Self {
        let t = TransferConfig::default();
        TransferSection {
            frozen: t.frozen,
            init: "pretrained".into(),
            source_modality: 1,
            modality: 1,
            class_map: Vec::new(),
            lr: t.lr,
            batch_size: t.batch_size,
            epochs: t.epochs,
            crop: t.crop,
            plateau_patience: t.plateau_patience,
            plateau_factor: t.plateau_factor,
            seed: t.seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: String,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection { dir: "out".into() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: SceneSpec,
    pub model: ModelSection,
    pub train: TrainSection,
    pub selection: SelectionSchedule,
    pub smoothing: SmoothingParams,
    pub transfer: TransferSection,
    pub output: OutputSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        ExperimentConfig {
            data: SceneSpec::default(),
            model: ModelSection::default(),
            train: TrainSection::default(),
            selection: t.schedule,
            smoothing: t.smoothing,
            transfer: TransferSection::default(),
            output: OutputSection::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::format(format!("config: {e}")))
    }

    /// Writes the fully resolved configuration into `dir`.
    pub fn write_resolved(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(RESOLVED_NAME), self.to_toml()?)?;
        Ok(())
    }

    /// Overrides every seed in the file.
    pub fn set_seed(&mut self, seed: u64) {
        self.data.seed = seed;
        self.train.seed = seed;
        self.transfer.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.train_config()?.validate()?;
        let t = &self.transfer;
        if !matches!(t.init.as_str(), "pretrained" | "random") {
            return Err(Error::config(format!("transfer.init must be pretrained or random, got {:?}", t.init)));
        }
        if !(1..=2).contains(&t.modality) || !(1..=2).contains(&t.source_modality) {
            return Err(Error::config("transfer modalities are 1 or 2"));
        }
        if !t.class_map.is_empty() && t.class_map.len() != self.data.num_classes {
            return Err(Error::config(format!(
                "transfer.class_map has {} entries for {} classes",
                t.class_map.len(),
                self.data.num_classes
            )));
        }
        Ok(())
    }

    pub fn mode(&self) -> Result<TrainMode> {
        self.train.mode.parse()
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let t = &self.train;
        Ok(TrainConfig {
            mode: self.mode()?,
            base_width: self.model.base_width,
            depth: self.model.depth,
            lr: t.lr,
            batch_size: t.batch_size,
            epochs: t.epochs,
            crop: t.crop,
            plateau_patience: t.plateau_patience,
            plateau_factor: t.plateau_factor,
            schedule: self.selection,
            smoothing: self.smoothing,
            consistency_weight: t.consistency_weight,
            seed: t.seed,
        })
    }

    pub fn transfer_config(&self) -> TransferConfig {
        let t = &self.transfer;
        TransferConfig {
            frozen: t.frozen,
            modality: t.modality - 1,
            base_width: self.model.base_width,
            depth: self.model.depth,
            lr: t.lr,
            batch_size: t.batch_size,
            epochs: t.epochs,
            crop: t.crop,
            plateau_patience: t.plateau_patience,
            plateau_factor: t.plateau_factor,
            seed: t.seed,
        }
    }
}
