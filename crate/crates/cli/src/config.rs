//! Experiment configuration, read from TOML.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Result;
use cryoflow::diffusion::NoiseSchedule;
use cryoflow::phantom::PhantomParams;
use cryoflow::sampler::Method;
use cryoflow::train::{Arm, TrainConfig};
use cryoflow::ModelConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub dir: PathBuf,
    pub n_train: usize,
    pub n_test: usize,
    pub base_seed: u64,
    pub phantom: PhantomParams,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            dir: PathBuf::from("data"),
            n_train: 40,
            n_test: 8,
            base_seed: 1000,
            phantom: PhantomParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub source_time: f32,
    pub delta_t: f32,
    pub method: Method,
    pub steps: Vec<usize>,
    pub threshold: f32,
    /// 0 integrates the whole crop in one piece.
    pub tile_edge: usize,
    pub tile_overlap: usize,
    pub sample_seed: u64,
    pub rollout_horizons: Vec<f32>,
    /// Arms scored by `eval` when no model is named.
    pub arms: Vec<Arm>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            source_time: 3.0,
            delta_t: 7.0,
            method: Method::Heun,
            steps: vec![50],
            threshold: cryoflow::sampler::MASK_THRESHOLD,
            tile_edge: 0,
            tile_overlap: 8,
            sample_seed: 0,
            rollout_horizons: vec![1.0, 3.0, 5.0, 7.0],
            arms: vec![Arm::Flow, Arm::Diffusion],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub run_dir: PathBuf,
    pub checkpoint_every: u64,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub diffusion: NoiseSchedule,
    pub eval: EvalConfig,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            run_dir: PathBuf::from("runs"),
            checkpoint_every: 500,
            dataset: DatasetConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            diffusion: NoiseSchedule::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl Config {
    /// Reads `path`; relative directories inside are taken relative to the
    /// config file.
    pub fn load(path: &Path) -> Result<Config> {
        let text = fs::read_to_string(path)
            .map_err(|e| cryoflow::Error::Config(format!("reading {}: {e}", path.display())))?;
        let mut cfg: Config = toml::from_str(&text)
            .map_err(|e| cryoflow::Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for dir in [&mut cfg.run_dir, &mut cfg.dataset.dir] {
            if dir.is_relative() {
                *dir = base.join(&*dir);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), cryoflow::Error> {
        self.dataset.phantom.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.diffusion.validate()?;
        if self.eval.steps.is_empty() || self.eval.steps.contains(&0) {
            return Err(cryoflow::Error::Config("eval.steps needs positive entries".into()));
        }
        if self.eval.arms.is_empty() {
            return Err(cryoflow::Error::Config("eval.arms needs at least one arm".into()));
        }
        if !(self.eval.threshold > 0.0 && self.eval.threshold < 1.0) {
            return Err(cryoflow::Error::Config("eval.threshold must lie in (0, 1)".into()));
        }
        Ok(())
    }

    /// Canonical TOML rendering, the input of [`Config::digest`]. The run and
    /// dataset directories are left out so that a moved experiment keeps its
    /// digest.
    pub fn canonical(&self) -> String {
        let located = Config {
            run_dir: PathBuf::new(),
            dataset: DatasetConfig {
                dir: PathBuf::new(),
                ..self.dataset.clone()
            },
            ..self.clone()
        };
        toml::to_string(&located).expect("config serializes")
    }

    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.canonical().as_bytes()))
    }

    /// Model hyperparameters for `arm`; the input width follows the arm.
    pub fn model_for(&self, arm: Arm) -> ModelConfig {
        ModelConfig {
            in_channels: arm.in_channels(),
            ..self.model.clone()
        }
    }

    pub fn checkpoint_path(&self, arm: Arm) -> PathBuf {
        self.run_dir.join(format!("{arm}.ckpt"))
    }
}
