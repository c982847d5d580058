//! Pipeline configuration: one JSON document, every field optional, with
//! defaults equal to [`PipelineConfig::default`].

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::align::PyramidConfig;
use crate::losses::LossWeights;
use crate::reconstruct::{BranchConfig, TrainConfig};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub disturbance: f64,
    pub crop_size: usize,
    pub count: usize,
    /// Side of the procedural source used when no source image is given.
    pub source_size: usize,
    pub photometric_jitter: f64,
    /// Disturbances swept by evaluation runs.
    pub sweep: Vec<f64>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            disturbance: 32.0,
            crop_size: 128,
            count: 10,
            source_size: 256,
            photometric_jitter: 0.0,
            sweep: vec![8.0, 16.0, 32.0],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Root of every random stream; never taken from the clock.
    pub seed: u64,
    pub weights: LossWeights,
    pub pyramid: PyramidConfig,
    pub branch: BranchConfig,
    pub train: TrainConfig,
    pub synth: SynthConfig,
    pub dataset: Option<PathBuf>,
    pub output: PathBuf,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            weights: LossWeights::default(),
            pyramid: PyramidConfig::default(),
            branch: BranchConfig::default(),
            train: TrainConfig::default(),
            synth: SynthConfig::default(),
            dataset: None,
            output: PathBuf::from("out"),
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(e.to_string()))?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        self.pyramid.validate()?;
        self.branch.validate()?;
        if self.train.epochs == 0 {
            return Err(Error::Config("train.epochs must be positive".into()));
        }
        if !(self.train.adam.lr > 0.0 && self.train.adam.lr.is_finite()) {
            return Err(Error::Config("train.adam.lr must be positive".into()));
        }
        if !(self.synth.disturbance >= 0.0 && self.synth.disturbance.is_finite()) || self.synth.crop_size == 0 {
            return Err(Error::Config("synth: disturbance must be >= 0 and crop_size positive".into()));
        }
        Ok(())
    }
}
