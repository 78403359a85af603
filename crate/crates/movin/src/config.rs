//! Run configuration file (TOML). Every table and field is optional; missing
//! values take the library defaults and command-line flags override the file.
//! The top-level `seed` drives generation, model initialization, training and
//! inference; it replaces any `[train]` seed.
//!
//! ```toml
//! seed = 7
//!
//! [model]          # network shape, see `ModelConfig`
//! channels = 32
//! points = 256
//!
//! [train]          # optimizer and curriculum, see `TrainConfig`
//! epochs = 120
//! lr = 1e-4
//!
//! [sensor]         # simulated LiDAR, see `SensorConfig`
//! h_res = 192
//!
//! [foot_ik]
//! alpha = 0.2
//!
//! [inference]
//! latent = "zero"  # or "sample"
//!
//! [data]
//! categories = ["walk", "idle"]
//! duration_s = 60.0
//! test_every = 5
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use movin_core::inference::LatentPolicy;
use movin_core::lidar::SensorConfig;
use movin_core::motion::MotionCategory;
use movin_core::network::ModelConfig;
use movin_core::postprocess::FootIkConfig;
use movin_core::training::TrainConfig;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub sensor: SensorConfig,
    pub foot_ik: FootIkConfig,
    pub inference: InferenceConfig,
    pub data: DataConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            sensor: SensorConfig::default(),
            foot_ik: FootIkConfig::default(),
            inference: InferenceConfig::default(),
            data: DataConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceConfig {
    pub latent: LatentPolicy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub categories: Vec<MotionCategory>,
    pub duration_s: f64,
    /// Every n-th sequence goes to the test split; 0 keeps all for training.
    pub test_every: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { categories: vec![MotionCategory::Walk, MotionCategory::Idle], duration_s: 60.0, test_every: 5 }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str, path: &Path) -> Result<Self> {
        toml::from_str(text).map_err(|source| Error::Toml { path: path.to_path_buf(), source })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(Error::io(path))?;
        Self::from_toml(&text, path)
    }

    /// The file at `path`, or the defaults when there is none.
    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes to TOML")
    }
}
