use serde::{Deserialize, Serialize};

use crate::correspondence::LossWeights;
use crate::nn::{AdamConfig, StepSchedule};
use crate::preprocess::PreprocessParams;
use crate::range_image::ProjectionConfig;
use crate::registration::RegistrationOptions;

use super::model::ModelConfig;

/// How training pairs the predicted-transformed current frame with the last.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Matching {
    /// Nearest neighbor over the preprocessed loss clouds.
    Nearest,
    /// Same-pixel pairs after remapping the current maps.
    Pixel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: StepSchedule,
    pub adam: AdamConfig,
    /// EMA momentum for the encoders' running normalization statistics.
    pub norm_momentum: f64,
    /// Shuffle seed; epoch `e` shuffles with `seed + e`.
    pub seed: u64,
    /// Write a checkpoint every this many epochs; 0 disables.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 20,
            schedule: StepSchedule::default(),
            adam: AdamConfig::default(),
            norm_momentum: 0.1,
            seed: 0,
            checkpoint_every: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub model: ModelConfig,
    pub projection: ProjectionConfig,
    pub preprocess: PreprocessParams,
    pub matching: Matching,
    pub weights: LossWeights,
    /// Correspondence rejection distance during training, meters.
    pub max_dist: f64,
    pub train: TrainConfig,
    pub registration: RegistrationOptions,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            projection: ProjectionConfig::hdl64(),
            preprocess: PreprocessParams::default(),
            matching: Matching::Nearest,
            weights: LossWeights::default(),
            max_dist: 1.0,
            train: TrainConfig::default(),
            registration: RegistrationOptions::default(),
        }
    }
}

impl PipelineConfig {
    /// Desk-scale settings: 16×64 maps, narrow encoders, 512-point loss clouds.
    pub fn desk() -> Self {
        let mut c = Self {
            model: ModelConfig::desk(),
            projection: ProjectionConfig::desk(),
            ..Self::default()
        };
        c.preprocess.voxel.target = 512;
        c.preprocess.voxel.initial_side = 0.5;
        c.preprocess.remove_ground = false;
        c
    }
}
