//! Learned relative-pose estimation: IMU initial pose, map remapping,
//! siamese encoders, pose heads, unsupervised training and sequence runs.

pub mod config;
pub mod data;
pub mod model;
pub mod train;

pub use config::{Matching, PipelineConfig, TrainConfig};
pub use data::{cache_key, load_sequence, SequenceData};
pub use model::{Estimate, HeadMode, HeadType, ImuMode, ModelConfig, OdometryModel, PairInput};
pub use train::{
    evaluate_pair, frame_pairs, load_model, match_pair, pair_loss, pose_error, run_sequence, save_model,
    EpochStats, FramePair, InferenceMode, PairDiagnostics, PairLoss, PreparedScan, SequenceResult, Trainer,
};

#[cfg(test)]
pub(crate) mod fixture {
    use super::*;
    use crate::dataset_io::ImuWindow;
    use crate::geometry::Pose;
    use crate::synth::{generate_sequence, SequenceSpec, TrajectorySpec};

    pub struct Fixture {
        pub config: PipelineConfig,
        pub scans: Vec<PreparedScan>,
        pub windows: Vec<ImuWindow>,
        pub truth: Vec<Pose>,
    }

    /// Short desk-scale corridor sequence.
    pub fn corridor(frames: usize, config: PipelineConfig) -> Fixture {
        let seq = generate_sequence(&SequenceSpec {
            trajectory: TrajectorySpec {
                frames,
                ..TrajectorySpec::default()
            },
            seed: 11,
            ..SequenceSpec::default()
        })
        .unwrap();
        let scans = seq.scans.iter().map(|s| PreparedScan::new(s, &config).unwrap()).collect();
        let truth = (0..frames - 1).map(|k| seq.relative_pose(k)).collect();
        Fixture {
            config,
            scans,
            windows: seq.windows,
            truth,
        }
    }

    /// Encoder narrow enough for finite differences.
    pub fn tiny_config() -> PipelineConfig {
        let mut c = PipelineConfig::desk();
        c.model.encoder.channels = [2, 3, 4];
        c.model.encoder.feature_dim = 4;
        c.model.lstm_hidden = 3;
        c.model.imu_fc = 3;
        c.model.head_width = 4;
        c
    }
}
