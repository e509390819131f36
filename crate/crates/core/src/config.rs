//! Run configuration files: TOML, unknown keys rejected, dotted-path
//! overrides and named ablation presets.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::{HeadMode, HeadType, ImuMode, Matching, PipelineConfig};
use crate::synth::SequenceSpec;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Sequence directory with `velodyne/`, `times.txt` and optionally `oxts/`.
    pub sequence: Option<PathBuf>,
    /// Ground-truth pose file.
    pub ground_truth: Option<PathBuf>,
    /// Where preprocessed loss clouds are cached; overridden by `LIO_CACHE_DIR`.
    pub cache_dir: Option<PathBuf>,
    /// Run directory for configs, metrics, checkpoints and pose files.
    pub output: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub pipeline: PipelineConfig,
    pub data: DataConfig,
    pub synth: SequenceSpec,
}

/// Named presets and what they change.
pub const PRESETS: &[(&str, &str)] = &[
    ("desk", "16x64 maps, narrow encoders, 512-point loss clouds"),
    ("imu-initial-pose", "IMU branch predicts the initial pose"),
    ("imu-feature-concat", "IMU features concatenated with map features, no remap"),
    ("imu-none", "no IMU input"),
    ("two-branch", "translation from vertex features, rotation from both"),
    ("merged", "one head over vertex and normal features"),
    ("vertex-only", "vertex features only"),
    ("attention", "gated attention heads"),
    ("fc-activation", "fully connected heads with tanh"),
    ("point-to-plane", "loss weights alpha=1, lambda=0"),
    ("plane-to-plane", "loss weights alpha=0, lambda=0.1"),
    ("both-losses", "loss weights alpha=1, lambda=0.1"),
    ("nearest", "nearest-neighbor matching"),
    ("pixel", "pixel-to-pixel matching"),
];

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Writes the resolved configuration to `dir/config.toml`.
    pub fn write_resolved(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("config.toml");
        std::fs::write(&path, self.to_toml()?).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    /// Applies `section.key=value`. The value is read as a TOML literal,
    /// falling back to a plain string.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("expected key=value, got `{assignment}`")))?;
        let key = key.trim();
        let raw = raw.trim();
        let value: toml::Value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.to_string()));
        let mut root = toml::Value::try_from(&*self).map_err(|e| Error::Config(e.to_string()))?;
        let mut node = &mut root;
        let parts: Vec<&str> = key.split('.').collect();
        for (i, part) in parts.iter().enumerate() {
            let table = node
                .as_table_mut()
                .ok_or_else(|| Error::Config(format!("`{}` is not a section", parts[..i].join("."))))?;
            if i + 1 == parts.len() {
                table.insert((*part).to_string(), value.clone());
                break;
            }
            node = table
                .entry((*part).to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        }
        *self = root
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("{key}: {e}")))?;
        Ok(())
    }

    pub fn apply_preset(&mut self, name: &str) -> Result<()> {
        let p = &mut self.pipeline;
        match name {
            "desk" => {
                let keep = (p.train.clone(), p.weights, p.matching);
                *p = PipelineConfig::desk();
                (p.train, p.weights, p.matching) = keep;
            }
            "imu-initial-pose" => p.model.imu_mode = ImuMode::InitialPose,
            "imu-feature-concat" => p.model.imu_mode = ImuMode::FeatureConcat,
            "imu-none" => p.model.imu_mode = ImuMode::None,
            "two-branch" => p.model.head_mode = HeadMode::TwoBranch,
            "merged" => p.model.head_mode = HeadMode::Merged,
            "vertex-only" => p.model.head_mode = HeadMode::VertexOnly,
            "attention" => p.model.head_type = HeadType::Attention,
            "fc-activation" => p.model.head_type = HeadType::FcActivation,
            "point-to-plane" => (p.weights.alpha, p.weights.lambda) = (1.0, 0.0),
            "plane-to-plane" => (p.weights.alpha, p.weights.lambda) = (0.0, 0.1),
            "both-losses" => (p.weights.alpha, p.weights.lambda) = (1.0, 0.1),
            "nearest" => p.matching = Matching::Nearest,
            "pixel" => p.matching = Matching::Pixel,
            other => {
                let known: Vec<&str> = PRESETS.iter().map(|(n, _)| *n).collect();
                return Err(Error::Config(format!("unknown preset `{other}`; known: {}", known.join(", "))));
            }
        }
        Ok(())
    }

    /// `LIO_CACHE_DIR` when set, otherwise `data.cache_dir`.
    pub fn cache_dir(&self) -> Option<PathBuf> {
        std::env::var_os("LIO_CACHE_DIR")
            .map(PathBuf::from)
            .or_else(|| self.data.cache_dir.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::from_toml(&c.to_toml().unwrap()).unwrap(), c);
    }

    #[test]
    fn empty_file_is_all_defaults() {
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
    }

    #[test]
    fn defaults_carry_documented_hyperparameters() {
        let p = RunConfig::default().pipeline;
        assert_eq!((p.weights.alpha, p.weights.lambda), (1.0, 0.1));
        assert_eq!(p.train.batch_size, 20);
        assert_eq!(p.train.schedule.base_lr, 1e-4);
        assert_eq!((p.train.schedule.step_size, p.train.schedule.gamma), (20, 0.5));
        assert_eq!((p.train.adam.beta1, p.train.adam.beta2), (0.9, 0.99));
        assert_eq!(p.train.adam.weight_decay, 1e-5);
        assert_eq!(p.model.imu_window, 15);
        assert_eq!(p.preprocess.voxel.initial_side, 0.3);
        assert_eq!(p.preprocess.voxel.target, 10240);
        assert_eq!(p.preprocess.voxel.tolerance, 100);
        assert_eq!((p.projection.fov_horizontal, p.projection.eta_w), (180.0, 0.5));
        assert_eq!((p.projection.height, p.projection.width), (52, 720));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(RunConfig::from_toml("[pipeline]\nbogus = 1\n"), Err(Error::Config(_))));
        assert!(RunConfig::from_toml("[pipeline.train]\nepochs = 3\nlr = 1\n").is_err());
        let mut c = RunConfig::default();
        assert!(c.set("pipeline.train.nope=3").is_err());
        assert_eq!(c, RunConfig::default());
    }

    #[test]
    fn overrides_reach_nested_keys() {
        let mut c = RunConfig::default();
        c.set("pipeline.train.epochs=7").unwrap();
        c.set("pipeline.weights.lambda = 0.5").unwrap();
        c.set("pipeline.model.imu_mode=feature-concat").unwrap();
        c.set("data.output=runs/a").unwrap();
        assert_eq!(c.pipeline.train.epochs, 7);
        assert_eq!(c.pipeline.weights.lambda, 0.5);
        assert_eq!(c.pipeline.model.imu_mode, ImuMode::FeatureConcat);
        assert_eq!(c.data.output, Some(PathBuf::from("runs/a")));
    }

    #[test]
    fn type_errors_are_config_errors() {
        let mut c = RunConfig::default();
        assert!(matches!(c.set("pipeline.train.epochs=many"), Err(Error::Config(_))));
        assert!(matches!(c.set("pipeline"), Err(Error::Config(_))));
    }

    #[test]
    fn every_preset_applies() {
        for (name, _) in PRESETS {
            let mut c = RunConfig::default();
            c.apply_preset(name).unwrap();
            assert_eq!(RunConfig::from_toml(&c.to_toml().unwrap()).unwrap(), c);
        }
        assert!(RunConfig::default().apply_preset("nonsense").is_err());
    }

    #[test]
    fn presets_compose() {
        let mut c = RunConfig::default();
        for p in ["desk", "imu-none", "fc-activation", "pixel", "point-to-plane"] {
            c.apply_preset(p).unwrap();
        }
        let p = &c.pipeline;
        assert_eq!(p.projection.height, 16);
        assert_eq!(p.model.imu_mode, ImuMode::None);
        assert_eq!(p.model.head_type, HeadType::FcActivation);
        assert_eq!(p.matching, Matching::Pixel);
        assert_eq!(p.weights.lambda, 0.0);
    }

    #[test]
    fn resolved_config_is_written() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = RunConfig::default();
        c.set("pipeline.train.epochs=3").unwrap();
        let path = c.write_resolved(dir.path()).unwrap();
        assert_eq!(RunConfig::load(&path).unwrap(), c);
    }
}
