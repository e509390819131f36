use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::path::{Path, PathBuf};

use crate::dataset_io::{
    list_scans, read_oxts, read_poses, read_preprocessed, read_timestamps, read_velodyne_bin, window_imu,
    write_preprocessed, ImuWindow,
};
use crate::error::{Error, Result};
use crate::geometry::Pose;
use crate::preprocess::{preprocess_cloud, PreprocessParams};
use crate::range_image::{compute_normal_map, project};

use super::config::PipelineConfig;
use super::model::ImuMode;
use super::train::PreparedScan;

/// Scan period assumed when a sequence has no `times.txt`.
pub const DEFAULT_SCAN_PERIOD: f64 = 0.1;

/// A sequence directory loaded and prepared for the pipeline.
#[derive(Clone, Debug)]
pub struct SequenceData {
    pub scans: Vec<PreparedScan>,
    pub times: Vec<f64>,
    pub windows: Option<Vec<ImuWindow>>,
    pub ground_truth: Option<Vec<Pose>>,
    pub cache_hits: usize,
}

/// Subdirectory of the cache root specific to these preprocessing parameters.
pub fn cache_key(params: &PreprocessParams) -> String {
    let mut h = DefaultHasher::new();
    serde_json::to_string(params).expect("parameters serialize").hash(&mut h);
    format!("{:016x}", h.finish())
}

fn scan_dir(dir: &Path) -> PathBuf {
    let velo = dir.join("velodyne");
    if velo.is_dir() {
        velo
    } else {
        dir.to_path_buf()
    }
}

/// Reads `velodyne/*.bin`, `times.txt`, `oxts/` and `poses.txt` from `dir`.
/// Loss clouds are read from and written to `cache` when given.
pub fn load_sequence(dir: &Path, cfg: &PipelineConfig, cache: Option<&Path>) -> Result<SequenceData> {
    let files = list_scans(&scan_dir(dir))?;
    if files.len() < 2 {
        return Err(Error::Empty("sequence has fewer than 2 scans"));
    }
    let times_path = dir.join("times.txt");
    let times = if times_path.exists() {
        read_timestamps(&times_path)?
    } else {
        (0..files.len()).map(|k| k as f64 * DEFAULT_SCAN_PERIOD).collect()
    };
    if times.len() != files.len() {
        return Err(Error::format(
            &times_path,
            "end of file",
            format!("{} timestamps for {} scans", times.len(), files.len()),
        ));
    }
    let oxts = dir.join("oxts");
    let windows = if cfg.model.imu_mode == ImuMode::None {
        None
    } else if oxts.exists() {
        Some(window_imu(&read_oxts(&oxts)?, &times, cfg.model.imu_window)?)
    } else {
        return Err(Error::Config(format!(
            "{} has no oxts/ data; use imu_mode = \"none\"",
            dir.display()
        )));
    };
    let gt_path = dir.join("poses.txt");
    let ground_truth = gt_path.exists().then(|| read_poses(&gt_path)).transpose()?;
    let cache_dir = cache.map(|c| c.join(cache_key(&cfg.preprocess)));
    if let Some(c) = &cache_dir {
        std::fs::create_dir_all(c).map_err(|e| Error::io(c, e))?;
    }
    let mut cache_hits = 0;
    let mut scans = Vec::with_capacity(files.len());
    for f in &files {
        let cloud = read_velodyne_bin(f)?.to_cloud();
        let vertex = project(&cloud, &cfg.projection)?;
        let normal = compute_normal_map(&vertex);
        let cached = cache_dir
            .as_ref()
            .map(|c| c.join(f.file_stem().expect("scan file name")).with_extension("dp"));
        let loss_cloud = match &cached {
            Some(p) if p.exists() => {
                cache_hits += 1;
                read_preprocessed(p)?
            }
            _ => {
                let dp = preprocess_cloud(&cloud, &cfg.preprocess)?.cloud;
                if let Some(p) = &cached {
                    write_preprocessed(p, &dp)?;
                }
                dp
            }
        };
        scans.push(PreparedScan::from_parts(vertex, normal, loss_cloud)?);
    }
    Ok(SequenceData {
        scans,
        times,
        windows,
        ground_truth,
        cache_hits,
    })
}
