use std::path::Path;

use nalgebra::Vector6;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cloud::PointCloud;
use crate::correspondence::{
    build_index, loss_breakdown, match_nearest, match_pixel, pair_gradients, CorrespondenceSet, LossBreakdown,
};
use crate::dataset_io::ImuWindow;
use crate::error::{Error, Result};
use crate::geometry::{point_jacobian, rotation_jacobian, Pose, PoseVector};
#[cfg(test)]
use crate::geometry::Vec3;
use crate::kdtree::KdIndex;
use crate::nn::{Adam, Checkpoint, Module, Precision};
use crate::preprocess::{preprocess_cloud, PreprocessedCloud};
use crate::range_image::{compute_normal_map, project, remap_indexed, NormalMap, VertexMap};
use crate::registration::register;

use super::config::{Matching, PipelineConfig};
use super::model::{Estimate, ModelConfig, OdometryModel, PairInput};

/// Everything derived from one scan: maps for the network, the downsampled
/// loss cloud with its index, and per-pixel points for pixel matching.
#[derive(Clone, Debug)]
pub struct PreparedScan {
    pub vertex: VertexMap,
    pub normal: NormalMap,
    pub loss_cloud: PreprocessedCloud,
    /// One entry per pixel, zeros where the maps are invalid.
    pub pixel_cloud: PreprocessedCloud,
    pub index: KdIndex,
}

impl PreparedScan {
    pub fn new(cloud: &PointCloud, cfg: &PipelineConfig) -> Result<Self> {
        let vertex = project(cloud, &cfg.projection)?;
        let normal = compute_normal_map(&vertex);
        let loss_cloud = preprocess_cloud(cloud, &cfg.preprocess)?.cloud;
        Self::from_parts(vertex, normal, loss_cloud)
    }

    pub fn from_parts(vertex: VertexMap, normal: NormalMap, loss_cloud: PreprocessedCloud) -> Result<Self> {
        let index = build_index(&loss_cloud)?;
        let pixel_cloud = PreprocessedCloud::new(vertex.grid.values.clone(), normal.grid.values.clone());
        Ok(Self {
            vertex,
            normal,
            loss_cloud,
            pixel_cloud,
            index,
        })
    }
}

/// Consecutive scans `k` (last) and `k + 1` (current) with the IMU window between.
#[derive(Clone, Copy, Debug)]
pub struct FramePair<'a> {
    pub last: &'a PreparedScan,
    pub current: &'a PreparedScan,
    pub imu: Option<&'a ImuWindow>,
}

impl<'a> FramePair<'a> {
    pub fn input(&self, cfg: &'a PipelineConfig) -> PairInput<'a> {
        PairInput {
            last_vertex: &self.last.vertex,
            last_normal: &self.last.normal,
            current_vertex: &self.current.vertex,
            current_normal: &self.current.normal,
            imu: self.imu,
            projection: &cfg.projection,
        }
    }
}

/// Pairs `(scans[k], scans[k+1])`, attaching `windows[k]` when given.
pub fn frame_pairs<'a>(scans: &'a [PreparedScan], windows: Option<&'a [ImuWindow]>) -> Vec<FramePair<'a>> {
    scans
        .windows(2)
        .enumerate()
        .map(|(k, w)| FramePair {
            last: &w[0],
            current: &w[1],
            imu: windows.and_then(|ws| ws.get(k)),
        })
        .collect()
}

/// Matches the current frame, transformed by `pose`, against the last frame.
/// Source indices of the result refer to the returned cloud.
pub fn match_pair<'a>(
    pair: &FramePair<'a>,
    pose: &Pose,
    cfg: &PipelineConfig,
) -> Result<(CorrespondenceSet, &'a PreprocessedCloud)> {
    match cfg.matching {
        Matching::Nearest => {
            let moved = pair.current.loss_cloud.transformed(pose);
            let c = match_nearest(&moved, &pair.last.index, &pair.last.loss_cloud, cfg.max_dist)?;
            Ok((c, &pair.current.loss_cloud))
        }
        Matching::Pixel => {
            let r = remap_indexed(&pair.current.vertex, &pair.current.normal, pose, &cfg.projection)?;
            let mut c = match_pixel(&pair.last.vertex, &r.vertex, &pair.last.normal, &r.normal)?;
            c.pairs.retain(|p| p.distance <= cfg.max_dist);
            for p in &mut c.pairs {
                p.source_index = r.origin[p.source_index].expect("remapped pixels have an origin");
            }
            if c.is_empty() {
                return Err(Error::NoCorrespondences { max_dist: cfg.max_dist });
            }
            Ok((c, &pair.current.pixel_cloud))
        }
    }
}

/// Per-pair mean loss and its gradients with respect to the residual and
/// initial poses of `pose = residual ∘ initial`.
#[derive(Clone, Debug)]
pub struct PairLoss {
    pub loss: LossBreakdown,
    pub d_residual: Vector6<f64>,
    pub d_initial: Vector6<f64>,
}

/// Loss averaged over matched pairs, with the source re-posed by
/// `residual ∘ initial` and the matches held fixed.
pub fn pair_loss(
    residual: &Pose,
    initial: &Pose,
    source: &PreprocessedCloud,
    c: &CorrespondenceSet,
    cfg: &PipelineConfig,
) -> Result<PairLoss> {
    let c = &c.reposed(source, &residual.compose(initial));
    let sum = loss_breakdown(c, &cfg.weights)?;
    let n = sum.pairs as f64;
    let loss = LossBreakdown {
        point_to_plane: sum.point_to_plane / n,
        plane_to_plane: sum.plane_to_plane / n,
        total: sum.total / n,
        pairs: sum.pairs,
    };
    let pd = PoseVector::from(*residual);
    let pi = PoseVector::from(*initial);
    let rd = residual.rotation_matrix();
    let ri = initial.rotation_matrix();
    let mut d_residual = Vector6::zeros();
    let mut d_initial = Vector6::zeros();
    for (pair, (dp, dn)) in c.pairs.iter().zip(pair_gradients(c, &cfg.weights)) {
        let x = &source.points[pair.source_index];
        let nrm = &source.normals[pair.source_index];
        let y = ri * x + initial.translation;
        let m = ri * nrm;
        d_residual += point_jacobian(&pd, &y).transpose() * dp + rotation_jacobian(&pd, &m).transpose() * dn;
        d_initial += (rd * point_jacobian(&pi, x)).transpose() * dp + (rd * rotation_jacobian(&pi, nrm)).transpose() * dn;
    }
    Ok(PairLoss {
        loss,
        d_residual: d_residual / n,
        d_initial: d_initial / n,
    })
}

/// Forward pass, matching and loss for one pair.
pub fn evaluate_pair(model: &OdometryModel, pair: &FramePair, cfg: &PipelineConfig) -> Result<(Estimate, PairLoss)> {
    let est = model.forward(&pair.input(cfg))?;
    let (c, source) = match_pair(pair, &est.pose, cfg)?;
    let loss = pair_loss(&est.residual, &est.initial, source, &c, cfg)?;
    Ok((est, loss))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    pub mean_loss: f64,
    pub mean_point_to_plane: f64,
    pub mean_plane_to_plane: f64,
    pub pairs: usize,
    /// Pairs dropped for lack of correspondences.
    pub skipped: usize,
}

impl EpochStats {
    pub const CSV_HEADER: &'static str = "epoch,lr,mean_loss,mean_point_to_plane,mean_plane_to_plane,pairs,skipped";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.epoch,
            self.lr,
            self.mean_loss,
            self.mean_point_to_plane,
            self.mean_plane_to_plane,
            self.pairs,
            self.skipped
        )
    }
}

/// Model, optimizer state and configuration for unsupervised training.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: OdometryModel,
    pub config: PipelineConfig,
    pub adam: Adam,
    pub epoch: usize,
}

impl Trainer {
    pub fn new(config: PipelineConfig) -> Self {
        Self {
            model: OdometryModel::new(&config.model),
            adam: Adam::new(config.train.adam.clone()),
            config,
            epoch: 0,
        }
    }

    /// One pass over `pairs` in shuffled mini-batches; an Adam step per batch.
    pub fn train_epoch(&mut self, pairs: &[FramePair]) -> Result<EpochStats> {
        if pairs.is_empty() {
            return Err(Error::Empty("no training pairs"));
        }
        let tc = &self.config.train;
        let lr = tc.schedule.lr_at(self.epoch);
        let batch = tc.batch_size.max(1);
        let momentum = tc.norm_momentum;
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(tc.seed.wrapping_add(self.epoch as u64)));
        let mut stats = EpochStats {
            epoch: self.epoch,
            lr,
            ..EpochStats::default()
        };
        for chunk in order.chunks(batch) {
            self.model.zero_grad();
            let scale = 1.0 / chunk.len() as f64;
            let mut used = 0;
            for &i in chunk {
                let (est, pl) = match evaluate_pair(&self.model, &pairs[i], &self.config) {
                    Ok(v) => v,
                    Err(Error::NoCorrespondences { .. }) => {
                        stats.skipped += 1;
                        continue;
                    }
                    Err(e) => return Err(e),
                };
                if !pl.loss.total.is_finite() {
                    return Err(Error::Numerical(format!("non-finite loss on pair {i}")));
                }
                self.model
                    .backward(&est.cache, &(pl.d_residual * scale), &(pl.d_initial * scale));
                self.model.update_stats(&est.cache, momentum);
                stats.mean_loss += pl.loss.total;
                stats.mean_point_to_plane += pl.loss.point_to_plane;
                stats.mean_plane_to_plane += pl.loss.plane_to_plane;
                used += 1;
            }
            if used > 0 {
                self.adam.step(self.model.params_mut(), lr)?;
            }
            stats.pairs += used;
        }
        if stats.pairs > 0 {
            let n = stats.pairs as f64;
            stats.mean_loss /= n;
            stats.mean_point_to_plane /= n;
            stats.mean_plane_to_plane /= n;
        }
        self.epoch += 1;
        Ok(stats)
    }
}

/// Writes the model weights with its configuration as the architecture record.
pub fn save_model(model: &OdometryModel, path: &Path, precision: Precision) -> Result<()> {
    let arch = serde_json::to_value(&model.config).map_err(|e| Error::Config(e.to_string()))?;
    Checkpoint::from_params(arch, &model.params(), precision).save(path)
}

pub fn load_model(path: &Path) -> Result<OdometryModel> {
    let ckpt = Checkpoint::load(path)?;
    let config: ModelConfig = serde_json::from_value(ckpt.header.architecture.clone())
        .map_err(|e| Error::format(path, "header", format!("architecture: {e}")))?;
    let mut model = OdometryModel::new(&config);
    ckpt.restore(model.params_mut())?;
    Ok(model)
}

/// Translation error in meters plus rotation error in radians of `est`
/// against `gt`.
pub fn pose_error(est: &Pose, gt: &Pose) -> f64 {
    let d = est.inverse().compose(gt);
    d.translation.norm() + d.angle()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InferenceMode {
    Learned,
    Classical,
    /// Registration initialized at the learned estimate.
    Hybrid,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairDiagnostics {
    pub relative: Pose,
    /// Learned residual and initial pose when a model was run.
    pub residual: Option<Pose>,
    pub initial: Option<Pose>,
    pub registration_loss: Option<f64>,
    /// Set when registration failed and identity was substituted.
    pub failure: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SequenceResult {
    /// Absolute poses, the first being identity.
    pub poses: Vec<Pose>,
    pub pairs: Vec<PairDiagnostics>,
}

/// Chains per-pair relative poses over a sequence.
pub fn run_sequence(
    scans: &[PreparedScan],
    windows: Option<&[ImuWindow]>,
    model: Option<&OdometryModel>,
    mode: InferenceMode,
    cfg: &PipelineConfig,
) -> Result<SequenceResult> {
    if scans.len() < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 scans, got {}", scans.len())));
    }
    let model = match (mode, model) {
        (InferenceMode::Classical, _) => None,
        (_, Some(m)) => Some(m),
        (_, None) => return Err(Error::Config("learned and hybrid modes need a model".into())),
    };
    let mut poses = vec![Pose::identity()];
    let mut diags = Vec::with_capacity(scans.len() - 1);
    for pair in frame_pairs(scans, windows) {
        let learned = model.map(|m| m.forward(&pair.input(cfg))).transpose()?;
        let mut d = PairDiagnostics {
            relative: learned.as_ref().map_or(Pose::identity(), |e| e.pose),
            residual: learned.as_ref().map(|e| e.residual),
            initial: learned.as_ref().map(|e| e.initial),
            registration_loss: None,
            failure: None,
        };
        if mode != InferenceMode::Learned {
            match register(&pair.current.loss_cloud, &pair.last.loss_cloud, &d.relative, &cfg.registration) {
                Ok((pose, rd)) => {
                    d.relative = pose;
                    d.registration_loss = Some(rd.final_loss);
                }
                Err(f) => {
                    log::warn!("{f}; substituting identity");
                    d.relative = Pose::identity();
                    d.failure = Some(f.to_string());
                }
            }
        }
        let last = *poses.last().expect("non-empty");
        poses.push(last.compose(&d.relative));
        diags.push(d);
    }
    Ok(SequenceResult { poses, pairs: diags })
}

#[cfg(test)]
mod tests {
    use super::super::fixture::{corridor, tiny_config, Fixture};
    use super::super::model::ImuMode;
    use super::*;
    use crate::correspondence::LossWeights;
    use crate::nn::Param;
    use rand::Rng;

    fn randomize_outputs(model: &mut OdometryModel, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut heads: Vec<&mut Param> = model.out_t.params_mut();
        heads.extend(model.out_q.params_mut());
        if let Some(h) = &mut model.imu_head {
            heads.extend(h.q_out.params_mut());
            heads.extend(h.t_out.params_mut());
        }
        for p in heads {
            for v in p.value.data_mut() {
                *v = rng.random_range(-0.05..0.05);
            }
        }
    }

    fn loss_with_frozen(model: &OdometryModel, f: &Fixture, c: &CorrespondenceSet, source: &PreprocessedCloud) -> f64 {
        let pair = frame_pairs(&f.scans, Some(&f.windows))[0];
        let est = model.forward(&pair.input(&f.config)).unwrap();
        pair_loss(&est.residual, &est.initial, source, c, &f.config).unwrap().loss.total
    }

    #[test]
    fn loss_chain_matches_finite_differences() {
        let f = corridor(2, tiny_config());
        let pair = frame_pairs(&f.scans, None)[0];
        let residual = Pose::new(Vec3::new(0.01, -0.02, 0.03), Vec3::new(0.1, 0.05, -0.02));
        let initial = Pose::new(Vec3::new(-0.01, 0.015, 0.02), Vec3::new(0.5, -0.03, 0.01));
        let (c, source) = match_pair(&pair, &residual.compose(&initial), &f.config).unwrap();
        let pl = pair_loss(&residual, &initial, source, &c, &f.config).unwrap();
        let at = |r: &Pose, i: &Pose| pair_loss(r, i, source, &c, &f.config).unwrap().loss.total;
        let h = 1e-6;
        for k in 0..6 {
            let mut num = [0.0; 2];
            for (slot, which) in num.iter_mut().zip([true, false]) {
                let shift = |s: f64| {
                    let mut v = PoseVector::from(if which { residual } else { initial });
                    v.0[k] += s;
                    v.to_pose()
                };
                let (p, m) = if which {
                    (at(&shift(h), &initial), at(&shift(-h), &initial))
                } else {
                    (at(&residual, &shift(h)), at(&residual, &shift(-h)))
                };
                *slot = (p - m) / (2.0 * h);
            }
            assert!((num[0] - pl.d_residual[k]).abs() < 1e-6 * (1.0 + num[0].abs()), "dδ[{k}]");
            assert!((num[1] - pl.d_initial[k]).abs() < 1e-6 * (1.0 + num[1].abs()), "dT̂[{k}]");
        }
    }

    fn check_model_gradients(mode: ImuMode) {
        let mut cfg = tiny_config();
        cfg.model.imu_mode = mode;
        let f = corridor(2, cfg);
        let mut model = OdometryModel::new(&f.config.model);
        randomize_outputs(&mut model, 3);
        let pair = frame_pairs(&f.scans, Some(&f.windows))[0];
        let est = model.forward(&pair.input(&f.config)).unwrap();
        let (c, source) = match_pair(&pair, &est.pose, &f.config).unwrap();
        let pl = pair_loss(&est.residual, &est.initial, source, &c, &f.config).unwrap();
        model.zero_grad();
        model.backward(&est.cache, &pl.d_residual, &pl.d_initial);
        let analytic: Vec<Vec<f64>> = model.params().iter().map(|p| p.grad.data().to_vec()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h = 1e-6;
        let count = model.params().len();
        for t in 0..count {
            if !model.params()[t].trainable {
                continue;
            }
            let len = model.params()[t].value.len();
            for _ in 0..3 {
                let j = rng.random_range(0..len);
                let orig = model.params()[t].value.data()[j];
                model.params_mut()[t].value.data_mut()[j] = orig + h;
                let lp = loss_with_frozen(&model, &f, &c, source);
                model.params_mut()[t].value.data_mut()[j] = orig - h;
                let lm = loss_with_frozen(&model, &f, &c, source);
                model.params_mut()[t].value.data_mut()[j] = orig;
                let num = (lp - lm) / (2.0 * h);
                let a = analytic[t][j];
                assert!(
                    (num - a).abs() <= 1e-5 * num.abs().max(a.abs()) + 1e-9,
                    "{}[{j}]: analytic {a} numeric {num}",
                    model.params()[t].name
                );
            }
        }
    }

    #[test]
    fn model_gradients_without_imu() {
        check_model_gradients(ImuMode::None);
    }

    #[test]
    fn model_gradients_with_concatenated_imu() {
        check_model_gradients(ImuMode::FeatureConcat);
    }

    #[test]
    fn zero_weights_give_zero_gradients() {
        let mut cfg = tiny_config();
        cfg.weights = LossWeights {
            alpha: 0.0,
            lambda: 0.0,
        };
        let f = corridor(2, cfg);
        let mut model = OdometryModel::new(&f.config.model);
        randomize_outputs(&mut model, 1);
        let pair = frame_pairs(&f.scans, Some(&f.windows))[0];
        let (est, pl) = evaluate_pair(&model, &pair, &f.config).unwrap();
        assert_eq!(pl.loss.total, 0.0);
        model.zero_grad();
        model.backward(&est.cache, &pl.d_residual, &pl.d_initial);
        assert!(model.params().iter().all(|p| p.grad.data().iter().all(|g| *g == 0.0)));
    }

    #[test]
    fn overfits_a_single_pair() {
        let mut cfg = PipelineConfig::desk();
        cfg.model.imu_mode = ImuMode::None;
        cfg.train.batch_size = 1;
        cfg.train.schedule.base_lr = 1e-3;
        cfg.train.schedule.step_size = 1000;
        let f = corridor(2, cfg.clone());
        let pairs = frame_pairs(&f.scans, None);
        let mut trainer = Trainer::new(cfg);
        let first = trainer.train_epoch(&pairs).unwrap().mean_loss;
        let mut last = first;
        for _ in 1..200 {
            last = trainer.train_epoch(&pairs).unwrap().mean_loss;
            assert!(last.is_finite());
        }
        assert!(last < 0.5 * first, "{first} -> {last}");
    }

    #[test]
    fn training_is_reproducible() {
        let mut cfg = tiny_config();
        cfg.train.batch_size = 2;
        let f = corridor(4, cfg.clone());
        let pairs = frame_pairs(&f.scans, Some(&f.windows));
        let run = || {
            let mut t = Trainer::new(cfg.clone());
            (0..3).map(|_| t.train_epoch(&pairs).unwrap()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut model = OdometryModel::new(&tiny_config().model);
        randomize_outputs(&mut model, 9);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_model(&model, &path, Precision::F64).unwrap();
        assert_eq!(load_model(&path).unwrap(), model);
    }

    #[test]
    fn classical_run_on_identical_scans_stays_put() {
        let f = corridor(2, tiny_config());
        let scans = vec![f.scans[0].clone(), f.scans[0].clone()];
        let r = run_sequence(&scans, None, None, InferenceMode::Classical, &f.config).unwrap();
        assert_eq!(r.poses[0], Pose::identity());
        assert!(r.pairs[0].failure.is_none());
        assert!(pose_error(&r.poses[1], &Pose::identity()) < 1e-6);
    }

    #[test]
    fn learned_mode_requires_model() {
        let f = corridor(2, tiny_config());
        assert!(matches!(
            run_sequence(&f.scans, None, None, InferenceMode::Learned, &f.config),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn hybrid_warm_start_does_not_hurt() {
        let mut config = tiny_config();
        config.preprocess.voxel.target = 100_000;
        let f = corridor(4, config);
        let classical = run_sequence(&f.scans, None, None, InferenceMode::Classical, &f.config).unwrap();
        let mut model = OdometryModel::new(&f.config.model);
        // Constant initial pose at the mean true motion.
        let head = model.imu_head.as_mut().unwrap();
        let n = f.truth.len() as f64;
        let mean_t: Vec3 = f.truth.iter().map(|p| p.translation).sum::<Vec3>() / n;
        let mean_q: Vec3 = f.truth.iter().map(|p| p.rotation).sum::<Vec3>() / n;
        let s = f.config.model.rotation_scale;
        head.t_out.bias.value.data_mut().copy_from_slice(mean_t.as_slice());
        head.q_out.bias.value.data_mut().copy_from_slice((mean_q / s).as_slice());
        let hybrid = run_sequence(&f.scans, Some(&f.windows), Some(&model), InferenceMode::Hybrid, &f.config).unwrap();
        for ((c, h), gt) in classical.pairs.iter().zip(&hybrid.pairs).zip(&f.truth) {
            assert!(h.failure.is_none());
            assert!(pose_error(&h.relative, gt) <= pose_error(&c.relative, gt) + 1e-3);
        }
    }

    #[test]
    fn pose_error_is_zero_on_match() {
        let p = Pose::new(Vec3::new(0.1, 0.2, 0.3), Vec3::new(1.0, 2.0, 3.0));
        assert_eq!(pose_error(&p, &p), 0.0);
        assert!((pose_error(&Pose::identity(), &Pose::from_translation(Vec3::x())) - 1.0).abs() < 1e-15);
    }
}
