//! Synthetic scenes, scans, trajectories and inertial streams with known
//! ground truth.

use std::f64::consts::PI;
use std::path::Path;

use nalgebra::{Rotation3, UnitQuaternion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::cloud::PointCloud;
use crate::dataset_io::{self, ImuRecord, ImuWindow, ScanRecord};
use crate::error::{Error, Result};
use crate::geometry::{Pose, Vec3};
use crate::range_image::ProjectionConfig;

pub const GRAVITY: f64 = 9.81;

/// Parallelogram `origin + a·u + b·v`, `a, b ∈ [0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchSpec {
    pub origin: Vec3,
    pub u: Vec3,
    pub v: Vec3,
}

impl PatchSpec {
    pub fn new(origin: Vec3, u: Vec3, v: Vec3) -> Self {
        Self { origin, u, v }
    }

    pub fn area(&self) -> f64 {
        self.u.cross(&self.v).norm()
    }

    pub fn normal(&self) -> Vec3 {
        self.u.cross(&self.v).normalize()
    }
}

/// Box resting on its bottom face, rotated by `yaw` about its vertical axis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxSpec {
    pub center: Vec3,
    pub half_extents: Vec3,
    pub yaw: f64,
}

impl BoxSpec {
    /// The six faces with outward normals.
    pub fn faces(&self) -> Vec<PatchSpec> {
        let r = Rotation3::from_axis_angle(&Vec3::z_axis(), self.yaw);
        let h = self.half_extents;
        let (ex, ey, ez) = (r * Vec3::x() * h.x, r * Vec3::y() * h.y, r * Vec3::z() * h.z);
        let c = self.center;
        vec![
            PatchSpec::new(c + ex - ey - ez, 2.0 * ey, 2.0 * ez),
            PatchSpec::new(c - ex - ey - ez, 2.0 * ez, 2.0 * ey),
            PatchSpec::new(c - ex + ey - ez, 2.0 * ez, 2.0 * ex),
            PatchSpec::new(c - ex - ey - ez, 2.0 * ex, 2.0 * ez),
            PatchSpec::new(c - ex - ey + ez, 2.0 * ex, 2.0 * ey),
            PatchSpec::new(c - ex - ey - ez, 2.0 * ey, 2.0 * ex),
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub patches: Vec<PatchSpec>,
    pub boxes: Vec<BoxSpec>,
    /// Points per square meter.
    pub density: f64,
    /// Isotropic Gaussian noise, meters.
    pub noise_sigma: f64,
    pub seed: u64,
}

/// Sampled scene with the generating surface of every point.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledCloud {
    pub cloud: PointCloud,
    pub labels: Vec<usize>,
    pub surfaces: Vec<PatchSpec>,
}

impl SceneSpec {
    pub fn surfaces(&self) -> Vec<PatchSpec> {
        let mut s = self.patches.clone();
        for b in &self.boxes {
            s.extend(b.faces());
        }
        s
    }

    /// Disjoint planar patches around the origin: a floor, four walls with
    /// random offsets and tilts, and two boxes.
    pub fn random_room(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let floor_z = -1.7;
        let mut patches = vec![PatchSpec::new(
            Vec3::new(-3.5, -3.5, floor_z),
            Vec3::x() * 7.0,
            Vec3::y() * 7.0,
        )];
        for k in 0..4 {
            let dist = rng.random_range(4.5..7.0);
            let width = rng.random_range(5.0..8.0);
            let height = rng.random_range(2.5..3.5);
            let tilt = rng.random_range(-0.15..0.15);
            let heading = k as f64 * PI / 2.0 + rng.random_range(-0.2..0.2);
            let out = Vec3::new(heading.cos(), heading.sin(), 0.0);
            let along = Vec3::new(-heading.sin(), heading.cos(), 0.0);
            let up = (Vec3::z() + out * tilt).normalize();
            let shift = rng.random_range(-1.0..1.0);
            let origin = out * dist + along * (shift - width / 2.0) + Vec3::z() * (floor_z + 0.2);
            patches.push(PatchSpec::new(origin, along * width, up * height));
        }
        let boxes = (0..2)
            .map(|k| {
                let angle = k as f64 * PI + rng.random_range(0.3..1.2);
                let r = rng.random_range(2.0..3.0);
                let h = Vec3::new(rng.random_range(0.3..0.6), rng.random_range(0.3..0.6), rng.random_range(0.4..0.9));
                BoxSpec {
                    center: Vec3::new(r * angle.cos(), r * angle.sin(), floor_z + 0.2 + h.z),
                    half_extents: h,
                    yaw: rng.random_range(0.0..PI),
                }
            })
            .collect();
        Self {
            patches,
            boxes,
            density: 60.0,
            noise_sigma: 0.0,
            seed,
        }
    }

    /// Segmented walls, floor tiles and pillars following a planar path.
    pub fn corridor(path: &[Pose], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let floor_z = -1.7;
        let mut patches = Vec::new();
        let mut boxes = Vec::new();
        let segment = 4.0;
        let half_width = 4.0;
        let margin = 15.0;
        let Some(first) = path.first() else {
            return Self {
                patches,
                boxes,
                density: 30.0,
                noise_sigma: 0.0,
                seed,
            };
        };
        // Extend the path straight back and ahead so scans at the ends see walls.
        let heading = |p: &Pose| p.rotation.z;
        let dir = |h: f64| Vec3::new(h.cos(), h.sin(), 0.0);
        let last = path.last().unwrap();
        let mut stations = Vec::new();
        let mut s = -margin;
        while s < 0.0 {
            stations.push((first.translation + dir(heading(first)) * s, heading(first)));
            s += segment;
        }
        let mut travelled = 0.0;
        let mut next = 0.0;
        for (i, p) in path.iter().enumerate() {
            if i > 0 {
                travelled += (p.translation - path[i - 1].translation).norm();
            }
            if travelled >= next {
                stations.push((p.translation, heading(p)));
                next += segment;
            }
        }
        let mut s = segment;
        while s <= margin {
            stations.push((last.translation + dir(heading(last)) * s, heading(last)));
            s += segment;
        }
        for (k, (c, h)) in stations.iter().enumerate() {
            let fwd = dir(*h);
            let left = Vec3::new(-h.sin(), h.cos(), 0.0);
            let base = Vec3::new(c.x, c.y, floor_z);
            let len = segment - 0.5;
            for side in [-1.0, 1.0] {
                let offset = half_width + rng.random_range(-0.3..0.3);
                let origin = base + left * side * offset - fwd * (len / 2.0) + Vec3::z() * 0.2;
                let lean = left * side * rng.random_range(0.0..0.1);
                patches.push(PatchSpec::new(origin, fwd * len, (Vec3::z() + lean).normalize() * 3.0));
            }
            patches.push(PatchSpec::new(
                base - fwd * (len / 2.0) - left * (half_width - 0.5),
                fwd * len,
                left * (2.0 * half_width - 1.0),
            ));
            if k % 2 == 0 {
                let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                let h = Vec3::new(rng.random_range(0.2..0.5), rng.random_range(0.2..0.5), rng.random_range(0.5..1.2));
                boxes.push(BoxSpec {
                    center: base + left * side * rng.random_range(2.0..3.0) + fwd * rng.random_range(-1.5..1.5) + Vec3::z() * (0.2 + h.z),
                    half_extents: h,
                    yaw: rng.random_range(0.0..PI),
                });
            }
        }
        Self {
            patches,
            boxes,
            density: 30.0,
            noise_sigma: 0.0,
            seed,
        }
    }
}

pub fn add_noise<R: Rng + ?Sized>(cloud: &mut PointCloud, sigma: f64, rng: &mut R) {
    if sigma <= 0.0 {
        return;
    }
    let normal = Normal::new(0.0, sigma).expect("finite sigma");
    for p in &mut cloud.points {
        *p += Vec3::new(normal.sample(rng), normal.sample(rng), normal.sample(rng));
    }
}

/// Uniform surface samples, `⌈area · density⌉` per surface, with normals
/// and labels.
pub fn sample_scene(spec: &SceneSpec) -> Result<LabeledCloud> {
    let surfaces = spec.surfaces();
    if surfaces.is_empty() {
        return Err(Error::Empty("scene has no surfaces"));
    }
    if !(spec.density > 0.0) || !(spec.noise_sigma >= 0.0) {
        return Err(Error::InvalidArgument("density must be positive and noise non-negative".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut points = Vec::new();
    let mut normals = Vec::new();
    let mut labels = Vec::new();
    for (k, s) in surfaces.iter().enumerate() {
        let n = (s.area() * spec.density).ceil() as usize;
        let normal = s.normal();
        for _ in 0..n {
            let (a, b): (f64, f64) = (rng.random(), rng.random());
            points.push(s.origin + s.u * a + s.v * b);
            normals.push(normal);
            labels.push(k);
        }
    }
    let mut cloud = PointCloud::with_normals(points, normals);
    add_noise(&mut cloud, spec.noise_sigma, &mut rng);
    Ok(LabeledCloud {
        cloud,
        labels,
        surfaces,
    })
}

/// Scan-time cropping.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CropSpec {
    pub projection: Option<ProjectionConfig>,
    pub max_range: Option<f64>,
}

/// Scene points in the frame of a sensor at `pose`, i.e. transformed by
/// `pose⁻¹`, keeping only points inside the crop.
pub fn scan_from_pose(scene: &PointCloud, pose: &Pose, crop: &CropSpec) -> PointCloud {
    let local = scene.transformed(&pose.inverse());
    let keep: Vec<bool> = local
        .points
        .iter()
        .map(|p| {
            crop.max_range.is_none_or(|r| p.norm() <= r)
                && crop.projection.as_ref().is_none_or(|c| c.pixel_of(p).is_some())
        })
        .collect();
    let points = local.points.iter().zip(&keep).filter(|(_, k)| **k).map(|(p, _)| *p).collect();
    let normals = local
        .normals
        .map(|ns| ns.into_iter().zip(&keep).filter(|(_, k)| **k).map(|(n, _)| n).collect());
    PointCloud { points, normals }
}

/// Densely sampled planar trajectory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrajectorySpec {
    /// Number of scans.
    pub frames: usize,
    /// Seconds between scans.
    pub scan_period: f64,
    /// Dense samples per scan period; also the IMU rate divided by the scan rate.
    pub samples_per_scan: usize,
    /// Mean forward speed, m/s.
    pub speed: f64,
    /// Relative amplitude of speed variation.
    pub speed_variation: f64,
    /// Peak yaw rate, rad/s.
    pub yaw_rate: f64,
    pub seed: u64,
}

impl Default for TrajectorySpec {
    fn default() -> Self {
        Self {
            frames: 51,
            scan_period: 0.1,
            samples_per_scan: 10,
            speed: 5.0,
            speed_variation: 0.4,
            yaw_rate: 0.3,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub poses: Vec<Pose>,
}

impl Trajectory {
    /// Every `step`-th sample starting at the first.
    pub fn decimated(&self, step: usize) -> Trajectory {
        Trajectory {
            times: self.times.iter().step_by(step).copied().collect(),
            poses: self.poses.iter().step_by(step).copied().collect(),
        }
    }
}

/// Forward motion along the heading with sinusoidally varying speed and
/// yaw rate, random phases.
pub fn generate_trajectory(spec: &TrajectorySpec) -> Result<Trajectory> {
    if spec.frames == 0 || spec.samples_per_scan == 0 || !(spec.scan_period > 0.0) {
        return Err(Error::InvalidArgument("trajectory needs frames, samples and a positive period".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (ph_v, ph_w): (f64, f64) = (rng.random_range(0.0..2.0 * PI), rng.random_range(0.0..2.0 * PI));
    let (per_v, per_w): (f64, f64) = (rng.random_range(2.0..4.0), rng.random_range(1.5..3.0));
    let dt = spec.scan_period / spec.samples_per_scan as f64;
    let n = (spec.frames - 1) * spec.samples_per_scan + 1;
    let speed = |t: f64| spec.speed * (1.0 + spec.speed_variation * (2.0 * PI * t / per_v + ph_v).sin());
    let yaw_rate = |t: f64| spec.yaw_rate * (2.0 * PI * t / per_w + ph_w).sin();
    let substeps = 20;
    let h = dt / substeps as f64;
    let (mut x, mut y, mut yaw) = (0.0, 0.0, 0.0);
    let mut times = Vec::with_capacity(n);
    let mut poses = Vec::with_capacity(n);
    for i in 0..n {
        let t = i as f64 * dt;
        times.push(t);
        poses.push(Pose::new(Vec3::new(0.0, 0.0, yaw), Vec3::new(x, y, 0.0)));
        for k in 0..substeps {
            let tm = t + (k as f64 + 0.5) * h;
            let ym = yaw + 0.5 * h * yaw_rate(tm - 0.5 * h);
            x += h * speed(tm) * ym.cos();
            y += h * speed(tm) * ym.sin();
            yaw += h * yaw_rate(tm);
        }
    }
    Ok(Trajectory { times, poses })
}

/// Inertial samples from a dense trajectory. Angular velocity is the body
/// rate `log(R_iᵀ R_{i+1}) / Δt` (backward at the last sample); acceleration
/// is the second difference of position plus `(0, 0, g)`, rotated into the
/// body frame.
pub fn synthesize_imu_records(traj: &Trajectory) -> Result<Vec<ImuRecord>> {
    let n = traj.poses.len();
    if n < 3 || traj.times.len() != n {
        return Err(Error::InvalidArgument("need at least 3 timed poses".into()));
    }
    if traj.times.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::InvalidArgument("timestamps must increase strictly".into()));
    }
    let rot: Vec<UnitQuaternion<f64>> = traj
        .poses
        .iter()
        .map(|p| UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(p.rotation_matrix())))
        .collect();
    let pos: Vec<Vec3> = traj.poses.iter().map(|p| p.translation).collect();
    let t = &traj.times;
    Ok((0..n)
        .map(|i| {
            let (a, b) = if i + 1 < n { (i, i + 1) } else { (i - 1, i) };
            let gyro = (rot[a].inverse() * rot[b]).scaled_axis() / (t[b] - t[a]);
            let c = i.clamp(1, n - 2);
            let (d0, d1) = (t[c] - t[c - 1], t[c + 1] - t[c]);
            let acc_world =
                2.0 * ((pos[c + 1] - pos[c]) / d1 - (pos[c] - pos[c - 1]) / d0) / (d0 + d1);
            let accel = rot[i].inverse() * (acc_world + Vec3::new(0.0, 0.0, GRAVITY));
            ImuRecord {
                timestamp: t[i],
                accel,
                gyro,
            }
        })
        .collect())
}

/// IMU windows of `s` rows between consecutive scan times.
pub fn synthesize_imu(traj: &Trajectory, scan_times: &[f64], s: usize) -> Result<Vec<ImuWindow>> {
    dataset_io::window_imu(&synthesize_imu_records(traj)?, scan_times, s)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SequenceSpec {
    pub trajectory: TrajectorySpec,
    pub density: f64,
    /// Per-scan sensor noise, meters.
    pub noise_sigma: f64,
    pub crop: CropSpec,
    pub imu_window: usize,
    pub seed: u64,
}

impl Default for SequenceSpec {
    fn default() -> Self {
        Self {
            trajectory: TrajectorySpec::default(),
            density: 30.0,
            noise_sigma: 0.0,
            crop: CropSpec {
                projection: None,
                max_range: Some(20.0),
            },
            imu_window: 15,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSequence {
    pub scene: LabeledCloud,
    /// Scan timestamps and absolute sensor poses.
    pub times: Vec<f64>,
    pub poses: Vec<Pose>,
    pub scans: Vec<PointCloud>,
    pub imu: Vec<ImuRecord>,
    pub windows: Vec<ImuWindow>,
}

impl SyntheticSequence {
    /// Ground-truth motion taking scan `k + 1` into the frame of scan `k`.
    pub fn relative_pose(&self, k: usize) -> Pose {
        self.poses[k].inverse().compose(&self.poses[k + 1])
    }
}

pub fn generate_sequence(spec: &SequenceSpec) -> Result<SyntheticSequence> {
    let dense = generate_trajectory(&TrajectorySpec {
        seed: spec.seed ^ spec.trajectory.seed,
        ..spec.trajectory.clone()
    })?;
    let scan_traj = dense.decimated(spec.trajectory.samples_per_scan);
    let mut scene_spec = SceneSpec::corridor(&dense.poses, spec.seed);
    scene_spec.density = spec.density;
    let scene = sample_scene(&scene_spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(1));
    let scans = scan_traj
        .poses
        .iter()
        .map(|p| {
            let mut s = scan_from_pose(&scene.cloud, p, &spec.crop);
            s.normals = None;
            add_noise(&mut s, spec.noise_sigma, &mut rng);
            s
        })
        .collect();
    let imu = synthesize_imu_records(&dense)?;
    let windows = dataset_io::window_imu(&imu, &scan_traj.times, spec.imu_window)?;
    Ok(SyntheticSequence {
        scene,
        times: scan_traj.times,
        poses: scan_traj.poses,
        scans,
        imu,
        windows,
    })
}

/// Writes `velodyne/NNNNNN.bin`, `times.txt`, `poses.txt`, `calib.txt`
/// (identity `Tr`) and an `oxts/` directory.
pub fn write_sequence(dir: &Path, seq: &SyntheticSequence) -> Result<()> {
    let velo = dir.join("velodyne");
    std::fs::create_dir_all(&velo).map_err(|e| Error::io(&velo, e))?;
    for (i, s) in seq.scans.iter().enumerate() {
        dataset_io::write_velodyne_bin(&velo.join(format!("{i:06}.bin")), &ScanRecord::from_cloud(s))?;
    }
    let times: String = seq.times.iter().map(|t| format!("{t}\n")).collect();
    std::fs::write(dir.join("times.txt"), times).map_err(|e| Error::io(dir.join("times.txt"), e))?;
    dataset_io::write_poses(&dir.join("poses.txt"), &seq.poses)?;
    std::fs::write(dir.join("calib.txt"), "Tr: 1 0 0 0 0 1 0 0 0 0 1 0\n").map_err(|e| Error::io(dir.join("calib.txt"), e))?;
    dataset_io::write_oxts_dir(&dir.join("oxts"), &seq.imu)
}
