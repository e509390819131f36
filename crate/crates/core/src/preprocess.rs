//! Loss-side cloud preparation: plane-fit normals over the whole cloud,
//! RANSAC ground removal and voxel-grid downsampling adapted to a target
//! point count. Ground removal and voxel binning are decided on positions
//! once and applied identically to the normal stream, so points and normals
//! stay index-aligned.

use std::collections::BTreeMap;

use nalgebra::SymmetricEigen;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cloud::PointCloud;
use crate::error::{Error, Result};
use crate::geometry::{Mat3, Vec3};
use crate::kdtree::KdIndex;

/// Downsampled points `DP` with index-aligned unit normals `NP`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PreprocessedCloud {
    pub points: Vec<Vec3>,
    pub normals: Vec<Vec3>,
}

impl PreprocessedCloud {
    pub fn new(points: Vec<Vec3>, normals: Vec<Vec3>) -> Self {
        assert_eq!(points.len(), normals.len());
        Self { points, normals }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn transformed(&self, pose: &crate::geometry::Pose) -> PreprocessedCloud {
        let r = pose.rotation_matrix();
        PreprocessedCloud {
            points: self.points.iter().map(|p| r * p + pose.translation).collect(),
            normals: self.normals.iter().map(|n| r * n).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VoxelParams {
    /// Starting voxel side length, meters.
    pub initial_side: f64,
    /// Base side-length adjustment per pass, meters.
    pub step: f64,
    /// Target output count `K`.
    pub target: usize,
    /// Accepted deviation from `K`.
    pub tolerance: usize,
    pub max_iterations: usize,
}

impl Default for VoxelParams {
    fn default() -> Self {
        Self {
            initial_side: 0.3,
            step: 0.01,
            target: 10240,
            tolerance: 100,
            max_iterations: 200,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RansacParams {
    /// Inlier distance to the plane, meters.
    pub threshold: f64,
    pub iterations: usize,
    /// Below this inlier fraction nothing is removed.
    pub min_inlier_fraction: f64,
    pub seed: u64,
}

impl Default for RansacParams {
    fn default() -> Self {
        Self {
            threshold: 0.1,
            iterations: 100,
            min_inlier_fraction: 0.2,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessParams {
    /// Neighborhood size for plane-fit normals.
    pub normal_neighbors: usize,
    /// Set to false to skip ground removal.
    pub remove_ground: bool,
    pub ransac: RansacParams,
    pub voxel: VoxelParams,
}

impl Default for PreprocessParams {
    fn default() -> Self {
        Self {
            normal_neighbors: 10,
            remove_ground: true,
            ransac: RansacParams::default(),
            voxel: VoxelParams::default(),
        }
    }
}

/// Unit normal per point from the covariance of its `k` nearest neighbors
/// (the point itself included), oriented toward the sensor origin. `None`
/// marks a degenerate neighborhood whose covariance has rank below 2.
pub fn estimate_normals_planefit(points: &[Vec3], k: usize) -> Result<Vec<Option<Vec3>>> {
    if k < 3 {
        return Err(Error::InvalidArgument(format!("neighbor count {k} < 3")));
    }
    if points.len() <= k {
        return Err(Error::InvalidArgument(format!(
            "{} points is not more than k = {k}",
            points.len()
        )));
    }
    let index = KdIndex::build(points)?;
    Ok(points
        .iter()
        .map(|p| {
            let nbrs = index.k_nearest(p, k);
            let neighborhood: Vec<Vec3> = nbrs.iter().map(|n| points[n.index]).collect();
            fit_normal(&neighborhood).map(|n| orient_toward_origin(n, p))
        })
        .collect())
}

fn fit_normal(neighborhood: &[Vec3]) -> Option<Vec3> {
    let count = neighborhood.len() as f64;
    let mean = neighborhood.iter().sum::<Vec3>() / count;
    let mut cov = Mat3::zeros();
    for q in neighborhood {
        let d = q - mean;
        cov += d * d.transpose();
    }
    cov /= count;
    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let largest = eig.eigenvalues[order[2]];
    let middle = eig.eigenvalues[order[1]];
    if !(largest > 1e-18) || middle <= 1e-9 * largest {
        return None;
    }
    let n: Vec3 = eig.eigenvectors.column(order[0]).into_owned();
    let norm = n.norm();
    (norm > 0.0).then(|| n / norm)
}

fn orient_toward_origin(n: Vec3, p: &Vec3) -> Vec3 {
    let facing = -n.dot(p);
    if facing > 1e-12 * p.norm() {
        return n;
    }
    if facing < -1e-12 * p.norm() {
        return -n;
    }
    // Viewing ray lies in the plane: fall back to a fixed half-space.
    let key = [n.z, n.y, n.x];
    match key.iter().find(|c| c.abs() > 1e-12) {
        Some(c) if *c < 0.0 => -n,
        _ => n,
    }
}

/// Outcome of [`ransac_ground_removal`].
#[derive(Clone, Debug, PartialEq)]
pub struct RansacReport {
    /// Plane `n·x + d = 0` with the most inliers, if any was found.
    pub plane: Option<(Vec3, f64)>,
    pub inliers: usize,
    pub removed: bool,
}

/// Removes the dominant plane's inliers from `points` and the aligned
/// `normals`. Nothing is removed when the best plane holds less than the
/// configured inlier fraction or the cloud has fewer than 3 points.
pub fn ransac_ground_removal(
    points: &[Vec3],
    normals: &[Vec3],
    params: &RansacParams,
) -> (Vec<Vec3>, Vec<Vec3>, RansacReport) {
    assert_eq!(points.len(), normals.len());
    let unchanged = |plane, inliers| {
        (
            points.to_vec(),
            normals.to_vec(),
            RansacReport {
                plane,
                inliers,
                removed: false,
            },
        )
    };
    let n = points.len();
    if n < 3 {
        return unchanged(None, 0);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut best: Option<(Vec3, f64, usize)> = None;
    for _ in 0..params.iterations {
        let i = rng.random_range(0..n);
        let j = rng.random_range(0..n);
        let k = rng.random_range(0..n);
        if i == j || j == k || i == k {
            continue;
        }
        let normal = (points[j] - points[i]).cross(&(points[k] - points[i]));
        let len = normal.norm();
        if len < 1e-9 {
            continue;
        }
        let normal = normal / len;
        let d = -normal.dot(&points[i]);
        let count = points
            .iter()
            .filter(|p| (normal.dot(p) + d).abs() <= params.threshold)
            .count();
        if best.is_none_or(|b| count > b.2) {
            best = Some((normal, d, count));
        }
    }
    let Some((normal, d, count)) = best else {
        return unchanged(None, 0);
    };
    if (count as f64) < params.min_inlier_fraction * n as f64 {
        return unchanged(Some((normal, d)), count);
    }
    let mut kept_points = Vec::with_capacity(n - count);
    let mut kept_normals = Vec::with_capacity(n - count);
    for (p, nn) in points.iter().zip(normals) {
        if (normal.dot(p) + d).abs() > params.threshold {
            kept_points.push(*p);
            kept_normals.push(*nn);
        }
    }
    (
        kept_points,
        kept_normals,
        RansacReport {
            plane: Some((normal, d)),
            inliers: count,
            removed: true,
        },
    )
}

/// One voxel-grid pass at a fixed side length. Each voxel is represented by
/// the mean of its members; its normal is the renormalized mean of member
/// normals. Output is ordered by voxel key. Voxels whose normals cancel are
/// dropped.
pub fn voxel_downsample(points: &[Vec3], normals: &[Vec3], side: f64) -> PreprocessedCloud {
    assert_eq!(points.len(), normals.len());
    let mut cells: BTreeMap<(i64, i64, i64), (Vec3, Vec3, usize)> = BTreeMap::new();
    for (p, n) in points.iter().zip(normals) {
        let key = voxel_key(p, side);
        let e = cells.entry(key).or_insert((Vec3::zeros(), Vec3::zeros(), 0));
        e.0 += p;
        e.1 += n;
        e.2 += 1;
    }
    let mut out = PreprocessedCloud::default();
    for (sum_p, sum_n, count) in cells.into_values() {
        let norm = sum_n.norm();
        if norm <= 1e-12 {
            continue;
        }
        out.points.push(sum_p / count as f64);
        out.normals.push(sum_n / norm);
    }
    out
}

fn voxel_key(p: &Vec3, side: f64) -> (i64, i64, i64) {
    (
        (p.x / side).floor() as i64,
        (p.y / side).floor() as i64,
        (p.z / side).floor() as i64,
    )
}

fn voxel_count(points: &[Vec3], side: f64) -> usize {
    let mut keys: Vec<(i64, i64, i64)> = points.iter().map(|p| voxel_key(p, side)).collect();
    keys.sort_unstable();
    keys.dedup();
    keys.len()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DownsampleStatus {
    /// Output count lies within `K ± tolerance`.
    Converged,
    /// Budget exhausted; the closest result seen is returned.
    BudgetExhausted,
    /// Input already smaller than `K - tolerance`; all points returned.
    UnderTarget,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DownsampleResult {
    pub cloud: PreprocessedCloud,
    pub side: f64,
    /// Re-binning passes after the initial one.
    pub passes: usize,
    pub status: DownsampleStatus,
}

/// Voxel downsampling whose side length is adjusted until the output count
/// lands in `K ± tolerance`.
///
/// Too many points grows the side, too few shrinks it. Adjustments start at
/// `params.step` and double on every pass until the target has been crossed;
/// after that the side is bisected between the last too-fine and too-coarse
/// sides.
pub fn adaptive_voxel_downsample(
    points: &[Vec3],
    normals: &[Vec3],
    params: &VoxelParams,
) -> Result<DownsampleResult> {
    if points.len() != normals.len() {
        return Err(Error::shape(&[points.len()], &[normals.len()]));
    }
    if !(params.initial_side > 0.0 && params.step > 0.0) {
        return Err(Error::Config("voxel side and step must be positive".into()));
    }
    let lo = params.target.saturating_sub(params.tolerance);
    let hi = params.target + params.tolerance;
    if points.len() < lo {
        log::info!(
            "cloud has {} points, below the downsample target {}",
            points.len(),
            params.target
        );
        let normals = normals
            .iter()
            .map(|n| n.try_normalize(1e-12).unwrap_or_else(Vec3::z))
            .collect();
        return Ok(DownsampleResult {
            cloud: PreprocessedCloud::new(points.to_vec(), normals),
            side: 0.0,
            passes: 0,
            status: DownsampleStatus::UnderTarget,
        });
    }

    let distance = |c: usize| {
        if c < lo {
            lo - c
        } else {
            c.saturating_sub(hi)
        }
    };
    let mut side = params.initial_side;
    let mut count = voxel_count(points, side);
    let mut best = (distance(count), side);
    let mut step = params.step;
    // Latest sides known to give too many and too few points.
    let mut too_fine: Option<f64> = None;
    let mut too_coarse: Option<f64> = None;
    let mut passes = 0;
    while distance(count) > 0 && passes < params.max_iterations {
        if count > hi {
            too_fine = Some(side);
        } else {
            too_coarse = Some(side);
        }
        let mut next = match (too_fine, too_coarse) {
            (Some(a), Some(b)) => 0.5 * (a + b),
            _ => {
                let next = if count > hi { side + step } else { side - step };
                step *= 2.0;
                next
            }
        };
        if next <= 0.0 {
            next = side * 0.5;
        }
        if (next - side).abs() < 1e-12 * side {
            break;
        }
        side = next;
        count = voxel_count(points, side);
        passes += 1;
        if distance(count) < best.0 {
            best = (distance(count), side);
        }
    }
    let status = if distance(count) == 0 {
        DownsampleStatus::Converged
    } else {
        log::warn!(
            "voxel adaptation stopped after {passes} passes at {} points (target {}±{})",
            count,
            params.target,
            params.tolerance
        );
        side = best.1;
        DownsampleStatus::BudgetExhausted
    };
    Ok(DownsampleResult {
        cloud: voxel_downsample(points, normals, side),
        side,
        passes,
        status,
    })
}

/// Full pipeline `DP = ⇓(RANSAC(P))`, `NP = ⇓(RANSAC(Φ(P)))`.
pub fn preprocess_cloud(cloud: &PointCloud, params: &PreprocessParams) -> Result<DownsampleResult> {
    let finite: Vec<Vec3> = cloud
        .points
        .iter()
        .filter(|p| p.iter().all(|c| c.is_finite()))
        .copied()
        .collect();
    let raw_normals = estimate_normals_planefit(&finite, params.normal_neighbors)?;
    let mut points = Vec::with_capacity(finite.len());
    let mut normals = Vec::with_capacity(finite.len());
    for (p, n) in finite.iter().zip(raw_normals) {
        if let Some(n) = n {
            points.push(*p);
            normals.push(n);
        }
    }
    let (points, normals) = if params.remove_ground {
        let (p, n, _) = ransac_ground_removal(&points, &normals, &params.ransac);
        (p, n)
    } else {
        (points, normals)
    };
    adaptive_voxel_downsample(&points, &normals, &params.voxel)
}
