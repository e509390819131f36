//! Frame-to-frame matching and the unsupervised registration losses.
//!
//! * point-to-plane: `Σ |n_k · (p̄_{k+1} − p_k)|`
//! * plane-to-plane: `Σ |n̄_{k+1} − n_k|²`
//! * total: `α · point_to_plane + λ · plane_to_plane`
//!
//! Gradients treat the matches as fixed: the nearest-neighbor selection is
//! not differentiated.

use nalgebra::Vector6;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{point_jacobian, rotation_jacobian, Pose, PoseVector, Vec3};
use crate::kdtree::KdIndex;
use crate::preprocess::PreprocessedCloud;
use crate::range_image::{NormalMap, VertexMap};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// Point-to-plane weight `α`.
    pub alpha: f64,
    /// Plane-to-plane weight `λ`.
    pub lambda: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            lambda: 0.1,
        }
    }
}

/// One matched pair. `source_*` live in the last frame's coordinates (already
/// transformed by the pose under evaluation).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Correspondence {
    pub source_index: usize,
    pub target_index: usize,
    pub source_point: Vec3,
    pub source_normal: Vec3,
    pub target_point: Vec3,
    pub target_normal: Vec3,
    pub distance: f64,
}

impl Correspondence {
    pub fn new(
        source_index: usize,
        target_index: usize,
        source_point: Vec3,
        source_normal: Vec3,
        target_point: Vec3,
        target_normal: Vec3,
    ) -> Self {
        Self {
            source_index,
            target_index,
            source_point,
            source_normal,
            target_point,
            target_normal,
            distance: (source_point - target_point).norm(),
        }
    }

    /// Scalar point-to-plane residual `n_k · (p̄ − p_k)`.
    #[inline]
    pub fn plane_residual(&self) -> f64 {
        self.target_normal
            .dot(&(self.source_point - self.target_point))
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CorrespondenceSet {
    pub pairs: Vec<Correspondence>,
}

impl CorrespondenceSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Re-evaluates the frozen pairs with the source re-transformed by `pose`.
    pub fn reposed(&self, source: &PreprocessedCloud, pose: &Pose) -> CorrespondenceSet {
        let r = pose.rotation_matrix();
        CorrespondenceSet {
            pairs: self
                .pairs
                .iter()
                .map(|c| {
                    Correspondence::new(
                        c.source_index,
                        c.target_index,
                        r * source.points[c.source_index] + pose.translation,
                        r * source.normals[c.source_index],
                        c.target_point,
                        c.target_normal,
                    )
                })
                .collect(),
        }
    }
}

/// Exact nearest-neighbor index over a preprocessed target cloud.
pub fn build_index(target: &PreprocessedCloud) -> Result<KdIndex> {
    KdIndex::build(&target.points)
}

/// Pairs every transformed source point with its nearest target point,
/// dropping pairs farther apart than `max_dist`.
pub fn match_nearest(
    source: &PreprocessedCloud,
    index: &KdIndex,
    target: &PreprocessedCloud,
    max_dist: f64,
) -> Result<CorrespondenceSet> {
    let max_sq = max_dist * max_dist;
    let pairs: Vec<Correspondence> = source
        .points
        .iter()
        .zip(&source.normals)
        .enumerate()
        .filter_map(|(i, (p, n))| {
            let nb = index.nearest(p);
            (nb.dist_sq <= max_sq).then(|| {
                Correspondence::new(
                    i,
                    nb.index,
                    *p,
                    *n,
                    target.points[nb.index],
                    target.normals[nb.index],
                )
            })
        })
        .collect();
    if pairs.is_empty() {
        return Err(Error::NoCorrespondences { max_dist });
    }
    Ok(CorrespondenceSet { pairs })
}

/// Pixel-to-pixel matching: every pixel valid in both vertex maps and both
/// normal maps becomes a pair. Indices are pixel indices.
pub fn match_pixel(
    last: &VertexMap,
    current_remapped: &VertexMap,
    last_normals: &NormalMap,
    current_normals: &NormalMap,
) -> Result<CorrespondenceSet> {
    let shapes = [
        &last.grid,
        &current_remapped.grid,
        &last_normals.grid,
        &current_normals.grid,
    ];
    if shapes.iter().any(|g| !g.same_shape(&last.grid)) {
        return Err(Error::shape(
            &[last.grid.height, last.grid.width],
            &[current_remapped.grid.height, current_remapped.grid.width],
        ));
    }
    let pairs = (0..last.grid.values.len())
        .filter(|&i| shapes.iter().all(|g| g.valid[i]))
        .map(|i| {
            Correspondence::new(
                i,
                i,
                current_remapped.grid.values[i],
                current_normals.grid.values[i],
                last.grid.values[i],
                last_normals.grid.values[i],
            )
        })
        .collect();
    Ok(CorrespondenceSet { pairs })
}

fn require_pairs(c: &CorrespondenceSet) -> Result<()> {
    if c.is_empty() {
        Err(Error::Empty("loss over an empty correspondence set"))
    } else {
        Ok(())
    }
}

pub fn point_to_plane_loss(c: &CorrespondenceSet) -> Result<f64> {
    require_pairs(c)?;
    Ok(c.pairs.iter().map(|p| p.plane_residual().abs()).sum())
}

pub fn plane_to_plane_loss(c: &CorrespondenceSet) -> Result<f64> {
    require_pairs(c)?;
    Ok(c.pairs
        .iter()
        .map(|p| (p.source_normal - p.target_normal).norm_squared())
        .sum())
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub point_to_plane: f64,
    pub plane_to_plane: f64,
    pub total: f64,
    pub pairs: usize,
}

pub fn total_loss(c: &CorrespondenceSet, w: &LossWeights) -> Result<f64> {
    Ok(loss_breakdown(c, w)?.total)
}

pub fn loss_breakdown(c: &CorrespondenceSet, w: &LossWeights) -> Result<LossBreakdown> {
    let po2pl = point_to_plane_loss(c)?;
    let pl2pl = plane_to_plane_loss(c)?;
    Ok(LossBreakdown {
        point_to_plane: po2pl,
        plane_to_plane: pl2pl,
        total: w.alpha * po2pl + w.lambda * pl2pl,
        pairs: c.len(),
    })
}

/// Per-pair gradients of the total loss with respect to the transformed
/// source point and transformed source normal.
pub fn pair_gradients(c: &CorrespondenceSet, w: &LossWeights) -> Vec<(Vec3, Vec3)> {
    c.pairs
        .iter()
        .map(|p| {
            let r = p.plane_residual();
            // Subgradient 0 at an exactly-zero residual.
            let sign = if r > 0.0 {
                1.0
            } else if r < 0.0 {
                -1.0
            } else {
                0.0
            };
            let d_point = w.alpha * sign * p.target_normal;
            let d_normal = w.lambda * 2.0 * (p.source_normal - p.target_normal);
            (d_point, d_normal)
        })
        .collect()
}

/// Gradient of the total loss with respect to the pose vector `p`, with the
/// matches in `c` held fixed. `c` must have been formed from `source`
/// transformed by `p`.
pub fn loss_gradient(
    p: &PoseVector,
    source: &PreprocessedCloud,
    c: &CorrespondenceSet,
    w: &LossWeights,
) -> Vector6<f64> {
    let mut g = Vector6::zeros();
    for (pair, (d_point, d_normal)) in c.pairs.iter().zip(pair_gradients(c, w)) {
        let x = &source.points[pair.source_index];
        let n = &source.normals[pair.source_index];
        g += point_jacobian(p, x).transpose() * d_point;
        g += rotation_jacobian(p, n).transpose() * d_normal;
    }
    g
}

/// Total loss of the frozen pairs in `c` with the source re-posed by `p`.
pub fn loss_at(
    p: &PoseVector,
    source: &PreprocessedCloud,
    c: &CorrespondenceSet,
    w: &LossWeights,
) -> Result<f64> {
    total_loss(&c.reposed(source, &p.to_pose()), w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn single(source: Vec3, sn: Vec3, target: Vec3, tn: Vec3) -> CorrespondenceSet {
        CorrespondenceSet {
            pairs: vec![Correspondence::new(0, 0, source, sn, target, tn)],
        }
    }

    #[test]
    fn point_to_plane_by_hand() {
        let c = single(Vec3::new(0.3, 0.4, 0.5), Vec3::z(), Vec3::zeros(), Vec3::z());
        assert_eq!(point_to_plane_loss(&c).unwrap(), 0.5);
    }

    #[test]
    fn in_plane_slide_is_free() {
        let c = single(Vec3::new(0.3, 0.4, 0.0), Vec3::z(), Vec3::zeros(), Vec3::z());
        assert_eq!(point_to_plane_loss(&c).unwrap(), 0.0);
    }

    #[test]
    fn plane_to_plane_by_hand() {
        let c = single(Vec3::zeros(), Vec3::x(), Vec3::zeros(), Vec3::y());
        assert_eq!(plane_to_plane_loss(&c).unwrap(), 2.0);
        let c = single(Vec3::zeros(), -Vec3::x(), Vec3::zeros(), Vec3::x());
        assert_eq!(plane_to_plane_loss(&c).unwrap(), 4.0);
        let c = single(Vec3::zeros(), Vec3::x(), Vec3::zeros(), Vec3::x());
        assert_eq!(plane_to_plane_loss(&c).unwrap(), 0.0);
    }

    #[test]
    fn total_combines_with_weights() {
        let c = CorrespondenceSet {
            pairs: vec![
                Correspondence::new(0, 0, Vec3::new(0.3, 0.4, 0.5), Vec3::z(), Vec3::zeros(), Vec3::z()),
                Correspondence::new(1, 1, Vec3::zeros(), Vec3::x(), Vec3::zeros(), Vec3::y()),
            ],
        };
        let total = total_loss(&c, &LossWeights::default()).unwrap();
        assert!((total - 0.7).abs() < 1e-15);
        let zero = LossWeights {
            alpha: 0.0,
            lambda: 0.0,
        };
        assert_eq!(total_loss(&c, &zero).unwrap(), 0.0);
    }

    #[test]
    fn empty_set_is_an_error() {
        let c = CorrespondenceSet::default();
        assert!(point_to_plane_loss(&c).is_err());
        assert!(plane_to_plane_loss(&c).is_err());
        assert!(total_loss(&c, &LossWeights::default()).is_err());
    }

    fn random_cloud(rng: &mut ChaCha8Rng, n: usize) -> PreprocessedCloud {
        let mut pts = Vec::new();
        let mut ns = Vec::new();
        for _ in 0..n {
            pts.push(Vec3::new(
                rng.random_range(-10.0..10.0),
                rng.random_range(-10.0..10.0),
                rng.random_range(-2.0..2.0),
            ));
            ns.push(
                Vec3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                )
                .normalize(),
            );
        }
        PreprocessedCloud::new(pts, ns)
    }

    #[test]
    fn identical_clouds_match_themselves() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cloud = random_cloud(&mut rng, 300);
        let index = build_index(&cloud).unwrap();
        let c = match_nearest(&cloud, &index, &cloud, 1.0).unwrap();
        assert_eq!(c.len(), 300);
        for (i, p) in c.pairs.iter().enumerate() {
            assert_eq!(p.source_index, i);
            assert_eq!(p.target_index, i);
            assert_eq!(p.distance, 0.0);
        }
        assert!(total_loss(&c, &LossWeights::default()).unwrap() < 1e-9);
    }

    #[test]
    fn far_source_has_no_matches() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cloud = random_cloud(&mut rng, 100);
        let index = build_index(&cloud).unwrap();
        let moved = cloud.transformed(&Pose::from_translation(Vec3::new(30.0, 0.0, 0.0)));
        let err = match_nearest(&moved, &index, &cloud, 1.0).unwrap_err();
        assert!(matches!(err, Error::NoCorrespondences { .. }));
    }

    #[test]
    fn two_point_match_by_hand() {
        let target = PreprocessedCloud::new(
            vec![Vec3::new(0.1, 0.0, 0.0), Vec3::new(5.1, 0.0, 0.0)],
            vec![Vec3::z(); 2],
        );
        let source = PreprocessedCloud::new(
            vec![Vec3::zeros(), Vec3::new(5.0, 0.0, 0.0)],
            vec![Vec3::z(); 2],
        );
        let index = build_index(&target).unwrap();
        let c = match_nearest(&source, &index, &target, 1.0).unwrap();
        assert_eq!(c.len(), 2);
        for (i, p) in c.pairs.iter().enumerate() {
            assert_eq!((p.source_index, p.target_index), (i, i));
            assert!((p.distance - 0.1).abs() < 1e-12);
        }
    }

    #[test]
    fn pixel_matching_on_identical_and_disjoint_maps() {
        use crate::range_image::Grid3;
        let mut g = Grid3::empty(2, 3);
        g.values[1] = Vec3::new(1.0, 2.0, 3.0);
        g.valid[1] = true;
        g.values[4] = Vec3::new(4.0, 5.0, 6.0);
        g.valid[4] = true;
        let v = VertexMap {
            grid: g.clone(),
            rejected: 0,
        };
        let mut ng = g.clone();
        ng.values[1] = Vec3::z();
        ng.values[4] = Vec3::x();
        let n = NormalMap { grid: ng };
        let c = match_pixel(&v, &v, &n, &n).unwrap();
        assert_eq!(c.len(), 2);
        assert!(c.pairs.iter().all(|p| p.distance == 0.0 && p.source_index == p.target_index));

        let mut other = Grid3::empty(2, 3);
        other.valid[0] = true;
        other.values[0] = Vec3::x();
        let v2 = VertexMap {
            grid: other.clone(),
            rejected: 0,
        };
        let n2 = NormalMap { grid: other };
        assert!(match_pixel(&v, &v2, &n, &n2).unwrap().is_empty());
    }

    fn finite_difference(
        p: &PoseVector,
        source: &PreprocessedCloud,
        c: &CorrespondenceSet,
        w: &LossWeights,
    ) -> Vector6<f64> {
        let h = 1e-6;
        let mut g = Vector6::zeros();
        for k in 0..6 {
            let mut plus = *p;
            let mut minus = *p;
            plus.0[k] += h;
            minus.0[k] -= h;
            g[k] = (loss_at(&plus, source, c, w).unwrap() - loss_at(&minus, source, c, w).unwrap())
                / (2.0 * h);
        }
        g
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for weights in [
            LossWeights::default(),
            LossWeights {
                alpha: 0.0,
                lambda: 0.1,
            },
            LossWeights {
                alpha: 1.0,
                lambda: 0.0,
            },
        ] {
            for _ in 0..5 {
                let target = random_cloud(&mut rng, 200);
                let mut p = PoseVector::zeros();
                for k in 0..6 {
                    p.0[k] = rng.random_range(-0.05..0.05);
                }
                // Source is the target seen from a slightly different pose.
                let source = target.transformed(&Pose::from(p).inverse());
                let mut q = p;
                for k in 0..6 {
                    q.0[k] += rng.random_range(-0.02..0.02);
                }
                let index = build_index(&target).unwrap();
                let moved = source.transformed(&q.to_pose());
                let c = match_nearest(&moved, &index, &target, 1.0).unwrap();
                let a = loss_gradient(&q, &source, &c, &weights);
                let n = finite_difference(&q, &source, &c, &weights);
                let rel = (a - n).norm() / n.norm().max(1e-12);
                assert!(rel < 1e-4, "relative error {rel}");
            }
        }
    }

    #[test]
    fn gradient_vanishes_at_alignment() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let cloud = random_cloud(&mut rng, 200);
        let index = build_index(&cloud).unwrap();
        let c = match_nearest(&cloud, &index, &cloud, 1.0).unwrap();
        let g = loss_gradient(&PoseVector::zeros(), &cloud, &c, &LossWeights::default());
        assert!(g.norm() < 1e-9);
    }

    #[test]
    fn wall_translation_gradient_follows_normal() {
        // Points on the wall x = 5 with normals facing the sensor.
        let mut pts = Vec::new();
        for i in 0..10 {
            for j in 0..10 {
                pts.push(Vec3::new(5.0, i as f64 * 0.3 - 1.5, j as f64 * 0.3 - 1.5));
            }
        }
        let target = PreprocessedCloud::new(pts.clone(), vec![-Vec3::x(); pts.len()]);
        let index = build_index(&target).unwrap();
        let p = PoseVector::from(Pose::from_translation(Vec3::new(0.2, 0.0, 0.0)));
        let moved = target.transformed(&p.to_pose());
        let c = match_nearest(&moved, &index, &target, 1.0).unwrap();
        let g = loss_gradient(&p, &target, &c, &LossWeights::default());
        let t = Vec3::new(g[3], g[4], g[5]);
        assert!(t.normalize().cross(&Vec3::x()).norm() < 1e-9);
        assert!(t.x > 0.0);
    }

    #[test]
    fn loss_is_order_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let target = random_cloud(&mut rng, 150);
        let source = target.transformed(&Pose::from_translation(Vec3::new(0.1, 0.05, 0.0)));
        let index = build_index(&target).unwrap();
        let c = match_nearest(&source, &index, &target, 1.0).unwrap();
        let mut rev = c.clone();
        rev.pairs.reverse();
        let a = total_loss(&c, &LossWeights::default()).unwrap();
        let b = total_loss(&rev, &LossWeights::default()).unwrap();
        assert!((a - b).abs() <= 1e-12 * a.max(1.0));
    }
}
