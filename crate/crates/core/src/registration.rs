//! Classical frame-to-frame registration by direct minimization of the
//! unsupervised loss.
//!
//! Each outer iteration re-matches the transformed source against the target;
//! the inner loop then takes descent steps with the matches frozen. The
//! default solver is Gauss-Newton on squared point-to-plane residuals plus the
//! λ-weighted normal term, with a halving line search. Reported losses always
//! use the absolute point-to-plane form.

use nalgebra::{Matrix6, Vector6};
use serde::{Deserialize, Serialize};

use crate::correspondence::{
    build_index, loss_at, loss_gradient, match_nearest, total_loss, CorrespondenceSet, LossWeights,
};
use crate::error::{Error, Result};
use crate::geometry::{point_jacobian, rotation_jacobian, Pose, PoseVector};
use crate::kdtree::KdIndex;
use crate::preprocess::PreprocessedCloud;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StepPolicy {
    GaussNewton,
    /// Fixed-step gradient descent on the reported loss.
    GradientDescent { step: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegistrationOptions {
    pub max_outer: usize,
    pub max_inner: usize,
    /// Convergence threshold on the 6-vector update norm.
    pub tolerance: f64,
    /// Correspondence rejection distance, meters.
    pub max_dist: f64,
    pub policy: StepPolicy,
    pub weights: LossWeights,
}

impl Default for RegistrationOptions {
    fn default() -> Self {
        Self {
            max_outer: 10,
            max_inner: 5,
            tolerance: 1e-6,
            max_dist: 1.0,
            policy: StepPolicy::GaussNewton,
            weights: LossWeights::default(),
        }
    }
}

impl RegistrationOptions {
    pub fn validate(&self) -> Result<()> {
        if self.max_outer == 0 || self.max_inner == 0 {
            return Err(Error::Config("iteration bounds must be at least 1".into()));
        }
        if !(self.tolerance > 0.0) {
            return Err(Error::Config("tolerance must be positive".into()));
        }
        if self.weights.alpha < 0.0 || self.weights.lambda < 0.0 {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RegistrationDiagnostics {
    /// Reported loss after each outer iteration, under that iteration's matching.
    pub loss_trace: Vec<f64>,
    pub match_counts: Vec<usize>,
    pub outer_iterations: usize,
    pub inner_iterations: usize,
    pub converged: bool,
    /// Loss of the returned pose under the final matching.
    pub final_loss: f64,
    /// Loss of the initial pose under the final matching.
    pub initial_loss: f64,
}

#[derive(Debug)]
pub struct RegistrationFailure {
    pub init: Pose,
    pub error: Error,
}

impl std::fmt::Display for RegistrationFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "registration failed from {}: {}", self.init, self.error)
    }
}

impl std::error::Error for RegistrationFailure {}

impl From<RegistrationFailure> for Error {
    fn from(f: RegistrationFailure) -> Self {
        f.error
    }
}

/// Smooth surrogate: `α Σ r² + λ Σ |R n − n_k|²`.
fn surrogate(p: &PoseVector, source: &PreprocessedCloud, c: &CorrespondenceSet, w: &LossWeights) -> f64 {
    let c = c.reposed(source, &p.to_pose());
    c.pairs
        .iter()
        .map(|pair| {
            let r = pair.plane_residual();
            w.alpha * r * r + w.lambda * (pair.source_normal - pair.target_normal).norm_squared()
        })
        .sum()
}

fn gauss_newton_step(
    p: &PoseVector,
    source: &PreprocessedCloud,
    c: &CorrespondenceSet,
    w: &LossWeights,
) -> Option<Vector6<f64>> {
    let pose = p.to_pose();
    let rot = pose.rotation_matrix();
    let mut h = Matrix6::zeros();
    let mut g = Vector6::zeros();
    for pair in &c.pairs {
        let x = &source.points[pair.source_index];
        let n = &source.normals[pair.source_index];
        if w.alpha > 0.0 {
            let residual = pair.target_normal.dot(&(rot * x + pose.translation - pair.target_point));
            let j = point_jacobian(p, x).transpose() * pair.target_normal;
            h += w.alpha * j * j.transpose();
            g += w.alpha * residual * j;
        }
        if w.lambda > 0.0 {
            let e = rot * n - pair.target_normal;
            let j = rotation_jacobian(p, n);
            h += w.lambda * j.transpose() * j;
            g += w.lambda * j.transpose() * e;
        }
    }
    let damping = 1e-9 * h.trace().max(1e-12);
    h += Matrix6::identity() * damping;
    h.cholesky().map(|ch| -ch.solve(&g))
}

/// Estimates the pose taking `source` into `target`'s frame.
pub fn register(
    source: &PreprocessedCloud,
    target: &PreprocessedCloud,
    init: &Pose,
    opts: &RegistrationOptions,
) -> std::result::Result<(Pose, RegistrationDiagnostics), RegistrationFailure> {
    let fail = |error| RegistrationFailure { init: *init, error };
    opts.validate().map_err(fail)?;
    let index = build_index(target).map_err(fail)?;
    register_with_index(source, target, &index, init, opts)
}

pub fn register_with_index(
    source: &PreprocessedCloud,
    target: &PreprocessedCloud,
    index: &KdIndex,
    init: &Pose,
    opts: &RegistrationOptions,
) -> std::result::Result<(Pose, RegistrationDiagnostics), RegistrationFailure> {
    let fail = |error| RegistrationFailure { init: *init, error };
    if source.is_empty() {
        return Err(fail(Error::Empty("registration source is empty")));
    }
    let w = &opts.weights;
    let mut p = PoseVector::from(*init);
    let mut diag = RegistrationDiagnostics::default();
    let mut matches = match_nearest(&source.transformed(init), index, target, opts.max_dist)
        .map_err(fail)?;

    for outer in 0..opts.max_outer {
        if outer > 0 {
            match match_nearest(&source.transformed(&p.to_pose()), index, target, opts.max_dist) {
                Ok(m) => matches = m,
                // Keep the previous matching when the estimate wandered off.
                Err(_) => break,
            }
        }
        diag.outer_iterations += 1;
        diag.match_counts.push(matches.len());
        let start = p;
        for _ in 0..opts.max_inner {
            diag.inner_iterations += 1;
            let accepted = match opts.policy {
                StepPolicy::GaussNewton => {
                    let Some(delta) = gauss_newton_step(&p, source, &matches, w) else {
                        break;
                    };
                    line_search(&p, delta, |q| surrogate(q, source, &matches, w))
                }
                StepPolicy::GradientDescent { step } => {
                    let g = loss_gradient(&p, source, &matches, w);
                    line_search(&p, -step * g, |q| {
                        loss_at(q, source, &matches, w).unwrap_or(f64::INFINITY)
                    })
                }
            };
            let Some(next) = accepted else {
                break;
            };
            let moved = (next.0 - p.0).norm();
            p = next;
            if moved < opts.tolerance {
                break;
            }
        }
        diag.loss_trace
            .push(loss_at(&p, source, &matches, w).map_err(fail)?);
        if (p.0 - start.0).norm() < opts.tolerance {
            diag.converged = true;
            break;
        }
    }

    let final_matches = match_nearest(&source.transformed(&p.to_pose()), index, target, opts.max_dist)
        .unwrap_or(matches);
    let final_loss = total_loss(&final_matches, w).map_err(fail)?;
    let initial_loss = loss_at(&PoseVector::from(*init), source, &final_matches, w).map_err(fail)?;
    diag.initial_loss = initial_loss;
    if final_loss > initial_loss {
        diag.final_loss = initial_loss;
        return Ok((*init, diag));
    }
    diag.final_loss = final_loss;
    Ok((p.to_pose(), diag))
}

/// Tries `p + delta`, halving up to 20 times until the objective decreases.
fn line_search(
    p: &PoseVector,
    delta: Vector6<f64>,
    objective: impl Fn(&PoseVector) -> f64,
) -> Option<PoseVector> {
    let base = objective(p);
    let mut step = delta;
    for _ in 0..20 {
        let candidate = PoseVector(p.0 + step);
        if objective(&candidate) < base {
            return Some(candidate);
        }
        step *= 0.5;
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Vec3;

    /// Disjoint planar patches with known normals, seen from the origin.
    fn patches() -> PreprocessedCloud {
        let mut points = Vec::new();
        let mut normals = Vec::new();
        let mut patch = |origin: Vec3, u: Vec3, v: Vec3, n: Vec3| {
            for i in 0..15 {
                for j in 0..15 {
                    points.push(origin + u * (i as f64 / 14.0) + v * (j as f64 / 14.0));
                    normals.push(n);
                }
            }
        };
        patch(Vec3::new(6.0, -2.0, -1.0), Vec3::y() * 4.0, Vec3::z() * 3.0, -Vec3::x());
        patch(Vec3::new(-2.0, 5.0, -1.0), Vec3::x() * 4.0, Vec3::z() * 3.0, -Vec3::y());
        patch(Vec3::new(-2.0, -6.0, -1.0), Vec3::x() * 4.0, Vec3::z() * 3.0, Vec3::y());
        patch(Vec3::new(-3.0, -3.0, -1.7), Vec3::x() * 6.0, Vec3::y() * 6.0, Vec3::z());
        patch(Vec3::new(-6.0, -2.0, -1.0), Vec3::y() * 4.0, Vec3::z() * 3.0, Vec3::x());
        PreprocessedCloud::new(points, normals)
    }

    #[test]
    fn already_registered_stays_put() {
        let cloud = patches();
        let (pose, diag) = register(&cloud, &cloud, &Pose::identity(), &RegistrationOptions::default()).unwrap();
        assert!(pose.to_vector().0.norm() < 1e-6);
        assert!(diag.final_loss < 1e-9);
    }

    #[test]
    fn recovers_small_motion() {
        let target = patches();
        let truth = Pose::new(Vec3::new(0.0, 0.0, 2f64.to_radians()), Vec3::new(0.3, 0.1, 0.0));
        let source = target.transformed(&truth.inverse());
        let (pose, diag) = register(&source, &target, &Pose::identity(), &RegistrationOptions::default()).unwrap();
        let err = pose.inverse().compose(&truth);
        assert!(err.translation.norm() < 1e-6, "{pose}");
        assert!(err.angle() < 1e-6);
        assert!(diag.final_loss <= diag.initial_loss);
    }

    #[test]
    fn true_init_is_a_fixed_point() {
        let target = patches();
        let truth = Pose::new(Vec3::new(0.01, -0.02, 0.05), Vec3::new(0.2, -0.1, 0.05));
        let source = target.transformed(&truth.inverse());
        let (pose, _) = register(&source, &target, &truth, &RegistrationOptions::default()).unwrap();
        assert!((pose.to_vector().0 - truth.to_vector().0).norm() < 1e-6);
    }

    #[test]
    fn gradient_descent_policy_reduces_loss() {
        let target = patches();
        let truth = Pose::from_translation(Vec3::new(0.2, 0.0, 0.0));
        let source = target.transformed(&truth.inverse());
        let opts = RegistrationOptions {
            policy: StepPolicy::GradientDescent { step: 1e-3 },
            ..Default::default()
        };
        let (_, diag) = register(&source, &target, &Pose::identity(), &opts).unwrap();
        assert!(diag.final_loss < diag.initial_loss);
    }

    #[test]
    fn no_matches_at_init_reports_init() {
        let target = patches();
        let far = Pose::from_translation(Vec3::new(100.0, 0.0, 0.0));
        let err = register(&target, &target, &far, &RegistrationOptions::default()).unwrap_err();
        assert_eq!(err.init, far);
        assert!(matches!(err.error, Error::NoCorrespondences { .. }));
    }

    #[test]
    fn deterministic() {
        let target = patches();
        let truth = Pose::new(Vec3::new(0.0, 0.0, 0.03), Vec3::new(0.25, 0.1, 0.0));
        let source = target.transformed(&truth.inverse());
        let opts = RegistrationOptions::default();
        let a = register(&source, &target, &Pose::identity(), &opts).unwrap();
        let b = register(&source, &target, &Pose::identity(), &opts).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
    }
}
