//! Rigid-body transforms parameterized by intrinsic Z-Y-X Euler angles.
//!
//! A rotation `q = (roll, pitch, yaw)` is `R = Rz(yaw) · Ry(pitch) · Rx(roll)`.
//! Angles are radians everywhere inside the crate; degrees appear only at I/O
//! boundaries. Near `|pitch| = π/2` the Euler extraction is ill-conditioned and
//! no special handling is attempted; inter-frame rotations are small.

use std::fmt;
use std::ops::Mul;

use nalgebra::{Matrix3, Matrix3x6, Matrix4, Vector3, Vector6};
use serde::{Deserialize, Serialize};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;
pub type Mat4 = Matrix4<f64>;

/// Rotation matrix for Euler angles `(roll, pitch, yaw)`.
pub fn euler_to_matrix(q: &Vec3) -> Mat3 {
    let (sr, cr) = q.x.sin_cos();
    let (sp, cp) = q.y.sin_cos();
    let (sy, cy) = q.z.sin_cos();
    Mat3::new(
        cy * cp,
        cy * sp * sr - sy * cr,
        cy * sp * cr + sy * sr,
        sy * cp,
        sy * sp * sr + cy * cr,
        sy * sp * cr - cy * sr,
        -sp,
        cp * sr,
        cp * cr,
    )
}

/// Inverse of [`euler_to_matrix`] for a proper rotation matrix.
pub fn matrix_to_euler(r: &Mat3) -> Vec3 {
    let pitch = (-r[(2, 0)]).clamp(-1.0, 1.0).asin();
    let roll = r[(2, 1)].atan2(r[(2, 2)]);
    let yaw = r[(1, 0)].atan2(r[(0, 0)]);
    Vec3::new(roll, pitch, yaw)
}

/// Partial derivatives of the rotation matrix with respect to roll, pitch and yaw.
pub fn euler_derivatives(q: &Vec3) -> [Mat3; 3] {
    let (sr, cr) = q.x.sin_cos();
    let (sp, cp) = q.y.sin_cos();
    let (sy, cy) = q.z.sin_cos();
    let rx = Mat3::new(1.0, 0.0, 0.0, 0.0, cr, -sr, 0.0, sr, cr);
    let ry = Mat3::new(cp, 0.0, sp, 0.0, 1.0, 0.0, -sp, 0.0, cp);
    let rz = Mat3::new(cy, -sy, 0.0, sy, cy, 0.0, 0.0, 0.0, 1.0);
    let drx = Mat3::new(0.0, 0.0, 0.0, 0.0, -sr, -cr, 0.0, cr, -sr);
    let dry = Mat3::new(-sp, 0.0, cp, 0.0, 0.0, 0.0, -cp, 0.0, -sp);
    let drz = Mat3::new(-sy, -cy, 0.0, cy, -sy, 0.0, 0.0, 0.0, 0.0);
    [rz * ry * drx, rz * dry * rx, drz * ry * rx]
}

/// Rotation angle of a rotation matrix, in radians, via the trace formula.
pub fn rotation_angle(r: &Mat3) -> f64 {
    ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0).acos()
}

/// Relative rigid transform: Euler rotation plus translation in meters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    /// `(roll, pitch, yaw)` in radians.
    pub rotation: Vec3,
    pub translation: Vec3,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn new(rotation: Vec3, translation: Vec3) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn identity() -> Self {
        Self::new(Vec3::zeros(), Vec3::zeros())
    }

    pub fn from_translation(t: Vec3) -> Self {
        Self::new(Vec3::zeros(), t)
    }

    pub fn from_yaw(yaw: f64) -> Self {
        Self::new(Vec3::new(0.0, 0.0, yaw), Vec3::zeros())
    }

    pub fn rotation_matrix(&self) -> Mat3 {
        euler_to_matrix(&self.rotation)
    }

    /// Homogeneous 4×4 view `[R t; 0 1]`.
    pub fn matrix(&self) -> Mat4 {
        let mut m = Mat4::identity();
        m.fixed_view_mut::<3, 3>(0, 0)
            .copy_from(&self.rotation_matrix());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Reads rotation and translation out of the upper 3×4 block of `m`.
    pub fn from_matrix(m: &Mat4) -> Self {
        let r: Mat3 = m.fixed_view::<3, 3>(0, 0).into_owned();
        let t: Vec3 = m.fixed_view::<3, 1>(0, 3).into_owned();
        Self::new(matrix_to_euler(&r), t)
    }

    pub fn from_rotation_translation(r: &Mat3, t: Vec3) -> Self {
        Self::new(matrix_to_euler(r), t)
    }

    /// `outer ∘ inner`: the matrix product `outer.matrix() * inner.matrix()`.
    pub fn compose(&self, inner: &Pose) -> Pose {
        let ro = self.rotation_matrix();
        let r = ro * inner.rotation_matrix();
        let t = ro * inner.translation + self.translation;
        Pose::from_rotation_translation(&r, t)
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation_matrix().transpose();
        Pose::from_rotation_translation(&rt, -(rt * self.translation))
    }

    /// `R v + t`
    pub fn apply_to_point(&self, v: &Vec3) -> Vec3 {
        self.rotation_matrix() * v + self.translation
    }

    /// `R n`; translation does not move normals.
    pub fn apply_to_normal(&self, n: &Vec3) -> Vec3 {
        self.rotation_matrix() * n
    }

    pub fn to_vector(&self) -> PoseVector {
        PoseVector::from(*self)
    }

    /// Rotation angle of this transform, radians.
    pub fn angle(&self) -> f64 {
        rotation_angle(&self.rotation_matrix())
    }
}

impl Mul for Pose {
    type Output = Pose;

    fn mul(self, rhs: Pose) -> Pose {
        self.compose(&rhs)
    }
}

impl fmt::Display for Pose {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let d = self.rotation.map(f64::to_degrees);
        write!(
            f,
            "rpy=({:.4}°, {:.4}°, {:.4}°) t=({:.4}, {:.4}, {:.4})",
            d.x, d.y, d.z, self.translation.x, self.translation.y, self.translation.z
        )
    }
}

/// Flat `(roll, pitch, yaw, tx, ty, tz)` parameterization used by the
/// optimizer and by back-propagation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PoseVector(pub Vector6<f64>);

impl PoseVector {
    pub fn zeros() -> Self {
        Self(Vector6::zeros())
    }

    pub fn rotation(&self) -> Vec3 {
        self.0.fixed_rows::<3>(0).into_owned()
    }

    pub fn translation(&self) -> Vec3 {
        self.0.fixed_rows::<3>(3).into_owned()
    }

    pub fn to_pose(&self) -> Pose {
        Pose::new(self.rotation(), self.translation())
    }
}

impl From<Pose> for PoseVector {
    fn from(p: Pose) -> Self {
        let mut v = Vector6::zeros();
        v.fixed_rows_mut::<3>(0).copy_from(&p.rotation);
        v.fixed_rows_mut::<3>(3).copy_from(&p.translation);
        PoseVector(v)
    }
}

impl From<PoseVector> for Pose {
    fn from(p: PoseVector) -> Self {
        p.to_pose()
    }
}

/// `∂(R v + t)/∂p` for `p = (roll, pitch, yaw, tx, ty, tz)`.
pub fn point_jacobian(p: &PoseVector, v: &Vec3) -> Matrix3x6<f64> {
    let mut j = rotation_jacobian(p, v);
    j.fixed_view_mut::<3, 3>(0, 3).copy_from(&Mat3::identity());
    j
}

/// `∂(R n)/∂p`; translation columns are zero.
pub fn rotation_jacobian(p: &PoseVector, n: &Vec3) -> Matrix3x6<f64> {
    let d = euler_derivatives(&p.rotation());
    let mut j = Matrix3x6::zeros();
    for (col, dr) in d.iter().enumerate() {
        j.set_column(col, &(dr * n));
    }
    j
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn close(a: &Vec3, b: &Vec3, tol: f64) -> bool {
        (a - b).amax() <= tol
    }

    fn arb_pose() -> impl Strategy<Value = Pose> {
        (
            -PI..PI,
            -1.4f64..1.4,
            -PI..PI,
            -10.0f64..10.0,
            -10.0f64..10.0,
            -10.0f64..10.0,
        )
            .prop_map(|(r, p, y, a, b, c)| Pose::new(Vec3::new(r, p, y), Vec3::new(a, b, c)))
    }

    #[test]
    fn identity_angles_give_identity_matrix() {
        assert_eq!(euler_to_matrix(&Vec3::zeros()), Mat3::identity());
    }

    #[test]
    fn yaw_quarter_turn_maps_x_to_y() {
        let r = euler_to_matrix(&Vec3::new(0.0, 0.0, FRAC_PI_2));
        assert!(close(&(r * Vec3::x()), &Vec3::y(), 1e-12));
    }

    #[test]
    fn roll_quarter_turn_maps_y_to_z() {
        let r = euler_to_matrix(&Vec3::new(FRAC_PI_2, 0.0, 0.0));
        assert!(close(&(r * Vec3::y()), &Vec3::z(), 1e-12));
    }

    #[test]
    fn compose_examples() {
        let inner = Pose::from_translation(Vec3::x());
        let c = Pose::identity().compose(&inner);
        assert!(close(&c.translation, &Vec3::x(), 1e-12));
        assert!(close(&c.rotation, &Vec3::zeros(), 1e-12));

        let outer = Pose::from_yaw(FRAC_PI_2);
        let c = outer.compose(&inner);
        assert!(close(&c.translation, &Vec3::y(), 1e-12));
        assert!(close(&c.rotation, &Vec3::new(0.0, 0.0, FRAC_PI_2), 1e-12));
    }

    #[test]
    fn apply_examples() {
        let v = Vec3::new(3.0, 2.0, 1.0);
        assert_eq!(Pose::identity().apply_to_point(&v), v);
        let t = Pose::from_translation(Vec3::new(0.0, 0.0, 5.0));
        assert_eq!(t.apply_to_point(&Vec3::new(1.0, 1.0, 0.0)), Vec3::new(1.0, 1.0, 5.0));
        let half = Pose::from_yaw(PI);
        assert!(close(&half.apply_to_point(&Vec3::x()), &-Vec3::x(), 1e-12));

        let shifted = Pose::from_translation(Vec3::new(9.0, 9.0, 9.0));
        assert_eq!(shifted.apply_to_normal(&Vec3::z()), Vec3::z());
        assert!(close(&half.apply_to_normal(&Vec3::x()), &-Vec3::x(), 1e-12));
    }

    #[test]
    fn jacobian_at_zero() {
        let j = point_jacobian(&PoseVector::zeros(), &Vec3::zeros());
        assert_eq!(j.fixed_view::<3, 3>(0, 0).into_owned(), Mat3::zeros());
        assert_eq!(j.fixed_view::<3, 3>(0, 3).into_owned(), Mat3::identity());

        let j = point_jacobian(&PoseVector::zeros(), &Vec3::x());
        assert!(close(&j.column(2).into_owned(), &Vec3::y(), 1e-15));
    }

    fn numeric_jacobian(p: &PoseVector, v: &Vec3) -> Matrix3x6<f64> {
        let h = 1e-6;
        let mut j = Matrix3x6::zeros();
        for k in 0..6 {
            let mut plus = *p;
            let mut minus = *p;
            plus.0[k] += h;
            minus.0[k] -= h;
            let d = (plus.to_pose().apply_to_point(v) - minus.to_pose().apply_to_point(v)) / (2.0 * h);
            j.set_column(k, &d);
        }
        j
    }

    proptest! {
        #[test]
        fn matrix_is_proper_rotation(p in arb_pose()) {
            let r = p.rotation_matrix();
            prop_assert!((r.transpose() * r - Mat3::identity()).amax() < 1e-9);
            prop_assert!((r.determinant() - 1.0).abs() < 1e-9);
        }

        #[test]
        fn euler_round_trip(p in arb_pose()) {
            let back = matrix_to_euler(&p.rotation_matrix());
            prop_assert!(close(&back, &p.rotation, 1e-9));
        }

        #[test]
        fn inverse_law(p in arb_pose()) {
            let id = p.compose(&p.inverse());
            prop_assert!((id.matrix() - Mat4::identity()).amax() < 1e-9);
        }

        #[test]
        fn composition_matches_matrix_product_and_action(a in arb_pose(), b in arb_pose(),
                                                         x in -5.0f64..5.0, y in -5.0f64..5.0, z in -5.0f64..5.0) {
            let c = a.compose(&b);
            prop_assert!((c.matrix() - a.matrix() * b.matrix()).amax() < 1e-9);
            let v = Vec3::new(x, y, z);
            prop_assert!(close(&c.apply_to_point(&v), &a.apply_to_point(&b.apply_to_point(&v)), 1e-9));
        }

        #[test]
        fn composition_is_associative(a in arb_pose(), b in arb_pose(), c in arb_pose()) {
            let left = a.compose(&b).compose(&c);
            let right = a.compose(&b.compose(&c));
            prop_assert!((left.matrix() - right.matrix()).amax() < 1e-9);
        }

        #[test]
        fn normals_keep_unit_length(p in arb_pose(), x in -1.0f64..1.0, y in -1.0f64..1.0, z in 0.1f64..1.0) {
            let n = Vec3::new(x, y, z).normalize();
            prop_assert!((p.apply_to_normal(&n).norm() - 1.0).abs() < 1e-9);
        }

        #[test]
        fn rotation_is_continuous(p in arb_pose(), k in 0usize..3) {
            let mut q = p.rotation;
            q[k] += 1e-8;
            let diff = euler_to_matrix(&q) - p.rotation_matrix();
            prop_assert!(diff.amax() <= 1e-7);
        }
    }

    #[test]
    fn point_jacobian_matches_finite_differences() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let mut p = PoseVector::zeros();
            for k in 0..3 {
                p.0[k] = rng.random_range(-1.2..1.2);
            }
            for k in 3..6 {
                p.0[k] = rng.random_range(-5.0..5.0);
            }
            let v = Vec3::new(
                rng.random_range(-10.0..10.0),
                rng.random_range(-10.0..10.0),
                rng.random_range(-10.0..10.0),
            );
            let a = point_jacobian(&p, &v);
            let n = numeric_jacobian(&p, &v);
            let rel = (a - n).norm() / n.norm().max(1e-12);
            assert!(rel < 1e-5, "relative error {rel}");
        }
    }
}
