//! Rotation and pose primitives shared by the whole pipeline.
//!
//! Orientations are kept as rotation matrices internally; quaternions only
//! appear at file-format boundaries. The two numerical workhorses here are
//! [`polar_rotation`], which extracts the closest proper rotation from a
//! deformation Jacobian, and [`numerical_jacobian`], the central-difference
//! cross-check used against analytic Jacobians.

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3};
use thiserror::Error;

/// Max allowed deviation from orthonormality / unit determinant for a
/// matrix accepted as a rotation.
pub const ROTATION_TOL: f64 = 1e-9;

/// |det J| at or below this is treated as a degenerate (folding) map.
pub const SINGULAR_DET_TOL: f64 = 1e-12;

/// Default central-difference step in meters. Balances truncation against
/// roundoff for meter-scale workspaces.
pub const FD_STEP_DEFAULT: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum GeometryError {
    /// The Jacobian folds space onto itself; no rotational factor exists.
    #[error("SingularJacobian: |det J| = {det:.3e} is at or below {SINGULAR_DET_TOL:.0e}")]
    SingularJacobian { det: f64 },
    /// A matrix offered as a rotation fails orthonormality or det = +1.
    #[error("NotARotation: orthonormality/determinant defect {defect:.3e} exceeds {ROTATION_TOL:.0e}")]
    NotARotation { defect: f64 },
}

/// A proper rotation: orthonormal 3×3 matrix with determinant +1.
///
/// Construction through [`Rotation::from_matrix`] enforces both invariants to
/// [`ROTATION_TOL`]; every operation on the type stays inside SO(3).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation(Rotation3<f64>);

impl Rotation {
    pub fn identity() -> Self {
        Rotation(Rotation3::identity())
    }

    /// Validates the rotation invariants and wraps the matrix.
    pub fn from_matrix(m: Matrix3<f64>) -> Result<Self, GeometryError> {
        let defect = rotation_defect(&m);
        if defect > ROTATION_TOL {
            return Err(GeometryError::NotARotation { defect });
        }
        Ok(Rotation(Rotation3::from_matrix_unchecked(m)))
    }

    /// Rotation about `axis` (normalized internally) by `angle` radians.
    pub fn from_axis_angle(axis: &Vector3<f64>, angle: f64) -> Self {
        let unit = nalgebra::Unit::new_normalize(*axis);
        Rotation(Rotation3::from_axis_angle(&unit, angle))
    }

    pub fn from_unit_quaternion(q: &UnitQuaternion<f64>) -> Self {
        Rotation(q.to_rotation_matrix())
    }

    /// Unit quaternion with the scalar part canonicalized to w ≥ 0.
    pub fn to_unit_quaternion(&self) -> UnitQuaternion<f64> {
        let q = UnitQuaternion::from_rotation_matrix(&self.0);
        if q.w < 0.0 {
            UnitQuaternion::new_unchecked(-q.into_inner())
        } else {
            q
        }
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        self.0.matrix()
    }

    pub fn inverse(&self) -> Self {
        Rotation(self.0.inverse())
    }

    /// Geodesic step: the rotation a fraction `t` of the way from `self`
    /// toward `target` (t = 0 stays, t = 1 arrives).
    pub fn interpolate_toward(&self, target: &Rotation, t: f64) -> Rotation {
        let delta = self.0.rotation_to(&target.0);
        Rotation(delta.powf(t) * self.0)
    }

    /// Geodesic distance to `other` in radians. Ill-conditioned near zero
    /// (acos); use [`Rotation::matrix_distance`] for tight equality checks.
    pub fn angle_to(&self, other: &Rotation) -> f64 {
        self.0.angle_to(&other.0)
    }

    /// Max absolute entrywise difference between the two matrices.
    pub fn matrix_distance(&self, other: &Rotation) -> f64 {
        (self.0.matrix() - other.0.matrix())
            .iter()
            .fold(0.0f64, |acc, v| acc.max(v.abs()))
    }

    /// Max-norm defect of the SO(3) invariants; 0 for an exact rotation.
    pub fn defect(&self) -> f64 {
        rotation_defect(self.0.matrix())
    }
}

impl std::ops::Mul for Rotation {
    type Output = Rotation;
    fn mul(self, rhs: Rotation) -> Rotation {
        Rotation(self.0 * rhs.0)
    }
}

impl std::ops::Mul<Vector3<f64>> for Rotation {
    type Output = Vector3<f64>;
    fn mul(self, rhs: Vector3<f64>) -> Vector3<f64> {
        self.0 * rhs
    }
}

/// Position plus orientation of the follower tool frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub position: Vector3<f64>,
    pub orientation: Rotation,
}

impl Pose {
    pub fn new(position: Vector3<f64>, orientation: Rotation) -> Self {
        Pose {
            position,
            orientation,
        }
    }

    /// Maps a point from this frame into the world frame.
    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.orientation * *p + self.position
    }
}

/// General 3×3 matrix alias for deformation Jacobians.
pub type Matrix3f = Matrix3<f64>;

/// Combined orthonormality and determinant defect of `m`.
fn rotation_defect(m: &Matrix3<f64>) -> f64 {
    let gram = m.transpose() * m - Matrix3::identity();
    let ortho = gram.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    ortho.max((m.determinant() - 1.0).abs())
}

/// Rotational factor of `j` through the polar decomposition.
///
/// Computes the SVD j = U·Σ·Vᵀ and returns U·Vᵀ, flipping the sign of the
/// least-significant singular direction when needed so the determinant is +1.
/// The result is the proper rotation closest to `j` in Frobenius norm.
pub fn polar_rotation(j: &Matrix3<f64>) -> Result<Rotation, GeometryError> {
    let det = j.determinant();
    if det.abs() <= SINGULAR_DET_TOL {
        return Err(GeometryError::SingularJacobian { det });
    }
    // nalgebra sorts singular values in decreasing order, so column 2 of U
    // carries the smallest one; that is the direction to flip.
    let svd = j.svd(true, true);
    let mut u = svd.u.expect("svd requested u");
    let v_t = svd.v_t.expect("svd requested v_t");
    if (u * v_t).determinant() < 0.0 {
        u.column_mut(2).neg_mut();
    }
    Rotation::from_matrix(u * v_t)
}

/// Central-difference Jacobian of `f` at `x` with step `h` (meters).
///
/// Column j is (f(x + h·eⱼ) − f(x − h·eⱼ)) / (2h). Exact for affine maps up
/// to roundoff; non-finite values from `f` propagate into the result.
pub fn numerical_jacobian<F>(f: F, x: &Vector3<f64>, h: f64) -> Matrix3<f64>
where
    F: Fn(&Vector3<f64>) -> Vector3<f64>,
{
    debug_assert!(h > 0.0, "finite-difference step must be positive");
    let mut jac = Matrix3::zeros();
    for j in 0..3 {
        let mut plus = *x;
        let mut minus = *x;
        plus[j] += h;
        minus[j] -= h;
        let col = (f(&plus) - f(&minus)) / (2.0 * h);
        jac.set_column(j, &col);
    }
    jac
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn rot_z(angle: f64) -> Matrix3<f64> {
        Rotation3::from_axis_angle(&Vector3::z_axis(), angle)
            .matrix()
            .to_owned()
    }

    fn max_abs_diff(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
        (a - b).iter().fold(0.0f64, |acc, v| acc.max(v.abs()))
    }

    #[test]
    fn polar_of_identity_is_identity() {
        let r = polar_rotation(&Matrix3::identity()).unwrap();
        assert_eq!(r.matrix(), &Matrix3::identity());
    }

    #[test]
    fn polar_of_rotation_is_itself() {
        let m = rot_z(0.7) * rot_x(1.1);
        let r = polar_rotation(&m).unwrap();
        assert!(max_abs_diff(r.matrix(), &m) < 1e-12);
    }

    #[test]
    fn polar_of_stretched_rotation_recovers_rotation() {
        // Rz(30°)·diag(2, 1, 0.5) is already in polar form R·P with P
        // symmetric positive definite, so the polar factor is Rz(30°).
        let angle = 30.0f64.to_radians();
        let j = rot_z(angle) * Matrix3::from_diagonal(&Vector3::new(2.0, 1.0, 0.5));
        let r = polar_rotation(&j).unwrap();
        assert!(max_abs_diff(r.matrix(), &rot_z(angle)) < 1e-12);
    }

    #[test]
    fn polar_flips_reflections_to_proper_rotations() {
        let j = Matrix3::from_diagonal(&Vector3::new(2.0, 1.0, -0.5));
        let r = polar_rotation(&j).unwrap();
        // Closest proper rotation to a diagonal with one negative entry of
        // smallest magnitude is the identity.
        assert!(max_abs_diff(r.matrix(), &Matrix3::identity()) < 1e-12);
        assert!((r.matrix().determinant() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn polar_rejects_singular_jacobian() {
        let j = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, 0.0));
        match polar_rotation(&j) {
            Err(GeometryError::SingularJacobian { .. }) => {}
            other => panic!("expected SingularJacobian, got {other:?}"),
        }
    }

    #[test]
    fn numerical_jacobian_of_identity_map() {
        let j = numerical_jacobian(|x| *x, &Vector3::new(0.3, -0.2, 0.9), FD_STEP_DEFAULT);
        assert!(max_abs_diff(&j, &Matrix3::identity()) < 1e-10);
    }

    #[test]
    fn numerical_jacobian_of_linear_map_recovers_matrix() {
        let a = Matrix3::new(1.0, 0.2, -0.3, 0.5, -1.1, 0.0, 0.7, 0.4, 2.0);
        let j = numerical_jacobian(|x| a * x, &Vector3::new(0.1, 0.2, -0.5), FD_STEP_DEFAULT);
        assert!(max_abs_diff(&j, &a) < 1e-8);
    }

    #[test]
    fn rotation_from_matrix_validates_defect() {
        let mut m = rot_z(0.3);
        m[(0, 0)] += 1e-6;
        match Rotation::from_matrix(m) {
            Err(GeometryError::NotARotation { .. }) => {}
            other => panic!("expected NotARotation, got {other:?}"),
        }
    }

    #[test]
    fn interpolate_toward_endpoints() {
        let a = Rotation::from_axis_angle(&Vector3::new(1.0, 2.0, 0.5), 0.4);
        let b = Rotation::from_axis_angle(&Vector3::new(-0.3, 1.0, 0.8), 1.2);
        assert!(a.interpolate_toward(&b, 0.0).matrix_distance(&a) < 1e-12);
        assert!(a.interpolate_toward(&b, 1.0).matrix_distance(&b) < 1e-12);
        // Halfway point is equidistant from both ends.
        let mid = a.interpolate_toward(&b, 0.5);
        assert_abs_diff_eq!(mid.angle_to(&a), mid.angle_to(&b), epsilon = 1e-9);
    }

    #[test]
    fn quaternion_roundtrip_is_canonical() {
        let r = Rotation::from_axis_angle(&Vector3::new(0.2, -1.0, 0.4), 2.9);
        let q = r.to_unit_quaternion();
        assert!(q.w >= 0.0);
        let back = Rotation::from_unit_quaternion(&q);
        assert!(r.matrix_distance(&back) < 1e-12);
    }

    fn rot_x(angle: f64) -> Matrix3<f64> {
        Rotation3::from_axis_angle(&Vector3::x_axis(), angle)
            .matrix()
            .to_owned()
    }

    fn arb_matrix() -> impl Strategy<Value = Matrix3<f64>> {
        proptest::array::uniform9(-2.0f64..2.0).prop_map(|v| Matrix3::from_row_slice(&v))
    }

    fn arb_rotation() -> impl Strategy<Value = Matrix3<f64>> {
        (
            proptest::array::uniform3(-1.0f64..1.0),
            0.0f64..std::f64::consts::TAU,
        )
            .prop_filter_map("zero axis", |(axis, angle)| {
                let axis = Vector3::from(axis);
                (axis.norm() > 1e-3).then(|| {
                    Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(axis), angle)
                        .matrix()
                        .to_owned()
                })
            })
    }

    proptest! {
        #[test]
        fn polar_is_always_a_proper_rotation(j in arb_matrix()) {
            prop_assume!(j.determinant().abs() > 1e-6);
            let r = polar_rotation(&j).unwrap();
            prop_assert!(r.defect() <= ROTATION_TOL);
        }

        #[test]
        fn polar_left_rotation_equivariance(j in arb_matrix(), r0 in arb_rotation()) {
            prop_assume!(j.determinant().abs() > 1e-6);
            // Guard against near-degenerate singular value splits where the
            // polar factor itself is ill-conditioned.
            let sv = j.svd(false, false).singular_values;
            prop_assume!(sv[2] > 1e-3 * sv[0]);
            let lhs = polar_rotation(&(r0 * j)).unwrap();
            let rhs = Rotation::from_matrix(r0).unwrap() * polar_rotation(&j).unwrap();
            prop_assert!(max_abs_diff(lhs.matrix(), rhs.matrix()) <= 1e-8);
        }

        #[test]
        fn polar_is_idempotent_on_rotations(j in arb_matrix()) {
            prop_assume!(j.determinant().abs() > 1e-6);
            let once = polar_rotation(&j).unwrap();
            let twice = polar_rotation(once.matrix()).unwrap();
            prop_assert!(max_abs_diff(once.matrix(), twice.matrix()) <= 1e-12);
        }

        // Frobenius-closest means tr(RᵀJ) is maximal over SO(3); spot-check
        // against random competitors, covering the det < 0 sign correction.
        #[test]
        fn polar_beats_random_rotations(j in arb_matrix(), competitors in
            proptest::collection::vec((proptest::array::uniform3(-1.0f64..1.0),
                0.0f64..std::f64::consts::TAU), 32)) {
            prop_assume!(j.determinant().abs() > 1e-6);
            let best = polar_rotation(&j).unwrap();
            let score = (best.matrix().transpose() * j).trace();
            for (axis, angle) in competitors {
                let axis = Vector3::from(axis);
                prop_assume!(axis.norm() > 1e-3);
                let r = Rotation::from_axis_angle(&axis, angle);
                prop_assert!(score >= (r.matrix().transpose() * j).trace() - 1e-9);
            }
        }
    }
}
