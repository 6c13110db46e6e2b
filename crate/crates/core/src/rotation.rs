//! SO(3) helpers: exponential/log maps, left Jacobian and quaternion conversion.

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};

use crate::scalar::Real;

pub fn skew<T: Real>(v: &Vector3<T>) -> Matrix3<T> {
    Matrix3::new(
        T::zero(),
        -v.z,
        v.y,
        v.z,
        T::zero(),
        -v.x,
        -v.y,
        v.x,
        T::zero(),
    )
}

/// Rodrigues' formula. Small angles use the second order series.
pub fn exp_so3<T: Real>(w: &Vector3<T>) -> Matrix3<T> {
    let theta2 = w.norm_squared();
    let k = skew(w);
    let (a, b) = if theta2 < T::lit(1e-12) {
        (T::one() - theta2 / T::lit(6.0), T::lit(0.5) - theta2 / T::lit(24.0))
    } else {
        let theta = theta2.sqrt();
        (theta.sin() / theta, (T::one() - theta.cos()) / theta2)
    };
    Matrix3::identity() + k * a + k * k * b
}

/// Axis-angle vector of a rotation matrix, angle in `[0, pi]`.
pub fn log_so3<T: Real>(r: &Matrix3<T>) -> Vector3<T> {
    let rot = nalgebra::Rotation3::from_matrix_unchecked(*r);
    UnitQuaternion::from_rotation_matrix(&rot).scaled_axis()
}

/// Left Jacobian `J` with `exp(w + e) = exp(J e) exp(w)` to first order in `e`.
pub fn left_jacobian_so3<T: Real>(w: &Vector3<T>) -> Matrix3<T> {
    let theta2 = w.norm_squared();
    let k = skew(w);
    let (a, b) = if theta2 < T::lit(1e-10) {
        (T::lit(0.5) - theta2 / T::lit(24.0), T::lit(1.0 / 6.0) - theta2 / T::lit(120.0))
    } else {
        let theta = theta2.sqrt();
        (
            (T::one() - theta.cos()) / theta2,
            (theta - theta.sin()) / (theta2 * theta),
        )
    };
    Matrix3::identity() + k * a + k * k * b
}

/// Rotation matrix of a `[w, x, y, z]` quaternion; the input is normalized.
pub fn quat_to_matrix<T: Real>(q: &[T; 4]) -> Matrix3<T> {
    let uq = UnitQuaternion::from_quaternion(Quaternion::new(q[0], q[1], q[2], q[3]));
    uq.to_rotation_matrix().into_inner()
}

pub fn matrix_to_quat<T: Real>(r: &Matrix3<T>) -> [T; 4] {
    let rot = nalgebra::Rotation3::from_matrix_unchecked(*r);
    let q = UnitQuaternion::from_rotation_matrix(&rot);
    [q.w, q.i, q.j, q.k]
}

/// Orthonormality and determinant check used by invariants.
pub fn is_rotation<T: Real>(r: &Matrix3<T>, tol: f64) -> bool {
    let e = (r.transpose() * r - Matrix3::identity()).abs().max();
    e.as_f64() <= tol && (r.determinant().as_f64() - 1.0).abs() <= tol
}
