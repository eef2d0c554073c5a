//! Small rotation helpers shared by the factors, the prior and the generator.
//!
//! Quaternions follow the Hamilton convention and rotate body vectors into
//! the world frame. Perturbations are applied on the right:
//! `q ⊕ δθ = q ⊗ Exp(δθ)`.

use nalgebra::{Matrix3, Matrix4, Quaternion, UnitQuaternion, Vector3, Vector4};

/// Skew-symmetric cross-product matrix, `skew(a) * b == a.cross(b)`.
pub fn skew(a: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -a.z, a.y, a.z, 0.0, -a.x, -a.y, a.x, 0.0)
}

/// Exact exponential map from a rotation vector to a unit quaternion.
pub fn exp_q(phi: &Vector3<f64>) -> UnitQuaternion<f64> {
    UnitQuaternion::from_scaled_axis(*phi)
}

/// Logarithm of a unit quaternion as a rotation vector in `[-π, π]`.
pub fn log_q(q: &UnitQuaternion<f64>) -> Vector3<f64> {
    q.scaled_axis()
}

/// Right perturbation followed by renormalization.
pub fn retract_q(q: &UnitQuaternion<f64>, dtheta: &Vector3<f64>) -> UnitQuaternion<f64> {
    UnitQuaternion::new_normalize(q.into_inner() * exp_q(dtheta).into_inner())
}

/// `2·vec(q)` after flipping `q` into the `w ≥ 0` hemisphere.
pub fn twice_vec(q: &Quaternion<f64>) -> Vector3<f64> {
    let q = canonical(q);
    2.0 * q.imag()
}

/// Sign-canonical representative (`w ≥ 0`).
pub fn canonical(q: &Quaternion<f64>) -> Quaternion<f64> {
    if q.w < 0.0 {
        -*q
    } else {
        *q
    }
}

/// Left multiplication matrix in `[w, x, y, z]` order: `q ⊗ p = left(q) · p`.
pub fn q_left(q: &Quaternion<f64>) -> Matrix4<f64> {
    let (w, x, y, z) = (q.w, q.i, q.j, q.k);
    Matrix4::new(
        w, -x, -y, -z, //
        x, w, -z, y, //
        y, z, w, -x, //
        z, -y, x, w,
    )
}

/// Right multiplication matrix in `[w, x, y, z]` order: `p ⊗ q = right(q) · p`.
pub fn q_right(q: &Quaternion<f64>) -> Matrix4<f64> {
    let (w, x, y, z) = (q.w, q.i, q.j, q.k);
    Matrix4::new(
        w, -x, -y, -z, //
        x, w, z, -y, //
        y, -z, w, x, //
        z, y, -x, w,
    )
}

/// `[w, x, y, z]` coefficient vector.
pub fn wxyz(q: &Quaternion<f64>) -> Vector4<f64> {
    Vector4::new(q.w, q.i, q.j, q.k)
}

/// Lower-right 3×3 block of a 4×4 quaternion product matrix.
pub fn vec_block(m: &Matrix4<f64>) -> Matrix3<f64> {
    m.fixed_view::<3, 3>(1, 1).into_owned()
}

/// Right Jacobian of SO(3): `Exp(φ + δ) ≈ Exp(φ) Exp(Jr(φ) δ)`.
pub fn right_jacobian(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = phi.norm_squared();
    let k = skew(phi);
    if theta2 < 1e-10 {
        return Matrix3::identity() - 0.5 * k + (1.0 / 6.0) * k * k;
    }
    let theta = theta2.sqrt();
    Matrix3::identity() - (1.0 - theta.cos()) / theta2 * k
        + (theta - theta.sin()) / (theta2 * theta) * k * k
}

#[cfg(test)]
mod tests {
    use super::*;

    fn q(w: f64, x: f64, y: f64, z: f64) -> Quaternion<f64> {
        Quaternion::new(w, x, y, z)
    }

    #[test]
    fn product_matrices_agree_with_multiplication() {
        let a = q(0.3, -0.2, 0.7, 0.1);
        let b = q(-0.5, 0.4, 0.2, 0.9);
        let ab = wxyz(&(a * b));
        assert!((q_left(&a) * wxyz(&b) - ab).norm() < 1e-15);
        assert!((q_right(&b) * wxyz(&a) - ab).norm() < 1e-15);
    }

    #[test]
    fn right_jacobian_matches_finite_difference() {
        let phi = Vector3::new(0.4, -0.9, 0.3);
        let jr = right_jacobian(&phi);
        let base = exp_q(&phi);
        let h = 1e-6;
        for k in 0..3 {
            let mut d = Vector3::zeros();
            d[k] = h;
            let plus = log_q(&(base.inverse() * exp_q(&(phi + d))));
            let minus = log_q(&(base.inverse() * exp_q(&(phi - d))));
            let col = (plus - minus) / (2.0 * h);
            assert!((col - jr.column(k)).norm() < 1e-8);
        }
    }

    #[test]
    fn skew_is_cross_product() {
        let a = Vector3::new(1.0, 2.0, 3.0);
        let b = Vector3::new(-0.5, 0.25, 4.0);
        assert_eq!(skew(&a) * b, a.cross(&b));
    }
}
