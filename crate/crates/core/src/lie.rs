//! SO(3) / SE(3) helpers.
//!
//! Twists are 6-vectors ordered rotation first, translation second:
//! `(ω, v)`. Updates are applied on the left, `exp(δ) · P`.

use nalgebra::{Matrix3, Matrix6, Vector3, Vector6};

pub type Twist = Vector6<f64>;

pub fn skew(w: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -w.z, w.y, w.z, 0.0, -w.x, -w.y, w.x, 0.0)
}

/// Rodrigues' formula. Returns the exact identity for a zero vector.
pub fn so3_exp(w: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = w.norm_squared();
    if theta2 == 0.0 {
        return Matrix3::identity();
    }
    let k = skew(w);
    let (a, b) = if theta2 < 1e-8 {
        (1.0 - theta2 / 6.0, 0.5 - theta2 / 24.0)
    } else {
        let theta = theta2.sqrt();
        (theta.sin() / theta, (1.0 - theta.cos()) / theta2)
    };
    Matrix3::identity() + k * a + k * k * b
}

/// Left Jacobian of SO(3); maps the translation part of a twist to the
/// translation of `exp`.
pub fn so3_left_jacobian(w: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = w.norm_squared();
    let k = skew(w);
    let (b, c) = if theta2 < 1e-8 {
        (0.5 - theta2 / 24.0, 1.0 / 6.0 - theta2 / 120.0)
    } else {
        let theta = theta2.sqrt();
        (
            (1.0 - theta.cos()) / theta2,
            (theta - theta.sin()) / (theta2 * theta),
        )
    };
    Matrix3::identity() + k * b + k * k * c
}

/// Rotation angle of a rotation matrix, in radians.
pub fn rotation_angle(r: &Matrix3<f64>) -> f64 {
    // acos is ill-conditioned near zero; use the skew part as well.
    let s = Vector3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]).norm() * 0.5;
    let c = (r.trace() - 1.0) * 0.5;
    s.atan2(c)
}

/// SO(3) logarithm, inverse of [`so3_exp`] for angles below π.
pub fn so3_log(r: &Matrix3<f64>) -> Vector3<f64> {
    let theta = rotation_angle(r);
    let v = Vector3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]);
    if theta < 1e-10 {
        return v * 0.5;
    }
    v * (theta / (2.0 * theta.sin()))
}

/// `exp` of an se(3) twist, returned as `(R, t)`.
pub fn se3_exp(xi: &Twist) -> (Matrix3<f64>, Vector3<f64>) {
    let w = Vector3::new(xi[0], xi[1], xi[2]);
    let v = Vector3::new(xi[3], xi[4], xi[5]);
    (so3_exp(&w), so3_left_jacobian(&w) * v)
}

/// Adjoint (small `ad`) of a twist in `(ω, v)` ordering.
pub fn se3_ad(xi: &Twist) -> Matrix6<f64> {
    let w = skew(&Vector3::new(xi[0], xi[1], xi[2]));
    let v = skew(&Vector3::new(xi[3], xi[4], xi[5]));
    let mut ad = Matrix6::zeros();
    ad.fixed_view_mut::<3, 3>(0, 0).copy_from(&w);
    ad.fixed_view_mut::<3, 3>(3, 0).copy_from(&v);
    ad.fixed_view_mut::<3, 3>(3, 3).copy_from(&w);
    ad
}

/// Left Jacobian of SE(3): `exp(δ + dδ) ≈ exp(J(δ) dδ) · exp(δ)`.
///
/// Evaluated with the power series `Σ adᵏ / (k+1)!`, which converges fast for
/// the small increments a Gauss-Newton step produces.
pub fn se3_left_jacobian(xi: &Twist) -> Matrix6<f64> {
    let ad = se3_ad(xi);
    let mut acc = Matrix6::identity();
    let mut term = Matrix6::identity();
    for k in 1..40 {
        term = term * ad / (k as f64 + 1.0);
        acc += term;
        if term.abs().max() < 1e-18 {
            break;
        }
    }
    acc
}

/// Nearest rotation in the Frobenius sense (SVD projection onto SO(3)).
pub fn project_to_so3(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let u = svd.u.expect("u requested");
    let vt = svd.v_t.expect("v_t requested");
    let mut r = u * vt;
    if r.determinant() < 0.0 {
        let mut d = Matrix3::identity();
        d[(2, 2)] = -1.0;
        r = u * d * vt;
    }
    r
}
