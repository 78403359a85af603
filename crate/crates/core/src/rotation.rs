//! Continuous 6-D rotation encoding and small rotation helpers.
//!
//! A rotation is stored as its first two matrix columns. Decoding runs
//! Gram-Schmidt on the two stored vectors and completes the frame with a cross
//! product, so every non-degenerate 6-vector maps to a proper rotation.

#[allow(unused_imports)]
use num_traits::Float;

use nalgebra::{Matrix3, Rotation3, Vector3};

use crate::error::{Error, Result};

/// Norm below which a 6-D rotation column counts as zero.
pub const DEGENERATE_NORM: f64 = 1e-8;

/// First two columns of a rotation matrix, `[c0.x, c0.y, c0.z, c1.x, c1.y, c1.z]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rot6D(pub [f64; 6]);

impl Rot6D {
    pub const IDENTITY: Rot6D = Rot6D([1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);

    pub fn from_slice(v: &[f64]) -> Self {
        let mut out = [0.0; 6];
        out.copy_from_slice(&v[..6]);
        Rot6D(out)
    }
}

/// Decodes a 6-D rotation into an orthonormal matrix with determinant +1.
pub fn matrix_from_rot6d(r: &Rot6D) -> Result<Matrix3<f64>> {
    let a1 = Vector3::new(r.0[0], r.0[1], r.0[2]);
    let a2 = Vector3::new(r.0[3], r.0[4], r.0[5]);
    let n1 = a1.norm();
    if !(n1 > DEGENERATE_NORM) {
        return Err(Error::DegenerateRotation);
    }
    let b1 = a1 / n1;
    let u2 = a2 - b1 * b1.dot(&a2);
    let n2 = u2.norm();
    if !(n2 > DEGENERATE_NORM * a2.norm().max(1.0)) || !(a2.norm() > DEGENERATE_NORM) {
        return Err(Error::DegenerateRotation);
    }
    let b2 = u2 / n2;
    let b3 = b1.cross(&b2);
    Ok(Matrix3::from_columns(&[b1, b2, b3]))
}

/// Encodes a rotation matrix (orthonormal within `1e-5`) as its first two columns.
pub fn rot6d_from_matrix(m: &Matrix3<f64>) -> Result<Rot6D> {
    let dev = (m.transpose() * m - Matrix3::identity()).abs().max();
    if !(dev <= 1e-5) || !(m.determinant() > 0.0) {
        return Err(Error::NotOrthonormal { deviation: dev });
    }
    Ok(Rot6D([m[(0, 0)], m[(1, 0)], m[(2, 0)], m[(0, 1)], m[(1, 1)], m[(2, 1)]]))
}

/// Geodesic angle between two rotations, radians.
pub fn geodesic_angle(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
    let rel = a * b.transpose();
    let skew = Vector3::new(rel[(2, 1)] - rel[(1, 2)], rel[(0, 2)] - rel[(2, 0)], rel[(1, 0)] - rel[(0, 1)]);
    (skew.norm() * 0.5).atan2((rel.trace() - 1.0) * 0.5)
}

/// Rotation vector (axis times angle) of a rotation matrix.
pub fn rotation_vector(m: &Matrix3<f64>) -> Vector3<f64> {
    Rotation3::from_matrix_unchecked(*m).scaled_axis()
}

pub fn axis_angle(axis: Vector3<f64>, angle: f64) -> Matrix3<f64> {
    let n = axis.norm();
    if n < 1e-15 {
        return Matrix3::identity();
    }
    Rotation3::from_axis_angle(&nalgebra::Unit::new_unchecked(axis / n), angle).into_inner()
}

pub fn rot_x(angle: f64) -> Matrix3<f64> {
    axis_angle(Vector3::x(), angle)
}

pub fn rot_y(angle: f64) -> Matrix3<f64> {
    axis_angle(Vector3::y(), angle)
}

pub fn rot_z(angle: f64) -> Matrix3<f64> {
    axis_angle(Vector3::z(), angle)
}

/// Re-orthonormalizes an approximately orthonormal matrix through its 6-D code.
pub fn project_to_rotation(m: &Matrix3<f64>) -> Matrix3<f64> {
    let code = Rot6D([m[(0, 0)], m[(1, 0)], m[(2, 0)], m[(0, 1)], m[(1, 1)], m[(2, 1)]]);
    matrix_from_rot6d(&code).unwrap_or_else(|_| Matrix3::identity())
}

/// Smooth Gram-Schmidt used inside the differentiable graph. The epsilon keeps
/// norms strictly positive so early, untrained predictions stay finite.
/// Output is a row-major 3x3 matrix whose columns are `b1, b2, b3`.
pub(crate) fn gram_schmidt_smooth(v: &[f64], eps: f64) -> [f64; 9] {
    let a1 = [v[0], v[1], v[2]];
    let a2 = [v[3], v[4], v[5]];
    let n1 = (dot(&a1, &a1) + eps).sqrt();
    let b1 = scale(&a1, 1.0 / n1);
    let d = dot(&b1, &a2);
    let u2 = sub(&a2, &scale(&b1, d));
    let n2 = (dot(&u2, &u2) + eps).sqrt();
    let b2 = scale(&u2, 1.0 / n2);
    let b3 = cross(&b1, &b2);
    [b1[0], b2[0], b3[0], b1[1], b2[1], b3[1], b1[2], b2[2], b3[2]]
}

/// Vector-Jacobian product of [`gram_schmidt_smooth`].
pub(crate) fn gram_schmidt_smooth_backward(v: &[f64], eps: f64, g: &[f64]) -> [f64; 6] {
    let a1 = [v[0], v[1], v[2]];
    let a2 = [v[3], v[4], v[5]];
    let n1 = (dot(&a1, &a1) + eps).sqrt();
    let b1 = scale(&a1, 1.0 / n1);
    let d = dot(&b1, &a2);
    let u2 = sub(&a2, &scale(&b1, d));
    let n2 = (dot(&u2, &u2) + eps).sqrt();
    let b2 = scale(&u2, 1.0 / n2);

    let col = |c: usize| [g[c], g[3 + c], g[6 + c]];
    let mut g_b1 = col(0);
    let mut g_b2 = col(1);
    let g_b3 = col(2);
    // b3 = b1 x b2
    g_b1 = add(&g_b1, &cross(&b2, &g_b3));
    g_b2 = add(&g_b2, &cross(&g_b3, &b1));
    // b2 = u2 / n2
    let g_u2 = scale(&sub(&g_b2, &scale(&b2, dot(&b2, &g_b2))), 1.0 / n2);
    // u2 = a2 - (b1 . a2) b1
    let bg = dot(&b1, &g_u2);
    let g_a2 = sub(&g_u2, &scale(&b1, bg));
    g_b1 = sub(&g_b1, &add(&scale(&g_u2, d), &scale(&a2, bg)));
    // b1 = a1 / n1
    let g_a1 = scale(&sub(&g_b1, &scale(&b1, dot(&b1, &g_b1))), 1.0 / n1);
    [g_a1[0], g_a1[1], g_a1[2], g_a2[0], g_a2[1], g_a2[2]]
}

#[inline]
fn dot(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
fn scale(a: &[f64; 3], s: f64) -> [f64; 3] {
    [a[0] * s, a[1] * s, a[2] * s]
}

#[inline]
fn add(a: &[f64; 3], b: &[f64; 3]) -> [f64; 3] {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
fn sub(a: &[f64; 3], b: &[f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
fn cross(a: &[f64; 3], b: &[f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_rotation(rng: &mut ChaCha8Rng) -> Matrix3<f64> {
        // uniform quaternion
        let (u1, u2, u3): (f64, f64, f64) = (rng.random(), rng.random(), rng.random());
        let tau = core::f64::consts::TAU;
        let q = nalgebra::Quaternion::new(
            (1.0 - u1).sqrt() * (tau * u2).sin(),
            (1.0 - u1).sqrt() * (tau * u2).cos(),
            u1.sqrt() * (tau * u3).sin(),
            u1.sqrt() * (tau * u3).cos(),
        );
        nalgebra::UnitQuaternion::from_quaternion(q).to_rotation_matrix().into_inner()
    }

    #[test]
    fn identity_code_decodes_to_identity() {
        let m = matrix_from_rot6d(&Rot6D::IDENTITY).unwrap();
        assert!((m - Matrix3::identity()).abs().max() < 1e-15);
        let scaled = matrix_from_rot6d(&Rot6D([2.0, 0.0, 0.0, 0.0, 3.0, 0.0])).unwrap();
        assert!((scaled - Matrix3::identity()).abs().max() < 1e-15);
    }

    #[test]
    fn quarter_turn_about_z() {
        let m = matrix_from_rot6d(&Rot6D([0.0, 1.0, 0.0, -1.0, 0.0, 0.0])).unwrap();
        // closed-form axis-angle matrix for +90 deg about Z
        let want = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        assert!((m - want).abs().max() < 1e-15);
        assert!((m - rot_z(core::f64::consts::FRAC_PI_2)).abs().max() < 1e-15);
        let code = rot6d_from_matrix(&want).unwrap();
        assert_eq!(code.0, [0.0, 1.0, 0.0, -1.0, 0.0, 0.0]);
    }

    #[test]
    fn degenerate_inputs_are_rejected() {
        assert_eq!(matrix_from_rot6d(&Rot6D([0.0; 6])), Err(Error::DegenerateRotation));
        assert_eq!(matrix_from_rot6d(&Rot6D([1.0, 0.0, 0.0, 2.0, 0.0, 0.0])), Err(Error::DegenerateRotation));
        assert_eq!(matrix_from_rot6d(&Rot6D([1.0, 0.0, 0.0, 0.0, 0.0, 0.0])), Err(Error::DegenerateRotation));
    }

    #[test]
    fn non_orthonormal_matrix_is_rejected() {
        let m = Matrix3::new(1.0, 0.1, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0);
        assert!(matches!(rot6d_from_matrix(&m), Err(Error::NotOrthonormal { .. })));
        assert!(rot6d_from_matrix(&(-Matrix3::identity())).is_err());
    }

    #[test]
    fn random_round_trip_is_tight() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let m = random_rotation(&mut rng);
            let back = matrix_from_rot6d(&rot6d_from_matrix(&m).unwrap()).unwrap();
            assert!((back - m).abs().max() < 1e-6);
            assert!((back.determinant() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn smooth_decode_matches_exact_decode() {
        let v = [0.3, -1.2, 0.5, 0.9, 0.1, -0.4];
        let exact = matrix_from_rot6d(&Rot6D(v)).unwrap();
        let smooth = gram_schmidt_smooth(&v, 0.0);
        for r in 0..3 {
            for c in 0..3 {
                assert!((exact[(r, c)] - smooth[r * 3 + c]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn smooth_decode_backward_matches_finite_differences() {
        let v = [0.3, -1.2, 0.5, 0.9, 0.1, -0.4];
        let g = [0.7, -0.2, 0.1, 0.4, 0.9, -0.6, 0.3, 0.2, -0.8];
        let f = |x: &[f64]| -> f64 { gram_schmidt_smooth(x, 1e-8).iter().zip(&g).map(|(a, b)| a * b).sum() };
        let analytic = gram_schmidt_smooth_backward(&v, 1e-8, &g);
        for i in 0..6 {
            let h = 1e-6;
            let mut p = v;
            p[i] += h;
            let mut m = v;
            m[i] -= h;
            let numeric = (f(&p) - f(&m)) / (2.0 * h);
            assert!((numeric - analytic[i]).abs() < 1e-8, "{i}: {numeric} vs {}", analytic[i]);
        }
    }

    #[test]
    fn geodesic_angle_of_known_rotation() {
        let a = rot_x(0.3);
        assert!((geodesic_angle(&a, &Matrix3::identity()) - 0.3).abs() < 1e-12);
        assert_eq!(geodesic_angle(&a, &a), 0.0);
    }
}
