//! Rotation algebra: Rodrigues map and its inverse, the continuous 6D
//! representation, and geodesic distance on SO(3).

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};

/// Orthonormality tolerance used when validating rotation matrices.
pub const ROTATION_TOL: f64 = 1e-6;

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Inverse of [`skew`] applied to the antisymmetric part of `m`.
pub fn vee(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(
        0.5 * (m[(2, 1)] - m[(1, 2)]),
        0.5 * (m[(0, 2)] - m[(2, 0)]),
        0.5 * (m[(1, 0)] - m[(0, 1)]),
    )
}

/// Coefficients of R = I + a K + b K^2 and their scaled derivatives
/// c = a'(t)/t, d = b'(t)/t, with series expansions near zero.
fn rodrigues_coefficients(theta_sq: f64) -> (f64, f64, f64, f64) {
    let theta = theta_sq.sqrt();
    if theta < 1e-2 {
        let t2 = theta_sq;
        let t4 = t2 * t2;
        (
            1.0 - t2 / 6.0 + t4 / 120.0,
            0.5 - t2 / 24.0 + t4 / 720.0,
            -1.0 / 3.0 + t2 / 30.0 - t4 / 840.0,
            -1.0 / 12.0 + t2 / 180.0 - t4 / 6720.0,
        )
    } else {
        let (s, c) = theta.sin_cos();
        let t3 = theta_sq * theta;
        (
            s / theta,
            (1.0 - c) / theta_sq,
            (theta * c - s) / t3,
            (theta * s - 2.0 * (1.0 - c)) / (theta_sq * theta_sq),
        )
    }
}

/// Rodrigues map from an axis-angle vector to a rotation matrix.
pub fn axis_angle_to_matrix(a: &Vector3<f64>) -> Matrix3<f64> {
    let theta_sq = a.norm_squared();
    if theta_sq == 0.0 {
        return Matrix3::identity();
    }
    let (ca, cb, _, _) = rodrigues_coefficients(theta_sq);
    let k = skew(a);
    Matrix3::identity() + k * ca + (k * k) * cb
}

/// Rotation matrix together with its partial derivatives with respect to each
/// axis-angle component.
pub fn axis_angle_to_matrix_with_jacobian(a: &Vector3<f64>) -> (Matrix3<f64>, [Matrix3<f64>; 3]) {
    let theta_sq = a.norm_squared();
    let (ca, cb, cc, cd) = rodrigues_coefficients(theta_sq);
    let k = skew(a);
    let k2 = k * k;
    let rot = if theta_sq == 0.0 {
        Matrix3::identity()
    } else {
        Matrix3::identity() + k * ca + k2 * cb
    };
    let radial = k * cc + k2 * cd;
    let jac = std::array::from_fn(|i| {
        let e = skew(&Vector3::ith(i, 1.0));
        e * ca + (e * k + k * e) * cb + radial * a[i]
    });
    (rot, jac)
}

/// Contracts an upstream gradient on a rotation matrix down to the gradient on
/// its axis-angle parameters.
pub fn axis_angle_backward(a: &Vector3<f64>, d_rot: &Matrix3<f64>) -> Vector3<f64> {
    let (_, jac) = axis_angle_to_matrix_with_jacobian(a);
    Vector3::new(
        jac[0].component_mul(d_rot).sum(),
        jac[1].component_mul(d_rot).sum(),
        jac[2].component_mul(d_rot).sum(),
    )
}

pub fn check_rotation(r: &Matrix3<f64>) -> Result<()> {
    if !r.iter().all(|v| v.is_finite()) {
        return Err(Error::InvalidRotation("non-finite entries".into()));
    }
    let dev = (r.transpose() * r - Matrix3::identity()).abs().max();
    if dev > ROTATION_TOL {
        return Err(Error::InvalidRotation(format!(
            "not orthonormal (deviation {dev:.3e})"
        )));
    }
    if r.determinant() <= 0.0 {
        return Err(Error::InvalidRotation("determinant is not +1".into()));
    }
    Ok(())
}

/// Principal-branch inverse of the Rodrigues map; the returned angle lies in [0, pi].
pub fn matrix_to_axis_angle(r: &Matrix3<f64>) -> Result<Vector3<f64>> {
    check_rotation(r)?;
    let cos = ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let w = vee(r);
    let sin = w.norm();
    let theta = sin.atan2(cos);
    if theta < 1e-4 {
        let t2 = theta * theta;
        return Ok(w * (1.0 + t2 / 6.0 + 7.0 * t2 * t2 / 360.0));
    }
    if theta < std::f64::consts::PI - 1e-3 {
        return Ok(w * (theta / sin));
    }
    // Near pi the antisymmetric part vanishes; recover the axis from the
    // symmetric part (1 - cos) n n^T and take the sign from w.
    let sym = (r + r.transpose()) * 0.5 - Matrix3::identity() * cos;
    let one_minus_cos = 1.0 - cos;
    let i = (0..3)
        .max_by(|&x, &y| sym[(x, x)].total_cmp(&sym[(y, y)]))
        .unwrap_or(0);
    let ni = (sym[(i, i)] / one_minus_cos).max(0.0).sqrt();
    let mut axis: Vector3<f64> = sym.column(i) / (ni * one_minus_cos);
    axis.normalize_mut();
    if axis.dot(&w) < 0.0 {
        axis = -axis;
    }
    Ok(axis * theta)
}

/// Either representation accepted by [`axis_angle_convert`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RotationRepr {
    AxisAngle(Vector3<f64>),
    Matrix(Matrix3<f64>),
}

/// Converts axis-angle to matrix and matrix to axis-angle.
pub fn axis_angle_convert(input: RotationRepr) -> Result<RotationRepr> {
    match input {
        RotationRepr::AxisAngle(a) => Ok(RotationRepr::Matrix(axis_angle_to_matrix(&a))),
        RotationRepr::Matrix(m) => matrix_to_axis_angle(&m).map(RotationRepr::AxisAngle),
    }
}

/// Gram-Schmidt orthonormalization of the 6D representation. The first three
/// entries are the first matrix column, the last three the second column.
pub fn rot6d_to_matrix(r: &[f64; 6]) -> Result<Matrix3<f64>> {
    let a1 = Vector3::new(r[0], r[1], r[2]);
    let a2 = Vector3::new(r[3], r[4], r[5]);
    let n1 = a1.norm();
    if !(n1 > 1e-12) {
        return Err(Error::InvalidRotation("first 6D column is zero".into()));
    }
    let b1 = a1 / n1;
    let u2 = a2 - b1 * b1.dot(&a2);
    let n2 = u2.norm();
    if !(n2 > 1e-12 * a2.norm().max(1e-300)) || !(n2 > 0.0) {
        return Err(Error::InvalidRotation("6D columns are parallel or zero".into()));
    }
    let b2 = u2 / n2;
    let b3 = b1.cross(&b2);
    Ok(Matrix3::from_columns(&[b1, b2, b3]))
}

/// First two columns of a rotation matrix.
pub fn matrix_to_rot6d(r: &Matrix3<f64>) -> [f64; 6] {
    [
        r[(0, 0)],
        r[(1, 0)],
        r[(2, 0)],
        r[(0, 1)],
        r[(1, 1)],
        r[(2, 1)],
    ]
}

/// Angle of the relative rotation `ra * rb^T`, in radians.
///
/// Evaluated as `atan2(sin, cos)` of the relative rotation, which equals the
/// clamped arccos of `(tr - 1) / 2` but keeps full precision near 0 and pi.
pub fn rotation_geodesic(ra: &Matrix3<f64>, rb: &Matrix3<f64>) -> f64 {
    let rel = ra * rb.transpose();
    let cos = ((rel.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let sin = vee(&rel).norm().min(1.0);
    sin.atan2(cos)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn random_axis_angle(rng: &mut ChaCha8Rng, max_angle: f64) -> Vector3<f64> {
        let axis = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        )
        .normalize();
        axis * rng.random_range(0.0..max_angle)
    }

    #[test]
    fn identity_6d() {
        let m = rot6d_to_matrix(&[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap();
        assert_eq!(m, Matrix3::identity());
    }

    #[test]
    fn quarter_turn_6d() {
        let m = rot6d_to_matrix(&[0.0, 1.0, 0.0, -1.0, 0.0, 0.0]).unwrap();
        let rz = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        assert!((m - rz).abs().max() < 1e-15);
    }

    #[test]
    fn degenerate_6d() {
        assert!(rot6d_to_matrix(&[0.0; 6]).is_err());
        assert!(rot6d_to_matrix(&[1.0, 0.0, 0.0, 2.0, 0.0, 0.0]).is_err());
        assert!(rot6d_to_matrix(&[1.0, 0.0, 0.0, 0.0, 0.0, 0.0]).is_err());
    }

    #[test]
    fn rot6d_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let r = axis_angle_to_matrix(&random_axis_angle(&mut rng, PI));
            let back = rot6d_to_matrix(&matrix_to_rot6d(&r)).unwrap();
            assert!((back - r).abs().max() < 1e-12);
        }
    }

    #[test]
    fn axis_angle_examples() {
        assert_eq!(axis_angle_to_matrix(&Vector3::zeros()), Matrix3::identity());
        let m = axis_angle_to_matrix(&Vector3::new(0.0, 0.0, FRAC_PI_2));
        let rz = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        assert!((m - rz).abs().max() < 1e-15);
    }

    #[test]
    fn axis_angle_round_trip_including_edges() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut cases: Vec<Vector3<f64>> = (0..200).map(|_| random_axis_angle(&mut rng, PI)).collect();
        cases.push(Vector3::new(1e-9, -2e-9, 3e-10));
        cases.push(Vector3::new(0.0, 0.0, PI - 1e-7));
        cases.push(Vector3::new(0.3, -0.2, 0.1).normalize() * (PI - 1e-4));
        for a in cases {
            let back = matrix_to_axis_angle(&axis_angle_to_matrix(&a)).unwrap();
            assert!((back - a).norm() < 1e-10, "{a:?} -> {back:?}");
        }
    }

    #[test]
    fn rejects_non_rotation() {
        let m = Matrix3::new(1.0, 0.1, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0);
        assert!(matrix_to_axis_angle(&m).is_err());
        assert!(matrix_to_axis_angle(&-Matrix3::identity()).is_err());
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut cases: Vec<Vector3<f64>> = (0..20).map(|_| random_axis_angle(&mut rng, 3.0)).collect();
        cases.push(Vector3::zeros());
        cases.push(Vector3::new(3e-3, 1e-3, -2e-3));
        for a in cases {
            let (_, jac) = axis_angle_to_matrix_with_jacobian(&a);
            for i in 0..3 {
                let h = 1e-6;
                let mut ap = a;
                ap[i] += h;
                let mut am = a;
                am[i] -= h;
                let fd = (axis_angle_to_matrix(&ap) - axis_angle_to_matrix(&am)) / (2.0 * h);
                assert!((fd - jac[i]).abs().max() < 1e-8, "{a:?} axis {i}");
            }
        }
    }

    #[test]
    fn geodesic_examples() {
        let i = Matrix3::identity();
        assert_eq!(rotation_geodesic(&i, &i), 0.0);
        let rx = axis_angle_to_matrix(&Vector3::new(PI, 0.0, 0.0));
        assert_eq!(rotation_geodesic(&i, &rx), PI);
        let a = axis_angle_to_matrix(&Vector3::new(0.0, 0.0, 0.3));
        let b = axis_angle_to_matrix(&Vector3::new(0.0, 0.0, 0.8));
        assert!((rotation_geodesic(&a, &b) - 0.5).abs() < 1e-14);
    }

    #[test]
    fn geodesic_metric_properties() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..100 {
            let a = axis_angle_to_matrix(&random_axis_angle(&mut rng, PI));
            let b = axis_angle_to_matrix(&random_axis_angle(&mut rng, PI));
            let c = axis_angle_to_matrix(&random_axis_angle(&mut rng, PI));
            let ab = rotation_geodesic(&a, &b);
            assert!((ab - rotation_geodesic(&b, &a)).abs() < 1e-9);
            assert!(ab <= rotation_geodesic(&a, &c) + rotation_geodesic(&c, &b) + 1e-9);
        }
    }
}
