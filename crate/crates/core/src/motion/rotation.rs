//! Rotation conversions used by the feature pipeline.
//!
//! Conventions: column vectors, right-handed frames, angles in radians
//! unless a function says otherwise. The 6D representation stores the first
//! two columns of the rotation matrix, column-major.

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3};

use crate::error::{Error, Result};

/// Tolerance below which a 6D column is treated as degenerate.
const DEGENERATE_EPS: f64 = 1e-9;

pub fn rotmat_to_6d(r: &Matrix3<f64>) -> [f64; 6] {
    [r[(0, 0)], r[(1, 0)], r[(2, 0)], r[(0, 1)], r[(1, 1)], r[(2, 1)]]
}

/// Rebuilds a rotation from two (not necessarily orthonormal) columns by
/// Gram-Schmidt; the third column is their cross product.
pub fn sixd_to_rotmat(v: &[f64]) -> Result<Matrix3<f64>> {
    if v.len() != 6 {
        return Err(Error::structural(format!(
            "6D rotation needs 6 values, got {}",
            v.len()
        )));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::numeric("non-finite 6D rotation"));
    }
    let a1 = Vector3::new(v[0], v[1], v[2]);
    let a2 = Vector3::new(v[3], v[4], v[5]);
    let n1 = a1.norm();
    if n1 < DEGENERATE_EPS {
        return Err(Error::numeric("degenerate 6D rotation: zero first column"));
    }
    let b1 = a1 / n1;
    let u = a2 - b1 * b1.dot(&a2);
    let nu = u.norm();
    if nu < DEGENERATE_EPS * a2.norm().max(1.0) {
        return Err(Error::numeric(
            "degenerate 6D rotation: columns parallel or second column zero",
        ));
    }
    let b2 = u / nu;
    let b3 = b1.cross(&b2);
    Ok(Matrix3::from_columns(&[b1, b2, b3]))
}

/// Projects a 6D vector onto the nearest valid representation.
pub fn orthonormalize_6d(v: &[f64]) -> Result<[f64; 6]> {
    Ok(rotmat_to_6d(&sixd_to_rotmat(v)?))
}

/// Quaternion as `[w, x, y, z]`.
pub fn rotmat_to_quat(r: &Matrix3<f64>) -> [f64; 4] {
    let q = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(*r));
    [q.w, q.i, q.j, q.k]
}

pub fn quat_to_rotmat(q: &[f64]) -> Result<Matrix3<f64>> {
    if q.len() != 4 {
        return Err(Error::structural("quaternion needs 4 values"));
    }
    let quat = nalgebra::Quaternion::new(q[0], q[1], q[2], q[3]);
    let n = quat.norm();
    if !n.is_finite() || n < DEGENERATE_EPS {
        return Err(Error::numeric("degenerate quaternion"));
    }
    Ok(*UnitQuaternion::from_quaternion(quat)
        .to_rotation_matrix()
        .matrix())
}

/// Rotation vector (axis times angle) of `r`.
pub fn log_map(r: &Matrix3<f64>) -> Vector3<f64> {
    Rotation3::from_matrix_unchecked(*r).scaled_axis()
}

/// Axis-angle rate of `to` relative to `from` divided by `frames`,
/// i.e. the spatial angular velocity taking `from` to `to`.
///
/// Identical inputs yield an exact zero vector.
pub fn angular_velocity(from: &Matrix3<f64>, to: &Matrix3<f64>, frames: f64) -> Vector3<f64> {
    if from == to {
        return Vector3::zeros();
    }
    log_map(&(to * from.transpose())) / frames
}

pub fn rot_x(a: f64) -> Matrix3<f64> {
    *Rotation3::from_axis_angle(&Vector3::x_axis(), a).matrix()
}

pub fn rot_y(a: f64) -> Matrix3<f64> {
    *Rotation3::from_axis_angle(&Vector3::y_axis(), a).matrix()
}

pub fn rot_z(a: f64) -> Matrix3<f64> {
    *Rotation3::from_axis_angle(&Vector3::z_axis(), a).matrix()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    pub fn rotation(self, angle: f64) -> Matrix3<f64> {
        match self {
            Axis::X => rot_x(angle),
            Axis::Y => rot_y(angle),
            Axis::Z => rot_z(angle),
        }
    }
}

/// Composes intrinsic Euler rotations in the listed order (BVH convention):
/// `order = [Z, Y, X]` gives `Rz(a0) * Ry(a1) * Rx(a2)`.
pub fn euler_to_rotmat(order: &[Axis], angles_deg: &[f64]) -> Matrix3<f64> {
    order
        .iter()
        .zip(angles_deg)
        .fold(Matrix3::identity(), |acc, (axis, deg)| {
            acc * axis.rotation(deg.to_radians())
        })
}

/// Decomposes `r = Rz(z) * Ry(y) * Rx(x)`, returning degrees `[z, y, x]`.
pub fn rotmat_to_euler_zyx(r: &Matrix3<f64>) -> [f64; 3] {
    let sy = (-r[(2, 0)]).clamp(-1.0, 1.0);
    let y = sy.asin();
    let (z, x) = if sy.abs() < 1.0 - 1e-12 {
        (r[(1, 0)].atan2(r[(0, 0)]), r[(2, 1)].atan2(r[(2, 2)]))
    } else {
        // gimbal lock: fold everything into z
        ((-r[(0, 1)]).atan2(r[(1, 1)]), 0.0)
    };
    [z.to_degrees(), y.to_degrees(), x.to_degrees()]
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_rotation(rng: &mut impl Rng) -> Matrix3<f64> {
        // Shoemake's uniform quaternion sampling.
        let (u1, u2, u3): (f64, f64, f64) = (rng.random(), rng.random(), rng.random());
        let tau = std::f64::consts::TAU;
        let q = [
            (1.0 - u1).sqrt() * (tau * u2).sin(),
            (1.0 - u1).sqrt() * (tau * u2).cos(),
            u1.sqrt() * (tau * u3).sin(),
            u1.sqrt() * (tau * u3).cos(),
        ];
        quat_to_rotmat(&q).unwrap()
    }

    #[test]
    fn identity_maps_to_canonical_6d() {
        let v = rotmat_to_6d(&Matrix3::identity());
        assert_eq!(v, [1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        assert_eq!(sixd_to_rotmat(&v).unwrap(), Matrix3::identity());
    }

    #[test]
    fn quarter_turn_about_z_round_trips() {
        let analytic = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        let back = sixd_to_rotmat(&rotmat_to_6d(&analytic)).unwrap();
        assert!((back - analytic).norm() < 1e-6);
        assert!((rot_z(std::f64::consts::FRAC_PI_2) - analytic).norm() < 1e-12);
    }

    #[test]
    fn thousand_uniform_rotations_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let r = random_rotation(&mut rng);
            let back = sixd_to_rotmat(&rotmat_to_6d(&r)).unwrap();
            assert!((back - r).norm() < 1e-6);
        }
    }

    #[test]
    fn degenerate_6d_is_rejected() {
        assert!(matches!(
            sixd_to_rotmat(&[0.0; 6]),
            Err(Error::Numeric(_))
        ));
        assert!(matches!(
            sixd_to_rotmat(&[1.0, 0.0, 0.0, 2.0, 0.0, 0.0]),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn euler_zyx_round_trip() {
        let r = euler_to_rotmat(&[Axis::Z, Axis::Y, Axis::X], &[30.0, -20.0, 75.0]);
        let e = rotmat_to_euler_zyx(&r);
        assert!((e[0] - 30.0).abs() < 1e-9);
        assert!((e[1] + 20.0).abs() < 1e-9);
        assert!((e[2] - 75.0).abs() < 1e-9);
    }

    #[test]
    fn angular_velocity_of_identical_frames_is_exactly_zero() {
        let r = rot_x(0.3) * rot_y(1.1);
        assert_eq!(angular_velocity(&r, &r, 2.0), Vector3::zeros());
    }

    proptest! {
        #[test]
        fn sixd_output_is_a_rotation(v in proptest::array::uniform6(-5.0f64..5.0)) {
            if let Ok(r) = sixd_to_rotmat(&v) {
                prop_assert!((r.transpose() * r - Matrix3::identity()).norm() < 1e-9);
                prop_assert!((r.determinant() - 1.0).abs() < 1e-9);
            }
        }

        #[test]
        fn quaternion_round_trip(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let r = random_rotation(&mut rng);
            let back = quat_to_rotmat(&rotmat_to_quat(&r)).unwrap();
            prop_assert!((back - r).norm() < 1e-9);
        }
    }
}
