//! Rotation helpers: hat/vee, the exponential map, geodesic distance and
//! extrinsic Tait-Bryan conversions.

use nalgebra::{DMatrix, Matrix3, Rotation3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Angles closer than this to ±π/2 on the middle axis are refused.
pub const GIMBAL_TOLERANCE: f64 = 1e-6;

pub fn hat(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Inverse of [`hat`] for a skew-symmetric matrix.
pub fn vee(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(m[(2, 1)], m[(0, 2)], m[(1, 0)])
}

/// vee of the antisymmetric part `(M − Mᵀ)/2`.
pub fn skew_vee(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(
        m[(2, 1)] - m[(1, 2)],
        m[(0, 2)] - m[(2, 0)],
        m[(1, 0)] - m[(0, 1)],
    ) * 0.5
}

/// [`skew_vee`] for dynamically sized input.
pub fn skew_vee_dyn(m: &DMatrix<f64>) -> Result<Vector3<f64>> {
    if m.shape() != (3, 3) {
        return Err(Error::dim("skew_vee input rows*cols", 9, m.nrows() * m.ncols()));
    }
    Ok(skew_vee(&Matrix3::from_iterator(m.iter().cloned())))
}

/// Closed-form Rodrigues exponential of `hat(w)`.
pub fn exp(w: &Vector3<f64>) -> Rotation3<f64> {
    let theta = w.norm();
    let k = hat(w);
    let (a, b) = if theta < 1e-8 {
        (1.0 - theta * theta / 6.0, 0.5 - theta * theta / 24.0)
    } else {
        (theta.sin() / theta, (1.0 - theta.cos()) / (theta * theta))
    };
    Rotation3::from_matrix_unchecked(Matrix3::identity() + k * a + k * k * b)
}

/// Angle of the relative rotation `aᵀ b`, in `[0, π]`.
pub fn geodesic_distance(a: &Rotation3<f64>, b: &Rotation3<f64>) -> f64 {
    let rel = a.inverse() * b;
    let c = ((rel.matrix().trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    c.acos()
}

/// Orthonormality residual `max |RᵀR − I|` and determinant deviation.
pub fn orthonormality_error(r: &Matrix3<f64>) -> f64 {
    let e = (r.transpose() * r - Matrix3::identity()).abs().max();
    e.max((r.determinant() - 1.0).abs())
}

/// Axis sequence of an extrinsic Tait-Bryan parameterisation. The first
/// angle rotates about the first axis, applied first, about fixed axes:
/// `R = R_third(c) · R_second(b) · R_first(a)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EulerOrder {
    #[default]
    Xyz,
    Xzy,
    Yxz,
    Yzx,
    Zxy,
    Zyx,
}

impl EulerOrder {
    pub const ALL: [EulerOrder; 6] = [
        EulerOrder::Xyz,
        EulerOrder::Xzy,
        EulerOrder::Yxz,
        EulerOrder::Yzx,
        EulerOrder::Zxy,
        EulerOrder::Zyx,
    ];

    fn axes(self) -> [usize; 3] {
        match self {
            EulerOrder::Xyz => [0, 1, 2],
            EulerOrder::Xzy => [0, 2, 1],
            EulerOrder::Yxz => [1, 0, 2],
            EulerOrder::Yzx => [1, 2, 0],
            EulerOrder::Zxy => [2, 0, 1],
            EulerOrder::Zyx => [2, 1, 0],
        }
    }

    fn parity(self) -> f64 {
        match self {
            EulerOrder::Xyz | EulerOrder::Yzx | EulerOrder::Zxy => 1.0,
            _ => -1.0,
        }
    }
}

fn axis_rotation(axis: usize, angle: f64) -> Rotation3<f64> {
    let mut v = Vector3::zeros();
    v[axis] = angle;
    Rotation3::from_scaled_axis(v)
}

pub fn rotation_from_tait_bryan(angles: &Vector3<f64>, order: EulerOrder) -> Rotation3<f64> {
    if order == EulerOrder::Xyz {
        return Rotation3::from_euler_angles(angles.x, angles.y, angles.z);
    }
    let [i, j, k] = order.axes();
    axis_rotation(k, angles.z) * axis_rotation(j, angles.y) * axis_rotation(i, angles.x)
}

/// Extracts extrinsic Tait-Bryan angles. Errors near gimbal lock.
pub fn tait_bryan_from_rotation(r: &Rotation3<f64>, order: EulerOrder) -> Result<Vector3<f64>> {
    let [i, j, k] = order.axes();
    let s = order.parity();
    let m = r.matrix();
    let b = (-s * m[(k, i)]).clamp(-1.0, 1.0).asin();
    if (b.abs() - std::f64::consts::FRAC_PI_2).abs() < GIMBAL_TOLERANCE {
        return Err(Error::GimbalLock { angle: b });
    }
    let a = (s * m[(k, j)]).atan2(m[(k, k)]);
    let c = (s * m[(j, i)]).atan2(m[(i, i)]);
    Ok(Vector3::new(a, b, c))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn skew_vee_cases() {
        let sym = Matrix3::new(1.0, 2.0, 3.0, 2.0, 5.0, 6.0, 3.0, 6.0, 9.0);
        assert_eq!(skew_vee(&sym), Vector3::zeros());
        let v = Vector3::new(1.0, 2.0, 3.0);
        assert_eq!(skew_vee(&hat(&v)), v);
        let theta: f64 = 0.01;
        let rz = Rotation3::from_axis_angle(&Vector3::z_axis(), theta);
        let w = skew_vee(rz.matrix());
        assert!(w.x.abs() < 1e-15 && w.y.abs() < 1e-15);
        assert!((w.z - theta.sin()).abs() < 1e-15);
    }

    #[test]
    fn skew_vee_dyn_rejects_wrong_shape() {
        assert!(skew_vee_dyn(&DMatrix::zeros(2, 3)).is_err());
        let m = DMatrix::from_row_slice(3, 3, &[0.0, -3.0, 2.0, 3.0, 0.0, -1.0, -2.0, 1.0, 0.0]);
        assert_eq!(skew_vee_dyn(&m).unwrap(), Vector3::new(1.0, 2.0, 3.0));
    }

    #[test]
    fn exp_quarter_turn_about_z() {
        let r = exp(&Vector3::new(0.0, 0.0, std::f64::consts::FRAC_PI_2));
        let expect = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        assert!((r.matrix() - expect).abs().max() < 1e-15);
    }

    #[test]
    fn gimbal_lock_is_refused() {
        let r = rotation_from_tait_bryan(
            &Vector3::new(0.1, std::f64::consts::FRAC_PI_2 - 1e-8, 0.2),
            EulerOrder::Xyz,
        );
        assert!(matches!(
            tait_bryan_from_rotation(&r, EulerOrder::Xyz),
            Err(Error::GimbalLock { .. })
        ));
    }

    #[test]
    fn xyz_matches_rz_ry_rx() {
        let a = Vector3::new(0.3, -0.2, 1.1);
        let r = rotation_from_tait_bryan(&a, EulerOrder::Xyz);
        let manual = Rotation3::from_axis_angle(&Vector3::z_axis(), a.z)
            * Rotation3::from_axis_angle(&Vector3::y_axis(), a.y)
            * Rotation3::from_axis_angle(&Vector3::x_axis(), a.x);
        assert!((r.matrix() - manual.matrix()).abs().max() < 1e-15);
    }

    proptest! {
        #[test]
        fn tait_bryan_round_trip_all_orders(
            a in -3.1f64..3.1, b in -1.55f64..1.55, c in -3.1f64..3.1, idx in 0usize..6
        ) {
            let order = EulerOrder::ALL[idx];
            let angles = Vector3::new(a, b, c);
            let r = rotation_from_tait_bryan(&angles, order);
            let back = tait_bryan_from_rotation(&r, order).unwrap();
            let r2 = rotation_from_tait_bryan(&back, order);
            prop_assert!((r.matrix() - r2.matrix()).abs().max() <= 1e-9);
            prop_assert!((back - angles).abs().max() <= 1e-9);
        }

        #[test]
        fn exp_is_orthonormal(x in -4.0f64..4.0, y in -4.0f64..4.0, z in -4.0f64..4.0) {
            let r = exp(&Vector3::new(x, y, z));
            prop_assert!(orthonormality_error(r.matrix()) < 1e-12);
        }
    }
}
