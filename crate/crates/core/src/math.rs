//! Rotation and Euler-rate helpers shared by the plant, observer, and
//! controllers.
//!
//! Attitude is Z-Y-X intrinsic Euler angles `Theta = (roll, pitch, yaw)`.
//! `rotation` returns the body-to-world matrix `R = Rz(yaw) Ry(pitch)
//! Rx(roll)`; `euler_rate_matrix` returns `W` with `Theta_dot = W * omega`
//! for body rates `omega = (p, q, r)`. `W` is singular at pitch +-90 deg,
//! which the plant treats as a fault rather than a representable state.

use nalgebra::{Matrix3, Vector3};

/// Body-to-world rotation for Z-Y-X Euler angles (roll, pitch, yaw).
pub fn rotation(theta: &Vector3<f64>) -> Matrix3<f64> {
    let (sr, cr) = theta.x.sin_cos();
    let (sp, cp) = theta.y.sin_cos();
    let (sy, cy) = theta.z.sin_cos();
    Matrix3::new(
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

/// Mapping from body rates to Euler-angle rates; singular at |pitch| = 90 deg.
pub fn euler_rate_matrix(theta: &Vector3<f64>) -> Matrix3<f64> {
    let (sr, cr) = theta.x.sin_cos();
    let (sp, cp) = theta.y.sin_cos();
    let tp = sp / cp;
    Matrix3::new(
        1.0,
        sr * tp,
        cr * tp,
        0.0,
        cr,
        -sr,
        0.0,
        sr / cp,
        cr / cp,
    )
}

/// Wrap an angle to (-pi, pi].
pub fn wrap_angle(a: f64) -> f64 {
    let mut x = a % std::f64::consts::TAU;
    if x <= -std::f64::consts::PI {
        x += std::f64::consts::TAU;
    } else if x > std::f64::consts::PI {
        x -= std::f64::consts::TAU;
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn rotation_identity_at_zero_attitude() {
        let r = rotation(&Vector3::zeros());
        assert_relative_eq!(r, Matrix3::identity(), epsilon = 1e-15);
    }

    #[test]
    fn yaw_quarter_turn_maps_forward_to_east() {
        let r = rotation(&Vector3::new(0.0, 0.0, std::f64::consts::FRAC_PI_2));
        let out = r * Vector3::new(1.0, 0.0, 0.0);
        assert_relative_eq!(out, Vector3::new(0.0, 1.0, 0.0), epsilon = 1e-12);
    }

    #[test]
    fn positive_roll_tilts_lift_toward_east() {
        // Thrust acts along body -z; a right-wing-down roll must push the
        // lift vector east (+y) in NED.
        let r = rotation(&Vector3::new(0.2, 0.0, 0.0));
        let lift = r * Vector3::new(0.0, 0.0, -1.0);
        assert!(lift.y > 0.0);
        assert!(lift.z < 0.0);
    }

    #[test]
    fn nose_down_pitch_tilts_lift_north() {
        let r = rotation(&Vector3::new(0.0, -0.2, 0.0));
        let lift = r * Vector3::new(0.0, 0.0, -1.0);
        assert!(lift.x > 0.0);
    }

    #[test]
    fn euler_rate_matrix_is_identity_at_level() {
        let w = euler_rate_matrix(&Vector3::zeros());
        assert_relative_eq!(w, Matrix3::identity(), epsilon = 1e-15);
    }

    #[test]
    fn wrap_angle_stays_in_range() {
        assert_relative_eq!(wrap_angle(3.0 * std::f64::consts::PI), std::f64::consts::PI);
        assert_relative_eq!(wrap_angle(-2.5 * std::f64::consts::PI), -0.5 * std::f64::consts::PI);
        assert_relative_eq!(wrap_angle(0.3), 0.3);
    }

    proptest! {
        #[test]
        fn rotation_is_orthonormal(
            roll in -1.5f64..1.5,
            pitch in -1.5f64..1.5,
            yaw in -3.1f64..3.1,
        ) {
            let r = rotation(&Vector3::new(roll, pitch, yaw));
            let err = (r.transpose() * r - Matrix3::identity()).abs().max();
            prop_assert!(err < 1e-12);
            prop_assert!((r.determinant() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn rotation_preserves_norm(
            roll in -1.5f64..1.5,
            pitch in -1.5f64..1.5,
            yaw in -3.1f64..3.1,
            vx in -10.0f64..10.0,
            vy in -10.0f64..10.0,
            vz in -10.0f64..10.0,
        ) {
            let r = rotation(&Vector3::new(roll, pitch, yaw));
            let v = Vector3::new(vx, vy, vz);
            prop_assert!(((r * v).norm() - v.norm()).abs() < 1e-9);
        }
    }
}
