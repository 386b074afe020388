//! Attitude loop standing in for the flight controller unit.
//!
//! Stateless PD on attitude error with body-rate damping, run at the
//! plant rate (1 kHz). Per axis:
//!
//! ```text
//! tau = I * (Kp * (theta_cmd - theta) - Kd * omega)
//! ```
//!
//! With the default gains each axis closes critically damped at 5 rad/s,
//! and the step response seen by the 100 Hz outer loop fits a single pole
//! near 0.5 s; the MPC prediction model carries that fitted constant, not
//! the gain design numbers. Thrust passes straight through, saturated to
//! the actuator range. Yaw error is additionally clamped so the implied
//! steady turn rate stays below `yaw_rate_limit`.

use crate::dynamics::{VehicleParams, VehicleState, WrenchInput};
use crate::math::wrap_angle;
use crate::nmpc::AttitudeThrustCommand;
use nalgebra::Vector3;

#[derive(Debug, Clone, Copy)]
pub struct AttitudeGains {
    /// Per-axis proportional gain on attitude error, 1/s^2.
    pub kp: Vector3<f64>,
    /// Per-axis derivative gain on body rate, 1/s.
    pub kd: Vector3<f64>,
    /// Cap on the quasi-steady yaw rate implied by the yaw error, rad/s.
    pub yaw_rate_limit: f64,
}

impl Default for AttitudeGains {
    fn default() -> Self {
        Self {
            kp: Vector3::new(25.0, 25.0, 25.0),
            kd: Vector3::new(10.0, 10.0, 10.0),
            yaw_rate_limit: 1.5,
        }
    }
}

/// Which output channels hit their limits this call.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SaturationFlags {
    pub thrust: bool,
    pub torque: [bool; 3],
}

impl SaturationFlags {
    pub fn any(&self) -> bool {
        self.thrust || self.torque.iter().any(|t| *t)
    }
}

/// PD attitude control toward the commanded angles. Saturation clamps
/// magnitude only; the sign of each channel is preserved.
pub fn attitude_control(
    cmd: &AttitudeThrustCommand,
    state: &VehicleState,
    gains: &AttitudeGains,
    params: &VehicleParams,
) -> (WrenchInput, SaturationFlags) {
    let mut err = Vector3::new(
        wrap_angle(cmd.phi_cmd - state.theta[0]),
        wrap_angle(cmd.theta_cmd - state.theta[1]),
        wrap_angle(cmd.psi_cmd - state.theta[2]),
    );
    // Large yaw errors would otherwise demand an unbounded turn rate
    // (steady state of the PD: rate = Kp/Kd * error).
    let yaw_cap = gains.yaw_rate_limit * gains.kd[2] / gains.kp[2];
    err[2] = err[2].clamp(-yaw_cap, yaw_cap);

    let mut flags = SaturationFlags::default();
    let mut torque = Vector3::zeros();
    for i in 0..3 {
        let raw = params.inertia[i] * (gains.kp[i] * err[i] - gains.kd[i] * state.omega[i]);
        let clamped = raw.clamp(-params.tau_max, params.tau_max);
        flags.torque[i] = clamped != raw;
        torque[i] = clamped;
    }
    let thrust = cmd.thrust.clamp(0.0, params.t_max);
    flags.thrust = thrust != cmd.thrust;
    (
        WrenchInput {
            thrust,
            torque,
        },
        flags,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{step_rk4, VehicleState};
    use crate::nmpc::{identify_time_constants, NmpcModel, SysIdSample};
    use approx::assert_relative_eq;
    use nalgebra::Vector3;

    fn cmd(phi: f64, theta: f64, psi: f64, thrust: f64) -> AttitudeThrustCommand {
        AttitudeThrustCommand {
            thrust,
            phi_cmd: phi,
            theta_cmd: theta,
            psi_cmd: psi,
        }
    }

    #[test]
    fn on_command_at_rest_gives_zero_torque() {
        let params = VehicleParams::default();
        let gains = AttitudeGains::default();
        let state = VehicleState::at_rest(Vector3::zeros());
        let (w, flags) = attitude_control(
            &cmd(0.0, 0.0, 0.0, params.mass * params.gravity),
            &state,
            &gains,
            &params,
        );
        assert!(w.torque.amax() < 1e-15);
        assert!(!flags.any());
    }

    #[test]
    fn roll_error_formula_value() {
        let params = VehicleParams::default();
        let gains = AttitudeGains::default();
        let state = VehicleState::at_rest(Vector3::zeros());
        let (w, _) = attitude_control(&cmd(0.1, 0.0, 0.0, 5.0), &state, &gains, &params);
        // I_x * Kp * err = 0.010 * 25 * 0.1
        assert_relative_eq!(w.torque[0], 0.025, epsilon = 1e-12);
    }

    #[test]
    fn saturation_preserves_sign() {
        let params = VehicleParams::default();
        let gains = AttitudeGains::default();
        let mut state = VehicleState::at_rest(Vector3::zeros());
        state.theta[0] = -1.3;
        let (w, flags) = attitude_control(&cmd(1.3, 0.0, 0.0, 40.0), &state, &gains, &params);
        assert_relative_eq!(w.torque[0], params.tau_max);
        assert!(flags.torque[0]);
        assert!(w.torque[0] > 0.0);
        assert!(flags.thrust);
        assert_relative_eq!(w.thrust, params.t_max);

        let (w_neg, _) = attitude_control(&cmd(-1.3, 0.0, 0.0, 5.0), &state, &gains, &params);
        // Error is zero here; push the state to force a negative demand.
        let mut state2 = VehicleState::at_rest(Vector3::zeros());
        state2.theta[0] = 1.3;
        let (w_neg2, _) = attitude_control(&cmd(-1.3, 0.0, 0.0, 5.0), &state2, &gains, &params);
        assert!(w_neg.torque[0].abs() < 1e-12);
        assert_relative_eq!(w_neg2.torque[0], -params.tau_max);
    }

    #[test]
    fn yaw_error_is_rate_limited_and_wrapped() {
        let params = VehicleParams::default();
        let gains = AttitudeGains::default();
        let state = VehicleState::at_rest(Vector3::zeros());
        let (w, _) = attitude_control(&cmd(0.0, 0.0, 3.0, 5.0), &state, &gains, &params);
        let cap = gains.yaw_rate_limit * gains.kd[2] / gains.kp[2];
        assert_relative_eq!(
            w.torque[2],
            params.inertia[2] * gains.kp[2] * cap,
            epsilon = 1e-12
        );
        // A command just past pi should wrap to a negative error.
        let (w2, _) = attitude_control(&cmd(0.0, 0.0, 3.3, 5.0), &state, &gains, &params);
        assert!(w2.torque[2] < 0.0);
    }

    /// Roll square-wave response of the closed inner loop at the plant
    /// rate, sampled at the outer rate.
    fn simulate_attitude_log() -> Vec<SysIdSample> {
        let params = VehicleParams::default();
        let gains = AttitudeGains::default();
        let hover = params.mass * params.gravity;
        let h = 0.001;
        let mut state = VehicleState::at_rest(Vector3::new(0.0, 0.0, -1.0));
        let mut samples = Vec::new();
        for k in 0..6000 {
            let t = k as f64 * h;
            let half = ((t / 1.5) as i64) % 2 == 0;
            let phi_cmd = if half { 0.15 } else { -0.15 };
            let theta_cmd = if half { -0.1 } else { 0.2 };
            if k % 10 == 0 {
                samples.push(SysIdSample {
                    t,
                    phi_cmd,
                    phi: state.theta[0],
                    theta_cmd,
                    theta: state.theta[1],
                });
            }
            let (w, _) = attitude_control(
                &cmd(phi_cmd, theta_cmd, 0.0, hover),
                &state,
                &gains,
                &params,
            );
            state = step_rk4(
                &state,
                &w,
                &params,
                params.mass,
                &Vector3::zeros(),
                h,
                t,
            )
            .unwrap();
        }
        samples
    }

    #[test]
    fn fitted_lag_matches_the_mpc_model_constant() {
        let fit = identify_time_constants(&simulate_attitude_log()).unwrap();
        let model = NmpcModel::default();
        assert!(
            (fit.tau_phi - model.tau_phi).abs() / model.tau_phi < 0.2,
            "fitted tau_phi {} vs model {}",
            fit.tau_phi,
            model.tau_phi
        );
        assert!(
            (fit.tau_theta - model.tau_theta).abs() / model.tau_theta < 0.2,
            "fitted tau_theta {} vs model {}",
            fit.tau_theta,
            model.tau_theta
        );
    }

    #[test]
    fn step_response_is_monotone_with_small_overshoot() {
        let params = VehicleParams::default();
        let gains = AttitudeGains::default();
        let hover = params.mass * params.gravity;
        let h = 0.001;
        let target = 0.2;
        let mut state = VehicleState::at_rest(Vector3::new(0.0, 0.0, -1.0));
        let mut prev = 0.0;
        let mut peak = 0.0f64;
        for k in 0..3000 {
            let t = k as f64 * h;
            let (w, _) =
                attitude_control(&cmd(target, 0.0, 0.0, hover), &state, &gains, &params);
            state = step_rk4(
                &state,
                &w,
                &params,
                params.mass,
                &Vector3::zeros(),
                h,
                t,
            )
            .unwrap();
            assert!(
                state.theta[0] >= prev - 1e-9,
                "response not monotone at t={t}"
            );
            prev = state.theta[0];
            peak = peak.max(state.theta[0]);
        }
        assert!(peak <= target * 1.10, "overshoot beyond 10%: peak {peak}");
        assert!(peak > target * 0.95, "loop failed to reach the step");
    }
}
