//! Cascaded PID position controller (baseline comparator).
//!
//! Structure mirrors common flight-stack firmware: a proportional
//! position loop produces a velocity setpoint, a PID velocity loop
//! produces an acceleration demand, and the demand is inverted into
//! thrust and small-angle attitude commands:
//!
//! ```text
//! T         = m_nominal * (g - a_dem_z)
//! theta_cmd = -(cos(psi) a_x + sin(psi) a_y) / g
//! phi_cmd   = (-sin(psi) a_x + cos(psi) a_y) / g
//! ```
//!
//! The integrator uses conditional integration: an axis whose output is
//! saturated in the direction the error pushes stops accumulating, and
//! the stored integral is hard-clamped as a second line of defense.
//! Unlike the MPC controllers this baseline never sees the disturbance
//! estimate; integral action is its only defense against unmodeled
//! weight, which is exactly the behavioral contrast the comparison runs
//! are after.

use crate::nmpc::AttitudeThrustCommand;
use nalgebra::Vector3;

#[derive(Debug, Clone)]
pub struct PidGains {
    /// Position error to velocity setpoint, 1/s.
    pub pos_p: Vector3<f64>,
    /// Velocity loop PID.
    pub vel_p: Vector3<f64>,
    pub vel_i: Vector3<f64>,
    pub vel_d: Vector3<f64>,
    /// Clamp on the stored velocity-error integral, m/s.
    pub integral_limit: Vector3<f64>,
    /// Clamp on the commanded velocity setpoint, m/s.
    pub v_sp_limit: f64,
    /// Clamp on the acceleration demand per axis, m/s^2.
    pub accel_limit: Vector3<f64>,
    /// Roll/pitch command clamp, rad.
    pub angle_max: f64,
    /// Thrust command clamp, N.
    pub t_max: f64,
}

impl Default for PidGains {
    fn default() -> Self {
        Self {
            pos_p: Vector3::new(1.2, 1.2, 1.2),
            vel_p: Vector3::new(3.0, 3.0, 3.0),
            vel_i: Vector3::new(0.5, 0.5, 0.5),
            vel_d: Vector3::zeros(),
            integral_limit: Vector3::new(12.0, 12.0, 12.0),
            v_sp_limit: 2.5,
            accel_limit: Vector3::new(6.0, 6.0, 6.0),
            angle_max: 30.0_f64.to_radians(),
            t_max: 25.0,
        }
    }
}

impl PidGains {
    pub fn validate(&self) -> Result<(), String> {
        let non_neg = |v: &Vector3<f64>| v.iter().all(|g| *g >= 0.0 && g.is_finite());
        if !(non_neg(&self.pos_p)
            && non_neg(&self.vel_p)
            && non_neg(&self.vel_i)
            && non_neg(&self.vel_d))
        {
            return Err("gains must be finite and >= 0".into());
        }
        let pos = |v: &Vector3<f64>| v.iter().all(|g| *g > 0.0);
        if !(pos(&self.integral_limit) && pos(&self.accel_limit)) {
            return Err("limits must be positive".into());
        }
        if !(self.v_sp_limit > 0.0 && self.angle_max > 0.0 && self.t_max > 0.0) {
            return Err("limits must be positive".into());
        }
        Ok(())
    }
}

pub struct PidController {
    gains: PidGains,
    m_nominal: f64,
    gravity: f64,
    integral: Vector3<f64>,
    prev_vel_err: Option<Vector3<f64>>,
}

impl PidController {
    pub fn new(gains: PidGains, m_nominal: f64, gravity: f64) -> Result<Self, String> {
        gains.validate()?;
        if !(m_nominal > 0.0 && gravity > 0.0) {
            return Err("mass and gravity must be positive".into());
        }
        Ok(Self {
            gains,
            m_nominal,
            gravity,
            integral: Vector3::zeros(),
            prev_vel_err: None,
        })
    }

    pub fn gains(&self) -> &PidGains {
        &self.gains
    }

    pub fn integral(&self) -> Vector3<f64> {
        self.integral
    }

    pub fn reset(&mut self) {
        self.integral = Vector3::zeros();
        self.prev_vel_err = None;
    }

    /// One control tick from estimated position/velocity toward a
    /// position setpoint with fixed yaw reference.
    pub fn step(
        &mut self,
        p_est: &Vector3<f64>,
        v_est: &Vector3<f64>,
        target: &Vector3<f64>,
        yaw_ref: f64,
        dt: f64,
    ) -> AttitudeThrustCommand {
        let g = &self.gains;
        let mut v_sp = Vector3::zeros();
        for i in 0..3 {
            v_sp[i] = (g.pos_p[i] * (target[i] - p_est[i])).clamp(-g.v_sp_limit, g.v_sp_limit);
        }
        let vel_err = v_sp - v_est;
        let d_term = match self.prev_vel_err {
            Some(prev) if dt > 0.0 => (vel_err - prev) / dt,
            _ => Vector3::zeros(),
        };
        self.prev_vel_err = Some(vel_err);

        let mut a_dem = Vector3::zeros();
        for i in 0..3 {
            let tentative = self.integral[i] + vel_err[i] * dt;
            let unsat =
                g.vel_p[i] * vel_err[i] + g.vel_i[i] * tentative + g.vel_d[i] * d_term[i];
            let sat = unsat.clamp(-g.accel_limit[i], g.accel_limit[i]);
            // Conditional integration: only keep the new integral when the
            // output is unsaturated or the error pulls back inside.
            if sat == unsat || (unsat > 0.0) != (vel_err[i] > 0.0) {
                self.integral[i] =
                    tentative.clamp(-g.integral_limit[i], g.integral_limit[i]);
            }
            a_dem[i] = (g.vel_p[i] * vel_err[i]
                + g.vel_i[i] * self.integral[i]
                + g.vel_d[i] * d_term[i])
                .clamp(-g.accel_limit[i], g.accel_limit[i]);
        }

        let (s_psi, c_psi) = yaw_ref.sin_cos();
        let theta_cmd =
            (-(c_psi * a_dem[0] + s_psi * a_dem[1]) / self.gravity).clamp(-g.angle_max, g.angle_max);
        let phi_cmd =
            ((-s_psi * a_dem[0] + c_psi * a_dem[1]) / self.gravity).clamp(-g.angle_max, g.angle_max);
        let thrust = (self.m_nominal * (self.gravity - a_dem[2])).clamp(0.0, g.t_max);
        AttitudeThrustCommand {
            thrust,
            phi_cmd,
            theta_cmd,
            psi_cmd: yaw_ref,
        }
    }
}
