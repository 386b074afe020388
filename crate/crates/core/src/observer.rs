//! EKF that estimates the body-frame acceleration defect of the nominal
//! vehicle model.
//!
//! State is `chi = (P, V, d_B)` with the constant-disturbance process model
//!
//! ```text
//! P_dot = V
//! V_dot = R(Theta) * ((0, 0, -u/m_nom) - d_B) + (0, 0, g)
//! d_dot = 0
//! ```
//!
//! `d_B` is the correction that reconciles the nominal-mass model with the
//! measured motion; carrying unmodeled extra mass drives `d_B,z` negative
//! (more lift needed than the nominal model believes). Attitude and applied
//! thrust enter as known inputs, so for a given input the model is affine in
//! `chi` and the process Jacobian has the closed form
//!
//! ```text
//! F = [ I  h*I  -h^2/2 R ]
//!     [ 0   I    -h   R ]
//!     [ 0   0     I     ]
//! ```
//!
//! which the RK4 mean propagation reproduces exactly (the continuous
//! Jacobian is nilpotent).
//!
//! The measurement is `(P_meas, V_meas, a_corr)` against `h(chi) = chi`:
//! the acceleration channel observes the disturbance state directly after
//! correcting the IMU signal for commanded specific thrust and for gravity
//! resolved through the current attitude:
//!
//! ```text
//! a_corr = -a_IMU - (0, 0, u/m_nom) + R^T (0, 0, g)
//! ```
//!
//! with `a_IMU = R^T V_dot` per the sensor convention in
//! [`crate::dynamics::sense`]. At an undisturbed matched-mass hover every
//! term cancels and the residual is zero.
//!
//! Noise shaping follows a sample-time power law: each diagonal entry of Q
//! and R is `dt` raised to a tuned exponent, optionally divided by that
//! exponent. With the default exponents the filter trusts position far more
//! than the corrected acceleration, and the z disturbance axis is tuned
//! faster than x/y.

use nalgebra::{Matrix3, SMatrix, SVector, Vector3};
use thiserror::Error;

use crate::dynamics::SensorFrame;
use crate::math::rotation;

/// Stacked filter state [position, velocity, body disturbance].
pub type Vec9 = SVector<f64, 9>;
pub type Mat9 = SMatrix<f64, 9, 9>;

/// Filter tuning. Exponents shape Q and R diagonals as powers of `dt`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObserverConfig {
    /// Filter sample time, s.
    pub dt: f64,
    /// Gravity used by the process model, m/s^2.
    pub gravity: f64,
    /// Process-noise exponent for the position block (entry `dt^q_p / q_p`).
    pub q_p: f64,
    /// Process-noise exponent for the velocity block (entry `dt^q_v / q_v`).
    pub q_v: f64,
    /// Per-axis process-noise exponents for the disturbance block
    /// (entries `dt^q_d`, not divided).
    pub q_d: [f64; 3],
    /// Measurement-noise exponent for position (entry `dt^r_p`).
    pub r_p: f64,
    /// Measurement-noise exponent for velocity (entry `dt^r_v`).
    pub r_v: f64,
    /// Measurement-noise exponent for corrected acceleration
    /// (entry `dt^r_a / r_a`).
    pub r_a: f64,
}

impl Default for ObserverConfig {
    fn default() -> Self {
        Self {
            dt: 0.01,
            gravity: crate::GRAVITY,
            q_p: 2.0,
            q_v: 2.0,
            q_d: [4.2, 4.2, 3.5],
            r_p: 4.0,
            r_v: 4.0,
            r_a: 2.0,
        }
    }
}

/// Known inputs for one filter cycle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObserverInput {
    /// Collective thrust applied over the interval, N.
    pub u_thrust: f64,
    /// Nominal airframe mass the controller believes in, kg.
    pub m_nominal: f64,
    /// Current attitude (roll, pitch, yaw), rad.
    pub theta: Vector3<f64>,
}

impl ObserverInput {
    /// Commanded specific thrust `u / m_nominal`, m/s^2. Single home of the
    /// thrust correction used by both the process and measurement models.
    pub fn t_m(&self) -> f64 {
        self.u_thrust / self.m_nominal
    }
}

/// Innovation norms of the last update, one per measurement block.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Innovations {
    pub position: f64,
    pub velocity: f64,
    pub accel: f64,
}

#[derive(Debug, Error, PartialEq)]
pub enum ObserverError {
    #[error("observer used before initialization")]
    NotInitialized,
    #[error("frame timestamp {got:.6} does not match expected tick {expected:.6}")]
    TimingMismatch { expected: f64, got: f64 },
    #[error("innovation covariance is not positive definite")]
    SingularInnovation,
    #[error("non-finite filter state at t = {t:.3}; state rolled back to prior")]
    NonFinite { t: f64 },
}

/// Process-noise diagonal per the power-law shaping.
pub fn make_q(cfg: &ObserverConfig) -> Vec9 {
    let mut q = Vec9::zeros();
    for i in 0..3 {
        q[i] = cfg.dt.powf(cfg.q_p) / cfg.q_p;
        q[3 + i] = cfg.dt.powf(cfg.q_v) / cfg.q_v;
        q[6 + i] = cfg.dt.powf(cfg.q_d[i]);
    }
    q
}

/// Measurement-noise diagonal per the power-law shaping.
pub fn make_r(cfg: &ObserverConfig) -> Vec9 {
    let mut r = Vec9::zeros();
    for i in 0..3 {
        r[i] = cfg.dt.powf(cfg.r_p);
        r[3 + i] = cfg.dt.powf(cfg.r_v);
        r[6 + i] = cfg.dt.powf(cfg.r_a) / cfg.r_a;
    }
    r
}

/// Continuous-time mean dynamics; affine in the state for fixed inputs.
fn mean_dynamics(x: &Vec9, input: &ObserverInput, gravity: f64) -> Vec9 {
    let r = rotation(&input.theta);
    let v = Vector3::new(x[3], x[4], x[5]);
    let d_b = Vector3::new(x[6], x[7], x[8]);
    let v_dot =
        r * (Vector3::new(0.0, 0.0, -input.t_m()) - d_b) + Vector3::new(0.0, 0.0, gravity);
    let mut out = Vec9::zeros();
    out.fixed_rows_mut::<3>(0).copy_from(&v);
    out.fixed_rows_mut::<3>(3).copy_from(&v_dot);
    out
}

/// RK4 propagation of the mean over `cfg.dt`. Exposed for Jacobian
/// verification against finite differences.
pub fn propagate_mean(x: &Vec9, input: &ObserverInput, cfg: &ObserverConfig) -> Vec9 {
    let h = cfg.dt;
    let f = |x: &Vec9| mean_dynamics(x, input, cfg.gravity);
    let k1 = f(x);
    let k2 = f(&(x + 0.5 * h * k1));
    let k3 = f(&(x + 0.5 * h * k2));
    let k4 = f(&(x + h * k3));
    x + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
}

/// Closed-form Jacobian of the one-step mean propagation.
pub fn discrete_jacobian(theta: &Vector3<f64>, dt: f64) -> Mat9 {
    let r = rotation(theta);
    let mut f = Mat9::identity();
    f.fixed_view_mut::<3, 3>(0, 3)
        .copy_from(&(dt * Matrix3::identity()));
    f.fixed_view_mut::<3, 3>(0, 6)
        .copy_from(&(-0.5 * dt * dt * r));
    f.fixed_view_mut::<3, 3>(3, 6).copy_from(&(-dt * r));
    f
}

/// Corrected acceleration channel: removes commanded specific thrust and
/// attitude-resolved gravity from the IMU signal so that, noise aside, the
/// channel equals the true body-frame disturbance.
pub fn correct_acceleration(
    a_body_meas: &Vector3<f64>,
    input: &ObserverInput,
    gravity: f64,
) -> Vector3<f64> {
    let r_t = rotation(&input.theta).transpose();
    -a_body_meas - Vector3::new(0.0, 0.0, input.t_m()) + r_t * Vector3::new(0.0, 0.0, gravity)
}

/// Disturbance observer with persistent mean and covariance.
#[derive(Debug, Clone)]
pub struct DisturbanceObserver {
    cfg: ObserverConfig,
    q: Vec9,
    r: Vec9,
    x: Vec9,
    pcov: Mat9,
    t: f64,
    initialized: bool,
}

impl DisturbanceObserver {
    pub fn new(cfg: ObserverConfig) -> Self {
        Self {
            cfg,
            q: make_q(&cfg),
            r: make_r(&cfg),
            x: Vec9::zeros(),
            pcov: Mat9::identity(),
            t: 0.0,
            initialized: false,
        }
    }

    pub fn config(&self) -> &ObserverConfig {
        &self.cfg
    }

    /// Seed the state from the first frame: measured position and velocity,
    /// zero disturbance, loose prior on the disturbance block.
    pub fn init_from(&mut self, frame: &SensorFrame) {
        self.x = Vec9::zeros();
        self.x.fixed_rows_mut::<3>(0).copy_from(&frame.p_meas);
        self.x.fixed_rows_mut::<3>(3).copy_from(&frame.v_meas);
        self.pcov = Mat9::from_diagonal(&Vec9::from_fn(|i, _| if i < 6 { 1e-2 } else { 1.0 }));
        self.t = frame.t;
        self.initialized = true;
    }

    pub fn is_initialized(&self) -> bool {
        self.initialized
    }

    /// Advance mean and covariance one sample interval.
    pub fn predict(&mut self, input: &ObserverInput) -> Result<(), ObserverError> {
        if !self.initialized {
            return Err(ObserverError::NotInitialized);
        }
        let prior = (self.x, self.pcov, self.t);
        self.x = propagate_mean(&self.x, input, &self.cfg);
        let f = discrete_jacobian(&input.theta, self.cfg.dt);
        self.pcov = f * self.pcov * f.transpose() + Mat9::from_diagonal(&self.q);
        self.t += self.cfg.dt;
        if !self.is_finite() {
            let t = self.t;
            (self.x, self.pcov, self.t) = prior;
            return Err(ObserverError::NonFinite { t });
        }
        Ok(())
    }

    /// Fuse one measurement frame. The frame must land exactly on the
    /// predicted tick.
    pub fn update(
        &mut self,
        frame: &SensorFrame,
        input: &ObserverInput,
    ) -> Result<Innovations, ObserverError> {
        if !self.initialized {
            return Err(ObserverError::NotInitialized);
        }
        if (frame.t - self.t).abs() > 1e-9 {
            return Err(ObserverError::TimingMismatch {
                expected: self.t,
                got: frame.t,
            });
        }
        let prior = (self.x, self.pcov);
        let a_corr = correct_acceleration(&frame.a_body_meas, input, self.cfg.gravity);
        let mut z = Vec9::zeros();
        z.fixed_rows_mut::<3>(0).copy_from(&frame.p_meas);
        z.fixed_rows_mut::<3>(3).copy_from(&frame.v_meas);
        z.fixed_rows_mut::<3>(6).copy_from(&a_corr);
        // h(chi) = chi, so the innovation is plain state mismatch.
        let y = z - self.x;
        let k = match kalman_gain(&self.pcov, &self.r) {
            Some(k) => k,
            None => return Err(ObserverError::SingularInnovation),
        };
        self.x += k * y;
        self.pcov = (Mat9::identity() - k) * self.pcov;
        self.pcov = 0.5 * (self.pcov + self.pcov.transpose());
        if !self.is_finite() {
            let t = self.t;
            (self.x, self.pcov) = prior;
            return Err(ObserverError::NonFinite { t });
        }
        Ok(Innovations {
            position: y.fixed_rows::<3>(0).norm(),
            velocity: y.fixed_rows::<3>(3).norm(),
            accel: y.fixed_rows::<3>(6).norm(),
        })
    }

    /// Estimated body-frame disturbance.
    pub fn d_hat_body(&self) -> Vector3<f64> {
        Vector3::new(self.x[6], self.x[7], self.x[8])
    }

    /// Estimated disturbance rotated into the world frame.
    pub fn disturbance_world(&self, theta: &Vector3<f64>) -> Vector3<f64> {
        rotation(theta) * self.d_hat_body()
    }

    pub fn p_est(&self) -> Vector3<f64> {
        Vector3::new(self.x[0], self.x[1], self.x[2])
    }

    pub fn v_est(&self) -> Vector3<f64> {
        Vector3::new(self.x[3], self.x[4], self.x[5])
    }

    pub fn pcov(&self) -> &Mat9 {
        &self.pcov
    }

    pub fn pcov_trace(&self) -> f64 {
        self.pcov.trace()
    }

    fn is_finite(&self) -> bool {
        self.x.iter().all(|v| v.is_finite()) && self.pcov.iter().all(|v| v.is_finite())
    }
}

/// Kalman gain for the identity measurement model: `K = P (P + R)^-1`.
fn kalman_gain(pcov: &Mat9, r_diag: &Vec9) -> Option<Mat9> {
    let s = pcov + Mat9::from_diagonal(r_diag);
    let chol = s.cholesky()?;
    // S is symmetric, so K = P S^-1 = (S^-1 P)^T with P symmetric.
    Some(chol.solve(pcov).transpose())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn hover_frame(t: f64) -> SensorFrame {
        SensorFrame {
            t,
            p_meas: Vector3::new(0.0, 0.0, -1.0),
            v_meas: Vector3::zeros(),
            a_body_meas: Vector3::zeros(),
        }
    }

    /// Truth script: vehicle pinned at hover with thrust `m_true * g` while
    /// the filter believes in `m_nominal`. The corrected acceleration then
    /// observes the analytic mass-defect disturbance directly.
    fn run_mass_defect(
        cfg: ObserverConfig,
        m_true: f64,
        m_nominal: f64,
        seconds: f64,
        sigma_a: f64,
        seed: u64,
    ) -> (DisturbanceObserver, Vec<(f64, f64, Innovations)>) {
        let mut obs = DisturbanceObserver::new(cfg);
        obs.init_from(&hover_frame(0.0));
        let input = ObserverInput {
            u_thrust: m_true * cfg.gravity,
            m_nominal,
            theta: Vector3::zeros(),
        };
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let normal = rand_distr::Normal::new(0.0, 1.0).unwrap();
        let n = (seconds / cfg.dt).round() as usize;
        let mut trace = Vec::with_capacity(n);
        for k in 1..=n {
            obs.predict(&input).unwrap();
            let mut frame = hover_frame(k as f64 * cfg.dt);
            if sigma_a > 0.0 {
                frame.a_body_meas += sigma_a
                    * Vector3::new(
                        rand_distr::Distribution::sample(&normal, &mut rng),
                        rand_distr::Distribution::sample(&normal, &mut rng),
                        rand_distr::Distribution::sample(&normal, &mut rng),
                    );
            }
            let innov = obs.update(&frame, &input).unwrap();
            trace.push((frame.t, obs.d_hat_body().z, innov));
        }
        (obs, trace)
    }

    #[test]
    fn noise_diagonals_follow_power_law() {
        let cfg = ObserverConfig::default();
        let q = make_q(&cfg);
        let r = make_r(&cfg);
        // dt = 0.01 with the default exponents.
        assert_relative_eq!(q[0], 5e-5, epsilon = 1e-18);
        assert_relative_eq!(q[3], 5e-5, epsilon = 1e-18);
        assert_relative_eq!(q[6], 0.01f64.powf(4.2), epsilon = 1e-20);
        assert_relative_eq!(q[8], 1e-7, epsilon = 1e-20);
        assert_relative_eq!(r[0], 1e-8, epsilon = 1e-20);
        assert_relative_eq!(r[3], 1e-8, epsilon = 1e-20);
        assert_relative_eq!(r[6], 5e-5, epsilon = 1e-18);
        // The filter trusts position and velocity far more than the
        // corrected acceleration channel.
        assert!(r[0] < r[6] / 100.0);
    }

    #[test]
    fn discrete_jacobian_matches_finite_differences() {
        let cfg = ObserverConfig::default();
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        for _ in 0..100 {
            let input = ObserverInput {
                u_thrust: rng.gen_range(0.0..20.0),
                m_nominal: 1.002,
                theta: Vector3::new(
                    rng.gen_range(-0.5..0.5),
                    rng.gen_range(-0.5..0.5),
                    rng.gen_range(-3.0..3.0),
                ),
            };
            let x = Vec9::from_fn(|_, _| rng.gen_range(-3.0..3.0));
            let f_analytic = discrete_jacobian(&input.theta, cfg.dt);
            let mut f_fd = Mat9::zeros();
            let eps = 1e-6;
            for j in 0..9 {
                let mut xp = x;
                let mut xm = x;
                xp[j] += eps;
                xm[j] -= eps;
                let col = (propagate_mean(&xp, &input, &cfg)
                    - propagate_mean(&xm, &input, &cfg))
                    / (2.0 * eps);
                f_fd.set_column(j, &col);
            }
            let rel = (f_fd - f_analytic).norm() / f_analytic.norm();
            assert!(rel < 1e-6, "Jacobian mismatch: relative error {rel}");
        }
    }

    #[test]
    fn unmodeled_mass_converges_to_analytic_defect() {
        let cfg = ObserverConfig::default();
        let target = -cfg.gravity * 0.161 / 1.002;
        let (obs, trace) = run_mass_defect(cfg, 1.002 + 0.161, 1.002, 2.0, 0.0, 0);
        let tol = 0.01 * target.abs();
        assert!(
            (obs.d_hat_body().z - target).abs() < tol,
            "d_hat z = {}, want {target}",
            obs.d_hat_body().z
        );
        // Must already be inside the band well before the 2 s mark.
        let first_in = trace
            .iter()
            .find(|(_, d, _)| (d - target).abs() < tol)
            .map(|(t, _, _)| *t)
            .unwrap();
        assert!(first_in < 2.0, "entered tolerance only at {first_in} s");
        assert_relative_eq!(target, -1.576, epsilon = 1e-3);
    }

    #[test]
    fn steady_state_estimate_is_unbiased() {
        let cfg = ObserverConfig::default();
        let target = -cfg.gravity * 0.161 / 1.002;
        // Zero noise: within 2 %.
        let (_, trace) = run_mass_defect(cfg, 1.163, 1.002, 15.0, 0.0, 0);
        let tail: Vec<f64> = trace
            .iter()
            .filter(|(t, _, _)| *t > 10.0)
            .map(|(_, d, _)| *d)
            .collect();
        let mean = tail.iter().sum::<f64>() / tail.len() as f64;
        assert!((mean - target).abs() / target.abs() < 0.02);
        // Accelerometer noise at 0.3 m/s^2: within 10 %.
        let (_, trace) = run_mass_defect(cfg, 1.163, 1.002, 15.0, 0.3, 11);
        let tail: Vec<f64> = trace
            .iter()
            .filter(|(t, _, _)| *t > 10.0)
            .map(|(_, d, _)| *d)
            .collect();
        let mean = tail.iter().sum::<f64>() / tail.len() as f64;
        assert!(
            (mean - target).abs() / target.abs() < 0.10,
            "noisy steady-state mean {mean} vs {target}"
        );
    }

    #[test]
    fn accel_innovation_decays_below_noise_band_within_three_seconds() {
        let cfg = ObserverConfig::default();
        let (_, trace) = run_mass_defect(cfg, 1.163, 1.002, 5.0, 0.0, 0);
        let band = 3.0 * make_r(&cfg)[6].sqrt();
        let settled = trace
            .iter()
            .find(|(_, _, innov)| innov.accel < band)
            .map(|(t, _, _)| *t)
            .unwrap();
        assert!(settled < 3.0, "innovation settled only at {settled} s");
        // And it stays small afterwards.
        assert!(trace
            .iter()
            .filter(|(t, _, _)| *t > 3.0)
            .all(|(_, _, innov)| innov.accel < band));
    }

    #[test]
    fn covariance_stays_symmetric_positive_semidefinite() {
        let cfg = ObserverConfig::default();
        let mut obs = DisturbanceObserver::new(cfg);
        obs.init_from(&hover_frame(0.0));
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let input = ObserverInput {
            u_thrust: 11.0,
            m_nominal: 1.002,
            theta: Vector3::new(0.1, -0.05, 0.4),
        };
        for k in 1..=500 {
            obs.predict(&input).unwrap();
            let mut frame = hover_frame(k as f64 * cfg.dt);
            frame.p_meas += Vector3::new(rng.gen_range(-0.01..0.01), 0.0, 0.0);
            frame.a_body_meas = Vector3::new(
                rng.gen_range(-0.5..0.5),
                rng.gen_range(-0.5..0.5),
                rng.gen_range(-0.5..0.5),
            );
            obs.update(&frame, &input).unwrap();
            let p = obs.pcov();
            assert!((p - p.transpose()).norm() < 1e-10);
            let eig = p.symmetric_eigenvalues();
            assert!(eig.iter().all(|&l| l > -1e-10), "negative eigenvalue {eig}");
        }
    }

    #[test]
    fn infinite_accel_noise_freezes_disturbance_rows() {
        let cfg = ObserverConfig::default();
        let mut obs = DisturbanceObserver::new(cfg);
        obs.init_from(&hover_frame(0.0));
        // Right after init there are no cross-covariances, so with the
        // acceleration channel drowned the disturbance rows of K vanish.
        let mut r = make_r(&cfg);
        r[6] = 1e12;
        r[7] = 1e12;
        r[8] = 1e12;
        let k = kalman_gain(obs.pcov(), &r).unwrap();
        for row in 6..9 {
            for col in 0..9 {
                assert!(
                    k[(row, col)].abs() < 1e-9,
                    "K[{row},{col}] = {} should vanish",
                    k[(row, col)]
                );
            }
        }
    }

    #[test]
    fn timing_mismatch_is_rejected() {
        let cfg = ObserverConfig::default();
        let mut obs = DisturbanceObserver::new(cfg);
        obs.init_from(&hover_frame(0.0));
        let input = ObserverInput {
            u_thrust: 9.83,
            m_nominal: 1.002,
            theta: Vector3::zeros(),
        };
        obs.predict(&input).unwrap();
        let err = obs.update(&hover_frame(0.5), &input).unwrap_err();
        assert!(matches!(err, ObserverError::TimingMismatch { .. }));
    }

    #[test]
    fn nonfinite_frame_rolls_back_to_prior() {
        let cfg = ObserverConfig::default();
        let mut obs = DisturbanceObserver::new(cfg);
        obs.init_from(&hover_frame(0.0));
        let input = ObserverInput {
            u_thrust: 9.83,
            m_nominal: 1.002,
            theta: Vector3::zeros(),
        };
        obs.predict(&input).unwrap();
        let before = (obs.d_hat_body(), obs.p_est());
        let mut bad = hover_frame(cfg.dt);
        bad.a_body_meas.z = f64::NAN;
        let err = obs.update(&bad, &input).unwrap_err();
        assert!(matches!(err, ObserverError::NonFinite { .. }));
        assert_eq!(before, (obs.d_hat_body(), obs.p_est()));
    }

    #[test]
    fn disturbance_world_rotates_with_yaw() {
        let cfg = ObserverConfig::default();
        let mut obs = DisturbanceObserver::new(cfg);
        obs.init_from(&hover_frame(0.0));
        obs.x[6] = 1.0;
        let d_w = obs.disturbance_world(&Vector3::new(0.0, 0.0, std::f64::consts::FRAC_PI_2));
        assert_relative_eq!(d_w, Vector3::new(0.0, 1.0, 0.0), epsilon = 1e-12);
    }

    #[test]
    fn uninitialized_observer_refuses_to_run() {
        let mut obs = DisturbanceObserver::new(ObserverConfig::default());
        let input = ObserverInput {
            u_thrust: 9.83,
            m_nominal: 1.002,
            theta: Vector3::zeros(),
        };
        assert_eq!(obs.predict(&input), Err(ObserverError::NotInitialized));
    }
}
