//! Rigid-body quadrotor plant with payload bookkeeping and environment
//! effects.
//!
//! State is `(P, V, Theta, omega)` in NED world coordinates with Z-Y-X Euler
//! attitude. Translational dynamics:
//!
//! ```text
//! P_dot = V
//! V_dot = R(Theta) * (0, 0, -T / m_total) + (0, 0, g) + d_W
//! ```
//!
//! so thrust at level attitude accelerates the vehicle upward (negative z)
//! and gravity pulls it down (positive z). `d_W` is the summed world-frame
//! environment acceleration from [`effective_disturbance`]: ground effect,
//! battery sag, slosh reaction, and wind bias. Unmodeled payload mass is not
//! part of `d_W`; it enters through `m_total`.
//!
//! Rotational dynamics use a diagonal inertia and Euler's equation,
//! `omega_dot = I^-1 (tau - omega x I omega)`, with `Theta_dot = W(Theta) *
//! omega`. `W` is singular at |pitch| = 90 deg; crossing 90 deg on either
//! tilt axis aborts the step with [`SimFault::GimbalLock`] instead of
//! producing garbage.
//!
//! Payloads attach instantaneously by id. Each payload contributes its mass
//! to `m_total` and, when offset from the body origin, a gravity torque
//! `r x (R^T e_down m g)` that the harness feeds back into the wrench. A
//! payload in slosh mode additionally carries a damped planar pendulum whose
//! reaction force shows up as a lateral world acceleration.

use nalgebra::{Vector2, Vector3};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::math::{euler_rate_matrix, rotation};

/// Rigid-body state in world NED coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VehicleState {
    /// Position, m.
    pub p: Vector3<f64>,
    /// Velocity, m/s.
    pub v: Vector3<f64>,
    /// Euler attitude (roll, pitch, yaw), rad.
    pub theta: Vector3<f64>,
    /// Body rates (p, q, r), rad/s.
    pub omega: Vector3<f64>,
}

impl VehicleState {
    pub fn at_rest(p: Vector3<f64>) -> Self {
        Self {
            p,
            v: Vector3::zeros(),
            theta: Vector3::zeros(),
            omega: Vector3::zeros(),
        }
    }

    fn is_finite(&self) -> bool {
        self.p.iter().all(|x| x.is_finite())
            && self.v.iter().all(|x| x.is_finite())
            && self.theta.iter().all(|x| x.is_finite())
            && self.omega.iter().all(|x| x.is_finite())
    }
}

/// Collective thrust plus body torque, as produced by the inner loop.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WrenchInput {
    /// Collective thrust magnitude, N, acting along body -z.
    pub thrust: f64,
    /// Body torque, N m.
    pub torque: Vector3<f64>,
}

/// Airframe constants. `mass` is the nominal airframe-only mass; attached
/// payloads are tracked by [`World`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VehicleParams {
    /// Airframe mass, kg.
    pub mass: f64,
    /// Diagonal body inertia, kg m^2.
    pub inertia: Vector3<f64>,
    /// Gravity, m/s^2.
    pub gravity: f64,
    /// Thrust ceiling, N.
    pub t_max: f64,
    /// Torque ceiling per axis, N m.
    pub tau_max: f64,
    /// Motor arm length, m (documentation only, not used by the dynamics).
    pub arm_length: f64,
}

impl Default for VehicleParams {
    fn default() -> Self {
        Self {
            mass: 1.002,
            inertia: Vector3::new(0.010, 0.010, 0.018),
            gravity: crate::GRAVITY,
            t_max: 25.0,
            tau_max: 0.6,
            arm_length: 0.1925,
        }
    }
}

/// How an attached payload couples to the airframe.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PayloadMode {
    /// Rigidly attached point mass.
    Static,
    /// Point mass of which `mass_fraction` swings on a damped pendulum.
    Slosh(SloshParams),
}

/// Pendulum analog for liquid payloads.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SloshParams {
    /// Fraction of the payload mass that participates in the swing.
    pub mass_fraction: f64,
    /// Pendulum length, m.
    pub length: f64,
    /// Damping ratio of the swing mode.
    pub damping_ratio: f64,
}

impl Default for SloshParams {
    fn default() -> Self {
        Self {
            mass_fraction: 0.5,
            length: 0.4,
            damping_ratio: 0.05,
        }
    }
}

/// Payload description used by attach events and the gripper.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttachedPayload {
    /// Payload mass, kg.
    pub mass: f64,
    /// Attachment point in body coordinates, m.
    pub offset: Vector3<f64>,
    pub mode: PayloadMode,
}

/// Planar pendulum state for one slosh payload: world-frame swing angles
/// about the x and y horizontal axes plus their rates.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SloshState {
    pub alpha: Vector2<f64>,
    pub alpha_dot: Vector2<f64>,
}

/// Proportional ground-effect thrust amplification near the floor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundEffect {
    pub enabled: bool,
    /// Strength coefficient of the image-rotor model.
    pub rho_g: f64,
    /// Rotor radius, m.
    pub r_prop: f64,
}

impl Default for GroundEffect {
    fn default() -> Self {
        Self {
            enabled: false,
            rho_g: 1.0,
            r_prop: 0.0635,
        }
    }
}

impl GroundEffect {
    /// Thrust multiplier at the given altitude above ground (positive up).
    /// Active below five rotor radii; the altitude is floored at half a
    /// rotor radius so the multiplier stays bounded on the ground.
    pub fn multiplier(&self, z_agl: f64) -> f64 {
        if !self.enabled {
            return 1.0;
        }
        let z = z_agl.max(0.5 * self.r_prop);
        if z >= 5.0 * self.r_prop {
            return 1.0;
        }
        let ratio = self.r_prop / (4.0 * z);
        1.0 / (1.0 - self.rho_g * ratio * ratio)
    }
}

/// Linear thrust-gain decay modeling battery voltage sag.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatterySag {
    /// Fractional thrust loss per second.
    pub k: f64,
    /// Time the sag started, s.
    pub t0: f64,
}

impl BatterySag {
    /// Thrust gain factor at time `t`, floored at 0.5 so the vehicle never
    /// loses more than half its authority.
    pub fn factor(&self, t: f64) -> f64 {
        (1.0 - self.k * (t - self.t0).max(0.0)).clamp(0.5, 1.0)
    }
}

/// Environment and payload registry advanced alongside the vehicle state.
#[derive(Debug, Clone)]
pub struct World {
    /// Simulation time, s.
    pub t: f64,
    payloads: Vec<(String, AttachedPayload, SloshState)>,
    /// Constant world-frame wind acceleration bias, m/s^2.
    pub wind: Vector3<f64>,
    pub battery: Option<BatterySag>,
    pub ground_effect: GroundEffect,
    /// Thrust applied over the current plant interval, N.
    pub last_thrust: f64,
    /// Translational acceleration at the end of the last substep, m/s^2.
    pub last_vdot: Vector3<f64>,
}

impl Default for World {
    fn default() -> Self {
        Self {
            t: 0.0,
            payloads: Vec::new(),
            wind: Vector3::zeros(),
            battery: None,
            ground_effect: GroundEffect::default(),
            last_thrust: 0.0,
            last_vdot: Vector3::zeros(),
        }
    }
}

/// Simulation-aborting faults.
#[derive(Debug, Error, PartialEq)]
pub enum SimFault {
    #[error("pitch or roll crossed 90 deg at t = {t:.3} s; Euler rates are singular there")]
    GimbalLock { t: f64 },
    #[error("non-finite state produced at t = {t:.3} s")]
    NonFinite { t: f64 },
    #[error("payload id {id:?} is already attached")]
    DoubleAttach { id: String },
    #[error("no payload with id {id:?} attached")]
    UnknownPayload { id: String },
}

/// Time derivative of [`VehicleState`].
#[derive(Debug, Clone, Copy)]
pub struct StateDerivative {
    pub p_dot: Vector3<f64>,
    pub v_dot: Vector3<f64>,
    pub theta_dot: Vector3<f64>,
    pub omega_dot: Vector3<f64>,
}

impl World {
    /// Airframe plus all attached payload masses, kg.
    pub fn m_total(&self, params: &VehicleParams) -> f64 {
        params.mass + self.payloads.iter().map(|(_, p, _)| p.mass).sum::<f64>()
    }

    /// Register a payload. Refuses an id that is already attached.
    pub fn attach_payload(&mut self, id: &str, payload: AttachedPayload) -> Result<(), SimFault> {
        if self.payloads.iter().any(|(pid, _, _)| pid == id) {
            return Err(SimFault::DoubleAttach { id: id.to_owned() });
        }
        self.payloads
            .push((id.to_owned(), payload, SloshState::default()));
        Ok(())
    }

    /// Remove a payload by id.
    pub fn detach_payload(&mut self, id: &str) -> Result<AttachedPayload, SimFault> {
        match self.payloads.iter().position(|(pid, _, _)| pid == id) {
            Some(i) => Ok(self.payloads.remove(i).1),
            None => Err(SimFault::UnknownPayload { id: id.to_owned() }),
        }
    }

    pub fn payload_ids(&self) -> impl Iterator<Item = &str> {
        self.payloads.iter().map(|(id, _, _)| id.as_str())
    }

    pub fn has_payload(&self, id: &str) -> bool {
        self.payloads.iter().any(|(pid, _, _)| pid == id)
    }

    /// Slosh pendulum state of the first slosh-mode payload, if any.
    pub fn slosh_state(&self) -> Option<SloshState> {
        self.payloads.iter().find_map(|(_, p, s)| match p.mode {
            PayloadMode::Slosh(_) => Some(*s),
            PayloadMode::Static => None,
        })
    }

    /// Gravity torque about the body origin from offset payload masses.
    /// Thrust acts through the origin, so an off-center payload tilts the
    /// vehicle until the inner loop counters this torque.
    pub fn payload_gravity_torque(
        &self,
        state: &VehicleState,
        params: &VehicleParams,
    ) -> Vector3<f64> {
        let r_t = rotation(&state.theta).transpose();
        let mut tau = Vector3::zeros();
        for (_, payload, _) in &self.payloads {
            let g_body = r_t * Vector3::new(0.0, 0.0, payload.mass * params.gravity);
            tau += payload.offset.cross(&g_body);
        }
        tau
    }

    /// Advance every slosh pendulum by `h` seconds, driven by the most
    /// recent horizontal vehicle acceleration. One-substep staleness in the
    /// drive is accepted at the 1 kHz plant rate.
    pub fn step_slosh(&mut self, params: &VehicleParams, h: f64) {
        let drive = Vector2::new(self.last_vdot.x, self.last_vdot.y);
        let g = params.gravity;
        for (_, payload, slosh) in &mut self.payloads {
            let PayloadMode::Slosh(sp) = payload.mode else {
                continue;
            };
            let wn2 = g / sp.length;
            let two_zeta_wn = 2.0 * sp.damping_ratio * wn2.sqrt();
            // RK4 on the linear pendulum; the drive is held over the step.
            let f = |a: Vector2<f64>, ad: Vector2<f64>| -> (Vector2<f64>, Vector2<f64>) {
                (ad, -wn2 * a - two_zeta_wn * ad - drive / sp.length)
            };
            let (k1a, k1d) = f(slosh.alpha, slosh.alpha_dot);
            let (k2a, k2d) = f(slosh.alpha + 0.5 * h * k1a, slosh.alpha_dot + 0.5 * h * k1d);
            let (k3a, k3d) = f(slosh.alpha + 0.5 * h * k2a, slosh.alpha_dot + 0.5 * h * k2d);
            let (k4a, k4d) = f(slosh.alpha + h * k3a, slosh.alpha_dot + h * k3d);
            slosh.alpha += h / 6.0 * (k1a + 2.0 * k2a + 2.0 * k3a + k4a);
            slosh.alpha_dot += h / 6.0 * (k1d + 2.0 * k2d + 2.0 * k3d + k4d);
        }
    }
}

/// Continuous-time state derivative under the given wrench and world-frame
/// disturbance acceleration. `m_total` must already include payload mass.
pub fn derivative(
    state: &VehicleState,
    input: &WrenchInput,
    params: &VehicleParams,
    m_total: f64,
    d_w: &Vector3<f64>,
) -> StateDerivative {
    let r = rotation(&state.theta);
    let lift = r * Vector3::new(0.0, 0.0, -input.thrust / m_total);
    let v_dot = lift + Vector3::new(0.0, 0.0, params.gravity) + d_w;
    let theta_dot = euler_rate_matrix(&state.theta) * state.omega;
    let i = params.inertia;
    let i_omega = Vector3::new(i.x * state.omega.x, i.y * state.omega.y, i.z * state.omega.z);
    let momentum_rate = input.torque - state.omega.cross(&i_omega);
    let omega_dot = Vector3::new(
        momentum_rate.x / i.x,
        momentum_rate.y / i.y,
        momentum_rate.z / i.z,
    );
    StateDerivative {
        p_dot: state.v,
        v_dot,
        theta_dot,
        omega_dot,
    }
}

fn add_scaled(state: &VehicleState, k: &StateDerivative, s: f64) -> VehicleState {
    VehicleState {
        p: state.p + s * k.p_dot,
        v: state.v + s * k.v_dot,
        theta: state.theta + s * k.theta_dot,
        omega: state.omega + s * k.omega_dot,
    }
}

/// One classic RK4 step of length `h`. Input wrench and disturbance are held
/// constant across the substages. Fails on non-finite results or when roll
/// or pitch reaches 90 deg.
pub fn step_rk4(
    state: &VehicleState,
    input: &WrenchInput,
    params: &VehicleParams,
    m_total: f64,
    d_w: &Vector3<f64>,
    h: f64,
    t: f64,
) -> Result<VehicleState, SimFault> {
    let k1 = derivative(state, input, params, m_total, d_w);
    let s2 = add_scaled(state, &k1, 0.5 * h);
    let k2 = derivative(&s2, input, params, m_total, d_w);
    let s3 = add_scaled(state, &k2, 0.5 * h);
    let k3 = derivative(&s3, input, params, m_total, d_w);
    let s4 = add_scaled(state, &k3, h);
    let k4 = derivative(&s4, input, params, m_total, d_w);
    let next = VehicleState {
        p: state.p + h / 6.0 * (k1.p_dot + 2.0 * k2.p_dot + 2.0 * k3.p_dot + k4.p_dot),
        v: state.v + h / 6.0 * (k1.v_dot + 2.0 * k2.v_dot + 2.0 * k3.v_dot + k4.v_dot),
        theta: state.theta
            + h / 6.0 * (k1.theta_dot + 2.0 * k2.theta_dot + 2.0 * k3.theta_dot + k4.theta_dot),
        omega: state.omega
            + h / 6.0 * (k1.omega_dot + 2.0 * k2.omega_dot + 2.0 * k3.omega_dot + k4.omega_dot),
    };
    if !next.is_finite() {
        return Err(SimFault::NonFinite { t });
    }
    if next.theta.x.abs() >= std::f64::consts::FRAC_PI_2
        || next.theta.y.abs() >= std::f64::consts::FRAC_PI_2
    {
        return Err(SimFault::GimbalLock { t });
    }
    Ok(next)
}

/// Summed world-frame environment acceleration: ground effect, battery sag,
/// slosh reaction, and wind. Uses `world.last_thrust` as the thrust acting
/// over the current interval.
pub fn effective_disturbance(
    world: &World,
    state: &VehicleState,
    params: &VehicleParams,
) -> Vector3<f64> {
    let m_total = world.m_total(params);
    let lift_dir = rotation(&state.theta) * Vector3::new(0.0, 0.0, -1.0);
    let specific_thrust = world.last_thrust / m_total;
    let mut d = world.wind;

    let z_agl = -state.p.z;
    let ge = world.ground_effect.multiplier(z_agl);
    d += (ge - 1.0) * specific_thrust * lift_dir;

    if let Some(batt) = &world.battery {
        d += (batt.factor(world.t) - 1.0) * specific_thrust * lift_dir;
    }

    let drive = Vector2::new(world.last_vdot.x, world.last_vdot.y);
    for (_, payload, slosh) in &world.payloads {
        let PayloadMode::Slosh(sp) = payload.mode else {
            continue;
        };
        let wn2 = params.gravity / sp.length;
        let two_zeta_wn = 2.0 * sp.damping_ratio * wn2.sqrt();
        let alpha_ddot = -wn2 * slosh.alpha - two_zeta_wn * slosh.alpha_dot - drive / sp.length;
        let m_s = sp.mass_fraction * payload.mass;
        let reaction = -(m_s / m_total) * sp.length * alpha_ddot;
        d.x += reaction.x;
        d.y += reaction.y;
    }
    d
}

/// One plant substep: freeze the wrench, evaluate the environment, integrate
/// the rigid body and the slosh pendulums, refresh the acceleration memo.
pub fn advance(
    world: &mut World,
    state: &VehicleState,
    input: &WrenchInput,
    params: &VehicleParams,
    h: f64,
) -> Result<VehicleState, SimFault> {
    world.last_thrust = input.thrust;
    let m_total = world.m_total(params);
    let d_w = effective_disturbance(world, state, params);
    let next = step_rk4(state, input, params, m_total, &d_w, h, world.t)?;
    world.step_slosh(params, h);
    world.last_vdot = derivative(&next, input, params, m_total, &d_w).v_dot;
    world.t += h;
    Ok(next)
}

/// Sensor noise levels. Zero sigmas give noiseless pass-through.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseConfig {
    /// Position noise std, m.
    pub sigma_p: f64,
    /// Velocity noise std, m/s.
    pub sigma_v: f64,
    /// Accelerometer noise std, m/s^2.
    pub sigma_a: f64,
    /// Constant accelerometer bias, body frame, m/s^2.
    pub accel_bias: Vector3<f64>,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            sigma_p: 0.0,
            sigma_v: 0.0,
            sigma_a: 0.0,
            accel_bias: Vector3::zeros(),
        }
    }
}

/// One 100 Hz measurement frame.
///
/// The accelerometer channel reports the body-frame inertial acceleration,
/// `a_B = R^T V_dot_true`, plus bias and noise. This convention (rather than
/// raw specific force) is what the observer's measurement correction
/// expects; the two modules must agree bit-exactly on it. At an undisturbed
/// hover the channel reads zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SensorFrame {
    /// Timestamp, s.
    pub t: f64,
    /// Measured world position, m.
    pub p_meas: Vector3<f64>,
    /// Measured world velocity, m/s.
    pub v_meas: Vector3<f64>,
    /// Measured body-frame inertial acceleration, m/s^2.
    pub a_body_meas: Vector3<f64>,
}

/// Sample one measurement frame from the true state. `v_dot_true` is the
/// current translational acceleration (the harness keeps it in
/// `world.last_vdot`). Noise consumption order is fixed (position, velocity,
/// acceleration; x then y then z) so a given seed always yields the same
/// frames.
pub fn sense<R: Rng>(
    state: &VehicleState,
    v_dot_true: &Vector3<f64>,
    noise: &NoiseConfig,
    t: f64,
    rng: &mut R,
) -> SensorFrame {
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let mut draw3 = |sigma: f64| -> Vector3<f64> {
        // Always burn three samples per channel so noise settings do not
        // shift the stream consumed by other channels.
        let v = Vector3::new(unit.sample(rng), unit.sample(rng), unit.sample(rng));
        sigma * v
    };
    let p_noise = draw3(noise.sigma_p);
    let v_noise = draw3(noise.sigma_v);
    let a_noise = draw3(noise.sigma_a);
    let a_body = rotation(&state.theta).transpose() * v_dot_true;
    SensorFrame {
        t,
        p_meas: state.p + p_noise,
        v_meas: state.v + v_noise,
        a_body_meas: a_body + noise.accel_bias + a_noise,
    }
}
