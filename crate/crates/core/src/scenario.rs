//! Scenario file loading and validation.
//!
//! Scenarios are TOML with a mandatory `schema = 1` marker. Coordinates
//! in scenario files are human-oriented: `[x, y, altitude]` with altitude
//! positive up, converted to the internal world frame (z down) at load
//! time. Payload offsets are the exception: they are body-frame lever
//! arms (x forward, y right, z down) and pass through unchanged.
//!
//! Unknown keys are rejected rather than ignored so a typo in a tuning
//! key fails loudly instead of silently running defaults.
//!
//! ```toml
//! schema = 1
//! name = "circle-demo"
//! duration = 30.0
//! seed = 7
//! controller = "dompc"
//!
//! [reference]
//! type = "circle"          # or "hover" / "mission"
//! radius = 1.8
//! speed = 2.0
//! altitude = 1.0
//!
//! [[event]]
//! t = 5.0
//! kind = "attach"
//! id = "load"
//! mass = 0.257
//! offset = [0.05, 0.03, 0.0]
//! ```

use crate::dynamics::{
    AttachedPayload, GroundEffect, NoiseConfig, PayloadMode, SloshParams, VehicleParams,
};
use crate::inner_loop::AttitudeGains;
use crate::mission::MissionPlan;
use crate::nmpc::{NmpcConfig, NmpcModel};
use crate::observer::ObserverConfig;
use crate::pid::PidGains;
use nalgebra::Vector3;
use serde::Deserialize;
use std::path::Path;
use thiserror::Error;

pub const SCENARIO_SCHEMA: u32 = 1;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read scenario file: {0}")]
    Io(#[from] std::io::Error),
    #[error("scenario parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("unsupported scenario schema {got} (this build reads schema {SCENARIO_SCHEMA})")]
    UnsupportedSchema { got: u32 },
    #[error("invalid scenario: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ControllerKind {
    /// MPC fed with the gated disturbance estimate.
    Dompc,
    /// Same MPC flying blind on the nominal model.
    Nmpc,
    /// Cascaded PID baseline.
    Pid,
}

impl ControllerKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ControllerKind::Dompc => "dompc",
            ControllerKind::Nmpc => "nmpc",
            ControllerKind::Pid => "pid",
        }
    }

    pub fn parse(s: &str) -> Result<Self, ScenarioError> {
        match s {
            "dompc" => Ok(ControllerKind::Dompc),
            "nmpc" => Ok(ControllerKind::Nmpc),
            "pid" => Ok(ControllerKind::Pid),
            other => Err(ScenarioError::Invalid(format!(
                "unknown controller '{other}' (expected dompc, nmpc, or pid)"
            ))),
        }
    }
}

impl std::str::FromStr for ControllerKind {
    type Err = ScenarioError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::parse(s)
    }
}

impl std::fmt::Display for ControllerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Reference the controller tracks.
#[derive(Debug, Clone)]
pub enum ReferenceSpec {
    /// Hold one airborne position.
    Hover { position: Vector3<f64>, yaw: f64 },
    /// Circular trajectory with a speed ramp from standstill.
    Circle(CircleRef),
    /// Full pick-and-place mission run by the state machine.
    Mission(MissionPlan),
}

#[derive(Debug, Clone, Copy)]
pub struct CircleRef {
    pub center: [f64; 2],
    pub radius: f64,
    pub speed: f64,
    /// Flight altitude, m (positive up; stored as given).
    pub altitude: f64,
    /// Seconds over which the tangential speed ramps 0 -> speed.
    pub ramp_time: f64,
    pub yaw: f64,
}

impl CircleRef {
    /// Angle swept by time `t` under the ramped speed profile.
    fn angle(&self, t: f64) -> (f64, f64) {
        let omega_max = self.speed / self.radius;
        if self.ramp_time <= 0.0 || t >= self.ramp_time {
            let ramp_angle = 0.5 * omega_max * self.ramp_time;
            (ramp_angle + omega_max * (t - self.ramp_time.max(0.0)), omega_max)
        } else {
            let omega = omega_max * t / self.ramp_time;
            (0.5 * omega * t, omega)
        }
    }

    /// Position and velocity of the reference point at time `t`, world
    /// frame (z down).
    pub fn sample(&self, t: f64) -> (Vector3<f64>, Vector3<f64>) {
        let (a, omega) = self.angle(t.max(0.0));
        let (sin_a, cos_a) = a.sin_cos();
        let p = Vector3::new(
            self.center[0] + self.radius * cos_a,
            self.center[1] + self.radius * sin_a,
            -self.altitude,
        );
        let v = Vector3::new(
            -self.radius * omega * sin_a,
            self.radius * omega * cos_a,
            0.0,
        );
        (p, v)
    }
}

/// When an event fires.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EventTrigger {
    /// Wall time within the run, s.
    At(f64),
    /// When the mission machine fires its grasp attach/detach.
    Fsm,
}

#[derive(Debug, Clone)]
pub enum EventAction {
    Attach { id: String, payload: AttachedPayload },
    Detach { id: String },
    Wind { accel: Vector3<f64> },
    Battery { rate: f64 },
}

#[derive(Debug, Clone)]
pub struct Event {
    pub trigger: EventTrigger,
    pub action: EventAction,
}

/// Fully validated scenario, ready to run.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub name: String,
    /// One-line description shown in bundle listings.
    pub note: String,
    pub duration: f64,
    pub seed: u64,
    pub default_controller: ControllerKind,
    pub vehicle: VehicleParams,
    pub noise: NoiseConfig,
    pub observer: ObserverConfig,
    pub nmpc: NmpcConfig,
    pub model: NmpcModel,
    pub pid: PidGains,
    pub attitude: AttitudeGains,
    pub ground_effect: GroundEffect,
    pub reference: ReferenceSpec,
    pub events: Vec<Event>,
    pub log_timing: bool,
}

impl Scenario {
    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    pub fn from_toml_str(text: &str) -> Result<Self, ScenarioError> {
        let raw: RawScenario = toml::from_str(text)?;
        raw.build()
    }

    pub fn is_mission(&self) -> bool {
        matches!(self.reference, ReferenceSpec::Mission(_))
    }

    /// World-frame start pose: missions start on the ground at the
    /// origin, trajectory references start airborne on the reference.
    pub fn initial_position(&self) -> Vector3<f64> {
        match &self.reference {
            ReferenceSpec::Hover { position, .. } => *position,
            ReferenceSpec::Circle(c) => c.sample(0.0).0,
            ReferenceSpec::Mission(_) => Vector3::zeros(),
        }
    }

    pub fn reference_yaw(&self) -> f64 {
        match &self.reference {
            ReferenceSpec::Hover { yaw, .. } => *yaw,
            ReferenceSpec::Circle(c) => c.yaw,
            ReferenceSpec::Mission(plan) => plan.yaw,
        }
    }
}

fn up3_to_world(v: [f64; 3]) -> Vector3<f64> {
    Vector3::new(v[0], v[1], -v[2])
}

// Raw serde layer. Everything optional defaults to the library defaults;
// unknown keys are errors.

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawScenario {
    schema: u32,
    name: Option<String>,
    note: Option<String>,
    duration: f64,
    seed: Option<u64>,
    controller: Option<String>,
    vehicle: Option<RawVehicle>,
    noise: Option<RawNoise>,
    observer: Option<RawObserver>,
    nmpc: Option<RawNmpc>,
    pid: Option<RawPid>,
    attitude: Option<RawAttitude>,
    environment: Option<RawEnvironment>,
    reference: RawReference,
    #[serde(default)]
    event: Vec<RawEvent>,
    logging: Option<RawLogging>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawVehicle {
    mass: Option<f64>,
    inertia: Option<[f64; 3]>,
    t_max: Option<f64>,
    tau_max: Option<f64>,
    arm_length: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawNoise {
    sigma_p: Option<f64>,
    sigma_v: Option<f64>,
    sigma_a: Option<f64>,
    accel_bias: Option<[f64; 3]>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawObserver {
    q_p: Option<f64>,
    q_v: Option<f64>,
    q_d: Option<[f64; 3]>,
    r_p: Option<f64>,
    r_v: Option<f64>,
    r_a: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawNmpc {
    horizon: Option<usize>,
    dt: Option<f64>,
    q: Option<[f64; 8]>,
    qn: Option<[f64; 8]>,
    r: Option<[f64; 3]>,
    t_max: Option<f64>,
    angle_max_deg: Option<f64>,
    v_limit: Option<f64>,
    k_sqp: Option<usize>,
    tau_phi: Option<f64>,
    tau_theta: Option<f64>,
    m_nominal: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPid {
    pos_p: Option<[f64; 3]>,
    vel_p: Option<[f64; 3]>,
    vel_i: Option<[f64; 3]>,
    vel_d: Option<[f64; 3]>,
    integral_limit: Option<[f64; 3]>,
    v_sp_limit: Option<f64>,
    accel_limit: Option<[f64; 3]>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawAttitude {
    kp: Option<[f64; 3]>,
    kd: Option<[f64; 3]>,
    yaw_rate_limit: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEnvironment {
    ground_effect: Option<RawGroundEffect>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGroundEffect {
    rho_g: Option<f64>,
    r_prop: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawReference {
    #[serde(rename = "type")]
    kind: String,
    // hover
    position: Option<[f64; 3]>,
    // circle
    center: Option<[f64; 2]>,
    radius: Option<f64>,
    speed: Option<f64>,
    altitude: Option<f64>,
    ramp_time: Option<f64>,
    // mission
    grasp_point: Option<[f64; 3]>,
    release_point: Option<[f64; 3]>,
    cruise_altitude: Option<f64>,
    #[serde(default)]
    approach_waypoints: Vec<[f64; 3]>,
    cruise_speed: Option<f64>,
    arrival_tolerance: Option<f64>,
    hold_time: Option<f64>,
    inflate_time: Option<f64>,
    deflate_time: Option<f64>,
    state_timeout: Option<f64>,
    land_altitude: Option<f64>,
    land_hold: Option<f64>,
    // shared
    yaw: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSlosh {
    mass_fraction: Option<f64>,
    length: Option<f64>,
    damping_ratio: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEvent {
    kind: String,
    t: Option<f64>,
    trigger: Option<String>,
    id: Option<String>,
    mass: Option<f64>,
    offset: Option<[f64; 3]>,
    slosh: Option<RawSlosh>,
    accel: Option<[f64; 3]>,
    rate: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLogging {
    timing: Option<bool>,
}

impl RawScenario {
    fn build(self) -> Result<Scenario, ScenarioError> {
        if self.schema != SCENARIO_SCHEMA {
            return Err(ScenarioError::UnsupportedSchema { got: self.schema });
        }
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return Err(ScenarioError::Invalid("duration must be positive".into()));
        }

        let mut vehicle = VehicleParams::default();
        if let Some(v) = &self.vehicle {
            if let Some(m) = v.mass {
                vehicle.mass = m;
            }
            if let Some(i) = v.inertia {
                vehicle.inertia = Vector3::from(i);
            }
            if let Some(t) = v.t_max {
                vehicle.t_max = t;
            }
            if let Some(t) = v.tau_max {
                vehicle.tau_max = t;
            }
            if let Some(a) = v.arm_length {
                vehicle.arm_length = a;
            }
        }
        if !(vehicle.mass > 0.0) || vehicle.inertia.iter().any(|i| *i <= 0.0) {
            return Err(ScenarioError::Invalid(
                "vehicle mass and inertia must be positive".into(),
            ));
        }
        if !(vehicle.t_max > 0.0 && vehicle.tau_max > 0.0) {
            return Err(ScenarioError::Invalid(
                "actuator limits must be positive".into(),
            ));
        }

        let mut noise = NoiseConfig::default();
        if let Some(n) = &self.noise {
            if let Some(s) = n.sigma_p {
                noise.sigma_p = s;
            }
            if let Some(s) = n.sigma_v {
                noise.sigma_v = s;
            }
            if let Some(s) = n.sigma_a {
                noise.sigma_a = s;
            }
            if let Some(b) = n.accel_bias {
                noise.accel_bias = Vector3::from(b);
            }
        }
        if noise.sigma_p < 0.0 || noise.sigma_v < 0.0 || noise.sigma_a < 0.0 {
            return Err(ScenarioError::Invalid(
                "noise magnitudes must be >= 0".into(),
            ));
        }

        let mut observer = ObserverConfig::default();
        if let Some(o) = &self.observer {
            if let Some(x) = o.q_p {
                observer.q_p = x;
            }
            if let Some(x) = o.q_v {
                observer.q_v = x;
            }
            if let Some(x) = o.q_d {
                observer.q_d = x;
            }
            if let Some(x) = o.r_p {
                observer.r_p = x;
            }
            if let Some(x) = o.r_v {
                observer.r_v = x;
            }
            if let Some(x) = o.r_a {
                observer.r_a = x;
            }
        }

        let mut nmpc = NmpcConfig::default();
        let mut model = NmpcModel::default();
        model.m_nominal = vehicle.mass;
        nmpc.t_max = vehicle.t_max;
        if let Some(n) = &self.nmpc {
            if let Some(x) = n.horizon {
                nmpc.horizon = x;
            }
            if let Some(x) = n.dt {
                nmpc.dt = x;
            }
            if let Some(x) = n.q {
                nmpc.q_weights = x;
            }
            if let Some(x) = n.qn {
                nmpc.qn_weights = x;
            }
            if let Some(x) = n.r {
                nmpc.r_weights = x;
            }
            if let Some(x) = n.t_max {
                nmpc.t_max = x;
            }
            if let Some(x) = n.angle_max_deg {
                nmpc.angle_max = x.to_radians();
            }
            nmpc.v_limit = n.v_limit.or(nmpc.v_limit);
            if let Some(x) = n.k_sqp {
                nmpc.k_sqp = x;
            }
            if let Some(x) = n.tau_phi {
                model.tau_phi = x;
            }
            if let Some(x) = n.tau_theta {
                model.tau_theta = x;
            }
            if let Some(x) = n.m_nominal {
                model.m_nominal = x;
            }
        }
        nmpc.validate()
            .map_err(|e| ScenarioError::Invalid(e.to_string()))?;
        if !(model.tau_phi > 0.0 && model.tau_theta > 0.0 && model.m_nominal > 0.0) {
            return Err(ScenarioError::Invalid(
                "prediction model constants must be positive".into(),
            ));
        }

        let mut pid = PidGains {
            t_max: vehicle.t_max,
            angle_max: nmpc.angle_max,
            ..PidGains::default()
        };
        if let Some(p) = &self.pid {
            if let Some(x) = p.pos_p {
                pid.pos_p = Vector3::from(x);
            }
            if let Some(x) = p.vel_p {
                pid.vel_p = Vector3::from(x);
            }
            if let Some(x) = p.vel_i {
                pid.vel_i = Vector3::from(x);
            }
            if let Some(x) = p.vel_d {
                pid.vel_d = Vector3::from(x);
            }
            if let Some(x) = p.integral_limit {
                pid.integral_limit = Vector3::from(x);
            }
            if let Some(x) = p.v_sp_limit {
                pid.v_sp_limit = x;
            }
            if let Some(x) = p.accel_limit {
                pid.accel_limit = Vector3::from(x);
            }
        }
        pid.validate().map_err(ScenarioError::Invalid)?;

        let mut attitude = AttitudeGains::default();
        if let Some(a) = &self.attitude {
            if let Some(x) = a.kp {
                attitude.kp = Vector3::from(x);
            }
            if let Some(x) = a.kd {
                attitude.kd = Vector3::from(x);
            }
            if let Some(x) = a.yaw_rate_limit {
                attitude.yaw_rate_limit = x;
            }
        }
        if attitude.kp.iter().any(|g| *g <= 0.0) || attitude.kd.iter().any(|g| *g <= 0.0) {
            return Err(ScenarioError::Invalid(
                "attitude gains must be positive".into(),
            ));
        }

        let mut ground_effect = GroundEffect::default();
        if let Some(env) = &self.environment {
            if let Some(ge) = &env.ground_effect {
                ground_effect.enabled = true;
                if let Some(x) = ge.rho_g {
                    ground_effect.rho_g = x;
                }
                if let Some(x) = ge.r_prop {
                    ground_effect.r_prop = x;
                }
                if !(ground_effect.rho_g > 0.0 && ground_effect.r_prop > 0.0) {
                    return Err(ScenarioError::Invalid(
                        "ground effect parameters must be positive".into(),
                    ));
                }
            }
        }

        let reference = self.reference.build()?;

        let mut events = Vec::new();
        for (idx, raw) in self.event.iter().enumerate() {
            events.push(build_event(raw, idx, &reference)?);
        }
        // Duplicate FSM attach events would be unreachable: the machine
        // fires attach at most once.
        let fsm_attaches = events
            .iter()
            .filter(|e| {
                e.trigger == EventTrigger::Fsm && matches!(e.action, EventAction::Attach { .. })
            })
            .count();
        if fsm_attaches > 1 {
            return Err(ScenarioError::Invalid(
                "at most one grasp-triggered attach event is reachable".into(),
            ));
        }
        if fsm_attaches == 0
            && events
                .iter()
                .any(|e| e.trigger == EventTrigger::Fsm)
        {
            // Detach-only FSM wiring is fine; nothing to check here. The
            // guard below (mission reference required) still applies.
        }
        if events.iter().any(|e| e.trigger == EventTrigger::Fsm)
            && !matches!(reference, ReferenceSpec::Mission(_))
        {
            return Err(ScenarioError::Invalid(
                "grasp-triggered events require a mission reference".into(),
            ));
        }

        let default_controller = match self.controller.as_deref() {
            Some(s) => ControllerKind::parse(s)?,
            None => ControllerKind::Dompc,
        };

        Ok(Scenario {
            name: self.name.unwrap_or_else(|| "unnamed".into()),
            note: self.note.unwrap_or_default(),
            duration: self.duration,
            seed: self.seed.unwrap_or(0),
            default_controller,
            vehicle,
            noise,
            observer,
            nmpc,
            model,
            pid,
            attitude,
            ground_effect,
            reference,
            events,
            log_timing: self.logging.and_then(|l| l.timing).unwrap_or(false),
        })
    }
}

impl RawReference {
    fn build(&self) -> Result<ReferenceSpec, ScenarioError> {
        match self.kind.as_str() {
            "hover" => {
                let position = self.position.ok_or_else(|| {
                    ScenarioError::Invalid("hover reference requires position".into())
                })?;
                if position[2] <= 0.0 {
                    return Err(ScenarioError::Invalid(
                        "hover altitude must be positive".into(),
                    ));
                }
                Ok(ReferenceSpec::Hover {
                    position: up3_to_world(position),
                    yaw: self.yaw.unwrap_or(0.0),
                })
            }
            "circle" => {
                let radius = self
                    .radius
                    .ok_or_else(|| ScenarioError::Invalid("circle requires radius".into()))?;
                let speed = self
                    .speed
                    .ok_or_else(|| ScenarioError::Invalid("circle requires speed".into()))?;
                let altitude = self
                    .altitude
                    .ok_or_else(|| ScenarioError::Invalid("circle requires altitude".into()))?;
                if !(radius > 0.0 && speed >= 0.0 && altitude > 0.0) {
                    return Err(ScenarioError::Invalid(
                        "circle radius/altitude must be positive, speed >= 0".into(),
                    ));
                }
                Ok(ReferenceSpec::Circle(CircleRef {
                    center: self.center.unwrap_or([0.0, 0.0]),
                    radius,
                    speed,
                    altitude,
                    ramp_time: self.ramp_time.unwrap_or(3.0),
                    yaw: self.yaw.unwrap_or(0.0),
                }))
            }
            "mission" => {
                let grasp = self.grasp_point.ok_or_else(|| {
                    ScenarioError::Invalid("mission requires grasp_point".into())
                })?;
                let release = self.release_point.ok_or_else(|| {
                    ScenarioError::Invalid("mission requires release_point".into())
                })?;
                let defaults = MissionPlan::default();
                let plan = MissionPlan {
                    grasp_point: up3_to_world(grasp),
                    release_point: up3_to_world(release),
                    cruise_altitude: self.cruise_altitude.unwrap_or(defaults.cruise_altitude),
                    approach_waypoints: self
                        .approach_waypoints
                        .iter()
                        .map(|w| up3_to_world(*w))
                        .collect(),
                    yaw: self.yaw.unwrap_or(0.0),
                    cruise_speed: self.cruise_speed.unwrap_or(defaults.cruise_speed),
                    arrival_tolerance: self
                        .arrival_tolerance
                        .unwrap_or(defaults.arrival_tolerance),
                    hold_time: self.hold_time.unwrap_or(defaults.hold_time),
                    inflate_time: self.inflate_time.unwrap_or(defaults.inflate_time),
                    deflate_time: self.deflate_time.unwrap_or(defaults.deflate_time),
                    state_timeout: self.state_timeout.unwrap_or(defaults.state_timeout),
                    land_altitude: self.land_altitude.unwrap_or(defaults.land_altitude),
                    land_hold: self.land_hold.unwrap_or(defaults.land_hold),
                };
                plan.validate().map_err(ScenarioError::Invalid)?;
                Ok(ReferenceSpec::Mission(plan))
            }
            other => Err(ScenarioError::Invalid(format!(
                "unknown reference type '{other}'"
            ))),
        }
    }
}

fn build_event(
    raw: &RawEvent,
    idx: usize,
    _reference: &ReferenceSpec,
) -> Result<Event, ScenarioError> {
    let trigger = match (raw.t, raw.trigger.as_deref()) {
        (Some(t), None) => {
            if !(t >= 0.0) {
                return Err(ScenarioError::Invalid(format!(
                    "event {idx}: time must be >= 0"
                )));
            }
            EventTrigger::At(t)
        }
        (None, Some("fsm")) => EventTrigger::Fsm,
        (None, Some(other)) => {
            return Err(ScenarioError::Invalid(format!(
                "event {idx}: unknown trigger '{other}' (only 'fsm')"
            )))
        }
        (Some(_), Some(_)) => {
            return Err(ScenarioError::Invalid(format!(
                "event {idx}: give either t or trigger, not both"
            )))
        }
        (None, None) => {
            return Err(ScenarioError::Invalid(format!(
                "event {idx}: needs t or trigger = \"fsm\""
            )))
        }
    };

    let action = match raw.kind.as_str() {
        "attach" => {
            let mass = raw.mass.ok_or_else(|| {
                ScenarioError::Invalid(format!("event {idx}: attach requires mass"))
            })?;
            if !(mass > 0.0) {
                return Err(ScenarioError::Invalid(format!(
                    "event {idx}: attach mass must be positive"
                )));
            }
            let mode = match &raw.slosh {
                None => PayloadMode::Static,
                Some(s) => {
                    let defaults = SloshParams::default();
                    let params = SloshParams {
                        mass_fraction: s.mass_fraction.unwrap_or(defaults.mass_fraction),
                        length: s.length.unwrap_or(defaults.length),
                        damping_ratio: s.damping_ratio.unwrap_or(defaults.damping_ratio),
                    };
                    if !(params.mass_fraction > 0.0 && params.mass_fraction <= 1.0) {
                        return Err(ScenarioError::Invalid(format!(
                            "event {idx}: slosh mass_fraction must be in (0, 1]"
                        )));
                    }
                    if !(params.length > 0.0 && params.damping_ratio >= 0.0) {
                        return Err(ScenarioError::Invalid(format!(
                            "event {idx}: slosh length must be positive"
                        )));
                    }
                    PayloadMode::Slosh(params)
                }
            };
            EventAction::Attach {
                id: raw.id.clone().unwrap_or_else(|| format!("payload{idx}")),
                payload: AttachedPayload {
                    mass,
                    offset: raw.offset.map(Vector3::from).unwrap_or_else(Vector3::zeros),
                    mode,
                },
            }
        }
        "detach" => EventAction::Detach {
            id: raw.id.clone().ok_or_else(|| {
                ScenarioError::Invalid(format!("event {idx}: detach requires id"))
            })?,
        },
        "wind" => {
            let accel = raw.accel.ok_or_else(|| {
                ScenarioError::Invalid(format!("event {idx}: wind requires accel"))
            })?;
            EventAction::Wind {
                accel: up3_to_world(accel),
            }
        }
        "battery" => {
            let rate = raw.rate.ok_or_else(|| {
                ScenarioError::Invalid(format!("event {idx}: battery requires rate"))
            })?;
            if !(rate >= 0.0) {
                return Err(ScenarioError::Invalid(format!(
                    "event {idx}: battery rate must be >= 0"
                )));
            }
            EventAction::Battery { rate }
        }
        other => {
            return Err(ScenarioError::Invalid(format!(
                "event {idx}: unknown kind '{other}'"
            )))
        }
    };
    Ok(Event { trigger, action })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    const MINIMAL: &str = r#"
schema = 1
duration = 10.0

[reference]
type = "hover"
position = [0.0, 0.0, 1.0]
"#;

    #[test]
    fn minimal_hover_scenario_loads_with_defaults() {
        let s = Scenario::from_toml_str(MINIMAL).unwrap();
        assert_eq!(s.seed, 0);
        assert_eq!(s.default_controller, ControllerKind::Dompc);
        assert_relative_eq!(s.vehicle.mass, 1.002);
        match s.reference {
            ReferenceSpec::Hover { position, .. } => {
                assert_relative_eq!(position[2], -1.0);
            }
            _ => panic!("expected hover"),
        }
        assert!(!s.log_timing);
        assert!(!s.ground_effect.enabled);
    }

    #[test]
    fn schema_mismatch_is_rejected() {
        let text = MINIMAL.replace("schema = 1", "schema = 2");
        assert!(matches!(
            Scenario::from_toml_str(&text),
            Err(ScenarioError::UnsupportedSchema { got: 2 })
        ));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = format!("{MINIMAL}\n[nmpc]\nhorizonn = 25\n");
        assert!(matches!(
            Scenario::from_toml_str(&text),
            Err(ScenarioError::Parse(_))
        ));
    }

    #[test]
    fn circle_sampling_ramps_to_speed() {
        let text = r#"
schema = 1
duration = 30.0
seed = 7

[reference]
type = "circle"
radius = 1.8
speed = 2.0
altitude = 1.0
ramp_time = 3.0
"#;
        let s = Scenario::from_toml_str(text).unwrap();
        let ReferenceSpec::Circle(c) = &s.reference else {
            panic!("expected circle");
        };
        let (p0, v0) = c.sample(0.0);
        assert_relative_eq!(p0[0], 1.8);
        assert_relative_eq!(p0[2], -1.0);
        assert_relative_eq!(v0.norm(), 0.0);
        let (_, v_end) = c.sample(10.0);
        assert_relative_eq!(v_end.norm(), 2.0, epsilon = 1e-12);
        // Speed halfway through the ramp is half the cruise speed.
        let (_, v_mid) = c.sample(1.5);
        assert_relative_eq!(v_mid.norm(), 1.0, epsilon = 1e-12);
        // Continuity across the ramp end.
        let (p_a, _) = c.sample(3.0 - 1e-9);
        let (p_b, _) = c.sample(3.0 + 1e-9);
        assert!((p_a - p_b).norm() < 1e-6);
    }

    #[test]
    fn events_parse_and_convert_frames() {
        let text = r#"
schema = 1
duration = 30.0

[reference]
type = "mission"
grasp_point = [1.2, 0.0, 0.35]
release_point = [-1.2, 0.6, 0.35]
cruise_altitude = 1.0

[[event]]
trigger = "fsm"
kind = "attach"
id = "object"
mass = 0.161

[[event]]
trigger = "fsm"
kind = "detach"
id = "object"

[[event]]
t = 2.0
kind = "wind"
accel = [0.3, 0.0, 0.1]
"#;
        let s = Scenario::from_toml_str(text).unwrap();
        assert_eq!(s.events.len(), 3);
        let ReferenceSpec::Mission(plan) = &s.reference else {
            panic!("expected mission");
        };
        assert_relative_eq!(plan.grasp_point[2], -0.35);
        match &s.events[2].action {
            EventAction::Wind { accel } => {
                assert_relative_eq!(accel[2], -0.1);
            }
            _ => panic!("expected wind"),
        }
        assert_eq!(s.events[0].trigger, EventTrigger::Fsm);
    }

    #[test]
    fn fsm_events_require_mission_reference() {
        let text = r#"
schema = 1
duration = 10.0

[reference]
type = "hover"
position = [0.0, 0.0, 1.0]

[[event]]
trigger = "fsm"
kind = "attach"
mass = 0.1
"#;
        assert!(matches!(
            Scenario::from_toml_str(text),
            Err(ScenarioError::Invalid(_))
        ));
    }

    #[test]
    fn bad_event_wiring_is_rejected() {
        let both = r#"
schema = 1
duration = 10.0

[reference]
type = "hover"
position = [0.0, 0.0, 1.0]

[[event]]
t = 1.0
trigger = "fsm"
kind = "attach"
mass = 0.1
"#;
        assert!(Scenario::from_toml_str(both).is_err());

        let neither = r#"
schema = 1
duration = 10.0

[reference]
type = "hover"
position = [0.0, 0.0, 1.0]

[[event]]
kind = "attach"
mass = 0.1
"#;
        assert!(Scenario::from_toml_str(neither).is_err());
    }

    #[test]
    fn slosh_payload_parses() {
        let text = r#"
schema = 1
duration = 40.0

[reference]
type = "mission"
grasp_point = [1.0, 0.0, 0.3]
release_point = [-1.0, 0.0, 0.3]

[[event]]
trigger = "fsm"
kind = "attach"
id = "bottle"
mass = 0.110
slosh = { mass_fraction = 0.5, length = 0.4 }
"#;
        let s = Scenario::from_toml_str(text).unwrap();
        match &s.events[0].action {
            EventAction::Attach { payload, .. } => match payload.mode {
                PayloadMode::Slosh(p) => {
                    assert_relative_eq!(p.mass_fraction, 0.5);
                    assert_relative_eq!(p.damping_ratio, 0.05);
                }
                _ => panic!("expected slosh mode"),
            },
            _ => panic!("expected attach"),
        }
    }

    #[test]
    fn controller_names_round_trip() {
        for kind in [ControllerKind::Dompc, ControllerKind::Nmpc, ControllerKind::Pid] {
            assert_eq!(ControllerKind::parse(kind.as_str()).unwrap(), kind);
        }
        assert!(ControllerKind::parse("lqr").is_err());
    }
}
