//! Closed-loop simulation driver: plant at 1 kHz, control at 100 Hz,
//! deterministic per seed.
//!
//! Each control tick runs in a fixed order: apply due timed events,
//! sample sensors, cycle the observer (predict over the previous
//! interval, then fuse), step the mission machine or trajectory
//! reference, run the selected controller, log one row, then advance
//! the plant ten substeps under the frozen command. Solver wall time is
//! measured only when the scenario asks for it, and it is the one
//! quantity allowed to differ between repeated runs; everything else is
//! reproducible bit for bit.
//!
//! There is no ground-contact model. Missions start resting at the
//! origin and the run ends when the machine reaches its terminal phase
//! (or at the configured duration); trajectory references start
//! airborne on the reference point.

use crate::dynamics::{
    advance, sense, BatterySag, SensorFrame, VehicleState, World, WrenchInput,
};
use crate::inner_loop::attitude_control;
use crate::math::rotation;
use crate::mission::{FsmOutput, GripperCommand, MissionState};
use crate::nmpc::{AttitudeThrustCommand, NmpcController, ReducedState, SolveStats};
use crate::observer::{DisturbanceObserver, ObserverInput};
use crate::pid::PidController;
use crate::qp::QpStatus;
use crate::scenario::{
    ControllerKind, Event, EventAction, EventTrigger, ReferenceSpec, Scenario,
};
use nalgebra::{Vector2, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::Serialize;
use std::time::Instant;
use thiserror::Error;

/// Controller period, s.
pub const CONTROL_DT: f64 = 0.01;
/// Plant integration step, s.
pub const PLANT_DT: f64 = 0.001;
/// Plant substeps per control tick.
pub const SUBSTEPS: usize = 10;

/// Acceleration of the streamed mission setpoint out of a stop, m/s^2.
/// Kept below the tilt authority at mission speeds so the vehicle can
/// follow the ramp without saturating.
pub const CARROT_ACCEL: f64 = 1.0;

/// Altitude-error band and dwell used for the settling-time metric.
pub const SETTLE_BAND_M: f64 = 0.05;
pub const SETTLE_DWELL_S: f64 = 2.0;
/// Transient skipped after the last mass change before steady-state
/// statistics start.
pub const STEADY_SKIP_S: f64 = 3.0;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("harness setup failed: {0}")]
    Setup(String),
}

/// One 100 Hz log sample. Field order matches the CSV contract.
#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub t: f64,
    /// Mission phase name, or "track" for trajectory references.
    pub phase: &'static str,
    /// Estimate gate: false only while taking off or landing.
    pub gate: bool,
    pub p: Vector3<f64>,
    pub v: Vector3<f64>,
    pub theta: Vector3<f64>,
    pub p_ref: Vector3<f64>,
    /// Tracking error `p - p_ref`, world frame (positive z = below the
    /// reference).
    pub err: Vector3<f64>,
    /// Model-defect disturbance reconstructed from the true acceleration,
    /// world frame.
    pub d_true_w: Vector3<f64>,
    pub d_hat_w: Vector3<f64>,
    pub d_hat_b: Vector3<f64>,
    pub thrust_cmd: f64,
    pub phi_cmd: f64,
    pub theta_cmd: f64,
    pub sqp_iters: usize,
    pub qp_status: &'static str,
    pub qp_iters: usize,
    /// Any actuator hit its limit during the following interval.
    pub sat: bool,
    pub gripper: &'static str,
    /// Slosh pendulum deflection angles, rad; zero without a slosh payload.
    pub slosh: Vector2<f64>,
    /// Empty unless this row records an aborting fault.
    pub fault: String,
    /// Controller wall time, recorded only when timing is enabled.
    pub solve_us: Option<u64>,
}

/// Fixed column order of the run CSV. `solve_time_us` is appended only
/// when the scenario enables timing.
pub const CSV_COLUMNS: &str = "t,phase,gate,px,py,pz,vx,vy,vz,roll,pitch,yaw,\
ref_x,ref_y,ref_z,err_x,err_y,err_z,\
d_true_wx,d_true_wy,d_true_wz,d_hat_wx,d_hat_wy,d_hat_wz,d_hat_bx,d_hat_by,d_hat_bz,\
thrust_cmd,phi_cmd,theta_cmd,sqp_iters,qp_status,qp_iters,sat,gripper,slosh_ax,slosh_ay,fault";

/// Render rows to CSV text. Floats use fixed 9-decimal formatting so
/// identical runs produce identical bytes.
pub fn csv_string(rows: &[LogRow], with_timing: bool) -> String {
    use std::fmt::Write;
    let mut out = String::with_capacity(rows.len() * 360 + 400);
    out.push_str(CSV_COLUMNS);
    if with_timing {
        out.push_str(",solve_time_us");
    }
    out.push('\n');
    for r in rows {
        let v = |x: f64| format!("{x:.9}");
        let _ = write!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            v(r.t),
            r.phase,
            u8::from(r.gate),
            v(r.p.x),
            v(r.p.y),
            v(r.p.z),
            v(r.v.x),
            v(r.v.y),
            v(r.v.z),
            v(r.theta.x),
            v(r.theta.y),
            v(r.theta.z),
            v(r.p_ref.x),
            v(r.p_ref.y),
            v(r.p_ref.z),
            v(r.err.x),
            v(r.err.y),
            v(r.err.z),
            v(r.d_true_w.x),
            v(r.d_true_w.y),
            v(r.d_true_w.z),
            v(r.d_hat_w.x),
            v(r.d_hat_w.y),
            v(r.d_hat_w.z),
            v(r.d_hat_b.x),
            v(r.d_hat_b.y),
            v(r.d_hat_b.z),
            v(r.thrust_cmd),
            v(r.phi_cmd),
            v(r.theta_cmd),
            r.sqp_iters,
            r.qp_status,
            r.qp_iters,
            u8::from(r.sat),
            r.gripper,
            v(r.slosh.x),
            v(r.slosh.y),
            r.fault,
        );
        if with_timing {
            let _ = write!(out, ",{}", r.solve_us.unwrap_or(0));
        }
        out.push('\n');
    }
    out
}

/// Mission-level outcomes, present only for mission scenarios.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct MissionSummary {
    pub completed: bool,
    pub aborted: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub attach_time_s: Option<f64>,
    /// Arrival at the release point (entry into the release hover).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delivery_time_s: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub done_time_s: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_lateral_err_post_grasp: Option<f64>,
}

/// Summary statistics over the gated analysis window.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct RunMetrics {
    /// Per-axis tracking RMSE, m.
    pub rmse: [f64; 3],
    /// Per-axis worst tracking error magnitude, m.
    pub max_abs_err: [f64; 3],
    /// Mean vertical error over the steady window, m; positive means the
    /// vehicle holds below the reference.
    pub alt_offset_m: f64,
    /// Seconds from the last grasp until the altitude error stays inside
    /// the settling band.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub settling_time_s: Option<f64>,
    /// Mean per-axis |estimate - reconstructed disturbance| over the
    /// steady window, m/s^2.
    pub d_est_err_ss: [f64; 3],
    /// Controller wall-time stats, zero when timing is disabled.
    pub solve_time_mean_us: f64,
    pub solve_time_max_us: f64,
    /// Rows in the gated analysis window.
    pub n_window: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mission: Option<MissionSummary>,
}

impl RunMetrics {
    /// Deterministic scalar view used for expectation checks and the
    /// comparison table. Wall-time statistics are deliberately absent.
    pub fn named_values(&self) -> Vec<(String, f64)> {
        let mut out = vec![
            ("rmse_x".into(), self.rmse[0]),
            ("rmse_y".into(), self.rmse[1]),
            ("rmse_z".into(), self.rmse[2]),
            ("max_err_x".into(), self.max_abs_err[0]),
            ("max_err_y".into(), self.max_abs_err[1]),
            ("max_err_z".into(), self.max_abs_err[2]),
            ("alt_offset_m".into(), self.alt_offset_m),
            ("d_err_x".into(), self.d_est_err_ss[0]),
            ("d_err_y".into(), self.d_est_err_ss[1]),
            ("d_err_z".into(), self.d_est_err_ss[2]),
        ];
        if let Some(s) = self.settling_time_s {
            out.push(("settling_time_s".into(), s));
        }
        if let Some(m) = &self.mission {
            out.push(("mission_completed".into(), f64::from(u8::from(m.completed))));
            out.push(("mission_aborted".into(), f64::from(u8::from(m.aborted))));
            if let Some(x) = m.attach_time_s {
                out.push(("attach_time_s".into(), x));
            }
            if let Some(x) = m.delivery_time_s {
                out.push(("delivery_time_s".into(), x));
            }
            if let Some(x) = m.done_time_s {
                out.push(("done_time_s".into(), x));
            }
            if let Some(x) = m.max_lateral_err_post_grasp {
                out.push(("max_lateral_post_grasp_m".into(), x));
            }
        }
        out
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("metrics serialize")
    }
}

/// Everything produced by one closed-loop run.
#[derive(Debug)]
pub struct RunOutput {
    pub scenario_name: String,
    pub controller: ControllerKind,
    pub seed: u64,
    pub rows: Vec<LogRow>,
    /// Absent when the run aborted before any analyzable window existed.
    pub metrics: Option<RunMetrics>,
    /// Fault message when the run aborted.
    pub fault: Option<String>,
}

enum ControlLaw {
    Mpc {
        ctrl: Box<NmpcController>,
        use_estimate: bool,
    },
    Pid(Box<PidController>),
}

fn qp_status_str(stats: &SolveStats) -> &'static str {
    if stats.fallback {
        return "fallback";
    }
    match stats.qp_status {
        QpStatus::Optimal => "optimal",
        QpStatus::MaxIterations => "max_iter",
        QpStatus::Infeasible => "infeasible",
    }
}


/// Run one scenario under one controller.
pub fn run(scenario: &Scenario, controller: ControllerKind) -> Result<RunOutput, HarnessError> {
    let params = scenario.vehicle;
    let mut obs_cfg = scenario.observer;
    obs_cfg.dt = CONTROL_DT;
    obs_cfg.gravity = params.gravity;

    let mut law = match controller {
        ControllerKind::Dompc | ControllerKind::Nmpc => ControlLaw::Mpc {
            ctrl: Box::new(
                NmpcController::new(scenario.model, scenario.nmpc.clone())
                    .map_err(|e| HarnessError::Setup(e.to_string()))?,
            ),
            use_estimate: controller == ControllerKind::Dompc,
        },
        ControllerKind::Pid => ControlLaw::Pid(Box::new(
            PidController::new(scenario.pid.clone(), scenario.model.m_nominal, params.gravity)
                .map_err(HarnessError::Setup)?,
        )),
    };

    let mut world = World::default();
    world.ground_effect = scenario.ground_effect;
    let mut state = VehicleState::at_rest(scenario.initial_position());
    state.theta.z = scenario.reference_yaw();

    let mut mission = match &scenario.reference {
        ReferenceSpec::Mission(plan) => Some((MissionState::new(plan), plan.clone())),
        _ => None,
    };
    // Streamed mission setpoint: starts at the home point and moves toward
    // the active waypoint at cruise speed, so transit error measures
    // tracking quality rather than leg length. Speed ramps at
    // [`CARROT_ACCEL`] out of every stop so legs start without a velocity
    // step the vehicle cannot match.
    let mut carrot = state.p;
    let mut carrot_speed = 0.0_f64;
    // Trajectory references start airborne; pretend the vehicle was
    // hovering before the log started so the first sensed acceleration
    // and reconstructed disturbance are consistent with that history.
    if mission.is_none() {
        world.last_thrust = params.mass * params.gravity;
    }

    let mut rng = ChaCha12Rng::seed_from_u64(scenario.seed);
    let mut observer = DisturbanceObserver::new(obs_cfg);

    let mut pending: Vec<(bool, Event)> = scenario
        .events
        .iter()
        .map(|e| (false, e.clone()))
        .collect();
    let mut mass_event_ts: Vec<f64> = Vec::new();
    let mut attach_ts: Vec<f64> = Vec::new();

    let n_ticks = (scenario.duration / CONTROL_DT).round().max(1.0) as usize;
    let mut rows: Vec<LogRow> = Vec::with_capacity(n_ticks + 1);
    let mut fault: Option<String> = None;

    // Thrust and attitude of the interval that produced the incoming
    // measurement; cycled after each controller step.
    let mut prev_thrust = world.last_thrust;
    let mut prev_theta = state.theta;

    'ticks: for k in 0..n_ticks {
        let t = k as f64 * CONTROL_DT;

        // Timed events due at this tick take effect for the coming
        // interval.
        for (applied, ev) in pending.iter_mut() {
            if *applied {
                continue;
            }
            let EventTrigger::At(et) = ev.trigger else {
                continue;
            };
            if et > t + 1e-9 {
                continue;
            }
            *applied = true;
            match &ev.action {
                EventAction::Attach { id, payload } => {
                    if let Err(f) = world.attach_payload(id, *payload) {
                        rows.push(fault_row(t, &state, f.to_string()));
                        fault = Some(f.to_string());
                        break 'ticks;
                    }
                    mass_event_ts.push(t);
                    attach_ts.push(t);
                }
                EventAction::Detach { id } => {
                    if let Err(f) = world.detach_payload(id) {
                        rows.push(fault_row(t, &state, f.to_string()));
                        fault = Some(f.to_string());
                        break 'ticks;
                    }
                    mass_event_ts.push(t);
                }
                EventAction::Wind { accel } => world.wind = *accel,
                EventAction::Battery { rate } => {
                    world.battery = Some(BatterySag { k: *rate, t0: et })
                }
            }
        }

        // Sense, then cycle the observer over the elapsed interval.
        let frame: SensorFrame = sense(&state, &world.last_vdot, &scenario.noise, t, &mut rng);
        if k == 0 {
            observer.init_from(&frame);
        } else {
            let predict_input = ObserverInput {
                u_thrust: prev_thrust,
                m_nominal: scenario.model.m_nominal,
                theta: prev_theta,
            };
            let update_input = ObserverInput {
                u_thrust: prev_thrust,
                m_nominal: scenario.model.m_nominal,
                theta: state.theta,
            };
            let step = observer
                .predict(&predict_input)
                .and_then(|_| observer.update(&frame, &update_input).map(|_| ()));
            if let Err(e) = step {
                rows.push(fault_row(t, &state, e.to_string()));
                fault = Some(e.to_string());
                break 'ticks;
            }
        }

        // Mission machine or trajectory reference.
        let mut done = false;
        let (ref_p, yaw_ref, gate, phase, gripper): (Vector3<f64>, f64, bool, &'static str, &'static str) =
            match &mut mission {
                Some((ms, plan)) => {
                    let (next, out): (MissionState, FsmOutput) =
                        crate::mission::fsm_step(ms, plan, &observer.p_est(), t);
                    if out.fire_attach {
                        if let Err(f) = fire_fsm_event(&mut pending, &mut world, true) {
                            rows.push(fault_row(t, &state, f.clone()));
                            fault = Some(f);
                            break 'ticks;
                        }
                        mass_event_ts.push(t);
                        attach_ts.push(t);
                    }
                    if out.fire_detach {
                        if let Err(f) = fire_fsm_event(&mut pending, &mut world, false) {
                            rows.push(fault_row(t, &state, f.clone()));
                            fault = Some(f);
                            break 'ticks;
                        }
                        mass_event_ts.push(t);
                    }
                    done = next.phase.is_terminal();
                    let phase = next.phase.as_str();
                    let gripper = match out.gripper {
                        GripperCommand::Idle => "idle",
                        GripperCommand::Inflate => "inflate",
                        GripperCommand::Deflate => "deflate",
                    };
                    *ms = next;
                    carrot_speed = (carrot_speed + CARROT_ACCEL * CONTROL_DT).min(plan.cruise_speed);
                    carrot = slew_toward(&carrot, &out.setpoint, carrot_speed * CONTROL_DT);
                    if (out.setpoint - carrot).norm() < 1e-9 {
                        carrot_speed = 0.0;
                    }
                    (carrot, out.yaw, out.gate_on, phase, gripper)
                }
                None => {
                    let (p, _) = sample_reference(scenario, t);
                    (p, scenario.reference_yaw(), true, "track", "idle")
                }
            };

        // Controller tick.
        let d_world_est = observer.disturbance_world(&state.theta);
        let timer = scenario.log_timing.then(Instant::now);
        let (cmd, stats): (AttitudeThrustCommand, SolveStats) = match &mut law {
            ControlLaw::Mpc { ctrl, use_estimate } => {
                let d_inj = if *use_estimate && gate {
                    d_world_est
                } else {
                    Vector3::zeros()
                };
                let x0 = reduced_state(&observer.p_est(), &observer.v_est(), &state.theta);
                let refs = mpc_reference(
                    scenario,
                    &mission,
                    &carrot,
                    carrot_speed,
                    t,
                    ctrl.config().horizon,
                    ctrl.config().dt,
                );
                ctrl.solve_step(&x0, &refs, &d_inj, yaw_ref, CONTROL_DT)
            }
            ControlLaw::Pid(pid) => {
                let cmd = pid.step(
                    &observer.p_est(),
                    &observer.v_est(),
                    &ref_p,
                    yaw_ref,
                    CONTROL_DT,
                );
                (
                    cmd,
                    SolveStats {
                        sqp_iters: 0,
                        qp_iters: 0,
                        qp_status: QpStatus::Optimal,
                        kkt_residual: 0.0,
                        fallback: false,
                        v_limit_hit: false,
                    },
                )
            }
        };
        let solve_us = timer.map(|s| s.elapsed().as_micros() as u64);

        // Reconstructed model defect at this instant: what a perfect
        // estimator should report given the believed mass and the thrust
        // that produced the current acceleration.
        let r = rotation(&state.theta);
        let d_true_w = r * Vector3::new(0.0, 0.0, -prev_thrust / scenario.model.m_nominal)
            + Vector3::new(0.0, 0.0, params.gravity)
            - world.last_vdot;

        let applied_thrust = cmd.thrust.clamp(0.0, params.t_max);
        let mut row = LogRow {
            t,
            phase,
            gate,
            p: state.p,
            v: state.v,
            theta: state.theta,
            p_ref: ref_p,
            err: state.p - ref_p,
            d_true_w,
            d_hat_w: d_world_est,
            d_hat_b: observer.d_hat_body(),
            thrust_cmd: cmd.thrust,
            phi_cmd: cmd.phi_cmd,
            theta_cmd: cmd.theta_cmd,
            sqp_iters: stats.sqp_iters,
            qp_status: match &law {
                ControlLaw::Pid(_) => "-",
                ControlLaw::Mpc { .. } => qp_status_str(&stats),
            },
            qp_iters: stats.qp_iters,
            sat: false,
            gripper,
            slosh: world
                .slosh_state()
                .map(|s| s.alpha)
                .unwrap_or_else(Vector2::zeros),
            fault: String::new(),
            solve_us,
        };

        if done {
            rows.push(row);
            break 'ticks;
        }

        // Plant substeps under the frozen command.
        let mut sat_any = false;
        for _ in 0..SUBSTEPS {
            let (wrench, flags) = attitude_control(&cmd, &state, &scenario.attitude, &params);
            sat_any |= flags.any();
            let torque = wrench.torque + world.payload_gravity_torque(&state, &params);
            let input = WrenchInput {
                thrust: wrench.thrust,
                torque,
            };
            match advance(&mut world, &state, &input, &params, PLANT_DT) {
                Ok(next) => state = next,
                Err(f) => {
                    row.sat = sat_any;
                    let msg = f.to_string();
                    rows.push(row);
                    rows.push(fault_row(world.t, &state, msg.clone()));
                    fault = Some(msg);
                    break 'ticks;
                }
            }
        }
        row.sat = sat_any;
        prev_theta = row.theta;
        rows.push(row);

        prev_thrust = applied_thrust;
    }

    let mission_summary = mission.as_ref().map(|(ms, _)| {
        let attach_time_s = attach_ts.first().copied();
        let delivery = rows
            .iter()
            .find(|r| r.phase == "hover_release")
            .map(|r| r.t);
        let done_time = rows.iter().find(|r| r.phase == "done").map(|r| r.t);
        let lateral = attach_time_s.map(|tg| {
            rows.iter()
                .filter(|r| r.t >= tg && r.fault.is_empty())
                .map(|r| (r.err.x * r.err.x + r.err.y * r.err.y).sqrt())
                .fold(0.0, f64::max)
        });
        MissionSummary {
            completed: done_time.is_some() && !ms.aborted,
            aborted: ms.aborted,
            attach_time_s,
            delivery_time_s: delivery,
            done_time_s: done_time,
            max_lateral_err_post_grasp: lateral,
        }
    });

    let metrics = compute_metrics(&rows, &mass_event_ts, &attach_ts, mission_summary).ok();

    Ok(RunOutput {
        scenario_name: scenario.name.clone(),
        controller,
        seed: scenario.seed,
        rows,
        metrics,
        fault,
    })
}

fn fault_row(t: f64, state: &VehicleState, msg: String) -> LogRow {
    LogRow {
        t,
        phase: "fault",
        gate: false,
        p: state.p,
        v: state.v,
        theta: state.theta,
        p_ref: Vector3::zeros(),
        err: Vector3::zeros(),
        d_true_w: Vector3::zeros(),
        d_hat_w: Vector3::zeros(),
        d_hat_b: Vector3::zeros(),
        thrust_cmd: 0.0,
        phi_cmd: 0.0,
        theta_cmd: 0.0,
        sqp_iters: 0,
        qp_status: "-",
        qp_iters: 0,
        sat: false,
        gripper: "idle",
        slosh: Vector2::zeros(),
        fault: msg,
        solve_us: None,
    }
}

/// Consume the matching grasp-triggered event, if one is configured. A
/// mission without a wired payload grips air, which is legal.
fn fire_fsm_event(
    pending: &mut [(bool, Event)],
    world: &mut World,
    attach: bool,
) -> Result<bool, String> {
    for (applied, ev) in pending.iter_mut() {
        if *applied || ev.trigger != EventTrigger::Fsm {
            continue;
        }
        match (&ev.action, attach) {
            (EventAction::Attach { id, payload }, true) => {
                *applied = true;
                world
                    .attach_payload(id, *payload)
                    .map_err(|f| f.to_string())?;
                return Ok(true);
            }
            (EventAction::Detach { id }, false) => {
                *applied = true;
                world.detach_payload(id).map_err(|f| f.to_string())?;
                return Ok(true);
            }
            _ => {}
        }
    }
    Ok(false)
}

fn reduced_state(
    p: &Vector3<f64>,
    v: &Vector3<f64>,
    theta: &Vector3<f64>,
) -> ReducedState {
    ReducedState::from_column_slice(&[p.x, p.y, p.z, v.x, v.y, v.z, theta.x, theta.y])
}

fn sample_reference(scenario: &Scenario, t: f64) -> (Vector3<f64>, Vector3<f64>) {
    match &scenario.reference {
        ReferenceSpec::Hover { position, .. } => (*position, Vector3::zeros()),
        ReferenceSpec::Circle(c) => c.sample(t),
        ReferenceSpec::Mission(_) => unreachable!("missions sample through the machine"),
    }
}

/// Move `from` straight toward `to` by at most `step`, stopping exactly on
/// the target.
fn slew_toward(from: &Vector3<f64>, to: &Vector3<f64>, step: f64) -> Vector3<f64> {
    let delta = to - from;
    let dist = delta.norm();
    if dist <= step || dist < 1e-12 {
        *to
    } else {
        from + delta * (step / dist)
    }
}

/// Horizon+1 reference points for the predictive controller. Missions
/// preview the streamed setpoint continuing toward the active waypoint at
/// cruise speed; trajectory references are sampled at the stage times.
fn mpc_reference(
    scenario: &Scenario,
    mission: &Option<(MissionState, crate::mission::MissionPlan)>,
    carrot: &Vector3<f64>,
    carrot_speed: f64,
    t: f64,
    horizon: usize,
    stage_dt: f64,
) -> Vec<ReducedState> {
    let mut refs = Vec::with_capacity(horizon + 1);
    match mission {
        Some((ms, plan)) => {
            let mut pos = *carrot;
            let mut speed = carrot_speed;
            for _ in 0..=horizon {
                let delta = ms.setpoint - pos;
                let dist = delta.norm();
                let vel = if dist < 1e-9 {
                    Vector3::zeros()
                } else {
                    delta * (speed / dist)
                };
                refs.push(reduced_state(&pos, &vel, &Vector3::zeros()));
                speed = (speed + CARROT_ACCEL * stage_dt).min(plan.cruise_speed);
                pos = slew_toward(&pos, &ms.setpoint, speed * stage_dt);
            }
        }
        None => {
            for i in 0..=horizon {
                let (p, v) = sample_reference(scenario, t + i as f64 * stage_dt);
                refs.push(reduced_state(&p, &v, &Vector3::zeros()));
            }
        }
    }
    refs
}

/// Reduce a run log to summary metrics.
///
/// The analysis window is every gated (estimate-trusted) row; steady
/// statistics start [`STEADY_SKIP_S`] after the last mass change, or at
/// the window midpoint when mass never changed. Errors when the log has
/// no gated rows at all.
pub fn compute_metrics(
    rows: &[LogRow],
    mass_event_ts: &[f64],
    attach_ts: &[f64],
    mission: Option<MissionSummary>,
) -> Result<RunMetrics, String> {
    let window: Vec<&LogRow> = rows
        .iter()
        .filter(|r| r.gate && r.fault.is_empty())
        .collect();
    if window.is_empty() {
        return Err("no gated rows to analyze".into());
    }

    let mut sum_sq = [0.0; 3];
    let mut max_abs = [0.0_f64; 3];
    for r in &window {
        for a in 0..3 {
            sum_sq[a] += r.err[a] * r.err[a];
            max_abs[a] = max_abs[a].max(r.err[a].abs());
        }
    }
    let n = window.len() as f64;
    let rmse = [
        (sum_sq[0] / n).sqrt(),
        (sum_sq[1] / n).sqrt(),
        (sum_sq[2] / n).sqrt(),
    ];

    let t_start = window.first().unwrap().t;
    let t_end = window.last().unwrap().t;
    let steady_from = match mass_event_ts.iter().copied().fold(None, |m: Option<f64>, t| {
        Some(m.map_or(t, |m| m.max(t)))
    }) {
        Some(last) => last + STEADY_SKIP_S,
        None => 0.5 * (t_start + t_end),
    };
    let steady: Vec<&&LogRow> = window.iter().filter(|r| r.t >= steady_from).collect();
    let steady = if steady.is_empty() {
        window.iter().collect::<Vec<_>>()
    } else {
        steady
    };
    let ns = steady.len() as f64;
    let alt_offset_m = steady.iter().map(|r| r.err.z).sum::<f64>() / ns;
    let mut d_err = [0.0; 3];
    for r in &steady {
        for a in 0..3 {
            d_err[a] += (r.d_hat_w[a] - r.d_true_w[a]).abs();
        }
    }
    let d_est_err_ss = [d_err[0] / ns, d_err[1] / ns, d_err[2] / ns];

    let settling_time_s = attach_ts
        .last()
        .and_then(|tg| settling_after(rows, *tg));

    let timed: Vec<u64> = rows.iter().filter_map(|r| r.solve_us).collect();
    let (mean_us, max_us) = if timed.is_empty() {
        (0.0, 0.0)
    } else {
        let sum: u64 = timed.iter().sum();
        (
            sum as f64 / timed.len() as f64,
            *timed.iter().max().unwrap() as f64,
        )
    };

    Ok(RunMetrics {
        rmse,
        max_abs_err: max_abs,
        alt_offset_m,
        settling_time_s,
        d_est_err_ss,
        solve_time_mean_us: mean_us,
        solve_time_max_us: max_us,
        n_window: window.len(),
        mission,
    })
}

/// First time after `t_g` at which |err_z| enters the settling band and
/// stays inside it for the full dwell, reported relative to `t_g`. None
/// when the log never settles or ends before the dwell can be judged.
fn settling_after(rows: &[LogRow], t_g: f64) -> Option<f64> {
    let tail: Vec<&LogRow> = rows
        .iter()
        .filter(|r| r.t >= t_g && r.fault.is_empty())
        .collect();
    let t_end = tail.last()?.t;
    for (i, row) in tail.iter().enumerate() {
        if row.err.z.abs() >= SETTLE_BAND_M {
            continue;
        }
        if row.t + SETTLE_DWELL_S > t_end + 1e-9 {
            return None;
        }
        let holds = tail[i..]
            .iter()
            .take_while(|r| r.t <= row.t + SETTLE_DWELL_S + 1e-9)
            .all(|r| r.err.z.abs() < SETTLE_BAND_M);
        if holds {
            return Some(row.t - t_g);
        }
    }
    None
}

/// Side-by-side result of running several controllers on one scenario
/// with identical seeds.
#[derive(Debug)]
pub struct CompareReport {
    pub scenario_name: String,
    pub runs: Vec<RunOutput>,
}

/// Run the scenario once per controller, same seed each time. Runs share
/// nothing, so they execute on parallel threads; output order follows the
/// controller list, not completion order.
pub fn compare(
    scenario: &Scenario,
    controllers: &[ControllerKind],
) -> Result<CompareReport, HarnessError> {
    let results: Vec<Result<RunOutput, HarnessError>> = std::thread::scope(|scope| {
        let handles: Vec<_> = controllers
            .iter()
            .map(|c| scope.spawn(move || run(scenario, *c)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("run thread panicked"))
            .collect()
    });
    let mut runs = Vec::with_capacity(controllers.len());
    for r in results {
        runs.push(r?);
    }
    Ok(CompareReport {
        scenario_name: scenario.name.clone(),
        runs,
    })
}

impl CompareReport {
    const TABLE_METRICS: [&'static str; 8] = [
        "rmse_x",
        "rmse_y",
        "rmse_z",
        "max_err_z",
        "alt_offset_m",
        "settling_time_s",
        "d_err_z",
        "mission_completed",
    ];

    fn metric_of(run: &RunOutput, name: &str) -> Option<f64> {
        run.metrics
            .as_ref()?
            .named_values()
            .into_iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v)
    }

    /// Human-readable comparison table.
    pub fn table_text(&self) -> String {
        use std::fmt::Write;
        let mut out = String::new();
        let _ = writeln!(out, "scenario: {}", self.scenario_name);
        let _ = write!(out, "{:<18}", "metric");
        for r in &self.runs {
            let _ = write!(out, "{:>14}", r.controller.as_str());
        }
        out.push('\n');
        for m in Self::TABLE_METRICS {
            if self.runs.iter().all(|r| Self::metric_of(r, m).is_none()) {
                continue;
            }
            let _ = write!(out, "{m:<18}");
            for r in &self.runs {
                match Self::metric_of(r, m) {
                    Some(v) => {
                        let _ = write!(out, "{v:>14.4}");
                    }
                    None => {
                        let _ = write!(out, "{:>14}", "-");
                    }
                }
            }
            out.push('\n');
        }
        for r in &self.runs {
            if let Some(f) = &r.fault {
                let _ = writeln!(out, "{}: FAULT {f}", r.controller.as_str());
            }
        }
        out
    }

    /// Machine-readable comparison table: one row per metric.
    pub fn table_csv(&self) -> String {
        use std::fmt::Write;
        let mut out = String::from("metric");
        for r in &self.runs {
            let _ = write!(out, ",{}", r.controller.as_str());
        }
        out.push('\n');
        for m in Self::TABLE_METRICS {
            if self.runs.iter().all(|r| Self::metric_of(r, m).is_none()) {
                continue;
            }
            out.push_str(m);
            for r in &self.runs {
                match Self::metric_of(r, m) {
                    Some(v) => {
                        let _ = write!(out, ",{v:.9}");
                    }
                    None => out.push(','),
                }
            }
            out.push('\n');
        }
        out
    }

    /// Per-axis error time series for one run, for external plotting.
    pub fn error_series_csv(run: &RunOutput) -> String {
        use std::fmt::Write;
        let mut out = String::from("t,err_x,err_y,err_z\n");
        for r in &run.rows {
            let _ = writeln!(
                out,
                "{:.9},{:.9},{:.9},{:.9}",
                r.t, r.err.x, r.err.y, r.err.z
            );
        }
        out
    }
}
