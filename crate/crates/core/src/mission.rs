//! Mission state machine for the pick-and-place flight.
//!
//! Sequences the nominal path
//! Idle -> Takeoff -> FlyToGrasp -> HoverGrasp -> Inflating -> Transport
//! -> HoverRelease -> Deflating -> Land -> Done, with a per-state timeout
//! that aborts to Land (and from Land to Done). The machine consumes the
//! estimated position only; grasp success is scripted, so Inflating fires
//! the simulator's attach event after a fixed dwell and Deflating fires
//! the detach event the same way.
//!
//! The disturbance gate is OFF exactly while the phase is Takeoff or
//! Land: near the ground the estimate mixes ground proximity and
//! transient thrust into the lumped disturbance, so the controller flies
//! those phases on the nominal model. The observer itself never stops;
//! only the feed to the controller is gated.

use nalgebra::Vector3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MissionPhase {
    Idle,
    Takeoff,
    FlyToGrasp,
    HoverGrasp,
    Inflating,
    Transport,
    HoverRelease,
    Deflating,
    Land,
    Done,
}

impl MissionPhase {
    pub fn as_str(&self) -> &'static str {
        match self {
            MissionPhase::Idle => "idle",
            MissionPhase::Takeoff => "takeoff",
            MissionPhase::FlyToGrasp => "fly_to_grasp",
            MissionPhase::HoverGrasp => "hover_grasp",
            MissionPhase::Inflating => "inflating",
            MissionPhase::Transport => "transport",
            MissionPhase::HoverRelease => "hover_release",
            MissionPhase::Deflating => "deflating",
            MissionPhase::Land => "land",
            MissionPhase::Done => "done",
        }
    }

    /// Disturbance feed to the controller is enabled outside the
    /// ground-proximity phases.
    pub fn gate_on(&self) -> bool {
        !matches!(self, MissionPhase::Takeoff | MissionPhase::Land)
    }

    pub fn is_terminal(&self) -> bool {
        matches!(self, MissionPhase::Done)
    }
}

/// Edge set of the machine; traces are checked against it.
pub fn allowed_transition(from: MissionPhase, to: MissionPhase) -> bool {
    use MissionPhase::*;
    matches!(
        (from, to),
        (Idle, Takeoff)
            | (Takeoff, FlyToGrasp)
            | (Takeoff, Land)
            | (FlyToGrasp, HoverGrasp)
            | (FlyToGrasp, Land)
            | (HoverGrasp, Inflating)
            | (HoverGrasp, Land)
            | (Inflating, Transport)
            | (Inflating, Land)
            | (Transport, HoverRelease)
            | (Transport, Land)
            | (HoverRelease, Deflating)
            | (HoverRelease, Land)
            | (Deflating, Land)
            | (Land, Done)
    )
}

/// Pneumatic gripper command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GripperCommand {
    Idle,
    Inflate,
    Deflate,
}

impl GripperCommand {
    pub fn as_str(&self) -> &'static str {
        match self {
            GripperCommand::Idle => "idle",
            GripperCommand::Inflate => "inflate",
            GripperCommand::Deflate => "deflate",
        }
    }
}

#[derive(Debug, Clone)]
pub struct MissionPlan {
    /// Where the object sits (world frame, z down).
    pub grasp_point: Vector3<f64>,
    /// Where to set it down.
    pub release_point: Vector3<f64>,
    /// Takeoff climb altitude above the home point, m (positive up).
    pub cruise_altitude: f64,
    /// Optional staging points visited in order before the grasp point.
    pub approach_waypoints: Vec<Vector3<f64>>,
    /// Yaw held for the whole mission, rad.
    pub yaw: f64,
    /// Speed at which the streamed setpoint moves between waypoints, m/s.
    /// The controllers chase this moving point, so tracking error stays
    /// small during transit instead of jumping by the leg length.
    pub cruise_speed: f64,
    /// Arrival sphere radius, m.
    pub arrival_tolerance: f64,
    /// Continuous in-tolerance time that counts as arrival, s.
    pub hold_time: f64,
    /// Inflation dwell before the grasp is trusted, s.
    pub inflate_time: f64,
    /// Deflation dwell before the release is trusted, s.
    pub deflate_time: f64,
    /// Per-state timeout before aborting to Land, s.
    pub state_timeout: f64,
    /// Altitude below which the vehicle counts as landed, m.
    pub land_altitude: f64,
    /// Continuous below-threshold time that counts as landed, s.
    pub land_hold: f64,
}

impl Default for MissionPlan {
    fn default() -> Self {
        Self {
            grasp_point: Vector3::new(1.0, 0.0, -0.4),
            release_point: Vector3::new(-1.0, 0.0, -0.4),
            cruise_altitude: 1.0,
            approach_waypoints: Vec::new(),
            yaw: 0.0,
            cruise_speed: 1.0,
            arrival_tolerance: 0.10,
            hold_time: 1.0,
            inflate_time: 5.0,
            deflate_time: 3.0,
            state_timeout: 30.0,
            land_altitude: 0.15,
            land_hold: 1.0,
        }
    }
}

impl MissionPlan {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.arrival_tolerance > 0.0) {
            return Err("arrival tolerance must be positive".into());
        }
        if !(self.cruise_speed > 0.0) {
            return Err("cruise speed must be positive".into());
        }
        if self.inflate_time < 5.0 {
            return Err("inflate dwell below the 5 s full-inflation floor".into());
        }
        if !(self.deflate_time > 0.0 && self.hold_time > 0.0 && self.land_hold > 0.0) {
            return Err("dwell and hold times must be positive".into());
        }
        if !(self.state_timeout > 0.0) {
            return Err("state timeout must be positive".into());
        }
        if !(self.cruise_altitude > 0.0) {
            return Err("cruise altitude must be positive".into());
        }
        if !(self.land_altitude > 0.0) {
            return Err("landing altitude threshold must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct MissionState {
    pub phase: MissionPhase,
    pub t_entered: f64,
    pub setpoint: Vector3<f64>,
    pub yaw: f64,
    pub aborted: bool,
    pub attach_fired: bool,
    pub detach_fired: bool,
    waypoint_idx: usize,
    hold_since: Option<f64>,
}

impl MissionState {
    pub fn new(plan: &MissionPlan) -> Self {
        Self {
            phase: MissionPhase::Idle,
            t_entered: 0.0,
            setpoint: Vector3::zeros(),
            yaw: plan.yaw,
            aborted: false,
            attach_fired: false,
            detach_fired: false,
            waypoint_idx: 0,
            hold_since: None,
        }
    }
}

/// Everything the control loop needs from one FSM tick.
#[derive(Debug, Clone, Copy)]
pub struct FsmOutput {
    pub setpoint: Vector3<f64>,
    pub yaw: f64,
    pub gripper: GripperCommand,
    pub gate_on: bool,
    /// Attach the configured payload this tick.
    pub fire_attach: bool,
    /// Detach it this tick.
    pub fire_detach: bool,
}

fn gripper_for(phase: MissionPhase) -> GripperCommand {
    match phase {
        MissionPhase::Inflating | MissionPhase::Transport | MissionPhase::HoverRelease => {
            GripperCommand::Inflate
        }
        MissionPhase::Deflating => GripperCommand::Deflate,
        _ => GripperCommand::Idle,
    }
}

/// Advance the machine one tick on the estimated position.
pub fn fsm_step(
    ms: &MissionState,
    plan: &MissionPlan,
    p_est: &Vector3<f64>,
    t: f64,
) -> (MissionState, FsmOutput) {
    let mut next = ms.clone();
    let mut fire_attach = false;
    let mut fire_detach = false;

    let enter = |next: &mut MissionState, phase: MissionPhase, setpoint: Vector3<f64>, t: f64| {
        next.phase = phase;
        next.t_entered = t;
        next.setpoint = setpoint;
        next.hold_since = None;
    };

    // Continuous-dwell arrival bookkeeping for position-holding phases.
    let update_hold = |next: &mut MissionState, hold_needed: f64| -> bool {
        if (p_est - next.setpoint).norm() <= plan.arrival_tolerance {
            let since = *next.hold_since.get_or_insert(t);
            t - since >= hold_needed
        } else {
            next.hold_since = None;
            false
        }
    };

    let timed_out = t - ms.t_entered >= plan.state_timeout;
    let land_setpoint = |p: &Vector3<f64>| Vector3::new(p[0], p[1], 0.0);

    match ms.phase {
        MissionPhase::Idle => {
            let takeoff_target = Vector3::new(p_est[0], p_est[1], -plan.cruise_altitude);
            enter(&mut next, MissionPhase::Takeoff, takeoff_target, t);
        }
        MissionPhase::Takeoff => {
            if timed_out {
                next.aborted = true;
                enter(&mut next, MissionPhase::Land, land_setpoint(p_est), t);
            } else if update_hold(&mut next, plan.hold_time) {
                let first = plan
                    .approach_waypoints
                    .first()
                    .copied()
                    .unwrap_or(plan.grasp_point);
                next.waypoint_idx = 0;
                enter(&mut next, MissionPhase::FlyToGrasp, first, t);
            }
        }
        MissionPhase::FlyToGrasp => {
            if timed_out {
                next.aborted = true;
                enter(&mut next, MissionPhase::Land, land_setpoint(p_est), t);
            } else if update_hold(&mut next, plan.hold_time) {
                if next.waypoint_idx < plan.approach_waypoints.len() {
                    next.waypoint_idx += 1;
                    next.setpoint = plan
                        .approach_waypoints
                        .get(next.waypoint_idx)
                        .copied()
                        .unwrap_or(plan.grasp_point);
                    next.hold_since = None;
                } else {
                    enter(&mut next, MissionPhase::HoverGrasp, plan.grasp_point, t);
                }
            }
        }
        MissionPhase::HoverGrasp => {
            if timed_out {
                next.aborted = true;
                enter(&mut next, MissionPhase::Land, land_setpoint(p_est), t);
            } else if update_hold(&mut next, plan.hold_time) {
                enter(&mut next, MissionPhase::Inflating, plan.grasp_point, t);
            }
        }
        MissionPhase::Inflating => {
            if timed_out {
                next.aborted = true;
                enter(&mut next, MissionPhase::Land, land_setpoint(p_est), t);
            } else if t - ms.t_entered >= plan.inflate_time {
                if !next.attach_fired {
                    fire_attach = true;
                    next.attach_fired = true;
                }
                enter(&mut next, MissionPhase::Transport, plan.release_point, t);
            }
        }
        MissionPhase::Transport => {
            if timed_out {
                next.aborted = true;
                enter(&mut next, MissionPhase::Land, land_setpoint(p_est), t);
            } else if update_hold(&mut next, plan.hold_time) {
                enter(&mut next, MissionPhase::HoverRelease, plan.release_point, t);
            }
        }
        MissionPhase::HoverRelease => {
            if timed_out {
                next.aborted = true;
                enter(&mut next, MissionPhase::Land, land_setpoint(p_est), t);
            } else if update_hold(&mut next, plan.hold_time) {
                enter(&mut next, MissionPhase::Deflating, plan.release_point, t);
            }
        }
        MissionPhase::Deflating => {
            if timed_out {
                next.aborted = true;
                enter(&mut next, MissionPhase::Land, land_setpoint(p_est), t);
            } else if t - ms.t_entered >= plan.deflate_time {
                if next.attach_fired && !next.detach_fired {
                    fire_detach = true;
                    next.detach_fired = true;
                }
                enter(&mut next, MissionPhase::Land, land_setpoint(p_est), t);
            }
        }
        MissionPhase::Land => {
            let altitude = -p_est[2];
            let landed = if altitude <= plan.land_altitude {
                let since = *next.hold_since.get_or_insert(t);
                t - since >= plan.land_hold
            } else {
                next.hold_since = None;
                false
            };
            if landed {
                let sp = next.setpoint;
                enter(&mut next, MissionPhase::Done, sp, t);
            } else if timed_out {
                next.aborted = true;
                let sp = next.setpoint;
                enter(&mut next, MissionPhase::Done, sp, t);
            }
        }
        MissionPhase::Done => {}
    }

    let out = FsmOutput {
        setpoint: next.setpoint,
        yaw: next.yaw,
        gripper: gripper_for(next.phase),
        gate_on: next.phase.gate_on(),
        fire_attach,
        fire_detach,
    };
    (next, out)
}
