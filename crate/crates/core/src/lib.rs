//! Desk-scale quadrotor aerial-grasping simulation stack.
//!
//! The crate wires a 1 kHz rigid-body plant to a 100 Hz sensing and control
//! stack: an EKF that estimates the unmodeled body-frame acceleration acting
//! on the vehicle, an attitude-thrust NMPC that can inject that estimate into
//! its prediction model, a cascaded PID baseline, a PD inner attitude loop,
//! and a pneumatic-gripper mission sequencer. The harness module runs whole
//! scenarios deterministically and writes CSV logs plus summary metrics.
//!
//! Frames and signs, used consistently everywhere:
//! * World frame is NED: x north, y east, z down. Altitude in configs is
//!   positive-up and converted to negative z internally.
//! * Body frame is FRD: x forward, y right, z down. Collective thrust acts
//!   along body -z (upward at level attitude).
//! * Attitude is Z-Y-X intrinsic Euler (yaw, pitch, roll); `math::rotation`
//!   maps body vectors to world vectors.
//! * The estimated disturbance `d_hat_B` is the correction that makes the
//!   nominal-mass model match reality when *subtracted* inside the rotation:
//!   `V_dot = R(Theta) * ((0,0,-T/m_nom) - d_hat_B) + (0,0,g)`. Carrying
//!   unmodeled extra mass therefore yields a negative `d_hat_B,z`.

pub mod bundle;
pub mod dynamics;
pub mod harness;
pub mod inner_loop;
pub mod math;
pub mod mission;
pub mod nmpc;
pub mod observer;
pub mod pid;
pub mod qp;
pub mod scenario;

pub use bundle::{
    bless, verify_bundle, BundleError, BundleReport, BundledScenario, ScenarioOutcome,
};
pub use dynamics::{
    AttachedPayload, NoiseConfig, PayloadMode, SensorFrame, SimFault, VehicleParams, VehicleState,
    World, WrenchInput,
};
pub use harness::{
    compare, compute_metrics, csv_string, run, CompareReport, HarnessError, LogRow,
    MissionSummary, RunMetrics, RunOutput, CONTROL_DT, PLANT_DT,
};
pub use inner_loop::{attitude_control, AttitudeGains, SaturationFlags};
pub use mission::{
    allowed_transition, fsm_step, FsmOutput, GripperCommand, MissionPhase, MissionPlan,
    MissionState,
};
pub use nmpc::{
    identify_time_constants, predict_model, transcribe, AttitudeThrustCommand, ControlInput,
    NmpcConfig, NmpcController, NmpcError, NmpcModel, ReducedState, SolveStats, SysIdFit,
    SysIdSample,
};
pub use observer::{DisturbanceObserver, ObserverConfig, ObserverError, ObserverInput};
pub use pid::{PidController, PidGains};
pub use qp::{
    reference_solve_box, solve, ActiveBound, QpError, QpProblem, QpSolution, QpStatus, KKT_TOL,
};
pub use scenario::{ControllerKind, ReferenceSpec, Scenario, ScenarioError};

/// Standard gravity used across the stack, m/s^2.
pub const GRAVITY: f64 = 9.81;
