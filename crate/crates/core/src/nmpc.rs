//! Outer-loop nonlinear MPC on a reduced 8-state model.
//!
//! State `[P, V, phi, theta]` with yaw held constant; inputs
//! `[T, phi_cmd, theta_cmd]`. The prediction model is
//!
//! ```text
//! P_dot   = V
//! V_dot   = R(phi, theta, psi) * (0, 0, -T/m_nominal) + (0, 0, g) - d_hat_W
//! phi_dot = (phi_cmd - phi) / tau_phi     (theta likewise)
//! ```
//!
//! The attitude channels are first-order lags standing in for the inner
//! controller; their time constants come from step-response fits, not from
//! the inner loop's gain design. `d_hat_W` is subtracted because the
//! observer estimates the thrust-direction defect of the believed model:
//! extra unmodeled mass yields a negative vertical component, which raises
//! the hover thrust through `u_ref = m_nominal * (g - d_hat_W_z)`.
//!
//! The optimal control problem is transcribed by multiple shooting with
//! RK4 stage integration, linearized Gauss-Newton style around the
//! previous solution, condensed to an input-only dense QP (defects from
//! the shooting gaps enter the condensing recursion), and solved with the
//! active-set method in [`crate::qp`]. One SQP iteration per tick is the
//! default (real-time iteration); the warm start carries the shifted
//! input sequence and the previous active set.

use crate::math::rotation;
use crate::qp::{self, ActiveBound, QpProblem, QpSolution, QpStatus};
use nalgebra::{DMatrix, DVector, SMatrix, SVector, Vector3};
use thiserror::Error;

/// Reduced model state `[px, py, pz, vx, vy, vz, phi, theta]`.
pub type ReducedState = SVector<f64, 8>;
/// Input vector `[T, phi_cmd, theta_cmd]`.
pub type ControlInput = SVector<f64, 3>;

type Mat8 = SMatrix<f64, 8, 8>;
type Mat8x3 = SMatrix<f64, 8, 3>;

/// Plant abstraction the controller predicts with.
#[derive(Debug, Clone, Copy)]
pub struct NmpcModel {
    /// Fitted roll-response time constant, s.
    pub tau_phi: f64,
    /// Fitted pitch-response time constant, s.
    pub tau_theta: f64,
    /// Mass the controller believes in, kg. Deliberately not the true
    /// mass once payloads attach; the observer absorbs the difference.
    pub m_nominal: f64,
    pub gravity: f64,
}

impl Default for NmpcModel {
    fn default() -> Self {
        Self {
            // Fitted on the stock attitude-loop step response (see the
            // sysid subcommand); the loop is critically damped at 5 rad/s
            // and the least-squares single-pole fit lands near 0.5 s.
            tau_phi: 0.5,
            tau_theta: 0.5,
            m_nominal: 1.002,
            gravity: crate::GRAVITY,
        }
    }
}

#[derive(Debug, Clone)]
pub struct NmpcConfig {
    /// Prediction horizon stages.
    pub horizon: usize,
    /// Stage duration, s.
    pub dt: f64,
    /// Stage state weights on [P, V, phi, theta].
    pub q_weights: [f64; 8],
    /// Terminal state weights.
    pub qn_weights: [f64; 8],
    /// Input weights on [T, phi_cmd, theta_cmd].
    pub r_weights: [f64; 3],
    /// Thrust bound, N (lower bound is 0).
    pub t_max: f64,
    /// Symmetric roll/pitch command bound, rad.
    pub angle_max: f64,
    /// Optional speed envelope; predicted violations are flagged in the
    /// solve stats, never enforced (the condensed QP carries only input
    /// boxes).
    pub v_limit: Option<f64>,
    /// SQP iterations per tick; 1 is the real-time iteration scheme.
    pub k_sqp: usize,
}

impl Default for NmpcConfig {
    fn default() -> Self {
        Self {
            horizon: 20,
            dt: 0.05,
            q_weights: [10.0, 10.0, 10.0, 1.0, 1.0, 1.0, 0.5, 0.5],
            qn_weights: [100.0, 100.0, 100.0, 10.0, 10.0, 10.0, 5.0, 5.0],
            r_weights: [0.1, 5.0, 5.0],
            t_max: 25.0,
            angle_max: 30.0_f64.to_radians(),
            v_limit: None,
            k_sqp: 1,
        }
    }
}

impl NmpcConfig {
    pub fn validate(&self) -> Result<(), NmpcError> {
        if self.horizon < 2 {
            return Err(NmpcError::BadConfig("horizon must be >= 2".into()));
        }
        if !(self.dt > 0.0) {
            return Err(NmpcError::BadConfig("dt must be positive".into()));
        }
        let non_neg = self
            .q_weights
            .iter()
            .chain(self.qn_weights.iter())
            .chain(self.r_weights.iter())
            .all(|w| *w >= 0.0 && w.is_finite());
        if !non_neg {
            return Err(NmpcError::BadConfig("weights must be >= 0".into()));
        }
        if !self.q_weights.iter().any(|w| *w > 0.0) {
            return Err(NmpcError::BadConfig(
                "at least one stage weight must be positive".into(),
            ));
        }
        if !(self.t_max > 0.0) || !(self.angle_max > 0.0) {
            return Err(NmpcError::BadConfig("input bounds must be positive".into()));
        }
        if self.k_sqp == 0 || self.k_sqp > 5 {
            return Err(NmpcError::BadConfig("k_sqp must be in 1..=5".into()));
        }
        Ok(())
    }

    fn input_lb(&self) -> ControlInput {
        ControlInput::new(0.0, -self.angle_max, -self.angle_max)
    }

    fn input_ub(&self) -> ControlInput {
        ControlInput::new(self.t_max, self.angle_max, self.angle_max)
    }
}

/// Command handed to the attitude loop.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttitudeThrustCommand {
    pub thrust: f64,
    pub phi_cmd: f64,
    pub theta_cmd: f64,
    pub psi_cmd: f64,
}

impl AttitudeThrustCommand {
    pub fn hover(model: &NmpcModel, psi: f64) -> Self {
        Self {
            thrust: model.m_nominal * model.gravity,
            phi_cmd: 0.0,
            theta_cmd: 0.0,
            psi_cmd: psi,
        }
    }
}

#[derive(Debug, Error)]
pub enum NmpcError {
    #[error("invalid controller configuration: {0}")]
    BadConfig(String),
    #[error("reference trajectory must have horizon+1 = {expected} points, got {got}")]
    BadReference { expected: usize, got: usize },
    #[error("non-finite value during linearization")]
    NonFinite,
    #[error("command step variance {variance:.3e} too low for identification")]
    InsufficientExcitation { variance: f64 },
    #[error("identification log too short or irregularly sampled")]
    BadLog,
    #[error(transparent)]
    Qp(#[from] qp::QpError),
}

/// Reduced-state derivative; `u` carries the constant yaw.
pub fn predict_model(
    x: &ReducedState,
    u: &AttitudeThrustCommand,
    d_w: &Vector3<f64>,
    model: &NmpcModel,
) -> ReducedState {
    let input = ControlInput::new(u.thrust, u.phi_cmd, u.theta_cmd);
    derivative(x, &input, d_w, u.psi_cmd, model)
}

fn derivative(
    x: &ReducedState,
    u: &ControlInput,
    d_w: &Vector3<f64>,
    psi: f64,
    model: &NmpcModel,
) -> ReducedState {
    let theta = Vector3::new(x[6], x[7], psi);
    let r = rotation(&theta);
    let accel = r * Vector3::new(0.0, 0.0, -u[0] / model.m_nominal)
        + Vector3::new(0.0, 0.0, model.gravity)
        - d_w;
    let mut dx = ReducedState::zeros();
    dx.fixed_rows_mut::<3>(0).copy_from(&x.fixed_rows::<3>(3));
    dx.fixed_rows_mut::<3>(3).copy_from(&accel);
    dx[6] = (u[1] - x[6]) / model.tau_phi;
    dx[7] = (u[2] - x[7]) / model.tau_theta;
    dx
}

/// Continuous-time Jacobians of [`derivative`] at `(x, u)`.
fn continuous_jacobians(
    x: &ReducedState,
    u: &ControlInput,
    psi: f64,
    model: &NmpcModel,
) -> (Mat8, Mat8x3) {
    let (sp, cp) = x[6].sin_cos();
    let (st, ct) = x[7].sin_cos();
    let (ss, cs) = psi.sin_cos();
    // Third rotation column (world direction of body lift axis, negated).
    let r3 = Vector3::new(cp * st * cs + sp * ss, cp * st * ss - sp * cs, cp * ct);
    let dr3_dphi = Vector3::new(-sp * st * cs + cp * ss, -sp * st * ss - cp * cs, -sp * ct);
    let dr3_dtheta = Vector3::new(cp * ct * cs, cp * ct * ss, -cp * st);
    let scale = -u[0] / model.m_nominal;

    let mut a = Mat8::zeros();
    for i in 0..3 {
        a[(i, i + 3)] = 1.0;
        a[(i + 3, 6)] = scale * dr3_dphi[i];
        a[(i + 3, 7)] = scale * dr3_dtheta[i];
    }
    a[(6, 6)] = -1.0 / model.tau_phi;
    a[(7, 7)] = -1.0 / model.tau_theta;

    let mut b = Mat8x3::zeros();
    for i in 0..3 {
        b[(i + 3, 0)] = -r3[i] / model.m_nominal;
    }
    b[(6, 1)] = 1.0 / model.tau_phi;
    b[(7, 2)] = 1.0 / model.tau_theta;
    (a, b)
}

/// One RK4 stage of the prediction model.
pub fn rk4_stage(
    x: &ReducedState,
    u: &ControlInput,
    d_w: &Vector3<f64>,
    psi: f64,
    model: &NmpcModel,
    h: f64,
) -> ReducedState {
    let k1 = derivative(x, u, d_w, psi, model);
    let k2 = derivative(&(x + 0.5 * h * k1), u, d_w, psi, model);
    let k3 = derivative(&(x + 0.5 * h * k2), u, d_w, psi, model);
    let k4 = derivative(&(x + h * k3), u, d_w, psi, model);
    x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
}

/// RK4 stage together with the exact Jacobians of the discrete map,
/// obtained by chaining the stage-point Jacobians through the scheme.
pub fn rk4_stage_with_jacobians(
    x: &ReducedState,
    u: &ControlInput,
    d_w: &Vector3<f64>,
    psi: f64,
    model: &NmpcModel,
    h: f64,
) -> (ReducedState, Mat8, Mat8x3) {
    let k1 = derivative(x, u, d_w, psi, model);
    let (a1, b1) = continuous_jacobians(x, u, psi, model);
    let x2 = x + 0.5 * h * k1;
    let k2 = derivative(&x2, u, d_w, psi, model);
    let (a2, b2) = continuous_jacobians(&x2, u, psi, model);
    let x3 = x + 0.5 * h * k2;
    let k3 = derivative(&x3, u, d_w, psi, model);
    let (a3, b3) = continuous_jacobians(&x3, u, psi, model);
    let x4 = x + h * k3;
    let k4 = derivative(&x4, u, d_w, psi, model);
    let (a4, b4) = continuous_jacobians(&x4, u, psi, model);

    let id = Mat8::identity();
    let dk1x = a1;
    let dk2x = a2 * (id + 0.5 * h * dk1x);
    let dk3x = a3 * (id + 0.5 * h * dk2x);
    let dk4x = a4 * (id + h * dk3x);
    let a = id + (h / 6.0) * (dk1x + 2.0 * dk2x + 2.0 * dk3x + dk4x);

    let dk1u = b1;
    let dk2u = a2 * (0.5 * h * dk1u) + b2;
    let dk3u = a3 * (0.5 * h * dk2u) + b3;
    let dk4u = a4 * (h * dk3u) + b4;
    let b = (h / 6.0) * (dk1u + 2.0 * dk2u + 2.0 * dk3u + dk4u);

    let x_next = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    (x_next, a, b)
}

/// Per-stage linearization of the shooting system: discrete Jacobians and
/// the gap between the integrated next state and the trajectory guess.
struct StageLin {
    a: Mat8,
    b: Mat8x3,
    defect: ReducedState,
}

/// Linearize around the guess trajectory and condense to an input-only
/// QP. `guess_xs` has `N+1` entries with `guess_xs[0]` already pinned to
/// the measured state; shooting-gap defects between consecutive guess
/// states are folded into the affine term of the state propagation. The
/// QP decision variables are input deltas relative to `guess_us`. The
/// returned stage data is the exact linear model the QP was built from;
/// the trajectory update must reuse it, not relinearize.
#[allow(clippy::too_many_arguments)]
fn build_condensed(
    refs: &[ReducedState],
    u_ref: &ControlInput,
    d_w: &Vector3<f64>,
    psi: f64,
    model: &NmpcModel,
    cfg: &NmpcConfig,
    guess_xs: &[ReducedState],
    guess_us: &[ControlInput],
) -> Result<(QpProblem, Vec<StageLin>), NmpcError> {
    let n = cfg.horizon;
    let nu = 3 * n;
    debug_assert_eq!(guess_xs.len(), n + 1);
    debug_assert_eq!(guess_us.len(), n);

    // Stage linearizations and shooting defects.
    let mut stages = Vec::with_capacity(n);
    for k in 0..n {
        let (x_next, a, b) =
            rk4_stage_with_jacobians(&guess_xs[k], &guess_us[k], d_w, psi, model, cfg.dt);
        if !x_next.iter().all(|v| v.is_finite())
            || !a.iter().all(|v| v.is_finite())
            || !b.iter().all(|v| v.is_finite())
        {
            return Err(NmpcError::NonFinite);
        }
        stages.push(StageLin {
            a,
            b,
            defect: x_next - guess_xs[k + 1],
        });
    }

    // delta_x_k = m_k + sum_j g_k[j] * delta_u_j  with delta_x_0 = 0.
    // Recursion: m_{k+1} = A_k m_k + defect_k, g_{k+1}[j] = A_k g_k[j],
    // g_{k+1}[k] = B_k.
    let mut h = DMatrix::zeros(nu, nu);
    let mut f = DVector::zeros(nu);
    let mut m_k = ReducedState::zeros();
    let mut g_k: Vec<Mat8x3> = Vec::new();

    for (k, stage) in stages.iter().enumerate() {
        for g in g_k.iter_mut() {
            *g = stage.a * *g;
        }
        m_k = stage.a * m_k + stage.defect;
        g_k.push(stage.b);

        // State cost at stage k+1 (terminal weights at k = n-1).
        let w = if k + 1 == n {
            &cfg.qn_weights
        } else {
            &cfg.q_weights
        };
        let err = guess_xs[k + 1] + m_k - refs[k + 1];
        for (j, gj) in g_k.iter().enumerate() {
            let wq_gj = SMatrix::<f64, 8, 3>::from_fn(|r, c| w[r] * gj[(r, c)]);
            for (i, gi) in g_k.iter().enumerate() {
                let block = gi.transpose() * wq_gj;
                for r in 0..3 {
                    for c in 0..3 {
                        h[(3 * i + r, 3 * j + c)] += 2.0 * block[(r, c)];
                    }
                }
            }
            let grad = gj.transpose() * SVector::<f64, 8>::from_fn(|r, _| w[r] * err[r]);
            for r in 0..3 {
                f[3 * j + r] += 2.0 * grad[r];
            }
        }
    }

    // Input cost and bounds.
    let mut lb = DVector::zeros(nu);
    let mut ub = DVector::zeros(nu);
    let u_lo = cfg.input_lb();
    let u_hi = cfg.input_ub();
    for k in 0..n {
        for r in 0..3 {
            let idx = 3 * k + r;
            h[(idx, idx)] += 2.0 * cfg.r_weights[r];
            f[idx] += 2.0 * cfg.r_weights[r] * (guess_us[k][r] - u_ref[r]);
            lb[idx] = u_lo[r] - guess_us[k][r];
            ub[idx] = u_hi[r] - guess_us[k][r];
        }
    }
    // Symmetrize exactly; accumulation order introduces round-off.
    let h = 0.5 * (&h + h.transpose());

    Ok((QpProblem::new_box(h, f, lb, ub)?, stages))
}

/// One Gauss-Newton transcription as a standalone QP (diagnostics and
/// tests; the controller keeps the richer context internally).
#[allow(clippy::too_many_arguments)]
pub fn transcribe(
    x0: &ReducedState,
    refs: &[ReducedState],
    u_ref: &ControlInput,
    d_w: &Vector3<f64>,
    psi: f64,
    model: &NmpcModel,
    cfg: &NmpcConfig,
    guess_us: &[ControlInput],
) -> Result<QpProblem, NmpcError> {
    cfg.validate()?;
    if refs.len() != cfg.horizon + 1 {
        return Err(NmpcError::BadReference {
            expected: cfg.horizon + 1,
            got: refs.len(),
        });
    }
    let xs = rollout(x0, guess_us, d_w, psi, model, cfg.dt);
    build_condensed(refs, u_ref, d_w, psi, model, cfg, &xs, guess_us).map(|(qp, _)| qp)
}

fn rollout(
    x0: &ReducedState,
    us: &[ControlInput],
    d_w: &Vector3<f64>,
    psi: f64,
    model: &NmpcModel,
    dt: f64,
) -> Vec<ReducedState> {
    let mut xs = Vec::with_capacity(us.len() + 1);
    xs.push(*x0);
    for u in us {
        let next = rk4_stage(xs.last().unwrap(), u, d_w, psi, model, dt);
        xs.push(next);
    }
    xs
}

/// Per-tick solver diagnostics.
#[derive(Debug, Clone, Copy)]
pub struct SolveStats {
    pub sqp_iters: usize,
    pub qp_iters: usize,
    pub qp_status: QpStatus,
    pub kkt_residual: f64,
    /// True when the tick fell back to the previous command.
    pub fallback: bool,
    /// True when the predicted trajectory exceeds the monitored speed
    /// envelope (informational only).
    pub v_limit_hit: bool,
}

struct WarmData {
    us: Vec<ControlInput>,
    xs: Vec<ReducedState>,
    active: Vec<ActiveBound>,
    /// Control time accumulated since the last horizon shift.
    carry: f64,
}

/// Receding-horizon controller with warm-started RTI stepping.
pub struct NmpcController {
    model: NmpcModel,
    cfg: NmpcConfig,
    warm: Option<WarmData>,
    last_cmd: Option<AttitudeThrustCommand>,
}

impl NmpcController {
    pub fn new(model: NmpcModel, cfg: NmpcConfig) -> Result<Self, NmpcError> {
        cfg.validate()?;
        if !(model.tau_phi > 0.0) || !(model.tau_theta > 0.0) || !(model.m_nominal > 0.0) {
            return Err(NmpcError::BadConfig(
                "model constants must be positive".into(),
            ));
        }
        Ok(Self {
            model,
            cfg,
            warm: None,
            last_cmd: None,
        })
    }

    pub fn model(&self) -> &NmpcModel {
        &self.model
    }

    pub fn config(&self) -> &NmpcConfig {
        &self.cfg
    }

    /// Drop warm-start data (used when the reference jumps discontinuously).
    pub fn reset(&mut self) {
        self.warm = None;
    }

    /// Disturbance-aware hover input: thrust balancing gravity minus the
    /// estimated vertical disturbance, level attitude.
    pub fn reference_input(&self, d_w: &Vector3<f64>) -> ControlInput {
        let t = (self.model.m_nominal * (self.model.gravity - d_w[2])).clamp(0.0, self.cfg.t_max);
        ControlInput::new(t, 0.0, 0.0)
    }

    /// Advance the receding-horizon solve by one control tick.
    ///
    /// `refs` holds horizon+1 reduced-state reference points spaced `cfg.dt`
    /// apart starting at the current time; `elapsed` is the control period
    /// since the previous call (drives the horizon shift, which happens
    /// every `dt / elapsed` ticks when the control rate outpaces the stage
    /// rate).
    pub fn solve_step(
        &mut self,
        x0: &ReducedState,
        refs: &[ReducedState],
        d_w: &Vector3<f64>,
        psi: f64,
        elapsed: f64,
    ) -> (AttitudeThrustCommand, SolveStats) {
        let n = self.cfg.horizon;
        let fallback_cmd = self
            .last_cmd
            .unwrap_or_else(|| AttitudeThrustCommand::hover(&self.model, psi));
        let mut stats = SolveStats {
            sqp_iters: 0,
            qp_iters: 0,
            qp_status: QpStatus::Optimal,
            kkt_residual: 0.0,
            fallback: false,
            v_limit_hit: false,
        };
        if refs.len() != n + 1 || !x0.iter().all(|v| v.is_finite()) {
            stats.fallback = true;
            return (fallback_cmd, stats);
        }

        let u_ref = self.reference_input(d_w);
        let mut warm = match self.warm.take() {
            Some(mut w) => {
                w.carry += elapsed;
                while w.carry >= self.cfg.dt - 1e-12 {
                    w.carry -= self.cfg.dt;
                    // Shift one stage: drop the first input, repeat the
                    // last one, extend the state tail by one integration.
                    w.us.rotate_left(1);
                    w.us[n - 1] = w.us[n - 2];
                    w.xs.rotate_left(1);
                    let tail_x = w.xs[n - 1];
                    w.xs[n] =
                        rk4_stage(&tail_x, &w.us[n - 1], d_w, psi, &self.model, self.cfg.dt);
                    // The shifted active set keeps per-variable meaning
                    // except for the final stage, which is fresh.
                    w.active.rotate_left(3);
                    for slot in w.active.iter_mut().rev().take(3) {
                        *slot = ActiveBound::Free;
                    }
                }
                w.xs[0] = *x0;
                w
            }
            None => WarmData {
                us: vec![u_ref; n],
                xs: rollout(x0, &vec![u_ref; n], d_w, psi, &self.model, self.cfg.dt),
                active: vec![ActiveBound::Free; 3 * n],
                carry: 0.0,
            },
        };

        for _ in 0..self.cfg.k_sqp {
            stats.sqp_iters += 1;
            let (condensed, stages) = match build_condensed(
                refs, &u_ref, d_w, psi, &self.model, &self.cfg, &warm.xs, &warm.us,
            ) {
                Ok(c) => c,
                Err(_) => {
                    stats.fallback = true;
                    self.warm = None;
                    self.last_cmd = Some(fallback_cmd);
                    return (fallback_cmd, stats);
                }
            };
            let sol: QpSolution = qp::solve(&condensed, Some(&warm.active));
            stats.qp_iters += sol.iterations;
            stats.qp_status = sol.status;
            stats.kkt_residual = sol.kkt_residual;
            if sol.status == QpStatus::Infeasible || !sol.x.iter().all(|v| v.is_finite()) {
                stats.fallback = true;
                self.warm = None;
                self.last_cmd = Some(fallback_cmd);
                return (fallback_cmd, stats);
            }
            warm.active = sol.active_set.clone();

            // Full Gauss-Newton step: inputs take delta_u, states take the
            // condensed delta_x so the shooting gaps close quadratically.
            // Reuses the QP's own stage linearization; relinearizing around
            // the partially updated trajectory double-counts deviations.
            let mut m_k = ReducedState::zeros();
            let lo = self.cfg.input_lb();
            let hi = self.cfg.input_ub();
            for (k, stage) in stages.iter().enumerate() {
                let du = ControlInput::new(sol.x[3 * k], sol.x[3 * k + 1], sol.x[3 * k + 2]);
                m_k = stage.a * m_k + stage.b * du + stage.defect;
                warm.xs[k + 1] += m_k;
                for r in 0..3 {
                    warm.us[k][r] = (warm.us[k][r] + du[r]).clamp(lo[r], hi[r]);
                }
            }
            if stats.qp_status == QpStatus::MaxIterations {
                break;
            }
        }

        if let Some(vmax) = self.cfg.v_limit {
            stats.v_limit_hit = warm
                .xs
                .iter()
                .any(|x| x.fixed_rows::<3>(3).norm() > vmax);
        }

        let u0 = warm.us[0];
        let cmd = AttitudeThrustCommand {
            thrust: u0[0].clamp(0.0, self.cfg.t_max),
            phi_cmd: u0[1].clamp(-self.cfg.angle_max, self.cfg.angle_max),
            theta_cmd: u0[2].clamp(-self.cfg.angle_max, self.cfg.angle_max),
            psi_cmd: psi,
        };
        self.last_cmd = Some(cmd);
        self.warm = Some(warm);
        (cmd, stats)
    }
}

/// One attitude log sample for time-constant identification.
#[derive(Debug, Clone, Copy)]
pub struct SysIdSample {
    pub t: f64,
    pub phi_cmd: f64,
    pub phi: f64,
    pub theta_cmd: f64,
    pub theta: f64,
}

/// Fitted first-order attitude response constants.
#[derive(Debug, Clone, Copy)]
pub struct SysIdFit {
    pub tau_phi: f64,
    pub tau_theta: f64,
    /// RMS one-step prediction residual per axis, rad.
    pub residual_phi: f64,
    pub residual_theta: f64,
}

/// Variance floor below which the command sequence cannot identify a lag.
pub const MIN_EXCITATION_VARIANCE: f64 = 1e-6;

/// Least-squares fit of `x_{k+1} - x_k = s * (cmd_k - x_k)` per axis,
/// mapped back through `tau = -dt / ln(1 - s)`. Exact when the response
/// is a discretized first-order lag with zero-order-hold commands.
pub fn identify_time_constants(samples: &[SysIdSample]) -> Result<SysIdFit, NmpcError> {
    if samples.len() < 8 {
        return Err(NmpcError::BadLog);
    }
    let dt = samples[1].t - samples[0].t;
    if !(dt > 0.0) {
        return Err(NmpcError::BadLog);
    }
    for w in samples.windows(2) {
        if ((w[1].t - w[0].t) - dt).abs() > 1e-9 {
            return Err(NmpcError::BadLog);
        }
    }
    let n = samples.len() as f64;
    let mean_phi_cmd = samples.iter().map(|s| s.phi_cmd).sum::<f64>() / n;
    let var_phi = samples
        .iter()
        .map(|s| (s.phi_cmd - mean_phi_cmd).powi(2))
        .sum::<f64>()
        / n;
    let mean_theta_cmd = samples.iter().map(|s| s.theta_cmd).sum::<f64>() / n;
    let var_theta = samples
        .iter()
        .map(|s| (s.theta_cmd - mean_theta_cmd).powi(2))
        .sum::<f64>()
        / n;
    let variance = var_phi.min(var_theta);
    if variance < MIN_EXCITATION_VARIANCE {
        return Err(NmpcError::InsufficientExcitation { variance });
    }

    let fit_axis = |value: &dyn Fn(&SysIdSample) -> f64,
                    cmd: &dyn Fn(&SysIdSample) -> f64|
     -> Result<(f64, f64), NmpcError> {
        let mut num = 0.0;
        let mut den = 0.0;
        for w in samples.windows(2) {
            let u = cmd(&w[0]) - value(&w[0]);
            let dx = value(&w[1]) - value(&w[0]);
            num += u * dx;
            den += u * u;
        }
        if den < 1e-12 {
            return Err(NmpcError::InsufficientExcitation { variance: den });
        }
        let s = num / den;
        if !(s > 0.0 && s < 1.0) {
            return Err(NmpcError::BadLog);
        }
        let tau = -dt / (1.0 - s).ln();
        let mut sq = 0.0;
        for w in samples.windows(2) {
            let u = cmd(&w[0]) - value(&w[0]);
            let dx = value(&w[1]) - value(&w[0]);
            sq += (dx - s * u).powi(2);
        }
        Ok((tau, (sq / (samples.len() - 1) as f64).sqrt()))
    };

    let (tau_phi, residual_phi) = fit_axis(&|s| s.phi, &|s| s.phi_cmd)?;
    let (tau_theta, residual_theta) = fit_axis(&|s| s.theta, &|s| s.theta_cmd)?;
    Ok(SysIdFit {
        tau_phi,
        tau_theta,
        residual_phi,
        residual_theta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn hover_state(z: f64) -> ReducedState {
        let mut x = ReducedState::zeros();
        x[2] = z;
        x
    }

    #[test]
    fn hover_consistent_inputs_give_zero_derivative() {
        let model = NmpcModel::default();
        let u = AttitudeThrustCommand::hover(&model, 0.0);
        let dx = predict_model(&hover_state(-1.0), &u, &Vector3::zeros(), &model);
        assert!(dx.amax() < 1e-12);
    }

    #[test]
    fn ramped_circle_tracking_stays_bounded_on_own_model() {
        let circle = crate::scenario::CircleRef {
            center: [0.0, 0.0],
            radius: 1.8,
            speed: 2.0,
            altitude: 1.0,
            ramp_time: 3.0,
            yaw: 0.0,
        };
        let model = NmpcModel::default();
        let cfg = NmpcConfig::default();
        let horizon = cfg.horizon;
        let stage_dt = cfg.dt;
        let mut ctrl = NmpcController::new(model, cfg).unwrap();
        let dt_c = 0.01;
        let (p0, _) = circle.sample(0.0);
        let mut x = ReducedState::zeros();
        x.fixed_rows_mut::<3>(0).copy_from(&p0);
        let mut max_err = 0.0_f64;
        for k in 0..1500 {
            let t = k as f64 * dt_c;
            let refs: Vec<ReducedState> = (0..=horizon)
                .map(|i| {
                    let (p, v) = circle.sample(t + i as f64 * stage_dt);
                    let mut r = ReducedState::zeros();
                    r.fixed_rows_mut::<3>(0).copy_from(&p);
                    r.fixed_rows_mut::<3>(3).copy_from(&v);
                    r
                })
                .collect();
            let (cmd, stats) = ctrl.solve_step(&x, &refs, &Vector3::zeros(), 0.0, dt_c);
            assert!(!stats.fallback, "fallback at t = {t:.2}");
            // The plant here is the controller's own model, so any
            // sustained error is the solver's fault alone.
            for _ in 0..10 {
                let dx = predict_model(&x, &cmd, &Vector3::zeros(), &model);
                x += dx * 0.001;
            }
            let (p_ref, _) = circle.sample(t + dt_c);
            let err = (x.fixed_rows::<3>(0) - p_ref).norm();
            if t > 1.0 {
                max_err = max_err.max(err);
            }
        }
        assert!(
            max_err < 0.25,
            "tracking error reached {max_err:.3} m against the controller's own model"
        );
    }

    #[test]
    fn attitude_channel_is_first_order_lag() {
        let model = NmpcModel {
            tau_phi: 0.2,
            ..NmpcModel::default()
        };
        let u = AttitudeThrustCommand {
            thrust: model.m_nominal * model.gravity,
            phi_cmd: 0.1,
            theta_cmd: 0.0,
            psi_cmd: 0.0,
        };
        let dx = predict_model(&ReducedState::zeros(), &u, &Vector3::zeros(), &model);
        assert_relative_eq!(dx[6], 0.5, epsilon = 1e-12);
    }

    #[test]
    fn static_balance_ties_thrust_to_vertical_disturbance() {
        let model = NmpcModel::default();
        let d = Vector3::new(0.0, 0.0, -1.576);
        let u = AttitudeThrustCommand {
            thrust: model.m_nominal * (model.gravity - d[2]),
            phi_cmd: 0.0,
            theta_cmd: 0.0,
            psi_cmd: 0.0,
        };
        let dx = predict_model(&hover_state(-1.0), &u, &d, &model);
        assert!(dx.fixed_rows::<3>(3).amax() < 1e-12);
    }

    #[test]
    fn discrete_jacobians_match_finite_differences() {
        let model = NmpcModel::default();
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let h = 0.05;
        for _ in 0..100 {
            let mut x = ReducedState::zeros();
            for i in 0..6 {
                x[i] = rng.gen_range(-2.0..2.0);
            }
            x[6] = rng.gen_range(-0.4..0.4);
            x[7] = rng.gen_range(-0.4..0.4);
            let u = ControlInput::new(
                rng.gen_range(2.0..20.0),
                rng.gen_range(-0.4..0.4),
                rng.gen_range(-0.4..0.4),
            );
            let d = Vector3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            );
            let psi = rng.gen_range(-3.0..3.0);
            let (_, a, b) = rk4_stage_with_jacobians(&x, &u, &d, psi, &model, h);

            let eps = 1e-6;
            for j in 0..8 {
                let mut xp = x;
                let mut xm = x;
                xp[j] += eps;
                xm[j] -= eps;
                let fd = (rk4_stage(&xp, &u, &d, psi, &model, h)
                    - rk4_stage(&xm, &u, &d, psi, &model, h))
                    / (2.0 * eps);
                for i in 0..8 {
                    let denom = a[(i, j)].abs().max(1.0);
                    assert!(
                        (a[(i, j)] - fd[i]).abs() / denom < 1e-6,
                        "A[{i},{j}] mismatch: {} vs {}",
                        a[(i, j)],
                        fd[i]
                    );
                }
            }
            for j in 0..3 {
                let mut up = u;
                let mut um = u;
                up[j] += eps;
                um[j] -= eps;
                let fd = (rk4_stage(&x, &up, &d, psi, &model, h)
                    - rk4_stage(&x, &um, &d, psi, &model, h))
                    / (2.0 * eps);
                for i in 0..8 {
                    let denom = b[(i, j)].abs().max(1.0);
                    assert!(
                        (b[(i, j)] - fd[i]).abs() / denom < 1e-6,
                        "B[{i},{j}] mismatch"
                    );
                }
            }
        }
    }

    fn hover_refs(cfg: &NmpcConfig, z: f64) -> Vec<ReducedState> {
        vec![hover_state(z); cfg.horizon + 1]
    }

    #[test]
    fn on_reference_hover_returns_exact_hover_command() {
        let model = NmpcModel::default();
        let cfg = NmpcConfig::default();
        let mut ctl = NmpcController::new(model, cfg.clone()).unwrap();
        let x0 = hover_state(-1.0);
        let refs = hover_refs(&cfg, -1.0);
        let (cmd, stats) = ctl.solve_step(&x0, &refs, &Vector3::zeros(), 0.0, 0.01);
        assert!(!stats.fallback);
        assert_relative_eq!(
            cmd.thrust,
            model.m_nominal * model.gravity,
            epsilon = 1e-6
        );
        assert!(cmd.phi_cmd.abs() < 1e-6);
        assert!(cmd.theta_cmd.abs() < 1e-6);
    }

    #[test]
    fn north_step_pitches_nose_down() {
        let model = NmpcModel::default();
        let cfg = NmpcConfig::default();
        let mut ctl = NmpcController::new(model, cfg.clone()).unwrap();
        let x0 = hover_state(-1.0);
        let mut target = hover_state(-1.0);
        target[0] = 1.0;
        let refs = vec![target; cfg.horizon + 1];
        let (cmd, stats) = ctl.solve_step(&x0, &refs, &Vector3::zeros(), 0.0, 0.01);
        assert!(!stats.fallback);
        assert!(
            cmd.theta_cmd < -1e-4,
            "expected nose-down pitch toward +x, got {}",
            cmd.theta_cmd
        );
    }

    #[test]
    fn commands_always_respect_bounds() {
        let model = NmpcModel::default();
        let cfg = NmpcConfig::default();
        let mut ctl = NmpcController::new(model, cfg.clone()).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        for _ in 0..50 {
            let mut x0 = ReducedState::zeros();
            for i in 0..3 {
                x0[i] = rng.gen_range(-20.0..20.0);
                x0[i + 3] = rng.gen_range(-5.0..5.0);
            }
            let refs = hover_refs(&cfg, -1.0);
            let (cmd, _) = ctl.solve_step(&x0, &refs, &Vector3::zeros(), 0.0, 0.01);
            assert!(cmd.thrust >= 0.0 && cmd.thrust <= cfg.t_max);
            assert!(cmd.phi_cmd.abs() <= cfg.angle_max + 1e-12);
            assert!(cmd.theta_cmd.abs() <= cfg.angle_max + 1e-12);
        }
    }

    #[test]
    fn converged_solution_is_time_invariant() {
        let model = NmpcModel::default();
        let cfg = NmpcConfig::default();
        let mut ctl = NmpcController::new(model, cfg.clone()).unwrap();
        let x0 = hover_state(-1.0);
        let refs = hover_refs(&cfg, -1.0);
        let mut last: Option<AttitudeThrustCommand> = None;
        for _ in 0..30 {
            let (cmd, _) = ctl.solve_step(&x0, &refs, &Vector3::zeros(), 0.0, 0.01);
            if let Some(prev) = last {
                assert!((cmd.thrust - prev.thrust).abs() < 1e-8);
                assert!((cmd.phi_cmd - prev.phi_cmd).abs() < 1e-8);
                assert!((cmd.theta_cmd - prev.theta_cmd).abs() < 1e-8);
            }
            last = Some(cmd);
        }
    }

    #[test]
    fn doubling_weights_preserves_argmin() {
        let model = NmpcModel::default();
        let cfg = NmpcConfig::default();
        let mut cfg2 = cfg.clone();
        for w in cfg2.q_weights.iter_mut() {
            *w *= 2.0;
        }
        for w in cfg2.qn_weights.iter_mut() {
            *w *= 2.0;
        }
        for w in cfg2.r_weights.iter_mut() {
            *w *= 2.0;
        }
        let mut x0 = hover_state(-1.0);
        x0[0] = 0.4;
        x0[5] = 0.2;
        let refs = hover_refs(&cfg, -1.2);
        let u_ref = ControlInput::new(model.m_nominal * model.gravity, 0.0, 0.0);
        let guess = vec![u_ref; cfg.horizon];
        let qp1 = transcribe(
            &x0,
            &refs,
            &u_ref,
            &Vector3::zeros(),
            0.0,
            &model,
            &cfg,
            &guess,
        )
        .unwrap();
        let qp2 = transcribe(
            &x0,
            &refs,
            &u_ref,
            &Vector3::zeros(),
            0.0,
            &model,
            &cfg2,
            &guess,
        )
        .unwrap();
        let s1 = qp::solve(&qp1, None);
        let s2 = qp::solve(&qp2, None);
        assert_eq!(s1.status, QpStatus::Optimal);
        assert_eq!(s2.status, QpStatus::Optimal);
        assert!((&s1.x - &s2.x).amax() < 1e-8);
    }

    #[test]
    fn two_stage_vertical_instance_matches_hand_solution() {
        // Vertical-only problem: level attitude, lateral weights zeroed.
        // With constant thrust over a stage the vertical dynamics are
        // exactly z' = z + h v + h^2/2 a, v' = v + h a, a = g - T/m, so
        // the optimum solves a 2x2 linear system spelled out here.
        let model = NmpcModel::default();
        let cfg = NmpcConfig {
            horizon: 2,
            dt: 0.05,
            q_weights: [0.0, 0.0, 10.0, 0.0, 0.0, 1.0, 0.0, 0.0],
            qn_weights: [0.0, 0.0, 100.0, 0.0, 0.0, 10.0, 0.0, 0.0],
            r_weights: [0.1, 5.0, 5.0],
            t_max: 1e6,
            angle_max: 0.5,
            v_limit: None,
            k_sqp: 1,
        };
        let z0 = -0.8;
        let v0 = 0.3;
        let zr = -1.0;
        let mut x0 = hover_state(z0);
        x0[5] = v0;
        let refs = hover_refs(&cfg, zr);
        let t_hover = model.m_nominal * model.gravity;
        let u_ref = ControlInput::new(t_hover, 0.0, 0.0);
        let guess = vec![u_ref; 2];
        let qp_problem = transcribe(
            &x0,
            &refs,
            &u_ref,
            &Vector3::zeros(),
            0.0,
            &model,
            &cfg,
            &guess,
        )
        .unwrap();
        let sol = qp::solve(&qp_problem, None);
        assert_eq!(sol.status, QpStatus::Optimal);

        // Hand solution in acceleration variables a_k = g - T_k/m,
        // linearized about a = 0 (the guess), i.e. da_k = -dT_k/m.
        let h = cfg.dt;
        let m = model.m_nominal;
        let (qz, qv) = (10.0, 1.0);
        let (qzn, qvn) = (100.0, 10.0);
        let r_t = 0.1;
        // States after stages with guess thrust (a = 0):
        let z1 = z0 + h * v0;
        let v1 = v0;
        let z2 = z1 + h * v1;
        let v2 = v1;
        // Sensitivities of (z1, v1) to a0 and (z2, v2) to (a0, a1).
        let (dz1_da0, dv1_da0) = (h * h / 2.0, h);
        let (dz2_da0, dv2_da0) = (h * h / 2.0 + h * h, h);
        let (dz2_da1, dv2_da1) = (h * h / 2.0, h);
        // Cost in (a0, a1): J = qz e_z1^2 + qv e_v1^2 + qzn e_z2^2 +
        // qvn e_v2^2 + r m^2 (a0^2 + a1^2); gradient = 0 gives K a = -rhs.
        let e_z1 = z1 - zr;
        let e_z2 = z2 - zr;
        let k00 = qz * dz1_da0 * dz1_da0
            + qv * dv1_da0 * dv1_da0
            + qzn * dz2_da0 * dz2_da0
            + qvn * dv2_da0 * dv2_da0
            + r_t * m * m;
        let k01 = qzn * dz2_da0 * dz2_da1 + qvn * dv2_da0 * dv2_da1;
        let k11 = qzn * dz2_da1 * dz2_da1 + qvn * dv2_da1 * dv2_da1 + r_t * m * m;
        let g0 = qz * e_z1 * dz1_da0
            + qv * v1 * dv1_da0
            + qzn * e_z2 * dz2_da0
            + qvn * v2 * dv2_da0;
        let g1 = qzn * e_z2 * dz2_da1 + qvn * v2 * dv2_da1;
        let det = k00 * k11 - k01 * k01;
        let a0 = (-g0 * k11 + g1 * k01) / det;
        let a1 = (-g1 * k00 + g0 * k01) / det;
        // Map accelerations back to thrust deltas: dT = -m a.
        assert_relative_eq!(sol.x[0], -m * a0, epsilon = 1e-6);
        assert_relative_eq!(sol.x[3], -m * a1, epsilon = 1e-6);
        assert!(sol.x[1].abs() < 1e-9 && sol.x[2].abs() < 1e-9);
    }

    #[test]
    fn qp_gradient_matches_nonlinear_cost_finite_difference() {
        let model = NmpcModel::default();
        let cfg = NmpcConfig {
            horizon: 5,
            ..NmpcConfig::default()
        };
        let mut rng = ChaCha12Rng::seed_from_u64(41);
        let mut x0 = hover_state(-1.0);
        x0[0] = 0.3;
        x0[4] = -0.2;
        x0[6] = 0.05;
        let refs = hover_refs(&cfg, -1.4);
        let d = Vector3::new(0.2, -0.1, -0.4);
        let u_ref = ControlInput::new(model.m_nominal * (model.gravity - d[2]), 0.0, 0.0);
        let mut guess = vec![u_ref; cfg.horizon];
        for g in guess.iter_mut() {
            g[0] += rng.gen_range(-0.5..0.5);
            g[1] += rng.gen_range(-0.05..0.05);
            g[2] += rng.gen_range(-0.05..0.05);
        }

        let cost = |us: &[ControlInput]| -> f64 {
            let xs = rollout(&x0, us, &d, 0.0, &model, cfg.dt);
            let mut j = 0.0;
            for k in 1..=cfg.horizon {
                let w = if k == cfg.horizon {
                    &cfg.qn_weights
                } else {
                    &cfg.q_weights
                };
                let e = xs[k] - refs[k];
                for i in 0..8 {
                    j += w[i] * e[i] * e[i];
                }
            }
            for u in us {
                for r in 0..3 {
                    j += cfg.r_weights[r] * (u[r] - u_ref[r]).powi(2);
                }
            }
            j
        };

        let xs = rollout(&x0, &guess, &d, 0.0, &model, cfg.dt);
        let (condensed, _) =
            build_condensed(&refs, &u_ref, &d, 0.0, &model, &cfg, &xs, &guess).unwrap();
        // Gradient of 1/2 z'Hz + f'z at z = 0 is f; compare against
        // central differences of the nonlinear rollout cost.
        let eps = 1e-6;
        for k in 0..cfg.horizon {
            for r in 0..3 {
                let mut up = guess.clone();
                let mut um = guess.clone();
                up[k][r] += eps;
                um[k][r] -= eps;
                let fd = (cost(&up) - cost(&um)) / (2.0 * eps);
                let grad = condensed.linear_term()[3 * k + r];
                let denom = fd.abs().max(1.0);
                assert!(
                    (grad - fd).abs() / denom < 1e-5,
                    "gradient mismatch at stage {k} input {r}: {grad} vs {fd}"
                );
            }
        }
    }

    #[test]
    fn rejects_bad_reference_and_config() {
        let model = NmpcModel::default();
        let cfg = NmpcConfig::default();
        let mut ctl = NmpcController::new(model, cfg.clone()).unwrap();
        let x0 = hover_state(-1.0);
        let refs = vec![x0; 3];
        let (_, stats) = ctl.solve_step(&x0, &refs, &Vector3::zeros(), 0.0, 0.01);
        assert!(stats.fallback);

        let bad = NmpcConfig {
            horizon: 1,
            ..NmpcConfig::default()
        };
        assert!(NmpcController::new(model, bad).is_err());
        let zero_q = NmpcConfig {
            q_weights: [0.0; 8],
            qn_weights: [0.0; 8],
            ..NmpcConfig::default()
        };
        assert!(NmpcController::new(model, zero_q).is_err());
    }

    #[test]
    fn fit_recovers_exact_lag_without_noise() {
        let dt = 0.01_f64;
        let tau = 0.15_f64;
        let s = 1.0 - (-dt / tau).exp();
        let mut phi = 0.0;
        let mut theta = 0.0;
        let mut samples = Vec::new();
        for k in 0..300 {
            let t = k as f64 * dt;
            let phi_cmd = if t < 1.5 { 0.2 } else { -0.1 };
            let theta_cmd = if t < 1.0 { -0.15 } else { 0.25 };
            samples.push(SysIdSample {
                t,
                phi_cmd,
                phi,
                theta_cmd,
                theta,
            });
            phi += s * (phi_cmd - phi);
            theta += s * (theta_cmd - theta);
        }
        let fit = identify_time_constants(&samples).unwrap();
        assert_relative_eq!(fit.tau_phi, tau, epsilon = 1e-6);
        assert_relative_eq!(fit.tau_theta, tau, epsilon = 1e-6);
        assert!(fit.residual_phi < 1e-12);
    }

    #[test]
    fn fit_tolerates_measurement_noise() {
        let dt = 0.01_f64;
        let tau = 0.15_f64;
        let s = 1.0 - (-dt / tau).exp();
        let mut worst: f64 = 0.0;
        for seed in 0..20 {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let mut phi = 0.0;
            let mut samples = Vec::new();
            for k in 0..1000 {
                let t = k as f64 * dt;
                let phi_cmd = if (t / 1.5) as i64 % 2 == 0 { 0.2 } else { -0.2 };
                let noisy = phi + 0.002 * rng.gen_range(-1.0..1.0);
                samples.push(SysIdSample {
                    t,
                    phi_cmd,
                    phi: noisy,
                    theta_cmd: phi_cmd,
                    theta: noisy,
                });
                phi += s * (phi_cmd - phi);
            }
            let fit = identify_time_constants(&samples).unwrap();
            worst = worst.max((fit.tau_phi - tau).abs() / tau);
        }
        assert!(worst < 0.05, "worst relative fit error {worst}");
    }

    #[test]
    fn fit_rejects_flat_commands() {
        let samples: Vec<SysIdSample> = (0..100)
            .map(|k| SysIdSample {
                t: k as f64 * 0.01,
                phi_cmd: 0.0,
                phi: 0.0,
                theta_cmd: 0.0,
                theta: 0.0,
            })
            .collect();
        assert!(matches!(
            identify_time_constants(&samples),
            Err(NmpcError::InsufficientExcitation { .. })
        ));
    }
}
