//! Dense convex QP solver used by the controller layer.
//!
//! Solves
//!
//! ```text
//! min  1/2 x' H x + f' x
//! s.t. A_eq x = b_eq,   lb <= x <= ub
//! ```
//!
//! with a primal active-set method: keep a working set of bound constraints
//! treated as equalities, solve the equality-constrained subproblem, then
//! either step to the subproblem minimizer (adding the first blocking bound
//! found by the ratio test) or, when already there, drop the active bound
//! with the most negative multiplier. With a positive-definite Hessian each
//! step strictly decreases the objective, so the iteration terminates.
//!
//! Determinism: candidate bounds are scanned in ascending index order and a
//! tie keeps the earlier index, so identical inputs take identical paths.
//!
//! Problem sizes here are small (tens of variables at a 100 Hz control
//! rate), which is why the linear algebra is plain dense LU on the reduced
//! KKT system rather than anything factored incrementally.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

/// Convergence tolerance on the max-norm KKT residual.
pub const KKT_TOL: f64 = 1e-8;
/// Default active-set iteration budget.
pub const DEFAULT_MAX_ITER: usize = 200;
/// Regularization ladder tried in order until the smallest eigenvalue of
/// `H + eps I` clears `MIN_EIG`.
pub const REG_LADDER: [f64; 7] = [0.0, 1e-10, 1e-8, 1e-6, 1e-4, 1e-2, 1.0];
/// Eigenvalue floor the regularized Hessian must reach.
pub const MIN_EIG: f64 = 1e-10;

/// Per-variable bound activity; doubles as the warm-start token.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActiveBound {
    Free,
    Lower,
    Upper,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpStatus {
    /// KKT residual below [`KKT_TOL`].
    Optimal,
    /// Iteration budget exhausted; solution is the best iterate.
    MaxIterations,
    /// No point satisfies the equality constraints and bounds together.
    Infeasible,
}

#[derive(Debug, Error, PartialEq)]
pub enum QpError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("Hessian is not symmetric (max asymmetry {0:.3e})")]
    Asymmetric(f64),
    #[error("bound ordering violated at index {0} (lb > ub)")]
    BoundOrder(usize),
    #[error("equality constraint matrix is row-rank deficient")]
    RankDeficient,
    #[error("non-finite entry in problem data")]
    NonFinite,
}

/// Validated problem data.
#[derive(Debug, Clone)]
pub struct QpProblem {
    h: DMatrix<f64>,
    f: DVector<f64>,
    a_eq: DMatrix<f64>,
    b_eq: DVector<f64>,
    lb: DVector<f64>,
    ub: DVector<f64>,
}

impl QpProblem {
    /// Box-constrained problem without equality rows.
    pub fn new_box(
        h: DMatrix<f64>,
        f: DVector<f64>,
        lb: DVector<f64>,
        ub: DVector<f64>,
    ) -> Result<Self, QpError> {
        let n = f.len();
        Self::new(h, f, DMatrix::zeros(0, n), DVector::zeros(0), lb, ub)
    }

    pub fn new(
        h: DMatrix<f64>,
        f: DVector<f64>,
        a_eq: DMatrix<f64>,
        b_eq: DVector<f64>,
        lb: DVector<f64>,
        ub: DVector<f64>,
    ) -> Result<Self, QpError> {
        let n = f.len();
        if n == 0 || h.nrows() != n || h.ncols() != n {
            return Err(QpError::Dimension(format!(
                "H is {}x{}, f has length {n}",
                h.nrows(),
                h.ncols()
            )));
        }
        if lb.len() != n || ub.len() != n {
            return Err(QpError::Dimension("bound length != n".into()));
        }
        if a_eq.ncols() != n && a_eq.nrows() > 0 {
            return Err(QpError::Dimension("A_eq column count != n".into()));
        }
        if a_eq.nrows() != b_eq.len() {
            return Err(QpError::Dimension("A_eq rows != b_eq length".into()));
        }
        let finite = h.iter().all(|v| v.is_finite())
            && f.iter().all(|v| v.is_finite())
            && a_eq.iter().all(|v| v.is_finite())
            && b_eq.iter().all(|v| v.is_finite())
            && lb.iter().all(|v| !v.is_nan())
            && ub.iter().all(|v| !v.is_nan());
        if !finite {
            return Err(QpError::NonFinite);
        }
        let asym = (&h - h.transpose()).abs().max();
        if asym > 1e-10 {
            return Err(QpError::Asymmetric(asym));
        }
        for i in 0..n {
            if lb[i] > ub[i] {
                return Err(QpError::BoundOrder(i));
            }
        }
        if a_eq.nrows() > 0 {
            if a_eq.nrows() > n {
                return Err(QpError::RankDeficient);
            }
            let svd = a_eq.clone().svd(false, false);
            let smax = svd.singular_values.max();
            let smin = svd.singular_values.min();
            if smax <= 0.0 || smin < 1e-10 * smax {
                return Err(QpError::RankDeficient);
            }
        }
        Ok(Self {
            h,
            f,
            a_eq,
            b_eq,
            lb,
            ub,
        })
    }

    pub fn n(&self) -> usize {
        self.f.len()
    }

    /// Quadratic term (pre-regularization).
    pub fn hessian(&self) -> &DMatrix<f64> {
        &self.h
    }

    /// Linear term; equals the cost gradient at the origin.
    pub fn linear_term(&self) -> &DVector<f64> {
        &self.f
    }

    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * (x.transpose() * &self.h * x)[(0, 0)] + self.f.dot(x)
    }
}

/// Solver output. `active_set` can seed the next warm start.
#[derive(Debug, Clone)]
pub struct QpSolution {
    pub x: DVector<f64>,
    /// Multipliers of the equality rows.
    pub lambda_eq: DVector<f64>,
    /// Bound multipliers, zero for free variables, nonnegative at optimum.
    pub bound_multipliers: DVector<f64>,
    pub active_set: Vec<ActiveBound>,
    pub iterations: usize,
    pub kkt_residual: f64,
    pub status: QpStatus,
    pub objective: f64,
    /// Regularization actually applied to the Hessian.
    pub regularization: f64,
}

/// Smallest ladder entry that lifts the minimum eigenvalue of `H + eps I`
/// to [`MIN_EIG`]. Returns the shifted matrix and the entry used.
pub fn regularize(h: &DMatrix<f64>) -> (DMatrix<f64>, f64) {
    let eig_min = h
        .clone()
        .symmetric_eigenvalues()
        .iter()
        .fold(f64::INFINITY, |a, &b| a.min(b));
    for &eps in REG_LADDER.iter() {
        if eig_min + eps >= MIN_EIG {
            let mut out = h.clone();
            for i in 0..h.nrows() {
                out[(i, i)] += eps;
            }
            return (out, eps);
        }
    }
    let eps = *REG_LADDER.last().unwrap();
    let mut out = h.clone();
    for i in 0..h.nrows() {
        out[(i, i)] += eps;
    }
    (out, eps)
}

/// Solve with the default iteration budget.
pub fn solve(problem: &QpProblem, warm: Option<&[ActiveBound]>) -> QpSolution {
    solve_traced(problem, warm, DEFAULT_MAX_ITER).0
}

/// Solve and also report the objective after every active-set iteration
/// (diagnostics; the sequence is non-increasing).
pub fn solve_traced(
    problem: &QpProblem,
    warm: Option<&[ActiveBound]>,
    max_iter: usize,
) -> (QpSolution, Vec<f64>) {
    let n = problem.n();
    let m = problem.a_eq.nrows();
    let (h_reg, reg) = regularize(&problem.h);

    let mut working: Vec<ActiveBound> = match warm {
        Some(w) if w.len() == n => w.to_vec(),
        _ => vec![ActiveBound::Free; n],
    };
    // Working-set entries only make sense for finite bounds.
    for i in 0..n {
        match working[i] {
            ActiveBound::Lower if !problem.lb[i].is_finite() => working[i] = ActiveBound::Free,
            ActiveBound::Upper if !problem.ub[i].is_finite() => working[i] = ActiveBound::Free,
            _ => {}
        }
    }

    let mut x = DVector::zeros(n);
    for i in 0..n {
        x[i] = match working[i] {
            ActiveBound::Lower => problem.lb[i],
            ActiveBound::Upper => problem.ub[i],
            ActiveBound::Free => 0.0f64.clamp(problem.lb[i], problem.ub[i]),
        };
    }

    if m > 0 && !project_feasible(problem, &mut x, &mut working) {
        let obj = problem.objective(&x);
        return (
            QpSolution {
                x,
                lambda_eq: DVector::zeros(m),
                bound_multipliers: DVector::zeros(n),
                active_set: working,
                iterations: 0,
                kkt_residual: f64::INFINITY,
                status: QpStatus::Infeasible,
                objective: obj,
                regularization: reg,
            },
            Vec::new(),
        );
    }

    let mut lambda_eq = DVector::zeros(m);
    let mut trace = Vec::new();
    let mut iterations = 0;
    let mut status = QpStatus::MaxIterations;

    while iterations < max_iter {
        iterations += 1;
        let sub = match solve_working_set(&h_reg, problem, &working, &x) {
            Some(s) => s,
            None => {
                status = QpStatus::Infeasible;
                break;
            }
        };
        lambda_eq = sub.1;
        let x_hat = sub.0;
        let p = &x_hat - &x;

        if p.amax() < 1e-12 {
            // At the working-set minimizer: check bound multipliers.
            let g = &h_reg * &x + &problem.f + problem.a_eq.transpose() * &lambda_eq;
            let mut worst = 0.0f64;
            let mut worst_idx = None;
            for i in 0..n {
                let mu = match working[i] {
                    ActiveBound::Lower => g[i],
                    ActiveBound::Upper => -g[i],
                    ActiveBound::Free => continue,
                };
                if mu < worst {
                    worst = mu;
                    worst_idx = Some(i);
                }
            }
            match worst_idx {
                Some(i) if worst < -1e-9 => {
                    working[i] = ActiveBound::Free;
                    trace.push(problem.objective(&x));
                    continue;
                }
                _ => {
                    status = QpStatus::Optimal;
                    trace.push(problem.objective(&x));
                    break;
                }
            }
        }

        // Ratio test: largest step along p that keeps every free variable
        // inside its box. Ascending scan with strict improvement keeps the
        // lowest blocking index on ties.
        let mut alpha = 1.0f64;
        let mut blocking: Option<(usize, ActiveBound)> = None;
        for i in 0..n {
            if working[i] != ActiveBound::Free {
                continue;
            }
            if p[i] > 1e-14 && problem.ub[i].is_finite() {
                let a = (problem.ub[i] - x[i]) / p[i];
                if a < alpha {
                    alpha = a;
                    blocking = Some((i, ActiveBound::Upper));
                }
            } else if p[i] < -1e-14 && problem.lb[i].is_finite() {
                let a = (problem.lb[i] - x[i]) / p[i];
                if a < alpha {
                    alpha = a;
                    blocking = Some((i, ActiveBound::Lower));
                }
            }
        }
        let alpha = alpha.max(0.0);
        x += alpha * &p;
        if let Some((i, side)) = blocking {
            working[i] = side;
            // Snap exactly onto the bound to keep later feasibility checks
            // free of drift.
            x[i] = match side {
                ActiveBound::Lower => problem.lb[i],
                ActiveBound::Upper => problem.ub[i],
                ActiveBound::Free => unreachable!(),
            };
        }
        trace.push(problem.objective(&x));
    }

    let (bound_multipliers, kkt_residual) =
        kkt_report(&h_reg, problem, &working, &x, &lambda_eq);
    if status == QpStatus::Optimal && kkt_residual >= KKT_TOL {
        status = QpStatus::MaxIterations;
    }
    let objective = problem.objective(&x);
    (
        QpSolution {
            x,
            lambda_eq,
            bound_multipliers,
            active_set: working,
            iterations,
            kkt_residual,
            status,
            objective,
            regularization: reg,
        },
        trace,
    )
}

/// Brute-force reference solver for box-only problems: enumerate every
/// {free, at-lower, at-upper} pattern, solve the free block of the
/// stationarity system, and keep the best primal-feasible candidate. The
/// optimum of a convex instance is attained at one such pattern, so the
/// minimum over feasible candidates is the global argmin without needing
/// multiplier sign checks. Exponential in n; returns None for problems
/// with equality rows or more than 12 variables.
pub fn reference_solve_box(problem: &QpProblem) -> Option<DVector<f64>> {
    let n = problem.n();
    if problem.a_eq.nrows() > 0 || n > 12 {
        return None;
    }
    let h = &problem.h;
    let mut best: Option<(f64, DVector<f64>)> = None;
    for code in 0..3usize.pow(n as u32) {
        let mut digits = code;
        let mut fixed = vec![None::<f64>; n];
        let mut representable = true;
        for (i, slot) in fixed.iter_mut().enumerate() {
            match digits % 3 {
                0 => {}
                1 if problem.lb[i].is_finite() => *slot = Some(problem.lb[i]),
                2 if problem.ub[i].is_finite() => *slot = Some(problem.ub[i]),
                _ => {
                    representable = false;
                    break;
                }
            }
            digits /= 3;
        }
        if !representable {
            continue;
        }
        let free: Vec<usize> = (0..n).filter(|&i| fixed[i].is_none()).collect();
        let mut x = DVector::zeros(n);
        for (i, slot) in fixed.iter().enumerate() {
            if let Some(v) = slot {
                x[i] = *v;
            }
        }
        if !free.is_empty() {
            let k = free.len();
            let mut h_ff = DMatrix::zeros(k, k);
            let mut rhs = DVector::zeros(k);
            for (a, &i) in free.iter().enumerate() {
                for (b, &j) in free.iter().enumerate() {
                    h_ff[(a, b)] = h[(i, j)];
                }
                let mut r = -problem.f[i];
                for (j, slot) in fixed.iter().enumerate() {
                    if let Some(v) = slot {
                        r -= h[(i, j)] * v;
                    }
                }
                rhs[a] = r;
            }
            let Some(x_free) = h_ff.lu().solve(&rhs) else {
                continue;
            };
            for (a, &i) in free.iter().enumerate() {
                x[i] = x_free[a];
            }
        }
        let feasible = (0..n).all(|i| {
            x[i] >= problem.lb[i] - 1e-9 && x[i] <= problem.ub[i] + 1e-9
        });
        if !feasible {
            continue;
        }
        let obj = problem.objective(&x);
        if best.as_ref().map_or(true, |(b, _)| obj < *b) {
            best = Some((obj, x));
        }
    }
    best.map(|(_, x)| x)
}

/// Alternating projection onto the equality manifold and the box. Returns
/// false when the two sets appear disjoint.
fn project_feasible(
    problem: &QpProblem,
    x: &mut DVector<f64>,
    working: &mut [ActiveBound],
) -> bool {
    let a = &problem.a_eq;
    let gram = a * a.transpose();
    let Some(gram_lu) = gram.clone().try_inverse() else {
        return false;
    };
    for _ in 0..200 {
        let residual = &problem.b_eq - a * &*x;
        if residual.amax() < 1e-10 {
            break;
        }
        *x += a.transpose() * (&gram_lu * residual);
        for i in 0..x.len() {
            x[i] = x[i].clamp(problem.lb[i], problem.ub[i]);
        }
    }
    let residual = (&problem.b_eq - a * &*x).amax();
    if residual > 1e-8 {
        return false;
    }
    for i in 0..x.len() {
        if (x[i] - problem.lb[i]).abs() < 1e-12 && problem.lb[i].is_finite() {
            working[i] = ActiveBound::Lower;
            x[i] = problem.lb[i];
        } else if (x[i] - problem.ub[i]).abs() < 1e-12 && problem.ub[i].is_finite() {
            working[i] = ActiveBound::Upper;
            x[i] = problem.ub[i];
        } else {
            working[i] = ActiveBound::Free;
        }
    }
    true
}

/// Equality-constrained subproblem for the current working set. Fixed
/// variables sit at their bounds; free variables and the equality
/// multipliers come from one dense KKT solve.
fn solve_working_set(
    h_reg: &DMatrix<f64>,
    problem: &QpProblem,
    working: &[ActiveBound],
    x: &DVector<f64>,
) -> Option<(DVector<f64>, DVector<f64>)> {
    let n = problem.n();
    let m = problem.a_eq.nrows();
    let free: Vec<usize> = (0..n)
        .filter(|&i| working[i] == ActiveBound::Free)
        .collect();
    let nf = free.len();

    let mut x_fixed = x.clone();
    for i in 0..n {
        match working[i] {
            ActiveBound::Lower => x_fixed[i] = problem.lb[i],
            ActiveBound::Upper => x_fixed[i] = problem.ub[i],
            ActiveBound::Free => x_fixed[i] = 0.0,
        }
    }

    if nf == 0 {
        // Everything pinned; multipliers from least squares on the
        // stationarity condition if equality rows exist.
        let lambda = if m > 0 {
            let g = h_reg * &x_fixed + &problem.f;
            let at = problem.a_eq.transpose();
            at.svd(true, true).solve(&(-g), 1e-12).ok()?
        } else {
            DVector::zeros(0)
        };
        return Some((x_fixed, lambda));
    }

    let mut kkt = DMatrix::zeros(nf + m, nf + m);
    let mut rhs = DVector::zeros(nf + m);
    for (a, &i) in free.iter().enumerate() {
        for (b, &j) in free.iter().enumerate() {
            kkt[(a, b)] = h_reg[(i, j)];
        }
        let mut r = -problem.f[i];
        for j in 0..n {
            if working[j] != ActiveBound::Free {
                r -= h_reg[(i, j)] * x_fixed[j];
            }
        }
        rhs[a] = r;
        for row in 0..m {
            kkt[(nf + row, a)] = problem.a_eq[(row, i)];
            kkt[(a, nf + row)] = problem.a_eq[(row, i)];
        }
    }
    for row in 0..m {
        let mut r = problem.b_eq[row];
        for j in 0..n {
            if working[j] != ActiveBound::Free {
                r -= problem.a_eq[(row, j)] * x_fixed[j];
            }
        }
        rhs[nf + row] = r;
    }

    let sol = kkt.lu().solve(&rhs)?;
    if sol.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let mut x_new = x_fixed;
    for (a, &i) in free.iter().enumerate() {
        x_new[i] = sol[a];
    }
    let lambda = DVector::from_fn(m, |r, _| sol[nf + r]);
    Some((x_new, lambda))
}

/// Bound multipliers plus the max-norm KKT residual over stationarity,
/// primal feasibility, and dual feasibility. Complementarity holds by
/// construction because multipliers are only assigned to active bounds.
fn kkt_report(
    h_reg: &DMatrix<f64>,
    problem: &QpProblem,
    working: &[ActiveBound],
    x: &DVector<f64>,
    lambda_eq: &DVector<f64>,
) -> (DVector<f64>, f64) {
    let n = problem.n();
    let g = h_reg * x + &problem.f + problem.a_eq.transpose() * lambda_eq;
    let mut mu = DVector::zeros(n);
    let mut stationarity = 0.0f64;
    let mut dual = 0.0f64;
    for i in 0..n {
        match working[i] {
            ActiveBound::Free => stationarity = stationarity.max(g[i].abs()),
            ActiveBound::Lower => {
                mu[i] = g[i];
                dual = dual.max(-mu[i]);
            }
            ActiveBound::Upper => {
                mu[i] = -g[i];
                dual = dual.max(-mu[i]);
            }
        }
    }
    let mut primal = 0.0f64;
    for i in 0..n {
        primal = primal.max(problem.lb[i] - x[i]).max(x[i] - problem.ub[i]);
    }
    if problem.a_eq.nrows() > 0 {
        primal = primal.max((&problem.a_eq * x - &problem.b_eq).amax());
    }
    (mu, stationarity.max(dual).max(primal.max(0.0)))
}
