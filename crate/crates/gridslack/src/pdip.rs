//! Primal-dual interior point solver for the slack-source optimization.
//!
//! The engine solves perturbed KKT systems by Newton steps with
//! fraction-to-boundary damping (the circuit-style diode limiting: primal
//! and dual variables tied to inequalities never cross into the infeasible
//! region) and a monotone barrier reduction. When a direct solve stalls, the
//! caller can fall back to a Tx-stepping outer loop that walks a shorted
//! network back to the original one.

use thiserror::Error;

use crate::linsys::{DirectSolver, SingularityReport, SparseSystem};
use crate::model::{Formulation, PhasorState};
use crate::powerflow::HomotopySchedule;
use crate::stamping::{
    objective_bundle, pq_current, slack_term, smallest_positive_root, EvalError, EPS_V,
};
use crate::tpia::{BuildError, SolveReport, TpiaProblem};

#[derive(Clone, Debug)]
pub struct PdipOptions {
    /// Convergence threshold on the unperturbed KKT residual, infinity norm.
    pub tol_kkt: f64,
    /// Initial barrier parameter.
    pub eps0: f64,
    /// Multiplicative barrier reduction factor.
    pub eps_reduction: f64,
    /// Fraction-to-boundary coefficient.
    pub tau: f64,
    pub max_iters: usize,
}

impl Default for PdipOptions {
    fn default() -> Self {
        PdipOptions {
            tol_kkt: 1e-6,
            eps0: 1e-2,
            eps_reduction: 0.2,
            tau: 0.995,
            max_iters: 300,
        }
    }
}

/// Nonlinear program in the shape the engine understands:
/// min f(z) s.t. e(z) = 0, c(z) >= 0.
pub trait NlpProblem {
    fn num_primal(&self) -> usize;
    fn num_eq(&self) -> usize;
    fn num_ineq(&self) -> usize;
    fn objective(&self, z: &[f64]) -> f64;
    fn objective_grad(&self, z: &[f64], grad: &mut [f64]);
    fn eq_residual(&self, z: &[f64], out: &mut [f64]) -> Result<(), EvalError>;
    fn ineq_residual(&self, z: &[f64], out: &mut [f64]);
    /// Triplets (eq row, primal col, value).
    fn eq_jacobian(&self, z: &[f64], out: &mut Vec<(usize, usize, f64)>) -> Result<(), EvalError>;
    /// Triplets (ineq row, primal col, value).
    fn ineq_jacobian(&self, z: &[f64], out: &mut Vec<(usize, usize, f64)>);
    /// Triplets of H = grad^2 f - sum lambda_r grad^2 e_r - sum mu_i grad^2 c_i.
    fn lagrangian_hessian(
        &self,
        z: &[f64],
        lambda: &[f64],
        mu: &[f64],
        out: &mut Vec<(usize, usize, f64)>,
    ) -> Result<(), EvalError>;
    /// Exact expansion c_i(z + t d) = c0 + b t + a t^2 along a direction.
    fn ineq_quadratic_along(&self, i: usize, z: &[f64], d: &[f64]) -> (f64, f64, f64);
    /// Hard cap on the step length (model-validity guards).
    fn step_cap(&self, z: &[f64], d: &[f64]) -> f64 {
        let _ = (z, d);
        f64::INFINITY
    }
}

/// Primal and dual state between Newton steps. `mu` stays strictly positive
/// and every inequality strictly satisfied at accepted iterates.
#[derive(Clone, Debug)]
pub struct KktIterate {
    pub primal: Vec<f64>,
    pub lambda: Vec<f64>,
    pub mu: Vec<f64>,
    pub eps: f64,
}

#[derive(Debug, Error)]
pub enum NlpError {
    #[error("interior-point iteration stalled at iteration {iterations} (step length underflow)")]
    Stall { iterations: usize },
    #[error("interior point did not converge in {iterations} iterations (KKT residual {residual:.3e})")]
    NonConvergence { iterations: usize, residual: f64 },
    #[error("KKT system factorization failed: {0}")]
    Singular(#[from] SingularityReport),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("iterate violates strict interiority at inequality {index}")]
    InteriorViolation { index: usize },
}

/// Builds the starting iterate: duals center the complementarity at eps0.
pub fn initial_iterate<P: NlpProblem>(
    problem: &P,
    primal: Vec<f64>,
    opts: &PdipOptions,
) -> Result<KktIterate, NlpError> {
    let ni = problem.num_ineq();
    let mut c = vec![0.0; ni];
    problem.ineq_residual(&primal, &mut c);
    let mut mu = vec![0.0; ni];
    for i in 0..ni {
        if c[i] <= 0.0 {
            return Err(NlpError::InteriorViolation { index: i });
        }
        mu[i] = (opts.eps0 / c[i]).clamp(1e-6, 1e3);
    }
    Ok(KktIterate {
        primal,
        lambda: vec![0.0; problem.num_eq()],
        mu,
        eps: if ni > 0 { opts.eps0 } else { 0.0 },
    })
}

/// Stacked perturbed KKT residual at `eps`:
/// [grad f - Je^T lambda - Jc^T mu | e | mu .* c - eps].
pub fn kkt_residual<P: NlpProblem>(
    problem: &P,
    it: &KktIterate,
    eps: f64,
) -> Result<Vec<f64>, NlpError> {
    let (nx, ne, ni) = (problem.num_primal(), problem.num_eq(), problem.num_ineq());
    let mut r = vec![0.0; nx + ne + ni];

    problem.objective_grad(&it.primal, &mut r[..nx]);

    let mut je = Vec::new();
    problem.eq_jacobian(&it.primal, &mut je)?;
    for &(row, col, v) in &je {
        r[col] -= v * it.lambda[row];
    }
    let mut jc = Vec::new();
    problem.ineq_jacobian(&it.primal, &mut jc);
    for &(row, col, v) in &jc {
        r[col] -= v * it.mu[row];
    }

    {
        let (_, rest) = r.split_at_mut(nx);
        problem.eq_residual(&it.primal, &mut rest[..ne])?;
    }

    if ni > 0 {
        let mut c = vec![0.0; ni];
        problem.ineq_residual(&it.primal, &mut c);
        for i in 0..ni {
            if c[i] <= 0.0 || it.mu[i] <= 0.0 {
                return Err(NlpError::InteriorViolation { index: i });
            }
            r[nx + ne + i] = it.mu[i] * c[i] - eps;
        }
    }
    Ok(r)
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

/// Assembles the Newton matrix of the perturbed KKT system in unsymmetric
/// form, ordered [dz | dlambda | dmu].
pub fn assemble_kkt_matrix<P: NlpProblem>(
    problem: &P,
    it: &KktIterate,
) -> Result<SparseSystem, NlpError> {
    let (nx, ne, ni) = (problem.num_primal(), problem.num_eq(), problem.num_ineq());
    let dim = nx + ne + ni;
    let mut sys = SparseSystem::new(dim);

    let mut h = Vec::new();
    problem.lagrangian_hessian(&it.primal, &it.lambda, &it.mu, &mut h)?;
    for &(r, c, v) in &h {
        sys.push(r, c, v);
    }

    let mut je = Vec::new();
    problem.eq_jacobian(&it.primal, &mut je)?;
    for &(row, col, v) in &je {
        sys.push(nx + row, col, v);
        sys.push(col, nx + row, -v);
    }

    if ni > 0 {
        let mut jc = Vec::new();
        problem.ineq_jacobian(&it.primal, &mut jc);
        for &(row, col, v) in &jc {
            sys.push(col, nx + ne + row, -v);
            sys.push(nx + ne + row, col, it.mu[row] * v);
        }
        let mut c = vec![0.0; ni];
        problem.ineq_residual(&it.primal, &mut c);
        for i in 0..ni {
            sys.push(nx + ne + i, nx + ne + i, c[i]);
        }
    }
    Ok(sys)
}

#[derive(Clone, Copy, Debug)]
pub struct StepReport {
    /// Common primal-dual step length after diode limiting.
    pub eta: f64,
    /// Perturbed KKT residual norm before the step.
    pub kkt_norm: f64,
    /// Barrier value after any reduction triggered by this step.
    pub eps_after: f64,
}

/// One Newton step with fraction-to-boundary damping and barrier update.
pub fn pdip_step<P: NlpProblem>(
    problem: &P,
    it: &mut KktIterate,
    opts: &PdipOptions,
    solver: &mut DirectSolver,
    iteration: usize,
) -> Result<StepReport, NlpError> {
    let (nx, ne, ni) = (problem.num_primal(), problem.num_eq(), problem.num_ineq());
    let r = kkt_residual(problem, it, it.eps)?;
    let kkt_norm = inf_norm(&r);

    let mut sys = assemble_kkt_matrix(problem, it)?;
    sys.set_rhs(r.iter().map(|v| -v).collect());
    let d = solver.factor_solve(&sys)?;
    let (dz, rest) = d.split_at(nx);
    let (dl, dm) = rest.split_at(ne);

    // Fraction-to-boundary: dual side.
    let mut eta: f64 = 1.0;
    for i in 0..ni {
        if dm[i] < 0.0 {
            eta = eta.min(opts.tau * it.mu[i] / (-dm[i]));
        }
    }
    // Primal side: exact quadratic crossing of c(z + t dz) = (1 - tau) c(z).
    for i in 0..ni {
        let (c0, b, a) = problem.ineq_quadratic_along(i, &it.primal, dz);
        if let Some(t) = smallest_positive_root(a, b, opts.tau * c0) {
            eta = eta.min(t);
        }
    }
    eta = eta.min(problem.step_cap(&it.primal, dz));

    if eta < 1e-12 {
        return Err(NlpError::Stall {
            iterations: iteration,
        });
    }

    for (zi, di) in it.primal.iter_mut().zip(dz) {
        *zi += eta * di;
    }
    for (li, di) in it.lambda.iter_mut().zip(dl) {
        *li += eta * di;
    }
    for (mi, di) in it.mu.iter_mut().zip(dm) {
        *mi += eta * di;
    }

    if ni > 0 {
        let r_new = kkt_residual(problem, it, it.eps)?;
        if inf_norm(&r_new) < 10.0 * it.eps {
            it.eps = (it.eps * opts.eps_reduction).max(1e-16);
        }
    }

    Ok(StepReport {
        eta,
        kkt_norm,
        eps_after: it.eps,
    })
}

/// One line of the optional iteration trace.
#[derive(Clone, Copy, Debug)]
pub struct TraceRow {
    pub iteration: usize,
    pub eps: f64,
    pub kkt_norm: f64,
    pub eta: f64,
}

#[derive(Clone, Debug)]
pub struct NlpSolution {
    pub iterate: KktIterate,
    pub iterations: usize,
    /// Unperturbed KKT residual at the solution.
    pub kkt_residual: f64,
}

/// Newton loop at shrinking barrier values until the unperturbed KKT
/// conditions hold.
pub fn solve_nlp<P: NlpProblem>(
    problem: &P,
    primal0: Vec<f64>,
    opts: &PdipOptions,
    trace: &mut dyn FnMut(TraceRow),
) -> Result<NlpSolution, NlpError> {
    let ni = problem.num_ineq();
    let mut it = initial_iterate(problem, primal0, opts)?;
    let mut solver = DirectSolver::new();
    let mut norm0 = f64::INFINITY;
    for iteration in 1..=opts.max_iters {
        norm0 = inf_norm(&kkt_residual(problem, &it, 0.0)?);
        if norm0 <= opts.tol_kkt && (ni == 0 || it.eps <= opts.tol_kkt / 10.0) {
            return Ok(NlpSolution {
                iterate: it,
                iterations: iteration,
                kkt_residual: norm0,
            });
        }
        let step = pdip_step(problem, &mut it, opts, &mut solver, iteration)?;
        trace(TraceRow {
            iteration,
            eps: step.eps_after,
            kkt_norm: step.kkt_norm,
            eta: step.eta,
        });
    }
    Err(NlpError::NonConvergence {
        iterations: opts.max_iters,
        residual: norm0,
    })
}

// ---------------------------------------------------------------------------
// The TPIA problem as an NLP
// ---------------------------------------------------------------------------

impl TpiaProblem {
    /// Global primal columns of the local (V_R, V_I, s1, s2) block at `node`;
    /// `usize::MAX` marks a variable this mode omits.
    fn local_cols(&self, node: usize) -> [usize; 4] {
        let k = self.slack_of_node[node];
        let mut cols = [
            self.layout.x_re(node),
            self.layout.x_im(node),
            usize::MAX,
            usize::MAX,
        ];
        if k != usize::MAX {
            if self.mode.reactive_only {
                cols[3] = self.layout.slack(k, 0);
            } else {
                cols[2] = self.layout.slack(k, 0);
                cols[3] = self.layout.slack(k, 1);
            }
        }
        cols
    }

    fn node_voltage(&self, z: &[f64], node: usize) -> (f64, f64) {
        (z[2 * node], z[2 * node + 1])
    }

    fn node_slack(&self, z: &[f64], node: usize) -> (f64, f64) {
        let k = self.slack_of_node[node];
        if k == usize::MAX {
            return (0.0, 0.0);
        }
        if self.mode.reactive_only {
            (0.0, z[self.layout.slack(k, 0)])
        } else {
            (z[self.layout.slack(k, 0)], z[self.layout.slack(k, 1)])
        }
    }

    fn n_bound_ineq(&self) -> usize {
        if self.bounds_sq.is_some() {
            2 * self.layout.n_nodes
        } else {
            0
        }
    }
}

impl NlpProblem for TpiaProblem {
    fn num_primal(&self) -> usize {
        self.layout.n_primal()
    }

    fn num_eq(&self) -> usize {
        self.layout.n_eq
    }

    fn num_ineq(&self) -> usize {
        self.layout.n_ineq
    }

    fn objective(&self, z: &[f64]) -> f64 {
        let mut total = 0.0;
        for &node in &self.enabled {
            let (vr, vi) = self.node_voltage(z, node);
            let (s1, s2) = self.node_slack(z, node);
            total += self.alpha * objective_bundle(self.mode.formulation, vr, vi, s1, s2).g;
        }
        total
    }

    fn objective_grad(&self, z: &[f64], grad: &mut [f64]) {
        grad.iter_mut().for_each(|g| *g = 0.0);
        for &node in &self.enabled {
            let (vr, vi) = self.node_voltage(z, node);
            let (s1, s2) = self.node_slack(z, node);
            let bundle = objective_bundle(self.mode.formulation, vr, vi, s1, s2);
            let cols = self.local_cols(node);
            for (local, &col) in cols.iter().enumerate() {
                if col != usize::MAX {
                    grad[col] += self.alpha * bundle.grad[local];
                }
            }
        }
    }

    fn eq_residual(&self, z: &[f64], out: &mut [f64]) -> Result<(), EvalError> {
        let (x, _) = self.split_primal(z);
        let base = self.stamped.residual(&x)?;
        out.copy_from_slice(&base);
        for &node in &self.enabled {
            let (vr, vi) = self.node_voltage(z, node);
            if self.mode.formulation == Formulation::Power {
                let u = vr * vr + vi * vi;
                if u < EPS_V * EPS_V {
                    return Err(EvalError::VoltageCollapse {
                        node,
                        magnitude: u.sqrt(),
                    });
                }
            }
            let (s1, s2) = self.node_slack(z, node);
            let t = slack_term(self.mode.formulation, vr, vi, s1, s2);
            out[2 * node] -= t.hr;
            out[2 * node + 1] -= t.hi;
        }
        Ok(())
    }

    fn eq_jacobian(&self, z: &[f64], out: &mut Vec<(usize, usize, f64)>) -> Result<(), EvalError> {
        let n = self.layout.n_nodes;
        for node in 0..n {
            if self.stamped.is_swing_node(node) {
                out.push((2 * node, self.layout.x_re(node), 1.0));
                out.push((2 * node + 1, self.layout.x_im(node), 1.0));
                continue;
            }
            for (m, y) in self.stamped.y.row(node) {
                out.push((2 * node, self.layout.x_re(m), y.re));
                out.push((2 * node, self.layout.x_im(m), -y.im));
                out.push((2 * node + 1, self.layout.x_re(m), y.im));
                out.push((2 * node + 1, self.layout.x_im(m), y.re));
            }
            let (vr, vi) = self.node_voltage(z, node);
            let (p, q) = self.stamped.load[node];
            if p != 0.0 || q != 0.0 {
                let u = vr * vr + vi * vi;
                if u < EPS_V * EPS_V {
                    return Err(EvalError::VoltageCollapse {
                        node,
                        magnitude: u.sqrt(),
                    });
                }
                let b = pq_current(vr, vi, p, q);
                out.push((2 * node, self.layout.x_re(node), b.d_ir[0]));
                out.push((2 * node, self.layout.x_im(node), b.d_ir[1]));
                out.push((2 * node + 1, self.layout.x_re(node), b.d_ii[0]));
                out.push((2 * node + 1, self.layout.x_im(node), b.d_ii[1]));
            }
            if self.slack_of_node[node] != usize::MAX {
                let (s1, s2) = self.node_slack(z, node);
                let t = slack_term(self.mode.formulation, vr, vi, s1, s2);
                let cols = self.local_cols(node);
                for (local, &col) in cols.iter().enumerate() {
                    if col != usize::MAX {
                        out.push((2 * node, col, -t.d_hr[local]));
                        out.push((2 * node + 1, col, -t.d_hi[local]));
                    }
                }
            }
        }
        Ok(())
    }

    fn ineq_residual(&self, z: &[f64], out: &mut [f64]) {
        let mut row = 0;
        if let Some(bounds) = &self.bounds_sq {
            for node in 0..self.layout.n_nodes {
                let (vr, vi) = self.node_voltage(z, node);
                let u = vr * vr + vi * vi;
                out[row] = u - bounds[node].0;
                out[row + 1] = bounds[node].1 - u;
                row += 2;
            }
        }
        for r in &self.ratings {
            let s = z[self.layout.n_x() + r.s_index];
            out[row] = if r.is_upper { r.limit - s } else { s - r.limit };
            row += 1;
        }
    }

    fn ineq_jacobian(&self, z: &[f64], out: &mut Vec<(usize, usize, f64)>) {
        let mut row = 0;
        if self.bounds_sq.is_some() {
            for node in 0..self.layout.n_nodes {
                let (vr, vi) = self.node_voltage(z, node);
                out.push((row, self.layout.x_re(node), 2.0 * vr));
                out.push((row, self.layout.x_im(node), 2.0 * vi));
                out.push((row + 1, self.layout.x_re(node), -2.0 * vr));
                out.push((row + 1, self.layout.x_im(node), -2.0 * vi));
                row += 2;
            }
        }
        for r in &self.ratings {
            let col = self.layout.n_x() + r.s_index;
            out.push((row, col, if r.is_upper { -1.0 } else { 1.0 }));
            row += 1;
        }
    }

    fn lagrangian_hessian(
        &self,
        z: &[f64],
        lambda: &[f64],
        mu: &[f64],
        out: &mut Vec<(usize, usize, f64)>,
    ) -> Result<(), EvalError> {
        for node in 0..self.layout.n_nodes {
            let cols = self.local_cols(node);
            let mut acc = [[0.0f64; 4]; 4];
            let (vr, vi) = self.node_voltage(z, node);

            if !self.stamped.is_swing_node(node) {
                let (lr, li) = (lambda[2 * node], lambda[2 * node + 1]);
                let (p, q) = self.stamped.load[node];
                if p != 0.0 || q != 0.0 {
                    let u = vr * vr + vi * vi;
                    if u < EPS_V * EPS_V {
                        return Err(EvalError::VoltageCollapse {
                            node,
                            magnitude: u.sqrt(),
                        });
                    }
                    let b = pq_current(vr, vi, p, q);
                    for i in 0..2 {
                        for j in 0..2 {
                            acc[i][j] -= lr * b.h_ir[i][j] + li * b.h_ii[i][j];
                        }
                    }
                }
                if self.slack_of_node[node] != usize::MAX {
                    let (s1, s2) = self.node_slack(z, node);
                    let ob = objective_bundle(self.mode.formulation, vr, vi, s1, s2);
                    let st = slack_term(self.mode.formulation, vr, vi, s1, s2);
                    for i in 0..4 {
                        for j in 0..4 {
                            acc[i][j] += self.alpha * ob.hess[i][j];
                            acc[i][j] += lr * st.h_hr[i][j] + li * st.h_hi[i][j];
                        }
                    }
                }
            }

            if self.bounds_sq.is_some() {
                let mu_low = mu[2 * node];
                let mu_high = mu[2 * node + 1];
                let curv = -2.0 * mu_low + 2.0 * mu_high;
                acc[0][0] += curv;
                acc[1][1] += curv;
            }

            for i in 0..4 {
                for j in 0..4 {
                    if acc[i][j] != 0.0 && cols[i] != usize::MAX && cols[j] != usize::MAX {
                        out.push((cols[i], cols[j], acc[i][j]));
                    }
                }
            }
        }
        Ok(())
    }

    fn ineq_quadratic_along(&self, i: usize, z: &[f64], d: &[f64]) -> (f64, f64, f64) {
        let nb = self.n_bound_ineq();
        if i < nb {
            let node = i / 2;
            let bounds = self.bounds_sq.as_ref().unwrap();
            let (vr, vi) = self.node_voltage(z, node);
            let (dr, di) = (d[2 * node], d[2 * node + 1]);
            let u = vr * vr + vi * vi;
            let vd = vr * dr + vi * di;
            let dd = dr * dr + di * di;
            if i % 2 == 0 {
                (u - bounds[node].0, 2.0 * vd, dd)
            } else {
                (bounds[node].1 - u, -2.0 * vd, -dd)
            }
        } else {
            let r = &self.ratings[i - nb];
            let s = z[self.layout.n_x() + r.s_index];
            let ds = d[self.layout.n_x() + r.s_index];
            if r.is_upper {
                (r.limit - s, -ds, 0.0)
            } else {
                (s - r.limit, ds, 0.0)
            }
        }
    }

    /// Keep every voltage above the collapse floor regardless of bounds.
    fn step_cap(&self, z: &[f64], d: &[f64]) -> f64 {
        let floor_sq = (2.0 * EPS_V) * (2.0 * EPS_V);
        let mut cap = f64::INFINITY;
        for node in 0..self.layout.n_nodes {
            let (vr, vi) = self.node_voltage(z, node);
            let (dr, di) = (d[2 * node], d[2 * node + 1]);
            let c = vr * vr + vi * vi - floor_sq;
            if c <= 0.0 {
                continue;
            }
            let a = dr * dr + di * di;
            let b = 2.0 * (vr * dr + vi * di);
            if let Some(t) = smallest_positive_root(a, b, c) {
                cap = cap.min(0.95 * t);
            }
        }
        cap
    }
}

// ---------------------------------------------------------------------------
// TPIA driver with the homotopy fallback
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HomotopyMode {
    Off,
    /// Engage Tx-stepping only after a direct solve fails, and record it.
    Auto,
    On,
}

#[derive(Debug, Error)]
pub enum SolveFailure {
    #[error(transparent)]
    Nlp(#[from] NlpError),
    #[error("Tx-stepping failed at relaxation factor {gamma}: {source}")]
    Homotopy { gamma: f64, source: NlpError },
    #[error(transparent)]
    Rebuild(#[from] BuildError),
}

/// Full TPIA solve: direct interior-point run, with a Tx-stepping outer loop
/// per the homotopy mode. The report records whether homotopy engaged.
pub fn solve(
    problem: &TpiaProblem,
    opts: &PdipOptions,
    homotopy: HomotopyMode,
    trace: &mut dyn FnMut(TraceRow),
) -> Result<SolveReport, SolveFailure> {
    match homotopy {
        HomotopyMode::Off => {
            let sol = solve_nlp(problem, problem.initial_primal(None), opts, trace)?;
            Ok(problem.interpret(&sol.iterate.primal, sol.iterations, false, sol.kkt_residual))
        }
        HomotopyMode::Auto => {
            match solve_nlp(problem, problem.initial_primal(None), opts, trace) {
                Ok(sol) => Ok(problem.interpret(
                    &sol.iterate.primal,
                    sol.iterations,
                    false,
                    sol.kkt_residual,
                )),
                Err(NlpError::Eval(e)) => Err(NlpError::Eval(e).into()),
                Err(_) => tx_stepping(problem, opts, trace),
            }
        }
        HomotopyMode::On => tx_stepping(problem, opts, trace),
    }
}

fn tx_stepping(
    problem: &TpiaProblem,
    opts: &PdipOptions,
    trace: &mut dyn FnMut(TraceRow),
) -> Result<SolveReport, SolveFailure> {
    let schedule = HomotopySchedule::default();
    let g_short = 1e3 * problem.stamped.max_series_admittance.max(1.0);
    let mut warm: Option<PhasorState> = None;
    let mut total_iterations = 0;
    let mut last: Option<NlpSolution> = None;
    for &gamma in &schedule.factors {
        let relaxed;
        let prob = if gamma == 0.0 {
            problem
        } else {
            relaxed = problem.relaxed(gamma * g_short)?;
            &relaxed
        };
        let z0 = prob.initial_primal(warm.as_ref());
        let sol = solve_nlp(prob, z0, opts, trace)
            .map_err(|source| SolveFailure::Homotopy { gamma, source })?;
        warm = Some(prob.split_primal(&sol.iterate.primal).0);
        total_iterations += sol.iterations;
        last = Some(sol);
    }
    let sol = last.expect("schedule is never empty");
    Ok(problem.interpret(&sol.iterate.primal, total_iterations, true, sol.kkt_residual))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{
        Branch, Bus, BusKind, FormulationMode, Load, Network, Phase, PhaseMatrix, PhaseSet,
    };
    use crate::tpia::{build_problem, TpiaOptions};
    use num_complex::Complex64;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    /// min (z0-2)^2 + (z1+1)^2  s.t.  z0 + z1 = 2,  z1 >= 0.
    /// Optimum z = (2, 0), lambda = 0, mu = 2 by hand from the KKT system.
    struct ToyQp;

    impl NlpProblem for ToyQp {
        fn num_primal(&self) -> usize {
            2
        }
        fn num_eq(&self) -> usize {
            1
        }
        fn num_ineq(&self) -> usize {
            1
        }
        fn objective(&self, z: &[f64]) -> f64 {
            (z[0] - 2.0).powi(2) + (z[1] + 1.0).powi(2)
        }
        fn objective_grad(&self, z: &[f64], grad: &mut [f64]) {
            grad[0] = 2.0 * (z[0] - 2.0);
            grad[1] = 2.0 * (z[1] + 1.0);
        }
        fn eq_residual(&self, z: &[f64], out: &mut [f64]) -> Result<(), EvalError> {
            out[0] = z[0] + z[1] - 2.0;
            Ok(())
        }
        fn ineq_residual(&self, z: &[f64], out: &mut [f64]) {
            out[0] = z[1];
        }
        fn eq_jacobian(
            &self,
            _z: &[f64],
            out: &mut Vec<(usize, usize, f64)>,
        ) -> Result<(), EvalError> {
            out.push((0, 0, 1.0));
            out.push((0, 1, 1.0));
            Ok(())
        }
        fn ineq_jacobian(&self, _z: &[f64], out: &mut Vec<(usize, usize, f64)>) {
            out.push((0, 1, 1.0));
        }
        fn lagrangian_hessian(
            &self,
            _z: &[f64],
            _lambda: &[f64],
            _mu: &[f64],
            out: &mut Vec<(usize, usize, f64)>,
        ) -> Result<(), EvalError> {
            out.push((0, 0, 2.0));
            out.push((1, 1, 2.0));
            Ok(())
        }
        fn ineq_quadratic_along(&self, _i: usize, z: &[f64], d: &[f64]) -> (f64, f64, f64) {
            (z[1], d[1], 0.0)
        }
    }

    #[test]
    fn toy_qp_reaches_analytic_optimum() {
        let opts = PdipOptions {
            tol_kkt: 1e-9,
            ..PdipOptions::default()
        };
        let sol = solve_nlp(&ToyQp, vec![1.0, 1.0], &opts, &mut |_| {}).unwrap();
        assert!(sol.iterations <= 30, "took {} iterations", sol.iterations);
        assert!((sol.iterate.primal[0] - 2.0).abs() <= 1e-8);
        assert!(sol.iterate.primal[1].abs() <= 1e-8);
        assert!((sol.iterate.mu[0] - 2.0).abs() <= 1e-5);
        assert!(sol.kkt_residual <= opts.tol_kkt);
        // Barrier reached its floor relative to the tolerance.
        assert!(sol.iterate.eps <= opts.tol_kkt / 10.0);
    }

    /// min (z0-1)^2 + (z1-1)^2 s.t. z0 + z1 = 2, z1 >= -10: the optimum
    /// (1, 1) is interior, so nothing caps the Newton step.
    struct InteriorQp;

    impl NlpProblem for InteriorQp {
        fn num_primal(&self) -> usize {
            2
        }
        fn num_eq(&self) -> usize {
            1
        }
        fn num_ineq(&self) -> usize {
            1
        }
        fn objective(&self, z: &[f64]) -> f64 {
            (z[0] - 1.0).powi(2) + (z[1] - 1.0).powi(2)
        }
        fn objective_grad(&self, z: &[f64], grad: &mut [f64]) {
            grad[0] = 2.0 * (z[0] - 1.0);
            grad[1] = 2.0 * (z[1] - 1.0);
        }
        fn eq_residual(&self, z: &[f64], out: &mut [f64]) -> Result<(), EvalError> {
            out[0] = z[0] + z[1] - 2.0;
            Ok(())
        }
        fn ineq_residual(&self, z: &[f64], out: &mut [f64]) {
            out[0] = z[1] + 10.0;
        }
        fn eq_jacobian(
            &self,
            _z: &[f64],
            out: &mut Vec<(usize, usize, f64)>,
        ) -> Result<(), EvalError> {
            out.push((0, 0, 1.0));
            out.push((0, 1, 1.0));
            Ok(())
        }
        fn ineq_jacobian(&self, _z: &[f64], out: &mut Vec<(usize, usize, f64)>) {
            out.push((0, 1, 1.0));
        }
        fn lagrangian_hessian(
            &self,
            _z: &[f64],
            _lambda: &[f64],
            _mu: &[f64],
            out: &mut Vec<(usize, usize, f64)>,
        ) -> Result<(), EvalError> {
            out.push((0, 0, 2.0));
            out.push((1, 1, 2.0));
            Ok(())
        }
        fn ineq_quadratic_along(&self, _i: usize, z: &[f64], d: &[f64]) -> (f64, f64, f64) {
            (z[1] + 10.0, d[1], 0.0)
        }
    }

    #[test]
    fn inactive_constraints_allow_full_newton_steps() {
        let opts = PdipOptions::default();
        let mut it = initial_iterate(&InteriorQp, vec![0.5, 1.5], &opts).unwrap();
        let mut solver = DirectSolver::new();
        let step = pdip_step(&InteriorQp, &mut it, &opts, &mut solver, 1).unwrap();
        assert!((step.eta - 1.0).abs() < 1e-12, "eta = {}", step.eta);
    }

    #[test]
    fn limiting_keeps_duals_strictly_positive() {
        let opts = PdipOptions::default();
        let mut it = initial_iterate(&ToyQp, vec![1.0, 0.5], &opts).unwrap();
        let mut solver = DirectSolver::new();
        for k in 1..=40 {
            let before_mu = it.mu[0];
            assert!(before_mu > 0.0);
            let mut c = vec![0.0];
            ToyQp.ineq_residual(&it.primal, &mut c);
            assert!(c[0] > 0.0, "iterate left the strict interior");
            if pdip_step(&ToyQp, &mut it, &opts, &mut solver, k).is_err() {
                break;
            }
            // The diode rule caps the dual decrease at a (1 - tau) fraction.
            assert!(it.mu[0] >= (1.0 - opts.tau) * before_mu - 1e-15);
        }
    }

    #[test]
    fn interior_violation_detected() {
        let opts = PdipOptions::default();
        assert!(matches!(
            initial_iterate(&ToyQp, vec![1.0, -0.5], &opts),
            Err(NlpError::InteriorViolation { .. })
        ));
    }

    fn two_bus(p: f64) -> Network {
        let mut net = Network::empty_per_unit();
        for (id, kind) in [("src", BusKind::Swing), ("load", BusKind::Pq)] {
            net.buses.push(Bus {
                id: id.into(),
                phases: PhaseSet::single(Phase::A),
                nominal_voltage: 1.0,
                kind,
            });
        }
        let mut series = PhaseMatrix::zero(PhaseSet::single(Phase::A));
        series.set(Phase::A, Phase::A, Complex64::new(0.0, -10.0));
        net.branches.push(Branch {
            from: "src".into(),
            to: "load".into(),
            phases: PhaseSet::single(Phase::A),
            series,
            shunt_from: None,
            shunt_to: None,
        });
        net.loads.push(Load {
            bus: "load".into(),
            phase: Phase::A,
            p,
            q: 0.0,
        });
        net
    }

    fn rand_interior_iterate(p: &TpiaProblem, rng: &mut StdRng, eps: f64) -> KktIterate {
        let mut z = p.initial_primal(None);
        let n = p.layout.n_nodes;
        for node in 0..n {
            let mag = rng.gen_range(0.95..1.05);
            let ang: f64 = rng.gen_range(-0.2..0.2);
            z[2 * node] = mag * ang.cos();
            z[2 * node + 1] = mag * ang.sin();
        }
        for j in 0..p.layout.n_slack {
            z[p.layout.n_x() + j] = rng.gen_range(-0.5..0.5);
        }
        let lambda: Vec<f64> = (0..p.layout.n_eq).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mu: Vec<f64> = (0..p.layout.n_ineq).map(|_| rng.gen_range(0.01..1.0)).collect();
        KktIterate {
            primal: z,
            lambda,
            mu,
            eps,
        }
    }

    /// The acceptance-level derivative check in miniature: the assembled KKT
    /// Jacobian matches central finite differences of the residual.
    #[test]
    fn kkt_jacobian_matches_finite_differences() {
        let mut rng = StdRng::seed_from_u64(23);
        for mode in ["i", "pq", "q", "gb", "b"] {
            let net = two_bus(0.5);
            let prob = build_problem(&net, &TpiaOptions::new(FormulationMode::parse(mode).unwrap()))
                .unwrap();
            for _ in 0..5 {
                let it = rand_interior_iterate(&prob, &mut rng, 1e-2);
                let sys = assemble_kkt_matrix(&prob, &it).unwrap();
                let dense = sys.to_dense();
                let dim = prob.layout.total();
                // Perturb the stacked vector [z | lambda | mu].
                let nx = prob.layout.n_primal();
                let ne = prob.layout.n_eq;
                let eval = |it: &KktIterate| kkt_residual(&prob, it, it.eps).unwrap();
                for col in 0..dim {
                    let h = 1e-6;
                    let mut hi = it.clone();
                    let mut lo = it.clone();
                    if col < nx {
                        hi.primal[col] += h;
                        lo.primal[col] -= h;
                    } else if col < nx + ne {
                        hi.lambda[col - nx] += h;
                        lo.lambda[col - nx] -= h;
                    } else {
                        hi.mu[col - nx - ne] += h;
                        lo.mu[col - nx - ne] -= h;
                    }
                    let rh = eval(&hi);
                    let rl = eval(&lo);
                    for row in 0..dim {
                        let fd = (rh[row] - rl[row]) / (2.0 * h);
                        let an = dense[row][col];
                        let tol = 1e-5 * fd.abs().max(an.abs()).max(1.0);
                        assert!(
                            (fd - an).abs() <= tol,
                            "mode {} entry ({},{}): analytic {} fd {}",
                            mode,
                            row,
                            col,
                            an,
                            fd
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn kkt_residual_shape_at_feasible_point() {
        // At a power-flow solution with s = 0, lambda = 0, mu_i = eps / c_i,
        // the complementarity block vanishes identically.
        let net = two_bus(1.0);
        let prob =
            build_problem(&net, &TpiaOptions::new(FormulationMode::parse("pq").unwrap())).unwrap();
        let pf = crate::powerflow::solve_powerflow(&net, &Default::default()).unwrap();
        let mut z = prob.initial_primal(Some(&pf.state));
        // Keep the exact solution voltages (they are interior already).
        for node in 0..prob.layout.n_nodes {
            z[2 * node] = pf.state.re[node];
            z[2 * node + 1] = pf.state.im[node];
        }
        let eps = 1e-3;
        let mut c = vec![0.0; prob.layout.n_ineq];
        prob.ineq_residual(&z, &mut c);
        let mu: Vec<f64> = c.iter().map(|ci| eps / ci).collect();
        let it = KktIterate {
            primal: z,
            lambda: vec![0.0; prob.layout.n_eq],
            mu,
            eps,
        };
        let r = kkt_residual(&prob, &it, eps).unwrap();
        let nx = prob.layout.n_primal();
        let ne = prob.layout.n_eq;
        // Equality block is the power-flow residual: tiny.
        for i in 0..ne {
            assert!(r[nx + i].abs() < 1e-7);
        }
        // Complementarity exactly zero by construction.
        for i in 0..prob.layout.n_ineq {
            assert!(r[nx + ne + i].abs() < 1e-15);
        }
        // At eps -> 0 with the same construction the whole system reduces to
        // the objective-gradient stationarity, which vanishes at s = 0 for
        // x-independent... the power form has no V-dependence:
        let r0 = kkt_residual(&prob, &it, 0.0).unwrap();
        for i in 0..nx {
            // J_c^T mu remains; it scales with eps / c.
            assert!(r0[i].abs() < 0.1, "stationarity entry {} = {}", i, r0[i]);
        }
    }

    #[test]
    fn feasible_network_solves_to_zero_slack() {
        let net = two_bus(1.0);
        for mode in ["i", "pq", "q", "gb", "b"] {
            let prob = build_problem(&net, &TpiaOptions::new(FormulationMode::parse(mode).unwrap()))
                .unwrap();
            let report = solve(&prob, &PdipOptions::default(), HomotopyMode::Auto, &mut |_| {})
                .unwrap();
            assert_eq!(report.status, crate::tpia::TpiaStatus::FeasibleNetwork);
            assert!(report.total_abs_p + report.total_abs_q <= 1e-6);
            assert!(report.iterations >= 1);
            // Voltages agree with the plain power flow.
            let pf = crate::powerflow::solve_powerflow(&net, &Default::default()).unwrap();
            for (row, node) in report.voltages.iter().zip(0..) {
                assert!((row.vmag - pf.state.magnitude(node)).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn overload_produces_localized_slack() {
        let net = two_bus(6.0);
        let prob =
            build_problem(&net, &TpiaOptions::new(FormulationMode::parse("pq").unwrap())).unwrap();
        let report = solve(&prob, &PdipOptions::default(), HomotopyMode::Auto, &mut |_| {})
            .unwrap();
        assert_eq!(report.status, crate::tpia::TpiaStatus::InfeasibleNetwork);
        let rows = crate::tpia::localize(&report, 1e-4);
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].bus, "load");
        // All voltages respect the bounds.
        assert!(report.v_min >= 0.9 - 1e-8);
        assert!(report.v_max <= 1.1 + 1e-8);
    }

    #[test]
    fn reactive_only_mode_has_zero_real_injections() {
        let net = two_bus(6.0);
        let prob =
            build_problem(&net, &TpiaOptions::new(FormulationMode::parse("q").unwrap())).unwrap();
        let report = solve(&prob, &PdipOptions::default(), HomotopyMode::Auto, &mut |_| {})
            .unwrap();
        for row in &report.injections {
            assert_eq!(row.s1, 0.0);
            assert_eq!(row.p_inj, 0.0);
            assert!(row.q_inj > 0.0);
        }
    }

    #[test]
    fn binding_rating_cap_shifts_the_optimum() {
        use crate::model::{RatingLimit, SlackComponent, SlackRatingLimits};
        // Capping Q_s at 0.5 (below the unconstrained optimum 0.868) forces
        // the cap active; the boundary geometry then fixes P_s:
        // at |V2|^2 = 0.81, (6 - P_s)^2 + (8.1 - Q_s)^2 = 81, so with
        // Q_s = 0.5, P_s = 6 - sqrt(81 - 7.6^2) = 1.179206...
        let net = two_bus(6.0);
        let opts = TpiaOptions {
            ratings: SlackRatingLimits {
                entries: vec![RatingLimit {
                    bus: "load".into(),
                    phase: Phase::A,
                    component: SlackComponent::Second,
                    lower: None,
                    upper: Some(0.5),
                }],
            },
            ..TpiaOptions::new(FormulationMode::parse("pq").unwrap())
        };
        let prob = build_problem(&net, &opts).unwrap();
        assert_eq!(prob.layout.n_ineq, 4 + 1);
        let report = solve(&prob, &PdipOptions::default(), HomotopyMode::Auto, &mut |_| {})
            .unwrap();
        let inj = &report.injections[0];
        let expect_p = 6.0 - (81.0f64 - 7.6 * 7.6).sqrt();
        assert!(
            (inj.s2 - 0.5).abs() < 1e-5,
            "cap should bind: Q_s = {}",
            inj.s2
        );
        assert!(
            (inj.s1 - expect_p).abs() < 1e-5,
            "P_s = {} vs boundary value {}",
            inj.s1,
            expect_p
        );

        // A cap far above the optimum leaves the solution untouched.
        let loose = TpiaOptions {
            ratings: SlackRatingLimits {
                entries: vec![RatingLimit {
                    bus: "load".into(),
                    phase: Phase::A,
                    component: SlackComponent::Second,
                    lower: None,
                    upper: Some(10.0),
                }],
            },
            ..TpiaOptions::new(FormulationMode::parse("pq").unwrap())
        };
        let free = build_problem(&net, &TpiaOptions::new(FormulationMode::parse("pq").unwrap()))
            .unwrap();
        let r_free = solve(&free, &PdipOptions::default(), HomotopyMode::Auto, &mut |_| {})
            .unwrap();
        let r_loose = solve(
            &build_problem(&net, &loose).unwrap(),
            &PdipOptions::default(),
            HomotopyMode::Auto,
            &mut |_| {},
        )
        .unwrap();
        assert!((r_loose.injections[0].s1 - r_free.injections[0].s1).abs() < 1e-6);
        assert!((r_loose.injections[0].s2 - r_free.injections[0].s2).abs() < 1e-6);
    }

    #[test]
    fn deterministic_iterate_sequence() {
        let net = two_bus(6.0);
        let prob =
            build_problem(&net, &TpiaOptions::new(FormulationMode::parse("gb").unwrap())).unwrap();
        let mut traces: Vec<Vec<(usize, f64, f64)>> = Vec::new();
        for _ in 0..2 {
            let mut t = Vec::new();
            let _ = solve(&prob, &PdipOptions::default(), HomotopyMode::Auto, &mut |row| {
                t.push((row.iteration, row.kkt_norm, row.eta));
            })
            .unwrap();
            traces.push(t);
        }
        assert_eq!(traces[0], traces[1]);
    }
}
