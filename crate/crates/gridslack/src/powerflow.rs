//! Three-phase power flow: damped Newton-Raphson on the nodal current
//! equations, with an optional homotopy that first solves a heavily
//! shorted network and walks the shorts back out.

use num_complex::Complex64;
use thiserror::Error;

use crate::linsys::{DirectSolver, SingularityReport, SparseSystem};
use crate::model::{Network, PhasorState, ValidationReport};
use crate::stamping::{smallest_positive_root, EvalError, StampedNetwork, EPS_V};

#[derive(Clone, Debug)]
pub struct NewtonOptions {
    /// Convergence threshold on the infinity norm of the KCL residual.
    pub tol_residual: f64,
    pub max_iters: usize,
    /// Fixed multiplier on every Newton step, in (0, 1].
    pub step_damping: f64,
    pub flat_start: bool,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        NewtonOptions {
            tol_residual: 1e-8,
            max_iters: 100,
            step_damping: 1.0,
            flat_start: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct PfSolution {
    pub state: PhasorState,
    /// Residual evaluations performed; 1 means the start point already
    /// satisfied the equations.
    pub iterations: usize,
    pub final_residual: f64,
    /// Infinity norm of the residual before each Newton step.
    pub residual_history: Vec<f64>,
}

#[derive(Debug, Error)]
pub enum PfError {
    /// The Newton iteration did not reach the tolerance. For stressed
    /// networks this is the expected signal that an infeasibility analysis
    /// is needed, not a defect.
    #[error("power flow did not converge after {iterations} iterations (residual {residual:.3e})")]
    NonConvergence { iterations: usize, residual: f64 },
    #[error("power flow Jacobian is singular: {0}")]
    Singular(#[from] SingularityReport),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Invalid(#[from] ValidationReport),
    #[error("invalid homotopy schedule: {0}")]
    InvalidSchedule(String),
}

/// Newton solve on an already-stamped network from an explicit start point.
pub fn solve_stamped(
    stamped: &StampedNetwork,
    mut x: PhasorState,
    opts: &NewtonOptions,
) -> Result<PfSolution, PfError> {
    let n = stamped.node_count();
    let mut solver = DirectSolver::new();
    let mut history = Vec::new();

    for iter in 1..=opts.max_iters {
        let f = stamped.residual(&x)?;
        let norm = f.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        history.push(norm);
        if norm <= opts.tol_residual {
            return Ok(PfSolution {
                state: x,
                iterations: iter,
                final_residual: norm,
                residual_history: history,
            });
        }

        let mut sys = SparseSystem::new(2 * n);
        stamped.pf_jacobian(&x, &mut sys)?;
        sys.set_rhs(f.iter().map(|v| -v).collect());
        let dx = solver.factor_solve(&sys)?;

        // Keep every voltage above the collapse guard; the step length is
        // limited by the first node whose |V|^2 would cross the floor.
        let floor_sq = (2.0 * EPS_V) * (2.0 * EPS_V);
        let mut eta: f64 = opts.step_damping;
        for k in 0..n {
            let (vr, vi) = (x.re[k], x.im[k]);
            let (dr, di) = (dx[2 * k], dx[2 * k + 1]);
            let a = dr * dr + di * di;
            let b = 2.0 * (vr * dr + vi * di);
            let c = vr * vr + vi * vi - floor_sq;
            if c <= 0.0 {
                continue;
            }
            if let Some(root) = smallest_positive_root(a, b, c) {
                eta = eta.min(0.95 * root);
            }
        }
        if eta < 1e-9 {
            return Err(PfError::NonConvergence {
                iterations: iter,
                residual: norm,
            });
        }
        for k in 0..n {
            x.re[k] += eta * dx[2 * k];
            x.im[k] += eta * dx[2 * k + 1];
        }
    }

    let final_residual = stamped
        .residual(&x)
        .map(|f| f.iter().fold(0.0f64, |m, v| m.max(v.abs())))
        .unwrap_or(f64::INFINITY);
    Err(PfError::NonConvergence {
        iterations: opts.max_iters,
        residual: final_residual,
    })
}

/// Solves f(x) = 0 for a validated network.
pub fn solve_powerflow(net: &Network, opts: &NewtonOptions) -> Result<PfSolution, PfError> {
    let stamped = StampedNetwork::new(net)?;
    let x0 = stamped.flat_start();
    solve_stamped(&stamped, x0, opts)
}

/// Relaxation factor sequence for Tx-stepping. Strictly decreasing and
/// ending exactly at zero, where the original network is solved.
#[derive(Clone, Debug)]
pub struct HomotopySchedule {
    pub factors: Vec<f64>,
    /// Shorting conductance; `None` scales 1e3 off the largest series
    /// admittance in the network.
    pub g_short: Option<f64>,
}

impl HomotopySchedule {
    /// Geometric decay from 1.0 by `decay` until `floor`, then 0.
    pub fn geometric(decay: f64, floor: f64, max_steps: usize) -> HomotopySchedule {
        let mut factors = Vec::new();
        let mut g = 1.0;
        while g >= floor && factors.len() + 1 < max_steps {
            factors.push(g);
            g *= decay;
        }
        factors.push(0.0);
        HomotopySchedule {
            factors,
            g_short: None,
        }
    }

    /// No relaxation at all; behaves exactly like a direct solve.
    pub fn direct() -> HomotopySchedule {
        HomotopySchedule {
            factors: vec![0.0],
            g_short: None,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.factors.is_empty() {
            return Err("homotopy schedule is empty".into());
        }
        if *self.factors.last().unwrap() != 0.0 {
            return Err("homotopy schedule must end at exactly 0".into());
        }
        for w in self.factors.windows(2) {
            if w[1] >= w[0] {
                return Err("homotopy factors must be strictly decreasing".into());
            }
        }
        Ok(())
    }
}

impl Default for HomotopySchedule {
    fn default() -> Self {
        HomotopySchedule::geometric(0.3, 1e-6, 20)
    }
}

#[derive(Debug, Error)]
#[error("homotopy failed at relaxation factor {gamma}: {source}")]
pub struct HomotopyError {
    pub gamma: f64,
    #[source]
    pub source: PfError,
}

/// Tx-stepping: solve the network with every branch and transformer
/// paralleled by `gamma * g_short`, stepping `gamma` down the schedule and
/// warm-starting each step from the previous solution.
pub fn homotopy_solve(
    net: &Network,
    schedule: &HomotopySchedule,
    opts: &NewtonOptions,
) -> Result<PfSolution, HomotopyError> {
    if let Err(msg) = schedule.validate() {
        return Err(HomotopyError {
            gamma: f64::NAN,
            source: PfError::InvalidSchedule(msg),
        });
    }

    let base = StampedNetwork::new(net).map_err(|e| HomotopyError {
        gamma: f64::NAN,
        source: e.into(),
    })?;
    let g_short = schedule
        .g_short
        .unwrap_or(1e3 * base.max_series_admittance.max(1.0));

    let mut x = base.flat_start();
    let mut last: Option<PfSolution> = None;
    for &gamma in &schedule.factors {
        let stamped = if gamma == 0.0 {
            base.clone()
        } else {
            StampedNetwork::with_relaxation(net, gamma * g_short).map_err(|e| HomotopyError {
                gamma,
                source: e.into(),
            })?
        };
        let sol = solve_stamped(&stamped, x, opts).map_err(|e| HomotopyError { gamma, source: e })?;
        x = sol.state.clone();
        last = Some(sol);
    }
    Ok(last.expect("schedule validated non-empty"))
}

/// Generation / load / network-loss complex power split, per phase; the
/// loss route goes through each stamped element individually so the balance
/// is an independent check on the solution.
#[derive(Clone, Debug)]
pub struct PowerBalance {
    pub generation: [Complex64; 3],
    pub load: [Complex64; 3],
    pub loss: [Complex64; 3],
}

pub fn power_balance(stamped: &StampedNetwork, x: &PhasorState) -> PowerBalance {
    let generation = stamped.swing_injection_by_phase(x);
    let mut load = [Complex64::new(0.0, 0.0); 3];
    for (n, (p, q)) in stamped.load.iter().enumerate() {
        let (_, phase) = stamped.map.bus_phase(n);
        load[phase.index()] += Complex64::new(*p, *q);
    }
    let mut loss = [Complex64::new(0.0, 0.0); 3];
    for el in &stamped.elements {
        let k = el.nodes.len();
        for i in 0..k {
            let node = el.nodes[i];
            let vi = x.complex(node);
            let mut current = Complex64::new(0.0, 0.0);
            for j in 0..k {
                current += el.block[i * k + j] * x.complex(el.nodes[j]);
            }
            let (_, phase) = stamped.map.bus_phase(node);
            loss[phase.index()] += vi * current.conj();
        }
    }
    PowerBalance {
        generation,
        load,
        loss,
    }
}

/// Closed-form |V2| of the two-bus lossless test network: swing at 1.0 p.u.
/// through reactance `x_pu` feeding a constant load (p, q). Returns `None`
/// past the loadability boundary.
pub fn two_bus_voltage_oracle(x_pu: f64, p: f64, q: f64) -> Option<f64> {
    let lin = 1.0 - 2.0 * x_pu * q;
    let disc = lin * lin - 4.0 * x_pu * x_pu * (p * p + q * q);
    if disc < 0.0 {
        return None;
    }
    let w = 0.5 * (lin + disc.sqrt());
    Some(w.sqrt())
}
