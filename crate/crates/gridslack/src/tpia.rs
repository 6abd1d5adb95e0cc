//! Infeasibility-analysis problem construction and solution interpretation.
//!
//! A [`TpiaProblem`] wraps a validated network with one slack source per
//! enabled node-phase, minimizing the summed squared apparent power of the
//! injections subject to the KCL equalities (modified by the slack terms)
//! and voltage-magnitude inequalities. The interior-point solver that
//! consumes it lives in [`crate::pdip`].

use thiserror::Error;

use crate::model::{
    Capacitor, Formulation, FormulationMode, Load, Network, Phase, PhaseSet, PhasorState,
    SlackComponent, SlackRatingLimits, ValidationReport, VoltageBounds,
};
use crate::stamping::{admittance_to_power, current_to_power, StampedNetwork, EPS_V};

/// Total |S_f| below which a solved network counts as feasible.
pub const ZERO_SLACK_TOL: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum BuildError {
    #[error(transparent)]
    Invalid(#[from] ValidationReport),
    #[error("the current formulation cannot restrict injections to reactive power only")]
    ReactiveOnlyCurrent,
    #[error("objective scaling alpha must be positive, got {0}")]
    BadAlpha(f64),
    #[error("slack source requested at unknown bus \"{0}\"")]
    UnknownSlackBus(String),
    #[error("slack source requested at {bus}/{phase} but the bus has phases {has}")]
    SlackPhaseMissing {
        bus: String,
        phase: Phase,
        has: PhaseSet,
    },
    #[error("slack source requested at swing bus \"{0}\"; the swing source already balances there")]
    SlackAtSwing(String),
    #[error("swing phasor magnitude {vm} lies outside the voltage bounds [{lo}, {hi}]")]
    SwingOutsideBounds { vm: f64, lo: f64, hi: f64 },
    #[error("rating limit references {bus}/{phase} which carries no slack source")]
    RatingWithoutSlack { bus: String, phase: Phase },
    #[error("rating limit on {bus}/{phase} targets the real component, which this mode omits")]
    RatingComponentMissing { bus: String, phase: Phase },
    #[error(transparent)]
    Rating(#[from] crate::model::RatingError),
    #[error(transparent)]
    Bounds(#[from] crate::model::BoundsError),
}

#[derive(Clone, Debug)]
pub struct TpiaOptions {
    pub mode: FormulationMode,
    /// Objective scaling; the per-unit system keeps 1.0 well conditioned.
    pub alpha: f64,
    /// `None` disables the voltage-magnitude inequalities entirely.
    pub bounds: Option<VoltageBounds>,
    pub ratings: SlackRatingLimits,
    /// Slack placement; `None` enables every non-swing node-phase.
    pub enabled: Option<Vec<(String, PhaseSet)>>,
}

impl TpiaOptions {
    pub fn new(mode: FormulationMode) -> TpiaOptions {
        TpiaOptions {
            mode,
            alpha: 1.0,
            bounds: Some(VoltageBounds::uniform(0.9, 1.1).unwrap()),
            ratings: SlackRatingLimits::none(),
            enabled: None,
        }
    }
}

/// Bijective index map over the stacked KKT vector
/// [x (2 per node) | s | lambda (2 per node) | mu].
#[derive(Clone, Debug)]
pub struct VarLayout {
    pub n_nodes: usize,
    pub slack_width: usize,
    pub n_slack: usize,
    pub n_eq: usize,
    pub n_ineq: usize,
}

impl VarLayout {
    pub fn n_x(&self) -> usize {
        2 * self.n_nodes
    }

    pub fn n_primal(&self) -> usize {
        self.n_x() + self.n_slack
    }

    pub fn x_re(&self, node: usize) -> usize {
        2 * node
    }

    pub fn x_im(&self, node: usize) -> usize {
        2 * node + 1
    }

    /// Primal index of slack component `comp` of the k-th enabled node.
    pub fn slack(&self, k: usize, comp: usize) -> usize {
        debug_assert!(comp < self.slack_width);
        self.n_x() + k * self.slack_width + comp
    }

    pub fn lambda_base(&self) -> usize {
        self.n_primal()
    }

    pub fn mu_base(&self) -> usize {
        self.lambda_base() + self.n_eq
    }

    pub fn total(&self) -> usize {
        self.mu_base() + self.n_ineq
    }
}

/// One resolved rating inequality on a slack variable: c = s - lower >= 0 or
/// c = upper - s >= 0.
#[derive(Clone, Debug)]
pub struct ResolvedRating {
    /// Index into the s block (0..n_slack).
    pub s_index: usize,
    pub is_upper: bool,
    pub limit: f64,
}

#[derive(Clone, Debug)]
pub struct TpiaProblem {
    pub network: Network,
    pub stamped: StampedNetwork,
    pub mode: FormulationMode,
    pub alpha: f64,
    /// Squared bounds (lb^2, ub^2) per node when voltage limits are active.
    pub bounds_sq: Option<Vec<(f64, f64)>>,
    /// Kept for reporting; `bounds_sq` is the solver-facing form.
    pub bounds: Option<VoltageBounds>,
    pub ratings: Vec<ResolvedRating>,
    /// Enabled node indices, ascending.
    pub enabled: Vec<usize>,
    /// node -> position in `enabled`, or MAX.
    pub slack_of_node: Vec<usize>,
    pub layout: VarLayout,
}

/// Builds the optimization problem for one formulation mode over a network.
pub fn build_problem(net: &Network, opts: &TpiaOptions) -> Result<TpiaProblem, BuildError> {
    build_with_relaxation(net, opts, 0.0)
}

pub(crate) fn build_with_relaxation(
    net: &Network,
    opts: &TpiaOptions,
    relax_g: f64,
) -> Result<TpiaProblem, BuildError> {
    if opts.mode.reactive_only && opts.mode.formulation == Formulation::Current {
        return Err(BuildError::ReactiveOnlyCurrent);
    }
    if !(opts.alpha > 0.0) {
        return Err(BuildError::BadAlpha(opts.alpha));
    }
    opts.ratings.validate()?;

    let stamped = StampedNetwork::with_relaxation(net, relax_g)?;
    let n = stamped.node_count();
    let bus_index = net.bus_index();

    // Slack placement: explicit set, or every non-swing node-phase.
    let mut enabled: Vec<usize> = Vec::new();
    match &opts.enabled {
        None => {
            for node in 0..n {
                if !stamped.is_swing_node(node) {
                    enabled.push(node);
                }
            }
        }
        Some(set) => {
            for (bus, phases) in set {
                let bi = *bus_index
                    .get(bus.as_str())
                    .ok_or_else(|| BuildError::UnknownSlackBus(bus.clone()))?;
                for p in phases.iter() {
                    let node = stamped.map.node(bi, p).ok_or(BuildError::SlackPhaseMissing {
                        bus: bus.clone(),
                        phase: p,
                        has: net.buses[bi].phases,
                    })?;
                    if stamped.is_swing_node(node) {
                        return Err(BuildError::SlackAtSwing(bus.clone()));
                    }
                    enabled.push(node);
                }
            }
            enabled.sort_unstable();
            enabled.dedup();
        }
    }
    let mut slack_of_node = vec![usize::MAX; n];
    for (k, &node) in enabled.iter().enumerate() {
        slack_of_node[node] = k;
    }

    // Voltage bounds, squared; swing phasors must sit strictly inside.
    let bounds_sq = match &opts.bounds {
        None => None,
        Some(b) => {
            let mut v = Vec::with_capacity(n);
            for (node, (bi, phase)) in stamped.map.iter() {
                let (lo, hi) = b.for_node(&net.buses[bi].id, phase);
                if let Some((sr, si)) = stamped.swing[node] {
                    let vm = sr.hypot(si);
                    if vm <= lo || vm >= hi {
                        return Err(BuildError::SwingOutsideBounds { vm, lo, hi });
                    }
                }
                v.push((lo * lo, hi * hi));
            }
            Some(v)
        }
    };

    let width = opts.mode.width();
    let mut ratings = Vec::new();
    for r in &opts.ratings.entries {
        let bi = *bus_index
            .get(r.bus.as_str())
            .ok_or_else(|| BuildError::UnknownSlackBus(r.bus.clone()))?;
        let node = stamped
            .map
            .node(bi, r.phase)
            .ok_or(BuildError::SlackPhaseMissing {
                bus: r.bus.clone(),
                phase: r.phase,
                has: net.buses[bi].phases,
            })?;
        let k = slack_of_node[node];
        if k == usize::MAX {
            return Err(BuildError::RatingWithoutSlack {
                bus: r.bus.clone(),
                phase: r.phase,
            });
        }
        let comp = match (r.component, opts.mode.reactive_only) {
            (SlackComponent::First, true) => {
                return Err(BuildError::RatingComponentMissing {
                    bus: r.bus.clone(),
                    phase: r.phase,
                })
            }
            (SlackComponent::First, false) => 0,
            (SlackComponent::Second, false) => 1,
            (SlackComponent::Second, true) => 0,
        };
        let s_index = k * width + comp;
        if let Some(lo) = r.lower {
            ratings.push(ResolvedRating {
                s_index,
                is_upper: false,
                limit: lo,
            });
        }
        if let Some(hi) = r.upper {
            ratings.push(ResolvedRating {
                s_index,
                is_upper: true,
                limit: hi,
            });
        }
    }

    let n_ineq = bounds_sq.as_ref().map(|_| 2 * n).unwrap_or(0) + ratings.len();
    let layout = VarLayout {
        n_nodes: n,
        slack_width: width,
        n_slack: enabled.len() * width,
        n_eq: 2 * n,
        n_ineq,
    };

    Ok(TpiaProblem {
        network: net.clone(),
        stamped,
        mode: opts.mode,
        alpha: opts.alpha,
        bounds_sq,
        bounds: opts.bounds.clone(),
        ratings,
        enabled,
        slack_of_node,
        layout,
    })
}

impl TpiaProblem {
    /// Rebuilds this problem over the homotopy-relaxed network.
    pub fn relaxed(&self, relax_g: f64) -> Result<TpiaProblem, BuildError> {
        let opts = TpiaOptions {
            mode: self.mode,
            alpha: self.alpha,
            bounds: self.bounds.clone(),
            ratings: SlackRatingLimits {
                entries: self.rating_entries(),
            },
            enabled: Some(self.enabled_as_spec()),
        };
        build_with_relaxation(&self.network, &opts, relax_g)
    }

    fn enabled_as_spec(&self) -> Vec<(String, PhaseSet)> {
        self.enabled
            .iter()
            .map(|&node| {
                let (bi, phase) = self.stamped.map.bus_phase(node);
                (self.network.buses[bi].id.clone(), PhaseSet::single(phase))
            })
            .collect()
    }

    fn rating_entries(&self) -> Vec<crate::model::RatingLimit> {
        // Reconstructs the public rating description from the resolved form.
        let width = self.layout.slack_width;
        self.ratings
            .iter()
            .map(|r| {
                let k = r.s_index / width;
                let comp = r.s_index % width;
                let (bi, phase) = self.stamped.map.bus_phase(self.enabled[k]);
                crate::model::RatingLimit {
                    bus: self.network.buses[bi].id.clone(),
                    phase,
                    component: if comp == 0 && !self.mode.reactive_only {
                        SlackComponent::First
                    } else {
                        SlackComponent::Second
                    },
                    lower: (!r.is_upper).then_some(r.limit),
                    upper: r.is_upper.then_some(r.limit),
                }
            })
            .collect()
    }

    /// Splits a primal vector into voltages and the slack block.
    pub fn split_primal<'a>(&self, z: &'a [f64]) -> (PhasorState, &'a [f64]) {
        let n = self.layout.n_nodes;
        let mut x = PhasorState::zeros(n);
        for node in 0..n {
            x.re[node] = z[2 * node];
            x.im[node] = z[2 * node + 1];
        }
        (x, &z[self.layout.n_x()..])
    }

    /// (s1, s2) of the k-th enabled slack from the s block; the first
    /// component is structurally 0 in reactive-only modes.
    pub fn slack_pair(&self, s: &[f64], k: usize) -> (f64, f64) {
        if self.mode.reactive_only {
            (0.0, s[k])
        } else {
            (s[2 * k], s[2 * k + 1])
        }
    }

    /// Initial primal iterate: flat-start (or given) voltages projected
    /// strictly inside the bounds, slack at zero (projected inside any
    /// rating box).
    pub fn initial_primal(&self, warm: Option<&PhasorState>) -> Vec<f64> {
        let n = self.layout.n_nodes;
        let mut x = warm.cloned().unwrap_or_else(|| self.stamped.flat_start());
        self.project_interior(&mut x);
        let mut z = vec![0.0; self.layout.n_primal()];
        for node in 0..n {
            z[2 * node] = x.re[node];
            z[2 * node + 1] = x.im[node];
        }
        // Slack starts at zero unless a rating box excludes it.
        let mut lo = vec![f64::NEG_INFINITY; self.layout.n_slack];
        let mut hi = vec![f64::INFINITY; self.layout.n_slack];
        for r in &self.ratings {
            if r.is_upper {
                hi[r.s_index] = hi[r.s_index].min(r.limit);
            } else {
                lo[r.s_index] = lo[r.s_index].max(r.limit);
            }
        }
        for j in 0..self.layout.n_slack {
            let sv = self.layout.n_x() + j;
            if 0.0 <= lo[j] || 0.0 >= hi[j] {
                z[sv] = match (lo[j].is_finite(), hi[j].is_finite()) {
                    (true, true) => 0.5 * (lo[j] + hi[j]),
                    (true, false) => lo[j] + 1.0,
                    (false, true) => hi[j] - 1.0,
                    (false, false) => 0.0,
                };
            }
        }
        z
    }

    /// Clamps voltage magnitudes strictly inside the active bounds (or above
    /// the collapse floor when bounds are off), preserving angles.
    pub fn project_interior(&self, x: &mut PhasorState) {
        let n = self.layout.n_nodes;
        for node in 0..n {
            if self.stamped.is_swing_node(node) {
                continue;
            }
            let (lo, hi) = match &self.bounds_sq {
                Some(b) => (b[node].0.sqrt() * 1.001, b[node].1.sqrt() * 0.999),
                None => (2.0 * EPS_V, f64::INFINITY),
            };
            let mag = x.magnitude(node);
            if mag < 1e-12 {
                x.re[node] = lo.max(2.0 * EPS_V);
                x.im[node] = 0.0;
                continue;
            }
            let clamped = mag.clamp(lo, hi.max(lo));
            if clamped != mag {
                let scale = clamped / mag;
                x.re[node] *= scale;
                x.im[node] *= scale;
            }
        }
    }
}

/// Per-node (c_low, c_high) of the voltage-magnitude constraints; both are
/// nonnegative exactly when Eq-style bounds hold.
pub fn voltage_bound_residuals(x: &PhasorState, bounds_sq: &[(f64, f64)]) -> Vec<(f64, f64)> {
    (0..x.len())
        .map(|n| {
            let u = x.re[n] * x.re[n] + x.im[n] * x.im[n];
            (u - bounds_sq[n].0, bounds_sq[n].1 - u)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TpiaStatus {
    /// All slack injections vanished: the network satisfies its constraints.
    FeasibleNetwork,
    /// Nonzero injections were required; the network is infeasible and the
    /// injections localize the deficiency.
    InfeasibleNetwork,
}

#[derive(Clone, Debug)]
pub struct InjectionRow {
    pub bus: String,
    pub phase: Phase,
    pub s1: f64,
    pub s2: f64,
    /// Equivalent complex-power injection of this slack source.
    pub p_inj: f64,
    pub q_inj: f64,
}

#[derive(Clone, Debug)]
pub struct VoltageRow {
    pub bus: String,
    pub phase: Phase,
    pub vmag: f64,
    pub vang_deg: f64,
}

#[derive(Clone, Debug)]
pub struct SolveReport {
    pub mode: FormulationMode,
    pub status: TpiaStatus,
    pub iterations: usize,
    pub homotopy_used: bool,
    /// Infinity norm of the unperturbed KKT residual at the final iterate.
    pub kkt_residual: f64,
    pub injections: Vec<InjectionRow>,
    pub voltages: Vec<VoltageRow>,
    pub total_abs_p: f64,
    pub total_abs_q: f64,
    pub v_min: f64,
    pub v_max: f64,
}

impl TpiaProblem {
    /// Interprets a solved primal vector into a report.
    pub fn interpret(
        &self,
        z: &[f64],
        iterations: usize,
        homotopy_used: bool,
        kkt_residual: f64,
    ) -> SolveReport {
        let (x, s) = self.split_primal(z);
        let mut injections = Vec::with_capacity(self.enabled.len());
        let mut total_abs_p = 0.0;
        let mut total_abs_q = 0.0;
        for (k, &node) in self.enabled.iter().enumerate() {
            let (s1, s2) = self.slack_pair(s, k);
            let (vr, vi) = (x.re[node], x.im[node]);
            let (p, q) = match self.mode.formulation {
                Formulation::Current => current_to_power(s1, s2, vr, vi),
                Formulation::Power => (s1, s2),
                Formulation::Admittance => admittance_to_power(s1, s2, vr, vi),
            };
            let (bi, phase) = self.stamped.map.bus_phase(node);
            injections.push(InjectionRow {
                bus: self.network.buses[bi].id.clone(),
                phase,
                s1,
                s2,
                p_inj: p,
                q_inj: q,
            });
            total_abs_p += p.abs();
            total_abs_q += q.abs();
        }
        let mut voltages = Vec::with_capacity(x.len());
        let mut v_min = f64::INFINITY;
        let mut v_max = 0.0f64;
        for (node, (bi, phase)) in self.stamped.map.iter() {
            let vm = x.magnitude(node);
            v_min = v_min.min(vm);
            v_max = v_max.max(vm);
            voltages.push(VoltageRow {
                bus: self.network.buses[bi].id.clone(),
                phase,
                vmag: vm,
                vang_deg: x.angle_deg(node),
            });
        }
        let status = if total_abs_p + total_abs_q <= ZERO_SLACK_TOL {
            TpiaStatus::FeasibleNetwork
        } else {
            TpiaStatus::InfeasibleNetwork
        };
        SolveReport {
            mode: self.mode,
            status,
            iterations,
            homotopy_used,
            kkt_residual,
            injections,
            voltages,
            total_abs_p,
            total_abs_q,
            v_min,
            v_max,
        }
    }
}

impl SolveReport {
    pub fn mode_name(&self) -> String {
        self.mode.to_string()
    }

    /// Joins voltage and injection rows into the writable result document.
    pub fn to_document(&self) -> crate::netlist::ResultDocument {
        use std::collections::BTreeMap;
        let mut slack: BTreeMap<(String, Phase), &InjectionRow> = BTreeMap::new();
        for r in &self.injections {
            slack.insert((r.bus.clone(), r.phase), r);
        }
        let rows = self
            .voltages
            .iter()
            .map(|v| {
                let key = (v.bus.clone(), v.phase);
                match slack.get(&key) {
                    Some(inj) => crate::netlist::ResultRow {
                        bus: v.bus.clone(),
                        phase: v.phase,
                        vmag: v.vmag,
                        vang_deg: v.vang_deg,
                        slack_kind: self.mode_name(),
                        s1: inj.s1,
                        s2: inj.s2,
                        p_inj: inj.p_inj,
                        q_inj: inj.q_inj,
                    },
                    None => crate::netlist::ResultRow {
                        bus: v.bus.clone(),
                        phase: v.phase,
                        vmag: v.vmag,
                        vang_deg: v.vang_deg,
                        slack_kind: "none".into(),
                        s1: 0.0,
                        s2: 0.0,
                        p_inj: 0.0,
                        q_inj: 0.0,
                    },
                }
            })
            .collect();
        crate::netlist::ResultDocument { rows }
    }
}

/// Node-phases whose injection magnitude reaches `threshold_pu`, largest
/// first; ties keep bus/phase order for determinism.
pub fn localize(report: &SolveReport, threshold_pu: f64) -> Vec<InjectionRow> {
    let mut rows: Vec<InjectionRow> = report
        .injections
        .iter()
        .filter(|r| r.p_inj.hypot(r.q_inj) >= threshold_pu)
        .cloned()
        .collect();
    rows.sort_by(|a, b| {
        let ma = a.p_inj.hypot(a.q_inj);
        let mb = b.p_inj.hypot(b.q_inj);
        mb.partial_cmp(&ma)
            .unwrap()
            .then(a.bus.cmp(&b.bus))
            .then(a.phase.cmp(&b.phase))
    });
    rows
}

#[derive(Debug, Error)]
pub enum CompensationError {
    #[error("compensation requires a reactive-only report (TPIA-B or TPIA-Q), got {0}")]
    NotReactiveOnly(String),
    #[error("solved susceptance at {bus}/{phase} is negative ({value:.3e}); not representable as a capacitor")]
    NegativeSusceptance {
        bus: String,
        phase: Phase,
        value: f64,
    },
}

/// Installs a reactive-only solution as fixed equipment: TPIA-B susceptances
/// become capacitors, TPIA-Q injections become negative loads. Injections
/// below `threshold_pu` (in |S_f|) are dropped.
pub fn apply_compensation(
    net: &Network,
    report: &SolveReport,
    threshold_pu: f64,
) -> Result<Network, CompensationError> {
    if !report.mode.reactive_only {
        return Err(CompensationError::NotReactiveOnly(report.mode_name()));
    }
    let mut out = net.clone();
    for row in &report.injections {
        if row.p_inj.hypot(row.q_inj) < threshold_pu {
            continue;
        }
        match report.mode.formulation {
            Formulation::Admittance => {
                let b_s = row.s2;
                if b_s < 0.0 {
                    return Err(CompensationError::NegativeSusceptance {
                        bus: row.bus.clone(),
                        phase: row.phase,
                        value: b_s,
                    });
                }
                out.capacitors.push(Capacitor {
                    bus: row.bus.clone(),
                    phase: row.phase,
                    susceptance: b_s,
                });
            }
            Formulation::Power | Formulation::Current => {
                out.loads.push(Load {
                    bus: row.bus.clone(),
                    phase: row.phase,
                    p: 0.0,
                    q: -row.q_inj,
                });
            }
        }
    }
    Ok(out)
}
