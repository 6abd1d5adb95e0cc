//! Evaluation of the nodal current equations and of the slack-source terms.
//!
//! Everything here works on the rectangular node voltages enumerated by a
//! [`NodeMap`]: the linear network part is a complex admittance matrix
//! assembled once per network, the nonlinear part is the constant-power load
//! current, and slack sources add formulation-dependent injection terms with
//! closed-form first and second derivatives.

use num_complex::Complex64;
use thiserror::Error;

use crate::model::{
    BusKind, Formulation, Network, NodeMap, Phase, PhasorState, TransformerConnection,
    ValidationReport,
};

/// Smallest positive root of a*t^2 + b*t + c, if any. Used for exact
/// step-length limiting against quadratic constraints.
pub(crate) fn smallest_positive_root(a: f64, b: f64, c: f64) -> Option<f64> {
    if a.abs() < 1e-300 {
        if b.abs() < 1e-300 {
            return None;
        }
        let r = -c / b;
        return if r > 0.0 { Some(r) } else { None };
    }
    let disc = b * b - 4.0 * a * c;
    if disc < 0.0 {
        return None;
    }
    let sq = disc.sqrt();
    // Numerically stable pair of roots.
    let q = -0.5 * (b + b.signum() * sq);
    let mut roots = [q / a, if q != 0.0 { c / q } else { f64::INFINITY }];
    roots.sort_by(|x, y| x.partial_cmp(y).unwrap());
    roots.into_iter().find(|&r| r > 0.0 && r.is_finite())
}

/// Voltage-collapse guard: the load current model divides by |V|^2 and is
/// singular at the origin, so evaluation below this magnitude is refused.
pub const EPS_V: f64 = 1e-4;

#[derive(Clone, Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("voltage collapsed below guard at node {node} (|V| = {magnitude:.3e} p.u.)")]
    VoltageCollapse { node: usize, magnitude: f64 },
}

// ---------------------------------------------------------------------------
// Admittance matrix
// ---------------------------------------------------------------------------

/// Complex nodal admittance over the (bus, phase) index space, CSR layout.
/// G is the real part, B the imaginary part.
#[derive(Clone, Debug)]
pub struct AdmittanceMatrix {
    pub dim: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<u32>,
    values: Vec<Complex64>,
}

impl AdmittanceMatrix {
    fn from_triplets(dim: usize, triplets: &[(u32, u32, Complex64)]) -> AdmittanceMatrix {
        let mut count = vec![0usize; dim + 1];
        for &(r, _, _) in triplets {
            count[r as usize + 1] += 1;
        }
        for i in 0..dim {
            count[i + 1] += count[i];
        }
        let mut next = count.clone();
        let mut cols = vec![0u32; triplets.len()];
        let mut vals = vec![Complex64::new(0.0, 0.0); triplets.len()];
        for &(r, c, v) in triplets {
            let p = next[r as usize];
            cols[p] = c;
            vals[p] = v;
            next[r as usize] += 1;
        }
        let mut row_ptr = vec![0usize; dim + 1];
        let mut col_idx = Vec::with_capacity(cols.len());
        let mut values = Vec::with_capacity(vals.len());
        let mut scratch: Vec<(u32, Complex64)> = Vec::new();
        for i in 0..dim {
            scratch.clear();
            for p in count[i]..count[i + 1] {
                scratch.push((cols[p], vals[p]));
            }
            scratch.sort_unstable_by_key(|&(c, _)| c);
            let mut k = 0;
            while k < scratch.len() {
                let c = scratch[k].0;
                let mut v = Complex64::new(0.0, 0.0);
                while k < scratch.len() && scratch[k].0 == c {
                    v += scratch[k].1;
                    k += 1;
                }
                col_idx.push(c);
                values.push(v);
            }
            row_ptr[i + 1] = col_idx.len();
        }
        AdmittanceMatrix {
            dim,
            row_ptr,
            col_idx,
            values,
        }
    }

    pub fn row(&self, n: usize) -> impl Iterator<Item = (usize, Complex64)> + '_ {
        (self.row_ptr[n]..self.row_ptr[n + 1]).map(move |p| (self.col_idx[p] as usize, self.values[p]))
    }

    pub fn get(&self, row: usize, col: usize) -> Complex64 {
        self.row(row)
            .find(|&(c, _)| c == col)
            .map(|(_, v)| v)
            .unwrap_or(Complex64::new(0.0, 0.0))
    }

    /// I = Y V in rectangular form.
    pub fn apply(&self, x: &PhasorState, out_re: &mut [f64], out_im: &mut [f64]) {
        for n in 0..self.dim {
            let mut acc = Complex64::new(0.0, 0.0);
            for (m, y) in self.row(n) {
                acc += y * Complex64::new(x.re[m], x.im[m]);
            }
            out_re[n] = acc.re;
            out_im[n] = acc.im;
        }
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        for n in 0..self.dim {
            for (m, y) in self.row(n) {
                let yt = self.get(m, n);
                if (y - yt).norm() > tol * y.norm().max(yt.norm()).max(1.0) {
                    return false;
                }
            }
        }
        true
    }
}

/// One stamped element kept around for power-balance and flow accounting:
/// `nodes` lists the element's terminals and `block` its dense nodal
/// admittance over those terminals (row-major).
#[derive(Clone, Debug)]
pub struct Element {
    pub nodes: Vec<usize>,
    pub block: Vec<Complex64>,
}

impl Element {
    /// Total complex power absorbed by the element at state `x`.
    pub fn absorbed_power(&self, x: &PhasorState) -> Complex64 {
        let k = self.nodes.len();
        let mut total = Complex64::new(0.0, 0.0);
        for i in 0..k {
            let vi = x.complex(self.nodes[i]);
            let mut current = Complex64::new(0.0, 0.0);
            for j in 0..k {
                current += self.block[i * k + j] * x.complex(self.nodes[j]);
            }
            total += vi * current.conj();
        }
        total
    }
}

// ---------------------------------------------------------------------------
// Stamped network: everything a solver needs, precomputed
// ---------------------------------------------------------------------------

/// Validated network lowered onto the node index space: admittance matrix,
/// accumulated loads, swing set-points and per-island flat-start phasors.
#[derive(Clone, Debug)]
pub struct StampedNetwork {
    pub map: NodeMap,
    pub y: AdmittanceMatrix,
    /// Constant-power load (P, Q) accumulated per node.
    pub load: Vec<(f64, f64)>,
    /// Fixed phasor for swing nodes.
    pub swing: Vec<Option<(f64, f64)>>,
    pub elements: Vec<Element>,
    /// Largest series admittance entry magnitude, used to scale homotopy
    /// shorts.
    pub max_series_admittance: f64,
    flat: PhasorState,
}

impl StampedNetwork {
    pub fn new(net: &Network) -> Result<StampedNetwork, ValidationReport> {
        StampedNetwork::with_relaxation(net, 0.0)
    }

    /// Stamps the network with an extra conductance `relax_g` in parallel to
    /// every branch and transformer (the homotopy relaxation); 0 stamps the
    /// original network.
    pub fn with_relaxation(net: &Network, relax_g: f64) -> Result<StampedNetwork, ValidationReport> {
        crate::model::validate(net)?;
        let map = NodeMap::new(net);
        let bus_index = net.bus_index();
        let dim = map.len();

        let mut triplets: Vec<(u32, u32, Complex64)> = Vec::new();
        let mut elements: Vec<Element> = Vec::new();
        let mut max_y = 0.0f64;

        let stamp_block = |nodes: &[usize], block: &[Complex64], triplets: &mut Vec<(u32, u32, Complex64)>| {
            let k = nodes.len();
            debug_assert_eq!(block.len(), k * k);
            for i in 0..k {
                for j in 0..k {
                    let v = block[i * k + j];
                    if v.norm() > 0.0 {
                        triplets.push((nodes[i] as u32, nodes[j] as u32, v));
                    }
                }
            }
        };

        for br in &net.branches {
            let f = bus_index[br.from.as_str()];
            let t = bus_index[br.to.as_str()];
            let phases: Vec<Phase> = br.phases.iter().collect();
            let k = phases.len();
            let from_nodes: Vec<usize> = phases.iter().map(|&p| map.node(f, p).unwrap()).collect();
            let to_nodes: Vec<usize> = phases.iter().map(|&p| map.node(t, p).unwrap()).collect();

            // Dense 2k x 2k nodal block: series admittance plus shunts plus
            // the homotopy relaxation.
            let mut block = vec![Complex64::new(0.0, 0.0); (2 * k) * (2 * k)];
            for (i, &pi) in phases.iter().enumerate() {
                for (j, &pj) in phases.iter().enumerate() {
                    let mut y = br.series.get(pi, pj);
                    max_y = max_y.max(y.norm());
                    if i == j {
                        y += Complex64::new(relax_g, 0.0);
                    }
                    block[i * 2 * k + j] += y;
                    block[(k + i) * 2 * k + (k + j)] += y;
                    block[i * 2 * k + (k + j)] -= y;
                    block[(k + i) * 2 * k + j] -= y;
                    if let Some(sh) = &br.shunt_from {
                        block[i * 2 * k + j] += sh.get(pi, pj);
                    }
                    if let Some(sh) = &br.shunt_to {
                        block[(k + i) * 2 * k + (k + j)] += sh.get(pi, pj);
                    }
                }
            }
            let nodes: Vec<usize> = from_nodes.iter().chain(to_nodes.iter()).copied().collect();
            stamp_block(&nodes, &block, &mut triplets);
            elements.push(Element { nodes, block });
        }

        for tx in &net.transformers {
            let f = bus_index[tx.from.as_str()];
            let t = bus_index[tx.to.as_str()];
            let y = Complex64::new(1.0, 0.0) / tx.series_impedance;
            max_y = max_y.max(y.norm());
            let ratio = tx.turns_ratio;
            match tx.connection {
                TransformerConnection::WyeGWyeG => {
                    let phases: Vec<Phase> = net.buses[f]
                        .phases
                        .intersect(net.buses[t].phases)
                        .iter()
                        .collect();
                    let k = phases.len();
                    let from_nodes: Vec<usize> =
                        phases.iter().map(|&p| map.node(f, p).unwrap()).collect();
                    let to_nodes: Vec<usize> =
                        phases.iter().map(|&p| map.node(t, p).unwrap()).collect();
                    let mut block = vec![Complex64::new(0.0, 0.0); (2 * k) * (2 * k)];
                    for i in 0..k {
                        let relax = Complex64::new(relax_g, 0.0);
                        block[i * 2 * k + i] += y / (ratio * ratio) + relax;
                        block[(k + i) * 2 * k + (k + i)] += y + relax;
                        block[i * 2 * k + (k + i)] += -y / ratio - relax;
                        block[(k + i) * 2 * k + i] += -y / ratio - relax;
                    }
                    let nodes: Vec<usize> =
                        from_nodes.iter().chain(to_nodes.iter()).copied().collect();
                    stamp_block(&nodes, &block, &mut triplets);
                    elements.push(Element { nodes, block });
                }
                TransformerConnection::DeltaWyeG => {
                    // Standard delta (from) / grounded-wye (to) nodal blocks.
                    let phases = [Phase::A, Phase::B, Phase::C];
                    let from_nodes: Vec<usize> =
                        phases.iter().map(|&p| map.node(f, p).unwrap()).collect();
                    let to_nodes: Vec<usize> =
                        phases.iter().map(|&p| map.node(t, p).unwrap()).collect();
                    let third = y / 3.0;
                    let sqrt3 = 3.0f64.sqrt();
                    let yiii = y / sqrt3;
                    let mut block = vec![Complex64::new(0.0, 0.0); 36];
                    let mut set = |i: usize, j: usize, v: Complex64| {
                        block[i * 6 + j] += v;
                    };
                    // Delta self block YII / ratio^2.
                    let t2 = ratio * ratio;
                    for i in 0..3 {
                        for j in 0..3 {
                            let c = if i == j { 2.0 } else { -1.0 };
                            set(i, j, third * c / t2);
                        }
                    }
                    // Wye self block YI.
                    for i in 0..3 {
                        set(3 + i, 3 + i, y);
                    }
                    // Coupling YIII / ratio and its transpose.
                    let pattern = [(0usize, 0usize, -1.0), (0, 1, 1.0), (1, 1, -1.0), (1, 2, 1.0), (2, 0, 1.0), (2, 2, -1.0)];
                    for &(i, j, c) in &pattern {
                        set(i, 3 + j, yiii * c / ratio);
                        set(3 + j, i, yiii * c / ratio);
                    }
                    // Homotopy relaxation straight across the terminals.
                    if relax_g > 0.0 {
                        let rg = Complex64::new(relax_g, 0.0);
                        for i in 0..3 {
                            set(i, i, rg);
                            set(3 + i, 3 + i, rg);
                            set(i, 3 + i, -rg);
                            set(3 + i, i, -rg);
                        }
                    }
                    let nodes: Vec<usize> =
                        from_nodes.iter().chain(to_nodes.iter()).copied().collect();
                    stamp_block(&nodes, &block, &mut triplets);
                    elements.push(Element { nodes, block });
                }
            }
        }

        for cap in &net.capacitors {
            let b = bus_index[cap.bus.as_str()];
            let n = map.node(b, cap.phase).unwrap();
            let y = Complex64::new(0.0, cap.susceptance);
            triplets.push((n as u32, n as u32, y));
            elements.push(Element {
                nodes: vec![n],
                block: vec![y],
            });
        }

        // Ensure every node owns a diagonal slot so the CSR pattern is stable
        // even for isolated swing phases.
        for n in 0..dim {
            triplets.push((n as u32, n as u32, Complex64::new(0.0, 0.0)));
        }

        let y = AdmittanceMatrix::from_triplets(dim, &triplets);

        let mut load = vec![(0.0, 0.0); dim];
        for ld in &net.loads {
            let b = bus_index[ld.bus.as_str()];
            let n = map.node(b, ld.phase).unwrap();
            load[n].0 += ld.p;
            load[n].1 += ld.q;
        }

        // Island analysis for flat starts: each island inherits its swing
        // source phasor.
        let nb = net.buses.len();
        let mut parent: Vec<usize> = (0..nb).collect();
        fn root(parent: &mut Vec<usize>, mut i: usize) -> usize {
            while parent[i] != i {
                parent[i] = parent[parent[i]];
                i = parent[i];
            }
            i
        }
        for br in &net.branches {
            let (a, b) = (bus_index[br.from.as_str()], bus_index[br.to.as_str()]);
            let (ra, rb) = (root(&mut parent, a), root(&mut parent, b));
            if ra != rb {
                parent[ra.max(rb)] = ra.min(rb);
            }
        }
        for tx in &net.transformers {
            let (a, b) = (bus_index[tx.from.as_str()], bus_index[tx.to.as_str()]);
            let (ra, rb) = (root(&mut parent, a), root(&mut parent, b));
            if ra != rb {
                parent[ra.max(rb)] = ra.min(rb);
            }
        }
        let mut island_source: std::collections::BTreeMap<usize, (f64, f64)> =
            std::collections::BTreeMap::new();
        for (bi, bus) in net.buses.iter().enumerate() {
            if bus.kind == BusKind::Swing {
                let src = net.source_for(&bus.id);
                island_source.insert(root(&mut parent, bi), (src.magnitude, src.angle_deg.to_radians()));
            }
        }

        let mut swing = vec![None; dim];
        for (n, (bi, phase)) in map.iter() {
            if net.buses[bi].kind == BusKind::Swing {
                let src = net.source_for(&net.buses[bi].id);
                let ang = src.angle_deg.to_radians() + phase.angle_offset_rad();
                swing[n] = Some((src.magnitude * ang.cos(), src.magnitude * ang.sin()));
            }
        }

        // Flat start phasors reuse the island sources.
        let mut flat = PhasorState::zeros(dim);
        for (n, (bi, phase)) in map.iter() {
            let (vm, va) = island_source
                .get(&root(&mut parent, bi))
                .copied()
                .unwrap_or((1.0, 0.0));
            let ang = va + phase.angle_offset_rad();
            flat.re[n] = vm * ang.cos();
            flat.im[n] = vm * ang.sin();
        }

        Ok(StampedNetwork {
            map,
            y,
            load,
            swing,
            elements,
            max_series_admittance: max_y,
            flat,
        })
    }

    pub fn node_count(&self) -> usize {
        self.y.dim
    }

    pub fn flat_start(&self) -> PhasorState {
        self.flat.clone()
    }

    pub fn is_swing_node(&self, n: usize) -> bool {
        self.swing[n].is_some()
    }

    /// KCL residual stacked as [f_r(0), f_i(0), f_r(1), ...]; swing rows are
    /// the voltage-fix equations V - V_set.
    pub fn residual(&self, x: &PhasorState) -> Result<Vec<f64>, EvalError> {
        let n = self.node_count();
        let mut out = vec![0.0; 2 * n];
        let mut yre = vec![0.0; n];
        let mut yim = vec![0.0; n];
        self.y.apply(x, &mut yre, &mut yim);
        for k in 0..n {
            if let Some((sr, si)) = self.swing[k] {
                out[2 * k] = x.re[k] - sr;
                out[2 * k + 1] = x.im[k] - si;
                continue;
            }
            let (p, q) = self.load[k];
            let (ir, ii) = load_current_at(k, x.re[k], x.im[k], p, q)?;
            out[2 * k] = yre[k] + ir;
            out[2 * k + 1] = yim[k] + ii;
        }
        Ok(out)
    }

    /// Newton Jacobian of [`Self::residual`] pushed into `sys` as triplets.
    pub fn pf_jacobian(&self, x: &PhasorState, sys: &mut crate::linsys::SparseSystem) -> Result<(), EvalError> {
        let n = self.node_count();
        for k in 0..n {
            if self.swing[k].is_some() {
                sys.push(2 * k, 2 * k, 1.0);
                sys.push(2 * k + 1, 2 * k + 1, 1.0);
                continue;
            }
            for (m, y) in self.y.row(k) {
                sys.push(2 * k, 2 * m, y.re);
                sys.push(2 * k, 2 * m + 1, -y.im);
                sys.push(2 * k + 1, 2 * m, y.im);
                sys.push(2 * k + 1, 2 * m + 1, y.re);
            }
            let (p, q) = self.load[k];
            if p != 0.0 || q != 0.0 {
                guard(k, x.re[k], x.im[k])?;
                let b = pq_current(x.re[k], x.im[k], p, q);
                sys.push(2 * k, 2 * k, b.d_ir[0]);
                sys.push(2 * k, 2 * k + 1, b.d_ir[1]);
                sys.push(2 * k + 1, 2 * k, b.d_ii[0]);
                sys.push(2 * k + 1, 2 * k + 1, b.d_ii[1]);
            }
        }
        Ok(())
    }

    /// Complex power injected by the swing sources, per phase. The network
    /// must be at (or near) a power-flow solution for this to equal the
    /// physical source output.
    pub fn swing_injection_by_phase(&self, x: &PhasorState) -> [Complex64; 3] {
        let n = self.node_count();
        let mut yre = vec![0.0; n];
        let mut yim = vec![0.0; n];
        self.y.apply(x, &mut yre, &mut yim);
        let mut out = [Complex64::new(0.0, 0.0); 3];
        for k in 0..n {
            if self.swing[k].is_none() {
                continue;
            }
            let (p, q) = self.load[k];
            let (ir, ii) = match load_current_at(k, x.re[k], x.im[k], p, q) {
                Ok(v) => v,
                Err(_) => (0.0, 0.0),
            };
            let inj = Complex64::new(yre[k] + ir, yim[k] + ii);
            let (_, phase) = self.map.bus_phase(k);
            out[phase.index()] += x.complex(k) * inj.conj();
        }
        out
    }
}

fn guard(node: usize, vr: f64, vi: f64) -> Result<f64, EvalError> {
    let u = vr * vr + vi * vi;
    if u < EPS_V * EPS_V {
        return Err(EvalError::VoltageCollapse {
            node,
            magnitude: u.sqrt(),
        });
    }
    Ok(u)
}

fn load_current_at(node: usize, vr: f64, vi: f64, p: f64, q: f64) -> Result<(f64, f64), EvalError> {
    if p == 0.0 && q == 0.0 {
        return Ok((0.0, 0.0));
    }
    let u = guard(node, vr, vi)?;
    Ok(((p * vr + q * vi) / u, (p * vi - q * vr) / u))
}

/// Rectangular load current drawn by a constant-power (P, Q) demand at
/// voltage V: the rectangular parts of conj(S / V).
pub fn load_current(vr: f64, vi: f64, p: f64, q: f64) -> Result<(f64, f64), EvalError> {
    load_current_at(usize::MAX, vr, vi, p, q).map_err(|e| match e {
        EvalError::VoltageCollapse { magnitude, .. } => EvalError::VoltageCollapse {
            node: usize::MAX,
            magnitude,
        },
    })
}

/// Convenience free function mirroring [`StampedNetwork::residual`].
pub fn kcl_residual(stamped: &StampedNetwork, x: &PhasorState) -> Result<Vec<f64>, EvalError> {
    stamped.residual(x)
}

/// Assembles the nodal admittance matrix alone.
pub fn assemble_admittance(net: &Network) -> Result<AdmittanceMatrix, ValidationReport> {
    Ok(StampedNetwork::new(net)?.y)
}

// ---------------------------------------------------------------------------
// Constant-power current bundle: values plus first and second partials
// ---------------------------------------------------------------------------

/// I_R = (P a + Q b)/u, I_I = (P b - Q a)/u with a = V_R, b = V_I and
/// u = a^2 + b^2. Partial derivatives are over the variable order
/// (a, b, P, Q) so the same bundle serves constant loads (first two) and
/// power-form slack sources (all four).
#[derive(Clone, Debug)]
pub struct PqCurrent {
    pub ir: f64,
    pub ii: f64,
    pub d_ir: [f64; 4],
    pub d_ii: [f64; 4],
    pub h_ir: [[f64; 4]; 4],
    pub h_ii: [[f64; 4]; 4],
}

pub fn pq_current(a: f64, b: f64, p: f64, q: f64) -> PqCurrent {
    let u = a * a + b * b;
    let u2 = u * u;
    let u3 = u2 * u;
    let nn = p * a + q * b;
    let mm = p * b - q * a;

    let ir = nn / u;
    let ii = mm / u;

    let d_ir = [
        p / u - 2.0 * a * nn / u2,
        q / u - 2.0 * b * nn / u2,
        a / u,
        b / u,
    ];
    let d_ii = [
        -q / u - 2.0 * a * mm / u2,
        p / u - 2.0 * b * mm / u2,
        b / u,
        -a / u,
    ];

    let mut h_ir = [[0.0; 4]; 4];
    h_ir[0][0] = -4.0 * a * p / u2 - 2.0 * nn / u2 + 8.0 * a * a * nn / u3;
    h_ir[0][1] = -2.0 * b * p / u2 - 2.0 * a * q / u2 + 8.0 * a * b * nn / u3;
    h_ir[1][1] = -4.0 * b * q / u2 - 2.0 * nn / u2 + 8.0 * b * b * nn / u3;
    h_ir[0][2] = 1.0 / u - 2.0 * a * a / u2;
    h_ir[0][3] = -2.0 * a * b / u2;
    h_ir[1][2] = -2.0 * a * b / u2;
    h_ir[1][3] = 1.0 / u - 2.0 * b * b / u2;

    let mut h_ii = [[0.0; 4]; 4];
    h_ii[0][0] = 4.0 * a * q / u2 - 2.0 * mm / u2 + 8.0 * a * a * mm / u3;
    h_ii[0][1] = 2.0 * b * q / u2 - 2.0 * a * p / u2 + 8.0 * a * b * mm / u3;
    h_ii[1][1] = -4.0 * b * p / u2 - 2.0 * mm / u2 + 8.0 * b * b * mm / u3;
    h_ii[0][2] = -2.0 * a * b / u2;
    h_ii[0][3] = -1.0 / u + 2.0 * a * a / u2;
    h_ii[1][2] = 1.0 / u - 2.0 * b * b / u2;
    h_ii[1][3] = 2.0 * a * b / u2;

    symmetrize(&mut h_ir);
    symmetrize(&mut h_ii);

    PqCurrent {
        ir,
        ii,
        d_ir,
        d_ii,
        h_ir,
        h_ii,
    }
}

fn symmetrize(h: &mut [[f64; 4]; 4]) {
    for i in 0..4 {
        for j in (i + 1)..4 {
            h[j][i] = h[i][j];
        }
    }
}

// ---------------------------------------------------------------------------
// Slack injection terms h and objective terms g
// ---------------------------------------------------------------------------

/// Injection term of one slack source: (h_r, h_i) plus partials over
/// (V_R, V_I, s1, s2). The slack pair (s1, s2) reads as (i_fR, i_fI),
/// (P_s, Q_s) or (G_s, B_s) depending on the formulation.
#[derive(Clone, Debug)]
pub struct SlackTerm {
    pub hr: f64,
    pub hi: f64,
    pub d_hr: [f64; 4],
    pub d_hi: [f64; 4],
    pub h_hr: [[f64; 4]; 4],
    pub h_hi: [[f64; 4]; 4],
}

pub fn slack_term(formulation: Formulation, vr: f64, vi: f64, s1: f64, s2: f64) -> SlackTerm {
    match formulation {
        Formulation::Current => SlackTerm {
            hr: s1,
            hi: s2,
            d_hr: [0.0, 0.0, 1.0, 0.0],
            d_hi: [0.0, 0.0, 0.0, 1.0],
            h_hr: [[0.0; 4]; 4],
            h_hi: [[0.0; 4]; 4],
        },
        Formulation::Power => {
            let b = pq_current(vr, vi, s1, s2);
            SlackTerm {
                hr: b.ir,
                hi: b.ii,
                d_hr: b.d_ir,
                d_hi: b.d_ii,
                h_hr: b.h_ir,
                h_hi: b.h_ii,
            }
        }
        Formulation::Admittance => {
            let mut h_hr = [[0.0; 4]; 4];
            h_hr[0][2] = -1.0;
            h_hr[1][3] = 1.0;
            let mut h_hi = [[0.0; 4]; 4];
            h_hi[0][3] = -1.0;
            h_hi[1][2] = -1.0;
            symmetrize(&mut h_hr);
            symmetrize(&mut h_hi);
            SlackTerm {
                hr: -s1 * vr + s2 * vi,
                hi: -s1 * vi - s2 * vr,
                d_hr: [-s1, s2, -vr, vi],
                d_hi: [-s2, -s1, -vi, -vr],
                h_hr,
                h_hi,
            }
        }
    }
}

/// Scalar slack injection (h_r, h_i); the power form shares the
/// voltage-collapse guard with [`load_current`].
pub fn slack_injection(
    formulation: Formulation,
    s1: f64,
    s2: f64,
    vr: f64,
    vi: f64,
) -> Result<(f64, f64), EvalError> {
    if formulation == Formulation::Power {
        guard(usize::MAX, vr, vi)?;
    }
    let t = slack_term(formulation, vr, vi, s1, s2);
    Ok((t.hr, t.hi))
}

/// Objective term of one slack source: g plus gradient and Hessian over
/// (V_R, V_I, s1, s2). Every form equals the squared apparent power of the
/// injection, so g >= 0 with equality only at s = 0.
#[derive(Clone, Debug)]
pub struct ObjectiveTerm {
    pub g: f64,
    pub grad: [f64; 4],
    pub hess: [[f64; 4]; 4],
}

pub fn objective_bundle(formulation: Formulation, vr: f64, vi: f64, s1: f64, s2: f64) -> ObjectiveTerm {
    let u = vr * vr + vi * vi;
    let ss = s1 * s1 + s2 * s2;
    match formulation {
        Formulation::Current => {
            let mut hess = [[0.0; 4]; 4];
            hess[0][0] = 2.0 * ss;
            hess[1][1] = 2.0 * ss;
            hess[2][2] = 2.0 * u;
            hess[3][3] = 2.0 * u;
            hess[0][2] = 4.0 * vr * s1;
            hess[0][3] = 4.0 * vr * s2;
            hess[1][2] = 4.0 * vi * s1;
            hess[1][3] = 4.0 * vi * s2;
            symmetrize(&mut hess);
            ObjectiveTerm {
                g: ss * u,
                grad: [2.0 * vr * ss, 2.0 * vi * ss, 2.0 * s1 * u, 2.0 * s2 * u],
                hess,
            }
        }
        Formulation::Power => {
            let mut hess = [[0.0; 4]; 4];
            hess[2][2] = 2.0;
            hess[3][3] = 2.0;
            ObjectiveTerm {
                g: ss,
                grad: [0.0, 0.0, 2.0 * s1, 2.0 * s2],
                hess,
            }
        }
        Formulation::Admittance => {
            let u2 = u * u;
            let mut hess = [[0.0; 4]; 4];
            hess[0][0] = 4.0 * ss * (u + 2.0 * vr * vr);
            hess[1][1] = 4.0 * ss * (u + 2.0 * vi * vi);
            hess[0][1] = 8.0 * vr * vi * ss;
            hess[2][2] = 2.0 * u2;
            hess[3][3] = 2.0 * u2;
            hess[0][2] = 8.0 * vr * u * s1;
            hess[0][3] = 8.0 * vr * u * s2;
            hess[1][2] = 8.0 * vi * u * s1;
            hess[1][3] = 8.0 * vi * u * s2;
            symmetrize(&mut hess);
            ObjectiveTerm {
                g: ss * u2,
                grad: [
                    4.0 * vr * u * ss,
                    4.0 * vi * u * ss,
                    2.0 * s1 * u2,
                    2.0 * s2 * u2,
                ],
                hess,
            }
        }
    }
}

/// Objective value alone; always >= 0.
pub fn objective_term(formulation: Formulation, s1: f64, s2: f64, vr: f64, vi: f64) -> f64 {
    objective_bundle(formulation, vr, vi, s1, s2).g
}

// ---------------------------------------------------------------------------
// Equivalence maps between the slack representations
// ---------------------------------------------------------------------------

/// Complex power injected into a node by current (i_fR, i_fI): S = V conj(i).
pub fn current_to_power(ir: f64, ii: f64, vr: f64, vi: f64) -> (f64, f64) {
    (vr * ir + vi * ii, vi * ir - vr * ii)
}

/// Admittance pair producing the same injected current as a power pair:
/// G_s = -P_s / |V|^2, B_s = Q_s / |V|^2.
pub fn power_to_admittance(ps: f64, qs: f64, vr: f64, vi: f64) -> (f64, f64) {
    let u = vr * vr + vi * vi;
    (-ps / u, qs / u)
}

/// Complex power injected by an admittance pair: S = |V|^2 (-G_s + j B_s).
pub fn admittance_to_power(gs: f64, bs: f64, vr: f64, vi: f64) -> (f64, f64) {
    let u = vr * vr + vi * vi;
    (-gs * u, bs * u)
}
