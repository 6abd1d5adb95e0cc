//! Domain types for multi-phase distribution networks: buses, branches,
//! transformers, loads, capacitors, slack-source descriptions and the
//! per-unit normalization that every solver in this crate assumes.

use std::collections::BTreeMap;
use std::fmt;

use num_complex::Complex64;
use thiserror::Error;

/// One phase of a three-phase system.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Phase {
    A,
    B,
    C,
}

impl Phase {
    pub const ALL: [Phase; 3] = [Phase::A, Phase::B, Phase::C];

    pub fn index(self) -> usize {
        match self {
            Phase::A => 0,
            Phase::B => 1,
            Phase::C => 2,
        }
    }

    pub fn letter(self) -> char {
        match self {
            Phase::A => 'A',
            Phase::B => 'B',
            Phase::C => 'C',
        }
    }

    pub fn from_letter(c: char) -> Option<Phase> {
        match c.to_ascii_uppercase() {
            'A' => Some(Phase::A),
            'B' => Some(Phase::B),
            'C' => Some(Phase::C),
            _ => None,
        }
    }

    /// Nominal phasor rotation for a balanced source: 0, -120, +120 degrees.
    pub fn angle_offset_rad(self) -> f64 {
        match self {
            Phase::A => 0.0,
            Phase::B => -2.0 * std::f64::consts::PI / 3.0,
            Phase::C => 2.0 * std::f64::consts::PI / 3.0,
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.letter())
    }
}

/// Subset of {A, B, C} stored as a bitmask.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct PhaseSet(u8);

impl PhaseSet {
    pub const EMPTY: PhaseSet = PhaseSet(0);
    pub const ABC: PhaseSet = PhaseSet(0b111);

    pub fn single(p: Phase) -> PhaseSet {
        PhaseSet(1 << p.index())
    }

    pub fn with(self, p: Phase) -> PhaseSet {
        PhaseSet(self.0 | 1 << p.index())
    }

    pub fn contains(self, p: Phase) -> bool {
        self.0 & (1 << p.index()) != 0
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn is_subset_of(self, other: PhaseSet) -> bool {
        self.0 & !other.0 == 0
    }

    pub fn intersect(self, other: PhaseSet) -> PhaseSet {
        PhaseSet(self.0 & other.0)
    }

    pub fn iter(self) -> impl Iterator<Item = Phase> {
        Phase::ALL.into_iter().filter(move |p| self.contains(*p))
    }

    /// Parses strings like "ABC", "AC", "b".
    pub fn parse(s: &str) -> Option<PhaseSet> {
        let mut set = PhaseSet::EMPTY;
        for c in s.chars() {
            set = set.with(Phase::from_letter(c)?);
        }
        if set.is_empty() {
            None
        } else {
            Some(set)
        }
    }
}

impl fmt::Display for PhaseSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for p in self.iter() {
            write!(f, "{}", p.letter())?;
        }
        Ok(())
    }
}

impl fmt::Debug for PhaseSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PhaseSet({})", self)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BusKind {
    Pq,
    Swing,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Bus {
    pub id: String,
    pub phases: PhaseSet,
    /// Line-to-neutral volts in physical networks, per-unit otherwise.
    pub nominal_voltage: f64,
    pub kind: BusKind,
}

/// Complex matrix over a phase subset, row-major in A,B,C order.
#[derive(Clone, Debug, PartialEq)]
pub struct PhaseMatrix {
    pub phases: PhaseSet,
    pub entries: Vec<Complex64>,
}

impl PhaseMatrix {
    pub fn zero(phases: PhaseSet) -> PhaseMatrix {
        let k = phases.len();
        PhaseMatrix {
            phases,
            entries: vec![Complex64::new(0.0, 0.0); k * k],
        }
    }

    /// Diagonal matrix `y * I` over the given phases.
    pub fn scaled_identity(phases: PhaseSet, y: Complex64) -> PhaseMatrix {
        let mut m = PhaseMatrix::zero(phases);
        for p in phases.iter() {
            m.set(p, p, y);
        }
        m
    }

    pub fn dim(&self) -> usize {
        self.phases.len()
    }

    fn offset(&self, p: Phase) -> usize {
        self.phases
            .iter()
            .position(|q| q == p)
            .expect("phase not present in matrix")
    }

    pub fn get(&self, row: Phase, col: Phase) -> Complex64 {
        let k = self.dim();
        self.entries[self.offset(row) * k + self.offset(col)]
    }

    pub fn set(&mut self, row: Phase, col: Phase, value: Complex64) {
        let k = self.dim();
        let idx = self.offset(row) * k + self.offset(col);
        self.entries[idx] = value;
    }

    pub fn add(&mut self, row: Phase, col: Phase, value: Complex64) {
        let k = self.dim();
        let idx = self.offset(row) * k + self.offset(col);
        self.entries[idx] += value;
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        let k = self.dim();
        for i in 0..k {
            for j in (i + 1)..k {
                let a = self.entries[i * k + j];
                let b = self.entries[j * k + i];
                let scale = a.norm().max(b.norm()).max(1.0);
                if (a - b).norm() > tol * scale {
                    return false;
                }
            }
        }
        true
    }

    pub fn scaled(&self, factor: f64) -> PhaseMatrix {
        PhaseMatrix {
            phases: self.phases,
            entries: self.entries.iter().map(|y| y * factor).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Branch {
    pub from: String,
    pub to: String,
    /// Phases spanned; must exist on both terminals.
    pub phases: PhaseSet,
    /// Series admittance block (siemens physical, p.u. after normalization).
    pub series: PhaseMatrix,
    /// Optional shunt admittance block per terminal.
    pub shunt_from: Option<PhaseMatrix>,
    pub shunt_to: Option<PhaseMatrix>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TransformerConnection {
    WyeGWyeG,
    DeltaWyeG,
}

impl TransformerConnection {
    pub fn parse(s: &str) -> Option<TransformerConnection> {
        match s {
            "wyeg_wyeg" => Some(TransformerConnection::WyeGWyeG),
            "delta_wyeg" => Some(TransformerConnection::DeltaWyeG),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TransformerConnection::WyeGWyeG => "wyeg_wyeg",
            TransformerConnection::DeltaWyeG => "delta_wyeg",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Transformer {
    pub from: String,
    pub to: String,
    pub connection: TransformerConnection,
    /// Off-nominal turns ratio, dimensionless (per-unit bases absorb the
    /// nominal ratio).
    pub turns_ratio: f64,
    /// Leakage impedance, always per-unit on the system base.
    pub series_impedance: Complex64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Load {
    pub bus: String,
    pub phase: Phase,
    pub p: f64,
    pub q: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Capacitor {
    pub bus: String,
    pub phase: Phase,
    /// Shunt susceptance, >= 0.
    pub susceptance: f64,
}

/// Voltage phasor held by a swing bus: magnitude in per-unit of nominal,
/// phase-A angle in degrees (B and C follow at -120/+120).
#[derive(Clone, Debug, PartialEq)]
pub struct SourceSpec {
    pub bus: String,
    pub magnitude: f64,
    pub angle_deg: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Units {
    Physical,
    PerUnit,
}

/// Power base plus one voltage base per voltage level (levels are keyed by
/// the nominal voltage of the buses that belong to them).
#[derive(Clone, Debug, PartialEq)]
pub struct Bases {
    pub s_base: f64,
    pub v_bases: Vec<VoltageBase>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VoltageBase {
    pub level: f64,
    pub base: f64,
}

impl Bases {
    pub fn base_for(&self, nominal: f64) -> Option<f64> {
        self.v_bases
            .iter()
            .find(|vb| (vb.level - nominal).abs() <= 1e-9 * vb.level.abs().max(1.0))
            .map(|vb| vb.base)
    }
}

/// TPIA knobs a feeder file may carry as defaults.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TpiaFileDefaults {
    pub vmin: Option<f64>,
    pub vmax: Option<f64>,
    pub alpha: Option<f64>,
    /// If non-empty, slack sources are enabled exactly at these (bus, phases)
    /// pairs instead of every non-swing node.
    pub slack_enable: Vec<(String, PhaseSet)>,
}

/// A multi-phase network. Immutable once validated; solvers only read it.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub buses: Vec<Bus>,
    pub branches: Vec<Branch>,
    pub transformers: Vec<Transformer>,
    pub loads: Vec<Load>,
    pub capacitors: Vec<Capacitor>,
    pub sources: Vec<SourceSpec>,
    pub units: Units,
    pub bases: Option<Bases>,
    pub defaults: TpiaFileDefaults,
}

impl Network {
    pub fn empty_per_unit() -> Network {
        Network {
            buses: Vec::new(),
            branches: Vec::new(),
            transformers: Vec::new(),
            loads: Vec::new(),
            capacitors: Vec::new(),
            sources: Vec::new(),
            units: Units::PerUnit,
            bases: None,
            defaults: TpiaFileDefaults::default(),
        }
    }

    pub fn bus_index(&self) -> BTreeMap<&str, usize> {
        self.buses
            .iter()
            .enumerate()
            .map(|(i, b)| (b.id.as_str(), i))
            .collect()
    }

    pub fn find_bus(&self, id: &str) -> Option<&Bus> {
        self.buses.iter().find(|b| b.id == id)
    }

    /// Source phasor for a swing bus; defaults to 1.0 p.u. at 0 degrees when
    /// no `source` record names it.
    pub fn source_for(&self, bus_id: &str) -> SourceSpec {
        self.sources
            .iter()
            .find(|s| s.bus == bus_id)
            .cloned()
            .unwrap_or(SourceSpec {
                bus: bus_id.to_string(),
                magnitude: 1.0,
                angle_deg: 0.0,
            })
    }
}

/// Enumeration of the (bus, phase) pairs of a network, in bus order then
/// phase order. Row/column indices of every vector and matrix in the
/// solvers refer to this map.
#[derive(Clone, Debug)]
pub struct NodeMap {
    entries: Vec<(usize, Phase)>,
    lookup: BTreeMap<(usize, u8), usize>,
}

impl NodeMap {
    pub fn new(net: &Network) -> NodeMap {
        let mut entries = Vec::new();
        let mut lookup = BTreeMap::new();
        for (bi, bus) in net.buses.iter().enumerate() {
            for p in bus.phases.iter() {
                lookup.insert((bi, p.index() as u8), entries.len());
                entries.push((bi, p));
            }
        }
        NodeMap { entries, lookup }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn node(&self, bus: usize, phase: Phase) -> Option<usize> {
        self.lookup.get(&(bus, phase.index() as u8)).copied()
    }

    pub fn bus_phase(&self, node: usize) -> (usize, Phase) {
        self.entries[node]
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, (usize, Phase))> + '_ {
        self.entries.iter().enumerate().map(|(i, &e)| (i, e))
    }
}

/// Rectangular node voltages, one (re, im) pair per map entry.
#[derive(Clone, Debug, PartialEq)]
pub struct PhasorState {
    pub re: Vec<f64>,
    pub im: Vec<f64>,
}

impl PhasorState {
    pub fn zeros(n: usize) -> PhasorState {
        PhasorState {
            re: vec![0.0; n],
            im: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.re.len()
    }

    pub fn is_empty(&self) -> bool {
        self.re.is_empty()
    }

    pub fn magnitude(&self, node: usize) -> f64 {
        self.re[node].hypot(self.im[node])
    }

    pub fn angle_deg(&self, node: usize) -> f64 {
        self.im[node].atan2(self.re[node]).to_degrees()
    }

    pub fn complex(&self, node: usize) -> Complex64 {
        Complex64::new(self.re[node], self.im[node])
    }
}

/// Which slack-source representation an analysis uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Formulation {
    /// Rectangular current sources (i_fR, i_fI).
    Current,
    /// Power sources (P_s, Q_s).
    Power,
    /// Admittance sources (G_s, B_s).
    Admittance,
}

impl fmt::Display for Formulation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Formulation::Current => "I",
            Formulation::Power => "PQ",
            Formulation::Admittance => "GB",
        };
        write!(f, "{}", s)
    }
}

/// Formulation plus the reactive-only restriction, as named on the CLI:
/// i, pq, q, gb, b.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FormulationMode {
    pub formulation: Formulation,
    pub reactive_only: bool,
}

impl FormulationMode {
    pub const ALL: [FormulationMode; 5] = [
        FormulationMode { formulation: Formulation::Current, reactive_only: false },
        FormulationMode { formulation: Formulation::Power, reactive_only: false },
        FormulationMode { formulation: Formulation::Power, reactive_only: true },
        FormulationMode { formulation: Formulation::Admittance, reactive_only: false },
        FormulationMode { formulation: Formulation::Admittance, reactive_only: true },
    ];

    pub fn parse(s: &str) -> Option<FormulationMode> {
        let (formulation, reactive_only) = match s.to_ascii_lowercase().as_str() {
            "i" => (Formulation::Current, false),
            "pq" => (Formulation::Power, false),
            "q" => (Formulation::Power, true),
            "gb" => (Formulation::Admittance, false),
            "b" => (Formulation::Admittance, true),
            _ => return None,
        };
        Some(FormulationMode {
            formulation,
            reactive_only,
        })
    }

    /// Number of slack unknowns per enabled node: 2, or 1 when restricted to
    /// the reactive component.
    pub fn width(self) -> usize {
        if self.reactive_only {
            1
        } else {
            2
        }
    }
}

impl fmt::Display for FormulationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match (self.formulation, self.reactive_only) {
            (Formulation::Current, false) => "I",
            (Formulation::Current, true) => "I(reactive?)",
            (Formulation::Power, false) => "PQ",
            (Formulation::Power, true) => "Q",
            (Formulation::Admittance, false) => "GB",
            (Formulation::Admittance, true) => "B",
        };
        write!(f, "{}", s)
    }
}

/// Per-node slack values for one formulation. `values` holds `width` numbers
/// per enabled node: (i_fR, i_fI), (P_s, Q_s) or (G_s, B_s); reactive-only
/// modes store only the second component.
#[derive(Clone, Debug)]
pub struct SlackVariables {
    pub mode: FormulationMode,
    /// Node indices (into a `NodeMap`) that carry a slack source.
    pub enabled: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SlackModelError {
    #[error("the current formulation cannot restrict injections to reactive power only")]
    ReactiveOnlyCurrent,
}

impl SlackVariables {
    pub fn zeros(mode: FormulationMode, enabled: Vec<usize>) -> Result<SlackVariables, SlackModelError> {
        if mode.reactive_only && mode.formulation == Formulation::Current {
            return Err(SlackModelError::ReactiveOnlyCurrent);
        }
        let n = enabled.len() * mode.width();
        Ok(SlackVariables {
            mode,
            enabled,
            values: vec![0.0; n],
        })
    }

    /// (first, second) components for the k-th enabled node; the first is 0
    /// under reactive-only restriction.
    pub fn pair(&self, k: usize) -> (f64, f64) {
        if self.mode.reactive_only {
            (0.0, self.values[k])
        } else {
            (self.values[2 * k], self.values[2 * k + 1])
        }
    }
}

/// Per-unit voltage magnitude bounds with optional per-(bus, phase)
/// overrides.
#[derive(Clone, Debug, PartialEq)]
pub struct VoltageBounds {
    pub lower: f64,
    pub upper: f64,
    pub overrides: BTreeMap<(String, Phase), (f64, f64)>,
}

#[derive(Debug, Error, PartialEq)]
pub enum BoundsError {
    #[error("voltage bounds must satisfy 0 < lower < upper, got [{0}, {1}]")]
    Invalid(f64, f64),
}

impl VoltageBounds {
    pub fn uniform(lower: f64, upper: f64) -> Result<VoltageBounds, BoundsError> {
        if !(lower > 0.0 && lower < upper) {
            return Err(BoundsError::Invalid(lower, upper));
        }
        Ok(VoltageBounds {
            lower,
            upper,
            overrides: BTreeMap::new(),
        })
    }

    pub fn with_override(
        mut self,
        bus: &str,
        phase: Phase,
        lower: f64,
        upper: f64,
    ) -> Result<VoltageBounds, BoundsError> {
        if !(lower > 0.0 && lower < upper) {
            return Err(BoundsError::Invalid(lower, upper));
        }
        self.overrides.insert((bus.to_string(), phase), (lower, upper));
        Ok(self)
    }

    pub fn for_node(&self, bus: &str, phase: Phase) -> (f64, f64) {
        self.overrides
            .get(&(bus.to_string(), phase))
            .copied()
            .unwrap_or((self.lower, self.upper))
    }
}

/// Which slack component a rating limit constrains.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SlackComponent {
    First,
    Second,
}

/// Optional box limits on slack values, e.g. a susceptance rating cap.
#[derive(Clone, Debug, Default)]
pub struct SlackRatingLimits {
    pub entries: Vec<RatingLimit>,
}

#[derive(Clone, Debug)]
pub struct RatingLimit {
    pub bus: String,
    pub phase: Phase,
    pub component: SlackComponent,
    pub lower: Option<f64>,
    pub upper: Option<f64>,
}

#[derive(Debug, Error, PartialEq)]
pub enum RatingError {
    #[error("rating limit on {bus}/{phase}: lower {lower} exceeds upper {upper}")]
    Inverted {
        bus: String,
        phase: Phase,
        lower: f64,
        upper: f64,
    },
}

impl SlackRatingLimits {
    pub fn none() -> SlackRatingLimits {
        SlackRatingLimits::default()
    }

    pub fn validate(&self) -> Result<(), RatingError> {
        for e in &self.entries {
            if let (Some(lo), Some(hi)) = (e.lower, e.upper) {
                if lo > hi {
                    return Err(RatingError::Inverted {
                        bus: e.bus.clone(),
                        phase: e.phase,
                        lower: lo,
                        upper: hi,
                    });
                }
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Validation
// ---------------------------------------------------------------------------

/// All invariant violations found in one pass, each naming the offending
/// element.
#[derive(Debug, Error)]
pub struct ValidationReport {
    pub diagnostics: Vec<String>,
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "network validation failed:")?;
        for d in &self.diagnostics {
            write!(f, "\n  - {}", d)?;
        }
        Ok(())
    }
}

/// Checks structural invariants: unique ids, resolvable references, phase
/// consistency, symmetric admittance blocks, one swing bus per island.
pub fn validate(net: &Network) -> Result<(), ValidationReport> {
    let mut diags = Vec::new();

    let mut index: BTreeMap<&str, usize> = BTreeMap::new();
    for (i, bus) in net.buses.iter().enumerate() {
        if index.insert(bus.id.as_str(), i).is_some() {
            diags.push(format!("duplicate bus id \"{}\"", bus.id));
        }
        if bus.phases.is_empty() {
            diags.push(format!("bus \"{}\" exposes no phases", bus.id));
        }
        if !(bus.nominal_voltage > 0.0) {
            diags.push(format!(
                "bus \"{}\" nominal voltage must be positive, got {}",
                bus.id, bus.nominal_voltage
            ));
        }
    }

    let resolve = |id: &str, what: &str, owner: &str, diags: &mut Vec<String>| -> Option<usize> {
        match index.get(id) {
            Some(&i) => Some(i),
            None => {
                diags.push(format!("{} \"{}\" references unknown bus \"{}\"", what, owner, id));
                None
            }
        }
    };

    // Union-find over buses for island analysis.
    let mut parent: Vec<usize> = (0..net.buses.len()).collect();
    fn root(parent: &mut Vec<usize>, mut i: usize) -> usize {
        while parent[i] != i {
            parent[i] = parent[parent[i]];
            i = parent[i];
        }
        i
    }
    let join = |parent: &mut Vec<usize>, a: usize, b: usize| {
        let (ra, rb) = (root(parent, a), root(parent, b));
        if ra != rb {
            parent[ra.max(rb)] = ra.min(rb);
        }
    };

    for (bi, br) in net.branches.iter().enumerate() {
        let owner = format!("{}->{}", br.from, br.to);
        let f = resolve(&br.from, "branch", &owner, &mut diags);
        let t = resolve(&br.to, "branch", &owner, &mut diags);
        if let (Some(f), Some(t)) = (f, t) {
            join(&mut parent, f, t);
            let common = net.buses[f].phases.intersect(net.buses[t].phases);
            if !br.phases.is_subset_of(common) {
                diags.push(format!(
                    "branch {} spans phases {} not present on both terminals (common: {})",
                    owner, br.phases, common
                ));
            }
        }
        if br.series.phases != br.phases {
            diags.push(format!(
                "branch {} series matrix covers phases {} but branch spans {}",
                owner, br.series.phases, br.phases
            ));
        }
        if !br.series.is_symmetric(1e-9) {
            diags.push(format!("branch {} series admittance is not symmetric", owner));
        }
        for (label, shunt) in [("from", &br.shunt_from), ("to", &br.shunt_to)] {
            if let Some(sh) = shunt {
                if sh.phases != br.phases {
                    diags.push(format!(
                        "branch {} {}-side shunt covers phases {} but branch spans {}",
                        owner, label, sh.phases, br.phases
                    ));
                }
                if !sh.is_symmetric(1e-9) {
                    diags.push(format!("branch {} {}-side shunt is not symmetric", owner, label));
                }
            }
        }
        let _ = bi;
    }

    for tx in &net.transformers {
        let owner = format!("{}->{}", tx.from, tx.to);
        let f = resolve(&tx.from, "transformer", &owner, &mut diags);
        let t = resolve(&tx.to, "transformer", &owner, &mut diags);
        if !(tx.turns_ratio > 0.0) {
            diags.push(format!(
                "transformer {} turns ratio must be positive, got {}",
                owner, tx.turns_ratio
            ));
        }
        if tx.series_impedance.norm() == 0.0 {
            diags.push(format!("transformer {} has zero series impedance", owner));
        }
        if let (Some(f), Some(t)) = (f, t) {
            join(&mut parent, f, t);
            if tx.connection == TransformerConnection::DeltaWyeG {
                for (side, bus) in [("delta", f), ("wye", t)] {
                    if net.buses[bus].phases != PhaseSet::ABC {
                        diags.push(format!(
                            "transformer {} requires all three phases on its {} side",
                            owner, side
                        ));
                    }
                }
            }
        }
    }

    for ld in &net.loads {
        if let Some(b) = resolve(&ld.bus, "load", &ld.bus, &mut diags) {
            if !net.buses[b].phases.contains(ld.phase) {
                diags.push(format!(
                    "load on bus \"{}\" phase {} but bus exposes {}",
                    ld.bus, ld.phase, net.buses[b].phases
                ));
            }
        }
    }

    for cap in &net.capacitors {
        if let Some(b) = resolve(&cap.bus, "capacitor", &cap.bus, &mut diags) {
            if !net.buses[b].phases.contains(cap.phase) {
                diags.push(format!(
                    "capacitor on bus \"{}\" phase {} but bus exposes {}",
                    cap.bus, cap.phase, net.buses[b].phases
                ));
            }
        }
        if cap.susceptance < 0.0 {
            diags.push(format!(
                "capacitor on bus \"{}\" phase {} has negative susceptance {}",
                cap.bus, cap.phase, cap.susceptance
            ));
        }
    }

    for src in &net.sources {
        match index.get(src.bus.as_str()) {
            Some(&b) if net.buses[b].kind != BusKind::Swing => {
                diags.push(format!("source attached to non-swing bus \"{}\"", src.bus));
            }
            None => diags.push(format!("source references unknown bus \"{}\"", src.bus)),
            _ => {}
        }
        if !(src.magnitude > 0.0) {
            diags.push(format!(
                "source at bus \"{}\" magnitude must be positive",
                src.bus
            ));
        }
    }

    // Exactly one swing bus per island.
    if !net.buses.is_empty() {
        let mut swing_per_island: BTreeMap<usize, Vec<&str>> = BTreeMap::new();
        let mut islands: Vec<usize> = Vec::new();
        for i in 0..net.buses.len() {
            let r = root(&mut parent, i);
            if !islands.contains(&r) {
                islands.push(r);
            }
            if net.buses[i].kind == BusKind::Swing {
                swing_per_island.entry(r).or_default().push(&net.buses[i].id);
            }
        }
        for r in islands {
            match swing_per_island.get(&r) {
                None => diags.push(format!(
                    "island containing bus \"{}\" has no swing bus",
                    net.buses[r].id
                )),
                Some(v) if v.len() > 1 => diags.push(format!(
                    "island containing bus \"{}\" has {} swing buses ({})",
                    net.buses[r].id,
                    v.len(),
                    v.join(", ")
                )),
                _ => {}
            }
        }
    }

    if diags.is_empty() {
        Ok(())
    } else {
        Err(ValidationReport { diagnostics: diags })
    }
}

// ---------------------------------------------------------------------------
// Per-unit normalization
// ---------------------------------------------------------------------------

#[derive(Debug, Error, PartialEq)]
pub enum PerUnitError {
    #[error("network is already {0:?}")]
    WrongDirection(Units),
    #[error("no voltage base covers level {level} V (bus \"{bus}\")")]
    MissingBase { bus: String, level: f64 },
    #[error("branch {from}->{to} spans two voltage levels; use a transformer")]
    MixedLevels { from: String, to: String },
    #[error("power base must be positive")]
    BadPowerBase,
}

fn convert_units(net: &Network, bases: &Bases, to_pu: bool) -> Result<Network, PerUnitError> {
    if bases.s_base <= 0.0 {
        return Err(PerUnitError::BadPowerBase);
    }
    let mut out = net.clone();
    let idx = net.bus_index();

    let level_of = |bus_id: &str| -> Result<f64, PerUnitError> {
        let bus = &net.buses[idx[bus_id]];
        // In per-unit networks the stored nominal is normalized; recover the
        // level through the recorded base list by scanning for a base whose
        // normalized nominal matches.
        if to_pu {
            bases
                .base_for(bus.nominal_voltage)
                .map(|_| bus.nominal_voltage)
                .ok_or(PerUnitError::MissingBase {
                    bus: bus.id.to_string(),
                    level: bus.nominal_voltage,
                })
        } else {
            // nominal is level/base; find the base whose ratio matches.
            bases
                .v_bases
                .iter()
                .find(|vb| {
                    let pu = vb.level / vb.base;
                    (pu - bus.nominal_voltage).abs() <= 1e-9 * pu.abs().max(1.0)
                })
                .map(|vb| vb.level)
                .ok_or(PerUnitError::MissingBase {
                    bus: bus.id.to_string(),
                    level: bus.nominal_voltage,
                })
        }
    };

    for bus in &mut out.buses {
        let level = level_of(&bus.id)?;
        let v_base = bases.base_for(level).ok_or(PerUnitError::MissingBase {
            bus: bus.id.clone(),
            level,
        })?;
        bus.nominal_voltage = if to_pu {
            level / v_base
        } else {
            bus.nominal_voltage * v_base
        };
    }

    for br in &mut out.branches {
        let lf = level_of(&br.from)?;
        let lt = level_of(&br.to)?;
        if (lf - lt).abs() > 1e-9 * lf.abs().max(1.0) {
            return Err(PerUnitError::MixedLevels {
                from: br.from.clone(),
                to: br.to.clone(),
            });
        }
        let v_base = bases.base_for(lf).unwrap();
        let z_base = v_base * v_base / bases.s_base;
        let factor = if to_pu { z_base } else { 1.0 / z_base };
        br.series = br.series.scaled(factor);
        br.shunt_from = br.shunt_from.as_ref().map(|m| m.scaled(factor));
        br.shunt_to = br.shunt_to.as_ref().map(|m| m.scaled(factor));
    }

    for ld in &mut out.loads {
        let factor = if to_pu { 1.0 / bases.s_base } else { bases.s_base };
        ld.p *= factor;
        ld.q *= factor;
    }

    for cap in &mut out.capacitors {
        let level = level_of(&cap.bus)?;
        let v_base = bases.base_for(level).unwrap();
        let z_base = v_base * v_base / bases.s_base;
        cap.susceptance *= if to_pu { z_base } else { 1.0 / z_base };
    }

    // Transformer impedances and source phasors are already per-unit by
    // convention and carry across unchanged.
    out.units = if to_pu { Units::PerUnit } else { Units::Physical };
    out.bases = Some(bases.clone());
    Ok(out)
}

/// Normalizes a physical-unit network onto `bases`.
pub fn to_per_unit(net: &Network, bases: &Bases) -> Result<Network, PerUnitError> {
    if net.units == Units::PerUnit {
        return Err(PerUnitError::WrongDirection(Units::PerUnit));
    }
    convert_units(net, bases, true)
}

/// Inverse of [`to_per_unit`].
pub fn from_per_unit(net: &Network, bases: &Bases) -> Result<Network, PerUnitError> {
    if net.units == Units::Physical {
        return Err(PerUnitError::WrongDirection(Units::Physical));
    }
    convert_units(net, bases, false)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_bus() -> Network {
        let mut net = Network::empty_per_unit();
        net.buses.push(Bus {
            id: "src".into(),
            phases: PhaseSet::single(Phase::A),
            nominal_voltage: 1.0,
            kind: BusKind::Swing,
        });
        net.buses.push(Bus {
            id: "b1".into(),
            phases: PhaseSet::single(Phase::A),
            nominal_voltage: 1.0,
            kind: BusKind::Pq,
        });
        let mut series = PhaseMatrix::zero(PhaseSet::single(Phase::A));
        series.set(Phase::A, Phase::A, Complex64::new(1.0, -2.0));
        net.branches.push(Branch {
            from: "src".into(),
            to: "b1".into(),
            phases: PhaseSet::single(Phase::A),
            series,
            shunt_from: None,
            shunt_to: None,
        });
        net
    }

    #[test]
    fn minimal_network_validates() {
        assert!(validate(&two_bus()).is_ok());
    }

    #[test]
    fn unknown_bus_reference_is_reported() {
        let mut net = two_bus();
        net.branches[0].to = "ghost".into();
        let err = validate(&net).unwrap_err();
        assert!(err.diagnostics.iter().any(|d| d.contains("unknown bus")));
        assert!(err.diagnostics.iter().any(|d| d.contains("ghost")));
    }

    #[test]
    fn two_swing_buses_in_one_island_rejected() {
        let mut net = two_bus();
        net.buses[1].kind = BusKind::Swing;
        let err = validate(&net).unwrap_err();
        assert!(err.diagnostics.iter().any(|d| d.contains("swing buses")));
    }

    #[test]
    fn island_without_swing_rejected() {
        let mut net = two_bus();
        net.buses.push(Bus {
            id: "floating".into(),
            phases: PhaseSet::ABC,
            nominal_voltage: 1.0,
            kind: BusKind::Pq,
        });
        let err = validate(&net).unwrap_err();
        assert!(err.diagnostics.iter().any(|d| d.contains("no swing bus")));
    }

    #[test]
    fn asymmetric_branch_rejected() {
        let mut net = two_bus();
        net.buses[0].phases = PhaseSet::ABC;
        net.buses[1].phases = PhaseSet::ABC;
        let mut m = PhaseMatrix::zero(PhaseSet::ABC);
        m.set(Phase::A, Phase::B, Complex64::new(1.0, 0.0));
        net.branches[0].phases = PhaseSet::ABC;
        net.branches[0].series = m;
        let err = validate(&net).unwrap_err();
        assert!(err.diagnostics.iter().any(|d| d.contains("not symmetric")));
    }

    #[test]
    fn phase_set_parse_and_display() {
        let s = PhaseSet::parse("CA").unwrap();
        assert_eq!(s.to_string(), "AC");
        assert_eq!(s.len(), 2);
        assert!(s.contains(Phase::A) && s.contains(Phase::C) && !s.contains(Phase::B));
        assert!(PhaseSet::parse("").is_none());
        assert!(PhaseSet::parse("AD").is_none());
    }

    #[test]
    fn per_unit_definition_cases() {
        // P = 100 kW on a 1 MVA base -> 0.1 p.u.; 7.2 kV nominal on a
        // 7.2 kV base -> 1.0 p.u.
        let mut net = two_bus();
        net.units = Units::Physical;
        for b in &mut net.buses {
            b.nominal_voltage = 7200.0;
        }
        net.loads.push(Load {
            bus: "b1".into(),
            phase: Phase::A,
            p: 100_000.0,
            q: 0.0,
        });
        let bases = Bases {
            s_base: 1e6,
            v_bases: vec![VoltageBase { level: 7200.0, base: 7200.0 }],
        };
        let pu = to_per_unit(&net, &bases).unwrap();
        assert!((pu.loads[0].p - 0.1).abs() < 1e-15);
        assert!((pu.buses[0].nominal_voltage - 1.0).abs() < 1e-15);
        // Branch admittance scales by z_base = 7200^2 / 1e6.
        let z_base = 7200.0_f64 * 7200.0 / 1e6;
        let y = pu.branches[0].series.get(Phase::A, Phase::A);
        assert!((y.re - 1.0 * z_base).abs() < 1e-12);
    }

    #[test]
    fn per_unit_round_trip_is_identity() {
        let mut net = two_bus();
        net.units = Units::Physical;
        for b in &mut net.buses {
            b.nominal_voltage = 7200.0;
        }
        net.loads.push(Load {
            bus: "b1".into(),
            phase: Phase::A,
            p: 250_000.0,
            q: 50_000.0,
        });
        net.capacitors.push(Capacitor {
            bus: "b1".into(),
            phase: Phase::A,
            susceptance: 1e-4,
        });
        let bases = Bases {
            s_base: 1e6,
            v_bases: vec![VoltageBase { level: 7200.0, base: 7200.0 }],
        };
        let pu = to_per_unit(&net, &bases).unwrap();
        let back = from_per_unit(&pu, &bases).unwrap();
        let rel = |a: f64, b: f64| (a - b).abs() / b.abs().max(1.0);
        assert!(rel(back.loads[0].p, net.loads[0].p) < 1e-12);
        assert!(rel(back.loads[0].q, net.loads[0].q) < 1e-12);
        assert!(rel(back.capacitors[0].susceptance, net.capacitors[0].susceptance) < 1e-12);
        assert!(rel(back.buses[1].nominal_voltage, 7200.0) < 1e-12);
        let ya = back.branches[0].series.get(Phase::A, Phase::A);
        assert!(rel(ya.re, 1.0) < 1e-12 && rel(ya.im, -2.0) < 1e-12);
    }

    #[test]
    fn missing_voltage_base_is_an_error() {
        let mut net = two_bus();
        net.units = Units::Physical;
        net.buses[0].nominal_voltage = 480.0;
        net.buses[1].nominal_voltage = 480.0;
        let bases = Bases {
            s_base: 1e6,
            v_bases: vec![VoltageBase { level: 7200.0, base: 7200.0 }],
        };
        assert!(matches!(
            to_per_unit(&net, &bases),
            Err(PerUnitError::MissingBase { .. })
        ));
    }

    #[test]
    fn reactive_only_current_slack_rejected() {
        let mode = FormulationMode {
            formulation: Formulation::Current,
            reactive_only: true,
        };
        assert_eq!(
            SlackVariables::zeros(mode, vec![0]).unwrap_err(),
            SlackModelError::ReactiveOnlyCurrent
        );
    }

    #[test]
    fn bounds_must_be_ordered() {
        assert!(VoltageBounds::uniform(0.9, 1.1).is_ok());
        assert!(VoltageBounds::uniform(1.1, 0.9).is_err());
        assert!(VoltageBounds::uniform(0.0, 1.1).is_err());
    }

    #[test]
    fn bounds_overrides_take_precedence() {
        let b = VoltageBounds::uniform(0.9, 1.1)
            .unwrap()
            .with_override("feeder_head", Phase::A, 0.95, 1.05)
            .unwrap();
        assert_eq!(b.for_node("feeder_head", Phase::A), (0.95, 1.05));
        assert_eq!(b.for_node("feeder_head", Phase::B), (0.9, 1.1));
        assert_eq!(b.for_node("elsewhere", Phase::A), (0.9, 1.1));
        assert!(VoltageBounds::uniform(0.9, 1.1)
            .unwrap()
            .with_override("x", Phase::A, 1.2, 1.0)
            .is_err());
    }
}
