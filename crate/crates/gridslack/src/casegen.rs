//! Synthetic feeder generation and load stressing: seeded random radial
//! feeders plus a few named desk cases with analytically known behavior.

use num_complex::Complex64;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::model::{
    Bases, Branch, Bus, BusKind, Capacitor, Load, Network, Phase, PhaseMatrix, PhaseSet,
    SourceSpec, Transformer, TransformerConnection, VoltageBase,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phasing {
    /// Every bus carries all three phases.
    ThreePhase,
    /// Laterals drop to two- and single-phase spurs.
    Mixed,
}

#[derive(Clone, Debug)]
pub struct GenSpec {
    /// Total bus count including the swing source.
    pub buses: usize,
    pub phasing: Phasing,
    /// Series impedance magnitude range per section, p.u.
    pub impedance: (f64, f64),
    /// Reactance-to-resistance ratio of every section.
    pub x_over_r: f64,
    /// Mutual coupling as a fraction of the self impedance.
    pub coupling: f64,
    /// Probability that a non-swing node-phase carries a load.
    pub load_density: f64,
    /// Real power range per load, p.u.
    pub load_p: (f64, f64),
    /// Lagging power factor range.
    pub power_factor: (f64, f64),
    pub seed: u64,
}

impl Default for GenSpec {
    fn default() -> Self {
        GenSpec {
            buses: 10,
            phasing: Phasing::Mixed,
            impedance: (0.01, 0.04),
            x_over_r: 3.0,
            coupling: 0.3,
            load_density: 0.6,
            load_p: (0.005, 0.03),
            power_factor: (0.85, 0.98),
            seed: 0,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum GenError {
    #[error("need at least 2 buses, got {0}")]
    TooFewBuses(usize),
    #[error("empty range for {0}")]
    EmptyRange(&'static str),
    #[error("load scale factor must be positive, got {0}")]
    NonPositiveFactor(f64),
}

fn series_block(rng: &mut ChaCha8Rng, spec: &GenSpec, phases: PhaseSet) -> PhaseMatrix {
    let (lo, hi) = spec.impedance;
    let theta = spec.x_over_r.atan();
    let k = phases.len();
    let mut z = PhaseMatrix::zero(phases);
    let phase_list: Vec<Phase> = phases.iter().collect();
    let mag_base = rng.gen_range(lo..hi);
    for (i, &p) in phase_list.iter().enumerate() {
        let mag = mag_base * rng.gen_range(0.95..1.05);
        z.set(p, p, Complex64::from_polar(mag, theta));
        for &q in &phase_list[i + 1..] {
            let m = Complex64::from_polar(mag_base * spec.coupling, theta);
            z.set(p, q, m);
            z.set(q, p, m);
        }
    }
    invert_block(&z, k)
}

fn invert_block(z: &PhaseMatrix, k: usize) -> PhaseMatrix {
    let mut a = z.entries.clone();
    let mut inv = vec![Complex64::new(0.0, 0.0); k * k];
    for i in 0..k {
        inv[i * k + i] = Complex64::new(1.0, 0.0);
    }
    for col in 0..k {
        let mut piv = col;
        for r in col + 1..k {
            if a[r * k + col].norm() > a[piv * k + col].norm() {
                piv = r;
            }
        }
        for j in 0..k {
            a.swap(col * k + j, piv * k + j);
            inv.swap(col * k + j, piv * k + j);
        }
        let d = a[col * k + col];
        for j in 0..k {
            a[col * k + j] /= d;
            inv[col * k + j] /= d;
        }
        for r in 0..k {
            if r != col {
                let f = a[r * k + col];
                for j in 0..k {
                    let t = a[col * k + j];
                    let w = inv[col * k + j];
                    a[r * k + j] -= f * t;
                    inv[r * k + j] -= f * w;
                }
            }
        }
    }
    PhaseMatrix {
        phases: z.phases,
        entries: inv,
    }
}

fn default_bases() -> Bases {
    Bases {
        s_base: 1e6,
        v_bases: vec![VoltageBase {
            level: 7200.0,
            base: 7200.0,
        }],
    }
}

/// Seeded radial feeder; identical specs generate identical networks.
pub fn generate(spec: &GenSpec) -> Result<Network, GenError> {
    if spec.buses < 2 {
        return Err(GenError::TooFewBuses(spec.buses));
    }
    for (name, (lo, hi)) in [
        ("impedance", spec.impedance),
        ("load_p", spec.load_p),
        ("power_factor", spec.power_factor),
    ] {
        if !(lo < hi) {
            return Err(GenError::EmptyRange(name));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut net = Network::empty_per_unit();
    net.bases = Some(default_bases());

    net.buses.push(Bus {
        id: "src".into(),
        phases: PhaseSet::ABC,
        nominal_voltage: 1.0,
        kind: BusKind::Swing,
    });
    net.sources.push(SourceSpec {
        bus: "src".into(),
        magnitude: 1.0,
        angle_deg: 0.0,
    });

    for k in 1..spec.buses {
        let parent = rng.gen_range(0..k);
        let parent_phases = net.buses[parent].phases;
        let phases = match spec.phasing {
            Phasing::ThreePhase => parent_phases,
            Phasing::Mixed => {
                if parent_phases.len() == 1 || rng.gen_bool(0.6) {
                    parent_phases
                } else {
                    // Drop to a random nonempty subset of the parent.
                    let available: Vec<Phase> = parent_phases.iter().collect();
                    let keep = rng.gen_range(1..available.len());
                    let mut set = PhaseSet::EMPTY;
                    let mut remaining = available.clone();
                    for _ in 0..keep {
                        let idx = rng.gen_range(0..remaining.len());
                        set = set.with(remaining.remove(idx));
                    }
                    set
                }
            }
        };
        let id = format!("b{}", k);
        net.buses.push(Bus {
            id: id.clone(),
            phases,
            nominal_voltage: 1.0,
            kind: BusKind::Pq,
        });
        let parent_id = net.buses[parent].id.clone();
        net.branches.push(Branch {
            from: parent_id,
            to: id,
            phases,
            series: series_block(&mut rng, spec, phases),
            shunt_from: None,
            shunt_to: None,
        });
    }

    for k in 1..spec.buses {
        let phases = net.buses[k].phases;
        let id = net.buses[k].id.clone();
        for p in phases.iter() {
            if rng.gen_bool(spec.load_density) {
                let pw = rng.gen_range(spec.load_p.0..spec.load_p.1);
                let pf = rng.gen_range(spec.power_factor.0..spec.power_factor.1);
                let q = pw * (pf.acos()).tan();
                net.loads.push(Load {
                    bus: id.clone(),
                    phase: p,
                    p: pw,
                    q,
                });
            }
        }
    }

    debug_assert!(crate::model::validate(&net).is_ok());
    Ok(net)
}

/// Every load's (P, Q) multiplied by `factor`; everything else untouched.
pub fn scale_loads(net: &Network, factor: f64) -> Result<Network, GenError> {
    if !(factor > 0.0) {
        return Err(GenError::NonPositiveFactor(factor));
    }
    let mut out = net.clone();
    for ld in &mut out.loads {
        ld.p *= factor;
        ld.q *= factor;
    }
    Ok(out)
}

pub const NAMED_CASES: [&str; 4] = [
    "case2_overload",
    "case3_unbalanced",
    "case13_radial",
    "case13_radial_stressed",
];

/// Load factor applied to `case13_radial` to produce the stressed variant:
/// pushes several phases below 0.95 p.u. while staying reactive-compensable.
pub const CASE13_STRESS_FACTOR: f64 = 4.0;

/// Built-in desk cases with documented analytic properties. The feeder
/// files shipped under cases/ are byte-identical serializations of these.
pub fn named_case(name: &str) -> Option<Network> {
    match name {
        // Single-phase two-bus feeder through X = 0.1 p.u.; loadability is
        // P_max = 5, the stored P = 6 makes plain power flow diverge.
        "case2_overload" => {
            let mut net = Network::empty_per_unit();
            net.bases = Some(default_bases());
            net.buses.push(Bus {
                id: "src".into(),
                phases: PhaseSet::single(Phase::A),
                nominal_voltage: 1.0,
                kind: BusKind::Swing,
            });
            net.buses.push(Bus {
                id: "load".into(),
                phases: PhaseSet::single(Phase::A),
                nominal_voltage: 1.0,
                kind: BusKind::Pq,
            });
            net.sources.push(SourceSpec {
                bus: "src".into(),
                magnitude: 1.0,
                angle_deg: 0.0,
            });
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
                p: 6.0,
                q: 0.0,
            });
            Some(net)
        }
        // Three-bus chain with strongly unbalanced loading and one fixed
        // capacitor; solvable from a flat start.
        "case3_unbalanced" => {
            let mut net = Network::empty_per_unit();
            net.bases = Some(default_bases());
            for (id, kind) in [("src", BusKind::Swing), ("mid", BusKind::Pq), ("end", BusKind::Pq)]
            {
                net.buses.push(Bus {
                    id: id.into(),
                    phases: PhaseSet::ABC,
                    nominal_voltage: 1.0,
                    kind,
                });
            }
            net.sources.push(SourceSpec {
                bus: "src".into(),
                magnitude: 1.0,
                angle_deg: 0.0,
            });
            for (from, to) in [("src", "mid"), ("mid", "end")] {
                net.branches.push(Branch {
                    from: from.into(),
                    to: to.into(),
                    phases: PhaseSet::ABC,
                    series: coupled_line(0.02, 3.0, 0.3),
                    shunt_from: None,
                    shunt_to: None,
                });
            }
            for (bus, phase, p, q) in [
                ("mid", Phase::A, 0.20, 0.08),
                ("mid", Phase::B, 0.05, 0.02),
                ("end", Phase::A, 0.15, 0.06),
                ("end", Phase::C, 0.10, 0.04),
            ] {
                net.loads.push(Load {
                    bus: bus.into(),
                    phase,
                    p,
                    q,
                });
            }
            net.capacitors.push(Capacitor {
                bus: "end".into(),
                phase: Phase::A,
                susceptance: 0.05,
            });
            Some(net)
        }
        "case13_radial" => Some(case13(1.0)),
        "case13_radial_stressed" => Some(case13(CASE13_STRESS_FACTOR)),
        _ => None,
    }
}

fn coupled_line(z_mag: f64, x_over_r: f64, coupling: f64) -> PhaseMatrix {
    let theta = x_over_r.atan();
    let mut z = PhaseMatrix::zero(PhaseSet::ABC);
    for p in PhaseSet::ABC.iter() {
        z.set(p, p, Complex64::from_polar(z_mag, theta));
        for q in PhaseSet::ABC.iter() {
            if p != q {
                z.set(p, q, Complex64::from_polar(z_mag * coupling, theta));
            }
        }
    }
    invert_block(&z, 3)
}

fn line(phases: PhaseSet, z_mag: f64) -> PhaseMatrix {
    let theta = 3.0f64.atan();
    let k = phases.len();
    let mut z = PhaseMatrix::zero(phases);
    let list: Vec<Phase> = phases.iter().collect();
    for (i, &p) in list.iter().enumerate() {
        z.set(p, p, Complex64::from_polar(z_mag, theta));
        for &q in &list[i + 1..] {
            let m = Complex64::from_polar(z_mag * 0.3, theta);
            z.set(p, q, m);
            z.set(q, p, m);
        }
    }
    invert_block(&z, k)
}

/// 13-bus radial feeder with mixed phasing, one in-line transformer and
/// lagging loads. At factor 1.0 the base case solves with healthy voltages;
/// the stress factor drags several phases below 0.95 p.u.
fn case13(load_factor: f64) -> Network {
    let mut net = Network::empty_per_unit();
    net.bases = Some(default_bases());
    let abc = PhaseSet::ABC;
    let buses: [(&str, PhaseSet, BusKind); 13] = [
        ("src", abc, BusKind::Swing),
        ("b1", abc, BusKind::Pq),
        ("b2", abc, BusKind::Pq),
        ("b3", abc, BusKind::Pq),
        ("b4", abc, BusKind::Pq),
        ("b5", PhaseSet::parse("AC").unwrap(), BusKind::Pq),
        ("b6", PhaseSet::single(Phase::A), BusKind::Pq),
        ("b7", PhaseSet::single(Phase::B), BusKind::Pq),
        ("b8", abc, BusKind::Pq),
        ("b9", abc, BusKind::Pq),
        ("b10", PhaseSet::single(Phase::C), BusKind::Pq),
        ("b11", abc, BusKind::Pq),
        ("b12", PhaseSet::parse("AB").unwrap(), BusKind::Pq),
    ];
    for (id, phases, kind) in buses {
        net.buses.push(Bus {
            id: id.into(),
            phases,
            nominal_voltage: 1.0,
            kind,
        });
    }
    net.sources.push(SourceSpec {
        bus: "src".into(),
        magnitude: 1.0,
        angle_deg: 0.0,
    });

    let lines: [(&str, &str, &str, f64); 11] = [
        ("src", "b1", "ABC", 0.010),
        ("b1", "b2", "ABC", 0.012),
        ("b2", "b3", "ABC", 0.012),
        ("b3", "b4", "ABC", 0.014),
        ("b2", "b5", "AC", 0.016),
        ("b5", "b6", "A", 0.020),
        ("b3", "b7", "B", 0.018),
        ("b8", "b9", "ABC", 0.012),
        ("b9", "b10", "C", 0.020),
        ("b4", "b11", "ABC", 0.014),
        ("b11", "b12", "AB", 0.016),
    ];
    for (from, to, phases, z) in lines {
        let phases = PhaseSet::parse(phases).unwrap();
        net.branches.push(Branch {
            from: from.into(),
            to: to.into(),
            phases,
            series: line(phases, z),
            shunt_from: None,
            shunt_to: None,
        });
    }
    net.transformers.push(Transformer {
        from: "b4".into(),
        to: "b8".into(),
        connection: TransformerConnection::WyeGWyeG,
        turns_ratio: 1.0,
        series_impedance: Complex64::new(0.01, 0.05),
    });

    let loads: [(&str, Phase, f64, f64); 12] = [
        ("b1", Phase::A, 0.140, 0.056),
        ("b2", Phase::B, 0.126, 0.049),
        ("b3", Phase::C, 0.140, 0.056),
        ("b4", Phase::A, 0.105, 0.042),
        ("b5", Phase::A, 0.154, 0.070),
        ("b5", Phase::C, 0.126, 0.056),
        ("b6", Phase::A, 0.175, 0.084),
        ("b7", Phase::B, 0.196, 0.084),
        ("b8", Phase::B, 0.105, 0.042),
        ("b9", Phase::A, 0.140, 0.063),
        ("b10", Phase::C, 0.210, 0.098),
        ("b12", Phase::B, 0.154, 0.070),
    ];
    for (bus, phase, p, q) in loads {
        net.loads.push(Load {
            bus: bus.into(),
            phase,
            p: p * load_factor,
            q: q * load_factor,
        });
    }
    net
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netlist::serialize_feeder;
    use crate::powerflow::{solve_powerflow, NewtonOptions, PfError};

    #[test]
    fn same_seed_gives_byte_identical_serializations() {
        let spec = GenSpec {
            buses: 2,
            seed: 7,
            ..GenSpec::default()
        };
        let a = serialize_feeder(&generate(&spec).unwrap());
        let b = serialize_feeder(&generate(&spec).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn generated_feeders_validate() {
        for seed in 0..5 {
            let spec = GenSpec {
                buses: 50,
                seed,
                ..GenSpec::default()
            };
            let net = generate(&spec).unwrap();
            assert!(crate::model::validate(&net).is_ok());
            assert_eq!(net.buses.len(), 50);
        }
    }

    #[test]
    fn zero_load_density_converges_flat() {
        let spec = GenSpec {
            buses: 12,
            load_density: 0.0,
            seed: 3,
            ..GenSpec::default()
        };
        let net = generate(&spec).unwrap();
        let sol = solve_powerflow(&net, &NewtonOptions::default()).unwrap();
        assert_eq!(sol.iterations, 1);
        for n in 0..sol.state.len() {
            assert!((sol.state.magnitude(n) - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn scale_loads_identity_and_doubling() {
        let net = named_case("case3_unbalanced").unwrap();
        let same = scale_loads(&net, 1.0).unwrap();
        assert_eq!(net, same);
        let double = scale_loads(&net, 2.0).unwrap();
        for (a, b) in net.loads.iter().zip(&double.loads) {
            assert_eq!(b.p, 2.0 * a.p);
            assert_eq!(b.q, 2.0 * a.q);
        }
        assert!(scale_loads(&net, 0.0).is_err());
        assert!(scale_loads(&net, -1.0).is_err());
    }

    #[test]
    fn scale_composition_exact_for_dyadic_factors() {
        let net = named_case("case13_radial").unwrap();
        let a = scale_loads(&scale_loads(&net, 2.0).unwrap(), 0.5).unwrap();
        let b = scale_loads(&net, 1.0).unwrap();
        assert_eq!(a, b);
        let c = scale_loads(&scale_loads(&net, 4.0).unwrap(), 2.0).unwrap();
        let d = scale_loads(&net, 8.0).unwrap();
        assert_eq!(c, d);
    }

    #[test]
    fn two_bus_scaling_brackets_the_loadability_boundary() {
        // Base P = 4 through X = 0.1: the boundary is P_max = 5, factor 1.25.
        let base = scale_loads(&named_case("case2_overload").unwrap(), 4.0 / 6.0).unwrap();
        assert!((base.loads[0].p - 4.0).abs() < 1e-12);
        let solves = |factor: f64| {
            let net = scale_loads(&base, factor).unwrap();
            solve_powerflow(&net, &NewtonOptions::default()).is_ok()
        };
        assert!(solves(1.2));
        assert!(!solves(1.5));
        // Bisection localizes the crossing factor to 1.25 within 1e-3.
        let (mut lo, mut hi) = (1.2, 1.5);
        while hi - lo > 1e-4 {
            let mid = 0.5 * (lo + hi);
            if solves(mid) {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let f_star = 0.5 * (lo + hi);
        assert!(
            (f_star - 1.25).abs() <= 1e-3,
            "crossing factor {} vs analytic 1.25",
            f_star
        );
    }

    #[test]
    fn named_cases_have_documented_behavior() {
        for name in NAMED_CASES {
            let net = named_case(name).unwrap();
            assert!(crate::model::validate(&net).is_ok(), "{} invalid", name);
        }
        assert!(named_case("nonsense").is_none());

        // case2_overload is beyond loadability.
        let c2 = named_case("case2_overload").unwrap();
        assert!(matches!(
            solve_powerflow(&c2, &NewtonOptions::default()),
            Err(PfError::NonConvergence { .. })
        ));

        // case3_unbalanced and case13_radial solve with healthy voltages.
        for name in ["case3_unbalanced", "case13_radial"] {
            let net = named_case(name).unwrap();
            let sol = solve_powerflow(&net, &NewtonOptions::default()).unwrap();
            for n in 0..sol.state.len() {
                assert!(sol.state.magnitude(n) > 0.95, "{} sagging at node {}", name, n);
            }
        }

        // The stressed 13-bus case still solves but dips below 0.95.
        let stressed = named_case("case13_radial_stressed").unwrap();
        let sol = solve_powerflow(&stressed, &NewtonOptions::default()).unwrap();
        let vmin = (0..sol.state.len())
            .map(|n| sol.state.magnitude(n))
            .fold(f64::INFINITY, f64::min);
        assert!(vmin < 0.95, "stressed case vmin = {}", vmin);
        assert!(vmin > 0.80, "stressed case collapsed entirely: {}", vmin);
    }
}
