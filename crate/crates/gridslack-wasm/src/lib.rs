//! Browser bindings for the feeder analyzer: generate a feeder, run the
//! slack-source optimization at a chosen load factor, and sweep the factor
//! to trace the infeasibility onset. All results cross the boundary as JSON
//! strings so the page stays framework-free.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use gridslack::casegen::{self, GenSpec, Phasing};
use gridslack::model::{FormulationMode, Network, Units, VoltageBounds};
use gridslack::netlist;
use gridslack::pdip::{self, HomotopyMode, PdipOptions};
use gridslack::tpia::{self, TpiaOptions, TpiaStatus};

fn err(msg: impl std::fmt::Display) -> String {
    msg.to_string()
}

fn load(feeder_text: &str) -> Result<Network, String> {
    let net = netlist::parse_feeder(feeder_text).map_err(err)?;
    let net = if net.units == Units::Physical {
        let bases = net
            .bases
            .clone()
            .ok_or_else(|| err("physical-unit feeder lacks a bases record"))?;
        gridslack::model::to_per_unit(&net, &bases).map_err(err)?
    } else {
        net
    };
    gridslack::model::validate(&net).map_err(err)?;
    Ok(net)
}

/// Feeder text for a built-in desk case or a seeded random radial feeder.
#[wasm_bindgen]
pub fn generate_feeder(
    name: &str,
    buses: usize,
    seed: u64,
    load_density: f64,
    mixed_phasing: bool,
) -> Result<String, JsValue> {
    generate_feeder_impl(name, buses, seed, load_density, mixed_phasing)
        .map_err(|e| JsValue::from_str(&e))
}

fn generate_feeder_impl(
    name: &str,
    buses: usize,
    seed: u64,
    load_density: f64,
    mixed_phasing: bool,
) -> Result<String, String> {
    let net = if name == "random" {
        casegen::generate(&GenSpec {
            buses,
            seed,
            load_density,
            phasing: if mixed_phasing {
                Phasing::Mixed
            } else {
                Phasing::ThreePhase
            },
            ..GenSpec::default()
        })
        .map_err(err)?
    } else {
        casegen::named_case(name).ok_or_else(|| err(format!("unknown case \"{}\"", name)))?
    };
    Ok(netlist::serialize_feeder(&net))
}

#[derive(Serialize)]
struct VoltagePoint {
    bus: String,
    phase: char,
    vmag: f64,
    vang_deg: f64,
}

#[derive(Serialize)]
struct InjectionPoint {
    bus: String,
    phase: char,
    p: f64,
    q: f64,
    smag: f64,
}

#[derive(Serialize)]
struct AnalyzeResponse {
    status: String,
    iterations: usize,
    homotopy_used: bool,
    total_abs_p: f64,
    total_abs_q: f64,
    v_min: f64,
    v_max: f64,
    kkt_residual: f64,
    voltages: Vec<VoltagePoint>,
    injections: Vec<InjectionPoint>,
}

/// Runs the infeasibility analysis at a load factor and returns the voltage
/// profile plus per-node-phase slack injections, JSON-encoded.
#[wasm_bindgen]
pub fn analyze(
    feeder_text: &str,
    formulation: &str,
    load_factor: f64,
    vmin: f64,
    vmax: f64,
    use_bounds: bool,
) -> Result<String, JsValue> {
    analyze_impl(feeder_text, formulation, load_factor, vmin, vmax, use_bounds)
        .map_err(|e| JsValue::from_str(&e))
}

fn analyze_impl(
    feeder_text: &str,
    formulation: &str,
    load_factor: f64,
    vmin: f64,
    vmax: f64,
    use_bounds: bool,
) -> Result<String, String> {
    let mode = FormulationMode::parse(formulation)
        .ok_or_else(|| err(format!("unknown formulation \"{}\"", formulation)))?;
    let net = load(feeder_text)?;
    let net = casegen::scale_loads(&net, load_factor).map_err(err)?;
    let bounds = if use_bounds {
        Some(VoltageBounds::uniform(vmin, vmax).map_err(err)?)
    } else {
        None
    };
    let opts = TpiaOptions {
        bounds,
        ..TpiaOptions::new(mode)
    };
    let problem = tpia::build_problem(&net, &opts).map_err(err)?;
    let report = pdip::solve(&problem, &PdipOptions::default(), HomotopyMode::Auto, &mut |_| {})
        .map_err(err)?;
    let response = AnalyzeResponse {
        status: match report.status {
            TpiaStatus::FeasibleNetwork => "feasible".into(),
            TpiaStatus::InfeasibleNetwork => "infeasible".into(),
        },
        iterations: report.iterations,
        homotopy_used: report.homotopy_used,
        total_abs_p: report.total_abs_p,
        total_abs_q: report.total_abs_q,
        v_min: report.v_min,
        v_max: report.v_max,
        kkt_residual: report.kkt_residual,
        voltages: report
            .voltages
            .iter()
            .map(|v| VoltagePoint {
                bus: v.bus.clone(),
                phase: v.phase.letter(),
                vmag: v.vmag,
                vang_deg: v.vang_deg,
            })
            .collect(),
        injections: report
            .injections
            .iter()
            .map(|r| InjectionPoint {
                bus: r.bus.clone(),
                phase: r.phase.letter(),
                p: r.p_inj,
                q: r.q_inj,
                smag: r.p_inj.hypot(r.q_inj),
            })
            .collect(),
    };
    serde_json::to_string(&response).map_err(err)
}

#[derive(Serialize)]
struct SweepPoint {
    factor: f64,
    status: String,
    total_abs_p: f64,
    total_abs_q: f64,
    total_smag: f64,
    iterations: usize,
    homotopy_used: bool,
}

/// Sweeps the load factor and reports slack totals per step, JSON-encoded.
/// The zero-to-nonzero transition marks the feasibility boundary.
#[wasm_bindgen]
#[allow(clippy::too_many_arguments)]
pub fn sweep(
    feeder_text: &str,
    formulation: &str,
    from: f64,
    to: f64,
    steps: usize,
    vmin: f64,
    vmax: f64,
    use_bounds: bool,
) -> Result<String, JsValue> {
    sweep_impl(feeder_text, formulation, from, to, steps, vmin, vmax, use_bounds)
        .map_err(|e| JsValue::from_str(&e))
}

#[allow(clippy::too_many_arguments)]
fn sweep_impl(
    feeder_text: &str,
    formulation: &str,
    from: f64,
    to: f64,
    steps: usize,
    vmin: f64,
    vmax: f64,
    use_bounds: bool,
) -> Result<String, String> {
    let mode = FormulationMode::parse(formulation)
        .ok_or_else(|| err(format!("unknown formulation \"{}\"", formulation)))?;
    if !(steps >= 2 && from > 0.0 && to > from) {
        return Err(err("sweep needs 0 < from < to and at least 2 steps"));
    }
    let net = load(feeder_text)?;
    let bounds = if use_bounds {
        Some(VoltageBounds::uniform(vmin, vmax).map_err(err)?)
    } else {
        None
    };
    let opts = TpiaOptions {
        bounds,
        ..TpiaOptions::new(mode)
    };
    let mut rows = Vec::with_capacity(steps);
    for k in 0..steps {
        let factor = from + (to - from) * k as f64 / (steps - 1) as f64;
        let scaled = casegen::scale_loads(&net, factor).map_err(err)?;
        let row = match tpia::build_problem(&scaled, &opts)
            .map_err(err)
            .and_then(|p| {
                pdip::solve(&p, &PdipOptions::default(), HomotopyMode::Auto, &mut |_| {})
                    .map_err(err)
            }) {
            Ok(r) => SweepPoint {
                factor,
                status: match r.status {
                    TpiaStatus::FeasibleNetwork => "feasible".into(),
                    TpiaStatus::InfeasibleNetwork => "infeasible".into(),
                },
                total_abs_p: r.total_abs_p,
                total_abs_q: r.total_abs_q,
                total_smag: r.total_abs_p + r.total_abs_q,
                iterations: r.iterations,
                homotopy_used: r.homotopy_used,
            },
            Err(_) => SweepPoint {
                factor,
                status: "failed".into(),
                total_abs_p: f64::NAN,
                total_abs_q: f64::NAN,
                total_smag: f64::NAN,
                iterations: 0,
                homotopy_used: false,
            },
        };
        rows.push(row);
    }
    serde_json::to_string(&rows).map_err(err)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generate_and_analyze_round_trip() {
        let text = generate_feeder_impl("case2_overload", 0, 0, 0.0, false).unwrap();
        let json = analyze_impl(&text, "pq", 1.0, 0.9, 1.1, true).unwrap();
        assert!(json.contains("\"status\":\"infeasible\""));
        let json = analyze_impl(&text, "pq", 0.5, 0.9, 1.1, true).unwrap();
        assert!(json.contains("\"status\":\"feasible\""));
    }

    #[test]
    fn sweep_crosses_the_feasibility_boundary() {
        let text = generate_feeder_impl("case2_overload", 0, 0, 0.0, false).unwrap();
        let json = sweep_impl(&text, "q", 0.5, 1.0, 3, 0.9, 1.1, true).unwrap();
        let rows: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert_eq!(rows.as_array().unwrap().len(), 3);
        assert_eq!(rows[0]["status"], "feasible");
        assert_eq!(rows[2]["status"], "infeasible");
    }

    #[test]
    fn bad_inputs_surface_as_errors() {
        assert!(generate_feeder_impl("nope", 0, 0, 0.0, false).is_err());
        assert!(analyze_impl("feeder v1\nbus id=x\n", "pq", 1.0, 0.9, 1.1, true).is_err());
        let text = generate_feeder_impl("case3_unbalanced", 0, 0, 0.0, false).unwrap();
        assert!(analyze_impl(&text, "zz", 1.0, 0.9, 1.1, true).is_err());
    }
}
