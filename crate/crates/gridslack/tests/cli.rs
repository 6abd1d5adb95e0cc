//! Exit-code contract and output determinism of the command-line interface.

use std::process::{Command, Output};

fn gridslack(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gridslack"))
        .args(args)
        .env_remove("GRIDSLACK_THREADS")
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn powerflow_feasible_case_exits_zero() {
    let out = gridslack(&["powerflow", "case3_unbalanced"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert!(stdout(&out).contains("Vmag_pu"));
}

#[test]
fn powerflow_overload_exits_two_with_hint() {
    let out = gridslack(&["powerflow", "case2_overload"]);
    assert_eq!(out.status.code(), Some(2));
    let err = stderr(&out);
    assert!(err.contains("did not converge"));
    assert!(err.contains("gridslack tpia"), "hint missing: {}", err);
}

#[test]
fn missing_input_exits_one() {
    let out = gridslack(&["powerflow", "missing.fdr"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn tpia_feasible_feeder_exits_zero_with_zero_totals() {
    for mode in ["i", "pq", "q", "gb", "b"] {
        let out = gridslack(&["tpia", "case3_unbalanced", "-f", mode, "--out", "csv"]);
        assert_eq!(out.status.code(), Some(0), "mode {}: {}", mode, stderr(&out));
        let text = stdout(&out);
        let total = text.lines().find(|l| l.starts_with("TOTAL,")).unwrap();
        let cols: Vec<&str> = total.split(',').collect();
        let p: f64 = cols[7].parse().unwrap();
        let q: f64 = cols[8].parse().unwrap();
        assert!(p + q <= 1e-6, "mode {}: totals {} {}", mode, p, q);
    }
}

#[test]
fn tpia_overload_reactive_exits_three_with_zero_p_column() {
    let out = gridslack(&["tpia", "case2_overload", "-f", "q", "--out", "csv"]);
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));
    for line in stdout(&out).lines().skip(1) {
        if line.starts_with("TOTAL,") {
            let p: f64 = line.split(',').nth(7).unwrap().parse().unwrap();
            assert_eq!(p, 0.0);
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        let p: f64 = cols[7].parse().unwrap();
        assert_eq!(p, 0.0, "row {}", line);
    }
}

#[test]
fn reactive_only_with_current_formulation_is_usage_error() {
    let out = gridslack(&["tpia", "case2_overload", "-f", "i", "--reactive-only"]);
    assert_eq!(out.status.code(), Some(64));
}

#[test]
fn unknown_flags_are_usage_errors() {
    let out = gridslack(&["tpia", "case2_overload", "--frobnicate"]);
    assert_eq!(out.status.code(), Some(64));
    let out = gridslack(&["tpia", "case2_overload", "-f", "zz"]);
    assert_eq!(out.status.code(), Some(64));
}

#[test]
fn validate_reports_summary() {
    let out = gridslack(&["validate", "case13_radial"]);
    assert_eq!(out.status.code(), Some(0));
    assert!(stdout(&out).contains("13 buses"));
}

#[test]
fn validate_rejects_broken_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("broken.fdr");
    std::fs::write(&path, "feeder v1\nbus id=a phases=A nominal=1.0 kind=pq\n").unwrap();
    // Lone PQ bus: island without a swing source.
    let out = gridslack(&["validate", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("no swing bus"));
}

#[test]
fn gen_output_round_trips_through_powerflow() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("random.fdr");
    let out = gridslack(&[
        "gen",
        "random",
        "--buses",
        "12",
        "--seed",
        "42",
        "-o",
        path.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let out = gridslack(&["powerflow", path.to_str().unwrap(), "--out", "csv"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
}

#[test]
fn shipped_case_files_match_builtin_generators() {
    let root = concat!(env!("CARGO_MANIFEST_DIR"), "/../..");
    for name in gridslack::casegen::NAMED_CASES {
        let shipped = std::fs::read_to_string(format!("{}/cases/{}.fdr", root, name))
            .unwrap_or_else(|_| panic!("cases/{}.fdr missing", name));
        let generated =
            gridslack::netlist::serialize_feeder(&gridslack::casegen::named_case(name).unwrap());
        assert_eq!(shipped, generated, "cases/{}.fdr is out of date", name);
    }
}

#[test]
fn sweep_output_is_ordered_and_thread_count_invariant() {
    let args = [
        "sweep",
        "case2_overload",
        "-f",
        "i,pq,gb",
        "--factors",
        "0.5,0.7,0.9",
    ];
    let seq = Command::new(env!("CARGO_BIN_EXE_gridslack"))
        .args(args)
        .env("GRIDSLACK_THREADS", "1")
        .output()
        .unwrap();
    let par = Command::new(env!("CARGO_BIN_EXE_gridslack"))
        .args(args)
        .env("GRIDSLACK_THREADS", "4")
        .output()
        .unwrap();
    assert_eq!(seq.status.code(), Some(0));
    assert_eq!(seq.stdout, par.stdout, "threaded sweep reordered rows");
    let text = stdout(&seq);
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "formulation,factor,status,total_abs_p,total_abs_q,iterations,homotopy"
    );
    let order: Vec<String> = lines
        .map(|l| l.split(',').take(2).collect::<Vec<_>>().join(","))
        .collect();
    assert_eq!(
        order,
        [
            "I,0.5", "I,0.7", "I,0.9", "PQ,0.5", "PQ,0.7", "PQ,0.9", "GB,0.5", "GB,0.7", "GB,0.9"
        ]
    );
}

#[test]
fn physical_unit_feeders_are_normalized_on_load() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("physical.fdr");
    // 7.2 kV / 1 MVA system: y = -j10 p.u. is -j10/51.84 S, 100 kW is 0.1 p.u.
    std::fs::write(
        &path,
        "feeder v1\n\
         bases sbase=1e6 units=physical\n\
         vbase level=7200 base=7200\n\
         bus id=src phases=A nominal=7200 kind=swing\n\
         bus id=b1 phases=A nominal=7200 kind=pq\n\
         source bus=src vm=1.0 va_deg=0\n\
         branch from=src to=b1 phases=A y=0-0.192901234567901j\n\
         load bus=b1 phase=A p=100e3 q=0\n",
    )
    .unwrap();
    let out = gridslack(&["powerflow", path.to_str().unwrap(), "--out", "csv"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    // |V2| from the two-bus closed form at P = 0.1, X = 0.1.
    let text = stdout(&out);
    let row = text.lines().find(|l| l.starts_with("b1,")).unwrap();
    let vmag: f64 = row.split(',').nth(2).unwrap().parse().unwrap();
    let w: f64 = 0.5 * (1.0 + (1.0f64 - 4.0 * 0.1f64.powi(2) * 0.1f64.powi(2)).sqrt());
    assert!((vmag - w.sqrt()).abs() < 1e-5, "vmag {} vs {}", vmag, w.sqrt());
}

#[test]
fn compensation_round_trip_through_the_cli() {
    let dir = tempfile::tempdir().unwrap();
    let comp = dir.path().join("compensated.fdr");
    // Susceptance-only analysis under utility bounds, compensation written out.
    let out = gridslack(&[
        "tpia",
        "case13_radial_stressed",
        "-f",
        "b",
        "--vmin",
        "0.95",
        "--vmax",
        "1.05",
        "--write-compensated",
        comp.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));
    // Re-running on the compensated feeder needs no injections at all.
    let out = gridslack(&["tpia", comp.to_str().unwrap(), "-f", "b", "--no-bounds"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    // The flag is reactive-only by construction.
    let out = gridslack(&[
        "tpia",
        "case2_overload",
        "-f",
        "pq",
        "--write-compensated",
        comp.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(64));
}

#[test]
fn sweep_totals_are_monotone_in_load_factor() {
    let out = gridslack(&[
        "sweep",
        "case2_overload",
        "-f",
        "pq",
        "--factors",
        "0.4:1.0:0.2",
    ]);
    assert_eq!(out.status.code(), Some(0));
    let text = stdout(&out);
    let mut last = -1.0f64;
    for line in text.lines().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        let total: f64 = cols[3].parse::<f64>().unwrap() + cols[4].parse::<f64>().unwrap();
        assert!(
            total >= last - 1e-9,
            "slack total decreased along the sweep: {}",
            text
        );
        last = total;
    }
}
