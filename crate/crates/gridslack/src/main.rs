use std::path::{Path, PathBuf};
use std::process::exit;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use gridslack::casegen::{self, GenSpec, Phasing};
use gridslack::model::{self, FormulationMode, Network, Units, VoltageBounds};
use gridslack::netlist::{self, OutputFormat, ResultDocument, ResultRow};
use gridslack::pdip::{self, HomotopyMode, PdipOptions, TraceRow};
use gridslack::powerflow::{self, HomotopySchedule, NewtonOptions, PfError};
use gridslack::stamping::StampedNetwork;
use gridslack::tpia::{self, TpiaOptions, TpiaStatus};

const EXIT_OK: i32 = 0;
const EXIT_INPUT: i32 = 1;
const EXIT_NONCONVERGENCE: i32 = 2;
const EXIT_INFEASIBLE: i32 = 3;
const EXIT_SOLVER: i32 = 4;
const EXIT_USAGE: i32 = 64;

#[derive(Parser)]
#[command(
    name = "gridslack",
    version,
    about = "Three-phase feeder power flow and slack-source infeasibility analysis"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve three-phase power flow for a feeder
    Powerflow(PowerflowArgs),
    /// Find minimal slack-source injections making the feeder solvable
    Tpia(TpiaArgs),
    /// Load-factor sweep reporting slack totals per formulation
    Sweep(SweepArgs),
    /// Emit feeder files: built-in desk cases or seeded random feeders
    Gen(GenArgs),
    /// Parse a feeder file and check network invariants
    Validate(ValidateArgs),
}

#[derive(Args)]
struct PowerflowArgs {
    /// Feeder file path or built-in case name
    input: String,
    /// auto | on | off
    #[arg(long, default_value = "auto")]
    homotopy: String,
    /// table | csv
    #[arg(long, default_value = "table")]
    out: String,
}

#[derive(Args)]
struct TpiaArgs {
    /// Feeder file path or built-in case name
    input: String,
    /// Slack formulation: i | pq | q | gb | b
    #[arg(short = 'f', long, default_value = "pq")]
    formulation: String,
    /// Restrict injections to reactive power (pq -> q, gb -> b)
    #[arg(long)]
    reactive_only: bool,
    /// Lower voltage-magnitude bound, p.u.
    #[arg(long)]
    vmin: Option<f64>,
    /// Upper voltage-magnitude bound, p.u.
    #[arg(long)]
    vmax: Option<f64>,
    /// Drop the voltage-magnitude inequalities entirely
    #[arg(long)]
    no_bounds: bool,
    /// Objective scaling
    #[arg(long)]
    alpha: Option<f64>,
    /// auto | on | off
    #[arg(long, default_value = "auto")]
    homotopy: String,
    /// table | csv
    #[arg(long, default_value = "table")]
    out: String,
    /// Emit one solver line per iteration on stderr
    #[arg(long)]
    trace: bool,
    /// After a reactive-only run, write the feeder with the solved
    /// compensation installed (capacitors for -f b, negative loads for -f q)
    #[arg(long)]
    write_compensated: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    /// Feeder file path or built-in case name
    input: String,
    /// Comma-separated formulations, e.g. i,pq,gb
    #[arg(short = 'f', long, default_value = "i,pq,gb")]
    formulations: String,
    /// Load factors: start:stop:step or a comma list
    #[arg(long)]
    factors: String,
    #[arg(long)]
    vmin: Option<f64>,
    #[arg(long)]
    vmax: Option<f64>,
    #[arg(long)]
    no_bounds: bool,
    #[arg(long)]
    alpha: Option<f64>,
    /// auto | on | off
    #[arg(long, default_value = "auto")]
    homotopy: String,
}

#[derive(Args)]
struct GenArgs {
    /// Built-in case name, or "random" for a seeded radial feeder
    #[arg(default_value = "random")]
    name: String,
    /// Write to a file instead of stdout
    #[arg(short, long)]
    output: Option<PathBuf>,
    /// Bus count for random feeders
    #[arg(long, default_value_t = 10)]
    buses: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Probability of a load per node-phase for random feeders
    #[arg(long, default_value_t = 0.6)]
    load_density: f64,
    /// three | mixed phasing for random feeders
    #[arg(long, default_value = "mixed")]
    phasing: String,
    /// Multiply every load by this factor before writing
    #[arg(long)]
    scale: Option<f64>,
    /// List built-in case names and exit
    #[arg(long)]
    list: bool,
}

#[derive(Args)]
struct ValidateArgs {
    input: String,
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
            let _ = e.print();
            exit(code);
        }
    };
    let code = match cli.command {
        Command::Powerflow(args) => cmd_powerflow(args),
        Command::Tpia(args) => cmd_tpia(args),
        Command::Sweep(args) => cmd_sweep(args),
        Command::Gen(args) => cmd_gen(args),
        Command::Validate(args) => cmd_validate(args),
    };
    exit(code);
}

fn usage_error(msg: &str) -> i32 {
    eprintln!("error: {}", msg);
    EXIT_USAGE
}

fn input_error(msg: impl std::fmt::Display) -> i32 {
    eprintln!("error: {}", msg);
    EXIT_INPUT
}

fn parse_homotopy(s: &str) -> Result<HomotopyMode, i32> {
    match s {
        "auto" => Ok(HomotopyMode::Auto),
        "on" => Ok(HomotopyMode::On),
        "off" => Ok(HomotopyMode::Off),
        other => Err(usage_error(&format!(
            "unknown homotopy mode \"{}\" (auto|on|off)",
            other
        ))),
    }
}

fn parse_out(s: &str) -> Result<OutputFormat, i32> {
    match s {
        "table" => Ok(OutputFormat::Table),
        "csv" => Ok(OutputFormat::Csv),
        other => Err(usage_error(&format!(
            "unknown output format \"{}\" (table|csv)",
            other
        ))),
    }
}

/// Resolves an input name: an existing file path, a built-in case name, or
/// cases/<name>.fdr relative to the working directory.
fn load_network(input: &str) -> Result<Network, i32> {
    let text = if Path::new(input).is_file() {
        std::fs::read_to_string(input).map_err(|e| input_error(format!("{}: {}", input, e)))?
    } else if let Some(net) = casegen::named_case(input) {
        return finish_network(net);
    } else {
        let fallback = Path::new("cases").join(format!("{}.fdr", input));
        if fallback.is_file() {
            std::fs::read_to_string(&fallback)
                .map_err(|e| input_error(format!("{}: {}", fallback.display(), e)))?
        } else {
            return Err(input_error(format!(
                "no such file or built-in case: {} (see `gridslack gen --list`)",
                input
            )));
        }
    };
    let net = netlist::parse_feeder(&text).map_err(input_error)?;
    finish_network(net)
}

fn finish_network(net: Network) -> Result<Network, i32> {
    let net = if net.units == Units::Physical {
        let bases = net
            .bases
            .clone()
            .ok_or_else(|| input_error("physical-unit feeder lacks a bases record"))?;
        model::to_per_unit(&net, &bases).map_err(input_error)?
    } else {
        net
    };
    model::validate(&net).map_err(input_error)?;
    Ok(net)
}

fn powerflow_document(
    stamped: &StampedNetwork,
    net: &Network,
    state: &model::PhasorState,
) -> ResultDocument {
    let rows = stamped
        .map
        .iter()
        .map(|(n, (bi, phase))| ResultRow {
            bus: net.buses[bi].id.clone(),
            phase,
            vmag: state.magnitude(n),
            vang_deg: state.angle_deg(n),
            slack_kind: "none".into(),
            s1: 0.0,
            s2: 0.0,
            p_inj: 0.0,
            q_inj: 0.0,
        })
        .collect();
    ResultDocument { rows }
}

fn cmd_powerflow(args: PowerflowArgs) -> i32 {
    let homotopy = match parse_homotopy(&args.homotopy) {
        Ok(h) => h,
        Err(code) => return code,
    };
    let format = match parse_out(&args.out) {
        Ok(f) => f,
        Err(code) => return code,
    };
    let net = match load_network(&args.input) {
        Ok(n) => n,
        Err(code) => return code,
    };
    let opts = NewtonOptions::default();
    let solved = match homotopy {
        HomotopyMode::Off => powerflow::solve_powerflow(&net, &opts),
        HomotopyMode::On => powerflow::homotopy_solve(&net, &HomotopySchedule::default(), &opts)
            .map_err(|e| e.source),
        HomotopyMode::Auto => powerflow::solve_powerflow(&net, &opts).or_else(|_| {
            powerflow::homotopy_solve(&net, &HomotopySchedule::default(), &opts)
                .map_err(|e| e.source)
        }),
    };
    match solved {
        Ok(sol) => {
            let stamped = StampedNetwork::new(&net).expect("validated");
            print!(
                "{}",
                netlist::write_results(&powerflow_document(&stamped, &net, &sol.state), format)
            );
            eprintln!("converged in {} iterations", sol.iterations);
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {}", e);
            if matches!(e, PfError::NonConvergence { .. }) {
                eprintln!(
                    "hint: the feeder may be infeasible; run `gridslack tpia {}` to quantify and localize the deficiency",
                    args.input
                );
            }
            EXIT_NONCONVERGENCE
        }
    }
}

struct TpiaSetup {
    mode: FormulationMode,
    opts: TpiaOptions,
    homotopy: HomotopyMode,
}

#[allow(clippy::too_many_arguments)]
fn tpia_setup(
    net: &Network,
    formulation: &str,
    reactive_only: bool,
    vmin: Option<f64>,
    vmax: Option<f64>,
    no_bounds: bool,
    alpha: Option<f64>,
    homotopy: &str,
) -> Result<TpiaSetup, i32> {
    let mut mode = match FormulationMode::parse(formulation) {
        Some(m) => m,
        None => {
            return Err(usage_error(&format!(
                "unknown formulation \"{}\" (i|pq|q|gb|b)",
                formulation
            )))
        }
    };
    if reactive_only {
        if mode.formulation == model::Formulation::Current {
            return Err(usage_error(
                "--reactive-only cannot be combined with the current formulation (-f i); \
                 zeroing real current would need extra nonlinear constraints",
            ));
        }
        mode.reactive_only = true;
    }
    let homotopy = parse_homotopy(homotopy)?;
    let defaults = &net.defaults;
    let bounds = if no_bounds {
        None
    } else {
        let lo = vmin.or(defaults.vmin).unwrap_or(0.9);
        let hi = vmax.or(defaults.vmax).unwrap_or(1.1);
        Some(VoltageBounds::uniform(lo, hi).map_err(|e| usage_error(&e.to_string()))?)
    };
    let alpha = alpha.or(defaults.alpha).unwrap_or(1.0);
    let enabled = if defaults.slack_enable.is_empty() {
        None
    } else {
        Some(defaults.slack_enable.clone())
    };
    Ok(TpiaSetup {
        mode,
        opts: TpiaOptions {
            mode,
            alpha,
            bounds,
            ratings: Default::default(),
            enabled,
        },
        homotopy,
    })
}

fn cmd_tpia(args: TpiaArgs) -> i32 {
    let format = match parse_out(&args.out) {
        Ok(f) => f,
        Err(code) => return code,
    };
    let net = match load_network(&args.input) {
        Ok(n) => n,
        Err(code) => return code,
    };
    let setup = match tpia_setup(
        &net,
        &args.formulation,
        args.reactive_only,
        args.vmin,
        args.vmax,
        args.no_bounds,
        args.alpha,
        &args.homotopy,
    ) {
        Ok(s) => s,
        Err(code) => return code,
    };
    if args.write_compensated.is_some() && !setup.mode.reactive_only {
        return usage_error("--write-compensated requires a reactive-only formulation (-f q or -f b)");
    }
    let problem = match tpia::build_problem(&net, &setup.opts) {
        Ok(p) => p,
        Err(e) => return input_error(e),
    };
    let mut trace: Box<dyn FnMut(TraceRow)> = if args.trace {
        Box::new(|row: TraceRow| {
            eprintln!(
                "iter={} eps={:.3e} kkt={:.3e} eta={:.3e}",
                row.iteration, row.eps, row.kkt_norm, row.eta
            );
        })
    } else {
        Box::new(|_| {})
    };
    match pdip::solve(&problem, &PdipOptions::default(), setup.homotopy, &mut trace) {
        Ok(report) => {
            if let Some(path) = &args.write_compensated {
                match tpia::apply_compensation(&net, &report, 1e-8) {
                    Ok(compensated) => {
                        let text = netlist::serialize_feeder(&compensated);
                        if let Err(e) = std::fs::write(path, text) {
                            return input_error(format!("{}: {}", path.display(), e));
                        }
                        eprintln!("wrote compensated feeder to {}", path.display());
                    }
                    Err(e) => {
                        eprintln!("error: {}", e);
                        return EXIT_SOLVER;
                    }
                }
            }
            print!("{}", netlist::write_results(&report.to_document(), format));
            eprintln!(
                "formulation TPIA-{}: {} | total |P_f| = {:.6e} p.u., total |Q_f| = {:.6e} p.u. | {} iterations | homotopy {}",
                setup.mode,
                match report.status {
                    TpiaStatus::FeasibleNetwork => "network feasible (zero slack)",
                    TpiaStatus::InfeasibleNetwork => "network infeasible (nonzero slack)",
                },
                report.total_abs_p,
                report.total_abs_q,
                report.iterations,
                if report.homotopy_used { "engaged" } else { "not needed" },
            );
            match report.status {
                TpiaStatus::FeasibleNetwork => EXIT_OK,
                TpiaStatus::InfeasibleNetwork => EXIT_INFEASIBLE,
            }
        }
        Err(e) => {
            eprintln!("error: {}", e);
            EXIT_SOLVER
        }
    }
}

fn parse_factors(spec: &str) -> Result<Vec<f64>, i32> {
    let parse_one = |s: &str| -> Result<f64, i32> {
        s.trim()
            .parse::<f64>()
            .map_err(|_| usage_error(&format!("bad factor \"{}\"", s)))
    };
    if spec.contains(':') {
        let parts: Vec<&str> = spec.split(':').collect();
        if parts.len() != 3 {
            return Err(usage_error("factor range must be start:stop:step"));
        }
        let (start, stop, step) = (
            parse_one(parts[0])?,
            parse_one(parts[1])?,
            parse_one(parts[2])?,
        );
        if step <= 0.0 || stop < start {
            return Err(usage_error(
                "factor range must have positive step and stop >= start",
            ));
        }
        let mut out = Vec::new();
        let mut k = 0usize;
        loop {
            let f = start + step * k as f64;
            if f > stop + 1e-12 {
                break;
            }
            out.push(f);
            k += 1;
        }
        Ok(out)
    } else {
        spec.split(',').map(parse_one).collect()
    }
}

fn cmd_sweep(args: SweepArgs) -> i32 {
    let net = match load_network(&args.input) {
        Ok(n) => n,
        Err(code) => return code,
    };
    let factors = match parse_factors(&args.factors) {
        Ok(f) => f,
        Err(code) => return code,
    };
    let mut setups = Vec::new();
    for f in args.formulations.split(',') {
        match tpia_setup(
            &net,
            f.trim(),
            false,
            args.vmin,
            args.vmax,
            args.no_bounds,
            args.alpha,
            &args.homotopy,
        ) {
            Ok(s) => setups.push(s),
            Err(code) => return code,
        }
    }

    // One task per (formulation, factor); each result lands in its own slot
    // so output order never depends on scheduling.
    let tasks: Vec<(usize, f64)> = setups
        .iter()
        .enumerate()
        .flat_map(|(i, _)| factors.iter().map(move |&f| (i, f)))
        .collect();
    let threads: usize = std::env::var("GRIDSLACK_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&t| t >= 1)
        .unwrap_or(1);

    let run_task = |&(setup_idx, factor): &(usize, f64)| -> String {
        let setup = &setups[setup_idx];
        let scaled = match casegen::scale_loads(&net, factor) {
            Ok(n) => n,
            Err(e) => {
                return format!(
                    "{},{},error:{},,,,\n",
                    setup.mode,
                    factor,
                    e.to_string().replace(',', ";")
                )
            }
        };
        let problem = match tpia::build_problem(&scaled, &setup.opts) {
            Ok(p) => p,
            Err(e) => {
                return format!(
                    "{},{},error:{},,,,\n",
                    setup.mode,
                    factor,
                    e.to_string().replace(',', ";")
                )
            }
        };
        match pdip::solve(&problem, &PdipOptions::default(), setup.homotopy, &mut |_| {}) {
            Ok(r) => format!(
                "{},{},{},{:.9e},{:.9e},{},{}\n",
                setup.mode,
                factor,
                match r.status {
                    TpiaStatus::FeasibleNetwork => "feasible",
                    TpiaStatus::InfeasibleNetwork => "infeasible",
                },
                r.total_abs_p,
                r.total_abs_q,
                r.iterations,
                if r.homotopy_used { "yes" } else { "no" }
            ),
            Err(_) => format!("{},{},failed,,,,\n", setup.mode, factor),
        }
    };

    let mut rows: Vec<Option<String>> = vec![None; tasks.len()];
    if threads <= 1 {
        for (i, t) in tasks.iter().enumerate() {
            rows[i] = Some(run_task(t));
        }
    } else {
        let next = std::sync::atomic::AtomicUsize::new(0);
        let slots: Vec<std::sync::Mutex<Option<String>>> =
            (0..tasks.len()).map(|_| std::sync::Mutex::new(None)).collect();
        std::thread::scope(|scope| {
            for _ in 0..threads.min(tasks.len()) {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                    if i >= tasks.len() {
                        break;
                    }
                    let row = run_task(&tasks[i]);
                    *slots[i].lock().unwrap() = Some(row);
                });
            }
        });
        for (i, slot) in slots.into_iter().enumerate() {
            rows[i] = slot.into_inner().unwrap();
        }
    }

    println!("formulation,factor,status,total_abs_p,total_abs_q,iterations,homotopy");
    for row in rows.into_iter().flatten() {
        print!("{}", row);
    }
    EXIT_OK
}

fn cmd_gen(args: GenArgs) -> i32 {
    if args.list {
        for name in casegen::NAMED_CASES {
            println!("{}", name);
        }
        return EXIT_OK;
    }
    let net = if args.name == "random" {
        let phasing = match args.phasing.as_str() {
            "three" => Phasing::ThreePhase,
            "mixed" => Phasing::Mixed,
            other => return usage_error(&format!("unknown phasing \"{}\" (three|mixed)", other)),
        };
        match casegen::generate(&GenSpec {
            buses: args.buses,
            seed: args.seed,
            load_density: args.load_density,
            phasing,
            ..GenSpec::default()
        }) {
            Ok(n) => n,
            Err(e) => return usage_error(&e.to_string()),
        }
    } else {
        match casegen::named_case(&args.name) {
            Some(n) => n,
            None => {
                return usage_error(&format!(
                    "unknown case \"{}\"; use --list to see the built-ins or \"random\"",
                    args.name
                ))
            }
        }
    };
    let net = match args.scale {
        Some(f) => match casegen::scale_loads(&net, f) {
            Ok(n) => n,
            Err(e) => return usage_error(&e.to_string()),
        },
        None => net,
    };
    let text = netlist::serialize_feeder(&net);
    match &args.output {
        Some(path) => {
            if let Err(e) = std::fs::write(path, text) {
                return input_error(format!("{}: {}", path.display(), e));
            }
            eprintln!("wrote {}", path.display());
        }
        None => print!("{}", text),
    }
    EXIT_OK
}

fn cmd_validate(args: ValidateArgs) -> i32 {
    match load_network(&args.input) {
        Ok(net) => {
            println!(
                "ok: {} buses, {} branches, {} transformers, {} loads, {} capacitors",
                net.buses.len(),
                net.branches.len(),
                net.transformers.len(),
                net.loads.len(),
                net.capacitors.len()
            );
            EXIT_OK
        }
        Err(code) => code,
    }
}
