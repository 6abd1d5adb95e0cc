//! Feeder file parsing and result serialization.
//!
//! The feeder format is line-oriented: one record per line, a record kind
//! followed by key=value fields, `#` comments. Complex numbers are written
//! `re+imj`; admittance matrices are comma-separated row-major tuples over
//! the record's phase set. See docs/feeder-format.md for the grammar.

use std::collections::BTreeSet;
use std::fmt;

use num_complex::Complex64;
use thiserror::Error;

use crate::model::{
    Bases, Branch, Bus, BusKind, Capacitor, Load, Network, Phase, PhaseMatrix, PhaseSet,
    SourceSpec, TpiaFileDefaults, Transformer, TransformerConnection, Units, VoltageBase,
};

#[derive(Clone, Debug, Error, PartialEq, Eq)]
#[error("line {line}, col {col}: {message}")]
pub struct ParseError {
    pub line: usize,
    pub col: usize,
    pub message: String,
}

fn err<T>(line: usize, col: usize, message: impl Into<String>) -> Result<T, ParseError> {
    Err(ParseError {
        line,
        col,
        message: message.into(),
    })
}

/// One `key=value` field with its position for error reporting.
struct Field<'a> {
    key: &'a str,
    value: &'a str,
    line: usize,
    col: usize,
}

struct Record<'a> {
    kind: &'a str,
    fields: Vec<Field<'a>>,
    line: usize,
}

impl<'a> Record<'a> {
    fn take(&mut self, key: &str) -> Option<Field<'a>> {
        self.fields
            .iter()
            .position(|f| f.key == key)
            .map(|i| self.fields.remove(i))
    }

    fn require(&mut self, key: &str) -> Result<Field<'a>, ParseError> {
        self.take(key)
            .ok_or_else(|| ParseError {
                line: self.line,
                col: 1,
                message: format!("record `{}` is missing required field `{}`", self.kind, key),
            })
    }

    fn finish(self) -> Result<(), ParseError> {
        if let Some(f) = self.fields.first() {
            return err(f.line, f.col, format!("unknown field `{}` in `{}` record", f.key, self.kind));
        }
        Ok(())
    }
}

impl<'a> Field<'a> {
    fn f64(&self) -> Result<f64, ParseError> {
        self.value
            .parse::<f64>()
            .map_err(|_| ParseError {
                line: self.line,
                col: self.col,
                message: format!("field `{}`: expected a number, got \"{}\"", self.key, self.value),
            })
            .and_then(|v| {
                if v.is_finite() {
                    Ok(v)
                } else {
                    err(self.line, self.col, format!("field `{}` is not finite", self.key))
                }
            })
    }

    fn complex(&self) -> Result<Complex64, ParseError> {
        parse_complex(self.value).ok_or_else(|| ParseError {
            line: self.line,
            col: self.col,
            message: format!(
                "field `{}`: expected complex `re+imj`, got \"{}\"",
                self.key, self.value
            ),
        })
    }

    fn phases(&self) -> Result<PhaseSet, ParseError> {
        PhaseSet::parse(self.value).ok_or_else(|| ParseError {
            line: self.line,
            col: self.col,
            message: format!(
                "field `{}`: expected a phase set like ABC, got \"{}\"",
                self.key, self.value
            ),
        })
    }

    fn phase(&self) -> Result<Phase, ParseError> {
        let mut chars = self.value.chars();
        match (chars.next().and_then(Phase::from_letter), chars.next()) {
            (Some(p), None) => Ok(p),
            _ => err(
                self.line,
                self.col,
                format!("field `{}`: expected one phase A|B|C, got \"{}\"", self.key, self.value),
            ),
        }
    }
}

/// Parses `re+imj` (e.g. `1.5-2.3j`, `0+0j`, `-1e-3+2e-4j`).
fn parse_complex(s: &str) -> Option<Complex64> {
    let body = s.strip_suffix('j')?;
    // Split at the last +/- that is not part of an exponent and not leading.
    let bytes = body.as_bytes();
    let mut split = None;
    for i in (1..bytes.len()).rev() {
        let c = bytes[i];
        if (c == b'+' || c == b'-') && !matches!(bytes[i - 1], b'e' | b'E') {
            split = Some(i);
            break;
        }
    }
    let i = split?;
    let re: f64 = body[..i].parse().ok()?;
    let im: f64 = body[i..].parse().ok()?;
    if re.is_finite() && im.is_finite() {
        Some(Complex64::new(re, im))
    } else {
        None
    }
}

fn format_complex(v: Complex64) -> String {
    format!("{}{}{}j", fv(v.re), if v.im < 0.0 || v.im.is_sign_negative() { "" } else { "+" }, fv(v.im))
}

/// 17 significant digits, enough to round-trip any f64.
fn fv(v: f64) -> String {
    format!("{:.16e}", v)
}

fn parse_matrix(field: &Field<'_>, phases: PhaseSet) -> Result<PhaseMatrix, ParseError> {
    let k = phases.len();
    let parts: Vec<&str> = field.value.split(',').collect();
    if parts.len() != k * k {
        return err(
            field.line,
            field.col,
            format!(
                "field `{}`: expected {} entries for phases {}, got {}",
                field.key,
                k * k,
                phases,
                parts.len()
            ),
        );
    }
    let mut entries = Vec::with_capacity(k * k);
    for p in parts {
        match parse_complex(p) {
            Some(c) => entries.push(c),
            None => {
                return err(
                    field.line,
                    field.col,
                    format!("field `{}`: bad complex entry \"{}\"", field.key, p),
                )
            }
        }
    }
    Ok(PhaseMatrix { phases, entries })
}

fn format_matrix(m: &PhaseMatrix) -> String {
    m.entries
        .iter()
        .map(|&c| format_complex(c))
        .collect::<Vec<_>>()
        .join(",")
}

/// Parses a feeder document into a network. Syntax and reference-shape
/// problems surface here; network invariants are checked by
/// [`crate::model::validate`].
pub fn parse_feeder(text: &str) -> Result<Network, ParseError> {
    let mut net = Network::empty_per_unit();
    let mut seen_header = false;
    let mut seen_ids: BTreeSet<String> = BTreeSet::new();
    let mut s_base: Option<f64> = None;
    let mut units = Units::PerUnit;
    let mut v_bases: Vec<VoltageBase> = Vec::new();

    for (lineno, raw) in text.lines().enumerate() {
        let line = lineno + 1;
        let content = match raw.find('#') {
            Some(i) => &raw[..i],
            None => raw,
        };
        if content.trim().is_empty() {
            continue;
        }

        // Tokenize with column positions.
        let mut tokens: Vec<(usize, &str)> = Vec::new();
        let mut start = None;
        for (i, ch) in content.char_indices() {
            if ch.is_whitespace() {
                if let Some(s) = start.take() {
                    tokens.push((s + 1, &content[s..i]));
                }
            } else if start.is_none() {
                start = Some(i);
            }
        }
        if let Some(s) = start {
            tokens.push((s + 1, &content[s..]));
        }

        let (kind_col, kind) = tokens[0];
        if !seen_header {
            if kind != "feeder" {
                return err(line, kind_col, "file must start with `feeder v1`");
            }
            if tokens.len() != 2 || tokens[1].1 != "v1" {
                return err(line, kind_col, "unrecognized feeder version (expected `feeder v1`)");
            }
            seen_header = true;
            continue;
        }

        let mut fields = Vec::new();
        for &(col, tok) in &tokens[1..] {
            match tok.split_once('=') {
                Some((key, value)) if !key.is_empty() => fields.push(Field {
                    key,
                    value,
                    line,
                    col,
                }),
                _ => return err(line, col, format!("expected key=value, got \"{}\"", tok)),
            }
        }
        let mut rec = Record { kind, fields, line };

        match kind {
            "bases" => {
                s_base = Some(rec.require("sbase")?.f64()?);
                if let Some(u) = rec.take("units") {
                    units = match u.value {
                        "perunit" => Units::PerUnit,
                        "physical" => Units::Physical,
                        other => {
                            return err(u.line, u.col, format!("unknown units \"{}\"", other))
                        }
                    };
                }
                rec.finish()?;
            }
            "vbase" => {
                let level = rec.require("level")?.f64()?;
                let base = rec.require("base")?.f64()?;
                v_bases.push(VoltageBase { level, base });
                rec.finish()?;
            }
            "bus" => {
                let id_field = rec.require("id")?;
                let id = id_field.value.to_string();
                if !seen_ids.insert(id.clone()) {
                    return err(id_field.line, id_field.col, format!("duplicate bus id \"{}\"", id));
                }
                let phases = rec.require("phases")?.phases()?;
                let nominal = rec.require("nominal")?.f64()?;
                let kind_field = rec.require("kind")?;
                let kind = match kind_field.value {
                    "pq" => BusKind::Pq,
                    "swing" => BusKind::Swing,
                    other => {
                        return err(
                            kind_field.line,
                            kind_field.col,
                            format!("unknown bus kind \"{}\" (pq|swing)", other),
                        )
                    }
                };
                rec.finish()?;
                net.buses.push(Bus {
                    id,
                    phases,
                    nominal_voltage: nominal,
                    kind,
                });
            }
            "source" => {
                let bus = rec.require("bus")?.value.to_string();
                let magnitude = rec.require("vm")?.f64()?;
                let angle_deg = rec.require("va_deg")?.f64()?;
                rec.finish()?;
                net.sources.push(SourceSpec {
                    bus,
                    magnitude,
                    angle_deg,
                });
            }
            "branch" => {
                let from = rec.require("from")?.value.to_string();
                let to = rec.require("to")?.value.to_string();
                let phases = rec.require("phases")?.phases()?;
                let yf = rec.require("y")?;
                let series = parse_matrix(&yf, phases)?;
                let shunt_from = match rec.take("yshunt_from") {
                    Some(f) => Some(parse_matrix(&f, phases)?),
                    None => None,
                };
                let shunt_to = match rec.take("yshunt_to") {
                    Some(f) => Some(parse_matrix(&f, phases)?),
                    None => None,
                };
                rec.finish()?;
                net.branches.push(Branch {
                    from,
                    to,
                    phases,
                    series,
                    shunt_from,
                    shunt_to,
                });
            }
            "transformer" => {
                let from = rec.require("from")?.value.to_string();
                let to = rec.require("to")?.value.to_string();
                let cf = rec.require("connection")?;
                let connection = TransformerConnection::parse(cf.value).ok_or(ParseError {
                    line: cf.line,
                    col: cf.col,
                    message: format!(
                        "unknown connection \"{}\" (wyeg_wyeg|delta_wyeg)",
                        cf.value
                    ),
                })?;
                let turns_ratio = rec.require("ratio")?.f64()?;
                let series_impedance = rec.require("z")?.complex()?;
                rec.finish()?;
                net.transformers.push(Transformer {
                    from,
                    to,
                    connection,
                    turns_ratio,
                    series_impedance,
                });
            }
            "load" => {
                let bus = rec.require("bus")?.value.to_string();
                let phase = rec.require("phase")?.phase()?;
                let p = rec.require("p")?.f64()?;
                let q = rec.require("q")?.f64()?;
                rec.finish()?;
                net.loads.push(Load { bus, phase, p, q });
            }
            "capacitor" => {
                let bus = rec.require("bus")?.value.to_string();
                let phase = rec.require("phase")?.phase()?;
                let susceptance = rec.require("b")?.f64()?;
                rec.finish()?;
                net.capacitors.push(Capacitor {
                    bus,
                    phase,
                    susceptance,
                });
            }
            "tpia_defaults" => {
                let mut d = TpiaFileDefaults::default();
                if let Some(f) = rec.take("vmin") {
                    d.vmin = Some(f.f64()?);
                }
                if let Some(f) = rec.take("vmax") {
                    d.vmax = Some(f.f64()?);
                }
                if let Some(f) = rec.take("alpha") {
                    d.alpha = Some(f.f64()?);
                }
                rec.finish()?;
                d.slack_enable = std::mem::take(&mut net.defaults.slack_enable);
                net.defaults = d;
            }
            "slack_enable" => {
                let bus = rec.require("bus")?.value.to_string();
                let phases = rec.require("phases")?.phases()?;
                rec.finish()?;
                net.defaults.slack_enable.push((bus, phases));
            }
            other => {
                return err(line, kind_col, format!("unknown record kind `{}`", other));
            }
        }
    }

    if !seen_header {
        return err(1, 1, "empty document (expected `feeder v1`)");
    }
    net.units = units;
    net.bases = s_base.map(|s| Bases {
        s_base: s,
        v_bases,
    });
    Ok(net)
}

/// Serializes a network in canonical record order with 17-digit floats;
/// `parse_feeder(serialize_feeder(net))` reproduces the network exactly.
pub fn serialize_feeder(net: &Network) -> String {
    let mut out = String::from("feeder v1\n");
    if let Some(b) = &net.bases {
        let units = match net.units {
            Units::PerUnit => "perunit",
            Units::Physical => "physical",
        };
        out.push_str(&format!("bases sbase={} units={}\n", fv(b.s_base), units));
        for vb in &b.v_bases {
            out.push_str(&format!("vbase level={} base={}\n", fv(vb.level), fv(vb.base)));
        }
    }
    for bus in &net.buses {
        out.push_str(&format!(
            "bus id={} phases={} nominal={} kind={}\n",
            bus.id,
            bus.phases,
            fv(bus.nominal_voltage),
            match bus.kind {
                BusKind::Pq => "pq",
                BusKind::Swing => "swing",
            }
        ));
    }
    for s in &net.sources {
        out.push_str(&format!(
            "source bus={} vm={} va_deg={}\n",
            s.bus,
            fv(s.magnitude),
            fv(s.angle_deg)
        ));
    }
    for br in &net.branches {
        out.push_str(&format!(
            "branch from={} to={} phases={} y={}",
            br.from,
            br.to,
            br.phases,
            format_matrix(&br.series)
        ));
        if let Some(sh) = &br.shunt_from {
            out.push_str(&format!(" yshunt_from={}", format_matrix(sh)));
        }
        if let Some(sh) = &br.shunt_to {
            out.push_str(&format!(" yshunt_to={}", format_matrix(sh)));
        }
        out.push('\n');
    }
    for tx in &net.transformers {
        out.push_str(&format!(
            "transformer from={} to={} connection={} ratio={} z={}\n",
            tx.from,
            tx.to,
            tx.connection.as_str(),
            fv(tx.turns_ratio),
            format_complex(tx.series_impedance)
        ));
    }
    for ld in &net.loads {
        out.push_str(&format!(
            "load bus={} phase={} p={} q={}\n",
            ld.bus,
            ld.phase,
            fv(ld.p),
            fv(ld.q)
        ));
    }
    for c in &net.capacitors {
        out.push_str(&format!(
            "capacitor bus={} phase={} b={}\n",
            c.bus,
            c.phase,
            fv(c.susceptance)
        ));
    }
    let d = &net.defaults;
    if d.vmin.is_some() || d.vmax.is_some() || d.alpha.is_some() {
        out.push_str("tpia_defaults");
        if let Some(v) = d.vmin {
            out.push_str(&format!(" vmin={}", fv(v)));
        }
        if let Some(v) = d.vmax {
            out.push_str(&format!(" vmax={}", fv(v)));
        }
        if let Some(v) = d.alpha {
            out.push_str(&format!(" alpha={}", fv(v)));
        }
        out.push('\n');
    }
    for (bus, phases) in &d.slack_enable {
        out.push_str(&format!("slack_enable bus={} phases={}\n", bus, phases));
    }
    out
}

// ---------------------------------------------------------------------------
// Result documents
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OutputFormat {
    Table,
    Csv,
}

/// One output row per (bus, phase): solved voltage plus any slack injection.
#[derive(Clone, Debug)]
pub struct ResultRow {
    pub bus: String,
    pub phase: Phase,
    pub vmag: f64,
    pub vang_deg: f64,
    /// "none" for plain power flow, otherwise the formulation mode name.
    pub slack_kind: String,
    pub s1: f64,
    pub s2: f64,
    pub p_inj: f64,
    pub q_inj: f64,
}

#[derive(Clone, Debug, Default)]
pub struct ResultDocument {
    pub rows: Vec<ResultRow>,
}

impl ResultDocument {
    /// Simple sums of absolute injections: (sum |P_f|, sum |Q_f|).
    pub fn totals(&self) -> (f64, f64) {
        self.rows.iter().fold((0.0, 0.0), |(p, q), r| {
            (p + r.p_inj.abs(), q + r.q_inj.abs())
        })
    }

    fn sorted_rows(&self) -> Vec<&ResultRow> {
        let mut rows: Vec<&ResultRow> = self.rows.iter().collect();
        rows.sort_by(|a, b| a.bus.cmp(&b.bus).then(a.phase.cmp(&b.phase)));
        rows
    }
}

fn csv_num(v: f64) -> String {
    format!("{:.9e}", v)
}

/// Renders a result document; CSV output is byte-stable for identical
/// reports (rows ordered by bus id, then phase).
pub fn write_results(doc: &ResultDocument, format: OutputFormat) -> String {
    let rows = doc.sorted_rows();
    let (tp, tq) = doc.totals();
    match format {
        OutputFormat::Csv => {
            let mut out =
                String::from("bus,phase,Vmag_pu,Vang_deg,slack_kind,s1,s2,P_inj_pu,Q_inj_pu\n");
            for r in rows {
                out.push_str(&format!(
                    "{},{},{},{},{},{},{},{},{}\n",
                    r.bus,
                    r.phase,
                    csv_num(r.vmag),
                    csv_num(r.vang_deg),
                    r.slack_kind,
                    csv_num(r.s1),
                    csv_num(r.s2),
                    csv_num(r.p_inj),
                    csv_num(r.q_inj)
                ));
            }
            out.push_str(&format!("TOTAL,,,,,,,{},{}\n", csv_num(tp), csv_num(tq)));
            out
        }
        OutputFormat::Table => {
            let mut out = format!(
                "{:<12} {:>5} {:>10} {:>10} {:>6} {:>12} {:>12} {:>12} {:>12}\n",
                "bus", "phase", "Vmag_pu", "Vang_deg", "slack", "s1", "s2", "P_inj_pu", "Q_inj_pu"
            );
            for r in rows {
                out.push_str(&format!(
                    "{:<12} {:>5} {:>10.6} {:>10.4} {:>6} {:>12.5e} {:>12.5e} {:>12.5e} {:>12.5e}\n",
                    r.bus, r.phase, r.vmag, r.vang_deg, r.slack_kind, r.s1, r.s2, r.p_inj, r.q_inj
                ));
            }
            out.push_str(&format!(
                "{:<12} {:>5} {:>10} {:>10} {:>6} {:>12} {:>12} {:>12.5e} {:>12.5e}\n",
                "TOTAL(|.|)", "", "", "", "", "", "", tp, tq
            ));
            out
        }
    }
}

impl fmt::Display for OutputFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OutputFormat::Table => write!(f, "table"),
            OutputFormat::Csv => write!(f, "csv"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "\
feeder v1
# two buses joined by one line
bases sbase=1e6 units=perunit
vbase level=7200 base=7200
bus id=src phases=A nominal=1.0 kind=swing
bus id=b1 phases=A nominal=1.0 kind=pq
source bus=src vm=1.0 va_deg=0
branch from=src to=b1 phases=A y=1-2j
load bus=b1 phase=A p=0.1 q=0.05
";

    #[test]
    fn minimal_document_parses() {
        let net = parse_feeder(MINIMAL).unwrap();
        assert_eq!(net.buses.len(), 2);
        assert_eq!(net.branches.len(), 1);
        assert_eq!(
            net.branches[0].series.get(Phase::A, Phase::A),
            Complex64::new(1.0, -2.0)
        );
        assert!(crate::model::validate(&net).is_ok());
    }

    #[test]
    fn duplicate_bus_id_is_a_parse_error() {
        let doc = "feeder v1\nbus id=x phases=A nominal=1.0 kind=pq\nbus id=x phases=B nominal=1.0 kind=pq\n";
        let e = parse_feeder(doc).unwrap_err();
        assert!(e.message.contains("duplicate bus id \"x\""));
        assert_eq!(e.line, 3);
    }

    #[test]
    fn unknown_keys_and_records_rejected() {
        let e = parse_feeder("feeder v1\nbus id=x phases=A nominal=1.0 kind=pq frobnicate=1\n")
            .unwrap_err();
        assert!(e.message.contains("unknown field `frobnicate`"));
        let e = parse_feeder("feeder v1\nwidget id=x\n").unwrap_err();
        assert!(e.message.contains("unknown record kind"));
    }

    #[test]
    fn error_positions_are_annotated() {
        let e = parse_feeder("feeder v1\nbus id=x phases=A nominal=oops kind=pq\n").unwrap_err();
        assert_eq!(e.line, 2);
        assert!(e.col > 1);
        assert!(e.message.contains("nominal"));
    }

    #[test]
    fn serialize_parse_fixpoint() {
        let net = parse_feeder(MINIMAL).unwrap();
        let text1 = serialize_feeder(&net);
        let net2 = parse_feeder(&text1).unwrap();
        assert_eq!(net, net2);
        let text2 = serialize_feeder(&net2);
        assert_eq!(text1, text2);
    }

    #[test]
    fn complex_grammar() {
        assert_eq!(parse_complex("1.5-2.3j"), Some(Complex64::new(1.5, -2.3)));
        assert_eq!(parse_complex("0+0j"), Some(Complex64::new(0.0, 0.0)));
        assert_eq!(
            parse_complex("-1e-3+2e-4j"),
            Some(Complex64::new(-1e-3, 2e-4))
        );
        assert_eq!(parse_complex("1.5"), None);
        assert_eq!(parse_complex("j"), None);
        // Round-trip through the writer.
        for v in [
            Complex64::new(0.1, -0.25),
            Complex64::new(-3.5e-7, 2.0),
            Complex64::new(0.0, 0.0),
        ] {
            assert_eq!(parse_complex(&format_complex(v)), Some(v));
        }
    }

    fn injection_doc(entries: &[(f64, f64)]) -> ResultDocument {
        ResultDocument {
            rows: entries
                .iter()
                .enumerate()
                .map(|(i, &(p, q))| ResultRow {
                    bus: format!("b{}", i),
                    phase: Phase::A,
                    vmag: 1.0,
                    vang_deg: 0.0,
                    slack_kind: "PQ".into(),
                    s1: p,
                    s2: q,
                    p_inj: p,
                    q_inj: q,
                })
                .collect(),
        }
    }

    #[test]
    fn totals_are_sums_of_absolute_values() {
        let (p, q) = injection_doc(&[]).totals();
        assert_eq!((p, q), (0.0, 0.0));
        let (p, q) = injection_doc(&[(0.1, 0.2)]).totals();
        assert!((p - 0.1).abs() < 1e-15 && (q - 0.2).abs() < 1e-15);
        let (p, q) = injection_doc(&[(0.1, 0.2), (-0.1, 0.2)]).totals();
        assert!((p - 0.2).abs() < 1e-15 && (q - 0.4).abs() < 1e-15);
    }

    #[test]
    fn csv_is_deterministic_and_ordered() {
        let mut doc = injection_doc(&[(0.1, 0.2), (-0.1, 0.2)]);
        doc.rows.reverse();
        let a = write_results(&doc, OutputFormat::Csv);
        let b = write_results(&doc, OutputFormat::Csv);
        assert_eq!(a, b);
        assert!(a.starts_with("bus,phase,"));
        let lines: Vec<&str> = a.lines().collect();
        assert!(lines[1].starts_with("b0,") && lines[2].starts_with("b1,"));
        assert!(lines[3].starts_with("TOTAL,"));
    }
}
