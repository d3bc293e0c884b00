//! MATPOWER case parsing, instance perturbations and JSON run reports.

use std::collections::HashMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::certify::AlphaCertificate;
use crate::error::{Error, Result};
use crate::pipeline::StageReport;
use crate::pop::Norm;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BusType {
    Pq,
    Pv,
    Slack,
    Isolated,
}

/// Bus record. Powers in per-unit, voltages in per-unit, angle in radians.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bus {
    pub id: i64,
    pub bus_type: BusType,
    pub pd: f64,
    pub qd: f64,
    pub gs: f64,
    pub bs: f64,
    pub vm: f64,
    pub va: f64,
    pub vmax: f64,
    pub vmin: f64,
}

/// Generator record in per-unit. `pg`, `qg`, `vg` are the case-file setpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generator {
    pub bus: i64,
    pub pg: f64,
    pub qg: f64,
    pub qmax: f64,
    pub qmin: f64,
    pub vg: f64,
    pub pmax: f64,
    pub pmin: f64,
    pub in_service: bool,
}

/// Π-model branch. `b_charge` is the total line charging; `rate_a == 0` means
/// unlimited.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Branch {
    pub from: i64,
    pub to: i64,
    pub r: f64,
    pub x: f64,
    pub b_charge: f64,
    pub tap: f64,
    pub shift: f64,
    pub rate_a: f64,
    pub in_service: bool,
}

/// Quadratic cost `c2·P² + c1·P + c0` with `P` in per-unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenCost {
    pub gen_index: usize,
    pub c2: f64,
    pub c1: f64,
    pub c0: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseData {
    pub name: String,
    pub base_mva: f64,
    pub buses: Vec<Bus>,
    pub generators: Vec<Generator>,
    pub branches: Vec<Branch>,
    pub costs: Vec<GenCost>,
}

impl CaseData {
    /// Position of a bus id in `buses`.
    pub fn bus_index(&self, id: i64) -> Option<usize> {
        self.buses.iter().position(|b| b.id == id)
    }

    pub fn slack_bus(&self) -> usize {
        self.buses
            .iter()
            .position(|b| b.bus_type == BusType::Slack)
            .expect("validated case has a slack bus")
    }

    /// Checks the structural invariants every consumer relies on.
    pub fn validate(&self) -> Result<()> {
        if !(self.base_mva > 0.0) {
            return Err(Error::InvalidRecord(format!("baseMVA = {}", self.base_mva)));
        }
        let slack_count = self
            .buses
            .iter()
            .filter(|b| b.bus_type == BusType::Slack)
            .count();
        match slack_count {
            0 => return Err(Error::NoSlackBus),
            1 => {}
            _ => return Err(Error::MultipleSlackBuses),
        }
        let ids: HashMap<i64, usize> = self
            .buses
            .iter()
            .enumerate()
            .map(|(i, b)| (b.id, i))
            .collect();
        if ids.len() != self.buses.len() {
            return Err(Error::InvalidRecord("duplicate bus id".into()));
        }
        for b in &self.buses {
            if b.vmin > b.vmax {
                return Err(Error::InvalidRecord(format!("bus {}: Vmin > Vmax", b.id)));
            }
        }
        for (i, g) in self.generators.iter().enumerate() {
            if !ids.contains_key(&g.bus) {
                return Err(Error::UnknownBusReference(g.bus));
            }
            if g.pmin > g.pmax {
                return Err(Error::InvalidRecord(format!("generator {i}: Pmin > Pmax")));
            }
            if g.qmin > g.qmax {
                return Err(Error::InvalidRecord(format!("generator {i}: Qmin > Qmax")));
            }
        }
        for (i, br) in self.branches.iter().enumerate() {
            for id in [br.from, br.to] {
                if !ids.contains_key(&id) {
                    return Err(Error::UnknownBusReference(id));
                }
            }
            if br.in_service && br.r * br.r + br.x * br.x <= 0.0 {
                return Err(Error::ZeroImpedanceBranch(i));
            }
        }
        if self.costs.len() != self.generators.len() {
            return Err(Error::InconsistentDimensions(format!(
                "{} cost rows for {} generators",
                self.costs.len(),
                self.generators.len()
            )));
        }
        Ok(())
    }
}

const BUS_COLS: usize = 13;
const GEN_COLS: usize = 10;
const BRANCH_COLS: usize = 11;

struct Table {
    rows: Vec<(usize, Vec<f64>)>,
}

/// Parses MATPOWER case text (`baseMVA`, `bus`, `gen`, `branch`, `gencost`).
pub fn parse_case(text: &str) -> Result<CaseData> {
    let mut scalars: HashMap<String, (usize, String)> = HashMap::new();
    let mut tables: HashMap<String, Table> = HashMap::new();
    let mut name = String::from("case");

    let mut open: Option<(String, Table)> = None;
    for (lineno, raw) in text.lines().enumerate() {
        let lineno = lineno + 1;
        let line = raw.split('%').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some((table_name, mut table)) = open.take() {
            let (body, closed) = match line.find(']') {
                Some(pos) => (&line[..pos], true),
                None => (line, false),
            };
            push_rows(&table_name, &mut table, body, lineno)?;
            if closed {
                tables.insert(table_name, table);
            } else {
                open = Some((table_name, table));
            }
            continue;
        }
        if let Some(rest) = line.strip_prefix("function") {
            if let Some(eq) = rest.find('=') {
                name = rest[eq + 1..].trim().trim_end_matches(';').to_string();
            }
            continue;
        }
        let Some(eq) = line.find('=') else { continue };
        let lhs = line[..eq].trim();
        let key = lhs.rsplit('.').next().unwrap_or(lhs).to_string();
        let rhs = line[eq + 1..].trim();
        if let Some(after) = rhs.strip_prefix('[') {
            let mut table = Table { rows: Vec::new() };
            match after.find(']') {
                Some(pos) => {
                    push_rows(&key, &mut table, &after[..pos], lineno)?;
                    tables.insert(key, table);
                }
                None => {
                    push_rows(&key, &mut table, after, lineno)?;
                    open = Some((key, table));
                }
            }
        } else {
            scalars.insert(key, (lineno, rhs.trim_end_matches(';').trim().to_string()));
        }
    }
    if let Some((table_name, _)) = open {
        return Err(Error::MalformedRow {
            table: table_name,
            line: text.lines().count(),
            reason: "table not terminated by `];`".into(),
        });
    }

    let (base_line, base_text) = scalars
        .get("baseMVA")
        .ok_or_else(|| Error::MissingTable("baseMVA".into()))?;
    let base_mva: f64 = base_text.parse().map_err(|_| Error::MalformedRow {
        table: "baseMVA".into(),
        line: *base_line,
        reason: format!("not a number: {base_text}"),
    })?;
    let take = |t: &str| -> Result<&Table> {
        tables.get(t).ok_or_else(|| Error::MissingTable(t.to_string()))
    };
    let bus_t = take("bus")?;
    let gen_t = take("gen")?;
    let branch_t = take("branch")?;
    let cost_t = take("gencost")?;

    let mut buses = Vec::with_capacity(bus_t.rows.len());
    for (line, row) in &bus_t.rows {
        need_cols("bus", *line, row, BUS_COLS)?;
        let bus_type = match row[1] as i64 {
            1 => BusType::Pq,
            2 => BusType::Pv,
            3 => BusType::Slack,
            4 => BusType::Isolated,
            other => {
                return Err(Error::MalformedRow {
                    table: "bus".into(),
                    line: *line,
                    reason: format!("unknown bus type {other}"),
                })
            }
        };
        buses.push(Bus {
            id: as_id("bus", *line, row[0])?,
            bus_type,
            pd: row[2] / base_mva,
            qd: row[3] / base_mva,
            gs: row[4] / base_mva,
            bs: row[5] / base_mva,
            vm: row[7],
            va: row[8].to_radians(),
            vmax: row[11],
            vmin: row[12],
        });
    }

    let mut generators = Vec::with_capacity(gen_t.rows.len());
    for (line, row) in &gen_t.rows {
        need_cols("gen", *line, row, GEN_COLS)?;
        generators.push(Generator {
            bus: as_id("gen", *line, row[0])?,
            pg: row[1] / base_mva,
            qg: row[2] / base_mva,
            qmax: row[3] / base_mva,
            qmin: row[4] / base_mva,
            vg: row[5],
            in_service: row[7] > 0.0,
            pmax: row[8] / base_mva,
            pmin: row[9] / base_mva,
        });
    }

    let mut branches = Vec::with_capacity(branch_t.rows.len());
    for (line, row) in &branch_t.rows {
        need_cols("branch", *line, row, BRANCH_COLS)?;
        let tap = if row[8] == 0.0 { 1.0 } else { row[8] };
        branches.push(Branch {
            from: as_id("branch", *line, row[0])?,
            to: as_id("branch", *line, row[1])?,
            r: row[2],
            x: row[3],
            b_charge: row[4],
            rate_a: row[5] / base_mva,
            tap,
            shift: row[9].to_radians(),
            in_service: row[10] > 0.0,
        });
    }

    if cost_t.rows.len() < generators.len() {
        let line = cost_t.rows.last().map(|r| r.0).unwrap_or(0);
        return Err(Error::MalformedRow {
            table: "gencost".into(),
            line,
            reason: format!(
                "{} cost rows for {} generators",
                cost_t.rows.len(),
                generators.len()
            ),
        });
    }
    // Rows beyond the generator count are reactive-power costs; they are ignored.
    let mut costs = Vec::with_capacity(generators.len());
    for (gen_index, (line, row)) in cost_t.rows.iter().take(generators.len()).enumerate() {
        need_cols("gencost", *line, row, 4)?;
        let malformed = |reason: String| Error::MalformedRow {
            table: "gencost".into(),
            line: *line,
            reason,
        };
        if row[0] as i64 != 2 {
            return Err(malformed(format!(
                "cost model {} is not polynomial (2)",
                row[0]
            )));
        }
        if row[3] as i64 != 3 {
            return Err(malformed(format!(
                "polynomial cost with {} coefficients, expected 3",
                row[3]
            )));
        }
        need_cols("gencost", *line, row, 7)?;
        costs.push(GenCost {
            gen_index,
            c2: row[4] * base_mva * base_mva,
            c1: row[5] * base_mva,
            c0: row[6],
        });
    }

    let case = CaseData {
        name,
        base_mva,
        buses,
        generators,
        branches,
        costs,
    };
    case.validate()?;
    Ok(case)
}

fn push_rows(table: &str, t: &mut Table, body: &str, line: usize) -> Result<()> {
    for chunk in body.split(';') {
        let chunk = chunk.trim();
        if chunk.is_empty() {
            continue;
        }
        let row = chunk
            .split(|c: char| c.is_whitespace() || c == ',')
            .filter(|s| !s.is_empty())
            .map(|tok| {
                tok.parse::<f64>().map_err(|_| Error::MalformedRow {
                    table: table.to_string(),
                    line,
                    reason: format!("not a number: `{tok}`"),
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        t.rows.push((line, row));
    }
    Ok(())
}

fn need_cols(table: &str, line: usize, row: &[f64], n: usize) -> Result<()> {
    if row.len() < n {
        return Err(Error::MalformedRow {
            table: table.into(),
            line,
            reason: format!("{} columns, need at least {n}", row.len()),
        });
    }
    Ok(())
}

fn as_id(table: &str, line: usize, v: f64) -> Result<i64> {
    if v.fract() != 0.0 {
        return Err(Error::MalformedRow {
            table: table.into(),
            line,
            reason: format!("bus id {v} is not an integer"),
        });
    }
    Ok(v as i64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PerturbationKind {
    PTighten,
    QTighten,
    VTighten,
}

/// Instance modification: shrink the upper limit and grow the lower limit by
/// percentages. For `VTighten` only `shrink_max_pct` is used and the voltage
/// interval loses that percentage of its half-width on each side.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Perturbation {
    pub kind: PerturbationKind,
    pub shrink_max_pct: f64,
    pub grow_min_pct: f64,
}

impl Perturbation {
    pub fn p_tighten(shrink_max_pct: f64, grow_min_pct: f64) -> Self {
        Self {
            kind: PerturbationKind::PTighten,
            shrink_max_pct,
            grow_min_pct,
        }
    }

    pub fn q_tighten(shrink_max_pct: f64, grow_min_pct: f64) -> Self {
        Self {
            kind: PerturbationKind::QTighten,
            shrink_max_pct,
            grow_min_pct,
        }
    }

    pub fn v_tighten(pct: f64) -> Self {
        Self {
            kind: PerturbationKind::VTighten,
            shrink_max_pct: pct,
            grow_min_pct: pct,
        }
    }

    fn validate(&self) -> Result<()> {
        for (what, v) in [
            ("shrink", self.shrink_max_pct),
            ("grow", self.grow_min_pct),
        ] {
            if !(0.0..=100.0).contains(&v) {
                return Err(Error::InvalidPerturbation(format!(
                    "{what} percentage {v} outside [0, 100]"
                )));
            }
        }
        Ok(())
    }
}

impl fmt::Display for Perturbation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            PerturbationKind::PTighten => {
                write!(f, "custom:P,{},{}", self.shrink_max_pct, self.grow_min_pct)
            }
            PerturbationKind::QTighten => {
                write!(f, "custom:Q,{},{}", self.shrink_max_pct, self.grow_min_pct)
            }
            PerturbationKind::VTighten => write!(f, "custom:V,{}", self.shrink_max_pct),
        }
    }
}

impl FromStr for Perturbation {
    type Err = Error;

    /// Accepts the named instances `P70`, `Q80`, `V40`, `P60` and
    /// `custom:<P|Q|V>,<shrink>[,<grow>]`.
    fn from_str(s: &str) -> Result<Self> {
        let p = match s {
            "P70" => Self::p_tighten(70.0, 70.0),
            // Named after the table row; the recipe in that row lowers/raises by 70%.
            "Q80" => Self::q_tighten(70.0, 70.0),
            "V40" => Self::v_tighten(40.0),
            "P60" => Self::p_tighten(0.0, 60.0),
            other => {
                let spec = other.strip_prefix("custom:").ok_or_else(|| {
                    Error::InvalidPerturbation(format!("unknown perturbation `{other}`"))
                })?;
                let parts: Vec<&str> = spec.split(',').map(str::trim).collect();
                let num = |i: usize| -> Result<f64> {
                    parts
                        .get(i)
                        .ok_or_else(|| {
                            Error::InvalidPerturbation(format!("`{other}`: missing percentage"))
                        })?
                        .parse()
                        .map_err(|_| Error::InvalidPerturbation(format!("`{other}`: bad number")))
                };
                match parts.first().copied() {
                    Some("P") => Self::p_tighten(num(1)?, num(2)?),
                    Some("Q") => Self::q_tighten(num(1)?, num(2)?),
                    Some("V") => Self::v_tighten(num(1)?),
                    _ => {
                        return Err(Error::InvalidPerturbation(format!(
                            "`{other}`: kind must be P, Q or V"
                        )))
                    }
                }
            }
        };
        p.validate()?;
        Ok(p)
    }
}

/// Returns a perturbed copy of `case`; the input is left untouched.
pub fn apply_perturbation(case: &CaseData, p: &Perturbation) -> Result<CaseData> {
    p.validate()?;
    let mut out = case.clone();
    let shrink = 1.0 - p.shrink_max_pct / 100.0;
    let grow = 1.0 + p.grow_min_pct / 100.0;
    match p.kind {
        PerturbationKind::PTighten => {
            for (i, g) in out.generators.iter_mut().enumerate() {
                g.pmax *= shrink;
                g.pmin *= grow;
                check_box(&format!("Pg of generator {i}"), g.pmin, g.pmax)?;
            }
        }
        PerturbationKind::QTighten => {
            for (i, g) in out.generators.iter_mut().enumerate() {
                g.qmax *= shrink;
                g.qmin *= grow;
                check_box(&format!("Qg of generator {i}"), g.qmin, g.qmax)?;
            }
        }
        PerturbationKind::VTighten => {
            for b in &mut out.buses {
                let mid = 0.5 * (b.vmax + b.vmin);
                let half = 0.5 * (b.vmax - b.vmin) * shrink;
                b.vmax = mid + half;
                b.vmin = mid - half;
                check_box(&format!("V of bus {}", b.id), b.vmin, b.vmax)?;
            }
        }
    }
    Ok(out)
}

fn check_box(what: &str, min: f64, max: f64) -> Result<()> {
    if min > max {
        return Err(Error::ResultingEmptyBox {
            what: what.to_string(),
            min,
            max,
        });
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedValue {
    pub name: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageJson {
    pub stage: u8,
    pub slack_norm: f64,
    pub status: String,
    pub objective: f64,
    pub point_file: Option<String>,
    pub nonzero_slacks: Vec<NamedValue>,
    pub wall_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertificateJson {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub alpha0: f64,
    pub certified: bool,
}

/// Machine-readable run report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportJson {
    pub instance: String,
    pub norm: String,
    pub stages: Vec<StageJson>,
    pub certificate: Option<CertificateJson>,
}

impl ReportJson {
    pub fn new(
        instance: &str,
        norm: Norm,
        reports: &[StageReport],
        certificate: Option<&AlphaCertificate>,
    ) -> Self {
        Self {
            instance: instance.to_string(),
            norm: norm.to_string(),
            stages: reports
                .iter()
                .map(|r| StageJson {
                    stage: r.stage.number(),
                    slack_norm: r.slack_norm,
                    status: r.status.clone(),
                    objective: r.objective,
                    point_file: r.point_file.clone(),
                    nonzero_slacks: r
                        .nonzero_slacks
                        .iter()
                        .map(|(name, value)| NamedValue {
                            name: name.clone(),
                            value: *value,
                        })
                        .collect(),
                    wall_ms: r.wall_ms,
                })
                .collect(),
            certificate: certificate.map(|c| CertificateJson {
                alpha: c.alpha,
                beta: c.beta,
                gamma: c.gamma,
                alpha0: c.alpha0,
                certified: c.certified,
            }),
        }
    }
}

/// Writes the JSON report (one line) to `sink`.
pub fn write_report<W: Write>(
    instance: &str,
    norm: Norm,
    reports: &[StageReport],
    certificate: Option<&AlphaCertificate>,
    mut sink: W,
) -> Result<()> {
    if reports.is_empty() {
        return Err(Error::InvalidOptions("report needs at least one stage".into()));
    }
    let json = ReportJson::new(instance, norm, reports, certificate);
    serde_json::to_writer(&mut sink, &json).map_err(|e| Error::IoFailure(e.to_string()))?;
    sink.write_all(b"\n")?;
    Ok(())
}
