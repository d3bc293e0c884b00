//! Quadratic polynomial optimization problems and the ACOPF instances built
//! from them: the plain formulation, its slack-augmented variant, and norm
//! epigraphs of the slack vector.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::case_io::CaseData;
use crate::error::{Error, Result};
use crate::network::{build_admittance, build_flow_matrices, AdmittanceModel, FlowMatrices};
use crate::quadratic::{QuadraticFunction, SymMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Segment {
    X,
    Pg,
    Qg,
    Plm,
    Qlm,
    Slack,
    Aux,
}

/// Ordered, contiguous variable segments with unique names.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct VariableLayout {
    names: Vec<String>,
    segments: Vec<(Segment, Range<usize>)>,
    index: HashMap<String, usize>,
}

impl VariableLayout {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a segment. Panics on a duplicate segment or variable name.
    pub fn push_segment(&mut self, seg: Segment, names: Vec<String>) -> Range<usize> {
        assert!(self.range(seg).is_none(), "segment {seg:?} already present");
        let start = self.names.len();
        for name in names {
            let prev = self.index.insert(name.clone(), self.names.len());
            assert!(prev.is_none(), "duplicate variable name {name}");
            self.names.push(name);
        }
        let range = start..self.names.len();
        self.segments.push((seg, range.clone()));
        range
    }

    pub fn dim(&self) -> usize {
        self.names.len()
    }

    pub fn range(&self, seg: Segment) -> Option<Range<usize>> {
        self.segments
            .iter()
            .find(|(s, _)| *s == seg)
            .map(|(_, r)| r.clone())
    }

    pub fn segments(&self) -> &[(Segment, Range<usize>)] {
        &self.segments
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Sense {
    Eq,
    Le,
    Ge,
}

/// Structural role of a constraint. Indices refer to generator buses, buses
/// or oriented flows of the owning [`AcopfModel`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConstraintKind {
    PMax(usize),
    PMin(usize),
    QMax(usize),
    QMin(usize),
    PBalance(usize),
    QBalance(usize),
    VMax(usize),
    VMin(usize),
    FlowLimit(usize),
    PDefinition(usize),
    QDefinition(usize),
    Epigraph(usize),
    Budget,
    Other,
}

/// Slack variable attached to a constraint: `f + coef · z[index]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SlackBinding {
    pub index: usize,
    pub coef: f64,
}

/// `f(z) {=, ≤, ≥} 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct Constraint {
    pub f: QuadraticFunction,
    pub sense: Sense,
    pub name: String,
    pub kind: ConstraintKind,
    pub slack: Option<SlackBinding>,
}

impl Constraint {
    pub fn new(f: QuadraticFunction, sense: Sense, name: impl Into<String>) -> Self {
        Self {
            f,
            sense,
            name: name.into(),
            kind: ConstraintKind::Other,
            slack: None,
        }
    }

    fn with_kind(mut self, kind: ConstraintKind) -> Self {
        self.kind = kind;
        self
    }

    /// Nonnegative violation at `z`.
    pub fn residual(&self, z: &[f64]) -> f64 {
        residual(self.sense, self.f.eval(z))
    }
}

pub fn residual(sense: Sense, v: f64) -> f64 {
    match sense {
        Sense::Eq => v.abs(),
        Sense::Le => v.max(0.0),
        Sense::Ge => (-v).max(0.0),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PopProblem {
    pub layout: VariableLayout,
    pub objective: QuadraticFunction,
    pub constraints: Vec<Constraint>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub parameters: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub objective: f64,
    /// Constraint residuals followed by variable-bound violations (`bound:<name>`).
    pub residuals: Vec<(String, f64)>,
    pub max_violation: f64,
}

impl PopProblem {
    pub fn dim(&self) -> usize {
        self.layout.dim()
    }

    pub fn evaluate(&self, z: &[f64]) -> Result<Evaluation> {
        if z.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: z.len(),
            });
        }
        let mut residuals: Vec<(String, f64)> = self
            .constraints
            .iter()
            .map(|c| (c.name.clone(), c.residual(z)))
            .collect();
        for (i, &zi) in z.iter().enumerate() {
            let v = (self.lower[i] - zi).max(zi - self.upper[i]).max(0.0);
            if v > 0.0 {
                residuals.push((format!("bound:{}", self.layout.name(i)), v));
            }
        }
        let max_violation = residuals.iter().fold(0.0f64, |m, (_, r)| m.max(*r));
        Ok(Evaluation {
            objective: self.objective.eval(z),
            residuals,
            max_violation,
        })
    }

    /// Maximum constraint and bound violation at `z`.
    pub fn max_violation(&self, z: &[f64]) -> f64 {
        let c = self
            .constraints
            .iter()
            .fold(0.0f64, |m, c| m.max(c.residual(z)));
        z.iter().enumerate().fold(c, |m, (i, &zi)| {
            m.max(self.lower[i] - zi).max(zi - self.upper[i])
        })
    }

    /// Appends a variable segment; every function is lifted to the new dimension.
    pub fn append_segment(
        &mut self,
        seg: Segment,
        names: Vec<String>,
        lower: f64,
        upper: f64,
    ) -> Range<usize> {
        let range = self.layout.push_segment(seg, names);
        let dim = self.layout.dim();
        self.objective = self.objective.remap(dim, Some);
        for c in &mut self.constraints {
            c.f = c.f.remap(dim, Some);
        }
        self.lower.resize(dim, lower);
        self.upper.resize(dim, upper);
        range
    }

    /// Checks that every function lives in the layout's dimension.
    pub fn check_consistency(&self) -> Result<()> {
        let dim = self.dim();
        let bad = std::iter::once(&self.objective)
            .chain(self.constraints.iter().map(|c| &c.f))
            .any(|f| f.dim() != dim);
        if bad || self.lower.len() != dim || self.upper.len() != dim {
            return Err(Error::InconsistentDimensions(format!(
                "functions or bounds do not match layout dimension {dim}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Norm {
    L1,
    L2,
    Linf,
}

impl fmt::Display for Norm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Norm::L1 => "l1",
            Norm::L2 => "l2",
            Norm::Linf => "linf",
        })
    }
}

impl FromStr for Norm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "l1" => Ok(Norm::L1),
            "l2" => Ok(Norm::L2),
            "linf" => Ok(Norm::Linf),
            other => Err(Error::InvalidOptions(format!("unknown norm `{other}`"))),
        }
    }
}

impl Norm {
    pub fn of(self, v: &[f64]) -> f64 {
        match self {
            Norm::L1 => v.iter().map(|x| x.abs()).sum(),
            Norm::L2 => v.iter().map(|x| x * x).sum::<f64>().sqrt(),
            Norm::Linf => v.iter().fold(0.0, |m, x| m.max(x.abs())),
        }
    }
}

/// Smooth surrogate of `‖s‖_p` usable as objective or budget.
#[derive(Debug, Clone, PartialEq)]
pub struct NormHandle {
    pub norm: Norm,
    /// `Σ s` for ℓ1, `t` for ℓ∞, `Σ s²` for ℓ2.
    pub f: QuadraticFunction,
    pub slack: Range<usize>,
}

impl NormHandle {
    /// `‖s‖_p` at `z`.
    pub fn value(&self, z: &[f64]) -> f64 {
        self.norm.of(&z[self.slack.clone()])
    }

    /// `f(z) ≤ ub` for ℓ1/ℓ∞, `f(z) ≤ ub²` for ℓ2.
    pub fn budget(&self, ub: f64) -> Constraint {
        let rhs = match self.norm {
            Norm::L2 => ub * ub,
            _ => ub,
        };
        let mut f = self.f.clone();
        f.d -= rhs;
        Constraint::new(f, Sense::Le, "budget").with_kind(ConstraintKind::Budget)
    }
}

/// Adds the epigraph of `‖s‖_p` (an auxiliary `t` for ℓ∞).
pub fn norm_epigraph(pop: &PopProblem, p: Norm) -> Result<(PopProblem, NormHandle)> {
    let slack = pop.layout.range(Segment::Slack).ok_or(Error::NoSlackSegment)?;
    let mut out = pop.clone();
    let f = match p {
        Norm::L1 => QuadraticFunction::linear(out.dim(), slack.clone().map(|i| (i, 1.0)), 0.0),
        Norm::L2 => QuadraticFunction::new(
            SymMatrix::from_upper(out.dim(), slack.clone().map(|i| (i, i, 1.0))),
            [],
            0.0,
        ),
        Norm::Linf => {
            let t = out
                .append_segment(Segment::Aux, vec!["t".into()], 0.0, f64::INFINITY)
                .start;
            let dim = out.dim();
            for (e, i) in slack.clone().enumerate() {
                let name = format!("eps:{}", out.layout.name(i));
                out.constraints.push(
                    Constraint::new(
                        QuadraticFunction::linear(dim, [(i, 1.0), (t, -1.0)], 0.0),
                        Sense::Le,
                        name,
                    )
                    .with_kind(ConstraintKind::Epigraph(e)),
                );
            }
            QuadraticFunction::linear(dim, [(t, 1.0)], 0.0)
        }
    };
    Ok((out, NormHandle { norm: p, f, slack }))
}

/// Generators sharing one bus, merged into a single injection.
#[derive(Debug, Clone, PartialEq)]
pub struct GenBus {
    pub bus: usize,
    pub generators: Vec<usize>,
    /// Dispatch share of each generator, proportional to `Pmax`.
    pub shares: Vec<f64>,
    pub pmin: f64,
    pub pmax: f64,
    pub qmin: f64,
    pub qmax: f64,
    pub c2: f64,
    pub c1: f64,
    pub c0: f64,
}

/// Index bookkeeping for the ACOPF formulation of one case.
#[derive(Debug, Clone, PartialEq)]
pub struct AcopfModel {
    pub case: CaseData,
    pub admittance: AdmittanceModel,
    pub flows: FlowMatrices,
    pub gen_buses: Vec<GenBus>,
    pub ref_bus: usize,
    /// Generator-bus position of each bus, if any.
    pub gen_of_bus: Vec<Option<usize>>,
}

impl AcopfModel {
    pub fn new(case: &CaseData) -> Result<Self> {
        case.validate()?;
        let admittance = build_admittance(case)?;
        let flows = build_flow_matrices(&admittance);
        let n = case.buses.len();
        let mut by_bus: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, g) in case.generators.iter().enumerate() {
            if g.in_service {
                let k = case.bus_index(g.bus).ok_or(Error::UnknownBusReference(g.bus))?;
                by_bus.entry(k).or_default().push(i);
            }
        }
        let mut gen_buses = Vec::with_capacity(by_bus.len());
        let mut gen_of_bus = vec![None; n];
        for (bus, generators) in by_bus {
            let cap: f64 = generators.iter().map(|&i| case.generators[i].pmax).sum();
            let shares: Vec<f64> = generators
                .iter()
                .map(|&i| {
                    if cap > 0.0 {
                        case.generators[i].pmax / cap
                    } else {
                        1.0 / generators.len() as f64
                    }
                })
                .collect();
            let sum = |f: &dyn Fn(usize) -> f64| generators.iter().map(|&i| f(i)).sum::<f64>();
            let cost = |i: usize| &case.costs[i];
            let gb = GenBus {
                bus,
                pmin: sum(&|i| case.generators[i].pmin),
                pmax: sum(&|i| case.generators[i].pmax),
                qmin: sum(&|i| case.generators[i].qmin),
                qmax: sum(&|i| case.generators[i].qmax),
                c2: generators
                    .iter()
                    .zip(&shares)
                    .map(|(&i, w)| cost(i).c2 * w * w)
                    .sum(),
                c1: generators
                    .iter()
                    .zip(&shares)
                    .map(|(&i, w)| cost(i).c1 * w)
                    .sum(),
                c0: sum(&|i| cost(i).c0),
                generators,
                shares,
            };
            gen_of_bus[bus] = Some(gen_buses.len());
            gen_buses.push(gb);
        }
        Ok(Self {
            case: case.clone(),
            admittance,
            flows,
            gen_buses,
            ref_bus: case.slack_bus(),
            gen_of_bus,
        })
    }

    pub fn n(&self) -> usize {
        self.case.buses.len()
    }

    pub fn n_gen(&self) -> usize {
        self.gen_buses.len()
    }

    pub fn n_flow(&self) -> usize {
        self.flows.flows.len()
    }

    pub fn vre(&self, k: usize) -> usize {
        k
    }

    pub fn vim(&self, k: usize) -> usize {
        self.n() + k
    }

    pub fn pg(&self, g: usize) -> usize {
        2 * self.n() + g
    }

    pub fn qg(&self, g: usize) -> usize {
        2 * self.n() + self.n_gen() + g
    }

    pub fn plm(&self, f: usize) -> usize {
        2 * self.n() + 2 * self.n_gen() + f
    }

    pub fn qlm(&self, f: usize) -> usize {
        2 * self.n() + 2 * self.n_gen() + self.n_flow() + f
    }

    /// Dimension of `χ = (x, Pg, Qg, P_lm, Q_lm)`.
    pub fn chi_dim(&self) -> usize {
        2 * self.n() + 2 * self.n_gen() + 2 * self.n_flow()
    }

    pub fn slack_dim(&self) -> usize {
        4 * self.n_gen() + 2 * self.n()
    }

    fn bus_id(&self, k: usize) -> i64 {
        self.case.buses[k].id
    }

    fn flow_label(&self, f: usize) -> String {
        let fl = &self.flows.flows[f];
        format!(
            "{}-{}#{}",
            self.bus_id(fl.from),
            self.bus_id(fl.to),
            fl.branch
        )
    }

    /// Apparent-power limit of oriented flow `f`, `None` when unlimited.
    pub fn flow_limit(&self, f: usize) -> Option<f64> {
        let rate = self.case.branches[self.flows.flows[f].branch].rate_a;
        (rate > 0.0).then_some(rate)
    }

    pub fn layout(&self) -> VariableLayout {
        let mut l = VariableLayout::new();
        let n = self.n();
        let buses = |p: &str| -> Vec<String> {
            (0..n).map(|k| format!("{p}:{}", self.bus_id(k))).collect()
        };
        let gens = |p: &str| -> Vec<String> {
            self.gen_buses
                .iter()
                .map(|g| format!("{p}:{}", self.bus_id(g.bus)))
                .collect()
        };
        let flows = |p: &str| -> Vec<String> {
            (0..self.n_flow())
                .map(|f| format!("{p}:{}", self.flow_label(f)))
                .collect()
        };
        let mut x = buses("Vre");
        x.extend(buses("Vim"));
        l.push_segment(Segment::X, x);
        l.push_segment(Segment::Pg, gens("Pg"));
        l.push_segment(Segment::Qg, gens("Qg"));
        l.push_segment(Segment::Plm, flows("P_lm"));
        l.push_segment(Segment::Qlm, flows("Q_lm"));
        l
    }

    /// Names of the slack entries in canonical order.
    pub fn slack_names(&self) -> Vec<String> {
        let mut names = Vec::with_capacity(self.slack_dim());
        for g in &self.gen_buses {
            let id = self.bus_id(g.bus);
            for fam in ["s_P+", "s_P-", "s_Q+", "s_Q-"] {
                names.push(format!("{fam}:{id}"));
            }
        }
        for k in 0..self.n() {
            let id = self.bus_id(k);
            names.push(format!("s_V+:{id}"));
            names.push(format!("s_V-:{id}"));
        }
        names
    }

    /// Position of the slack attached to a bound constraint, relative to the
    /// slack segment.
    pub fn slack_offset(&self, kind: ConstraintKind) -> Option<(usize, f64)> {
        let g4 = 4 * self.n_gen();
        match kind {
            ConstraintKind::PMax(g) => Some((4 * g, -1.0)),
            ConstraintKind::PMin(g) => Some((4 * g + 1, 1.0)),
            ConstraintKind::QMax(g) => Some((4 * g + 2, -1.0)),
            ConstraintKind::QMin(g) => Some((4 * g + 3, 1.0)),
            ConstraintKind::VMax(k) => Some((g4 + 2 * k, -1.0)),
            ConstraintKind::VMin(k) => Some((g4 + 2 * k + 1, 1.0)),
            _ => None,
        }
    }

    /// Unslacked formulation over `χ`.
    pub fn build_op2(&self) -> Result<PopProblem> {
        let n = self.n();
        let dim = self.chi_dim();
        let layout = self.layout();
        let mut params = BTreeMap::new();
        let mut cons = Vec::new();

        let mut obj = Vec::new();
        let mut lin = Vec::new();
        let mut c0 = 0.0;
        for (g, gb) in self.gen_buses.iter().enumerate() {
            obj.push((self.pg(g), self.pg(g), gb.c2));
            lin.push((self.pg(g), gb.c1));
            c0 += gb.c0;
        }
        let objective = QuadraticFunction::new(SymMatrix::from_upper(dim, obj), lin, c0);

        for (g, gb) in self.gen_buses.iter().enumerate() {
            let id = self.bus_id(gb.bus);
            let bounds = [
                ("P_max", "Pmax", self.pg(g), gb.pmax, Sense::Le, ConstraintKind::PMax(g)),
                ("P_min", "Pmin", self.pg(g), gb.pmin, Sense::Ge, ConstraintKind::PMin(g)),
                ("Q_max", "Qmax", self.qg(g), gb.qmax, Sense::Le, ConstraintKind::QMax(g)),
                ("Q_min", "Qmin", self.qg(g), gb.qmin, Sense::Ge, ConstraintKind::QMin(g)),
            ];
            for (cname, pname, var, rhs, sense, kind) in bounds {
                params.insert(format!("{pname}:{id}"), rhs);
                cons.push(
                    Constraint::new(
                        QuadraticFunction::linear(dim, [(var, 1.0)], -rhs),
                        sense,
                        format!("{cname}:{id}"),
                    )
                    .with_kind(kind),
                );
            }
        }

        for k in 0..n {
            let bus = &self.case.buses[k];
            let id = bus.id;
            params.insert(format!("Pd:{id}"), bus.pd);
            params.insert(format!("Qd:{id}"), bus.qd);
            params.insert(format!("Vmax:{id}"), bus.vmax);
            params.insert(format!("Vmin:{id}"), bus.vmin);
            let remap = |m: &SymMatrix| m.remap(dim, Some);
            let gen = self.gen_of_bus[k];
            let p_lin: Vec<(usize, f64)> = gen.map(|g| (self.pg(g), -1.0)).into_iter().collect();
            let q_lin: Vec<(usize, f64)> = gen.map(|g| (self.qg(g), -1.0)).into_iter().collect();
            cons.push(
                Constraint::new(
                    QuadraticFunction::new(remap(&self.flows.yk[k]), p_lin, bus.pd),
                    Sense::Eq,
                    format!("P_bal:{id}"),
                )
                .with_kind(ConstraintKind::PBalance(k)),
            );
            cons.push(
                Constraint::new(
                    QuadraticFunction::new(remap(&self.flows.ybar_k[k]), q_lin, bus.qd),
                    Sense::Eq,
                    format!("Q_bal:{id}"),
                )
                .with_kind(ConstraintKind::QBalance(k)),
            );
            cons.push(
                Constraint::new(
                    QuadraticFunction::new(remap(&self.flows.mk[k]), [], -bus.vmax * bus.vmax),
                    Sense::Le,
                    format!("V_max:{id}"),
                )
                .with_kind(ConstraintKind::VMax(k)),
            );
            cons.push(
                Constraint::new(
                    QuadraticFunction::new(remap(&self.flows.mk[k]), [], -bus.vmin * bus.vmin),
                    Sense::Ge,
                    format!("V_min:{id}"),
                )
                .with_kind(ConstraintKind::VMin(k)),
            );
        }

        for f in 0..self.n_flow() {
            let fl = &self.flows.flows[f];
            let label = self.flow_label(f);
            if let Some(smax) = self.flow_limit(f) {
                params.insert(format!("Smax:{label}"), smax);
                let q = SymMatrix::from_upper(
                    dim,
                    [(self.plm(f), self.plm(f), 1.0), (self.qlm(f), self.qlm(f), 1.0)],
                );
                cons.push(
                    Constraint::new(
                        QuadraticFunction::new(q, [], -smax * smax),
                        Sense::Le,
                        format!("S_max:{label}"),
                    )
                    .with_kind(ConstraintKind::FlowLimit(f)),
                );
            }
            cons.push(
                Constraint::new(
                    QuadraticFunction::new(fl.y.remap(dim, Some).scaled(-1.0), [(self.plm(f), 1.0)], 0.0),
                    Sense::Eq,
                    format!("P_def:{label}"),
                )
                .with_kind(ConstraintKind::PDefinition(f)),
            );
            cons.push(
                Constraint::new(
                    QuadraticFunction::new(
                        fl.ybar.remap(dim, Some).scaled(-1.0),
                        [(self.qlm(f), 1.0)],
                        0.0,
                    ),
                    Sense::Eq,
                    format!("Q_def:{label}"),
                )
                .with_kind(ConstraintKind::QDefinition(f)),
            );
        }

        let mut lower = vec![f64::NEG_INFINITY; dim];
        let mut upper = vec![f64::INFINITY; dim];
        // Rotational symmetry: the reference voltage is real and nonnegative.
        lower[self.vim(self.ref_bus)] = 0.0;
        upper[self.vim(self.ref_bus)] = 0.0;
        lower[self.vre(self.ref_bus)] = 0.0;

        let pop = PopProblem {
            layout,
            objective,
            constraints: cons,
            lower,
            upper,
            parameters: params,
        };
        pop.check_consistency()?;
        Ok(pop)
    }

    /// Replaces the bound constraints on `Pg`, `Qg` and `|V|²` by their
    /// slacked forms and appends `s ≥ 0`.
    pub fn build_slacked(&self, pop: &PopProblem) -> Result<PopProblem> {
        let mut out = pop.clone();
        let start = out
            .append_segment(Segment::Slack, self.slack_names(), 0.0, f64::INFINITY)
            .start;
        for c in &mut out.constraints {
            if let Some((off, coef)) = self.slack_offset(c.kind) {
                c.f = c.f.with_linear_term(start + off, coef);
                c.slack = Some(SlackBinding {
                    index: start + off,
                    coef,
                });
            }
        }
        Ok(out)
    }

    /// `χ` consistent with voltages `x`: injections and flows recomputed.
    pub fn complete_point(&self, x: &[f64]) -> Vec<f64> {
        let n = self.n();
        let mut chi = vec![0.0; self.chi_dim()];
        chi[..2 * n].copy_from_slice(&x[..2 * n]);
        for (g, gb) in self.gen_buses.iter().enumerate() {
            let bus = &self.case.buses[gb.bus];
            chi[self.pg(g)] = self.flows.yk[gb.bus].quad_form(x) + bus.pd;
            chi[self.qg(g)] = self.flows.ybar_k[gb.bus].quad_form(x) + bus.qd;
        }
        for (f, fl) in self.flows.flows.iter().enumerate() {
            chi[self.plm(f)] = fl.y.quad_form(x);
            chi[self.qlm(f)] = fl.ybar.quad_form(x);
        }
        chi
    }

    /// Flat voltages, generation at box midpoints, flows at the flat profile.
    pub fn flat_start(&self) -> Vec<f64> {
        let n = self.n();
        let mut x = vec![0.0; 2 * n];
        x[..n].iter_mut().for_each(|v| *v = 1.0);
        let mut chi = self.complete_point(&x);
        for (g, gb) in self.gen_buses.iter().enumerate() {
            chi[self.pg(g)] = 0.5 * (gb.pmin + gb.pmax);
            chi[self.qg(g)] = 0.5 * (gb.qmin + gb.qmax);
        }
        chi
    }

    /// Extends `χ` by the smallest slacks that satisfy the slacked bounds, and
    /// by `t = max s` when the problem carries an ℓ∞ auxiliary.
    pub fn slacked_start(&self, slacked: &PopProblem, chi: &[f64]) -> Vec<f64> {
        let mut z = vec![0.0; slacked.dim()];
        z[..chi.len()].copy_from_slice(chi);
        for c in &slacked.constraints {
            if let Some(b) = c.slack {
                z[b.index] = 0.0;
                let v = c.f.eval(&z);
                let need = match c.sense {
                    Sense::Le => v.max(0.0),
                    Sense::Ge => (-v).max(0.0),
                    Sense::Eq => v.abs(),
                };
                z[b.index] = need;
            }
        }
        if let (Some(s), Some(t)) = (
            slacked.layout.range(Segment::Slack),
            slacked.layout.range(Segment::Aux),
        ) {
            z[t.start] = z[s].iter().fold(0.0, |m: f64, v| m.max(*v));
        }
        z
    }

    /// Generation cost `Σ c2 Pg² + c1 Pg + c0` at `χ`.
    pub fn cost(&self, chi: &[f64]) -> f64 {
        self.gen_buses
            .iter()
            .enumerate()
            .map(|(g, gb)| {
                let p = chi[self.pg(g)];
                gb.c2 * p * p + gb.c1 * p + gb.c0
            })
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::case_io::parse_case;
    use proptest::prelude::*;

    pub(crate) const THREE_BUS: &str = "\
mpc.baseMVA = 100;
mpc.bus = [
  1 3 0  0  0 0 1 1 0 230 1 1.1 0.9;
  2 2 50 20 0 0 1 1 0 230 1 1.1 0.9;
  3 1 60 10 0 0 1 1 0 230 1 1.05 0.95;
];
mpc.gen = [
  1 0 0 100 -100 1 100 1 200 10;
  2 0 0 80 -80 1 100 1 150 0;
];
mpc.branch = [
  1 2 0.01 0.1 0.02 100 0 0 0 0 1 -360 360;
  2 3 0.02 0.2 0.02 0 0 0 0 0 1 -360 360;
  1 3 0.01 0.15 0.0 80 0 0 0 0 1 -360 360;
];
mpc.gencost = [ 2 0 0 3 0.02 10 5; 2 0 0 3 0.03 12 0; ];
";

    fn model() -> AcopfModel {
        AcopfModel::new(&parse_case(THREE_BUS).unwrap()).unwrap()
    }

    #[test]
    fn layout_and_slack_dimensions() {
        let m = model();
        let op2 = m.build_op2().unwrap();
        assert_eq!(op2.dim(), 6 + 4 + 12);
        let s = m.build_slacked(&op2).unwrap();
        assert_eq!(s.layout.range(Segment::Slack).unwrap().len(), 4 * 2 + 2 * 3);
        let names: std::collections::HashSet<_> = s.constraints.iter().map(|c| &c.name).collect();
        assert_eq!(names.len(), s.constraints.len());
        assert_eq!(
            s.constraints
                .iter()
                .filter(|c| matches!(c.kind, ConstraintKind::FlowLimit(_)))
                .count(),
            4
        );
    }

    #[test]
    fn slack_closes_an_upper_violation_exactly() {
        let m = model();
        let s = m.build_slacked(&m.build_op2().unwrap()).unwrap();
        let mut z = vec![0.0; s.dim()];
        z[m.pg(0)] = m.gen_buses[0].pmax + 0.3;
        z[s.layout.index_of("s_P+:1").unwrap()] = 0.3;
        let c = s.constraints.iter().find(|c| c.name == "P_max:1").unwrap();
        assert!(c.f.eval(&z).abs() < 1e-15);
    }

    #[test]
    fn no_network_reduces_balance_to_load() {
        let mut case = parse_case(THREE_BUS).unwrap();
        case.branches.clear();
        let m = AcopfModel::new(&case).unwrap();
        let op2 = m.build_op2().unwrap();
        let mut z = vec![0.0; op2.dim()];
        z[m.pg(1)] = 0.5;
        let ev = op2.evaluate(&z).unwrap();
        let r = |name: &str| ev.residuals.iter().find(|(n, _)| n == name).unwrap().1;
        assert_eq!(r("P_bal:2"), 0.0);
        assert_eq!(r("P_bal:3"), 0.6);
    }

    #[test]
    fn norm_values_on_a_fixed_slack() {
        let m = model();
        let s = m.build_slacked(&m.build_op2().unwrap()).unwrap();
        let base = s.layout.range(Segment::Slack).unwrap().start;
        for (p, expect) in [(Norm::L1, 0.7), (Norm::Linf, 0.4), (Norm::L2, 0.25)] {
            let (pp, h) = norm_epigraph(&s, p).unwrap();
            let mut z = vec![0.0; pp.dim()];
            z[base] = 0.3;
            z[base + 1] = 0.4;
            if p == Norm::Linf {
                let epi = |z: &[f64]| {
                    pp.constraints
                        .iter()
                        .filter(|c| matches!(c.kind, ConstraintKind::Epigraph(_)))
                        .fold(0.0f64, |m, c| m.max(c.residual(z)))
                };
                z[pp.dim() - 1] = 0.39;
                assert!(epi(&z) > 0.0);
                z[pp.dim() - 1] = 0.4;
                assert_eq!(epi(&z), 0.0);
            }
            assert!((h.f.eval(&z) - expect).abs() < 1e-15);
            let zero = vec![0.0; pp.dim()];
            assert_eq!(h.f.eval(&zero), 0.0);
        }
        assert_eq!(norm_epigraph(&m.build_op2().unwrap(), Norm::L1).unwrap_err(), Error::NoSlackSegment);
    }

    #[test]
    fn residual_of_violated_bound() {
        let m = model();
        let op2 = m.build_op2().unwrap();
        let mut z = m.flat_start();
        z[m.pg(1)] = m.gen_buses[1].pmax + 0.1;
        let ev = op2.evaluate(&z).unwrap();
        let r = ev.residuals.iter().find(|(n, _)| n == "P_max:2").unwrap().1;
        assert!((r - 0.1).abs() < 1e-12);
        assert!(op2.evaluate(&z[1..]).is_err());
    }

    #[test]
    fn slacked_start_is_feasible_in_slacked_bounds() {
        let m = model();
        let (s, _) = norm_epigraph(&m.build_slacked(&m.build_op2().unwrap()).unwrap(), Norm::Linf).unwrap();
        let mut chi = m.flat_start();
        chi[m.pg(0)] = 5.0;
        chi[0] = 1.3;
        let z = m.slacked_start(&s, &chi);
        for c in &s.constraints {
            if c.slack.is_some() || matches!(c.kind, ConstraintKind::Epigraph(_)) {
                assert!(c.residual(&z) <= 1e-12, "{}", c.name);
            }
        }
    }

    proptest! {
        #[test]
        fn zero_slack_reproduces_unslacked_residuals(z in prop::collection::vec(-2.0f64..2.0, 22)) {
            let m = model();
            let op2 = m.build_op2().unwrap();
            let s = m.build_slacked(&op2).unwrap();
            let mut zs = z.clone();
            zs.resize(s.dim(), 0.0);
            let a = op2.evaluate(&z).unwrap();
            let b = s.evaluate(&zs).unwrap();
            prop_assert_eq!(a.residuals, b.residuals);
        }

        #[test]
        fn constraint_gradients_match_central_differences(z in prop::collection::vec(-2.0f64..2.0, 22)) {
            let m = model();
            let op2 = m.build_op2().unwrap();
            let h = 1e-6;
            for c in &op2.constraints {
                let g = c.f.gradient(&z);
                for i in c.f.support() {
                    let mut zp = z.clone();
                    let mut zm = z.clone();
                    zp[i] += h;
                    zm[i] -= h;
                    let fd = (c.f.eval(&zp) - c.f.eval(&zm)) / (2.0 * h);
                    prop_assert!((fd - g[i]).abs() <= 1e-6 * (1.0 + g[i].abs()));
                }
            }
        }

        #[test]
        fn linf_never_exceeds_l1(s in prop::collection::vec(0.0f64..3.0, 1..20)) {
            prop_assert!(Norm::Linf.of(&s) <= Norm::L1.of(&s));
        }
    }
}
