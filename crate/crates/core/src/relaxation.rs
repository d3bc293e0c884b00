//! Order-1 semidefinite relaxation of the ACOPF formulation.
//!
//! `x xᵀ` is replaced by `W ⪰ 0`. Because the reference voltage is real,
//! its imaginary coordinate is removed and `W` has order `2n − 1`. Flow
//! limits become 3×3 arrow blocks and quadratic costs become 2×2 Schur
//! blocks. Bound rows take nonnegative surplus variables.

use std::ops::Range;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::pop::{AcopfModel, GenBus, Norm};
use crate::quadratic::SymMatrix;
use crate::sdp::{BlockKind, SdpConstraint, SdpProblem, SdpSolution, SdpStatus};

pub const W_BLOCK: usize = 0;
pub const LIN_BLOCK: usize = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RelaxationObjective {
    /// Generation cost `Σ α_k`.
    Cost,
    /// Norm of the bound slacks.
    SlackNorm(Norm),
}

/// One equality row before assembly.
#[derive(Debug, Clone, PartialEq)]
pub struct RelaxationRow {
    pub name: String,
    w: Vec<(usize, usize, f64)>,
    lin: Vec<(usize, f64)>,
    blocks: Vec<(usize, usize, usize, f64)>,
    pub rhs: f64,
    /// Surplus variable closing an inequality, with its coefficient.
    surplus: Option<(usize, f64)>,
}

impl RelaxationRow {
    fn new(name: impl Into<String>, rhs: f64) -> Self {
        Self {
            name: name.into(),
            w: Vec::new(),
            lin: Vec::new(),
            blocks: Vec::new(),
            rhs,
            surplus: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RelaxationModel {
    pub sdp: SdpProblem,
    pub rows: Vec<RelaxationRow>,
    pub n: usize,
    pub ref_bus: usize,
    pub objective: RelaxationObjective,
    pub norm: Option<Norm>,
    pub budget: Option<f64>,
    /// Position of `α_k` in the nonnegative block, per generator bus.
    pub alpha: Vec<usize>,
    pub slack: Option<Range<usize>>,
    /// `ℓ∞` epigraph variable.
    pub aux: Option<usize>,
    /// `ℓ2` blocks `[[1, s_i], [s_i, τ_i]]`, one per slack.
    pub square_blocks: Vec<usize>,
    /// `(oriented flow, block)` for every limited flow.
    pub flow_blocks: Vec<(usize, usize)>,
    pub cost_blocks: Vec<Option<usize>>,
    /// Offset added to each `α_k`, in scaled units.
    pub alpha_shift: Vec<f64>,
    /// `a_k = c0 + c1 Pd` per generator bus, unscaled.
    pub a: Vec<f64>,
    /// `b_k = √c2 · Pd` per generator bus, unscaled.
    pub b: Vec<f64>,
    /// Costs are divided by this inside the SDP.
    pub cost_scale: f64,
    pub lin_names: Vec<String>,
}

/// Index of `x_i` inside `W`, `None` for the reference imaginary part.
pub fn w_index(n: usize, ref_bus: usize, i: usize) -> Option<usize> {
    let drop = n + ref_bus;
    match i.cmp(&drop) {
        std::cmp::Ordering::Less => Some(i),
        std::cmp::Ordering::Equal => None,
        std::cmp::Ordering::Greater => Some(i - 1),
    }
}

struct Builder<'a> {
    model: &'a AcopfModel,
    rows: Vec<RelaxationRow>,
    lin_names: Vec<String>,
    blocks: Vec<usize>,
}

impl Builder<'_> {
    fn var(&mut self, name: String) -> usize {
        self.lin_names.push(name);
        self.lin_names.len() - 1
    }

    fn block(&mut self, size: usize) -> usize {
        self.blocks.push(size);
        self.blocks.len() + 1
    }

    fn w(&self, m: &SymMatrix) -> Vec<(usize, usize, f64)> {
        let n = self.model.n();
        let r = self.model.ref_bus;
        m.remap(2 * n - 1, |i| w_index(n, r, i)).entries().to_vec()
    }

    /// `form(W) + lin ≤ rhs` (or `≥`) closed by a fresh surplus.
    fn inequality(&mut self, name: String, w: Vec<(usize, usize, f64)>, lin: Vec<(usize, f64)>, rhs: f64, le: bool) {
        let e = self.var(format!("e:{name}"));
        let coef = if le { 1.0 } else { -1.0 };
        let mut row = RelaxationRow::new(name, rhs);
        row.w = w;
        row.lin = lin;
        row.lin.push((e, coef));
        row.surplus = Some((e, coef));
        self.rows.push(row);
    }

    /// Fixes the entries of a small block: `B[r, c] − Σ terms = rhs`.
    fn block_entry(&mut self, name: String, block: usize, r: usize, c: usize, rhs: f64) -> &mut RelaxationRow {
        let mut row = RelaxationRow::new(name, rhs);
        row.blocks.push((block, r, c, if r == c { 1.0 } else { 0.5 }));
        self.rows.push(row);
        self.rows.last_mut().expect("row just pushed")
    }
}

/// Builds the relaxation. `slacked` selects the slacked bounds; with no
/// budget the objective is the slack norm, otherwise cost under the budget.
pub fn build_relaxation(
    model: &AcopfModel,
    slacked: bool,
    norm: Norm,
    budget: Option<f64>,
) -> Result<RelaxationModel> {
    if budget.is_some() && !slacked {
        return Err(Error::InconsistentDimensions("a slack budget requires the slacked variant".into()));
    }
    if let Some(ub) = budget {
        if !(ub >= 0.0) || !ub.is_finite() {
            return Err(Error::InvalidOptions(format!("slack budget {ub} must be finite and ≥ 0")));
        }
    }
    let objective = if slacked && budget.is_none() {
        RelaxationObjective::SlackNorm(norm)
    } else {
        RelaxationObjective::Cost
    };
    let n = model.n();
    let case = &model.case;
    let mut bld = Builder {
        model,
        rows: Vec::new(),
        lin_names: Vec::new(),
        blocks: Vec::new(),
    };

    let slack = if slacked {
        let start = bld.lin_names.len();
        for name in model.slack_names() {
            bld.var(name);
        }
        Some(start..bld.lin_names.len())
    } else {
        None
    };
    let slack_at = |off: usize| slack.as_ref().map(|r| r.start + off);
    let g4 = 4 * model.n_gen();

    for k in 0..n {
        let bus = &case.buses[k];
        let id = bus.id;
        let yk = bld.w(&model.flows.yk[k]);
        let ybk = bld.w(&model.flows.ybar_k[k]);
        match model.gen_of_bus[k] {
            Some(g) => {
                let gb = &model.gen_buses[g];
                let with = |off: usize, c: f64| -> Vec<(usize, f64)> {
                    slack_at(off).map(|i| (i, c)).into_iter().collect()
                };
                bld.inequality(format!("P_max:{id}"), yk.clone(), with(4 * g, -1.0), gb.pmax - bus.pd, true);
                bld.inequality(format!("P_min:{id}"), yk, with(4 * g + 1, 1.0), gb.pmin - bus.pd, false);
                bld.inequality(format!("Q_max:{id}"), ybk.clone(), with(4 * g + 2, -1.0), gb.qmax - bus.qd, true);
                bld.inequality(format!("Q_min:{id}"), ybk, with(4 * g + 3, 1.0), gb.qmin - bus.qd, false);
            }
            None => {
                let mut p = RelaxationRow::new(format!("P_bal:{id}"), -bus.pd);
                p.w = yk;
                let mut q = RelaxationRow::new(format!("Q_bal:{id}"), -bus.qd);
                q.w = ybk;
                bld.rows.push(p);
                bld.rows.push(q);
            }
        }
        let mk = bld.w(&model.flows.mk[k]);
        let vp: Vec<(usize, f64)> = slack_at(g4 + 2 * k).map(|i| (i, -1.0)).into_iter().collect();
        let vm: Vec<(usize, f64)> = slack_at(g4 + 2 * k + 1).map(|i| (i, 1.0)).into_iter().collect();
        bld.inequality(format!("V_max:{id}"), mk.clone(), vp, bus.vmax * bus.vmax, true);
        bld.inequality(format!("V_min:{id}"), mk, vm, bus.vmin * bus.vmin, false);
    }

    let mut flow_blocks = Vec::new();
    for f in 0..model.n_flow() {
        let Some(smax) = model.flow_limit(f) else { continue };
        let fl = &model.flows.flows[f];
        let label = format!("{}-{}#{}", case.buses[fl.from].id, case.buses[fl.to].id, fl.branch);
        let blk = bld.block(3);
        for d in 0..3 {
            bld.block_entry(format!("S_max[{d}]:{label}"), blk, d, d, smax);
        }
        bld.block_entry(format!("S_max[12]:{label}"), blk, 1, 2, 0.0);
        let yw = bld.w(&fl.y);
        let ybw = bld.w(&fl.ybar);
        let row = bld.block_entry(format!("P_def:{label}"), blk, 0, 1, 0.0);
        row.w = yw.into_iter().map(|(r, c, v)| (r, c, -v)).collect();
        let row = bld.block_entry(format!("Q_def:{label}"), blk, 0, 2, 0.0);
        row.w = ybw.into_iter().map(|(r, c, v)| (r, c, -v)).collect();
        flow_blocks.push((f, blk));
    }

    let n_gen = model.n_gen();
    let a: Vec<f64> = model
        .gen_buses
        .iter()
        .map(|g| g.c0 + g.c1 * case.buses[g.bus].pd)
        .collect();
    let b: Vec<f64> = model
        .gen_buses
        .iter()
        .map(|g| g.c2.max(0.0).sqrt() * case.buses[g.bus].pd)
        .collect();
    let cost_scale = if n_gen == 0 {
        1.0
    } else {
        let total: f64 = model
            .gen_buses
            .iter()
            .map(|g| g.c2.abs() * g.pmax * g.pmax + g.c1.abs() * g.pmax.abs() + g.c0.abs())
            .sum();
        (total / n_gen as f64).max(1.0)
    };
    let mut alpha = Vec::new();
    let mut alpha_shift = Vec::new();
    let mut cost_blocks = vec![None; n_gen];
    if objective == RelaxationObjective::Cost {
        for (g, gb) in model.gen_buses.iter().enumerate() {
            let id = case.buses[gb.bus].id;
            let al = bld.var(format!("alpha:{id}"));
            alpha.push(al);
            let yk = bld.w(&model.flows.yk[gb.bus]);
            let c2 = gb.c2 / cost_scale;
            let c1 = gb.c1 / cost_scale;
            let ak = a[g] / cost_scale;
            // α_k is stored as α_k + shift so that it stays nonnegative
            let shift = (-cost_floor(gb) / cost_scale).max(0.0);
            alpha_shift.push(shift);
            if c2 > 0.0 {
                let blk = bld.block(2);
                cost_blocks[g] = Some(blk);
                bld.block_entry(format!("cost[00]:{id}"), blk, 0, 0, 1.0);
                let r = c2.sqrt();
                let row = bld.block_entry(format!("cost[01]:{id}"), blk, 0, 1, r * case.buses[gb.bus].pd);
                row.w = yk.iter().map(|&(i, j, v)| (i, j, -r * v)).collect();
                let row = bld.block_entry(format!("cost[11]:{id}"), blk, 1, 1, -ak - shift);
                row.w = yk.iter().map(|&(i, j, v)| (i, j, c1 * v)).collect();
                row.lin.push((al, -1.0));
            } else {
                // α ≥ c1 (tr(Y_k W) + Pd) + c0
                let w = yk.iter().map(|&(i, j, v)| (i, j, -c1 * v)).collect();
                bld.inequality(format!("cost:{id}"), w, vec![(al, 1.0)], ak + shift, false);
            }
        }
    }

    let mut aux = None;
    let mut square_blocks = Vec::new();
    if let Some(range) = slack.clone() {
        match norm {
            Norm::L1 => {}
            Norm::Linf => {
                let t = bld.var("t".into());
                aux = Some(t);
                for i in range.clone() {
                    let name = format!("eps:{}", bld.lin_names[i]);
                    bld.inequality(name, Vec::new(), vec![(i, 1.0), (t, -1.0)], 0.0, true);
                }
            }
            Norm::L2 => {
                for i in range.clone() {
                    let blk = bld.block(2);
                    square_blocks.push(blk);
                    let name = bld.lin_names[i].clone();
                    bld.block_entry(format!("sq[00]:{name}"), blk, 0, 0, 1.0);
                    bld.block_entry(format!("sq[01]:{name}"), blk, 0, 1, 0.0).lin.push((i, -1.0));
                }
            }
        }
        if let Some(ub) = budget {
            let mut row = RelaxationRow::new("budget", if norm == Norm::L2 { ub * ub } else { ub });
            match norm {
                Norm::L1 => row.lin = range.clone().map(|i| (i, 1.0)).collect(),
                Norm::Linf => row.lin = vec![(aux.expect("ℓ∞ auxiliary"), 1.0)],
                Norm::L2 => row.blocks = square_blocks.iter().map(|&b| (b, 1, 1, 1.0)).collect(),
            }
            let e = bld.var("e:budget".into());
            row.lin.push((e, 1.0));
            row.surplus = Some((e, 1.0));
            bld.rows.push(row);
        }
    }

    // Assembly.
    let w_dim = 2 * n - 1;
    let mut sdp = SdpProblem::new(Vec::new());
    sdp.add_block(w_dim, BlockKind::Psd);
    sdp.add_block(bld.lin_names.len().max(1), BlockKind::Nonneg);
    for &size in &bld.blocks {
        sdp.add_block(size, BlockKind::Psd);
    }
    let lin_dim = sdp.blocks[LIN_BLOCK].size;
    let lin_obj: Vec<(usize, usize, f64)> = match objective {
        RelaxationObjective::Cost => alpha.iter().map(|&i| (i, i, 1.0)).collect(),
        RelaxationObjective::SlackNorm(Norm::L1) => {
            slack.clone().unwrap_or(0..0).map(|i| (i, i, 1.0)).collect()
        }
        RelaxationObjective::SlackNorm(Norm::Linf) => aux.map(|t| (t, t, 1.0)).into_iter().collect(),
        RelaxationObjective::SlackNorm(Norm::L2) => Vec::new(),
    };
    sdp.objective[LIN_BLOCK] = SymMatrix::from_upper(lin_dim, lin_obj);
    if objective == RelaxationObjective::SlackNorm(Norm::L2) {
        for &blk in &square_blocks {
            sdp.objective[blk] = SymMatrix::from_upper(2, [(1, 1, 1.0)]);
        }
    }
    for row in &bld.rows {
        let mut coefs = Vec::new();
        if !row.w.is_empty() {
            coefs.push((W_BLOCK, SymMatrix::from_upper(w_dim, row.w.iter().copied())));
        }
        if !row.lin.is_empty() {
            coefs.push((
                LIN_BLOCK,
                SymMatrix::from_upper(lin_dim, row.lin.iter().map(|&(i, v)| (i, i, v))),
            ));
        }
        for &(blk, r, c, v) in &row.blocks {
            coefs.push((blk, SymMatrix::from_upper(sdp.blocks[blk].size, [(r, c, v)])));
        }
        // Merge repeated blocks (budget over several square blocks never
        // repeats, but keep the representation canonical).
        coefs.sort_by_key(|c| c.0);
        sdp.constraints.push(SdpConstraint { coefs, rhs: row.rhs });
    }
    sdp.validate()?;

    Ok(RelaxationModel {
        sdp,
        rows: bld.rows,
        n,
        ref_bus: model.ref_bus,
        objective,
        norm: slacked.then_some(norm),
        budget,
        alpha,
        alpha_shift,
        slack,
        aux,
        square_blocks,
        flow_blocks,
        cost_blocks,
        a,
        b,
        cost_scale,
        lin_names: bld.lin_names,
    })
}

impl RelaxationModel {
    /// Objective in problem units from an SDP objective value.
    pub fn unscale(&self, v: f64) -> f64 {
        match self.objective {
            RelaxationObjective::Cost => (v - self.alpha_shift.iter().sum::<f64>()) * self.cost_scale,
            RelaxationObjective::SlackNorm(Norm::L2) => v.max(0.0).sqrt(),
            RelaxationObjective::SlackNorm(_) => v,
        }
    }

    /// Lifts voltages and slacks into an SDP point: `W = x xᵀ`, blocks and
    /// surpluses filled so that every equality row holds.
    pub fn lift(&self, model: &AcopfModel, x: &[f64], slacks: &[f64]) -> Vec<DMatrix<f64>> {
        let n = self.n;
        let mut out: Vec<DMatrix<f64>> = self
            .sdp
            .blocks
            .iter()
            .map(|b| DMatrix::zeros(b.size, b.size))
            .collect();
        let xr: Vec<f64> = (0..2 * n)
            .filter(|&i| w_index(n, self.ref_bus, i).is_some())
            .map(|i| x[i])
            .collect();
        let xv = nalgebra::DVector::from_vec(xr);
        out[W_BLOCK] = &xv * xv.transpose();
        let lin = &mut out[LIN_BLOCK];
        if let Some(r) = &self.slack {
            for (k, i) in r.clone().enumerate() {
                lin[(i, i)] = slacks[k];
            }
        }
        if let Some(t) = self.aux {
            lin[(t, t)] = slacks.iter().fold(0.0f64, |m, v| m.max(*v));
        }
        for (g, gb) in model.gen_buses.iter().enumerate() {
            let pg = model.flows.yk[gb.bus].quad_form(x) + model.case.buses[gb.bus].pd;
            let c2 = gb.c2 / self.cost_scale;
            let cost = (gb.c2 * pg * pg + gb.c1 * pg + gb.c0) / self.cost_scale;
            if let Some(&al) = self.alpha.get(g) {
                out[LIN_BLOCK][(al, al)] = cost + self.alpha_shift[g];
            }
            if let Some(blk) = self.cost_blocks[g] {
                let r = c2.sqrt() * pg;
                out[blk] = DMatrix::from_row_slice(2, 2, &[1.0, r, r, r * r]);
            }
        }
        for &(f, blk) in &self.flow_blocks {
            let fl = &model.flows.flows[f];
            let s = model.flow_limit(f).unwrap_or(0.0);
            let p = fl.y.quad_form(x);
            let q = fl.ybar.quad_form(x);
            out[blk] = DMatrix::from_row_slice(3, 3, &[s, p, q, p, s, 0.0, q, 0.0, s]);
        }
        if let Some(r) = &self.slack {
            for (k, &blk) in self.square_blocks.iter().enumerate() {
                let s = out[LIN_BLOCK][(r.start + k, r.start + k)];
                out[blk] = DMatrix::from_row_slice(2, 2, &[1.0, s, s, s * s]);
            }
        }
        for (i, row) in self.rows.iter().enumerate() {
            if let Some((e, coef)) = row.surplus {
                let rest = self.sdp.constraint_value(i, &out);
                out[LIN_BLOCK][(e, e)] = (row.rhs - rest) / coef;
            }
        }
        out
    }

    /// Largest equality residual and most negative surplus at an SDP point.
    pub fn violation(&self, point: &[DMatrix<f64>]) -> (f64, f64) {
        let eq = (0..self.rows.len())
            .map(|i| (self.sdp.constraint_value(i, point) - self.rows[i].rhs).abs())
            .fold(0.0, f64::max);
        let lin = &point[LIN_BLOCK];
        let neg = (0..lin.nrows()).map(|i| lin[(i, i)]).fold(0.0f64, f64::min);
        (eq, neg)
    }
}

/// Smallest generation cost over `[Pmin, Pmax]`.
fn cost_floor(gb: &GenBus) -> f64 {
    let f = |p: f64| gb.c2 * p * p + gb.c1 * p + gb.c0;
    let mut m = f(gb.pmin).min(f(gb.pmax));
    if gb.c2 > 0.0 {
        let p = -gb.c1 / (2.0 * gb.c2);
        if p > gb.pmin && p < gb.pmax {
            m = m.min(f(p));
        }
    }
    m
}

/// Leading rank-one factor of a symmetric matrix: `√λ₁ v₁` and `λ₂ / λ₁`.
pub fn leading_rank_one(w: &DMatrix<f64>) -> (Vec<f64>, f64) {
    let eig = w.clone().symmetric_eigen();
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let l1 = eig.eigenvalues[order[0]];
    if l1 <= 0.0 {
        return (vec![0.0; w.nrows()], 1.0);
    }
    let l2 = order.get(1).map_or(0.0, |&i| eig.eigenvalues[i].max(0.0));
    let v = eig.eigenvectors.column(order[0]);
    (v.iter().map(|c| c * l1.sqrt()).collect(), l2 / l1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    /// Voltages `(Re V, Im V)` with the reference angle zero.
    pub x: Vec<f64>,
    /// `χ̃` with injections and flows recomputed from `x`.
    pub chi: Vec<f64>,
    pub rank1_gap: f64,
    pub slacks: Vec<f64>,
    /// Primal and dual objectives in problem units.
    pub objective: f64,
    pub dual_objective: f64,
}

pub fn extract_candidate(
    relax: &RelaxationModel,
    model: &AcopfModel,
    sol: &SdpSolution,
) -> Result<Candidate> {
    if !matches!(sol.status, SdpStatus::Optimal | SdpStatus::NearOptimal) {
        return Err(Error::NotSolved);
    }
    let n = relax.n;
    let (v, gap) = leading_rank_one(&sol.x[W_BLOCK]);
    let mut x = vec![0.0; 2 * n];
    for i in 0..2 * n {
        if let Some(j) = w_index(n, relax.ref_bus, i) {
            x[i] = v[j];
        }
    }
    if x[relax.ref_bus] < 0.0 {
        x.iter_mut().for_each(|c| *c = -*c);
    }
    let slacks = relax
        .slack
        .clone()
        .map(|r| r.map(|i| sol.x[LIN_BLOCK][(i, i)].max(0.0)).collect())
        .unwrap_or_default();
    Ok(Candidate {
        chi: model.complete_point(&x),
        x,
        rank1_gap: gap,
        slacks,
        objective: relax.unscale(sol.primal_objective),
        dual_objective: relax.unscale(sol.dual_objective),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rank_one_is_recovered() {
        let v = nalgebra::DVector::from_vec(vec![1.0, -2.0, 0.5]);
        let (x, gap) = leading_rank_one(&(&v * v.transpose()));
        let sign = x[0].signum();
        for (a, b) in x.iter().zip(v.iter()) {
            assert!((a * sign - b).abs() < 1e-12);
        }
        assert!(gap.abs() < 1e-12);
    }

    #[test]
    fn identity_is_maximally_ambiguous() {
        let (_, gap) = leading_rank_one(&DMatrix::identity(2, 2));
        assert!((gap - 1.0).abs() < 1e-12);
    }

    #[test]
    fn reference_imaginary_part_is_dropped() {
        assert_eq!(w_index(3, 1, 0), Some(0));
        assert_eq!(w_index(3, 1, 4), None);
        assert_eq!(w_index(3, 1, 5), Some(4));
    }

    #[test]
    fn zero_flow_block_is_psd_iff_limit_nonnegative() {
        for s in [0.0, 1.0, -1.0] {
            let m = DMatrix::<f64>::from_diagonal_element(3, 3, s);
            let min = m.symmetric_eigenvalues().min();
            assert_eq!(min >= 0.0, s >= 0.0);
        }
    }
}
