//! Dense primal-dual interior-point method for block semidefinite programs
//!
//! ```text
//! min  Σ_j ⟨C_j, X_j⟩   s.t.  Σ_j ⟨A_ij, X_j⟩ = b_i,   X_j ⪰ 0
//! max  bᵀy              s.t.  C_j − Σ_i y_i A_ij = S_j ⪰ 0
//! ```
//!
//! Search directions are HKM with a Mehrotra predictor-corrector; the start
//! is infeasible. Nonnegative blocks are diagonal PSD blocks stored as vectors.

use std::fmt;
use std::io::Write;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quadratic::SymMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BlockKind {
    Psd,
    Nonneg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub size: usize,
    pub kind: BlockKind,
}

/// `Σ_j ⟨A_j, X_j⟩ = rhs`; blocks not listed have zero coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct SdpConstraint {
    pub coefs: Vec<(usize, SymMatrix)>,
    pub rhs: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SdpProblem {
    pub blocks: Vec<BlockSpec>,
    /// One cost matrix per block. Nonnegative blocks use the diagonal only.
    pub objective: Vec<SymMatrix>,
    pub constraints: Vec<SdpConstraint>,
}

impl SdpProblem {
    pub fn new(blocks: Vec<BlockSpec>) -> Self {
        let objective = blocks.iter().map(|b| SymMatrix::zeros(b.size)).collect();
        Self {
            blocks,
            objective,
            constraints: Vec::new(),
        }
    }

    pub fn add_block(&mut self, size: usize, kind: BlockKind) -> usize {
        self.blocks.push(BlockSpec { size, kind });
        self.objective.push(SymMatrix::zeros(size));
        self.blocks.len() - 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks.is_empty() || self.blocks.iter().any(|b| b.size == 0) {
            return Err(Error::InconsistentDimensions("every block needs size ≥ 1".into()));
        }
        if self.constraints.is_empty() {
            return Err(Error::InconsistentDimensions("at least one constraint is required".into()));
        }
        if self.objective.len() != self.blocks.len() {
            return Err(Error::InconsistentDimensions("one cost matrix per block".into()));
        }
        let check = |blk: usize, m: &SymMatrix| -> Result<()> {
            let spec = self
                .blocks
                .get(blk)
                .ok_or_else(|| Error::InconsistentDimensions(format!("unknown block {blk}")))?;
            if m.dim() != spec.size {
                return Err(Error::DimensionMismatch {
                    expected: spec.size,
                    got: m.dim(),
                });
            }
            if spec.kind == BlockKind::Nonneg && m.entries().iter().any(|e| e.0 != e.1) {
                return Err(Error::InconsistentDimensions(format!(
                    "nonnegative block {blk} has an off-diagonal coefficient"
                )));
            }
            if m.entries().iter().any(|e| !e.2.is_finite()) {
                return Err(Error::NonFiniteEncountered(format!("block {blk} coefficients")));
            }
            Ok(())
        };
        for (j, c) in self.objective.iter().enumerate() {
            check(j, c)?;
        }
        for con in &self.constraints {
            if !con.rhs.is_finite() {
                return Err(Error::NonFiniteEncountered("right-hand side".into()));
            }
            for (blk, m) in &con.coefs {
                check(*blk, m)?;
            }
        }
        Ok(())
    }

    /// Writes the problem in SDPA sparse format. Our primal is SDPA's dual
    /// with `F_0 = −C`, `F_i = A_i` and `c = b`; nonnegative blocks carry a
    /// negative size. Indices are 1-based, upper triangle only.
    pub fn write_dump<W: Write>(&self, mut sink: W) -> Result<()> {
        writeln!(sink, "{}", self.constraints.len())?;
        writeln!(sink, "{}", self.blocks.len())?;
        let sizes: Vec<String> = self
            .blocks
            .iter()
            .map(|b| match b.kind {
                BlockKind::Psd => b.size.to_string(),
                BlockKind::Nonneg => format!("-{}", b.size),
            })
            .collect();
        writeln!(sink, "{}", sizes.join(" "))?;
        let rhs: Vec<String> = self.constraints.iter().map(|c| format!("{:e}", c.rhs)).collect();
        writeln!(sink, "{}", rhs.join(" "))?;
        for (j, c) in self.objective.iter().enumerate() {
            for &(r, col, v) in c.entries() {
                writeln!(sink, "0 {} {} {} {:e}", j + 1, r + 1, col + 1, -v)?;
            }
        }
        for (i, con) in self.constraints.iter().enumerate() {
            for (j, m) in &con.coefs {
                for &(r, col, v) in m.entries() {
                    writeln!(sink, "{} {} {} {} {:e}", i + 1, j + 1, r + 1, col + 1, v)?;
                }
            }
        }
        Ok(())
    }

    /// `Σ_j ⟨C_j, X_j⟩` for dense blocks.
    pub fn objective_value(&self, x: &[DMatrix<f64>]) -> f64 {
        self.objective
            .iter()
            .zip(x)
            .map(|(c, xb)| c.trace_with(xb))
            .sum()
    }

    /// `Σ_j ⟨A_ij, X_j⟩` for dense blocks.
    pub fn constraint_value(&self, i: usize, x: &[DMatrix<f64>]) -> f64 {
        self.constraints[i]
            .coefs
            .iter()
            .map(|(j, a)| a.trace_with(&x[*j]))
            .sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SdpStatus {
    Optimal,
    NearOptimal,
    InfeasibleCertificate,
    UnboundedCertificate,
    NumericalFailure,
}

impl fmt::Display for SdpStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SdpStatus::Optimal => "optimal",
            SdpStatus::NearOptimal => "near_optimal",
            SdpStatus::InfeasibleCertificate => "infeasible_certificate",
            SdpStatus::UnboundedCertificate => "unbounded_certificate",
            SdpStatus::NumericalFailure => "numerical_failure",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SdpOptions {
    pub tol: f64,
    pub max_iterations: usize,
    /// Largest Schur complement order attempted.
    pub max_schur_dim: usize,
}

impl Default for SdpOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iterations: 100,
            max_schur_dim: 4000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SdpIterate {
    pub iter: usize,
    pub primal_objective: f64,
    pub dual_objective: f64,
    /// `⟨X, S⟩`.
    pub complementarity: f64,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub step_primal: f64,
    pub step_dual: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SdpSolution {
    pub status: SdpStatus,
    /// Primal blocks; nonnegative blocks as diagonal matrices.
    pub x: Vec<DMatrix<f64>>,
    pub y: Vec<f64>,
    pub s: Vec<DMatrix<f64>>,
    pub primal_objective: f64,
    pub dual_objective: f64,
    /// `|pobj − dobj| / (1 + |pobj| + |dobj|)`.
    pub gap: f64,
    /// `‖b − A(X)‖ / (1 + ‖b‖)`.
    pub primal_residual: f64,
    /// `‖C − Aᵀy − S‖ / (1 + ‖C‖)`.
    pub dual_residual: f64,
    pub iterations: usize,
    pub history: Vec<SdpIterate>,
    /// Constraints removed as linearly dependent; their `y` entries are 0.
    pub dropped_rows: Vec<usize>,
}

pub fn solve_sdp(p: &SdpProblem, tol: f64) -> Result<SdpSolution> {
    solve_sdp_with(
        p,
        &SdpOptions {
            tol,
            ..SdpOptions::default()
        },
    )
}

/// Block value: dense symmetric matrix or diagonal stored as a vector.
#[derive(Debug, Clone)]
enum Val {
    M(DMatrix<f64>),
    V(DVector<f64>),
}

impl Val {
    fn dot(&self, o: &Val) -> f64 {
        match (self, o) {
            (Val::M(a), Val::M(b)) => a.dot(b),
            (Val::V(a), Val::V(b)) => a.dot(b),
            _ => unreachable!("block kinds agree"),
        }
    }

    fn norm_sq(&self) -> f64 {
        match self {
            Val::M(a) => a.norm_squared(),
            Val::V(a) => a.norm_squared(),
        }
    }

    fn axpy(&mut self, a: f64, o: &Val) {
        match (self, o) {
            (Val::M(x), Val::M(y)) => *x += y * a,
            (Val::V(x), Val::V(y)) => *x += y * a,
            _ => unreachable!("block kinds agree"),
        }
    }

    fn to_dense(&self) -> DMatrix<f64> {
        match self {
            Val::M(a) => a.clone(),
            Val::V(v) => DMatrix::from_diagonal(v),
        }
    }
}

fn dot_all(a: &[Val], b: &[Val]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.dot(y)).sum()
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let t = m.transpose();
    *m += t;
    *m *= 0.5;
}

/// Constraint data of one block in both-triangle form.
struct BlockData {
    n: usize,
    psd: bool,
    cost: Vec<(usize, usize, f64)>,
    /// `(row, entries)` for every constraint touching the block.
    rows: Vec<(usize, Vec<(usize, usize, f64)>)>,
    /// Union of `(q, p)` slots over all constraint entries.
    slots: Vec<(usize, usize)>,
    /// Per touching row: `(slot, a)` with entry `(p, q, a)` mapped to slot `(q, p)`.
    row_slots: Vec<Vec<(usize, f64)>>,
}

fn full_entries(m: &SymMatrix) -> Vec<(usize, usize, f64)> {
    let mut out = Vec::with_capacity(2 * m.nnz());
    for &(r, c, v) in m.entries() {
        out.push((r, c, v));
        if r != c {
            out.push((c, r, v));
        }
    }
    out
}

struct Data {
    blocks: Vec<BlockData>,
    b: DVector<f64>,
    m: usize,
    /// Row multipliers applied to `A_i` and `b_i`.
    scale: Vec<f64>,
}

impl Data {
    /// With `normalize`, every row is divided by its Frobenius norm.
    fn new(p: &SdpProblem, keep: &[usize], normalize: bool) -> Self {
        let mut blocks: Vec<BlockData> = p
            .blocks
            .iter()
            .zip(&p.objective)
            .map(|(spec, c)| BlockData {
                n: spec.size,
                psd: spec.kind == BlockKind::Psd,
                cost: full_entries(c),
                rows: Vec::new(),
                slots: Vec::new(),
                row_slots: Vec::new(),
            })
            .collect();
        let mut scale = vec![1.0; keep.len()];
        for (new_i, &i) in keep.iter().enumerate() {
            let coefs = &p.constraints[i].coefs;
            if normalize {
                let nrm = coefs.iter().map(|(_, a)| a.frobenius_dot(a)).sum::<f64>().sqrt();
                if nrm > 0.0 {
                    scale[new_i] = 1.0 / nrm;
                }
            }
            for (j, a) in coefs {
                if !a.is_empty() {
                    let mut e = full_entries(a);
                    e.iter_mut().for_each(|t| t.2 *= scale[new_i]);
                    blocks[*j].rows.push((new_i, e));
                }
            }
        }
        for blk in &mut blocks {
            let mut slot_of = vec![usize::MAX; blk.n * blk.n];
            for (_, entries) in &blk.rows {
                let mut list = Vec::with_capacity(entries.len());
                for &(p, q, a) in entries {
                    let key = q * blk.n + p;
                    if slot_of[key] == usize::MAX {
                        slot_of[key] = blk.slots.len();
                        blk.slots.push((q, p));
                    }
                    list.push((slot_of[key], a));
                }
                blk.row_slots.push(list);
            }
        }
        let b = DVector::from_iterator(
            keep.len(),
            keep.iter().zip(&scale).map(|(&i, s)| p.constraints[i].rhs * s),
        );
        Data {
            blocks,
            b,
            m: keep.len(),
            scale,
        }
    }

    fn zeros(&self) -> Vec<Val> {
        self.blocks
            .iter()
            .map(|b| {
                if b.psd {
                    Val::M(DMatrix::zeros(b.n, b.n))
                } else {
                    Val::V(DVector::zeros(b.n))
                }
            })
            .collect()
    }

    fn identity(&self, scale: &[f64]) -> Vec<Val> {
        self.blocks
            .iter()
            .zip(scale)
            .map(|(b, &s)| {
                if b.psd {
                    Val::M(DMatrix::identity(b.n, b.n) * s)
                } else {
                    Val::V(DVector::from_element(b.n, s))
                }
            })
            .collect()
    }

    fn cost(&self) -> Vec<Val> {
        let mut c = self.zeros();
        for (blk, v) in self.blocks.iter().zip(&mut c) {
            for &(p, q, a) in &blk.cost {
                match v {
                    Val::M(m) => m[(p, q)] += a,
                    Val::V(d) => d[p] += a,
                }
            }
        }
        c
    }

    /// `A(K)_i = Σ ⟨A_i, K⟩`; `K` need not be symmetric.
    fn apply(&self, k: &[Val]) -> DVector<f64> {
        let mut out = DVector::zeros(self.m);
        for (blk, kv) in self.blocks.iter().zip(k) {
            for (i, entries) in &blk.rows {
                let mut s = 0.0;
                match kv {
                    Val::M(m) => {
                        for &(p, q, a) in entries {
                            s += a * m[(p, q)];
                        }
                    }
                    Val::V(d) => {
                        for &(p, _, a) in entries {
                            s += a * d[p];
                        }
                    }
                }
                out[*i] += s;
            }
        }
        out
    }

    /// `Aᵀy = Σ y_i A_i`.
    fn adjoint(&self, y: &DVector<f64>) -> Vec<Val> {
        let mut out = self.zeros();
        for (blk, v) in self.blocks.iter().zip(&mut out) {
            for (i, entries) in &blk.rows {
                let yi = y[*i];
                if yi == 0.0 {
                    continue;
                }
                for &(p, q, a) in entries {
                    match v {
                        Val::M(m) => m[(p, q)] += yi * a,
                        Val::V(d) => d[p] += yi * a,
                    }
                }
            }
        }
        out
    }

    /// `G_ij = ⟨A_i, A_j⟩`.
    fn gram(&self) -> DMatrix<f64> {
        let mut gram = DMatrix::<f64>::zeros(self.m, self.m);
        for blk in &self.blocks {
            let mut by_slot: Vec<Vec<(usize, f64)>> = vec![Vec::new(); blk.slots.len()];
            for (ir, (i, _)) in blk.rows.iter().enumerate() {
                for &(u, a) in &blk.row_slots[ir] {
                    by_slot[u].push((*i, a));
                }
            }
            for list in &by_slot {
                for &(i, a) in list {
                    for &(j, b) in list {
                        gram[(i, j)] += a * b;
                    }
                }
            }
        }
        gram
    }

    /// HKM Schur complement `M_ij = Σ_blocks ⟨A_i, X A_j S⁻¹⟩`.
    fn schur(&self, x: &[Val], sinv: &[Val]) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.m, self.m);
        for (blk, (xv, sv)) in self.blocks.iter().zip(x.iter().zip(sinv)) {
            match (xv, sv) {
                (Val::M(xm), Val::M(si)) => {
                    let mut k = vec![0.0; blk.slots.len()];
                    for (j, entries) in &blk.rows {
                        // K[q, p] = Σ_{(r, s, b) ∈ A_j} b X[q, r] S⁻¹[s, p]
                        for (u, &(q, p)) in blk.slots.iter().enumerate() {
                            let mut acc = 0.0;
                            for &(r, s, b) in entries {
                                acc += b * xm[(q, r)] * si[(s, p)];
                            }
                            k[u] = acc;
                        }
                        for (ir, (i, _)) in blk.rows.iter().enumerate() {
                            if *i > *j {
                                continue;
                            }
                            let mut v = 0.0;
                            for &(u, a) in &blk.row_slots[ir] {
                                v += a * k[u];
                            }
                            m[(*i, *j)] += v;
                        }
                    }
                }
                (Val::V(xd), Val::V(sd)) => {
                    let mut dense: Vec<Vec<(usize, f64)>> = Vec::with_capacity(blk.rows.len());
                    for (_, entries) in &blk.rows {
                        dense.push(entries.iter().map(|&(p, _, a)| (p, a)).collect());
                    }
                    let w: Vec<f64> = (0..blk.n).map(|k| xd[k] * sd[k]).collect();
                    let mut acc = vec![0.0; blk.n];
                    for (jr, (j, _)) in blk.rows.iter().enumerate() {
                        for &(p, a) in &dense[jr] {
                            acc[p] += a * w[p];
                        }
                        for (ir, (i, _)) in blk.rows.iter().enumerate() {
                            if *i > *j {
                                continue;
                            }
                            let v: f64 = dense[ir].iter().map(|&(p, a)| a * acc[p]).sum();
                            m[(*i, *j)] += v;
                        }
                        for &(p, _) in &dense[jr] {
                            acc[p] = 0.0;
                        }
                    }
                }
                _ => unreachable!("block kinds agree"),
            }
        }
        for j in 0..self.m {
            for i in 0..j {
                m[(j, i)] = m[(i, j)];
            }
        }
        m
    }
}

/// Keeps a maximal linearly independent subset of constraints (pivoted
/// Cholesky on the Gram matrix). Returns kept and dropped indices, or an
/// infeasibility flag when a dropped row has an inconsistent right-hand side.
fn presolve(p: &SdpProblem) -> (Vec<usize>, Vec<usize>, bool) {
    let m = p.constraints.len();
    let all: Vec<usize> = (0..m).collect();
    let data = Data::new(p, &all, false);
    let gram = data.gram();
    let maxdiag = (0..m).fold(0.0f64, |a, i| a.max(gram[(i, i)]));
    let tol = 1e-12 * maxdiag.max(1e-300);
    // Greedy pivoted Cholesky.
    let mut l = DMatrix::<f64>::zeros(m, m);
    let mut d: Vec<f64> = (0..m).map(|i| gram[(i, i)]).collect();
    let mut chosen: Vec<usize> = Vec::new();
    let mut remaining: Vec<usize> = (0..m).collect();
    loop {
        let Some((pos, &piv)) = remaining
            .iter()
            .enumerate()
            .max_by(|a, b| d[*a.1].total_cmp(&d[*b.1]).then(b.1.cmp(a.1)))
        else {
            break;
        };
        if d[piv] <= tol {
            break;
        }
        remaining.swap_remove(pos);
        let k = chosen.len();
        let root = d[piv].sqrt();
        for &i in &remaining {
            let mut v = gram[(i, piv)];
            for t in 0..k {
                v -= l[(i, t)] * l[(piv, t)];
            }
            l[(i, k)] = v / root;
            d[i] -= l[(i, k)] * l[(i, k)];
        }
        l[(piv, k)] = root;
        chosen.push(piv);
    }
    chosen.sort_unstable();
    let mut dropped = remaining;
    dropped.sort_unstable();
    if dropped.is_empty() {
        return (chosen, dropped, false);
    }
    // Consistency: b_i must equal the combination of kept right-hand sides.
    let kk = DMatrix::from_fn(chosen.len(), chosen.len(), |a, b| gram[(chosen[a], chosen[b])]);
    let bk = DVector::from_iterator(chosen.len(), chosen.iter().map(|&i| p.constraints[i].rhs));
    let mut inconsistent = false;
    if let Some(ch) = Cholesky::new(kk) {
        for &i in &dropped {
            let gi = DVector::from_iterator(chosen.len(), chosen.iter().map(|&k| gram[(k, i)]));
            let coef = ch.solve(&gi);
            let bi = p.constraints[i].rhs;
            if (coef.dot(&bk) - bi).abs() > 1e-8 * (1.0 + bi.abs() + bk.amax()) {
                inconsistent = true;
            }
        }
    } else if chosen.is_empty() {
        inconsistent = dropped.iter().any(|&i| p.constraints[i].rhs != 0.0);
    }
    (chosen, dropped, inconsistent)
}

/// Largest step `α ≤ 1/γ`-free bound keeping `X + αΔX ⪰ 0`; `∞` if unbounded.
fn max_step(x: &Val, dx: &Val) -> Result<f64> {
    match (x, dx) {
        (Val::M(xm), Val::M(dm)) => {
            let ch = Cholesky::new(xm.clone())
                .ok_or_else(|| Error::LinearAlgebraFailure("iterate lost definiteness".into()))?;
            let l = ch.l();
            let t = l
                .solve_lower_triangular(dm)
                .ok_or_else(|| Error::LinearAlgebraFailure("triangular solve".into()))?;
            let mut w = l
                .solve_lower_triangular(&t.transpose())
                .ok_or_else(|| Error::LinearAlgebraFailure("triangular solve".into()))?;
            symmetrize(&mut w);
            let lmin = w.symmetric_eigenvalues().min();
            Ok(if lmin < 0.0 { -1.0 / lmin } else { f64::INFINITY })
        }
        (Val::V(xv), Val::V(dv)) => Ok(xv
            .iter()
            .zip(dv.iter())
            .filter(|(_, d)| **d < 0.0)
            .map(|(x, d)| -x / d)
            .fold(f64::INFINITY, f64::min)),
        _ => unreachable!("block kinds agree"),
    }
}

fn inverse(s: &Val) -> Result<Val> {
    match s {
        Val::M(m) => {
            let ch = Cholesky::new(m.clone())
                .ok_or_else(|| Error::LinearAlgebraFailure("dual iterate lost definiteness".into()))?;
            let mut inv = ch.inverse();
            symmetrize(&mut inv);
            Ok(Val::M(inv))
        }
        Val::V(v) => Ok(Val::V(v.map(|a| 1.0 / a))),
    }
}

/// Cholesky factor of `D M D` with `D = diag(M)^{-1/2}`, regularized on
/// failure.
struct SchurFactor {
    chol: Cholesky<f64, Dyn>,
    d: DVector<f64>,
}

impl SchurFactor {
    fn solve(&self, rhs: &DVector<f64>) -> DVector<f64> {
        let mut v = rhs.component_mul(&self.d);
        self.chol.solve_mut(&mut v);
        v.component_mul(&self.d)
    }
}

fn factor_schur(m: &DMatrix<f64>) -> Option<SchurFactor> {
    let n = m.nrows();
    let d = DVector::from_iterator(
        n,
        (0..n).map(|i| {
            let v = m[(i, i)];
            if v > 0.0 { 1.0 / v.sqrt() } else { 1.0 }
        }),
    );
    let scaled = DMatrix::from_fn(n, n, |i, j| m[(i, j)] * d[i] * d[j]);
    let mut reg = 1e-12;
    for _ in 0..4 {
        let mut r = scaled.clone();
        for i in 0..n {
            r[(i, i)] += reg;
        }
        if let Some(chol) = Cholesky::new(r) {
            return Some(SchurFactor { chol, d });
        }
        reg *= 100.0;
    }
    None
}

#[derive(Clone, Copy)]
struct Measures {
    pobj: f64,
    dobj: f64,
    gap: f64,
    pinf: f64,
    dinf: f64,
    xs: f64,
}

impl Measures {
    fn score(&self) -> f64 {
        self.gap.max(self.pinf).max(self.dinf)
    }
}

/// Iterate kept for non-optimal exits.
struct Snapshot {
    x: Vec<Val>,
    y: DVector<f64>,
    s: Vec<Val>,
    it: usize,
    meas: Measures,
}

/// The better of the current iterate and `best`.
fn settle<'a>(
    best: &'a Option<Snapshot>,
    x: &'a [Val],
    y: &'a DVector<f64>,
    s: &'a [Val],
    it: usize,
    meas: &'a Measures,
) -> (&'a [Val], &'a DVector<f64>, &'a [Val], usize, &'a Measures) {
    match best {
        Some(b) if b.meas.score() < meas.score() => (&b.x, &b.y, &b.s, b.it, &b.meas),
        _ => (x, y, s, it, meas),
    }
}

pub fn solve_sdp_with(p: &SdpProblem, opts: &SdpOptions) -> Result<SdpSolution> {
    p.validate()?;
    if !(opts.tol > 0.0) || opts.max_iterations == 0 {
        return Err(Error::InvalidOptions("SDP tolerance and iteration budget must be positive".into()));
    }
    let (keep, dropped, inconsistent) = presolve(p);
    if keep.len() > opts.max_schur_dim {
        return Err(Error::ResourceLimit(format!(
            "Schur complement of order {} exceeds the dense limit {}",
            keep.len(),
            opts.max_schur_dim
        )));
    }
    let data = Data::new(p, &keep, true);
    let c = data.cost();
    let total_n: usize = data.blocks.iter().map(|b| b.n).sum();
    let b_norm = data.b.norm();
    let c_norm = c.iter().map(Val::norm_sq).sum::<f64>().sqrt();

    let full = |x: &[Val], y: &DVector<f64>, s: &[Val], status: SdpStatus, it: usize, hist: Vec<SdpIterate>, meas: &Measures| {
        let mut y_full = vec![0.0; p.constraints.len()];
        for (k, &i) in keep.iter().enumerate() {
            y_full[i] = y[k] * data.scale[k];
        }
        SdpSolution {
            status,
            x: x.iter().map(Val::to_dense).collect(),
            y: y_full,
            s: s.iter().map(Val::to_dense).collect(),
            primal_objective: meas.pobj,
            dual_objective: meas.dobj,
            gap: meas.gap,
            primal_residual: meas.pinf,
            dual_residual: meas.dinf,
            iterations: it,
            history: hist,
            dropped_rows: dropped.clone(),
        }
    };

    // Infeasible start scaled to the data.
    let mut xi = Vec::with_capacity(data.blocks.len());
    let mut eta = Vec::with_capacity(data.blocks.len());
    for (blk, cv) in data.blocks.iter().zip(&c) {
        let n = blk.n as f64;
        let mut ratio: f64 = 0.0;
        let mut amax: f64 = 0.0;
        for (i, entries) in &blk.rows {
            let an = entries.iter().map(|e| e.2 * e.2).sum::<f64>().sqrt();
            ratio = ratio.max((1.0 + data.b[*i].abs()) / (1.0 + an));
            amax = amax.max(an);
        }
        xi.push(10f64.max(n.sqrt()).max(n * ratio));
        eta.push(10f64.max(n.sqrt()).max(amax).max(cv.norm_sq().sqrt()));
    }
    let mut x = data.identity(&xi);
    let mut s = data.identity(&eta);
    let mut y = DVector::zeros(data.m);

    let measure = |x: &[Val], y: &DVector<f64>, s: &[Val]| -> (Measures, DVector<f64>, Vec<Val>) {
        let rp = &data.b - data.apply(x);
        let mut rd = c.clone();
        let aty = data.adjoint(y);
        for ((r, a), sv) in rd.iter_mut().zip(&aty).zip(s) {
            r.axpy(-1.0, a);
            r.axpy(-1.0, sv);
        }
        let pobj = dot_all(&c, x);
        let dobj = data.b.dot(y);
        let m = Measures {
            pobj,
            dobj,
            gap: (pobj - dobj).abs() / (1.0 + pobj.abs() + dobj.abs()),
            pinf: rp.norm() / (1.0 + b_norm),
            dinf: rd.iter().map(Val::norm_sq).sum::<f64>().sqrt() / (1.0 + c_norm),
            xs: dot_all(x, s),
        };
        (m, rp, rd)
    };

    let near = |m: &Measures| m.gap.max(m.pinf).max(m.dinf) <= opts.tol.sqrt().min(1e-4) * 10.0;
    let mut history = Vec::new();
    let mut gamma = 0.9;

    let (mut meas, mut rp, mut rd) = measure(&x, &y, &s);
    if inconsistent {
        return Ok(full(&x, &y, &s, SdpStatus::InfeasibleCertificate, 0, history, &meas));
    }
    let mut stall = 0;
    let mut best: Option<Snapshot> = None;
    for it in 0..opts.max_iterations {
        if meas.gap <= opts.tol && meas.pinf <= opts.tol && meas.dinf <= opts.tol {
            return Ok(full(&x, &y, &s, SdpStatus::Optimal, it, history, &meas));
        }
        // Certificates of infeasibility along diverging iterates.
        let aty_s = {
            let mut v = data.adjoint(&y);
            for (a, sv) in v.iter_mut().zip(&s) {
                a.axpy(1.0, sv);
            }
            v.iter().map(Val::norm_sq).sum::<f64>().sqrt()
        };
        if meas.dobj > 0.0 && aty_s / meas.dobj < opts.tol && meas.dobj > 1e6 * (1.0 + c_norm) {
            return Ok(full(&x, &y, &s, SdpStatus::InfeasibleCertificate, it, history, &meas));
        }
        let ax = data.apply(&x).norm();
        if meas.pobj < 0.0 && ax / (-meas.pobj) < opts.tol && -meas.pobj > 1e6 * (1.0 + b_norm) {
            return Ok(full(&x, &y, &s, SdpStatus::UnboundedCertificate, it, history, &meas));
        }

        let mu = meas.xs / total_n as f64;
        let sinv: Vec<Val> = match s.iter().map(inverse).collect::<Result<Vec<_>>>() {
            Ok(v) => v,
            Err(e) => {
                {
                let (bx, by, bs, bit, bm) = settle(&best, &x, &y, &s, it, &meas);
                return finish_early(near(bm), e, full(bx, by, bs, SdpStatus::NearOptimal, bit, history, bm));
            }
            }
        };
        let schur = data.schur(&x, &sinv);
        let Some(chol) = factor_schur(&schur) else {
            let (bx, by, bs, bit, bm) = settle(&best, &x, &y, &s, it, &meas);
            return finish_early(
                near(bm),
                Error::LinearAlgebraFailure("Schur complement is singular beyond regularization".into()),
                full(bx, by, bs, SdpStatus::NearOptimal, bit, history, bm),
            );
        };
        // X R_d S⁻¹ term shared by predictor and corrector.
        let xrs: Vec<Val> = x
            .iter()
            .zip(rd.iter().zip(&sinv))
            .map(|(xv, (r, si))| match (xv, r, si) {
                (Val::M(a), Val::M(b), Val::M(c)) => Val::M(a * b * c),
                (Val::V(a), Val::V(b), Val::V(c)) => Val::V(a.component_mul(b).component_mul(c)),
                _ => unreachable!("block kinds agree"),
            })
            .collect();
        let a_xrs = data.apply(&xrs);

        let direction = |rc: &[Val]| -> (Vec<Val>, DVector<f64>, Vec<Val>) {
            let rhs = &rp - data.apply(rc) + &a_xrs;
            let mut dy = chol.solve(&rhs);
            // Iterative refinement against the unregularized system.
            for _ in 0..3 {
                let r = &rhs - &schur * &dy;
                if r.amax() <= 1e-15 * (1.0 + rhs.amax()) {
                    break;
                }
                dy += chol.solve(&r);
            }
            let mut ds = rd.clone();
            for (d, a) in ds.iter_mut().zip(data.adjoint(&dy)) {
                d.axpy(-1.0, &a);
            }
            let dx: Vec<Val> = rc
                .iter()
                .zip(x.iter().zip(ds.iter().zip(&sinv)))
                .map(|(r, (xv, (d, si)))| match (r, xv, d, si) {
                    (Val::M(r), Val::M(a), Val::M(d), Val::M(si)) => {
                        let mut m = r - a * d * si;
                        symmetrize(&mut m);
                        Val::M(m)
                    }
                    (Val::V(r), Val::V(a), Val::V(d), Val::V(si)) => {
                        Val::V(r - a.component_mul(d).component_mul(si))
                    }
                    _ => unreachable!("block kinds agree"),
                })
                .collect();
            (dx, dy, ds)
        };
        let steps = |dx: &[Val], ds: &[Val]| -> Result<(f64, f64)> {
            let mut ap = f64::INFINITY;
            let mut ad = f64::INFINITY;
            for (xv, d) in x.iter().zip(dx) {
                ap = ap.min(max_step(xv, d)?);
            }
            for (sv, d) in s.iter().zip(ds) {
                ad = ad.min(max_step(sv, d)?);
            }
            Ok((ap, ad))
        };

        // Predictor.
        let rc_aff: Vec<Val> = x
            .iter()
            .map(|v| match v {
                Val::M(a) => Val::M(-a),
                Val::V(a) => Val::V(-a),
            })
            .collect();
        let (dx_a, _, ds_a) = direction(&rc_aff);
        let (ap, ad) = match steps(&dx_a, &ds_a) {
            Ok(v) => v,
            Err(e) => {
                let (bx, by, bs, bit, bm) = settle(&best, &x, &y, &s, it, &meas);
                return finish_early(near(bm), e, full(bx, by, bs, SdpStatus::NearOptimal, bit, history, bm));
            }
        };
        let (ap, ad) = (ap.min(1.0), ad.min(1.0));
        let mut xa = x.clone();
        let mut sa = s.clone();
        for (v, d) in xa.iter_mut().zip(&dx_a) {
            v.axpy(ap, d);
        }
        for (v, d) in sa.iter_mut().zip(&ds_a) {
            v.axpy(ad, d);
        }
        let mu_aff = dot_all(&xa, &sa) / total_n as f64;
        let sigma = (mu_aff / mu).clamp(0.0, 1.0).powi(3);

        // Corrector.
        let rc: Vec<Val> = x
            .iter()
            .zip(sinv.iter().zip(dx_a.iter().zip(&ds_a)))
            .map(|(xv, (si, (dxa, dsa)))| match (xv, si, dxa, dsa) {
                (Val::M(a), Val::M(si), Val::M(dxa), Val::M(dsa)) => {
                    Val::M(si * (sigma * mu) - a - dxa * dsa * si)
                }
                (Val::V(a), Val::V(si), Val::V(dxa), Val::V(dsa)) => {
                    Val::V(si * (sigma * mu) - a - dxa.component_mul(dsa).component_mul(si))
                }
                _ => unreachable!("block kinds agree"),
            })
            .collect();
        let (dx, dy, ds) = direction(&rc);
        let (ap_max, ad_max) = match steps(&dx, &ds) {
            Ok(v) => v,
            Err(e) => {
                let (bx, by, bs, bit, bm) = settle(&best, &x, &y, &s, it, &meas);
                return finish_early(near(bm), e, full(bx, by, bs, SdpStatus::NearOptimal, bit, history, bm));
            }
        };
        let ap = (gamma * ap_max).min(1.0);
        let ad = (gamma * ad_max).min(1.0);
        for (v, d) in x.iter_mut().zip(&dx) {
            v.axpy(ap, d);
        }
        for (v, d) in s.iter_mut().zip(&ds) {
            v.axpy(ad, d);
        }
        y += dy * ad;
        gamma = 0.9 + 0.09 * ap.min(ad);

        let (m2, rp2, rd2) = measure(&x, &y, &s);
        meas = m2;
        rp = rp2;
        rd = rd2;
        history.push(SdpIterate {
            iter: it + 1,
            primal_objective: meas.pobj,
            dual_objective: meas.dobj,
            complementarity: meas.xs,
            primal_residual: meas.pinf,
            dual_residual: meas.dinf,
            step_primal: ap,
            step_dual: ad,
        });
        if !(meas.pobj.is_finite() && meas.dobj.is_finite() && meas.xs.is_finite()) {
            return Ok(full(&x, &y, &s, SdpStatus::NumericalFailure, it + 1, history, &meas));
        }
        stall = if ap.max(ad) < 1e-8 { stall + 1 } else { 0 };
        if meas.score() < best.as_ref().map_or(f64::INFINITY, |b| b.meas.score()) {
            best = Some(Snapshot {
                x: x.clone(),
                y: y.clone(),
                s: s.clone(),
                it: it + 1,
                meas,
            });
        }
        if stall >= 3 {
            let (bx, by, bs, bit, bm) = settle(&best, &x, &y, &s, it + 1, &meas);
            let status = if near(bm) {
                SdpStatus::NearOptimal
            } else {
                SdpStatus::NumericalFailure
            };
            return Ok(full(bx, by, bs, status, bit, history, bm));
        }
    }
    if meas.gap <= opts.tol && meas.pinf <= opts.tol && meas.dinf <= opts.tol {
        return Ok(full(&x, &y, &s, SdpStatus::Optimal, opts.max_iterations, history, &meas));
    }
    let (bx, by, bs, bit, bm) = settle(&best, &x, &y, &s, opts.max_iterations, &meas);
    if near(bm) {
        return Ok(full(bx, by, bs, SdpStatus::NearOptimal, bit, history, bm));
    }
    Err(Error::IterationLimit(opts.max_iterations))
}

fn finish_early(near: bool, err: Error, sol: SdpSolution) -> Result<SdpSolution> {
    if near {
        Ok(sol)
    } else {
        Err(err)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sym(n: usize, e: &[(usize, usize, f64)]) -> SymMatrix {
        SymMatrix::from_upper(n, e.iter().copied())
    }

    #[test]
    fn minimum_eigenvalue() {
        let mut p = SdpProblem::new(vec![BlockSpec { size: 2, kind: BlockKind::Psd }]);
        p.objective[0] = sym(2, &[(0, 0, 1.0), (1, 1, 2.0)]);
        p.constraints.push(SdpConstraint {
            coefs: vec![(0, sym(2, &[(0, 0, 1.0), (1, 1, 1.0)]))],
            rhs: 1.0,
        });
        let s = solve_sdp(&p, 1e-9).unwrap();
        assert_eq!(s.status, SdpStatus::Optimal);
        assert!((s.primal_objective - 1.0).abs() < 1e-7);
        assert!((s.x[0][(0, 0)] - 1.0).abs() < 1e-6 && s.x[0][(1, 1)].abs() < 1e-6);
    }

    #[test]
    fn two_by_two_determinant() {
        // max t  s.t. [[1, t], [t, 1]] ⪰ 0
        let mut p = SdpProblem::new(vec![BlockSpec { size: 2, kind: BlockKind::Psd }]);
        p.objective[0] = sym(2, &[(0, 1, -0.5)]);
        p.constraints.push(SdpConstraint { coefs: vec![(0, sym(2, &[(0, 0, 1.0)]))], rhs: 1.0 });
        p.constraints.push(SdpConstraint { coefs: vec![(0, sym(2, &[(1, 1, 1.0)]))], rhs: 1.0 });
        let s = solve_sdp(&p, 1e-9).unwrap();
        assert_eq!(s.status, SdpStatus::Optimal);
        assert!((s.x[0][(0, 1)] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn linear_program_in_a_nonnegative_block() {
        // min x0 + 2 x1  s.t. x0 + x1 = 1, x ≥ 0
        let mut p = SdpProblem::new(vec![BlockSpec { size: 2, kind: BlockKind::Nonneg }]);
        p.objective[0] = sym(2, &[(0, 0, 1.0), (1, 1, 2.0)]);
        p.constraints.push(SdpConstraint {
            coefs: vec![(0, sym(2, &[(0, 0, 1.0), (1, 1, 1.0)]))],
            rhs: 1.0,
        });
        let s = solve_sdp(&p, 1e-9).unwrap();
        assert_eq!(s.status, SdpStatus::Optimal);
        assert!((s.primal_objective - 1.0).abs() < 1e-7);
        assert_eq!(s.x[0][(0, 1)], 0.0);
    }

    #[test]
    fn duplicated_rows_are_dropped() {
        let mut p = SdpProblem::new(vec![BlockSpec { size: 2, kind: BlockKind::Psd }]);
        p.objective[0] = sym(2, &[(0, 0, 1.0), (1, 1, 2.0)]);
        let row = SdpConstraint { coefs: vec![(0, sym(2, &[(0, 0, 1.0), (1, 1, 1.0)]))], rhs: 1.0 };
        p.constraints.push(row.clone());
        p.constraints.push(SdpConstraint {
            coefs: vec![(0, row.coefs[0].1.scaled(2.0))],
            rhs: 2.0,
        });
        let s = solve_sdp(&p, 1e-9).unwrap();
        assert_eq!(s.dropped_rows.len(), 1);
        assert_eq!(s.status, SdpStatus::Optimal);

        p.constraints[1].rhs = 3.0;
        let s = solve_sdp(&p, 1e-9).unwrap();
        assert_eq!(s.status, SdpStatus::InfeasibleCertificate);
    }

    #[test]
    fn negative_trace_is_infeasible() {
        let mut p = SdpProblem::new(vec![BlockSpec { size: 2, kind: BlockKind::Psd }]);
        p.objective[0] = sym(2, &[(0, 0, 1.0)]);
        p.constraints.push(SdpConstraint {
            coefs: vec![(0, sym(2, &[(0, 0, 1.0), (1, 1, 1.0)]))],
            rhs: -1.0,
        });
        let s = solve_sdp(&p, 1e-8).unwrap();
        assert_eq!(s.status, SdpStatus::InfeasibleCertificate);
    }

    #[test]
    fn unbounded_off_diagonal() {
        let mut p = SdpProblem::new(vec![BlockSpec { size: 2, kind: BlockKind::Psd }]);
        p.objective[0] = sym(2, &[(0, 1, -0.5)]);
        p.constraints.push(SdpConstraint { coefs: vec![(0, sym(2, &[(0, 0, 1.0)]))], rhs: 1.0 });
        let s = solve_sdp(&p, 1e-8).unwrap();
        assert_eq!(s.status, SdpStatus::UnboundedCertificate);
    }

    #[test]
    fn size_guard_is_a_clean_error() {
        let mut p = SdpProblem::new(vec![BlockSpec { size: 3, kind: BlockKind::Psd }]);
        for k in 0..3 {
            p.constraints.push(SdpConstraint { coefs: vec![(0, sym(3, &[(k, k, 1.0)]))], rhs: 1.0 });
        }
        let opts = SdpOptions { max_schur_dim: 2, ..SdpOptions::default() };
        assert!(matches!(solve_sdp_with(&p, &opts), Err(Error::ResourceLimit(_))));
    }

    #[test]
    fn dump_lists_every_entry() {
        let mut p = SdpProblem::new(vec![BlockSpec { size: 2, kind: BlockKind::Psd }]);
        p.objective[0] = sym(2, &[(0, 1, -0.5)]);
        p.constraints.push(SdpConstraint { coefs: vec![(0, sym(2, &[(0, 0, 1.0)]))], rhs: 1.0 });
        let mut buf = Vec::new();
        p.write_dump(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0..3], ["1", "1", "2"]);
        assert_eq!(lines[4], "0 1 1 2 5e-1");
        assert_eq!(lines[5], "1 1 1 1 1e0");
    }
}
