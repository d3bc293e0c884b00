//! Augmented Lagrangian solver for quadratically constrained problems.
//!
//! Equalities use the classical quadratic penalty, inequalities the
//! Powell-Hestenes-Rockafellar form. Each subproblem is a bound-constrained
//! minimization solved by projected Newton steps with a binding-set
//! reduction and an Armijo search along the projection arc.

use std::fmt;
use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pop::{PopProblem, Sense};
use crate::quadratic::QuadraticFunction;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NlpOptions {
    pub max_outer_iterations: usize,
    pub max_inner_iterations: usize,
    pub feasibility_tol: f64,
    pub optimality_tol: f64,
    pub initial_penalty: f64,
    pub penalty_growth: f64,
    pub max_penalty: f64,
    /// Record one trace row per outer iteration.
    pub trace: bool,
}

impl Default for NlpOptions {
    fn default() -> Self {
        Self {
            max_outer_iterations: 200,
            max_inner_iterations: 100,
            feasibility_tol: 1e-6,
            optimality_tol: 1e-6,
            initial_penalty: 10.0,
            penalty_growth: 10.0,
            max_penalty: 1e10,
            trace: false,
        }
    }
}

impl NlpOptions {
    fn validate(&self) -> Result<()> {
        if !(self.feasibility_tol > 0.0 && self.optimality_tol > 0.0) {
            return Err(Error::InvalidOptions("tolerances must be positive".into()));
        }
        if !(self.penalty_growth > 1.0) {
            return Err(Error::InvalidOptions("penalty growth must exceed 1".into()));
        }
        if !(self.initial_penalty > 0.0) || self.max_outer_iterations == 0 {
            return Err(Error::InvalidOptions(
                "initial penalty and outer budget must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NlpStatus {
    OptimalLocal,
    MaxIterations,
    InfeasibleLocal,
    NumericalFailure,
}

impl fmt::Display for NlpStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NlpStatus::OptimalLocal => "optimal_local",
            NlpStatus::MaxIterations => "max_iterations",
            NlpStatus::InfeasibleLocal => "infeasible_local",
            NlpStatus::NumericalFailure => "numerical_failure",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iter: usize,
    pub objective: f64,
    pub violation: f64,
    pub penalty: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NlpResult {
    pub status: NlpStatus,
    pub point: Vec<f64>,
    pub objective: f64,
    pub max_violation: f64,
    /// Inner (Newton) iterations over all subproblems.
    pub iterations: usize,
    pub outer_iterations: usize,
    /// Projected gradient norm of the scaled Lagrangian at `point`.
    pub stationarity: f64,
    /// Multipliers `y` with `∇f + Σ yᵢ ∇cᵢ ⟂ box`, one per constraint in
    /// problem order and in the problem's own sign convention.
    pub multipliers: Vec<f64>,
    pub trace: Vec<TraceRow>,
}

/// Writes `iter,objective,violation,penalty` rows.
pub fn write_trace_csv<W: Write>(rows: &[TraceRow], mut sink: W) -> Result<()> {
    writeln!(sink, "iter,objective,violation,penalty")?;
    for r in rows {
        writeln!(sink, "{},{:e},{:e},{:e}", r.iter, r.objective, r.violation, r.penalty)?;
    }
    Ok(())
}

/// Function restricted to its support, for cheap local derivatives.
struct Local {
    idx: Vec<usize>,
    q: Vec<(usize, usize, f64)>,
    c: Vec<(usize, f64)>,
    d: f64,
}

impl Local {
    fn new(f: &QuadraticFunction, scale: f64) -> Self {
        let idx = f.support();
        let pos = |i: usize| idx.binary_search(&i).expect("index in support");
        Self {
            q: f
                .q
                .entries()
                .iter()
                .map(|&(r, c, v)| (pos(r), pos(c), v * scale))
                .collect(),
            c: f.c.iter().map(|&(i, v)| (pos(i), v * scale)).collect(),
            d: f.d * scale,
            idx,
        }
    }

    fn gather(&self, z: &[f64], buf: &mut Vec<f64>) {
        buf.clear();
        buf.extend(self.idx.iter().map(|&i| z[i]));
    }

    fn eval(&self, zl: &[f64]) -> f64 {
        let mut v = self.d;
        for &(i, c) in &self.c {
            v += c * zl[i];
        }
        for &(r, c, a) in &self.q {
            v += if r == c { a * zl[r] * zl[r] } else { 2.0 * a * zl[r] * zl[c] };
        }
        v
    }

    fn grad(&self, zl: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.resize(self.idx.len(), 0.0);
        for &(i, c) in &self.c {
            out[i] += c;
        }
        for &(r, c, a) in &self.q {
            out[r] += 2.0 * a * zl[c];
            if r != c {
                out[c] += 2.0 * a * zl[r];
            }
        }
    }

    fn grad_inf_norm(&self, z: &[f64]) -> f64 {
        let mut zl = Vec::new();
        let mut g = Vec::new();
        self.gather(z, &mut zl);
        self.grad(&zl, &mut g);
        g.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

struct Row {
    f: Local,
    eq: bool,
    /// Scale times the sign that turns `≥` into `≤`.
    factor: f64,
}

struct Scaled {
    obj: Local,
    obj_scale: f64,
    rows: Vec<Row>,
    lower: Vec<f64>,
    upper: Vec<f64>,
}

const SCALE_TARGET: f64 = 100.0;

fn gradient_scale(norm: f64) -> f64 {
    if norm > SCALE_TARGET {
        SCALE_TARGET / norm
    } else {
        1.0
    }
}

impl Scaled {
    fn new(pop: &PopProblem, z0: &[f64]) -> Self {
        let obj_scale = gradient_scale(Local::new(&pop.objective, 1.0).grad_inf_norm(z0));
        let rows = pop
            .constraints
            .iter()
            .map(|c| {
                let w = gradient_scale(Local::new(&c.f, 1.0).grad_inf_norm(z0));
                let sign = if c.sense == Sense::Ge { -1.0 } else { 1.0 };
                Row {
                    f: Local::new(&c.f, w * sign),
                    eq: c.sense == Sense::Eq,
                    factor: w * sign,
                }
            })
            .collect();
        Self {
            obj: Local::new(&pop.objective, obj_scale),
            obj_scale,
            rows,
            lower: pop.lower.clone(),
            upper: pop.upper.clone(),
        }
    }

    fn project(&self, z: &mut [f64]) {
        for (i, v) in z.iter_mut().enumerate() {
            *v = v.max(self.lower[i]).min(self.upper[i]);
        }
    }

    fn constraint_values(&self, z: &[f64]) -> Vec<f64> {
        let mut zl = Vec::new();
        self.rows
            .iter()
            .map(|r| {
                r.f.gather(z, &mut zl);
                r.f.eval(&zl)
            })
            .collect()
    }

    /// Augmented Lagrangian value.
    fn merit(&self, z: &[f64], lam: &[f64], rho: f64) -> f64 {
        let mut zl = Vec::new();
        self.obj.gather(z, &mut zl);
        let mut v = self.obj.eval(&zl);
        for (r, &l) in self.rows.iter().zip(lam) {
            r.f.gather(z, &mut zl);
            let c = r.f.eval(&zl);
            v += if r.eq || l + rho * c > 0.0 {
                l * c + 0.5 * rho * c * c
            } else {
                -0.5 * l * l / rho
            };
        }
        v
    }

    /// Gradient and (optionally) Hessian of the augmented Lagrangian. The
    /// Hessian is assembled only over `free` positions.
    fn derivatives(
        &self,
        z: &[f64],
        lam: &[f64],
        rho: f64,
        free: Option<(&[Option<usize>], usize)>,
    ) -> (Vec<f64>, Option<DMatrix<f64>>) {
        let n = z.len();
        let mut g = vec![0.0; n];
        let mut h = free.map(|(_, m)| DMatrix::<f64>::zeros(m, m));
        let mut zl = Vec::new();
        let mut gl = Vec::new();

        let mut add = |f: &Local, weight: f64, rank1: f64, g: &mut [f64], zl: &mut Vec<f64>| {
            f.gather(z, zl);
            f.grad(zl, &mut gl);
            for (k, &i) in f.idx.iter().enumerate() {
                g[i] += weight * gl[k];
            }
            if let (Some(h), Some((map, _))) = (h.as_mut(), free) {
                for &(r, c, a) in &f.q {
                    let (Some(fr), Some(fc)) = (map[f.idx[r]], map[f.idx[c]]) else {
                        continue;
                    };
                    h[(fr, fc)] += 2.0 * weight * a;
                    if r != c {
                        h[(fc, fr)] += 2.0 * weight * a;
                    }
                }
                if rank1 != 0.0 {
                    for (a, &i) in f.idx.iter().enumerate() {
                        let Some(fi) = map[i] else { continue };
                        for (b, &j) in f.idx.iter().enumerate() {
                            if let Some(fj) = map[j] {
                                h[(fi, fj)] += rank1 * gl[a] * gl[b];
                            }
                        }
                    }
                }
            }
        };

        add(&self.obj, 1.0, 0.0, &mut g, &mut zl);
        for (r, &l) in self.rows.iter().zip(lam) {
            r.f.gather(z, &mut zl);
            let c = r.f.eval(&zl);
            let m = l + rho * c;
            if r.eq {
                add(&r.f, m, rho, &mut g, &mut zl);
            } else if m > 0.0 {
                add(&r.f, m, rho, &mut g, &mut zl);
            }
        }
        (g, h)
    }

    fn projected_gradient_norm(&self, z: &[f64], g: &[f64]) -> f64 {
        z.iter()
            .zip(g)
            .enumerate()
            .map(|(i, (&zi, &gi))| {
                let t = (zi - gi).max(self.lower[i]).min(self.upper[i]);
                (t - zi).abs()
            })
            .fold(0.0, f64::max)
    }

    /// Scaled infeasibility-complementarity measure.
    fn progress_measure(&self, c: &[f64], lam: &[f64], rho: f64) -> f64 {
        self.rows
            .iter()
            .zip(c.iter().zip(lam))
            .map(|(r, (&c, &l))| if r.eq { c.abs() } else { c.max(-l / rho).abs() })
            .fold(0.0, f64::max)
    }
}

enum InnerExit {
    Converged,
    Budget,
    Stalled,
}

struct InnerOutcome {
    iterations: usize,
    pg: f64,
    exit: InnerExit,
}

/// Minimizes the augmented Lagrangian over the box, starting at `z`.
fn minimize_subproblem(
    sp: &Scaled,
    z: &mut Vec<f64>,
    lam: &[f64],
    rho: f64,
    tol: f64,
    max_iter: usize,
    delta_hint: &mut f64,
) -> Result<InnerOutcome> {
    let n = z.len();
    let mut phi = sp.merit(z, lam, rho);
    for it in 0..max_iter {
        let (g, _) = sp.derivatives(z, lam, rho, None);
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteEncountered("augmented Lagrangian gradient".into()));
        }
        let pg = sp.projected_gradient_norm(z, &g);
        if pg <= tol {
            return Ok(InnerOutcome {
                iterations: it,
                pg,
                exit: InnerExit::Converged,
            });
        }
        let eps = pg.min(1e-3);
        let mut map = vec![None; n];
        let mut m = 0;
        for i in 0..n {
            let fixed = sp.lower[i] == sp.upper[i];
            let at_lower = z[i] <= sp.lower[i] + eps && g[i] > 0.0;
            let at_upper = z[i] >= sp.upper[i] - eps && g[i] < 0.0;
            if !(fixed || at_lower || at_upper) {
                map[i] = Some(m);
                m += 1;
            }
        }
        let (_, h) = sp.derivatives(z, lam, rho, Some((&map, m)));
        let h = h.expect("hessian requested");
        let mut gf = DVector::zeros(m);
        for i in 0..n {
            if let Some(k) = map[i] {
                gf[k] = g[i];
            }
        }
        let dir = newton_direction(&h, &gf, delta_hint)?;
        let mut d = vec![0.0; n];
        for i in 0..n {
            if let Some(k) = map[i] {
                d[i] = dir[k];
            }
        }
        let accepted = line_search(sp, z, &g, &d, phi, lam, rho)
            .or_else(|| {
                let sd: Vec<f64> = g.iter().map(|v| -v).collect();
                line_search(sp, z, &g, &sd, phi, lam, rho)
            });
        match accepted {
            Some((znew, phinew)) => {
                *z = znew;
                phi = phinew;
            }
            None => {
                return Ok(InnerOutcome {
                    iterations: it + 1,
                    pg,
                    exit: InnerExit::Stalled,
                })
            }
        }
    }
    let (g, _) = sp.derivatives(z, lam, rho, None);
    Ok(InnerOutcome {
        iterations: max_iter,
        pg: sp.projected_gradient_norm(z, &g),
        exit: InnerExit::Budget,
    })
}

/// Solves `(H + δI) d = −g`, raising `δ` until the Cholesky factorization exists.
fn newton_direction(h: &DMatrix<f64>, g: &DVector<f64>, delta_hint: &mut f64) -> Result<DVector<f64>> {
    let m = g.len();
    if m == 0 {
        return Ok(DVector::zeros(0));
    }
    let diag_scale = (0..m).fold(1e-300f64, |a, i| a.max(h[(i, i)].abs()));
    let mut delta = 0.0;
    for attempt in 0..40 {
        let mut hr = h.clone();
        if delta > 0.0 {
            for i in 0..m {
                hr[(i, i)] += delta;
            }
        }
        if let Some(ch) = hr.cholesky() {
            *delta_hint = if delta > 0.0 { delta / 3.0 } else { *delta_hint / 3.0 };
            return Ok(ch.solve(&(-g)));
        }
        delta = if attempt == 0 {
            delta_hint.max(1e-10 * diag_scale.max(1.0))
        } else {
            delta * 10.0
        };
    }
    Err(Error::LinearAlgebraFailure(
        "no regularization made the reduced Hessian positive definite".into(),
    ))
}

fn line_search(
    sp: &Scaled,
    z: &[f64],
    g: &[f64],
    d: &[f64],
    phi: f64,
    lam: &[f64],
    rho: f64,
) -> Option<(Vec<f64>, f64)> {
    let mut alpha = 1.0;
    let mut trial = vec![0.0; z.len()];
    for _ in 0..50 {
        for i in 0..z.len() {
            trial[i] = z[i] + alpha * d[i];
        }
        sp.project(&mut trial);
        let slope: f64 = g.iter().zip(trial.iter().zip(z)).map(|(gi, (t, zi))| gi * (t - zi)).sum();
        if slope >= 0.0 {
            if trial == z {
                return None;
            }
            alpha *= 0.5;
            continue;
        }
        let val = sp.merit(&trial, lam, rho);
        if val.is_finite() && val <= phi + 1e-4 * slope {
            return Some((trial, val));
        }
        alpha *= 0.5;
    }
    None
}

/// Local minimizer of `pop` from `x0`.
pub fn solve_nlp(pop: &PopProblem, x0: &[f64], opts: &NlpOptions) -> Result<NlpResult> {
    opts.validate()?;
    if x0.len() != pop.dim() {
        return Err(Error::DimensionMismatch {
            expected: pop.dim(),
            got: x0.len(),
        });
    }
    if x0.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteEncountered("initial point".into()));
    }
    if !pop.objective.is_finite() || pop.constraints.iter().any(|c| !c.f.is_finite()) {
        return Err(Error::NonFiniteEncountered("problem data".into()));
    }
    let mut z = x0.to_vec();
    let sp = Scaled::new(pop, &z);
    sp.project(&mut z);

    let m = sp.rows.len();
    let mut lam = vec![0.0; m];
    let mut rho = opts.initial_penalty;
    let mut omega: f64 = 1e-1;
    let mut prev_measure = f64::INFINITY;
    let mut iterations = 0;
    let mut delta_hint = 0.0;
    let mut trace = Vec::new();
    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut status = NlpStatus::MaxIterations;
    let mut stationarity = f64::INFINITY;
    let mut outer = 0;

    while outer < opts.max_outer_iterations {
        outer += 1;
        let inner = match minimize_subproblem(
            &sp,
            &mut z,
            &lam,
            rho,
            omega.max(opts.optimality_tol),
            opts.max_inner_iterations,
            &mut delta_hint,
        ) {
            Ok(o) => o,
            Err(Error::LinearAlgebraFailure(_)) | Err(Error::NonFiniteEncountered(_)) => {
                status = NlpStatus::NumericalFailure;
                break;
            }
            Err(e) => return Err(e),
        };
        iterations += inner.iterations;

        let c = sp.constraint_values(&z);
        let violation = pop.max_violation(&z);
        if !violation.is_finite() {
            status = NlpStatus::NumericalFailure;
            break;
        }
        if best.as_ref().map_or(true, |(v, _)| violation < *v) {
            best = Some((violation, z.clone()));
        }
        if opts.trace {
            trace.push(TraceRow {
                iter: outer,
                objective: pop.objective.eval(&z),
                violation,
                penalty: rho,
            });
        }

        let measure = sp.progress_measure(&c, &lam, rho);
        for (i, r) in sp.rows.iter().enumerate() {
            let v = lam[i] + rho * c[i];
            lam[i] = if r.eq { v } else { v.max(0.0) }.clamp(-1e20, 1e20);
        }
        let mult_scale = (lam.iter().map(|v| v.abs()).sum::<f64>() / (m.max(1) as f64 * SCALE_TARGET)).max(1.0);
        stationarity = inner.pg / mult_scale;

        let converged_inner = !matches!(inner.exit, InnerExit::Budget) || inner.pg <= opts.optimality_tol;
        if violation <= opts.feasibility_tol && stationarity <= opts.optimality_tol && converged_inner {
            status = NlpStatus::OptimalLocal;
            break;
        }
        if matches!(inner.exit, InnerExit::Stalled)
            && violation <= opts.feasibility_tol
            && inner.pg <= 1e3 * opts.optimality_tol
        {
            // Line search can no longer make progress at a feasible point.
            stationarity = inner.pg / mult_scale;
            status = NlpStatus::OptimalLocal;
            break;
        }
        if measure > 0.5 * prev_measure || measure > opts.feasibility_tol && violation > opts.feasibility_tol && rho < 1e2 {
            rho *= opts.penalty_growth;
        }
        prev_measure = measure;
        omega = (omega * 0.1).max(opts.optimality_tol);
        if rho > opts.max_penalty {
            status = if violation > opts.feasibility_tol {
                NlpStatus::InfeasibleLocal
            } else {
                NlpStatus::MaxIterations
            };
            break;
        }
    }

    let violation_now = pop.max_violation(&z);
    if status != NlpStatus::OptimalLocal && (!violation_now.is_finite() || z.iter().any(|v| !v.is_finite())) {
        if let Some((_, bz)) = best.take() {
            z = bz;
        }
    }
    let max_violation = pop.max_violation(&z);
    if status == NlpStatus::OptimalLocal && max_violation > opts.feasibility_tol {
        status = NlpStatus::MaxIterations;
    }
    let multipliers = sp
        .rows
        .iter()
        .zip(&lam)
        .map(|(r, l)| l * r.factor / sp.obj_scale)
        .collect();
    Ok(NlpResult {
        status,
        objective: pop.objective.eval(&z),
        max_violation,
        point: z,
        iterations,
        outer_iterations: outer,
        stationarity,
        multipliers,
        trace,
    })
}
