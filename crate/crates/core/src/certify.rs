//! Newton refinement of quadratic equation systems, Smale's α-test, and the
//! projection of a candidate ACOPF point onto the feasible set.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nlp::{solve_nlp, NlpOptions, NlpResult, NlpStatus};
use crate::pop::{AcopfModel, Constraint, Norm, PopProblem, Segment, Sense};
use crate::quadratic::{QuadraticFunction, SymMatrix};

/// `α₀ = (13 − 3√17)/4`.
pub fn alpha0() -> f64 {
    (13.0 - 3.0 * 17f64.sqrt()) / 4.0
}

/// Relative cutoff below which singular values are treated as zero.
pub const PINV_RTOL: f64 = 1e-10;

/// Square or rectangular system `f: ℝ^m → ℝ^n` of quadratics.
#[derive(Debug, Clone, PartialEq)]
pub struct PolySystem {
    pub equations: Vec<QuadraticFunction>,
    pub dim: usize,
}

impl PolySystem {
    pub fn new(dim: usize, equations: Vec<QuadraticFunction>) -> Result<Self> {
        if let Some(bad) = equations.iter().find(|f| f.dim() != dim) {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: bad.dim(),
            });
        }
        Ok(Self { equations, dim })
    }

    pub fn eval(&self, x: &[f64]) -> Vec<f64> {
        self.equations.iter().map(|f| f.eval(x)).collect()
    }

    pub fn jacobian(&self, x: &[f64]) -> DMatrix<f64> {
        let mut j = DMatrix::zeros(self.equations.len(), self.dim);
        for (r, f) in self.equations.iter().enumerate() {
            for (c, v) in f.gradient_sparse(x) {
                j[(r, c)] = v;
            }
        }
        j
    }

    fn check(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: x.len(),
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteEncountered("Newton iterate".into()));
        }
        Ok(())
    }
}

/// Moore-Penrose pseudoinverse with singular values below
/// `PINV_RTOL · σ_max` dropped. Returns the numerical rank as well.
pub fn pseudo_inverse(a: &DMatrix<f64>) -> Result<(DMatrix<f64>, usize)> {
    let (r, c) = a.shape();
    if r == 0 || c == 0 {
        return Ok((DMatrix::zeros(c, r), 0));
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteEncountered("Jacobian".into()));
    }
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let cut = PINV_RTOL * smax;
    let u = svd.u.as_ref().expect("u requested");
    let vt = svd.v_t.as_ref().expect("v_t requested");
    let mut pinv = DMatrix::zeros(c, r);
    let mut rank = 0;
    for (k, &s) in svd.singular_values.iter().enumerate() {
        if s > cut && s > 0.0 {
            rank += 1;
            pinv += vt.row(k).transpose() * u.column(k).transpose() / s;
        }
    }
    Ok((pinv, rank))
}

#[derive(Debug, Clone, PartialEq)]
pub struct NewtonStep {
    pub point: Vec<f64>,
    pub rank: usize,
    /// Numerical rank is below `min(n, m)`; the step used the truncated
    /// pseudoinverse.
    pub rank_deficient: bool,
}

/// `N_f(x) = x − ∇f(x)† f(x)`.
pub fn newton_step(sys: &PolySystem, x: &[f64]) -> Result<NewtonStep> {
    sys.check(x)?;
    let j = sys.jacobian(x);
    let (pinv, rank) = pseudo_inverse(&j)?;
    let fx = DVector::from_vec(sys.eval(x));
    let dx = &pinv * fx;
    let point: Vec<f64> = x.iter().zip(dx.iter()).map(|(a, d)| a - d).collect();
    if point.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteEncountered("Newton step".into()));
    }
    Ok(NewtonStep {
        point,
        rank,
        rank_deficient: rank < sys.equations.len().min(sys.dim),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaCertificate {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub alpha0: f64,
    pub certified: bool,
    /// `N_f(x)`.
    pub refined_point: Vec<f64>,
    /// `2β`: distance from `x` to the associated zero when certified.
    pub distance_bound: f64,
}

/// Smale's α-test at `x`. For quadratic systems only the second derivative
/// contributes to `γ`; its operator norm is bounded above by the spectral
/// norm of the unfolded `m × m²` tensor `J† · [Q_1 … Q_n]`.
pub fn alpha_test(sys: &PolySystem, x: &[f64]) -> Result<AlphaCertificate> {
    sys.check(x)?;
    let j = sys.jacobian(x);
    let (pinv, _) = pseudo_inverse(&j)?;
    let fx = DVector::from_vec(sys.eval(x));
    let dx = &pinv * fx;
    let beta = dx.norm();
    let refined_point: Vec<f64> = x.iter().zip(dx.iter()).map(|(a, d)| a - d).collect();

    let n = sys.equations.len();
    let supports: Vec<Vec<usize>> = sys.equations.iter().map(|f| f.q.support()).collect();
    let mut gram = DMatrix::zeros(n, n);
    for a in 0..n {
        if sys.equations[a].q.is_empty() {
            continue;
        }
        for b in a..n {
            if sys.equations[b].q.is_empty() || !overlaps(&supports[a], &supports[b]) {
                continue;
            }
            let v = sys.equations[a].q.frobenius_dot(&sys.equations[b].q);
            gram[(a, b)] = v;
            gram[(b, a)] = v;
        }
    }
    let uut = &pinv * gram * pinv.transpose();
    let lmax = uut.symmetric_eigenvalues().max().max(0.0);
    let gamma = lmax.sqrt();
    let alpha = beta * gamma;
    if !alpha.is_finite() {
        return Err(Error::NonFiniteEncountered("α-test".into()));
    }
    let a0 = alpha0();
    Ok(AlphaCertificate {
        alpha,
        beta,
        gamma,
        alpha0: a0,
        certified: alpha <= a0,
        refined_point,
        distance_bound: 2.0 * beta,
    })
}

fn overlaps(a: &[usize], b: &[usize]) -> bool {
    let (mut i, mut j) = (0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => return true,
        }
    }
    false
}

#[derive(Debug, Clone, PartialEq)]
pub struct Refinement {
    pub point: Vec<f64>,
    pub converged: bool,
    /// `‖f(x_i)‖_∞` for `i = 0, 1, …`.
    pub trace: Vec<f64>,
}

/// Iterates the Newton operator until `‖f‖_∞ ≤ tol` or `max_iter` steps.
pub fn newton_refine(sys: &PolySystem, x0: &[f64], max_iter: usize, tol: f64) -> Result<Refinement> {
    sys.check(x0)?;
    let inf = |v: &[f64]| v.iter().fold(0.0f64, |m, a| m.max(a.abs()));
    let mut x = x0.to_vec();
    let mut r = inf(&sys.eval(&x));
    let mut trace = vec![r];
    let mut growth = 0;
    for _ in 0..max_iter {
        if r <= tol {
            break;
        }
        x = newton_step(sys, &x)?.point;
        let next = inf(&sys.eval(&x));
        if !next.is_finite() {
            return Err(Error::Divergence("residual is not finite".into()));
        }
        growth = if next >= 10.0 * r { growth + 1 } else { 0 };
        trace.push(next);
        if growth >= 3 {
            return Err(Error::Divergence(format!(
                "residual grew tenfold three times in a row, now {next:e}"
            )));
        }
        r = next;
    }
    Ok(Refinement {
        converged: r <= tol,
        point: x,
        trace,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage3Mode {
    PowerFlow,
    LeastSquares,
}

/// Where the power-flow controls (generator voltage magnitudes, active
/// injections of non-reference generators) come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlSource {
    /// The candidate point being projected.
    Candidate,
    /// The generator setpoints stored in the case file, with the case's own
    /// voltage profile as Newton start.
    CaseSetpoints,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stage3Options {
    pub mode: Stage3Mode,
    pub norm: Norm,
    pub controls: ControlSource,
    pub max_newton_iterations: usize,
    pub newton_tol: f64,
    /// Largest accepted bound violation after power-flow refinement.
    pub box_tol: f64,
    pub nlp: NlpOptions,
}

impl Default for Stage3Options {
    fn default() -> Self {
        Self {
            mode: Stage3Mode::PowerFlow,
            norm: Norm::L2,
            controls: ControlSource::Candidate,
            max_newton_iterations: 100,
            newton_tol: 1e-9,
            box_tol: 1e-6,
            nlp: NlpOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stage3Outcome {
    pub result: NlpResult,
    /// Method that produced `result`.
    pub mode_used: Stage3Mode,
    /// Newton refinement, when power-flow mode was attempted.
    pub newton: Option<std::result::Result<Refinement, Error>>,
    /// α-test of the power-flow system at the returned voltages.
    pub certificate: Option<AlphaCertificate>,
}

/// Power-flow controls: active setpoint per generator bus and voltage
/// magnitude per generator bus.
#[derive(Debug, Clone, PartialEq)]
pub struct Controls {
    pub pg: Vec<f64>,
    pub vm: Vec<f64>,
}

impl Controls {
    pub fn from_point(model: &AcopfModel, chi: &[f64]) -> Self {
        let n = model.n();
        Self {
            pg: (0..model.n_gen()).map(|g| chi[model.pg(g)]).collect(),
            vm: model
                .gen_buses
                .iter()
                .map(|gb| chi[gb.bus].hypot(chi[n + gb.bus]))
                .collect(),
        }
    }

    pub fn from_case(model: &AcopfModel) -> Self {
        let gens = &model.case.generators;
        Self {
            pg: model
                .gen_buses
                .iter()
                .map(|gb| gb.generators.iter().map(|&i| gens[i].pg).sum())
                .collect(),
            vm: model
                .gen_buses
                .iter()
                .map(|gb| gens[gb.generators[0]].vg)
                .collect(),
        }
    }
}

/// Standard power-flow system over `x`: active balance at every non-reference
/// bus, reactive balance at load buses, voltage magnitude at generator buses,
/// and the reference voltage fixed to `(vm, 0)`.
pub fn power_flow_system(model: &AcopfModel, controls: &Controls) -> Result<PolySystem> {
    let n = model.n();
    let dim = 2 * n;
    let r = model.ref_bus;
    let mut eqs = Vec::with_capacity(dim);
    for k in 0..n {
        let bus = &model.case.buses[k];
        let gen = model.gen_of_bus[k];
        if k == r {
            let g = gen.ok_or_else(|| {
                Error::InvalidRecord("reference bus carries no in-service generator".into())
            })?;
            eqs.push(QuadraticFunction::linear(dim, [(k, 1.0)], -controls.vm[g]));
            eqs.push(QuadraticFunction::linear(dim, [(n + k, 1.0)], 0.0));
            continue;
        }
        let pg = gen.map_or(0.0, |g| controls.pg[g]);
        eqs.push(QuadraticFunction::new(model.flows.yk[k].clone(), [], bus.pd - pg));
        match gen {
            Some(g) => eqs.push(QuadraticFunction::new(
                model.flows.mk[k].clone(),
                [],
                -controls.vm[g] * controls.vm[g],
            )),
            None => eqs.push(QuadraticFunction::new(model.flows.ybar_k[k].clone(), [], bus.qd)),
        }
    }
    PolySystem::new(dim, eqs)
}

/// Projects `chi_tilde` onto the feasible set of `pop`, the unslacked
/// formulation of `model`.
pub fn project_stage3(
    model: &AcopfModel,
    pop: &PopProblem,
    chi_tilde: &[f64],
    opts: &Stage3Options,
) -> Result<Stage3Outcome> {
    if chi_tilde.len() != model.chi_dim() || pop.dim() != model.chi_dim() {
        return Err(Error::DimensionMismatch {
            expected: model.chi_dim(),
            got: chi_tilde.len(),
        });
    }
    let n = model.n();
    if opts.mode == Stage3Mode::PowerFlow {
        let (controls, x0) = match opts.controls {
            ControlSource::Candidate => {
                (Controls::from_point(model, chi_tilde), chi_tilde[..2 * n].to_vec())
            }
            ControlSource::CaseSetpoints => {
                let c = Controls::from_case(model);
                let mut x0 = vec![0.0; 2 * n];
                for (k, bus) in model.case.buses.iter().enumerate() {
                    let vm = model.gen_of_bus[k].map_or(bus.vm, |g| c.vm[g]);
                    x0[k] = vm * bus.va.cos();
                    x0[n + k] = vm * bus.va.sin();
                }
                (c, x0)
            }
        };
        let sys = power_flow_system(model, &controls)?;
        let refined = newton_refine(&sys, &x0, opts.max_newton_iterations, opts.newton_tol);
        if let Ok(ref rf) = refined {
            if rf.converged {
                let chi = model.complete_point(&rf.point);
                let violation = pop.max_violation(&chi);
                if violation <= opts.box_tol {
                    let certificate = alpha_test(&sys, &rf.point).ok();
                    return Ok(Stage3Outcome {
                        result: NlpResult {
                            status: NlpStatus::OptimalLocal,
                            objective: pop.objective.eval(&chi),
                            max_violation: violation,
                            point: chi,
                            iterations: rf.trace.len() - 1,
                            outer_iterations: 0,
                            stationarity: 0.0,
                            multipliers: Vec::new(),
                            trace: Vec::new(),
                        },
                        mode_used: Stage3Mode::PowerFlow,
                        newton: Some(refined),
                        certificate,
                    });
                }
            }
        }
        let mut outcome = least_squares(model, pop, chi_tilde, opts)?;
        outcome.newton = Some(refined);
        return Ok(outcome);
    }
    least_squares(model, pop, chi_tilde, opts)
}

/// `min ‖χ − χ̃‖_p` subject to the constraints of `pop`.
fn least_squares(
    model: &AcopfModel,
    pop: &PopProblem,
    chi_tilde: &[f64],
    opts: &Stage3Options,
) -> Result<Stage3Outcome> {
    let m = chi_tilde.len();
    let mut prob = pop.clone();
    let mut z0: Vec<f64> = chi_tilde.to_vec();
    match opts.norm {
        Norm::L2 => {
            let q = SymMatrix::from_upper(m, (0..m).map(|i| (i, i, 1.0)));
            let c: Vec<(usize, f64)> = (0..m).map(|i| (i, -2.0 * chi_tilde[i])).collect();
            let d = chi_tilde.iter().map(|v| v * v).sum();
            prob.objective = QuadraticFunction::new(q, c, d);
        }
        Norm::L1 | Norm::Linf => {
            let names = match opts.norm {
                Norm::L1 => (0..m).map(|i| format!("dev:{}", pop.layout.name(i))).collect(),
                _ => vec!["dev".to_string()],
            };
            let aux = prob.append_segment(Segment::Aux, names, 0.0, f64::INFINITY);
            let dim = prob.dim();
            for i in 0..m {
                let u = if opts.norm == Norm::L1 { aux.start + i } else { aux.start };
                for (sign, tag) in [(1.0, "+"), (-1.0, "-")] {
                    prob.constraints.push(Constraint::new(
                        QuadraticFunction::linear(dim, [(i, sign), (u, -1.0)], -sign * chi_tilde[i]),
                        Sense::Le,
                        format!("dev{tag}:{}", pop.layout.name(i)),
                    ));
                }
            }
            prob.objective = QuadraticFunction::linear(dim, aux.clone().map(|u| (u, 1.0)), 0.0);
            z0.resize(dim, 0.0);
        }
    }
    let r = solve_nlp(&prob, &z0, &opts.nlp)?;
    let chi = r.point[..m].to_vec();
    let violation = pop.max_violation(&chi);
    let certificate = power_flow_system(model, &Controls::from_point(model, &chi))
        .ok()
        .and_then(|sys| alpha_test(&sys, &chi[..2 * model.n()]).ok());
    Ok(Stage3Outcome {
        result: NlpResult {
            objective: pop.objective.eval(&chi),
            max_violation: violation,
            point: chi,
            ..r
        },
        mode_used: Stage3Mode::LeastSquares,
        newton: None,
        certificate,
    })
}
