//! Three-stage feasibility projection.
//!
//! Stage 1 minimizes a norm of the bound slacks, giving `UB₁` (and `LB₁` from
//! the SDP dual). Stage 2 minimizes cost under `‖s‖ ≤ UB₁`. Stage 3 projects
//! the Stage-2 point onto the bounds widened by its slacks and certifies the
//! result.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::case_io::{apply_perturbation, CaseData, Perturbation};
use crate::certify::{project_stage3, AlphaCertificate, Stage3Options, Stage3Outcome};
use crate::error::{Error, Result};
use crate::nlp::{solve_nlp, write_trace_csv, NlpOptions, NlpResult, NlpStatus};
use crate::pop::{norm_epigraph, AcopfModel, Norm, PopProblem, Segment};
use crate::relaxation::{build_relaxation, extract_candidate, Candidate};
use crate::sdp::{solve_sdp_with, SdpOptions, SdpSolution};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    S1,
    S2,
    S3,
}

impl Stage {
    pub fn number(self) -> u8 {
        match self {
            Stage::S1 => 1,
            Stage::S2 => 2,
            Stage::S3 => 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    Nlp,
    Sdp,
}

impl fmt::Display for Backend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Backend::Nlp => "nlp",
            Backend::Sdp => "sdp",
        })
    }
}

impl FromStr for Backend {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nlp" => Ok(Backend::Nlp),
            "sdp" => Ok(Backend::Sdp),
            other => Err(Error::InvalidOptions(format!("unknown backend `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageReport {
    pub stage: Stage,
    pub backend: Backend,
    pub norm: Norm,
    /// `‖s‖_p` at the stage's point; `UB₁` for Stage 1.
    pub slack_norm: f64,
    /// `LB₁` (SDP dual bound), or the dual objective of a Stage-2 relaxation.
    pub lb: Option<f64>,
    /// Slack budget imposed in Stage 2.
    pub budget: Option<f64>,
    pub objective: f64,
    pub status: String,
    /// `χ` in the layout of the unslacked formulation.
    pub point: Option<Vec<f64>>,
    /// Every slack with its name, in canonical order.
    pub slacks: Option<Vec<(String, f64)>>,
    pub point_file: Option<String>,
    /// Slacks above the run's tolerance, largest first.
    pub nonzero_slacks: Vec<(String, f64)>,
    pub max_violation: Option<f64>,
    /// Projected Lagrangian gradient norm of an NLP stage.
    pub stationarity: Option<f64>,
    /// `λ₂ / λ₁` of the relaxation matrix.
    pub rank1_gap: Option<f64>,
    pub wall_ms: u64,
    /// Per-iteration CSV of the stage's solver, when tracing.
    pub trace: Option<String>,
}

impl StageReport {
    fn new(stage: Stage, backend: Backend, norm: Norm) -> Self {
        Self {
            stage,
            backend,
            norm,
            slack_norm: f64::NAN,
            lb: None,
            budget: None,
            objective: f64::NAN,
            status: String::new(),
            point: None,
            slacks: None,
            point_file: None,
            nonzero_slacks: Vec::new(),
            max_violation: None,
            stationarity: None,
            rank1_gap: None,
            wall_ms: 0,
            trace: None,
        }
    }
}

/// Names of slacks above `tol`, largest first.
pub fn nonzero_slack_names(report: &StageReport, tol: f64) -> Result<Vec<String>> {
    let slacks = report.slacks.as_ref().ok_or(Error::PointUnavailable)?;
    Ok(sorted_nonzero(slacks, tol).into_iter().map(|(n, _)| n).collect())
}

fn sorted_nonzero(slacks: &[(String, f64)], tol: f64) -> Vec<(String, f64)> {
    let mut out: Vec<(String, f64)> = slacks.iter().filter(|(_, v)| *v > tol).cloned().collect();
    out.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOptions {
    pub norm: Norm,
    pub backend: Backend,
    pub nlp: NlpOptions,
    pub sdp: SdpOptions,
    pub stage3: Stage3Options,
    /// `UB₁` at or below this declares the instance feasible as given.
    pub feasibility_tol: f64,
    /// `LB₁` above this declares the instance infeasible.
    pub infeasibility_tol: f64,
    /// Relative inflation of the Stage-2 budget.
    pub budget_slack: f64,
    /// Threshold for reporting a slack as nonzero.
    pub slack_tol: f64,
    /// Largest Stage-3 violation accepted as success.
    pub stage3_tol: f64,
    /// Skip Stages 2 and 3 once the instance is declared infeasible.
    pub stop_on_infeasible: bool,
    /// Keep per-iteration solver traces in the stage reports.
    pub trace: bool,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        Self {
            norm: Norm::L1,
            backend: Backend::Nlp,
            nlp: NlpOptions::default(),
            sdp: SdpOptions::default(),
            stage3: Stage3Options::default(),
            feasibility_tol: 1e-6,
            infeasibility_tol: 1e-6,
            budget_slack: 0.0,
            slack_tol: 1e-6,
            stage3_tol: 1e-6,
            stop_on_infeasible: false,
            trace: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    /// Stage 1 found zero slack.
    Feasible,
    /// Stage 3 returned a feasible point for the slack-widened bounds.
    Repaired,
    /// `LB₁` is strictly positive.
    DeclaredInfeasible,
    StageFailure,
}

impl Verdict {
    pub fn exit_code(self) -> i32 {
        match self {
            Verdict::Feasible | Verdict::Repaired => 0,
            Verdict::DeclaredInfeasible => 2,
            Verdict::StageFailure => 3,
        }
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::Feasible => "feasible",
            Verdict::Repaired => "repaired",
            Verdict::DeclaredInfeasible => "declared_infeasible",
            Verdict::StageFailure => "stage_failure",
        })
    }
}

#[derive(Debug, Clone)]
pub struct PipelineRun {
    pub reports: Vec<StageReport>,
    pub certificate: Option<AlphaCertificate>,
    pub verdict: Verdict,
    pub stage3: Option<Stage3Outcome>,
}

/// Stage artifact handed to the next stage.
struct Artifact {
    chi: Vec<f64>,
    slacks: Vec<f64>,
}

fn elapsed_ms(t: Instant) -> u64 {
    t.elapsed().as_millis() as u64
}

/// Runs Stages 1–3 on `case`, perturbed first when `perturb` is given.
pub fn run_pipeline(
    case: &CaseData,
    perturb: Option<&Perturbation>,
    opts: &PipelineOptions,
) -> Result<PipelineRun> {
    if !(opts.feasibility_tol >= 0.0 && opts.budget_slack >= 0.0 && opts.slack_tol >= 0.0) {
        return Err(Error::InvalidOptions("tolerances and budget slack must be ≥ 0".into()));
    }
    let case = match perturb {
        Some(p) => apply_perturbation(case, p)?,
        None => case.clone(),
    };
    let model = AcopfModel::new(&case)?;
    let op2 = model.build_op2()?;
    let names = model.slack_names();
    let named = |s: &[f64]| -> Vec<(String, f64)> {
        names.iter().cloned().zip(s.iter().copied()).collect()
    };

    let mut reports = Vec::new();
    let mut failed = false;

    // Stage 1.
    let t = Instant::now();
    let mut r1 = StageReport::new(Stage::S1, opts.backend, opts.norm);
    let s1 = match opts.backend {
        Backend::Nlp => stage1_nlp(&model, &op2, opts, &mut r1),
        Backend::Sdp => stage_sdp(&model, None, opts, &mut r1),
    };
    r1.wall_ms = elapsed_ms(t);
    let s1 = match s1 {
        Ok(a) => a,
        Err(e) => {
            r1.status = format!("error: {e}");
            None
        }
    };
    let Some(a1) = s1 else {
        reports.push(r1);
        return Ok(PipelineRun {
            reports,
            certificate: None,
            verdict: Verdict::StageFailure,
            stage3: None,
        });
    };
    r1.slacks = Some(named(&a1.slacks));
    r1.nonzero_slacks = sorted_nonzero(r1.slacks.as_deref().unwrap_or(&[]), opts.slack_tol);
    r1.point = Some(a1.chi.clone());
    let ub1 = r1.slack_norm;
    let feasible = ub1 <= opts.feasibility_tol;
    let declared_infeasible = r1.lb.is_some_and(|lb| lb > opts.infeasibility_tol);
    reports.push(r1);
    if declared_infeasible && opts.stop_on_infeasible {
        return Ok(PipelineRun {
            reports,
            certificate: None,
            verdict: Verdict::DeclaredInfeasible,
            stage3: None,
        });
    }

    // Stage 2.
    let budget = if feasible { 0.0 } else { ub1 * (1.0 + opts.budget_slack) };
    let t = Instant::now();
    let mut r2 = StageReport::new(Stage::S2, opts.backend, opts.norm);
    r2.budget = Some(budget);
    let s2 = match opts.backend {
        Backend::Nlp if feasible => stage2_nlp_unslacked(&model, &op2, &a1, opts, &mut r2),
        Backend::Nlp => stage2_nlp(&model, &op2, &a1, budget, opts, &mut r2),
        Backend::Sdp if feasible => stage2_sdp_unslacked(&model, opts, &mut r2),
        Backend::Sdp => stage_sdp(&model, Some(budget), opts, &mut r2),
    };
    r2.wall_ms = elapsed_ms(t);
    let s2 = s2.unwrap_or_else(|e| {
        r2.status = format!("error: {e}");
        None
    });
    let Some(a2) = s2 else {
        reports.push(r2);
        return Ok(PipelineRun {
            reports,
            certificate: None,
            verdict: if declared_infeasible { Verdict::DeclaredInfeasible } else { Verdict::StageFailure },
            stage3: None,
        });
    };
    r2.slacks = Some(named(&a2.slacks));
    r2.nonzero_slacks = sorted_nonzero(r2.slacks.as_deref().unwrap_or(&[]), opts.slack_tol);
    r2.point = Some(a2.chi.clone());
    reports.push(r2);

    // Stage 3.
    let t = Instant::now();
    let mut r3 = StageReport::new(Stage::S3, opts.backend, opts.norm);
    let slacks = if feasible { vec![0.0; a2.slacks.len()] } else { a2.slacks.clone() };
    let target = widen(&model, &op2, &slacks);
    r3.slack_norm = opts.norm.of(&slacks);
    r3.slacks = Some(named(&slacks));
    r3.nonzero_slacks = sorted_nonzero(r3.slacks.as_deref().unwrap_or(&[]), opts.slack_tol);
    let mut certificate = None;
    let mut stage3 = None;
    match project_stage3(&model, &target, &a2.chi, &opts.stage3) {
        Ok(out) => {
            let ok = out.result.max_violation <= opts.stage3_tol;
            r3.status = format!(
                "{}:{}",
                match out.mode_used {
                    crate::certify::Stage3Mode::PowerFlow => "power_flow",
                    crate::certify::Stage3Mode::LeastSquares => "least_squares",
                },
                if ok { "feasible".to_string() } else { out.result.status.to_string() }
            );
            r3.objective = model.cost(&out.result.point);
            r3.max_violation = Some(out.result.max_violation);
            r3.point = Some(out.result.point.clone());
            certificate = out.certificate.clone();
            failed |= !ok;
            stage3 = Some(out);
        }
        Err(e) => {
            r3.status = format!("error: {e}");
            failed = true;
        }
    }
    r3.wall_ms = elapsed_ms(t);
    reports.push(r3);

    let verdict = if declared_infeasible {
        Verdict::DeclaredInfeasible
    } else if failed {
        Verdict::StageFailure
    } else if feasible {
        Verdict::Feasible
    } else {
        Verdict::Repaired
    };
    Ok(PipelineRun {
        reports,
        certificate,
        verdict,
        stage3,
    })
}

/// Unslacked formulation with every slacked bound moved by its slack value.
pub fn widen(model: &AcopfModel, op2: &PopProblem, slacks: &[f64]) -> PopProblem {
    let mut out = op2.clone();
    for c in &mut out.constraints {
        if let Some((off, coef)) = model.slack_offset(c.kind) {
            c.f.d += coef * slacks[off];
        }
    }
    out
}

/// Slacked problem with its norm epigraph; objective left as the norm.
fn slacked_with_norm(
    model: &AcopfModel,
    op2: &PopProblem,
    norm: Norm,
) -> Result<(PopProblem, crate::pop::NormHandle)> {
    let slacked = model.build_slacked(op2)?;
    let (mut pp, h) = norm_epigraph(&slacked, norm)?;
    pp.objective = h.f.clone();
    Ok((pp, h))
}

fn split(model: &AcopfModel, pp: &PopProblem, z: &[f64]) -> Artifact {
    let s = pp.layout.range(Segment::Slack).expect("slack segment");
    Artifact {
        chi: z[..model.chi_dim()].to_vec(),
        slacks: z[s].iter().map(|v| v.max(0.0)).collect(),
    }
}

fn nlp_options(opts: &PipelineOptions) -> NlpOptions {
    NlpOptions {
        trace: opts.trace || opts.nlp.trace,
        ..opts.nlp.clone()
    }
}

fn nlp_trace(opts: &PipelineOptions, r: &NlpResult) -> Option<String> {
    if !opts.trace {
        return None;
    }
    let mut buf = Vec::new();
    write_trace_csv(&r.trace, &mut buf).ok()?;
    String::from_utf8(buf).ok()
}

fn sdp_trace(opts: &PipelineOptions, sol: &SdpSolution) -> Option<String> {
    if !opts.trace {
        return None;
    }
    let mut out = String::from("iter,primal_objective,dual_objective,complementarity,primal_residual,dual_residual,step_primal,step_dual\n");
    for h in &sol.history {
        out.push_str(&format!(
            "{},{:e},{:e},{:e},{:e},{:e},{:e},{:e}\n",
            h.iter,
            h.primal_objective,
            h.dual_objective,
            h.complementarity,
            h.primal_residual,
            h.dual_residual,
            h.step_primal,
            h.step_dual
        ));
    }
    Some(out)
}

fn nlp_ok(status: NlpStatus) -> bool {
    matches!(status, NlpStatus::OptimalLocal | NlpStatus::MaxIterations)
}

fn stage1_nlp(
    model: &AcopfModel,
    op2: &PopProblem,
    opts: &PipelineOptions,
    report: &mut StageReport,
) -> Result<Option<Artifact>> {
    let (pp, _) = slacked_with_norm(model, op2, opts.norm)?;
    let z0 = model.slacked_start(&pp, &model.flat_start());
    let r = solve_nlp(&pp, &z0, &nlp_options(opts))?;
    report.trace = nlp_trace(opts, &r);
    report.status = r.status.to_string();
    report.max_violation = Some(r.max_violation);
    report.stationarity = Some(r.stationarity);
    let art = split(model, &pp, &r.point);
    report.slack_norm = opts.norm.of(&art.slacks);
    report.objective = report.slack_norm;
    Ok((nlp_ok(r.status) && r.max_violation <= opts.nlp.feasibility_tol).then_some(art))
}

fn stage2_nlp(
    model: &AcopfModel,
    op2: &PopProblem,
    a1: &Artifact,
    budget: f64,
    opts: &PipelineOptions,
    report: &mut StageReport,
) -> Result<Option<Artifact>> {
    let (mut pp, h) = slacked_with_norm(model, op2, opts.norm)?;
    pp.objective = op2.objective.remap(pp.dim(), Some);
    pp.constraints.push(h.budget(budget));
    let mut z0 = a1.chi.clone();
    let s = pp.layout.range(Segment::Slack).expect("slack segment");
    z0.resize(pp.dim(), 0.0);
    z0[s].copy_from_slice(&a1.slacks);
    if let Some(aux) = pp.layout.range(Segment::Aux) {
        z0[aux.start] = a1.slacks.iter().fold(0.0, |m: f64, v| m.max(*v));
    }
    let r = solve_nlp(&pp, &z0, &nlp_options(opts))?;
    report.trace = nlp_trace(opts, &r);
    report.status = r.status.to_string();
    report.max_violation = Some(r.max_violation);
    report.stationarity = Some(r.stationarity);
    let art = split(model, &pp, &r.point);
    report.slack_norm = opts.norm.of(&art.slacks);
    report.objective = model.cost(&art.chi);
    Ok((nlp_ok(r.status) && r.max_violation <= opts.nlp.feasibility_tol).then_some(art))
}

/// Stage 2 with a zero budget: slacks are fixed at zero, which leaves the
/// unslacked formulation.
fn stage2_nlp_unslacked(
    model: &AcopfModel,
    op2: &PopProblem,
    a1: &Artifact,
    opts: &PipelineOptions,
    report: &mut StageReport,
) -> Result<Option<Artifact>> {
    let r = solve_nlp(op2, &a1.chi, &nlp_options(opts))?;
    report.trace = nlp_trace(opts, &r);
    report.status = r.status.to_string();
    report.max_violation = Some(r.max_violation);
    report.stationarity = Some(r.stationarity);
    report.slack_norm = 0.0;
    report.objective = model.cost(&r.point);
    let art = Artifact {
        chi: r.point.clone(),
        slacks: vec![0.0; model.slack_dim()],
    };
    Ok((nlp_ok(r.status) && r.max_violation <= opts.nlp.feasibility_tol).then_some(art))
}

fn stage2_sdp_unslacked(
    model: &AcopfModel,
    opts: &PipelineOptions,
    report: &mut StageReport,
) -> Result<Option<Artifact>> {
    let relax = build_relaxation(model, false, opts.norm, None)?;
    let sol = solve_sdp_with(&relax.sdp, &opts.sdp)?;
    report.status = sol.status.to_string();
    report.trace = sdp_trace(opts, &sol);
    let Ok(c) = extract_candidate(&relax, model, &sol) else {
        return Ok(None);
    };
    report.rank1_gap = Some(c.rank1_gap);
    report.lb = Some(c.dual_objective);
    report.objective = c.objective;
    report.slack_norm = 0.0;
    Ok(Some(Artifact {
        chi: c.chi,
        slacks: vec![0.0; model.slack_dim()],
    }))
}

/// Stage 1 (`budget = None`) or Stage 2 on the relaxation.
fn stage_sdp(
    model: &AcopfModel,
    budget: Option<f64>,
    opts: &PipelineOptions,
    report: &mut StageReport,
) -> Result<Option<Artifact>> {
    let relax = build_relaxation(model, true, opts.norm, budget)?;
    let sol = solve_sdp_with(&relax.sdp, &opts.sdp)?;
    report.status = sol.status.to_string();
    report.trace = sdp_trace(opts, &sol);
    let Ok(Candidate {
        chi,
        rank1_gap,
        slacks,
        objective,
        dual_objective,
        ..
    }) = extract_candidate(&relax, model, &sol)
    else {
        return Ok(None);
    };
    report.rank1_gap = Some(rank1_gap);
    report.lb = Some(dual_objective);
    report.objective = objective;
    report.slack_norm = match budget {
        None => objective,
        Some(_) => opts.norm.of(&slacks),
    };
    Ok(Some(Artifact { chi, slacks }))
}
