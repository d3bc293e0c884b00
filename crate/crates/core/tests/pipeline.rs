mod common;

use common::run;
use feasproj_core::pipeline::{Backend, PipelineRun, Stage, StageReport};
use feasproj_core::pop::Norm;

const INSTANCES: [(&str, Option<&str>); 3] =
    [("case9", Some("P70")), ("case14", Some("P70")), ("case9", None)];

fn stage(run: &PipelineRun, s: Stage) -> Option<&StageReport> {
    run.reports.iter().find(|r| r.stage == s)
}

#[test]
fn sdp_stage1_bound_is_below_nlp_stage1() {
    for (name, p) in INSTANCES {
        for norm in [Norm::L1, Norm::Linf, Norm::L2] {
            let nlp = run(name, p, norm, Backend::Nlp);
            let sdp = run(name, p, norm, Backend::Sdp);
            let lb = stage(&sdp, Stage::S1).and_then(|r| r.lb).unwrap();
            let ub = stage(&nlp, Stage::S1).unwrap().slack_norm;
            assert!(lb <= ub + 1e-5, "{name} {p:?} {norm:?}: {lb} > {ub}");
        }
    }
}

#[test]
fn stage2_respects_the_stage1_budget() {
    let mut failures = 0;
    for (name, p) in INSTANCES {
        for norm in [Norm::L1, Norm::Linf, Norm::L2] {
            for backend in [Backend::Nlp, Backend::Sdp] {
                let r = run(name, p, norm, backend);
                let ub1 = stage(&r, Stage::S1).unwrap().slack_norm;
                let Some(s2) = stage(&r, Stage::S2) else { continue };
                if s2.point.is_none() {
                    continue;
                }
                let ok = s2.slack_norm <= ub1 * (1.0 + 1e-8);
                println!(
                    "{} {name} {p:?} {norm:?} {backend:?}: {} vs {ub1}",
                    if ok { "ok  " } else { "over" },
                    s2.slack_norm
                );
                failures += usize::from(!ok);
            }
        }
    }
    assert_eq!(failures, 0);
}

#[test]
fn sdp_stage2_bound_is_below_nlp_stage2() {
    for (name, p) in INSTANCES {
        let nlp = run(name, p, Norm::L1, Backend::Nlp);
        let sdp = run(name, p, Norm::L1, Backend::Sdp);
        let (Some(a), Some(b)) = (stage(&sdp, Stage::S2), stage(&nlp, Stage::S2)) else {
            continue;
        };
        let lb = a.lb.unwrap();
        assert!(lb <= b.objective * (1.0 + 1e-5), "{name} {p:?}: {lb} > {}", b.objective);
    }
}

#[test]
fn linf_stage1_is_below_l1() {
    for (name, p) in INSTANCES {
        for backend in [Backend::Nlp, Backend::Sdp] {
            let l1 = stage(&run(name, p, Norm::L1, backend), Stage::S1).unwrap().slack_norm;
            let li = stage(&run(name, p, Norm::Linf, backend), Stage::S1).unwrap().slack_norm;
            assert!(li <= l1 + 1e-6, "{name} {p:?} {backend:?}: {li} > {l1}");
        }
    }
}

#[test]
fn pipeline_is_deterministic() {
    for backend in [Backend::Nlp, Backend::Sdp] {
        let mut a = run("case14", Some("P70"), Norm::L1, backend);
        let mut b = run("case14", Some("P70"), Norm::L1, backend);
        for r in a.reports.iter_mut().chain(b.reports.iter_mut()) {
            r.wall_ms = 0;
        }
        assert_eq!(a.reports, b.reports, "{backend:?}");
        assert_eq!(a.verdict, b.verdict);
        assert_eq!(a.certificate, b.certificate);
    }
}
