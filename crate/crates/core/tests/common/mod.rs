#![allow(dead_code)]

use feasproj_core::case_io::{parse_case, CaseData};
use feasproj_core::pipeline::{run_pipeline, Backend, PipelineOptions, PipelineRun};
use feasproj_core::pop::Norm;

pub const TWO_BUS: &str = "\
function mpc = twobus
mpc.baseMVA = 100;
mpc.bus = [
  1 3 0  0  0 0 1 1 0 230 1 1.1 0.9;
  2 1 50 20 0 0 1 1 0 230 1 1.1 0.9;
];
mpc.gen = [
  1 0 0 100 -100 1 100 1 200 0;
];
mpc.branch = [
  1 2 0.01 0.1 0.02 0 0 0 0 0 1 -360 360;
];
mpc.gencost = [
  2 0 0 3 0.01 10 0;
];
";

pub fn case_path(name: &str) -> String {
    format!("{}/cases/{name}.m", env!("CARGO_MANIFEST_DIR"))
}

pub fn case_text(name: &str) -> String {
    std::fs::read_to_string(case_path(name)).expect("bundled case file")
}

pub fn load(name: &str) -> CaseData {
    parse_case(&case_text(name)).expect("bundled case parses")
}

pub fn run(name: &str, perturb: Option<&str>, norm: Norm, backend: Backend) -> PipelineRun {
    let case = load(name);
    let p = perturb.map(|s| s.parse().expect("known perturbation"));
    let opts = PipelineOptions {
        norm,
        backend,
        ..PipelineOptions::default()
    };
    run_pipeline(&case, p.as_ref(), &opts).expect("pipeline runs")
}

/// Prints the criterion line, uncaptured, and fails the test when `ok` is false.
pub fn verdict(id: u8, title: &str, ok: bool, detail: &str) {
    use std::io::Write;
    let line = format!(
        "criterion {id:>2} [{}] {title}: {detail}\n",
        if ok { "PASS" } else { "FAIL" }
    );
    std::io::stdout().lock().write_all(line.as_bytes()).ok();
    assert!(ok, "criterion {id} failed: {detail}");
}

pub fn rel_close(got: f64, want: f64, rel: f64) -> bool {
    (got - want).abs() <= rel * want.abs()
}
