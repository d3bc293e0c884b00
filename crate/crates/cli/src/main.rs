use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::thread;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use feasproj_core::case_io::{parse_case, write_report, Perturbation};
use feasproj_core::certify::{ControlSource, Stage3Mode};
use feasproj_core::pipeline::{run_pipeline, Backend, PipelineOptions, PipelineRun, Verdict};
use feasproj_core::pop::Norm;

#[derive(Parser)]
#[command(name = "feasproj", version, about = "Feasibility projection for AC optimal power flow")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the three stages on one instance.
    Run(RunArgs),
    /// Run every entry of a JSON manifest, printing one report per line.
    Batch {
        #[arg(long)]
        manifest: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum NormArg {
    L1,
    L2,
    Linf,
}

impl From<NormArg> for Norm {
    fn from(n: NormArg) -> Self {
        match n {
            NormArg::L1 => Norm::L1,
            NormArg::L2 => Norm::L2,
            NormArg::Linf => Norm::Linf,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum BackendArg {
    Nlp,
    Sdp,
}

impl From<BackendArg> for Backend {
    fn from(b: BackendArg) -> Self {
        match b {
            BackendArg::Nlp => Backend::Nlp,
            BackendArg::Sdp => Backend::Sdp,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Stage3Arg {
    #[value(name = "power_flow")]
    PowerFlow,
    #[value(name = "least_squares")]
    LeastSquares,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum ControlsArg {
    Candidate,
    #[value(name = "case_setpoints")]
    CaseSetpoints,
}

#[derive(clap::Args, Clone, Debug, Serialize, Deserialize)]
struct RunArgs {
    /// MATPOWER case file.
    #[arg(long)]
    case: PathBuf,
    /// P70, Q80, V40, P60 or custom:<P|Q|V>,<shrink>[,<grow>].
    #[arg(long)]
    #[serde(default)]
    perturb: Option<String>,
    #[arg(long, value_enum, default_value = "l1")]
    #[serde(default = "default_norm")]
    norm: NormArg,
    #[arg(long, value_enum, default_value = "nlp")]
    #[serde(default = "default_backend")]
    backend: BackendArg,
    #[arg(long, value_enum, default_value = "power_flow")]
    #[serde(default = "default_stage3")]
    stage3: Stage3Arg,
    /// Source of the power-flow controls in Stage 3.
    #[arg(long, value_enum, default_value = "candidate")]
    #[serde(default = "default_controls")]
    controls: ControlsArg,
    /// Relative inflation of the Stage-2 budget.
    #[arg(long, default_value_t = 0.0)]
    #[serde(default)]
    budget_slack: f64,
    /// Report destination; point files are written next to it.
    #[arg(long)]
    #[serde(default)]
    report: Option<PathBuf>,
    /// Print solver iteration traces to stderr.
    #[arg(long)]
    #[serde(default)]
    trace: bool,
}

fn default_norm() -> NormArg {
    NormArg::L1
}

fn default_backend() -> BackendArg {
    BackendArg::Nlp
}

fn default_stage3() -> Stage3Arg {
    Stage3Arg::PowerFlow
}

fn default_controls() -> ControlsArg {
    ControlsArg::Candidate
}

#[derive(Serialize)]
struct PointFile<'a> {
    stage: u8,
    point: &'a [f64],
    slacks: Option<&'a [(String, f64)]>,
}

fn options(args: &RunArgs) -> PipelineOptions {
    let mut opts = PipelineOptions {
        norm: args.norm.into(),
        backend: args.backend.into(),
        budget_slack: args.budget_slack,
        trace: args.trace,
        ..PipelineOptions::default()
    };
    opts.stage3.mode = match args.stage3 {
        Stage3Arg::PowerFlow => Stage3Mode::PowerFlow,
        Stage3Arg::LeastSquares => Stage3Mode::LeastSquares,
    };
    opts.stage3.controls = match args.controls {
        ControlsArg::Candidate => ControlSource::Candidate,
        ControlsArg::CaseSetpoints => ControlSource::CaseSetpoints,
    };
    opts
}

fn instance_name(args: &RunArgs) -> String {
    let stem = args
        .case
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "case".into());
    match &args.perturb {
        Some(p) => format!("{stem}-{p}"),
        None => stem,
    }
}

/// Runs one instance and returns the single-line JSON report with its verdict.
fn execute(args: &RunArgs) -> Result<(String, Verdict)> {
    let text = fs::read_to_string(&args.case)
        .with_context(|| format!("reading {}", args.case.display()))?;
    let case = parse_case(&text).with_context(|| format!("parsing {}", args.case.display()))?;
    let perturb = args
        .perturb
        .as_deref()
        .map(str::parse::<Perturbation>)
        .transpose()?;
    let opts = options(args);
    let mut run = run_pipeline(&case, perturb.as_ref(), &opts)?;
    let name = instance_name(args);
    if let Some(path) = &args.report {
        write_points(&mut run, path)?;
    }
    if args.trace {
        let mut err = io::stderr().lock();
        for r in &run.reports {
            if let Some(t) = &r.trace {
                writeln!(err, "# {name} stage {} {}", r.stage.number(), r.backend)?;
                err.write_all(t.as_bytes())?;
            }
        }
    }
    let mut buf = Vec::new();
    write_report(&name, opts.norm, &run.reports, run.certificate.as_ref(), &mut buf)?;
    Ok((String::from_utf8(buf)?, run.verdict))
}

fn write_points(run: &mut PipelineRun, report: &Path) -> Result<()> {
    let stem = report.with_extension("");
    for r in &mut run.reports {
        let Some(point) = &r.point else { continue };
        let path = PathBuf::from(format!("{}.s{}.json", stem.display(), r.stage.number()));
        let body = PointFile {
            stage: r.stage.number(),
            point,
            slacks: r.slacks.as_deref(),
        };
        fs::write(&path, serde_json::to_vec(&body)?)
            .with_context(|| format!("writing {}", path.display()))?;
        r.point_file = Some(path.display().to_string());
    }
    Ok(())
}

fn run(args: &RunArgs) -> Result<Verdict> {
    let (line, verdict) = execute(args)?;
    match &args.report {
        Some(path) => {
            fs::write(path, &line).with_context(|| format!("writing {}", path.display()))?
        }
        None => io::stdout().write_all(line.as_bytes())?,
    }
    eprintln!("{verdict}");
    Ok(verdict)
}

fn batch(manifest: &Path) -> Result<Verdict> {
    let text = fs::read_to_string(manifest)
        .with_context(|| format!("reading {}", manifest.display()))?;
    let mut runs: Vec<RunArgs> = serde_json::from_str(&text)
        .with_context(|| format!("parsing {}", manifest.display()))?;
    if runs.is_empty() {
        bail!("manifest {} lists no runs", manifest.display());
    }
    let base = manifest.parent().unwrap_or(Path::new("."));
    for r in &mut runs {
        if r.case.is_relative() {
            r.case = base.join(&r.case);
        }
        if let Some(p) = &r.report {
            if p.is_relative() {
                r.report = Some(base.join(p));
            }
        }
    }
    let results: Vec<Result<(String, Verdict)>> = thread::scope(|s| {
        let handles: Vec<_> = runs.iter().map(|r| s.spawn(|| execute(r))).collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| bail!("run panicked")))
            .collect()
    });
    let mut worst = Verdict::Feasible;
    let mut out = io::stdout().lock();
    for (args, res) in runs.iter().zip(results) {
        match res {
            Ok((line, verdict)) => {
                if let Some(p) = &args.report {
                    fs::write(p, &line).with_context(|| format!("writing {}", p.display()))?;
                }
                out.write_all(line.as_bytes())?;
                if verdict.exit_code() > worst.exit_code() {
                    worst = verdict;
                }
            }
            Err(e) => {
                eprintln!("{}: {e:#}", instance_name(args));
                worst = Verdict::StageFailure;
            }
        }
    }
    Ok(worst)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run(args) => run(args),
        Command::Batch { manifest } => batch(manifest),
    };
    match result {
        Ok(v) => ExitCode::from(v.exit_code() as u8),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(3)
        }
    }
}
