use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use qcurv::diagnostics::diagnose;
use qcurv::experiments::{run_experiment, ExperimentConfig, ExperimentKind};
use qcurv::kernel::validate_closed_form;
use qcurv::oracle::{agreement, shoot};
use qcurv::solver::{solve, SolveMode};
use qcurv::{Constraint, CurvatureProfile, SolutionRecord, SolveSpec};

const EXIT_ASSERTION: u8 = 2;
const EXIT_NONCONVERGED: u8 = 3;

#[derive(Parser)]
#[command(name = "qcurv", version, about = "Radial normal solutions of Δ²u = K e^{4u} on R^4")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Overrides {
    /// JSON configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    p: Option<f64>,
    /// Prescribed total curvature. Repeat for a sweep schedule.
    #[arg(long = "Lambda")]
    lambda: Vec<f64>,
    /// Prescribed u(0). Repeat for a sweep schedule.
    #[arg(long, allow_negative_numbers = true)]
    rho: Vec<f64>,
    #[arg(long)]
    rmax: Option<f64>,
    #[arg(long)]
    nodes: Option<usize>,
    /// Output file; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Solve one problem and print the record with its diagnostics.
    Solve {
        #[command(flatten)]
        o: Overrides,
        /// Run in expect-failure mode.
        #[arg(long)]
        expect_failure: bool,
        /// Use K = 1 + r^p instead of 1 − r^p when no config is given.
        #[arg(long)]
        positive: bool,
    },
    /// Run a batch experiment and emit JSON lines.
    Sweep {
        #[command(flatten)]
        o: Overrides,
        /// Experiment kind when no config is given, e.g. negative-window-sweep.
        #[arg(long)]
        kind: Option<String>,
    },
    /// Re-run diagnostics on a stored record.
    Verify {
        #[command(flatten)]
        o: Overrides,
        /// Record JSON written by `solve`.
        record: PathBuf,
    },
    /// Shoot the radial ODE from a stored record or from explicit (u(0), Δu(0)).
    Oracle {
        #[command(flatten)]
        o: Overrides,
        #[arg(long)]
        record: Option<PathBuf>,
        #[arg(long, allow_negative_numbers = true)]
        a: Option<f64>,
        #[arg(long, allow_negative_numbers = true)]
        b: Option<f64>,
        #[arg(long, default_value_t = 100.0)]
        r_end: f64,
    },
    /// Closed-form kernel against angular quadrature.
    KernelCheck {
        #[command(flatten)]
        o: Overrides,
    },
}

fn main() -> ExitCode {
    if let Ok(n) = std::env::var("QCURV_THREADS") {
        if let Ok(n) = n.parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn writer(out: &Option<PathBuf>) -> anyhow::Result<Box<dyn Write>> {
    Ok(match out {
        Some(p) => Box::new(BufWriter::new(File::create(p).with_context(|| format!("creating {}", p.display()))?)),
        None => Box::new(BufWriter::new(std::io::stdout())),
    })
}

fn read(path: &Path) -> anyhow::Result<String> {
    std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn apply_grid(grid: &mut qcurv::GridSpec, o: &Overrides) {
    if let Some(r) = o.rmax {
        grid.r_max = r;
    }
    if let Some(n) = o.nodes {
        grid.nodes = n;
    }
}

fn solve_spec(o: &Overrides, expect_failure: bool, positive: bool) -> anyhow::Result<SolveSpec> {
    let mut spec = match &o.config {
        Some(path) => serde_json::from_str::<SolveSpec>(&read(path)?)?,
        None => {
            let p = o.p.unwrap_or(2.0);
            let profile = if positive { CurvatureProfile::one_plus(p) } else { CurvatureProfile::one_minus(p) };
            match (o.lambda.first(), o.rho.first()) {
                (_, Some(&rho)) => SolveSpec::origin(profile, rho),
                (Some(&l), None) => SolveSpec::lambda(profile, l),
                (None, None) => bail!("need --config, --Lambda or --rho"),
            }
        }
    };
    if let Some(p) = o.p {
        spec.profile.p = p;
    }
    if let Some(&l) = o.lambda.first() {
        spec.constraint = Constraint::PrescribedLambda { target: l };
    }
    if let Some(&rho) = o.rho.first() {
        spec.constraint = Constraint::PrescribedOrigin { rho };
    }
    apply_grid(&mut spec.grid, o);
    if expect_failure {
        spec.expect_failure = true;
    }
    Ok(spec)
}

/// A stored record is either the `solve` output or a bare SolutionRecord.
fn load_record(path: &Path) -> anyhow::Result<SolutionRecord> {
    let v: Value = serde_json::from_str(&read(path)?)?;
    let inner = v.get("record").cloned().unwrap_or(v);
    Ok(serde_json::from_value(inner)?)
}

fn run(cmd: Command) -> anyhow::Result<u8> {
    match cmd {
        Command::Solve { o, expect_failure, positive } => {
            let spec = solve_spec(&o, expect_failure, positive)?;
            let rec = solve(&spec, None)?;
            let diag = if rec.converged { diagnose(&rec).ok() } else { None };
            let mut w = writer(&o.out)?;
            serde_json::to_writer(&mut w, &json!({ "record": rec, "diagnostics": diag }))?;
            writeln!(w)?;
            w.flush()?;
            eprintln!(
                "converged={} Λ={:.6} u(0)={:.6} iterations={} residual={:.3e}",
                rec.converged,
                rec.lambda,
                rec.u0(),
                rec.iterations,
                rec.residual_norm
            );
            let failing = !rec.converged && matches!(rec.mode, SolveMode::Normal);
            Ok(if failing { EXIT_NONCONVERGED } else { 0 })
        }
        Command::Sweep { o, kind } => {
            let mut cfg = match (&o.config, kind) {
                (Some(path), _) => ExperimentConfig::from_json(&read(path)?)?,
                (None, Some(k)) => ExperimentConfig::default_for(ExperimentKind::parse(&k)?),
                (None, None) => bail!("need --config or --kind"),
            };
            if let Some(p) = o.p {
                cfg.p = p;
            }
            if !o.lambda.is_empty() {
                cfg.lambdas = o.lambda.clone();
            }
            if !o.rho.is_empty() {
                cfg.rhos = o.rho.clone();
            }
            apply_grid(&mut cfg.grid, &o);
            let out = o.out.clone().or_else(|| cfg.output.clone().map(PathBuf::from));
            let report = run_experiment(&cfg)?;
            let mut w = writer(&out)?;
            report.write_jsonl(&mut w)?;
            w.flush()?;
            eprintln!("{:?}: {} ({:.1} s)", cfg.kind, if report.passed { "PASS" } else { "FAIL" }, report.seconds);
            Ok(if report.passed { 0 } else { EXIT_ASSERTION })
        }
        Command::Verify { o, record } => {
            let rec = load_record(&record)?;
            let diag = diagnose(&rec)?;
            let mut w = writer(&o.out)?;
            serde_json::to_writer(&mut w, &json!({ "lambda": rec.lambda, "converged": rec.converged, "diagnostics": diag }))?;
            writeln!(w)?;
            w.flush()?;
            let ok = rec.converged && (!diag.pohozaev_applicable || diag.pohozaev_residual <= 0.01);
            Ok(if ok { 0 } else { EXIT_ASSERTION })
        }
        Command::Oracle { o, record, a, b, r_end } => {
            let mut w = writer(&o.out)?;
            if let Some(path) = record {
                let rec = load_record(&path)?;
                let b = rec.laplacian_origin.context("record has no Δu(0)")?;
                let st = shoot(rec.u0(), b, &rec.spec.profile, r_end.max(5.0))?;
                let dev = agreement(&st, &rec.u, 5f64.min(rec.u.grid().r_max()))?;
                serde_json::to_writer(&mut w, &json!({ "a": st.a, "b": st.b, "class": st.terminal_class, "exit_radius": st.exit_radius, "max_deviation": dev }))?;
                writeln!(w)?;
                w.flush()?;
                return Ok(if dev <= 1e-3 { 0 } else { EXIT_ASSERTION });
            }
            let (Some(a), Some(b)) = (a, b) else { bail!("need --record or both --a and --b") };
            let profile = CurvatureProfile::one_minus(o.p.unwrap_or(2.0));
            let st = shoot(a, b, &profile, r_end)?;
            st.trajectory.write_csv(&mut w)?;
            w.flush()?;
            eprintln!("class={:?} exit_radius={:.4e} steps={}", st.terminal_class, st.exit_radius, st.steps);
            Ok(0)
        }
        Command::KernelCheck { o } => {
            let m = o.nodes.unwrap_or(50);
            let err = validate_closed_form(m, 1e-3, o.rmax.unwrap_or(1e3))?;
            let mut w = writer(&o.out)?;
            serde_json::to_writer(&mut w, &json!({ "grid": [m, m], "max_abs_error": err, "tolerance": 1e-8 }))?;
            writeln!(w)?;
            w.flush()?;
            Ok(if err <= 1e-8 { 0 } else { EXIT_ASSERTION })
        }
    }
}
