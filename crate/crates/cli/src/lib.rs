//! Command-line front end: solve systems from files, benchmark the solver,
//! print model tables and run the race-line demo.
//!
//! All CSV output has a fixed header row and floats with 17 significant
//! digits. Exit codes are listed in [`ExitCode`].

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use arrowkkt::gen::{
    self, build_raceline_qp_with, compute_frames, raceline_penalty_solve, CurvatureRule,
    PenaltyOptions, TrackData,
};
use arrowkkt::io::{format_f64, read_matrix, read_vector, write_matrix, write_vector};
use arrowkkt::planner::{self, BalanceRule};
use arrowkkt::{Error, KktSolver, PartitionPlan};
use clap::{Parser, Subcommand, ValueEnum};
use num_rational::Rational64;

/// Process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitCode {
    Ok = 0,
    Usage = 2,
    Io = 3,
    Numerical = 4,
    InfeasiblePlan = 5,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] Error),
    #[error("{path}: {source}")]
    File { path: PathBuf, source: Error },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> ExitCode {
        match self {
            CliError::Usage(_) => ExitCode::Usage,
            CliError::Io(_) | CliError::Csv(_) => ExitCode::Io,
            CliError::Core(e) | CliError::File { source: e, .. } => classify(e),
        }
    }
}

fn classify(e: &Error) -> ExitCode {
    match e {
        _ if e.is_numerical() => ExitCode::Numerical,
        Error::InfeasiblePlan { .. } | Error::InvalidPlan(_) | Error::NonUniformStages => {
            ExitCode::InfeasiblePlan
        }
        Error::InvalidArgument(_) => ExitCode::Usage,
        _ => ExitCode::Io,
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn at<T>(path: &Path, r: arrowkkt::Result<T>) -> Result<T> {
    r.map_err(|source| CliError::File {
        path: path.to_path_buf(),
        source,
    })
}

#[derive(Debug, Parser)]
#[command(name = "arrowkkt", version, about = "Parallel block-tridiagonal-arrow KKT solver")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Solve Ψx = r from matrix and right-hand-side files.
    Solve(SolveArgs),
    /// Time factorization and solve on random instances (CSV).
    Bench(BenchArgs),
    /// Print model speedup thresholds or the speedup grid (CSV).
    Theory(TheoryArgs),
    /// Optimize a minimum-curvature race line.
    Raceline(RacelineArgs),
    /// Write a random SPD matrix and right-hand side.
    Generate(GenerateArgs),
}

#[derive(Debug, clap::Args)]
pub struct SolveArgs {
    #[arg(long)]
    pub matrix: PathBuf,
    #[arg(long)]
    pub rhs: PathBuf,
    /// Solution file; omitted means no file is written.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
    /// First and other segment lengths, "N1,Nk".
    #[arg(long)]
    pub plan: Option<String>,
}

#[derive(Debug, clap::Args)]
pub struct BenchArgs {
    #[arg(long, default_value_t = 200)]
    pub stages: usize,
    #[arg(long, default_value_t = gen::CHAIN_BLOCK_SIZE)]
    pub block_size: usize,
    #[arg(long, default_value_t = 0)]
    pub global_size: usize,
    /// Thread counts, e.g. "1,2,4" or "2-16:2".
    #[arg(long, default_value = "1,2,4")]
    pub threads: String,
    #[arg(long, default_value_t = 30)]
    pub reps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TheoryMode {
    Table2,
    Grid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Rule {
    Balanced,
    Shifted,
}

impl From<Rule> for BalanceRule {
    fn from(r: Rule) -> Self {
        match r {
            Rule::Balanced => BalanceRule::Balanced,
            Rule::Shifted => BalanceRule::Shifted,
        }
    }
}

#[derive(Debug, clap::Args)]
pub struct TheoryArgs {
    #[arg(long, value_enum, default_value_t = TheoryMode::Table2)]
    pub mode: TheoryMode,
    /// Thread counts, e.g. "2-16:2".
    #[arg(long, default_value = "2-16:2")]
    pub threads: String,
    /// Horizon lengths for the grid, e.g. "1-200".
    #[arg(long, default_value = "1-200")]
    pub stages: String,
    #[arg(long, value_enum, default_value_t = Rule::Balanced)]
    pub rule: Rule,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Sampling {
    Knot,
    Gauss2,
}

#[derive(Debug, clap::Args)]
pub struct RacelineArgs {
    /// Track CSV with columns x,y,w_left,w_right.
    #[arg(long, conflicts_with = "synthetic", required_unless_present = "synthetic")]
    pub track: Option<PathBuf>,
    /// "oval:SEGMENTS" or "circle:SEGMENTS[:RADIUS[:WIDTH]]".
    #[arg(long)]
    pub synthetic: Option<String>,
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
    #[arg(long, default_value_t = 6)]
    pub iters: usize,
    #[arg(long, value_enum, default_value_t = Sampling::Knot)]
    pub sampling: Sampling,
    /// Race line CSV.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, clap::Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub stages: usize,
    #[arg(long)]
    pub block_size: usize,
    #[arg(long, default_value_t = 0)]
    pub global_size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Matrix file.
    #[arg(long)]
    pub out: PathBuf,
    /// Right-hand-side file.
    #[arg(long)]
    pub rhs: Option<PathBuf>,
}

/// Parses the arguments, runs the command and returns the exit code.
/// Command output goes to `out`, diagnostics to `err`.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { ExitCode::Usage } else { ExitCode::Ok };
            let _ = if e.use_stderr() {
                write!(err, "{}", e.render())
            } else {
                write!(out, "{}", e.render())
            };
            return code;
        }
    };
    match execute(&cli.command, out, err) {
        Ok(()) => ExitCode::Ok,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(cmd: &Command, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    match cmd {
        Command::Solve(a) => cmd_solve(a, out),
        Command::Bench(a) => cmd_bench(a, out, err),
        Command::Theory(a) => cmd_theory(a, out),
        Command::Raceline(a) => cmd_raceline(a, out, err),
        Command::Generate(a) => cmd_generate(a, out),
    }
}

/// Parses "a,b,c", "a-b" and "a-b:step" (and mixtures of them, comma
/// separated) into a list of positive integers.
pub fn parse_list(spec: &str) -> Result<Vec<usize>> {
    let bad = || CliError::Usage(format!("invalid list {spec:?}"));
    let num = |s: &str| s.trim().parse::<usize>().map_err(|_| bad());
    let mut out = Vec::new();
    for part in spec.split(',').filter(|s| !s.trim().is_empty()) {
        let (range, step) = match part.split_once(':') {
            Some((r, s)) => (r, num(s)?),
            None => (part, 1),
        };
        if step == 0 {
            return Err(bad());
        }
        match range.split_once('-') {
            Some((lo, hi)) => {
                let (lo, hi) = (num(lo)?, num(hi)?);
                if lo > hi {
                    return Err(bad());
                }
                out.extend((lo..=hi).step_by(step));
            }
            None => out.push(num(range)?),
        }
    }
    if out.is_empty() {
        return Err(bad());
    }
    Ok(out)
}

/// Plan from a "N1,Nk" override or the optimal partition.
pub fn resolve_plan(stages: usize, threads: usize, plan: Option<&str>) -> Result<PartitionPlan> {
    if threads == 0 {
        return Err(CliError::Usage("--threads must be positive".into()));
    }
    let plan = match plan {
        None => planner::optimal_partition(stages, threads)?,
        Some(s) => {
            let parts: Vec<_> = s.split(',').map(|x| x.trim().parse::<usize>()).collect();
            match parts.as_slice() {
                [Ok(n1), Ok(nk)] => PartitionPlan::with_first(*n1, *nk, threads)?,
                _ => return Err(CliError::Usage(format!("--plan expects \"N1,Nk\", got {s:?}"))),
            }
        }
    };
    plan.check(stages)?;
    Ok(plan)
}

fn secs(d: Duration) -> String {
    format_f64(d.as_secs_f64())
}

fn plan_string(plan: &PartitionPlan) -> String {
    plan.seg_lengths()
        .iter()
        .map(usize::to_string)
        .collect::<Vec<_>>()
        .join(" ")
}

fn open_out<'a>(path: Option<&Path>, out: &'a mut dyn Write) -> Result<Box<dyn Write + 'a>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(out),
    })
}

fn cmd_solve(a: &SolveArgs, out: &mut dyn Write) -> Result<()> {
    let t = Instant::now();
    let m = at(&a.matrix, read_matrix(&a.matrix))?;
    let r = at(&a.rhs, read_vector(&a.rhs))?;
    at(&a.rhs, r.conforms_to(&m))?;
    let load = t.elapsed();
    let plan = resolve_plan(m.num_stages(), a.threads, a.plan.as_deref())?;
    let mut solver = KktSolver::new(plan);
    solver.factorize(&m)?;
    let x = solver.solve(&r)?;
    let rep = solver.report().expect("factorized");
    let residual = m.relative_residual(&x, &r);
    if let Some(p) = &a.out {
        at(p, write_vector(p, &x))?;
    }
    writeln!(out, "stages = {}", m.num_stages())?;
    writeln!(out, "threads = {}", rep.plan.threads())?;
    writeln!(out, "plan = {}", plan_string(&rep.plan))?;
    writeln!(out, "solver = {}", if rep.sequential { "sequential" } else { "parallel" })?;
    writeln!(out, "load_s = {}", secs(load))?;
    writeln!(out, "factor_s = {}", secs(rep.timings.factor))?;
    writeln!(out, "solve_s = {}", secs(rep.timings.solve))?;
    writeln!(out, "other_s = {}", secs(rep.timings.other))?;
    writeln!(out, "total_s = {}", secs(rep.timings.total()))?;
    writeln!(out, "residual = {}", format_f64(residual))?;
    Ok(())
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub const BENCH_HEADER: [&str; 25] = [
    "M",
    "b",
    "n_g",
    "p",
    "plan",
    "reps",
    "factor_mean_s",
    "factor_std_s",
    "solve_mean_s",
    "solve_std_s",
    "other_mean_s",
    "other_std_s",
    "total_mean_s",
    "speedup_factor",
    "speedup_solve",
    "speedup_total",
    "gamma_factor",
    "gamma_solve",
    "factor_flops_critical",
    "factor_flops_total",
    "solve_flops_critical",
    "solve_flops_total",
    "flops_match_model",
    "deterministic",
    "flags",
];

struct BenchRow {
    factor: (f64, f64),
    solve: (f64, f64),
    other: (f64, f64),
    total: f64,
}

fn bench_one(
    m: &arrowkkt::BlockTridiagArrowMatrix,
    r: &arrowkkt::BlockVector,
    plan: &PartitionPlan,
    reps: usize,
) -> Result<(BenchRow, arrowkkt::SolveReport, bool)> {
    let (mut f, mut s, mut o, mut tot) = (vec![], vec![], vec![], vec![]);
    let mut first: Option<Vec<u64>> = None;
    let mut deterministic = true;
    let mut last = None;
    for _ in 0..reps {
        let mut solver = KktSolver::new(plan.clone());
        solver.factorize(m)?;
        let x = solver.solve(r)?;
        let rep = solver.report().expect("factorized");
        let bits: Vec<u64> = x.iter().map(f64::to_bits).collect();
        match &first {
            None => first = Some(bits),
            Some(b) => deterministic &= *b == bits,
        }
        f.push(rep.timings.factor.as_secs_f64());
        s.push(rep.timings.solve.as_secs_f64());
        o.push(rep.timings.other.as_secs_f64());
        tot.push(rep.timings.total().as_secs_f64());
        last = Some(rep);
    }
    let row = BenchRow {
        factor: mean_std(&f),
        solve: mean_std(&s),
        other: mean_std(&o),
        total: mean_std(&tot).0,
    };
    Ok((row, last.expect("reps > 0"), deterministic))
}

fn ratio(x: Rational64) -> String {
    x.to_string()
}

fn cmd_bench(a: &BenchArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    if a.stages == 0 || a.block_size == 0 {
        return Err(CliError::Usage("--stages and --block-size must be positive".into()));
    }
    if a.reps == 0 {
        return Err(CliError::Usage("--reps must be positive".into()));
    }
    let ps = parse_list(&a.threads)?;
    if ps.contains(&0) {
        return Err(CliError::Usage("thread counts must be positive".into()));
    }
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    let m = gen::random_spd_bta(a.stages, a.block_size, a.global_size, a.seed, 1.0);
    let r = gen::random_block_vector(&m.stage_sizes(), a.global_size, a.seed.wrapping_add(1));

    let (base, _, _) = bench_one(&m, &r, &PartitionPlan::sequential(a.stages)?, a.reps)?;

    let mut w = csv::Writer::from_writer(open_out(a.out.as_deref(), out)?);
    w.write_record(BENCH_HEADER)?;
    for &p in &ps {
        let plan = planner::optimal_partition(a.stages, p)?;
        let (row, rep, deterministic) = bench_one(&m, &r, &plan, a.reps)?;
        let (fm, sm) = planner::phase_flops(&plan, a.block_size, a.global_size);
        let matches = rep.factor_flops.segments.iter().map(|c| c.total()).eq(fm.segments.iter().copied())
            && rep.factor_flops.sequential.total() == fm.sequential
            && rep.solve_flops.segments.iter().map(|c| c.total()).eq(sm.segments.iter().copied())
            && rep.solve_flops.sequential.total() == sm.sequential;
        let point = planner::theory_point(a.stages, p, BalanceRule::Balanced)?;
        let speed = |b: f64, x: f64| if p == 1 { 1.0 } else { b / x };
        let sf = speed(base.factor.0, row.factor.0);
        let mut flags = Vec::new();
        if p > 1 && sf < 1.3 {
            flags.push("low_speedup");
            writeln!(
                err,
                "warning: p={p}: measured factorization speedup {sf:.3} is below 1.3 (model {:.3})",
                planner::to_f64(point.gamma_factor)
            )?;
        }
        if p > cores {
            flags.push("oversubscribed");
            writeln!(err, "warning: p={p} exceeds the {cores} available cores")?;
        }
        if !deterministic {
            writeln!(err, "warning: p={p}: repeated solves differ")?;
        }
        w.write_record([
            a.stages.to_string(),
            a.block_size.to_string(),
            a.global_size.to_string(),
            p.to_string(),
            plan_string(&plan),
            a.reps.to_string(),
            format_f64(row.factor.0),
            format_f64(row.factor.1),
            format_f64(row.solve.0),
            format_f64(row.solve.1),
            format_f64(row.other.0),
            format_f64(row.other.1),
            format_f64(row.total),
            format_f64(sf),
            format_f64(speed(base.solve.0, row.solve.0)),
            format_f64(speed(base.total, row.total)),
            format_f64(planner::to_f64(point.gamma_factor)),
            format_f64(planner::to_f64(point.gamma_solve)),
            ratio(rep.factor_flops.critical_path()),
            ratio(rep.factor_flops.total()),
            ratio(rep.solve_flops.critical_path()),
            ratio(rep.solve_flops.total()),
            matches.to_string(),
            deterministic.to_string(),
            flags.join(" "),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub const THRESHOLD_HEADER: [&str; 6] = ["p", "gamma_max", "N_gamma2", "N_gamma3", "N_gamma4", "N_0.9gamma_max"];
pub const GRID_HEADER: [&str; 7] = ["N", "p", "N1", "Nk", "gamma_factor", "gamma_solve", "status"];

fn opt(n: Option<usize>) -> String {
    n.map_or_else(|| "-".to_string(), |n| n.to_string())
}

fn cmd_theory(a: &TheoryArgs, out: &mut dyn Write) -> Result<()> {
    let ps = parse_list(&a.threads)?;
    if ps.contains(&0) {
        return Err(CliError::Usage("thread counts must be positive".into()));
    }
    let rule = a.rule.into();
    let mut w = csv::Writer::from_writer(open_out(a.out.as_deref(), out)?);
    match a.mode {
        TheoryMode::Table2 => {
            w.write_record(THRESHOLD_HEADER)?;
            for row in planner::threshold_table(&ps, rule) {
                w.write_record([
                    row.p.to_string(),
                    format_f64(planner::to_f64(row.gamma_max)),
                    opt(row.n_gamma2),
                    opt(row.n_gamma3),
                    opt(row.n_gamma4),
                    opt(row.n_gamma_09max),
                ])?;
            }
        }
        TheoryMode::Grid => {
            let ns = parse_list(&a.stages)?;
            w.write_record(GRID_HEADER)?;
            for cell in planner::theory_grid(ps, ns, rule) {
                let rec = match &cell.point {
                    Some(t) => [
                        cell.n.to_string(),
                        cell.p.to_string(),
                        t.n1.to_string(),
                        t.nk.to_string(),
                        format_f64(planner::to_f64(t.gamma_factor)),
                        format_f64(planner::to_f64(t.gamma_solve)),
                        "ok".to_string(),
                    ],
                    None => [
                        cell.n.to_string(),
                        cell.p.to_string(),
                        "-".into(),
                        "-".into(),
                        "-".into(),
                        "-".into(),
                        "infeasible".into(),
                    ],
                };
                w.write_record(rec)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Builds a synthetic track from "oval:SEG" or "circle:SEG[:RADIUS[:WIDTH]]".
pub fn synthetic_track(spec: &str) -> Result<TrackData> {
    let bad = || CliError::Usage(format!("invalid synthetic track {spec:?}"));
    let mut it = spec.split(':');
    let kind = it.next().ok_or_else(bad)?;
    let segments: usize = it.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
    let rest: Vec<f64> = it.map(|s| s.parse().map_err(|_| bad())).collect::<Result<_>>()?;
    let track = match (kind, rest.as_slice()) {
        ("oval", []) => gen::default_oval(segments),
        ("circle", []) => TrackData::circle(50.0, segments, 5.0, 5.0),
        ("circle", [r]) => TrackData::circle(*r, segments, 5.0, 5.0),
        ("circle", [r, w]) => TrackData::circle(*r, segments, *w, *w),
        _ => return Err(bad()),
    };
    track.map_err(|e| CliError::Usage(e.to_string()))
}

pub const RACELINE_REPORT_HEADER: [&str; 13] = [
    "iteration",
    "rho",
    "objective",
    "equality_residual",
    "max_violation",
    "merit_before",
    "merit_after",
    "steps",
    "assembly_s",
    "factor_s",
    "solve_s",
    "other_s",
    "total_s",
];

fn cmd_raceline(a: &RacelineArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    let track = match (&a.track, &a.synthetic) {
        (Some(p), _) => at(p, gen::load_track(p))?,
        (None, Some(s)) => synthetic_track(s)?,
        (None, None) => return Err(CliError::Usage("one of --track or --synthetic is required".into())),
    };
    let rule = match a.sampling {
        Sampling::Knot => CurvatureRule::Knot,
        Sampling::Gauss2 => CurvatureRule::Gauss2,
    };
    let frames = compute_frames(&track)?;
    let problem = build_raceline_qp_with(&track, &frames, rule)?;
    let plan = resolve_plan(track.len(), a.threads, None)?;
    let options = PenaltyOptions {
        iterations: a.iters,
        ..PenaltyOptions::default()
    };
    let (theta, report) = raceline_penalty_solve(&problem, &options, &plan)?;
    if let Some(p) = &a.out {
        gen::write_raceline(BufWriter::new(File::create(p)?), &problem, &theta)?;
    }

    let mut w = csv::Writer::from_writer(&mut *out);
    w.write_record(RACELINE_REPORT_HEADER)?;
    for it in &report.iterations {
        let other = it.timings.other + it.assembly;
        w.write_record([
            it.iteration.to_string(),
            format_f64(it.rho),
            format_f64(it.objective),
            format_f64(it.equality_residual),
            format_f64(it.max_violation),
            format_f64(it.merit_before),
            format_f64(it.merit_after),
            it.steps.to_string(),
            secs(it.assembly),
            secs(it.timings.factor),
            secs(it.timings.solve),
            secs(other),
            secs(it.timings.factor + it.timings.solve + other),
        ])?;
    }
    w.flush()?;
    drop(w);
    let t = report.total_timings();
    writeln!(err, "segments = {}", track.len())?;
    writeln!(err, "plan = {}", plan_string(&plan))?;
    writeln!(err, "initial_objective = {}", format_f64(report.initial_objective))?;
    writeln!(err, "final_objective = {}", format_f64(report.final_objective()))?;
    writeln!(err, "final_equality_residual = {}", format_f64(report.final_equality_residual()))?;
    writeln!(err, "factor_s = {}", secs(t.factor))?;
    writeln!(err, "solve_s = {}", secs(t.solve))?;
    writeln!(err, "other_s = {}", secs(t.other))?;
    writeln!(err, "total_s = {}", secs(t.total()))?;
    Ok(())
}

fn cmd_generate(a: &GenerateArgs, out: &mut dyn Write) -> Result<()> {
    if a.stages == 0 || a.block_size == 0 {
        return Err(CliError::Usage("--stages and --block-size must be positive".into()));
    }
    let m = gen::random_spd_bta(a.stages, a.block_size, a.global_size, a.seed, 1.0);
    at(&a.out, write_matrix(&a.out, &m))?;
    writeln!(out, "matrix = {}", a.out.display())?;
    if let Some(p) = &a.rhs {
        let r = gen::random_block_vector(&m.stage_sizes(), a.global_size, a.seed.wrapping_add(1));
        at(p, write_vector(p, &r))?;
        writeln!(out, "rhs = {}", p.display())?;
    }
    Ok(())
}
