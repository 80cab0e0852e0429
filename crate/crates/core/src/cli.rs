//! Command-line front end: `gen`, `solve` and `bench`.
//!
//! Exit codes: 0 converged (or success), 2 usage/input/output error,
//! 3 max_iter reached, 4 line search failed, 5 set not positive definite.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use crate::data::{self, SynthConfig, GENERATOR_NAME};
use crate::error::AjdError;
use crate::io::{self, MatSetFile, TraceMetadata};
use crate::solver::{self, Method, SolveResult, SolverConfig, Status};
use crate::types::{validate_spd, SymmetricMatrixSet};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_MAX_ITER: i32 = 3;
pub const EXIT_LINE_SEARCH: i32 = 4;
pub const EXIT_NOT_SPD: i32 = 5;

pub fn status_exit_code(status: Status) -> i32 {
    match status {
        Status::Converged => EXIT_OK,
        Status::MaxIterReached => EXIT_MAX_ITER,
        Status::LineSearchFailed => EXIT_LINE_SEARCH,
    }
}

#[derive(Debug, Parser)]
#[command(name = "jointdiag", version, about = "Approximate joint diagonalization of positive matrix sets")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic set C^i = A D^i A^T + sigma^2 R^i R^i^T
    Gen(GenArgs),
    /// Jointly diagonalize a set, starting from the whitener
    Solve(SolveArgs),
    /// Run several methods on several datasets and write traces plus a summary
    Bench(BenchArgs),
}

#[derive(Debug, Args)]
struct GenArgs {
    #[arg(long)]
    n: usize,
    #[arg(long)]
    p: usize,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    sigma: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct SolveArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long, default_value = "qn", value_parser = ["qn", "gd"])]
    method: String,
    #[arg(long, default_value_t = 1000)]
    max_iter: usize,
    #[arg(long, default_value_t = 1e-10)]
    tol: f64,
    #[arg(long)]
    trace_out: Option<PathBuf>,
    #[arg(long)]
    b_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct BenchArgs {
    /// MSET input files (repeatable)
    #[arg(long = "in")]
    inputs: Vec<PathBuf>,
    /// Datasets to generate, separated by ';', e.g.
    /// "n=100,p=40,sigma=0;n=100,p=40,sigma=0.1;kind=segments,n=100,p=40,t=400,noise=0.1"
    #[arg(long)]
    synthetic_spec: Option<String>,
    #[arg(long, default_value = "qn,gd")]
    methods: String,
    #[arg(long, default_value_t = 1)]
    repeats: usize,
    /// Seed of the first repeat; repeat r uses seed + r
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-8)]
    tol: f64,
    #[arg(long, default_value_t = 10_000)]
    max_iter: usize,
    #[arg(long)]
    out_dir: PathBuf,
}

/// Parses arguments (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(err) => {
            let code = err.exit_code();
            let _ = err.print();
            return code;
        }
    };
    match cli.command {
        Command::Gen(args) => cmd_gen(&args),
        Command::Solve(args) => cmd_solve(&args),
        Command::Bench(args) => cmd_bench(&args),
    }
}

fn fail(code: i32, msg: impl std::fmt::Display) -> i32 {
    eprintln!("error: {msg}");
    code
}

fn cmd_gen(args: &GenArgs) -> i32 {
    let config = SynthConfig::new(args.n, args.p, args.sigma, args.seed);
    if let Err(err) = config.validate() {
        return fail(EXIT_USAGE, err);
    }
    let (set, truth) = match data::gen_synthetic(&config) {
        Ok(v) => v,
        Err(err) => return fail(EXIT_USAGE, err),
    };
    if let Err(err) = io::save_set(&set, &args.out) {
        return fail(EXIT_USAGE, format!("cannot write {}: {err}", args.out.display()));
    }
    eprintln!(
        "generated n = {}, p = {}, sigma = {}, seed = {} ({GENERATOR_NAME})",
        args.n, args.p, args.sigma, args.seed
    );
    eprintln!(
        "mixing condition number {:.3e}, mixing redraws {}, diagonal redraws {}",
        truth.condition_number, truth.mixing_redraws, truth.diagonal_redraws
    );
    EXIT_OK
}

/// Loads and validates an input set; errors carry their exit code.
fn load_input(path: &Path) -> Result<SymmetricMatrixSet, (i32, String)> {
    let set = MatSetFile::load(path)
        .and_then(MatSetFile::into_set)
        .map_err(|err| (EXIT_USAGE, format!("{}: {err}", path.display())))?;
    let report = validate_spd(&set);
    if !report.all_positive_definite() {
        return Err((
            EXIT_NOT_SPD,
            format!(
                "{}: matrices not positive definite: {:?}",
                path.display(),
                report.failures()
            ),
        ));
    }
    Ok(set)
}

fn run_solver(set: &SymmetricMatrixSet, config: &SolverConfig) -> Result<SolveResult, (i32, String)> {
    let b0 = data::whitener(set).map_err(|err| (EXIT_NOT_SPD, err.to_string()))?;
    solver::solve(set, &b0, config).map_err(|err| match err {
        AjdError::NotPositiveDefinite { .. } => (EXIT_NOT_SPD, err.to_string()),
        other => (EXIT_USAGE, other.to_string()),
    })
}

fn cmd_solve(args: &SolveArgs) -> i32 {
    let method: Method = match args.method.parse() {
        Ok(m) => m,
        Err(err) => return fail(EXIT_USAGE, err),
    };
    let config = SolverConfig::default()
        .with_method(method)
        .with_max_iter(args.max_iter)
        .with_grad_tol(args.tol);
    if let Err(err) = config.validate() {
        return fail(EXIT_USAGE, err);
    }
    let set = match load_input(&args.input) {
        Ok(set) => set,
        Err((code, msg)) => return fail(code, msg),
    };
    let result = match run_solver(&set, &config) {
        Ok(r) => r,
        Err((code, msg)) => return fail(code, msg),
    };
    if let Some(path) = &args.trace_out {
        let meta = TraceMetadata {
            method: method.name().into(),
            seed: None,
            n: set.n(),
            p: set.p(),
            sigma: None,
            status: result.trace.status,
            generator: "none".into(),
            init_time_s: result.trace.init_time,
            dataset: args.input.display().to_string(),
        };
        if let Err(err) = io::save_trace(path, &meta, &result.trace) {
            return fail(EXIT_USAGE, format!("cannot write {}: {err}", path.display()));
        }
    }
    if let Some(path) = &args.b_out {
        let written = MatSetFile::from_matrix(result.b.matrix()).and_then(|f| f.save(path));
        if let Err(err) = written {
            return fail(EXIT_USAGE, format!("cannot write {}: {err}", path.display()));
        }
    }
    let last = result.trace.last().copied();
    eprintln!(
        "{}: {} after {} iterations, loss {:.6e}, ||G|| {:.3e}",
        method.name(),
        result.trace.status.name(),
        result.trace.iterations(),
        result.final_loss,
        last.map_or(f64::NAN, |r| r.grad_norm)
    );
    status_exit_code(result.trace.status)
}

/// One dataset entry of a bench run.
#[derive(Debug, Clone, PartialEq)]
pub enum DatasetSpec {
    Synthetic { n: usize, p: usize, sigma: f64 },
    Segments { n: usize, p: usize, t: usize, noise: f64 },
    File(PathBuf),
}

impl DatasetSpec {
    pub fn label(&self) -> String {
        match self {
            DatasetSpec::Synthetic { n, p, sigma } => format!("synth_n{n}_p{p}_sigma{sigma}"),
            DatasetSpec::Segments { n, p, t, noise } => format!("segments_n{n}_p{p}_t{t}_noise{noise}"),
            DatasetSpec::File(path) => path
                .file_stem()
                .map_or_else(|| "input".to_string(), |s| s.to_string_lossy().into_owned()),
        }
    }

    fn sigma(&self) -> Option<f64> {
        match self {
            DatasetSpec::Synthetic { sigma, .. } => Some(*sigma),
            _ => None,
        }
    }

    fn seed(&self, seed: u64) -> Option<u64> {
        match self {
            DatasetSpec::File(_) => None,
            _ => Some(seed),
        }
    }

    fn build(&self, seed: u64) -> Result<SymmetricMatrixSet, (i32, String)> {
        let usage = |err: AjdError| (EXIT_USAGE, err.to_string());
        match self {
            DatasetSpec::Synthetic { n, p, sigma } => data::gen_synthetic(&SynthConfig::new(*n, *p, *sigma, seed))
                .map(|(set, _)| set)
                .map_err(usage),
            DatasetSpec::Segments { n, p, t, noise } => data::gen_segment_signals(*n, *p, *t, *noise, seed)
                .and_then(|(segments, _)| data::covariances_from_segments(&segments))
                .map_err(usage),
            DatasetSpec::File(path) => load_input(path),
        }
    }
}

/// Parses the `--synthetic-spec` grammar.
pub fn parse_synthetic_spec(spec: &str) -> Result<Vec<DatasetSpec>, String> {
    let mut out = Vec::new();
    for entry in spec.split(';').map(str::trim).filter(|e| !e.is_empty()) {
        let mut kind = "synthetic";
        let (mut n, mut p, mut t) = (None, None, None);
        let (mut sigma, mut noise) = (0.0, 0.1);
        for field in entry.split(',').map(str::trim) {
            let (key, value) = field
                .split_once('=')
                .ok_or_else(|| format!("expected key=value, got {field:?}"))?;
            let bad = |_| format!("bad value for {key}: {value:?}");
            match key {
                "kind" => kind = value,
                "n" => n = Some(value.parse::<usize>().map_err(bad)?),
                "p" => p = Some(value.parse::<usize>().map_err(bad)?),
                "t" => t = Some(value.parse::<usize>().map_err(bad)?),
                "sigma" => sigma = value.parse::<f64>().map_err(|_| format!("bad sigma {value:?}"))?,
                "noise" => noise = value.parse::<f64>().map_err(|_| format!("bad noise {value:?}"))?,
                other => return Err(format!("unknown key {other:?}")),
            }
        }
        let n = n.ok_or_else(|| format!("missing n in {entry:?}"))?;
        let p = p.ok_or_else(|| format!("missing p in {entry:?}"))?;
        if n == 0 || p == 0 {
            return Err(format!("n and p must be >= 1 in {entry:?}"));
        }
        match kind {
            "synthetic" => {
                if !(sigma >= 0.0) {
                    return Err(format!("sigma must be >= 0 in {entry:?}"));
                }
                out.push(DatasetSpec::Synthetic { n, p, sigma });
            }
            "segments" => {
                if !(noise >= 0.0) {
                    return Err(format!("noise must be >= 0 in {entry:?}"));
                }
                let t = t.unwrap_or(10 * p);
                out.push(DatasetSpec::Segments { n, p, t, noise });
            }
            other => return Err(format!("unknown kind {other:?}")),
        }
    }
    Ok(out)
}

fn parse_methods(spec: &str) -> Result<Vec<Method>, AjdError> {
    spec.split(',').map(str::trim).filter(|m| !m.is_empty()).map(str::parse).collect()
}

const SUMMARY_HEADER: &str =
    "dataset,method,repeat,seed,status,iterations,iterations_to_tol,wall_time_s,init_time_s,final_loss,final_grad_norm,trace_file,error";

fn cmd_bench(args: &BenchArgs) -> i32 {
    let methods = match parse_methods(&args.methods) {
        Ok(m) if !m.is_empty() => m,
        Ok(_) => return fail(EXIT_USAGE, "no methods given"),
        Err(err) => return fail(EXIT_USAGE, err),
    };
    let mut datasets: Vec<DatasetSpec> = args.inputs.iter().cloned().map(DatasetSpec::File).collect();
    if let Some(spec) = &args.synthetic_spec {
        match parse_synthetic_spec(spec) {
            Ok(mut v) => datasets.append(&mut v),
            Err(msg) => return fail(EXIT_USAGE, msg),
        }
    }
    if datasets.is_empty() {
        return fail(EXIT_USAGE, "give --in files or --synthetic-spec");
    }
    if args.repeats == 0 {
        return fail(EXIT_USAGE, "--repeats must be >= 1");
    }
    let base = SolverConfig::default().with_max_iter(args.max_iter).with_grad_tol(args.tol);
    if let Err(err) = base.validate() {
        return fail(EXIT_USAGE, err);
    }
    if let Err(err) = fs::create_dir_all(&args.out_dir) {
        return fail(EXIT_USAGE, format!("cannot create {}: {err}", args.out_dir.display()));
    }

    let mut summary = String::from(SUMMARY_HEADER);
    summary.push('\n');
    for dataset in &datasets {
        let label = dataset.label();
        for repeat in 0..args.repeats {
            let seed = args.seed + repeat as u64;
            let built = Instant::now();
            let set = dataset.build(seed);
            let build_time = built.elapsed().as_secs_f64();
            for &method in &methods {
                let prefix = format!("{label},{},{repeat},{}", method.short_name(), opt(dataset.seed(seed)));
                let set = match &set {
                    Ok(set) => set,
                    Err((_, msg)) => {
                        let _ = writeln!(summary, "{prefix},error,,,,,,,,{}", csv_escape(msg));
                        eprintln!("{label}: {msg}");
                        continue;
                    }
                };
                let config = base.clone().with_method(method);
                match run_solver(set, &config) {
                    Ok(result) => {
                        let file = format!("{label}_{}_r{repeat}.csv", method.short_name());
                        let meta = TraceMetadata {
                            method: method.name().into(),
                            seed: dataset.seed(seed),
                            n: set.n(),
                            p: set.p(),
                            sigma: dataset.sigma(),
                            status: result.trace.status,
                            generator: match dataset {
                                DatasetSpec::File(_) => "none".into(),
                                _ => GENERATOR_NAME.into(),
                            },
                            init_time_s: result.trace.init_time + build_time,
                            dataset: label.clone(),
                        };
                        let write = io::save_trace(args.out_dir.join(&file), &meta, &result.trace);
                        let last = result.trace.last().copied();
                        let _ = writeln!(
                            summary,
                            "{prefix},{},{},{},{:e},{:e},{:e},{:e},{file},{}",
                            result.trace.status.name(),
                            result.trace.iterations(),
                            opt(result.trace.iterations_to(args.tol)),
                            last.map_or(0.0, |r| r.wall_time),
                            result.trace.init_time + build_time,
                            result.final_loss,
                            last.map_or(f64::NAN, |r| r.grad_norm),
                            write.err().map(|e| csv_escape(&e.to_string())).unwrap_or_default(),
                        );
                        eprintln!(
                            "{label} {} r{repeat}: {} in {} iterations, {:.3}s, loss {:.3e}",
                            method.short_name(),
                            result.trace.status.name(),
                            result.trace.iterations(),
                            last.map_or(0.0, |r| r.wall_time),
                            result.final_loss
                        );
                    }
                    Err((_, msg)) => {
                        let _ = writeln!(summary, "{prefix},error,,,,,,,,{}", csv_escape(&msg));
                        eprintln!("{label} {}: {msg}", method.short_name());
                    }
                }
            }
        }
    }
    let path = args.out_dir.join("summary.csv");
    if let Err(err) = fs::write(&path, &summary) {
        return fail(EXIT_USAGE, format!("cannot write {}: {err}", path.display()));
    }
    print!("{summary}");
    EXIT_OK
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

fn csv_escape(s: &str) -> String {
    format!("\"{}\"", s.replace('"', "'").replace('\n', " "))
}
