// SPDX-License-Identifier: Apache-2.0

//! Command-line front end.
//!
//! Output goes to `--out` (or stdout). Files are written to a temporary
//! sibling and renamed into place, so a failed run leaves nothing behind.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::error::{Error, Result};
use crate::exec::EngineVariant;
use crate::geometry::{self, PrefillMode, DEFAULT_CHUNK};
use crate::jct::JctProfile;
use crate::numerics;
use crate::par::Parallelism;
use crate::presets;
use crate::scheduler::{Policy, Scoring, DEFAULT_LAMBDA};
use crate::sim::{self, SimConfig};
use crate::workload::{self, Trace, TraceKind};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_CAPACITY: i32 = 3;
pub const EXIT_IO: i32 = 4;

/// Longest request each bundled workload can contain.
pub const WORKLOAD_MAX_LEN: [(&str, u64); 2] = [
    ("post_rec", workload::POST_REC_PROFILE_RANGE.1 + workload::POST_REC_SUFFIX),
    ("credit", workload::CREDIT_RANGE.1),
];

#[derive(Debug, Parser)]
#[command(name = "prefillsim", version, about = "Prefill-only serving memory model and simulator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Max input length per prefill mode and engine variant.
    Mil(MilArgs),
    /// QPS sweep around the saturation throughput.
    Simulate(RunArgs),
    /// One run per lambda at a fixed multiple of saturation throughput.
    LambdaSweep(RunArgs),
    /// Profile an engine and fit the JCT model.
    FitJct(FitArgs),
    /// Hybrid vs full forward pass of the toy block.
    VerifyNumerics(NumericsArgs),
    /// Write a trace file.
    GenTrace(RunArgs),
}

#[derive(Debug, Args)]
pub struct PresetArgs {
    #[arg(long, default_value = presets::DEFAULT_MODEL)]
    pub model: String,
    #[arg(long, default_value = presets::DEFAULT_GPU)]
    pub gpu: String,
}

#[derive(Debug, Args)]
pub struct MilArgs {
    #[command(flatten)]
    pub presets: PresetArgs,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PolicyArg {
    Fifo,
    Srjf,
    SrjfCalibrated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ScoringArg {
    Proxy,
    Profile,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub presets: PresetArgs,
    /// `post-rec`, `credit`, or a trace CSV file.
    #[arg(long, default_value = "post-rec")]
    pub trace: String,
    #[arg(long, default_value_t = workload::DEFAULT_SEED)]
    pub seed: u64,
    /// prefillonly | paged | chunked[:chunk] | tp[:degree] | pp[:degree]
    #[arg(long, default_value = "prefillonly")]
    pub variant: String,
    /// Defaults to the variant's native policy.
    #[arg(long, value_enum)]
    pub policy: Option<PolicyArg>,
    /// Comma-separated for lambda-sweep.
    #[arg(long)]
    pub lambda: Option<String>,
    #[arg(long, value_enum, default_value = "proxy")]
    pub scoring: ScoringArg,
    /// Comma-separated multiples of the saturation throughput.
    #[arg(long)]
    pub multipliers: Option<String>,
    #[arg(long)]
    pub instances: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// JCT profile file from `fit-jct`.
    #[arg(long)]
    pub profile: Option<PathBuf>,
    /// Shuffle individual requests instead of whole user sessions.
    #[arg(long)]
    pub interleave_users: bool,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[command(flatten)]
    pub presets: PresetArgs,
    #[arg(long, default_value = "prefillonly")]
    pub variant: String,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct NumericsArgs {
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Map an error to its process exit code.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Capacity { .. } => EXIT_CAPACITY,
        Error::Io(_) => EXIT_IO,
        _ => EXIT_CONFIG,
    }
}

/// Parse arguments, run, and return the exit code. Errors go to stderr.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("prefillsim: {e}");
            exit_code(&e)
        }
    }
}

pub fn execute(cli: &Cli) -> Result<()> {
    let (text, out) = match &cli.command {
        Command::Mil(a) => (cmd_mil(a)?, &a.out),
        Command::Simulate(a) => (cmd_simulate(a)?, &a.out),
        Command::LambdaSweep(a) => (cmd_lambda_sweep(a)?, &a.out),
        Command::FitJct(a) => (cmd_fit_jct(a)?, &a.out),
        Command::VerifyNumerics(a) => (cmd_verify_numerics(a)?, &a.out),
        Command::GenTrace(a) => (cmd_gen_trace(a)?, &a.out),
    };
    emit(&text, out.as_deref())
}

fn emit(text: &str, out: Option<&Path>) -> Result<()> {
    match out {
        None => {
            std::io::stdout().write_all(text.as_bytes())?;
            Ok(())
        }
        Some(path) => write_atomic(path, text),
    }
}

/// Write via a temporary file in the target directory, then rename.
pub fn write_atomic(path: &Path, text: &str) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(text.as_bytes())?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

fn yes_no(ok: bool) -> &'static str {
    if ok {
        "yes"
    } else {
        "no"
    }
}

pub fn cmd_mil(a: &MilArgs) -> Result<String> {
    let geom = presets::model(&a.presets.model)?;
    let gpu = presets::gpu(&a.presets.gpu)?;
    let mut rows: Vec<(String, u64)> = Vec::new();
    for mode in PrefillMode::ALL_DEFAULT {
        rows.push((format!("mode:{}", mode.label()), geometry::max_input_length(&geom, &gpu, mode)?));
    }
    for v in [
        EngineVariant::PrefillOnlyHybrid,
        EngineVariant::PagedAttention,
        EngineVariant::ChunkedPrefill(DEFAULT_CHUNK),
        EngineVariant::TensorParallel(2),
        EngineVariant::PipelineParallel(2),
    ] {
        rows.push((format!("variant:{v}"), v.max_input_length(&geom, &gpu)?));
    }
    let mut s = String::from("config,max_input_length");
    for (name, _) in WORKLOAD_MAX_LEN {
        write!(s, ",{name}").unwrap();
    }
    s.push('\n');
    for (label, mil) in rows {
        write!(s, "{label},{mil}").unwrap();
        for (_, need) in WORKLOAD_MAX_LEN {
            write!(s, ",{}", yes_no(need <= mil)).unwrap();
        }
        s.push('\n');
    }
    Ok(s)
}

fn parse_list(flag: &str, text: &str) -> Result<Vec<f64>> {
    text.split(',')
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::Config(format!("--{flag}: bad number '{t}'")))
        })
        .collect()
}

fn load_trace(a: &RunArgs) -> Result<Trace> {
    match a.trace.parse::<TraceKind>() {
        Ok(kind) => Ok(kind.generate(a.seed)),
        Err(_) if Path::new(&a.trace).is_file() => {
            let file = std::fs::File::open(&a.trace)?;
            let name = Path::new(&a.trace)
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            workload::read_trace_csv(&name, std::io::BufReader::new(file))
        }
        Err(e) => Err(e),
    }
}

/// Build the simulation config from flags. `lambda` overrides `--lambda`.
fn sim_config(a: &RunArgs, lambda: Option<f64>) -> Result<SimConfig> {
    let variant: EngineVariant = a.variant.parse()?;
    let mut c = SimConfig::from_presets(&a.presets.model, &a.presets.gpu, variant)?;
    c.seed = a.seed;
    c.interleave_users = a.interleave_users;
    if let Some(n) = a.instances {
        c.num_instances = n;
    }
    let lambda = match (lambda, &a.lambda) {
        (Some(l), _) => l,
        (None, Some(text)) => match parse_list("lambda", text)?.as_slice() {
            [l] => *l,
            _ => return Err(Error::config("--lambda takes one value here")),
        },
        (None, None) => DEFAULT_LAMBDA,
    };
    let scoring = match a.scoring {
        ScoringArg::Proxy => Scoring::Proxy,
        ScoringArg::Profile => Scoring::Profile,
    };
    c.policy = match a.policy {
        None => match sim::native_policy(variant, lambda) {
            Policy::SrjfCalibrated { lambda, .. } => Policy::SrjfCalibrated { lambda, scoring },
            p => p,
        },
        Some(PolicyArg::Fifo) => Policy::Fifo,
        Some(PolicyArg::Srjf) => Policy::SrjfStatic,
        Some(PolicyArg::SrjfCalibrated) => Policy::SrjfCalibrated { lambda, scoring },
    };
    if let Some(path) = &a.profile {
        c.profile = Some(JctProfile::from_text(&std::fs::read_to_string(path)?)?);
    }
    c.validate()?;
    Ok(c)
}

pub fn cmd_simulate(a: &RunArgs) -> Result<String> {
    let config = sim_config(a, None)?;
    let multipliers = match &a.multipliers {
        Some(text) => parse_list("multipliers", text)?,
        None => sim::DEFAULT_MULTIPLIERS.to_vec(),
    };
    let trace = load_trace(a)?;
    let rows = sim::sweep_qps(&trace, &config, &multipliers)?;
    Ok(sim::reports_csv(rows.iter().map(|(_, r)| r)))
}

/// Default QPS multiple for the lambda sweep.
pub const LAMBDA_SWEEP_MULTIPLIER: f64 = 2.0;
pub const DEFAULT_LAMBDAS: [f64; 3] = [0.0, 0.5, 5.0];

pub fn cmd_lambda_sweep(a: &RunArgs) -> Result<String> {
    let lambdas = match &a.lambda {
        Some(text) => parse_list("lambda", text)?,
        None => DEFAULT_LAMBDAS.to_vec(),
    };
    if a.policy.is_some_and(|p| p != PolicyArg::SrjfCalibrated) {
        return Err(Error::config("lambda-sweep needs --policy srjf-calibrated"));
    }
    let mut config = sim_config(a, Some(lambdas.first().copied().unwrap_or(DEFAULT_LAMBDA)))?;
    if let Policy::Fifo | Policy::SrjfStatic = config.policy {
        config.policy = Policy::calibrated(DEFAULT_LAMBDA);
    }
    let multiplier = match &a.multipliers {
        Some(text) => match parse_list("multipliers", text)?.as_slice() {
            [m] if *m > 0.0 => *m,
            _ => return Err(Error::config("lambda-sweep takes one positive --multipliers value")),
        },
        None => LAMBDA_SWEEP_MULTIPLIER,
    };
    let trace = load_trace(a)?;
    let qps = multiplier * sim::saturation_throughput(&trace, &config)?;
    let reports = sim::lambda_sweep(&trace, &config, qps, &lambdas)?;
    Ok(sim::reports_csv(&reports))
}

pub fn cmd_fit_jct(a: &FitArgs) -> Result<String> {
    let variant: EngineVariant = a.variant.parse()?;
    let config = SimConfig::from_presets(&a.presets.model, &a.presets.gpu, variant)?;
    let engine = config.engine()?;
    let profile = JctProfile::calibrate(&engine, workload::CREDIT_RANGE.1, Parallelism::default())?;
    Ok(profile.to_text())
}

/// Toy shape used by `verify-numerics`.
pub const NUMERICS_SHAPE: (usize, usize, usize) = (64, 16, 64);

pub fn cmd_verify_numerics(a: &NumericsArgs) -> Result<String> {
    let (n, h, i) = NUMERICS_SHAPE;
    let mut s = format!("{}\n", numerics::VerifyReport::CSV_HEADER);
    for chunk in [1, 2, 4, 8, 16, 32, 64] {
        let r = numerics::verify(n, h, i, chunk, a.seed)?;
        writeln!(s, "{}", r.csv_row()).unwrap();
    }
    Ok(s)
}

/// Without `--multipliers` every request arrives at time zero.
pub fn cmd_gen_trace(a: &RunArgs) -> Result<String> {
    let trace = load_trace(a)?;
    let trace = match &a.multipliers {
        None => trace.all_at_once(),
        Some(text) => {
            let m = match parse_list("multipliers", text)?.as_slice() {
                [m] if *m > 0.0 => *m,
                _ => return Err(Error::config("gen-trace takes one positive --multipliers value")),
            };
            let config = sim_config(a, None)?;
            let qps = m * sim::saturation_throughput(&trace, &config)?;
            workload::poisson_arrivals_with(&trace, qps, a.seed, a.interleave_users)?
        }
    };
    let mut buf = Vec::new();
    workload::write_trace_csv(&trace, &mut buf)?;
    String::from_utf8(buf).map_err(|e| Error::Parse(e.to_string()))
}
