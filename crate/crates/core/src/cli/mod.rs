//! Command-line front end: `synth`, `register`, `verify`, `bench` and
//! `metrics`. Logs go to stderr; results go to files under the output
//! root.

mod commands;
pub mod config;

use std::ffi::OsString;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

pub use commands::{
    aggregate, cmd_bench, cmd_metrics, cmd_register, cmd_synth, cmd_verify, process_pair, synth_instance,
    InstanceMetrics, InstanceRecord, Outcome, BENCH_CSV_HEADER, REGISTER_CSV_HEADER,
};
pub use config::RunConfig;

use crate::error::Error;

/// Environment variable naming the default output root.
pub const OUTPUT_ENV: &str = "MATCHDIFF_OUT";
pub const DEFAULT_OUTPUT: &str = "matchdiff-out";

#[derive(Debug, Parser)]
#[command(
    name = "matchdiff",
    version,
    about = "Correspondence estimation by reverse-diffusion sampling over matching matrices",
    after_help = "Any config key can be given as a flag, e.g. `--sampler.steps 5` or \
                  `--synth.rho=0.2`; these are equivalent to `--set sampler.steps=5`.\n\
                  Precedence: defaults < --config file < flags. Exit codes: 0 success, \
                  1 partial failure, 2 invalid config."
)]
pub struct Cli {
    /// Flat JSON config file with dotted keys.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Override one config key; the value is parsed as JSON, else taken as a string.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Output root [default: config `output`, then $MATCHDIFF_OUT, then ./matchdiff-out].
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Worker threads for instance-level parallelism (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    pub jobs: usize,
    /// Shorthand for `--set task=<TASK>` (rigid or deformable).
    #[arg(long, global = true)]
    pub task: Option<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic scene pairs as instance_NNNN directories and a manifest.tsv.
    #[command(after_help = "manifest.tsv (also printed): instance<TAB>seed<TAB>rows<TAB>cols<TAB>overlap")]
    Synth,
    /// Register scene pairs; a directory without gt.json expands to its subdirectories.
    #[command(after_help = commands::REGISTER_HELP)]
    Register { instances: Vec<PathBuf> },
    /// Check the matching-warp bound on small instances and the iterated-OT fixed point.
    #[command(after_help = "verify.json: {theorem1: [{seed, n, lhs, rhs_upper, holds}], \
                            theorem2: [{seed, n, exact, outer_steps, converged}], summary}")]
    Verify,
    /// Sweep steps x rho x overlap on synthetic rigid or deformable pairs.
    #[command(after_help = commands::BENCH_HELP)]
    Bench,
    /// Re-aggregate the per-instance records of a register run.
    #[command(after_help = "Reads RUN_DIR/instances/*.json and writes metrics.json under the output root.")]
    Metrics { run_dir: PathBuf },
}

/// Rewrites `--a.b=v` and `--a.b v` into `--set a.b=v`.
pub fn normalize_args(args: Vec<OsString>) -> Vec<OsString> {
    let mut out = Vec::with_capacity(args.len());
    let mut iter = args.into_iter();
    while let Some(arg) = iter.next() {
        let Some(text) = arg.to_str() else {
            out.push(arg);
            continue;
        };
        if text == "--" {
            out.push(arg);
            out.extend(iter);
            break;
        }
        let Some(body) = text.strip_prefix("--") else {
            out.push(arg);
            continue;
        };
        let (key, value) = match body.split_once('=') {
            Some((k, v)) => (k.to_string(), Some(v.to_string())),
            None => (body.to_string(), None),
        };
        if !key.contains('.') {
            out.push(arg);
            continue;
        }
        let value = match value {
            Some(v) => v,
            None => match iter.next() {
                Some(v) => v.to_string_lossy().into_owned(),
                None => String::new(),
            },
        };
        out.push("--set".into());
        out.push(format!("{key}={value}").into());
    }
    out
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::InvalidInput(_) | Error::Refused(_) => 2,
        _ => 1,
    }
}

/// Parses arguments, runs the command and maps the outcome to an exit code.
pub fn run<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString>,
{
    let args = normalize_args(args.into_iter().map(Into::into).collect());
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let mut overrides = cli.overrides.clone();
    if let Some(task) = &cli.task {
        overrides.push(format!("task={task}"));
    }
    let cfg = match RunConfig::load(cli.config.as_deref(), &overrides) {
        Ok(cfg) => cfg,
        Err(e) => {
            log::error!("{e}");
            return ExitCode::from(2);
        }
    };
    let out = cli
        .out
        .clone()
        .or_else(|| cfg.output.clone())
        .or_else(|| std::env::var_os(OUTPUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT));
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(cli.jobs).build() {
        Ok(pool) => pool,
        Err(e) => {
            log::error!("cannot build thread pool: {e}");
            return ExitCode::from(1);
        }
    };
    let result = pool.install(|| match &cli.command {
        Command::Synth => cmd_synth(&cfg, &out),
        Command::Register { instances } => cmd_register(&cfg, instances, &out),
        Command::Verify => cmd_verify(&cfg, &out),
        Command::Bench => cmd_bench(&cfg, &out),
        Command::Metrics { run_dir } => cmd_metrics(&cfg, run_dir, &out),
    });
    match result {
        Ok(Outcome::Success) => ExitCode::SUCCESS,
        Ok(Outcome::PartialFailure) => ExitCode::from(1),
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
