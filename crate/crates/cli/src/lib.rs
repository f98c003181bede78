//! Batch front end: loads network model files and runs the certification,
//! composition, abstraction, synthesis and validation stages.

pub mod error;
pub mod model_file;
pub mod pipeline;

use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use clap::{Parser, Subcommand};
use simrel_core::certification::LambdaChoice;

use crate::error::{CliError, CliResult};
use crate::model_file::{parse_lambda, NetworkModelFile, Overrides};
use crate::pipeline::StageContext;

#[derive(Debug, Parser)]
#[command(
    name = "simrel",
    version,
    about = "Certify, compose, abstract, synthesize and validate stochastic network models"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[arg(long, global = true, default_value_t = 7)]
    pub seed: u64,
    #[arg(long, global = true, default_value_t = 10_000)]
    pub trials: usize,
    #[arg(long, global = true, default_value_t = 10)]
    pub horizon: usize,
    #[arg(long = "tol-psd", global = true)]
    pub tol_psd: Option<f64>,
    #[arg(long = "tol-eq", global = true)]
    pub tol_eq: Option<f64>,
    /// Fixed S-procedure multiplier, or `search`.
    #[arg(long, global = true, value_parser = parse_lambda)]
    pub lambda: Option<LambdaChoice>,
    #[arg(long, global = true)]
    pub dof: Option<usize>,
    /// Worker threads; defaults to the available parallelism.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[arg(long = "out-dir", global = true, default_value = "out")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Certify every subsystem relation.
    Certify { model: PathBuf },
    /// Check compositionality and compose the certificates.
    Compose { model: PathBuf },
    /// Build finite abstractions of the abstract models.
    Abstract { model: PathBuf },
    /// Synthesize policies on the finite abstractions and transfer them.
    Synthesize { model: PathBuf },
    /// Monte Carlo validation of the composed relation.
    Simulate { model: PathBuf },
    /// Render a summary of the artifacts in the output directory.
    Report { model: PathBuf },
    /// All stages in order, followed by the report.
    Run { model: PathBuf },
    /// Print the canonical form of a model file.
    Canonicalize { model: PathBuf },
}

impl Command {
    fn model(&self) -> &PathBuf {
        match self {
            Command::Certify { model }
            | Command::Compose { model }
            | Command::Abstract { model }
            | Command::Synthesize { model }
            | Command::Simulate { model }
            | Command::Report { model }
            | Command::Run { model }
            | Command::Canonicalize { model } => model,
        }
    }
}

type Stage = fn(&NetworkModelFile, &StageContext) -> CliResult<()>;

fn timed<T>(timings: &mut Vec<(String, f64)>, stage: &str, f: impl FnOnce() -> CliResult<T>) -> CliResult<T> {
    let start = Instant::now();
    let r = f();
    timings.push((stage.to_string(), start.elapsed().as_secs_f64() * 1e3));
    r
}

fn execute(cli: &Cli, out: &mut dyn Write) -> CliResult<()> {
    let model = NetworkModelFile::load(cli.command.model())?;
    let ctx = StageContext {
        out_dir: cli.out_dir.clone(),
        seed: cli.seed,
        trials: cli.trials,
        horizon: cli.horizon,
        overrides: Overrides {
            tol_eq: cli.tol_eq,
            tol_psd: cli.tol_psd,
            lambda: cli.lambda,
            dof: cli.dof,
        },
    };
    let mut timings = Vec::new();
    let io = |e: std::io::Error| CliError::Io {
        path: PathBuf::from("<stdout>"),
        source: e,
    };
    let result = match &cli.command {
        Command::Certify { .. } => timed(&mut timings, "certify", || pipeline::certify(&model, &ctx).map(|_| ())),
        Command::Compose { .. } => timed(&mut timings, "compose", || pipeline::compose(&model, &ctx).map(|_| ())),
        Command::Abstract { .. } => timed(&mut timings, "abstract", || {
            pipeline::abstract_stage(&model, &ctx).map(|_| ())
        }),
        Command::Synthesize { .. } => timed(&mut timings, "synthesize", || {
            pipeline::synthesize(&model, &ctx).map(|_| ())
        }),
        Command::Simulate { .. } => timed(&mut timings, "simulate", || {
            pipeline::simulate(&model, &ctx).map(|_| ())
        }),
        Command::Report { .. } => {
            let text = pipeline::render_report(&ctx, &[])?;
            out.write_all(text.as_bytes()).map_err(io)?;
            Ok(())
        }
        Command::Canonicalize { .. } => {
            out.write_all(model.to_canonical().as_bytes()).map_err(io)?;
            Ok(())
        }
        Command::Run { .. } => {
            let mut first_error = None;
            let stages: [(&str, Stage); 5] = [
                ("certify", |m, c| pipeline::certify(m, c).map(|_| ())),
                ("compose", |m, c| pipeline::compose(m, c).map(|_| ())),
                ("abstract", |m, c| pipeline::abstract_stage(m, c).map(|_| ())),
                ("synthesize", |m, c| pipeline::synthesize(m, c).map(|_| ())),
                ("simulate", |m, c| pipeline::simulate(m, c).map(|_| ())),
            ];
            for (name, stage) in stages {
                if let Err(e) = timed(&mut timings, name, || stage(&model, &ctx)) {
                    first_error = Some(e);
                    break;
                }
            }
            let text = pipeline::render_report(&ctx, &timings)?;
            out.write_all(text.as_bytes()).map_err(io)?;
            first_error.map_or(Ok(()), Err)
        }
    };
    if !matches!(
        cli.command,
        Command::Run { .. } | Command::Report { .. } | Command::Canonicalize { .. }
    ) {
        for (stage, ms) in &timings {
            writeln!(out, "# {stage} {ms:.1} ms").map_err(io)?;
        }
    }
    result
}

/// Runs the parsed command on a thread pool of the requested size and
/// returns the process exit code. Diagnostics go to `err`.
pub fn run(cli: &Cli, out: &mut (dyn Write + Send), err: &mut dyn Write) -> i32 {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads.unwrap_or(0))
        .build();
    let result = match pool {
        Ok(pool) => pool.install(|| execute(cli, out)),
        Err(e) => Err(CliError::Model(format!("cannot build thread pool: {e}"))),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}

/// Parses `args` (including the program name) and runs them.
pub fn run_args<I, T>(args: I, out: &mut (dyn Write + Send), err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => run(&cli, out, err),
        Err(e) => {
            let _ = write!(err, "{e}");
            if e.use_stderr() {
                2
            } else {
                0
            }
        }
    }
}
