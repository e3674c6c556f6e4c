mod commands;
mod config;
mod report;

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use config::{ConfigError, FileConfig, ModelOverrides};
use seqpar::strategies::RingVariant;

#[derive(Parser, Debug)]
#[command(name = "seqpar", version, about = "Sequence-parallel attention verification and simulation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run strategies on seeded random input and check them against the oracle.
    Verify(CommonArgs),
    /// Analytical and traced inter-machine volumes side by side.
    Volumes(CommonArgs),
    /// Exhaustive sweep of the USP minus SFU volume difference.
    Lemma(CommonArgs),
    /// Replay strategy traces under the latency model.
    Simulate(CommonArgs),
    /// Dump per-rank schedules.
    Schedule(CommonArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Csv,
    Table,
}

#[derive(Args, Debug, Clone)]
struct CommonArgs {
    /// JSON config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Machine count N.
    #[arg(long)]
    n: Option<usize>,
    /// GPUs per machine M.
    #[arg(long)]
    m: Option<usize>,
    /// Explicit torus degree T (with --u and --r).
    #[arg(long)]
    t: Option<usize>,
    /// Explicit Ulysses degree U.
    #[arg(long)]
    u: Option<usize>,
    /// Explicit ring degree R.
    #[arg(long)]
    r: Option<usize>,
    #[arg(long)]
    b: Option<usize>,
    /// Global sequence length (default 16 * N * M).
    #[arg(long)]
    l: Option<usize>,
    #[arg(long)]
    h: Option<usize>,
    #[arg(long)]
    d: Option<usize>,
    /// Comma-separated list of ring, ulysses, usp, tas, torus.
    #[arg(long, value_delimiter = ',')]
    strategies: Option<Vec<String>>,
    #[arg(long)]
    seed: Option<u64>,
    /// Numeric mode; only f64 is supported.
    #[arg(long)]
    numeric: Option<String>,
    /// Transport of the standalone ring strategy.
    #[arg(long, value_parser = parse_ring_variant)]
    ring_variant: Option<RingVariant>,
    /// JSON latency model (any subset of alpha_intra, beta_intra, alpha_inter, beta_inter, compute_rate).
    #[arg(long)]
    model_file: Option<PathBuf>,
    #[arg(long)]
    alpha_intra: Option<f64>,
    #[arg(long)]
    beta_intra: Option<f64>,
    #[arg(long)]
    alpha_inter: Option<f64>,
    #[arg(long)]
    beta_inter: Option<f64>,
    #[arg(long)]
    compute_rate: Option<f64>,
    /// Largest N of the lemma sweep.
    #[arg(long)]
    max_n: Option<usize>,
    /// Write the report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write each run's trace (and timeline, for simulate) into this directory.
    #[arg(long)]
    trace_dir: Option<PathBuf>,
    /// Check ordering properties and exit 1 if any fails.
    #[arg(long)]
    assert: bool,
    #[arg(long, value_enum)]
    format: Option<Format>,
}

fn parse_ring_variant(s: &str) -> Result<RingVariant, String> {
    match s {
        "pull" => Ok(RingVariant::Pull),
        "send_recv" | "send-recv" => Ok(RingVariant::SendRecv),
        _ => Err(format!("unknown ring variant {s:?} (pull, send_recv)")),
    }
}

impl CommonArgs {
    fn file_config(&self) -> Result<FileConfig, ConfigError> {
        let base = match &self.config {
            Some(path) => FileConfig::load(path)?,
            None => FileConfig::default(),
        };
        let model = ModelOverrides {
            alpha_intra: self.alpha_intra,
            beta_intra: self.beta_intra,
            alpha_inter: self.alpha_inter,
            beta_inter: self.beta_inter,
            compute_rate: self.compute_rate,
        };
        let flags = FileConfig {
            n: self.n,
            m: self.m,
            t: self.t,
            u: self.u,
            r: self.r,
            b: self.b,
            l: self.l,
            h: self.h,
            d: self.d,
            strategies: self.strategies.clone(),
            seed: self.seed,
            numeric: self.numeric.clone(),
            ring_variant: self.ring_variant,
            model: (model != ModelOverrides::default()).then_some(model),
            model_file: self.model_file.clone(),
            out: self.out.clone(),
            max_n: self.max_n,
        };
        Ok(base.overlay(flags))
    }
}

/// Outcome of a command that ran to completion.
pub struct Outcome {
    pub body: String,
    pub passed: bool,
    pub summary: Vec<String>,
}

fn run(cli: Cli) -> Result<Outcome, ConfigError> {
    let args = match &cli.command {
        Command::Verify(a) | Command::Volumes(a) | Command::Lemma(a) | Command::Simulate(a) | Command::Schedule(a) => a,
    };
    let file = args.file_config()?;
    let out = file.out.clone();
    let json = args.format.unwrap_or(Format::Json);
    let dir = args.trace_dir.as_deref();
    let outcome = match &cli.command {
        Command::Verify(_) => commands::verify(file, json, dir)?,
        Command::Volumes(_) => commands::volumes(file, json)?,
        Command::Lemma(_) => commands::lemma(file, args.format.unwrap_or(Format::Csv))?,
        Command::Simulate(_) => commands::simulate(file, json, args.assert, dir)?,
        Command::Schedule(_) => commands::schedule(file, json)?,
    };
    match out {
        Some(path) => std::fs::write(&path, &outcome.body)
            .map_err(|e| ConfigError(format!("cannot write {}: {e}", path.display())))?,
        None => {
            // A closed pipe (e.g. `| head`) is not an error.
            let mut stdout = std::io::stdout().lock();
            if let Err(e) = stdout.write_all(outcome.body.as_bytes()).and_then(|_| stdout.flush()) {
                if e.kind() != std::io::ErrorKind::BrokenPipe {
                    return Err(ConfigError(format!("cannot write report: {e}")));
                }
            }
        }
    }
    Ok(outcome)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(outcome) => {
            for line in &outcome.summary {
                eprintln!("{line}");
            }
            if outcome.passed {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
        Err(e) => {
            eprintln!("config error: {e}");
            ExitCode::from(2)
        }
    }
}
