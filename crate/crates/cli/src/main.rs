//! `patchtrack` command-line front end.
//!
//! Every subcommand reads an optional `--config` file of `key = value`
//! lines, then applies `--set key=value` overrides in order. Exit codes:
//! 0 success, 1 usage or configuration error, 2 data error, 3 numeric
//! failure.

mod commands;
mod keys;

use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::LazyLock;

use clap::{Args, Parser, Subcommand};
use patchtrack::config::KeyValues;
use patchtrack::net::CHECKPOINT_VERSION;
use patchtrack::Error;

static VERSION: LazyLock<String> =
    LazyLock::new(|| format!("{} (checkpoint format {CHECKPOINT_VERSION})", env!("CARGO_PKG_VERSION")));

#[derive(Parser)]
#[command(name = "patchtrack", version = VERSION.as_str(), about = "Sparse feature tracking with learned patch descriptors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Configuration file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one setting; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with exact ground truth.
    Synth(Common),
    /// Dump Lucas–Kanade pseudo-labels for a manifest.
    Label(Common),
    /// Train the descriptor network.
    Train(Common),
    /// Match keypoints between images or through a clip; writes TSV.
    Track(Common),
    /// Mean matching accuracy over a manifest or HPatches folder.
    Eval(Common),
    /// FLOP and throughput benchmark.
    Bench(Common),
    /// Summarise a checkpoint or a fresh network.
    Info(Common),
}

enum Failure {
    Usage(String),
    Run(Error),
}

fn settings(c: &Common) -> Result<KeyValues, Failure> {
    let mut kv = match &c.config {
        Some(p) => KeyValues::load(p).map_err(|e| Failure::Usage(format!("cannot read config: {e}")))?,
        None => KeyValues::new(),
    };
    for s in &c.set {
        kv.apply_override(s).map_err(|e| Failure::Usage(e.to_string()))?;
    }
    Ok(kv)
}

fn run(cli: Cli) -> Result<(), Failure> {
    let (common, f): (&Common, fn(KeyValues) -> patchtrack::Result<()>) = match &cli.command {
        Command::Synth(c) => (c, commands::synth),
        Command::Label(c) => (c, commands::label),
        Command::Train(c) => (c, commands::train_cmd),
        Command::Track(c) => (c, commands::track),
        Command::Eval(c) => (c, commands::eval),
        Command::Bench(c) => (c, commands::bench_cmd),
        Command::Info(c) => (c, commands::info),
    };
    f(settings(common)?).map_err(Failure::Run)
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) => 1,
        Error::NonFinite(_) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
