//! `aps`: overlap analysis, sampling demos, training and probing.

mod analyze;
mod demo;
mod train;

use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser, Debug)]
#[command(name = "aps", version, about = "Asymmetric patch sampling toolkit")]
struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// TOML config file; unknown keys are rejected.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Overrides the seed in the config.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Validate and echo the config without doing the work.
    #[arg(long)]
    pub dry_run: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Analytic vs Monte Carlo overlap expectations, plus density curves.
    Analyze(Common),
    /// Renders one asymmetric positive pair as P6 images.
    Demo(demo::DemoArgs),
    /// Trains a model and writes metrics, checkpoints and a probe report.
    Train(train::TrainArgs),
    /// kNN probe of a saved checkpoint.
    Probe(train::ProbeArgs),
}

/// Short category for the one-line error report.
fn error_kind(err: &anyhow::Error) -> &'static str {
    use aps_core::Error as E;
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::InvalidArgument { .. } | E::Config(_) => "usage",
                E::Io(_) => "io",
                E::Corrupt(_) => "corrupt",
                E::VersionMismatch { .. } => "version",
                E::NonFinite { .. } => "non_finite",
                _ => "internal",
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return "io";
        }
        if cause.downcast_ref::<toml::de::Error>().is_some() {
            return "usage";
        }
    }
    "internal"
}

fn report(kind: &str, message: &str) {
    let flat: String = message.split_whitespace().collect::<Vec<_>>().join(" ");
    eprintln!("error kind={kind}: {flat}");
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let msg = e.to_string();
            report("usage", msg.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: "));
            return ExitCode::from(2);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let result = match cli.command {
        Command::Analyze(c) => analyze::run(&c),
        Command::Demo(a) => demo::run(&a),
        Command::Train(a) => train::run_train(&a),
        Command::Probe(a) => train::run_probe(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = error_kind(&e);
            report(kind, &format!("{e:#}"));
            ExitCode::from(if kind == "usage" { 2 } else { 1 })
        }
    }
}
